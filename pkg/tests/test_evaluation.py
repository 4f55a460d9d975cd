import numpy as np
import pytest

from cpat.datagen import build_world, generate_corpus
from cpat.evaluation import (
    AblationMode,
    ResultRow,
    RunSettings,
    ablation_run,
    all_pairs,
    derive_cell_seed,
    mae_on_pairs,
    read_results_csv,
    run_replications,
    standard_error,
    summarize,
    write_results_csv,
)
from cpat.inference import PerturbMode, model_transition_matrix
from cpat.models import ModelParams, init_model_params
from cpat.numerics import rng_new
from cpat.training import TrainConfig, train, train_mle_baseline


def fast_settings(**overrides):
    defaults = dict(
        embed_dim=8, latent_dim=3, hidden_dim=5, gen_hidden_dim=5, dropout_rate=0.1,
        n_sequences=12, seq_len=5, n_mc=300,
        train=TrainConfig(K=2, batch_size=6, epochs=2, lr_theta=1e-2, lr_beta=5e-5, seed=0),
    )
    defaults.update(overrides)
    return RunSettings(**defaults)


class TestMaeOnPairs:
    def test_identical_matrices(self):
        m = np.array([[0.4, 0.6], [0.9, 0.1]])
        assert mae_on_pairs(m, m, all_pairs(2)) == 0.0

    def test_hand_arithmetic(self):
        a = np.array([[0.4, 0.6], [0.9, 0.1]])
        b = a.copy()
        b[0, 1] -= 0.1
        assert np.isclose(mae_on_pairs(a, b, {(0, 1)}), 0.1)

    def test_mean_at_most_max(self):
        rng = rng_new(1)
        a = rng.uniform((5, 5))
        b = rng.uniform((5, 5))
        assert mae_on_pairs(a, b, all_pairs(5)) <= np.abs(a - b).max() + 1e-15

    def test_symmetric(self):
        rng = rng_new(2)
        a = rng.uniform((4, 4))
        b = rng.uniform((4, 4))
        pairs = {(0, 1), (2, 3), (3, 0)}
        assert mae_on_pairs(a, b, pairs) == mae_on_pairs(b, a, pairs)

    def test_triangle_inequality(self):
        rng = rng_new(3)
        a, b, c = (rng.uniform((4, 4)) for _ in range(3))
        pairs = all_pairs(4)
        assert mae_on_pairs(a, c, pairs) <= mae_on_pairs(a, b, pairs) + mae_on_pairs(b, c, pairs) + 1e-15

    def test_iteration_order_irrelevant(self):
        rng = rng_new(4)
        a = rng.uniform((6, 6))
        b = rng.uniform((6, 6))
        pairs = [(5, 1), (0, 0), (3, 3), (2, 4)]
        assert mae_on_pairs(a, b, pairs) == mae_on_pairs(a, b, list(reversed(pairs)))

    def test_empty_pairs_rejected(self):
        m = np.eye(2)
        with pytest.raises(ValueError):
            mae_on_pairs(m, m, set())

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            mae_on_pairs(np.eye(2), np.eye(3), {(0, 0)})


class TestSummaries:
    def test_se_matches_two_pass_reference(self):
        rng = rng_new(5)
        values = rng.uniform(10)
        mean = values.sum() / 10
        var = ((values - mean) ** 2).sum() / 9
        reference = np.sqrt(var / 10)
        assert abs(standard_error(values) - reference) <= 1e-12

    def test_summarize_groups_by_cell(self):
        rows = [
            ResultRow(10, 0.5, "mle", rep, rep, 0.1 * (rep + 1), 0.2, 0.0, 1.0)
            for rep in range(4)
        ]
        summary = summarize(rows)
        assert len(summary) == 1
        s = summary[0]
        assert s.n_reps == 4
        assert np.isclose(s.mean_mae_unseen, 0.25)

    def test_unregistered_method_rejected(self):
        with pytest.raises(ValueError):
            ResultRow(10, 0.5, "made_up_method", 0, 0, 0.1, 0.1, 0.0, 1.0)


class TestDeriveCellSeed:
    def test_stable(self):
        assert derive_cell_seed(7, 50, 0.5, 3) == derive_cell_seed(7, 50, 0.5, 3)

    def test_distinct_cells(self):
        seeds = {
            derive_cell_seed(7, 50, 0.5, 0),
            derive_cell_seed(7, 50, 0.5, 1),
            derive_cell_seed(7, 50, 1.0, 0),
            derive_cell_seed(7, 100, 0.5, 0),
            derive_cell_seed(8, 50, 0.5, 0),
        }
        assert len(seeds) == 5


class TestRunReplications:
    def test_row_and_summary_counts(self):
        rows, summary = run_replications([6], [0.4], ["mle"], 2, 11, fast_settings())
        assert len(rows) == 2 and len(summary) == 1
        assert summary[0].n_reps == 2

    def test_identical_base_seed_identical_rows(self):
        a, _ = run_replications([6], [0.4], ["mle"], 2, 11, fast_settings())
        b, _ = run_replications([6], [0.4], ["mle"], 2, 11, fast_settings())
        for x, y in zip(a, b):
            assert (x.mae_unseen, x.mae_all, x.psi_norm, x.seed) == (y.mae_unseen, y.mae_all, y.psi_norm, y.seed)

    def test_methods_share_world_within_cell(self):
        rows, _ = run_replications([6], [0.4], ["mle", "perturb_nodebias"], 1, 13, fast_settings())
        assert rows[0].seed == rows[1].seed  # same cell seed -> same world and corpus

    def test_jobs_do_not_change_rows(self):
        a, _ = run_replications([6], [0.4], ["mle"], 2, 17, fast_settings(), jobs=1)
        b, _ = run_replications([6], [0.4], ["mle"], 2, 17, fast_settings(), jobs=2)
        for x, y in zip(a, b):
            assert (x.rep, x.mae_unseen, x.mae_all) == (y.rep, y.mae_unseen, y.mae_all)

    def test_mle_consistency_trend(self):
        # with no data-generating perturbation the likelihood fit converges to
        # the oracle matrix as the corpus grows
        maes = []
        for n in (40, 160, 640):
            settings = fast_settings(
                n_sequences=n, n_mc=10,
                train=TrainConfig(K=1, batch_size=40, epochs=15, lr_theta=1e-2,
                                  duplicate_corpus=False, seed=0),
            )
            rows, _ = run_replications([6], [0.0], ["mle"], 3, 23, settings)
            maes.append(np.mean([r.mae_all for r in rows]))
        assert maes[2] < maes[0], maes

    def test_unknown_method_rejected(self):
        with pytest.raises(ValueError):
            run_replications([6], [0.4], ["not_a_method"], 1, 1, fast_settings())


class TestAblationRun:
    def test_none_mode_equals_manual_mle(self):
        world = build_world(rng_new(31).split("world"), 6, 8, 3, 5, 0.4)
        settings = fast_settings()
        rng = rng_new(32).split("ablation")
        rows = ablation_run(world, settings, [AblationMode.NONE], rng)

        # replay the internal derivations
        rng2 = rng_new(32).split("ablation")
        corpus = generate_corpus(world, rng2.split("corpus"), settings.n_sequences, settings.seq_len)
        from dataclasses import replace

        cfg = replace(settings.train, seed=rng2.child_seed("train-mle"), duplicate_corpus=False)
        theta_hat, _ = train_mle_baseline(corpus, world.table, settings.dims(6), cfg)
        fresh = init_model_params(rng2.split("fresh-beta"), settings.dims(6))
        gamma = ModelParams(theta=theta_hat, beta=fresh.beta)
        m_hat = model_transition_matrix(gamma, world.table, settings.n_mc,
                                        rng2.split("matrix|none"), PerturbMode.UNPERTURBED)
        from cpat.datagen import oracle_transition, unseen_pairs

        m_alpha = oracle_transition(world, settings.n_mc, rng2.split("oracle"))
        expected = mae_on_pairs(m_hat, m_alpha, unseen_pairs(corpus, 6))
        assert rows[0].mae_unseen == expected

    def test_full_and_train_only_share_training(self):
        world = build_world(rng_new(33).split("world"), 6, 8, 3, 5, 0.4)
        settings = fast_settings()
        rng = rng_new(34).split("ablation")
        rows = ablation_run(world, settings, [AblationMode.FULL, AblationMode.TRAIN_ONLY], rng)

        rng2 = rng_new(34).split("ablation")
        corpus = generate_corpus(world, rng2.split("corpus"), settings.n_sequences, settings.seq_len)
        from dataclasses import replace

        cfg = replace(settings.train, seed=rng2.child_seed("train-perturb"))
        gamma_hat, _ = train(corpus, world.table, settings.dims(6), cfg)
        m_full = model_transition_matrix(gamma_hat, world.table, settings.n_mc,
                                         rng2.split("matrix|full"), PerturbMode.PERTURBED)
        m_train_only = model_transition_matrix(gamma_hat, world.table, settings.n_mc,
                                               rng2.split("matrix|train_only"), PerturbMode.UNPERTURBED)
        from cpat.datagen import oracle_transition, unseen_pairs

        m_alpha = oracle_transition(world, settings.n_mc, rng2.split("oracle"))
        unseen = unseen_pairs(corpus, 6)
        assert rows[0].mae_unseen == mae_on_pairs(m_full, m_alpha, unseen)
        assert rows[1].mae_unseen == mae_on_pairs(m_train_only, m_alpha, unseen)

    def test_all_four_modes_emit_rows(self):
        world = build_world(rng_new(35).split("world"), 6, 8, 3, 5, 0.4)
        rows = ablation_run(world, fast_settings(), list(AblationMode), rng_new(36).split("a"))
        assert [r.method for r in rows] == ["full", "train_only", "test_only", "none"]

    def test_empty_modes_rejected(self):
        world = build_world(rng_new(35).split("world"), 6, 8, 3, 5, 0.4)
        with pytest.raises(ValueError):
            ablation_run(world, fast_settings(), [], rng_new(1))


class TestResultsCsv:
    def test_roundtrip(self, tmp_path):
        rows = [
            ResultRow(6, 0.4, "mle", 0, 123, 0.125, 0.25, 0.5, 1.5),
            ResultRow(6, 0.4, "perturb_debias10", 0, 123, 0.1, 0.2, 0.3, 2.5),
        ]
        path = tmp_path / "r.csv"
        write_results_csv(path, rows)
        loaded = read_results_csv(path)
        assert len(loaded) == 2
        assert loaded[0].mae_unseen == 0.125
        assert loaded[1].method == "perturb_debias10"

    def test_header_and_line_endings(self, tmp_path):
        path = tmp_path / "r.csv"
        write_results_csv(path, [ResultRow(6, 0.4, "mle", 0, 1, 0.1, 0.2, 0.3, 0.4)])
        raw = path.read_bytes()
        assert raw.startswith(b"vocab,alpha,method,rep,seed,mae_unseen,mae_all,psi_norm,wall_s\n")
        assert b"\r" not in raw

    def test_ten_significant_digits(self, tmp_path):
        path = tmp_path / "r.csv"
        value = 0.12345678949999
        write_results_csv(path, [ResultRow(6, 0.4, "mle", 0, 1, value, 0.2, 0.3, 0.4)])
        text = path.read_text()
        assert "0.1234567895" in text
