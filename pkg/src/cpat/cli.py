"""Command-line operator surface.

Subcommands cover every pipeline stage: synthetic corpus generation,
training, single-model evaluation, the train/test perturbation ablation,
the full replication grid, a self-check battery, and plotting of results
CSVs. Exit codes: 0 success, 2 configuration error, 3 runtime error,
4 failed self-check.
"""

from __future__ import annotations

import argparse
import logging
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, ExperimentConfig, load_config
from .datagen import build_world, generate_corpus, load_corpus, oracle_transition, save_corpus, unseen_pairs
from .evaluation import (
    AblationMode,
    ResultRow,
    ablation_run,
    all_pairs,
    mae_on_pairs,
    read_results_csv,
    run_replications,
    summarize,
    write_results_csv,
    write_summary_csv,
)
from .inference import PerturbMode, model_transition_matrix
from .models import ModelParams, init_model_params
from .numerics import rng_new
from .training import mle_score_norm, psi_mean, train, train_mle_baseline

log = logging.getLogger("cpat")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
EXIT_CHECK = 4


def _echo_config(config: ExperimentConfig) -> None:
    log.info("cpat %s", __version__)
    for line in config.to_text().rstrip().splitlines():
        log.info("config: %s", line)


def _build_world(config: ExperimentConfig, seed: int):
    return build_world(
        rng_new(seed).split("world"),
        config.vocab_size, config.embed_dim, config.latent_dim, config.hidden_dim, config.alpha,
    )


def cmd_gen_data(args) -> int:
    config = load_config(args.config)
    seed = config.seed if args.seed is None else args.seed
    _echo_config(config)
    world = _build_world(config, seed)
    corpus = generate_corpus(world, rng_new(seed).split("corpus"), config.n_sequences, config.seq_len)
    save_corpus(args.out, corpus, config.vocab_size, seed)
    log.info("wrote %d sequences of length %d to %s", corpus.n, config.seq_len, args.out)
    return EXIT_OK


def _load_or_generate_corpus(config: ExperimentConfig, seed: int, data_path: str | None, world):
    if data_path is not None:
        corpus, header = load_corpus(data_path)
        if header["vocab"] != config.vocab_size:
            raise ConfigError(
                f"corpus vocab {header['vocab']} does not match configured vocab_size {config.vocab_size}"
            )
        return corpus
    return generate_corpus(world, rng_new(seed).split("corpus"), config.n_sequences, config.seq_len)


def cmd_train(args) -> int:
    config = load_config(args.config)
    seed = config.seed if args.seed is None else args.seed
    if args.debias_start is not None:
        raw = args.debias_start
        config.debias_start_step = "never" if raw == "never" else int(raw)
        config.validate()
    _echo_config(config)
    world = _build_world(config, seed)
    corpus = _load_or_generate_corpus(config, seed, args.data, world)
    if args.mle:
        theta_hat, history = train_mle_baseline(
            corpus, world.table, config.dims(), config.train_config(seed)
        )
        fresh = init_model_params(rng_new(seed).split("fresh-beta"), config.dims())
        gamma_hat = ModelParams(theta=theta_hat, beta=fresh.beta)
    else:
        gamma_hat, history = train(corpus, world.table, config.dims(), config.train_config(seed))
    save_checkpoint(args.out, gamma_hat, meta={"seed": seed, "steps": len(history)})
    log.info("wrote checkpoint %s after %d steps", args.out, len(history))
    if args.history:
        with open(args.history, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("step,epoch,loss,psi_norm,debias,wall_s\n")
            for r in history.records:
                fh.write(f"{r.step},{r.epoch},{r.loss:.10g},{r.psi_norm:.10g},"
                         f"{int(r.debias)},{r.wall_s:.10g}\n")
        log.info("wrote history %s", args.history)
    return EXIT_OK


def cmd_eval(args) -> int:
    config = load_config(args.config)
    seed = config.seed if args.seed is None else args.seed
    _echo_config(config)
    gamma, _ = load_checkpoint(args.checkpoint, expect_dims=config.dims())
    world = _build_world(config, seed)
    corpus = _load_or_generate_corpus(config, seed, args.data, world)
    mode = PerturbMode(args.mode)
    root = rng_new(seed)
    m_alpha = oracle_transition(world, config.n_mc, root.split("oracle"))
    m_hat = model_transition_matrix(gamma, world.table, config.n_mc, root.split("matrix"), mode)
    unseen = unseen_pairs(corpus, config.vocab_size)
    if mode is PerturbMode.PERTURBED:
        method = "checkpoint_perturbed"
        _, psi = psi_mean(gamma, world.table, corpus.sequences, root.split("psi"), config.K)
    else:
        method = "checkpoint_unperturbed"
        psi = mle_score_norm(gamma.theta, world.table, corpus.sequences)
    row = ResultRow(
        vocab_size=config.vocab_size, alpha=config.alpha, method=method, rep=0, seed=seed,
        mae_unseen=mae_on_pairs(m_hat, m_alpha, unseen) if unseen else float("nan"),
        mae_all=mae_on_pairs(m_hat, m_alpha, all_pairs(config.vocab_size)),
        psi_norm=psi, wall_s=0.0,
    )
    write_results_csv(args.out, [row])
    log.info("wrote %s (mae_unseen=%.6g, mae_all=%.6g)", args.out, row.mae_unseen, row.mae_all)
    return EXIT_OK


def cmd_ablate(args) -> int:
    config = load_config(args.config)
    seed = config.seed if args.seed is None else args.seed
    _echo_config(config)
    modes = [AblationMode(m.strip()) for m in args.modes.split(",") if m.strip()]
    world = _build_world(config, seed)
    rows = ablation_run(world, config.run_settings(), modes, rng_new(seed).split("ablation"))
    write_results_csv(args.out, rows)
    log.info("wrote %s with %d ablation rows", args.out, len(rows))
    return EXIT_OK


def cmd_grid(args) -> int:
    config = load_config(args.config)
    seed = config.seed if args.seed is None else args.seed
    jobs = config.jobs if args.jobs is None else args.jobs
    _echo_config(config)
    out_dir = Path(args.out_dir if args.out_dir is not None else config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config_resolved.txt").write_text(config.to_text(), encoding="utf-8")
    rows, summary = run_replications(
        config.grid_vocab_sizes, config.grid_alphas, config.grid_methods,
        config.n_reps, seed, config.run_settings(), jobs=jobs,
    )
    write_results_csv(out_dir / "results.csv", rows)
    write_summary_csv(out_dir / "summary.csv", summary)
    log.info("wrote %d rows to %s", len(rows), out_dir / "results.csv")
    return EXIT_OK


def cmd_plot(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    matplotlib.rcParams["svg.hashsalt"] = "cpat"  # deterministic element ids
    import matplotlib.pyplot as plt

    rows = read_results_csv(args.results)
    if not rows:
        raise ValueError(f"{args.results}: no result rows to plot")
    summary = summarize(rows)
    vocabs = sorted({s.vocab_size for s in summary})
    methods = sorted({s.method for s in summary})
    fig, axes = plt.subplots(1, len(vocabs), figsize=(4 * len(vocabs), 3.4), squeeze=False, sharey=False)
    for ax, vocab in zip(axes[0], vocabs):
        for method in methods:
            cells = sorted((s for s in summary if s.vocab_size == vocab and s.method == method),
                           key=lambda s: s.alpha)
            if not cells:
                continue
            xs = [s.alpha for s in cells]
            ys = np.array([s.mean_mae_unseen for s in cells])
            band = 2 * np.array([s.se_mae_unseen for s in cells])
            ax.plot(xs, ys, marker="o", label=method)
            ax.fill_between(xs, ys - band, ys + band, alpha=0.2)
        ax.set_title(f"vocab = {vocab}")
        ax.set_xlabel("perturbation strength")
        ax.set_ylabel("out-of-sample MAE")
    axes[0][-1].legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(args.out, format="svg", metadata={"Date": None})
    points_path = args.points or (str(args.out) + ".points.csv")
    with open(points_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("vocab,alpha,method,n_reps,mean_mae_unseen,se_mae_unseen\n")
        for s in summary:
            fh.write(f"{s.vocab_size},{s.alpha:.10g},{s.method},{s.n_reps},"
                     f"{s.mean_mae_unseen:.10g},{s.se_mae_unseen:.10g}\n")
    log.info("wrote %s and %s", args.out, points_path)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Self-check battery
# ---------------------------------------------------------------------------


def run_invariant_checks() -> list[tuple[str, bool, str]]:
    """Fast invariant battery over every module; returns (name, ok, detail)."""
    from .datagen import fit_ground_truth_model
    from .models import (
        ModelDims,
        bigram_probs,
        build_embedding_table,
        ground_truth_perturbation,
        init_ground_truth_perturb,
        perturbation,
        score_log_prob,
        FlatSchema,
    )
    from .numerics import (
        categorical_sample,
        dirichlet_row,
        gaussian_vector,
        grad_check,
        softmax,
    )
    from .training import TrainConfig, capture_draws, expected_step_count, objective_with_draws

    results: list[tuple[str, bool, str]] = []

    def check(name: str, fn) -> None:
        try:
            detail = fn() or "ok"
            results.append((name, True, detail))
        except Exception as exc:  # noqa: BLE001 - report, don't crash the battery
            results.append((name, False, f"{type(exc).__name__}: {exc}"))

    def c_rng_determinism():
        a = gaussian_vector(rng_new(7), 100)
        b = gaussian_vector(rng_new(7), 100)
        c = gaussian_vector(rng_new(8), 100)
        assert np.array_equal(a, b) and not np.array_equal(a, c)

    def c_rng_split():
        root = rng_new(3)
        d1 = gaussian_vector(root.split("data"), 100)
        d2 = gaussian_vector(root.split("data"), 100)
        t1 = gaussian_vector(root.split("train"), 100)
        assert np.array_equal(d1, d2) and not np.array_equal(d1, t1)
        assert root.split("a").split("b").lineage == ("a", "b")

    def c_softmax():
        assert np.allclose(softmax(np.array([0.0, 0.0])), [0.5, 0.5])
        base = softmax(np.array([0.3, -1.2, 2.0]))
        shifted = softmax(np.array([0.3, -1.2, 2.0]) + 7.0)
        assert np.max(np.abs(base - shifted)) < 1e-12
        extreme = softmax(np.array([1000.0, 0.0]))
        assert np.isfinite(extreme).all() and abs(extreme[0] - 1.0) < 1e-12

    def c_dirichlet():
        p = dirichlet_row(rng_new(1).split("d"), 0.5, 50)
        assert abs(p.sum() - 1.0) <= 1e-12 and p.min() >= 0

    def c_categorical():
        probs = np.zeros(5)
        probs[3] = 1.0
        s = rng_new(2).split("c")
        assert all(categorical_sample(s, probs) == 3 for _ in range(20))

    def c_gaussian_moments():
        x = gaussian_vector(rng_new(11).split("g"), 100_000)
        assert abs(x.mean()) < 4 / np.sqrt(100_000)
        assert abs(x.var() - 1.0) < 0.02

    def c_grad_check_quadratic():
        f = lambda x: (0.5 * float(x @ x), x)
        err = grad_check(f, np.array([0.3, -1.1, 2.2]), 1e-5)
        assert err <= 1e-8, f"error {err}"
        return f"max rel err {err:.2e}"

    def _tiny_setup(seed=5):
        dims = ModelDims(vocab_size=6, embed_dim=4, latent_dim=3, hidden_dim=5,
                         gen_hidden_dim=5, dropout_rate=0.0)
        root = rng_new(seed)
        table = build_embedding_table(root.split("table"), 6, 4)
        gamma = init_model_params(root.split("params"), dims)
        return dims, table, gamma, root

    def c_score_gradient():
        dims, table, gamma, root = _tiny_setup()
        schema = FlatSchema(dims)
        batch = [np.array([0, 2, 4, 1]), np.array([3, 5, 1])]
        draws = capture_draws(gamma, table, batch, root.split("draws"), K=2, debias=True,
                              use_dropout=False)

        def f(flat):
            return objective_with_draws(schema.unpack(flat), table, batch, draws)

        err = grad_check(f, schema.pack(gamma), 1e-5)
        assert err <= 1e-4, f"error {err}"
        return f"max rel err {err:.2e}"

    def c_dropout_identity():
        dims, table, gamma, root = _tiny_setup()
        x = table.table[2]
        eval_probs = bigram_probs(gamma.theta, x)
        ones = np.ones(dims.embed_dim)
        train_probs = bigram_probs(gamma.theta, x, mask=ones)
        assert np.array_equal(eval_probs, train_probs)

    def c_zero_generator():
        dims, table, gamma, root = _tiny_setup()
        gamma.beta.Wg1[:] = 0
        gamma.beta.bg1[:] = 0
        gamma.beta.Wg2[:] = 0
        gamma.beta.bg2[:] = 0
        out = perturbation(gamma.beta, table.table[:3].T, np.zeros(3))
        assert np.all(out == 0.0)

    def c_gt_alpha_scaling():
        dims, table, _, root = _tiny_setup()
        beta0 = init_ground_truth_perturb(root.split("gt"), 4, 3, 5)
        w = gaussian_vector(root.split("w"), 3)
        x = table.table[0]
        assert np.all(ground_truth_perturbation(beta0, x, w, 0.0) == 0.0)
        one = ground_truth_perturbation(beta0, x, w, 1.0)
        two = ground_truth_perturbation(beta0, x, w, 2.0)
        assert np.array_equal(two, 2.0 * one)

    def c_embedding_rank():
        t = build_embedding_table(rng_new(4).split("emb"), 8, 12)
        smin = np.linalg.svd(t.table, compute_uv=False)[-1]
        assert smin > 1e-8

    def c_world_determinism():
        w1 = build_world(rng_new(9).split("w"), 6, 8, 3, 5, 0.4)
        w2 = build_world(rng_new(9).split("w"), 6, 8, 3, 5, 0.4)
        assert np.array_equal(w1.M0, w2.M0)
        assert np.array_equal(w1.theta0.W2, w2.theta0.W2)
        assert np.array_equal(w1.beta0.W1, w2.beta0.W1)

    def c_fit_tolerance():
        w = build_world(rng_new(10).split("w"), 6, 8, 3, 5, 0.0)
        assert w.fit_residual <= 1e-6, f"residual {w.fit_residual}"
        return f"residual {w.fit_residual:.2e}"

    def c_oracle_alpha0():
        w = build_world(rng_new(10).split("w"), 6, 8, 3, 5, 0.0)
        m = oracle_transition(w, 10, rng_new(0).split("o"))
        tv = 0.5 * np.abs(m - w.M0).sum(axis=1).max()
        assert tv <= 1e-6, f"tv {tv}"
        return f"max row TV {tv:.2e}"

    def c_oracle_rows():
        w = build_world(rng_new(10).split("w"), 6, 8, 3, 5, 0.7)
        m = oracle_transition(w, 200, rng_new(1).split("o"))
        assert np.abs(m.sum(axis=1) - 1.0).max() <= 1e-12

    def c_step_count():
        cfg = TrainConfig(K=1, batch_size=500, epochs=25, duplicate_corpus=True, seed=0)
        assert expected_step_count(500, cfg) == 50

    def c_checkpoint_roundtrip():
        dims, table, gamma, root = _tiny_setup()
        schema = FlatSchema(dims)
        with tempfile.TemporaryDirectory() as tmp:
            p = Path(tmp) / "ck.bin"
            save_checkpoint(p, gamma, meta={"k": 1})
            loaded, _ = load_checkpoint(p)
            assert np.array_equal(schema.pack(loaded), schema.pack(gamma))

    def c_mae():
        a = np.array([[0.5, 0.5], [0.2, 0.8]])
        b = np.array([[0.5, 0.5], [0.2, 0.8]])
        assert mae_on_pairs(a, b, all_pairs(2)) == 0.0
        b2 = b.copy()
        b2[0, 1] += 0.1
        assert abs(mae_on_pairs(a, b2, {(0, 1)}) - 0.1) < 1e-15

    def c_unseen_partition():
        from .datagen import Corpus

        corpus = Corpus(sequences=[np.array([0, 1])], max_len=2)
        un = unseen_pairs(corpus, 2)
        assert un == {(0, 0), (1, 0), (1, 1)}
        assert len(un) + len(corpus.seen_pairs) == 4

    for name, fn in [
        ("rng-determinism", c_rng_determinism),
        ("rng-split", c_rng_split),
        ("softmax-properties", c_softmax),
        ("dirichlet-simplex", c_dirichlet),
        ("categorical-onehot", c_categorical),
        ("gaussian-moments", c_gaussian_moments),
        ("grad-check-quadratic", c_grad_check_quadratic),
        ("score-gradient", c_score_gradient),
        ("dropout-identity", c_dropout_identity),
        ("zero-generator-perturbation", c_zero_generator),
        ("ground-truth-alpha-scaling", c_gt_alpha_scaling),
        ("embedding-rank", c_embedding_rank),
        ("world-determinism", c_world_determinism),
        ("ground-truth-fit", c_fit_tolerance),
        ("oracle-alpha0-reduction", c_oracle_alpha0),
        ("oracle-row-sums", c_oracle_rows),
        ("step-count-arithmetic", c_step_count),
        ("checkpoint-roundtrip", c_checkpoint_roundtrip),
        ("mae-basics", c_mae),
        ("unseen-pair-partition", c_unseen_partition),
    ]:
        check(name, fn)
    return results


def cmd_check(args) -> int:
    config = load_config(args.config)
    _echo_config(config)
    results = run_invariant_checks()
    failed = 0
    for name, ok, detail in results:
        print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
        failed += 0 if ok else 1
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return EXIT_OK if failed == 0 else EXIT_CHECK


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cpat", description=__doc__)
    parser.add_argument("--version", action="version", version=f"cpat {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, needs_out=True):
        p.add_argument("--config", default=None, help="key=value config file (defaults if omitted)")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        if needs_out:
            p.add_argument("--out", required=True, help="output path")

    p = sub.add_parser("gen-data", help="generate and write a synthetic corpus")
    add_common(p)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    add_common(p)
    p.add_argument("--data", default=None, help="corpus file (generated from the config seed if omitted)")
    p.add_argument("--debias-start", default=None, help="override debias_start_step (integer or 'never')")
    p.add_argument("--history", default=None, help="write per-step history CSV here")
    p.add_argument("--mle", action="store_true", help="train the no-perturbation likelihood baseline")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint against the oracle matrix")
    add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", default=None, help="corpus file defining the unseen-pair set")
    p.add_argument("--mode", choices=[m.value for m in PerturbMode], default="perturbed")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="run the train/test perturbation ablation")
    add_common(p)
    p.add_argument("--modes", default="full,train_only,test_only,none")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("grid", help="run the replication grid")
    add_common(p, needs_out=False)
    p.add_argument("--out-dir", default=None, help="directory for results.csv / summary.csv")
    p.add_argument("--jobs", type=int, default=None, help="worker processes for grid cells")
    p.set_defaults(fn=cmd_grid)

    p = sub.add_parser("check", help="run the invariant self-check battery")
    add_common(p, needs_out=False)
    p.set_defaults(fn=cmd_check)

    p = sub.add_parser("plot", help="plot a results CSV (SVG + plotted-points CSV)")
    p.add_argument("--results", required=True)
    p.add_argument("--out", required=True, help="output SVG path")
    p.add_argument("--points", default=None, help="plotted-points CSV (defaults next to the SVG)")
    p.set_defaults(fn=cmd_plot)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    try:
        return args.fn(args)
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except (CheckpointError, OSError, ValueError, RuntimeError, FloatingPointError) as exc:
        log.error("runtime error: %s", exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
