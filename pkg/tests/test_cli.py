import numpy as np
import pytest

from cpat.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from cpat.cli import EXIT_CHECK, EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, main
from cpat.config import ConfigError, ExperimentConfig, parse_config
from cpat.datagen import load_corpus
from cpat.evaluation import read_results_csv
from cpat.models import FlatSchema, ModelDims, init_model_params
from cpat.numerics import rng_new

FAST_CONFIG = """
# small instance for integration tests
vocab_size = 6
embed_dim = 8
latent_dim = 3
hidden_dim = 5
gen_hidden_dim = 5
alpha = 0.4
n_sequences = 10
seq_len = 5
K = 2
batch_size = 5
epochs = 2
n_mc = 200
n_reps = 2
grid_vocab_sizes = 6
grid_alphas = 0.4
grid_methods = mle,perturb_debias10
"""


@pytest.fixture
def fast_config(tmp_path):
    path = tmp_path / "config.txt"
    path.write_text(FAST_CONFIG)
    return str(path)


class TestParseConfig:
    def test_empty_text_gives_defaults(self):
        cfg = parse_config("")
        assert cfg.K == 5
        assert cfg.lr_theta == 1e-2 and cfg.lr_beta == 5e-5
        assert cfg.batch_size == 500 and cfg.epochs == 25
        assert cfg.embed_dim == 50 and cfg.latent_dim == 8 and cfg.hidden_dim == 64
        assert cfg.n_sequences == 500 and cfg.seq_len == 10
        assert cfg.vocab_size == 50 and cfg.dropout == 0.1
        assert cfg.duplicate_corpus is True

    def test_zero_k_rejected(self):
        with pytest.raises(ConfigError):
            parse_config("K = 0")

    def test_alpha_override(self):
        assert parse_config("alpha = 0.6").alpha == 0.6

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError):
            parse_config("warp_factor = 9")

    def test_unparseable_value_rejected(self):
        with pytest.raises(ConfigError):
            parse_config("epochs = many")

    def test_comments_and_blanks_ignored(self):
        cfg = parse_config("\n# a comment\nK = 3  # trailing\n\n")
        assert cfg.K == 3

    def test_duplicate_key_rejected(self):
        with pytest.raises(ConfigError):
            parse_config("K = 3\nK = 4")

    def test_never_debias(self):
        assert parse_config("debias_start_step = never").debias_start_step == "never"

    def test_lists(self):
        cfg = parse_config("grid_vocab_sizes = 50,100\ngrid_alphas = 0,0.5\ngrid_methods = mle")
        assert cfg.grid_vocab_sizes == [50, 100]
        assert cfg.grid_alphas == [0.0, 0.5]
        assert cfg.grid_methods == ["mle"]

    def test_resolved_text_reparses(self):
        cfg = ExperimentConfig(K=3, alpha=0.7)
        again = parse_config(cfg.to_text())
        assert again == cfg


class TestCheckpoint:
    def _gamma(self):
        dims = ModelDims(6, 8, 3, 5, 5, 0.1)
        return init_model_params(rng_new(1).split("p"), dims), dims

    def test_roundtrip_bit_exact(self, tmp_path):
        gamma, dims = self._gamma()
        path = tmp_path / "ck.bin"
        save_checkpoint(path, gamma, meta={"note": "test"})
        loaded, header = load_checkpoint(path)
        schema = FlatSchema(dims)
        assert np.array_equal(schema.pack(loaded), schema.pack(gamma))
        assert header["meta"]["note"] == "test"

    def test_truncated_file_rejected(self, tmp_path):
        gamma, _ = self._gamma()
        path = tmp_path / "ck.bin"
        save_checkpoint(path, gamma)
        blob = path.read_bytes()
        path.write_bytes(blob[:-20])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_corrupted_payload_rejected(self, tmp_path):
        gamma, _ = self._gamma()
        path = tmp_path / "ck.bin"
        save_checkpoint(path, gamma)
        blob = bytearray(path.read_bytes())
        blob[-30] ^= 0xFF  # flip payload bits, keep length
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_wrong_magic_rejected(self, tmp_path):
        path = tmp_path / "ck.bin"
        path.write_bytes(b"NOPE!" + b"\x00" * 64)
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_dim_mismatch_rejected(self, tmp_path):
        gamma, _ = self._gamma()
        path = tmp_path / "ck.bin"
        save_checkpoint(path, gamma)
        other = ModelDims(12, 8, 3, 5, 5, 0.1)
        with pytest.raises(CheckpointError):
            load_checkpoint(path, expect_dims=other)

    def test_identical_content_identical_bytes(self, tmp_path):
        gamma, _ = self._gamma()
        p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
        save_checkpoint(p1, gamma, meta={"seed": 7})
        save_checkpoint(p2, gamma, meta={"seed": 7})
        assert p1.read_bytes() == p2.read_bytes()


class TestSubcommands:
    def test_gen_data(self, fast_config, tmp_path):
        out = tmp_path / "corpus.txt"
        assert main(["gen-data", "--config", fast_config, "--out", str(out)]) == EXIT_OK
        corpus, header = load_corpus(out)
        assert corpus.n == 10 and header["vocab"] == 6

    def test_train_deterministic_checkpoints(self, fast_config, tmp_path):
        a, b = tmp_path / "a.bin", tmp_path / "b.bin"
        assert main(["train", "--config", fast_config, "--seed", "7", "--out", str(a)]) == EXIT_OK
        assert main(["train", "--config", fast_config, "--seed", "7", "--out", str(b)]) == EXIT_OK
        assert a.read_bytes() == b.read_bytes()

    def test_train_history(self, fast_config, tmp_path):
        out = tmp_path / "m.bin"
        hist = tmp_path / "h.csv"
        assert main(["train", "--config", fast_config, "--out", str(out),
                     "--history", str(hist)]) == EXIT_OK
        lines = hist.read_text().splitlines()
        assert lines[0] == "step,epoch,loss,psi_norm,debias,wall_s"
        assert len(lines) == 1 + 2 * 4  # epochs * ceil(2*10/5)

    def test_train_debias_start_override(self, fast_config, tmp_path):
        out = tmp_path / "m.bin"
        hist = tmp_path / "h.csv"
        assert main(["train", "--config", fast_config, "--out", str(out),
                     "--history", str(hist), "--debias-start", "never"]) == EXIT_OK
        flags = [line.split(",")[4] for line in hist.read_text().splitlines()[1:]]
        assert set(flags) == {"0"}

    def test_eval_checkpoint(self, fast_config, tmp_path):
        ck = tmp_path / "m.bin"
        out = tmp_path / "row.csv"
        main(["train", "--config", fast_config, "--out", str(ck)])
        assert main(["eval", "--config", fast_config, "--checkpoint", str(ck),
                     "--out", str(out), "--mode", "perturbed"]) == EXIT_OK
        rows = read_results_csv(out)
        assert len(rows) == 1 and rows[0].method == "checkpoint_perturbed"

    def test_ablate(self, fast_config, tmp_path):
        out = tmp_path / "ab.csv"
        assert main(["ablate", "--config", fast_config, "--out", str(out)]) == EXIT_OK
        rows = read_results_csv(out)
        assert [r.method for r in rows] == ["full", "train_only", "test_only", "none"]

    def test_grid_counts(self, fast_config, tmp_path):
        out_dir = tmp_path / "grid"
        assert main(["grid", "--config", fast_config, "--out-dir", str(out_dir)]) == EXIT_OK
        rows = read_results_csv(out_dir / "results.csv")
        assert len(rows) == 2 * 2  # methods x reps
        summary_lines = (out_dir / "summary.csv").read_text().splitlines()
        assert len(summary_lines) == 1 + 2  # header + one per method

    def test_check_passes(self, fast_config, capsys):
        assert main(["check", "--config", fast_config]) == EXIT_OK
        out = capsys.readouterr().out
        assert "[PASS]" in out and "[FAIL]" not in out

    def test_plot(self, fast_config, tmp_path):
        out_dir = tmp_path / "grid"
        main(["grid", "--config", fast_config, "--out-dir", str(out_dir)])
        svg = tmp_path / "fig.svg"
        points = tmp_path / "points.csv"
        assert main(["plot", "--results", str(out_dir / "results.csv"),
                     "--out", str(svg), "--points", str(points)]) == EXIT_OK
        assert svg.read_text().lstrip().startswith("<?xml")
        lines = points.read_text().splitlines()
        assert lines[0] == "vocab,alpha,method,n_reps,mean_mae_unseen,se_mae_unseen"
        assert len(lines) == 3

    def test_plot_points_match_results(self, fast_config, tmp_path):
        # the plotted numbers are pure functions of the results rows
        out_dir = tmp_path / "grid"
        main(["grid", "--config", fast_config, "--out-dir", str(out_dir)])
        svg = tmp_path / "fig.svg"
        points = tmp_path / "points.csv"
        main(["plot", "--results", str(out_dir / "results.csv"),
              "--out", str(svg), "--points", str(points)])
        rows = read_results_csv(out_dir / "results.csv")
        from cpat.evaluation import summarize

        expected = {(s.vocab_size, s.alpha, s.method): s.mean_mae_unseen for s in summarize(rows)}
        for line in points.read_text().splitlines()[1:]:
            vocab, alpha, method, _, mean, _ = line.split(",")
            assert np.isclose(float(mean), expected[(int(vocab), float(alpha), method)])

    def test_bad_config_exit_code(self, tmp_path):
        bad = tmp_path / "bad.txt"
        bad.write_text("K = 0\n")
        out = tmp_path / "c.txt"
        assert main(["gen-data", "--config", str(bad), "--out", str(out)]) == EXIT_CONFIG

    def test_missing_checkpoint_exit_code(self, fast_config, tmp_path):
        assert main(["eval", "--config", fast_config, "--checkpoint",
                     str(tmp_path / "missing.bin"), "--out", str(tmp_path / "o.csv")]) == EXIT_RUNTIME

    def test_unknown_subcommand_exit_code(self):
        assert main(["frobnicate"]) == EXIT_CONFIG
