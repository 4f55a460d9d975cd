"""Flat key=value experiment configuration.

One `key = value` assignment per line; `#` starts a comment; unknown keys
are errors; anything omitted takes the standard default. Defaults mirror
the reference experimental setup: 50-token vocabulary, 50-dimensional
embeddings, latent dimension 8, encoder width 64, dropout 0.1, 500
sequences of length 10, K=5 latent samples, learning rates 1e-2 / 5e-5,
batch 500, 25 epochs, corpus duplicated once.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

from .evaluation import METHOD_TAGS, RunSettings
from .models import ModelDims
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    # world / model
    vocab_size: int = 50
    embed_dim: int = 50
    latent_dim: int = 8
    hidden_dim: int = 64
    gen_hidden_dim: int = 64
    dropout: float = 0.1
    alpha: float = 0.5
    # corpus
    n_sequences: int = 500
    seq_len: int = 10
    # training
    K: int = 5
    lr_theta: float = 1e-2
    lr_beta: float = 5e-5
    batch_size: int = 500
    epochs: int = 25
    debias_start_step: int | str = 0
    duplicate_corpus: bool = True
    optimizer: str = "adam"
    seed: int = 0
    # evaluation
    n_mc: int = 20_000
    n_reps: int = 10
    grid_vocab_sizes: list[int] = field(default_factory=lambda: [50, 100, 200, 400, 800])
    grid_alphas: list[float] = field(default_factory=lambda: [0.0, 0.2, 0.6, 1.0])
    grid_methods: list[str] = field(default_factory=lambda: ["mle", "perturb_nodebias", "perturb_debias10", "perturb_debias20"])
    # execution
    jobs: int = 1
    out_dir: str = "runs"
    eos_id: int | None = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        positives = ("vocab_size", "embed_dim", "latent_dim", "hidden_dim", "gen_hidden_dim",
                     "K", "batch_size", "epochs", "n_sequences", "n_mc", "n_reps", "jobs")
        for name in positives:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.vocab_size < 2:
            raise ConfigError(f"vocab_size must be >= 2, got {self.vocab_size}")
        if self.seq_len < 2:
            raise ConfigError(f"seq_len must be >= 2, got {self.seq_len}")
        if not (0.0 <= self.dropout < 1.0):
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.alpha < 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        if self.lr_theta < 0 or self.lr_beta < 0:
            raise ConfigError("learning rates must be >= 0")
        if isinstance(self.debias_start_step, str) and self.debias_start_step != "never":
            raise ConfigError(f"debias_start_step must be an integer or 'never', got {self.debias_start_step!r}")
        if isinstance(self.debias_start_step, int) and self.debias_start_step < 0:
            raise ConfigError("debias_start_step must be >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        for m in self.grid_methods:
            if m not in METHOD_TAGS:
                raise ConfigError(f"unknown grid method {m!r}; known: {METHOD_TAGS}")
        if not self.grid_vocab_sizes or not self.grid_alphas or not self.grid_methods:
            raise ConfigError("grid lists must be non-empty")

    # Structured views consumed by the pipeline modules.

    def dims(self, vocab_size: int | None = None) -> ModelDims:
        return ModelDims(
            vocab_size=vocab_size if vocab_size is not None else self.vocab_size,
            embed_dim=self.embed_dim, latent_dim=self.latent_dim,
            hidden_dim=self.hidden_dim, gen_hidden_dim=self.gen_hidden_dim,
            dropout_rate=self.dropout,
        )

    def train_config(self, seed: int | None = None) -> TrainConfig:
        return TrainConfig(
            K=self.K, lr_theta=self.lr_theta, lr_beta=self.lr_beta,
            batch_size=self.batch_size, epochs=self.epochs,
            debias_start_step=self.debias_start_step,
            duplicate_corpus=self.duplicate_corpus, optimizer=self.optimizer,
            seed=self.seed if seed is None else seed,
        )

    def run_settings(self) -> RunSettings:
        return RunSettings(
            embed_dim=self.embed_dim, latent_dim=self.latent_dim,
            hidden_dim=self.hidden_dim, gen_hidden_dim=self.gen_hidden_dim,
            dropout_rate=self.dropout, n_sequences=self.n_sequences,
            seq_len=self.seq_len, n_mc=self.n_mc, train=self.train_config(),
        )

    def to_text(self) -> str:
        """Fully resolved config in the same key=value syntax (for run logs)."""
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, list):
                value = ",".join(str(x) for x in value)
            elif value is None:
                value = ""
            elif isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"


_INT_KEYS = {"vocab_size", "embed_dim", "latent_dim", "hidden_dim", "gen_hidden_dim",
             "K", "batch_size", "epochs", "seed", "n_sequences", "seq_len",
             "n_mc", "n_reps", "jobs"}
_FLOAT_KEYS = {"dropout", "alpha", "lr_theta", "lr_beta"}
_BOOL_KEYS = {"duplicate_corpus"}
_STR_KEYS = {"optimizer", "out_dir"}
_KNOWN_KEYS = (_INT_KEYS | _FLOAT_KEYS | _BOOL_KEYS | _STR_KEYS
               | {"debias_start_step", "eos_id", "grid_vocab_sizes", "grid_alphas", "grid_methods"})


def _parse_value(key: str, raw: str):
    try:
        if key in _INT_KEYS:
            return int(raw)
        if key in _FLOAT_KEYS:
            return float(raw)
        if key in _BOOL_KEYS:
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if key == "debias_start_step":
            return "never" if raw.lower() == "never" else int(raw)
        if key == "eos_id":
            return None if raw == "" else int(raw)
        if key == "grid_vocab_sizes":
            return [int(x) for x in raw.split(",") if x.strip()]
        if key == "grid_alphas":
            return [float(x) for x in raw.split(",") if x.strip()]
        if key == "grid_methods":
            return [x.strip() for x in raw.split(",") if x.strip()]
        return raw
    except ValueError as exc:
        raise ConfigError(f"cannot parse value {raw!r} for key {key!r}") from exc


def parse_config(text: str) -> ExperimentConfig:
    """Parse config text; unknown keys and malformed values are errors."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        raw = raw.strip()
        if key not in _KNOWN_KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _parse_value(key, raw)
    try:
        return ExperimentConfig(**values)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    return parse_config(Path(path).read_text(encoding="utf-8"))
