"""Evaluation protocol: out-of-sample MAE against the oracle matrix,
replication grids, and the train/test perturbation ablation.

A grid cell is (vocab size, strength, method); every method within a cell
and replication shares one world and corpus (built from a seed derived
from the base seed and the cell coordinates), so method comparisons are
paired. Rows are emitted per replication and aggregated into mean +-
standard-error summaries.
"""

from __future__ import annotations

import csv
import hashlib
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path

import numpy as np

from .datagen import Corpus, World, build_world, generate_corpus, oracle_transition, unseen_pairs
from .inference import PerturbMode, model_transition_matrix
from .models import ModelDims, ModelParams, init_model_params
from .numerics import RngStream, rng_new
from .training import TrainConfig, TrainHistory, mle_score_norm, psi_mean, train, train_mle_baseline

RESULTS_HEADER = ("vocab", "alpha", "method", "rep", "seed", "mae_unseen", "mae_all", "psi_norm", "wall_s")

# Training methods a grid may reference. The perturbation variants differ
# only in when (or whether) debiasing activates.
METHOD_TAGS = ("mle", "perturb_nodebias", "perturb_debias10", "perturb_debias20")

_DEBIAS_BY_METHOD = {
    "perturb_nodebias": "never",
    "perturb_debias10": 10,
    "perturb_debias20": 20,
}


class CellError(RuntimeError):
    """A grid cell failed; carries the cell coordinates so the failure is
    attributable (never silently dropped)."""


class AblationMode(Enum):
    FULL = "full"              # perturbation during training and inference
    TRAIN_ONLY = "train_only"  # perturbation-trained model, unperturbed inference
    TEST_ONLY = "test_only"    # likelihood-trained model, untrained perturbation at inference
    NONE = "none"              # likelihood-trained model, unperturbed inference


# Tags for rows produced by the checkpoint-evaluation command.
CHECKPOINT_TAGS = ("checkpoint_perturbed", "checkpoint_unperturbed")


@dataclass
class ResultRow:
    vocab_size: int
    alpha: float
    method: str
    rep: int
    seed: int
    mae_unseen: float
    mae_all: float
    psi_norm: float
    wall_s: float

    def __post_init__(self):
        if self.mae_unseen < 0 or self.mae_all < 0:
            raise ValueError("MAE values must be >= 0")
        registered = set(METHOD_TAGS) | {m.value for m in AblationMode} | set(CHECKPOINT_TAGS)
        if self.method not in registered:
            raise ValueError(f"unregistered method tag {self.method!r}")


@dataclass
class SummaryRow:
    vocab_size: int
    alpha: float
    method: str
    n_reps: int
    mean_mae_unseen: float
    se_mae_unseen: float
    mean_mae_all: float
    se_mae_all: float
    mean_psi_norm: float


@dataclass(frozen=True)
class RunSettings:
    """World, corpus, and evaluation knobs shared by grid and ablation runs."""

    embed_dim: int = 50
    latent_dim: int = 8
    hidden_dim: int = 64
    gen_hidden_dim: int = 64
    dropout_rate: float = 0.1
    n_sequences: int = 500
    seq_len: int = 10
    n_mc: int = 20_000
    train: TrainConfig = TrainConfig()

    def dims(self, vocab_size: int) -> ModelDims:
        return ModelDims(
            vocab_size=vocab_size, embed_dim=self.embed_dim,
            latent_dim=self.latent_dim, hidden_dim=self.hidden_dim,
            gen_hidden_dim=self.gen_hidden_dim, dropout_rate=self.dropout_rate,
        )


def mae_on_pairs(m_hat: np.ndarray, m_ref: np.ndarray, pairs) -> float:
    """Mean absolute entrywise difference over the given (row, col) pairs.

    The pair set must be non-empty (an empty evaluation support is an
    error, not a zero). Accumulation runs in row-major pair order so the
    result is independent of the container's iteration order.
    """
    m_hat = np.asarray(m_hat, dtype=np.float64)
    m_ref = np.asarray(m_ref, dtype=np.float64)
    if m_hat.shape != m_ref.shape:
        raise ValueError(f"matrix shapes differ: {m_hat.shape} vs {m_ref.shape}")
    pairs = list(pairs)
    if not pairs:
        raise ValueError("pair set must be non-empty")
    idx = np.array(sorted(pairs), dtype=np.int64)
    if idx.min() < 0 or idx[:, 0].max() >= m_hat.shape[0] or idx[:, 1].max() >= m_hat.shape[1]:
        raise ValueError("pair index out of range")
    diffs = np.abs(m_hat[idx[:, 0], idx[:, 1]] - m_ref[idx[:, 0], idx[:, 1]])
    return float(diffs.mean())


def all_pairs(vocab_size: int) -> list[tuple[int, int]]:
    return [(u, v) for u in range(vocab_size) for v in range(vocab_size)]


def derive_cell_seed(base_seed: int, vocab_size: int, alpha: float, rep: int) -> int:
    """Stable 63-bit seed for one (vocab, alpha, rep) cell. Methods within
    the cell share it, so they see identical worlds and corpora."""
    tag = f"{base_seed}|v{vocab_size}|a{alpha!r}|rep{rep}"
    digest = hashlib.sha256(tag.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def train_method(
    method: str,
    corpus: Corpus,
    world: World,
    settings: RunSettings,
    seed: int,
) -> tuple[ModelParams, TrainHistory, PerturbMode]:
    """Train one registered method; returns (params, history, inference mode).

    For 'mle' the returned params hold the fitted bigram block and a fresh
    untrained perturbation block (inference ignores it in unperturbed mode).
    """
    dims = settings.dims(world.vocab_size)
    if method == "mle":
        # The corpus duplication knob exists to match the data volume of
        # perturbation training; the plain-likelihood reference trains on
        # the original corpus.
        cfg = replace(settings.train, seed=seed, duplicate_corpus=False)
        theta_hat, history = train_mle_baseline(corpus, world.table, dims, cfg)
        fresh = init_model_params(rng_new(seed).split("fresh-beta"), dims)
        return ModelParams(theta=theta_hat, beta=fresh.beta), history, PerturbMode.UNPERTURBED
    if method in _DEBIAS_BY_METHOD:
        cfg = replace(settings.train, seed=seed, debias_start_step=_DEBIAS_BY_METHOD[method])
        gamma_hat, history = train(corpus, world.table, dims, cfg)
        return gamma_hat, history, PerturbMode.PERTURBED
    raise ValueError(f"unknown method {method!r}; registered: {METHOD_TAGS}")


def _evaluate_cell(args) -> list[ResultRow]:
    """Worker: one (vocab, alpha, rep) cell across all methods."""
    vocab_size, alpha, methods, rep, base_seed, settings = args
    try:
        return _evaluate_cell_inner(vocab_size, alpha, methods, rep, base_seed, settings)
    except Exception as exc:
        raise CellError(
            f"cell vocab={vocab_size} alpha={alpha} rep={rep} failed: {type(exc).__name__}: {exc}"
        ) from exc


def _evaluate_cell_inner(vocab_size, alpha, methods, rep, base_seed, settings) -> list[ResultRow]:
    cell_seed = derive_cell_seed(base_seed, vocab_size, alpha, rep)
    root = rng_new(cell_seed)
    world = build_world(
        root.split("world"), vocab_size, settings.embed_dim,
        settings.latent_dim, settings.hidden_dim, alpha,
    )
    corpus = generate_corpus(world, root.split("corpus"), settings.n_sequences, settings.seq_len)
    m_alpha = oracle_transition(world, settings.n_mc, root.split("oracle"))
    unseen = unseen_pairs(corpus, vocab_size)
    full = all_pairs(vocab_size)
    rows = []
    for method in methods:
        t0 = time.perf_counter()
        train_seed = root.child_seed(f"train|{method}")
        gamma_hat, _, mode = train_method(method, corpus, world, settings, train_seed)
        m_hat = model_transition_matrix(
            gamma_hat, world.table, settings.n_mc, root.split(f"matrix|{method}"), mode
        )
        if method == "mle":
            psi = mle_score_norm(gamma_hat.theta, world.table, corpus.sequences)
        else:
            _, psi = psi_mean(
                gamma_hat, world.table, corpus.sequences,
                root.split(f"psi|{method}"), settings.train.K, debias=True,
            )
        mae_unseen = mae_on_pairs(m_hat, m_alpha, unseen) if unseen else float("nan")
        rows.append(ResultRow(
            vocab_size=vocab_size, alpha=alpha, method=method, rep=rep, seed=cell_seed,
            mae_unseen=mae_unseen, mae_all=mae_on_pairs(m_hat, m_alpha, full),
            psi_norm=psi, wall_s=time.perf_counter() - t0,
        ))
    return rows


def run_replications(
    vocab_sizes,
    alphas,
    methods,
    n_reps: int,
    base_seed: int,
    settings: RunSettings,
    jobs: int = 1,
) -> tuple[list[ResultRow], list[SummaryRow]]:
    """Full replication grid; failed cells surface as errors (never dropped).

    Cells are independent and may run in a process pool; the row order of
    the output is fixed by (vocab, alpha, method, rep) regardless of jobs.
    """
    if n_reps < 1:
        raise ValueError(f"n_reps must be >= 1, got {n_reps}")
    for m in methods:
        if m not in METHOD_TAGS:
            raise ValueError(f"unknown method {m!r}; registered: {METHOD_TAGS}")
    cells = [
        (v, a, tuple(methods), rep, base_seed, settings)
        for v in vocab_sizes for a in alphas for rep in range(n_reps)
    ]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_evaluate_cell, cells))
    else:
        results = [_evaluate_cell(c) for c in cells]
    rows = [row for cell_rows in results for row in cell_rows]
    method_order = {m: i for i, m in enumerate(methods)}
    rows.sort(key=lambda r: (r.vocab_size, r.alpha, method_order[r.method], r.rep))
    return rows, summarize(rows, method_order)


def summarize(rows: list[ResultRow], method_order: dict | None = None) -> list[SummaryRow]:
    """Per-cell mean and standard error (sample SD / sqrt(n))."""
    groups: dict[tuple, list[ResultRow]] = {}
    for r in rows:
        groups.setdefault((r.vocab_size, r.alpha, r.method), []).append(r)
    if method_order is None:
        method_order = {}
    out = []
    for (v, a, m) in sorted(groups, key=lambda k: (k[0], k[1], method_order.get(k[2], 0), k[2])):
        rs = groups[(v, a, m)]
        unseen = np.array([r.mae_unseen for r in rs])
        allp = np.array([r.mae_all for r in rs])
        psi = np.array([r.psi_norm for r in rs])
        out.append(SummaryRow(
            vocab_size=v, alpha=a, method=m, n_reps=len(rs),
            mean_mae_unseen=float(unseen.mean()), se_mae_unseen=standard_error(unseen),
            mean_mae_all=float(allp.mean()), se_mae_all=standard_error(allp),
            mean_psi_norm=float(psi.mean()),
        ))
    return out


def standard_error(values: np.ndarray) -> float:
    values = np.asarray(values, dtype=np.float64)
    if values.size < 2:
        return 0.0
    return float(values.std(ddof=1) / np.sqrt(values.size))


def ablation_run(
    world: World,
    settings: RunSettings,
    modes,
    rng: RngStream,
) -> list[ResultRow]:
    """Train/test perturbation ablation on one world.

    The two perturbation-trained modes share a single training run, as do
    the two likelihood-trained modes; they differ only in inference. The
    test-only mode pairs the likelihood fit with a freshly initialized,
    untrained perturbation network.
    """
    modes = list(modes)
    if not modes:
        raise ValueError("modes must be non-empty")
    corpus = generate_corpus(world, rng.split("corpus"), settings.n_sequences, settings.seq_len)
    m_alpha = oracle_transition(world, settings.n_mc, rng.split("oracle"))
    unseen = unseen_pairs(corpus, world.vocab_size)
    full = all_pairs(world.vocab_size)
    dims = settings.dims(world.vocab_size)

    needs_perturb = any(m in (AblationMode.FULL, AblationMode.TRAIN_ONLY) for m in modes)
    needs_mle = any(m in (AblationMode.TEST_ONLY, AblationMode.NONE) for m in modes)
    gamma_perturb = None
    gamma_mle = None
    if needs_perturb:
        cfg = replace(settings.train, seed=rng.child_seed("train-perturb"))
        gamma_perturb, _ = train(corpus, world.table, dims, cfg)
    if needs_mle:
        cfg = replace(settings.train, seed=rng.child_seed("train-mle"), duplicate_corpus=False)
        theta_hat, _ = train_mle_baseline(corpus, world.table, dims, cfg)
        fresh = init_model_params(rng.split("fresh-beta"), dims)
        gamma_mle = ModelParams(theta=theta_hat, beta=fresh.beta)

    plans = {
        AblationMode.FULL: (gamma_perturb, PerturbMode.PERTURBED),
        AblationMode.TRAIN_ONLY: (gamma_perturb, PerturbMode.UNPERTURBED),
        AblationMode.TEST_ONLY: (gamma_mle, PerturbMode.PERTURBED),
        AblationMode.NONE: (gamma_mle, PerturbMode.UNPERTURBED),
    }
    rows = []
    for mode in modes:
        gamma, pmode = plans[mode]
        t0 = time.perf_counter()
        m_hat = model_transition_matrix(
            gamma, world.table, settings.n_mc, rng.split(f"matrix|{mode.value}"), pmode
        )
        if mode in (AblationMode.FULL, AblationMode.TRAIN_ONLY):
            _, psi = psi_mean(gamma, world.table, corpus.sequences,
                              rng.split(f"psi|{mode.value}"), settings.train.K, debias=True)
        else:
            psi = mle_score_norm(gamma.theta, world.table, corpus.sequences)
        mae_unseen = mae_on_pairs(m_hat, m_alpha, unseen) if unseen else float("nan")
        rows.append(ResultRow(
            vocab_size=world.vocab_size, alpha=world.alpha, method=mode.value, rep=0,
            seed=rng.child_seed("row-seed"), mae_unseen=mae_unseen,
            mae_all=mae_on_pairs(m_hat, m_alpha, full),
            psi_norm=psi, wall_s=time.perf_counter() - t0,
        ))
    return rows


# ---------------------------------------------------------------------------
# CSV emission (10 significant digits, UTF-8, LF endings)
# ---------------------------------------------------------------------------


def _fmt(x: float) -> str:
    return f"{x:.10g}"


def write_results_csv(path: str | Path, rows: list[ResultRow]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(RESULTS_HEADER)
        for r in rows:
            writer.writerow([
                r.vocab_size, _fmt(r.alpha), r.method, r.rep, r.seed,
                _fmt(r.mae_unseen), _fmt(r.mae_all), _fmt(r.psi_norm), _fmt(r.wall_s),
            ])


def read_results_csv(path: str | Path) -> list[ResultRow]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != RESULTS_HEADER:
            raise ValueError(f"unexpected results header {header}")
        for rec in reader:
            rows.append(ResultRow(
                vocab_size=int(rec[0]), alpha=float(rec[1]), method=rec[2],
                rep=int(rec[3]), seed=int(rec[4]), mae_unseen=float(rec[5]),
                mae_all=float(rec[6]), psi_norm=float(rec[7]), wall_s=float(rec[8]),
            ))
    return rows


def write_summary_csv(path: str | Path, summary: list[SummaryRow]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["vocab", "alpha", "method", "n_reps",
                         "mean_mae_unseen", "se_mae_unseen",
                         "mean_mae_all", "se_mae_all", "mean_psi_norm"])
        for s in summary:
            writer.writerow([
                s.vocab_size, _fmt(s.alpha), s.method, s.n_reps,
                _fmt(s.mean_mae_unseen), _fmt(s.se_mae_unseen),
                _fmt(s.mean_mae_all), _fmt(s.se_mae_all), _fmt(s.mean_psi_norm),
            ])
