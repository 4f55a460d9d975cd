"""Ground-truth world construction, corpus sampling, and the oracle
marginal transition matrix.

The world is a bigram Markov process whose conditional model is a fitted
neural bigram net agreeing with a Dirichlet-sampled transition matrix at
the unperturbed embeddings. Each generated transition perturbs the
previous token's embedding with a frozen noise network before sampling,
so the observable token process follows the marginal matrix obtained by
integrating the conditional model over the latent noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .models import (
    BigramParams,
    EmbeddingTable,
    GroundTruthPerturbParams,
    bigram_prob_rows,
    build_embedding_table,
    ground_truth_perturbation_batch,
    init_ground_truth_perturb,
)
from .numerics import (
    RngStream,
    categorical_rows,
    check_prob_vector,
    check_transition_matrix,
    dirichlet_row,
    log_softmax_rows,
    softmax_rows,
)


class GroundTruthFitError(RuntimeError):
    """Raised when the conditional model cannot reproduce the target matrix."""

    def __init__(self, residual: float, tol: float):
        super().__init__(f"ground-truth fit residual {residual:.3e} exceeds tolerance {tol:.1e}")
        self.residual = residual


@dataclass
class World:
    """Frozen data-generating process."""

    pi0: np.ndarray                 # (V,) initial token distribution
    M0: np.ndarray                  # (V, V) base transition matrix
    table: EmbeddingTable
    theta0: BigramParams            # fitted conditional model, dropout disabled
    beta0: GroundTruthPerturbParams
    alpha: float
    fit_residual: float = 0.0       # max row total-variation of the fit

    def __post_init__(self):
        check_prob_vector(self.pi0)
        check_transition_matrix(self.M0)
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.theta0.dropout_rate != 0.0:
            raise ValueError("ground-truth model must have dropout disabled")

    @property
    def vocab_size(self) -> int:
        return self.M0.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.table.dim

    @property
    def latent_dim(self) -> int:
        return self.beta0.W1.shape[1] - self.table.dim

    @property
    def hidden_dim(self) -> int:
        return self.beta0.W2.shape[0]


@dataclass
class Corpus:
    """Token sequences plus the set of adjacent pairs they contain."""

    sequences: list[np.ndarray]
    max_len: int
    seen_pairs: frozenset[tuple[int, int]] = field(default_factory=frozenset)

    def __post_init__(self):
        if not self.sequences:
            raise ValueError("corpus must contain at least one sequence")
        for s in self.sequences:
            if s.size == 0:
                raise ValueError("zero-length sequences are forbidden")
            if s.size > self.max_len:
                raise ValueError(f"sequence of length {s.size} exceeds max length {self.max_len}")
        if not self.seen_pairs:
            object.__setattr__(self, "seen_pairs", collect_seen_pairs(self.sequences))

    @property
    def n(self) -> int:
        return len(self.sequences)


def collect_seen_pairs(sequences: list[np.ndarray]) -> frozenset[tuple[int, int]]:
    pairs = set()
    for s in sequences:
        for a, b in zip(s[:-1], s[1:]):
            pairs.add((int(a), int(b)))
    return frozenset(pairs)


def fit_ground_truth_model(
    M0: np.ndarray,
    table: EmbeddingTable,
    tol: float = 1e-6,
    max_steps: int = 50_000,
) -> tuple[BigramParams, float]:
    """Fit a bigram net that reproduces M0 rows at the unperturbed embeddings.

    The first layer is a fixed pass-through (identity weights, zero bias);
    the output layer is solved by least squares on log-probabilities, which
    is exact when the vocabulary does not exceed the embedding dimension and
    relu(embeddings) has full row rank. Otherwise the least-squares solution
    seeds an iterative KL minimization (Adam, mean row KL target `tol`, at
    most `max_steps` steps) and the achieved residual is reported.

    Returns (params, residual) where residual is the max row total-variation
    distance between the model rows and M0.
    """
    M0 = np.asarray(M0, dtype=np.float64)
    check_transition_matrix(M0)
    if np.any(M0 <= 0):
        raise ValueError("fit requires strictly positive transition probabilities")
    v, d = table.vocab_size, table.dim
    if M0.shape != (v, v):
        raise ValueError(f"M0 shape {M0.shape} inconsistent with vocab size {v}")
    A = np.maximum(table.table, 0.0)         # hidden activations at W1=I, b1=0
    A1 = np.hstack([A, np.ones((v, 1))])     # intercept column for b2
    targets = np.log(M0)
    sol, *_ = np.linalg.lstsq(A1, targets, rcond=None)
    W2 = sol[:d].T.copy()
    b2 = sol[d].copy()

    def residual_of(W2_, b2_):
        probs = softmax_rows(A @ W2_.T + b2_)
        return 0.5 * np.abs(probs - M0).sum(axis=1).max()

    residual = residual_of(W2, b2)
    if v <= d and residual > tol:
        raise GroundTruthFitError(residual, tol)
    if v > d:
        W2, b2 = _kl_polish(A, M0, W2, b2, tol, max_steps)
        residual = residual_of(W2, b2)
    theta0 = BigramParams(W1=np.eye(d), b1=np.zeros(d), W2=W2, b2=b2, dropout_rate=0.0)
    return theta0, float(residual)


def _kl_polish(A, M0, W2, b2, tol, max_steps):
    """Full-batch Adam on mean row KL(M0 || model); used when the exact
    least-squares solve is under-determined (vocab larger than embed dim)."""
    v = M0.shape[0]
    lr, b1m, b2m, eps = 0.05, 0.9, 0.999, 1e-8
    mW = np.zeros_like(W2); vW = np.zeros_like(W2)
    mb = np.zeros_like(b2); vb = np.zeros_like(b2)
    for t in range(1, max_steps + 1):
        logits = A @ W2.T + b2
        logq = log_softmax_rows(logits)
        kl = np.sum(M0 * (np.log(M0) - logq)) / v
        if kl <= tol:
            break
        dlogits = (np.exp(logq) - M0) / v
        gW = dlogits.T @ A
        gb = dlogits.sum(axis=0)
        mW = b1m * mW + (1 - b1m) * gW; vW = b2m * vW + (1 - b2m) * gW * gW
        mb = b1m * mb + (1 - b1m) * gb; vb = b2m * vb + (1 - b2m) * gb * gb
        c1 = 1 - b1m ** t; c2 = 1 - b2m ** t
        W2 = W2 - lr * (mW / c1) / (np.sqrt(vW / c2) + eps)
        b2 = b2 - lr * (mb / c1) / (np.sqrt(vb / c2) + eps)
    return W2, b2


def build_world(
    rng: RngStream,
    vocab_size: int,
    embed_dim: int,
    latent_dim: int,
    hidden_dim: int,
    alpha: float,
) -> World:
    """Construct the frozen data-generating process.

    Uniform initial distribution; transition rows i.i.d. Dirichlet(0.5);
    standard-normal embedding table; frozen noise network; conditional
    model fitted to the transition matrix.
    """
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    m0_rng = rng.split("transitions")
    M0 = np.stack([dirichlet_row(m0_rng, 0.5, vocab_size) for _ in range(vocab_size)])
    table = build_embedding_table(rng.split("embeddings"), vocab_size, embed_dim)
    beta0 = init_ground_truth_perturb(rng.split("noise-net"), embed_dim, latent_dim, hidden_dim)
    theta0, residual = fit_ground_truth_model(M0, table)
    pi0 = np.full(vocab_size, 1.0 / vocab_size)
    return World(pi0=pi0, M0=M0, table=table, theta0=theta0, beta0=beta0,
                 alpha=alpha, fit_residual=residual)


def generate_corpus(world: World, rng: RngStream, n: int, length: int) -> Corpus:
    """Sample n sequences of exactly `length` tokens from the world.

    First token from the initial distribution; each later token from the
    conditional model at the noise-perturbed embedding of its predecessor.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if length < 2:
        raise ValueError(f"length must be >= 2, got {length}")
    v, r = world.vocab_size, world.latent_dim
    tokens = np.empty((n, length), dtype=np.int64)
    pi_rows = np.broadcast_to(world.pi0, (n, v))
    tokens[:, 0] = categorical_rows(pi_rows, rng.uniform(n))
    for t in range(1, length):
        x_prev = world.table.embed(tokens[:, t - 1])
        w_star = rng.normal((n, r))
        shift = ground_truth_perturbation_batch(world.beta0, x_prev, w_star, world.alpha)
        probs = bigram_prob_rows(world.theta0, x_prev + shift)
        tokens[:, t] = categorical_rows(probs, rng.uniform(n))
    return Corpus(sequences=[tokens[i].copy() for i in range(n)], max_len=length)


def oracle_transition(world: World, n_mc: int, rng: RngStream, chunk: int = 5000) -> np.ndarray:
    """Marginal token-to-token transition matrix of the world.

    Row u averages the conditional model over `n_mc` fresh latent draws at
    token u's embedding. With zero perturbation strength the expectation is
    exact with a single evaluation.
    """
    if n_mc < 1:
        raise ValueError(f"n_mc must be >= 1, got {n_mc}")
    if world.alpha == 0.0:
        return bigram_prob_rows(world.theta0, world.table.table)
    v, r = world.vocab_size, world.latent_dim
    rows = np.empty((v, v))
    for u in range(v):
        x_u = world.table.table[u]
        acc = np.zeros(v)
        done = 0
        while done < n_mc:
            b = min(chunk, n_mc - done)
            w = rng.normal((b, r))
            x_rep = np.broadcast_to(x_u, (b, x_u.size))
            shift = ground_truth_perturbation_batch(world.beta0, x_rep, w, world.alpha)
            acc += bigram_prob_rows(world.theta0, x_u + shift).sum(axis=0)
            done += b
        rows[u] = acc / n_mc
    check_transition_matrix(rows)
    return rows


def unseen_pairs(corpus: Corpus, vocab_size: int) -> set[tuple[int, int]]:
    """Ordered token pairs never adjacent in the corpus."""
    all_pairs = {(u, v) for u in range(vocab_size) for v in range(vocab_size)}
    return all_pairs - set(corpus.seen_pairs)


def save_corpus(path: str | Path, corpus: Corpus, vocab_size: int, seed: int) -> None:
    """Plain-text corpus: header line then one space-separated sequence per line."""
    lines = [f"# vocab={vocab_size} len={corpus.max_len} seed={seed}"]
    for s in corpus.sequences:
        lines.append(" ".join(str(int(t)) for t in s))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_corpus(path: str | Path) -> tuple[Corpus, dict]:
    """Read a corpus file; returns the corpus and the parsed header fields."""
    text = Path(path).read_text(encoding="utf-8")
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("#"):
        raise ValueError(f"{path}: missing corpus header line")
    header = {}
    for tokpair in lines[0].lstrip("#").split():
        key, _, val = tokpair.partition("=")
        header[key] = int(val)
    for key in ("vocab", "len", "seed"):
        if key not in header:
            raise ValueError(f"{path}: corpus header missing '{key}'")
    sequences = []
    for ln in lines[1:]:
        seq = np.array([int(t) for t in ln.split()], dtype=np.int64)
        if seq.size == 0:
            raise ValueError(f"{path}: empty sequence line")
        if seq.min() < 0 or seq.max() >= header["vocab"]:
            raise ValueError(f"{path}: token id out of range")
        sequences.append(seq)
    corpus = Corpus(sequences=sequences, max_len=header["len"])
    return corpus, header
