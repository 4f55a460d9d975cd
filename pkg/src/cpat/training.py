"""Score-based training of the perturbed bigram model.

The objective sums, over sequences, positions, and latent samples, the
log-probability of the observed next token under a freshly perturbed
prefix, minus (when debiasing is active) the log-probability of a token
sampled from the model under an independently perturbed copy of the same
prefix. The gradient of that objective is the estimating function whose
sample mean SGD drives to zero; its expectation vanishes at any parameter
that generated the data (Fisher consistency), which the probe at the
bottom of this module checks by Monte Carlo.

Implementation notes:
  * Both score terms of a debiased pair share one forward pass (same
    perturbed prefix), so their difference needs a single backward pass
    with upstream `onehot(observed) - onehot(sampled)`; the log-partition
    terms cancel exactly.
  * The LSTM encoder runs once per (sequence, position) and its backward
    pass receives the upstream sum over latent samples, since pooling is
    linear.
  * Sampled tokens, latents, and dropout masks are constants under
    differentiation; the draws can be captured and frozen so the gradient
    is finite-difference checkable.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from math import ceil

import numpy as np

from .datagen import Corpus
from .models import (
    BigramParams,
    EmbeddingTable,
    FlatSchema,
    GradBuffer,
    ModelDims,
    ModelParams,
    bigram_backward,
    bigram_forward,
    generator_backward,
    generator_forward,
    init_model_params,
    lstm_backward,
    lstm_forward,
    lstm_step,
    sample_dropout_mask,
)
from .numerics import RngStream, categorical_rows, log_softmax_rows, rng_new, softmax_rows


@dataclass(frozen=True)
class TrainConfig:
    """Every knob of a training run. Defaults are the standard configuration:
    5 latent samples, learning rates 1e-2 (bigram) and 5e-5 (perturbation),
    batch 500, 25 epochs, corpus duplicated once, debiasing from the start."""

    K: int = 5
    lr_theta: float = 1e-2
    lr_beta: float = 5e-5
    batch_size: int = 500
    epochs: int = 25
    debias_start_step: int | str = 0  # 1-based optimizer step, or "never"
    duplicate_corpus: bool = True
    optimizer: str = "adam"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.K < 1:
            raise ValueError(f"K must be >= 1, got {self.K}")
        if self.lr_theta < 0 or self.lr_beta < 0:
            raise ValueError("learning rates must be >= 0")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if isinstance(self.debias_start_step, str):
            if self.debias_start_step != "never":
                raise ValueError(f"debias_start_step must be an integer or 'never', got {self.debias_start_step!r}")
        elif self.debias_start_step < 0:
            raise ValueError("debias_start_step must be >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")

    def debias_active(self, step: int) -> bool:
        """Whether debiasing is on at 1-based optimizer step `step`."""
        if self.debias_start_step == "never":
            return False
        return step >= self.debias_start_step


@dataclass
class StepRecord:
    step: int
    epoch: int
    loss: float
    psi_norm: float
    debias: bool
    wall_s: float


@dataclass
class TrainHistory:
    records: list[StepRecord] = field(default_factory=list)

    def append(self, rec: StepRecord) -> None:
        if self.records and rec.step != self.records[-1].step + 1:
            raise ValueError("history steps must be consecutive")
        self.records.append(rec)

    def __len__(self) -> int:
        return len(self.records)


@dataclass
class ObjectiveDraws:
    """Frozen randomness of one objective evaluation, keyed by position.

    Per position t: latents (B_t, K, r), dropout masks (B_t, K, d) or None,
    and (when debiasing) the sampled comparison tokens (B_t, K). B_t counts
    the batch sequences of length >= t, in batch order.
    """

    K: int
    debias: bool
    use_dropout: bool
    positions: dict[int, dict] = field(default_factory=dict)


def _pad_batch(batch: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([len(s) for s in batch], dtype=np.int64)
    padded = np.zeros((len(batch), int(lengths.max())), dtype=np.int64)
    for i, s in enumerate(batch):
        padded[i, : len(s)] = s
    return padded, lengths


def _objective_engine(
    gamma: ModelParams,
    table: EmbeddingTable,
    batch: list[np.ndarray],
    K: int,
    debias: bool,
    rng: RngStream | None = None,
    draws: ObjectiveDraws | None = None,
    use_dropout: bool = True,
    per_sequence: bool = False,
    capture: bool = False,
):
    """Shared evaluator for the training objective and its gradient.

    Returns (loss, grad, psi_rows, captured_draws); `psi_rows` is the
    (B, n_params) per-sequence gradient matrix when `per_sequence`, else
    None. With `draws` given, all randomness is taken from it and `rng`
    is unused.
    """
    if not batch:
        raise ValueError("batch must be non-empty")
    theta, beta = gamma.theta, gamma.beta
    dims = gamma.dims()
    schema = FlatSchema(dims)
    v, d, r = dims.vocab_size, dims.embed_dim, dims.latent_dim
    padded, lengths = _pad_batch(batch)
    if padded.size and (padded.min() < 0 or padded.max() >= v):
        raise ValueError("batch contains tokens outside the vocabulary")
    rate = theta.dropout_rate if use_dropout else 0.0

    grads = GradBuffer(schema)
    psi_rows = np.zeros((len(batch), schema.total_size)) if per_sequence else None
    captured = ObjectiveDraws(K=K, debias=debias, use_dropout=use_dropout) if capture else None
    loss = 0.0
    l_max = int(lengths.max())
    if K == 0 or l_max < 2:
        return loss, grads.flat, psi_rows, captured

    # The encoder is causal, so one pass over the longest prefix serves
    # every position: position t reads hidden states 1..t-1. Pooling
    # upstreams from all positions are summed into dH before a single
    # backward pass (padded steps receive zero upstream and contribute
    # nothing).
    n_batch = len(batch)
    m_max = l_max - 1
    X_all = table.embed(padded[:, :m_max])  # (B, m_max, d)
    hs, lstm_cache = lstm_forward(beta, X_all)
    pool_sums = np.cumsum(hs, axis=1)
    dH = np.zeros_like(hs)

    for t in range(2, l_max + 1):
        act = np.flatnonzero(lengths >= t)
        if act.size == 0:
            continue
        bt = act.size
        m = t - 1
        targets = padded[act, m]

        if draws is not None:
            pos = draws.positions[t]
            w = pos["w"]
            mask = pos["mask"]
            sampled = pos["sampled"]
        else:
            w = rng.normal((bt, K, r))
            mask = sample_dropout_mask(rng, (bt, K, d), rate) if rate > 0 else None
            sampled = None
            if debias:
                w_alt = rng.normal((bt, K, r))
                sample_u = rng.uniform((bt, K))

        c_pool = pool_sums[act, m - 1] / m
        bk = bt * K
        c_rep = np.repeat(c_pool, K, axis=0)
        x_last = np.repeat(X_all[act, m - 1], K, axis=0)
        u, gen_cache = generator_forward(beta, w.reshape(bk, r), c_rep)
        mask_flat = mask.reshape(bk, d) if mask is not None else None
        logits, big_cache = bigram_forward(theta, x_last + u, mask_flat)
        obs = np.repeat(targets, K)
        ar = np.arange(bk)

        if debias:
            if sampled is None:
                u_alt, _ = generator_forward(beta, w_alt.reshape(bk, r), c_rep)
                alt_logits, _ = bigram_forward(theta, x_last + u_alt, None)  # eval-mode sampling
                sampled = categorical_rows(softmax_rows(alt_logits), sample_u.reshape(bk)).reshape(bt, K)
            samp = sampled.reshape(bk)
            loss_vec = logits[ar, obs] - logits[ar, samp]
            dlogits = np.zeros_like(logits)
            dlogits[ar, obs] += 1.0
            dlogits[ar, samp] -= 1.0
        else:
            loss_vec = log_softmax_rows(logits)[ar, obs]
            dlogits = -softmax_rows(logits)
            dlogits[ar, obs] += 1.0

        if not np.all(np.isfinite(loss_vec)):
            raise FloatingPointError(f"non-finite objective terms at position {t}")
        loss += float(loss_vec.sum())

        if capture:
            captured.positions[t] = {"w": w, "mask": mask, "sampled": sampled}

        if per_sequence:
            local = GradBuffer(schema, batch=bk)
            dx = bigram_backward(theta, big_cache, dlogits, local)
            dc = generator_backward(beta, gen_cache, dx, local)
            psi_rows[act] += local.flat.reshape(bt, K, -1).sum(axis=1)
        else:
            dx = bigram_backward(theta, big_cache, dlogits, grads)
            dc = generator_backward(beta, gen_cache, dx, grads)
        dc_pool = dc.reshape(bt, K, -1).sum(axis=1)
        spread = np.zeros((n_batch, dc_pool.shape[1]))
        spread[act] = dc_pool / m
        dH[:, :m, :] += spread[:, None, :]

    if per_sequence:
        lstm_local = GradBuffer(schema, batch=n_batch)
        lstm_backward(beta, lstm_cache, dH, lstm_local)
        psi_rows += lstm_local.flat
        grad = psi_rows.sum(axis=0)
    else:
        lstm_backward(beta, lstm_cache, dH, grads)
        grad = grads.flat
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite gradient")
    return loss, grad, psi_rows, captured


def minibatch_objective(
    gamma: ModelParams,
    table: EmbeddingTable,
    batch: list[np.ndarray],
    rng: RngStream,
    K: int,
    debias: bool,
) -> tuple[float, np.ndarray]:
    """One evaluation of the training objective and its gradient over a
    minibatch, with fresh latents, dropout masks, and comparison tokens."""
    loss, grad, _, _ = _objective_engine(gamma, table, batch, K, debias, rng=rng, use_dropout=True)
    return loss, grad


def capture_draws(
    gamma: ModelParams,
    table: EmbeddingTable,
    batch: list[np.ndarray],
    rng: RngStream,
    K: int,
    debias: bool,
    use_dropout: bool = True,
) -> ObjectiveDraws:
    """Draw and record all randomness of one objective evaluation so the
    same evaluation can be repeated at nearby parameters (for gradient
    checking); comparison tokens are sampled at `gamma` and then frozen."""
    _, _, _, captured = _objective_engine(
        gamma, table, batch, K, debias, rng=rng, use_dropout=use_dropout, capture=True
    )
    return captured


def objective_with_draws(
    gamma: ModelParams,
    table: EmbeddingTable,
    batch: list[np.ndarray],
    draws: ObjectiveDraws,
) -> tuple[float, np.ndarray]:
    """Deterministic objective evaluation under frozen randomness."""
    loss, grad, _, _ = _objective_engine(
        gamma, table, batch, draws.K, draws.debias, draws=draws, use_dropout=draws.use_dropout
    )
    return loss, grad


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    kind: str
    t: int
    m: np.ndarray | None
    v: np.ndarray | None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_optimizer(config: TrainConfig, n_params: int) -> OptimizerState:
    if config.optimizer == "adam":
        return OptimizerState(
            kind="adam", t=0, m=np.zeros(n_params), v=np.zeros(n_params),
            beta1=config.adam_beta1, beta2=config.adam_beta2, eps=config.adam_eps,
        )
    return OptimizerState(kind="sgd", t=0, m=None, v=None)


def optimizer_step(
    state: OptimizerState,
    flat: np.ndarray,
    grad: np.ndarray,
    lr_theta: float,
    lr_beta: float,
    theta_size: int,
) -> tuple[OptimizerState, np.ndarray]:
    """Ascent update (the objective is maximized) with separate learning
    rates on the two parameter segments; Adam moments are bias-corrected."""
    if grad.shape != flat.shape:
        raise ValueError(f"gradient shape {grad.shape} != parameter shape {flat.shape}")
    lr = np.empty_like(flat)
    lr[:theta_size] = lr_theta
    lr[theta_size:] = lr_beta
    if state.kind == "adam":
        t = state.t + 1
        m = state.beta1 * state.m + (1 - state.beta1) * grad
        v = state.beta2 * state.v + (1 - state.beta2) * grad * grad
        m_hat = m / (1 - state.beta1 ** t)
        v_hat = v / (1 - state.beta2 ** t)
        new_flat = flat + lr * m_hat / (np.sqrt(v_hat) + state.eps)
        new_state = OptimizerState(kind="adam", t=t, m=m, v=v,
                                   beta1=state.beta1, beta2=state.beta2, eps=state.eps)
    else:
        new_flat = flat + lr * grad
        new_state = OptimizerState(kind="sgd", t=state.t + 1, m=None, v=None)
    if not np.all(np.isfinite(new_flat)):
        raise FloatingPointError("non-finite parameter update")
    return new_state, new_flat


# ---------------------------------------------------------------------------
# Training loops
# ---------------------------------------------------------------------------


def _epoch_batches(n_eff: int, batch_size: int, perm: np.ndarray):
    for start in range(0, n_eff, batch_size):
        yield perm[start : start + batch_size]


def train(
    corpus: Corpus,
    table: EmbeddingTable,
    dims: ModelDims,
    config: TrainConfig,
) -> tuple[ModelParams, TrainHistory]:
    """Full training run: fresh parameter init, optional corpus duplication,
    shuffled minibatches, debias schedule by optimizer step."""
    root = rng_new(config.seed)
    gamma = init_model_params(root.split("init"), dims)
    schema = FlatSchema(dims)
    flat = schema.pack(gamma)
    seqs = list(corpus.sequences)
    if config.duplicate_corpus:
        seqs = seqs + seqs
    n_eff = len(seqs)
    state = init_optimizer(config, schema.total_size)
    history = TrainHistory()
    step = 0
    for epoch in range(1, config.epochs + 1):
        perm = root.split(f"shuffle-epoch-{epoch}").permutation(n_eff)
        for idx in _epoch_batches(n_eff, config.batch_size, perm):
            step += 1
            batch = [seqs[i] for i in idx]
            debias = config.debias_active(step)
            t0 = time.perf_counter()
            loss, grad = minibatch_objective(
                schema.unpack(flat), table, batch, root.split(f"step-{step}"), config.K, debias
            )
            state, flat = optimizer_step(state, flat, grad, config.lr_theta, config.lr_beta, schema.theta_size)
            history.append(StepRecord(
                step=step, epoch=epoch, loss=loss,
                psi_norm=float(np.linalg.norm(grad / len(batch))),
                debias=debias, wall_s=time.perf_counter() - t0,
            ))
    return schema.unpack(flat), history


def expected_step_count(n_sequences: int, config: TrainConfig) -> int:
    n_eff = 2 * n_sequences if config.duplicate_corpus else n_sequences
    return config.epochs * ceil(n_eff / config.batch_size)


def _mle_objective(theta: BigramParams, table: EmbeddingTable, prev: np.ndarray,
                   nxt: np.ndarray, rng: RngStream | None) -> tuple[float, GradBuffer]:
    """Summed log-likelihood of observed transitions and its gradient in the
    bigram block (no perturbation anywhere)."""
    dims_schema = FlatSchema(ModelDims(
        vocab_size=theta.vocab_size, embed_dim=theta.dim, latent_dim=1,
        hidden_dim=1, gen_hidden_dim=1, dropout_rate=theta.dropout_rate,
    ))
    x = table.embed(prev)
    mask = None
    if rng is not None and theta.dropout_rate > 0:
        mask = sample_dropout_mask(rng, x.shape, theta.dropout_rate)
    logits, cache = bigram_forward(theta, x, mask)
    ar = np.arange(len(nxt))
    loss = float(log_softmax_rows(logits)[ar, nxt].sum())
    dlogits = -softmax_rows(logits)
    dlogits[ar, nxt] += 1.0
    grads = GradBuffer(dims_schema)
    bigram_backward(theta, cache, dlogits, grads)
    return loss, grads


def train_mle_baseline(
    corpus: Corpus,
    table: EmbeddingTable,
    dims: ModelDims,
    config: TrainConfig,
) -> tuple[BigramParams, TrainHistory]:
    """Maximum-likelihood training of the bare bigram model (the
    no-perturbation reference): same initializer, same optimizer, applied
    to the bigram block only."""
    root = rng_new(config.seed)
    theta = init_model_params(root.split("init"), dims).theta
    mini_schema = FlatSchema(ModelDims(
        vocab_size=dims.vocab_size, embed_dim=dims.embed_dim, latent_dim=1,
        hidden_dim=1, gen_hidden_dim=1, dropout_rate=dims.dropout_rate,
    ))
    theta_size = mini_schema.theta_size

    def pack_theta(th):
        out = np.empty(theta_size)
        off = 0
        for arr in (th.W1, th.b1, th.W2, th.b2):
            out[off : off + arr.size] = arr.ravel()
            off += arr.size
        return out

    def unpack_theta(vec):
        d, v = dims.embed_dim, dims.vocab_size
        off = 0
        parts = []
        for shape in ((d, d), (d,), (v, d), (v,)):
            size = int(np.prod(shape))
            parts.append(vec[off : off + size].reshape(shape).copy())
            off += size
        return BigramParams(*parts, dropout_rate=dims.dropout_rate)

    flat = pack_theta(theta)
    seqs = list(corpus.sequences)
    if config.duplicate_corpus:
        seqs = seqs + seqs
    n_eff = len(seqs)
    state = init_optimizer(config, theta_size)
    history = TrainHistory()
    step = 0
    for epoch in range(1, config.epochs + 1):
        perm = root.split(f"shuffle-epoch-{epoch}").permutation(n_eff)
        for idx in _epoch_batches(n_eff, config.batch_size, perm):
            step += 1
            batch = [seqs[i] for i in idx]
            prev = np.concatenate([s[:-1] for s in batch])
            nxt = np.concatenate([s[1:] for s in batch])
            if prev.min() < 0 or prev.max() >= dims.vocab_size or nxt.max() >= dims.vocab_size:
                raise ValueError("batch contains tokens outside the vocabulary")
            t0 = time.perf_counter()
            th = unpack_theta(flat)
            loss, grads = _mle_objective(th, table, prev, nxt, root.split(f"step-{step}"))
            grad = grads.flat[:theta_size]
            state, flat = optimizer_step(state, flat, grad, config.lr_theta, config.lr_theta, theta_size)
            history.append(StepRecord(
                step=step, epoch=epoch, loss=loss,
                psi_norm=float(np.linalg.norm(grad / len(batch))),
                debias=False, wall_s=time.perf_counter() - t0,
            ))
    return unpack_theta(flat), history


def mle_score_norm(theta: BigramParams, table: EmbeddingTable, sequences: list[np.ndarray]) -> float:
    """Norm of the mean per-sequence log-likelihood gradient (eval mode);
    the maximum-likelihood analogue of the estimating-function norm."""
    prev = np.concatenate([s[:-1] for s in sequences])
    nxt = np.concatenate([s[1:] for s in sequences])
    _, grads = _mle_objective(theta, table, prev, nxt, None)
    theta_size = FlatSchema(ModelDims(
        vocab_size=theta.vocab_size, embed_dim=theta.dim, latent_dim=1,
        hidden_dim=1, gen_hidden_dim=1, dropout_rate=theta.dropout_rate,
    )).theta_size
    return float(np.linalg.norm(grads.flat[:theta_size] / len(sequences)))


# ---------------------------------------------------------------------------
# Estimating-function diagnostics
# ---------------------------------------------------------------------------


def psi_mean(
    gamma: ModelParams,
    table: EmbeddingTable,
    sequences: list[np.ndarray],
    rng: RngStream,
    K: int,
    debias: bool = True,
) -> tuple[np.ndarray, float]:
    """Sample mean of the per-sequence estimating function, and its norm.

    Fresh latents and comparison tokens are drawn from `rng`; scores are
    evaluated without dropout (the estimating function is a property of
    the model, not of the training regularizer). K=0 gives the zero vector.
    """
    if not sequences:
        raise ValueError("sequences must be non-empty")
    _, grad, _, _ = _objective_engine(
        gamma, table, list(sequences), K, debias, rng=rng, use_dropout=False
    )
    mean = grad / len(sequences)
    return mean, float(np.linalg.norm(mean))


def sample_model_sequences(
    gamma: ModelParams,
    table: EmbeddingTable,
    n: int,
    length: int,
    rng: RngStream,
) -> np.ndarray:
    """Ancestral sampling of n sequences from the perturbed model itself:
    uniform initial token, then perturbed next-token draws with a fresh
    latent per step (dropout off). Returns an (n, length) token matrix."""
    dims = gamma.dims()
    v, r, h = dims.vocab_size, dims.latent_dim, dims.hidden_dim
    tokens = np.empty((n, length), dtype=np.int64)
    tokens[:, 0] = rng.integers(0, v, n)
    h_state = np.zeros((n, h))
    c_state = np.zeros((n, h))
    state_sum = np.zeros((n, h))
    for t in range(2, length + 1):
        x_prev = table.embed(tokens[:, t - 2])
        h_state, c_state = lstm_step(gamma.beta, x_prev, h_state, c_state)
        state_sum = state_sum + h_state
        c_pool = state_sum / (t - 1)
        w = rng.normal((n, r))
        u, _ = generator_forward(gamma.beta, w, c_pool)
        logits, _ = bigram_forward(gamma.theta, x_prev + u, None)
        tokens[:, t - 1] = categorical_rows(softmax_rows(logits), rng.uniform(n))
    return tokens


def fisher_consistency_probe(
    gamma: ModelParams,
    table: EmbeddingTable,
    n_mc: int,
    length: int,
    K: int,
    rng: RngStream,
    generator: ModelParams | None = None,
    chunk: int = 2000,
) -> tuple[np.ndarray, np.ndarray]:
    """Coordinatewise (mean, standard error) of the estimating function over
    sequences generated from the model itself.

    With `generator` left as None the data come from `gamma`, in which case
    every coordinate mean should be statistically indistinguishable from
    zero; passing a different generator turns this into a power check.
    """
    if n_mc < 100:
        raise ValueError(f"n_mc must be >= 100, got {n_mc}")
    gen = generator if generator is not None else gamma
    tokens = sample_model_sequences(gen, table, n_mc, length, rng.split("data"))
    psi_stream = rng.split("latents")
    size = FlatSchema(gamma.dims()).total_size
    s1 = np.zeros(size)
    s2 = np.zeros(size)
    for start in range(0, n_mc, chunk):
        block = [tokens[i] for i in range(start, min(start + chunk, n_mc))]
        _, _, psi_rows, _ = _objective_engine(
            gamma, table, block, K, True,
            rng=psi_stream.split(f"chunk-{start}"), use_dropout=False, per_sequence=True,
        )
        s1 += psi_rows.sum(axis=0)
        s2 += (psi_rows * psi_rows).sum(axis=0)
    mean = s1 / n_mc
    var = np.maximum(s2 - n_mc * mean * mean, 0.0) / (n_mc - 1)
    se = np.sqrt(var / n_mc)
    return mean, se
