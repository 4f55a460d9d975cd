"""Parametric components of the perturbed bigram language model.

Three networks plus a fixed embedding table:
  * a neural bigram next-token model (one hidden ReLU layer, dropout, softmax),
  * a trainable perturbation network (single-layer LSTM encoder over the
    prefix, mean-pooled, feeding a two-layer ReLU generator that maps a
    latent vector + pooled context to an additive embedding perturbation),
  * a frozen ground-truth perturbation network (three-layer ReLU MLP on
    [latent; previous embedding], scaled by a strength factor).

All forward passes have hand-written batched backward passes; gradients
with respect to every trainable parameter are exact (sampled quantities
and dropout masks are treated as constants). The flat parameter layout is
fixed by FlatSchema so optimizers and checkpoints agree on segment order:
the bigram block first, then the perturbation block.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import RngStream, check_prob_vector, log_softmax_rows, softmax_rows


@dataclass(frozen=True)
class ModelDims:
    """Dimensions shared by all trainable components."""

    vocab_size: int
    embed_dim: int
    latent_dim: int
    hidden_dim: int
    gen_hidden_dim: int
    dropout_rate: float = 0.1

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ValueError(f"vocab_size must be >= 2, got {self.vocab_size}")
        for name in ("embed_dim", "latent_dim", "hidden_dim", "gen_hidden_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not (0.0 <= self.dropout_rate < 1.0):
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")


class EmbeddingTable:
    """Fixed token embedding table; rows are token embeddings."""

    def __init__(self, table: np.ndarray):
        table = np.asarray(table, dtype=np.float64)
        if table.ndim != 2:
            raise ValueError(f"embedding table must be 2-D, got shape {table.shape}")
        self.table = table

    @property
    def vocab_size(self) -> int:
        return self.table.shape[0]

    @property
    def dim(self) -> int:
        return self.table.shape[1]

    def embed(self, tokens: np.ndarray) -> np.ndarray:
        """Map integer tokens (any shape) to embeddings (shape + (dim,))."""
        tokens = np.asarray(tokens)
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.vocab_size):
            raise ValueError("token id out of vocabulary")
        return self.table[tokens]


def build_embedding_table(rng: RngStream, vocab_size: int, dim: int, max_redraws: int = 10) -> EmbeddingTable:
    """Standard-normal table; redrawn until numerically full row rank when
    vocab_size <= dim (smallest singular value > 1e-8)."""
    if vocab_size < 2:
        raise ValueError(f"vocab_size must be >= 2, got {vocab_size}")
    if dim < 1:
        raise ValueError(f"dim must be >= 1, got {dim}")
    for _ in range(max_redraws):
        table = rng.normal((vocab_size, dim))
        if vocab_size > dim:
            return EmbeddingTable(table)
        smin = np.linalg.svd(table, compute_uv=False)[-1]
        if smin > 1e-8:
            return EmbeddingTable(table)
    raise RuntimeError(f"embedding table rank condition not met after {max_redraws} redraws")


@dataclass
class BigramParams:
    """Bigram model: softmax(W2 @ dropout(relu(W1 @ x + b1)) + b2)."""

    W1: np.ndarray  # (d, d)
    b1: np.ndarray  # (d,)
    W2: np.ndarray  # (V, d)
    b2: np.ndarray  # (V,)
    dropout_rate: float = 0.1

    def __post_init__(self):
        d = self.W1.shape[0]
        v = self.W2.shape[0]
        if self.W1.shape != (d, d) or self.b1.shape != (d,):
            raise ValueError("bigram first-layer shape mismatch")
        if self.W2.shape != (v, d) or self.b2.shape != (v,):
            raise ValueError("bigram output-layer shape mismatch")
        if not (0.0 <= self.dropout_rate < 1.0):
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")

    @property
    def vocab_size(self) -> int:
        return self.W2.shape[0]

    @property
    def dim(self) -> int:
        return self.W1.shape[0]


@dataclass
class PerturbParams:
    """Trainable perturbation net: LSTM encoder + mean pool + ReLU generator.

    LSTM gate rows of Wx/Wh/b are packed in blocks [input, forget, cell, output].
    """

    Wx: np.ndarray  # (4h, d)
    Wh: np.ndarray  # (4h, h)
    b: np.ndarray   # (4h,)
    Wg1: np.ndarray  # (g, r + h)
    bg1: np.ndarray  # (g,)
    Wg2: np.ndarray  # (d, g)
    bg2: np.ndarray  # (d,)

    @property
    def hidden_dim(self) -> int:
        return self.Wh.shape[1]

    @property
    def latent_dim(self) -> int:
        return self.Wg1.shape[1] - self.hidden_dim

    @property
    def embed_dim(self) -> int:
        return self.Wx.shape[1]

    @property
    def gen_hidden_dim(self) -> int:
        return self.Wg1.shape[0]


@dataclass
class GroundTruthPerturbParams:
    """Frozen three-layer ReLU MLP mapping [latent; prev embedding] -> embedding shift."""

    W1: np.ndarray  # (h, r + d)
    b1: np.ndarray  # (h,)
    W2: np.ndarray  # (h, h)
    b2: np.ndarray  # (h,)
    W3: np.ndarray  # (d, h)
    b3: np.ndarray  # (d,)


@dataclass
class ModelParams:
    """All trainable parameters: bigram block plus perturbation block."""

    theta: BigramParams
    beta: PerturbParams

    def dims(self) -> ModelDims:
        return ModelDims(
            vocab_size=self.theta.vocab_size,
            embed_dim=self.theta.dim,
            latent_dim=self.beta.latent_dim,
            hidden_dim=self.beta.hidden_dim,
            gen_hidden_dim=self.beta.gen_hidden_dim,
            dropout_rate=self.theta.dropout_rate,
        )


class FlatSchema:
    """Canonical flat layout of ModelParams with named segments.

    Pack/unpack round-trips exactly; `theta_slice` / `beta_slice` partition
    the flat vector so optimizers can apply separate learning rates.
    """

    THETA_FIELDS = ("W1", "b1", "W2", "b2")
    BETA_FIELDS = ("Wx", "Wh", "b", "Wg1", "bg1", "Wg2", "bg2")

    def __init__(self, dims: ModelDims):
        v, d = dims.vocab_size, dims.embed_dim
        r, h, g = dims.latent_dim, dims.hidden_dim, dims.gen_hidden_dim
        shapes = {
            "theta.W1": (d, d),
            "theta.b1": (d,),
            "theta.W2": (v, d),
            "theta.b2": (v,),
            "beta.Wx": (4 * h, d),
            "beta.Wh": (4 * h, h),
            "beta.b": (4 * h,),
            "beta.Wg1": (g, r + h),
            "beta.bg1": (g,),
            "beta.Wg2": (d, g),
            "beta.bg2": (d,),
        }
        self.dims = dims
        self.entries: list[tuple[str, tuple[int, ...], int]] = []
        offset = 0
        for block, fields in (("theta", self.THETA_FIELDS), ("beta", self.BETA_FIELDS)):
            for field in fields:
                name = f"{block}.{field}"
                shape = shapes[name]
                self.entries.append((name, shape, offset))
                offset += int(np.prod(shape))
            if block == "theta":
                self.theta_size = offset
        self.total_size = offset
        self.theta_slice = slice(0, self.theta_size)
        self.beta_slice = slice(self.theta_size, self.total_size)
        self._offsets = {name: (off, off + int(np.prod(shape)), shape) for name, shape, off in self.entries}

    def segment(self, name: str) -> slice:
        lo, hi, _ = self._offsets[name]
        return slice(lo, hi)

    def pack(self, params: ModelParams) -> np.ndarray:
        flat = np.empty(self.total_size, dtype=np.float64)
        for name, shape, _ in self.entries:
            block, field = name.split(".")
            arr = getattr(params.theta if block == "theta" else params.beta, field)
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, schema expects {shape}")
            flat[self.segment(name)] = arr.ravel()
        return flat

    def unpack(self, flat: np.ndarray) -> ModelParams:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.total_size,):
            raise ValueError(f"flat vector has shape {flat.shape}, schema expects ({self.total_size},)")
        values = {}
        for name, shape, _ in self.entries:
            values[name] = flat[self.segment(name)].reshape(shape).copy()
        theta = BigramParams(
            W1=values["theta.W1"], b1=values["theta.b1"],
            W2=values["theta.W2"], b2=values["theta.b2"],
            dropout_rate=self.dims.dropout_rate,
        )
        beta = PerturbParams(
            Wx=values["beta.Wx"], Wh=values["beta.Wh"], b=values["beta.b"],
            Wg1=values["beta.Wg1"], bg1=values["beta.bg1"],
            Wg2=values["beta.Wg2"], bg2=values["beta.bg2"],
        )
        return ModelParams(theta=theta, beta=beta)


class GradBuffer:
    """Flat gradient accumulator addressed by schema segment names."""

    def __init__(self, schema: FlatSchema, batch: int | None = None):
        self.schema = schema
        shape = (schema.total_size,) if batch is None else (batch, schema.total_size)
        self.flat = np.zeros(shape, dtype=np.float64)

    def add(self, name: str, value: np.ndarray) -> None:
        seg = self.schema.segment(name)
        if self.flat.ndim == 1:
            self.flat[seg] += value.ravel()
        else:
            self.flat[:, seg] += value.reshape(value.shape[0], -1)


def _uniform_init(rng: RngStream, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    limit = 1.0 / np.sqrt(fan_in)
    return rng.uniform(shape) * (2.0 * limit) - limit


def init_model_params(rng: RngStream, dims: ModelDims) -> ModelParams:
    """Default initialization: uniform(+-1/sqrt(fan_in)) weights, zero biases,
    LSTM forget-gate bias 1."""
    v, d = dims.vocab_size, dims.embed_dim
    r, h, g = dims.latent_dim, dims.hidden_dim, dims.gen_hidden_dim
    theta = BigramParams(
        W1=_uniform_init(rng, (d, d), d),
        b1=np.zeros(d),
        W2=_uniform_init(rng, (v, d), d),
        b2=np.zeros(v),
        dropout_rate=dims.dropout_rate,
    )
    b_lstm = np.zeros(4 * h)
    b_lstm[h:2 * h] = 1.0  # forget gate
    beta = PerturbParams(
        Wx=_uniform_init(rng, (4 * h, d), d),
        Wh=_uniform_init(rng, (4 * h, h), h),
        b=b_lstm,
        Wg1=_uniform_init(rng, (g, r + h), r + h),
        bg1=np.zeros(g),
        Wg2=_uniform_init(rng, (d, g), g),
        bg2=np.zeros(d),
    )
    return ModelParams(theta=theta, beta=beta)


def init_ground_truth_perturb(
    rng: RngStream,
    embed_dim: int,
    latent_dim: int,
    hidden_dim: int,
    output_scale: float = 0.1,
) -> GroundTruthPerturbParams:
    """He-normal hidden layers (signal-preserving through the ReLUs) with a
    scaled final layer: per-coordinate output std is roughly `output_scale`,
    so a unit strength factor shifts embeddings by a moderate fraction of
    their norm rather than overwhelming them."""
    d, r, h = embed_dim, latent_dim, hidden_dim

    def he(shape, fan_in):
        return rng.normal(shape) * np.sqrt(2.0 / fan_in)

    return GroundTruthPerturbParams(
        W1=he((h, r + d), r + d), b1=np.zeros(h),
        W2=he((h, h), h), b2=np.zeros(h),
        W3=rng.normal((d, h)) * (output_scale / np.sqrt(h)), b3=np.zeros(d),
    )


def sample_dropout_mask(rng: RngStream, shape: tuple[int, ...], rate: float) -> np.ndarray:
    """Inverted dropout mask: entries are 0 with probability `rate`, else
    1/(1-rate). rate == 0 yields an all-ones mask."""
    if not (0.0 <= rate < 1.0):
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return np.ones(shape)
    keep = rng.uniform(shape) >= rate
    return keep / (1.0 - rate)


# ---------------------------------------------------------------------------
# Batched forward / backward primitives.
# Convention: batches are leading axes; positions are rows (B, m, d).
# ---------------------------------------------------------------------------


def lstm_forward(beta: PerturbParams, X: np.ndarray) -> tuple[np.ndarray, dict]:
    """Run the LSTM encoder over prefix embeddings X (B, m, d).

    Returns hidden states (B, m, h) and a cache for the backward pass.
    Initial hidden and cell states are zero.
    """
    B, m, d = X.shape
    h = beta.hidden_dim
    hs = np.empty((B, m, h))
    steps = []
    h_prev = np.zeros((B, h))
    c_prev = np.zeros((B, h))
    for j in range(m):
        x_j = X[:, j, :]
        a = x_j @ beta.Wx.T + h_prev @ beta.Wh.T + beta.b
        i = _sigmoid(a[:, 0 * h:1 * h])
        f = _sigmoid(a[:, 1 * h:2 * h])
        g = np.tanh(a[:, 2 * h:3 * h])
        o = _sigmoid(a[:, 3 * h:4 * h])
        c = f * c_prev + i * g
        tc = np.tanh(c)
        h_new = o * tc
        hs[:, j, :] = h_new
        steps.append((i, f, g, o, tc, h_prev, c_prev))
        h_prev = h_new
        c_prev = c
    return hs, {"X": X, "steps": steps}


def lstm_backward(beta: PerturbParams, cache: dict, dH: np.ndarray, grads: GradBuffer) -> None:
    """Backprop through the encoder given upstream dH (B, m, h) on every
    hidden state; parameter gradients are accumulated into `grads`."""
    X = cache["X"]
    steps = cache["steps"]
    B, m, _ = X.shape
    h = beta.hidden_dim
    per_seq = grads.flat.ndim == 2
    dWx = np.zeros((B, 4 * h, X.shape[2])) if per_seq else np.zeros_like(beta.Wx)
    dWh = np.zeros((B, 4 * h, h)) if per_seq else np.zeros_like(beta.Wh)
    db = np.zeros((B, 4 * h)) if per_seq else np.zeros_like(beta.b)
    dh_carry = np.zeros((B, h))
    dc_carry = np.zeros((B, h))
    for j in range(m - 1, -1, -1):
        i, f, g, o, tc, h_prev, c_prev = steps[j]
        dh = dH[:, j, :] + dh_carry
        do = dh * tc
        dc = dh * o * (1.0 - tc * tc) + dc_carry
        df = dc * c_prev
        di = dc * g
        dg = dc * i
        da = np.concatenate(
            [
                di * i * (1.0 - i),
                df * f * (1.0 - f),
                dg * (1.0 - g * g),
                do * o * (1.0 - o),
            ],
            axis=1,
        )
        x_j = X[:, j, :]
        if per_seq:
            dWx += da[:, :, None] * x_j[:, None, :]
            dWh += da[:, :, None] * h_prev[:, None, :]
            db += da
        else:
            dWx += da.T @ x_j
            dWh += da.T @ h_prev
            db += da.sum(axis=0)
        dh_carry = da @ beta.Wh
        dc_carry = dc * f
    grads.add("beta.Wx", dWx)
    grads.add("beta.Wh", dWh)
    grads.add("beta.b", db)


def lstm_step(
    beta: PerturbParams, x: np.ndarray, h_prev: np.ndarray, c_prev: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """One forward step of the encoder (no cache); x, h_prev, c_prev are (B, .)."""
    h = beta.hidden_dim
    a = x @ beta.Wx.T + h_prev @ beta.Wh.T + beta.b
    i = _sigmoid(a[:, 0 * h:1 * h])
    f = _sigmoid(a[:, 1 * h:2 * h])
    g = np.tanh(a[:, 2 * h:3 * h])
    o = _sigmoid(a[:, 3 * h:4 * h])
    c = f * c_prev + i * g
    return o * np.tanh(c), c


def generator_forward(beta: PerturbParams, w: np.ndarray, context: np.ndarray) -> tuple[np.ndarray, dict]:
    """Perturbation generator: u = Wg2 @ relu(Wg1 @ [w; c] + bg1) + bg2.

    w: (B, r) latents; context: (B, h) pooled encoder output; returns (B, d).
    """
    z = np.concatenate([w, context], axis=1)
    p1 = z @ beta.Wg1.T + beta.bg1
    a1 = np.maximum(p1, 0.0)
    u = a1 @ beta.Wg2.T + beta.bg2
    return u, {"z": z, "p1": p1, "a1": a1}


def generator_backward(beta: PerturbParams, cache: dict, du: np.ndarray, grads: GradBuffer) -> np.ndarray:
    """Backprop through the generator; returns d(context) (B, h)."""
    z, p1, a1 = cache["z"], cache["p1"], cache["a1"]
    per_seq = grads.flat.ndim == 2
    if per_seq:
        grads.add("beta.Wg2", du[:, :, None] * a1[:, None, :])
        grads.add("beta.bg2", du)
    else:
        grads.add("beta.Wg2", du.T @ a1)
        grads.add("beta.bg2", du.sum(axis=0))
    dp1 = (du @ beta.Wg2) * (p1 > 0.0)
    if per_seq:
        grads.add("beta.Wg1", dp1[:, :, None] * z[:, None, :])
        grads.add("beta.bg1", dp1)
    else:
        grads.add("beta.Wg1", dp1.T @ z)
        grads.add("beta.bg1", dp1.sum(axis=0))
    dz = dp1 @ beta.Wg1
    r = beta.latent_dim
    return dz[:, r:]


def bigram_forward(theta: BigramParams, x: np.ndarray, mask: np.ndarray | None = None) -> tuple[np.ndarray, dict]:
    """Bigram logits for previous-token embeddings x (B, d).

    mask is an inverted-dropout mask of shape (B, d) or None for eval mode.
    """
    z1 = x @ theta.W1.T + theta.b1
    a = np.maximum(z1, 0.0)
    ad = a * mask if mask is not None else a
    logits = ad @ theta.W2.T + theta.b2
    return logits, {"x": x, "z1": z1, "ad": ad, "mask": mask}


def bigram_backward(theta: BigramParams, cache: dict, dlogits: np.ndarray, grads: GradBuffer) -> np.ndarray:
    """Backprop through the bigram head; returns dx (B, d) for the
    perturbed-embedding input."""
    x, z1, ad, mask = cache["x"], cache["z1"], cache["ad"], cache["mask"]
    per_seq = grads.flat.ndim == 2
    if per_seq:
        grads.add("theta.W2", dlogits[:, :, None] * ad[:, None, :])
        grads.add("theta.b2", dlogits)
    else:
        grads.add("theta.W2", dlogits.T @ ad)
        grads.add("theta.b2", dlogits.sum(axis=0))
    dad = dlogits @ theta.W2
    da = dad * mask if mask is not None else dad
    dz1 = da * (z1 > 0.0)
    if per_seq:
        grads.add("theta.W1", dz1[:, :, None] * x[:, None, :])
        grads.add("theta.b1", dz1)
    else:
        grads.add("theta.W1", dz1.T @ x)
        grads.add("theta.b1", dz1.sum(axis=0))
    return dz1 @ theta.W1


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# Single-instance operations (thin wrappers over the batched primitives).
# ---------------------------------------------------------------------------


def bigram_probs(theta: BigramParams, x_prev: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Next-token distribution given one previous-token embedding.

    mask=None is eval mode; a mask of length d is train mode (entries
    multiply the hidden units, so the all-ones mask reproduces eval).
    """
    x_prev = np.asarray(x_prev, dtype=np.float64)
    if x_prev.shape != (theta.dim,):
        raise ValueError(f"x_prev must have shape ({theta.dim},), got {x_prev.shape}")
    if mask is not None:
        mask = np.asarray(mask, dtype=np.float64)
        if mask.shape != (theta.dim,):
            raise ValueError(f"dropout mask must have shape ({theta.dim},), got {mask.shape}")
        mask = mask[None, :]
    logits, _ = bigram_forward(theta, x_prev[None, :], mask)
    probs = softmax_rows(logits)[0]
    check_prob_vector(probs)
    return probs


def bigram_prob_rows(theta: BigramParams, x: np.ndarray) -> np.ndarray:
    """Eval-mode next-token distributions for a batch of embeddings (B, d)."""
    logits, _ = bigram_forward(theta, x, None)
    return softmax_rows(logits)


def perturbation(beta: PerturbParams, prefix: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Perturbation matrix for a prefix of embeddings.

    prefix has shape (d, t-1) with positions as columns; the generator
    output (one d-vector) is broadcast to every column of the result.
    """
    prefix = np.asarray(prefix, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if prefix.ndim != 2 or prefix.shape[0] != beta.embed_dim or prefix.shape[1] < 1:
        raise ValueError(f"prefix must have shape ({beta.embed_dim}, t-1) with t >= 2, got {prefix.shape}")
    if w.shape != (beta.latent_dim,):
        raise ValueError(f"w must have shape ({beta.latent_dim},), got {w.shape}")
    X = prefix.T[None, :, :]  # (1, m, d)
    hs, _ = lstm_forward(beta, X)
    context = hs.mean(axis=1)
    u, _ = generator_forward(beta, w[None, :], context)
    return np.tile(u[0][:, None], (1, prefix.shape[1]))


def ground_truth_perturbation(beta0: GroundTruthPerturbParams, x_prev: np.ndarray, w: np.ndarray, alpha: float) -> np.ndarray:
    """Frozen perturbation of one previous-token embedding, scaled by alpha."""
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    x_prev = np.asarray(x_prev, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    return ground_truth_perturbation_batch(beta0, x_prev[None, :], w[None, :], alpha)[0]


def ground_truth_perturbation_batch(
    beta0: GroundTruthPerturbParams, x: np.ndarray, w: np.ndarray, alpha: float
) -> np.ndarray:
    """Batched frozen perturbation: alpha * mlp([w; x]) for rows of x, w."""
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    z = np.concatenate([w, x], axis=1)
    a1 = np.maximum(z @ beta0.W1.T + beta0.b1, 0.0)
    a2 = np.maximum(a1 @ beta0.W2.T + beta0.b2, 0.0)
    return alpha * (a2 @ beta0.W3.T + beta0.b3)


def score_log_prob(
    gamma: ModelParams,
    table: EmbeddingTable,
    prefix_tokens: np.ndarray,
    w: np.ndarray,
    target: int,
    mask: np.ndarray | None = None,
) -> tuple[float, np.ndarray]:
    """Log-probability of `target` given the perturbed prefix, and its exact
    gradient with respect to the flat parameter vector.

    The bigram model conditions on the last perturbed prefix column; the
    latent w and the dropout mask are constants in the differentiation, so
    gradient flows into the perturbation block only through the generator
    and encoder.
    """
    prefix_tokens = np.asarray(prefix_tokens, dtype=np.int64)
    if prefix_tokens.ndim != 1 or prefix_tokens.size < 1:
        raise ValueError("prefix must be a non-empty 1-D token sequence")
    if not (0 <= target < gamma.theta.vocab_size):
        raise ValueError(f"target {target} out of vocabulary")
    schema = FlatSchema(gamma.dims())
    X = table.embed(prefix_tokens)[None, :, :]  # (1, m, d)
    hs, lstm_cache = lstm_forward(gamma.beta, X)
    context = hs.mean(axis=1)
    u, gen_cache = generator_forward(gamma.beta, np.asarray(w, dtype=np.float64)[None, :], context)
    x_last = X[:, -1, :] + u
    mask_row = None
    if mask is not None:
        mask_row = np.asarray(mask, dtype=np.float64)[None, :]
    logits, big_cache = bigram_forward(gamma.theta, x_last, mask_row)
    logp = float(log_softmax_rows(logits)[0, target])
    if not np.isfinite(logp):
        raise FloatingPointError("non-finite log-probability")

    grads = GradBuffer(schema)
    dlogits = -softmax_rows(logits)
    dlogits[0, target] += 1.0
    dx = bigram_backward(gamma.theta, big_cache, dlogits, grads)
    dcontext = generator_backward(gamma.beta, gen_cache, dx, grads)
    m = X.shape[1]
    dH = np.broadcast_to(dcontext[:, None, :] / m, hs.shape)
    lstm_backward(gamma.beta, lstm_cache, dH, grads)
    if not np.all(np.isfinite(grads.flat)):
        raise FloatingPointError("non-finite score gradient")
    return logp, grads.flat
