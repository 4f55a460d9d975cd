"""Perturbed autoregressive generation and the model's effective
token-to-token transition matrix.

Generation follows ancestral sampling: at each step a fresh latent is
drawn, the perturbation network shifts the prefix embeddings, and the
next token is sampled from the bigram model at the last perturbed column.
The transition matrix marginalizes that same conditional over the latent
by Monte Carlo, one row per conditioning token.
"""

from __future__ import annotations

from enum import Enum

import numpy as np

from .models import (
    EmbeddingTable,
    ModelParams,
    bigram_forward,
    bigram_prob_rows,
    generator_forward,
    lstm_forward,
)
from .numerics import RngStream, categorical_rows, check_transition_matrix, softmax_rows


class PerturbMode(Enum):
    """Whether inference applies the learned perturbation (unperturbed mode
    skips the perturbation network entirely, i.e. zero shift)."""

    PERTURBED = "perturbed"
    UNPERTURBED = "unperturbed"


def generate(
    gamma: ModelParams,
    table: EmbeddingTable,
    prompt: np.ndarray,
    max_len: int,
    rng: RngStream,
    mode: PerturbMode,
    eos_id: int | None = None,
) -> np.ndarray:
    """Extend `prompt` by ancestral sampling until max_len tokens (or an
    optional end-of-sequence id) is reached; eval-mode model throughout."""
    prompt = np.asarray(prompt, dtype=np.int64)
    if prompt.ndim != 1 or prompt.size < 1:
        raise ValueError("prompt must be a non-empty 1-D token sequence")
    v = gamma.theta.vocab_size
    if prompt.min() < 0 or prompt.max() >= v:
        raise ValueError("prompt token out of vocabulary")
    if max_len < prompt.size:
        raise ValueError(f"max_len {max_len} is shorter than the prompt ({prompt.size})")
    tokens = list(map(int, prompt))
    while len(tokens) < max_len:
        x_prev = table.table[tokens[-1]]
        if mode is PerturbMode.PERTURBED:
            X = table.embed(np.array(tokens))[None, :, :]
            hs, _ = lstm_forward(gamma.beta, X)
            w = rng.normal((1, gamma.beta.latent_dim))
            u, _ = generator_forward(gamma.beta, w, hs.mean(axis=1))
            x_prev = x_prev + u[0]
        logits, _ = bigram_forward(gamma.theta, x_prev[None, :], None)
        probs = softmax_rows(logits)
        nxt = int(categorical_rows(probs, rng.uniform(1))[0])
        tokens.append(nxt)
        if eos_id is not None and nxt == eos_id:
            break
    return np.array(tokens, dtype=np.int64)


def model_transition_matrix(
    gamma: ModelParams,
    table: EmbeddingTable,
    n_mc: int,
    rng: RngStream,
    mode: PerturbMode,
    chunk: int = 5000,
) -> np.ndarray:
    """Effective transition matrix of the trained model.

    Perturbed mode averages the conditional over n_mc latent draws per
    conditioning token (the single-token prefix means the encoder context
    is latent-free and is computed once per row). Unperturbed mode is a
    single exact evaluation.
    """
    if n_mc < 1:
        raise ValueError(f"n_mc must be >= 1, got {n_mc}")
    if mode is PerturbMode.UNPERTURBED:
        out = bigram_prob_rows(gamma.theta, table.table)
        check_transition_matrix(out)
        return out
    v = gamma.theta.vocab_size
    r = gamma.beta.latent_dim
    hs, _ = lstm_forward(gamma.beta, table.table[:, None, :])  # all rows, prefix length 1
    contexts = hs.mean(axis=1)  # (V, h)
    rows = np.empty((v, v))
    for u_tok in range(v):
        x_u = table.table[u_tok]
        ctx = contexts[u_tok]
        acc = np.zeros(v)
        done = 0
        while done < n_mc:
            b = min(chunk, n_mc - done)
            w = rng.normal((b, r))
            shift, _ = generator_forward(gamma.beta, w, np.broadcast_to(ctx, (b, ctx.size)))
            acc += bigram_prob_rows(gamma.theta, x_u + shift).sum(axis=0)
            done += b
        rows[u_tok] = acc / n_mc
    check_transition_matrix(rows)
    return rows
