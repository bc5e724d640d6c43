"""Retrieval training objectives and their batch samplers.

Four losses: in-batch dual-encoder softmax, its poly-encoder variant (same
loss over attention-derived scores), the action-centroid objective with
leave-one-out positives, and the multi-positive action-grouped dual loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import ActionLabel, TrainingExample


class SamplerError(Exception):
    """Corpus cannot supply the requested action batch."""


class DegenerateBatchError(Exception):
    """Batch too small for the loss to be meaningful."""


@dataclass(frozen=True)
class SamplerConfig:
    """M distinct actions per batch, N examples per action."""

    actions_per_batch: int = 8  # M
    examples_per_action: int = 6  # N

    def __post_init__(self):
        if self.actions_per_batch < 2:
            raise ValueError("need at least 2 actions per batch")
        if self.examples_per_action < 2:
            raise ValueError("need at least 2 examples per action")


def similarity_matrix(contexts: Tensor, responses: Tensor, w: Tensor) -> Tensor:
    """S[i, j] = w * (context_i . response_j) over unit-normalized rows."""
    return ad.mul(ad.matmul(contexts, ad.transpose(responses, (1, 0))), w)


def inbatch_loss(similarities: Tensor) -> Tensor:
    """Mean over rows of (-S_jj + log sum_i exp(S_ji))."""
    n = similarities.shape[0]
    if similarities.shape != (n, n):
        raise DegenerateBatchError("similarity matrix must be square")
    eye = np.eye(n)
    own = ad.reduce_sum(ad.mul(similarities, eye), axis=-1)
    lse = ad.logsumexp(similarities)
    return ad.mul(ad.reduce_sum(ad.sub(lse, own)), np.float64(1.0 / n))


def de_loss(contexts: Tensor, responses: Tensor, w: Tensor) -> Tensor:
    """In-batch negatives cross-entropy for paired context/response batches."""
    if contexts.shape != responses.shape:
        raise DegenerateBatchError("context/response counts differ")
    if contexts.shape[0] < 2:
        raise DegenerateBatchError("need at least 2 pairs for in-batch negatives")
    return inbatch_loss(similarity_matrix(contexts, responses, w))


def ge2e_similarity(batch: Tensor, w: Tensor) -> Tensor:
    """(M*N, M) similarities between examples and action centroids.

    batch: (M, N, d) unit-normalized embeddings, N >= 2. The own-action
    column uses a leave-one-out centroid; other columns use the full mean.
    Centroids are plain arithmetic means, not re-normalized.
    """
    if batch.data.ndim != 3:
        raise DegenerateBatchError("expected (M, N, d) batch")
    m, n, d = batch.shape
    if n < 2:
        raise DegenerateBatchError("need N >= 2 for leave-one-out centroids")
    sums = ad.reduce_sum(batch, axis=1, keepdims=True)  # (M, 1, d)
    full = ad.mul(ad.reshape(sums, (m, d)), np.float64(1.0 / n))  # (M, d)
    loo = ad.mul(ad.sub(sums, batch), np.float64(1.0 / (n - 1)))  # (M, N, d)
    own = ad.reduce_sum(ad.mul(batch, loo), axis=-1)  # (M, N)
    cross = ad.matmul(batch, ad.transpose(full, (1, 0)))  # (M, N, M)
    onehot = np.eye(m)[:, None, :]  # (M, 1, M)
    combined = ad.add(
        ad.mul(cross, 1.0 - onehot),
        ad.mul(ad.reshape(own, (m, n, 1)), onehot),
    )
    return ad.mul(ad.reshape(combined, (m * n, m)), w)


def ge2e_loss(similarities: Tensor) -> Tensor:
    """Softmax loss over centroid similarities, own action as the target."""
    rows, m = similarities.shape
    if rows % m:
        raise DegenerateBatchError("similarity matrix rows must be N*M")
    n = rows // m
    own_col = np.repeat(np.arange(m), n)
    onehot = np.zeros((rows, m))
    onehot[np.arange(rows), own_col] = 1.0
    own = ad.reduce_sum(ad.mul(similarities, onehot), axis=-1)
    lse = ad.logsumexp(similarities)
    return ad.mul(ad.reduce_sum(ad.sub(lse, own)), np.float64(1.0 / rows))


def aade_loss(contexts: Tensor, responses: Tensor, w: Tensor) -> Tensor:
    """Multi-positive in-batch loss over action-grouped (M, N, d) batches.

    For each context, every response sharing its action group is a positive:
    loss_i = -log(sum_pos e^{S_ip} / sum_all e^{S_iq}).
    """
    if contexts.shape != responses.shape or contexts.data.ndim != 3:
        raise DegenerateBatchError("expected matching (M, N, d) batches")
    m, n, d = contexts.shape
    flat_c = ad.reshape(contexts, (m * n, d))
    flat_r = ad.reshape(responses, (m * n, d))
    s = similarity_matrix(flat_c, flat_r, w)
    groups = np.repeat(np.arange(m), n)
    pos_mask = (groups[:, None] == groups[None, :]).astype(np.float64)
    lse_all = ad.logsumexp(s)
    lse_pos = ad.logsumexp(s, mask=pos_mask)
    return ad.mul(ad.reduce_sum(ad.sub(lse_all, lse_pos)), np.float64(1.0 / (m * n)))


def sample_action_batch(
    examples: list[TrainingExample], cfg: SamplerConfig, rng: np.random.Generator
) -> list[tuple[ActionLabel, list[TrainingExample]]]:
    """M distinct actions, N examples each (with replacement only when scarce).

    An example is eligible for every action in its annotation, so the same
    turn may appear under two different sampled actions.
    """
    pools: dict[ActionLabel, list[TrainingExample]] = {}
    for ex in examples:
        for action in ex.actions:
            pools.setdefault(action, []).append(ex)
    actions = sorted(pools, key=str)
    m = cfg.actions_per_batch
    if len(actions) < m:
        raise SamplerError(
            f"corpus has {len(actions)} actions; sampler needs {m}"
        )
    chosen_idx = rng.choice(len(actions), size=m, replace=False)
    batch = []
    for ai in chosen_idx:
        action = actions[int(ai)]
        pool = pools[action]
        n = cfg.examples_per_action
        if len(pool) >= n:
            picks = rng.choice(len(pool), size=n, replace=False)
        else:
            picks = rng.integers(0, len(pool), size=n)
        batch.append((action, [pool[int(p)] for p in picks]))
    return batch
