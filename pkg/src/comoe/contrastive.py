"""Contrastive objective separating activated from inactivated expert outputs.

Two forms are provided. The single-anchor form draws one activated expert
per token as the query, uses the other activated experts as positives and
every inactivated expert as a negative, and adds ``eps`` to the denominator.
The sum form makes every activated expert a query in turn and sums the
per-query terms. Similarities are cosines scaled by ``1/tau`` inside the
exponent.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import ContractError, Tensor

DEFAULT_TAU = 0.07
DEFAULT_EPS = 1e-3
DEFAULT_LAMBDA = 0.01

# clamp used when normalizing expert outputs during training; a freshly
# initialized expert (B = 0) emits an exact zero vector
NORM_EPS = 1e-12


def score(q, e, tau: float = DEFAULT_TAU) -> float:
    if tau <= 0:
        raise ContractError(f"tau must be positive, got {tau}")
    return math.exp(float(np.dot(np.asarray(q, float), np.asarray(e, float))) / tau)


@dataclass
class ContrastiveBatch:
    """One token's anchor, positive keys and negative keys, all unit-norm."""

    anchor: Tensor  # (D,)
    positives: Tensor  # (k-1, D)
    negatives: Tensor  # (n-k, D)
    tau: float = DEFAULT_TAU
    eps: float = DEFAULT_EPS

    def __post_init__(self):
        if self.tau <= 0:
            raise ContractError(f"tau must be positive, got {self.tau}")
        if self.eps < 0:
            raise ContractError(f"eps must be non-negative, got {self.eps}")
        if self.positives.ndim != 2 or self.positives.shape[0] == 0:
            raise ContractError("contrastive batch needs at least one positive (k >= 2)")
        if self.negatives.ndim != 2 or self.negatives.shape[0] == 0:
            raise ContractError("contrastive batch needs at least one negative (n > k)")
        d = self.anchor.shape[-1]
        if self.positives.shape[1] != d or self.negatives.shape[1] != d:
            raise ContractError("anchor, positives and negatives must share a dimension")

    @classmethod
    def from_representations(cls, reprs, topk, anchor_pos: int,
                             tau: float = DEFAULT_TAU, eps: float = DEFAULT_EPS) -> ContrastiveBatch:
        """Normalize ``reprs`` (n, D) and split by the top-k index list."""
        reprs = ag.as_tensor(reprs)
        n = reprs.shape[0]
        topk = [int(i) for i in topk]
        if len(set(topk)) != len(topk) or not all(0 <= i < n for i in topk):
            raise ContractError(f"bad top-k indices {topk} for {n} experts")
        unit = ag.l2_normalize(reprs, axis=1)
        a = topk[anchor_pos]
        pos = [i for j, i in enumerate(topk) if j != anchor_pos]
        neg = [i for i in range(n) if i not in topk]
        anchor = ag.reshape(_rows(unit, [a]), (reprs.shape[1],))
        return cls(anchor, _rows(unit, pos), _rows(unit, neg), tau, eps)


def _rows(m: Tensor, idx: list[int]) -> Tensor:
    sel = np.zeros((len(idx), m.shape[0]))
    sel[np.arange(len(idx)), idx] = 1.0
    return ag.einsum("kn,nd->kd", Tensor(sel), m)


def contrastive_loss_single(batch: ContrastiveBatch) -> Tensor:
    s_pos = ag.scale(ag.einsum("pd,d->p", batch.positives, batch.anchor), 1.0 / batch.tau)
    s_neg = ag.scale(ag.einsum("nd,d->n", batch.negatives, batch.anchor), 1.0 / batch.tau)
    return _nce_from_logs(ag.logsumexp(s_pos, axis=0), ag.logsumexp(s_neg, axis=0, extra=batch.eps))


def _nce_from_logs(lse_pos: Tensor, lse_neg: Tensor) -> Tensor:
    # -log(P / (P + N + eps)) = log(1 + (N + eps) / P), in log space so that
    # large scores neither overflow nor round the loss down to zero
    return ag.softplus(ag.sub(lse_neg, lse_pos))


def contrastive_loss_sumk(expert_reprs, topk_indices, tau: float = DEFAULT_TAU,
                          eps: float = 0.0) -> Tensor:
    """Sum over every activated expert as query of its InfoNCE term."""
    reprs = ag.as_tensor(expert_reprs)
    topk = [int(i) for i in topk_indices]
    n = reprs.shape[0]
    if not n > len(topk) >= 2:
        raise ContractError(f"need n > k >= 2, got n={n}, k={len(topk)}")
    terms = [contrastive_loss_single(ContrastiveBatch.from_representations(reprs, topk, j, tau, eps))
             for j in range(len(topk))]
    total = terms[0]
    for t in terms[1:]:
        total = ag.add(total, t)
    return total


# ---------------------------------------------------------------- batched training path


def _check_batch(reprs: Tensor, topk: np.ndarray) -> tuple[int, int, int]:
    if reprs.ndim != 3:
        raise ContractError(f"expected (batch, n, D) representations, got {reprs.shape}")
    batch, n, _ = reprs.shape
    if topk.shape[0] != batch:
        raise ContractError(f"{topk.shape[0]} routing rows for {batch} tokens")
    k = topk.shape[1]
    if not n > k >= 2:
        raise ContractError(f"need n > k >= 2, got n={n}, k={k}")
    return batch, n, k


def _masked_nce(sims: Tensor, pos: np.ndarray, allowed: np.ndarray, eps: float) -> Tensor:
    """Per-row -log(sum_pos e^s / (sum_allowed e^s + eps)); ``pos`` is a subset of ``allowed``."""
    neg = (allowed > 0) & ~(pos > 0)
    return _nce_from_logs(ag.logsumexp(sims, axis=-1, mask=pos > 0),
                          ag.logsumexp(sims, axis=-1, mask=neg, extra=eps))


def batched_single_anchor_loss(reprs: Tensor, topk: np.ndarray, anchor_pos: np.ndarray,
                               tau: float = DEFAULT_TAU, eps: float = DEFAULT_EPS,
                               stop_grad_negatives: bool = False) -> Tensor:
    """Token-mean single-anchor loss; ``anchor_pos[b]`` indexes into ``topk[b]``."""
    batch, n, _ = _check_batch(reprs, topk)
    rows = np.arange(batch)
    unit = ag.l2_normalize(reprs, axis=2, eps=NORM_EPS)
    anchor = topk[rows, anchor_pos]
    onehot = np.zeros((batch, n))
    onehot[rows, anchor] = 1.0
    active = np.zeros((batch, n))
    np.put_along_axis(active, topk, 1.0, axis=1)
    pos = active - onehot
    allowed = 1.0 - onehot
    q = ag.einsum("bn,bnd->bd", Tensor(onehot), unit)
    keys = _detach_negatives(unit, active) if stop_grad_negatives else unit
    sims = ag.scale(ag.einsum("bnd,bd->bn", keys, q), 1.0 / tau)
    return ag.mean(_masked_nce(sims, pos, allowed, eps))


def batched_sumk_loss(reprs: Tensor, topk: np.ndarray, tau: float = DEFAULT_TAU,
                      eps: float = DEFAULT_EPS, stop_grad_negatives: bool = False) -> Tensor:
    """Token-mean of the sum over all k queries."""
    batch, n, k = _check_batch(reprs, topk)
    unit = ag.l2_normalize(reprs, axis=2, eps=NORM_EPS)
    active = np.zeros((batch, n))
    np.put_along_axis(active, topk, 1.0, axis=1)
    keys = _detach_negatives(unit, active) if stop_grad_negatives else unit
    sims = ag.scale(ag.einsum("bid,bjd->bij", unit, keys), 1.0 / tau)
    eye = np.eye(n)[None, :, :]
    pos = active[:, :, None] * active[:, None, :] * (1.0 - eye)
    allowed = np.broadcast_to(1.0 - eye, (batch, n, n)).copy()
    per_query = _masked_nce_safe(sims, pos, allowed, eps, active)
    return ag.mean(ag.sum(per_query, axis=1))


def _masked_nce_safe(sims: Tensor, pos: np.ndarray, allowed: np.ndarray, eps: float,
                     query_mask: np.ndarray) -> Tensor:
    # rows of inactivated queries have no positives; give each a single
    # dummy positive (its first allowed key) so the logs stay finite, then
    # zero those rows out
    first = np.argmax(allowed > 0, axis=-1)
    dummy = np.zeros_like(allowed)
    np.put_along_axis(dummy, first[..., None], 1.0, axis=-1)
    pad = (1.0 - query_mask)[:, :, None] * dummy
    losses = _masked_nce(sims, pos + pad, allowed, eps)
    return ag.mul(losses, Tensor(query_mask))


def _detach_negatives(unit: Tensor, active: np.ndarray) -> Tensor:
    """Same values; gradient only flows into activated experts' slots."""
    keep = Tensor(active[:, :, None] * np.ones(unit.shape))
    frozen = Tensor(unit.data * (1.0 - keep.data))
    return ag.add(ag.mul(unit, keep), frozen)


def sample_anchor_positions(rng: np.random.Generator, batch: int, k: int) -> np.ndarray:
    return rng.integers(0, k, size=batch)


@dataclass(frozen=True)
class LossBreakdown:
    ce: float
    con: float
    total: float
    lambda_: float


def total_loss(ce: float, con: float, lam: float) -> LossBreakdown:
    if lam < 0:
        raise ContractError(f"lambda must be non-negative, got {lam}")
    return LossBreakdown(float(ce), float(con), float(ce) + float(lam) * float(con), float(lam))
