"""Post-hoc expert diagnostics: per-task workload, representation similarity, routing divergence."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


class LogCorruptionError(ValueError):
    pass


@dataclass
class WorkloadMatrix:
    counts: np.ndarray  # (tasks, experts) int
    freqs: np.ndarray  # row-normalized; NaN rows where a task has no tokens

    @property
    def valid_rows(self) -> np.ndarray:
        return self.counts.sum(axis=1) > 0


def expert_workload(routing_log: Iterable[Sequence[int]], task_tags: Iterable[int],
                    n_experts: int, n_tasks: int | None = None) -> WorkloadMatrix:
    """Token-level activation counts per task.

    ``routing_log`` holds one top-k index list per token and ``task_tags``
    the matching task ids.
    """
    rows = [np.asarray(r, dtype=np.int64).reshape(-1) for r in routing_log]
    tasks = np.asarray(list(task_tags), dtype=np.int64).reshape(-1)
    if len(rows) != len(tasks):
        raise LogCorruptionError(f"{len(rows)} routing rows but {len(tasks)} task tags")
    if tasks.size and tasks.min() < 0:
        raise LogCorruptionError("negative task id in routing log")
    if n_tasks is None:
        n_tasks = int(tasks.max()) + 1 if tasks.size else 0
    counts = np.zeros((n_tasks, n_experts), dtype=np.int64)
    for t, r in zip(tasks, rows):
        if t >= n_tasks:
            raise LogCorruptionError(f"task id {t} outside [0, {n_tasks})")
        if r.size and (r.min() < 0 or r.max() >= n_experts):
            raise LogCorruptionError(f"expert index outside [0, {n_experts}) in row {r.tolist()}")
        np.add.at(counts[t], r, 1)
    totals = counts.sum(axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        freqs = np.where(totals > 0, counts / np.maximum(totals, 1), np.nan)
    return WorkloadMatrix(counts, freqs)


def jensen_shannon(p: np.ndarray, q: np.ndarray) -> float:
    p = np.asarray(p, float)
    q = np.asarray(q, float)
    m = 0.5 * (p + q)

    def kl(a, b):
        nz = a > 0
        return float(np.sum(a[nz] * np.log(a[nz] / b[nz])))

    return 0.5 * kl(p, m) + 0.5 * kl(q, m)


def workload_divergence(w: WorkloadMatrix) -> float:
    """Mean pairwise Jensen-Shannon divergence (nats) between tasks' expert-usage rows."""
    rows = w.freqs[w.valid_rows]
    if len(rows) < 2:
        raise ValueError("workload divergence needs at least two tasks with routed tokens")
    vals = [jensen_shannon(rows[i], rows[j]) for i, j in itertools.combinations(range(len(rows)), 2)]
    return float(np.mean(vals))


@dataclass
class SimilarityReport:
    cosine: np.ndarray  # (n, n); NaN where no token had both experts non-zero
    projection: np.ndarray  # (n, 2)
    off_diag_mean: float
    excluded: int = 0


def representation_similarity(reprs: np.ndarray) -> SimilarityReport:
    """Token-averaged pairwise cosine between experts.

    ``reprs`` is ``(tokens, n_experts, dim)``. A zero-norm output drops only
    the pairs it takes part in for that token; ``excluded`` counts such
    zero-norm (token, expert) entries.
    """
    reprs = np.asarray(reprs, dtype=np.float64)
    if reprs.ndim != 3 or reprs.shape[0] < 1 or reprs.shape[1] < 2:
        raise ValueError(f"need (tokens >= 1, experts >= 2, dim) array, got {reprs.shape}")
    _, n, _ = reprs.shape
    norms = np.linalg.norm(reprs, axis=2)
    ok = norms > 0
    unit = np.divide(reprs, norms[:, :, None], out=np.zeros_like(reprs), where=ok[:, :, None])
    cos_sum = np.einsum("tid,tjd->ij", unit, unit)
    pair_count = ok.T.astype(float) @ ok.astype(float)
    cosine = np.divide(cos_sum, pair_count, out=np.full((n, n), np.nan), where=pair_count > 0)
    cosine = np.clip(0.5 * (cosine + cosine.T), -1.0, 1.0)
    np.fill_diagonal(cosine, 1.0)
    off = cosine[~np.eye(n, dtype=bool)]
    off = off[~np.isnan(off)]
    off_mean = float(np.mean(np.abs(off))) if off.size else math.nan
    return SimilarityReport(cosine, _pca2(reprs.mean(axis=0)), off_mean, int((~ok).sum()))


def _pca2(points: np.ndarray) -> np.ndarray:
    centered = points - points.mean(axis=0, keepdims=True)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:2]
    # deterministic sign: largest-magnitude loading positive
    for c in comps:
        if c[np.argmax(np.abs(c))] < 0:
            c *= -1.0
    proj = centered @ comps.T
    if proj.shape[1] < 2:
        proj = np.hstack([proj, np.zeros((proj.shape[0], 2 - proj.shape[1]))])
    return proj
