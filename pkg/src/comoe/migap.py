"""Exact mutual information on finite joints and the InfoNCE lower bound on the MI gap.

All logarithms are natural (nats). The InfoNCE critic uses the exact density
ratio ``p(e|x) / p(e)`` read off each joint; negatives are drawn from the
inactivated joint conditioned on the same ``x`` as the positive pair.
"""
from __future__ import annotations

import csv
import io
import itertools
import json
import math
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np


class JointError(ValueError):
    """Malformed joint distribution."""


class MarginalMismatchError(ValueError):
    """The two joints of a gap scenario disagree on p(x)."""


class SamplingError(ValueError):
    pass


@dataclass(frozen=True)
class DiscreteJoint:
    px_m: np.ndarray

    def __post_init__(self):
        p = np.array(self.px_m, dtype=np.float64)
        if p.ndim != 2 or p.size == 0:
            raise JointError(f"joint must be a non-empty matrix, got shape {p.shape}")
        if not np.all(np.isfinite(p)) or np.any(p < 0):
            raise JointError("joint entries must be finite and non-negative")
        if abs(p.sum() - 1.0) > 1e-12:
            raise JointError(f"joint sums to {p.sum()!r}, not 1")
        p.setflags(write=False)
        object.__setattr__(self, "px_m", p)

    @classmethod
    def normalized(cls, weights) -> DiscreteJoint:
        w = np.asarray(weights, dtype=np.float64)
        return cls(w / w.sum())

    @property
    def p_x(self) -> np.ndarray:
        return self.px_m.sum(axis=1)

    @property
    def p_m(self) -> np.ndarray:
        return self.px_m.sum(axis=0)

    def conditional(self) -> np.ndarray:
        """p(m | x); rows with p(x) = 0 are left at zero."""
        px = self.p_x[:, None]
        return np.divide(self.px_m, px, out=np.zeros_like(self.px_m), where=px > 0)

    def density_ratio(self) -> np.ndarray:
        """p(m | x) / p(m) = p(x, m) / (p(x) p(m)), zero where p(x, m) = 0."""
        # divide in two steps: the product p(x) p(m) can underflow when both are tiny
        pm = np.broadcast_to(self.p_m, self.px_m.shape)
        return np.divide(self.conditional(), pm, out=np.zeros_like(self.px_m), where=self.px_m > 0)


def mutual_information(joint: DiscreteJoint) -> float:
    p = joint.px_m
    xi, mi = np.nonzero(p)
    v = p[xi, mi]
    # log-domain ratio so that tiny marginals cannot overflow it
    log_ratio = np.log(v) - np.log(joint.p_x[xi]) - np.log(joint.p_m[mi])
    return max(0.0, float(np.sum(v * log_ratio)))


@dataclass(frozen=True)
class GapScenario:
    joint_pos: DiscreteJoint
    joint_neg: DiscreteJoint

    def __post_init__(self):
        a, b = self.joint_pos.p_x, self.joint_neg.p_x
        if a.shape != b.shape or np.max(np.abs(a - b)) > 1e-9:
            raise MarginalMismatchError("activated and inactivated joints disagree on p(x)")

    @property
    def p_x(self) -> np.ndarray:
        return self.joint_pos.p_x


def mi_gap(scenario: GapScenario) -> float:
    # re-validate: frozen dataclasses can still be built with object.__new__
    GapScenario.__post_init__(scenario)
    return float(mutual_information(scenario.joint_pos) - mutual_information(scenario.joint_neg))


class Estimate(NamedTuple):
    value: float
    stderr: float
    exact: bool


def _check_sampleable(scenario: GapScenario, N: int) -> None:
    if int(N) != N or N < 1:
        raise SamplingError(f"number of negatives must be a positive integer, got {N!r}")
    pos_rows = scenario.joint_pos.px_m.sum(axis=1) > 0
    neg_rows = scenario.joint_neg.px_m.sum(axis=1) > 0
    if np.any(pos_rows & ~neg_rows):
        raise SamplingError("an x with activated mass has no inactivated conditional to sample from")


def _row_cdf(cond: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(cond, axis=1)
    for r in range(cond.shape[0]):
        nz = np.flatnonzero(cond[r] > 0)
        if nz.size:
            cdf[r] /= cdf[r, -1]
            cdf[r, nz[-1]:] = 1.0
    return cdf


def _sample_rows(cdf_rows: np.ndarray, u: np.ndarray) -> np.ndarray:
    # cdf_rows (..., m) aligned with u (...); returns indices in [0, m)
    return (u[..., None] >= cdf_rows).sum(axis=-1)


def infonce_terms_mc(scenario: GapScenario, N: int, num_mc: int,
                     rng: np.random.Generator, chunk: int = 8192) -> np.ndarray:
    """Per-sample values of log N + log h1 - log(h1 + sum h2)."""
    _check_sampleable(scenario, N)
    if num_mc < 1:
        raise SamplingError(f"num_mc must be >= 1, got {num_mc}")
    px = scenario.p_x / scenario.p_x.sum()
    cdf_x = np.cumsum(px)
    cdf_x[np.flatnonzero(px > 0)[-1]:] = 1.0
    cdf_pos = _row_cdf(scenario.joint_pos.conditional())
    cdf_neg = _row_cdf(scenario.joint_neg.conditional())
    h1 = scenario.joint_pos.density_ratio()
    h2 = scenario.joint_neg.density_ratio()
    out = np.empty(num_mc)
    logn = math.log(N)
    for start in range(0, num_mc, chunk):
        m = min(chunk, num_mc - start)
        xs = (rng.random(m)[:, None] >= cdf_x).sum(axis=1)
        ep = _sample_rows(cdf_pos[xs], rng.random(m))
        en = _sample_rows(cdf_neg[xs][:, None, :], rng.random((m, N)))
        s1 = h1[xs, ep]
        s2 = h2[xs[:, None], en].sum(axis=1)
        out[start:start + m] = logn + np.log(s1) - np.log(s1 + s2)
    return out


def _compositions(total: int, parts: int) -> np.ndarray:
    """All non-negative integer vectors of length ``parts`` summing to ``total``."""
    if parts == 1:
        return np.array([[total]], dtype=np.int64)
    bars = np.array(list(itertools.combinations(range(total + parts - 1), parts - 1)),
                    dtype=np.int64)
    edges = np.hstack([np.full((len(bars), 1), -1), bars,
                       np.full((len(bars), 1), total + parts - 1)])
    return np.diff(edges, axis=1) - 1


EXACT_MAX_SUPPORT = 64
EXACT_MAX_COMPOSITIONS = 250_000


def exact_feasible(scenario: GapScenario, N: int) -> bool:
    nx, mp = scenario.joint_pos.px_m.shape
    mn = scenario.joint_neg.px_m.shape[1]
    if nx * max(mp, mn) > EXACT_MAX_SUPPORT:
        return False
    support = int((scenario.joint_neg.conditional() > 0).sum(axis=1).max())
    return math.comb(N + support - 1, support - 1) <= EXACT_MAX_COMPOSITIONS


def infonce_exact(scenario: GapScenario, N: int) -> float:
    """Expectation of log N - L_NCE by enumerating every negative multiset.

    The sum of negative scores depends only on how many times each
    inactivated value was drawn, so the N-fold product is replaced by a
    multinomial over count vectors.
    """
    _check_sampleable(scenario, N)
    px = scenario.p_x
    cond_pos = scenario.joint_pos.conditional()
    cond_neg = scenario.joint_neg.conditional()
    h1 = scenario.joint_pos.density_ratio()
    h2 = scenario.joint_neg.density_ratio()
    logn = math.log(N)
    lgN = math.lgamma(N + 1)
    total = 0.0
    for x in np.flatnonzero(px > 0):
        sup = np.flatnonzero(cond_neg[x] > 0)
        counts = _compositions(N, len(sup))
        log_coef = lgN - _lgamma_rows(counts)
        logp = log_coef + counts @ np.log(cond_neg[x, sup])
        probs = np.exp(logp)
        s2 = counts @ h2[x, sup]
        for e in np.flatnonzero(cond_pos[x] > 0):
            s1 = h1[x, e]
            inner = float(np.dot(probs, np.log(s1) - np.log(s1 + s2)))
            total += px[x] * cond_pos[x, e] * (logn + inner)
    return total


def _lgamma_rows(counts: np.ndarray) -> np.ndarray:
    table = np.array([math.lgamma(c + 1) for c in range(int(counts.max()) + 1)])
    return table[counts].sum(axis=1)


def infonce_estimate(scenario: GapScenario, N: int, num_mc: int = 100_000, seed=0,
                     method: str = "mc") -> Estimate:
    """log(N) - L_NCE with the optimal critic.

    ``method`` is ``"mc"`` (sampled, with standard error), ``"exact"``
    (enumeration; raises if the support is too large) or ``"auto"``.
    """
    if method not in {"mc", "exact", "auto"}:
        raise ValueError(f"unknown method {method!r}")
    if method == "exact" or (method == "auto" and exact_feasible(scenario, N)):
        if method == "exact" and not exact_feasible(scenario, N):
            raise SamplingError("support too large for exact enumeration")
        return Estimate(float(infonce_exact(scenario, N)), 0.0, True)
    rng = np.random.default_rng(seed)
    terms = infonce_terms_mc(scenario, N, num_mc, rng)
    se = float(terms.std(ddof=1) / math.sqrt(num_mc)) if num_mc > 1 else float("inf")
    return Estimate(float(terms.mean()), se, False)


# ---------------------------------------------------------------- scenarios


def independent_joint(px, pm) -> DiscreteJoint:
    return DiscreteJoint.normalized(np.outer(px, pm))


def builtin_scenarios(n_random: int = 0, seed: int = 0) -> list[tuple[str, GapScenario]]:
    m = 4
    uniform = np.full(m, 1.0 / m)
    bijection = DiscreteJoint(np.eye(m) / m)
    indep = independent_joint(uniform, uniform)
    out = [
        ("independent", GapScenario(indep, indep)),
        ("deterministic", GapScenario(bijection, indep)),
        ("identical", GapScenario(bijection, bijection)),
    ]
    rng = np.random.default_rng(seed)
    out.extend((f"random-{i:02d}", random_scenario(rng)) for i in range(n_random))
    return out


def random_scenario(rng: np.random.Generator, max_x: int = 5, max_m: int = 4) -> GapScenario:
    """Dirichlet-drawn p(x), p(e+|x), p(e-|x) on small supports."""
    nx = int(rng.integers(2, max_x + 1))
    mp = int(rng.integers(2, max_m + 1))
    mn = int(rng.integers(2, max_m + 1))
    px = rng.dirichlet(np.ones(nx))
    conc_pos = float(rng.choice([0.2, 0.5, 1.0, 3.0]))
    conc_neg = float(rng.choice([0.5, 1.0, 3.0, 20.0]))
    pos = px[:, None] * rng.dirichlet(np.full(mp, conc_pos), size=nx)
    neg = px[:, None] * rng.dirichlet(np.full(mn, conc_neg), size=nx)
    # renormalize both to the shared marginal after rounding
    pos /= pos.sum()
    neg /= neg.sum()
    return GapScenario(DiscreteJoint(pos), DiscreteJoint(neg))


def load_scenarios(path) -> list[tuple[str, GapScenario]]:
    """Read ``[{"id": ..., "joint_pos": [[...]], "joint_neg": [[...]]}, ...]`` JSON."""
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    if isinstance(raw, dict):
        raw = raw.get("scenarios", [])
    out = []
    for i, item in enumerate(raw):
        sid = str(item.get("id", f"user-{i:02d}"))
        out.append((sid, GapScenario(DiscreteJoint(item["joint_pos"]),
                                     DiscreteJoint(item["joint_neg"]))))
    return out


# ---------------------------------------------------------------- report

REPORT_HEADER = "# comoe-bound-report v1"
REPORT_COLUMNS = ("scenario_id", "N", "delta_I", "estimate", "slack", "stderr")


@dataclass(frozen=True)
class BoundRow:
    scenario_id: str
    N: int
    delta_I: float
    estimate: float
    slack: float
    stderr: float

    def violates(self, n_se: float = 3.0, exact_tol: float = 1e-9) -> bool:
        tol = n_se * self.stderr if self.stderr > 0 else exact_tol
        return self.slack < -tol


def bound_report(scenarios: Iterable[tuple[str, GapScenario]], Ns: Sequence[int],
                 num_mc: int = 20_000, seed: int = 0, method: str = "mc") -> list[BoundRow]:
    rows = []
    for s_idx, (sid, sc) in enumerate(scenarios):
        gap = mi_gap(sc)
        for N in Ns:
            cell_seed = np.random.SeedSequence([seed, s_idx, int(N)])
            est = infonce_estimate(sc, int(N), num_mc, cell_seed, method)
            rows.append(BoundRow(sid, int(N), float(gap), float(est.value), float(gap - est.value),
                                float(est.stderr)))
    return rows


def report_csv(rows: Sequence[BoundRow]) -> str:
    buf = io.StringIO()
    buf.write(REPORT_HEADER + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in rows:
        w.writerow([r.scenario_id, r.N, repr(float(r.delta_I)), repr(float(r.estimate)),
                    repr(float(r.slack)), repr(float(r.stderr))])
    return buf.getvalue()
