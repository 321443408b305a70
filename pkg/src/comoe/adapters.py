"""LoRA experts, softmax router with top-k renormalization, and the MoE-LoRA layer."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import ShapeError, Tensor


class RoutingError(ValueError):
    pass


@dataclass
class LoraExpert:
    """Low-rank pair with ``A: (r, d_in)`` and ``B: (d_out, r)``.

    ``r <= min(d_in, d_out) / 2`` is enforced unless ``enforce_low_rank`` is
    off, which only hand-built experts (identity checks and the like) need.
    """

    A: Tensor
    B: Tensor
    alpha: float
    use_scaling: bool = True
    enforce_low_rank: bool = True

    def __post_init__(self):
        r, d_in = self.A.shape
        d_out, r_b = self.B.shape
        if r != r_b:
            raise ShapeError(f"LoRA ranks disagree: A {self.A.shape}, B {self.B.shape}")
        if self.enforce_low_rank and 2 * r > min(d_in, d_out):
            raise ShapeError(f"rank {r} too large for a {d_out}x{d_in} weight (need r <= min/2)")

    @classmethod
    def init(cls, d_in: int, d_out: int, rank: int, alpha: float,
             rng: np.random.Generator, std: float = 0.02,
             use_scaling: bool = True) -> LoraExpert:
        A = Tensor(rng.normal(0.0, std, size=(rank, d_in)), requires_grad=True)
        B = Tensor(np.zeros((d_out, rank)), requires_grad=True)
        return cls(A, B, alpha, use_scaling)

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def d_in(self) -> int:
        return self.A.shape[1]

    @property
    def d_out(self) -> int:
        return self.B.shape[0]

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank if self.use_scaling else 1.0

    def parameters(self) -> list[Tensor]:
        return [self.A, self.B]


@dataclass
class Router:
    G: Tensor  # (n_experts, d_in)

    @classmethod
    def init(cls, n_experts: int, d_in: int, rng: np.random.Generator,
             std: float = 0.02) -> Router:
        return cls(Tensor(rng.normal(0.0, std, size=(n_experts, d_in)), requires_grad=True))

    @property
    def n_experts(self) -> int:
        return self.G.shape[0]

    def parameters(self) -> list[Tensor]:
        return [self.G]


@dataclass
class RoutingDecision:
    """Top-k selection for one token (1-D fields) or a batch (leading batch axis).

    ``weights`` is the dense renormalized gate with zeros on inactivated
    experts; ``renorm_weights`` gathers its nonzero entries in the order of
    ``topk_indices`` (descending gate probability, ties to the lower index).
    """

    topk_indices: np.ndarray
    gate_probs: Tensor
    weights: Tensor

    @property
    def k(self) -> int:
        return self.topk_indices.shape[-1]

    @property
    def renorm_weights(self) -> np.ndarray:
        return np.take_along_axis(self.weights.data, self.topk_indices, axis=-1)

    @property
    def mask(self) -> np.ndarray:
        m = np.zeros(self.weights.shape, dtype=bool)
        np.put_along_axis(m, self.topk_indices, True, axis=-1)
        return m


@dataclass
class MoeLoraLayer:
    W0: Tensor  # frozen (d_out, d_in)
    experts: list[LoraExpert]
    router: Router
    k: int
    dropout_rate: float = 0.0

    def __post_init__(self):
        if self.W0.requires_grad:
            raise ValueError("W0 must be frozen (requires_grad=False)")
        n = len(self.experts)
        if self.router.n_experts != n:
            raise ValueError(f"router has {self.router.n_experts} rows for {n} experts")
        if not 1 <= self.k <= n:
            raise RoutingError(f"k={self.k} outside [1, {n}]")
        d_out, d_in = self.W0.shape
        for e in self.experts:
            if (e.d_in, e.d_out) != (d_in, d_out):
                raise ShapeError(f"expert maps {e.d_in}->{e.d_out}, layer is {d_in}->{d_out}")

    @classmethod
    def init(cls, W0: np.ndarray, n_experts: int, k: int, rank: int, alpha: float,
             rng: np.random.Generator, dropout_rate: float = 0.0,
             use_scaling: bool = True) -> MoeLoraLayer:
        d_out, d_in = W0.shape
        experts = [LoraExpert.init(d_in, d_out, rank, alpha, rng, use_scaling=use_scaling)
                   for _ in range(n_experts)]
        router = Router.init(n_experts, d_in, rng)
        return cls(Tensor(W0), experts, router, k, dropout_rate)

    @property
    def n_experts(self) -> int:
        return len(self.experts)

    @property
    def d_in(self) -> int:
        return self.W0.shape[1]

    @property
    def d_out(self) -> int:
        return self.W0.shape[0]

    def parameters(self) -> list[Tensor]:
        params = []
        for e in self.experts:
            params.extend(e.parameters())
        params.extend(self.router.parameters())
        return params


@dataclass
class MoeOutput:
    y: Tensor
    decision: RoutingDecision
    # (batch, n, d_out) when all experts were requested, else (batch, k, d_out)
    expert_reprs: Tensor
    all_experts: bool = field(default=False)


def _as_batch(x: Tensor, d_in: int, who: str) -> tuple[Tensor, bool]:
    if x.ndim == 1:
        if x.shape[0] != d_in:
            raise ShapeError(f"{who}: input dim {x.shape[0]} != {d_in}")
        return ag.reshape(x, (1, d_in)), True
    if x.ndim != 2 or x.shape[1] != d_in:
        raise ShapeError(f"{who}: input shape {x.shape} incompatible with d_in={d_in}")
    return x, False


def _unbatch(t: Tensor, squeeze: bool) -> Tensor:
    return ag.reshape(t, t.shape[1:]) if squeeze else t


def expert_forward(expert: LoraExpert, x: Tensor) -> Tensor:
    """(alpha/r) * B A x for a vector or a (batch, d_in) matrix."""
    xb, squeeze = _as_batch(ag.as_tensor(x), expert.d_in, "expert_forward")
    h = ag.einsum("bd,rd->br", xb, expert.A)
    out = ag.einsum("br,or->bo", h, expert.B)
    if expert.scaling != 1.0:
        out = ag.scale(out, expert.scaling)
    return _unbatch(out, squeeze)


def frozen_forward(W0: Tensor, x: Tensor) -> Tensor:
    xb, squeeze = _as_batch(ag.as_tensor(x), W0.shape[1], "frozen_forward")
    return _unbatch(ag.einsum("bd,od->bo", xb, W0), squeeze)


def lora_forward(W0: Tensor, expert: LoraExpert, x: Tensor) -> Tensor:
    if W0.shape != (expert.d_out, expert.d_in):
        raise ShapeError(f"W0 {W0.shape} does not match expert {expert.d_out}x{expert.d_in}")
    return ag.add(frozen_forward(W0, x), expert_forward(expert, x))


def topk_indices(probs: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries per row, descending; ties go to the lower index."""
    order = np.argsort(-probs, axis=-1, kind="stable")
    return order[..., :k]


def route(router: Router, x: Tensor, k: int) -> RoutingDecision:
    n = router.n_experts
    if not 1 <= k <= n:
        raise RoutingError(f"k={k} outside [1, {n}]")
    xb, squeeze = _as_batch(ag.as_tensor(x), router.G.shape[1], "route")
    logits = ag.einsum("bd,nd->bn", xb, router.G)
    return decide(logits, k, squeeze)


def decide(logits: Tensor, k: int, squeeze: bool = False) -> RoutingDecision:
    """Softmax gate, top-k selection and renormalization over the selected experts."""
    batch, n = logits.shape
    probs = ag.softmax(logits, axis=1)
    idx = topk_indices(probs.data, k)
    mask = np.zeros((batch, n))
    np.put_along_axis(mask, idx, 1.0, axis=1)
    kept = ag.mul(probs, Tensor(mask))
    total = ag.sum(kept, axis=1)
    spread = ag.einsum("b,n->bn", total, Tensor(np.ones(n)))
    weights = ag.div(kept, spread)
    if squeeze:
        return RoutingDecision(idx[0], _unbatch(probs, True), _unbatch(weights, True))
    return RoutingDecision(idx, probs, weights)


def moe_forward(layer: MoeLoraLayer, x: Tensor, need_all_experts: bool = False,
                rng: np.random.Generator | None = None) -> MoeOutput:
    """Frozen projection plus the renormalized mixture of the activated experts.

    With ``need_all_experts`` every expert is evaluated on every token so the
    inactivated ones can serve as contrastive negatives. Otherwise an expert
    runs only if some token in the batch selects it; unselected slots carry
    exact zeros. ``rng`` enables dropout on the expert-branch input.
    """
    x = ag.as_tensor(x)
    xb, squeeze = _as_batch(x, layer.d_in, "moe_forward")
    decision = route(layer.router, xb, layer.k)
    x_drop = ag.dropout(xb, layer.dropout_rate, rng)
    batch = xb.shape[0]
    active = np.unique(decision.topk_indices)
    outs = []
    for i, expert in enumerate(layer.experts):
        if need_all_experts or i in active:
            outs.append(expert_forward(expert, x_drop))
        else:
            outs.append(Tensor(np.zeros((batch, layer.d_out))))
    stacked = ag.stack(outs, axis=1)  # (batch, n, d_out)
    mixed = ag.einsum("bn,bnd->bd", decision.weights, stacked)
    y = ag.add(frozen_forward(layer.W0, xb), mixed)
    if need_all_experts:
        reprs = stacked
    else:
        onehot = np.zeros((batch, layer.k, layer.n_experts))
        np.put_along_axis(onehot, decision.topk_indices[:, :, None], 1.0, axis=2)
        reprs = ag.einsum("bkn,bnd->bkd", Tensor(onehot), stacked)
    if squeeze:
        decision = RoutingDecision(decision.topk_indices[0],
                                   _unbatch(decision.gate_probs, True),
                                   _unbatch(decision.weights, True))
        return MoeOutput(_unbatch(y, True), decision, _unbatch(reprs, True), need_all_experts)
    return MoeOutput(y, decision, reprs, need_all_experts)


# ---------------------------------------------------------------- checkpoint format
#
# Text file, one block per array:
#
#     # comoe-params v1
#     <key> <ndim> <dim_0> ... <dim_{ndim-1}>
#     <row-major values, space separated, repr-exact>
#
# Keys are dotted paths such as ``layer0.expert2.A``. Blank lines are ignored.

PARAMS_HEADER = "# comoe-params v1"


def save_params(path, arrays: dict[str, np.ndarray]) -> None:
    lines = [PARAMS_HEADER]
    for key, arr in arrays.items():
        if any(c.isspace() for c in key) or not key:
            raise ValueError(f"parameter key {key!r} must be non-empty without whitespace")
        arr = np.asarray(arr, dtype=np.float64)
        lines.append(" ".join([key, str(arr.ndim), *map(str, arr.shape)]))
        lines.append(" ".join(repr(float(v)) for v in arr.reshape(-1)))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_params(path) -> dict[str, np.ndarray]:
    with open(path, encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    if not lines or lines[0].strip() != PARAMS_HEADER:
        raise ValueError(f"{path}: missing {PARAMS_HEADER!r} header")
    body = [ln for ln in lines[1:] if ln.strip()]
    if len(body) % 2:
        raise ValueError(f"{path}: truncated parameter block")
    out: dict[str, np.ndarray] = {}
    for head, values in zip(body[0::2], body[1::2]):
        parts = head.split()
        key, ndim = parts[0], int(parts[1])
        shape = tuple(int(p) for p in parts[2:2 + ndim])
        if len(parts) != 2 + ndim:
            raise ValueError(f"{path}: malformed header {head!r}")
        flat = np.array([float(v) for v in values.split()], dtype=np.float64)
        if flat.size != int(np.prod(shape, dtype=np.int64)):
            raise ValueError(f"{path}: {key} has {flat.size} values for shape {shape}")
        out[key] = flat.reshape(shape)
    return out
