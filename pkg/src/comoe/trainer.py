"""Synthetic multi-task data, the toy adapted model, AdamW and the training loop.

The backbone is a frozen random two-layer tanh stack followed by a frozen
linear readout. Each adapted dense layer is replaced by a MoE-LoRA layer
sharing the frozen weight. The objective is cross-entropy plus ``lambda``
times the contrastive term summed over adapted layers.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autograd as ag
from . import contrastive as con
from .adapters import MoeLoraLayer, MoeOutput, frozen_forward, moe_forward
from .autograd import Tensor
from .diagnostics import expert_workload, representation_similarity, workload_divergence

log = logging.getLogger(__name__)

ADAPT_CHOICES = ("both", "first", "second")
VARIANTS = ("single_anchor", "all_queries")


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    n_experts: int = 4
    k: int = 2
    rank: int = 16
    alpha: float = 32.0
    lr: float = 2e-4
    batch_size: int = 16
    epochs: int = 2
    dropout: float = 0.05
    lambda_: float = con.DEFAULT_LAMBDA
    tau: float = con.DEFAULT_TAU
    epsilon: float = con.DEFAULT_EPS
    loss_variant: str = "single_anchor"
    stop_grad_negatives: bool = False
    seed: int = 0
    accumulation_steps: int = 8
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    hidden_dim: int = 32
    adapt_layers: str = "both"
    use_scaling: bool = True
    max_steps: int | None = None

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        self.validate()

    def validate(self) -> None:
        if not 1 <= self.k < self.n_experts:
            raise ValueError(f"need 1 <= k < n_experts, got k={self.k}, n={self.n_experts}")
        for name in ("rank", "batch_size", "epochs", "accumulation_steps", "hidden_dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("alpha", "lr", "tau", "epsilon", "adam_eps"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.lambda_ < 0:
            raise ValueError("lambda must be non-negative")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.loss_variant not in VARIANTS:
            raise ValueError(f"loss_variant must be one of {VARIANTS}")
        if self.adapt_layers not in ADAPT_CHOICES:
            raise ValueError(f"adapt_layers must be one of {ADAPT_CHOICES}")
        if self.lambda_ > 0 and self.k < 2:
            raise ValueError("the contrastive term needs k >= 2")
        if self.max_steps is not None and self.max_steps <= 0:
            raise ValueError("max_steps must be positive when set")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["lambda"] = d.pop("lambda_")
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        d = dict(d)
        if "lambda" in d:
            d["lambda_"] = d.pop("lambda")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **changes) -> TrainConfig:
        return dataclasses.replace(self, **changes)


# ---------------------------------------------------------------- data


@dataclass(frozen=True)
class SyntheticTaskSpec:
    num_tasks: int = 4
    input_dim: int = 32
    classes_per_task: int = 4
    cluster_separation: float = 3.0
    samples_per_task: int = 1000
    label_noise: float = 0.05

    def __post_init__(self):
        if self.num_tasks < 1 or self.classes_per_task < 2 or self.samples_per_task < 1:
            raise ValueError("need >= 1 task, >= 2 classes and >= 1 sample per task")
        if not self.cluster_separation > 0:
            raise ValueError("cluster_separation must be positive")
        if not 0 <= self.label_noise < 0.5:
            raise ValueError("label_noise must lie in [0, 0.5)")
        block = self.input_dim // self.num_tasks
        if block < self.classes_per_task:
            raise ValueError(f"input_dim {self.input_dim} leaves {block} dims per task, "
                             f"fewer than {self.classes_per_task} classes")
        if self.samples_per_task < 5 * self.classes_per_task:
            raise ValueError("need at least 5 samples per class for the 80/20 split")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# Desk-scale experiment datasets. The separable set needs enough samples for
# the default learning rate to converge within two epochs.
DATASET_PRESETS = {
    "multitask": SyntheticTaskSpec(num_tasks=4, input_dim=32, classes_per_task=4,
                                   cluster_separation=3.0, samples_per_task=2000, label_noise=0.05),
    "separable": SyntheticTaskSpec(num_tasks=2, input_dim=32, classes_per_task=2,
                                   cluster_separation=10.0, samples_per_task=10000, label_noise=0.0),
}


def dataset_spec(value) -> SyntheticTaskSpec:
    """A preset name, a field dict, or a spec instance."""
    if isinstance(value, SyntheticTaskSpec):
        return value
    if isinstance(value, str):
        if value not in DATASET_PRESETS:
            raise ValueError(f"unknown dataset preset {value!r}; choose from {sorted(DATASET_PRESETS)}")
        return DATASET_PRESETS[value]
    if isinstance(value, dict):
        known = {f.name for f in dataclasses.fields(SyntheticTaskSpec)}
        unknown = set(value) - known
        if unknown:
            raise ValueError(f"unknown dataset fields: {sorted(unknown)}")
        return SyntheticTaskSpec(**value)
    raise ValueError(f"cannot build a dataset spec from {value!r}")


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    task_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    task_test: np.ndarray
    num_classes: int
    num_tasks: int

    @property
    def input_dim(self) -> int:
        return self.x_train.shape[1]


def generate_dataset(spec: SyntheticTaskSpec, seed: int = 0) -> Dataset:
    """Task t lives in its own block of input coordinates.

    Class means within a block sit at ``separation / sqrt(2)`` along random
    orthonormal directions, so every pair of means is ``separation`` apart.
    Noise is unit Gaussian inside the block and zero elsewhere. Labels share
    one head of ``classes_per_task`` outputs across tasks. Each (task, class)
    group is split 80/20 before label noise is applied.
    """
    rng = np.random.default_rng(seed)
    block = spec.input_dim // spec.num_tasks
    C = spec.classes_per_task
    parts = {"train": ([], [], []), "test": ([], [], [])}
    for t in range(spec.num_tasks):
        q, _ = np.linalg.qr(rng.normal(size=(block, block)))
        means = (spec.cluster_separation / math.sqrt(2.0)) * q[:, :C].T
        labels = np.arange(spec.samples_per_task) % C
        for c in range(C):
            n_c = int(np.sum(labels == c))
            pts = means[c] + rng.normal(size=(n_c, block))
            x = np.zeros((n_c, spec.input_dim))
            x[:, t * block:(t + 1) * block] = pts
            n_test = max(1, int(round(0.2 * n_c)))
            for name, sl in (("test", slice(0, n_test)), ("train", slice(n_test, n_c))):
                xs, ys, ts = parts[name]
                xs.append(x[sl])
                ys.append(np.full(len(x[sl]), c))
                ts.append(np.full(len(x[sl]), t))
    out = {}
    for name, (xs, ys, ts) in parts.items():
        x = np.concatenate(xs)
        y = np.concatenate(ys).astype(np.int64)
        task = np.concatenate(ts).astype(np.int64)
        flip = rng.random(len(y)) < spec.label_noise
        shift = rng.integers(1, C, size=len(y))
        y = np.where(flip, (y + shift) % C, y)
        perm = rng.permutation(len(y))
        out[name] = (x[perm], y[perm], task[perm])
    return Dataset(*out["train"], *out["test"], num_classes=C, num_tasks=spec.num_tasks)


# ---------------------------------------------------------------- model


@dataclass
class ToyModel:
    W1: np.ndarray  # frozen (hidden, d_in)
    W2: np.ndarray  # frozen (hidden, hidden)
    readout: Tensor  # frozen (classes, hidden)
    layers: list[MoeLoraLayer | None]  # None where the dense layer is not adapted
    frozen: list[Tensor] = field(default_factory=list)

    def parameters(self) -> list[Tensor]:
        params = []
        for layer in self.layers:
            if layer is not None:
                params.extend(layer.parameters())
        return params

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for li, layer in enumerate(self.layers):
            if layer is None:
                continue
            for ei, e in enumerate(layer.experts):
                out[f"layer{li}.expert{ei}.A"] = e.A
                out[f"layer{li}.expert{ei}.B"] = e.B
            out[f"layer{li}.router.G"] = layer.router.G
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = {"frozen.W1": self.W1, "frozen.W2": self.W2, "frozen.readout": self.readout.data}
        arrays.update({k: v.data for k, v in self.named_parameters().items()})
        return arrays

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for key, p in self.named_parameters().items():
            if arrays[key].shape != p.shape:
                raise ValueError(f"{key}: checkpoint shape {arrays[key].shape} != {p.shape}")
            p.data = np.array(arrays[key], dtype=np.float64)


def build_model(config: TrainConfig, input_dim: int, num_classes: int,
                rng: np.random.Generator) -> ToyModel:
    h = config.hidden_dim
    W1 = rng.normal(0.0, 1.0 / math.sqrt(input_dim), size=(h, input_dim))
    W2 = rng.normal(0.0, 1.0 / math.sqrt(h), size=(h, h))
    readout = rng.normal(0.0, 1.0 / math.sqrt(h), size=(num_classes, h))
    adapt = {"both": (True, True), "first": (True, False), "second": (False, True)}[config.adapt_layers]
    layers: list[MoeLoraLayer | None] = []
    for W0, on in zip((W1, W2), adapt):
        layers.append(MoeLoraLayer.init(W0, config.n_experts, config.k, config.rank, config.alpha,
                                        rng, config.dropout, config.use_scaling) if on else None)
    return ToyModel(W1, W2, Tensor(readout), layers, [Tensor(W1), Tensor(W2)])


@dataclass
class ForwardResult:
    logits: Tensor
    layer_outputs: list[MoeOutput | None]


def model_forward(model: ToyModel, x: Tensor, need_all_experts: bool = False,
                  rng: np.random.Generator | None = None) -> ForwardResult:
    h = ag.as_tensor(x)
    outs: list[MoeOutput | None] = []
    for W0, layer in zip(model.frozen, model.layers):
        if layer is None:
            pre = frozen_forward(W0, h)
            outs.append(None)
        else:
            o = moe_forward(layer, h, need_all_experts, rng)
            pre = o.y
            outs.append(o)
        h = ag.tanh(pre)
    logits = ag.einsum("bh,ch->bc", h, model.readout)
    return ForwardResult(logits, outs)


def model_from_arrays(config: TrainConfig, arrays: dict[str, np.ndarray]) -> ToyModel:
    W1, W2, R = arrays["frozen.W1"], arrays["frozen.W2"], arrays["frozen.readout"]
    model = build_model(config, W1.shape[1], R.shape[0], np.random.default_rng(0))
    model.W1, model.W2 = W1, W2
    model.frozen = [Tensor(W1), Tensor(W2)]
    model.readout = Tensor(R)
    for W0, layer in zip(model.frozen, model.layers):
        if layer is not None:
            layer.W0 = W0
    model.load_arrays(arrays)
    return model


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamWState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamWState,
               lr: float, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
               weight_decay: float = 0.01) -> AdamWState:
    """Decoupled weight decay then bias-corrected Adam; updates ``params`` in place."""
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if weight_decay:
            p *= 1.0 - lr * weight_decay
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


# ---------------------------------------------------------------- training


@dataclass
class StepRecord:
    step: int  # micro-batch counter
    opt_step: int
    epoch: int
    ce: float
    con: float
    total: float


@dataclass
class EvalRecord:
    step: int
    epoch: int
    accuracy: float
    task_accuracy: list[float]


@dataclass
class EvalResult:
    accuracy: float
    task_accuracy: list[float]
    routing: list[np.ndarray | None]  # per layer (tokens, k)
    reprs: list[np.ndarray | None]  # per layer (tokens, n, d)
    tasks: np.ndarray


@dataclass
class TrainState:
    config: TrainConfig
    model: ToyModel
    optimizer: AdamWState
    step: int = 0
    micro_step: int = 0
    history: list[StepRecord] = field(default_factory=list)
    evals: list[EvalRecord] = field(default_factory=list)
    final_eval: EvalResult | None = None

    def log_step(self, rec: StepRecord) -> None:
        if self.history and rec.step <= self.history[-1].step:
            raise RuntimeError("step counter must strictly increase")
        self.history.append(rec)


def make_streams(seed: int) -> dict[str, np.random.Generator]:
    """Independent generators for init, data order, dropout and anchors."""
    names = ("init", "shuffle", "dropout", "anchor")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.default_rng(s) for n, s in zip(names, children)}


def contrastive_term(config: TrainConfig, out: MoeOutput, anchor_rng: np.random.Generator) -> Tensor:
    topk = out.decision.topk_indices
    if config.loss_variant == "single_anchor":
        anchors = con.sample_anchor_positions(anchor_rng, topk.shape[0], topk.shape[1])
        return con.batched_single_anchor_loss(out.expert_reprs, topk, anchors, config.tau,
                                              config.epsilon, config.stop_grad_negatives)
    return con.batched_sumk_loss(out.expert_reprs, topk, config.tau, config.epsilon,
                                 config.stop_grad_negatives)


def _check_finite(value: float, what: str, step: int, layer: int | None = None) -> None:
    if not math.isfinite(value):
        where = f"step {step}" + (f", layer {layer}" if layer is not None else "")
        raise TrainingDivergedError(f"{what} is {value} at {where}")


def evaluate(model: ToyModel, x: np.ndarray, y: np.ndarray, tasks: np.ndarray, num_tasks: int,
             collect: bool = False) -> EvalResult:
    res = model_forward(model, Tensor(x), need_all_experts=collect)
    pred = res.logits.data.argmax(axis=1)
    correct = pred == y
    task_acc = [float(correct[tasks == t].mean()) if np.any(tasks == t) else math.nan
                for t in range(num_tasks)]
    routing = [o.decision.topk_indices.copy() if o is not None else None for o in res.layer_outputs]
    reprs = [o.expert_reprs.data.copy() if (o is not None and collect) else None
             for o in res.layer_outputs]
    return EvalResult(float(correct.mean()), task_acc, routing, reprs, tasks.copy())


def objective(model: ToyModel, x: np.ndarray, y: np.ndarray, config: TrainConfig,
              anchor_rng: np.random.Generator | None = None,
              dropout_rng: np.random.Generator | None = None,
              step: int = 0) -> tuple[Tensor, con.LossBreakdown]:
    """Cross-entropy plus ``lambda`` times the contrastive term summed over adapted layers.

    With ``lambda == 0`` only the activated experts run and no anchor is drawn.
    """
    use_con = config.lambda_ > 0
    res = model_forward(model, Tensor(x), use_con, dropout_rng)
    ce = ag.cross_entropy(res.logits, y)
    _check_finite(ce.item(), "cross-entropy", step)
    if not use_con:
        return ce, con.total_loss(ce.item(), 0.0, 0.0)
    con_total = None
    for li, o in enumerate(res.layer_outputs):
        if o is None:
            continue
        term = contrastive_term(config, o, anchor_rng)
        _check_finite(term.item(), "contrastive loss", step, li)
        con_total = term if con_total is None else ag.add(con_total, term)
    loss = ag.add(ce, ag.scale(con_total, config.lambda_))
    return loss, con.total_loss(ce.item(), con_total.item(), config.lambda_)


def train(config: TrainConfig, dataset: Dataset) -> TrainState:
    config.validate()
    streams = make_streams(config.seed)
    model = build_model(config, dataset.input_dim, dataset.num_classes, streams["init"])
    state = TrainState(config, model, AdamWState())
    params = model.named_parameters()
    n = len(dataset.y_train)
    accum = 0
    done = False
    for epoch in range(config.epochs):
        order = streams["shuffle"].permutation(n)
        starts = range(0, n, config.batch_size)
        for bi, start in enumerate(starts):
            idx = order[start:start + config.batch_size]
            state.micro_step += 1
            loss, breakdown = objective(model, dataset.x_train[idx], dataset.y_train[idx], config,
                                        streams["anchor"], streams["dropout"], state.micro_step)
            _check_finite(loss.item(), "total loss", state.micro_step)
            ag.backward(loss)
            accum += 1
            state.log_step(StepRecord(state.micro_step, state.step, epoch, breakdown.ce,
                                      breakdown.con, breakdown.total))
            last = bi == len(starts) - 1
            if accum == config.accumulation_steps or last:
                _optimizer_step(state, params, accum)
                accum = 0
                if config.max_steps is not None and state.step >= config.max_steps:
                    done = True
                    break
        ev = evaluate(model, dataset.x_test, dataset.y_test, dataset.task_test, dataset.num_tasks)
        state.evals.append(EvalRecord(state.micro_step, epoch, ev.accuracy, ev.task_accuracy))
        log.info("epoch %d: step %d, test accuracy %.4f", epoch, state.step, ev.accuracy)
        if done:
            break
    state.final_eval = evaluate(model, dataset.x_test, dataset.y_test, dataset.task_test,
                                dataset.num_tasks, collect=True)
    return state


def _optimizer_step(state: TrainState, params: dict[str, Tensor], accum: int) -> None:
    c = state.config
    grads = {k: p.grad / accum for k, p in params.items() if p.grad is not None}
    adamw_step({k: p.data for k, p in params.items()}, grads, state.optimizer,
               c.lr, c.betas, c.adam_eps, c.weight_decay)
    ag.zero_grad(params.values())
    state.step += 1


# ---------------------------------------------------------------- diagnostics over a run


@dataclass
class RunSummary:
    lambda_: float
    seed: int
    accuracy: float
    off_diag_mean: float
    workload_jsd: float
    task_accuracy: list[float]


def summarize(state: TrainState) -> RunSummary:
    """Test accuracy plus adapted-layer means of expert similarity and workload divergence."""
    ev = state.final_eval
    cfg = state.config
    sims, jsds = [], []
    for routing, reprs in zip(ev.routing, ev.reprs):
        if routing is None:
            continue
        sims.append(representation_similarity(reprs).off_diag_mean)
        w = expert_workload(routing, ev.tasks, cfg.n_experts, len(ev.task_accuracy))
        jsds.append(workload_divergence(w))
    return RunSummary(cfg.lambda_, cfg.seed, ev.accuracy, float(np.nanmean(sims)),
                      float(np.mean(jsds)), list(ev.task_accuracy))


LAMBDA_GRID = (0.0, 0.001, 0.01, 0.1, 1.0)


def sweep_lambda(config: TrainConfig, dataset: Dataset, lambdas: Sequence[float] = LAMBDA_GRID,
                 seeds: Sequence[int] = (0,)) -> list[RunSummary]:
    rows = []
    for lam in lambdas:
        for s in seeds:
            state = train(config.replace(lambda_=float(lam), seed=int(s)), dataset)
            rows.append(summarize(state))
            log.info("lambda=%g seed=%d acc=%.4f sim=%.4f jsd=%.4f", lam, s, rows[-1].accuracy,
                     rows[-1].off_diag_mean, rows[-1].workload_jsd)
    return rows


def median_by_lambda(rows: Sequence[RunSummary], attr: str) -> dict[float, float]:
    out: dict[float, list[float]] = {}
    for r in rows:
        out.setdefault(r.lambda_, []).append(getattr(r, attr))
    return {lam: float(np.median(v)) for lam, v in out.items()}


def config_to_json(config: TrainConfig, spec: SyntheticTaskSpec | None = None,
                   data_seed: int | None = None) -> str:
    payload = {"train": config.to_dict()}
    if spec is not None:
        payload["dataset"] = spec.to_dict()
        payload["dataset_seed"] = data_seed
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"
