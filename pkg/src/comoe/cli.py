"""Command-line entry point: train, sweep-lambda, validate-bound, report.

Exit codes: 0 success, 1 usage or input error, 2 validation failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import migap
from .adapters import load_params, save_params
from .diagnostics import expert_workload, representation_similarity, workload_divergence
from .trainer import (LAMBDA_GRID, TrainConfig, config_to_json, dataset_spec, generate_dataset,
                      median_by_lambda, summarize, sweep_lambda, train)

EXIT_OK, EXIT_USAGE, EXIT_INVALID = 0, 1, 2

METRICS_HEADER = "# comoe-metrics v1"
METRICS_COLUMNS = ("kind", "step", "opt_step", "epoch", "ce", "con", "total", "task", "accuracy")
ROUTING_HEADER = "# comoe-routing v1"
ROUTING_COLUMNS = ("token", "task", "layer", "experts")
WORKLOAD_HEADER = "# comoe-workload v1"
SIMILARITY_HEADER = "# comoe-similarity v1"
PROJECTION_HEADER = "# comoe-projection v1"
DIVERGENCE_HEADER = "# comoe-divergence v1"
SWEEP_HEADER = "# comoe-sweep v1"

RUN_FILES = ("config.json", "metrics.csv", "routing.csv", "params.txt", "eval_reprs.txt")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _float_list(text: str) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


# ---------------------------------------------------------------- config


def load_run_config(path: str, seed: int | None = None, lam: float | None = None):
    """Resolve ``--config`` (``default`` or a JSON path) plus flag overrides.

    The file holds ``{"train": {...}, "dataset": <preset name or fields>,
    "dataset_seed": int}``; a flat object is read as the ``train`` block.
    """
    if path == "default":
        raw = {}
    else:
        p = Path(path)
        if not p.is_file():
            raise UsageError(f"config file not found: {path}")
        try:
            raw = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: invalid JSON ({exc})")
        if not isinstance(raw, dict):
            raise UsageError(f"{path}: expected a JSON object")
    if "train" not in raw and not {"dataset", "dataset_seed"} & set(raw):
        raw = {"train": raw}
    train_fields = dict(raw.get("train") or {})
    if seed is not None:
        train_fields["seed"] = seed
    if lam is not None:
        train_fields["lambda"] = lam
    try:
        config = TrainConfig.from_dict(train_fields)
        spec = dataset_spec(raw.get("dataset", "multitask"))
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad config: {exc}")
    return config, spec, int(raw.get("dataset_seed", 0))


# ---------------------------------------------------------------- writers


def _csv_text(header: str, columns, rows) -> str:
    buf = io.StringIO()
    buf.write(header + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    w.writerows(rows)
    return buf.getvalue()


def _num(v: float) -> str:
    return "nan" if isinstance(v, float) and math.isnan(v) else repr(float(v))


def metrics_rows(state) -> list[list]:
    rows = [["step", r.step, r.opt_step, r.epoch, _num(r.ce), _num(r.con), _num(r.total), "", ""]
            for r in state.history]
    for e in state.evals:
        rows.append(["eval", e.step, "", e.epoch, "", "", "", "all", _num(e.accuracy)])
        rows.extend(["eval", e.step, "", e.epoch, "", "", "", t, _num(a)]
                    for t, a in enumerate(e.task_accuracy))
    return rows


def routing_rows(ev) -> list[list]:
    rows = []
    for li, routing in enumerate(ev.routing):
        if routing is None:
            continue
        for tok, (task, idx) in enumerate(zip(ev.tasks, routing)):
            rows.append([tok, int(task), li, ";".join(str(int(i)) for i in idx)])
    return rows


def write_run(out: Path, state, spec, data_seed: int) -> None:
    out.mkdir(parents=True, exist_ok=True)
    ev = state.final_eval
    (out / "config.json").write_text(config_to_json(state.config, spec, data_seed), encoding="utf-8")
    (out / "metrics.csv").write_text(_csv_text(METRICS_HEADER, METRICS_COLUMNS, metrics_rows(state)),
                                     encoding="utf-8")
    (out / "routing.csv").write_text(_csv_text(ROUTING_HEADER, ROUTING_COLUMNS, routing_rows(ev)),
                                     encoding="utf-8")
    save_params(out / "params.txt", state.model.state_arrays())
    reprs = {f"layer{li}.reprs": r for li, r in enumerate(ev.reprs) if r is not None}
    reprs["tasks"] = ev.tasks.astype(np.float64)
    save_params(out / "eval_reprs.txt", reprs)


# ---------------------------------------------------------------- report


def read_routing(path: Path) -> dict[int, tuple[list[list[int]], list[int]]]:
    with path.open(encoding="utf-8") as fh:
        first = fh.readline().strip()
        if first != ROUTING_HEADER:
            raise UsageError(f"{path}: missing {ROUTING_HEADER!r} header")
        reader = csv.DictReader(fh)
        out: dict[int, tuple[list, list]] = {}
        for row in reader:
            li = int(row["layer"])
            experts = [int(v) for v in row["experts"].split(";") if v]
            rows, tasks = out.setdefault(li, ([], []))
            rows.append(experts)
            tasks.append(int(row["task"]))
    return out


def build_report(run_dir: Path) -> dict[str, str]:
    """CSV texts keyed by output file name; a pure function of the run directory."""
    missing = [f for f in RUN_FILES if not (run_dir / f).is_file()]
    if missing:
        raise UsageError(f"{run_dir} is not a run directory (missing {', '.join(missing)})")
    cfg = json.loads((run_dir / "config.json").read_text(encoding="utf-8"))
    n_experts = int(cfg["train"]["n_experts"])
    n_tasks = int(cfg["dataset"]["num_tasks"]) if "dataset" in cfg else None
    routing = read_routing(run_dir / "routing.csv")
    reprs = load_params(run_dir / "eval_reprs.txt")

    workload, similarity, projection, divergence = [], [], [], []
    for li in sorted(routing):
        rows, tasks = routing[li]
        w = expert_workload(rows, tasks, n_experts, n_tasks)
        for t in range(w.counts.shape[0]):
            for e in range(n_experts):
                workload.append([li, t, e, int(w.counts[t, e]), _num(float(w.freqs[t, e]))])
        jsd = workload_divergence(w) if int(w.valid_rows.sum()) >= 2 else math.nan
        key = f"layer{li}.reprs"
        if key in reprs:
            rep = representation_similarity(reprs[key])
            for i in range(n_experts):
                for j in range(n_experts):
                    similarity.append([li, i, j, _num(float(rep.cosine[i, j]))])
                projection.append([li, i, _num(float(rep.projection[i, 0])),
                                   _num(float(rep.projection[i, 1]))])
            off, excluded = rep.off_diag_mean, rep.excluded
        else:
            off, excluded = math.nan, 0
        divergence.append([li, _num(jsd), _num(off), excluded])
    return {
        "workload.csv": _csv_text(WORKLOAD_HEADER, ("layer", "task", "expert", "count", "freq"), workload),
        "similarity.csv": _csv_text(SIMILARITY_HEADER, ("layer", "expert_i", "expert_j", "cosine"),
                                    similarity),
        "projection.csv": _csv_text(PROJECTION_HEADER, ("layer", "expert", "pc1", "pc2"), projection),
        "divergence.csv": _csv_text(DIVERGENCE_HEADER,
                                    ("layer", "workload_jsd", "off_diag_mean", "excluded"), divergence),
    }


# ---------------------------------------------------------------- commands


def cmd_train(args) -> int:
    config, spec, data_seed = load_run_config(args.config, args.seed, args.lam)
    dataset = generate_dataset(spec, data_seed)
    state = train(config, dataset)
    write_run(Path(args.out), state, spec, data_seed)
    print(f"test accuracy {state.final_eval.accuracy:.4f} after {state.step} optimizer steps; "
          f"run written to {args.out}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    config, spec, data_seed = load_run_config(args.config, None, None)
    dataset = generate_dataset(spec, data_seed)
    rows = sweep_lambda(config, dataset, args.lambdas, args.seeds)
    cols = ("lambda", "seed", "accuracy", "off_diag_mean", "workload_jsd")
    body = [[_num(r.lambda_), r.seed, _num(r.accuracy), _num(r.off_diag_mean), _num(r.workload_jsd)]
            for r in rows]
    meds = {a: median_by_lambda(rows, a) for a in cols[2:]}
    med_rows = [[_num(lam)] + [_num(meds[a][lam]) for a in cols[2:]] for lam in meds["accuracy"]]
    text = _csv_text(SWEEP_HEADER, cols, body)
    med_text = _csv_text(SWEEP_HEADER, ("lambda", "median_accuracy", "median_off_diag_mean",
                                        "median_workload_jsd"), med_rows)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "sweep.csv").write_text(text, encoding="utf-8")
        (out / "sweep_median.csv").write_text(med_text, encoding="utf-8")
    sys.stdout.write(med_text)
    return EXIT_OK


def cmd_validate(args) -> int:
    if args.scenarios == "builtin":
        scenarios = migap.builtin_scenarios(n_random=args.random, seed=args.seed or 0)
    else:
        p = Path(args.scenarios)
        if not p.is_file():
            raise UsageError(f"scenario file not found: {args.scenarios}")
        try:
            scenarios = migap.load_scenarios(p)
        except (KeyError, TypeError, ValueError) as exc:
            raise UsageError(f"{args.scenarios}: bad scenario file ({exc})")
        if not scenarios:
            raise UsageError(f"{args.scenarios}: no scenarios")
    if any(n < 1 for n in args.N):
        raise UsageError("every N must be >= 1")
    rows = migap.bound_report(scenarios, args.N, args.num_mc, args.seed or 0, args.method)
    text = migap.report_csv(rows)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    bad = [r for r in rows if r.violates()]
    for r in bad:
        print(f"bound violated: {r.scenario_id} N={r.N} slack={r.slack:.3g} "
              f"stderr={r.stderr:.3g}", file=sys.stderr)
    return EXIT_INVALID if bad else EXIT_OK


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    if not run_dir.is_dir():
        raise UsageError(f"no such run directory: {run_dir}")
    outputs = build_report(run_dir)
    out = Path(args.out) if args.out else run_dir
    out.mkdir(parents=True, exist_ok=True)
    for name, text in outputs.items():
        (out / name).write_text(text, encoding="utf-8")
    print(f"wrote {', '.join(outputs)} to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="comoe", description="Contrastive mixture of LoRA experts at desk scale.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train one run and write a run directory")
    t.add_argument("--config", default="default", help="JSON config path or 'default'")
    t.add_argument("--seed", type=int)
    t.add_argument("--lambda", dest="lam", type=float)
    t.add_argument("--out", required=True, help="run directory to create")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sweep-lambda", help="train over a lambda grid and several seeds")
    s.add_argument("--config", default="default")
    s.add_argument("--lambdas", type=_float_list, default=list(LAMBDA_GRID))
    s.add_argument("--seeds", type=_int_list, default=[0, 1, 2, 3, 4])
    s.add_argument("--out", help="directory for sweep.csv and sweep_median.csv")
    s.set_defaults(func=cmd_sweep)

    v = sub.add_parser("validate-bound", help="check the InfoNCE bound against exact MI gaps")
    v.add_argument("--scenarios", default="builtin", help="'builtin' or a JSON scenario file")
    v.add_argument("--N", type=_int_list, default=[1, 4, 16, 64])
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--random", type=int, default=50, help="random scenarios added to the builtins")
    v.add_argument("--num-mc", type=int, default=20_000)
    v.add_argument("--method", choices=("mc", "exact", "auto"), default="auto")
    v.add_argument("--out", help="CSV path (default stdout)")
    v.set_defaults(func=cmd_validate)

    r = sub.add_parser("report", help="diagnostic CSVs from a run directory")
    r.add_argument("run_dir")
    r.add_argument("--out", help="output directory (default: the run directory)")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"comoe: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except migap.SamplingError as exc:
        print(f"comoe: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
