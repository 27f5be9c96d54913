"""Command-line harness: generate benchmarks, run methods, summarise results.

Subcommands::

    dualadapt generate --config exp.json [--out DIR] [--seed S] [--force]
    dualadapt run      --config exp.json [--out DIR] [--seed S ...] [--force]
    dualadapt report   RUN_DIR [--out FILE] [--force]
    dualadapt cost     --config arch.json [--out FILE] [--force]

Exit codes: 0 success, 1 usage or configuration error, 2 data error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import tempfile
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .costs import cost_table, module_cost
from .data import ShiftSpec, default_shifts, gen_benchmark, load_benchmark, save_benchmark, shard_filename, target_name
from .errors import ContractError, DualAdaptError, InsufficientDataError, ShardFormatError
from .federation import METHODS, TrainConfig, run_method
from .nn import ModelConfig, init_head, init_model

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(DualAdaptError):
    pass


class DataError(DualAdaptError):
    pass


# ---------------------------------------------------------------- config


@dataclass(frozen=True)
class BenchmarkSpec:
    num_classes: int = 4
    dim: int = 16
    n: int = 1000
    n_test: int | None = None
    target_fraction: float = 0.1
    seed: int = 0
    class_sep: float = 1.0
    cluster_std: float = 1.0
    shifts: tuple[ShiftSpec, ...] = ()

    def resolved_shifts(self) -> list[ShiftSpec]:
        return list(self.shifts) if self.shifts else default_shifts(self.dim)

    def generate(self):
        return gen_benchmark(
            self.num_classes,
            self.dim,
            self.n,
            self.resolved_shifts(),
            self.target_fraction,
            self.seed,
            class_sep=self.class_sep,
            cluster_std=self.cluster_std,
            n_test=self.n_test,
        )

    def to_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "dim": self.dim,
            "n": self.n,
            "n_test": self.n if self.n_test is None else self.n_test,
            "target_fraction": self.target_fraction,
            "seed": self.seed,
            "class_sep": self.class_sep,
            "cluster_std": self.cluster_std,
            "shifts": [s.to_dict() for s in self.resolved_shifts()],
        }


@dataclass(frozen=True)
class ExperimentConfig:
    benchmark: BenchmarkSpec
    methods: tuple[str, ...]
    seeds: tuple[int, ...]
    train: dict = field(default_factory=dict)
    data_dir: Path = Path("benchmark")
    out_dir: Path = Path("runs")

    def train_config(self, seed: int) -> TrainConfig:
        kw = dict(self.train)
        kw.setdefault("num_clients", len(self.benchmark.resolved_shifts()))
        return TrainConfig(seed=seed, **kw)


def _shift_from(d) -> ShiftSpec:
    if not isinstance(d, dict):
        raise UsageError(f"shift entries must be objects, got {d!r}")
    allowed = {"rotation", "translation", "scale", "noise"}
    extra = set(d) - allowed
    if extra:
        raise UsageError(f"unknown shift keys: {sorted(extra)}")
    d = dict(d)
    if isinstance(d.get("translation"), list):
        d["translation"] = tuple(d["translation"])
    return ShiftSpec(**d)


def _read_json(path: Path) -> dict:
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise UsageError(f"{path}: top level must be a JSON object")
    return cfg


def parse_experiment(raw: dict, base: Path = Path(".")) -> ExperimentConfig:
    """Validate a decoded experiment config; relative paths resolve against ``base``."""
    known = {"benchmark", "methods", "seeds", "train", "loss", "data_dir", "out_dir"}
    extra = set(raw) - known
    if extra:
        raise UsageError(f"unknown config keys: {sorted(extra)}")
    b = dict(raw.get("benchmark", {}))
    bench_keys = {f.name for f in fields(BenchmarkSpec)}
    if set(b) - bench_keys:
        raise UsageError(f"unknown benchmark keys: {sorted(set(b) - bench_keys)}")
    shifts = b.pop("shifts", None)
    if shifts == "default" or shifts is None:
        shifts = ()
    elif isinstance(shifts, list) and shifts:
        shifts = tuple(_shift_from(s) for s in shifts)
    else:
        raise UsageError("benchmark.shifts must be a non-empty list or \"default\"")
    bench = BenchmarkSpec(shifts=shifts, **b)

    methods = raw.get("methods", [])
    if isinstance(methods, str):
        methods = [methods]
    if not methods:
        raise UsageError("config needs at least one method")
    unknown = [m for m in methods if m not in METHODS]
    if unknown:
        raise UsageError(f"unknown method(s) {unknown}; choose from {list(METHODS)}")
    seeds = raw.get("seeds", [0])
    if isinstance(seeds, int):
        seeds = [seeds]
    if not seeds or not all(isinstance(s, int) and not isinstance(s, bool) for s in seeds):
        raise UsageError("seeds must be a non-empty list of integers")

    train = dict(raw.get("train", {}))
    train_keys = {f.name for f in fields(TrainConfig)} - {"seed"}
    if set(train) - train_keys:
        raise UsageError(f"unknown train keys: {sorted(set(train) - train_keys)}")
    loss = dict(raw.get("loss", {}))
    if set(loss) - {"lambda_st"}:
        raise UsageError(f"unknown loss keys: {sorted(set(loss) - {'lambda_st'})}")
    if "lambda_st" in loss:
        train["lambda_st"] = loss["lambda_st"]

    def resolve(p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else base / p

    exp = ExperimentConfig(
        bench,
        tuple(methods),
        tuple(int(s) for s in seeds),
        train,
        resolve(raw.get("data_dir", "benchmark")),
        resolve(raw.get("out_dir", "runs")),
    )
    exp.train_config(exp.seeds[0])  # validates the training fields
    return exp


def load_experiment(path) -> ExperimentConfig:
    path = Path(path)
    try:
        return parse_experiment(_read_json(path), path.parent)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, UsageError):
            raise
        raise UsageError(f"{path}: {exc}") from None


# ---------------------------------------------------------------- file helpers


def write_atomic(path: Path, text: str) -> None:
    """Write via a temporary file in the same directory, then rename."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def report_filename(method: str, seed: int) -> str:
    return f"{method}_seed{seed}.json"


# ---------------------------------------------------------------- commands


def cmd_generate(args) -> int:
    exp = load_experiment(args.config)
    bench_spec = exp.benchmark
    if args.seed:
        if len(args.seed) != 1:
            raise UsageError("generate takes a single --seed")
        bench_spec = BenchmarkSpec(**{**bench_spec.__dict__, "seed": args.seed[0]})
    out = Path(args.out) if args.out else exp.data_dir
    n_targets = len(bench_spec.resolved_shifts())
    domains = ["source"] + [target_name(i) for i in range(n_targets)]
    planned = [out / shard_filename(dom, split) for dom in domains for split in ("train", "test")]
    existing = [p for p in planned if p.exists()]
    if existing and not args.force:
        raise UsageError(f"{len(existing)} shard file(s) already exist in {out}; pass --force to overwrite")
    try:
        bench = bench_spec.generate()
    except ContractError as exc:
        raise UsageError(str(exc)) from None
    paths = save_benchmark(bench, out)
    write_atomic(out / "benchmark.json", json.dumps(bench_spec.to_dict(), sort_keys=True, indent=1) + "\n")
    print(f"wrote {len(paths)} shard files to {out}")
    return EXIT_OK


def _load_shards(directory: Path, num_classes: int):
    try:
        return load_benchmark(directory, num_classes)
    except FileNotFoundError as exc:
        raise DataError(f"missing shards: {exc}") from None
    except ShardFormatError as exc:
        raise DataError(str(exc)) from None


def cmd_run(args) -> int:
    exp = load_experiment(args.config)
    seeds = tuple(args.seed) if args.seed else exp.seeds
    out = Path(args.out) if args.out else exp.out_dir
    jobs = [(m, s) for m in exp.methods for s in seeds]
    targets = [out / report_filename(m, s) for m, s in jobs]
    clash = [p for p in targets if p.exists()]
    if clash and not args.force:
        raise UsageError(f"{len(clash)} report(s) already exist in {out}; pass --force to overwrite")
    bench = _load_shards(exp.data_dir, exp.benchmark.num_classes)
    meta_path = exp.data_dir / "benchmark.json"
    if meta_path.exists():
        bench.meta = json.loads(meta_path.read_text())
    for (method, seed), path in zip(jobs, targets):
        cfg = exp.train_config(seed)
        try:
            report = run_method(method, cfg, bench)
        except (ContractError, InsufficientDataError) as exc:
            raise DataError(f"{method} seed {seed}: {exc}") from None
        write_atomic(path, report.to_json() + "\n")
        print(f"{method} seed={seed} mean_accuracy={report.mean_accuracy:.4f} -> {path}")
    return EXIT_OK


REPORT_FIXED = ("method", "seed")
REPORT_TAIL = ("mean_accuracy", "client_flops", "server_flops", "upload_params", "broadcast_params")


def summarize_report(d: dict) -> dict:
    """One CSV row from a decoded report: final accuracies plus ledger totals."""
    final = d["rounds"][-1]
    row = {"method": d["method"], "seed": d["seed"]}
    for i, acc in enumerate(final["per_target_accuracy"]):
        row[target_name(i)] = acc
    row["mean_accuracy"] = final["mean_accuracy"]
    ledger = d.get("ledger", [])
    server = {"server", "central"}
    row["client_flops"] = sum(r["flops"] for r in ledger if r["participant"] not in server)
    row["server_flops"] = sum(r["flops"] for r in ledger if r["participant"] in server)
    row["upload_params"] = sum(r["upload"] for r in ledger)
    row["broadcast_params"] = sum(r["broadcast"] for r in ledger)
    return row


def build_report_rows(reports: list[dict]) -> tuple[list[str], list[dict]]:
    rows = sorted((summarize_report(d) for d in reports), key=lambda r: (r["method"], r["seed"]))
    n_targets = max(sum(1 for k in r if k.startswith("target")) for r in rows)
    header = list(REPORT_FIXED) + [target_name(i) for i in range(n_targets)] + list(REPORT_TAIL)
    numeric = header[2:]
    out = []
    for method in sorted({r["method"] for r in rows}):
        group = [r for r in rows if r["method"] == method]
        out.extend(group)
        values = np.array([[float(r.get(k, np.nan)) for k in numeric] for r in group])
        out.append({"method": method, "seed": "mean", **dict(zip(numeric, values.mean(axis=0)))})
        out.append({"method": method, "seed": "std", **dict(zip(numeric, values.std(axis=0)))})
    return header, out


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    if not run_dir.is_dir():
        raise DataError(f"run directory not found: {run_dir}")
    reports = []
    for p in sorted(run_dir.glob("*.json")):
        try:
            d = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise DataError(f"{p}: invalid JSON: {exc}") from None
        if isinstance(d, dict) and "method" in d and "rounds" in d:
            reports.append(d)
    if not reports:
        raise DataError(f"no reports in {run_dir}")
    out = Path(args.out) if args.out else run_dir / "report.csv"
    if out.exists() and not args.force:
        raise UsageError(f"{out} exists; pass --force to overwrite")
    header, rows = build_report_rows(reports)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=header, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    write_atomic(out, buf.getvalue())
    for r in rows:
        if r["seed"] == "mean":
            std = next(s for s in rows if s["method"] == r["method"] and s["seed"] == "std")
            print(f"{r['method']:<24} {100 * r['mean_accuracy']:6.2f} +- {100 * std['mean_accuracy']:.2f}")
    print(f"wrote {out}")
    return EXIT_OK


COST_COLUMNS = ("method", "computation", "upload", "broadcast")


def cost_inputs(raw: dict) -> dict:
    """Resolve an architecture config to the numbers the cost formulas need.

    Either give the numbers directly (``G_flops``, ``F_flops``, ``G_params``,
    ``F_params``, optional ``W_params`` and ``D_flops``) or describe the
    architecture (``input_dim``, ``feature_dim``, ``num_classes``,
    ``g_hidden``, ``f_hidden``, ``activation``, optional ``disc_hidden``,
    ``W_params`` or ``gmm_rank``).
    """
    direct = ("G_flops", "F_flops", "G_params", "F_params")
    if any(k in raw for k in direct):
        missing = [k for k in direct if k not in raw]
        if missing:
            raise UsageError(f"cost config missing {missing}")
        vals = {k: raw[k] for k in direct + ("W_params", "D_flops") if k in raw}
        for k, v in vals.items():
            if isinstance(v, bool) or not isinstance(v, int) or v < 0:
                raise UsageError(f"{k} must be a non-negative integer, got {v!r}")
        vals.setdefault("W_params", 0)
        vals.setdefault("D_flops", 0)
        return vals
    arch_keys = {"input_dim", "feature_dim", "num_classes", "g_hidden", "f_hidden", "activation"}
    extra = set(raw) - arch_keys - {"disc_hidden", "W_params", "gmm_rank"}
    if extra:
        raise UsageError(f"unknown cost config keys: {sorted(extra)}")
    try:
        mc = ModelConfig(**{k: raw[k] for k in arch_keys if k in raw})
    except TypeError as exc:
        raise UsageError(str(exc)) from None
    G, F = init_model(mc)
    disc_dims = [mc.feature_dim, *raw.get("disc_hidden", [mc.feature_dim]), 1]
    if min(disc_dims) < 1:
        raise UsageError("discriminator dims must be >= 1")
    D = init_head(np.random.default_rng(0), disc_dims, mc.activation, False)
    cG, cF, cD = module_cost(G), module_cost(F), module_cost(D)
    if "W_params" in raw:
        W = int(raw["W_params"])
    elif "gmm_rank" in raw:
        r, K, d = int(raw["gmm_rank"]), 2 * mc.num_classes, mc.feature_dim
        if not 1 <= r <= d:
            raise UsageError(f"gmm_rank must lie in [1, {d}]")
        W = d + d * r + K + 2 * K * r
    else:
        W = 0
    if W < 0:
        raise UsageError("W_params must be non-negative")
    return {
        "G_flops": cG.forward_flops,
        "F_flops": cF.forward_flops,
        "G_params": cG.params,
        "F_params": cF.params,
        "W_params": W,
        "D_flops": cD.forward_flops,
    }


def cmd_cost(args) -> int:
    raw = _read_json(Path(args.config))
    try:
        vals = cost_inputs(raw)
    except (ContractError, ValueError) as exc:
        if isinstance(exc, UsageError):
            raise
        raise UsageError(f"invalid architecture: {exc}") from None
    rows = cost_table(**vals)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(COST_COLUMNS), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    if args.out:
        out = Path(args.out)
        if out.exists() and not args.force:
            raise UsageError(f"{out} exists; pass --force to overwrite")
        write_atomic(out, buf.getvalue())
        print(f"wrote {out}")
    else:
        sys.stdout.write(buf.getvalue())
    return EXIT_OK


# ---------------------------------------------------------------- entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dualadapt", description="Federated multi-target domain adaptation experiments.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", help="write benchmark shard CSVs")
    p.add_argument("--config", required=True, help="experiment config JSON")
    p.add_argument("--out", help="shard directory (default: config data_dir)")
    p.add_argument("--seed", type=int, action="append", help="override the benchmark seed")
    p.add_argument("--force", action="store_true", help="overwrite existing shards")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("run", help="train every method x seed and write report JSON")
    p.add_argument("--config", required=True, help="experiment config JSON")
    p.add_argument("--out", help="report directory (default: config out_dir)")
    p.add_argument("--seed", type=int, action="append", help="run only these seeds (repeatable)")
    p.add_argument("--force", action="store_true", help="overwrite existing reports")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="summarise a run directory as CSV")
    p.add_argument("run_dir", help="directory holding report JSON files")
    p.add_argument("--out", help="CSV path (default: RUN_DIR/report.csv)")
    p.add_argument("--force", action="store_true", help="overwrite an existing CSV")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("cost", help="closed-form computation and communication table")
    p.add_argument("--config", required=True, help="architecture config JSON")
    p.add_argument("--out", help="CSV path (default: stdout)")
    p.add_argument("--force", action="store_true", help="overwrite an existing CSV")
    p.set_defaults(func=cmd_cost)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help or a usage error already printed by argparse
        return EXIT_OK if exc.code in (None, 0) else EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
