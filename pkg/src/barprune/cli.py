"""Command-line driver: dataset generation, teacher training, pruning, eval and sweeps.

Every subcommand reads a flat ``key = value`` config file.  Outputs land in
the output directory (``out_dir`` key, overridden by ``--out``)::

    teacher.ckpt  teacher.logits  teacher.csv  teacher.txt
    pruned.ckpt   run.csv         report.txt
    sweep.csv     sweep/<method>_x<factor>.ckpt

Exit codes: 0 success, 1 usage or config error, 2 integrity error,
3 budget violation.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Optional

from . import formats
from .budget import LossConfig, full_flops, full_volume, hard_flops, hard_volume
from .data import Dataset, generate_patterns
from .distill import LogitsCache
from .errors import BudgetViolation, ConfigError, IntegrityError, SpecError
from .netgraph import Network, NetworkSpec, PrunedGraph, StageSpec, cost_report
from .trainer import BarResult, TrainConfig, bar_train, baseline_prune, evaluate, train_teacher

log = logging.getLogger("barprune")

EXIT_OK, EXIT_CONFIG, EXIT_INTEGRITY, EXIT_BUDGET = 0, 1, 2, 3

SWEEP_FRACTIONS = (0.5, 0.25, 0.125, 0.0625)
SWEEP_COLUMNS = (
    "method", "budget_fraction", "factor", "status", "accuracy", "V_F", "B", "V",
    "flops", "volume_factor", "flop_factor", "regular_block_volume", "regular_block_flops",
)


# ---------------------------------------------------------------------------
# config


def _list_of(conv: Callable[[str], Any]) -> Callable[[str], tuple]:
    def parse(text: str) -> tuple:
        return tuple(conv(p.strip()) for p in text.split(",") if p.strip())

    return parse


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# key -> (parser, default); a default of None marks the key as required where used
SCHEMA: dict[str, tuple[Callable[[str], Any], Any]] = {
    "data_dir": (str, None),
    "out_dir": (str, "runs"),
    "seed": (int, 0),
    # dataset
    "classes": (int, 4),
    "train_samples": (int, 2000),
    "eval_samples": (int, 500),
    "image_size": (int, 16),
    "channels": (int, 3),
    "noise": (float, 1.0),
    "jitter": (float, 0.8),
    # architecture
    "stem_width": (int, 16),
    "stage_blocks": (_list_of(int), (2, 2, 2)),
    "stage_widths": (_list_of(int), (16, 32, 64)),
    "stage_strides": (_list_of(int), (1, 2, 2)),
    "kernel": (int, 3),
    # training
    "epochs_train": (int, TrainConfig.epochs_train),
    "epochs_finetune_hi": (int, TrainConfig.epochs_finetune_hi),
    "epochs_finetune_lo": (int, TrainConfig.epochs_finetune_lo),
    "teacher_epochs_hi": (int, TrainConfig.teacher_epochs_hi),
    "teacher_epochs_lo": (int, TrainConfig.teacher_epochs_lo),
    "baseline_epochs_hi": (int, TrainConfig.baseline_epochs_hi),
    "baseline_epochs_lo": (int, TrainConfig.baseline_epochs_lo),
    "batch_size": (int, TrainConfig.batch_size),
    "lr": (float, TrainConfig.lr),
    "lr_low": (float, TrainConfig.lr_low),
    "gate_lr": (float, TrainConfig.gate_lr),
    "weight_decay": (float, TrainConfig.weight_decay),
    "barrier_cap": (float, TrainConfig.barrier_cap),
    "violation_coef": (float, TrainConfig.violation_coef),
    "violation_growth": (float, TrainConfig.violation_growth),
    "coast_slack": (float, TrainConfig.coast_slack),
    "settle_epochs": (int, TrainConfig.settle_epochs),
    "eval_every": (int, TrainConfig.eval_every),
    "teacher_init": (_bool, TrainConfig.teacher_init),
    # loss and budget
    "lambda": (float, LossConfig.lam),
    "kd_alpha": (float, LossConfig.kd_alpha),
    "temperature": (float, LossConfig.temperature),
    "metric": (str, LossConfig.metric),
    "budget_fraction": (float, 0.5),
    "schedule": (str, TrainConfig.schedule),
    "sigmoid_d": (float, TrainConfig.sigmoid_d),
    # prune / sweep
    "method": (str, "bar"),
    "sweep_methods": (_list_of(str), ("bar", "random", "weight_magnitude")),
    "sweep_fractions": (_list_of(float), SWEEP_FRACTIONS),
}

# dotted spellings accepted for the budget keys
ALIASES = {
    "budget.metric": "metric",
    "budget.fraction": "budget_fraction",
    "budget.schedule": "schedule",
    "budget.sigmoid_d": "sigmoid_d",
}

REQUIRED = {
    "gen-data": ("data_dir", "classes", "train_samples", "eval_samples", "image_size"),
    "train-teacher": ("data_dir",),
    "prune": ("data_dir", "budget_fraction"),
    "eval": ("data_dir",),
    "sweep": ("data_dir",),
}


@dataclass
class Config:
    values: dict[str, Any]
    path: str = "<config>"

    def __getitem__(self, key: str):
        return self.values[key]

    def get(self, key: str):
        return self.values.get(key, SCHEMA[key][1])


def parse_config(text: str, path: str = "<config>") -> Config:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        key = ALIASES.get(key, key)
        if key not in SCHEMA:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        try:
            values[key] = SCHEMA[key][0](value)
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: bad value for {key!r}: {exc}") from None
    return Config(values, path)


def load_config(path) -> Config:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, str(path))


def require(cfg: Config, command: str) -> None:
    missing = [k for k in REQUIRED[command] if k not in cfg.values]
    if missing:
        raise ConfigError(f"{cfg.path}: {command} needs key(s) {', '.join(missing)}")


def network_spec(cfg: Config) -> NetworkSpec:
    blocks, widths, strides = cfg.get("stage_blocks"), cfg.get("stage_widths"), cfg.get("stage_strides")
    if not len(blocks) == len(widths) == len(strides):
        raise ConfigError(f"{cfg.path}: stage_blocks, stage_widths and stage_strides differ in length")
    try:
        return NetworkSpec(
            stages=tuple(StageSpec(b, w, s) for b, w, s in zip(blocks, widths, strides)),
            stem_width=cfg.get("stem_width"),
            in_channels=cfg.get("channels"),
            input_size=cfg.get("image_size"),
            num_classes=cfg.get("classes"),
            kernel=cfg.get("kernel"),
        )
    except SpecError as exc:
        raise ConfigError(f"{cfg.path}: {exc}") from None


def train_config(cfg: Config, **overrides) -> TrainConfig:
    keys = (
        "epochs_train", "epochs_finetune_hi", "epochs_finetune_lo", "teacher_epochs_hi", "teacher_epochs_lo",
        "baseline_epochs_hi", "baseline_epochs_lo", "batch_size", "lr", "lr_low", "gate_lr", "weight_decay",
        "seed", "budget_fraction", "schedule", "sigmoid_d", "barrier_cap", "violation_coef",
        "violation_growth", "coast_slack", "settle_epochs", "eval_every", "teacher_init",
    )
    kw = {k: cfg.get(k) for k in keys}
    try:
        kw["loss"] = LossConfig(cfg.get("lambda"), cfg.get("kd_alpha"), cfg.get("temperature"), cfg.get("metric"))
    except ValueError as exc:
        raise ConfigError(f"{cfg.path}: {exc}") from None
    kw.update(overrides)
    if not 0 < kw["budget_fraction"] < 1:
        raise ConfigError(f"{cfg.path}: budget_fraction must lie in (0, 1), got {kw['budget_fraction']}")
    return TrainConfig(**kw)


# ---------------------------------------------------------------------------
# file layout


def data_paths(cfg: Config) -> dict[str, Path]:
    root = Path(cfg["data_dir"])
    return {
        f"{split}_{kind}": root / f"{split}-{kind}.idx"
        for split in ("train", "eval")
        for kind in ("images", "labels")
    }


def load_datasets(cfg: Config) -> tuple[Dataset, Dataset]:
    p = data_paths(cfg)
    out = []
    for split in ("train", "eval"):
        pixels, labels = formats.load_idx(p[f"{split}_images"], p[f"{split}_labels"])
        if len(labels) and int(labels.max()) >= cfg.get("classes"):
            raise IntegrityError(f"{p[f'{split}_labels']}: label {int(labels.max())} >= classes={cfg.get('classes')}")
        out.append(Dataset(pixels, labels, cfg.get("classes")))
    return out[0], out[1]


def write_report(path: Path, report: dict) -> str:
    text = "".join(f"{k}: {_report_value(v)}\n" for k, v in report.items())
    path.write_text(text, encoding="utf-8", newline="")
    return text


def _report_value(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def read_report(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        if line.strip():
            k, v = line.split(":", 1)
            out[k.strip()] = v.strip()
    return out


def load_model(path) -> Network | PrunedGraph:
    arrays = formats.load_checkpoint(path)
    if "meta.kind" not in arrays:
        raise IntegrityError(f"{path}: checkpoint has no meta.kind entry")
    kind = int(arrays["meta.kind"][0])
    if kind == 0:
        return Network.from_arrays(arrays)
    if kind == 1:
        return PrunedGraph.from_arrays(arrays)
    raise IntegrityError(f"{path}: unknown checkpoint kind {kind}")


def model_costs(model: Network | PrunedGraph) -> tuple[float, float]:
    """Analytic (volume, FLOPs) of a dense network or pruned graph."""
    if isinstance(model, PrunedGraph):
        return model.volume(), model.flops()
    if not model.use_gates:
        return full_volume(model.layers), full_flops(model.layers)
    masks = model.effective_masks()
    return hard_volume(model.layers, masks), hard_flops(model.layers, masks)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg: Config, out: Path, force: bool) -> int:
    require(cfg, "gen-data")
    paths = data_paths(cfg)
    existing = [str(p) for p in paths.values() if p.exists()]
    if existing and not force:
        raise ConfigError(f"refusing to overwrite {', '.join(existing)} (use --force)")
    Path(cfg["data_dir"]).mkdir(parents=True, exist_ok=True)
    for stream, split in enumerate(("train", "eval")):
        pixels, labels = generate_patterns(
            cfg[f"{split}_samples"], cfg["classes"], cfg["image_size"], cfg.get("channels"),
            seed=cfg.get("seed"), stream=stream, noise=cfg.get("noise"), jitter=cfg.get("jitter"),
        )
        formats.save_idx(paths[f"{split}_images"], paths[f"{split}_labels"], pixels, labels)
        print(f"{split}: {len(labels)} samples -> {paths[f'{split}_images']}")
    return EXIT_OK


def cmd_train_teacher(cfg: Config, out: Path, force: bool) -> int:
    require(cfg, "train-teacher")
    train, evalset = load_datasets(cfg)
    res = train_teacher(network_spec(cfg), train, evalset, train_config(cfg))
    out.mkdir(parents=True, exist_ok=True)
    formats.save_checkpoint(out / "teacher.ckpt", res.network.to_arrays())
    formats.save_cache(out / "teacher.logits", res.cache.logits)
    res.log.save_csv(out / "teacher.csv")
    print(write_report(out / "teacher.txt", {
        "train_accuracy": res.train_accuracy,
        "eval_accuracy": res.eval_accuracy,
        "cache_rows": res.cache.n_samples,
        "V_F": full_volume(res.network.layers),
        "flops": full_flops(res.network.layers),
    }), end="")
    return EXIT_OK


def _load_teacher(out: Path, train: Dataset) -> tuple[Network, LogitsCache]:
    teacher = load_model(out / "teacher.ckpt")
    if not isinstance(teacher, Network):
        raise IntegrityError(f"{out / 'teacher.ckpt'}: expected a dense network")
    cache = LogitsCache(formats.load_cache(out / "teacher.logits"))
    if cache.n_samples != len(train):
        raise IntegrityError(f"{out / 'teacher.logits'}: {cache.n_samples} rows for {len(train)} training samples")
    return teacher, cache


def baseline_factors(fraction: float) -> tuple[int, ...]:
    """Halving rounds needed to reach ``fraction`` of the full cost."""
    rounds = max(1, math.ceil(-math.log2(fraction) - 1e-9))
    return tuple(2 ** (r + 1) for r in range(rounds))


def _report(method: str, fraction: float, spec: NetworkSpec, graph: PrunedGraph, accuracy: float, status: str) -> dict:
    costs = cost_report(graph, spec)
    v_f = costs.full_volume
    return {
        "method": method,
        "status": status,
        "budget_fraction": fraction,
        "V_F": v_f,
        "B": v_f * fraction,
        "V": costs.volume,
        "full_flops": costs.full_flops,
        "flops": costs.flops,
        "volume_factor": costs.volume_factor,
        "flop_factor": costs.flop_factor,
        "regular_block_volume": costs.regular_volume,
        "regular_block_flops": costs.regular_flops,
        "regular_volume_delta": costs.regular_volume - costs.volume,
        "regular_flops_delta": costs.regular_flops - costs.flops,
        "dropped_blocks": ",".join(graph.dropped) or "-",
        "accuracy": accuracy,
    }


def _run_method(method: str, cfg: Config, fraction: float, train, evalset, teacher, cache, spec):
    """One pruning run; returns (graph, accuracy, runlog, status)."""
    tcfg = train_config(cfg, budget_fraction=fraction)
    if method == "bar":
        try:
            res: BarResult = bar_train(spec, train, evalset, cache, tcfg, teacher)
        except BudgetViolation as exc:
            res = exc.result
            return res.graph, res.accuracy, res.log, "budget_violation"
        return res.graph, res.accuracy, res.log, "ok"
    if method in ("random", "weight_magnitude"):
        steps = baseline_prune(method, teacher, train, evalset, tcfg, baseline_factors(fraction))
        last = steps[-1]
        status = "ok" if last.costs.volume <= fraction * last.costs.full_volume else "budget_violation"
        return last.graph, last.accuracy, last.log, status
    raise ConfigError(f"{cfg.path}: unknown method {method!r}")


def cmd_prune(cfg: Config, out: Path, force: bool) -> int:
    require(cfg, "prune")
    spec = network_spec(cfg)
    train, evalset = load_datasets(cfg)
    teacher, cache = _load_teacher(out, train)
    method, fraction = cfg.get("method"), cfg["budget_fraction"]
    graph, acc, runlog, status = _run_method(method, cfg, fraction, train, evalset, teacher, cache, spec)
    formats.save_checkpoint(out / "pruned.ckpt", graph.to_arrays())
    runlog.save_csv(out / "run.csv")
    report = _report(method, fraction, spec, graph, acc, status)
    print(write_report(out / "report.txt", report), end="")
    if status != "ok":
        print(f"error: final volume {report['V']} exceeds budget {report['B']}", file=sys.stderr)
        return EXIT_BUDGET
    return EXIT_OK


def cmd_eval(cfg: Config, out: Path, force: bool, checkpoint: Optional[str] = None) -> int:
    require(cfg, "eval")
    path = Path(checkpoint) if checkpoint else out / "pruned.ckpt"
    model = load_model(path)
    _, evalset = load_datasets(cfg)
    acc = evaluate(model, evalset)
    batch = evalset.x[: cfg.get("batch_size")]
    reps = 5
    t0 = time.perf_counter()
    for _ in range(reps):
        model.predict(batch)
    latency = (time.perf_counter() - t0) / reps
    volume, flops = model_costs(model)
    print(f"checkpoint: {path}")
    print(f"accuracy: {acc!r}")
    print(f"latency_ms_per_batch: {latency * 1e3:.3f}")
    print(f"batch_size: {len(batch)}")
    print(f"volume: {volume!r}")
    print(f"flops: {flops!r}")
    return EXIT_OK


def cmd_sweep(cfg: Config, out: Path, force: bool) -> int:
    require(cfg, "sweep")
    spec = network_spec(cfg)
    train, evalset = load_datasets(cfg)
    teacher, cache = _load_teacher(out, train)
    fractions = sorted(cfg.get("sweep_fractions"), reverse=True)
    (out / "sweep").mkdir(parents=True, exist_ok=True)
    rows = []
    for method in cfg.get("sweep_methods"):
        if method in ("random", "weight_magnitude"):
            rows += _sweep_baseline(method, cfg, fractions, train, evalset, teacher, spec, out)
            continue
        for fraction in fractions:
            try:
                graph, acc, _, status = _run_method(method, cfg, fraction, train, evalset, teacher, cache, spec)
            except Exception as exc:  # noqa: BLE001 - recorded in the CSV, sweep continues
                log.exception("sweep run %s @ %s failed", method, fraction)
                rows.append({"method": method, "budget_fraction": fraction, "status": f"error:{type(exc).__name__}"})
                continue
            rows.append(_sweep_row(method, fraction, spec, graph, acc, status, out))
    text = _sweep_csv(rows)
    (out / "sweep.csv").write_text(text, encoding="utf-8", newline="")
    print(text, end="")
    return EXIT_OK


def _sweep_baseline(method, cfg, fractions, train, evalset, teacher, spec, out) -> list[dict]:
    factors = baseline_factors(min(fractions))
    try:
        steps = baseline_prune(method, teacher, train, evalset, train_config(cfg), factors)
    except Exception as exc:  # noqa: BLE001 - recorded in the CSV, sweep continues
        log.exception("sweep baseline %s failed", method)
        return [{"method": method, "budget_fraction": f, "status": f"error:{type(exc).__name__}"} for f in fractions]
    by_factor = {s.factor: s for s in steps}
    rows = []
    for f in fractions:
        step = by_factor.get(round(1 / f))
        if step is None:
            rows.append({"method": method, "budget_fraction": f, "status": "error:no_matching_factor"})
            continue
        status = "ok" if step.costs.volume <= f * step.costs.full_volume else "budget_violation"
        rows.append(_sweep_row(method, f, spec, step.graph, step.accuracy, status, out))
    return rows


def _sweep_row(method, fraction, spec, graph, acc, status, out: Path) -> dict:
    rep = _report(method, fraction, spec, graph, acc, status)
    rep["factor"] = round(1 / fraction, 6)
    formats.save_checkpoint(out / "sweep" / f"{method}_x{rep['factor']:g}.ckpt", graph.to_arrays())
    return rep


def _sweep_csv(rows: list[dict]) -> str:
    lines = [",".join(SWEEP_COLUMNS)]
    for r in rows:
        r = dict(r)
        r.setdefault("factor", round(1 / r["budget_fraction"], 6))
        lines.append(",".join("" if r.get(c) is None else _report_value(r[c]) for c in SWEEP_COLUMNS))
    return "\n".join(lines) + "\n"


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-teacher": cmd_train_teacher,
    "prune": cmd_prune,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
}


# ---------------------------------------------------------------------------
# entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, metavar="PATH", help="flat key = value config file")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", metavar="DIR", help="output directory (overrides out_dir)")
    common.add_argument("--force", action="store_true", help="overwrite existing dataset files")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = _Parser(prog="barprune", description="Budget-constrained pruning of residual networks.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "eval":
            p.add_argument("--checkpoint", metavar="PATH", help="checkpoint to evaluate (default: OUT/pruned.ckpt)")
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.values["seed"] = args.seed
        out = Path(args.out if args.out else cfg.get("out_dir"))
        extra = {"checkpoint": args.checkpoint} if args.command == "eval" else {}
        return COMMANDS[args.command](cfg, out, args.force, **extra)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"missing input: {exc.filename}", file=sys.stderr)
        return EXIT_CONFIG
    except IntegrityError as exc:
        print(f"integrity error: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY


if __name__ == "__main__":
    sys.exit(main())
