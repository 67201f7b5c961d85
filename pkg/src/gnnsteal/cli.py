"""Command-line entry point: one subcommand per pipeline stage, driven by a JSON run config.

Stages talk to each other only through artifacts on disk. ``train-target``
writes ``<out>/target`` (model files plus ``run.json`` with the node split);
the attack subcommands read that directory back. Exit codes: 0 success,
1 invalid config or arguments, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import math
import os
import shutil
import sys
import tempfile
from dataclasses import asdict, fields
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ValidationError
from .graph import Graph, SplitSpec, save_graph_bundle, split_nodes

log = logging.getLogger("gnnsteal.cli")

COMMANDS = ("ingest", "train-target", "attack", "attack-typeii", "sweep-budget", "sweep-defense", "report")
REPORT_FORMATS = ("csv", "aggregate", "markdown", "json")


class UsageError(ValidationError):
    pass


class ConfigError(ValidationError):
    def __init__(self, violations: list[str]):
        self.violations = violations
        super().__init__("invalid run config:\n" + "\n".join(f"  - {v}" for v in violations))


# ---------------------------------------------------------------- config


def _defaults() -> dict:
    from .augment import AugmentConfig
    from .stealer import StealConfig
    from .structure import StructureConfig
    from .training import TrainConfig

    steal = {k: v for k, v in asdict(StealConfig()).items() if k != "seed"}
    steal["augment"] = {k: v for k, v in asdict(AugmentConfig()).items() if k != "seed"}
    steal["structure"] = {k: v for k, v in asdict(StructureConfig()).items() if k != "seed"}
    steal["budget_frac"] = 1.0
    tcfg = TrainConfig()
    split = SplitSpec()
    return {
        "dataset": {"name": "sbm-1500", "data_dir": None, "raw": None,
                    "split": {f.name: getattr(split, f.name) for f in fields(split) if f.name != "seed"}},
        "target": {"arch": "GIN", "epochs": tcfg.epochs, "learning_rate": tcfg.learning_rate,
                   "validation_frac": tcfg.validation_frac, "path": None},
        "attack": steal,
        # empty sweep axes fall back to the single value in the target/attack sections
        "sweep": {"fractions": [0.1, 0.2, 0.3, 0.5, 1.0], "sigmas": [0.0, 0.25, 0.5, 1.0], "datasets": [],
                  "target_archs": [], "surrogate_archs": [], "response_kinds": [], "attack_types": ["I"],
                  "loss_kinds": [], "repetitions": 3, "workers": 1, "audit": False},
        "defense": {"sigma": 0.0},
        "output": {"dir": "results", "format": "csv"},
    }


def load_schema() -> dict:
    text = resources.files("gnnsteal").joinpath("schema/run_config.schema.json").read_text(encoding="utf-8")
    return json.loads(text)


def validate_config(doc) -> None:
    """Raise :class:`ConfigError` listing every schema violation in ``doc``."""
    from jsonschema import Draft202012Validator

    validator = Draft202012Validator(load_schema())
    errors = sorted(validator.iter_errors(doc), key=lambda e: [str(p) for p in e.absolute_path])
    if errors:
        raise ConfigError([f"{'/'.join(map(str, e.absolute_path)) or '<root>'}: {e.message}" for e in errors])


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else copy.deepcopy(v)
    return out


def _set_path(doc: dict, dotted: str, raw: str) -> None:
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    keys = dotted.split(".")
    node = doc
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise UsageError(f"--set {dotted}: {k} is not a section")
    node[keys[-1]] = value


def resolve_config(args) -> dict:
    """File config, then ``--set`` overrides, then dedicated flags; validated, then defaults filled."""
    doc: dict = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file {path} not found")
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path} is not valid JSON: {exc}") from None
    for item in args.set or ():
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise UsageError(f"--set expects section.key=value, got {item!r}")
        _set_path(doc, key, value)
    flags = {"out": ("output", "dir"), "target": ("target", "path"), "raw": ("dataset", "raw"),
             "dataset": ("dataset", "name"), "format": ("output", "format")}
    for attr, (section, key) in flags.items():
        value = getattr(args, attr, None)
        if value is not None and isinstance(doc, dict):
            doc.setdefault(section, {})[key] = value
    validate_config(doc)
    return _merge(_defaults(), doc)


# ---------------------------------------------------------------- helpers


def _publish_dir(dest: Path, write) -> Path:
    """Build a directory under a temporary name, then rename it into place."""
    dest = Path(dest)
    dest.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(dir=dest.parent, prefix=f".{dest.name}."))
    try:
        write(tmp)
        if dest.exists():
            shutil.rmtree(dest)
        os.replace(tmp, dest)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return dest


def _write_json(path: Path, obj) -> None:
    from .harness import atomic_write_text

    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _seeds(seed: int) -> dict:
    from .harness import derive_seed

    return {tag: derive_seed(seed, tag) for tag in ("split", "target", "attack", "defense", "budget")}


def _split_spec(cfg: dict, seed: int) -> SplitSpec:
    s = cfg["dataset"]["split"]
    return SplitSpec(s["target_train_frac"], s["query_frac"], s["test_frac"], seed=_seeds(seed)["split"])


def _load_graph(cfg: dict) -> Graph:
    from .datasets import load_dataset

    return load_dataset(cfg["dataset"]["name"], cfg["dataset"]["data_dir"])


def _segments(graph: Graph, split: dict) -> tuple[Graph, Graph, Graph]:
    return tuple(graph.induced(np.asarray(split[tag], dtype=np.int64), name=f"{graph.name}-{tag}")
                 for tag in ("target_train", "query", "test"))


def _steal_config(cfg: dict, seed: int):
    from .augment import AugmentConfig
    from .stealer import StealConfig

    a = {k: v for k, v in cfg["attack"].items() if k not in ("augment", "structure", "budget_frac")}
    return StealConfig(**a, augment=AugmentConfig(**cfg["attack"]["augment"]), seed=_seeds(seed)["attack"])


def _structure_config(cfg: dict, seed: int):
    from .structure import StructureConfig

    return StructureConfig(**cfg["attack"]["structure"], seed=_seeds(seed)["attack"])


def _axis(values: list, fallback) -> tuple:
    return tuple(values) if values else (fallback,)


def _experiment_spec(cfg: dict, seed: int, budgets, sigmas):
    from .harness import ExperimentSpec

    sw, at, split = cfg["sweep"], cfg["attack"], cfg["dataset"]["split"]
    return ExperimentSpec(
        datasets=_axis(sw["datasets"], cfg["dataset"]["name"]),
        target_archs=_axis(sw["target_archs"], cfg["target"]["arch"]),
        surrogate_archs=_axis(sw["surrogate_archs"], at["surrogate_arch"]),
        response_kinds=_axis(sw["response_kinds"], at["response_kind"]),
        attack_types=tuple(sw["attack_types"]),
        loss_kinds=_axis(sw["loss_kinds"], at["loss_kind"]),
        budgets=tuple(budgets), sigmas=tuple(sigmas), repetitions=sw["repetitions"], seed=seed,
        output_dir=cfg["output"]["dir"], data_dir=cfg["dataset"]["data_dir"],
        target_epochs=cfg["target"]["epochs"], steal_epochs=at["epochs"], head_epochs=at["head_epochs"],
        spectral_pool=at["spectral_pool"],
        split=(split["target_train_frac"], split["query_frac"], split["test_frac"]),
        workers=sw["workers"], audit=sw["audit"],
    )


# ---------------------------------------------------------------- subcommands
# Each planner validates everything it can without touching the data and
# returns (plan, run). ``run`` performs the work; ``--dry-run`` prints the plan only.


def plan_ingest(cfg: dict, seed: int, args):
    raw = cfg["dataset"]["raw"]
    if not raw:
        raise UsageError("ingest needs a raw archive (--raw or dataset.raw)")
    if not Path(raw).is_file():
        raise UsageError(f"raw archive {raw} not found")
    name = args.name or Path(raw).stem
    dest = Path(cfg["output"]["dir"]) / name

    def run():
        from .datasets import graph_from_npz

        graph = graph_from_npz(raw, name=name)
        _publish_dir(dest, lambda p: save_graph_bundle(graph, p))
        log.info("bundle written: %s (n=%d, edges=%d)", dest, graph.n, graph.num_edges)

    return {"raw": raw, "bundle": str(dest)}, run


def plan_train_target(cfg: dict, seed: int, args):
    from .training import TrainConfig

    t = cfg["target"]
    split_spec = _split_spec(cfg, seed)
    tcfg = TrainConfig(learning_rate=t["learning_rate"], epochs=t["epochs"], seed=_seeds(seed)["target"],
                       validation_frac=t["validation_frac"])
    dest = Path(cfg["output"]["dir"]) / "target"

    def run():
        from .gnn import target_config
        from .training import predict, train_target

        graph = _load_graph(cfg)
        s = split_nodes(graph, split_spec)
        split = {k: np.sort(getattr(s, k)).tolist() for k in ("target_train", "query", "test")}
        tg, _, te = _segments(graph, split)
        model = train_target(tg, np.arange(tg.n), target_config(t["arch"], tg.d, int(tg.num_classes)), tcfg)
        acc = float(np.mean(predict(model, None, te) == te.C))
        run_meta = {"dataset": cfg["dataset"]["name"], "seed": seed, "split": split, "test_accuracy": acc}

        def write(p: Path):
            model.save(p)
            (p / "run.json").write_text(json.dumps(run_meta, sort_keys=True) + "\n", encoding="utf-8")

        _publish_dir(dest, write)
        log.info("target %s trained: test accuracy %.4f", t["arch"], acc)

    return {"target": str(dest), "train": asdict(tcfg), "split": asdict(split_spec)}, run


def _target_dir(cfg: dict) -> Path:
    path = cfg["target"]["path"]
    if not path:
        raise UsageError("attack needs a trained target directory (--target or target.path)")
    path = Path(path)
    if not (path / "weights.bin").is_file() or not (path / "config.json").is_file():
        raise UsageError(f"{path} is not a trained target directory (config.json and weights.bin expected)")
    return path


def _attack_plan(cfg: dict, seed: int, attack_type: str):
    tdir = _target_dir(cfg)
    scfg = _steal_config(cfg, seed)
    st = _structure_config(cfg, seed) if attack_type == "II" else None
    budget = cfg["attack"]["budget_frac"]
    sigma = cfg["defense"]["sigma"]
    out = Path(cfg["output"]["dir"]) / ("attack" if attack_type == "I" else "attack-typeii")

    def run():
        from .gnn import ModelHandle
        from .oracle import DefenseConfig, VictimOracle
        from .stealer import evaluate_surrogate, steal
        from .structure import type2_attack
        from .training import predict

        target = ModelHandle.load(tdir)
        graph = _load_graph(cfg)
        meta_path = tdir / "run.json"
        if meta_path.is_file():
            meta = json.loads(meta_path.read_text(encoding="utf-8"))
            if meta.get("dataset") != cfg["dataset"]["name"]:
                raise ValidationError(f"target was trained on {meta.get('dataset')!r}, "
                                      f"config names {cfg['dataset']['name']!r}")
            split = meta["split"]
        else:
            s = split_nodes(graph, _split_spec(cfg, seed))
            split = {k: np.sort(getattr(s, k)).tolist() for k in ("target_train", "query", "test")}
        _, qg, te = _segments(graph, split)

        nodes = None
        if budget < 1.0:
            k = math.floor(budget * qg.n)
            if k < 1:
                raise ValidationError(f"budget {budget} selects no query nodes")
            nodes = np.sort(np.random.default_rng(_seeds(seed)["budget"]).permutation(qg.n)[:k])
        oracle = VictimOracle(target, defense=DefenseConfig(sigma, seed=_seeds(seed)["defense"]))
        learned = None
        if attack_type == "I":
            result = steal(oracle, qg, scfg, query_nodes=nodes)
        else:
            result, learned = type2_attack(oracle, qg, scfg, st, query_nodes=nodes)
        ev = evaluate_surrogate(result, target, te)
        metrics = {"attack_type": attack_type, "accuracy": ev.accuracy, "fidelity": ev.fidelity, "f1": ev.f1,
                   "queries_used": int(result.queries_used), "query_nodes": int(qg.n), "budget_frac": budget,
                   "sigma": sigma, "seed": seed, "target_accuracy": float(np.mean(predict(target, None, te) == te.C))}
        _publish_dir(out / "surrogate", result.save)
        if learned is not None:
            _publish_dir(out / "learned_graph", lambda p: save_graph_bundle(learned, p))
        _write_json(out / "metrics.json", metrics)
        log.info("attack type %s: accuracy %.4f fidelity %.4f f1 %.4f queries %d", attack_type,
                 ev.accuracy, ev.fidelity, ev.f1, result.queries_used)

    plan = {"target": str(tdir), "steal": scfg.to_dict(), "budget_frac": budget, "sigma": sigma,
            "outputs": [str(out / "surrogate"), str(out / "metrics.json")]}
    if st is not None:
        plan["structure"] = asdict(st)
        plan["outputs"].insert(1, str(out / "learned_graph"))
    return plan, run


def plan_attack(cfg: dict, seed: int, args):
    return _attack_plan(cfg, seed, "I")


def plan_attack_typeii(cfg: dict, seed: int, args):
    return _attack_plan(cfg, seed, "II")


def plan_sweep_budget(cfg: dict, seed: int, args):
    fractions = sorted(set(cfg["sweep"]["fractions"]))
    spec = _experiment_spec(cfg, seed, fractions, [cfg["defense"]["sigma"]])
    out = Path(spec.output_dir)

    def run():
        from .harness import budget_sweep, render_tables, spearman_by_series

        report, reference, plots = budget_sweep(spec, fractions)
        render_tables(report, out)
        rho = {" / ".join(map(str, k)): v for k, v in spearman_by_series(report).items()}
        _write_json(out / "budget_summary.json", {"reference_rmse_full_budget": reference, "spearman": rho,
                                                  "plots": [str(p) for p in plots]})
        _log_report(report)

    return {"experiment": spec.to_dict(), "cells": len(spec.cells()), "fractions": fractions}, run


def plan_sweep_defense(cfg: dict, seed: int, args):
    sigmas = sorted(set(cfg["sweep"]["sigmas"]))
    spec = _experiment_spec(cfg, seed, [cfg["attack"]["budget_frac"]], sigmas)
    if any(k not in ("embedding", "projection") for k in spec.response_kinds):
        raise UsageError("sweep-defense needs embedding or projection responses")
    out = Path(spec.output_dir)

    def run():
        from .harness import defense_sweep, render_tables

        report, _ = defense_sweep(spec, sigmas)
        render_tables(report, out)
        _log_report(report)

    return {"experiment": spec.to_dict(), "cells": len(spec.cells()), "sigmas": sigmas}, run


def _log_report(report) -> None:
    log.info("%d cells ok, %d skipped, %d failed", len(report.rows), len(report.skipped), len(report.failures))
    if report.failures:
        raise RuntimeError(f"{len(report.failures)} grid cells failed; see cells/*.json")


def plan_report(cfg: dict, seed: int, args):
    if not args.input:
        raise UsageError("report needs --in <results directory>")
    src = Path(args.input)
    if not (src / "cells").is_dir():
        raise UsageError(f"{src} holds no cells/ directory of grid results")
    fmt = cfg["output"]["format"]
    dest = Path(args.out) / f"report.{_EXT[fmt]}" if args.out else None

    def run():
        from .harness import CSV_COLUMNS, ExperimentReport, load_cell_records, render_markdown

        recs = load_cell_records(src)
        report = ExperimentReport(rows=[{k: r[k] for k in CSV_COLUMNS} for r in recs if r.get("status") == "ok"])
        if fmt == "csv":
            text = report.to_csv()
        elif fmt == "aggregate":
            text = report.aggregate_csv()
        elif fmt == "markdown":
            text = render_markdown(report)
        else:
            text = json.dumps(report.rows, indent=2) + "\n"
        sys.stdout.write(text)
        if dest is not None:
            from .harness import atomic_write_text

            atomic_write_text(dest, text)

    return {"input": str(src), "format": fmt, "output": str(dest) if dest else "<stdout>"}, run


_EXT = {"csv": "csv", "aggregate": "csv", "markdown": "md", "json": "json"}
PLANNERS = {"ingest": plan_ingest, "train-target": plan_train_target, "attack": plan_attack,
            "attack-typeii": plan_attack_typeii, "sweep-budget": plan_sweep_budget,
            "sweep-defense": plan_sweep_defense, "report": plan_report}


# ---------------------------------------------------------------- entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


class _JsonFormatter(logging.Formatter):
    def format(self, record):
        entry = {"level": record.levelname.lower(), "logger": record.name, "msg": record.getMessage()}
        if record.exc_info:
            entry["exc"] = self.formatException(record.exc_info)
        return json.dumps(entry)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--seed", type=int, default=0, help="drives every random choice (default 0)")
    common.add_argument("--out", help="artifact directory (overrides output.dir)")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override one config value; VALUE is parsed as JSON when possible")
    common.add_argument("--dry-run", action="store_true", help="validate and print the plan, write nothing")
    common.add_argument("--log-level", default="info", choices=("debug", "info", "warning", "error"))

    parser = _Parser(prog="gnnsteal", description="Model-stealing attacks against inductive GNNs.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    p = sub.add_parser("ingest", parents=[common], help="convert a raw .npz dataset into a graph bundle")
    p.add_argument("--raw", help="raw archive (overrides dataset.raw)")
    p.add_argument("--name", help="bundle directory name (default: archive stem)")
    p = sub.add_parser("train-target", parents=[common], help="train the victim model")
    p.add_argument("--dataset", help="dataset name or bundle path (overrides dataset.name)")
    for cmd, text in (("attack", "Type I attack (query-graph structure known)"),
                      ("attack-typeii", "Type II attack (structure learned from features)")):
        p = sub.add_parser(cmd, parents=[common], help=text)
        p.add_argument("--target", help="trained target directory (overrides target.path)")
        p.add_argument("--dataset", help="dataset name or bundle path (overrides dataset.name)")
    sub.add_parser("sweep-budget", parents=[common], help="grid over query budgets")
    sub.add_parser("sweep-defense", parents=[common], help="grid over defense noise levels")
    p = sub.add_parser("report", parents=[common], help="print grid results in the report CSV schema")
    p.add_argument("--in", dest="input", help="results directory of a grid run")
    p.add_argument("--format", choices=REPORT_FORMATS, help="output format (overrides output.format)")
    return parser


def cli(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # --version / --help
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_JsonFormatter())
    root = logging.getLogger("gnnsteal")
    root.handlers[:] = [handler]
    root.setLevel(args.log_level.upper())
    root.propagate = False

    try:
        cfg = resolve_config(args)
        plan, run = PLANNERS[args.command](cfg, args.seed, args)
        if args.dry_run:
            print(json.dumps({"command": args.command, "seed": args.seed, "plan": plan, "config": cfg},
                             indent=2, sort_keys=True, default=str))
            return 0
        run()
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        log.error("interrupted; completed artifacts are intact")
        return 2
    except Exception as exc:
        log.error("%s: %s", type(exc).__name__, exc, exc_info=args.log_level == "debug")
        return 2
    return 0


def main() -> None:
    sys.exit(cli())
