"""Experiment grids over datasets, architectures, response kinds, attacks, budgets and defenses.

Each grid cell is one attack run. Cells are stored as JSON files named by a
hash of their axes, so an interrupted grid resumes by skipping finished cells.
"""

from __future__ import annotations

import csv
import hashlib
import io
import itertools
import json
import logging
import math
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .datasets import load_dataset
from .errors import GnnStealError, ValidationError
from .gnn import ModelHandle, target_config
from .graph import Graph, SplitSpec, split_nodes
from .oracle import DefenseConfig, ResponseKind, VictimOracle
from .stealer import StealConfig, evaluate_surrogate, steal
from .structure import StructureConfig, type2_attack
from .training import TrainConfig, predict, train_target

log = logging.getLogger(__name__)

AXES = ("dataset", "target_arch", "surrogate_arch", "response_kind", "attack_type", "loss_kind",
        "budget_frac", "sigma", "seed")
METRICS = ("accuracy", "fidelity", "f1", "queries_used")
CSV_COLUMNS = AXES + METRICS
ATTACK_TYPES = ("I", "II")
MIN_BUDGET_NODES = 10
# axes that feed the per-cell training seed; budget and sigma are treatments run under common seeds
SEED_AXES = ("dataset", "target_arch", "surrogate_arch", "response_kind", "attack_type", "loss_kind", "seed")


def derive_seed(*parts) -> int:
    digest = hashlib.sha256(json.dumps([str(p) for p in parts]).encode()).digest()
    return int.from_bytes(digest[:4], "little") & 0x7FFFFFFF


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass(frozen=True)
class Cell:
    dataset: str
    target_arch: str
    surrogate_arch: str
    response_kind: str
    attack_type: str
    loss_kind: str
    budget_frac: float
    sigma: float
    seed: int

    def axes(self) -> dict:
        return asdict(self)

    def key(self) -> str:
        return hashlib.sha256(json.dumps(self.axes(), sort_keys=True).encode()).hexdigest()[:20]


@dataclass(frozen=True)
class ExperimentSpec:
    datasets: tuple = ("sbm-1500",)
    target_archs: tuple = ("GIN",)
    surrogate_archs: tuple = ("GIN",)
    response_kinds: tuple = ("prediction",)
    attack_types: tuple = ("I",)
    loss_kinds: tuple = ("contrastive",)
    budgets: tuple = (1.0,)
    sigmas: tuple = (0.0,)
    repetitions: int = 3
    seed: int = 0
    output_dir: str = "results"
    data_dir: str | None = None
    target_epochs: int = 200
    steal_epochs: int = 200
    head_epochs: int = 300
    spectral_pool: int = 8
    split: tuple = (0.2, 0.3, 0.5)
    workers: int = 1
    audit: bool = False

    def __post_init__(self):
        for f in ("datasets", "target_archs", "surrogate_archs", "response_kinds", "attack_types",
                  "loss_kinds", "budgets", "sigmas", "split"):
            object.__setattr__(self, f, tuple(getattr(self, f)))
        for axis in ("datasets", "target_archs", "surrogate_archs", "response_kinds", "attack_types",
                     "loss_kinds", "budgets", "sigmas"):
            if not getattr(self, axis):
                raise ValidationError(f"no cells: axis {axis} is empty")
        for k in self.response_kinds:
            ResponseKind.parse(k)
        if any(a.upper() not in ("GIN", "GAT", "SAGE") for a in self.target_archs + self.surrogate_archs):
            raise ValidationError("architectures must be GIN, GAT or SAGE")
        if any(t not in ATTACK_TYPES for t in self.attack_types):
            raise ValidationError(f"attack types must be among {ATTACK_TYPES}")
        if any(lk not in ("contrastive", "rmse") for lk in self.loss_kinds):
            raise ValidationError("loss kinds must be contrastive or rmse")
        if any(not 0 < b <= 1 for b in self.budgets):
            raise ValidationError("budget fractions must lie in (0, 1]")
        if any(s < 0 for s in self.sigmas):
            raise ValidationError("sigmas must be non-negative")
        if self.repetitions < 1 or self.workers < 1:
            raise ValidationError("repetitions and workers must be at least 1")
        SplitSpec(*self.split)

    def cells(self) -> list[Cell]:
        reps = [self.seed + r for r in range(self.repetitions)]
        return [Cell(*combo) for combo in itertools.product(
            self.datasets, self.target_archs, self.surrogate_archs, self.response_kinds, self.attack_types,
            self.loss_kinds, [float(b) for b in self.budgets], [float(s) for s in self.sigmas], reps)]

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentSpec:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown experiment keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ExperimentReport:
    rows: list = field(default_factory=list)
    failures: list = field(default_factory=list)
    skipped: list = field(default_factory=list)
    audit: dict | None = None

    def __len__(self) -> int:
        return len(self.rows)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.rows:
            w.writerow([_fmt(r[c]) for c in CSV_COLUMNS])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> ExperimentReport:
        reader = csv.DictReader(io.StringIO(text))
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise ValidationError(f"unexpected CSV columns {reader.fieldnames}")
        return cls(rows=[_parse_row(r) for r in reader])

    def aggregate(self) -> list[dict]:
        """Mean and population std per metric over seeds, one row per remaining axis combination."""
        groups: dict[tuple, list[dict]] = {}
        for r in self.rows:
            groups.setdefault(tuple(r[a] for a in AXES[:-1]), []).append(r)
        out = []
        for key, rs in groups.items():
            row = dict(zip(AXES[:-1], key))
            for m in METRICS:
                vals = np.array([r[m] for r in rs], dtype=np.float64)
                row[f"{m}_mean"] = float(vals.mean())
                row[f"{m}_std"] = exact_std(vals)
            row["runs"] = len(rs)
            out.append(row)
        return out

    def aggregate_csv(self) -> str:
        agg = self.aggregate()
        cols = list(AXES[:-1]) + [f"{m}_{s}" for m in METRICS for s in ("mean", "std")] + ["runs"]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for r in agg:
            w.writerow([_fmt(r[c]) for c in cols])
        return buf.getvalue()

    def select(self, **axes) -> list[dict]:
        return [r for r in self.rows if all(r[k] == v for k, v in axes.items())]


def exact_std(values) -> float:
    """Population std that is exactly 0 for identical values (np.std can leave 1e-16)."""
    vals = np.asarray(values, dtype=np.float64)
    return 0.0 if np.all(vals == vals[0]) else float(vals.std())


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def _parse_row(r: dict) -> dict:
    out = dict(r)
    for c in ("budget_frac", "sigma", "accuracy", "fidelity", "f1"):
        out[c] = float(r[c])
    for c in ("seed", "queries_used"):
        out[c] = int(r[c])
    return out


# ---------------------------------------------------------------- cell execution


class CellSkipped(GnnStealError):
    pass


def _split(graph: Graph, spec: ExperimentSpec, cell: Cell):
    s = split_nodes(graph, SplitSpec(*spec.split, seed=derive_seed(spec.seed, cell.dataset, cell.seed, "split")))
    return tuple(graph.induced(np.sort(part), name=f"{graph.name}-{tag}")
                 for part, tag in ((s.target_train, "target"), (s.query, "query"), (s.test, "test")))


def _target(spec: ExperimentSpec, cell: Cell, target_graph: Graph, cache_dir: Path | None) -> ModelHandle:
    tseed = derive_seed(spec.seed, cell.dataset, cell.target_arch, cell.seed, "target")
    cfg = target_config(cell.target_arch, target_graph.d, int(target_graph.num_classes))
    path = None
    if cache_dir is not None:
        tag = hashlib.sha256(json.dumps([cfg.to_dict(), tseed, spec.target_epochs, list(spec.split),
                                         cell.dataset]).encode()).hexdigest()[:20]
        path = cache_dir / tag
        if (path / "weights.bin").exists():
            return ModelHandle.load(path)
    model = train_target(target_graph, np.arange(target_graph.n), cfg, TrainConfig(epochs=spec.target_epochs, seed=tseed))
    if path is not None:
        tmp = Path(tempfile.mkdtemp(dir=cache_dir, prefix=".target-"))
        model.save(tmp)
        try:
            os.replace(tmp, path)
        except OSError:
            pass  # another worker finished the identical model first
    return model


def run_cell(spec: ExperimentSpec, cell: Cell, cache: bool = True, defense: bool = True) -> dict:
    """Execute one attack run and return its record (axes, metrics and diagnostics).

    ``defense=False`` builds the oracle without any defense object, which must
    match a ``sigma = 0`` run exactly.
    """
    graph = load_dataset(cell.dataset, spec.data_dir)
    tg, qg, te = _split(graph, spec, cell)
    cache_dir = Path(spec.output_dir) / "targets" if cache else None
    if cache_dir is not None:
        cache_dir.mkdir(parents=True, exist_ok=True)
    target = _target(spec, cell, tg, cache_dir)

    nodes = None
    if cell.budget_frac < 1.0:
        k = math.floor(cell.budget_frac * qg.n)
        if k < MIN_BUDGET_NODES:
            raise CellSkipped(f"budget {cell.budget_frac} yields {k} < {MIN_BUDGET_NODES} query nodes")
        perm = np.random.default_rng(derive_seed(spec.seed, cell.dataset, cell.seed, "budget")).permutation(qg.n)
        nodes = np.sort(perm[:k])

    aseed = derive_seed(spec.seed, *(getattr(cell, a) for a in SEED_AXES))
    dcfg = DefenseConfig(cell.sigma, seed=derive_seed(aseed, "defense")) if defense else None
    oracle = VictimOracle(target, defense=dcfg)
    scfg = StealConfig(response_kind=cell.response_kind, surrogate_arch=cell.surrogate_arch,
                       loss_kind=cell.loss_kind, epochs=spec.steal_epochs, head_epochs=spec.head_epochs,
                       spectral_pool=spec.spectral_pool, seed=aseed)
    if cell.attack_type == "I":
        result = steal(oracle, qg, scfg, query_nodes=nodes)
    else:
        result, _ = type2_attack(oracle, qg, scfg, StructureConfig(seed=aseed), query_nodes=nodes)
    ev = evaluate_surrogate(result, target, te)
    target_acc = float(np.mean(predict(target, None, te) == te.C))
    return {**cell.axes(), "accuracy": ev.accuracy, "fidelity": ev.fidelity, "f1": ev.f1,
            "queries_used": int(result.queries_used), "target_accuracy": target_acc,
            "query_nodes": int(qg.n), "final_loss": result.loss_curve[-1]}


def _cell_path(spec: ExperimentSpec, cell: Cell) -> Path:
    return Path(spec.output_dir) / "cells" / f"{cell.key()}.json"


def _execute(spec: ExperimentSpec, cell: Cell) -> dict:
    try:
        rec = {"status": "ok", **run_cell(spec, cell)}
    except CellSkipped as exc:
        log.warning("cell %s skipped: %s", cell.key(), exc)
        rec = {"status": "skipped", **cell.axes(), "error": str(exc)}
    except Exception as exc:  # recorded, the grid continues
        log.error("cell %s failed: %s", cell.key(), exc)
        rec = {"status": "failed", **cell.axes(), "error": f"{type(exc).__name__}: {exc}"}
    atomic_write_text(_cell_path(spec, cell), json.dumps(rec, indent=2, sort_keys=True) + "\n")
    return rec


def determinism_audit(spec: ExperimentSpec, runs: int = 3) -> dict:
    """Re-run the first cell ``runs`` times without any caching; every metric std must be 0."""
    cell = spec.cells()[0]
    recs = [run_cell(spec, cell, cache=False) for _ in range(runs)]
    std = {m: exact_std([r[m] for r in recs]) for m in METRICS}
    return {"cell": cell.axes(), "runs": [{m: r[m] for m in METRICS} for r in recs], "std": std,
            "passed": all(v == 0.0 for v in std.values())}


def run_grid(spec: ExperimentSpec) -> ExperimentReport:
    out = Path(spec.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / "spec.json", json.dumps(spec.to_dict(), indent=2) + "\n")
    cells = spec.cells()
    records: dict[str, dict] = {}
    pending = []
    for c in cells:
        p = _cell_path(spec, c)
        if p.exists():
            records[c.key()] = json.loads(p.read_text())
        else:
            pending.append(c)
    log.info("%d cells, %d already complete", len(cells), len(cells) - len(pending))
    if spec.workers > 1 and len(pending) > 1:
        with ProcessPoolExecutor(max_workers=spec.workers) as pool:
            for c, rec in zip(pending, pool.map(_execute, [spec] * len(pending), pending)):
                records[c.key()] = rec
    else:
        for c in pending:
            records[c.key()] = _execute(spec, c)

    report = ExperimentReport()
    for c in cells:
        rec = records[c.key()]
        status = rec.get("status")
        if status == "ok":
            report.rows.append({k: rec[k] for k in CSV_COLUMNS})
        elif status == "skipped":
            report.skipped.append(rec)
        else:
            report.failures.append(rec)
    if spec.audit:
        report.audit = determinism_audit(spec)
    atomic_write_text(out / "report.json", json.dumps(asdict(report), indent=2) + "\n")
    return report


def fidelity_bound_violations(records) -> list[dict]:
    """Cells breaking fidelity >= acc_S + acc_T - 1 (needs ``target_accuracy`` in the records)."""
    return [r for r in records
            if r["fidelity"] < r["accuracy"] + r["target_accuracy"] - 1 - 1e-12]


def load_cell_records(output_dir) -> list[dict]:
    return [json.loads(p.read_text()) for p in sorted((Path(output_dir) / "cells").glob("*.json"))]


# ---------------------------------------------------------------- sweeps


def budget_sweep(spec: ExperimentSpec, fractions, plot_dir=None):
    """Budget grid over ``fractions`` plus the RMSE run at the full query set.

    Returns ``(report, reference, plot paths)`` where ``reference`` maps each
    metric to the mean RMSE score at fraction 1.0.
    """
    fractions = tuple(sorted({float(f) for f in fractions}))
    if any(not 0 < f <= 1 for f in fractions):
        raise ValidationError("fractions must lie in (0, 1]")
    grid = replace(spec, budgets=tuple(sorted(set(fractions) | {1.0})),
                   loss_kinds=tuple(dict.fromkeys(spec.loss_kinds + ("rmse",))))
    report = run_grid(grid)
    base = report.select(loss_kind="rmse", budget_frac=1.0)
    reference = {m: float(np.mean([r[m] for r in base])) if base else float("nan") for m in ("accuracy", "fidelity")}
    plots = render_plots(report, plot_dir or Path(spec.output_dir) / "plots", reference=reference) if len(report) else []
    return report, reference, plots


def defense_sweep(spec: ExperimentSpec, sigmas, plot_dir=None):
    kinds = {ResponseKind.parse(k).value for k in spec.response_kinds}
    if not kinds <= {"embedding", "projection"}:
        raise ValidationError("defense sweeps need embedding or projection responses")
    grid = replace(spec, sigmas=tuple(float(s) for s in sigmas))
    report = run_grid(grid)
    plots = render_plots(report, plot_dir or Path(spec.output_dir) / "plots") if len(report) else []
    return report, plots


def spearman_by_series(report: ExperimentReport, x: str = "budget_frac", metric: str = "fidelity") -> dict:
    """Rank correlation between ``x`` and the seed-averaged ``metric`` for each remaining series."""
    from scipy.stats import spearmanr

    series: dict[tuple, dict[float, list]] = {}
    others = [a for a in AXES if a not in (x, "seed")]
    for r in report.rows:
        series.setdefault(tuple(r[a] for a in others), {}).setdefault(r[x], []).append(r[metric])
    out = {}
    for key, pts in series.items():
        xs = sorted(pts)
        ys = [float(np.mean(pts[v])) for v in xs]
        out[key] = float(spearmanr(xs, ys).statistic) if len(xs) > 1 and len(set(ys)) > 1 else float("nan")
    return out


# ---------------------------------------------------------------- rendering


def _task(row: dict) -> str:
    parts = [f"type {row['attack_type']}", row["response_kind"], row["loss_kind"], f"target {row['target_arch']}"]
    if row["budget_frac"] != 1.0:
        parts.append(f"budget {row['budget_frac']:g}")
    if row["sigma"] != 0.0:
        parts.append(f"sigma {row['sigma']:g}")
    return ", ".join(parts)


def render_markdown(report: ExperimentReport) -> str:
    agg = report.aggregate()
    if not agg:
        raise ValidationError("no cells")
    surrogates = sorted({r["surrogate_arch"] for r in agg})
    header = ["dataset", "task"] + [f"{s} {m}" for s in surrogates for m in ("acc", "fid")]
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    rows: dict[tuple, dict] = {}
    for r in agg:
        rows.setdefault((r["dataset"], _task(r)), {})[r["surrogate_arch"]] = r
    for (ds, task), by_s in rows.items():
        cells = [ds, task]
        for s in surrogates:
            r = by_s.get(s)
            for m in ("accuracy", "fidelity"):
                cells.append(f"{r[m + '_mean']:.3f} ± {r[m + '_std']:.3f}" if r else "n/a")
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def render_tables(report: ExperimentReport, out_dir) -> list[Path]:
    if not len(report):
        raise ValidationError("no cells")
    out = Path(out_dir)
    files = {"results.csv": report.to_csv(), "aggregate.csv": report.aggregate_csv(),
             "tables.md": render_markdown(report)}
    for name, text in files.items():
        atomic_write_text(out / name, text)
    return [out / n for n in files]


def render_plots(report: ExperimentReport, out_dir, reference: dict | None = None, fmt: str = "svg") -> list[Path]:
    """One figure per (metric, sweep); a sweep is any of budget or sigma with more than one value."""
    if not len(report):
        raise ValidationError("no cells")
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "gnnsteal"
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sweeps = [(x, name) for x, name in (("budget_frac", "budget"), ("sigma", "defense"))
              if len({r[x] for r in report.rows}) > 1]
    paths = []
    for x, name in sweeps:
        others = [a for a in AXES if a not in (x, "seed", "dataset", "target_arch", "budget_frac", "sigma")]
        for metric in ("accuracy", "fidelity"):
            fig, ax = plt.subplots(figsize=(5, 3.5))
            series: dict[tuple, dict[float, list]] = {}
            for r in report.rows:
                series.setdefault(tuple(r[a] for a in others), {}).setdefault(r[x], []).append(r[metric])
            for key in sorted(series):
                xs = sorted(series[key])
                ax.plot(xs, [np.mean(series[key][v]) for v in xs], marker="o", label=" / ".join(map(str, key)))
            if reference and x == "budget_frac" and not math.isnan(reference.get(metric, float("nan"))):
                ax.axhline(reference[metric], color="gray", linestyle="--", label="rmse @ full budget")
            ax.set_xlabel("query budget fraction" if x == "budget_frac" else "noise sigma")
            ax.set_ylabel(metric)
            ax.legend(fontsize=6)
            fig.tight_layout()
            path = out / f"{name}_{metric}.{fmt}"
            fig.savefig(path, metadata={"Date": None} if fmt == "svg" else None)
            plt.close(fig)
            paths.append(path)
    return paths
