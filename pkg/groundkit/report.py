"""Comparison tables, per-class chart data and run archives."""
from dataclasses import dataclass, field
from datetime import datetime, timezone
from decimal import Decimal, ROUND_HALF_UP
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple
import csv
import io
import json
import logging

from jinja2 import Environment, FileSystemLoader

from groundkit.errors import InputFileError, ValidationError
from groundkit.metrics_map import APResult
from groundkit.metrics_rodeo import RodeoScores

logger = logging.getLogger(__name__)

TEMPLATES_DIR = Path(__file__).parent / "templates"
FORMATS = ("markdown", "csv", "structured")
LEGEND = "Best per column in **bold**, second best in _italics_."

_templates = Environment(
    loader=FileSystemLoader(str(TEMPLATES_DIR)),
    autoescape=False,
    trim_blocks=True,
    keep_trailing_newline=True,
)


@dataclass
class EvalRun:
    run_id: str
    method_name: str
    config_fingerprint: str
    ap: Optional[APResult] = None
    rodeo: Optional[RodeoScores] = None
    per_class: Dict[str, RodeoScores] = field(default_factory=dict)
    params_count: Optional[str] = None
    train_samples: Optional[int] = None
    test_set: Optional[str] = None
    metadata: Dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.config_fingerprint:
            raise ValidationError(f"run {self.run_id} has no config fingerprint")
        if self.ap is not None and self.per_class:
            extra = sorted(set(self.per_class) - set(self.ap.per_class_ap))
            if extra:
                raise ValidationError(f"run {self.run_id}: per-class scores for unevaluated classes {extra}")

    def to_dict(self) -> Dict:
        return {
            "run_id": self.run_id,
            "method_name": self.method_name,
            "params_count": self.params_count,
            "train_samples": self.train_samples,
            "test_set": self.test_set,
            "config_fingerprint": self.config_fingerprint,
            "ap": self.ap.to_dict() if self.ap is not None else None,
            "rodeo": self.rodeo.to_dict() if self.rodeo is not None else None,
            "per_class": {c: s.to_dict() for c, s in sorted(self.per_class.items())},
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "EvalRun":
        return cls(
            run_id=data["run_id"],
            method_name=data["method_name"],
            config_fingerprint=data["config_fingerprint"],
            ap=APResult.from_dict(data["ap"]) if data.get("ap") else None,
            rodeo=RodeoScores.from_dict(data["rodeo"]) if data.get("rodeo") else None,
            per_class={c: RodeoScores.from_dict(s) for c, s in data.get("per_class", {}).items()},
            params_count=data.get("params_count"),
            train_samples=data.get("train_samples"),
            test_set=data.get("test_set"),
            metadata=dict(data.get("metadata", {})),
        )


def _ap_column(attr: str) -> Callable[[EvalRun], Optional[float]]:
    return lambda run: getattr(run.ap, attr) * 100.0 if run.ap is not None else None


def _rodeo_column(attr: str) -> Callable[[EvalRun], Optional[float]]:
    return lambda run: getattr(run.rodeo, attr) if run.rodeo is not None else None


# Same order as the published comparison tables
COLUMNS: Tuple[Tuple[str, Callable[[EvalRun], Optional[float]]], ...] = (
    ("mAP50:95", _ap_column("map50_95")),
    ("mAP50", _ap_column("map50")),
    ("mAP75", _ap_column("map75")),
    ("R_loc", _rodeo_column("r_loc")),
    ("R_shape", _rodeo_column("r_shape")),
    ("R_cls", _rodeo_column("r_cls")),
    ("R_total", _rodeo_column("r_total")),
)


def format_value(value: Optional[float]) -> str:
    """Two decimals, rounding half away from zero."""
    if value is None:
        return "-"
    exact = Decimal(repr(round(value, 9)))
    return str(exact.quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


def _rank_flags(values: Sequence[Optional[float]]) -> List[Optional[str]]:
    """'best' / 'second' per value; equal printed values share a flag."""
    shown = [Decimal(format_value(v)) if v is not None else None for v in values]
    distinct = sorted({v for v in shown if v is not None}, reverse=True)
    best = distinct[0] if distinct else None
    second = distinct[1] if len(distinct) > 1 else None
    flags = []
    for v in shown:
        if v is None:
            flags.append(None)
        elif v == best:
            flags.append("best")
        elif v == second:
            flags.append("second")
        else:
            flags.append(None)
    return flags


def _grouped(runs: Sequence[EvalRun]) -> List[Tuple[Optional[str], List[EvalRun]]]:
    groups: Dict[Optional[str], List[EvalRun]] = {}
    for run in runs:
        groups.setdefault(run.test_set, []).append(run)
    return list(groups.items())


def _table_rows(runs: Sequence[EvalRun]) -> List[Dict]:
    """Rows in input order (grouped by test set) with values and flags per column."""
    rows = []
    for test_set, group in _grouped(runs):
        flags_by_column = [_rank_flags([getter(r) for r in group]) for _, getter in COLUMNS]
        for index, run in enumerate(group):
            rows.append({
                "test_set": test_set or "",
                "method": run.method_name,
                "params": run.params_count or "-",
                "train": f"{run.train_samples:,}" if run.train_samples is not None else "-",
                "values": [getter(run) for _, getter in COLUMNS],
                "flags": [flags[index] for flags in flags_by_column],
            })
    return rows


def _markdown_cell(value: Optional[float], flag: Optional[str]) -> str:
    text = format_value(value)
    if flag == "best":
        return f"**{text}**"
    if flag == "second":
        return f"_{text}_"
    return text


def comparison_table(runs: Sequence[EvalRun], fmt: str = "markdown") -> str:
    """Render runs as a method-comparison table."""
    if not runs:
        raise ValidationError("comparison table needs at least one run")
    if fmt not in FORMATS:
        raise ValidationError(f"unknown report format {fmt!r}; expected one of {FORMATS}")
    if fmt == "structured":
        return archive_text(runs)

    grouped = any(run.test_set for run in runs)
    rows = _table_rows(runs)
    names = [name for name, _ in COLUMNS]

    if fmt == "csv":
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        header = (["test_set"] if grouped else []) + ["method", "params", "train_samples"]
        writer.writerow(header + names + [f"{n}_flag" for n in names])
        for row in rows:
            lead = ([row["test_set"]] if grouped else []) + [row["method"], row["params"], row["train"]]
            writer.writerow(lead + [format_value(v) for v in row["values"]] + [f or "" for f in row["flags"]])
        return buffer.getvalue()

    header = (["Test Set"] if grouped else []) + ["Method", "Params", "Train. Samp."] + names
    align = (["---"] if grouped else []) + ["---", "---", "---:"] + ["---:"] * len(names)
    cells = []
    for row in rows:
        lead = ([row["test_set"]] if grouped else []) + [row["method"], row["params"], row["train"]]
        cells.append(lead + [_markdown_cell(v, f) for v, f in zip(row["values"], row["flags"])])
    template = _templates.get_template("comparison_table.md.j2")
    return template.render(header=header, align=align, rows=cells, legend=LEGEND)


def ablation_table(baseline: EvalRun, improved: EvalRun) -> str:
    """Baseline vs. improved run with a signed delta row."""
    names = [name for name, _ in COLUMNS]
    header = ["Method"] + names
    align = ["---"] + ["---:"] * len(names)
    rows = []
    for run in (baseline, improved):
        rows.append([run.method_name] + [format_value(getter(run)) for _, getter in COLUMNS])

    deltas = []
    for _, getter in COLUMNS:
        a, b = getter(baseline), getter(improved)
        if a is None or b is None:
            deltas.append("-")
        else:
            text = format_value(b - a)
            deltas.append(text if text.startswith("-") else f"+{text}")
    rows.append(["Delta"] + deltas)
    template = _templates.get_template("comparison_table.md.j2")
    legend = f"Delta = {improved.method_name} minus {baseline.method_name}."
    return template.render(header=header, align=align, rows=rows, legend=legend)


def per_class_chart_data(run: EvalRun, metric: str = "r_total") -> Dict:
    """(class, value) pairs sorted descending with competition ranks."""
    if not run.per_class:
        raise ValidationError(f"run {run.run_id} has no per-class scores")
    ordered = sorted(run.per_class.items(), key=lambda item: (-getattr(item[1], metric), item[0]))
    entries = []
    for position, (label, scores) in enumerate(ordered, 1):
        value = getattr(scores, metric)
        if entries and entries[-1]["value"] == value:
            rank = entries[-1]["rank"]
        else:
            rank = position
        entries.append({"class": label, "value": value, "rank": rank})
    return {
        "run_id": run.run_id,
        "method": run.method_name,
        "metric": metric,
        "entries": entries,
    }


def per_class_wins(runs: Sequence[EvalRun], metric: str = "r_total") -> Dict:
    """Count, per run, the classes where it scores highest; ties credit every tied run."""
    classes = sorted({c for run in runs for c in run.per_class})
    wins = {run.run_id: 0 for run in runs}
    winners: Dict[str, List[str]] = {}
    for label in classes:
        scored = [(getattr(run.per_class[label], metric), run.run_id) for run in runs if label in run.per_class]
        top = max(value for value, _ in scored)
        winners[label] = sorted(run_id for value, run_id in scored if value == top)
        for run_id in winners[label]:
            wins[run_id] += 1
    return {"metric": metric, "classes": len(classes), "wins": wins, "winners": winners}


# Archives

def archive_text(runs: Sequence[EvalRun]) -> str:
    return json.dumps({"runs": [run.to_dict() for run in runs]}, indent=2, sort_keys=True) + "\n"


def write_archive(path, runs: Sequence[EvalRun]) -> Tuple[Path, Path]:
    """Write runs plus a sidecar carrying the wall-clock timestamp."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(archive_text(runs), encoding="utf-8")
    sidecar = path.with_name(path.stem + ".meta.json")
    stamp = datetime.now(timezone.utc).replace(microsecond=0).isoformat()
    sidecar.write_text(json.dumps({"created_at": stamp, "runs": [r.run_id for r in runs]}, indent=2) + "\n",
                       encoding="utf-8")
    logger.info("Archived %d run(s) to %s", len(runs), path)
    return path, sidecar


def read_archive(path) -> List[EvalRun]:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise InputFileError(f"cannot read {path}: {e}")
    except json.JSONDecodeError as e:
        raise InputFileError(f"{path}: {e}")
    return [EvalRun.from_dict(entry) for entry in data.get("runs", [])]
