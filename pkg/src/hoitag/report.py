"""Comparison tables (text + CSV) for judged scores, rubric proxies and tag metrics."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

LAYOUTS = {
    "judged": ("CoI", "BMA", "TDO"),
    "rubric": ("coi_proxy", "bma_proxy", "tdo_proxy"),
    "tags": ("precision", "recall", "f1", "jaccard", "top1", "top3", "top5"),
}
_TAG_HEADERS = ("Precision/Recall/F1-score", "Jaccard", "Top-1", "Top-3", "Top-5")


@dataclass
class RunResult:
    model: str
    dataset: str
    values: dict


@dataclass
class Report:
    kind: str
    text: str
    csv: str
    best: dict = field(default_factory=dict)  # (dataset, column) -> model names

    def write(self, stem) -> tuple[Path, Path]:
        stem = Path(stem)
        stem.parent.mkdir(parents=True, exist_ok=True)
        txt, csv_path = stem.with_suffix(".txt"), stem.with_suffix(".csv")
        txt.write_text(self.text, encoding="utf-8")
        csv_path.write_text(self.csv, encoding="utf-8")
        return txt, csv_path


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def detect_kind(columns) -> str:
    for kind, cols in LAYOUTS.items():
        if set(cols) <= set(columns):
            return kind
    raise ValueError(f"unrecognized report columns {list(columns)}")


def _ordered(items):
    out = []
    for x in items:
        if x not in out:
            out.append(x)
    return out


def build_report(runs: Sequence[RunResult], kind: str | None = None) -> Report:
    """Tabulate runs: one row per model, one column group per dataset.

    The best value of every column is listed under the table (ties list
    every winning model).
    """
    if not runs:
        raise ValueError("build_report needs at least one run")
    kind = kind or detect_kind(runs[0].values)
    cols = LAYOUTS[kind]
    models = _ordered(r.model for r in runs)
    datasets = _ordered(r.dataset for r in runs)
    table = {(r.model, r.dataset): r.values for r in runs}

    best = {}
    for ds in datasets:
        for c in cols:
            vals = {m: round(float(table[(m, ds)][c]), 10) for m in models if (m, ds) in table}
            if vals:
                top = max(vals.values())
                best[(ds, c)] = [m for m, v in vals.items() if v == top]

    def cells(values) -> list[str]:
        if values is None:
            return ["-"] * (len(_TAG_HEADERS) if kind == "tags" else len(cols))
        if kind == "tags":
            prf = "/".join(_fmt(values[c]) for c in ("precision", "recall", "f1"))
            return [prf] + [_fmt(values[c]) for c in ("jaccard", "top1", "top3", "top5")]
        return [_fmt(values[c]) for c in cols]

    name_w = max(len("Model"), *(len(m) for m in models))
    lines = []
    if kind == "tags":
        body = {m: [cells(table.get((m, ds))) for ds in datasets] for m in models}
        widths = [
            max(len(_TAG_HEADERS[j]), *(len(body[m][d][j]) for m in models))
            for d in range(len(datasets)) for j in range(len(_TAG_HEADERS))
        ]
        header = [h for _ in datasets for h in _TAG_HEADERS]
        lines.append("Model".ljust(name_w) + " | " + " | ".join(h.ljust(w) for h, w in zip(header, widths)).rstrip())
        for m in models:
            flat = [c for group in body[m] for c in group]
            lines.append(m.ljust(name_w) + " | " + " | ".join(c.ljust(w) for c, w in zip(flat, widths)).rstrip())
    else:
        col_w = max(max(len(c) for c in cols), 4)
        groups = {m: [" ".join(c.ljust(col_w) for c in cells(table.get((m, ds)))).rstrip() for ds in datasets]
                  for m in models}
        heads = [" ".join(c.ljust(col_w) for c in cols).rstrip() for _ in datasets]
        gw = [max(len(ds), len(heads[i]), *(len(groups[m][i]) for m in models)) for i, ds in enumerate(datasets)]
        lines.append(" " * name_w + " | " + " | ".join(ds.ljust(w) for ds, w in zip(datasets, gw)).rstrip())
        lines.append("Model".ljust(name_w) + " | " + " | ".join(h.ljust(w) for h, w in zip(heads, gw)).rstrip())
        for m in models:
            lines.append(m.ljust(name_w) + " | " + " | ".join(g.ljust(w) for g, w in zip(groups[m], gw)).rstrip())
    rule = "-" * max(len(line) for line in lines)
    lines.insert(2 if kind != "tags" else 1, rule)
    lines.append(rule)
    for (ds, c), winners in best.items():
        lines.append(f"best {ds}/{c}: {', '.join(winners)}")
    text = "\n".join(lines) + "\n"

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("dataset", "model") + cols)
    for r in runs:
        w.writerow([r.dataset, r.model] + [_fmt(float(r.values[c])) for c in cols])
    return Report(kind, text, buf.getvalue(), best)


def load_runs_csv(path) -> list[RunResult]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        kind = detect_kind(reader.fieldnames or [])
        return [
            RunResult(row["model"], row.get("dataset", ""), {c: float(row[c]) for c in LAYOUTS[kind]})
            for row in reader
        ]
