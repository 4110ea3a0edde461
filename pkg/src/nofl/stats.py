"""Lower-bound overhead (LBO) analysis of benchmark records.

For each (benchmark, mutators, workers) group the minimum distilled cost is
the smallest time attributable to the mutator, total minus pause, over the
group's successful runs.  A run's LBO is its total time over that minimum.
Wall-clock and CPU time are analysed separately.
"""

import csv
import math
import os
import statistics
from dataclasses import dataclass, field

from .bench.runner import OK

METRICS = ("wall", "cpu")
PLOT_COLUMNS = ["multiplier", "collector", "mutators", "workers", "row", "repetition", "lbo"]


def _times(record, metric):
    if metric == "wall":
        return record.wall_total_ns, record.wall_pause_ns
    if metric == "cpu":
        return record.cpu_total_ns, record.cpu_pause_ns
    raise ValueError(f"unknown metric {metric!r}")


@dataclass
class Cell:
    benchmark: str
    mutators: int
    workers: int
    collector: str
    multiplier: float
    points: list = field(default_factory=list)   # (repetition, lbo)
    missing: list = field(default_factory=list)  # (repetition, outcome)

    @property
    def values(self):
        return [v for _, v in sorted(self.points)]

    @property
    def median(self):
        """Median over every repetition; failed runs count as infinitely slow."""
        vals = self.values + [math.inf] * len(self.missing)
        if not vals:
            return None
        return statistics.median(sorted(vals))


@dataclass
class LBOReport:
    metric: str
    min_cost: dict = field(default_factory=dict)
    cells: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)

    def cell(self, benchmark, collector, multiplier, mutators=1, workers=1):
        return self.cells.get((benchmark, mutators, workers, collector, float(multiplier)))


def compute_lbo(records, metric="wall"):
    groups = {}
    for r in records:
        groups.setdefault((r.benchmark, r.mutators, r.workers), []).append(r)
    report = LBOReport(metric=metric)
    for key, rows in groups.items():
        ok = [r for r in rows if r.outcome == OK]
        if not ok:
            report.warnings.append(f"no successful run for benchmark={key[0]} "
                                   f"mutators={key[1]} workers={key[2]}; group omitted")
            continue
        costs = []
        for r in ok:
            total, pause = _times(r, metric)
            costs.append(total - pause)
        best = min(costs)
        if best <= 0:
            report.warnings.append(f"non-positive mutator time in {key}; group omitted")
            continue
        report.min_cost[key] = best
        for r in rows:
            ck = key + (r.collector, float(r.multiplier))
            cell = report.cells.get(ck)
            if cell is None:
                cell = report.cells[ck] = Cell(r.benchmark, r.mutators, r.workers,
                                               r.collector, float(r.multiplier))
            if r.outcome == OK:
                total, _ = _times(r, metric)
                cell.points.append((r.repetition, total / best))
            else:
                cell.missing.append((r.repetition, r.outcome))
    return report


def _fmt(v):
    if v is None:
        return ""
    if math.isinf(v):
        return "inf"
    return repr(float(v))


def summarize(report, out_dir):
    """Write one plot-data CSV per benchmark and return an aligned table.

    Each plot file lists, per cell, a ``point`` row for every successful
    repetition, a ``missing`` row for every failed one and a ``median``
    row.  A cell with no successful repetition gets a single ``gap`` row
    in place of a median.
    """
    os.makedirs(out_dir, exist_ok=True)
    by_bench = {}
    for cell in report.cells.values():
        by_bench.setdefault(cell.benchmark, []).append(cell)
    paths = []
    for bench, cells in sorted(by_bench.items()):
        cells.sort(key=lambda c: (c.mutators, c.workers, c.collector, c.multiplier))
        path = os.path.join(out_dir, f"lbo_{report.metric}_{bench}.csv")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(PLOT_COLUMNS)
            for c in cells:
                head = [c.multiplier, c.collector, c.mutators, c.workers]
                for rep, v in sorted(c.points):
                    w.writerow(head + ["point", rep, _fmt(v)])
                for rep, _ in sorted(c.missing):
                    w.writerow(head + ["missing", rep, ""])
                if c.points:
                    w.writerow(head + ["median", "", _fmt(c.median)])
                else:
                    w.writerow(head + ["gap", "", ""])
        paths.append(path)
    return render_table(report), paths


def render_table(report):
    multipliers = sorted({c.multiplier for c in report.cells.values()})
    rows = {}
    for c in report.cells.values():
        rows.setdefault((c.benchmark, c.mutators, c.workers, c.collector), {})[c.multiplier] = c
    header = ["benchmark", "mutators", "workers", "collector"] + [f"{m:g}x" for m in multipliers]
    body = []
    for key in sorted(rows):
        line = [key[0], str(key[1]), str(key[2]), key[3]]
        for m in multipliers:
            c = rows[key].get(m)
            if c is None or not c.points:
                line.append("gap")
            else:
                med = c.median
                line.append("inf" if math.isinf(med) else f"{med:.3f}")
        body.append(line)
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
    out = [f"median {report.metric} LBO"]
    for r in [header] + body:
        out.append("  ".join(s.rjust(w) if i >= 4 else s.ljust(w)
                             for i, (s, w) in enumerate(zip(r, widths))).rstrip())
    for warning in report.warnings:
        out.append(f"warning: {warning}")
    return "\n".join(out) + "\n"
