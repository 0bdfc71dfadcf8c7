"""Metrics tables, run logs and summary report rows."""
import csv
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .engine import Metrics, epochs_to_threshold
from .exceptions import ParseError

METRICS_HEADER = ["epoch", "train_loss", "top1", "top5"]
RUNLOG_HEADER = ["epoch", "step", "bucket", "expert", "loss"]


def mean_std(values):
    """Mean and sample standard deviation (``None`` below two values)."""
    values = [float(v) for v in values]
    if not values:
        return float("nan"), None
    mean = float(np.mean(values))
    std = float(np.std(values, ddof=1)) if len(values) >= 2 else None
    return mean, std


def format_mean_std(mean, std, mean_digits=2, std_digits=3):
    if std is None or (isinstance(std, float) and math.isnan(std)):
        return f"{mean:.{mean_digits}f}"
    return f"{mean:.{mean_digits}f}±{std:.{std_digits}f}"


@dataclass
class ReportRow:
    experiment: str
    method: str
    policy: str
    n_seeds: int
    mean: float
    std: Optional[float]
    epochs_to_threshold: Optional[float] = None
    n_failed: int = 0

    @property
    def accuracy(self):
        return format_mean_std(self.mean, self.std)

    def as_dict(self):
        return {
            "experiment": self.experiment, "method": self.method, "policy": self.policy,
            "n_seeds": self.n_seeds, "mean": repr(self.mean),
            "std": "" if self.std is None else repr(self.std),
            "epochs_to_threshold": "" if self.epochs_to_threshold is None else repr(self.epochs_to_threshold),
            "n_failed": self.n_failed,
        }


def make_row(experiment, method, accuracies, policy="-", ett=None, n_failed=0):
    finite = [a for a in accuracies if not math.isnan(a)]
    mean, std = mean_std(finite)
    return ReportRow(experiment, method, policy, len(finite), mean, std, ett,
                     n_failed + len(accuracies) - len(finite))


def mean_epochs_to_threshold(metrics_list: Sequence[Metrics], theta, budget=None):
    """Seed-mean of ``epochs_to_threshold``; runs that never reach ``theta`` count as ``budget``."""
    values = []
    for m in metrics_list:
        e = epochs_to_threshold(m.top1, theta)
        if e is None:
            e = budget if budget is not None else len(m.top1)
        values.append(e)
    return float(np.mean(values)) if values else None


def render_table(rows: List[ReportRow]):
    """Aligned text table."""
    head = ["experiment", "method", "policy", "seeds", "top1", "epochs_to_thr", "failed"]
    body = [[r.experiment, r.method, r.policy, str(r.n_seeds), r.accuracy,
             "-" if r.epochs_to_threshold is None else f"{r.epochs_to_threshold:.1f}", str(r.n_failed)]
            for r in rows]
    widths = [max(len(x) for x in col) for col in zip(head, *body)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(line, widths)).rstrip() for line in [head] + body]
    return "\n".join(lines) + "\n"


def write_rows(path, rows: List[ReportRow]):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(ReportRow.__dataclass_fields__), delimiter="\t",
                           lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(r.as_dict())


def read_rows(path) -> List[ReportRow]:
    with open(path, newline="") as fh:
        rows = []
        for d in csv.DictReader(fh, delimiter="\t"):
            rows.append(ReportRow(
                d["experiment"], d["method"], d["policy"], int(d["n_seeds"]), float(d["mean"]),
                float(d["std"]) if d["std"] else None,
                float(d["epochs_to_threshold"]) if d["epochs_to_threshold"] else None,
                int(d["n_failed"])))
        return rows


def write_metrics(path, metrics: Metrics):
    """Per-epoch table: ``epoch, train_loss, top1, top5`` (tab separated, exact floats)."""
    with open(path, "w", newline="") as fh:
        fh.write("\t".join(METRICS_HEADER) + "\n")
        for e, (loss, t1, t5) in enumerate(zip(metrics.train_loss, metrics.top1, metrics.top5)):
            fh.write(f"{e}\t{loss!r}\t{t1!r}\t{t5!r}\n")


def read_metrics(path) -> Metrics:
    m = Metrics()
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].split("\t") != METRICS_HEADER:
        raise ParseError(f"{path}: not a metrics table", offset=1)
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split("\t")
        try:
            _, loss, t1, t5 = parts
            m.record(float(loss), float(t1), float(t5), 0.0)
        except ValueError:
            raise ParseError(f"{path}: malformed metrics row", offset=lineno) from None
    m.wall_clock = []
    return m


def write_summary(path, metrics: Metrics, **extra):
    items = {"final_top1": repr(metrics.final_top1), "final_top5": repr(metrics.final_top5),
             "epochs": str(len(metrics.top1)), "failed": str(int(metrics.failed)),
             "failure": metrics.failure or "-"}
    items.update({k: str(v) for k, v in extra.items()})
    with open(path, "w") as fh:
        for k, v in items.items():
            fh.write(f"{k}\t{v}\n")


def read_summary(path):
    out = {}
    with open(path) as fh:
        for line in fh.read().splitlines():
            k, _, v = line.partition("\t")
            out[k] = v
    return out


def write_run_log(path, entries):
    with open(path, "w") as fh:
        fh.write("\t".join(RUNLOG_HEADER) + "\n")
        for e in entries:
            fh.write(f"{e.epoch}\t{e.step}\t{e.bucket}\t{e.expert}\t{e.loss!r}\n")


def write_series(path, series: dict):
    """Plot-ready per-epoch series: one column per name."""
    names = list(series)
    length = max((len(v) for v in series.values()), default=0)
    with open(path, "w") as fh:
        fh.write("epoch\t" + "\t".join(names) + "\n")
        for e in range(length):
            cells = [repr(float(series[n][e])) if e < len(series[n]) else "" for n in names]
            fh.write(f"{e}\t" + "\t".join(cells) + "\n")
