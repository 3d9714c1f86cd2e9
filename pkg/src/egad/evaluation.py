"""Detection metrics, inference benchmarking and report files."""

from __future__ import annotations

import math
import platform
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

AUPRC_RULE = "average_precision_step"


@dataclass
class PrCurve:
    precision: np.ndarray
    recall: np.ndarray
    thresholds: np.ndarray

    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.precision.tolist(), self.recall.tolist()))


def _check_binary(labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels).astype(bool)
    if labels.all() or not labels.any():
        raise ValueError("precision-recall needs at least one positive and one negative label")
    return labels


def pr_curve(scores, labels) -> PrCurve:
    """Precision/recall at every distinct score, strictest threshold first.

    Equal scores cross a threshold together. The sweep stops at the first
    threshold that reaches full recall; later points add no area.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = _check_binary(labels)
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    last_of_group = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]
    tp = np.cumsum(y)[last_of_group]
    fp = (last_of_group + 1) - tp
    stop = int(np.searchsorted(tp, tp[-1])) + 1
    tp, fp = tp[:stop], fp[:stop]
    return PrCurve(tp / (tp + fp), tp / tp[-1], s[last_of_group][:stop])


def auprc(curve: PrCurve) -> float:
    """Step-wise average precision: sum over the sweep of (R_i - R_{i-1}) * P_i."""
    recall = np.r_[0.0, curve.recall]
    return float(np.sum(np.diff(recall) * curve.precision))


def average_precision(scores, labels) -> float:
    return auprc(pr_curve(scores, labels))


def _floor_count(q: float, n: int) -> int:
    return int(math.floor(round(q * n, 9)))


def top_fraction_classify(scores, q: float = 0.2) -> np.ndarray:
    """Flag the floor(q * n) highest scores; ties resolve to earlier rows."""
    if not 0.0 < q < 1.0:
        raise ValueError(f"q must lie in (0, 1), got {q}")
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise ValueError("no scores to classify")
    k = _floor_count(q, scores.size)
    flags = np.zeros(scores.size, dtype=bool)
    flags[np.argsort(-scores, kind="stable")[:k]] = True
    return flags


def prf1(pred, truth) -> tuple[float, float, float]:
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction shape {pred.shape} != label shape {truth.shape}")
    tp = float(np.sum(pred & truth))
    p = tp / pred.sum() if pred.any() else 0.0
    r = tp / truth.sum() if truth.any() else 0.0
    f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f1


def kdd_protocol(scores, labels, q: float = 0.2) -> dict[str, float]:
    p, r, f1 = prf1(top_fraction_classify(scores, q), labels)
    return {"precision": p, "recall": r, "f1": f1}


# -------------------------------------------------------------- aggregation

@dataclass
class EvalReport:
    config: str
    metrics: dict[str, list[float]]
    fingerprint: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def runs(self) -> int:
        return max((len(v) for v in self.metrics.values()), default=0)

    def mean(self, name: str) -> float:
        return float(np.mean(self.metrics[name]))

    def std(self, name: str) -> float | None:
        vals = self.metrics[name]
        return float(np.std(vals, ddof=1)) if len(vals) >= 2 else None


def aggregate_runs(per_run: Sequence[dict[str, float]], config: str = "",
                   fingerprint: str = "", **meta) -> EvalReport:
    """Collect per-run metric dicts; mean always, sample std from two runs on."""
    if not per_run:
        raise ValueError("aggregate_runs needs at least one run")
    names = list(per_run[0])
    metrics = {n: [float(r[n]) for r in per_run] for n in names}
    return EvalReport(config, metrics, fingerprint, dict(meta))


def _fmt(v) -> str:
    return "" if v is None else format(v, ".10g")


def render_report(reports: Sequence[EvalReport], fmt: str = "csv", meta: dict | None = None) -> str:
    lines = []
    header_meta = {"auprc_rule": AUPRC_RULE, **(meta or {})}
    if reports and reports[0].fingerprint:
        header_meta.setdefault("fingerprint", reports[0].fingerprint)
    lines += [f"# {k}={v}" for k, v in sorted(header_meta.items())]
    if fmt == "csv":
        lines.append("config,metric,mean,std,n")
        for rep in reports:
            for name in rep.metrics:
                lines.append(",".join([rep.config, name, _fmt(rep.mean(name)),
                                       _fmt(rep.std(name)), str(len(rep.metrics[name]))]))
    elif fmt == "plot-data":
        lines.append("digit,variant,mean,std,n")
        for rep in reports:
            name = rep.meta.get("metric", "auprc")
            lines.append(",".join([str(rep.meta["digit"]), str(rep.meta["variant"]),
                                   _fmt(rep.mean(name)), _fmt(rep.std(name)),
                                   str(len(rep.metrics[name]))]))
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    return "\n".join(lines) + "\n"


def emit_report(reports, path, fmt: str = "csv", meta: dict | None = None) -> str:
    if isinstance(reports, EvalReport):
        reports = [reports]
    text = render_report(reports, fmt, meta)
    with open(path, "w", newline="") as fh:
        fh.write(text)
    return text


def read_report(path) -> list[dict[str, str]]:
    rows = []
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh if not ln.startswith("#")]
    header = lines[0].split(",")
    for ln in lines[1:]:
        rows.append(dict(zip(header, ln.split(","))))
    return rows


# -------------------------------------------------------------- benchmarking

@dataclass
class BenchReport:
    dataset: str
    variant: str
    method: str
    mean_ms: float
    times_ms: list[float]
    batch_size: int
    hardware: str = field(default_factory=lambda: f"{platform.machine()} {platform.processor() or 'cpu'}")
    speedup: float | None = None

    @property
    def n_batches(self) -> int:
        return len(self.times_ms)


def bench_inference(score_fn: Callable, batches: Sequence, warmup: int = 3, n_batches: int = 100,
                    dataset: str = "", variant: str = "", method: str = "") -> BenchReport:
    """Mean wall time (ms) of ``score_fn(batch)`` over ``n_batches`` timed calls.

    The first ``warmup`` batches run untimed. Timing uses the monotonic
    ``perf_counter_ns`` clock.
    """
    batches = list(batches)
    if len(batches) < warmup + n_batches:
        raise ValueError(f"benchmark needs {warmup + n_batches} batches, got {len(batches)}")
    if n_batches < 1:
        raise ValueError("n_batches must be >= 1")
    for b in batches[:warmup]:
        score_fn(b)
    times = []
    for b in batches[warmup:warmup + n_batches]:
        t0 = time.perf_counter_ns()
        score_fn(b)
        times.append((time.perf_counter_ns() - t0) / 1e6)
    size = len(batches[warmup]) if hasattr(batches[warmup], "__len__") else 0
    return BenchReport(dataset, variant, method, float(np.mean(times)), times, size)


def speedup(baseline: BenchReport, candidate: BenchReport) -> float:
    candidate.speedup = baseline.mean_ms / candidate.mean_ms
    return candidate.speedup


def render_bench(rows: Sequence[tuple[BenchReport, BenchReport]]) -> str:
    """Table-2 shaped CSV: dataset, variant, baseline ms, candidate ms, speedup."""
    lines = ["dataset,variant,anogan_ms,bigan_ms,speedup,batch_size,n_batches,hardware"]
    for base, cand in rows:
        ratio = cand.speedup if cand.speedup is not None else base.mean_ms / cand.mean_ms
        lines.append(",".join([cand.dataset, cand.variant, f"{base.mean_ms:.3f}", f"{cand.mean_ms:.3f}",
                               f"{ratio:.1f}", str(cand.batch_size),
                               f"{base.n_batches}/{cand.n_batches}", cand.hardware]))
    return "\n".join(lines) + "\n"
