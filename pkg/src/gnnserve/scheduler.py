"""PSGS-guided CPU/GPU routing and micro-batch assignment.

Calibration fits, per executor, an average latency line (least squares
over every measurement) and a maximal line (least squares through each
bucket's slowest measurement, lifted so it never sits below the average
line at a measured PSGS). Their pairwise intersections give the four
routing thresholds.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

CLASSES = ("cpu", "gpu")
THRESHOLD_NAMES = {
    "cpu-preferred": "cpu_preferred",
    "gpu-preferred": "gpu_preferred",
    "latency": "latency_preferred",
    "throughput": "throughput_preferred",
}


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class Line:
    intercept: float
    slope: float

    def __call__(self, x):
        return self.intercept + self.slope * np.asarray(x, dtype=np.float64)

    def at(self, x: float) -> float:
        return float(self.intercept + self.slope * x)


def intersect(a: Line, b: Line) -> float | None:
    """PSGS where two lines meet, or ``None`` if they are parallel or meet
    at negative PSGS."""
    ds = a.slope - b.slope
    if ds == 0 or not math.isfinite(ds):
        return None
    x = (b.intercept - a.intercept) / ds
    if not math.isfinite(x) or x < 0:
        return None
    return float(x)


def fit_line(x, y) -> Line:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if np.unique(x).size < 2:
        raise CalibrationError("need at least two distinct PSGS values to fit a line")
    xm, ym = x.mean(), y.mean()
    slope = float(np.dot(x - xm, y - ym) / np.dot(x - xm, x - xm))
    intercept = float(ym - slope * xm)
    if not (math.isfinite(slope) and math.isfinite(intercept)):
        raise CalibrationError("line fit is not finite")
    return Line(intercept, slope)


@dataclass(frozen=True, eq=False)
class ExecutorCurve:
    psgs: np.ndarray
    latency: np.ndarray
    bucket: np.ndarray
    average: Line
    maximal: Line

    @classmethod
    def fit(cls, psgs, latency, bucket) -> "ExecutorCurve":
        psgs = np.asarray(psgs, dtype=np.float64)
        latency = np.asarray(latency, dtype=np.float64)
        bucket = np.asarray(bucket, dtype=np.int64)
        avg = fit_line(psgs, latency)
        mx, my = [], []
        for b in np.unique(bucket):
            sel = np.flatnonzero(bucket == b)
            k = sel[np.argmax(latency[sel])]
            mx.append(psgs[k])
            my.append(latency[k])
        if len(mx) < 2:
            raise CalibrationError("need at least two PSGS buckets")
        top = fit_line(mx, my)
        lift = float(np.max(avg(psgs) - top(psgs)))
        if lift > 0:
            top = Line(top.intercept + lift, top.slope)
        return cls(psgs, latency, bucket, avg, top)

    def to_dict(self) -> dict:
        return {
            "average": {"intercept": self.average.intercept, "slope": self.average.slope},
            "maximal": {"intercept": self.maximal.intercept, "slope": self.maximal.slope},
            "samples": [[float(x), float(y), int(b)]
                        for x, y, b in zip(self.psgs, self.latency, self.bucket)],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExecutorCurve":
        s = np.asarray(d["samples"], dtype=np.float64).reshape(-1, 3)
        return cls(s[:, 0], s[:, 1], s[:, 2].astype(np.int64),
                   Line(**d["average"]), Line(**d["maximal"]))


@dataclass(frozen=True, eq=False)
class CalibrationCurve:
    cpu: ExecutorCurve
    gpu: ExecutorCurve

    def swapped(self) -> "CalibrationCurve":
        return CalibrationCurve(self.gpu, self.cpu)

    def to_dict(self) -> dict:
        return {"cpu": self.cpu.to_dict(), "gpu": self.gpu.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "CalibrationCurve":
        return cls(ExecutorCurve.from_dict(d["cpu"]), ExecutorCurve.from_dict(d["gpu"]))

    @classmethod
    def from_lines(cls, cpu_avg: Line, gpu_avg: Line, cpu_max: Line | None = None,
                   gpu_max: Line | None = None) -> "CalibrationCurve":
        empty = np.zeros(0)
        return cls(ExecutorCurve(empty, empty, empty.astype(np.int64), cpu_avg, cpu_max or cpu_avg),
                   ExecutorCurve(empty, empty, empty.astype(np.int64), gpu_avg, gpu_max or gpu_avg))


def calibrate(make_batch: Callable[[int, int], Sequence[int]],
              executors: Mapping[str, Callable[[np.ndarray], float]],
              psgs, buckets: int, repetitions: int) -> CalibrationCurve:
    """Measure every executor on ``buckets x repetitions`` generated batches.

    ``make_batch(bucket, rep)`` returns the seeds of one batch; each
    executor maps seeds to a latency in seconds. Executors run one after
    another on the same batch. Use at least 5 buckets and 20 repetitions
    for a usable curve.
    """
    missing = set(CLASSES) - set(executors)
    if missing:
        raise CalibrationError(f"missing executors: {sorted(missing)}")
    if buckets < 1 or repetitions < 1:
        raise CalibrationError("buckets and repetitions must be >= 1")
    table = getattr(psgs, "values", psgs)
    rows = {c: ([], [], []) for c in CLASSES}
    for b in range(buckets):
        for r in range(repetitions):
            seeds = np.asarray(make_batch(b, r), dtype=np.int64)
            x = float(np.sum(table[seeds]))
            for c in CLASSES:
                xs, ys, bs = rows[c]
                xs.append(x)
                ys.append(float(executors[c](seeds)))
                bs.append(b)
    return CalibrationCurve(*(ExecutorCurve.fit(*rows[c]) for c in CLASSES))


@dataclass(frozen=True)
class CrossPoints:
    cpu_preferred: float | None
    gpu_preferred: float | None
    latency_preferred: float | None
    throughput_preferred: float | None

    def get(self, name: str) -> float | None:
        return getattr(self, THRESHOLD_NAMES.get(name, name))

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in THRESHOLD_NAMES.values()}


def cross_points(curve: CalibrationCurve) -> CrossPoints:
    c, g = curve.cpu, curve.gpu
    return CrossPoints(
        cpu_preferred=intersect(c.maximal, g.average),
        gpu_preferred=intersect(c.average, g.maximal),
        latency_preferred=intersect(c.maximal, g.maximal),
        throughput_preferred=intersect(c.average, g.average),
    )


_POINT_LINES = {
    "cpu_preferred": ("maximal", "average"),
    "gpu_preferred": ("average", "maximal"),
    "latency_preferred": ("maximal", "maximal"),
    "throughput_preferred": ("average", "average"),
}


def select_threshold(curve: CalibrationCurve, name: str) -> float:
    """Routing threshold for a named cross point.

    When the two lines do not cross at non-negative PSGS, one executor
    dominates: ``inf`` sends every batch to the CPU, ``0`` every batch to
    the GPU. Exact ties go to the GPU.
    """
    key = THRESHOLD_NAMES.get(name, name)
    if key not in _POINT_LINES:
        raise ValueError(f"unknown threshold {name!r}; choose from {sorted(THRESHOLD_NAMES)}")
    x = getattr(cross_points(curve), key)
    cl, gl = (getattr(curve.cpu, _POINT_LINES[key][0]), getattr(curve.gpu, _POINT_LINES[key][1]))
    cpu_first = (cl.intercept, cl.slope) < (gl.intercept, gl.slope)
    if x is None or x == 0:
        return math.inf if cpu_first else 0.0
    return x if cl.intercept < gl.intercept else 0.0


def route_batch(seeds, psgs, threshold: float) -> str:
    """``cpu`` when the batch's summed PSGS is below ``threshold``, else ``gpu``."""
    if math.isnan(threshold) or threshold < 0:
        raise ValueError("threshold must be >= 0")
    table = getattr(psgs, "values", psgs)
    seeds = np.asarray(seeds, dtype=np.int64)
    if seeds.size and (seeds.min() < 0 or seeds.max() >= len(table)):
        bad = seeds[(seeds < 0) | (seeds >= len(table))][0]
        raise IndexError(f"invalid seed {int(bad)}")
    total = math.fsum(np.asarray(table)[seeds].tolist())
    return "cpu" if total < threshold else "gpu"


@dataclass(frozen=True)
class ProcessorParams:
    name: str
    base: float
    remote: float = 0.0
    async_time: float = math.inf
    eff: float = 1.0

    def __post_init__(self):
        if not self.base > 0:
            raise ValueError(f"processor {self.name}: base must be > 0")
        if self.async_time <= 0:
            raise ValueError(f"processor {self.name}: async_time must be > 0")

    @property
    def async_credit(self) -> float:
        return 0.0 if math.isinf(self.async_time) else self.async_time ** (-self.eff)


@dataclass(frozen=True, eq=False)
class MicroBatchAssignment:
    names: tuple[str, ...]
    sizes: np.ndarray
    predicted: np.ndarray
    makespan: float
    iterations: int

    def as_dict(self) -> dict[str, int]:
        return dict(zip(self.names, self.sizes.tolist()))


def task_times(sizes, procs: Sequence[ProcessorParams]) -> np.ndarray:
    """``T_task = base*A - async_time^-eff + sum_q remote_q*A_q`` per processor."""
    a = np.asarray(sizes, dtype=np.float64)
    base = np.array([p.base for p in procs])
    credit = np.array([p.async_credit for p in procs])
    remote = float(np.dot([p.remote for p in procs], a))
    return base * a - credit + remote


def makespan(sizes, procs) -> float:
    """Largest predicted time over processors that received work."""
    t = task_times(sizes, procs)
    active = np.asarray(sizes) > 0
    return float(t[active].max()) if active.any() else 0.0


def _lex_key(sizes, procs):
    t = task_times(sizes, procs)
    return tuple(sorted(t[np.asarray(sizes) > 0].tolist(), reverse=True))


def _project_simplex(v: np.ndarray, total: float) -> np.ndarray:
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - total
    k = np.arange(1, v.size + 1)
    rho = np.flatnonzero(u - css / k > 0)[-1]
    return np.maximum(v - css[rho] / (rho + 1), 0.0)


def _round_preserving(a: np.ndarray, total: int) -> np.ndarray:
    floor = np.floor(a).astype(np.int64)
    short = total - int(floor.sum())
    frac = a - floor
    for i in np.lexsort((np.arange(a.size), -frac))[:short]:
        floor[i] += 1
    return floor


def _local_search(sizes: np.ndarray, procs) -> np.ndarray:
    sizes = sizes.copy()
    best = _lex_key(sizes, procs)
    n = len(procs)
    while True:
        move = None
        for p in range(n):
            if sizes[p] == 0:
                continue
            for q in range(n):
                if q == p:
                    continue
                sizes[p] -= 1
                sizes[q] += 1
                key = _lex_key(sizes, procs)
                sizes[p] += 1
                sizes[q] -= 1
                if key < best and (move is None or key < move[0]):
                    move = (key, p, q)
        if move is None:
            return sizes
        best, p, q = move
        sizes[p] -= 1
        sizes[q] += 1


def optimize_microbatch(batch_size: int, procs: Sequence[ProcessorParams],
                        max_iter: int = 400, patience: int = 25) -> MicroBatchAssignment:
    """Split ``batch_size`` items across processors to minimise the makespan.

    Projected gradient descent on a log-sum-exp smoothing of the makespan
    over the simplex ``sum A = batch_size``, stopped once the rounded
    assignment has not changed for ``patience`` steps; the rounded point
    is then polished with single-item moves.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    procs = list(procs)
    if not procs:
        raise ValueError("need at least one processor")
    n = len(procs)
    names = tuple(p.name for p in procs)
    if n == 1:
        sizes = np.array([batch_size], dtype=np.int64)
        return MicroBatchAssignment(names, sizes, task_times(sizes, procs),
                                    makespan(sizes, procs), 0)

    base = np.array([p.base for p in procs])
    remote = np.array([p.remote for p in procs])
    credit = np.array([p.async_credit for p in procs])
    B = float(batch_size)
    a = np.full(n, B / n)
    scale = B * float(base.max())
    tau = 0.05 * scale
    step = 0.25 * B
    stable, last, it = 0, None, 0
    for it in range(1, max_iter + 1):
        z = (base * a - credit) / tau
        w = np.exp(z - z.max())
        w /= w.sum()
        grad = remote + w * base
        grad = grad - grad.mean()
        norm = np.abs(grad).max()
        if norm == 0:
            break
        a = _project_simplex(a - step * grad / norm, B)
        step *= 0.97
        tau = max(tau * 0.9, 1e-6 * scale)
        rounded = _round_preserving(a, batch_size)
        if last is not None and np.array_equal(rounded, last):
            stable += 1
            if stable >= patience:
                break
        else:
            stable = 0
        last = rounded

    starts = [_round_preserving(a, batch_size)]
    equal = np.full(n, batch_size // n, dtype=np.int64)
    equal[: batch_size % n] += 1
    starts.append(equal)
    fastest = np.zeros(n, dtype=np.int64)
    fastest[int(np.argmin(base + remote))] = batch_size
    starts.append(fastest)
    polished = [_local_search(s, procs) for s in starts[:1]]
    best = min(polished + starts[1:], key=lambda s: (makespan(s, procs), _lex_key(s, procs)))
    if makespan(best, procs) < makespan(polished[0], procs):
        best = _local_search(best, procs)
    return MicroBatchAssignment(names, best, task_times(best, procs), makespan(best, procs), it)


def curve_to_json(curve: CalibrationCurve, points: CrossPoints | None = None) -> str:
    doc = {"curve": curve.to_dict(),
           "cross_points": (points or cross_points(curve)).to_dict()}
    return json.dumps(doc, indent=1, sort_keys=True, allow_nan=False) + "\n"


def curve_from_json(text: str) -> tuple[CalibrationCurve, CrossPoints]:
    doc = json.loads(text)
    return CalibrationCurve.from_dict(doc["curve"]), CrossPoints(**doc["cross_points"])
