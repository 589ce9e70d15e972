"""Discrete-event model of a hybrid CPU/GPU sampling and inference server.

Time is virtual. Requests arrive, are grouped into batches that close on
a deadline or a size limit, routed to a processor class by their summed
PSGS, and queued on one FIFO shared by every pipeline of that class.
A pipeline runs a batch through three stages: sampling and inference on
the processor's compute unit, feature fetch on its communication unit.
Pipelines on one processor therefore overlap one batch's fetch with
another batch's compute.
"""
from __future__ import annotations

import csv
import heapq
import io
import json
import math
from collections import deque
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .graph import TransitionView
from .metrics import PsgsTable, seed_distribution
from .placement import (ClusterTopology, FeatureLookupTable, PlacementPlan, build_lookup_table,
                        fetch_cost, plan_reads)
from .sampler import SamplingConfig, batch_sample, rng_stream
from .scheduler import CalibrationCurve, Line, calibrate, select_threshold

POLICIES = ("cpu-only", "gpu-only", "psgs-strict", "psgs-loose", "fixed-batch", "psgs")

# stream keys under the workload rng seed
_SEEDS, _ARRIVALS, _SAMPLING, _CALIBRATION = 0, 1, 2, 3


class SimConfigError(ValueError):
    pass


@dataclass(frozen=True)
class WorkloadSpec:
    rate: float
    arrival: str = "poisson"
    seed_distribution: object = "out-degree"
    total_requests: int = 1000
    rng_seed: int = 0
    deadline: float = 1e-3
    max_batch_size: int = 32
    seeds_per_request: int = 1

    def __post_init__(self):
        if not self.rate > 0:
            raise SimConfigError("rate must be > 0")
        if not self.deadline > 0:
            raise SimConfigError("deadline must be > 0")
        if self.arrival not in ("poisson", "deterministic"):
            raise SimConfigError(f"unknown arrival process {self.arrival!r}")
        if self.total_requests < 0 or self.max_batch_size < 1 or self.seeds_per_request < 1:
            raise SimConfigError("total_requests >= 0, max_batch_size >= 1, seeds_per_request >= 1")

    def arrival_times(self) -> np.ndarray:
        n = self.total_requests
        if self.arrival == "deterministic":
            return np.arange(1, n + 1, dtype=np.float64) / self.rate
        gaps = rng_stream(self.rng_seed, _ARRIVALS).standard_exponential(n)
        return np.cumsum(gaps) / self.rate

    def request_seeds(self, t: TransitionView) -> np.ndarray:
        p = seed_distribution(t, self.seed_distribution)
        rng = rng_stream(self.rng_seed, _SEEDS)
        draws = rng.choice(t.node_count, size=(self.total_requests, self.seeds_per_request), p=p)
        return draws.astype(np.int64)


@dataclass(frozen=True)
class DeviceModel:
    """Cost model of one processor. Stage times are ``setup + per_unit * units``."""
    name: str
    kind: str
    pipelines: int = 1
    sample_setup: float = 5e-6
    sample_per_instance: float = 80e-9
    fetch_setup: float = 0.0
    fetch_per_node: float = 0.0
    infer_setup: float = 0.0
    infer_per_node: float = 0.0
    server: int = 0
    index: int = 0

    def __post_init__(self):
        if self.kind not in ("cpu", "gpu"):
            raise SimConfigError(f"device {self.name}: kind must be cpu or gpu")
        if self.pipelines < 1:
            raise SimConfigError(f"device {self.name}: pipelines must be >= 1")
        coeffs = (self.sample_setup, self.sample_per_instance, self.fetch_setup,
                  self.fetch_per_node, self.infer_setup, self.infer_per_node)
        if any(c < 0 or not math.isfinite(c) for c in coeffs):
            raise SimConfigError(f"device {self.name}: cost coefficients must be finite and >= 0")

    @classmethod
    def cpu(cls, name="cpu0", **kw) -> "DeviceModel":
        return cls(name, "cpu", **kw)

    @classmethod
    def gpu(cls, name="gpu0", **kw) -> "DeviceModel":
        kw.setdefault("sample_setup", 300e-6)
        kw.setdefault("sample_per_instance", 2e-9)
        return cls(name, "gpu", **kw)

    def sample_time(self, instances: float) -> float:
        return self.sample_setup + self.sample_per_instance * instances

    def infer_time(self, instances: float) -> float:
        return self.infer_setup + self.infer_per_node * instances

    def fetch_model_time(self, nodes: float) -> float:
        return self.fetch_setup + self.fetch_per_node * nodes


@dataclass(frozen=True)
class Policy:
    name: str
    threshold: float = 0.0
    psgs_cap: float | None = None
    fixed_class: str | None = None
    use_deadline: bool = True

    def route(self, psgs_sum: float) -> str:
        if self.fixed_class:
            return self.fixed_class
        return "cpu" if psgs_sum < self.threshold else "gpu"


def _cap(cpu: Line, gpu: Line, threshold: float, budget: float) -> float:
    """Largest batch PSGS whose routed line stays within ``budget``."""
    def reach(line: Line) -> float:
        if line.slope <= 0:
            return math.inf if line.intercept <= budget else -math.inf
        return (budget - line.intercept) / line.slope

    g = reach(gpu)
    if g >= threshold:
        return g
    return max(min(reach(cpu), threshold), 0.0)


def make_policy(name: str, curve: CalibrationCurve | None = None, threshold=None,
                latency_bound: float | None = None, deadline: float | None = None) -> Policy:
    """Build a routing policy.

    ``psgs-strict`` routes on the crossing of the maximal lines and
    ``psgs-loose`` on the crossing of the average lines; with a
    ``latency_bound`` they also close a batch before its summed PSGS
    would push the chosen line past ``latency_bound - deadline``.
    ``psgs`` takes an explicit ``threshold``: a number or a cross-point
    name.
    """
    if name == "cpu-only":
        return Policy(name, fixed_class="cpu")
    if name == "gpu-only":
        return Policy(name, fixed_class="gpu")
    if name == "fixed-batch":
        return Policy(name, fixed_class="gpu", use_deadline=False)
    if name in ("psgs-strict", "psgs-loose", "psgs"):
        if name == "psgs" and threshold is not None and not isinstance(threshold, str):
            th = float(threshold)
            if math.isnan(th) or th < 0:
                raise SimConfigError("threshold must be >= 0")
            return Policy(name, threshold=th)
        if curve is None:
            raise SimConfigError(f"policy {name} needs a calibration curve")
        point = {"psgs-strict": "latency", "psgs-loose": "throughput"}.get(name, threshold)
        if point is None:
            raise SimConfigError("policy psgs needs a threshold")
        th = select_threshold(curve, point)
        cap = None
        if latency_bound is not None:
            if deadline is None:
                raise SimConfigError("latency_bound needs the batching deadline")
            which = "average" if point == "throughput" else "maximal"
            cap = _cap(getattr(curve.cpu, which), getattr(curve.gpu, which), th,
                       latency_bound - deadline)
        return Policy(name, threshold=th, psgs_cap=cap)
    raise SimConfigError(f"unknown policy {name!r}; choose from {', '.join(POLICIES)}")


@dataclass(eq=False)
class _Job:
    id: int
    requests: list
    close_time: float
    cls: str
    instances: float
    nodes: np.ndarray | None
    node_count: float
    device: int = -1
    dispatch_time: float = 0.0
    waited: float = 0.0
    durations: tuple = ()
    requested_at: float = 0.0


@dataclass(eq=False)
class _Unit:
    busy: bool = False
    waiting: deque = field(default_factory=deque)
    busy_time: float = 0.0


@dataclass(eq=False)
class _DeviceState:
    model: DeviceModel
    active: int = 0
    compute: _Unit = field(default_factory=_Unit)
    comm: _Unit = field(default_factory=_Unit)


@dataclass(frozen=True, eq=False)
class SimReport:
    policy: str
    rate: float
    arrival: np.ndarray
    completion: np.ndarray  # nan when unfinished at the horizon
    batch_wait: np.ndarray
    queueing: np.ndarray
    service: np.ndarray
    processor: list  # device name per request, "" when unfinished
    batches: int
    batches_by_class: dict
    busy: dict  # device -> {"compute": fraction, "comm": fraction}
    queue_series: dict  # class -> [(time, length), ...]
    generated: int
    end_time: float

    @property
    def done(self) -> np.ndarray:
        return np.isfinite(self.completion)

    @property
    def latency(self) -> np.ndarray:
        d = self.done
        return self.completion[d] - self.arrival[d]

    @property
    def completed(self) -> int:
        return int(self.done.sum())

    @property
    def in_flight(self) -> int:
        return self.generated - self.completed

    @property
    def throughput(self) -> float:
        return self.completed / self.end_time if self.end_time > 0 else 0.0

    @property
    def offered_rate(self) -> float:
        gen = self.arrival[: self.generated]
        return self.generated / float(gen[-1]) if self.generated else 0.0

    def percentile(self, q: float) -> float:
        lat = self.latency
        return float(np.percentile(lat, q)) if lat.size else 0.0

    @property
    def p50(self) -> float:
        return self.percentile(50)

    @property
    def p95(self) -> float:
        return self.percentile(95)

    @property
    def p99(self) -> float:
        return self.percentile(99)

    def cdf(self, points: int = 1000) -> tuple[np.ndarray, np.ndarray]:
        q = np.linspace(0.0, 1.0, points)
        lat = self.latency
        if not lat.size:
            return q, np.zeros(points)
        return q, np.quantile(lat, q)

    def fraction_within(self, bound: float) -> float:
        lat = self.latency
        return float(np.mean(lat <= bound)) if lat.size else 1.0

    def summary(self) -> dict:
        return {
            "policy": self.policy, "rate": self.rate, "generated": self.generated,
            "completed": self.completed, "in_flight": self.in_flight,
            "batches": self.batches, "batches_by_class": self.batches_by_class,
            "throughput": self.throughput, "offered_rate": self.offered_rate,
            "p50": self.p50, "p95": self.p95, "p99": self.p99,
            "mean": float(self.latency.mean()) if self.completed else 0.0,
            "busy": self.busy, "end_time": self.end_time,
        }

    def to_json(self) -> str:
        q, v = self.cdf()
        doc = self.summary()
        doc["cdf"] = {"quantile": q.tolist(), "latency": v.tolist()}
        doc["queue_length"] = {c: [list(p) for p in s] for c, s in self.queue_series.items()}
        return json.dumps(doc, sort_keys=True, indent=1) + "\n"

    def latencies_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["request_id", "arrival", "completion", "latency", "batch_wait",
                    "queueing", "service", "device"])
        for i in range(self.generated):
            if not math.isfinite(self.completion[i]):
                continue
            c, a = self.completion[i], self.arrival[i]
            w.writerow([i, repr(float(a)), repr(float(c)), repr(float(c - a)),
                        repr(float(self.batch_wait[i])), repr(float(self.queueing[i])),
                        repr(float(self.service[i])), self.processor[i]])
        return buf.getvalue()

    def cdf_csv(self) -> str:
        q, v = self.cdf()
        lines = ["quantile,latency"] + [f"{a!r},{b!r}" for a, b in zip(q.tolist(), v.tolist())]
        return "\n".join(lines) + "\n"


_DONE, _DEADLINE, _ARRIVE = 0, 1, 2


class _Simulator:
    def __init__(self, t, psgs, workload, devices, policy, cfg, plan, topo, feature_bytes,
                 instance_source, horizon):
        self.t, self.w, self.policy, self.cfg = t, workload, policy, cfg
        self.psgs = np.asarray(getattr(psgs, "values", psgs), dtype=np.float64)
        self.devices = [_DeviceState(d) for d in devices]
        self.plan, self.topo, self.feature_bytes = plan, topo, feature_bytes
        self.instance_source = instance_source
        self.horizon = math.inf if horizon is None else float(horizon)
        self.tables: dict = {}

        n = workload.total_requests
        self.arrival = workload.arrival_times()
        self.seeds = workload.request_seeds(t) if n else np.zeros((0, 1), dtype=np.int64)
        self.completion = np.full(n, np.nan)
        self.batch_wait = np.full(n, np.nan)
        self.queueing = np.full(n, np.nan)
        self.service = np.full(n, np.nan)
        self.processor = [""] * n
        self.queues = {"cpu": deque(), "gpu": deque()}
        self.queue_series = {"cpu": [(0.0, 0)], "gpu": [(0.0, 0)]}
        self.by_class = {"cpu": 0, "gpu": 0}
        self.events: list = []
        self.seq = 0
        self.open: list = []
        self.open_sum = 0.0
        self.batch_id = 0
        self.generated = 0
        self.now = 0.0

    def push(self, time, prio, payload):
        heapq.heappush(self.events, (time, prio, self.seq, payload))
        self.seq += 1

    # batching

    def arrive(self, req: int):
        self.generated += 1
        p = float(self.psgs[self.seeds[req]].sum())
        cap = self.policy.psgs_cap
        if self.open and cap is not None and self.open_sum + p > cap:
            self.close()
        if not self.open and self.policy.use_deadline:
            self.push(self.now + self.w.deadline, _DEADLINE, self.batch_id)
        self.open.append(req)
        self.open_sum += p
        if len(self.open) >= self.w.max_batch_size:
            self.close()
        elif req == self.w.total_requests - 1 and not self.policy.use_deadline:
            self.close()

    def close(self):
        reqs, self.open = self.open, []
        seeds = self.seeds[reqs].ravel()
        total = math.fsum(self.psgs[seeds].tolist())
        self.open_sum = 0.0
        cls = self.policy.route(total)
        if self.instance_source == "psgs":
            job = _Job(self.batch_id, reqs, self.now, cls, total, None, total)
        else:
            bs = batch_sample(self.t, seeds, self.cfg, rng_stream(self.w.rng_seed, _SAMPLING,
                                                                  self.batch_id).integers(2**62))
            job = _Job(self.batch_id, reqs, self.now, cls, float(bs.total_instances),
                       bs.unique_nodes, float(bs.unique_count))
        self.batch_id += 1
        self.by_class[cls] += 1
        for r in reqs:
            self.batch_wait[r] = self.now - self.arrival[r]
        self.queues[cls].append(job)
        self.note_queue(cls)
        self.dispatch(cls)

    def note_queue(self, cls):
        self.queue_series[cls].append((self.now, len(self.queues[cls])))

    # execution

    def dispatch(self, cls):
        q = self.queues[cls]
        while q:
            free = [(d.active, i) for i, d in enumerate(self.devices)
                    if d.model.kind == cls and d.active < d.model.pipelines]
            if not free:
                break
            _, i = min(free)
            job = q.popleft()
            self.note_queue(cls)
            dev = self.devices[i]
            dev.active += 1
            job.device = i
            job.dispatch_time = self.now
            job.durations = (dev.model.sample_time(job.instances), self.fetch_time(job, dev.model),
                             dev.model.infer_time(job.instances))
            self.request(job, 0)

    def fetch_time(self, job: _Job, model: DeviceModel) -> float:
        if self.plan is None:
            return model.fetch_model_time(job.node_count)
        key = (model.server, model.kind, model.index)
        if key not in self.tables:
            self.tables[key] = build_lookup_table(self.plan, self.topo, model.server, model.kind,
                                                  model.index, self.feature_bytes)
        reads = plan_reads(self.tables[key], job.nodes, self.topo.page_size)
        return model.fetch_setup + fetch_cost(reads, self.topo, self.feature_bytes).total

    def unit(self, job, stage) -> _Unit:
        dev = self.devices[job.device]
        return dev.comm if stage == 1 else dev.compute

    def request(self, job, stage):
        u = self.unit(job, stage)
        job.requested_at = self.now
        if u.busy:
            u.waiting.append((job, stage))
        else:
            self.start(job, stage, u)

    def start(self, job, stage, u: _Unit):
        u.busy = True
        job.waited += self.now - job.requested_at
        d = job.durations[stage]
        u.busy_time += min(d, max(self.horizon - self.now, 0.0))
        self.push(self.now + d, _DONE, (job, stage))

    def finish(self, job, stage):
        u = self.unit(job, stage)
        u.busy = False
        if u.waiting:
            self.start(*u.waiting.popleft(), u)
        if stage < 2:
            self.request(job, stage + 1)
            return
        dev = self.devices[job.device]
        dev.active -= 1
        service = sum(job.durations)
        queued = job.dispatch_time - job.close_time + job.waited
        for r in job.requests:
            self.completion[r] = self.now
            self.queueing[r] = queued
            self.service[r] = service
            self.processor[r] = dev.model.name
        self.dispatch(job.cls)

    def run(self) -> tuple:
        for i, a in enumerate(self.arrival.tolist()):
            self.push(a, _ARRIVE, i)
        last = 0.0
        while self.events:
            time, prio, _, payload = self.events[0]
            if time > self.horizon:
                break
            heapq.heappop(self.events)
            self.now = time
            if prio == _ARRIVE:
                self.arrive(payload)
            elif prio == _DEADLINE:
                if self.open and payload == self.batch_id:
                    self.close()
            else:
                self.finish(*payload)
                last = time
        end = self.horizon if math.isfinite(self.horizon) else last
        return end


def check_consistency(t: TransitionView, psgs, plan: PlacementPlan | None = None,
                      topo: ClusterTopology | None = None) -> None:
    n = t.node_count
    m = len(getattr(psgs, "values", psgs))
    if m != n:
        raise SimConfigError(f"PSGS table has {m} entries, graph has {n} nodes")
    if plan is not None:
        if plan.feature_count != n:
            raise SimConfigError(f"plan covers {plan.feature_count} features, graph has {n} nodes")
        if topo is not None and topo != plan.topology:
            raise SimConfigError("topology differs from the plan's topology")


def run_sim(t: TransitionView, psgs: PsgsTable, workload: WorkloadSpec,
            devices: Sequence[DeviceModel], policy: Policy,
            cfg: SamplingConfig | None = None, plan: PlacementPlan | None = None,
            topo: ClusterTopology | None = None, feature_bytes: int = 512,
            instance_source: str = "sampled", horizon: float | None = None) -> SimReport:
    """Simulate ``workload`` on ``devices`` under ``policy``.

    ``instance_source="sampled"`` runs the sampler on every batch to get
    instance and unique-node counts; ``"psgs"`` uses the batch's summed
    PSGS for both, which makes every stage an exact linear function of
    PSGS. Fetch time comes from the placement plan's read cost when a plan
    is given and from the device's fetch coefficients otherwise.
    """
    check_consistency(t, psgs, plan, topo)
    if instance_source not in ("sampled", "psgs"):
        raise SimConfigError(f"unknown instance source {instance_source!r}")
    if instance_source == "psgs" and plan is not None:
        raise SimConfigError("a placement plan needs sampled node sets")
    if instance_source == "sampled" and cfg is None:
        cfg = getattr(psgs, "config", None)
        if cfg is None:
            raise SimConfigError("sampled mode needs a sampling config")
    names = [d.name for d in devices]
    if len(set(names)) != len(names):
        raise SimConfigError("device names must be unique")
    if policy.fixed_class:
        needed = {policy.fixed_class}
    elif policy.threshold == 0.0:
        needed = {"gpu"}
    elif math.isinf(policy.threshold):
        needed = {"cpu"}
    else:
        needed = {"cpu", "gpu"}
    have = {d.kind for d in devices}
    if not needed <= have:
        raise SimConfigError(f"policy {policy.name} needs devices of kind {sorted(needed - have)}")
    topo = topo or (plan.topology if plan is not None else None)

    sim = _Simulator(t, psgs, workload, list(devices), policy, cfg, plan, topo, feature_bytes,
                     instance_source, horizon)
    end = sim.run()
    busy = {}
    for d in sim.devices:
        busy[d.model.name] = {
            "compute": d.compute.busy_time / end if end > 0 else 0.0,
            "comm": d.comm.busy_time / end if end > 0 else 0.0,
        }
    return SimReport(policy.name, workload.rate, sim.arrival, sim.completion, sim.batch_wait,
                     sim.queueing, sim.service, sim.processor, sim.batch_id, dict(sim.by_class),
                     busy, sim.queue_series, sim.generated, end)


def service_time(t, psgs, seeds, device: DeviceModel, cfg=None, instance_source="psgs",
                 rng_seed: int = 0, plan=None, topo=None, feature_bytes=512) -> float:
    """Isolated end-to-end time of one batch on one device, with no queueing."""
    seeds = np.asarray(seeds, dtype=np.int64)
    values = np.asarray(getattr(psgs, "values", psgs))
    if instance_source == "psgs":
        total = math.fsum(values[seeds].tolist())
        return device.sample_time(total) + device.fetch_model_time(total) + device.infer_time(total)
    cfg = cfg or psgs.config
    bs = batch_sample(t, seeds, cfg, rng_seed)
    if plan is None:
        fetch = device.fetch_model_time(bs.unique_count)
    else:
        topo = topo or plan.topology
        table = build_lookup_table(plan, topo, device.server, device.kind, device.index,
                                   feature_bytes)
        reads = plan_reads(table, bs.unique_nodes, topo.page_size)
        fetch = device.fetch_setup + fetch_cost(reads, topo, feature_bytes).total
    return device.sample_time(bs.total_instances) + fetch + device.infer_time(bs.total_instances)


def calibrate_devices(t, psgs, devices: Sequence[DeviceModel], batch_sizes: Sequence[int],
                      repetitions: int, seed_dist="out-degree", rng_seed: int = 0,
                      instance_source="psgs", cfg=None, plan=None, topo=None,
                      feature_bytes=512) -> CalibrationCurve:
    """Calibrate on the first device of each class, one bucket per batch size."""
    by_kind = {}
    for d in devices:
        by_kind.setdefault(d.kind, d)
    p = seed_distribution(t, seed_dist)
    sizes = list(batch_sizes)

    def make_batch(b, r):
        rng = rng_stream(rng_seed, _CALIBRATION, b, r)
        return rng.choice(t.node_count, size=sizes[b], p=p)

    def executor(dev):
        def run(seeds):
            key = int(np.sum(seeds)) % (2**31)
            return service_time(t, psgs, seeds, dev, cfg, instance_source, rng_seed + key,
                                plan, topo, feature_bytes)
        return run

    missing = {"cpu", "gpu"} - set(by_kind)
    if missing:
        raise SimConfigError(f"calibration needs a device of kind {sorted(missing)}")
    return calibrate(make_batch, {k: executor(d) for k, d in by_kind.items()}, psgs,
                     len(sizes), repetitions)


@dataclass(frozen=True, eq=False)
class SweepCell:
    policy: str
    rate: float
    report: SimReport


def _cell(args):
    t, psgs, workload, devices, policy, kw = args
    return run_sim(t, psgs, workload, devices, policy, **kw)


def sweep(t, psgs, workload: WorkloadSpec, devices, policies: Sequence[Policy],
          rates: Sequence[float], workers: int = 1, **kw) -> list[SweepCell]:
    """Every policy at every rate with the workload's rng seed held fixed."""
    jobs = [(t, psgs, replace(workload, rate=float(r)), list(devices), p, kw)
            for p in policies for r in rates]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            reports = list(ex.map(_cell, jobs))
    else:
        reports = [_cell(j) for j in jobs]
    return [SweepCell(j[4].name, j[2].rate, r) for j, r in zip(jobs, reports)]


def capacity(t, psgs, workload: WorkloadSpec, devices, policy: Policy, tolerance: float = 0.97,
             steps: int = 12, **kw) -> float:
    """Highest offered rate the policy sustains, by bisection.

    A rate is sustained when achieved throughput is at least ``tolerance``
    times the realised offered rate. The burst throughput is the upper
    starting bracket.
    """
    hi = saturation_throughput(t, psgs, workload, devices, policy, **kw)
    lo = 0.0
    for _ in range(steps):
        mid = 0.5 * (lo + hi)
        r = run_sim(t, psgs, replace(workload, rate=mid), devices, policy, **kw)
        if r.throughput >= tolerance * r.offered_rate:
            lo = mid
        else:
            hi = mid
    return lo


def saturation_throughput(t, psgs, workload: WorkloadSpec, devices, policy: Policy,
                          **kw) -> float:
    """Throughput when every request arrives almost at once."""
    burst = replace(workload, rate=1e12, arrival="deterministic")
    return run_sim(t, psgs, burst, devices, policy, **kw).throughput
