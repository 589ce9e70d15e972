"""Topology model, FAP-driven feature placement, lookup tables and read
planning with a link/TLB cost model.

Placement works in two levels. Across servers, each server has a "fast"
capacity (distinct GPU-resident features plus host memory). With
InfiniBand the hottest features are range-partitioned across servers in
chunks of that capacity; without it every server holds the same hottest
chunk. Colder features are range-partitioned over server disks, then any
free fast or disk slot is filled with the hottest feature that server
does not yet hold. Inside a server the hottest features go to GPUs:
partitioned across an NVLink group (balanced by summed FAP) and repeated
in every NUMA group, or replicated on every GPU when there is no NVLink.
The remainder is balanced across the NUMA hosts. A GPU or host left with
spare room after that takes replicas of the server's hottest features.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

TIERS = ("gpu", "host", "disk")
LINK_CLASSES = ("nvlink", "pcie", "upi", "infiniband", "ethernet", "disk")

# (latency seconds, bandwidth bytes/s)
DEFAULT_LINKS = {
    "nvlink": (1e-6, 300e9),
    "pcie": (2e-6, 16e9),
    "upi": (1e-6, 40e9),
    "infiniband": (3e-6, 12.5e9),
    "ethernet": (20e-6, 1.25e9),
    "disk": (100e-6, 0.5e9),
}


class PlacementError(ValueError):
    pass


class PlacementInfeasible(PlacementError):
    def __init__(self, features: int, capacity: int, detail: str):
        self.features = features
        self.capacity = capacity
        self.shortfall = features - capacity
        super().__init__(
            f"placement infeasible: {features} features but only {capacity} slots "
            f"({detail}); short by {self.shortfall}"
        )


@dataclass(frozen=True)
class Link:
    latency: float
    bandwidth: float


@dataclass(frozen=True)
class ClusterTopology:
    servers: int = 1
    numa_per_server: int = 1
    gpus_per_server: int = 1
    gpu_feature_capacity: int = 0
    host_feature_capacity: int = 0
    disk_feature_capacity: int = 0
    nvlink_within_numa: bool = False
    infiniband: bool = False
    links: dict = field(default_factory=dict)
    tlb_miss_penalty: float = 1e-6
    page_size: int = 8

    def __post_init__(self):
        merged = {k: Link(*v) for k, v in DEFAULT_LINKS.items()}
        for name, spec in dict(self.links).items():
            if name not in LINK_CLASSES:
                raise PlacementError(f"unknown link class {name!r}")
            if isinstance(spec, Link):
                merged[name] = spec
            elif isinstance(spec, dict):
                base = merged[name]
                merged[name] = Link(float(spec.get("latency", base.latency)),
                                    float(spec.get("bandwidth", base.bandwidth)))
            else:
                merged[name] = Link(float(spec[0]), float(spec[1]))
        object.__setattr__(self, "links", merged)
        if self.servers < 1 or self.numa_per_server < 1 or self.gpus_per_server < 0:
            raise PlacementError("need >= 1 server, >= 1 NUMA node and >= 0 GPUs")
        if self.gpus_per_server % self.numa_per_server:
            raise PlacementError("gpus_per_server must be divisible by numa_per_server")
        caps = (self.gpu_feature_capacity, self.host_feature_capacity, self.disk_feature_capacity)
        if min(caps) < 0:
            raise PlacementError("capacities must be >= 0")
        for name, link in merged.items():
            if not link.bandwidth > 0 or link.latency < 0:
                raise PlacementError(f"link {name}: bandwidth must be > 0 and latency >= 0")
        if self.page_size < 1:
            raise PlacementError("page_size must be >= 1")

    @property
    def gpus_per_numa(self) -> int:
        return self.gpus_per_server // self.numa_per_server

    @property
    def gpu_group_capacity(self) -> int:
        """Features one NUMA group's GPUs can hold, ``(G/C) * N_g``."""
        return self.gpus_per_numa * self.gpu_feature_capacity

    @property
    def gpu_distinct_capacity(self) -> int:
        """Distinct features resident on GPUs of one server."""
        if self.gpus_per_server == 0:
            return 0
        if self.nvlink_within_numa:
            return self.gpu_group_capacity
        return self.gpu_feature_capacity

    @property
    def fast_capacity(self) -> int:
        return self.gpu_distinct_capacity + self.host_feature_capacity

    @property
    def server_capacity(self) -> int:
        """Per-server feature capacity: fast tiers, plus disk without InfiniBand."""
        if self.infiniband:
            return self.fast_capacity
        return self.fast_capacity + self.disk_feature_capacity

    def host_capacity(self, numa: int) -> int:
        base, extra = divmod(self.host_feature_capacity, self.numa_per_server)
        return base + (1 if numa < extra else 0)

    # location ids: per server, GPUs then NUMA hosts then the disk
    @property
    def _block(self) -> int:
        return self.gpus_per_server + self.numa_per_server + 1

    @property
    def location_count(self) -> int:
        return self.servers * self._block

    def location_id(self, server: int, tier: str, device: int = 0) -> int:
        if not 0 <= server < self.servers:
            raise PlacementError(f"server {server} out of range")
        base = server * self._block
        if tier == "gpu":
            if not 0 <= device < self.gpus_per_server:
                raise PlacementError(f"gpu {device} out of range")
            return base + device
        if tier == "host":
            if not 0 <= device < self.numa_per_server:
                raise PlacementError(f"numa node {device} out of range")
            return base + self.gpus_per_server + device
        if tier == "disk":
            return base + self.gpus_per_server + self.numa_per_server
        raise PlacementError(f"unknown tier {tier!r}")

    def location(self, loc_id: int) -> "Location":
        if not 0 <= loc_id < self.location_count:
            raise PlacementError(f"unknown location id {loc_id}")
        server, r = divmod(int(loc_id), self._block)
        if r < self.gpus_per_server:
            return Location(server, "gpu", r)
        r -= self.gpus_per_server
        if r < self.numa_per_server:
            return Location(server, "host", r)
        return Location(server, "disk", 0)

    def capacity(self, loc_id: int) -> int:
        loc = self.location(loc_id)
        if loc.tier == "gpu":
            return self.gpu_feature_capacity
        if loc.tier == "host":
            return self.host_capacity(loc.device)
        return self.disk_feature_capacity

    def path(self, viewer: "Viewer", loc_id: int) -> tuple[str, ...]:
        """Link classes crossed when ``viewer`` reads from ``loc_id``."""
        loc = self.location(loc_id)
        gpn = max(self.gpus_per_numa, 1)
        if loc.server != viewer.server:
            net = "infiniband" if self.infiniband else "ethernet"
            return (net, "disk") if loc.tier == "disk" else (net, "pcie")
        if viewer.kind == "gpu":
            numa = viewer.index // gpn
            if loc.tier == "gpu":
                if loc.device == viewer.index:
                    return ()
                if loc.device // gpn == numa:
                    return ("nvlink",) if self.nvlink_within_numa else ("pcie",)
                return ("upi", "pcie")
            if loc.tier == "host":
                return ("pcie",) if loc.device == numa else ("upi", "pcie")
            return ("disk", "pcie")
        numa = viewer.index
        if loc.tier == "host":
            return () if loc.device == numa else ("upi",)
        if loc.tier == "gpu":
            return ("pcie",) if loc.device // gpn == numa else ("upi", "pcie")
        return ("disk",)

    def path_cost(self, path: Iterable[str], nbytes: float) -> float:
        path = tuple(path)
        if not path:
            return 0.0
        links = [self.links[p] for p in path]
        return sum(l.latency for l in links) + nbytes / min(l.bandwidth for l in links)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["links"] = {k: {"latency": v.latency, "bandwidth": v.bandwidth}
                      for k, v in sorted(self.links.items())}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ClusterTopology":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise PlacementError(f"unknown topology fields: {sorted(unknown)}")
        return cls(**d)


def load_topology(path) -> ClusterTopology:
    with open(path, encoding="utf-8") as fh:
        return ClusterTopology.from_dict(json.load(fh))


@dataclass(frozen=True, order=True)
class Location:
    server: int
    tier: str
    device: int = 0


@dataclass(frozen=True)
class Viewer:
    """The device reading features: ``kind`` is ``gpu`` (index = GPU) or
    ``cpu`` (index = NUMA node)."""

    server: int = 0
    kind: str = "gpu"
    index: int = 0

    def __post_init__(self):
        if self.kind not in ("gpu", "cpu"):
            raise PlacementError(f"viewer kind must be gpu or cpu, got {self.kind!r}")


@dataclass(frozen=True, eq=False)
class PlacementPlan:
    topology: ClusterTopology
    feature_count: int
    order: np.ndarray  # feature ids, hottest first
    contents: dict  # location id -> sorted feature ids

    def locations_of(self, feature: int) -> list[int]:
        return self._index()[feature]

    def _index(self) -> list[list[int]]:
        cache = self.__dict__.get("_loc_index")
        if cache is None:
            cache = [[] for _ in range(self.feature_count)]
            for loc in sorted(self.contents):
                for f in self.contents[loc].tolist():
                    cache[f].append(loc)
            object.__setattr__(self, "_loc_index", cache)
        return cache

    def features_at(self, loc_id: int) -> np.ndarray:
        return self.contents.get(loc_id, np.zeros(0, dtype=np.int64))

    def offset(self, feature: int, loc_id: int) -> int:
        ids = self.features_at(loc_id)
        k = int(np.searchsorted(ids, feature))
        if k >= ids.size or ids[k] != feature:
            raise PlacementError(f"feature {feature} not stored at location {loc_id}")
        return k

    def is_replicated(self, feature: int) -> bool:
        return len(self.locations_of(feature)) > 1

    def rows(self) -> list[dict]:
        topo = self.topology
        out = []
        for f in range(self.feature_count):
            locs = self.locations_of(f)
            for loc in locs:
                l = topo.location(loc)
                out.append({"feature_id": f, "location_id": loc, "server": l.server,
                            "tier": l.tier, "device": l.device,
                            "offset": self.offset(f, loc), "replica": len(locs) > 1})
        return out

    def to_json(self) -> str:
        doc = {
            "topology": self.topology.to_dict(),
            "feature_count": self.feature_count,
            "order": self.order.tolist(),
            "contents": {str(k): self.contents[k].tolist() for k in sorted(self.contents)},
        }
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "PlacementPlan":
        doc = json.loads(text)
        topo = ClusterTopology.from_dict(doc["topology"])
        contents = {int(k): np.asarray(v, dtype=np.int64) for k, v in doc["contents"].items()}
        return cls(topo, int(doc["feature_count"]), np.asarray(doc["order"], dtype=np.int64), contents)

    def to_csv(self) -> str:
        return _csv(self.rows(), ["feature_id", "location_id", "server", "tier", "device",
                                  "offset", "replica"])


def _csv(rows, columns) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def _lpt(features, fap, bins: int, cap: int | list[int]) -> list[list[int]]:
    """Greedy longest-processing-time packing with per-bin capacity; ties
    go to the lowest bin index."""
    caps = [cap] * bins if isinstance(cap, int) else list(cap)
    load = [0.0] * bins
    out = [[] for _ in range(bins)]
    for f in features:
        open_bins = [b for b in range(bins) if len(out[b]) < caps[b]]
        if not open_bins:
            raise PlacementError("bin capacity exhausted during balancing")
        b = min(open_bins, key=lambda i: (load[i], i))
        out[b].append(f)
        load[b] += float(fap[f])
    return out


def _fill(feats: list, pool: list, cap: int) -> list:
    """Top up a device with replicas of the hottest ``pool`` features it lacks."""
    have = set(feats)
    extra = [f for f in pool if f not in have][:max(cap - len(feats), 0)]
    return list(feats) + extra


def plan_placement(fap, topo: ClusterTopology) -> PlacementPlan:
    """Place every feature (one per graph node) on the cluster.

    ``fap`` is a FapTable or an array of access probabilities.
    """
    fap = np.asarray(getattr(fap, "values", fap), dtype=np.float64)
    n = fap.size
    if n == 0:
        raise PlacementError("no features to place")
    ids = np.arange(n)
    order = np.lexsort((ids, -fap))
    rank = np.empty(n, dtype=np.int64)
    rank[order] = ids

    S, H, Nd = topo.servers, topo.fast_capacity, topo.disk_feature_capacity
    if topo.infiniband:
        fast = [order[s * H:(s + 1) * H].tolist() for s in range(S)]
        rest = order[S * H:]
        capacity = S * (H + Nd)
        detail = f"{S} servers x ({H} fast + {Nd} disk)"
    else:
        fast = [order[:H].tolist() for _ in range(S)]
        rest = order[H:]
        capacity = H + S * Nd
        detail = f"{H} fast per server (replicated) + {S} x {Nd} disk"
    if n > capacity:
        raise PlacementInfeasible(n, capacity, detail)
    disk = [rest[s * Nd:(s + 1) * Nd].tolist() for s in range(S)]

    # fill free slots with the hottest features each server lacks
    for s in range(S):
        have = set(fast[s])
        free = H - len(fast[s])
        if free > 0:
            extra = [f for f in order.tolist() if f not in have][:free]
            fast[s] = sorted(fast[s] + extra, key=lambda f: rank[f])
            moved = set(extra)
            disk[s] = [f for f in disk[s] if f not in moved]
        have = set(fast[s]) | set(disk[s])
        free = Nd - len(disk[s])
        if free > 0:
            disk[s] += [f for f in order.tolist() if f not in have][:free]

    contents: dict[int, list[int]] = {}
    gd = topo.gpu_distinct_capacity
    gpn = topo.gpus_per_numa
    for s in range(S):
        gpu_part, host_part = fast[s][:gd], fast[s][gd:]
        if topo.gpus_per_server:
            if topo.nvlink_within_numa:
                group = _lpt(gpu_part, fap, gpn, topo.gpu_feature_capacity)
                per_gpu = [group[g % gpn] for g in range(topo.gpus_per_server)]
            else:
                per_gpu = [list(gpu_part) for _ in range(topo.gpus_per_server)]
            for g, feats in enumerate(per_gpu):
                feats = _fill(feats, fast[s], topo.gpu_feature_capacity)
                contents[topo.location_id(s, "gpu", g)] = feats
        host_caps = [topo.host_capacity(c) for c in range(topo.numa_per_server)]
        for c, feats in enumerate(_lpt(host_part, fap, topo.numa_per_server, host_caps)):
            contents[topo.location_id(s, "host", c)] = _fill(feats, fast[s], host_caps[c])
        contents[topo.location_id(s, "disk")] = disk[s]

    packed = {k: np.asarray(sorted(v), dtype=np.int64) for k, v in contents.items() if v}
    plan = PlacementPlan(topo, n, order.astype(np.int64), packed)
    _check_plan(plan)
    return plan


def _check_plan(plan: PlacementPlan) -> None:
    topo = plan.topology
    for loc, feats in plan.contents.items():
        if feats.size > topo.capacity(loc):
            raise PlacementError(f"location {loc} over capacity")
    missing = [f for f in range(plan.feature_count) if not plan.locations_of(f)]
    if missing:
        raise PlacementError(f"features without a location: {missing[:5]}")


@dataclass(frozen=True, eq=False)
class FeatureLookupTable:
    location: np.ndarray
    offset: np.ndarray
    viewer: Viewer

    def __len__(self) -> int:
        return int(self.location.size)

    def lookup(self, feature_ids) -> tuple[np.ndarray, np.ndarray]:
        ids = np.asarray(feature_ids, dtype=np.int64)
        return self.location[ids], self.offset[ids]

    def to_json(self) -> str:
        doc = {"viewer": asdict(self.viewer), "location": self.location.tolist(),
               "offset": self.offset.tolist()}
        return json.dumps(doc, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "FeatureLookupTable":
        doc = json.loads(text)
        return cls(np.asarray(doc["location"], dtype=np.int64),
                   np.asarray(doc["offset"], dtype=np.int64), Viewer(**doc["viewer"]))

    def to_csv(self) -> str:
        rows = [{"feature_id": i, "location_id": l, "offset": o}
                for i, (l, o) in enumerate(zip(self.location.tolist(), self.offset.tolist()))]
        return _csv(rows, ["feature_id", "location_id", "offset"])


def build_lookup_table(plan: PlacementPlan, topo: ClusterTopology | None = None, server: int = 0,
                       kind: str = "gpu", index: int = 0, feature_bytes: int = 512) -> FeatureLookupTable:
    """Resolve every feature to its cheapest replica as seen from one device.

    Replicas are ranked by the cost of reading one ``feature_bytes`` record
    over the connecting links; ties go to the lower location id.
    """
    topo = topo or plan.topology
    viewer = Viewer(server, kind, index)
    if kind == "gpu" and not 0 <= index < topo.gpus_per_server:
        raise PlacementError(f"gpu {index} out of range")
    if kind == "cpu" and not 0 <= index < topo.numa_per_server:
        raise PlacementError(f"numa node {index} out of range")
    cost = {loc: topo.path_cost(topo.path(viewer, loc), feature_bytes) for loc in plan.contents}
    loc_arr = np.empty(plan.feature_count, dtype=np.int64)
    off_arr = np.empty(plan.feature_count, dtype=np.int64)
    for f in range(plan.feature_count):
        best = min(plan.locations_of(f), key=lambda l: (cost[l], l))
        loc_arr[f] = best
        off_arr[f] = plan.offset(f, best)
    return FeatureLookupTable(loc_arr, off_arr, viewer)


def page_transitions(offsets, page_size: int) -> int:
    """Page changes along a read sequence; the first read counts as one."""
    pages = np.asarray(offsets, dtype=np.int64) // page_size
    if pages.size == 0:
        return 0
    return 1 + int(np.count_nonzero(pages[1:] != pages[:-1]))


@dataclass(frozen=True, eq=False)
class ReadPlan:
    locations: np.ndarray
    offsets: np.ndarray
    page_size: int
    transitions: dict  # location id -> page changes in planned order
    unsorted_transitions: dict  # location id -> page changes in request order
    viewer: Viewer

    def __len__(self) -> int:
        return int(self.locations.size)

    def reads_at(self, loc_id: int) -> np.ndarray:
        return self.offsets[self.locations == loc_id]


def plan_reads(table: FeatureLookupTable, feature_ids, page_size: int = 8) -> ReadPlan:
    """Group reads by location and sort each group by offset. Repeated
    feature ids are read once."""
    ids = np.asarray(feature_ids, dtype=np.int64).ravel()
    if ids.size and (ids.min() < 0 or ids.max() >= len(table)):
        raise PlacementError("feature id out of range for lookup table")
    _, first = np.unique(ids, return_index=True)
    ids = ids[np.sort(first)]
    loc, off = table.lookup(ids)
    unsorted = {}
    for l in np.unique(loc).tolist():
        unsorted[l] = page_transitions(off[loc == l], page_size)
    order = np.lexsort((off, loc))
    loc, off = loc[order], off[order]
    planned = {l: page_transitions(off[loc == l], page_size) for l in unsorted}
    return ReadPlan(loc, off, page_size, planned, unsorted, table.viewer)


@dataclass(frozen=True)
class FetchCost:
    per_location: dict
    total: float


def fetch_cost(reads: ReadPlan, topo: ClusterTopology, feature_bytes: int = 512,
               tlb_penalty: float | None = None) -> FetchCost:
    """Latency of gathering a read plan.

    Each location costs its path setup latency, plus bytes over the
    narrowest link, plus a TLB penalty per page transition; reads from
    different locations proceed in parallel, so the total is the slowest
    location.
    """
    tlb = topo.tlb_miss_penalty if tlb_penalty is None else tlb_penalty
    per = {}
    for loc, pages in reads.transitions.items():
        if not 0 <= loc < topo.location_count:
            raise PlacementError(f"unknown location id {loc}")
        path = topo.path(reads.viewer, loc)
        if not path:
            per[loc] = 0.0
            continue
        nbytes = int(np.count_nonzero(reads.locations == loc)) * feature_bytes
        per[loc] = topo.path_cost(path, nbytes) + tlb * pages
    return FetchCost(per, max(per.values(), default=0.0))

