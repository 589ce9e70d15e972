"""Command line: ``gnnserve {metrics,plan,calibrate,simulate}``.

Every command reads one JSON run config (``--config``); the common flags
override its fields. All outputs go to ``--out`` and are deterministic.

Exit codes: 0 ok, 2 bad input, 3 infeasible placement, 4 calibration
failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .graph import GraphError, load_graph, transition_view
from .metrics import (MetricsError, SamplingConfig, compute_fap, compute_psgs, save_table,
                      seed_distribution, write_table_csv)
from .placement import (ClusterTopology, PlacementError, PlacementInfeasible, build_lookup_table,
                        load_topology, plan_placement)
from .scheduler import CalibrationError, cross_points, curve_from_json, curve_to_json
from .sim import (DeviceModel, SimConfigError, WorkloadSpec, calibrate_devices, make_policy,
                  sweep)

EXIT_OK, EXIT_INPUT, EXIT_INFEASIBLE, EXIT_CALIBRATION = 0, 2, 3, 4

DEFAULT_DEVICES = [
    {"name": "cpu0", "kind": "cpu"},
    {"name": "gpu0", "kind": "gpu"},
]


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    graph: str | None = None
    graph_format: str = "edge-list-text"
    remap: bool = False
    topology: str | None = None
    out: str = "out"
    seed: int = 0
    fanouts: list = field(default_factory=lambda: [10, 5])
    hops: int | None = None  # FAP horizon, defaults to len(fanouts)
    fap_seed_distribution: object = "uniform"
    seed_distribution: object = "out-degree"  # request seeds
    top_k: int = 10
    feature_bytes: int = 512
    viewer: dict = field(default_factory=lambda: {"server": 0, "kind": "gpu", "index": 0})
    calibration: dict = field(default_factory=dict)
    curve: str | None = None
    devices: list = field(default_factory=lambda: [dict(d) for d in DEFAULT_DEVICES])
    workload: dict = field(default_factory=dict)
    policies: list = field(default_factory=lambda: ["psgs-loose"])
    rates: list = field(default_factory=list)
    threshold: object = None
    latency_bound: float | None = None
    instance_source: str = "sampled"
    use_plan: bool = False
    workers: int = 1

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)

    def sampling(self) -> SamplingConfig:
        return SamplingConfig(tuple(self.fanouts))


def load_config(args) -> RunConfig:
    doc = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        doc = json.loads(path.read_text(encoding="utf-8"))
    cfg = RunConfig.from_dict(doc)
    for name in ("graph", "topology", "out", "seed", "threshold", "curve"):
        v = getattr(args, name, None)
        if v is not None:
            setattr(cfg, name, v)
    if getattr(args, "fanouts", None):
        cfg.fanouts = list(SamplingConfig.parse(args.fanouts).fanouts)
    if getattr(args, "policy", None):
        cfg.policies = [p for p in args.policy.split(",") if p]
    if getattr(args, "rate", None):
        cfg.rates = [float(r) for r in args.rate.split(",") if r]
    if isinstance(cfg.threshold, str):
        try:
            cfg.threshold = float(cfg.threshold)
        except ValueError:
            pass
    if cfg.graph is None:
        raise ConfigError("no graph given (config field 'graph' or --graph)")
    return cfg


def _write(out: Path, name: str, text: str) -> Path:
    p = out / name
    p.write_text(text, encoding="utf-8")
    return p


def _dump(doc) -> str:
    return json.dumps(doc, indent=1, sort_keys=True, allow_nan=False) + "\n"


def _load(cfg: RunConfig):
    g = load_graph(cfg.graph, format=cfg.graph_format, remap=cfg.remap)
    return g, transition_view(g)


def _outdir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _top(values: np.ndarray, k: int) -> list:
    order = np.lexsort((np.arange(values.size), -values))[:k]
    return [[int(i), float(values[i])] for i in order]


def _stats(values: np.ndarray) -> dict:
    if not values.size:
        return {"min": 0.0, "max": 0.0, "mean": 0.0}
    return {"min": float(values.min()), "max": float(values.max()), "mean": float(values.mean())}


def cmd_metrics(cfg: RunConfig) -> int:
    g, t = _load(cfg)
    sc = cfg.sampling()
    hops = sc.hops if cfg.hops is None else int(cfg.hops)
    psgs = compute_psgs(t, sc)
    fap = compute_fap(t, hops, seed_distribution(g, cfg.fap_seed_distribution))
    out = _outdir(cfg)
    save_table(out / "psgs.bin", psgs.values, sc.hops)
    save_table(out / "fap.bin", fap.values, hops)
    write_table_csv(out / "psgs.csv", psgs.values)
    write_table_csv(out / "fap.csv", fap.values)
    summary = {
        "nodes": g.node_count, "edges": g.edge_count, "fanouts": list(sc.fanouts), "hops": hops,
        "psgs": {**_stats(psgs.values), "top": _top(psgs.values, cfg.top_k)},
        "fap": {**_stats(fap.values), "top": _top(fap.values, cfg.top_k)},
    }
    _write(out, "metrics_summary.json", _dump(summary))
    print(f"metrics: {g.node_count} nodes, outputs in {out}")
    return EXIT_OK


def _topology(cfg: RunConfig) -> ClusterTopology:
    if cfg.topology is None:
        raise ConfigError("no topology given (config field 'topology' or --topology)")
    if not Path(cfg.topology).is_file():
        raise FileNotFoundError(f"topology file not found: {cfg.topology}")
    return load_topology(cfg.topology)


def _plan(cfg: RunConfig, g, t, topo):
    hops = cfg.sampling().hops if cfg.hops is None else int(cfg.hops)
    fap = compute_fap(t, hops, seed_distribution(g, cfg.fap_seed_distribution))
    return plan_placement(fap.values, topo)


def cmd_plan(cfg: RunConfig) -> int:
    g, t = _load(cfg)
    topo = _topology(cfg)
    plan = _plan(cfg, g, t, topo)
    v = cfg.viewer
    table = build_lookup_table(plan, topo, int(v.get("server", 0)), v.get("kind", "gpu"),
                               int(v.get("index", 0)), cfg.feature_bytes)
    out = _outdir(cfg)
    _write(out, "plan.json", plan.to_json())
    _write(out, "plan.csv", plan.to_csv())
    _write(out, "lookup.json", table.to_json())
    _write(out, "lookup.csv", table.to_csv())
    print(f"plan: {plan.feature_count} features over {topo.location_count} locations, "
          f"outputs in {out}")
    return EXIT_OK


def _devices(cfg: RunConfig) -> list[DeviceModel]:
    devs = []
    for d in cfg.devices:
        d = dict(d)
        kind = d.pop("kind", None)
        name = d.pop("name", None)
        if kind not in ("cpu", "gpu") or not name:
            raise ConfigError(f"device entries need a name and kind cpu|gpu: {d}")
        devs.append(getattr(DeviceModel, kind)(name, **d))
    return devs


def _calibrate(cfg: RunConfig, g, t, psgs, devices, plan=None, topo=None):
    c = {"batch_sizes": [1, 2, 4, 8, 16], "repetitions": 20, "instance_source": "psgs"}
    c.update(cfg.calibration)
    return calibrate_devices(t, psgs, devices, c["batch_sizes"], int(c["repetitions"]),
                             cfg.seed_distribution, cfg.seed, c["instance_source"],
                             cfg.sampling(), plan if c["instance_source"] == "sampled" else None,
                             topo, cfg.feature_bytes)


def cmd_calibrate(cfg: RunConfig) -> int:
    g, t = _load(cfg)
    psgs = compute_psgs(t, cfg.sampling())
    curve = _calibrate(cfg, g, t, psgs, _devices(cfg))
    out = _outdir(cfg)
    _write(out, "calibration.json", curve_to_json(curve))
    pts = cross_points(curve)
    print("calibration: " + ", ".join(f"{k}={v}" for k, v in pts.to_dict().items()))
    return EXIT_OK


def _fmt_rate(r: float) -> str:
    return f"{r:g}".replace("+", "")


def cmd_simulate(cfg: RunConfig) -> int:
    g, t = _load(cfg)
    sc = cfg.sampling()
    psgs = compute_psgs(t, sc)
    devices = _devices(cfg)
    wl = dict(cfg.workload)
    wl.setdefault("rng_seed", cfg.seed)
    wl.setdefault("seed_distribution", cfg.seed_distribution)
    wl.setdefault("rate", cfg.rates[0] if cfg.rates else 1000.0)
    workload = WorkloadSpec(**wl)
    rates = cfg.rates or [workload.rate]

    plan = topo = None
    if cfg.use_plan:
        topo = _topology(cfg)
        plan = _plan(cfg, g, t, topo)
    curve = None
    if any(p.startswith("psgs") for p in cfg.policies):
        if cfg.curve:
            if not Path(cfg.curve).is_file():
                raise FileNotFoundError(f"calibration file not found: {cfg.curve}")
            curve, _ = curve_from_json(Path(cfg.curve).read_text(encoding="utf-8"))
        elif not (cfg.threshold is not None and not isinstance(cfg.threshold, str)
                  and cfg.policies == ["psgs"]):
            curve = _calibrate(cfg, g, t, psgs, devices, plan, topo)
    policies = [make_policy(p, curve, cfg.threshold if p == "psgs" else None,
                            cfg.latency_bound, workload.deadline) for p in cfg.policies]
    cells = sweep(t, psgs, workload, devices, policies, rates, workers=cfg.workers, cfg=sc,
                  plan=plan, topo=topo, feature_bytes=cfg.feature_bytes,
                  instance_source=cfg.instance_source)
    out = _outdir(cfg)
    rows = []
    for c in cells:
        stem = f"sim_{c.policy}_{_fmt_rate(c.rate)}"
        _write(out, stem + ".json", c.report.to_json())
        _write(out, stem + "_latency.csv", c.report.latencies_csv())
        _write(out, stem + "_cdf.csv", c.report.cdf_csv())
        s = c.report.summary()
        rows.append({k: s[k] for k in ("policy", "rate", "completed", "throughput", "p50",
                                       "p95", "p99")})
        print(f"{c.policy:12s} rate={c.rate:g} p99={s['p99']:.6g}s throughput={s['throughput']:.6g}/s")
    _write(out, "sweep_summary.json", _dump({"cells": rows}))
    return EXIT_OK


COMMANDS = {"metrics": cmd_metrics, "plan": cmd_plan, "calibrate": cmd_calibrate,
            "simulate": cmd_simulate}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gnnserve", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--graph", help="graph file")
        p.add_argument("--topology", help="topology JSON")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help="rng seed")
        p.add_argument("--fanouts", help="comma separated fanouts, e.g. 10,5")
        p.add_argument("--policy", help="comma separated policies")
        p.add_argument("--threshold", help="PSGS threshold: number or cross-point name")
        p.add_argument("--rate", help="comma separated offered rates (req/s)")
        p.add_argument("--curve", help="calibration JSON to reuse")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args)
        return COMMANDS[args.command](cfg)
    except PlacementInfeasible as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except CalibrationError as e:
        print(f"calibration failed: {e}", file=sys.stderr)
        return EXIT_CALIBRATION
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except (GraphError, MetricsError, PlacementError, SimConfigError, ConfigError, ValueError,
            TypeError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
