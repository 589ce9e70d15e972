import numpy as np
import pytest

from gnnserve.fixtures import chain_graph, random_graph
from gnnserve.graph import transition_view
from gnnserve.metrics import SamplingConfig, compute_fap, compute_psgs, seed_distribution
from gnnserve.placement import ClusterTopology, plan_placement
from gnnserve.sim import (DeviceModel, SimConfigError, WorkloadSpec, calibrate_devices, capacity,
                          make_policy, run_sim, sweep)

CFG = SamplingConfig((3, 2))


@pytest.fixture(scope="module")
def small():
    g = random_graph(np.random.default_rng(21), 80, 400)
    t = transition_view(g)
    return t, compute_psgs(t, CFG)


def stage_device(**kw):
    base = dict(sample_setup=1e-3, sample_per_instance=0.0, fetch_setup=2e-3, infer_setup=3e-3)
    base.update(kw)
    return DeviceModel.cpu("cpu0", **base)


def test_zero_requests(small):
    t, q = small
    r = run_sim(t, q, WorkloadSpec(100.0, total_requests=0), [DeviceModel.cpu()],
                make_policy("cpu-only"))
    assert r.completed == 0 and r.throughput == 0.0 and r.p99 == 0.0


def test_hand_computed_latency():
    t = transition_view(chain_graph(3))
    q = compute_psgs(t, SamplingConfig((1,)))
    w = WorkloadSpec(1.0, arrival="deterministic", total_requests=1, max_batch_size=1)
    r = run_sim(t, q, w, [stage_device()], make_policy("cpu-only"), instance_source="psgs")
    assert r.arrival[0] == 1.0
    assert abs(r.latency[0] - 6e-3) <= 1e-12
    assert r.batch_wait[0] == 0.0 and r.queueing[0] == 0.0


def test_two_pipelines_overlap_fetch_with_compute():
    t = transition_view(chain_graph(3))
    q = compute_psgs(t, SamplingConfig((1,)))
    w = WorkloadSpec(1e9, arrival="deterministic", total_requests=2, max_batch_size=1)
    r = run_sim(t, q, w, [stage_device(pipelines=2)], make_policy("cpu-only"),
                instance_source="psgs")
    done = np.sort(r.completion)
    assert abs(done[0] - 6e-3) <= 1e-8 and abs(done[1] - 9e-3) <= 1e-8
    serial = run_sim(t, q, w, [stage_device(pipelines=1)], make_policy("cpu-only"),
                     instance_source="psgs")
    assert abs(np.max(serial.completion) - 12e-3) <= 1e-8


def test_deterministic_reruns(small):
    t, q = small
    w = WorkloadSpec(2000.0, total_requests=300, rng_seed=5)
    devs = [DeviceModel.cpu(), DeviceModel.gpu()]
    pol = make_policy("psgs", threshold=40.0)
    a = run_sim(t, q, w, devs, pol)
    b = run_sim(t, q, w, devs, pol)
    assert a.to_json() == b.to_json() and a.latencies_csv() == b.latencies_csv()


def test_conservation_with_horizon(small):
    t, q = small
    w = WorkloadSpec(50000.0, total_requests=500, max_batch_size=4)
    r = run_sim(t, q, w, [DeviceModel.cpu()], make_policy("cpu-only"), horizon=2e-3)
    assert r.generated <= 500 and r.completed + r.in_flight == r.generated
    assert r.in_flight > 0
    assert np.all(r.completion[r.done] <= 2e-3)
    assert r.end_time == 2e-3


def test_latency_decomposition(small):
    t, q = small
    w = WorkloadSpec(20000.0, total_requests=400, max_batch_size=8, deadline=2e-4)
    for pol in (make_policy("psgs", threshold=30.0), make_policy("fixed-batch")):
        r = run_sim(t, q, w, [DeviceModel.cpu(), DeviceModel.gpu(pipelines=2)], pol)
        d = r.done
        parts = r.batch_wait[d] + r.queueing[d] + r.service[d]
        assert np.allclose(r.latency, parts, rtol=0, atol=1e-9)
        assert np.all(r.batch_wait[d] >= 0) and np.all(r.queueing[d] >= -1e-15)


def test_fixed_batch_ignores_deadline(small):
    t, q = small
    w = WorkloadSpec(10.0, arrival="deterministic", total_requests=10, max_batch_size=4)
    r = run_sim(t, q, w, [DeviceModel.gpu()], make_policy("fixed-batch"))
    assert r.batches == 3 and r.completed == 10
    assert r.batch_wait[0] == pytest.approx(0.3)


def test_latency_monotone_in_rate(small):
    t, q = small
    devs = [DeviceModel.cpu(sample_per_instance=20e-6)]
    prev = None
    for rate in (500.0, 1000.0, 2000.0, 4000.0, 8000.0):
        w = WorkloadSpec(rate, total_requests=400, max_batch_size=1, rng_seed=3)
        lat = run_sim(t, q, w, devs, make_policy("cpu-only"), instance_source="psgs").latency
        if prev is not None:
            assert np.all(lat >= prev - 1e-12)
        prev = lat


def test_out_degree_seed_frequencies(small):
    t, _ = small
    w = WorkloadSpec(1.0, total_requests=100_000, rng_seed=9)
    seeds = w.request_seeds(t).ravel()
    p = seed_distribution(t, "out-degree")
    freq = np.bincount(seeds, minlength=t.node_count) / seeds.size
    sigma = np.sqrt(p * (1 - p) / seeds.size)
    assert np.all(np.abs(freq - p) <= 3 * sigma + 1e-12)


def test_low_rate_meets_deadline_plus_service(small):
    t, q = small
    dev = DeviceModel.gpu()
    w = WorkloadSpec(50.0, total_requests=200, deadline=1e-3, max_batch_size=32)
    r = run_sim(t, q, w, [dev], make_policy("gpu-only"), instance_source="psgs")
    worst = w.deadline + dev.sample_time(w.max_batch_size * float(q.values.max()))
    assert r.fraction_within(worst) == 1.0


def test_sweep_workers_match_serial(small):
    t, q = small
    w = WorkloadSpec(1000.0, total_requests=150)
    pols = [make_policy("cpu-only"), make_policy("gpu-only")]
    devs = [DeviceModel.cpu(), DeviceModel.gpu()]
    a = sweep(t, q, w, devs, pols, [1000.0, 4000.0])
    b = sweep(t, q, w, devs, pols, [1000.0, 4000.0], workers=2)
    assert [c.report.to_json() for c in a] == [c.report.to_json() for c in b]
    assert [(c.policy, c.rate) for c in a] == [("cpu-only", 1000.0), ("cpu-only", 4000.0),
                                               ("gpu-only", 1000.0), ("gpu-only", 4000.0)]


def test_placement_plan_drives_fetch(small):
    t, q = small
    topo = ClusterTopology(numa_per_server=1, gpus_per_server=1, gpu_feature_capacity=10,
                           host_feature_capacity=80)
    plan = plan_placement(compute_fap(t, 2), topo)
    w = WorkloadSpec(1000.0, total_requests=100)
    dev = DeviceModel.gpu()
    r = run_sim(t, q, w, [dev], make_policy("gpu-only"), plan=plan)
    bare = run_sim(t, q, w, [dev], make_policy("gpu-only"))
    assert r.completed == 100 and np.all(r.service > bare.service)


def test_configuration_errors(small):
    t, q = small
    w = WorkloadSpec(100.0, total_requests=10)
    with pytest.raises(SimConfigError):
        run_sim(t, q.values[:-1], w, [DeviceModel.cpu()], make_policy("cpu-only"), cfg=CFG)
    with pytest.raises(SimConfigError):
        run_sim(t, q, w, [DeviceModel.cpu()], make_policy("gpu-only"))
    with pytest.raises(SimConfigError):
        run_sim(t, q, w, [DeviceModel.cpu(), DeviceModel.cpu()], make_policy("cpu-only"))
    with pytest.raises(SimConfigError):
        make_policy("psgs-loose")
    with pytest.raises(SimConfigError):
        make_policy("round-robin")
    with pytest.raises(SimConfigError):
        WorkloadSpec(0.0)
    with pytest.raises(SimConfigError):
        DeviceModel.cpu(sample_setup=-1.0)


def test_calibrated_policy_uses_both_classes(small):
    t, q = small
    devs = [DeviceModel.cpu(sample_per_instance=10e-6), DeviceModel.gpu()]
    curve = calibrate_devices(t, q, devs, [1, 2, 4, 8, 16], 5)
    pol = make_policy("psgs-loose", curve)
    assert 0 < pol.threshold < np.inf
    w = WorkloadSpec(20000.0, total_requests=300, max_batch_size=16, deadline=5e-4)
    r = run_sim(t, q, w, devs, pol)
    assert r.batches_by_class["cpu"] > 0 and r.batches_by_class["gpu"] > 0
    assert capacity(t, q, w, devs, pol, steps=6) > 0
