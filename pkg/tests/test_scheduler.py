import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from gnnserve.scheduler import (CalibrationCurve, CalibrationError, ExecutorCurve, Line,
                                ProcessorParams, calibrate, cross_points, curve_from_json,
                                curve_to_json, intersect, makespan, optimize_microbatch,
                                route_batch, select_threshold)

# latencies in ms against summed PSGS
CPU_MS = Line(2.0, 0.01)
GPU_MS = Line(10.0, 0.001)


def noiseless_curve(cpu=CPU_MS, gpu=GPU_MS, buckets=(100, 400, 800, 1600, 3200)):
    x = np.repeat(np.asarray(buckets, dtype=float), 3)
    b = np.repeat(np.arange(len(buckets)), 3)
    return CalibrationCurve(ExecutorCurve.fit(x, cpu(x), b), ExecutorCurve.fit(x, gpu(x), b))


def test_noiseless_lines_recovered():
    curve = noiseless_curve()
    for fitted, true in ((curve.cpu, CPU_MS), (curve.gpu, GPU_MS)):
        for line in (fitted.average, fitted.maximal):
            assert abs(line.slope - true.slope) <= 1e-9
            assert abs(line.intercept - true.intercept) <= 1e-9
    pts = cross_points(curve)
    assert abs(pts.throughput_preferred - 8 / 0.009) <= 1e-6
    assert abs(select_threshold(curve, "throughput") - 888.888888) <= 1e-3


def test_calibrate_with_synthetic_executors():
    psgs = np.linspace(1, 40, 40)
    seeds_for = lambda b, r: np.arange(4 * (b + 1)) % 40  # noqa: E731
    execs = {"cpu": lambda s: CPU_MS.at(psgs[s].sum()), "gpu": lambda s: GPU_MS.at(psgs[s].sum())}
    curve = calibrate(seeds_for, execs, psgs, 5, 20)
    assert abs(curve.cpu.average.slope - 0.01) <= 1e-9
    assert abs(curve.gpu.maximal.intercept - 10.0) <= 1e-9
    with pytest.raises(CalibrationError):
        calibrate(seeds_for, execs, psgs, 1, 20)
    with pytest.raises(CalibrationError):
        calibrate(seeds_for, {"cpu": execs["cpu"]}, psgs, 5, 2)


def test_maximal_line_sits_above_average():
    rng = np.random.default_rng(3)
    x = np.repeat(np.linspace(10, 100, 6), 20)
    b = np.repeat(np.arange(6), 20)
    y = 1.0 + 0.05 * x + rng.gamma(2.0, 0.3, x.size)
    c = ExecutorCurve.fit(x, y, b)
    assert np.all(c.maximal(x) >= c.average(x) - 1e-12)
    assert c.maximal.slope != c.average.slope


def test_single_bucket_is_an_error():
    with pytest.raises(CalibrationError):
        ExecutorCurve.fit([5, 5, 5], [1, 2, 3], [0, 0, 0])
    with pytest.raises(CalibrationError):
        ExecutorCurve.fit([5, 6, 7], [1, 2, 3], [0, 0, 0])


def test_identical_lines_have_no_cross_points():
    curve = CalibrationCurve.from_lines(CPU_MS, CPU_MS)
    pts = cross_points(curve)
    assert pts.to_dict() == dict.fromkeys(pts.to_dict(), None)
    # a tie routes to the GPU
    assert select_threshold(curve, "latency") == 0.0


def test_dominance():
    gpu_wins = CalibrationCurve.from_lines(Line(5, 0.02), Line(1, 0.01))
    assert select_threshold(gpu_wins, "throughput") == 0.0
    assert route_batch([0], [7.0], 0.0) == "gpu"
    cpu_wins = CalibrationCurve.from_lines(Line(1, 0.01), Line(5, 0.02))
    assert select_threshold(cpu_wins, "throughput") == math.inf
    # same intercept: the flatter line wins everywhere beyond zero
    tie = CalibrationCurve.from_lines(Line(1, 0.01), Line(1, 0.02))
    assert select_threshold(tie, "throughput") == math.inf


def test_unknown_threshold_name():
    with pytest.raises(ValueError):
        select_threshold(noiseless_curve(), "fastest")


def test_intersect_edge_cases():
    assert intersect(Line(0, 1), Line(1, 1)) is None
    assert intersect(Line(0, 1), Line(1, 2)) is None
    assert intersect(Line(0, 1), Line(2, 0)) == 2.0


def test_swapping_labels_swaps_points():
    rng = np.random.default_rng(11)
    x = np.repeat(np.linspace(10, 200, 5), 10)
    b = np.repeat(np.arange(5), 10)
    curve = CalibrationCurve(ExecutorCurve.fit(x, 1 + 0.02 * x + rng.random(x.size), b),
                             ExecutorCurve.fit(x, 3 + 0.005 * x + rng.random(x.size), b))
    p, q = cross_points(curve), cross_points(curve.swapped())
    assert (q.cpu_preferred, q.gpu_preferred) == (p.gpu_preferred, p.cpu_preferred)
    assert q.latency_preferred == pytest.approx(p.latency_preferred, rel=1e-12)
    assert q.throughput_preferred == pytest.approx(p.throughput_preferred, rel=1e-12)


def test_route_boundary_and_validation():
    psgs = np.array([10.0, 30.0, 60.0])
    assert route_batch([0, 1], psgs, 100.0) == "cpu"
    assert route_batch([0, 1, 2], psgs, 100.0) == "gpu"
    assert route_batch([1, 2], psgs, 90.0) == "gpu"  # equal goes to the GPU
    assert route_batch([], psgs, 1.0) == "cpu"
    with pytest.raises(IndexError):
        route_batch([0, 3], psgs, 10.0)
    with pytest.raises(ValueError):
        route_batch([0], psgs, -1.0)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 19), max_size=12), st.floats(0, 400), st.randoms())
def test_route_permutation_invariant(seeds, threshold, rnd):
    psgs = np.random.default_rng(0).random(20) * 40
    shuffled = list(seeds)
    rnd.shuffle(shuffled)
    assert route_batch(seeds, psgs, threshold) == route_batch(shuffled, psgs, threshold)


lines = st.builds(Line, st.floats(0.1, 20), st.floats(0.0001, 0.05))


@settings(max_examples=200, deadline=None)
@given(lines, lines, st.floats(0, 5000))
def test_latency_threshold_picks_faster_executor(cpu, gpu, x):
    curve = CalibrationCurve.from_lines(cpu, gpu)
    th = select_threshold(curve, "latency")
    point = cross_points(curve).latency_preferred
    # the single-threshold rule can only put the CPU on small batches
    if point is not None and point > 0 and cpu.intercept > gpu.intercept:
        return
    chosen = cpu if x < th else gpu
    other = gpu if chosen is cpu else cpu
    if point is None or abs(x - point) > 1e-6:
        assert chosen.at(x) <= other.at(x) + 1e-9


def test_curve_json_roundtrip():
    curve = noiseless_curve()
    text = curve_to_json(curve)
    back, pts = curve_from_json(text)
    assert curve_to_json(back) == text
    assert pts == cross_points(curve)


def test_microbatch_identical_processors():
    procs = [ProcessorParams("a", 1.0), ProcessorParams("b", 1.0)]
    assert optimize_microbatch(1024, procs).sizes.tolist() == [512, 512]


def test_microbatch_one_to_three():
    procs = [ProcessorParams("fast", 1.0), ProcessorParams("slow", 3.0)]
    r = optimize_microbatch(1024, procs)
    assert r.sizes.tolist() == [768, 256]
    assert r.makespan == 768.0


def test_microbatch_single_processor():
    r = optimize_microbatch(37, [ProcessorParams("only", 2.0)])
    assert r.sizes.tolist() == [37] and r.makespan == 74.0
    with pytest.raises(ValueError):
        optimize_microbatch(0, [ProcessorParams("only", 2.0)])
    with pytest.raises(ValueError):
        ProcessorParams("bad", 0.0)


@pytest.mark.parametrize("b1,b2,batch", [(1.0, 2.0, 300), (0.7, 0.9, 500), (2.0, 5.0, 128)])
def test_microbatch_near_analytic_optimum(b1, b2, batch):
    procs = [ProcessorParams("p", b1), ProcessorParams("q", b2)]
    _, _, best = oracles.two_processor_optimum(b1, b2, batch)
    r = optimize_microbatch(batch, procs)
    assert r.makespan <= 1.01 * best
    assert r.sizes.sum() == batch


proc_lists = st.lists(st.builds(ProcessorParams, st.just("p"), st.floats(0.1, 5.0),
                                st.floats(0.0, 0.5),
                                st.one_of(st.just(math.inf), st.floats(0.5, 5.0)),
                                st.floats(0.5, 2.0)), min_size=2, max_size=3)


@settings(max_examples=150, deadline=None)
@given(proc_lists, st.integers(1, 24))
def test_microbatch_matches_exhaustive_search(procs, batch):
    r = optimize_microbatch(batch, procs)
    assert r.sizes.sum() == batch and np.all(r.sizes >= 0)
    assert r.makespan <= oracles.best_integer_split(procs, batch) + 1e-9


def test_microbatch_never_worse_than_baselines():
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        n = int(rng.integers(2, 5))
        procs = [ProcessorParams(f"p{i}", float(rng.uniform(0.1, 4)), float(rng.uniform(0, 0.2)),
                                 float(rng.uniform(0.5, 4)) if rng.random() < 0.5 else math.inf)
                 for i in range(n)]
        batch = int(rng.integers(1, 200))
        r = optimize_microbatch(batch, procs)
        equal = np.full(n, batch // n)
        equal[: batch % n] += 1
        fastest = np.zeros(n, dtype=np.int64)
        fastest[np.argmin([p.base + p.remote for p in procs])] = batch
        assert r.makespan <= makespan(equal, procs) + 1e-9
        assert r.makespan <= makespan(fastest, procs) + 1e-9
