from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from gnnserve.fixtures import FIVE_FEATURE_FAP, scenario_topology
from gnnserve.placement import (ClusterTopology, FeatureLookupTable, PlacementError,
                                PlacementInfeasible, PlacementPlan, Viewer, build_lookup_table,
                                fetch_cost, page_transitions, plan_placement, plan_reads)


def tier_sets(plan, server=0):
    topo = plan.topology
    out = {}
    for loc, feats in plan.contents.items():
        l = topo.location(loc)
        if l.server == server:
            out[(l.tier, l.device)] = feats.tolist()
    return out


def test_single_server_pcie_replicates_hottest():
    plan = plan_placement(FIVE_FEATURE_FAP, scenario_topology("a"))
    t = tier_sets(plan)
    assert [t[("gpu", g)] for g in range(4)] == [[0]] * 4
    hosts = t[("host", 0)] + t[("host", 1)]
    assert sorted(hosts) == [1, 2, 3, 4]


def test_single_server_nvlink_partitions_group():
    plan = plan_placement(FIVE_FEATURE_FAP, scenario_topology("b"))
    t = tier_sets(plan)
    assert [t[("gpu", g)] for g in range(4)] == [[0], [1], [0], [1]]
    assert {2, 3, 4} <= set(t[("host", 0)]) | set(t[("host", 1)])


def test_two_servers_ethernet_replicate():
    plan = plan_placement(FIVE_FEATURE_FAP, scenario_topology("c"))
    assert tier_sets(plan, 0) == tier_sets(plan, 1)
    assert tier_sets(plan, 0)[("gpu", 0)] == [0]
    assert tier_sets(plan, 0)[("host", 0)] == [1]


def test_two_servers_infiniband_partition():
    plan = plan_placement(FIVE_FEATURE_FAP, scenario_topology("d"))
    s0, s1 = tier_sets(plan, 0), tier_sets(plan, 1)
    assert (s0[("gpu", 0)], s0[("host", 0)]) == ([0], [1])
    assert (s1[("gpu", 0)], s1[("host", 0)]) == ([2], [3])


@pytest.mark.parametrize("scenario", "abcd")
def test_plans_are_byte_identical(scenario):
    a = plan_placement(FIVE_FEATURE_FAP, scenario_topology(scenario))
    b = plan_placement(FIVE_FEATURE_FAP.copy(), scenario_topology(scenario))
    assert a.to_json() == b.to_json() and a.to_csv() == b.to_csv()
    back = PlacementPlan.from_json(a.to_json())
    assert back.to_json() == a.to_json()


def test_fap_ties_by_id():
    plan = plan_placement(np.ones(4), ClusterTopology(gpu_feature_capacity=2,
                                                      host_feature_capacity=2))
    assert plan.order.tolist() == [0, 1, 2, 3]
    assert tier_sets(plan)[("gpu", 0)] == [0, 1]


def test_infeasible_reports_shortfall():
    topo = ClusterTopology(servers=2, gpu_feature_capacity=1, host_feature_capacity=1,
                           disk_feature_capacity=1)
    with pytest.raises(PlacementInfeasible) as e:
        plan_placement(np.arange(10.0), topo)
    # replicated fast tiers hold 2, plus one disk slot per server
    assert e.value.capacity == 4 and e.value.shortfall == 6
    ib = replace(topo, infiniband=True)
    with pytest.raises(PlacementInfeasible) as e:
        plan_placement(np.arange(10.0), ib)
    assert e.value.capacity == 6


def test_topology_validation():
    with pytest.raises(PlacementError):
        ClusterTopology(numa_per_server=2, gpus_per_server=3)
    with pytest.raises(PlacementError):
        ClusterTopology(links={"pcie": (1e-6, 0.0)})
    with pytest.raises(PlacementError):
        ClusterTopology.from_dict({"servers": 1, "bogus": 2})
    topo = ClusterTopology(links={"pcie": {"bandwidth": 32e9}})
    assert topo.links["pcie"].bandwidth == 32e9 and topo.links["pcie"].latency == 2e-6


def test_lookup_prefers_local_replica():
    topo = scenario_topology("b")
    plan = plan_placement(FIVE_FEATURE_FAP, topo)
    table = build_lookup_table(plan, topo, 0, "gpu", 0)
    assert len(table) == 5
    loc, off = table.lookup([0, 1])
    assert loc.tolist() == [topo.location_id(0, "gpu", 0), topo.location_id(0, "gpu", 1)]
    assert topo.path(Viewer(0, "gpu", 0), int(loc[1])) == ("nvlink",)
    back = FeatureLookupTable.from_json(table.to_json())
    assert np.array_equal(back.location, table.location) and back.viewer == table.viewer


def test_lookup_remote_vs_local():
    # feature 0 on server 0 GPU and (by fill) on server 1's disk; viewer on server 0
    topo = scenario_topology("d")
    plan = plan_placement(FIVE_FEATURE_FAP, topo)
    table = build_lookup_table(plan, topo, 0, "gpu", 0)
    assert table.location[0] == topo.location_id(0, "gpu", 0)
    t1 = build_lookup_table(plan, topo, 1, "gpu", 0)
    assert t1.location[2] == topo.location_id(1, "gpu", 0)


def random_topology(draw):
    c = draw(st.integers(1, 2))
    return ClusterTopology(
        servers=draw(st.integers(1, 3)), numa_per_server=c,
        gpus_per_server=c * draw(st.integers(0, 3)),
        gpu_feature_capacity=draw(st.integers(0, 6)),
        host_feature_capacity=draw(st.integers(0, 12)),
        disk_feature_capacity=draw(st.integers(0, 30)),
        nvlink_within_numa=draw(st.booleans()), infiniband=draw(st.booleans()),
        page_size=draw(st.integers(1, 8)))


@settings(max_examples=120, deadline=None)
@given(st.data())
def test_capacity_coverage_and_locality(data):
    topo = random_topology(data.draw)
    n = data.draw(st.integers(1, 60))
    fap = np.asarray(data.draw(st.lists(st.floats(0, 1), min_size=n, max_size=n)))
    try:
        plan = plan_placement(fap, topo)
    except PlacementInfeasible as e:
        assert e.shortfall > 0
        return
    for loc, feats in plan.contents.items():
        assert feats.size <= topo.capacity(loc)
        assert np.all(np.diff(feats) > 0)
    assert all(plan.locations_of(f) for f in range(n))
    if topo.nvlink_within_numa and topo.gpus_per_numa > 1:
        gpn = topo.gpus_per_numa
        for s in range(topo.servers):
            for grp in range(topo.numa_per_server):
                gpus = [topo.location_id(s, "gpu", grp * gpn + k) for k in range(gpn)]
                union = set().union(*(plan.features_at(g).tolist() for g in gpus))
                # the group's GPUs jointly hold the server's GPU share without gaps
                gd = topo.gpu_distinct_capacity
                start = s * topo.fast_capacity if topo.infiniband else 0
                if n >= start + topo.fast_capacity:
                    assert set(plan.order[start:start + gd].tolist()) <= union
    kind = data.draw(st.sampled_from(["gpu", "cpu"]))
    if kind == "gpu" and topo.gpus_per_server == 0:
        kind = "cpu"
    idx = 0
    s = data.draw(st.integers(0, topo.servers - 1))
    table = build_lookup_table(plan, topo, s, kind, idx)
    viewer = Viewer(s, kind, idx)
    for f in range(n):
        chosen = topo.path_cost(topo.path(viewer, int(table.location[f])), 512)
        for other in plan.locations_of(f):
            assert chosen <= topo.path_cost(topo.path(viewer, other), 512)


def test_tlb_example():
    table = FeatureLookupTable(np.zeros(4, dtype=np.int64), np.array([2, 10, 3, 11]),
                               Viewer(0, "gpu", 0))
    reads = plan_reads(table, [0, 1, 2, 3], page_size=2)
    assert reads.unsorted_transitions == {0: 4}
    assert reads.transitions == {0: 2}
    assert reads.offsets.tolist() == [2, 3, 10, 11]


def test_page_transitions_edges():
    assert page_transitions([], 8) == 0
    assert page_transitions([5], 8) == 1
    assert page_transitions([7, 0, 3], 8) == 1


@settings(max_examples=150, deadline=None)
@given(st.lists(st.integers(0, 40), min_size=1, max_size=7), st.integers(1, 6))
def test_sorted_reads_are_minimal(offsets, page):
    table = FeatureLookupTable(np.zeros(len(offsets), dtype=np.int64), np.array(offsets),
                               Viewer())
    reads = plan_reads(table, range(len(offsets)), page)
    assert reads.transitions[0] == oracles.min_page_changes(offsets, page)


def test_fetch_cost_examples():
    topo = ClusterTopology(gpu_feature_capacity=1, host_feature_capacity=4,
                           links={"pcie": (0.0, 16e9)})
    empty = plan_reads(FeatureLookupTable(np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64),
                                          Viewer()), [])
    assert fetch_cost(empty, topo).total == 0.0
    host = topo.location_id(0, "host", 0)
    table = FeatureLookupTable(np.array([host]), np.array([0]), Viewer())
    one_gb = fetch_cost(plan_reads(table, [0]), topo, feature_bytes=10**9, tlb_penalty=0.0)
    assert abs(one_gb.total - 0.0625) < 1e-12


def test_fetch_cost_is_tail_not_sum():
    topo = ClusterTopology(numa_per_server=1, gpus_per_server=1, gpu_feature_capacity=1,
                           host_feature_capacity=1, disk_feature_capacity=1)
    gpu, host, disk = (topo.location_id(0, t) for t in ("gpu", "host", "disk"))
    table = FeatureLookupTable(np.array([host, disk]), np.array([0, 0]), Viewer())
    c = fetch_cost(plan_reads(table, [0, 1]), topo)
    assert c.total == max(c.per_location.values())
    assert c.total < sum(c.per_location.values())
    bogus = FeatureLookupTable(np.array([99]), np.array([0]), Viewer())
    with pytest.raises(PlacementError):
        fetch_cost(plan_reads(bogus, [0]), topo)


def oblivious_plan(fap, topo):
    flat = plan_placement(fap, replace(topo, nvlink_within_numa=False))
    return PlacementPlan(topo, flat.feature_count, flat.order, flat.contents)


def test_nvlink_aware_fetch_is_faster():
    topo = scenario_topology("b")
    aware = build_lookup_table(plan_placement(FIVE_FEATURE_FAP, topo), topo, 0, "gpu", 0)
    flat = build_lookup_table(oblivious_plan(FIVE_FEATURE_FAP, topo), topo, 0, "gpu", 0)
    req = [0, 1]
    assert (fetch_cost(plan_reads(aware, req), topo).total
            < fetch_cost(plan_reads(flat, req), topo).total)


def test_nvlink_aware_can_lose_on_a_lone_hot_feature():
    # GPU 1 asking only for the hottest feature: replication keeps it local,
    # partitioning puts it one NVLink hop away
    topo = scenario_topology("b")
    aware = build_lookup_table(plan_placement(FIVE_FEATURE_FAP, topo), topo, 0, "gpu", 1)
    flat = build_lookup_table(oblivious_plan(FIVE_FEATURE_FAP, topo), topo, 0, "gpu", 1)
    assert fetch_cost(plan_reads(flat, [0]), topo).total == 0.0
    assert fetch_cost(plan_reads(aware, [0]), topo).total > 0.0


@settings(max_examples=120, deadline=None)
@given(st.data())
def test_nvlink_aware_never_slower_for_gpu_tier_requests(data):
    c = data.draw(st.integers(1, 2))
    topo = ClusterTopology(
        servers=data.draw(st.integers(1, 2)), numa_per_server=c,
        gpus_per_server=c * data.draw(st.integers(2, 3)),
        gpu_feature_capacity=data.draw(st.integers(1, 8)),
        host_feature_capacity=data.draw(st.integers(0, 30)),
        disk_feature_capacity=data.draw(st.integers(0, 30)),
        nvlink_within_numa=True, infiniband=data.draw(st.booleans()))
    n = data.draw(st.integers(1, 60))
    fap = np.random.default_rng(data.draw(st.integers(0, 2**32 - 1))).random(n)
    try:
        aware = plan_placement(fap, topo)
        flat = oblivious_plan(fap, topo)
    except PlacementInfeasible:
        return
    hot = aware.order[:topo.gpu_group_capacity].tolist()
    req = data.draw(st.lists(st.sampled_from(hot), min_size=1, unique=True))
    g = data.draw(st.integers(0, topo.gpus_per_server - 1))
    ca = fetch_cost(plan_reads(build_lookup_table(aware, topo, 0, "gpu", g), req), topo).total
    cf = fetch_cost(plan_reads(build_lookup_table(flat, topo, 0, "gpu", g), req), topo).total
    if cf > 0:
        assert ca <= cf
