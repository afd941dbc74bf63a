from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from builders import chain, coupled
from evtcosim.errors import DataError
from evtcosim.grid import (
    Branch,
    Bus,
    DistributionNetwork,
    Load,
    NetworkValidationError,
    apply_charging_loads,
    feeder_partition,
    network_from_dict,
    network_to_dict,
    read_network,
    validate_network,
    write_network,
)
from oracles import random_feeder


def test_chain_is_valid():
    assert validate_network(chain(3)).ok


def test_cycle_is_reported():
    net = chain(3)
    loop = Branch("l3", "b2", "b0", "line", coupled(0.1 + 0.1j, 0j), 100.0)
    rep = validate_network(replace(net, branches=net.branches + (loop,)))
    assert "cycle" in rep.kinds()


def test_dangling_load_reference():
    net = chain(3)
    rep = validate_network(replace(net, loads=net.loads + (Load("X", (1.0, 1.0, 1.0)),)))
    assert [v.subject for v in rep.violations if v.kind == "dangling-reference"] == ["X"]


@pytest.mark.parametrize("field,value,kind", [
    ("i_rated", 0.0, "nonpositive-rating"),
    ("to_bus", "nowhere", "dangling-reference"),
    ("tap_ratio", (1.2, 1.0, 1.0), "bad-tap"),
])
def test_branch_problems_reported(field, value, kind):
    net = chain(3)
    bad = replace(net.branches[0], **{field: value})
    rep = validate_network(replace(net, branches=(bad,) + net.branches[1:]))
    assert kind in rep.kinds()


def test_asymmetric_impedance_reported():
    net = chain(2)
    z = [list(r) for r in net.branches[0].impedance]
    z[0][1] += 0.5
    bad = replace(net.branches[0], impedance=tuple(tuple(r) for r in z))
    assert "bad-impedance" in validate_network(replace(net, branches=(bad,))).kinds()


def test_split_feeder_reported_disconnected():
    net = chain(3)
    # drop the middle branch: bus b2 is stranded from its feeder
    rep = validate_network(replace(net, branches=net.branches[:1]))
    assert "disconnected" in rep.kinds()


def test_partition_single_feeder():
    trees = feeder_partition(chain(5))
    assert len(trees) == 1
    assert trees[0].order == ("b0", "b1", "b2", "b3", "b4")
    assert trees[0].root == "b0"


def test_partition_empty_network():
    assert feeder_partition(DistributionNetwork()) == []


def test_partition_rejects_invalid():
    net = chain(3)
    with pytest.raises(NetworkValidationError):
        feeder_partition(replace(net, loads=(Load("X", (1.0, 0, 0)),)))


def _multi_feeder(n_feeders, seed=0):
    rng = np.random.default_rng(seed)
    buses, branches, loads = [], [], []
    for k in range(n_feeders):
        sub = random_feeder(rng, int(rng.integers(1, 9)), with_capacitor=False)
        ren = {b.id: f"F{k}_{b.id}" for b in sub.buses}
        buses += [replace(b, id=ren[b.id], feeder_id=f"F{k}") for b in sub.buses]
        branches += [replace(br, id=f"F{k}_{br.id}", from_bus=ren[br.from_bus], to_bus=ren[br.to_bus])
                     for br in sub.branches]
        loads += [replace(ld, bus_id=ren[ld.bus_id]) for ld in sub.loads]
    return DistributionNetwork(buses=tuple(buses), branches=tuple(branches), loads=tuple(loads))


@given(st.integers(1, 8), st.integers(0, 10_000))
@settings(max_examples=40, deadline=None)
def test_partition_is_a_partition(n_feeders, seed):
    net = _multi_feeder(n_feeders, seed)
    trees = feeder_partition(net)
    assert len(trees) == n_feeders
    seen = [b for t in trees for b in t.order]
    assert sorted(seen) == sorted(b.id for b in net.buses)
    for t in trees:
        assert len(t.branches) == len(t.order) - 1


def test_apply_charging_empty_map_is_identity():
    net = chain(3)
    assert apply_charging_loads(net, {}) == net


def test_apply_charging_two_vehicles_split_over_phases():
    net = chain(3)
    out = apply_charging_loads(net, {"b2": 2 * 7.2})
    ev = [ld for ld in out.loads if ld.kind == "ev_charging"]
    assert len(ev) == 1
    assert ev[0].bus_id == "b2"
    assert ev[0].phase_kw == pytest.approx((4.8, 4.8, 4.8))
    assert ev[0].phase_kvar == (0.0, 0.0, 0.0)


def test_apply_charging_single_phase_bus():
    net = DistributionNetwork(buses=(Bus("a", "f", 0, 0), Bus("b", "f", 1, 0, ("C",))),
                              branches=(Branch("l", "a", "b", "line", coupled(0.1j, 0j), 10.0),))
    out = apply_charging_loads(net, {"b": 7.2})
    assert out.loads[0].phase_kw == (0.0, 0.0, 7.2)


def test_apply_charging_idempotent_and_conserving():
    net = chain(4)
    m = {"b1": 7.2, "b3": 21.6}
    once = apply_charging_loads(net, m)
    assert apply_charging_loads(once, m) == once
    assert once.total_load_kw("base") == net.total_load_kw("base")
    assert once.total_load_kw() - net.total_load_kw() == pytest.approx(sum(m.values()))


def test_apply_charging_unknown_bus():
    with pytest.raises(DataError):
        apply_charging_loads(chain(3), {"nope": 7.2})


def test_json_round_trip(tmp_path):
    net = random_feeder(np.random.default_rng(3), 8)
    path = tmp_path / "grid.json"
    write_network(net, path)
    assert read_network(path) == net
    assert network_from_dict(network_to_dict(net)) == net


def test_json_rejects_unknown_version():
    doc = network_to_dict(chain(2))
    doc["format_version"] = 99
    with pytest.raises(DataError):
        network_from_dict(doc)
