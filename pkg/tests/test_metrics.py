import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cgra.engine import CounterSet
from cgra.fabric import NUM_UNITS, PE
from cgra.harness import run_and_verify
from cgra.mapper import GemmShape, emit_gemm_job, plan_gemm
from cgra.metrics import EnergyModel, NegativeCoefficient, build_report, load_counters

COUNT_FIELDS = ("mac4_ops", "alu_ops", "rf_writes", "link_reads", "loads", "stores")
COEF = st.floats(0, 100, allow_nan=False, allow_infinity=False)


def counters_strategy():
    n = st.integers(0, 10_000)
    return st.builds(
        CounterSet,
        cycles=n,
        busy=st.lists(n, min_size=NUM_UNITS, max_size=NUM_UNITS),
        idle=st.lists(n, min_size=NUM_UNITS, max_size=NUM_UNITS),
        mac4_ops=n, alu_ops=n, rf_writes=n, link_reads=n, loads=n, stores=n,
        l1_read_bytes=n, l1_write_bytes=n,
    )


def hand_energy(c: CounterSet, m: EnergyModel) -> float:
    terms = {
        "e_alu": c.alu_ops, "e_mac4": c.mac4_ops, "e_rf_write": c.rf_writes,
        "e_link_hop": c.link_reads, "e_load": c.loads, "e_store": c.stores,
        "e_idle": sum(c.idle),
    }
    return sum(getattr(m, k) * v for k, v in terms.items())


def test_zero_counters():
    rep = build_report(CounterSet())
    assert rep.energy_switchless == 0 and rep.energy_switched_baseline == 0
    assert rep.ratio == 1.0


def test_defaults_and_labels():
    d = build_report(CounterSet(cycles=1, alu_ops=1)).to_dict()
    assert "abstract" in d["energy_units"]
    assert d["energy_switchless"] == 1.0
    assert EnergyModel().to_dict()["e_router_hop"] == 2.0


@settings(max_examples=100)
@given(counters_strategy())
def test_matches_hand_sum(c):
    m = EnergyModel()
    rep = build_report(c, m)
    assert rep.energy_switchless == pytest.approx(hand_energy(c, m))
    assert rep.energy_switched_baseline == pytest.approx(
        hand_energy(c, m) + c.link_reads * m.e_router_hop)


@settings(max_examples=100)
@given(counters_strategy(), COEF, COEF)
def test_no_router_cost_means_equal(c, alu, hop):
    m = EnergyModel(e_alu=alu, e_link_hop=hop, e_router_hop=0)
    rep = build_report(c, m)
    assert rep.energy_switched_baseline == rep.energy_switchless


@settings(max_examples=100)
@given(counters_strategy(), st.sampled_from(COUNT_FIELDS), st.integers(1, 1000))
def test_monotone_in_counts(c, name, extra):
    bigger = replace(c, **{name: getattr(c, name) + extra})
    a, b = build_report(c), build_report(bigger)
    assert b.energy_switchless >= a.energy_switchless
    assert b.energy_switched_baseline >= a.energy_switched_baseline
    assert a.energy_switched_baseline >= a.energy_switchless


@settings(max_examples=100)
@given(counters_strategy(), st.floats(0, 50, allow_nan=False))
def test_linear_in_coefficients(c, k):
    m = EnergyModel(e_alu=1.5, e_mac4=3, e_load=7, e_router_hop=1.25)
    a, b = build_report(c, m), build_report(c, m.scaled(k))
    assert b.energy_switchless == pytest.approx(k * a.energy_switchless, abs=1e-6)
    assert b.energy_switched_baseline == pytest.approx(k * a.energy_switched_baseline, abs=1e-6)


def test_negative_coefficient(tmp_path):
    path = tmp_path / "em.json"
    path.write_text(json.dumps({"e_alu": -1}))
    with pytest.raises(NegativeCoefficient):
        EnergyModel.load(path)
    with pytest.raises(NegativeCoefficient):
        EnergyModel(e_idle=float("nan"))
    with pytest.raises(ValueError):
        EnergyModel.from_dict({"e_bogus": 1})


def test_gemm_report():
    rng = np.random.default_rng(0)
    a = rng.integers(-128, 128, (16, 32), dtype=np.int8)
    b = rng.integers(-128, 128, (32, 16), dtype=np.int8)
    rep = run_and_verify(emit_gemm_job(plan_gemm(GemmShape(16, 16, 32)), a, b))
    r = build_report(rep.counters)
    assert r.traffic_bytes == r.l1_read_bytes + r.l1_write_bytes == 4096 + 1024
    assert r.energy_switchless <= r.energy_switched_baseline
    assert r.ratio > 1
    assert 0 < r.utilization[str(PE(0, 0))] <= 1


def test_load_counters_both_forms(tmp_path):
    c = CounterSet(cycles=5, loads=2, busy=[1] * NUM_UNITS, idle=[4] * NUM_UNITS)
    (tmp_path / "a.json").write_text(json.dumps({"counters": c.to_dict(), "cycles": 5}))
    (tmp_path / "b.json").write_text(json.dumps(c.to_dict()))
    assert load_counters(tmp_path / "a.json") == c
    assert load_counters(tmp_path / "b.json") == c
