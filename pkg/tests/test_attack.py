import json
import math
from itertools import combinations

import numpy as np
import pytest
from scipy.linalg import null_space

from oracles import brute_force_alpha, milp_alpha
from stealthse import attack as atk
from stealthse.bdd import residual_sensitivity
from stealthse.measurement import (
    Kind,
    Measurement,
    MeasurementSet,
    build_dc_jacobian,
    full_measurement_set,
    load_measurements,
    simulate_measurements,
)
from stealthse.netmodel import Branch, Bus, Network, load_case


def small(name):
    net = load_case(name)
    return net, load_measurements(name, net)


def spur_network():
    # ring 1-2-3-4 with a radial spur 4-5-6
    buses = tuple(Bus(i, 3 if i == 1 else 1) for i in range(1, 7))
    lines = [(1, 2, 0.1), (2, 3, 0.2), (3, 4, 0.15), (4, 1, 0.1), (4, 5, 0.12), (5, 6, 0.08)]
    return Network(buses, tuple(Branch(i, j, 0.0, x) for i, j, x in lines), 100.0)


@pytest.fixture(scope="module", params=["case3", "case4"])
def oracle_case(request):
    net, mset = small(request.param)
    return net, mset, atk.dc_model(net, mset)


def test_exact_matches_brute_force(oracle_case):
    _, _, model = oracle_case
    report = atk.security_metric_exact(model)
    prot = model.protected_rows
    for e in report.entries:
        alpha, sup = brute_force_alpha(model.H, model.row_of(e.k), prot)
        assert e.alpha == alpha
        assert e.witness.support == tuple(model.rows[r] for r in sup)


def test_witness_values_match_nullspace(oracle_case):
    _, _, model = oracle_case
    for k in model.targets:
        w = atk.synth_attack(atk.AttackSpec(model, k, 2.5))
        zero = [model.row_of(i) for i in model.rows if i not in w.support]
        c = null_space(model.H[zero])[:, 0]
        a = model.H @ c
        a *= 2.5 / a[model.row_of(k)]
        np.testing.assert_allclose(w.a[list(model.rows)], a, atol=1e-9)


def test_witness_invariants(case14, meas14):
    model = atk.dc_model(case14, meas14)
    S = residual_sensitivity(model.H)
    for e in atk.security_metric_exact(model).entries:
        if e.witness is None:
            continue
        a_rows = e.witness.a[list(model.rows)]
        np.testing.assert_allclose(model.H @ e.witness.c, a_rows, atol=1e-9)
        assert all(e.witness.a[p] == 0 for p in model.protected)
        assert e.witness.a[e.k] == pytest.approx(1.0)
        assert e.witness.cardinality == e.alpha
        assert np.abs(S @ a_rows).max() <= 1e-8
        assert np.all(e.witness.a[~meas14.active] == 0)
        assert atk.verify_rank_lemma(model, e.witness)


def test_exact_matches_milp_on_14_bus(case14, meas14):
    model = atk.dc_model(case14, meas14)
    report = atk.security_metric_exact(model)
    for e in report.entries[::3]:
        assert e.alpha == milp_alpha(model.H, model.row_of(e.k), model.protected_rows)


def test_zero_magnitude(oracle_case):
    _, _, model = oracle_case
    w = atk.synth_attack(atk.AttackSpec(model, model.targets[0], 0.0))
    assert w.support == () and not w.a.any()


def test_fully_protected_target(case14, meas14):
    model = atk.dc_model(case14, meas14)
    # the 7-8 flow is pinned by the zero injection at the radial bus 8
    k = meas14.find(Kind.PFLOW, 7, 8)
    with pytest.raises(atk.AttackInfeasible):
        atk.synth_attack(atk.AttackSpec(model, k))
    assert math.isinf(atk.security_metric_exact(model, [k]).alpha(k))
    assert math.isinf(milp_alpha(model.H, model.row_of(k), model.protected_rows))


def test_cut_marked_pseudo_is_infinite():
    net, mset = small("case4")
    # protect every other active measurement touching bus 2
    cut = [k for k, ms in enumerate(mset.measurements) if ms.kind.active and 2 in (ms.bus, ms.to_bus)]
    target = mset.find(Kind.PFLOW, 1, 2)
    model = atk.dc_model(net, mset, [k for k in cut if k != target])
    # moving the 1-2 flow needs theta_2 to move, which the protected rows at bus 2 forbid
    assert brute_force_alpha(model.H, model.row_of(target), model.protected_rows)[0] == np.inf
    assert math.isinf(atk.security_metric_exact(model, [target]).alpha(target))


def test_isolated_flow_has_alpha_one():
    net = load_case("case2")
    mset = MeasurementSet((Measurement(Kind.PFLOW, 1, 2), Measurement(Kind.VMAG, 1)))
    model = atk.dc_model(net, mset)
    assert atk.security_metric_exact(model).alpha(0) == 1


def test_target_checks(case14, meas14):
    model = atk.dc_model(case14, meas14)
    with pytest.raises(atk.AttackError):
        atk.AttackSpec(model, meas14.find(Kind.PINJ, 7))  # pseudo
    with pytest.raises(atk.AttackError):
        atk.AttackSpec(model, meas14.find(Kind.VMAG, 1))  # not active


def test_relaxation_sound(oracle_case):
    _, _, model = oracle_case
    exact = atk.security_metric_exact(model).as_dict()
    relax = atk.security_metric_relaxation(model)
    for e in relax.entries:
        assert e.alpha >= exact[e.k]
        assert math.isinf(e.alpha) == math.isinf(exact[e.k])
        if e.witness is not None:
            np.testing.assert_allclose(model.H @ e.witness.c, e.witness.a[list(model.rows)], atol=1e-9)
            assert all(e.witness.a[p] == 0 for p in model.protected)


def test_relaxation_classification_with_heavy_protection(oracle_case):
    net, mset, model = oracle_case
    rng = np.random.default_rng(0)
    for _ in range(10):
        prot = [k for k in model.rows if rng.random() < 0.5]
        m2 = model.with_protected(prot)
        for k in m2.targets:
            e = atk.security_metric_exact(m2, [k]).alpha(k)
            r = atk.security_metric_relaxation(m2, [k]).alpha(k)
            assert math.isinf(e) == math.isinf(r)
            assert r >= e


def test_rank_lemma_counterexample(oracle_case):
    _, _, model = oracle_case
    k = model.targets[0]
    w = atk.synth_attack(atk.AttackSpec(model, k))
    assert atk.verify_rank_lemma(model, w)
    # pad the support by adding a second independent attack direction
    extra = next(
        atk.synth_attack(atk.AttackSpec(model, j))
        for j in model.targets
        if not set(atk.synth_attack(atk.AttackSpec(model, j)).support) <= set(w.support)
    )
    padded = atk.AttackVector(w.a + 0.37 * extra.a, w.c + 0.37 * extra.c, k,
                              tuple(sorted(set(w.support) | set(extra.support))))
    assert not atk.verify_rank_lemma(model, padded)
    with pytest.raises(atk.AttackError):
        atk.verify_rank_lemma(model, w.scaled(0.0))


def test_protection_monotonicity_exhaustive():
    for name in ("case3", "case4"):
        net, mset = small(name)
        model = atk.dc_model(net, mset)
        base = atk.security_metric_exact(model).as_dict()
        for extra in model.rows:
            more = model.with_protected([extra])
            for k, a in atk.security_metric_exact(more).as_dict().items():
                assert a >= base[k]


def test_locality_on_radial_spur():
    net = spur_network()
    mset = full_measurement_set(net, reactive=False, voltages=False)
    model = atk.dc_model(net, mset)
    k = mset.find(Kind.PFLOW, 5, 6)
    w = atk.synth_attack(atk.AttackSpec(model, k))
    spur = {5, 6}
    for i in w.support:
        ms = mset[i]
        assert {ms.bus, ms.to_bus} & spur


def test_perturbation_equals_rebuilt_model(oracle_case):
    net, mset, model = oracle_case
    for br in net.branches:
        pert = atk.perturb_line(model, net, (br.from_bus, br.to_bus), 1.7)
        scaled = Network(
            net.buses,
            tuple(Branch(b.from_bus, b.to_bus, b.r, b.x / 1.7 if b is br else b.x, b.b) for b in net.branches),
            net.base_mva,
        )
        np.testing.assert_allclose(pert.H, build_dc_jacobian(scaled, mset), atol=1e-10)


def test_invariance(oracle_case):
    net, mset, model = oracle_case
    checked = 0
    for k in model.targets:
        w = atk.synth_attack(atk.AttackSpec(model, k))
        for br in net.branches:
            line = (br.from_bus, br.to_bus)
            assert atk.check_model_invariance(model, atk.perturb_line(model, net, line, 1.0), w)
            flows = [i for i in model.rows if mset[i].kind == Kind.PFLOW and {mset[i].bus, mset[i].to_bus} == set(line)]
            pert = atk.perturb_line(model, net, line, 1.5)
            if any(i in w.support for i in flows):
                with pytest.raises(atk.PreconditionViolation):
                    atk.check_model_invariance(model, pert, w)
            else:
                assert atk.check_model_invariance(model, pert, w)
                checked += 1
    assert checked > 0


def test_saturation():
    net = load_case("case2")
    mset = MeasurementSet((Measurement(Kind.PFLOW, 1, 2), Measurement(Kind.VMAG, 1)))
    assert atk.check_saturation(net, mset, np.zeros(2)) == []
    (v,) = atk.check_saturation(net, mset, np.array([10.5, 1.0]))
    assert v.index == 0 and v.limit == pytest.approx(10.0) and v.headroom == pytest.approx(-0.5)
    assert atk.check_saturation(net, mset, np.array([9.9, 1.0])) == []


def test_apply_attack(case14, meas14):
    z = simulate_measurements(case14, meas14, case14.true_state(), noise_seed=1)
    model = atk.dc_model(case14, meas14)
    unit = atk.synth_attack(atk.AttackSpec(model, 0))
    assert atk.apply_attack(z, unit.scaled(0.0)).values.tobytes() == z.values.tobytes()
    za = atk.apply_attack(z, unit.scaled(100.0))
    np.testing.assert_array_equal(za.values, z.values + 100.0 * unit.a)
    back = atk.apply_attack(za, unit.scaled(-100.0))
    # floating point: z + a - a is exact to within one rounding of the larger operand
    ulp = np.spacing(np.maximum(np.abs(z.values), np.abs(100.0 * unit.a)))
    assert np.all(np.abs(back.values - z.values) <= ulp)
    np.testing.assert_array_equal(back.values[unit.a == 0], z.values[unit.a == 0])


def test_apply_attack_rejects_pseudo(case14, meas14):
    z = simulate_measurements(case14, meas14, case14.true_state())
    k = meas14.find(Kind.PINJ, 7)
    with pytest.raises(atk.AttackError):
        atk.apply_attack(z, atk.naive_attack(meas14, k, 1.0))
    with pytest.raises(ValueError):
        atk.apply_attack(z, atk.AttackVector(np.zeros(3), np.zeros(0), 0, ()))


def test_size_guard(case14):
    big = full_measurement_set(case14, reactive=False, voltages=False)
    big = MeasurementSet(big.measurements + big.measurements[:20])
    model = atk.dc_model(case14, big)
    assert len(model.rows) > 60
    with pytest.raises(atk.SizeGuardExceeded):
        atk.security_metric_exact(model)


def test_alpha_bar(case14, meas14):
    full, prot, mapping = atk.all_possible_measurements(case14, meas14)
    assert full.m == 2 * 20 + 14
    assert {full[i].bus for i in np.flatnonzero(full.pseudo)} == {7, 8}
    for k, j in mapping.items():
        a, b = meas14[k], full[j]
        assert (a.kind, a.bus, a.to_bus) == (b.kind, b.bus, b.to_bus)
    report = atk.security_metrics(case14, meas14)
    assert report.bar_method == "exact"
    assert all(e.alpha_bar is not None for e in report.entries)


def test_report_json(oracle_case):
    _, _, model = oracle_case
    groups = {k: f"R{k % 2}" for k in model.rows}
    report = atk.security_metric_exact(model, rtu_groups=groups)
    doc = json.loads(json.dumps(report.to_json()))
    assert [set(d) for d in doc] == [{"k", "alpha", "alpha_bar", "support", "rtus"}] * len(doc)
    assert all(d["k"] == e.k + 1 for d, e in zip(doc, report.entries))
    assert all(d["rtus"] for d in doc)


def test_side_files():
    assert atk.parse_protected("3\n\n7\n") == frozenset({2, 6})
    with pytest.raises(ValueError):
        atk.parse_protected("0\n")
    with pytest.raises(ValueError):
        atk.parse_protected("x\n")
    assert atk.parse_rtu_groups("A: 1,2\nB: 3\n") == {0: "A", 1: "A", 2: "B"}
    with pytest.raises(ValueError):
        atk.parse_rtu_groups("A: 1\nB: 1\n")


def test_deterministic_tie_break(oracle_case):
    _, _, model = oracle_case
    a = atk.security_metric_exact(model).to_json()
    b = atk.security_metric_exact(model).to_json()
    assert a == b
    for d in a:
        # lexicographically smallest among all minimum supports
        k = d["k"] - 1
        n_min = d["alpha"]
        others = [i for i in model.rows if i != k and i not in model.protected]
        for extra in combinations(others, n_min - 1):
            sup = sorted(set(extra) | {k})
            if [i + 1 for i in sup] < d["support"]:
                zero = [model.row_of(i) for i in model.rows if i not in sup]
                assert np.linalg.matrix_rank(np.vstack([model.H[zero], model.H[model.row_of(k)]])) == \
                    np.linalg.matrix_rank(model.H[zero])
