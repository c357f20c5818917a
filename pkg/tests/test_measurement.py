import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import finite_difference_jacobian
from stealthse.measurement import (
    Kind,
    Measurement,
    MeasurementFileError,
    MeasurementSet,
    StateVector,
    build_dc_jacobian,
    eval_h,
    eval_jacobian,
    full_measurement_set,
    load_measurements,
    parse_measurements,
    serialize_measurements,
    simulate_measurements,
)
from stealthse.netmodel import Branch, Bus, Network, load_case


def lossless(n=4):
    buses = tuple(Bus(i, 3 if i == 1 else 1) for i in range(1, n + 1))
    branches = [Branch(i, i + 1, 0.0, 0.1 + 0.05 * i) for i in range(1, n)] + [Branch(1, n, 0.0, 0.3)]
    return Network(buses, tuple(branches), 100.0)


def random_state(net, rng):
    return StateVector(rng.uniform(-0.3, 0.3, net.n_bus - 1), rng.uniform(0.9, 1.1, net.n_bus))


def test_flat_start_zero_shunts():
    net = lossless()
    mset = full_measurement_set(net)
    h = eval_h(net, mset, StateVector.flat(net))
    volt = np.array([ms.kind == Kind.VMAG for ms in mset.measurements])
    np.testing.assert_allclose(h[~volt], 0, atol=1e-15)
    np.testing.assert_array_equal(h[volt], 1.0)


def test_two_bus_flow_value():
    net = load_case("case2")
    mset = MeasurementSet((Measurement(Kind.PFLOW, 1, 2),))
    h = eval_h(net, mset, StateVector(np.array([-0.1]), np.ones(2)))
    assert h[0] == pytest.approx(10 * np.sin(0.1), abs=1e-12)


def test_vmag_identity(rng):
    net = load_case("case4")
    mset = MeasurementSet(tuple(Measurement(Kind.VMAG, b) for b in (1, 2, 3, 4)))
    x = random_state(net, rng)
    np.testing.assert_array_equal(eval_h(net, mset, x), x.vm)
    H = eval_jacobian(net, mset, x).H
    np.testing.assert_array_equal(H[:, 3:], np.eye(4))
    np.testing.assert_array_equal(H[:, :3], 0)


@pytest.mark.parametrize("name", ["case3", "case4", "case14"])
def test_jacobian_matches_finite_differences(name, rng):
    net = load_case(name)
    mset = full_measurement_set(net)
    for _ in range(5):
        x = random_state(net, rng)
        H = eval_jacobian(net, mset, x).H
        fd = finite_difference_jacobian(lambda v: eval_h(net, mset, StateVector.from_array(net, v)), x.as_array(), 1e-5)
        np.testing.assert_allclose(H, fd, rtol=1e-6, atol=1e-6 * max(1.0, np.abs(fd).max()))


def test_flow_row_at_flat_start():
    net = lossless(3)
    mset = MeasurementSet((Measurement(Kind.PFLOW, 2, 3),))
    H = eval_jacobian(net, mset, StateVector.flat(net)).H
    b = (1 / (1j * net.branches[1].x)).imag
    # columns theta_2, theta_3, V_1..V_3
    np.testing.assert_allclose(H[0], [-b, b, 0, 0, 0], atol=1e-12)


def test_blocks_partition(meas14, case14):
    J = eval_jacobian(case14, meas14, StateVector.flat(case14))
    act = meas14.active.sum()
    assert J.H_Ptheta.shape == (act, 13)
    assert J.H_PV.shape == (act, 14)
    assert J.H_Qtheta.shape == (meas14.m - act, 13)
    assert J.H_QV.shape == (meas14.m - act, 14)


def test_dc_two_bus_entry():
    net = load_case("case2")
    mset = MeasurementSet((Measurement(Kind.PFLOW, 1, 2),))
    # d P12 / d theta2 = b_12 = -1/x
    np.testing.assert_allclose(build_dc_jacobian(net, mset), [[-10.0]])


def test_dc_injection_is_sum_of_flows(case14):
    mset = full_measurement_set(case14, reactive=False, voltages=False)
    H = build_dc_jacobian(case14, mset)
    labels = [ms for ms in mset.measurements]
    for r, ms in enumerate(labels):
        if ms.kind != Kind.PINJ:
            continue
        flows = [q for q, f in enumerate(labels) if f.kind == Kind.PFLOW and f.bus == ms.bus]
        np.testing.assert_allclose(H[r], H[flows].sum(axis=0), atol=1e-12)


def test_dc_ignores_resistance():
    net = load_case("case4")
    mset = full_measurement_set(net)
    lossy = Network(net.buses, tuple(Branch(b.from_bus, b.to_bus, 0.5, b.x, b.b) for b in net.branches), net.base_mva)
    np.testing.assert_array_equal(build_dc_jacobian(net, mset), build_dc_jacobian(lossy, mset))


def test_dc_matches_lossless_jacobian_at_flat_start():
    net = lossless(5)
    mset = full_measurement_set(net)
    J = eval_jacobian(net, mset, StateVector.flat(net))
    np.testing.assert_allclose(build_dc_jacobian(net, mset), J.H_Ptheta, atol=1e-12)


def test_dc_empty_active_subset():
    net = load_case("case2")
    with pytest.raises(ValueError):
        build_dc_jacobian(net, MeasurementSet((Measurement(Kind.VMAG, 1),)))


def test_no_reference_angle_column(case14, meas14):
    assert eval_jacobian(case14, meas14, StateVector.flat(case14)).H.shape[1] == 2 * 14 - 1


def test_simulate_noise_free_and_deterministic(case14, meas14):
    x = case14.true_state()
    exact = simulate_measurements(case14, meas14, x, noise_scale=0.0)
    np.testing.assert_array_equal(exact.values, eval_h(case14, meas14, x))
    a = simulate_measurements(case14, meas14, x, noise_seed=4)
    b = simulate_measurements(case14, meas14, x, noise_seed=4)
    np.testing.assert_array_equal(a.values, b.values)
    np.testing.assert_array_equal(a.values[meas14.pseudo], exact.values[meas14.pseudo])


def test_pseudo_values_are_zero_injections(case14, meas14, exact14):
    np.testing.assert_allclose(exact14.values[meas14.pseudo], 0, atol=1e-8)


def test_simulated_noise_std():
    net = load_case("case3")
    mset = MeasurementSet((Measurement(Kind.PFLOW, 1, 2, sigma=2.0), Measurement(Kind.VMAG, 2, sigma=0.5)))
    x = net.true_state()
    h = eval_h(net, mset, x)
    draws = np.array([simulate_measurements(net, mset, x, noise_seed=s, noise_scale=0.01).values - h for s in range(10_000)])
    np.testing.assert_allclose(draws.std(axis=0), [0.02, 0.005], rtol=0.05)


@settings(max_examples=40, deadline=None)
@given(
    theta=arrays(np.float64, 4, elements=st.floats(-0.3, 0.3)),
    vm=arrays(np.float64, 5, elements=st.floats(0.9, 1.1)),
)
def test_lossless_power_balance_and_antisymmetry(theta, vm):
    net = lossless(5)
    x = StateVector(theta, vm)
    inj = MeasurementSet(tuple(Measurement(Kind.PINJ, b) for b in range(1, 6)))
    assert abs(eval_h(net, inj, x).sum()) < 1e-10
    fl = MeasurementSet((Measurement(Kind.PFLOW, 1, 2), Measurement(Kind.PFLOW, 2, 1)))
    p12, p21 = eval_h(net, fl, x)
    assert p12 == pytest.approx(-p21, abs=1e-12)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_jacobian_property(seed):
    net = load_case("case4")
    mset = full_measurement_set(net)
    x = random_state(net, np.random.default_rng(seed))
    fd = finite_difference_jacobian(lambda v: eval_h(net, mset, StateVector.from_array(net, v)), x.as_array(), 1e-5)
    np.testing.assert_allclose(eval_jacobian(net, mset, x).H, fd, rtol=1e-6, atol=1e-7)


def test_state_vector_validation(case14):
    with pytest.raises(ValueError):
        StateVector(np.zeros(13), np.r_[np.ones(13), 0.0])
    with pytest.raises(ValueError):
        StateVector.from_array(case14, np.zeros(26))


def test_file_round_trip(meas14):
    again = parse_measurements(serialize_measurements(meas14))
    assert again == meas14


def test_file_errors():
    with pytest.raises(MeasurementFileError) as err:
        parse_measurements("PFLOW 1 2 1.0\nPINJ 4\n")
    assert err.value.line == 2
    with pytest.raises(MeasurementFileError):
        parse_measurements("PFLOW 1 2 1.0\n\nPINJ 4 1.0\n")
    with pytest.raises(MeasurementFileError):
        parse_measurements("CURRENT 1 2 1.0\n")
    with pytest.raises(MeasurementFileError):
        parse_measurements("PINJ 4 0.0\n")
    assert parse_measurements("PINJ 4 1.0 PSEUDO\n")[0].pseudo


def test_validate_against_network():
    net = load_case("case3")
    with pytest.raises(MeasurementFileError, match="unknown bus 9"):
        parse_measurements("PINJ 9 1.0\n").validate(net)
    net4 = load_case("case4")
    with pytest.raises(MeasurementFileError, match="no in-service branch"):
        parse_measurements("PFLOW 2 4 1.0\n").validate(net4)


def test_bundled_sets_load():
    for name in ("case2", "case3", "case4", "case14"):
        assert load_measurements(name, load_case(name)).m > 0
