import numpy as np
import pytest

from stealthse.data import bundled_names
from stealthse.netmodel import (
    Branch,
    Bus,
    CaseSemanticError,
    CaseSyntaxError,
    Network,
    build_admittance,
    load_case,
    neighborhood,
    parse_case,
    serialize_case,
)

TWO_BUS = """
mpc.baseMVA = 100;
mpc.bus = [
  1 3 0 0 0 0 1 1.0 0 0 1 1.1 0.9;
  2 1 0 0 0 0 1 1.0 0 0 1 1.1 0.9;
];
mpc.branch = [
  1 2 0 0.1 0 0 0 0 0 0 1 -360 360;
];
"""


def _net(branches, n=3, shunts=None):
    shunts = shunts or {}
    buses = tuple(
        Bus(i, 3 if i == 1 else 1, bs=shunts.get(i, 0.0)) for i in range(1, n + 1)
    )
    return Network(buses, tuple(Branch(*b) for b in branches), 100.0)


def test_two_bus_minimal():
    net = parse_case(TWO_BUS)
    assert net.n_bus == 2 and len(net.branches) == 1
    assert net.buses[net.ref].id == 1


def test_ieee14_counts(case14):
    assert case14.n_bus == 14
    assert len(case14.branches) == 20
    assert case14.n_state == 27


def test_dangling_endpoint_names_bus():
    text = TWO_BUS.replace("1 2 0 0.1", "1 99 0 0.1")
    with pytest.raises(CaseSemanticError, match="99"):
        parse_case(text)


@pytest.mark.parametrize(
    "edit, msg",
    [
        (("2 1 0 0 0 0", "1 1 0 0 0 0"), "duplicate"),
        (("1 3 0 0", "1 1 0 0"), "reference"),
    ],
)
def test_semantic_errors(edit, msg):
    with pytest.raises(CaseSemanticError, match=msg):
        parse_case(TWO_BUS.replace(*edit, 1))


def test_disconnected_rejected():
    with pytest.raises(CaseSemanticError, match="connected"):
        _net([(1, 2, 0.0, 0.1)], n=3)


def test_syntax_error_reports_position():
    text = TWO_BUS.replace("1 2 0 0.1", "1 2 0 abc")
    with pytest.raises(CaseSyntaxError) as err:
        parse_case(text)
    assert err.value.line == 8
    assert err.value.column > 0


def test_tap_ratio_rejected():
    text = TWO_BUS.replace("1 2 0 0.1 0 0 0 0 0", "1 2 0 0.1 0 0 0 0 0.98")
    with pytest.raises(CaseSemanticError, match="tap"):
        parse_case(text)


def test_admittance_single_branch():
    Y = build_admittance(parse_case(TWO_BUS))
    np.testing.assert_allclose(Y, [[-10j, 10j], [10j, -10j]], atol=1e-12)


def test_shunt_touches_diagonal_only():
    base = _net([(1, 2, 0.01, 0.1), (2, 3, 0.02, 0.2), (1, 3, 0.0, 0.3)])
    bumped = _net([(1, 2, 0.01, 0.1), (2, 3, 0.02, 0.2), (1, 3, 0.0, 0.3)], shunts={1: 5.0})
    d = bumped.ybus - base.ybus
    # 5 MVAr on a 100 MVA base
    assert d[0, 0].imag == pytest.approx(0.05)
    d[0, 0] = 0
    assert np.all(d == 0)


def test_no_in_service_branches_rejected():
    with pytest.raises(CaseSemanticError):
        _net([(1, 2, 0.0, 0.1, 0.0, False)], n=2)


def test_row_sums_zero_without_shunts():
    net = _net([(1, 2, 0.01, 0.1), (2, 3, 0.02, 0.2), (1, 3, 0.03, 0.3)])
    np.testing.assert_allclose(net.ybus.sum(axis=1), 0, atol=1e-12)


def test_ybus_symmetric(case14):
    np.testing.assert_allclose(case14.ybus, case14.ybus.T, atol=1e-12)


def test_branch_removal_changes_four_entries():
    net = _net([(1, 2, 0.01, 0.1), (2, 3, 0.02, 0.2), (1, 3, 0.0, 0.3)])
    d = net.ybus - net.with_branch_status(1, False).ybus
    changed = set(zip(*np.nonzero(np.abs(d) > 1e-12)))
    assert changed == {(1, 1), (2, 2), (1, 2), (2, 1)}


def test_neighborhood():
    net = parse_case(TWO_BUS)
    assert neighborhood(net, 1) == {2}
    star = _net([(1, 2, 0, 0.1), (1, 3, 0, 0.1), (1, 4, 0, 0.1)], n=4)
    assert neighborhood(star, 1) == {2, 3, 4}
    with pytest.raises(KeyError):
        neighborhood(star, 7)


def test_isolating_a_bus_is_rejected():
    # a bus whose branches are all out of service would have an empty
    # neighborhood, but such a network fails the connectivity check
    net = _net([(1, 2, 0, 0.1), (2, 3, 0, 0.1), (1, 3, 0, 0.1)])
    assert neighborhood(net.with_branch_status(2, False), 3) == {2}
    with pytest.raises(CaseSemanticError):
        net.with_branch_status(1, False).with_branch_status(2, False)


@pytest.mark.parametrize("name", bundled_names(".m"))
def test_round_trip(name):
    net = load_case(name)
    again = parse_case(serialize_case(net))
    assert again == net
    np.testing.assert_array_equal(again.ybus, net.ybus)
