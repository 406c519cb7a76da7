import json
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from backofflab.blocks import (
    BlockTable,
    ConstantsInfeasible,
    I_of_tau,
    TableExhausted,
    bins_lower_bound,
    bins_of_tau,
    bins_size,
    block_lower,
    block_size,
    block_upper,
    build_block_table,
    suitable_fraction,
    verify_table,
)
from backofflab.sequences import binary_exponential, constant, explicit, polynomial


@pytest.fixture(scope="module")
def ones_table():
    # All p_j = 1, kappa = ceil(3 / 0.5) = 6, I0 = 1.
    return build_block_table(constant(1.0), 0.48, 0.5, 0.5, overrides=dict(I0=1, tau_init=1, C_init=1), max_block=4)


@pytest.fixture(scope="module")
def flat_table():
    # p_j = 1e-6 for j >= 1 is below p_* everywhere, so I0 and C_init can be derived;
    # only tau_init is scaled down (its 1e7 / lambda^2 floor is out of reach).
    seq = explicit([1.0, 1e-6])
    return seq, build_block_table(seq, 0.5, 0.9, 0.5, overrides=dict(kappa=3, zeta=200.0, tau_init=30))


def test_block_bounds_kappa_six():
    assert [block_upper(6, i) for i in range(1, 5)] == [1, 6, 36, 216]
    assert block_size(6, 2) == 5
    assert block_lower(6, 1) == 1 and block_lower(6, 2) == 2


@pytest.mark.parametrize("kappa", range(3, 13))
def test_block_identities(kappa):
    for i in range(1, 13):
        assert block_upper(kappa, i) == kappa ** (i - 1)
        if i >= 2:
            assert block_lower(kappa, i) == block_upper(kappa, i - 1) + 1
            assert block_size(kappa, i) * kappa == block_upper(kappa, i) * (kappa - 1)


def test_all_ones_weights_and_first_tau(ones_table):
    t = ones_table
    assert t.kappa == 6
    assert t.weights[:3] == (1, 5, 30)
    assert t.tau[:2] == (0, 42)


def test_zeta_formula(ones_table):
    assert ones_table.zeta == pytest.approx(0.01)


def test_I_of_tau_boundaries(ones_table):
    t = ones_table
    assert I_of_tau(t, 0) == t.I0 + 1
    assert I_of_tau(t, 41) == 2
    assert I_of_tau(t, 42) == 3


def test_bins_of_tau(ones_table):
    assert bins_of_tau(ones_table, 0) == (1, 1)
    assert bins_of_tau(ones_table, 42) == (2, 6)


def test_table_exhausted(ones_table):
    with pytest.raises(TableExhausted):
        I_of_tau(ones_table, ones_table.tau[-1])
    with pytest.raises(ValueError):
        I_of_tau(ones_table, -1)


def test_telescoping_identity(ones_table):
    t = ones_table
    for i in range(2, len(t.tau)):
        assert t.tau[i] - t.tau[i - 1] == t.kappa * sum(t.ceil_weight(k) for k in range(1, t.I0 + i + 1))


@settings(max_examples=80, deadline=None)
@given(a=st.integers(0, 1553), b=st.integers(0, 1553))
def test_I_of_tau_nondecreasing(a, b):
    t = build_block_table(constant(1.0), 0.48, 0.5, 0.5, overrides=dict(I0=1, tau_init=1, C_init=1), max_block=4)
    lo, hi = sorted((a, b))
    assert I_of_tau(t, lo) <= I_of_tau(t, hi)


def test_bins_lower_bound_on_polynomial_toy():
    seq = polynomial(1)
    t = build_block_table(seq, 0.5, 0.9, 0.5, overrides=dict(kappa=3, I0=1), max_block=16)
    probes = [x for x in t.tau[:-1] if x >= t.tau_init] + [t.tau_init]
    assert probes
    for x in probes:
        assert bins_size(t, x) > bins_lower_bound(t, x)


def test_derived_tau_init_reverifies():
    seq = polynomial(1)
    t = build_block_table(seq, 0.5, 0.9, 0.5, overrides=dict(kappa=3, I0=1))
    checks = verify_table(t, seq)
    assert checks and all(checks.values())
    assert t.tau_init >= 1e7 / 0.5**2


def test_derived_constants_reverify(flat_table):
    seq, t = flat_table
    checks = verify_table(t, seq)
    assert {"I0>=j_min", "zeta|B_I0|>=4", "C_init formula"} <= set(checks)
    assert all(checks.values()), checks
    assert t.overrides == {"kappa": 3, "zeta": 200.0, "tau_init": 30}


def test_suitable_fraction_property(flat_table):
    seq, t = flat_table
    for i in range(t.I0, t.I0 + 4):
        small, need = suitable_fraction(t, seq, i)
        assert small > need


def test_realistic_constants_infeasible():
    with pytest.raises(ConstantsInfeasible):
        build_block_table(binary_exponential(), 0.5, 0.5, 0.4)


def test_unknown_override_rejected():
    with pytest.raises(ValueError):
        build_block_table(constant(1.0), 0.5, 0.5, 0.5, overrides={"bogus": 1})


def test_p0_must_be_one():
    with pytest.raises(ValueError):
        build_block_table(constant(0.5), 0.5, 0.5, 0.5, overrides=dict(I0=1, tau_init=1, C_init=1))


def test_json_round_trip(flat_table):
    _, t = flat_table
    back = BlockTable.from_dict(t.to_dict())
    assert back == t
    assert BlockTable.from_dict(json.loads(t.to_json())) == t


def test_csv_dump(ones_table):
    lines = ones_table.to_csv().splitlines()
    assert lines[0] == "i,lower,upper,W_i,tau_i"
    assert lines[1] == "1,1,1,1,42"
    assert lines[2] == "2,2,6,5,258"


def test_bins_bound_formula(ones_table):
    assert bins_lower_bound(ones_table, 100) == pytest.approx(math.log(100) / (2 * 36 * math.log(2)))
