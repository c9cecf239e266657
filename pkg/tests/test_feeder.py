import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from phaseid import load_fixture, parse_feeder, reduce_network
from phaseid.feeder import (FeederError, assemble_admittance, reduce_measurement,
                            reduce_single_phase_branch, reduce_two_phase_branch)

from conftest import feeder_doc, minimal_doc

finite = st.floats(-2.0, 2.0, allow_nan=False)


def test_minimal_feeder_parses():
    fm = parse_feeder(json.dumps(minimal_doc()))
    assert fm.n_nodes == 1
    assert len(fm.loads) == 1
    assert fm.truth() == {"L1": "A"}


def test_ohms_are_converted_with_the_impedance_base():
    doc = minimal_doc()
    del doc["lines"][0]["z_pu"]
    doc["lines"][0]["z_ohm"] = [[[51.84, 0.0] if r == c else [0, 0] for c in range(3)]
                                for r in range(3)]
    fm = parse_feeder(json.dumps(doc))
    # 7200^2 / 1e6 = 51.84 ohm
    assert np.allclose(np.diag(fm.lines[0].z), 1.0)


def test_unknown_node_is_reported():
    doc = minimal_doc()
    doc["lines"][0]["to"] = "nowhere"
    with pytest.raises(FeederError, match="unknown node"):
        parse_feeder(json.dumps(doc))


@pytest.mark.parametrize("mutate, message", [
    (lambda d: d["nodes"].append({"id": "n1"}), "duplicate node"),
    (lambda d: d["loads"].append(dict(d["loads"][0])), "duplicate load"),
    (lambda d: d["nodes"].append({"id": "island"}), "disconnected"),
    (lambda d: d["lines"][0]["z_pu"][0].__setitem__(0, [float("nan"), 0.0]), "finite"),
    (lambda d: d.pop("base_voltage_v"), "base_voltage_v"),
    (lambda d: d["loads"][0].__setitem__("class", "four"), "class"),
    (lambda d: d["loads"][0].__setitem__("phase", "AB"), "not valid"),
])
def test_schema_violations(mutate, message):
    doc = minimal_doc()
    mutate(doc)
    with pytest.raises((FeederError, ValueError), match=message):
        parse_feeder(json.dumps(doc))


def test_branch_class_must_match_branch_kind():
    doc = minimal_doc()
    doc["service_branches"] = [{"id": "b", "kind": "two", "node": "n1",
                                "z_pu": [[[0.01, 0], [0, 0]], [[0, 0], [0.01, 0]]]}]
    doc["loads"][0] = {"id": "L1", "branch": "b", "class": "single"}
    with pytest.raises(FeederError, match="does not match"):
        parse_feeder(json.dumps(doc))


def test_meshed_fixture_structure(meshed):
    assert meshed.n_nodes == 7
    assert meshed.has_cycle()
    counts = {}
    for ld in meshed.loads:
        counts[ld.phase if ld.conn_class != "three" else "ABC"] = \
            counts.get(ld.phase if ld.conn_class != "three" else "ABC", 0) + 1
    assert counts == {"A": 5, "B": 5, "C": 6, "AB": 3, "BC": 2, "CA": 2, "ABC": 2}


# --- lateral reduction -----------------------------------------------------

def test_single_branch_zero_impedance_is_identity():
    v, S = reduce_single_phase_branch(0.0, 0.1 + 0.05j, 0.98)
    assert v == pytest.approx(0.98) and S == pytest.approx(0.1 + 0.05j)


def test_single_branch_worked_value():
    v, S = reduce_single_phase_branch(0.01 + 0.02j, 1.0 + 0.0j, 1.0)
    assert v == pytest.approx(abs(1 - (0.01 + 0.02j)), abs=1e-12)
    assert v == pytest.approx(0.990202, abs=1e-6)
    assert S == pytest.approx(0.99 - 0.02j)


def test_single_branch_no_current_no_drop():
    v, S = reduce_single_phase_branch(0.3 + 0.1j, 0j, 1.0)
    assert (v, S) == (pytest.approx(1.0), 0j)


def test_two_phase_branch_worked_value():
    zb = np.array([[0.02 + 0.04j, 0.005 + 0.01j], [0.005 + 0.01j, 0.02 + 0.04j]])
    v, S = reduce_two_phase_branch(zb, 1.0 + 0j, 1.0)
    assert v == pytest.approx(abs(1 + (-0.03 - 0.06j)), abs=1e-12)
    assert v == pytest.approx(0.971855, abs=2e-6)
    assert S == pytest.approx(0.97 - 0.06j)


def test_two_phase_branch_cancelling_block():
    zb = np.array([[0.01 + 0.01j, 0.01 + 0.01j], [0.01 + 0.01j, 0.01 + 0.01j]])
    v, S = reduce_two_phase_branch(zb, 0.3 - 0.1j, 1.7)
    assert v == pytest.approx(1.7) and S == pytest.approx(0.3 - 0.1j)
    assert reduce_two_phase_branch(zb * 5, 0j, 1.7) == (pytest.approx(1.7), 0j)


def test_reduction_rejects_nonpositive_voltage():
    with pytest.raises(ValueError):
        reduce_single_phase_branch(0.01j, 0.1, 0.0)
    with pytest.raises(ValueError):
        reduce_two_phase_branch(np.eye(2), 0.1, -1.0)


@settings(max_examples=200, deadline=None)
@given(finite, finite, st.floats(0.5, 2.0), st.floats(-0.05, 0.05), st.floats(0.0, 0.05))
def test_reduction_matches_physical_lateral(p, q, vm, r, x):
    """The reduced port quantities reproduce the lateral circuit exactly.

    Put the meter at angle zero, derive the current it injects, and walk
    back along the lateral: ``V_port = V_meter - z I`` and
    ``S_port = V_port conj(I)``.
    """
    z = complex(r, x)
    S = complex(p, q)
    I = np.conj(S / vm)
    V_port = vm - z * I
    v_eq, S_eq = reduce_single_phase_branch(z, S, vm)
    assert v_eq == pytest.approx(abs(V_port), rel=1e-12, abs=1e-14)
    assert S_eq == pytest.approx(V_port * np.conj(I), rel=1e-10, abs=1e-12)


def test_reduce_network_preserves_loads(meshed):
    red = reduce_network(meshed)
    assert red.load_ids == tuple(ld.id for ld in meshed.loads)
    assert red.classes == tuple(ld.conn_class for ld in meshed.loads)
    assert sum(ld.is_secondary for ld in red.loads) == 5
    hosted = {ld.id: ld.node for ld in red.loads}
    assert hosted["L03"] == meshed.node_ids.index("n2")


def test_reduce_network_without_branches_is_unchanged():
    fm = load_fixture("feeder_5load_3ph")
    red = reduce_network(fm)
    assert [ld.node for ld in red.loads] == [ld.node for ld in fm.loads]
    assert not any(ld.is_secondary for ld in red.loads)


def test_zero_impedance_reduction_is_exact_identity():
    fm = load_fixture("feeder_4load")
    red = reduce_network(fm)
    for ld in red.loads:
        zero = type(ld)(ld.id, ld.node, ld.conn_class, ld.branch_kind,
                        0j if ld.branch_kind else None)
        v, S = reduce_measurement(zero, np.array([1.01, 0.99]), np.array([0.1 + 0.02j, -0.3j]))
        assert np.array_equal(v, [1.01, 0.99]) and np.array_equal(S, [0.1 + 0.02j, -0.3j])


def test_branch_chains_and_shared_branches_rejected():
    doc = feeder_doc("feeder_4load")
    doc["service_branches"].append({"id": "s2", "kind": "single", "branch": "s1",
                                    "z_pu": [0.01, 0.0]})
    with pytest.raises(FeederError, match="depth"):
        reduce_network(parse_feeder(json.dumps(doc)))
    doc = feeder_doc("feeder_4load")
    doc["loads"].append({"id": "L9", "class": "single", "branch": "s1"})
    with pytest.raises(FeederError, match="more than one load"):
        reduce_network(parse_feeder(json.dumps(doc)))


# --- admittance --------------------------------------------------------------

def test_single_line_admittance_blocks():
    fm = parse_feeder(json.dumps(minimal_doc()))
    Y = assemble_admittance(fm)
    y = 1 / (0.01 + 0.02j)
    assert Y.Y.shape == (6, 6)
    # phase-ordered: index p * 2 + node
    for p in range(3):
        blk = Y.Y[[2 * p, 2 * p + 1]][:, [2 * p, 2 * p + 1]]
        assert np.allclose(blk, [[y, -y], [-y, y]])


def test_admittance_properties(any_fixture):
    Y = assemble_admittance(any_fixture).Y
    assert np.allclose(Y, Y.T)
    assert np.allclose(Y.sum(axis=1), 0, atol=1e-9 * np.abs(Y).max())
    s = np.linalg.svd(Y, compute_uv=False)
    assert int(np.sum(s > 1e-8 * s[0])) == 3 * any_fixture.n_nodes


def test_meshed_admittance_rank(meshed):
    s = np.linalg.svd(assemble_admittance(meshed).Y, compute_uv=False)
    assert int(np.sum(s > 1e-8 * s[0])) == 21


def test_singular_line_block_reports_section():
    doc = minimal_doc()
    doc["lines"][0]["z_pu"] = [[[0.01, 0.0]] * 3] * 3
    with pytest.raises(FeederError, match="l1"):
        assemble_admittance(parse_feeder(json.dumps(doc)))
