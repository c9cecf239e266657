"""Regenerate the JSON feeders shipped in src/phaseid/data."""

import json
from pathlib import Path

import numpy as np

OUT = Path(__file__).resolve().parents[1] / "src" / "phaseid" / "data"

# overhead three-wire configuration, ohm per mile
Z_MILE = np.array([
    [0.3465 + 1.0179j, 0.1560 + 0.5017j, 0.1580 + 0.4236j],
    [0.1560 + 0.5017j, 0.3375 + 1.0478j, 0.1535 + 0.3849j],
    [0.1580 + 0.4236j, 0.1535 + 0.3849j, 0.3414 + 1.0348j],
])


def cmat(z):
    return [[[float(v.real), float(v.imag)] for v in row] for row in np.atleast_2d(z)]


def line(i, f, t, miles):
    return {"id": i, "from": f, "to": t, "length_mi": miles, "z_ohm": cmat(Z_MILE * miles)}


SINGLE_Z = [0.004, 0.003]
TWO_Z = [[[0.004, 0.003], [0.001, 0.0008]], [[0.001, 0.0008], [0.004, 0.003]]]


def feeder(name, nodes, lines, branches, loads, note):
    return {"name": name, "description": note, "base_voltage_v": 7200.0,
            "base_power_va": 1.0e6, "substation": nodes[0],
            "nodes": [{"id": n} for n in nodes], "lines": lines,
            "service_branches": branches, "loads": loads}


def eight_node():
    nodes = [f"n{k}" for k in range(8)]
    lines = [line("l01", "n0", "n1", 1.0), line("l12", "n1", "n2", 0.5),
             line("l23", "n2", "n3", 0.4), line("l34", "n3", "n4", 0.6),
             line("l15", "n1", "n5", 0.5), line("l56", "n5", "n6", 0.3),
             line("l67", "n6", "n7", 0.7), line("l47", "n4", "n7", 0.8)]
    branches = [
        {"id": "s1", "kind": "single", "node": "n2", "z_pu": SINGLE_Z},
        {"id": "s2", "kind": "single", "node": "n4", "z_pu": SINGLE_Z},
        {"id": "s3", "kind": "single", "node": "n6", "z_pu": SINGLE_Z},
        {"id": "d1", "kind": "two", "node": "n3", "z_pu": TWO_Z},
        {"id": "d2", "kind": "two", "node": "n7", "z_pu": TWO_Z},
    ]
    spec = [  # id, class, attach, phase
        ("L01", "single", "n1", "A"), ("L02", "single", "n2", "B"),
        ("L03", "single", "s1", "C"), ("L04", "single", "n3", "A"),
        ("L05", "single", "n4", "B"), ("L06", "single", "s2", "A"),
        ("L07", "single", "n5", "C"), ("L08", "single", "n5", "B"),
        ("L09", "single", "n6", "A"), ("L10", "single", "s3", "B"),
        ("L11", "single", "n7", "C"), ("L12", "single", "n7", "A"),
        ("L13", "single", "n2", "C"), ("L14", "single", "n4", "C"),
        ("L15", "single", "n6", "B"), ("L16", "single", "n3", "C"),
        ("L17", "two", "n2", "AB"), ("L18", "two", "d1", "AB"),
        ("L19", "two", "n6", "AB"), ("L20", "two", "n4", "BC"),
        ("L21", "two", "d2", "BC"), ("L22", "two", "n5", "CA"),
        ("L23", "two", "n3", "CA"), ("L24", "three", "n1", "B"),
        ("L25", "three", "n7", "C"),
    ]
    ids = {b["id"] for b in branches}
    loads = [{"id": i, "class": c, ("branch" if a in ids else "node"): a, "phase": p}
             for i, c, a, p in spec]
    return feeder("meshed-8", nodes, lines, branches, loads,
                  "Seven non-substation nodes with one loop (n1-n2-n3-n4-n7-n6-n5-n1); "
                  "25 loads covering all seven connection types.")


def two_node():
    return feeder("two-node", ["n0", "n1"], [line("l01", "n0", "n1", 0.5)], [],
                  [{"id": "L1", "class": "single", "node": "n1", "phase": "B"}],
                  "Smallest possible feeder: one line, one load.")


def four_load():
    nodes = ["n0", "n1", "n2"]
    lines = [line("l01", "n0", "n1", 0.8), line("l12", "n1", "n2", 0.6)]
    branches = [{"id": "s1", "kind": "single", "node": "n2", "z_pu": SINGLE_Z}]
    loads = [{"id": "L1", "class": "single", "node": "n1", "phase": "A"},
             {"id": "L2", "class": "two", "node": "n2", "phase": "BC"},
             {"id": "L3", "class": "single", "branch": "s1", "phase": "C"},
             {"id": "L4", "class": "two", "node": "n1", "phase": "AB"}]
    return feeder("four-load", nodes, lines, branches, loads, "Radial, four loads.")


def five_load_three_phase():
    nodes = ["n0", "n1", "n2", "n3"]
    lines = [line("l01", "n0", "n1", 0.7), line("l12", "n1", "n2", 0.5),
             line("l13", "n1", "n3", 0.9)]
    loads = [{"id": "L1", "class": "single", "node": "n2", "phase": "A"},
             {"id": "L2", "class": "single", "node": "n3", "phase": "B"},
             {"id": "L3", "class": "two", "node": "n2", "phase": "CA"},
             {"id": "L4", "class": "three", "node": "n3", "phase": "B"},
             {"id": "L5", "class": "single", "node": "n1", "phase": "C"}]
    return feeder("five-load-3ph", nodes, lines, [], loads,
                  "Radial, five loads including one three-phase service.")


if __name__ == "__main__":
    OUT.mkdir(parents=True, exist_ok=True)
    for fname, doc in [("feeder_8node.json", eight_node()), ("feeder_2node.json", two_node()),
                       ("feeder_4load.json", four_load()),
                       ("feeder_5load_3ph.json", five_load_three_phase())]:
        (OUT / fname).write_text(json.dumps(doc, indent=1) + "\n")
        print("wrote", fname)
