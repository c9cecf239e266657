"""Per-load marginal likelihood identification and aggregation.

Every load ``m`` gets its own estimate of the full assignment by solving
three relaxed subproblems (one per candidate phase of m) and keeping the
candidate with the smallest marginal objective ``f_m``.  The M estimates
are merged by *target-only* (each load keeps its own answer) and by
*voting*; the merge with the smaller ``sum_m f_m`` wins.
"""

from __future__ import annotations

import contextlib
import itertools
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .connection import (PhaseAssignment, ReducedSensitivity, build_block_tables,
                         build_reduced_sensitivity)
from .feeder import FeederModel, ReducedNetwork, as_reduced, reduce_network
from .linear_pf import network_sensitivities
from .measurements import MeasurementError, difference_series, refer_to_primary
from .slsq import build_subproblem, round_solution, solve_relaxed
from . import stats


@contextlib.contextmanager
def stage(name: str):
    """Prefix errors raised inside the block with the pipeline stage."""
    try:
        yield
    except Exception as exc:
        if getattr(exc, "_stage_tagged", False):
            raise
        try:
            new = type(exc)(f"{name}: {exc}")
        except Exception:
            raise exc
        new._stage_tagged = True
        if hasattr(exc, "best"):
            new.best = exc.best
        raise new from exc


# --------------------------------------------------------------------------
# objectives

def _sens(rs, e):
    return rs if isinstance(rs, ReducedSensitivity) else rs[e]


def predict_load(m: int, x: PhaseAssignment, ds, rs) -> np.ndarray:
    """Row ``m`` of the differenced model, computed from that row alone.

    Only load m's row of the selected sensitivities is touched, so the
    triples of loads whose columns coincide (three-phase loads) cannot
    change the result by even one bit.
    """
    sel = 3 * np.arange(x.M) + x.indices
    row = sel[m]
    out = np.empty(ds.T)
    epochs = [(slice(None), rs)] if isinstance(rs, ReducedSensitivity) else \
        [(ds.epoch == e, rs[e]) for e in np.unique(ds.epoch)]
    for rows, r in epochs:
        k_row = r.K_hat[row, sel]
        l_row = r.L_hat[row, sel]
        out[rows] = ds.vref[rows, m, x.indices[m]] + ds.p[rows] @ k_row + ds.q[rows] @ l_row
    return out


def marginal_objective(m: int, x: PhaseAssignment, ds, rs) -> float:
    """``f_m(x) = (1/T) sum_t (v_m(t) - v_m(t, x))^2``."""
    r = ds.v[:, m] - predict_load(m, x, ds, rs)
    return float(r @ r) / ds.T


def total_objective(x: PhaseAssignment, ds, rs) -> float:
    return float(sum(marginal_objective(m, x, ds, rs) for m in range(x.M)))


def joint_objective(x: PhaseAssignment, ds, rs) -> float:
    """Identity-weighted ``(1/T) sum_t |v(t) - v(t, x)|^2``."""
    r = stats.residuals(x, ds, rs)
    return float(np.sum(r * r)) / ds.T


# --------------------------------------------------------------------------
# per-load solve

@dataclass(frozen=True)
class Candidate:
    i: int
    assignment: PhaseAssignment
    f_m: float
    relaxed_objective: float
    kkt_residual: float
    iterations: int
    degenerate: bool
    trace: tuple[float, ...] = ()


@dataclass(frozen=True)
class LoadSolution:
    m: int
    i: int
    assignment: PhaseAssignment
    f_m: float
    candidates: tuple[Candidate, ...] = field(default=(), repr=False)


def solve_load(m: int, ds, rs, classes, load_ids=None, *, keep_trace=False,
               solver_options=None) -> LoadSolution:
    """Best of the three phase hypotheses for load ``m`` (ties: lowest phase)."""
    opts = dict(solver_options or {})
    cands = []
    for i in range(3):
        with stage(f"load {m}, phase {i}"):
            inst = build_subproblem(m, i, ds, rs)
            rel = solve_relaxed(inst, keep_trace=keep_trace, **opts)
        x_rest = round_solution(rel)
        idx = np.empty(len(classes), dtype=int)
        idx[m] = i
        others = [k for k in range(len(classes)) if k != m]
        idx[others] = np.argmax(x_rest, axis=1)
        x = PhaseAssignment.from_indices(idx, classes, load_ids)
        cands.append(Candidate(i, x, marginal_objective(m, x, ds, rs), rel.objective,
                               rel.kkt_residual, rel.iterations, rel.degenerate, rel.trace))
    best = min(cands, key=lambda c: (c.f_m, c.i))
    return LoadSolution(m, best.i, best.assignment, best.f_m, tuple(cands))


def aggregate_target_only(sols) -> PhaseAssignment:
    sols = sorted(sols, key=lambda s: s.m)
    ref = sols[0].assignment
    return PhaseAssignment.from_indices([s.i for s in sols], ref.classes, ref.load_ids)


def vote_tallies(sols) -> np.ndarray:
    """``(M, 3)``: how many per-load estimates put load k on phase j."""
    sols = sorted(sols, key=lambda s: s.m)
    tallies = np.zeros((len(sols), 3), dtype=int)
    for s in sols:
        tallies[np.arange(len(sols)), s.assignment.indices] += 1
    return tallies


def aggregate_voting(sols) -> PhaseAssignment:
    """Majority phase per load; three-phase loads and ties defer to target-only."""
    target = aggregate_target_only(sols)
    tallies = vote_tallies(sols)
    idx = target.indices.copy()
    for k, cls in enumerate(target.classes):
        if cls == "three":
            continue
        top = np.flatnonzero(tallies[k] == tallies[k].max())
        idx[k] = idx[k] if idx[k] in top else top[0]
    return PhaseAssignment.from_indices(idx, target.classes, target.load_ids)


# --------------------------------------------------------------------------
# report

@dataclass
class IdentificationReport:
    assignment: PhaseAssignment
    method: str
    votes: np.ndarray
    f_m: np.ndarray
    sum_f_target_only: float
    sum_f_voting: float
    target_only: PhaseAssignment
    voting: PhaseAssignment
    accuracy: float | None = None
    residual_diagnostics: list | None = None
    subproblems: list | None = None

    def as_dict(self) -> dict:
        x = self.assignment
        out = {
            "method": self.method,
            "assignments": [
                {"load": lid, "class": cls, "phase": lab,
                 "votes": [int(v) for v in self.votes[m]], "f_m": float(self.f_m[m])}
                for m, (lid, cls, lab) in enumerate(zip(x.load_ids, x.classes, x.labels()))
            ],
            "sum_f_target_only": self.sum_f_target_only,
            "sum_f_voting": self.sum_f_voting,
        }
        if self.accuracy is not None:
            out["accuracy"] = self.accuracy
        if self.residual_diagnostics is not None:
            out["residual_diagnostics"] = [r.as_dict() for r in self.residual_diagnostics]
            out["residual_note"] = stats.KS_NOTE
        if self.subproblems is not None:
            out["subproblems"] = self.subproblems
        return out

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2)

    def summary(self) -> str:
        chosen = self.sum_f_target_only if self.method == "target-only" else self.sum_f_voting
        line = f"method={self.method} sum_f={chosen:.6e} loads={self.assignment.M}"
        if self.accuracy is not None:
            line += f" accuracy={self.accuracy:.4f}"
        return line


def select_final(a: PhaseAssignment, b: PhaseAssignment, ds, rs):
    """Pick target-only ``a`` or voting ``b`` by total marginal objective.

    Returns ``(method, assignment, sum_a, sum_b)``; equal sums keep ``a``.
    """
    sa = total_objective(a, ds, rs)
    sb = sa if a == b else total_objective(b, ds, rs)
    if sb < sa:
        return "voting", b, sa, sb
    return "target-only", a, sa, sb


# --------------------------------------------------------------------------
# pipeline

def _ordered_network(net, load_ids, drop_branches=()) -> ReducedNetwork:
    red = reduce_network(net, drop_branches) if isinstance(net, FeederModel) else as_reduced(net)
    by_id = {ld.id: ld for ld in red.loads}
    missing = [lid for lid in load_ids if lid not in by_id]
    if missing:
        raise MeasurementError(f"measurements for load(s) not in the feeder: {missing}")
    return ReducedNetwork(red.node_ids, red.lines, tuple(by_id[lid] for lid in load_ids),
                          red.base_voltage, red.base_power)


def reduced_sensitivity(net: ReducedNetwork) -> ReducedSensitivity:
    return build_reduced_sensitivity(build_block_tables(net), network_sensitivities(net))


def prepare(net, ms, *, topologies=None, drop_branches=()):
    """Everything identification needs: ``(reduced net, ds, rs)``.

    ``topologies`` optionally lists the network in force for each epoch
    of ``ms`` (epoch 0 defaults to ``net``).  ``rs`` is then a list.
    """
    with stage("reduce"):
        red = _ordered_network(net, ms.load_ids, drop_branches)
        nets = [red] if not topologies else [
            _ordered_network(t, ms.load_ids, drop_branches) for t in topologies]
        # lateral transforms are a property of the meter, taken from epoch 0
        ms_eq = refer_to_primary(ms, red)
    with stage("sensitivities"):
        rs_list = [reduced_sensitivity(n) for n in nets]
    with stage("difference"):
        ds = difference_series(ms_eq, red.classes)
    n_epochs = int(ds.epoch.max()) + 1
    if n_epochs > len(rs_list):
        raise MeasurementError(f"measurements span {n_epochs} topology epochs but only "
                               f"{len(rs_list)} network(s) were given")
    rs = rs_list[0] if len(rs_list) == 1 else rs_list
    return red, ds, rs


def run_mmle(ds, rs, classes, load_ids=None, *, jobs=None, truth=None,
             diagnostics="summary", solver_options=None) -> IdentificationReport:
    """Solve every load, aggregate and select; the core of ``identify``."""
    M = ds.M
    full = diagnostics == "full"
    jobs = jobs or os.cpu_count() or 1

    def work(m):
        return solve_load(m, ds, rs, classes, load_ids, keep_trace=full,
                          solver_options=solver_options)

    if jobs > 1 and M > 1:
        with ThreadPoolExecutor(max_workers=min(jobs, M)) as pool:
            sols = list(pool.map(work, range(M)))
    else:
        sols = [work(m) for m in range(M)]

    target = aggregate_target_only(sols)
    voting = aggregate_voting(sols)
    method, final, sa, sb = select_final(target, voting, ds, rs)
    f_m = np.array([marginal_objective(m, final, ds, rs) for m in range(M)])
    report = IdentificationReport(final, method, vote_tallies(sols), f_m, sa, sb, target, voting)
    if truth:
        report.accuracy = stats.accuracy(final, truth)
    if diagnostics in ("summary", "full") and ds.T > stats.MAX_LAG:
        report.residual_diagnostics = stats.summarize_residuals(
            stats.residuals(final, ds, rs), final.load_ids or range(M))
    if full:
        report.subproblems = [
            {"load": (load_ids[s.m] if load_ids else s.m), "phase_index": c.i,
             "relaxed_objective": c.relaxed_objective, "kkt_residual": c.kkt_residual,
             "iterations": c.iterations, "degenerate": c.degenerate,
             "rounded": c.assignment.labels(), "f_m": c.f_m, "objective_trace": list(c.trace)}
            for s in sols for c in s.candidates
        ]
    return report


def exhaustive_search(ds, rs, candidate: PhaseAssignment, max_loads: int = 7,
                      rtol: float = 1e-9, atol: float = 1e-20):
    """Compare ``candidate`` with the global minimizer of ``sum_m f_m``.

    Enumerates all ``3^M`` assignments (``M <= max_loads``).  The candidate
    passes when its total objective ties the minimum; a minimizer that
    differs only in three-phase loads' triples is reported as degeneracy.

    Returns ``(ok, best, best_value, candidate_value, note)``.
    """
    M = candidate.M
    if M > max_loads:
        raise ValueError(f"3^{M} assignments exceed the enumeration limit 3^{max_loads}")
    classes, ids = candidate.classes, candidate.load_ids
    best, best_val = None, np.inf
    for combo in itertools.product(range(3), repeat=M):
        x = PhaseAssignment.from_indices(combo, classes, ids)
        val = total_objective(x, ds, rs)
        if val < best_val:
            best, best_val = x, val
    got_val = total_objective(candidate, ds, rs)
    ok = got_val <= best_val * (1 + rtol) + atol
    note = ""
    if candidate != best:
        plain = np.array([c != "three" for c in classes])
        if np.array_equal(candidate.indices[plain], best.indices[plain]):
            note = " (differs from the enumerated minimizer only in three-phase loads)"
            ok = True
        elif ok:
            note = " (tied with a different minimizer)"
    return ok, best, best_val, got_val, note


def identify(net, ms, *, truth=None, jobs=None, diagnostics="summary", topologies=None,
             drop_branches=(), solver_options=None) -> IdentificationReport:
    """Phase connections of every metered load.

    Parameters
    ----------
    net : FeederModel or ReducedNetwork
        Feeder as known to the utility.  Loads without measurements are
        left out of the decision vector.
    ms : MeasurementSet
    truth : dict, optional
        Load id -> phase label; adds an accuracy figure to the report.
    jobs : int, optional
        Worker threads for the per-load solves (default: CPU count).
    diagnostics : {"none", "summary", "full"}
    """
    red, ds, rs = prepare(net, ms, topologies=topologies, drop_branches=drop_branches)
    with stage("solve"):
        return run_mmle(ds, rs, red.classes, red.load_ids, jobs=jobs, truth=truth,
                        diagnostics=diagnostics, solver_options=solver_options)
