"""Ground-truth measurement generation.

Two ways to produce meter readings from a feeder, a true assignment and
load profiles:

``linear``
    Load-level voltages straight from the linear model.  Data produced this
    way are reproduced exactly by identification at zero noise.
``nonlinear``
    A current-injection load flow with wye, delta and three-phase loads and
    explicit service laterals, followed by meter extraction.

Noise, quantization and meter dropout are applied on top.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .connection import (PAIRS, SQRT3, PhaseAssignment, phase_index, predict_voltage)
from .feeder import FeederModel, LineSection, ReducedNetwork, as_reduced, reduce_network
from .linear_pf import FLAT_ANGLES, ConvergenceError, CurrentInjectionSolver
from .measurements import MeasurementSet, default_times, reference_voltages
from .mmle import reduced_sensitivity

MODES = ("linear", "nonlinear")
NOISE_MODELS = ("measurement", "increment")


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SimulationSpec:
    """Knobs of one simulated data set.

    ``noise`` is the meter class: three standard deviations of the noise as
    a fraction of nominal.  ``noise_model="increment"`` draws i.i.d. noise on
    the sample-to-sample changes (levels carry its running sum);
    ``"measurement"`` draws it on the levels.  The default picks
    ``increment`` for linear mode and ``measurement`` for nonlinear mode.
    """

    mode: str = "linear"
    T: int = 2160
    noise: float = 0.0
    noise_model: str | None = None
    quantize: bool = False
    voltage_step_primary: float = 1.0     # volts
    voltage_step_secondary: float = 0.1   # volts
    power_step: float = 0.1               # kW / kVAr
    penetration: float = 1.0
    perturbation: float = 0.0
    missing_branches: tuple[str, ...] = ()
    seed: int = 0
    truth: dict | None = None
    profiles_csv: str | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.noise_model is not None and self.noise_model not in NOISE_MODELS:
            raise ValueError(f"noise_model must be one of {NOISE_MODELS}")
        if not 0.0 < self.penetration <= 1.0:
            raise ValueError("penetration ratio must lie in (0, 1]")
        if self.noise < 0 or self.perturbation < 0:
            raise ValueError("noise and perturbation fractions must be nonnegative")
        if self.T < 2:
            raise ValueError("need at least two samples")

    @property
    def effective_noise_model(self) -> str:
        if self.noise_model is not None:
            return self.noise_model
        return "increment" if self.mode == "linear" else "measurement"


def _streams(seed: int):
    """Independent generators for profiles, noise, dropout and the model."""
    names = ("profiles", "substation", "noise", "dropout", "perturb")
    kids = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.default_rng(k) for n, k in zip(names, kids)}


# --------------------------------------------------------------------------
# profiles

def reactive_from_pf(p, pf):
    """Lagging reactive power with the sign of ``p``: ``q = p tan(acos(pf))``."""
    return np.asarray(p) * np.tan(np.arccos(np.asarray(pf)))


def sample_power_factors(rng, shape, low=0.9, high=1.0):
    return rng.uniform(low, high, size=shape)


def synthetic_consumption(rng, T: int, M: int, mean_kw) -> np.ndarray:
    """Hourly consumption (kW, positive) with a daily shape and AR(1) noise."""
    hours = np.arange(T)
    mean_kw = np.broadcast_to(np.asarray(mean_kw, dtype=float), (M,))
    shift = rng.uniform(0, 24, size=M)
    depth = rng.uniform(0.2, 0.5, size=M)
    daily = 1.0 + depth * np.sin(2 * np.pi * (hours[:, None] - shift) / 24.0)
    eps = rng.normal(0.0, 0.15, size=(T, M))
    ar = np.empty_like(eps)
    ar[0] = eps[0]
    for t in range(1, T):
        ar[t] = 0.8 * ar[t - 1] + eps[t]
    return mean_kw * daily * np.exp(ar - ar.var(axis=0) / 2)


def read_profiles(text: str, load_ids, T: int) -> np.ndarray:
    """Consumption CSV ``time,load_id,p`` (kW) into a ``(T, M)`` array."""
    rows = list(csv.DictReader(io.StringIO(text)))
    if not rows or not {"time", "load_id", "p"} <= set(rows[0]):
        raise ValueError("profile CSV needs columns time,load_id,p")
    times = sorted({r["time"] for r in rows})
    if len(times) < T:
        raise ValueError(f"profile CSV has {len(times)} timestamps, {T} requested")
    t_index = {t: k for k, t in enumerate(times[:T])}
    out = np.full((T, len(load_ids)), np.nan)
    col = {lid: c for c, lid in enumerate(load_ids)}
    for r in rows:
        if r["time"] in t_index and r["load_id"] in col:
            out[t_index[r["time"]], col[r["load_id"]]] = float(r["p"])
    if np.isnan(out).any():
        missing = [lid for lid in load_ids if np.isnan(out[:, col[lid]]).any()]
        raise ValueError(f"profile CSV does not cover every load and time: {missing}")
    return out


def synthesize_profiles(spec: SimulationSpec, load_ids, base_power: float, rng=None,
                        mean_kw=None):
    """Injections ``(p, q)`` in pu, shape ``(T, M)``; consumption is negative."""
    rng = rng if rng is not None else _streams(spec.seed)["profiles"]
    M = len(load_ids)
    if spec.profiles_csv is not None:
        kw = read_profiles(Path(spec.profiles_csv).read_text(), load_ids, spec.T)
    else:
        if mean_kw is None:
            mean_kw = rng.uniform(5.0, 40.0, size=M)
        kw = synthetic_consumption(rng, spec.T, M, mean_kw)
    pf = sample_power_factors(rng, kw.shape)
    p = -kw * 1000.0 / base_power
    return p, reactive_from_pf(p, pf)


def substation_magnitudes(rng, T: int) -> np.ndarray:
    """Slowly wandering, mildly unbalanced source magnitudes (pu)."""
    common = np.cumsum(rng.normal(0.0, 5e-4, size=T))
    common -= common.mean()
    own = np.cumsum(rng.normal(0.0, 1e-4, size=(T, 3)), axis=0)
    return 1.02 + common[:, None] + own - own.mean(axis=0)


def pair_magnitudes(V0: np.ndarray) -> np.ndarray:
    """``|V_a - V_b|, |V_b - V_c|, |V_c - V_a|`` from source phasors."""
    return np.stack([np.abs(V0[..., i] - V0[..., j]) for i, j in PAIRS], axis=-1)


# --------------------------------------------------------------------------
# meter physics

def lateral_meter_voltage(V_node, S, z_eff, tol=1e-14, max_iter=200):
    """Voltage at the meter end of a lateral: ``V_m = V_node + z_eff conj(S / V_m)``.

    ``z_eff`` is the lateral impedance for a single-phase lateral and minus
    the loop combination for a two-phase one.  Elementwise on arrays.
    """
    V_node = np.asarray(V_node, dtype=complex)
    S = np.asarray(S, dtype=complex)
    V = V_node.copy()
    for _ in range(max_iter):
        V_new = V_node + z_eff * np.conj(S / V)
        if np.max(np.abs(V_new - V), initial=0.0) < tol:
            return V_new
        V = V_new
    raise ConvergenceError("lateral voltage iteration did not converge")


def _z_eff(load) -> complex:
    return load.branch_z if load.branch_kind == "single" else -load.branch_z


def linear_voltages(net: ReducedNetwork, x: PhaseAssignment, S, vref, tol=1e-15, max_iter=100):
    """Meter magnitudes under the linear model, laterals solved exactly.

    The linear model gives each load's primary-port magnitude from the
    port injections; a secondary meter then sits at the far end of its
    lateral and the port injection depends on the meter voltage, so the
    two are iterated together.  Returns ``(v_meter, v_port, S_port)``.
    """
    rs = reduced_sensitivity(net)
    sec = [m for m, ld in enumerate(net.loads) if ld.is_secondary]
    S_port = S.copy()
    for _ in range(max_iter):
        v_port = predict_voltage(x, vref, S_port.real, S_port.imag, rs)
        v_meter = v_port.copy()
        S_new = S.copy()
        for m in sec:
            z = _z_eff(net.loads[m])
            Vm = lateral_meter_voltage(v_port[:, m], S[:, m], z)
            v_meter[:, m] = np.abs(Vm)
            S_new[:, m] = S[:, m] - z * np.abs(S[:, m] / Vm) ** 2
        change = np.max(np.abs(S_new - S_port), initial=0.0)
        S_port = S_new
        if change < tol:
            v_port = predict_voltage(x, vref, S_port.real, S_port.imag, rs)
            return v_meter, v_port, S_port
    raise SimulationError("linear-mode lateral iteration did not converge")


def nonlinear_voltages(net: ReducedNetwork, x: PhaseAssignment, S, V0, tol=1e-10):
    """Meter magnitudes from a full current-injection load flow.

    ``S`` is ``(T, M)`` complex meter injections, ``V0`` the ``(T, 3)``
    source phasors.  Returns ``(v_meter, V_nodes)``.
    """
    solver = CurrentInjectionSolver(net)
    N = net.n_nodes
    idx = x.indices
    nodes = np.array([ld.node - 1 for ld in net.loads])
    loads = net.loads

    def terminal(V, m):
        ld, i = loads[m], idx[m]
        Vn = V[:, nodes[m]]
        if ld.conn_class == "two":
            a, b = PAIRS[i]
            return Vn[:, a] - Vn[:, b]
        return Vn[:, i]

    def currents(V):
        out = np.zeros_like(V)
        for m, ld in enumerate(loads):
            n, i, s = nodes[m], idx[m], S[:, m]
            if ld.conn_class == "three":
                out[:, n, :] += np.conj(s[:, None] / 3.0 / V[:, n, :])
                continue
            Vt = terminal(V, m)
            if ld.is_secondary:
                Vt = lateral_meter_voltage(Vt, s, _z_eff(ld))
            I = np.conj(s / Vt)
            if ld.conn_class == "two":
                a, b = PAIRS[i]
                out[:, n, a] += I
                out[:, n, b] -= I
            else:
                out[:, n, i] += I
        return out

    V = solver.solve(currents, V0, tol=tol, mismatch_tol=1e-10, max_iter=500)
    v_meter = np.empty(S.shape)
    for m, ld in enumerate(loads):
        Vt = terminal(V, m)
        if ld.is_secondary:
            Vt = lateral_meter_voltage(Vt, S[:, m], _z_eff(ld))
        v_meter[:, m] = np.abs(Vt)
    return v_meter, V


# --------------------------------------------------------------------------
# noise, quantization, dropout

def noise_sigma(noise_class: float, nominal) -> np.ndarray:
    """Standard deviation for a three-sigma class fraction of nominal."""
    return noise_class * np.asarray(nominal, dtype=float) / 3.0


def draw_noise(rng, shape, sigma, model: str, segment=None) -> np.ndarray:
    """Additive level noise.

    ``measurement``: i.i.d. per sample.  ``increment``: i.i.d. per step,
    accumulated within each segment so first differences are white.
    """
    e = rng.standard_normal(shape) * sigma
    if model == "measurement":
        return e
    if segment is None:
        return np.cumsum(e, axis=0)
    out = np.empty_like(e)
    for s in np.unique(segment):
        rows = segment == s
        out[rows] = np.cumsum(e[rows], axis=0)
    return out


def quantize(values, step) -> np.ndarray:
    """Round to the nearest multiple of ``step``; a second pass changes nothing."""
    step = np.asarray(step, dtype=float)
    return np.round(np.asarray(values, dtype=float) / step) * step


def select_metered(rng, load_ids, penetration: float):
    """Nested meter subsets: lower ratios keep a prefix of one permutation."""
    M = len(load_ids)
    order = rng.permutation(M)
    k = max(1, int(round(penetration * M)))
    keep = np.sort(order[:k])
    return [load_ids[m] for m in keep]


# --------------------------------------------------------------------------
# model perturbation

def perturb_model(net, fraction: float = 0.0, seed: int = 0, missing_branches=(),
                  rng=None, max_retries: int = 20) -> ReducedNetwork:
    """The feeder as a utility might (mis)know it.

    Every entry of every line admittance block is scaled by ``1 + eps``
    with Gaussian ``eps`` of three-sigma ``fraction`` (symmetrically, so the
    block stays symmetric); listed service branches are dropped, their loads
    attaching straight to the upstream node.
    """
    if fraction < 0:
        raise ValueError("perturbation fraction must be nonnegative")
    red = reduce_network(net, missing_branches) if isinstance(net, FeederModel) else as_reduced(net)
    if missing_branches and not isinstance(net, FeederModel):
        raise ValueError("dropping branches needs the unreduced feeder")
    if fraction == 0:
        return red
    rng = rng if rng is not None else _streams(seed)["perturb"]
    lines = []
    for ln in red.lines:
        y = np.linalg.inv(ln.z)
        for _ in range(max_retries):
            eps = rng.normal(0.0, fraction / 3.0, size=(3, 3))
            eps = np.triu(eps) + np.triu(eps, 1).T
            y_new = y * (1.0 + eps)
            if np.linalg.cond(y_new) < 1e12:
                break
        else:
            raise SimulationError(f"line '{ln.id}': perturbed admittance stayed singular")
        lines.append(LineSection(ln.id, ln.from_node, ln.to_node, np.linalg.inv(y_new)))
    return replace(red, lines=tuple(lines))


# --------------------------------------------------------------------------
# generation

@dataclass
class SimulationResult:
    measurements: MeasurementSet
    truth: dict
    network: ReducedNetwork
    clean: MeasurementSet
    noise: dict = field(default_factory=dict)
    metered: tuple[str, ...] = ()

    def truth_json(self) -> str:
        return json.dumps({lid: self.truth[lid] for lid in self.measurements.load_ids}, indent=2)


def truth_assignment(net: ReducedNetwork, truth=None) -> PhaseAssignment:
    labels = dict(net.truth())
    if truth:
        labels.update({k: str(v).upper() for k, v in truth.items()})
    return PhaseAssignment.from_labels(labels, net.classes, net.load_ids)


def generate(spec: SimulationSpec, net, mean_kw=None) -> SimulationResult:
    """Simulated smart-meter data and the truth behind it."""
    red = as_reduced(net)
    x = truth_assignment(red, spec.truth)
    rngs = _streams(spec.seed)
    T, M = spec.T, len(red.loads)
    ids = red.load_ids

    p, q = synthesize_profiles(spec, ids, red.base_power, rngs["profiles"], mean_kw)
    S = p + 1j * q
    v0 = substation_magnitudes(rngs["substation"], T)
    V0 = v0 * np.exp(1j * FLAT_ANGLES)
    v0_pair = pair_magnitudes(V0)
    clean0 = MeasurementSet(ids, np.ones((T, M)), p, q, v0, v0_pair, times=default_times(T))

    try:
        if spec.mode == "linear":
            vref = reference_voltages(clean0, red.classes)
            v, _, _ = linear_voltages(red, x, S, vref)
        else:
            v, _ = nonlinear_voltages(red, x, S, V0)
    except (ConvergenceError, np.linalg.LinAlgError) as exc:
        raise SimulationError(f"{spec.mode} simulation failed: {exc}") from exc
    clean = replace(clean0, v=v)

    model = spec.effective_noise_model
    noise = {}
    v_n, p_n, q_n = v.copy(), p.copy(), q.copy()
    if spec.noise > 0:
        nom_v = np.array([SQRT3 if c == "two" else 1.0 for c in red.classes])
        nom_s = np.mean(np.abs(S), axis=0)
        noise["v"] = draw_noise(rngs["noise"], (T, M), noise_sigma(spec.noise, nom_v), model)
        noise["p"] = draw_noise(rngs["noise"], (T, M), noise_sigma(spec.noise, nom_s), model)
        noise["q"] = draw_noise(rngs["noise"], (T, M), noise_sigma(spec.noise, nom_s), model)
        v_n, p_n, q_n = v + noise["v"], p + noise["p"], q + noise["q"]
    if spec.quantize:
        vb, sb = red.base_voltage, red.base_power
        vstep = np.array([spec.voltage_step_secondary if ld.is_secondary
                          else spec.voltage_step_primary for ld in red.loads]) / vb
        pstep = spec.power_step * 1000.0 / sb
        v_n, p_n, q_n = quantize(v_n, vstep), quantize(p_n, pstep), quantize(q_n, pstep)
    noisy = replace(clean, v=v_n, p=p_n, q=q_n)

    truth = dict(zip(ids, x.labels()))
    full = SimulationResult(noisy, truth, red, clean, noise, ids)
    return with_penetration(full, spec.penetration, spec.seed)


def with_penetration(result: SimulationResult, penetration: float, seed: int) -> SimulationResult:
    """Keep only the meters a ``penetration`` ratio would leave in service.

    The meter order depends on ``seed`` alone, so for one seed the subsets
    are nested as the ratio drops and the data of kept meters is unchanged.
    """
    if not 0.0 < penetration <= 1.0:
        raise ValueError("penetration ratio must lie in (0, 1]")
    ids = result.network.load_ids
    metered = select_metered(_streams(seed)["dropout"], ids, penetration)
    ms = result.measurements
    if tuple(metered) != ms.load_ids:
        ms = ms.select(metered)
    return replace(result, measurements=ms, metered=tuple(metered))
