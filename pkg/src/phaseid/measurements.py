"""Aligned smart-meter time series, differencing, and the measurement CSV.

CSV layout (one row per meter reading)::

    time,load_id,v,p,q
    2024-01-01T00:00:00,L1,7203.4,-41.2,-12.9
    2024-01-01T00:00:00,__substation__a,7215.0,,

Voltages are volts (line-to-neutral for single- and three-phase meters,
line-to-line for two-phase meters), power is kW / kVAr as injections.
Substation rows use the reserved ids ``__substation__a`` .. ``__substation__ca``.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, replace
from datetime import datetime
from pathlib import Path

import numpy as np

from .feeder import reduce_measurement

SUBSTATION_PREFIX = "__substation__"
PHASES = ("a", "b", "c")
PAIRS = ("ab", "bc", "ca")


class MeasurementError(ValueError):
    pass


@dataclass(frozen=True)
class MeasurementSet:
    """Per-unit readings on a common time axis.

    ``v``, ``p``, ``q`` are ``(T, M)``; ``v0`` holds the substation phase
    magnitudes ``(T, 3)`` and ``v0_pair`` the ab/bc/ca magnitudes when they
    were metered.  ``segment`` labels contiguous runs of samples and
    ``epoch`` the feeder topology in force.
    """

    load_ids: tuple[str, ...]
    v: np.ndarray
    p: np.ndarray
    q: np.ndarray
    v0: np.ndarray
    v0_pair: np.ndarray | None = None
    times: tuple[str, ...] | None = None
    segment: np.ndarray | None = None
    epoch: np.ndarray | None = None

    def __post_init__(self):
        T, M = np.shape(self.v)
        for name in ("p", "q"):
            if np.shape(getattr(self, name)) != (T, M):
                raise MeasurementError(f"{name} must have shape {(T, M)}")
        if np.shape(self.v0) != (T, 3):
            raise MeasurementError(f"v0 must have shape {(T, 3)}")
        if self.v0_pair is not None and np.shape(self.v0_pair) != (T, 3):
            raise MeasurementError(f"v0_pair must have shape {(T, 3)}")
        if len(self.load_ids) != M:
            raise MeasurementError("one load id per column required")
        if self.segment is None:
            object.__setattr__(self, "segment", np.zeros(T, dtype=int))
        if self.epoch is None:
            object.__setattr__(self, "epoch", np.zeros(T, dtype=int))

    @property
    def T(self) -> int:
        return self.v.shape[0]

    def pair_voltages(self) -> np.ndarray:
        """Substation line-to-line magnitudes, metered or from balanced angles."""
        if self.v0_pair is not None:
            return self.v0_pair
        a, b, c = self.v0.T
        # |V_i - V_j| with a 120 degree separation
        return np.stack([np.sqrt(a * a + b * b + a * b),
                         np.sqrt(b * b + c * c + b * c),
                         np.sqrt(c * c + a * a + c * a)], axis=1)

    def select(self, load_ids) -> MeasurementSet:
        cols = [self.load_ids.index(lid) for lid in load_ids]
        return replace(self, load_ids=tuple(load_ids), v=self.v[:, cols],
                       p=self.p[:, cols], q=self.q[:, cols])

    def rows(self, mask) -> MeasurementSet:
        mask = np.asarray(mask)
        return replace(self, v=self.v[mask], p=self.p[mask], q=self.q[mask], v0=self.v0[mask],
                       v0_pair=None if self.v0_pair is None else self.v0_pair[mask],
                       times=None if self.times is None else tuple(np.asarray(self.times)[mask]),
                       segment=self.segment[mask], epoch=self.epoch[mask])


def reference_voltages(ms: MeasurementSet, classes) -> np.ndarray:
    """Per-load reference triples, shape ``(T, M, 3)``."""
    if len(classes) != len(ms.load_ids):
        raise MeasurementError("one connection class per load required")
    phase, pair = ms.v0, ms.pair_voltages()
    return np.stack([pair if c == "two" else phase for c in classes], axis=1)


def refer_to_primary(ms: MeasurementSet, net) -> MeasurementSet:
    """Translate meter readings behind service branches to their primary ports.

    ``net`` is a reduced network containing every metered load; loads
    connected straight to the primary pass through unchanged.
    """
    by_id = {ld.id: ld for ld in net.loads}
    missing = [lid for lid in ms.load_ids if lid not in by_id]
    if missing:
        raise MeasurementError(f"measurements for load(s) not in the feeder: {missing}")
    v, p, q = ms.v.copy(), ms.p.copy(), ms.q.copy()
    for c, lid in enumerate(ms.load_ids):
        ld = by_id[lid]
        if ld.branch_kind is None:
            continue
        v_eq, S_eq = reduce_measurement(ld, ms.v[:, c], ms.p[:, c] + 1j * ms.q[:, c])
        v[:, c], p[:, c], q[:, c] = v_eq, S_eq.real, S_eq.imag
    return replace(ms, v=v, p=p, q=q)


@dataclass(frozen=True)
class DifferencedSeries:
    load_ids: tuple[str, ...]
    v: np.ndarray      # (T, M)
    p: np.ndarray
    q: np.ndarray
    vref: np.ndarray   # (T, M, 3)
    segment: np.ndarray
    epoch: np.ndarray

    @property
    def T(self) -> int:
        return self.v.shape[0]

    @property
    def M(self) -> int:
        return self.v.shape[1]


def _runs(ms: MeasurementSet):
    """Start/stop indices of maximal runs sharing segment and epoch."""
    key = np.stack([ms.segment, ms.epoch], axis=1)
    breaks = np.flatnonzero(np.any(key[1:] != key[:-1], axis=1)) + 1
    starts = np.concatenate([[0], breaks])
    stops = np.concatenate([breaks, [ms.T]])
    return list(zip(starts, stops))


def difference_series(ms: MeasurementSet, classes) -> DifferencedSeries:
    """First differences within each contiguous run; never across a gap."""
    vref = reference_voltages(ms, classes)
    parts = {k: [] for k in ("v", "p", "q", "vref", "segment", "epoch")}
    for run_id, (a, b) in enumerate(_runs(ms)):
        if b - a < 2:
            raise MeasurementError(f"segment starting at sample {a} has fewer than 2 samples")
        parts["v"].append(np.diff(ms.v[a:b], axis=0))
        parts["p"].append(np.diff(ms.p[a:b], axis=0))
        parts["q"].append(np.diff(ms.q[a:b], axis=0))
        parts["vref"].append(np.diff(vref[a:b], axis=0))
        parts["segment"].append(np.full(b - a - 1, run_id))
        parts["epoch"].append(np.full(b - a - 1, ms.epoch[a]))
    out = {k: np.concatenate(v) for k, v in parts.items()}
    return DifferencedSeries(ms.load_ids, **out)


# --------------------------------------------------------------------------
# CSV

def _parse_time(text: str, lineno: int) -> datetime:
    try:
        return datetime.fromisoformat(text.strip().replace("Z", "+00:00"))
    except ValueError:
        raise MeasurementError(f"line {lineno}: bad ISO-8601 timestamp {text!r}") from None


def _parse_float(text: str, lineno: int, name: str) -> float:
    try:
        val = float(text)
    except ValueError:
        raise MeasurementError(f"line {lineno}: column {name} is not a number: {text!r}") from None
    if not np.isfinite(val):
        raise MeasurementError(f"line {lineno}: column {name} is not finite")
    return val


def parse_measurements(text: str, base_voltage: float, base_power: float, *,
                       consumption_positive: bool = False, topology_changes=()) -> MeasurementSet:
    """Read the measurement CSV into per-unit arrays.

    Timestamps missing any load or substation phase reading are dropped;
    the remaining ones are split into segments wherever the spacing exceeds
    the typical (median) step.  ``topology_changes`` are ISO timestamps at
    which a new feeder topology takes effect; they start new epochs.
    """
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or [h.strip() for h in header] != ["time", "load_id", "v", "p", "q"]:
        raise MeasurementError("header must be exactly: time,load_id,v,p,q")
    sign = -1.0 if consumption_positive else 1.0
    kw = 1000.0 / base_power
    readings: dict[datetime, dict[str, tuple]] = {}
    load_order: list[str] = []
    seen_loads = set()
    has_pair = False
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 5:
            raise MeasurementError(f"line {lineno}: expected 5 columns, got {len(row)}")
        t = _parse_time(row[0], lineno)
        lid = row[1].strip()
        v = _parse_float(row[2], lineno, "v") / base_voltage
        slot = readings.setdefault(t, {})
        if lid in slot:
            raise MeasurementError(f"line {lineno}: duplicate reading for {lid} at {row[0]}")
        if lid.startswith(SUBSTATION_PREFIX):
            tag = lid[len(SUBSTATION_PREFIX):]
            if tag not in PHASES + PAIRS:
                raise MeasurementError(f"line {lineno}: unknown substation channel {tag!r}")
            has_pair |= tag in PAIRS
            slot[lid] = (v,)
            continue
        p = sign * _parse_float(row[3], lineno, "p") * kw
        q = sign * _parse_float(row[4], lineno, "q") * kw
        slot[lid] = (v, p, q)
        if lid not in seen_loads:
            seen_loads.add(lid)
            load_order.append(lid)
    if not readings:
        raise MeasurementError("no measurements")

    required = set(load_order) | {SUBSTATION_PREFIX + ph for ph in PHASES}
    if has_pair:
        required |= {SUBSTATION_PREFIX + pr for pr in PAIRS}
    times = sorted(readings)
    complete = [t for t in times if required <= readings[t].keys()]
    if len(complete) < 2:
        raise MeasurementError("fewer than two complete timestamps")

    stamps = np.array([t.timestamp() for t in times])
    step = np.median(np.diff(stamps)) if len(stamps) > 1 else 0.0
    kept = np.array([t.timestamp() for t in complete])
    gap = np.concatenate([[False], np.diff(kept) > step * (1 + 1e-9)])
    changes = sorted(_parse_time(c, 0).timestamp() for c in topology_changes)
    epoch = np.searchsorted(np.array(changes), kept, side="right") if changes else np.zeros(len(kept), int)
    segment = np.cumsum(gap | np.concatenate([[False], np.diff(epoch) != 0]))

    M = len(load_order)
    v = np.empty((len(complete), M))
    p, q = np.empty_like(v), np.empty_like(v)
    v0 = np.empty((len(complete), 3))
    v0_pair = np.empty((len(complete), 3)) if has_pair else None
    for r, t in enumerate(complete):
        slot = readings[t]
        for c, lid in enumerate(load_order):
            v[r, c], p[r, c], q[r, c] = slot[lid]
        for k, ph in enumerate(PHASES):
            v0[r, k] = slot[SUBSTATION_PREFIX + ph][0]
        if has_pair:
            for k, pr in enumerate(PAIRS):
                v0_pair[r, k] = slot[SUBSTATION_PREFIX + pr][0]
    return MeasurementSet(tuple(load_order), v, p, q, v0, v0_pair,
                          times=tuple(t.isoformat() for t in complete),
                          segment=segment.astype(int), epoch=np.asarray(epoch, dtype=int))


def read_measurements(path, base_voltage, base_power, **kwargs) -> MeasurementSet:
    return parse_measurements(Path(path).read_text(), base_voltage, base_power, **kwargs)


def default_times(T: int, start: str = "2024-01-01T00:00:00") -> tuple[str, ...]:
    t0 = np.datetime64(start)
    return tuple(str(t0 + np.timedelta64(h, "h")) for h in range(T))


def format_measurements(ms: MeasurementSet, base_voltage: float, base_power: float) -> str:
    """Render a measurement set as CSV text (volts, kW, kVAr)."""
    times = ms.times or default_times(ms.T)
    kw = base_power / 1000.0
    buf = io.StringIO()
    buf.write("time,load_id,v,p,q\n")
    pair = ms.v0_pair
    for r, t in enumerate(times):
        for k, ph in enumerate(PHASES):
            buf.write(f"{t},{SUBSTATION_PREFIX}{ph},{float(ms.v0[r, k] * base_voltage)!r},,\n")
        if pair is not None:
            for k, pr in enumerate(PAIRS):
                buf.write(f"{t},{SUBSTATION_PREFIX}{pr},{float(pair[r, k] * base_voltage)!r},,\n")
        for c, lid in enumerate(ms.load_ids):
            buf.write(f"{t},{lid},{float(ms.v[r, c] * base_voltage)!r},"
                      f"{float(ms.p[r, c] * kw)!r},{float(ms.q[r, c] * kw)!r}\n")
    return buf.getvalue()


def write_measurements(path, ms: MeasurementSet, base_voltage: float, base_power: float) -> None:
    Path(path).write_text(format_measurements(ms, base_voltage, base_power))
