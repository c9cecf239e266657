"""Phase-connection decision variables and the load-level measurement model.

Each load carries a one-hot triple.  Its meaning depends on the connection
class: AN/BN/CN for single-phase loads, AB/BC/CA for two-phase (delta)
loads, and the metered phase for three-phase loads.

The model maps load injections to nodal injections through the block
tables ``U1, U2, Uh1, Uh2`` and predicts differenced voltage magnitudes as::

    v(t, x) = X vref(t) + X Khat X^T p(t) + X Lhat X^T q(t)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .feeder import ReducedNetwork

SQRT3 = np.sqrt(3.0)
PHASE_LABELS = {
    "single": ("A", "B", "C"),
    "two": ("AB", "BC", "CA"),
    "three": ("A", "B", "C"),
}
# phase pairs selected by the two-phase triple
PAIRS = ((0, 1), (1, 2), (2, 0))

W1 = np.array([[1.0, 1.0, 0.0], [0.0, 1.0, 1.0], [1.0, 0.0, 1.0]])
W2 = np.array([[1.0, -1.0, 0.0], [0.0, 1.0, -1.0], [-1.0, 0.0, 1.0]])


def phase_index(conn_class: str, label: str) -> int:
    labels = PHASE_LABELS[conn_class]
    label = label.upper()
    if label == "AC" and conn_class == "two":
        label = "CA"
    if label not in labels:
        raise ValueError(f"phase '{label}' is not valid for a {conn_class}-phase load")
    return labels.index(label)


def table_blocks(conn_class: str):
    """The four 3x3 blocks ``(U1, U2, Uh1, Uh2)`` for one connection class."""
    if conn_class == "single":
        return np.eye(3), np.zeros((3, 3)), np.eye(3), np.zeros((3, 3))
    if conn_class == "two":
        return SQRT3 / 2 * W1, 0.5 * W2, 0.5 * W1.T, SQRT3 / 6 * W2.T
    if conn_class == "three":
        return np.eye(3), np.zeros((3, 3)), np.full((3, 3), 1.0 / 3.0), np.zeros((3, 3))
    raise ValueError(f"unknown connection class '{conn_class}'")


@dataclass(frozen=True)
class PhaseAssignment:
    """One-hot phase decisions, one row ``(x1, x2, x3)`` per load."""

    x: np.ndarray
    classes: tuple[str, ...]
    load_ids: tuple[str, ...] | None = None

    def __post_init__(self):
        x = np.asarray(self.x)
        if x.ndim != 2 or x.shape[1] != 3 or x.shape[0] != len(self.classes):
            raise ValueError(f"assignment must be (M, 3) for M={len(self.classes)}, got {x.shape}")
        if not np.all((x == 0) | (x == 1)) or not np.all(x.sum(axis=1) == 1):
            raise ValueError("every load needs exactly one phase decision set to 1")
        object.__setattr__(self, "x", x.astype(np.int8))

    @classmethod
    def from_indices(cls, indices, classes, load_ids=None) -> PhaseAssignment:
        idx = np.asarray(indices, dtype=int)
        x = np.zeros((len(idx), 3), dtype=np.int8)
        x[np.arange(len(idx)), idx] = 1
        return cls(x, tuple(classes), None if load_ids is None else tuple(load_ids))

    @classmethod
    def from_labels(cls, labels, classes, load_ids) -> PhaseAssignment:
        """``labels`` is a mapping load id -> phase label, or a sequence."""
        if isinstance(labels, dict):
            missing = [lid for lid in load_ids if lid not in labels]
            if missing:
                raise ValueError(f"no phase label for load(s) {missing}")
            labels = [labels[lid] for lid in load_ids]
        idx = [phase_index(c, lab) for c, lab in zip(classes, labels)]
        return cls.from_indices(idx, classes, load_ids)

    @property
    def M(self) -> int:
        return len(self.classes)

    @property
    def indices(self) -> np.ndarray:
        return np.argmax(self.x, axis=1)

    def labels(self) -> list[str]:
        return [PHASE_LABELS[c][i] for c, i in zip(self.classes, self.indices)]

    def as_dict(self) -> dict[str, str]:
        if self.load_ids is None:
            raise ValueError("assignment has no load ids")
        return dict(zip(self.load_ids, self.labels()))

    def vector(self) -> np.ndarray:
        """Stacked decision vector of length 3M."""
        return self.x.reshape(-1).astype(float)

    def matrix(self) -> np.ndarray:
        """The M x 3M selection matrix X."""
        X = np.zeros((self.M, 3 * self.M))
        X[np.arange(self.M), 3 * np.arange(self.M) + self.indices] = 1.0
        return X

    def with_choice(self, m: int, i: int) -> PhaseAssignment:
        idx = self.indices.copy()
        idx[m] = i
        return PhaseAssignment.from_indices(idx, self.classes, self.load_ids)

    def __eq__(self, other):
        if not isinstance(other, PhaseAssignment):
            return NotImplemented
        return self.classes == other.classes and np.array_equal(self.x, other.x)

    def __hash__(self):
        return hash((self.classes, self.x.tobytes()))


@dataclass(frozen=True)
class BlockTables:
    U1: np.ndarray   # 3M x 3N
    U2: np.ndarray
    Uh1: np.ndarray  # 3N x 3M
    Uh2: np.ndarray
    load_nodes: tuple[int, ...]  # 1-based primary node per load
    classes: tuple[str, ...]


def build_block_tables(net: ReducedNetwork) -> BlockTables:
    M, N = len(net.loads), net.n_nodes
    U1, U2 = np.zeros((3 * M, 3 * N)), np.zeros((3 * M, 3 * N))
    Uh1, Uh2 = np.zeros((3 * N, 3 * M)), np.zeros((3 * N, 3 * M))
    for m, ld in enumerate(net.loads):
        if not 1 <= ld.node <= N:
            raise ValueError(f"load '{ld.id}' is not attached to a primary node")
        n = ld.node - 1
        u1, u2, uh1, uh2 = table_blocks(ld.conn_class)
        U1[3 * m:3 * m + 3, 3 * n:3 * n + 3] = u1
        U2[3 * m:3 * m + 3, 3 * n:3 * n + 3] = u2
        Uh1[3 * n:3 * n + 3, 3 * m:3 * m + 3] = uh1
        Uh2[3 * n:3 * n + 3, 3 * m:3 * m + 3] = uh2
    return BlockTables(U1, U2, Uh1, Uh2, tuple(ld.node for ld in net.loads), net.classes)


@dataclass(frozen=True)
class ReducedSensitivity:
    K_hat: np.ndarray  # 3M x 3M, node/load ordered
    L_hat: np.ndarray

    @property
    def M(self) -> int:
        return self.K_hat.shape[0] // 3


def build_reduced_sensitivity(tables: BlockTables, sens) -> ReducedSensitivity:
    """Collapse node-level sensitivities to load level.

    ``sens`` is a :class:`~phaseid.linear_pf.SensitivityMatrices` or a
    node-ordered tuple ``(K, L, Kth, Lth)``.

    A three-phase load's injection does not depend on its decision triple,
    so its three columns are mathematically identical; they are written
    from one computed column so that the equality also holds bit for bit.
    """
    K, L, Kth, Lth = sens.node_ordered() if hasattr(sens, "node_ordered") else sens
    if K.shape[0] != tables.U1.shape[1]:
        raise ValueError(f"sensitivities are {K.shape}, block tables expect {tables.U1.shape[1]} rows")
    G = tables.U1 @ K + tables.U2 @ Kth
    H = tables.U1 @ L + tables.U2 @ Lth
    K_hat = G @ tables.Uh1 + H @ tables.Uh2
    L_hat = G @ tables.Uh2 - H @ tables.Uh1
    for k, cls in enumerate(tables.classes):
        if cls == "three":
            K_hat[:, 3 * k + 1:3 * k + 3] = K_hat[:, 3 * k:3 * k + 1]
            L_hat[:, 3 * k + 1:3 * k + 3] = L_hat[:, 3 * k:3 * k + 1]
    return ReducedSensitivity(K_hat, L_hat)


def split_delta_power(P, Q):
    """Phase-port injections of a delta load from its line-to-line injection.

    Valid near balanced voltages.  Returns ``(S_a, S_b)`` for an AB load
    (the first and second phase of any pair).
    """
    P = np.asarray(P, dtype=float)
    Q = np.asarray(Q, dtype=float)
    c = SQRT3 / 6
    S_a = (P / 2 + c * Q) + 1j * (Q / 2 - c * P)
    S_b = (P / 2 - c * Q) + 1j * (Q / 2 + c * P)
    if S_a.ndim == 0:
        return complex(S_a), complex(S_b)
    return S_a, S_b


def scatter_loads(x: PhaseAssignment, values) -> np.ndarray:
    """``X^T values``: each load's value at its chosen position of 3M."""
    values = np.asarray(values, dtype=float)
    out = np.zeros(values.shape[:-1] + (3 * x.M,))
    out[..., 3 * np.arange(x.M) + x.indices] = values
    return out


def map_injections(x: PhaseAssignment, p, q, tables: BlockTables):
    """Nodal (node-ordered) injections implied by load injections."""
    xp, xq = scatter_loads(x, p), scatter_loads(x, q)
    p_node = xp @ tables.Uh1.T + xq @ tables.Uh2.T
    q_node = -xp @ tables.Uh2.T + xq @ tables.Uh1.T
    return p_node, q_node


def line_to_line_delta(v_i, v_j, th_i, th_j, v0_i, v0_j, th0_i, th0_j):
    """Linearized change of a line-to-line magnitude relative to the substation."""
    return (SQRT3 / 2 * (v_i - v0_i) + SQRT3 / 2 * (v_j - v0_j)
            + 0.5 * (th_i - th0_i) - 0.5 * (th_j - th0_j))


def line_to_line_magnitude(v_i, v_j, th_i, th_j):
    """Exact magnitude of ``V_i - V_j`` from polar components."""
    return np.sqrt(v_i**2 + v_j**2 - 2 * v_i * v_j * np.cos(th_i - th_j))


def predict_voltage(x: PhaseAssignment, vref, p, q, rs: ReducedSensitivity):
    """Undifferenced load voltages ``X vref + X Khat X^T p + X Lhat X^T q``.

    ``vref`` has shape ``(..., M, 3)``; ``p`` and ``q`` are ``(..., M)``.
    """
    sel = 3 * np.arange(x.M) + x.indices
    K_eff = rs.K_hat[np.ix_(sel, sel)]
    L_eff = rs.L_hat[np.ix_(sel, sel)]
    vref = np.asarray(vref)
    v_sel = np.take_along_axis(vref, np.broadcast_to(x.indices[:, None], vref.shape[:-1] + (1,)),
                               axis=-1)[..., 0]
    return v_sel + np.asarray(p) @ K_eff.T + np.asarray(q) @ L_eff.T


def _sensitivity_for(rs, epoch):
    return rs if isinstance(rs, ReducedSensitivity) else rs[epoch]


def predict_differenced(x: PhaseAssignment, ds, rs) -> np.ndarray:
    """``v(t, x)`` for every differenced sample, shape ``(T, M)``.

    ``rs`` may be a sequence of reduced sensitivities indexed by the
    topology epoch of each sample.
    """
    if isinstance(rs, ReducedSensitivity):
        return predict_voltage(x, ds.vref, ds.p, ds.q, rs)
    out = np.empty(ds.v.shape)
    for e in np.unique(ds.epoch):
        rows = ds.epoch == e
        out[rows] = predict_voltage(x, ds.vref[rows], ds.p[rows], ds.q[rows], rs[e])
    return out


def model_voltage_delta(t: int, x: PhaseAssignment, ds, rs) -> np.ndarray:
    """Theoretical differenced load voltages at sample ``t`` (length M)."""
    e = int(ds.epoch[t])
    return predict_voltage(x, ds.vref[t], ds.p[t], ds.q[t], _sensitivity_for(rs, e))
