"""Linearized three-phase power flow around the flat solution.

Conventions
-----------
*Phase-ordered* vectors stack all nodes of phase a, then b, then c
(index ``p * n + node``).  *Node-ordered* vectors stack the three phases of
node 1, then node 2, ... (index ``3 * node + p``).  Power is an injection:
generation positive, consumption negative.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg

from .feeder import AdmittanceMatrix, as_reduced, assemble_admittance

ALPHA = np.exp(-2j * np.pi / 3)
FLAT_ANGLES = np.array([0.0, -2 * np.pi / 3, 2 * np.pi / 3])
RANK_RTOL = 1e-8


class RankDeficientError(np.linalg.LinAlgError):
    pass


class ConvergenceError(RuntimeError):
    pass


def flat_solution(n_nodes: int):
    """Flat voltage magnitudes and angles, phase-ordered over ``n_nodes`` nodes."""
    v = np.ones(3 * n_nodes)
    theta = np.repeat(FLAT_ANGLES, n_nodes)
    return v, theta


def flat_phasors() -> np.ndarray:
    return np.exp(1j * FLAT_ANGLES)


@dataclass(frozen=True)
class SystemMatrices:
    A11: np.ndarray
    A12: np.ndarray
    A21: np.ndarray
    A22: np.ndarray
    n_nodes: int
    # filled by remove_substation
    A_check: np.ndarray | None = None
    rank: int | None = None
    singular_values: np.ndarray | None = field(default=None, repr=False)
    diagnostic: str | None = None

    @property
    def A(self) -> np.ndarray:
        return np.block([[self.A11, self.A12], [self.A21, self.A22]])

    def check_block(self, r: int, c: int) -> np.ndarray:
        """Block ``(r, c)`` (1-based, as in A11..A22) of the reduced matrix."""
        k = 3 * self.n_nodes
        return self.A_check[(r - 1) * k:r * k, (c - 1) * k:c * k]


def build_A(Y) -> SystemMatrices:
    """Real linearization blocks from the phase-ordered admittance matrix.

    With ``G = Phi^-1 Y Phi``, ``A11 = -A22 = Re G`` and ``A12 = A21 = -Im G``.
    """
    if isinstance(Y, AdmittanceMatrix):
        Ymat, n_nodes = Y.Y, Y.n_nodes
    else:
        Ymat = np.asarray(Y, dtype=complex)
        n_nodes = Ymat.shape[0] // 3 - 1
    if Ymat.ndim != 2 or Ymat.shape[0] != Ymat.shape[1] or Ymat.shape[0] % 3:
        raise ValueError(f"admittance matrix must be square with size 3(N+1), got {Ymat.shape}")
    phi = np.repeat(np.array([1.0, ALPHA, ALPHA**2]), n_nodes + 1)
    G = np.conj(phi)[:, None] * Ymat * phi[None, :]
    A11 = G.real.copy()
    A12 = -G.imag
    return SystemMatrices(A11, A12, A12.copy(), -A11, n_nodes)


def _non_substation_index(n_nodes: int) -> np.ndarray:
    n = n_nodes + 1
    return np.array([p * n + k for p in range(3) for k in range(1, n)])


def remove_substation(sm: SystemMatrices) -> SystemMatrices:
    """Drop the substation rows/columns of every phase block.

    The numeric rank of the resulting ``6N x 6N`` matrix is decided by
    singular values relative to the largest (``> 1e-8``).  When it is short
    of ``6N`` a diagnostic naming the quantities in the near-null space is
    attached.
    """
    keep = _non_substation_index(sm.n_nodes)
    ix = np.ix_(keep, keep)
    A_check = np.block([[sm.A11[ix], sm.A12[ix]], [sm.A21[ix], sm.A22[ix]]])
    sv = np.linalg.svd(A_check, compute_uv=False)
    rank = int(np.sum(sv > RANK_RTOL * sv[0])) if sv.size and sv[0] > 0 else 0
    diagnostic = None
    if rank < A_check.shape[0]:
        diagnostic = _null_space_report(A_check, sm.n_nodes, rank)
    return replace(sm, A_check=A_check, rank=rank, singular_values=sv, diagnostic=diagnostic)


def _null_space_report(A_check, n_nodes, rank) -> str:
    _, s, vt = np.linalg.svd(A_check)
    parts = []
    for vec in vt[rank:]:
        k = int(np.argmax(np.abs(vec)))
        qty = "v" if k < 3 * n_nodes else "theta"
        k %= 3 * n_nodes
        parts.append(f"{qty}[phase {'abc'[k // n_nodes]}, node {k % n_nodes + 1}]")
    return (f"rank {rank} < {A_check.shape[0]}; near-null directions dominated by "
            + ", ".join(parts))


def node_order_permutation(n_nodes: int) -> np.ndarray:
    """``perm[j]`` is the phase-ordered index of node-ordered position ``j``."""
    return np.array([p * n_nodes + k for k in range(n_nodes) for p in range(3)])


def reorder_by_node(M, n_nodes: int | None = None, inverse: bool = False) -> np.ndarray:
    """Permute a phase-ordered vector or square matrix into node order.

    With ``inverse=True`` the node-ordered input is mapped back.
    """
    M = np.asarray(M)
    dim = M.shape[0]
    if dim % 3:
        raise ValueError(f"dimension {dim} is not a multiple of 3")
    if n_nodes is None:
        n_nodes = dim // 3
    if 3 * n_nodes != dim:
        raise ValueError(f"dimension {dim} does not match {n_nodes} nodes")
    perm = node_order_permutation(n_nodes)
    if inverse:
        perm = np.argsort(perm)
    if M.ndim == 1:
        return M[perm]
    return M[np.ix_(perm, perm)]


@dataclass(frozen=True)
class SensitivityMatrices:
    """``v = K p - L q`` and ``theta = Kth p - Lth q`` (phase-ordered)."""

    K: np.ndarray
    L: np.ndarray
    Kth: np.ndarray
    Lth: np.ndarray
    n_nodes: int
    A_check: np.ndarray = field(repr=False)

    @property
    def perm(self) -> np.ndarray:
        return node_order_permutation(self.n_nodes)

    def node_ordered(self):
        """``(K, L, Kth, Lth)`` reindexed by node."""
        return tuple(reorder_by_node(m, self.n_nodes) for m in (self.K, self.L, self.Kth, self.Lth))

    def apply(self, p, q):
        """Phase-ordered ``(v, theta)`` deviations for phase-ordered injections."""
        return self.K @ p - self.L @ q, self.Kth @ p - self.Lth @ q


def sensitivities(sm: SystemMatrices) -> SensitivityMatrices:
    """Voltage and angle sensitivities from one factorization of the reduced system."""
    if sm.A_check is None:
        sm = remove_substation(sm)
    k = 3 * sm.n_nodes
    if sm.rank != 2 * k:
        raise RankDeficientError(sm.diagnostic or f"reduced system has rank {sm.rank} < {2 * k}")
    lu = scipy.linalg.lu_factor(sm.A_check)
    inv = scipy.linalg.lu_solve(lu, np.eye(2 * k))
    return SensitivityMatrices(K=inv[:k, :k], L=-inv[:k, k:], Kth=inv[k:, :k], Lth=-inv[k:, k:],
                               n_nodes=sm.n_nodes, A_check=sm.A_check)


def network_sensitivities(net) -> SensitivityMatrices:
    """Feeder or reduced network straight to sensitivity matrices."""
    return sensitivities(remove_substation(build_A(assemble_admittance(as_reduced(net)))))


# --------------------------------------------------------------------------
# nonlinear ground truth

class CurrentInjectionSolver:
    """Fixed-point current-injection load flow on a reduced network.

    Voltages are node-ordered complex arrays of shape ``(..., N, 3)`` for
    the non-substation nodes; any leading batch dimensions (e.g. time) are
    solved simultaneously.
    """

    def __init__(self, net):
        net = as_reduced(net)
        self.n_nodes = net.n_nodes
        Y = assemble_admittance(net).Y
        n = self.n_nodes + 1
        rest = _non_substation_index(self.n_nodes)
        sub = np.array([0, n, 2 * n])
        # node-ordered views of the reduced blocks
        perm = node_order_permutation(self.n_nodes)
        self.Yrr = Y[np.ix_(rest, rest)][np.ix_(perm, perm)]
        self.Yr0 = Y[np.ix_(rest, sub)][perm]
        self._lu = scipy.linalg.lu_factor(self.Yrr)

    def solve(self, current_fn, substation_voltage, tol=1e-9, mismatch_tol=1e-8,
              max_iter=200, V_init=None):
        """Iterate ``V <- Yrr^-1 (I(V) - Yr0 V0)`` to convergence.

        ``current_fn(V)`` returns injected currents with the shape of ``V``.
        Convergence needs both the update and the power mismatch
        ``|V * conj(Yrr V + Yr0 V0 - I(V))|`` to fall below their tolerances.
        """
        V0 = np.asarray(substation_voltage, dtype=complex)
        N = self.n_nodes
        batch = V0.shape[:-1] if V_init is None else np.shape(V_init)[:-2]
        V0 = np.broadcast_to(V0, batch + (3,))
        V = (np.broadcast_to(V0[..., None, :], batch + (N, 3)).copy()
             if V_init is None else np.array(V_init, dtype=complex))
        V = V.reshape(-1, 3 * N)
        fixed = V0.reshape(-1, 3) @ self.Yr0.T
        shape = V.shape[:1] + (N, 3)
        for it in range(1, max_iter + 1):
            current = np.asarray(current_fn(V.reshape(shape)), dtype=complex).reshape(V.shape)
            V_new = scipy.linalg.lu_solve(self._lu, (current - fixed).T).T
            step = np.max(np.abs(V_new - V)) if V.size else 0.0
            V = V_new
            if step < tol:
                current = np.asarray(current_fn(V.reshape(shape)), dtype=complex).reshape(V.shape)
                resid = V @ self.Yrr.T + fixed - current
                mismatch = np.max(np.abs(V * np.conj(resid))) if V.size else 0.0
                if mismatch < mismatch_tol:
                    return V.reshape(batch + (N, 3))
        raise ConvergenceError(f"current-injection iteration did not converge in {max_iter} steps")


def solve_nonlinear_pf(net, injections, substation_voltage=None, tol=1e-9, max_iter=200):
    """Node voltages for constant-power wye injections.

    Parameters
    ----------
    net : FeederModel or ReducedNetwork
    injections : complex array, shape ``(..., N, 3)``
        Per node and phase injections (pu) of the non-substation nodes.
    substation_voltage : complex array, shape ``(..., 3)``
        Defaults to the balanced flat phasors.

    Returns
    -------
    complex array, shape ``(..., N + 1, 3)``, substation first.
    """
    S = np.asarray(injections, dtype=complex)
    if not np.all(np.isfinite(S)):
        raise ValueError("injections must be finite")
    V0 = flat_phasors() if substation_voltage is None else np.asarray(substation_voltage, dtype=complex)
    if np.any(np.abs(V0) == 0):
        raise ValueError("substation voltage must be nonzero on every phase")
    solver = CurrentInjectionSolver(net)
    V0b = np.broadcast_to(V0, S.shape[:-2] + (3,))
    V = solver.solve(lambda V: np.conj(S / V), V0b, tol=tol, max_iter=max_iter)
    return np.concatenate([V0b[..., None, :], V], axis=-2)
