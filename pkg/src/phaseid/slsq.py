"""Simplex-relaxed binary least squares for one load and one candidate phase.

Fixing load ``m`` on phase ``i`` leaves a regression in the other loads'
one-hot triples::

    v_tot(t) ~ phi(t)^T x_{-m},   x_{-m} in {0,1}^{3(M-1)}, one 1 per triple

The binary set is relaxed to a product of 3-simplices, solved as a convex
QP, and rounded back.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .connection import ReducedSensitivity

MAX_BRUTE_FORCE_LOADS = 7


class SolverError(RuntimeError):
    """Iteration cap reached; ``best`` holds the best iterate found."""

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


@dataclass(frozen=True)
class SubproblemInstance:
    """Regression form of the (m, i) subproblem.

    ``y`` is ``(T,)``, ``Phi`` is ``(T, 3(M-1))``; ``columns[c]`` is the
    ``(load, phase)`` pair of column ``c``.  ``eta`` is load m's own
    contribution at phase i and ``psi`` the full ``(T, 3M)`` row set.
    """

    m: int
    i: int
    y: np.ndarray
    Phi: np.ndarray
    columns: tuple[tuple[int, int], ...]
    eta: np.ndarray | None = field(default=None, repr=False)
    psi: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.y.ndim != 1 or self.y.shape[0] < 1:
            raise ValueError("need at least one sample")
        if self.Phi.shape != (self.y.shape[0], len(self.columns)):
            raise ValueError("design shape does not match targets/columns")

    @property
    def T(self) -> int:
        return self.y.shape[0]

    @property
    def n_loads(self) -> int:
        """Number of loads in the decision vector, M - 1."""
        return len(self.columns) // 3

    def objective(self, x) -> float:
        """``(1/T) sum_t (y(t) - phi(t)^T x)^2`` evaluated from residuals."""
        r = self.y - self.Phi @ np.asarray(x, dtype=float).reshape(-1)
        return float(r @ r) / self.T


@dataclass(frozen=True)
class RelaxedSolution:
    x: np.ndarray          # (M-1, 3), rows on the simplex
    objective: float
    kkt_residual: float
    iterations: int
    degenerate: bool = False
    trace: tuple[float, ...] = ()


def _rows_for(ds, rs):
    """Yield ``(row mask, ReducedSensitivity)`` for every topology epoch."""
    if isinstance(rs, ReducedSensitivity):
        yield slice(None), rs
        return
    for e in np.unique(ds.epoch):
        yield ds.epoch == e, rs[e]


def build_subproblem(m: int, i: int, ds, rs) -> SubproblemInstance:
    """Targets and design rows for load ``m`` fixed on phase ``i``.

    ``psi(t)`` collects ``Khat[(m,i),(k,j)] p(k,t) + Lhat[(m,i),(k,j)] q(k,t)``
    for every load k and phase j; load m's own entry at phase i is ``eta``
    and is moved into the target together with the reference voltage.
    """
    M = ds.M
    if not (0 <= m < M and 0 <= i < 3):
        raise IndexError(f"no subproblem ({m}, {i}) for {M} loads")
    row = 3 * m + i
    psi = np.empty((ds.T, 3 * M))
    for rows, r in _rows_for(ds, rs):
        k_row, l_row = r.K_hat[row], r.L_hat[row]
        if not (np.all(np.isfinite(k_row)) and np.all(np.isfinite(l_row))):
            raise ValueError(f"sensitivity row for load {m}, phase {i} is not finite")
        # repeat each load's p/q over its three phase slots
        psi[rows] = (np.repeat(ds.p[rows], 3, axis=1) * k_row
                     + np.repeat(ds.q[rows], 3, axis=1) * l_row)
    eta = psi[:, row].copy()
    y = ds.v[:, m] - ds.vref[:, m, i] - eta
    keep = np.array([c for c in range(3 * M) if c // 3 != m], dtype=int)
    columns = tuple((c // 3, c % 3) for c in keep)
    return SubproblemInstance(m, i, y, psi[:, keep], columns, eta, psi)


# --------------------------------------------------------------------------
# relaxed QP

def project_simplex(z: np.ndarray) -> np.ndarray:
    """Euclidean projection of every row of ``z`` onto the unit simplex."""
    z = np.asarray(z, dtype=float)
    u = -np.sort(-z, axis=1)
    css = np.cumsum(u, axis=1) - 1.0
    k = np.arange(1, z.shape[1] + 1)
    cond = u - css / k > 0
    rho = z.shape[1] - 1 - np.argmax(cond[:, ::-1], axis=1)
    tau = css[np.arange(z.shape[0]), rho] / (rho + 1)
    return np.maximum(z - tau[:, None], 0.0)


class _Quadratic:
    """``f(x) = x'Qx - 2c'x + y'y/T`` with cached normal equations."""

    def __init__(self, inst: SubproblemInstance):
        T = inst.T
        self.Q = inst.Phi.T @ inst.Phi / T
        self.c = inst.Phi.T @ inst.y / T
        self.inst = inst
        self.lipschitz = 2.0 * (np.linalg.eigvalsh(self.Q)[-1] if self.Q.size else 0.0)

    def value(self, x):
        # constant term dropped: only differences matter inside the loop
        xf = x.reshape(-1)
        return float(xf @ self.Q @ xf - 2.0 * self.c @ xf)

    def grad(self, x):
        return (2.0 * (self.Q @ x.reshape(-1) - self.c)).reshape(x.shape)


def kkt_residual(x, g, lipschitz) -> float:
    """Size of the projected-gradient step ``|x - P(x - g/L)|_inf``."""
    if lipschitz <= 0:
        return 0.0
    return float(np.max(np.abs(x - project_simplex(x - g / lipschitz)))) if x.size else 0.0


def _subspace_step(f: _Quadratic, x):
    """Minimize f on the face of the current support, then step toward it.

    Solves the equality-constrained QP over the free coordinates (one sum
    constraint per triple) and moves as far as feasibility allows.
    """
    n_tri = x.shape[0]
    free = (x > 0).reshape(-1)
    idx = np.flatnonzero(free)
    tri = idx // 3
    E = np.zeros((n_tri, idx.size))
    E[tri, np.arange(idx.size)] = 1.0
    # scale the quadratic to O(1) so it balances the constraint rows
    s = 2.0 / f.lipschitz
    Qff = f.Q[np.ix_(idx, idx)]
    kkt = np.block([[s * Qff, E.T], [E, np.zeros((n_tri, n_tri))]])
    rhs = np.concatenate([s * f.c[idx], np.ones(n_tri)])
    sol = scipy.linalg.lstsq(kkt, rhs, lapack_driver="gelsy", check_finite=False)[0]
    target = sol[:idx.size]
    xf = x.reshape(-1)
    d = target - xf[idx]
    neg = d < 0
    alpha = 1.0
    if np.any(neg):
        alpha = min(1.0, float(np.min(-xf[idx][neg] / d[neg])))
    out = xf.copy()
    out[idx] = xf[idx] + alpha * d
    out[idx[neg & (alpha * d <= -xf[idx])]] = 0.0
    out = np.maximum(out, 0.0).reshape(x.shape)
    # renormalize away rounding drift so every triple sums to one
    return out / out.sum(axis=1, keepdims=True)


def solve_relaxed(inst: SubproblemInstance, *, tol: float = 1e-9, rel_tol: float = 1e-12,
                  accelerated: bool = False, max_iter: int | None = None,
                  keep_trace: bool = False) -> RelaxedSolution:
    """Minimize the subproblem objective over the product of 3-simplices.

    Each iteration takes a projected-gradient step (Armijo backtracking,
    or a momentum step when ``accelerated``) followed by a subspace Newton
    step on the current support.  Iteration stops once the projected
    gradient step falls below ``tol`` or the objective stalls to a relative
    decrease of ``rel_tol``.  Starts from the barycenter, which is also the
    answer when the design is identically zero.
    """
    n_tri = inst.n_loads
    x = np.full((n_tri, 3), 1.0 / 3.0)
    if n_tri == 0:
        return RelaxedSolution(x, inst.objective(x), 0.0, 0)
    f = _Quadratic(inst)
    L = f.lipschitz
    if L <= 0.0 or not np.any(inst.Phi):
        return RelaxedSolution(x, inst.objective(x), 0.0, 0, degenerate=True)
    if max_iter is None:
        max_iter = 10 * 3 * (n_tri + 1) * 1000
    scale = 1.0 / L

    fx = f.value(x)
    trace = [fx] if keep_trace else []
    y_mom, x_prev, t_mom = x, x, 1.0
    it = 0
    for it in range(1, max_iter + 1):
        g = f.grad(x)
        if kkt_residual(x, g, L) <= tol:
            break
        if accelerated:
            gy = f.grad(y_mom)
            cand = project_simplex(y_mom - scale * gy)
            if f.value(cand) > fx:
                y_mom, t_mom = x, 1.0  # restart momentum
                cand = project_simplex(x - scale * g)
        else:
            step = 2.0 * scale
            while True:
                cand = project_simplex(x - step * g)
                # Armijo condition along the projection arc
                if f.value(cand) <= fx + 0.5 * float(np.sum(g * (cand - x))) or step <= scale:
                    break
                step *= 0.5
        newton = _subspace_step(f, cand)
        if f.value(newton) <= f.value(cand):
            cand = newton
        f_new = f.value(cand)
        if accelerated:
            t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t_mom * t_mom))
            y_mom = cand + (t_mom - 1.0) / t_next * (cand - x_prev)
            x_prev, t_mom = cand, t_next
        decrease = fx - f_new
        if f_new <= fx:
            x, fx = cand, f_new
        if keep_trace:
            trace.append(fx)
        ref = abs(fx) + float(inst.y @ inst.y) / inst.T
        # no progress (rounding can even make it negative) ends the search
        if decrease <= rel_tol * ref:
            break
    else:
        best = RelaxedSolution(x, inst.objective(x), kkt_residual(x, f.grad(x), L), it)
        raise SolverError(f"relaxed solve for load {inst.m}, phase {inst.i} hit "
                          f"{max_iter} iterations", best)
    return RelaxedSolution(x, inst.objective(x), kkt_residual(x, f.grad(x), L), it,
                           trace=tuple(trace))


def round_solution(rel) -> np.ndarray:
    """Largest coordinate of every triple set to 1; ties go to the lowest phase."""
    x = rel.x if isinstance(rel, RelaxedSolution) else np.asarray(rel, dtype=float)
    out = np.zeros(x.shape, dtype=np.int8)
    out[np.arange(x.shape[0]), np.argmax(x, axis=1)] = 1
    return out


def brute_force(inst: SubproblemInstance):
    """Exact binary minimizer by enumeration; lexicographically first on ties.

    Returns ``(x, objective)`` with ``x`` of shape ``(M-1, 3)``.
    """
    n_tri = inst.n_loads
    if n_tri > MAX_BRUTE_FORCE_LOADS:
        raise ValueError(f"3^{n_tri} assignments exceed the enumeration limit "
                         f"3^{MAX_BRUTE_FORCE_LOADS}")
    best, best_val = None, np.inf
    base = 3 * np.arange(n_tri)
    for combo in itertools.product(range(3), repeat=n_tri):
        r = inst.y - inst.Phi[:, base + np.array(combo, dtype=int)].sum(axis=1)
        val = float(r @ r) / inst.T
        if val < best_val:
            best, best_val = combo, val
    x = np.zeros((n_tri, 3), dtype=np.int8)
    x[np.arange(n_tri), np.array(best, dtype=int)] = 1
    return x, best_val
