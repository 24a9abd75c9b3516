"""Plaintext Cartesian power-flow solver: residual, Jacobian, pivot-free LU,
preconditioned GMRES, secant line search, and the Newton driver.

This is the reference implementation the secure protocol is validated
against.  The state vector is x = (v_R, v_I) with the slack entries pinned
to (v_nominal, 0); residual and Jacobian drop the slack rows/columns.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DimensionMismatch,
    MaxIterExceeded,
    NearZeroPivot,
    NotConverged,
    UnsupportedSolver,
)
from .grid import GridModel


@dataclass
class SolverConfig:
    solver: str = "lu"
    max_newton: int = 12
    line_search: bool = True
    max_linesearch: int = 3
    eta0: float = 1.0
    eta1: float = 0.99
    epsilon_scale: float | None = None  # line-search residual scaling; cancels exactly
    gmres_tol: float = 1e-10
    gmres_max_iter: int = 80
    convergence_tol: float = 1e-12  # on the per-unit ||F||_2^2
    ls_degenerate_tol: float = 1e-14
    pivot_floor: float = 0.0

    def __post_init__(self):
        if self.solver not in ("lu", "gmres"):
            raise UnsupportedSolver(self.solver)
        if self.max_newton < 1:
            raise ValueError("need at least one Newton iteration")
        if self.eta0 == self.eta1:
            raise ValueError("secant line search needs two distinct step sizes")


@dataclass
class NewtonState:
    x: np.ndarray
    k: int
    F: np.ndarray
    residual_norm: float  # per-unit ||F||_2^2
    converged: bool
    trace: list = field(default_factory=list)


def flat_start(grid: GridModel) -> np.ndarray:
    x = np.zeros(2 * grid.n)
    x[: grid.n] = grid.v_nominal
    return x


def compute_currents(x, G, B):
    """i = Y v split into real and imaginary parts."""
    x = np.asarray(x, dtype=float)
    G = np.asarray(G, dtype=float)
    B = np.asarray(B, dtype=float)
    n = G.shape[0]
    if x.shape != (2 * n,) or G.shape != B.shape:
        raise DimensionMismatch("state/admittance dimensions disagree")
    vr, vi = x[:n], x[n:]
    return G @ vr - B @ vi, B @ vr + G @ vi


def compute_F(x, grid: GridModel) -> np.ndarray:
    """Power mismatch (p(x) - p0, q(x) - q0) with the slack rows removed."""
    n = grid.n
    ir, ii = compute_currents(x, grid.G, grid.B)
    vr, vi = x[:n], x[n:]
    fp = vr * ir + vi * ii - grid.p0
    fq = vi * ir - vr * ii - grid.q0
    ns = grid.non_slack
    return np.concatenate([fp[ns], fq[ns]])


@dataclass
class JacobianBlocks:
    H1: np.ndarray
    H2: np.ndarray
    H3: np.ndarray
    H4: np.ndarray
    assembled: np.ndarray  # slack row/column removed


def compute_J(x, grid: GridModel) -> JacobianBlocks:
    n = grid.n
    vr, vi = np.diag(x[:n]), np.diag(x[n:])
    ir, ii = compute_currents(x, grid.G, grid.B)
    h1 = vr @ grid.G + vi @ grid.B
    h2 = vi @ grid.G - vr @ grid.B
    h3 = np.diag(ir)
    h4 = np.diag(ii)
    full = np.block([[h1 + h3, h2 + h4], [h2 - h4, -h1 + h3]])
    keep = grid.reduced_indices()
    return JacobianBlocks(h1, h2, h3, h4, full[np.ix_(keep, keep)])


def lu_factor_nopivot(a: np.ndarray, pivot_floor: float = 0.0):
    """LU without pivoting, unit lower diagonal (the l degrees of freedom are
    spent on L_ii = 1, sparing the forward substitution its divisions)."""
    a = np.asarray(a, dtype=float)
    l = a.shape[0]
    if a.shape != (l, l):
        raise DimensionMismatch("matrix must be square")
    lower = np.eye(l)
    upper = np.zeros((l, l))
    upper[0, :] = a[0, :]
    if abs(upper[0, 0]) <= pivot_floor:
        raise NearZeroPivot("U[0,0] below the certified bound")
    lower[1:, 0] = a[1:, 0] / upper[0, 0]
    for i in range(1, l):
        upper[i, i:] = a[i, i:] - lower[i, :i] @ upper[:i, i:]
        if abs(upper[i, i]) <= pivot_floor:
            raise NearZeroPivot(f"U[{i},{i}] below the certified bound")
        if i + 1 < l:
            lower[i + 1 :, i] = (a[i + 1 :, i] - lower[i + 1 :, :i] @ upper[:i, i]) / upper[i, i]
    return lower, upper


def lu_solve(a: np.ndarray, b: np.ndarray, pivot_floor: float = 0.0) -> np.ndarray:
    """Solve a x = b by pivot-free LU with forward-backward substitution."""
    lower, upper = lu_factor_nopivot(a, pivot_floor)
    l = a.shape[0]
    y = np.zeros(l)
    for i in range(l):
        y[i] = b[i] - lower[i, :i] @ y[:i]
    x = np.zeros(l)
    for i in range(l - 1, -1, -1):
        x[i] = (y[i] - upper[i, i + 1 :] @ x[i + 1 :]) / upper[i, i]
    return x


def gmres_solve(a: np.ndarray, b: np.ndarray, precond: np.ndarray | None = None,
                tol: float = 1e-10, max_iter: int = 80):
    """Left-preconditioned GMRES (classical Gram-Schmidt, no restarts).

    Solves P a x = P b to a relative residual <= tol; returns (x, iterations).
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    l = b.size
    apply_m = (lambda v: precond @ v) if precond is not None else (lambda v: v)
    r0 = apply_m(b)
    beta = np.linalg.norm(r0)
    if beta == 0.0:
        return np.zeros(l), 0
    max_iter = min(max_iter, l)
    basis = [r0 / beta]
    hess = np.zeros((max_iter + 1, max_iter))
    g = np.zeros(max_iter + 1)
    g[0] = beta
    cos, sin = np.zeros(max_iter), np.zeros(max_iter)
    used = 0
    for j in range(max_iter):
        w = apply_m(a @ basis[j])
        coeffs = np.array([q @ w for q in basis])  # classical Gram-Schmidt
        for i, q in enumerate(basis):
            w = w - coeffs[i] * q
        h_next = float(np.linalg.norm(w))
        hess[: j + 1, j] = coeffs
        hess[j + 1, j] = h_next
        col = hess[: j + 2, j]
        for i in range(j):
            ci, si = cos[i], sin[i]
            col[i], col[i + 1] = ci * col[i] + si * col[i + 1], -si * col[i] + ci * col[i + 1]
        denom = np.hypot(col[j], col[j + 1])
        cos[j], sin[j] = col[j] / denom, col[j + 1] / denom
        col[j], col[j + 1] = denom, 0.0
        g[j], g[j + 1] = cos[j] * g[j] + sin[j] * g[j + 1], -sin[j] * g[j] + cos[j] * g[j + 1]
        used = j + 1
        if h_next > 0:
            basis.append(w / h_next)
        if abs(g[j + 1]) <= tol * beta or h_next == 0.0:
            break
    else:
        raise MaxIterExceeded(
            f"GMRES did not reach {tol} in {max_iter} iterations "
            f"(residual {abs(g[used]) / beta:.3e})"
        )
    y = np.zeros(used)
    for i in range(used - 1, -1, -1):
        y[i] = (g[i] - hess[i, i + 1 : used] @ y[i + 1 : used]) / hess[i, i]
    x = np.zeros(l)
    for i in range(used):
        x += y[i] * basis[i]
    return x, used


def make_preconditioner(grid: GridModel) -> np.ndarray:
    """P = J(x0)^-1 at the public flat start, inverted via the pivot-free LU."""
    j0 = compute_J(flat_start(grid), grid).assembled
    l = j0.shape[0]
    cols = [lu_solve(j0, e) for e in np.eye(l)]
    return np.column_stack(cols)


def line_search_step(xi_prev: float, xi_cur: float, eta_prev: float, eta_cur: float,
                     deta_prev: float, degenerate_tol: float = 1e-14) -> float:
    """One secant update of the step size.

    Returns 0 when the denominator degenerates (stationary or repeated point),
    which freezes eta; the secure path behaves the same way since a vanishing
    xi zeroes the update.
    """
    den = eta_cur * xi_prev - xi_cur
    scale = max(abs(xi_prev), abs(xi_cur), 1e-30)
    if abs(den) <= degenerate_tol * scale:
        return 0.0
    return deta_prev * (eta_prev * xi_cur) / den


def secant_line_search(eval_f, f0: np.ndarray, cfg: SolverConfig):
    """Step size after cfg.max_linesearch secant updates: a finite-difference
    search on 0.5 F^T F that avoids re-evaluating the Jacobian.

    ``eval_f(eta)`` returns the (possibly eps-scaled) residual at x + eta dx;
    the eps scaling cancels in the update and is applied for parity with the
    fixed-point path.
    """
    eps = cfg.epsilon_scale if cfg.epsilon_scale is not None else 1.0
    f0s = eps * f0
    eta_prev, eta_cur = cfg.eta0, cfg.eta1
    f_prev = eps * eval_f(eta_prev)
    xi_prev = float(f_prev @ (f_prev - f0s))
    deta_prev = eta_cur - eta_prev
    etas = [eta_prev, eta_cur]
    for _ in range(cfg.max_linesearch):
        f_cur = eps * eval_f(eta_cur)
        xi_cur = float(f_cur @ (f_cur - f0s))
        deta = line_search_step(xi_prev, xi_cur, eta_prev, eta_cur, deta_prev,
                                cfg.ls_degenerate_tol)
        eta_prev, eta_cur = eta_cur, eta_cur + deta
        xi_prev, deta_prev = xi_cur, deta
        etas.append(eta_cur)
    return eta_cur, etas


def newton_solve(grid: GridModel, cfg: SolverConfig, x0: np.ndarray | None = None,
                 raise_on_fail: bool = True) -> NewtonState:
    """Damped Newton from the flat start; the linear solver gets b = -F."""
    x = flat_start(grid) if x0 is None else np.array(x0, dtype=float)
    keep = grid.reduced_indices()
    s_base = grid.v_nominal**2  # per-unit residual normalization
    precond = make_preconditioner(grid) if cfg.solver == "gmres" else None
    trace = []
    f_red = compute_F(x, grid)
    res = float(f_red @ f_red) / s_base**2
    state = NewtonState(x, 0, f_red, res, res <= cfg.convergence_tol, trace)
    for k in range(1, cfg.max_newton + 1):
        if state.converged:
            break
        jac = compute_J(x, grid).assembled
        if cfg.solver == "lu":
            dx = lu_solve(jac, -f_red, cfg.pivot_floor)
            inner = 0
        else:
            dx, inner = gmres_solve(jac, -f_red, precond, cfg.gmres_tol,
                                    cfg.gmres_max_iter)
        if cfg.line_search:
            def eval_f(eta):
                trial = x.copy()
                trial[keep] += eta * dx
                return compute_F(trial, grid)

            eta, _ = secant_line_search(eval_f, f_red, cfg)
        else:
            eta = 1.0
        x = x.copy()
        x[keep] += eta * dx
        f_red = compute_F(x, grid)
        res = float(f_red @ f_red) / s_base**2
        trace.append({"k": k, "residual_sq": res, "eta": eta, "solver_iters": inner})
        state = NewtonState(x, k, f_red, res, res <= cfg.convergence_tol, trace)
    if not state.converged and raise_on_fail:
        raise NotConverged(
            f"residual {state.residual_norm:.3e} after {state.k} iterations", state
        )
    return state


def magnitudes(x, grid: GridModel):
    """Per-bus voltage magnitude and per-branch series current magnitude."""
    n = grid.n
    v = x[:n] + 1j * x[n:]
    v_mag = np.abs(v)
    i_b = np.array(
        [abs((br.g + 1j * br.b) * (v[br.f] - v[br.t])) for br in grid.branches]
    )
    return v_mag, i_b
