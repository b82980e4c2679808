"""Fundamental, adjoint and Weyl solutions of the matrix equation at fixed lambda.

The contract path integrates the companion form (Y, Y') with adaptive DOP853;
a slab-propagator path (see propagator.py) provides the same samples much
faster for batched work and is cross-validated against it in the tests.  On
strong-growth rays the unknown can optionally be integrated in the rescaled
variables exp(-i rho D x) * Y to keep per-channel error control meaningful;
this switches on automatically once max_k |Im(rho d_k)| exceeds 50.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import solve_ivp

from .errors import IntegrationError, NearEigenvalueError, UsageError
from .problem import MatrixSLProblem, TMAT, TPERP
from .propagator import (
    _AEval,
    _UNSCALE_LIMIT,
    default_slab_count,
    edges_between,
    propagate_state,
    richardson_pair,
)

DEFAULT_GRID_SIZE = 257
DEFAULT_TOL_ODE = 1e-10
RESCALE_THRESHOLD = 50.0
_SING_FACTOR = 1e-8


def default_grid(n=DEFAULT_GRID_SIZE):
    return np.linspace(0.0, 1.0, n)


@dataclass(frozen=True)
class MatrixSolutionSample:
    """One sampled matrix solution with its derivative (row or column form)."""

    lam: complex
    grid: np.ndarray
    value: np.ndarray
    deriv: np.ndarray
    kind: str  # "column" solves -Y'' + QY = lam W Y; "row" solves -Z'' + ZQ = lam Z W

    def at(self, x):
        idx = np.nonzero(np.isclose(self.grid, x, rtol=0, atol=1e-12))[0]
        if idx.size == 0:
            raise UsageError(f"x = {x} is not a grid point of this sample")
        return self.value[idx[0]], self.deriv[idx[0]]


@dataclass(frozen=True)
class FundamentalSolutions:
    """C, S with derivatives on a grid; C(0) = S'(0) = I imposed exactly."""

    lam: complex
    grid: np.ndarray
    C: np.ndarray       # (npts, 2, 2)
    Cprime: np.ndarray
    S: np.ndarray
    Sprime: np.ndarray

    def C_sample(self):
        return MatrixSolutionSample(self.lam, self.grid, self.C, self.Cprime, "column")

    def S_sample(self):
        return MatrixSolutionSample(self.lam, self.grid, self.S, self.Sprime, "column")

    def endpoint(self):
        return self.C[-1], self.Cprime[-1], self.S[-1], self.Sprime[-1]


@dataclass(frozen=True)
class AdjointSolutions:
    """Row-equation solutions C*, S* with the same initial-data layout."""

    lam: complex
    grid: np.ndarray
    Cstar: np.ndarray
    Cstarprime: np.ndarray
    Sstar: np.ndarray
    Sstarprime: np.ndarray

    def Cstar_sample(self):
        return MatrixSolutionSample(self.lam, self.grid, self.Cstar, self.Cstarprime, "row")

    def Sstar_sample(self):
        return MatrixSolutionSample(self.lam, self.grid, self.Sstar, self.Sstarprime, "row")


@dataclass(frozen=True)
class WeylData:
    """Weyl matrix M and the sampled Weyl solution Phi = C + S M."""

    lam: complex
    M: np.ndarray
    grid: np.ndarray
    Phi: np.ndarray
    Phiprime: np.ndarray

    def boundary_residual(self, prob):
        v = TMAT @ self.Phiprime[-1] - TPERP @ self.Phi[-1]
        scale = max(np.max(np.abs(self.Phi)), np.max(np.abs(self.Phiprime)), 1.0)
        return float(np.max(np.abs(v)) / scale)


def _ray_branch_diag(prob, lam):
    """Per-channel d_k with Re(i rho d_k) >= 0 for rho = principal sqrt(lam)."""
    rho = np.sqrt(complex(lam))
    ds = []
    for w in (prob.w1, prob.w2):
        d0 = np.sqrt(complex(w))
        ds.append(d0 if np.real(1j * rho * d0) >= 0 else -d0)
    return rho, np.asarray(ds)


def _growth_exponent(prob, lam):
    rho, ds = _ray_branch_diag(prob, lam)
    return float(np.max(np.real(1j * rho * ds)))


def _solve_segments(rhs, y0, edges, t_evals, rtol, atol):
    """Chain solve_ivp over consecutive segments, collecting t_eval samples."""
    ys = []
    y = np.asarray(y0, dtype=complex)
    for a, b, te in zip(edges[:-1], edges[1:], t_evals):
        te = np.asarray(te, dtype=float)
        need_b = len(te) == 0 or not np.isclose(te[-1], b, rtol=0, atol=1e-15)
        tlist = np.append(te, b) if need_b else te
        sol = solve_ivp(rhs, (a, b), y, method="DOP853", rtol=rtol, atol=atol, t_eval=tlist)
        if not sol.success:
            raise IntegrationError(
                f"DOP853 failed: {sol.message}", x_reached=float(sol.t[-1]) if len(sol.t) else a)
        samp = sol.y.T
        y = samp[-1].copy()
        ys.append(samp[:-1] if need_b else samp)
    return np.concatenate(ys, axis=0), y


def _dop853_companion(prob, lam, grid, rtol, atol, rescale):
    """Integrate [C|S] (column form); returns samples at grid points."""
    lam = complex(lam)
    W = prob.W
    grid = np.asarray(grid, dtype=float)
    edges = edges_between(0.0, 1.0, prob.breakpoints())
    if rescale:
        rho, ds = _ray_branch_diag(prob, lam)
        ird = 1j * rho * ds

        def rhs(t, y):
            G = y[:8].reshape(2, 4)
            H = y[8:].reshape(2, 4)
            E = np.exp(ird * t)
            A = prob.Q(t) - lam * W
            At = (A / E[:, None]) * E[None, :]
            dG = -ird[:, None] * G + H
            dH = At @ G - ird[:, None] * H
            return np.concatenate([dG.ravel(), dH.ravel()])
    else:
        def rhs(t, y):
            Y = y[:8].reshape(2, 4)
            Yp = y[8:].reshape(2, 4)
            A = prob.Q(t) - lam * W
            return np.concatenate([Yp.ravel(), (A @ Y).ravel()])

    y0 = np.zeros(16, dtype=complex)
    y0[0] = y0[5] = 1.0          # C(0) = I
    y0[10] = y0[15] = 1.0        # S'(0) = I
    t_evals = []
    claimed = np.zeros(len(grid), dtype=bool)
    for a, b in zip(edges[:-1], edges[1:]):
        sel = (grid >= a - 1e-15) & (grid <= b + 1e-15) & ~claimed
        claimed |= sel
        t_evals.append(grid[sel])
    samples, _ = _solve_segments(rhs, y0, edges, t_evals, rtol, atol)
    if samples.shape[0] != len(grid):
        raise IntegrationError("grid sampling failed to cover all points")
    Yg = samples[:, :8].reshape(len(grid), 2, 4)
    Ypg = samples[:, 8:].reshape(len(grid), 2, 4)
    if rescale:
        rho, ds = _ray_branch_diag(prob, lam)
        expo = np.real(1j * rho * ds)[None, :] * grid[:, None]
        if np.max(expo) > _UNSCALE_LIMIT:
            raise IntegrationError("solution exceeds double range; reduce |lambda|",
                                   x_reached=1.0)
        E = np.exp((1j * rho * ds)[None, :] * grid[:, None])
        Yg = E[:, :, None] * Yg
        Ypg = E[:, :, None] * Ypg
    if not np.all(np.isfinite(Yg.view(float))) or not np.all(np.isfinite(Ypg.view(float))):
        raise IntegrationError("non-finite solution values", x_reached=1.0)
    return Yg, Ypg


def _slab_companion(prob, lam_or_lams, grid, n_slabs=None, richardson=True):
    """Slab-path [C|S] samples for one or many lambda; returns (Y, Yp) arrays
    of shape (nb, npts, 2, 4) already unscaled (raises if out of range)."""
    lams = np.atleast_1d(np.asarray(lam_or_lams, dtype=complex))
    grid = np.asarray(grid, dtype=float)
    if n_slabs is None:
        n_slabs = default_slab_count(lams, base=2 * (len(grid) - 1))
    aeval = _AEval(prob.Q, np.array([prob.w1, prob.w2]), lams)
    edges = edges_between(0.0, 1.0, prob.breakpoints(), extra=grid)
    Y0 = np.zeros((len(lams), 2, 4), dtype=complex)
    Yp0 = np.zeros_like(Y0)
    Y0[:, 0, 0] = Y0[:, 1, 1] = 1.0
    Yp0[:, 0, 2] = Yp0[:, 1, 3] = 1.0

    def run(n):
        _, _, _, gY, gYp, gL = propagate_state(aeval, n, 0.0, 1.0, edges, Y0, Yp0, grid=grid)
        return gY, gYp, gL

    gY2, gYp2, gL2 = run(2 * n_slabs)
    if richardson:
        gY1, gYp1, gL1 = run(n_slabs)
        # combine on the finer run's scale
        fac = np.exp(gL1 - gL2)[..., None, None]
        gY = richardson_pair(gY1 * fac, gY2)
        gYp = richardson_pair(gYp1 * fac, gYp2)
    else:
        gY, gYp = gY2, gYp2
    if np.max(gL2) > _UNSCALE_LIMIT:
        raise IntegrationError("solution exceeds double range; reduce |lambda|", x_reached=1.0)
    scale = np.exp(gL2)[..., None, None]
    return gY * scale, gYp * scale


def integrate_fundamental(prob: MatrixSLProblem, lam, grid=None, *, method="auto",
                          rtol=1e-11, atol=1e-12, rescale=None) -> FundamentalSolutions:
    """Fundamental matrix solutions C, S with C(0) = S'(0) = I.

    method: "dop853" (adaptive contract path), "slab" (fast fixed-slab path),
    or "auto" (dop853).  rescale: None = auto per the growth threshold.
    """
    lam = complex(lam)
    if grid is None:
        grid = default_grid()
    grid = np.asarray(grid, dtype=float)
    if grid[0] != 0.0 or grid[-1] != 1.0 or np.any(np.diff(grid) <= 0):
        raise UsageError("grid must increase from 0 to 1")
    if method == "auto":
        method = "dop853"
    if method == "dop853":
        if rescale is None:
            rescale = _growth_exponent(prob, lam) > RESCALE_THRESHOLD
        Yg, Ypg = _dop853_companion(prob, lam, grid, rtol, atol, rescale)
        Yg, Ypg = Yg[None], Ypg[None]
    elif method == "slab":
        Yg, Ypg = _slab_companion(prob, lam, grid)
    else:
        raise UsageError(f"unknown integration method {method!r}")
    C = Yg[0, :, :, :2].copy()
    S = Yg[0, :, :, 2:].copy()
    Cp = Ypg[0, :, :, :2].copy()
    Sp = Ypg[0, :, :, 2:].copy()
    # impose the exact initial data
    C[0] = np.eye(2)
    Cp[0] = 0.0
    S[0] = 0.0
    Sp[0] = np.eye(2)
    return FundamentalSolutions(lam, grid, C, Cp, S, Sp)


def integrate_adjoint(prob: MatrixSLProblem, lam, grid=None, *, method="auto",
                      rtol=1e-11, atol=1e-12) -> AdjointSolutions:
    """Row-form solutions of -Z'' + Z Q(x) = lambda Z W with C*(0) = S*'(0) = I."""
    lam = complex(lam)
    if grid is None:
        grid = default_grid()
    grid = np.asarray(grid, dtype=float)
    if method == "auto":
        method = "dop853"
    if method == "slab":
        # transpose route: Z^T solves the column equation with Q^T
        probT = MatrixSLProblem(lambda x: np.swapaxes(prob.Q(x), -1, -2),
                                prob.w1, prob.w2, breakpoints=prob.breakpoints())
        ft = integrate_fundamental(probT, lam, grid, method="slab")
        tr = lambda a: np.swapaxes(a, -1, -2)
        return AdjointSolutions(lam, ft.grid, tr(ft.C), tr(ft.Cprime), tr(ft.S), tr(ft.Sprime))
    W = prob.W
    edges = edges_between(0.0, 1.0, prob.breakpoints())

    def rhs(t, y):
        Z = y[:8].reshape(4, 2)    # rows: [C*; S*]
        Zp = y[8:].reshape(4, 2)
        B = prob.Q(t) - lam * W
        return np.concatenate([Zp.ravel(), (Z @ B).ravel()])

    y0 = np.zeros(16, dtype=complex)
    y0[0] = y0[3] = 1.0            # C*(0) = I
    y0[12] = y0[15] = 1.0          # S*'(0) = I
    t_evals = []
    claimed = np.zeros(len(grid), dtype=bool)
    for a, b in zip(edges[:-1], edges[1:]):
        sel = (grid >= a - 1e-15) & (grid <= b + 1e-15) & ~claimed
        claimed |= sel
        t_evals.append(grid[sel])
    samples, _ = _solve_segments(rhs, y0, edges, t_evals, rtol, atol)
    out = samples.reshape(len(grid), 16)
    Z = out[:, :8].reshape(len(grid), 4, 2)
    Zp = out[:, 8:].reshape(len(grid), 4, 2)
    Cs = Z[:, :2, :].copy()
    Ss = Z[:, 2:, :].copy()
    Csp = Zp[:, :2, :].copy()
    Ssp = Zp[:, 2:, :].copy()
    Cs[0] = np.eye(2)
    Csp[0] = 0.0
    Ss[0] = 0.0
    Ssp[0] = np.eye(2)
    return AdjointSolutions(lam, grid, Cs, Csp, Ss, Ssp)


def wronskian(Z: MatrixSolutionSample, Y: MatrixSolutionSample, x):
    """<Z, Y> := Z Y' - Z' Y at grid point x (constant in x when Z is a row
    solution and Y a column solution at the same lambda)."""
    if Z.kind != "row" or Y.kind != "column":
        raise UsageError("wronskian expects (row solution, column solution)")
    if not np.isclose(Z.lam, Y.lam, rtol=0, atol=1e-12 * (1 + abs(Y.lam))):
        raise UsageError(f"lambda mismatch: {Z.lam} vs {Y.lam}")
    Zv, Zp = Z.at(x)
    Yv, Yp = Y.at(x)
    return Zv @ Yp - Zp @ Yv


def boundary_form(C_or_S_end, Cp_or_Sp_end):
    """V(Y) = T Y'(1) - Tperp Y(1)."""
    return TMAT @ Cp_or_Sp_end - TPERP @ C_or_S_end


def _check_nonsingular(mat, what):
    det = mat[0, 0] * mat[1, 1] - mat[0, 1] * mat[1, 0]
    scale = np.sum(np.abs(mat) ** 2)
    if abs(det) < _SING_FACTOR * scale:
        raise NearEigenvalueError(
            f"|det {what}| = {abs(det):.3e} below threshold {_SING_FACTOR:.0e} * {scale:.3e};"
            " lambda is (near) an eigenvalue", det_value=abs(det))
    return det


def weyl_solution(prob: MatrixSLProblem, lam, grid=None, *, method="auto",
                  ode_method="auto") -> WeylData:
    """Weyl solution Phi (Phi(0) = I, V(Phi) = 0) and Weyl matrix M = Phi'(0).

    method "forward" uses M = -(V(S))^{-1} V(C) and Phi = C + S M; "backward"
    builds Phi from a right-boundary-condition sweep Phi = R(x) R(0)^{-1},
    which stays accurate when exp(i rho D x) growth makes the forward
    superposition cancel.  "auto" switches at the rescale threshold.
    """
    lam = complex(lam)
    if grid is None:
        grid = default_grid()
    grid = np.asarray(grid, dtype=float)
    if method == "auto":
        method = "backward" if _growth_exponent(prob, lam) > RESCALE_THRESHOLD else "forward"
    if method == "forward":
        fund = integrate_fundamental(prob, lam, grid, method=ode_method)
        Ce, Cpe, Se, Spe = fund.endpoint()
        VS = boundary_form(Se, Spe)
        VC = boundary_form(Ce, Cpe)
        _check_nonsingular(VS, "V(S)")
        M = -np.linalg.solve(VS, VC)
        Phi = fund.C + fund.S @ M
        Phip = fund.Cprime + fund.Sprime @ M
        return WeylData(lam, M, grid, Phi, Phip)
    if method != "backward":
        raise UsageError(f"unknown weyl method {method!r}")
    # backward sweep: columns spanning the kernel of V at x = 1
    aeval = _AEval(prob.Q, np.array([prob.w1, prob.w2]), np.array([lam], dtype=complex))
    edges = edges_between(1.0, 0.0, prob.breakpoints(), extra=grid)
    R1 = np.zeros((1, 2, 2), dtype=complex)
    R1p = np.zeros_like(R1)
    R1[0, 0, 0] = 1.0    # R(1) = diag(1, 0)
    R1p[0, 1, 1] = 1.0   # R'(1) = diag(0, 1) -> T R' - Tperp R = 0
    rev = grid[::-1].copy()
    n_slabs = default_slab_count([lam], base=2 * (len(grid) - 1))
    _, _, _, gY1, gYp1, gL1 = propagate_state(aeval, n_slabs, 1.0, 0.0, edges, R1, R1p, grid=rev)
    _, _, _, gY2, gYp2, gL2 = propagate_state(aeval, 2 * n_slabs, 1.0, 0.0, edges, R1, R1p, grid=rev)
    fac = np.exp(gL1 - gL2)[..., None, None]
    gY = richardson_pair(gY1 * fac, gY2)
    gYp = richardson_pair(gYp1 * fac, gYp2)
    R = gY[0][::-1]
    Rp = gYp[0][::-1]
    logs = gL2[0][::-1]
    R0 = R[0]
    _check_nonsingular(R0, "R(0)")
    # Phi(x) = R(x) R(0)^{-1}, with per-sample log scales relative to x = 0
    K = np.linalg.inv(R0)
    rel = np.exp(logs - logs[0])[:, None, None]
    Phi = (R @ K) * rel
    Phip = (Rp @ K) * rel
    if not np.all(np.isfinite(Phi.view(float))):
        raise IntegrationError("Weyl solution exceeded double range", x_reached=0.0)
    M = Phip[0].copy()
    Phi[0] = np.eye(2)
    return WeylData(lam, M, grid, Phi, Phip)


def adjoint_weyl_matrix(prob: MatrixSLProblem, lam, *, rtol=1e-11, atol=1e-12):
    """M*(lambda) = Phi*'(0) from the adjoint (row) Weyl construction:
    Phi*(0) = I, Phi*'(1) T - Phi*(1) Tperp = 0."""
    lam = complex(lam)
    adj = integrate_adjoint(prob, lam, rtol=rtol, atol=atol)
    Cse, Sse = adj.Cstar[-1], adj.Sstar[-1]
    Cspe, Sspe = adj.Cstarprime[-1], adj.Sstarprime[-1]
    # V*(Z) = Z'(1) T - Z(1) Tperp; Phi* = C* + M* S*  =>  M* = -V*(C*) (V*(S*))^{-1}
    VCs = Cspe @ TMAT - Cse @ TPERP
    VSs = Sspe @ TMAT - Sse @ TPERP
    det = VSs[0, 0] * VSs[1, 1] - VSs[0, 1] * VSs[1, 0]
    scale = np.sum(np.abs(VSs) ** 2)
    if abs(det) < _SING_FACTOR * scale:
        raise NearEigenvalueError("lambda is (near) an eigenvalue of the adjoint problem",
                                  det_value=abs(det))
    return -np.linalg.solve(VSs.T, VCs.T).T


def ode_residual_fd(sol: FundamentalSolutions, prob: MatrixSLProblem, which="C"):
    """Max relative residual || -M'' + (Q - lam W) M || checked with 6th-order
    finite differences of the stored derivative samples (uniform grids only)."""
    grid = sol.grid
    h = grid[1] - grid[0]
    if not np.allclose(np.diff(grid), h):
        raise UsageError("residual check requires a uniform grid")
    V = sol.C if which == "C" else sol.S
    Vp = sol.Cprime if which == "C" else sol.Sprime
    # 6th-order central first derivative of V' gives V''
    c = np.array([-1.0, 9.0, -45.0, 0.0, 45.0, -9.0, 1.0]) / (60.0 * h)
    n = len(grid)
    idx = np.arange(3, n - 3)
    Vpp = sum(c[k] * Vp[idx - 3 + k] for k in range(7))
    A = prob.Q(grid[idx]) - sol.lam * prob.W[None]
    resid = Vpp - A @ V[idx]
    scale = np.maximum(np.max(np.abs(V[idx]), axis=(1, 2)), 1.0) * max(1.0, abs(sol.lam))
    return float(np.max(np.max(np.abs(resid), axis=(1, 2)) / scale))


def solutions_csv_rows(sol: FundamentalSolutions):
    """Header + rows for the per-grid-point CSV serialization."""
    header = ["x"]
    for name in ("C", "Cp", "S", "Sp"):
        for i in (1, 2):
            for j in (1, 2):
                header += [f"{name}{i}{j}_re", f"{name}{i}{j}_im"]
    rows = []
    for k, x in enumerate(sol.grid):
        row = [float(x)]
        for arr in (sol.C, sol.Cprime, sol.S, sol.Sprime):
            for i in range(2):
                for j in range(2):
                    row += [arr[k, i, j].real, arr[k, i, j].imag]
        rows.append(row)
    return header, rows
