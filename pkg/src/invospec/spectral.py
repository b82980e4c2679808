"""Characteristic functions, eigenvalue location and spectral-mapping blocks.

The five entire functions Delta, Delta_jk are 2x2 boundary determinants of
pairs of vector solutions C*u1, C*u2, S*u1, S*u2 (u1, u2 the columns of the
diagonalizing similarity U):

    Delta    =  det[V(S u1), V(S u2)]
    Delta11  = -det[V(C u1), V(S u2)]      Delta12 = -det[V(C u2), V(S u2)]
    Delta21  =  det[V(C u1), V(S u1)]      Delta22 =  det[V(C u2), V(S u1)]

with V(y) = (y'_1(1), -y_2(1)).  These determinants are the (row-pair 2,3)
minors of the 4x4 fundamental state and are propagated on the second compound
of the companion system, which keeps them cancellation-free at strongly
growing lambda.  Zeros are located by the argument principle on rectangles
with adaptive boundary sampling, rectangle subdivision down to single zeros,
and batched Newton refinement.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConsistencyError,
    ConvergenceError,
    IntegrationError,
    RegionError,
    UsageError,
)
from .geometry import SectorGeometry, sector_geometry
from .problem import InvolutionProblem, MatrixSLProblem, UMAT, reduce_to_matrix
from .propagator import (
    _AEval,
    _UNSCALE_LIMIT,
    PAIRS,
    default_slab_count,
    edges_between,
    propagate_compound,
    second_compound,
)

VARIANTS = ("L", "L11", "L12", "L21", "L22")
_VARIANT_INDEX = {v: i for i, v in enumerate(VARIANTS)}

DEFAULT_TOL_ROOT = 1e-10


def unscale(vals, logs, limit=_UNSCALE_LIMIT):
    logs = np.asarray(logs)
    if np.any(logs > limit):
        raise IntegrationError("characteristic value exceeds double range")
    return vals * np.exp(logs)[..., None] if vals.ndim > logs.ndim else vals * np.exp(logs)


class CharacteristicSet:
    """Evaluators for Delta(lambda) and the four Delta_jk(lambda).

    Each evaluation performs a fresh compound-state integration across [0, 1];
    results come back scaled as (values, log_scale) so arbitrarily large
    |lambda| stays representable.
    """

    def __init__(self, problem):
        if isinstance(problem, InvolutionProblem):
            self.problem = problem
            self.matrix = reduce_to_matrix(problem)
            self.alpha = problem.alpha
        elif isinstance(problem, MatrixSLProblem):
            self.matrix = problem
            self.problem = problem.source
            self.alpha = problem.source.alpha if problem.source is not None else None
        else:
            raise UsageError("CharacteristicSet needs an InvolutionProblem or MatrixSLProblem")
        self._wd = np.array([self.matrix.w1, self.matrix.w2], dtype=complex)
        K0 = np.zeros((4, 4), dtype=complex)
        K0[:2, :2] = UMAT
        K0[2:, 2:] = UMAT
        self._M0 = second_compound(K0)
        self._edges = edges_between(0.0, 1.0, self.matrix.breakpoints())

    def geometry(self) -> SectorGeometry:
        return sector_geometry(self.matrix.w1, self.matrix.w2)

    def components_scaled(self, lams, n_slabs=None, richardson=True):
        """All five characteristic values at each lambda.

        Returns (values, logs): values (nb, 5) complex in the order
        [Delta, Delta11, Delta12, Delta21, Delta22], true value =
        values * exp(logs)."""
        lams = np.atleast_1d(np.asarray(lams, dtype=complex))
        n = n_slabs if n_slabs is not None else default_slab_count(lams)
        aeval = _AEval(self.matrix.Q, self._wd, lams)
        M2, L2 = propagate_compound(aeval, 2 * n, self._edges, self._M0)
        if richardson:
            M1, L1 = propagate_compound(aeval, n, self._edges, self._M0)
            fac = np.exp(L1 - L2)[:, None, None]
            M = (4.0 * M2 - M1 * fac) / 3.0
        else:
            M = M2
        row = M[:, PAIRS.index((1, 2)), :]
        vals = np.stack([
            row[:, PAIRS.index((2, 3))],          # Delta
            -row[:, PAIRS.index((0, 3))],         # Delta11
            -row[:, PAIRS.index((1, 3))],         # Delta12
            row[:, PAIRS.index((0, 2))],          # Delta21
            row[:, PAIRS.index((1, 2))],          # Delta22
        ], axis=1)
        return vals, L2

    def evaluator(self, variant="L", n_slabs=None, richardson=True):
        """Scaled evaluator for one variant: f(lams) -> (values, logs)."""
        idx = _VARIANT_INDEX[variant]

        def fun(lams):
            vals, logs = self.components_scaled(lams, n_slabs=n_slabs, richardson=richardson)
            return vals[:, idx], logs

        return fun

    def delta(self, lam):
        """Delta(lambda), unscaled (raises if out of double range)."""
        vals, logs = self.components_scaled([complex(lam)])
        return complex(unscale(vals[0, 0], logs[0]))

    def components(self, lam):
        """(Delta, Delta11, Delta12, Delta21, Delta22) unscaled at one lambda."""
        vals, logs = self.components_scaled([complex(lam)])
        out = unscale(vals[0], logs[0] * np.ones(5))
        return tuple(complex(v) for v in out)

    def weyl_from_components(self, lam):
        """U^dag M U reconstructed as [Delta_jk] / Delta (Cramer route)."""
        d, d11, d12, d21, d22 = self.components(lam)
        return np.array([[d11, d12], [d21, d22]], dtype=complex) / d


def char_delta(ctx: CharacteristicSet, lam):
    return ctx.delta(lam)


def char_components(ctx: CharacteristicSet, lam):
    return ctx.components(lam)


# ---------------------------------------------------------------------------
# argument-principle machinery


def _rect_boundary(region, n_side):
    re0, re1, im0, im1 = region
    bottom = re0 + np.linspace(0, 1, n_side, endpoint=False) * (re1 - re0) + 1j * im0
    right = re1 + 1j * (im0 + np.linspace(0, 1, n_side, endpoint=False) * (im1 - im0))
    top = re1 - np.linspace(0, 1, n_side, endpoint=False) * (re1 - re0) + 1j * im1
    left = re0 + 1j * (im1 - np.linspace(0, 1, n_side, endpoint=False) * (im1 - im0))
    return np.concatenate([bottom, right, top, left])


def _phase_winding(values):
    v = np.append(values, values[0])
    ratios = v[1:] / v[:-1]
    incs = np.angle(ratios)
    return float(np.sum(incs) / (2.0 * np.pi)), float(np.max(np.abs(incs)))


@dataclass
class _WindingResult:
    count: int
    ok: bool
    boundary_logmag_max: float
    boundary_logmag_min: float


def winding_number(fun, region, n_side=64, max_doublings=5, tol=1e-3):
    """Winding of f along the rectangle boundary, doubling the sampling until
    the value is integer-stable; ok=False flags a zero (too) close to the
    boundary."""
    prev = None
    n = n_side
    for _ in range(max_doublings + 1):
        pts = _rect_boundary(region, n)
        vals, logs = fun(pts)
        if np.any(vals == 0):
            return _WindingResult(0, False, np.inf, -np.inf)
        w, max_inc = _phase_winding(vals)
        lmag = np.log(np.abs(vals)) + logs
        near_int = abs(w - round(w)) < tol
        if near_int and max_inc < 2.2 and prev is not None and round(w) == prev:
            return _WindingResult(int(round(w)), True, float(np.max(lmag)), float(np.min(lmag)))
        prev = int(round(w)) if near_int else None
        n *= 2
    return _WindingResult(prev if prev is not None else 0, False,
                          float(np.max(lmag)), float(np.min(lmag)))


def _newton_refine(fun, lams0, mults, tol_logmag, maxit=16):
    """Batched multiplicity-aware Newton.

    The first step uses a forward difference; later steps reuse the previous
    iterate as a secant, so each iteration costs one batched evaluation.
    tol_logmag: per-root log|f| acceptance threshold.  Returns refined lams,
    a converged mask and the final log|f| values."""
    lam = np.asarray(lams0, dtype=complex).copy()
    m = np.asarray(mults, dtype=float)
    n = len(lam)
    active = np.ones(n, dtype=bool)
    prev_lam = np.zeros(n, dtype=complex)
    prev_logf = np.full(n, np.nan, dtype=complex)

    def logf_at(lams):
        vals, logs = fun(lams)
        return np.log(vals + (vals == 0) * 1e-300) + logs

    for it in range(maxit):
        if not np.any(active):
            break
        idx = np.nonzero(active)[0]
        logf = logf_at(lam[idx])
        have_prev = np.isfinite(prev_logf[idx].real)
        if not np.all(have_prev):
            miss = idx[~have_prev]
            h = 1e-7 * (1.0 + np.abs(lam[miss]))
            prev_lam[miss] = lam[miss] + h
            prev_logf[miss] = logf_at(lam[miss] + h)
        ref = np.maximum(logf.real, prev_logf[idx].real)
        f0 = np.exp(logf - ref)
        f1 = np.exp(prev_logf[idx] - ref)
        dlam = lam[idx] - prev_lam[idx]
        deriv = (f0 - f1) / np.where(dlam == 0, 1.0, dlam)
        bad = (deriv == 0) | ~np.isfinite(deriv) | (dlam == 0)
        deriv = np.where(bad, 1.0, deriv)
        step = m[idx] * f0 / deriv
        step = np.where(bad, 0.0, step)
        prev_lam[idx] = lam[idx]
        prev_logf[idx] = logf
        lam[idx] = lam[idx] - step
        done = np.abs(step) <= 1e-13 * (1.0 + np.abs(lam[idx]))
        active[idx[done]] = False
    vals, logs = fun(lam)
    logmag = np.log(np.abs(vals) + 1e-300) + logs
    conv = logmag <= tol_logmag
    return lam, conv, logmag


_SPLIT_FRACTIONS = (0.5, 0.45, 0.55, 0.4, 0.6, 0.35, 0.65)


def _subdivide(region, frac):
    re0, re1, im0, im1 = region
    if (re1 - re0) >= (im1 - im0):
        mid = re0 + frac * (re1 - re0)
        return (re0, mid, im0, im1), (mid, re1, im0, im1)
    mid = im0 + frac * (im1 - im0)
    return (re0, re1, im0, mid), (re0, re1, mid, im1)


def _diam(region):
    return float(np.hypot(region[1] - region[0], region[3] - region[2]))


def find_zeros(fun, region, *, tol_root=DEFAULT_TOL_ROOT, n_side=64,
               max_inflate=5, min_cell_rel=1e-7, fun_coarse=None):
    """All zeros (with multiplicities) of a scaled analytic evaluator inside a
    rectangle; argument-principle counted, Newton refined.

    fun(lams) -> (values, logs).  fun_coarse, when given, is a cheaper
    evaluator used for the winding counts only (phases tolerate ~1e-3
    relative error); Newton refinement always uses fun.
    Returns (zeros, mults, total_count, region_used)."""
    fc = fun_coarse if fun_coarse is not None else fun
    region = tuple(float(v) for v in region)
    if region[1] <= region[0] or region[3] <= region[2]:
        raise UsageError("region must satisfy re_min < re_max, im_min < im_max")
    work = region
    wres = winding_number(fc, work, n_side=n_side)
    attempt = 0
    while not wres.ok:
        attempt += 1
        if attempt > max_inflate:
            raise RegionError(
                "region boundary stays too close to a zero of the characteristic function",
                suggested_inflation=1.0 + 0.021 * attempt)
        c_re = 0.5 * (region[0] + region[1])
        c_im = 0.5 * (region[2] + region[3])
        f = 1.0 + 0.021 * attempt
        work = (c_re + (region[0] - c_re) * f, c_re + (region[1] - c_re) * f,
                c_im + (region[2] - c_im) * f, c_im + (region[3] - c_im) * f)
        wres = winding_number(fc, work, n_side=n_side)
    total = wres.count
    if total < 0:
        raise ConsistencyError("negative winding number: evaluator is not analytic")
    if total == 0:
        return np.empty(0, complex), np.empty(0, int), 0, work

    scale_logmag = max(0.0, wres.boundary_logmag_max)
    tol_logmag = np.log(tol_root) + scale_logmag

    def _split(cell, count):
        for frac in _SPLIT_FRACTIONS:
            c1, c2 = _subdivide(cell, frac)
            w1 = winding_number(fc, c1, n_side=n_side)
            if not w1.ok:
                continue
            w2 = winding_number(fc, c2, n_side=n_side)
            if not w2.ok or w1.count + w2.count != count:
                continue
            return [(c, w) for c, w in ((c1, w1.count), (c2, w2.count)) if w > 0]
        raise ConsistencyError(
            f"could not split cell {cell} (count {count}) with a stable winding")

    pending = [(work, total)]
    accepted = []   # (zero, mult)
    for _round in range(64):
        if not pending:
            break
        cells = []   # (center, mult, cell) ready for refinement
        while pending:
            cell, count = pending.pop()
            diam = _diam(cell)
            center = complex(0.5 * (cell[0] + cell[1]), 0.5 * (cell[2] + cell[3]))
            small = diam <= min_cell_rel * (1.0 + abs(center))
            if count == 1 or small:
                cells.append((center, count, cell))
                continue
            pending.extend(_split(cell, count))
        if not cells:
            break
        lams0 = np.array([c for c, _, _ in cells], dtype=complex)
        mults = np.array([m for _, m, _ in cells], dtype=int)
        refined, conv, logmag = _newton_refine(fun, lams0, mults, tol_logmag)
        for k in range(len(refined)):
            cell = cells[k][2]
            pad_re = 0.02 * (cell[1] - cell[0]) + 1e-9
            pad_im = 0.02 * (cell[3] - cell[2]) + 1e-9
            inside = (cell[0] - pad_re <= refined[k].real <= cell[1] + pad_re
                      and cell[2] - pad_im <= refined[k].imag <= cell[3] + pad_im)
            if conv[k] and inside:
                accepted.append((refined[k], int(mults[k])))
            else:
                # wrong Newton basin (or no convergence): shrink the cell and retry
                diam = _diam(cell)
                center = cells[k][0]
                if diam <= min_cell_rel * (1.0 + abs(center)):
                    raise ConsistencyError(
                        f"Newton refinement failed at {refined[k]} (cell {cell},"
                        f" |f| log-magnitude {logmag[k]:.2f} vs threshold {tol_logmag:.2f})")
                pending.extend(_split(cell, int(mults[k])))
    if pending:
        raise ConsistencyError("zero search did not settle after the subdivision cap")
    refined = np.array([z for z, _ in accepted], dtype=complex)
    mults = np.array([m for _, m in accepted], dtype=int)
    order = np.lexsort((refined.imag, refined.real))
    refined = refined[order]
    mults = mults[order]
    zeros = []
    zmults = []
    for z, m in zip(refined, mults):
        if zeros and abs(z - zeros[-1]) <= 1e-9 * (1.0 + abs(z)):
            # two disjoint cells cannot share a zero; a collision means a
            # wrong Newton basin slipped through the escape check
            raise ConsistencyError(f"distinct cells refined to the same zero {z}")
        zeros.append(complex(z))
        zmults.append(int(m))
    if sum(zmults) != total:
        raise ConsistencyError(
            f"refined multiplicity total {sum(zmults)} != boundary winding {total}")
    return np.array(zeros), np.array(zmults, dtype=int), total, work


# ---------------------------------------------------------------------------
# spectra


@dataclass(frozen=True)
class Spectrum:
    """Zero set of one characteristic function, sorted by (Re, Im)."""

    variant: str
    region: tuple
    eigenvalues: tuple        # of (complex, int multiplicity)
    shift: float = 0.0

    def values(self):
        return np.array([z for z, _ in self.eigenvalues], dtype=complex)

    def mults(self):
        return np.array([m for _, m in self.eigenvalues], dtype=int)

    def expanded(self):
        """Eigenvalues repeated by multiplicity, sorted."""
        out = []
        for z, m in self.eigenvalues:
            out.extend([z] * m)
        return np.array(out, dtype=complex)

    def count(self):
        return int(sum(m for _, m in self.eigenvalues))

    def smallest(self, n):
        """n eigenvalues of smallest |value| (with multiplicity), then sorted
        lexicographically."""
        ex = self.expanded()
        order = np.argsort(np.abs(ex), kind="stable")
        sel = ex[order[:n]]
        sel = sel[np.lexsort((sel.imag, sel.real))]
        return sel

    def to_json(self):
        return {
            "variant": self.variant,
            "region": [float(v) for v in self.region],
            "shift": float(self.shift),
            "eigenvalues": [
                {"re": z.real, "im": z.imag, "mult": int(m)} for z, m in self.eigenvalues
            ],
        }

    @classmethod
    def from_json(cls, obj):
        try:
            eig = tuple(
                (complex(e["re"], e["im"]), int(e.get("mult", 1)))
                for e in obj["eigenvalues"]
            )
            return cls(variant=obj["variant"], region=tuple(obj["region"]),
                       eigenvalues=eig, shift=float(obj.get("shift", 0.0)))
        except (KeyError, TypeError) as exc:
            raise UsageError(f"malformed spectrum object: {exc}") from exc


def _sorted_pairs(zeros, mults):
    order = np.lexsort((np.asarray(zeros).imag, np.asarray(zeros).real))
    return tuple((complex(zeros[i]), int(mults[i])) for i in order)


def _choose_shift(zeros):
    """Real shift for spectra containing a zero eigenvalue."""
    nz = [abs(z) for z in zeros if abs(z) > 1e-8]
    base = 0.5 * min(nz) if nz else 1.0
    for cand in (-base, base, -2.0 * base, 2.0 * base):
        if all(abs(z - cand) > 0.25 * base for z in zeros):
            return float(cand)
    return float(-0.5 * base)


def find_eigenvalues(ctx: CharacteristicSet, region, variant="L", *,
                     tol_root=DEFAULT_TOL_ROOT, n_side=64) -> Spectrum:
    """All zeros of the selected characteristic function inside the region."""
    if variant not in VARIANTS:
        raise UsageError(f"unknown variant {variant!r}")
    corners = np.array([complex(region[0], region[2]), complex(region[1], region[3])])
    n_slabs = default_slab_count(corners)
    fun = ctx.evaluator(variant, n_slabs=n_slabs)
    fun_coarse = ctx.evaluator(variant, richardson=False,
                               n_slabs=default_slab_count(corners, base=32, per_rho=0.1))
    zeros, mults, total, used = find_zeros(fun, region, tol_root=tol_root, n_side=n_side,
                                           fun_coarse=fun_coarse)
    # keep roots inside the requested region (inflation may have added a margin)
    keep = ((zeros.real >= region[0] - 1e-12) & (zeros.real <= region[1] + 1e-12)
            & (zeros.imag >= region[2] - 1e-12) & (zeros.imag <= region[3] + 1e-12))
    zeros, mults = zeros[keep], mults[keep]
    shift = 0.0
    if np.any(np.abs(zeros) <= 1e-8):
        shift = _choose_shift(zeros)
    return Spectrum(variant=variant, region=tuple(float(v) for v in region),
                    eigenvalues=_sorted_pairs(zeros, mults), shift=shift)


# ---------------------------------------------------------------------------
# asymptotic branch models and spectrum extension


@dataclass(frozen=True)
class BranchModel:
    """lambda_n ~ (pi n + phi)^2 / w along one of the two weight channels."""

    w: complex
    phi: complex
    n_min: int
    n_max: int

    def lam(self, n):
        n = np.asarray(n)
        return (np.pi * n + self.phi) ** 2 / self.w

    def nu(self, lam):
        v = np.sqrt(np.asarray(lam, dtype=complex) * self.w)
        return np.where(v.real >= 0, v, -v)

    def index_of(self, lam):
        return int(np.round((self.nu(lam).real - self.phi.real) / np.pi))


def fit_branch_models(zeros, w1, w2, tail=20):
    """Assign zeros to the two quadratic branches and fit the offsets phi.

    Classification is nearest-model; a relative gap below 5% between the two
    branch distances raises ConvergenceError (ambiguous assignment)."""
    zeros = np.asarray(zeros, dtype=complex)
    if len(zeros) < 6:
        raise ConvergenceError("too few zeros to fit branch models")
    ws = (complex(w1), complex(w2))
    nus = []
    for w in ws:
        v = np.sqrt(zeros * w)
        v = np.where(v.real >= 0, v, -v)
        nus.append(v)
    # initial split: branch whose nu is closer to the real axis
    im0 = np.abs(nus[0].imag)
    im1 = np.abs(nus[1].imag)
    assign = (im1 < im0).astype(int)
    models = []
    for k, w in enumerate(ws):
        sel = assign == k
        if np.count_nonzero(sel) < 3:
            raise ConvergenceError(f"branch {k + 1} has too few zeros to fit")
        nu = nus[k][sel]
        order = np.argsort(nu.real)
        nu = nu[order]
        phi = nu[0] - np.pi * np.round(nu[0].real / np.pi)
        for _ in range(3):
            ns = np.round((nu - phi).real / np.pi).astype(int)
            take = slice(-tail, None) if len(nu) > tail else slice(None)
            phi = np.mean(nu[take] - np.pi * ns[take])
        ns = np.round((nu - phi).real / np.pi).astype(int)
        if len(np.unique(ns)) != len(ns):
            raise ConvergenceError("branch indexing collision while fitting the tail model")
        models.append(BranchModel(w=w, phi=complex(phi), n_min=int(ns.min()),
                                  n_max=int(ns.max())))
    # ambiguity check against the fitted models
    for z in zeros:
        dists = []
        for mod in models:
            n = mod.index_of(z)
            cand = [mod.lam(max(n + d, 0)) for d in (-1, 0, 1)]
            dists.append(min(abs(z - c) for c in cand))
        hi = max(dists)
        lo = min(dists)
        if hi > 0 and (hi - lo) / hi < 0.05:
            raise ConvergenceError(
                f"ambiguous branch assignment for zero {z}: distances {dists}")
    return models, assign


def extend_spectrum(ctx: CharacteristicSet, spec: Spectrum, count, *,
                    verify_bands=True, batch=256) -> Spectrum:
    """Extend a Spectrum to `count` zeros by model-started Newton continuation.

    New zeros are located from the fitted branch models, refined, and each
    extension band is optionally re-counted by the argument principle."""
    if spec.count() >= count:
        return spec
    zeros = list(spec.expanded())
    models, _ = fit_branch_models(zeros, ctx.matrix.w1, ctx.matrix.w2)
    next_n = [m.n_max + 1 for m in models]
    known = np.array(zeros, dtype=complex)
    new_all = []
    while len(zeros) + len(new_all) < count:
        # candidates: next batch of model zeros from both branches, smallest |lam| first
        cands = []
        for k, mod in enumerate(models):
            ns = np.arange(next_n[k], next_n[k] + batch)
            for n in ns:
                cands.append((abs(mod.lam(n)), k, int(n)))
        cands.sort()
        need = count - len(zeros) - len(new_all)
        cands = cands[:max(need, 8)]
        lam0 = np.array([models[k].lam(n) for _, k, n in cands], dtype=complex)
        n_slabs = default_slab_count(lam0, per_rho=0.45)
        fun = ctx.evaluator(spec.variant, n_slabs=n_slabs)
        refined, conv, _ = _newton_refine(fun, lam0, np.ones(len(lam0)),
                                          tol_logmag=np.inf)
        spacing = np.array([abs(models[k].lam(n + 1) - models[k].lam(n))
                            for _, k, n in cands])
        moved = np.abs(refined - lam0)
        if np.any(~conv) or np.any(moved > 0.45 * spacing):
            raise ConsistencyError("model-started refinement drifted; band needs contour search")
        for z in refined:
            if np.any(np.abs(known - z) <= 1e-8 * (1.0 + abs(z))) or (
                    new_all and np.any(np.abs(np.array(new_all) - z) <= 1e-8 * (1.0 + abs(z)))):
                raise ConsistencyError(f"continuation rediscovered an existing zero at {z}")
            new_all.append(complex(z))
        if verify_bands:
            fun_c = ctx.evaluator(spec.variant, richardson=False,
                                  n_slabs=default_slab_count(lam0, base=32, per_rho=0.1))
            allfound = list(known) + new_all
            band = np.array(refined)
            order = np.argsort(np.abs(band))
            for chunk in np.array_split(order, max(1, len(order) // 16)):
                sub = band[chunk]
                pad = 0.5 * np.min(spacing[chunk]) if len(chunk) else 0.0
                reg = (sub.real.min() - pad, sub.real.max() + pad,
                       sub.imag.min() - pad, sub.imag.max() + pad)
                wr = winding_number(fun_c, reg, n_side=96)
                inside = [z for z in allfound
                          if reg[0] < z.real < reg[1] and reg[2] < z.imag < reg[3]]
                if wr.ok and wr.count != len(inside):
                    raise ConsistencyError(
                        f"band count {wr.count} != known zeros {len(inside)} in {reg}")
        for _, k, n in cands:
            next_n[k] = max(next_n[k], n + 1)
    allz = zeros + new_all
    allz = allz[:]
    vals = np.array(allz, dtype=complex)
    mults = np.ones(len(vals), dtype=int)
    region = (float(min(vals.real.min(), spec.region[0])),
              float(max(vals.real.max(), spec.region[1])),
              float(min(vals.imag.min(), spec.region[2])),
              float(max(vals.imag.max(), spec.region[3])))
    return Spectrum(variant=spec.variant, region=region,
                    eigenvalues=_sorted_pairs(vals, mults), shift=spec.shift)


def first_eigenvalues(ctx: CharacteristicSet, variant, count, *, imag_halfwidth=None,
                      tol_root=DEFAULT_TOL_ROOT) -> Spectrum:
    """The `count` smallest-|lambda| eigenvalues of one variant.

    A seed region sized from the zero-potential families is searched by
    contours, then extended along the branch models until `count` zeros of
    smallest modulus are certain (both model tails exceed the n-th modulus)."""
    w1, w2 = ctx.matrix.w1, ctx.matrix.w2
    # crude magnitude estimate of the k-th zero of either family
    kk = np.arange(count + 2)
    est = np.concatenate([np.abs(((kk + 0.5) * np.pi) ** 2 / w1),
                          np.abs(((kk + 1) * np.pi) ** 2 / w2)])
    est = np.sort(est)
    rad = est[min(count + 1, len(est) - 1)] * 1.25 + 20.0
    # potential shifts eigenvalues by roughly the mean potential size
    pr = ctx.problem
    if pr is not None:
        xs = np.linspace(-1, 1, 33)
        rad += 2.0 * float(np.max(np.abs(pr.p(xs))) + np.max(np.abs(pr.q(xs))))
    seeds = max(10, min(count, 14))
    seed_rad = est[min(seeds, len(est) - 1)] * 1.3 + 15.0
    hw = imag_halfwidth
    if hw is None:
        hw = 0.35 * rad if _complex_problem(ctx) else max(6.0, 0.02 * rad)
    spec = find_eigenvalues(ctx, (-seed_rad, seed_rad, -min(hw, seed_rad), min(hw, seed_rad)),
                            variant, tol_root=tol_root)
    if spec.count() < 6:
        spec = find_eigenvalues(ctx, (-rad, rad, -min(hw, rad), min(hw, rad)),
                                variant, tol_root=tol_root)
    target = count + 4
    spec = extend_spectrum(ctx, spec, target, verify_bands=False)
    sel = spec.smallest(count)
    region = (float(sel.real.min()) - 1.0, float(sel.real.max()) + 1.0,
              float(sel.imag.min()) - 1.0, float(sel.imag.max()) + 1.0)
    out = Spectrum(variant=variant, region=region,
                   eigenvalues=tuple((complex(z), 1) for z in sel), shift=spec.shift)
    return out


def _complex_problem(ctx):
    if ctx.alpha is not None and abs(complex(ctx.alpha).imag) > 1e-14:
        return True
    pr = ctx.problem
    if pr is None:
        return True
    xs = np.linspace(-1, 1, 17)
    return bool(np.max(np.abs(pr.p(xs).imag)) > 1e-12 or np.max(np.abs(pr.q(xs).imag)) > 1e-12)


# ---------------------------------------------------------------------------
# ray asymptotics of the characteristic functions (Lemma-4.1-type checks)


def delta_ray_deviation(ctx: CharacteristicSet, geom: SectorGeometry, ray_index, rs):
    """Deviation-from-one of the normalized characteristic functions on a ray.

    Normalizations (constants corrected; see the ledger):
        Delta    * (-4 i rho d2) * exp(-i rho (d1 + d2))  -> 1
        Delta_jk * (8 / alpha_jk) * exp(-i rho (d1 + d2)) -> 1,
    alpha_jk = d1/d2 + 1 for j = k and d1/d2 - 1 otherwise.
    Returns (dev_delta, dev_jk) with shapes (nr,), (nr, 4)."""
    rs = np.asarray(rs, dtype=float)
    theta = geom.rays[ray_index]
    D = geom.ray_branch(ray_index)
    d1, d2 = D[0, 0], D[1, 1]
    rho = rs * np.exp(1j * theta)
    lams = rho ** 2
    vals, logs = ctx.components_scaled(lams, n_slabs=default_slab_count(lams))
    expo = -1j * rho * (d1 + d2)
    a_jk = np.array([d1 / d2 + 1.0, d1 / d2 - 1.0, d1 / d2 - 1.0, d1 / d2 + 1.0])
    with np.errstate(over="raise"):
        norm_delta = vals[:, 0] * (-4j * rho * d2) * np.exp(expo + logs)
        norm_jk = vals[:, 1:] * (8.0 / a_jk)[None, :] * np.exp(expo + logs)[:, None]
    return np.abs(norm_delta - 1.0), np.abs(norm_jk - 1.0)


def fit_loglog_slope(rs, devs):
    """Least-squares slope of log(dev) against log(r)."""
    rs = np.asarray(rs, dtype=float)
    devs = np.maximum(np.asarray(devs, dtype=float), 1e-300)
    lx = np.log(rs)
    ly = np.log(devs)
    A = np.vstack([lx, np.ones_like(lx)]).T
    slope, _ = np.linalg.lstsq(A, ly, rcond=None)[0]
    return float(slope)


# ---------------------------------------------------------------------------
# spectral-mapping blocks


@dataclass(frozen=True)
class SpectralMappingBlocks:
    x: float
    lam: complex
    P11: np.ndarray
    P12: np.ndarray


def spectral_mapping_blocks(prob_a, prob_b, x, lam, *, method="auto") -> SpectralMappingBlocks:
    """P11 = -S Phi~*' + Phi S~*', P12 = S Phi~* - Phi S~* at (x, lambda).

    prob_a supplies S, Phi; prob_b (the tilde problem) supplies the adjoint
    S~*, Phi~*.  Both must share the weight."""
    from .ode import integrate_adjoint, integrate_fundamental, weyl_solution

    ma = prob_a if isinstance(prob_a, MatrixSLProblem) else reduce_to_matrix(prob_a)
    mb = prob_b if isinstance(prob_b, MatrixSLProblem) else reduce_to_matrix(prob_b)
    if not np.allclose([ma.w1, ma.w2], [mb.w1, mb.w2]):
        raise UsageError("spectral mapping blocks need problems sharing the weight")
    lam = complex(lam)
    x = float(x)
    grid = np.unique(np.concatenate([np.linspace(0.0, 1.0, 65), [x]]))
    ix = int(np.nonzero(np.isclose(grid, x))[0][0])

    fa = integrate_fundamental(ma, lam, grid, method="slab")
    wa = weyl_solution(ma, lam, grid, method=method)
    Sa, Sap = fa.S[ix], fa.Sprime[ix]
    Pa, Pap = wa.Phi[ix], wa.Phiprime[ix]

    # adjoint objects of the tilde problem via the transpose route
    mbT = MatrixSLProblem(lambda t: np.swapaxes(mb.Q(t), -1, -2), mb.w1, mb.w2,
                          breakpoints=mb.breakpoints())
    fbT = integrate_fundamental(mbT, lam, grid, method="slab")
    wbT = weyl_solution(mbT, lam, grid, method=method)
    SbsT, SbspT = fbT.S[ix].T, fbT.Sprime[ix].T
    PbsT, PbspT = wbT.Phi[ix].T, wbT.Phiprime[ix].T

    P11 = -Sa @ PbspT + Pa @ SbspT
    P12 = Sa @ PbsT - Pa @ SbsT
    return SpectralMappingBlocks(x=x, lam=lam, P11=P11, P12=P12)
