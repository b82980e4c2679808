"""Problem definitions and the involution -> matrix Sturm-Liouville reduction.

The second-order equation with reflection on (-1, 1),

    -alpha*u''(x) - u''(-x) + p(x)*u(x) + q(x)*u(-x) = lambda*u(x),

is rewritten through Z(x) = [u(-x), u(x)]^T on (0, 1) and diagonalized into

    -Y'' + Q(x) Y = lambda * W * Y,   Y(0) = 0,   T Y'(1) - Tperp Y(1) = 0,

with W = diag(1/(alpha+1), 1/(alpha-1)) and T = diag(1, 0).  All types here
are immutable after construction and safe to share between threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import AdmissibilityError, UsageError

BC_VARIANTS = ("L", "L11", "L12", "L21", "L22")

# similarity that diagonalizes the weight; U @ (1,1)/sqrt2 = e1
UMAT = np.array([[1.0, 1.0], [-1.0, 1.0]], dtype=complex) / np.sqrt(2.0)
TMAT = np.diag([1.0, 0.0]).astype(complex)
TPERP = np.diag([0.0, 1.0]).astype(complex)

_ENDPOINT_TOL = 1e-12


def _require_finite(arr, what):
    a = np.asarray(arr)
    if not np.all(np.isfinite(a.view(float) if np.iscomplexobj(a) else a)):
        raise UsageError(f"{what} contains non-finite values")


class CoefficientFunction:
    """Complex-valued coefficient on [-1, 1].

    Two representations: a polynomial (ascending coefficients) or a sampled
    grid with piecewise-linear interpolation.  Evaluation is defined for every
    x in [-1, 1]; grid abscissas must be strictly increasing and reach the
    endpoints to within 1e-12.
    """

    __slots__ = ("kind", "coeffs", "x", "values")

    def __init__(self, kind, coeffs=None, x=None, values=None):
        if kind == "poly":
            c = np.atleast_1d(np.asarray(coeffs, dtype=complex))
            if c.ndim != 1 or c.size == 0:
                raise UsageError("polynomial coefficients must be a non-empty 1-D list")
            _require_finite(c, "polynomial coefficients")
            self.coeffs = c.copy()
            self.coeffs.setflags(write=False)
            self.x = None
            self.values = None
        elif kind == "grid":
            xs = np.asarray(x, dtype=float)
            vs = np.asarray(values, dtype=complex)
            if xs.ndim != 1 or xs.size < 2 or vs.shape != xs.shape:
                raise UsageError("grid representation needs >= 2 abscissas with matching values")
            _require_finite(xs, "grid abscissas")
            _require_finite(vs, "grid values")
            if not np.all(np.diff(xs) > 0):
                raise UsageError("grid abscissas must be strictly increasing")
            if abs(xs[0] + 1.0) > _ENDPOINT_TOL or abs(xs[-1] - 1.0) > _ENDPOINT_TOL:
                raise UsageError("grid must cover [-1, 1] (endpoints within 1e-12)")
            self.x = xs.copy()
            self.values = vs.copy()
            self.x.setflags(write=False)
            self.values.setflags(write=False)
            self.coeffs = None
        else:
            raise UsageError(f"unknown coefficient representation {kind!r}")
        self.kind = kind

    @classmethod
    def constant(cls, value):
        return cls("poly", coeffs=[complex(value)])

    @classmethod
    def poly(cls, coeffs):
        return cls("poly", coeffs=coeffs)

    @classmethod
    def grid(cls, x, values):
        return cls("grid", x=x, values=values)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "poly":
            out = np.zeros(x.shape, dtype=complex)
            for c in self.coeffs[::-1]:
                out = out * x + c
            return out
        re = np.interp(x, self.x, self.values.real)
        im = np.interp(x, self.x, self.values.imag)
        return re + 1j * im

    def breakpoints(self):
        """Interior abscissas where the representation may lose smoothness."""
        if self.kind == "grid":
            return self.x[1:-1]
        return np.empty(0)

    def is_zero(self):
        if self.kind == "poly":
            return bool(np.all(self.coeffs == 0))
        return bool(np.all(self.values == 0))

    def to_json(self):
        if self.kind == "poly":
            return {"type": "poly", "coeffs": [[c.real, c.imag] for c in self.coeffs]}
        return {
            "type": "grid",
            "x": [float(v) for v in self.x],
            "values": [[v.real, v.imag] for v in self.values],
        }

    @classmethod
    def from_json(cls, obj):
        if not isinstance(obj, dict) or "type" not in obj:
            raise UsageError("coefficient must be an object with a 'type' field")
        if obj["type"] == "poly":
            coeffs = [complex(c[0], c[1]) for c in obj["coeffs"]]
            return cls("poly", coeffs=coeffs)
        if obj["type"] == "grid":
            values = [complex(v[0], v[1]) for v in obj["values"]]
            return cls("grid", x=obj["x"], values=values)
        raise UsageError(f"unknown coefficient type {obj['type']!r}")


def alpha_admissible(alpha) -> bool:
    """alpha in (-1, 1) or properly complex."""
    a = complex(alpha)
    if a.imag != 0.0:
        return True
    return -1.0 < a.real < 1.0


@dataclass(frozen=True)
class InvolutionProblem:
    """The reflection problem: alpha, coefficients p and q, and a BC variant tag."""

    alpha: complex
    p: CoefficientFunction
    q: CoefficientFunction
    bc: str = "L"

    def __post_init__(self):
        a = complex(self.alpha)
        if not np.isfinite(a.real) or not np.isfinite(a.imag):
            raise AdmissibilityError("alpha must be finite")
        if not alpha_admissible(a):
            raise AdmissibilityError(
                f"alpha = {a} lies in (-inf,-1] u [1,inf); the reduction is excluded there"
            )
        if self.bc not in BC_VARIANTS:
            raise UsageError(f"unknown boundary-condition variant {self.bc!r}")
        object.__setattr__(self, "alpha", a)

    @classmethod
    def zero(cls, alpha=0.0, bc="L"):
        """p = q = 0 with the given alpha."""
        return cls(alpha, CoefficientFunction.constant(0.0), CoefficientFunction.constant(0.0), bc)

    def is_zero_potential(self):
        return self.p.is_zero() and self.q.is_zero()

    def to_json(self):
        return {
            "alpha": {"re": self.alpha.real, "im": self.alpha.imag},
            "p": self.p.to_json(),
            "q": self.q.to_json(),
            "bc": self.bc,
        }

    @classmethod
    def from_json(cls, obj):
        try:
            alpha = complex(obj["alpha"]["re"], obj["alpha"]["im"])
            p = CoefficientFunction.from_json(obj["p"])
            q = CoefficientFunction.from_json(obj["q"])
            bc = obj.get("bc", "L")
        except (KeyError, TypeError, IndexError) as exc:
            raise UsageError(f"malformed problem object: {exc}") from exc
        return cls(alpha, p, q, bc)


def weight_from_alpha(alpha):
    """w_j = 1/(alpha + (-1)^(j+1)): the diagonal weight entries (w1, w2)."""
    a = complex(alpha)
    if not alpha_admissible(a):
        raise AdmissibilityError(
            f"alpha = {a} lies in (-inf,-1] u [1,inf); weight would be degenerate"
        )
    return 1.0 / (a + 1.0), 1.0 / (a - 1.0)


class MatrixSLProblem:
    """Reduced matrix problem: potential Q(x) on [0,1], diagonal weight W, projector T.

    Q is represented by a callable returning the 2x2 matrix at vectorized x,
    plus breakpoints where smoothness may fail (grid nodes of p/q).
    """

    __slots__ = ("W", "w1", "w2", "T", "Tperp", "_qfun", "_breaks", "source")

    def __init__(self, qfun, w1, w2, breakpoints=(), source=None):
        w1 = complex(w1)
        w2 = complex(w2)
        if w1 == 0 or w2 == 0 or np.isclose(np.angle(w1), np.angle(w2)):
            # arg equality is checked exactly where it matters (sector_geometry);
            # here we reject only the blatant degeneracies.
            if w1 == 0 or w2 == 0:
                raise AdmissibilityError("weight entries must be non-zero")
        self.w1 = w1
        self.w2 = w2
        self.W = np.diag([w1, w2])
        self.T = TMAT.copy()
        self.Tperp = TPERP.copy()
        self._qfun = qfun
        self._breaks = np.asarray(sorted(set(float(b) for b in breakpoints)))
        self.source = source

    def Q(self, x):
        """Potential at scalar or vector x; shape (..., 2, 2)."""
        return self._qfun(np.asarray(x, dtype=float))

    def breakpoints(self):
        return self._breaks

    def is_zero_potential(self):
        if self.source is not None:
            return self.source.is_zero_potential()
        xs = np.linspace(0.0, 1.0, 17)
        return bool(np.max(np.abs(self.Q(xs))) == 0.0)


def reduce_to_matrix(prob: InvolutionProblem) -> MatrixSLProblem:
    """Reduction chain: Z-form with weight W_cal = [[alpha,1],[1,alpha]]^{-1},
    then x -> 1-x and the similarity U, giving Q(x) = U Qcal(1-x) U^dag."""
    w1, w2 = weight_from_alpha(prob.alpha)
    alpha = prob.alpha
    p, q = prob.p, prob.q
    det = alpha * alpha - 1.0
    # W_cal = [[alpha, -1], [-1, alpha]] / (alpha^2 - 1)
    wcal = np.array([[alpha, -1.0], [-1.0, alpha]], dtype=complex) / det

    def qfun(x):
        x = np.asarray(x, dtype=float)
        t = 1.0 - x  # argument of Qcal
        pm = p(-t)
        pp = p(t)
        qm = q(-t)
        qp = q(t)
        # P(t) = [[p(-t), q(-t)], [q(t), p(t)]]
        P = np.empty(x.shape + (2, 2), dtype=complex)
        P[..., 0, 0] = pm
        P[..., 0, 1] = qm
        P[..., 1, 0] = qp
        P[..., 1, 1] = pp
        qcal = wcal @ P
        return UMAT @ qcal @ UMAT.conj().T

    # grid nodes t0 of p/q induce kinks at x = 1 - t0 (t0 >= 0) and x = 1 + t0 (t0 <= 0)
    breaks = set()
    for fun in (p, q):
        for t0 in np.concatenate([fun.breakpoints(), [-1.0, 1.0] if fun.kind == "grid" else []]):
            for xb in (1.0 - t0, 1.0 + t0):
                if 1e-12 < xb < 1.0 - 1e-12:
                    breaks.add(round(float(xb), 15))
    return MatrixSLProblem(qfun, w1, w2, breakpoints=breaks, source=prob)


def recover_coefficients(mat: MatrixSLProblem, t):
    """Invert the reduction pointwise: Qcal(s) = U^dag Q(1-s) U, then unpack
    p, q at +-t from W_cal^{-1} Qcal.  t in (0, 1]."""
    t = np.asarray(t, dtype=float)
    if np.any(t <= 0) or np.any(t > 1):
        raise UsageError("recover_coefficients expects t in (0, 1]")
    Qx = mat.Q(1.0 - t)
    qcal = UMAT.conj().T @ Qx @ UMAT
    w1, w2 = mat.w1, mat.w2
    # W_cal = U^dag diag(w1, w2) U; invert it once
    wcal = UMAT.conj().T @ np.diag([w1, w2]) @ UMAT
    P = np.linalg.solve(wcal, qcal)
    # P = [[p(-t), q(-t)], [q(t), p(t)]]
    return {
        "p_plus": P[..., 1, 1],
        "p_minus": P[..., 0, 0],
        "q_plus": P[..., 1, 0],
        "q_minus": P[..., 0, 1],
    }
