"""Independent zero-potential oracles (p = q = 0).

With p = q = 0 the reflection equation decouples into an even part
-(alpha+1) u_e'' = lambda u_e and an odd part -(alpha-1) u_o'' = lambda u_o,
so every solution is u = A cos(k1 x) + B sin(k2 x)/k2 with k_j^2 = lambda w_j.
The five boundary-condition variants then reduce to scalar 2x2 determinants
in closed form.  None of this touches the matrix reduction or the ODE engine,
which is what makes these usable as acceptance oracles.
"""

from __future__ import annotations

import numpy as np

from .errors import UsageError
from .problem import weight_from_alpha

_VARIANTS = ("L", "L11", "L12", "L21", "L22")


def _cos_sinc(z2):
    """cos(sqrt(z2)) and sin(sqrt(z2))/sqrt(z2), entire in z2."""
    z = np.sqrt(np.asarray(z2, dtype=complex))
    c = np.cos(z)
    small = np.abs(z) < 1e-6
    zsafe = np.where(small, 1.0, z)
    s = np.where(small, 1.0 - z2 / 6.0, np.sin(zsafe) / zsafe)
    return c, s


def characteristic(alpha, variant="L"):
    """Closed-form scalar characteristic function of one variant (entire in
    lambda, zeros = eigenvalues; normalization differs from the matrix path)."""
    if variant not in _VARIANTS:
        raise UsageError(f"unknown variant {variant!r}")
    w1, w2 = weight_from_alpha(alpha)

    def fun(lam):
        lam = np.asarray(lam, dtype=complex)
        k1sq = lam * w1
        k2sq = lam * w2
        c1, s1n = _cos_sinc(k1sq)      # s1n = sin(k1)/k1
        c2, s2n = _cos_sinc(k2sq)
        k1s1 = k1sq * s1n              # k1 * sin(k1)
        if variant == "L":
            return -2.0 * c1 * s2n
        if variant == "L11":
            return k1s1 * s2n - c1 * c2
        if variant in ("L12", "L21"):
            return c1 * c2 + k1s1 * s2n
        return c1 * c2 - k1s1 * s2n    # L22

    return fun


def variant_l_eigenvalues(alpha, count):
    """Spectrum of the Dirichlet variant in closed form:
    (alpha+1)((n+1/2)pi)^2 (even family) and (alpha-1)(n pi)^2 (odd family),
    the `count` smallest by modulus, sorted lexicographically."""
    alpha = complex(alpha)
    n = np.arange(count + 1)
    even = (alpha + 1.0) * ((n + 0.5) * np.pi) ** 2
    odd = (alpha - 1.0) * (np.arange(1, count + 2) * np.pi) ** 2
    allz = np.concatenate([even, odd])
    allz = allz[np.argsort(np.abs(allz), kind="stable")][:count]
    return allz[np.lexsort((allz.imag, allz.real))]


def scan_eigenvalues(alpha, variant, count, *, refine_tol=1e-13):
    """Eigenvalues of a non-Dirichlet variant for real alpha by dense sign
    scan plus bisection on the two real-lambda families."""
    alpha = complex(alpha)
    if abs(alpha.imag) > 1e-14:
        raise UsageError("the sign-scan oracle needs real alpha")
    if variant == "L":
        return variant_l_eigenvalues(alpha, count)
    fun = characteristic(alpha, variant)

    def real_roots(sign):
        # positive-lambda family scales like (alpha+1), negative like (alpha-1)
        scale = abs(alpha + 1.0) if sign > 0 else abs(alpha - 1.0)
        hi = scale * ((count + 2) * np.pi) ** 2
        xs = sign * np.linspace(1e-6, hi, 40 * (count + 2))
        vals = fun(xs)
        if np.max(np.abs(vals.imag)) > 1e-9 * np.max(np.abs(vals.real)):
            raise UsageError("characteristic not real on this family; scan invalid")
        v = vals.real
        roots = []
        for i in range(len(xs) - 1):
            if v[i] == 0.0:
                roots.append(xs[i])
            elif v[i] * v[i + 1] < 0:
                a, b = xs[i], xs[i + 1]
                fa = v[i]
                for _ in range(200):
                    m = 0.5 * (a + b)
                    fm = fun(m).real
                    if fa * fm <= 0:
                        b = m
                    else:
                        a, fa = m, fm
                    if abs(b - a) < refine_tol * (1.0 + abs(m)):
                        break
                roots.append(0.5 * (a + b))
        return np.asarray(roots)

    allr = np.concatenate([real_roots(+1), real_roots(-1)])
    allr = allr[np.argsort(np.abs(allr), kind="stable")][:count]
    return np.sort(allr) + 0j


def oracle_eigenvalues(alpha, variant, count):
    """The `count` smallest-|lambda| eigenvalues of a zero-potential problem,
    computed independently of the matrix reduction."""
    if variant == "L":
        return variant_l_eigenvalues(alpha, count)
    return scan_eigenvalues(alpha, variant, count)


def dirichlet_delta_closed_form(lam):
    """Delta(lambda) = -cos(sqrt(lambda)) sinh(sqrt(lambda))/sqrt(lambda) for
    alpha = 0, p = q = 0 (the matrix-path normalization)."""
    lam = np.asarray(lam, dtype=complex)
    c1, _ = _cos_sinc(lam)
    _, s2n = _cos_sinc(-lam)   # sin(i r)/(i r) = sinh(r)/r
    return -c1 * s2n
