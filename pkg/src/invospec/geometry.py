"""Sector partition of the rho-plane and the four special rays.

With lambda = rho^2 and weight entries w1, w2, the numbers +-i*sqrt(w_k)
order the exponential growth of solutions.  Sector boundaries are the angles
where two of the values Re(rho * R) coincide; the special rays are the four
boundaries where

    Re(i rho d1) = Re(i rho d2) > 0

holds, with the square-root branches d_k = +-sqrt(w_k) fixed per sector by
Re(i rho d_k) > 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateWeightError

_TWO_PI = 2.0 * np.pi


def _norm_angle(theta):
    return float(np.mod(theta, _TWO_PI))


@dataclass(frozen=True)
class SectorGeometry:
    """Sector boundaries, branch table and the four special rays for a weight."""

    w1: complex
    w2: complex
    thetas: tuple            # sorted boundary angles in [0, 2pi)
    rays: tuple              # the four special-ray angles, sorted, in [0, 2pi)
    branch_signs: tuple      # per sector (between thetas[i], thetas[i+1]): (s1, s2)

    def sector_index(self, theta):
        """Index of the sector containing angle theta (boundaries go left)."""
        th = _norm_angle(theta)
        idx = int(np.searchsorted(self.thetas, th + 1e-15)) - 1
        return idx % len(self.branch_signs)

    def branch(self, theta):
        """Branch matrix D = diag(d1, d2) valid at angle theta.

        On a special ray the two adjacent sectors share the branch; any other
        boundary uses the counter-clockwise sector (consistent choice).
        """
        s1, s2 = self.branch_signs[self.sector_index(theta + 1e-12)]
        d1 = s1 * np.sqrt(complex(self.w1))
        d2 = s2 * np.sqrt(complex(self.w2))
        return np.diag([d1, d2])

    def ray_branch(self, ray_index):
        """D on special ray #ray_index (0..3)."""
        return self.branch(self.rays[ray_index])

    def mid_sector_angle(self, which=0):
        """An angle strictly inside a sector (used for anchor searches)."""
        th = np.asarray(self.thetas)
        ths = np.append(th, th[0] + _TWO_PI)
        mids = 0.5 * (ths[:-1] + ths[1:])
        return _norm_angle(mids[which % len(mids)])

    def to_json(self):
        return {
            "w1": {"re": self.w1.real, "im": self.w1.imag},
            "w2": {"re": self.w2.real, "im": self.w2.imag},
            "thetas": list(self.thetas),
            "rays": list(self.rays),
            "branch_signs": [list(s) for s in self.branch_signs],
        }


def _branch_signs_at(theta, w1, w2):
    """Signs (s1, s2) with Re(i e^{i theta} s_k sqrt(w_k)) > 0, or None if on a boundary."""
    rho = np.exp(1j * theta)
    signs = []
    for w in (w1, w2):
        d0 = np.sqrt(complex(w))
        v = np.real(1j * rho * d0)
        if abs(v) < 1e-14 * abs(d0):
            return None
        signs.append(1 if v > 0 else -1)
    return tuple(signs)


def sector_geometry(w1, w2) -> SectorGeometry:
    """Build the sector partition and special rays for weight diag(w1, w2).

    Raises DegenerateWeightError when arg w1 == arg w2 (mod 2pi), in which
    case no ray with the defining property exists.
    """
    w1 = complex(w1)
    w2 = complex(w2)
    if w1 == 0 or w2 == 0:
        raise DegenerateWeightError("weight entries must be non-zero")
    if abs(_norm_angle(np.angle(w1) - np.angle(w2))) < 1e-14 or (
        abs(_norm_angle(np.angle(w1) - np.angle(w2)) - _TWO_PI) < 1e-14
    ):
        raise DegenerateWeightError("arg w1 == arg w2: weight admits no special rays")

    d10 = np.sqrt(w1)
    d20 = np.sqrt(w2)
    # boundary directions: Re(rho * (R_i - R_j)) = 0 for differences of +-i*d10, +-i*d20;
    # each difference direction yields the two angles theta, theta + pi
    diffs = [2j * d10, 2j * d20, 1j * (d10 - d20), 1j * (d10 + d20)]
    bounds = set()
    for dv in diffs:
        if abs(dv) < 1e-15:
            continue
        base = np.pi / 2.0 - np.angle(dv)
        for k in range(2):
            bounds.add(round(_norm_angle(base + k * np.pi), 13))
    thetas = sorted(bounds)

    # branch table per sector
    signs = []
    ths = list(thetas) + [thetas[0] + _TWO_PI]
    for a, b in zip(ths[:-1], ths[1:]):
        mid = 0.5 * (a + b)
        s = _branch_signs_at(mid, w1, w2)
        if s is None:
            raise DegenerateWeightError("degenerate branch structure")
        signs.append(s)

    # special rays: solve s1|d1|cos(theta + pi/2 + arg d10) = s2|d2|cos(theta + pi/2 + arg d20) > 0
    rays = []
    a1 = abs(d10)
    a2 = abs(d20)
    p1 = np.pi / 2.0 + np.angle(d10)
    p2 = np.pi / 2.0 + np.angle(d20)
    for s1 in (1, -1):
        for s2 in (1, -1):
            # s1 a1 cos(th + p1) - s2 a2 cos(th + p2) = 0  ->  A cos th - B sin th = 0
            A = s1 * a1 * np.cos(p1) - s2 * a2 * np.cos(p2)
            B = s1 * a1 * np.sin(p1) - s2 * a2 * np.sin(p2)
            if abs(A) < 1e-15 and abs(B) < 1e-15:
                continue
            th0 = np.arctan2(A, B)  # tan th = A / B
            for k in range(2):
                th = _norm_angle(th0 + k * np.pi)
                val1 = s1 * a1 * np.cos(th + p1)
                val2 = s2 * a2 * np.cos(th + p2)
                if val1 > 1e-13 and val2 > 1e-13 and abs(val1 - val2) < 1e-12 * max(1.0, val1):
                    rays.append(round(th, 13))
    rays = sorted(set(rays))
    # dedupe angles equal mod 2pi within tolerance
    merged = []
    for r in rays:
        if not merged or abs(r - merged[-1]) > 1e-10:
            merged.append(r)
    if merged and abs((merged[-1] - _TWO_PI) - merged[0]) < 1e-10:
        merged.pop()
    if len(merged) != 4:
        raise DegenerateWeightError(
            f"expected exactly four special rays, found {len(merged)} (weight {w1}, {w2})"
        )
    return SectorGeometry(w1=w1, w2=w2, thetas=tuple(thetas), rays=tuple(merged),
                          branch_signs=tuple(signs))
