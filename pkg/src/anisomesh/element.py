"""Reference prism element: Lagrange lattices, bases, quadrature.

The reference prism is [0,1] x T_d with T_d the standard simplex.  Local
polynomial spaces are tensor products of 1-d Lagrange polynomials in time
with simplex Lagrange polynomials in space; all per-element matrices (mass
matrix, dual coefficients, fit projectors) are computed once here and
mapped affinely.
"""

from __future__ import annotations

import math
from fractions import Fraction
from functools import lru_cache
from itertools import product

import numpy as np

__all__ = [
    "PolyOrders",
    "QuadratureRule",
    "ReferenceElement",
    "reference_element",
    "multi_indices",
    "gauss_legendre_01",
    "grundmann_moller",
    "simplex_quadrature",
]


from dataclasses import dataclass


@dataclass(frozen=True)
class PolyOrders:
    """Temporal order r1 and spatial order r2 (both >= 2)."""

    r1: int
    r2: int

    def __post_init__(self):
        if self.r1 < 2 or self.r2 < 2:
            raise ValueError("polynomial orders must be at least 2")


@dataclass(frozen=True)
class QuadratureRule:
    """Points (k, 1+d) and weights (k,) on the reference prism."""

    points: np.ndarray
    weights: np.ndarray
    degree_t: int
    degree_x: int


def multi_indices(d, max_total):
    """All alpha in N_0^d with |alpha| <= max_total, lexicographically sorted."""
    out = []
    for combo in product(range(max_total + 1), repeat=d):
        if sum(combo) <= max_total:
            out.append(combo)
    out.sort()
    return out


def gauss_legendre_01(n):
    x, w = np.polynomial.legendre.leggauss(n)
    return (x + 1.0) / 2.0, w / 2.0


def grundmann_moller(d, s):
    """Grundmann-Moeller rule of degree 2s+1 on the standard simplex.

    Returns cartesian points (k, d) and weights summing to 1/d!.
    """
    points = []
    weights = []
    for i in range(s + 1):
        denom = d + 2 * s + 1 - 2 * i
        coeff = ((-1) ** i * 2.0 ** (-2 * s) * denom ** (2 * s + 1)
                 / (math.factorial(i) * math.factorial(d + 2 * s + 1 - i)))
        for k in multi_indices(d + 1, s - i):
            if sum(k) != s - i:
                continue
            bary = [(2 * kj + 1) / denom for kj in k]
            points.append(bary[1:])
            weights.append(coeff)
    pts = np.array(points)
    w = np.array(weights)
    # the classical weights integrate against the unit-volume simplex
    w *= (1.0 / math.factorial(d)) / w.sum()
    return pts, w


def collapsed_simplex_rule(d, degree):
    """Positive-weight simplex rule from a collapsed tensor Gauss grid.

    The cube-to-simplex map x1 = u1, x2 = u2(1-u1), x3 = u3(1-u1)(1-u2)
    has a polynomial Jacobian, so Gauss-Legendre grids sized for the
    mapped degree integrate total-degree ``degree`` exactly with all
    weights positive (d <= 3).
    """
    if d == 1:
        x, w = gauss_legendre_01(math.ceil((degree + 1) / 2))
        return x[:, None], w
    if d == 2:
        nu = math.ceil((degree + 2) / 2)
        nv = math.ceil((degree + 1) / 2)
        u, wu = gauss_legendre_01(nu)
        v, wv = gauss_legendre_01(nv)
        pts, w = [], []
        for i in range(nu):
            for j in range(nv):
                pts.append((u[i], v[j] * (1.0 - u[i])))
                w.append(wu[i] * wv[j] * (1.0 - u[i]))
        return np.array(pts), np.array(w)
    if d == 3:
        nu = math.ceil((degree + 3) / 2)
        nv = math.ceil((degree + 2) / 2)
        nw = math.ceil((degree + 1) / 2)
        u, wu = gauss_legendre_01(nu)
        v, wv = gauss_legendre_01(nv)
        s, ws = gauss_legendre_01(nw)
        pts, w = [], []
        for i in range(nu):
            for j in range(nv):
                for k in range(nw):
                    jac = (1.0 - u[i]) ** 2 * (1.0 - v[j])
                    pts.append((u[i], v[j] * (1.0 - u[i]),
                                s[k] * (1.0 - u[i]) * (1.0 - v[j])))
                    w.append(wu[i] * wv[j] * ws[k] * jac)
        return np.array(pts), np.array(w)
    raise ValueError("collapsed rule implemented for d <= 3")


def simplex_quadrature(d, degree):
    """Simplex rule exact for total degree ``degree`` (positive weights)."""
    if d <= 3:
        return collapsed_simplex_rule(d, degree)
    s = max(0, math.ceil((degree - 1) / 2))
    return grundmann_moller(d, s)


def _tensor_rule(nt, d, deg_x):
    tq, tw = gauss_legendre_01(nt)
    xq, xw = simplex_quadrature(d, deg_x)
    pts = np.empty((nt * len(xw), 1 + d))
    w = np.empty(nt * len(xw))
    row = 0
    for i in range(nt):
        for j in range(len(xw)):
            pts[row, 0] = tq[i]
            pts[row, 1:] = xq[j]
            w[row] = tw[i] * xw[j]
            row += 1
    return QuadratureRule(pts, w, 2 * nt - 1, deg_x)


class ReferenceElement:
    """All reference-prism data for one (r1, r2, d) combination."""

    def __init__(self, r1, r2, d):
        self.r1, self.r2, self.d = r1, r2, d
        self.time_nodes = np.array([i / (r1 - 1) for i in range(r1)])
        self.time_nodes_exact = [Fraction(i, r1 - 1) for i in range(r1)]
        self.space_indices = multi_indices(d, r2 - 1)
        self.space_nodes = np.array([[a / (r2 - 1) for a in alpha]
                                     for alpha in self.space_indices])
        self.space_nodes_exact = [tuple(Fraction(a, r2 - 1) for a in alpha)
                                  for alpha in self.space_indices]
        self.n_time = r1
        self.n_space = len(self.space_indices)
        self.n_local = self.n_time * self.n_space
        # monomial coefficients of the nodal bases (Vandermonde inverses)
        vt = np.vander(self.time_nodes, r1, increasing=True)
        self._time_coeff = np.linalg.inv(vt)                # (mono, node)
        vx = self._space_monomials(self.space_nodes)
        self._space_coeff = np.linalg.inv(vx)
        # quadrature: exactness rule integrates products of two basis
        # functions exactly; fit rule is denser for sampling black boxes
        self.rule_exact = _tensor_rule(r1, d, 2 * r2 - 1)
        self.rule_fit = _tensor_rule(r1 + 3, d, 2 * (r2 - 1) + 6)
        self.rule_mark = _tensor_rule(r1 + 1, d, r2)
        self.basis_exact = self.basis_at(self.rule_exact.points)
        self.basis_fit = self.basis_at(self.rule_fit.points)
        self.basis_mark = self.basis_at(self.rule_mark.points)
        self.mass = (self.basis_exact * self.rule_exact.weights) @ self.basis_exact.T
        self.mass_inv = np.linalg.inv(self.mass)
        # dual functions sampled at the rules: zeta_i = sum_j Minv[i,j] b_j
        self.zeta_exact = self.mass_inv @ self.basis_exact
        self.zeta_fit = self.mass_inv @ self.basis_fit
        # weighted least-squares projector onto nodal values (fit rule)
        bw = self.basis_fit * self.rule_fit.weights
        self.project_fit = np.linalg.solve(bw @ self.basis_fit.T, bw)
        # dense sample lattice for sup norms
        ts = np.linspace(0.0, 1.0, 4 * r1)
        xs = np.array([[a / (4 * r2) for a in alpha]
                       for alpha in multi_indices(d, 4 * r2)])
        pts = np.empty((len(ts) * len(xs), 1 + d))
        row = 0
        for t in ts:
            for x in xs:
                pts[row, 0] = t
                pts[row, 1:] = x
                row += 1
        self.sup_points = pts
        self.basis_sup = self.basis_at(pts)

    # -- local node layout: time-major, space lexicographic

    def local_index(self, it, ix):
        return it * self.n_space + ix

    def local_nodes_exact(self):
        out = []
        for t in self.time_nodes_exact:
            for x in self.space_nodes_exact:
                out.append((t, x))
        return out

    def _space_monomials(self, pts):
        pts = np.atleast_2d(pts)
        out = np.ones((len(pts), self.n_space))
        for j, alpha in enumerate(self.space_indices):
            for k, a in enumerate(alpha):
                if a:
                    out[:, j] *= pts[:, k] ** a
        return out

    def _time_lagrange(self, t):
        t = np.atleast_1d(t)
        powers = np.vander(t, self.r1, increasing=True)
        return powers @ self._time_coeff                    # (n_pts, r1)

    def _space_lagrange(self, x):
        mono = self._space_monomials(x)
        return mono @ self._space_coeff                     # (n_pts, n_space)

    def basis_at(self, points):
        """Values of all local basis functions: (n_local, n_pts)."""
        points = np.atleast_2d(points)
        bt = self._time_lagrange(points[:, 0])
        bx = self._space_lagrange(points[:, 1:])
        out = np.empty((self.n_local, len(points)))
        for it in range(self.n_time):
            for ix in range(self.n_space):
                out[self.local_index(it, ix)] = bt[:, it] * bx[:, ix]
        return out

    # -- affine maps

    def map_points(self, interval, simplex, ref_points):
        """Map reference points to a physical prism; returns (n, 1+d)."""
        lo, hi = float(interval.lo), float(interval.hi)
        verts = np.array([[float(c) for c in v] for v in simplex.vertices])
        out = np.empty_like(ref_points)
        out[:, 0] = lo + ref_points[:, 0] * (hi - lo)
        e = verts[1:] - verts[0]
        out[:, 1:] = verts[0] + ref_points[:, 1:] @ e
        return out

    def reference_coords(self, interval, simplex, t, x):
        """Inverse affine map of one physical point (floats)."""
        lo, hi = float(interval.lo), float(interval.hi)
        verts = np.array([[float(c) for c in v] for v in simplex.vertices])
        that = (t - lo) / (hi - lo)
        e = (verts[1:] - verts[0]).T
        xhat = np.linalg.solve(e, np.asarray(x, dtype=float) - verts[0])
        return np.concatenate([[that], xhat])


@lru_cache(maxsize=None)
def reference_element(r1, r2, d):
    return ReferenceElement(r1, r2, d)
