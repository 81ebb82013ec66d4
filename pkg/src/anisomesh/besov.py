"""Sampled anisotropic moduli of smoothness and discrete Besov seminorms.

The modulus estimator takes the sup over a deterministic shift lattice
(16 temporal shifts per scale; 16/32 spatial direction-magnitude pairs for
d = 1/2) of sampled L_p norms of r-th order differences on the shrunken
domain.  The discrete seminorm is the truncated geometric-scale sum that
pairs temporal scales 2^(-n s2/(s1 d)) with spatial scales 2^(-n/d).

These are estimators with documented sampling densities, not certified
values; rate and threshold experiments treat them as such.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .element import PolyOrders, reference_element, multi_indices
from .mesh import cylindric_closure, neighborhood
from .nodes import classify, support_degree
from .polyapprox import (
    NormParams,
    best_approx_local,
    global_error,
    leaf_points,
    quasi_interpolate,
)
from .refine import uniform_refine

__all__ = [
    "Cylinder",
    "BesovEstimate",
    "MultiscaleLadder",
    "modulus",
    "discrete_seminorm",
    "multiscale_norms",
    "mark_indicator",
    "whitney_indicator",
]


@dataclass
class Cylinder:
    """A product domain J x R with R a union of simplices (float data)."""

    t_lo: float
    t_hi: float
    simplices: list          # list of (d+1, d) float vertex arrays
    measures: list           # spatial measures of the simplices

    @property
    def d(self):
        return self.simplices[0].shape[1]

    @classmethod
    def from_partition(cls, part):
        t0, t1 = part.time_range
        sids = part.root_simplices
        return cls(float(t0), float(t1),
                   [part.float_vertices(s) for s in sids],
                   [float(part.simplices[s].measure) for s in sids])

    @classmethod
    def from_closure(cls, part, nb):
        """Cylinder of a cylindric closure Neighborhood."""
        (lo, hi), sids = nb.cylinder
        return cls(float(lo), float(hi),
                   [part.float_vertices(s) for s in sids],
                   [float(part.simplices[s].measure) for s in sids])

    def space_samples(self, degree=4):
        """Interior barycentric lattice points and weights per simplex."""
        d = self.d
        combos = [c for c in multi_indices(d + 1, degree) if sum(c) == degree]
        bary = (2.0 * np.array(combos) + 1.0) / (2.0 * degree + d + 1)
        pts = []
        wts = []
        for verts, meas in zip(self.simplices, self.measures):
            pts.append(bary @ verts)
            wts.append(np.full(len(bary), meas / len(bary)))
        return np.concatenate(pts), np.concatenate(wts)

    def contains(self, x, tol=1e-12):
        """Membership of spatial points in the union of simplices."""
        x = np.atleast_2d(x)
        inside = np.zeros(len(x), dtype=bool)
        d = self.d
        for verts in self.simplices:
            if d == 1:
                a, b = sorted((verts[0, 0], verts[1, 0]))
                inside |= (x[:, 0] >= a - tol) & (x[:, 0] <= b + tol)
                continue
            e = (verts[1:] - verts[0]).T
            try:
                lam = np.linalg.solve(e, (x - verts[0]).T)
            except np.linalg.LinAlgError:
                continue
            ok = (lam >= -tol).all(axis=0) & (1.0 - lam.sum(axis=0) >= -tol)
            inside |= ok
        return inside


def _binomial_weights(r):
    return np.array([(-1) ** (r - k) * math.comb(r, k) for k in range(r + 1)])


def _space_shifts(d, delta, n_pairs):
    """Deterministic direction-magnitude lattice of spatial shifts."""
    if delta == 0:
        return np.zeros((0, d))
    if d == 1:
        mags = delta * (np.arange(1, n_pairs // 2 + 1) / (n_pairs // 2))
        return np.concatenate([mags, -mags])[:, None]
    n_dirs = 8
    n_mags = max(1, n_pairs // n_dirs)
    angles = 2.0 * np.pi * np.arange(n_dirs) / n_dirs
    dirs = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    if d > 2:
        rng = np.random.default_rng(12345)  # fixed lattice for d > 2
        dirs = rng.standard_normal((n_dirs, d))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    mags = delta * (np.arange(1, n_mags + 1) / n_mags)
    return (mags[:, None, None] * dirs[None, :, :]).reshape(-1, d)


def modulus(f, cyl, direction, r, delta, p, n_time=24, space_degree=4,
            n_shifts=16):
    """Sampled modulus of smoothness sup_{|h|<=delta} ||D_h^r f||_{L_p}.

    Temporal differences shrink the time interval; spatial differences keep
    only sample points whose whole difference stencil stays inside the
    spatial region.  delta = 0 gives 0.
    """
    if delta <= 0:
        return 0.0
    coeff = _binomial_weights(r)
    xs, xw = cyl.space_samples(space_degree)
    best = 0.0
    if direction == "time":
        shifts = delta * (np.arange(1, n_shifts + 1) / n_shifts)
        for h in shifts:
            hi = cyl.t_hi - r * h
            if hi <= cyl.t_lo:
                continue
            # resolve features at the shift scale, or the sup leaks
            nt = int(min(max(n_time, 4.0 * (hi - cyl.t_lo) / h), 4096))
            ts = cyl.t_lo + (np.arange(nt) + 0.5) * (hi - cyl.t_lo) / nt
            tw = (hi - cyl.t_lo) / nt
            diff = np.zeros((len(ts), len(xs)))
            for k, c in enumerate(coeff):
                tt = np.repeat(ts + k * h, len(xs))
                xx = np.tile(xs, (len(ts), 1))
                diff += c * np.asarray(f(tt, xx), dtype=float).reshape(len(ts), -1)
            if p == math.inf:
                val = float(np.abs(diff).max()) if diff.size else 0.0
            else:
                val = float(((np.abs(diff) ** p * xw).sum() * tw) ** (1.0 / p))
            best = max(best, val)
        return best
    ts = cyl.t_lo + (np.arange(n_time) + 0.5) * (cyl.t_hi - cyl.t_lo) / n_time
    tw = (cyl.t_hi - cyl.t_lo) / n_time
    for h in _space_shifts(cyl.d, delta, n_shifts if cyl.d == 1 else 32):
        mask = np.ones(len(xs), dtype=bool)
        for k in range(1, r + 1):
            mask &= cyl.contains(xs + k * h)
        if not mask.any():
            continue
        pts = xs[mask]
        w = xw[mask]
        diff = np.zeros((len(ts), len(pts)))
        for k, c in enumerate(coeff):
            tt = np.repeat(ts, len(pts))
            xx = np.tile(pts + k * h, (len(ts), 1))
            diff += c * np.asarray(f(tt, xx), dtype=float).reshape(len(ts), -1)
        if p == math.inf:
            val = float(np.abs(diff).max()) if diff.size else 0.0
        else:
            val = float(((np.abs(diff) ** p * w).sum() * tw) ** (1.0 / p))
        best = max(best, val)
    return best


@dataclass
class BesovEstimate:
    """Sampled moduli per scale and the truncated discrete seminorm."""

    scales: list             # n = 0..N
    deltas_t: list
    deltas_x: list
    omegas_t: list
    omegas_x: list
    seminorm: float
    tail: float              # last-scale contribution / total
    params: dict
    metadata: dict = field(default_factory=dict)

    def csv_rows(self):
        rows = ["scale_n,delta_t,delta_x,omega_t,omega_x"]
        for n, dt, dx, ot, ox in zip(self.scales, self.deltas_t,
                                     self.deltas_x, self.omegas_t,
                                     self.omegas_x):
            rows.append(f"{n},{dt:.17g},{dx:.17g},{ot:.17g},{ox:.17g}")
        rows.append(f"summary,,,{self.seminorm:.17g},{self.tail:.17g}")
        return rows


def discrete_seminorm(f, cyl, p, q, s1, s2, orders, n_scales=6, **sample_kw):
    """Truncated discrete anisotropic Besov quasi-seminorm of f on J x R.

    Sums 2^(n s2 q / d) [omega_t(2^(-n s2/(s1 d)))^q + omega_x(2^(-n/d))^q]
    over n = 0..n_scales (sup form for q = inf).
    """
    if n_scales < 4:
        raise ValueError("need at least 4 scales")
    d = cyl.d
    r1, r2 = orders.r1, orders.r2
    scales = list(range(n_scales + 1))
    dts = [2.0 ** (-n * s2 / (s1 * d)) for n in scales]
    dxs = [2.0 ** (-n / d) for n in scales]
    ots = [modulus(f, cyl, "time", r1, dt, p, **sample_kw) for dt in dts]
    oxs = [modulus(f, cyl, "space", r2, dx, p, **sample_kw) for dx in dxs]
    terms = []
    for n in scales:
        w = 2.0 ** (n * s2 / d)
        if q == math.inf:
            terms.append(w * (ots[n] + oxs[n]))
        else:
            terms.append(w ** q * (ots[n] ** q + oxs[n] ** q))
    if q == math.inf:
        total = max(terms)
        tail = terms[-1] / total if total else 0.0
    else:
        total = sum(terms) ** (1.0 / q)
        tail = (terms[-1] ** (1.0 / q) / total) if total else 0.0
    return BesovEstimate(scales, dts, dxs, ots, oxs, total, tail,
                         dict(p=p, q=q, s1=s1, s2=s2, r1=r1, r2=r2),
                         dict(sample_kw=sample_kw))


# ---------------------------------------------------------------------------
# multiscale ladder and generalized norms


@dataclass
class MultiscaleLadder:
    """Uniform ladder P_0..P_N with the three generalized-norm variants.

    The E-variant uses the quasi-interpolation error as the computable
    surrogate for the best-approximation error, so norm_E tracks norm_pi by
    construction; norm_delta is the independent multiscale quantity.
    """

    levels: list             # per-level dict records
    norm_delta: float
    norm_pi: float
    norm_e: float
    f_norm: float
    alphas: tuple
    partition: object


def _prolong_nodal(part, orders, snapshot, pids):
    """Evaluate a snapshotted leafwise polynomial at new leaves' nodes."""
    ref = reference_element(orders.r1, orders.r2, part.d)
    out = np.empty((len(pids), ref.n_local))
    for row, pid in enumerate(pids):
        anc = pid
        while anc not in snapshot:
            anc = part.prisms[anc].parent
            if anc == -1:
                raise KeyError(f"no snapshot ancestor for leaf {pid}")
        iv_a = part.interval_of(anc)
        sx_a = part.simplex_of(anc)
        iv = part.interval_of(pid)
        sx = part.simplex_of(pid)
        tn = float(iv.lo) + ref.time_nodes * float(iv.length)
        verts = part.float_vertices(sx.id)
        xn = verts[0] + ref.space_nodes @ (verts[1:] - verts[0])
        refc = np.array([ref.reference_coords(iv_a, sx_a, t, x)
                         for t in tn for x in xn])
        vals = snapshot[anc] @ ref.basis_at(refc)
        out[row] = vals
    return out


def multiscale_norms(make_initial, f, aniso, orders, norm_params, alphas,
                     n_levels):
    """Uniform all-mark ladder and the generalized Besov norm variants.

    ``alphas`` must be collinear with (s1, s2); the ladder P_0..P_N comes
    from uniform atomic refinement, pi_n is computed per level and
    Delta_n = pi_n - pi_{n-1} is evaluated through nodal prolongation.
    """
    a1, a2 = alphas
    s1, s2 = aniso.s1, aniso.s2
    if abs(a1 * s2 - a2 * s1) > 1e-12 * max(1.0, abs(a1 * s2), abs(a2 * s1)):
        raise ValueError("(alpha1, alpha2) must be collinear with (s1, s2)")
    p, q = norm_params.p, norm_params.q
    d = aniso.d
    part = make_initial()
    ref = reference_element(orders.r1, orders.r2, d)
    levels = []
    prev_snapshot = None
    delta_norms = []
    pi_errors = []
    f_norm = None
    for n in range(n_levels + 1):
        lattice = classify(part, orders)
        fe, _ = quasi_interpolate(part, f, norm_params, orders, lattice)
        pids = sorted(part.leaves)
        nodal = fe.leaf_matrix(pids)
        _, T, X, W = leaf_points(part, orders, rule="fit", pids=pids)
        fvals = np.asarray(f(T.ravel(), X.reshape(-1, d)),
                           dtype=float).reshape(T.shape)
        pin = nodal @ ref.basis_fit
        if f_norm is None:
            f_norm = float(((np.abs(fvals) ** p) * W).sum() ** (1 / p)) \
                if p != math.inf else float(np.abs(fvals).max())
        if p == math.inf:
            pi_err = float(np.abs(fvals - pin).max())
        else:
            pi_err = float(((np.abs(fvals - pin) ** p) * W).sum() ** (1 / p))
        if prev_snapshot is None:
            prev = np.zeros_like(pin)
        else:
            prev = _prolong_nodal(part, orders, prev_snapshot, pids) @ ref.basis_fit
        if p == math.inf:
            dn = float(np.abs(pin - prev).max())
        else:
            dn = float(((np.abs(pin - prev) ** p) * W).sum() ** (1 / p))
        delta_norms.append(dn)
        pi_errors.append(pi_err)
        levels.append(dict(n=n, leaves=len(pids), hanging=len(lattice.hanging),
                           delta_norm=dn, pi_error=pi_err))
        if n < n_levels:
            prev_snapshot = dict(zip(pids, nodal))
            uniform_refine(part)

    def total(vals):
        if q == math.inf:
            return max(2.0 ** (a2 / d * n) * v for n, v in enumerate(vals))
        return sum((2.0 ** (a2 / d * n) * v) ** q
                   for n, v in enumerate(vals)) ** (1.0 / q)

    norm_delta = total(delta_norms)
    norm_pi = total(pi_errors) + f_norm
    norm_e = total(pi_errors) + f_norm   # E-surrogate: pi error per level
    return MultiscaleLadder(levels, norm_delta, norm_pi, norm_e, f_norm,
                            (a1, a2), part)


# ---------------------------------------------------------------------------
# marking indicators


def _mono_exponents(orders, d):
    out = []
    for i in range(orders.r1):
        for alpha in multi_indices(d, orders.r2 - 1):
            out.append((i, alpha))
    return out


def whitney_indicator(part, f, pid, p, orders, omega_method="fast",
                      use_closure=True, degree=None):
    """Local best-approximation error on the cylindric closure of omega^j.

    Returns (member ids tuple, error); the members tuple doubles as the
    cache signature for the adaptive driver.  The p = 2 path solves the
    normal equations directly on the mark rule's samples.  ``degree``
    defaults to the support degree j(d); smaller patches trade estimator
    locality for speed in large studies.
    """
    j = support_degree(part.d) if degree is None else degree
    nb = neighborhood(part, pid, j, method=omega_method)
    if use_closure:
        nb = cylindric_closure(part, nb)
    members = tuple(sorted(nb.members))
    d = part.d
    ref = reference_element(orders.r1, orders.r2, d)
    rule = ref.rule_mark
    that = rule.points[:, 0]
    xhat = rule.points[:, 1:]
    geo = np.array([part._geo_rows[q] for q in members])
    tlo, tspan = geo[:, 0], geo[:, 1]
    v0 = geo[:, 2:2 + d]
    edges = geo[:, 2 + d:2 + d + d * d].reshape(-1, d, d)
    meas = geo[:, -1]
    T = (tlo[:, None] + tspan[:, None] * that[None, :]).ravel()
    X = (v0[:, None, :] + np.matmul(xhat[None, :, :], edges)).reshape(-1, d)
    W = (meas[:, None] * (math.factorial(d) * rule.weights)[None, :]).ravel()
    fx = np.asarray(f(T, X), dtype=float)
    ta, tb = T.min(), T.max()
    xa = X.min(axis=0)
    xs = np.maximum(X.max(axis=0) - xa, 1e-300)
    tt = (T - ta) / max(tb - ta, 1e-300)
    xx = (X - xa) / xs
    cols = []
    for i, alpha in _mono_exponents(orders, d):
        col = tt ** i if i else np.ones_like(tt)
        for k, a in enumerate(alpha):
            if a:
                col = col * xx[:, k] ** a
        cols.append(col)
    design = np.stack(cols, axis=1)
    if p == 2.0:
        dw = design * W[:, None]
        coeffs = np.linalg.solve(dw.T @ design
                                 + 1e-300 * np.eye(design.shape[1]),
                                 dw.T @ fx)
        resid = fx - design @ coeffs
        return members, float(np.sqrt((W * resid ** 2).sum()))
    from .polyapprox import _irls, _lp_error
    coeffs, _ = _irls(design, fx, W, p)
    return members, _lp_error(fx - design @ coeffs, W, p)


def mark_indicator(part, f, pid, mode, norm_params, orders, oracle=None,
                   omega_method="fast"):
    """Scaled local error indicator of one leaf prism.

    Modes: "oracle" (caller-supplied local seminorm, scaled by the measure
    power), "whitney" (raw local best-approximation error on the cylindric
    closure), "moduli" (shallow discrete seminorm on the closure, scaled).
    """
    aniso = part.params
    p, q = norm_params.p, norm_params.q
    expo = (aniso.rate_exponent - (0.0 if q == math.inf else 1.0 / q)
            + (0.0 if p == math.inf else 1.0 / p))
    meas = float(part.measure_of(pid))
    if mode == "oracle":
        if oracle is None:
            raise ValueError("oracle mode needs an oracle callable")
        return meas ** expo * float(oracle(part, pid))
    if mode == "whitney":
        return whitney_indicator(part, f, pid, p, orders, omega_method)[1]
    if mode == "moduli":
        j = support_degree(part.d)
        nb = neighborhood(part, pid, j, method=omega_method)
        closure = cylindric_closure(part, nb)
        cyl = Cylinder.from_closure(part, closure)
        est = discrete_seminorm(f, cyl, p, q, aniso.s1, aniso.s2, orders,
                                n_scales=4, n_time=8, space_degree=2)
        return meas ** expo * est.seminorm
    raise ValueError(f"unknown indicator mode {mode!r}")
