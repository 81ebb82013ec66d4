"""Local best approximation, dual functions, and quasi-interpolation.

The continuous finite element space on a partition is spanned by the free
nodes; functions are stored as free coefficients with hanging constraints
resolved through master elements.  The quasi-interpolation operator
composes leafwise L_rho best approximation with the biorthogonal-dual
projection onto the continuous space; for rho = 2 everything reduces to
the same small reference matrices applied leaf by leaf.

Quadrature integrals of black-box functions are estimators: the fit rule
(time order r1+3 Gauss, space degree 2(r2-1)+6) is the documented sampling
density, sup norms use the dense reference lattice.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .element import PolyOrders, reference_element
from .nodes import FREE, basis_support, classify, resolve_hanging
from .mesh import neighborhood, cylindric_closure

__all__ = [
    "FeFunction",
    "NormParams",
    "LocalFit",
    "leaf_geometry",
    "leaf_points",
    "dual_functions",
    "biorthogonality_residual",
    "best_approx_local",
    "project_leaves_nodal",
    "q_operator",
    "quasi_interpolate",
    "global_error",
    "project_l2_global",
    "interface_jump",
]


@dataclass(frozen=True)
class NormParams:
    """Target norm p, fit parameter rho <= p, summation exponent q."""

    p: float = 2.0
    rho: float = 2.0
    q: float = 2.0

    def __post_init__(self):
        if not 0 < self.rho <= self.p:
            raise ValueError("need 0 < rho <= p")
        if self.q <= 0:
            raise ValueError("q must be positive")


# ---------------------------------------------------------------------------
# leaf geometry batches


def leaf_geometry(part, pids=None):
    """Per-leaf affine data: (pids, t_lo, t_span, v0, edges, measures)."""
    if pids is None:
        pids = sorted(part.leaves)
    d = part.d
    n = len(pids)
    tlo = np.empty(n)
    tspan = np.empty(n)
    v0 = np.empty((n, d))
    edges = np.empty((n, d, d))
    meas = np.empty(n)
    for row, pid in enumerate(pids):
        flo, fhi = part.interval_float(part.prisms[pid].interval_id)
        tlo[row], tspan[row] = flo, fhi - flo
        verts = part.float_vertices(part.prisms[pid].simplex_id)
        v0[row] = verts[0]
        edges[row] = verts[1:] - verts[0]
        meas[row] = part.measure_float(pid)
    return pids, tlo, tspan, v0, edges, meas


def leaf_points(part, orders, rule="fit", pids=None):
    """Mapped quadrature points and physical weights for a batch of leaves.

    Returns (pids, T (n,k), X (n,k,d), W (n,k)).
    """
    ref = reference_element(orders.r1, orders.r2, part.d)
    q = {"fit": ref.rule_fit, "exact": ref.rule_exact,
         "mark": ref.rule_mark}[rule]
    pids, tlo, tspan, v0, edges, meas = leaf_geometry(part, pids)
    that = q.points[:, 0]
    xhat = q.points[:, 1:]
    T = tlo[:, None] + np.outer(tspan, that)
    X = v0[:, None, :] + np.matmul(xhat[None, :, :], edges)
    scale = meas * math.factorial(part.d)   # reference prism has measure 1/d!
    W = np.outer(scale, q.weights)
    return pids, T, X, W


# ---------------------------------------------------------------------------
# finite element functions


class FeFunction:
    """Continuous finite element: free-node coefficients on a partition."""

    def __init__(self, part, lattice, coeffs):
        self.part = part
        self.lattice = lattice
        self.orders = lattice.orders
        self.coeffs = np.asarray(coeffs, dtype=float)
        self._values = None
        self._leaf_cache = {}

    @property
    def values(self):
        """Dense node-value array with hanging constraints resolved."""
        if self._values is None:
            self._values = resolve_hanging(self.part, self.lattice, self.coeffs)
        return self._values

    def leaf_matrix(self, pids):
        """Local node values for an ordered batch of leaves: (n, nloc)."""
        vals = self.values
        return np.array([vals[self.lattice.prism_local[pid]] for pid in pids])

    def eval_on_leaves(self, pids, basis):
        """Values at reference points of each leaf: (n, k) for basis (nloc, k)."""
        return self.leaf_matrix(pids) @ basis

    def __call__(self, t, x):
        """Point evaluation (vectorized); boundary points may hit any
        containing leaf, which is consistent by continuity."""
        from .nodes import _locate_closure_leaves
        from .geometry import as_fraction, as_point
        ref = reference_element(self.orders.r1, self.orders.r2, self.part.d)
        t = np.atleast_1d(np.asarray(t, dtype=float))
        x = np.atleast_2d(np.asarray(x, dtype=float))
        out = np.empty(len(t))
        vals = self.values
        for i in range(len(t)):
            leaves = _locate_closure_leaves(self.part, t[i], tuple(x[i]),
                                            as_fraction(t[i]), as_point(x[i]),
                                            exact=False)
            if not leaves:
                raise ValueError(f"point (t={t[i]}, x={x[i]}) outside the mesh")
            pid = leaves[0]
            refc = ref.reference_coords(self.part.interval_of(pid),
                                        self.part.simplex_of(pid), t[i], x[i])
            local = vals[self.lattice.prism_local[pid]]
            out[i] = local @ ref.basis_at(refc[None, :])[:, 0]
        return out if out.size > 1 else float(out[0])


# ---------------------------------------------------------------------------
# dual functions


def dual_functions(part, pid, orders):
    """Biorthogonal duals zeta of the local Lagrange basis on one leaf.

    Returns a list of callables on physical points; the duals scale like
    |I x S|^(1/p - 1) in L_p by the affine transformation law.
    """
    ref = reference_element(orders.r1, orders.r2, part.d)
    iv = part.interval_of(pid)
    simplex = part.simplex_of(pid)
    meas = float(part.measure_of(pid))
    scale = (1.0 / math.factorial(part.d)) / meas  # |ref prism| / |I x S|
    minv = ref.mass_inv

    def make(i):
        def zeta(points):
            pts = np.atleast_2d(points)
            refc = np.array([ref.reference_coords(iv, simplex, p[0], p[1:])
                             for p in pts])
            return scale * (minv[i] @ ref.basis_at(refc))
        return zeta

    return [make(i) for i in range(ref.n_local)]


def biorthogonality_residual(part, pid, orders):
    """max |integral(b_i zeta_j) - delta_ij| on one leaf (exact rule)."""
    ref = reference_element(orders.r1, orders.r2, part.d)
    gram = (ref.zeta_exact * ref.rule_exact.weights) @ ref.basis_exact.T
    return float(np.abs(gram - np.eye(ref.n_local)).max())


# ---------------------------------------------------------------------------
# local best approximation


@dataclass
class LocalFit:
    """Polynomial fit on a prism or cylinder in a scaled monomial frame."""

    coeffs: np.ndarray
    frame: tuple             # (tlo, tspan, xmin, xspan)
    orders: PolyOrders
    d: int
    p: float
    error: float
    heuristic: bool = False

    def design(self, t, x):
        tlo, tspan, xmin, xspan = self.frame
        tt = (np.asarray(t, float) - tlo) / tspan
        xx = (np.atleast_2d(np.asarray(x, float)) - xmin) / xspan
        from .element import multi_indices
        cols = []
        for i in range(self.orders.r1):
            ti = tt ** i
            for alpha in multi_indices(self.d, self.orders.r2 - 1):
                col = ti.copy()
                for k, a in enumerate(alpha):
                    if a:
                        col = col * xx[..., k] ** a
                cols.append(col)
        return np.stack(cols, axis=-1)

    def eval(self, t, x):
        return self.design(t, x) @ self.coeffs


def _weighted_lstsq(design, f, w):
    sw = np.sqrt(w)
    sol, *_ = np.linalg.lstsq(design * sw[:, None], f * sw, rcond=None)
    return sol


def _lp_error(r, w, p):
    if p == math.inf:
        return float(np.abs(r).max())
    return float((w @ np.abs(r) ** p) ** (1.0 / p))


def _irls(design, f, w, p, tol=1e-8, max_iter=200):
    """Iteratively reweighted least squares for the discrete l_p fit.

    p = inf uses Lawson's multiplicative weight update; p < 1 continues the
    same iteration from the l_1 solution and is flagged heuristic.
    """
    c = _weighted_lstsq(design, f, w)
    if p == 2.0:
        return c, False
    eps = 1e-12 * max(1.0, float(np.abs(f).max()))
    if p == math.inf:
        lw = w.copy()
        for _ in range(max_iter):
            r = np.abs(f - design @ c) + eps
            lw = lw * r
            lw /= lw.sum()
            c_new = _weighted_lstsq(design, f, lw)
            if np.abs(c_new - c).max() <= tol * max(1.0, np.abs(c).max()):
                return c_new, False
            c = c_new
        return c, False
    heuristic = p < 1.0
    target = max(p, 1.0)
    for stage in ([target] if not heuristic else [1.0, p]):
        for _ in range(max_iter):
            r = np.abs(f - design @ c) + eps
            wi = w * r ** (stage - 2.0)
            c_new = _weighted_lstsq(design, f, wi)
            if stage > 2.0:  # damp for p > 2 where plain IRLS oscillates
                c_new = 0.5 * (c_new + c)
            if np.abs(c_new - c).max() <= tol * max(1.0, np.abs(c).max()):
                break
            c = c_new
    return c, heuristic


def best_approx_local(part, f, domain, p, orders, rule="fit"):
    """Best L_p approximation of f by one anisotropic polynomial (B_{p,D}).

    ``domain`` is a leaf id or an iterable of leaf ids tiling a cylinder.
    p = 2 is the exact weighted least-squares solve over the quadrature
    samples; other p use IRLS on the same samples (heuristic below p = 1).
    Returns a LocalFit carrying the achieved error estimate.
    """
    pids = [domain] if np.isscalar(domain) else sorted(domain)
    _, T, X, W = leaf_points(part, orders, rule=rule, pids=pids)
    t = T.ravel()
    x = X.reshape(-1, part.d)
    w = W.ravel()
    fx = np.asarray(f(t, x), dtype=float)
    tlo, thi = t.min(), T.max()
    xmin = x.min(axis=0)
    xspan = np.maximum(x.max(axis=0) - xmin, 1e-300)
    frame = (tlo, max(thi - tlo, 1e-300), xmin, xspan)
    fit = LocalFit(None, frame, orders, part.d, p, math.nan)
    design = fit.design(t, x)
    coeffs, heuristic = _irls(design, fx, w, p)
    fit.coeffs = coeffs
    fit.heuristic = heuristic
    fit.error = _lp_error(fx - design @ coeffs, w, p)
    return fit


def project_leaves_nodal(part, orders, f, pids=None):
    """Leafwise L_2 best approximation as local node values (vectorized).

    This is B_{2,P}: the same reference projector applies on every leaf.
    Returns (pids, nodal (n, nloc)).
    """
    ref = reference_element(orders.r1, orders.r2, part.d)
    pids, T, X, W = leaf_points(part, orders, rule="fit", pids=pids)
    fx = np.asarray(f(T.ravel(), X.reshape(-1, part.d)), dtype=float)
    fx = fx.reshape(T.shape)
    return pids, fx @ ref.project_fit.T


def best_approx_leaves(part, orders, f, rho, pids=None):
    """Leafwise B_rho as local node values; rho = 2 is the fast path."""
    if rho == 2.0:
        return project_leaves_nodal(part, orders, f, pids)
    ref = reference_element(orders.r1, orders.r2, part.d)
    pids, T, X, W = leaf_points(part, orders, rule="fit", pids=pids)
    nodal = np.empty((len(pids), ref.n_local))
    design = ref.basis_fit.T              # identical on every leaf
    w = ref.rule_fit.weights
    for row in range(len(pids)):
        fx = np.asarray(f(T[row], X[row]), dtype=float)
        nodal[row], _ = _irls(design, fx, w, rho)
    return pids, nodal


# ---------------------------------------------------------------------------
# the dual projection Q and the quasi-interpolation pi


def q_operator(part, lattice, g, orders=None):
    """Q_P: project per-leaf data onto the continuous space via duals.

    The coefficient of a free node is the inner product of g with the dual
    function on the designated owner (the lowest-id owner).  ``g`` may be a
    callable, an FeFunction, or a (pids, nodal) leafwise-polynomial pair.
    """
    orders = orders or lattice.orders
    ref = reference_element(orders.r1, orders.r2, part.d)
    if isinstance(g, FeFunction):
        pids = sorted(part.leaves)
        gvals = g.eval_on_leaves(pids, ref.basis_exact)
        zeta = ref.zeta_exact
        w = ref.rule_exact.weights
    elif callable(g):
        pids, T, X, _ = leaf_points(part, orders, rule="fit")
        gvals = np.asarray(g(T.ravel(), X.reshape(-1, part.d)),
                           dtype=float).reshape(T.shape)
        zeta = ref.zeta_fit
        w = ref.rule_fit.weights
    else:
        pids, nodal = g
        gvals = nodal @ ref.basis_exact
        zeta = ref.zeta_exact
        w = ref.rule_exact.weights
    # integral of g against each local dual on each leaf; the affine
    # scalings of measure and dual cancel in the pairing
    local_coeff = (gvals * w) @ zeta.T            # (n_leaves, n_local)
    row_of = {pid: r for r, pid in enumerate(pids)}
    coeffs = np.zeros(lattice.n_free)
    for k, nid in enumerate(lattice.free):
        owner = min(lattice.nodes[nid].owners)
        row = row_of[owner]
        loc = np.nonzero(lattice.prism_local[owner] == nid)[0][0]
        coeffs[k] = local_coeff[row, loc]
    return FeFunction(part, lattice, coeffs)


def quasi_interpolate(part, f, norm_params, orders, lattice=None):
    """pi_{rho,P} = Q_P o B_{rho,P}; returns (FeFunction, per-leaf errors)."""
    lattice = lattice or classify(part, orders)
    pids, nodal = best_approx_leaves(part, orders, f, norm_params.rho)
    fe = q_operator(part, lattice, (pids, nodal), orders)
    ref = reference_element(orders.r1, orders.r2, part.d)
    _, T, X, W = leaf_points(part, orders, rule="fit", pids=pids)
    fx = np.asarray(f(T.ravel(), X.reshape(-1, part.d)),
                    dtype=float).reshape(T.shape)
    resid = fx - nodal @ ref.basis_fit
    p = norm_params.p
    if p == math.inf:
        local = np.abs(resid).max(axis=1)
    else:
        local = (np.abs(resid) ** p * W).sum(axis=1) ** (1.0 / p)
    records = dict(zip(pids, local))
    return fe, records


# ---------------------------------------------------------------------------
# errors


def global_error(part, f, fe, p, orders=None):
    """L_p error between a black box and an FeFunction (or leafwise data).

    p < infinity integrates elementwise with the fit rule; p = infinity
    maximizes over the dense reference sample lattice.
    """
    orders = orders or fe.orders
    ref = reference_element(orders.r1, orders.r2, part.d)
    pids = sorted(part.leaves)
    if p == math.inf:
        basis = ref.basis_sup
        pts = ref.sup_points
        _, tlo, tspan, v0, edges, meas = leaf_geometry(part, pids)
        T = tlo[:, None] + np.outer(tspan, pts[:, 0])
        X = v0[:, None, :] + np.einsum("ke,nef->nkf", pts[:, 1:], edges)
        fvals = np.asarray(f(T.ravel(), X.reshape(-1, part.d)),
                           dtype=float).reshape(T.shape)
        gvals = _eval_leafdata(fe, pids, basis)
        return float(np.abs(fvals - gvals).max())
    _, T, X, W = leaf_points(part, orders, rule="fit", pids=pids)
    fvals = np.asarray(f(T.ravel(), X.reshape(-1, part.d)),
                       dtype=float).reshape(T.shape)
    gvals = _eval_leafdata(fe, pids, ref.basis_fit)
    return float(((np.abs(fvals - gvals) ** p) * W).sum() ** (1.0 / p))


def _eval_leafdata(fe, pids, basis):
    if isinstance(fe, FeFunction):
        return fe.eval_on_leaves(pids, basis)
    pids2, nodal = fe
    if list(pids2) != list(pids):
        row_of = {pid: r for r, pid in enumerate(pids2)}
        nodal = nodal[[row_of[pid] for pid in pids]]
    return nodal @ basis


def project_l2_global(part, lattice, f, orders=None):
    """Direct least-squares projection of f onto the continuous FE space.

    Assembles the normal equations in the fit-rule discrete norm; this is
    the independent best-approximation oracle against which the
    quasi-interpolation error is compared.
    """
    orders = orders or lattice.orders
    ref = reference_element(orders.r1, orders.r2, part.d)
    pids, T, X, W = leaf_points(part, orders, rule="fit")
    row_of = {pid: r for r, pid in enumerate(pids)}
    fx = np.asarray(f(T.ravel(), X.reshape(-1, part.d)),
                    dtype=float).reshape(T.shape)
    nf = lattice.n_free
    # leaf -> [(free index, local value vector)]
    leaf_cols = {pid: [] for pid in pids}
    for k, nid in enumerate(lattice.free):
        sup, vals = _basis_values(part, lattice, nid)
        for pid in sup:
            loc = np.array([vals.get(j, 0.0)
                            for j in lattice.prism_local[pid]])
            leaf_cols[pid].append((k, loc))
    ata = np.zeros((nf, nf))
    atb = np.zeros(nf)
    for pid in pids:
        cols = leaf_cols[pid]
        if not cols:
            continue
        idx = np.array([c[0] for c in cols])
        locs = np.array([c[1] for c in cols])       # (n_active, nloc)
        bvals = locs @ ref.basis_fit                # (n_active, k)
        wrow = W[row_of[pid]]
        ata[np.ix_(idx, idx)] += (bvals * wrow) @ bvals.T
        atb[idx] += bvals @ (wrow * fx[row_of[pid]])
    coeffs = np.linalg.solve(ata + 1e-14 * np.eye(nf), atb)
    fe = FeFunction(part, lattice, coeffs)
    return fe, global_error(part, f, fe, 2.0, orders)


def _basis_values(part, lattice, nid, tol=1e-13):
    """Support plus the propagated node values of one basis function."""
    import heapq
    node = lattice.nodes[nid]
    values = {nid: 1.0}
    dirty = set(node.owners)
    heap = []
    seen = set()

    def push(pid):
        for s in lattice.slaves.get(pid, ()):
            if s not in seen:
                seen.add(s)
                m = lattice.masters[s]
                heapq.heappush(heap, (part.level_of(m), m, s))

    for pid in node.owners:
        push(pid)
    while heap:
        _, m, s = heapq.heappop(heap)
        val = sum(w * values.get(j, 0.0)
                  for w, j in zip(lattice.hang_weights[s],
                                  lattice.prism_local[m]))
        if abs(val) > tol:
            values[s] = val
            for pid in lattice.nodes[s].owners:
                if pid not in dirty:
                    dirty.add(pid)
                    push(pid)
    support = {pid for pid in dirty
               if any(abs(values.get(j, 0.0)) > tol
                      for j in lattice.prism_local[pid])}
    return support, values


def interface_jump(part, lattice, coeffs, rng=None, n_samples=200):
    """Max jump of the resolved function across random interface points."""
    from .nodes import _locate_closure_leaves
    from .geometry import as_fraction, as_point
    from fractions import Fraction
    rng = rng or np.random.default_rng(0)
    ref = reference_element(lattice.orders.r1, lattice.orders.r2, part.d)
    values = resolve_hanging(part, lattice, coeffs)
    pids = sorted(part.leaves)
    worst = 0.0
    for _ in range(n_samples):
        pid = pids[rng.integers(len(pids))]
        iv = part.interval_of(pid)
        simplex = part.simplex_of(pid)
        # a random rational point on a random face of the prism closure
        den = 64
        lam = rng.integers(0, den + 1)
        t = iv.lo + Fraction(int(lam), den) * iv.length
        if rng.random() < 0.5 and part.d >= 2:
            drop = rng.integers(part.d + 1)
            verts = [v for k, v in enumerate(simplex.vertices) if k != drop]
        else:
            verts = list(simplex.vertices)
            t = iv.lo if rng.random() < 0.5 else iv.hi
        bars = rng.integers(0, den, size=len(verts)) + 1
        tot = int(bars.sum())
        x = tuple(sum(Fraction(int(b), tot) * v[i] for b, v in zip(bars, verts))
                  for i in range(part.d))
        leaves = _locate_closure_leaves(part, float(t),
                                        tuple(float(c) for c in x), t, x, True)
        if len(leaves) < 2:
            continue
        vals = []
        for q in leaves:
            refc = ref.reference_coords(part.interval_of(q),
                                        part.simplex_of(q), float(t),
                                        np.array([float(c) for c in x]))
            vals.append(values[lattice.prism_local[q]]
                        @ ref.basis_at(refc[None, :])[:, 0])
        worst = max(worst, max(vals) - min(vals))
    return worst
