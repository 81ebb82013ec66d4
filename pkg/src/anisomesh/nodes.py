"""Lagrange node lattice: free/hanging classification and masters.

Nodes are deduplicated by exact rational coordinates, so the hanging/free
classification is a set-theoretic fact.  A hanging node hangs either in
time or in space, never both; its value is constrained by the local
polynomial of a master element of strictly lower level, which makes the
level-ordered resolution of hanging constraints well defined.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .element import PolyOrders, reference_element
from .geometry import point_in_simplex
from .mesh import neighborhood

__all__ = [
    "PolyOrders",
    "LagrangeNode",
    "NodeLattice",
    "ClassificationError",
    "local_nodes",
    "classify",
    "resolve_hanging",
    "basis_support",
    "support_degree",
]

FREE = "free"
HANGING_TIME = "hanging-time"
HANGING_SPACE = "hanging-space"


class ClassificationError(RuntimeError):
    """A node classified as hanging both in time and in space."""


def support_degree(d):
    """Neighborhood degree j(d) containing every basis support."""
    return 2 if d == 1 else 3


@dataclass
class LagrangeNode:
    id: int
    t: Fraction
    x: tuple
    owners: tuple          # leaf pids whose local lattice contains the node
    hangers: tuple         # leaf pids with the node on their closure only
    status: str
    master: int = None     # master prism id for hanging nodes


class NodeLattice:
    """All Lagrange nodes of a partition plus per-prism local node lists."""

    def __init__(self, part, orders):
        self.part = part
        self.orders = orders
        self.nodes = []
        self.prism_local = {}      # pid -> np.array of node ids (ref order)
        self.free = []
        self.hanging = []
        self.free_pos = {}
        self.masters = {}          # node id -> master pid
        self.hang_weights = {}     # node id -> weight vector over master locals
        self.slaves = {}           # master pid -> [node ids]
        self.hanging_order = []    # hanging ids sorted by master level
        self.version = part.version

    @property
    def n_free(self):
        return len(self.free)

    def node(self, nid):
        return self.nodes[nid]

    def local_values(self, values, pid):
        return values[self.prism_local[pid]]


def local_nodes(part, pid, orders):
    """Exact coordinates of the local Lagrange lattice of one prism.

    Ordering is time-major, then lexicographic in the spatial multi-index.
    """
    ref = reference_element(orders.r1, orders.r2, part.d)
    iv = part.interval_of(pid)
    simplex = part.simplex_of(pid)
    tcoords = [iv.lo + th * iv.length for th in ref.time_nodes_exact]
    v0 = simplex.vertices[0]
    edges = [tuple(v[i] - v0[i] for i in range(part.d))
             for v in simplex.vertices[1:]]
    xcoords = []
    for xhat in ref.space_nodes_exact:
        pt = list(v0)
        for j, lam in enumerate(xhat):
            if lam:
                for i in range(part.d):
                    pt[i] += lam * edges[j][i]
        xcoords.append(tuple(pt))
    return [(t, x) for t in tcoords for x in xcoords]


def _point_in_simplex_loose(part, sid, xf, band):
    """Float containment that never rejects a boundary point (descent aid)."""
    verts = part.float_vertices(sid)
    d = part.d
    if d == 1:
        a, b = sorted((verts[0, 0], verts[1, 0]))
        return a - band <= xf[0] <= b + band
    if d == 2:
        e00 = verts[1, 0] - verts[0, 0]
        e10 = verts[1, 1] - verts[0, 1]
        e01 = verts[2, 0] - verts[0, 0]
        e11 = verts[2, 1] - verts[0, 1]
        det = e00 * e11 - e01 * e10
        if det == 0.0:
            return True
        p0, p1 = xf[0] - verts[0, 0], xf[1] - verts[0, 1]
        l1 = (p0 * e11 - p1 * e01) / det
        l2 = (e00 * p1 - e10 * p0) / det
        return l1 >= -band and l2 >= -band and 1.0 - l1 - l2 >= -band
    e = (verts[1:] - verts[0]).T
    try:
        lam = np.linalg.solve(e, np.asarray(xf) - verts[0])
    except np.linalg.LinAlgError:
        return True
    return (lam >= -band).all() and 1.0 - lam.sum() >= -band


def _locate_closure_leaves(part, tf, xf, t_exact, x_exact, exact, band=1e-9):
    """All leaves whose closure contains the point, by forest descent."""
    out = []
    stack = list(part.root_prisms)
    while stack:
        pid = stack.pop()
        prism = part.prisms[pid]
        flo, fhi = part.interval_float(prism.interval_id)
        if tf < flo - band or tf > fhi + band:
            continue
        if not _point_in_simplex_loose(part, prism.simplex_id, xf, band):
            continue
        kids = part.prism_children.get(pid)
        if kids is not None:
            stack.extend(kids)
            continue
        if pid not in part.leaves:
            continue
        if exact:
            iv = part.intervals[prism.interval_id]
            if not iv.closure_contains(t_exact):
                continue
            if not part._point_in_simplex_fast(np.asarray(xf), x_exact,
                                               prism.simplex_id):
                continue
        else:
            if tf < flo - 1e-12 or tf > fhi + 1e-12:
                continue
            if not _point_in_simplex_loose(part, prism.simplex_id, xf, 1e-12):
                continue
        out.append(pid)
    return out


def classify(part, orders, exact="auto"):
    """Build the node lattice: dedup, owners, hanging status, masters.

    ``exact`` selects rational confirmation of closure membership during
    point location ("auto": exact up to 20k leaves, float bands above).
    A node that would hang both in time and in space raises
    ClassificationError since it contradicts the mesh invariants.
    """
    if exact == "auto":
        exact = len(part.leaves) <= 20_000
    ref = reference_element(orders.r1, orders.r2, part.d)
    lattice = NodeLattice(part, orders)
    coord_index = {}
    owners = []
    tcoord_cache = {}
    xcoord_cache = {}
    for pid in sorted(part.leaves):
        prism = part.prisms[pid]
        tc = tcoord_cache.get(prism.interval_id)
        if tc is None:
            iv = part.intervals[prism.interval_id]
            tc = [iv.lo + th * iv.length for th in ref.time_nodes_exact]
            tcoord_cache[prism.interval_id] = tc
        xc = xcoord_cache.get(prism.simplex_id)
        if xc is None:
            simplex = part.simplices[prism.simplex_id]
            v0 = simplex.vertices[0]
            edges = [tuple(v[i] - v0[i] for i in range(part.d))
                     for v in simplex.vertices[1:]]
            xc = []
            for xhat in ref.space_nodes_exact:
                pt = list(v0)
                for j, lam in enumerate(xhat):
                    if lam:
                        for i in range(part.d):
                            pt[i] += lam * edges[j][i]
                xc.append(tuple(pt))
            xcoord_cache[prism.simplex_id] = xc
        ids = np.empty(ref.n_local, dtype=np.int64)
        k = 0
        for t in tc:
            for x in xc:
                key = (t, x)
                nid = coord_index.get(key)
                if nid is None:
                    nid = len(coord_index)
                    coord_index[key] = nid
                    owners.append([])
                owners[nid].append(pid)
                ids[k] = nid
                k += 1
        lattice.prism_local[pid] = ids
    coords = [None] * len(coord_index)
    for key, nid in coord_index.items():
        coords[nid] = key

    for nid, (t, x) in enumerate(coords):
        tf = float(t)
        xf = tuple(float(c) for c in x)
        located = _locate_closure_leaves(part, tf, xf, t, x, exact)
        own = sorted(owners[nid])
        own_set = set(own)
        hangers = sorted(q for q in located if q not in own_set)
        if not hangers:
            node = LagrangeNode(nid, t, x, tuple(own), (), FREE)
            lattice.free.append(nid)
        else:
            kinds = set()
            for h in hangers:
                iv = part.interval_of(h)
                kinds.add("space" if (t == iv.lo or t == iv.hi) else "time")
            if len(kinds) == 2:
                raise ClassificationError(
                    f"node {nid} at (t={t}, x={x}) hangs in time and space")
            kind = kinds.pop()
            if kind == "space":
                status = HANGING_SPACE
                owner_parents = {part.simplices[part.prisms[o].simplex_id].parent
                                 for o in own}
                cands = [h for h in hangers
                         if part.prisms[h].simplex_id in owner_parents]
                pool = cands if cands else hangers
            else:
                status = HANGING_TIME
                pool = hangers
            master = min(pool, key=lambda h: (part.level_of(h), h))
            min_owner_level = min(part.level_of(o) for o in own)
            if part.level_of(master) >= min_owner_level:
                raise ClassificationError(
                    f"master of node {nid} is not strictly coarser")
            node = LagrangeNode(nid, t, x, tuple(own), tuple(hangers),
                                status, master)
            lattice.hanging.append(nid)
            lattice.masters[nid] = master
            lattice.slaves.setdefault(master, []).append(nid)
            iv = part.interval_of(master)
            simplex = part.simplex_of(master)
            refc = ref.reference_coords(iv, simplex, tf, np.asarray(xf))
            lattice.hang_weights[nid] = ref.basis_at(refc[None, :])[:, 0]
        lattice.nodes.append(node)

    lattice.free_pos = {nid: k for k, nid in enumerate(lattice.free)}
    lattice.hanging_order = sorted(
        lattice.hanging,
        key=lambda nid: (part.level_of(lattice.masters[nid]),
                         lattice.masters[nid], nid))
    return lattice


def resolve_hanging(part, lattice, coeffs):
    """Node values from free coefficients, masters resolved level by level.

    Returns the dense value array over all node ids; per-leaf local values
    are ``values[lattice.prism_local[pid]]``.
    """
    coeffs = np.asarray(coeffs, dtype=float)
    if coeffs.shape != (lattice.n_free,):
        raise ValueError("need one coefficient per free node")
    values = np.zeros(len(lattice.nodes))
    values[lattice.free] = coeffs
    for nid in lattice.hanging_order:
        master = lattice.masters[nid]
        values[nid] = lattice.hang_weights[nid] @ values[lattice.prism_local[master]]
    return values


def basis_support(part, lattice, nid, check=True, tol=1e-13):
    """Exact support of the basis function of a free node, as leaf ids.

    Propagates the delta coefficient through the hanging constraints; only
    prisms reachable through nonzero values are touched.  With ``check``
    the support is asserted to lie inside omega^{j(d)} of every owner.
    """
    node = lattice.nodes[nid]
    if node.status != FREE:
        raise ValueError(f"node {nid} is not free")
    values = {nid: 1.0}
    dirty = set(node.owners)
    heap = []
    seen = set()

    def push_slaves(pid):
        for s in lattice.slaves.get(pid, ()):
            if s not in seen:
                seen.add(s)
                master = lattice.masters[s]
                heapq.heappush(heap, (part.level_of(master), master, s))

    for pid in node.owners:
        push_slaves(pid)
    while heap:
        _, master, s = heapq.heappop(heap)
        val = sum(w * values.get(j, 0.0)
                  for w, j in zip(lattice.hang_weights[s],
                                  lattice.prism_local[master]))
        if abs(val) > tol:
            values[s] = val
            for pid in lattice.nodes[s].owners:
                if pid not in dirty:
                    dirty.add(pid)
                    push_slaves(pid)
    support = set()
    for pid in dirty:
        if any(abs(values.get(j, 0.0)) > tol for j in lattice.prism_local[pid]):
            support.add(pid)
    if check:
        j = support_degree(part.d)
        for owner in node.owners:
            members = neighborhood(part, owner, j).members
            if not support <= members:
                raise AssertionError(
                    f"support of node {nid} leaves omega^{j} of owner {owner}")
    return support
