"""Space-time partition storage and queries.

The partition is a forest: interval nodes, tagged-simplex nodes and prism
nodes with parent/child links, plus the set of leaf prisms that tile the
cylinder.  Geometric predicates (face sharing, neighbor sets) are decided
combinatorially from the forest and a global vertex registry keyed by
exact rational coordinates; floating point is used only to cull candidates
before an exact confirmation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .geometry import (
    Prism,
    TaggedSimplex,
    TimeInterval,
    as_fraction,
    as_point,
    bisect_interval,
    bisect_simplex,
    fraction_det,
    level_size_bounds,
    point_in_simplex,
    simplex_shape,
    spatial_conformity_ok,
    uniform_refinement_conformity,
)

__all__ = [
    "Partition",
    "MeshStats",
    "Neighborhood",
    "ValidityReport",
    "tensor_initial",
    "active_triangulation",
    "neighbors_time",
    "neighbors_space",
    "necessary_neighbors",
    "neighborhood",
    "cylindric_closure",
    "validate",
]


@dataclass
class MeshStats:
    """Root-mesh quantities and the current anisotropy/shape constants."""

    mu1: float  # max root interval length
    mu2: float  # min root interval length
    mu3: float  # max root simplex measure
    mu4: float  # min root simplex measure
    kappa0: float
    a0: float
    kappa: float
    a: float


@dataclass
class Neighborhood:
    center: int
    degree: int
    members: frozenset
    cylinder: tuple = None  # ((lo, hi), tuple of member simplex ids)


@dataclass
class ValidityReport:
    ok: bool
    violations: list
    n_leaves: int
    max_neighbor_count: int
    max_omega1: int

    def __bool__(self):
        return self.ok


class Partition:
    """The space-time partition P as a refinement forest with leaf set.

    One writer xor many readers: refinement mutates the structure, all
    query operations are read-only.  Identifier allocation lives here.
    """

    def __init__(self, params):
        self.params = params
        self.intervals = {}
        self.interval_children = {}
        self.simplices = {}
        self.simplex_children = {}
        self.vertices = {}          # vid -> coords (tuple of Fraction)
        self.vertex_ids = {}        # coords -> vid
        self.simplex_vids = {}      # sid -> tuple of vids
        self.prisms = {}
        self.prism_children = {}
        self.leaves = set()
        self.root_prisms = []
        self.root_intervals = []
        self.root_simplices = []
        # incidence maps over leaves
        self.vertex_to_leaves = {}
        self.simplex_to_leaves = {}
        self.time_starts = {}       # Fraction lo -> set of leaf pids
        self.time_ends = {}         # Fraction hi -> set of leaf pids
        self._subtree_leaves = {}   # sid -> leaves using sid or a descendant
        self._next = {"interval": 0, "simplex": 0, "prism": 0, "vertex": 0}
        self.version = 0
        self._bbox_cache = None
        self._bbox_rows = {}
        self._float_verts = {}
        self._ivf = {}
        self._touch_memo = {}
        self._omega1_cache = {}
        self._omega1_rev = {}
        self._measf = {}
        self._geo_rows = {}
        self._sid_sorted = {}   # sid -> (counter snapshot, sorted leaf rows)
        self._sid_counter = {}

    # -- id allocation

    def _new_id(self, kind):
        i = self._next[kind]
        self._next[kind] = i + 1
        return i

    def _register_vertex(self, coords):
        vid = self.vertex_ids.get(coords)
        if vid is None:
            vid = self._new_id("vertex")
            self.vertex_ids[coords] = vid
            self.vertices[vid] = coords
        return vid

    # -- basic accessors

    def interval_of(self, pid):
        return self.intervals[self.prisms[pid].interval_id]

    def simplex_of(self, pid):
        return self.simplices[self.prisms[pid].simplex_id]

    def level_of(self, pid):
        return self.prisms[pid].level

    def measure_of(self, pid):
        p = self.prisms[pid]
        return self.intervals[p.interval_id].length * self.simplices[p.simplex_id].measure

    def measure_float(self, pid):
        got = self._measf.get(pid)
        if got is None:
            got = float(self.measure_of(pid))
            self._measf[pid] = got
        return got

    def domain_measure(self):
        return sum(self.measure_of(pid) for pid in self.root_prisms)

    @property
    def d(self):
        return self.params.d

    @property
    def time_range(self):
        los = [self.intervals[self.prisms[p].interval_id].lo for p in self.root_prisms]
        his = [self.intervals[self.prisms[p].interval_id].hi for p in self.root_prisms]
        return min(los), max(his)

    def max_level(self):
        return max(self.level_of(p) for p in self.leaves)

    def stats(self):
        """Recompute MeshStats from the current partition."""
        ri = [self.intervals[self.prisms[p].interval_id] for p in self.root_prisms]
        rs = [self.simplices[self.prisms[p].simplex_id] for p in self.root_prisms]
        mu1 = max(float(i.length) for i in ri)
        mu2 = min(float(i.length) for i in ri)
        mu3 = max(float(s.measure) for s in rs)
        mu4 = min(float(s.measure) for s in rs)
        kappa0 = max(simplex_shape(s) for s in rs)
        a0 = self._anisotropy(self.root_prisms)
        kappa = max(simplex_shape(self.simplex_of(p)) for p in self.leaves)
        a = self._anisotropy(self.leaves)
        return MeshStats(mu1, mu2, mu3, mu4, kappa0, a0, kappa, a)

    def _anisotropy(self, pids):
        expo = float(self.params.ratio)
        worst = 0.0
        for pid in pids:
            li = float(self.interval_of(pid).length)
            ms = float(self.simplex_of(pid).measure) ** expo
            worst = max(worst, li / ms, ms / li)
        return worst

    def level_size_bounds(self, pid):
        roots = [(self.intervals[self.prisms[r].interval_id],
                  self.simplices[self.prisms[r].simplex_id])
                 for r in self.root_prisms]
        return level_size_bounds(self.level_of(pid), roots, self.params)

    # -- forest mutation (refinement side; exclusive access assumed)

    def _interval_kids(self, iid):
        kids = self.interval_children.get(iid)
        if kids is None:
            ids = (self._new_id("interval"), self._new_id("interval"))
            left, right = bisect_interval(self.intervals[iid], ids)
            self.intervals[ids[0]] = left
            self.intervals[ids[1]] = right
            self.interval_children[iid] = ids
            kids = ids
        return kids

    def _simplex_kids(self, sid):
        kids = self.simplex_children.get(sid)
        if kids is None:
            ids = (self._new_id("simplex"), self._new_id("simplex"))
            c1, c2 = bisect_simplex(self.simplices[sid], ids)
            self.simplices[ids[0]] = c1
            self.simplices[ids[1]] = c2
            self.simplex_children[sid] = ids
            for cid, child in ((ids[0], c1), (ids[1], c2)):
                self.simplex_vids[cid] = tuple(self._register_vertex(v)
                                               for v in child.vertices)
                self._subtree_leaves.setdefault(cid, 0)
            kids = ids
        return kids

    def _add_leaf(self, prism):
        pid = prism.id
        self.prisms[pid] = prism
        self.leaves.add(pid)
        interval = self.intervals[prism.interval_id]
        self.time_starts.setdefault(interval.lo, set()).add(pid)
        self.time_ends.setdefault(interval.hi, set()).add(pid)
        for vid in self.simplex_vids[prism.simplex_id]:
            self.vertex_to_leaves.setdefault(vid, set()).add(pid)
        self.simplex_to_leaves.setdefault(prism.simplex_id, set()).add(pid)
        sid = prism.simplex_id
        while sid != -1:
            self._subtree_leaves[sid] = self._subtree_leaves.get(sid, 0) + 1
            sid = self.simplices[sid].parent
        pts = self.float_vertices(prism.simplex_id)
        self._bbox_rows[pid] = ([float(interval.lo), float(interval.hi)]
                                + list(pts.min(axis=0)) + list(pts.max(axis=0)))
        self._measf[pid] = (float(interval.length)
                            * float(self.simplices[prism.simplex_id].measure))
        flo, fhi = float(interval.lo), float(interval.hi)
        self._geo_rows[pid] = ([flo, fhi - flo] + list(pts[0])
                               + list((pts[1:] - pts[0]).ravel())
                               + [self._measf[pid]])
        sid0 = prism.simplex_id
        self._sid_counter[sid0] = self._sid_counter.get(sid0, 0) + 1
        self.version += 1
        self._bbox_cache = None

    def _remove_leaf(self, pid):
        prism = self.prisms[pid]
        self.leaves.discard(pid)
        interval = self.intervals[prism.interval_id]
        self.time_starts[interval.lo].discard(pid)
        self.time_ends[interval.hi].discard(pid)
        for vid in self.simplex_vids[prism.simplex_id]:
            self.vertex_to_leaves[vid].discard(pid)
        self.simplex_to_leaves[prism.simplex_id].discard(pid)
        sid = prism.simplex_id
        while sid != -1:
            self._subtree_leaves[sid] -= 1
            sid = self.simplices[sid].parent
        self._bbox_rows.pop(pid, None)
        self._geo_rows.pop(pid, None)
        sid0 = prism.simplex_id
        self._sid_counter[sid0] = self._sid_counter.get(sid0, 0) + 1
        for owner in self._omega1_rev.pop(pid, ()):
            self._omega1_cache.pop(owner, None)
        self._omega1_cache.pop(pid, None)
        self.version += 1
        self._bbox_cache = None

    def split_leaf(self, pid):
        """Replace a leaf by its atomic-split children; returns child ids.

        One spatial bisection, m temporal bisections; m comes from the
        anisotropy ratio and the new level.
        """
        if pid not in self.leaves:
            raise ValueError(f"prism {pid} is not a leaf")
        prism = self.prisms[pid]
        n = self.simplices[prism.simplex_id].level + 1
        m = self.params.temporal_bisections(n)
        s_kids = self._simplex_kids(prism.simplex_id)
        i_nodes = [prism.interval_id]
        for _ in range(m):
            i_nodes = [k for iid in i_nodes for k in self._interval_kids(iid)]
        self._remove_leaf(pid)
        child_ids = []
        for iid in i_nodes:
            for sid in s_kids:
                cid = self._new_id("prism")
                child = Prism(iid, sid, n, cid, pid)
                self._add_leaf(child)
                child_ids.append(cid)
        self.prism_children[pid] = tuple(child_ids)
        return child_ids

    # -- combinatorial predicates

    def simplex_ancestor_or_equal(self, sa, sb):
        """True iff simplex sa is an ancestor of (or equal to) sb."""
        la, lb = self.simplices[sa].level, self.simplices[sb].level
        if la > lb:
            return False
        cur = sb
        while self.simplices[cur].level > la:
            cur = self.simplices[cur].parent
        return cur == sa

    def simplices_overlap(self, sa, sb):
        """dim(S_a cap S_b) == d, i.e. one is an ancestor of the other."""
        return (self.simplex_ancestor_or_equal(sa, sb)
                or self.simplex_ancestor_or_equal(sb, sa))

    def interval_float(self, iid):
        got = self._ivf.get(iid)
        if got is None:
            iv = self.intervals[iid]
            got = (float(iv.lo), float(iv.hi))
            self._ivf[iid] = got
        return got

    def intervals_overlap(self, ia, ib):
        # float comparisons are exact here: endpoints are dyadic rationals
        alo, ahi = self.interval_float(ia)
        blo, bhi = self.interval_float(ib)
        return max(alo, blo) < min(ahi, bhi)

    def float_vertices(self, sid):
        arr = self._float_verts.get(sid)
        if arr is None:
            arr = np.array([[float(c) for c in v]
                            for v in self.simplices[sid].vertices])
            self._float_verts[sid] = arr
        return arr

    def _point_in_simplex_fast(self, point_float, point_exact, sid, band=1e-9):
        """Closed-point containment with float fast path, exact in the band."""
        verts = self.float_vertices(sid)
        d = self.d
        if d == 1:
            a, b = verts[0, 0], verts[1, 0]
            lo, hi = (a, b) if a <= b else (b, a)
            return lo <= point_float[0] <= hi
        elif d == 2:
            e00 = verts[1, 0] - verts[0, 0]
            e10 = verts[1, 1] - verts[0, 1]
            e01 = verts[2, 0] - verts[0, 0]
            e11 = verts[2, 1] - verts[0, 1]
            det = e00 * e11 - e01 * e10
            if det != 0.0:
                p0 = point_float[0] - verts[0, 0]
                p1 = point_float[1] - verts[0, 1]
                l1 = (p0 * e11 - p1 * e01) / det
                l2 = (e00 * p1 - e10 * p0) / det
                l0 = 1.0 - l1 - l2
                if l0 > band and l1 > band and l2 > band:
                    return True
                if l0 < -band or l1 < -band or l2 < -band:
                    return False
        else:
            e = (verts[1:] - verts[0]).T
            try:
                lam = np.linalg.solve(e, point_float - verts[0])
                lams = np.concatenate([[1.0 - lam.sum()], lam])
                if (lams > band).all():
                    return True
                if (lams < -band).any():
                    return False
            except np.linalg.LinAlgError:
                pass
        return point_in_simplex(point_exact, self.simplices[sid].vertices)

    def simplex_closures_touch(self, sa, sb):
        """Exact test whether two forest simplices have intersecting closures.

        In a bisection forest a nonempty closure intersection always
        contains a vertex of one of the two simplices, so vertex-in-simplex
        tests decide the predicate; floats cull, rationals confirm.
        Simplices are immutable, so results are memoized.
        """
        if sa == sb:
            return True
        key = (sa, sb) if sa < sb else (sb, sa)
        hit = self._touch_memo.get(key)
        if hit is not None:
            return hit
        out = self._simplex_closures_touch(sa, sb)
        self._touch_memo[key] = out
        return out

    def _simplex_closures_touch(self, sa, sb):
        if self.simplices_overlap(sa, sb):
            return True
        fa, fb = self.float_vertices(sa), self.float_vertices(sb)
        va = self.simplices[sa].vertices
        vb = self.simplices[sb].vertices
        for k, v in enumerate(va):
            if self._point_in_simplex_fast(fa[k], v, sb):
                return True
        for k, v in enumerate(vb):
            if self._point_in_simplex_fast(fb[k], v, sa):
                return True
        return False

    def prism_closures_touch(self, pa, pb):
        alo, ahi = self.interval_float(self.prisms[pa].interval_id)
        blo, bhi = self.interval_float(self.prisms[pb].interval_id)
        if max(alo, blo) > min(ahi, bhi):
            return False
        return self.simplex_closures_touch(self.prisms[pa].simplex_id,
                                           self.prisms[pb].simplex_id)

    # -- float bounding boxes for candidate culling

    def _bboxes(self):
        if self._bbox_cache is None:
            pids = sorted(self.leaves)
            arr = np.array([self._bbox_rows[pid] for pid in pids]) \
                if pids else np.empty((0, 2 + 2 * self.d))
            index = {pid: row for row, pid in enumerate(pids)}
            self._bbox_cache = (pids, arr, index)
        return self._bbox_cache

    def prism_bbox(self, pid):
        row = self._bbox_rows[pid]
        d = self.d
        return (row[0], row[1], np.array(row[2:2 + d]), np.array(row[2 + d:]))

    def touching_candidates(self, pid, pad=1e-12):
        """Leaf ids whose float bbox touches the bbox of ``pid`` (a superset
        of the true closure-touch neighbors)."""
        pids, arr, _ = self._bboxes()
        d = self.d
        lo, hi, xmin, xmax = self.prism_bbox(pid)
        mask = (arr[:, 0] <= hi + pad) & (arr[:, 1] >= lo - pad)
        for k in range(d):
            mask &= (arr[:, 2 + k] <= xmax[k] + pad) & (arr[:, 2 + d + k] >= xmin[k] - pad)
        return [pids[i] for i in np.nonzero(mask)[0]]

    def leaves_of_simplex_in_window(self, sid, flo, fhi):
        """Leaves using ``sid`` whose interval lies inside [flo, fhi]."""
        counter = self._sid_counter.get(sid, 0)
        entry = self._sid_sorted.get(sid)
        if entry is None or entry[0] != counter:
            rows = sorted((self.interval_float(self.prisms[q].interval_id), q)
                          for q in self.simplex_to_leaves.get(sid, ()))
            entry = (counter, rows)
            self._sid_sorted[sid] = entry
        import bisect
        rows = entry[1]
        out = []
        i = bisect.bisect_left(rows, ((flo - 1e-15, -np.inf), -1))
        while i < len(rows):
            (qlo, qhi), q = rows[i]
            if qlo > fhi + 1e-15:
                break
            if qhi <= fhi + 1e-15:
                out.append(q)
            i += 1
        return out

    def leaves_in_bbox(self, tlo, thi, xmin, xmax, pad=1e-12):
        """Leaf ids whose float bbox lies inside the given box (superset)."""
        pids, arr, _ = self._bboxes()
        d = self.d
        mask = (arr[:, 0] >= tlo - pad) & (arr[:, 1] <= thi + pad)
        for k in range(d):
            mask &= (arr[:, 2 + k] >= xmin[k] - pad) & (arr[:, 2 + d + k] <= xmax[k] + pad)
        return [pids[i] for i in np.nonzero(mask)[0]]


# ---------------------------------------------------------------------------
# construction


def tensor_initial(time_points, spatial_mesh, params, check_labeling=True):
    """Initial tensor-product partition from time points and a triangulation.

    Time points must be strictly increasing; all intervals are half-open
    except the last, which is closed.  The spatial mesh must be conforming;
    with ``check_labeling`` its conformity under uniform bisection to depth
    d is verified as a runtime substitute for a well-labeledness proof.
    """
    times = [as_fraction(t) for t in time_points]
    if len(times) < 2 or any(b <= a for a, b in zip(times, times[1:])):
        raise ValueError("time points must be strictly increasing")
    simplices = list(spatial_mesh)
    if not spatial_conformity_ok(simplices):
        raise ValueError("spatial mesh is not conforming")
    if check_labeling and not uniform_refinement_conformity(simplices, params.d):
        raise ValueError("spatial mesh loses conformity under uniform "
                         "bisection; it is not well-labeled")
    part = Partition(params)
    for k, (a, b) in enumerate(zip(times, times[1:])):
        iid = part._new_id("interval")
        closed = k == len(times) - 2
        part.intervals[iid] = TimeInterval(a, b, closed, 0, iid, -1)
        part.root_intervals.append(iid)
    for s in simplices:
        sid = part._new_id("simplex")
        part.simplices[sid] = TaggedSimplex(
            tuple(as_point(v) for v in s.vertices), s.tag, 0, sid, -1, None)
        part.simplex_vids[sid] = tuple(
            part._register_vertex(v) for v in part.simplices[sid].vertices)
        part._subtree_leaves[sid] = 0
        part.root_simplices.append(sid)
    for iid in part.root_intervals:
        for sid in part.root_simplices:
            pid = part._new_id("prism")
            prism = Prism(iid, sid, 0, pid, -1)
            part._add_leaf(prism)
            part.root_prisms.append(pid)
    return part


# ---------------------------------------------------------------------------
# queries


def active_triangulation(part, t):
    """Simplex ids of the leaves whose interval contains t (half-open)."""
    t = as_fraction(t)
    t0, t1 = part.time_range
    if not t0 <= t <= t1:
        raise ValueError(f"time {t} outside [{t0}, {t1}]")
    return {part.prisms[pid].simplex_id for pid in part.leaves
            if part.interval_of(pid).contains(t)}


def neighbors_time(part, pid):
    """N_t: one-level-coarser prisms touching in time over the same region."""
    if pid not in part.leaves:
        raise ValueError(f"prism {pid} is not a leaf")
    iv = part.interval_of(pid)
    sid = part.prisms[pid].simplex_id
    lev = part.level_of(pid)
    cands = set()
    cands |= part.time_ends.get(iv.lo, set())
    cands |= part.time_starts.get(iv.hi, set())
    out = set()
    for q in cands:
        if q == pid or part.level_of(q) != lev - 1:
            continue
        if part.simplices_overlap(sid, part.prisms[q].simplex_id):
            out.add(q)
    return out


def neighbors_space(part, pid):
    """N_x: prisms whose refinement is forced by spatial adjacency.

    d >= 2: time overlap, shared face of dimension 1..d-1, refinement edge
    of S contained in the neighbor.  d = 1: time overlap, touching at one
    point, one level coarser.
    """
    if pid not in part.leaves:
        raise ValueError(f"prism {pid} is not a leaf")
    prism = part.prisms[pid]
    sid = prism.simplex_id
    lev = prism.level
    d = part.d
    vids = part.simplex_vids[sid]
    out = set()
    if d >= 2:
        simplex = part.simplices[sid]
        va, vb = vids[0], vids[simplex.tag]
        cands = (part.vertex_to_leaves.get(va, set())
                 & part.vertex_to_leaves.get(vb, set()))
        for q in cands:
            if q == pid:
                continue
            if not part.intervals_overlap(prism.interval_id,
                                          part.prisms[q].interval_id):
                continue
            shared = len(set(vids) & set(part.simplex_vids[part.prisms[q].simplex_id]))
            if 2 <= shared <= d:
                out.add(q)
    else:
        cands = set()
        for vid in vids:
            cands |= part.vertex_to_leaves.get(vid, set())
        for q in cands:
            if q == pid or part.level_of(q) != lev - 1:
                continue
            if not part.intervals_overlap(prism.interval_id,
                                          part.prisms[q].interval_id):
                continue
            qvids = set(part.simplex_vids[part.prisms[q].simplex_id])
            if len(set(vids) & qvids) == 1:
                out.add(q)
    return out


def necessary_neighbors(part, pid):
    """N = N_t union N_x (the two sets are disjoint by construction)."""
    return neighbors_time(part, pid) | neighbors_space(part, pid)


def _omega1_exact(part, pid):
    members = {pid}
    for q in part.touching_candidates(pid):
        if q != pid and part.prism_closures_touch(pid, q):
            members.add(q)
    return members


def _omega1_fast(part, pid):
    """Candidate-map version of the closure-touch neighborhood.

    Complete for vertex-sharing and nested-simplex contacts (which covers
    all conforming co-active neighbors and nested time-abutting ones); the
    rare boundary-only contact without a shared vertex is skipped, so this
    variant serves the adaptive error estimator, never a mesh invariant.
    Results are cached; refining any member invalidates affected entries.
    """
    cached = part._omega1_cache.get(pid)
    if cached is not None:
        return set(cached)
    prism = part.prisms[pid]
    cands = set()
    for vid in part.simplex_vids[prism.simplex_id]:
        cands |= part.vertex_to_leaves.get(vid, set())
    stack = list(part.simplex_children.get(prism.simplex_id, ()))
    while stack:
        sid = stack.pop()
        if part._subtree_leaves.get(sid, 0) == 0:
            continue
        cands |= part.simplex_to_leaves.get(sid, set())
        stack.extend(part.simplex_children.get(sid, ()))
    sid = part.simplices[prism.simplex_id].parent
    while sid != -1:
        cands |= part.simplex_to_leaves.get(sid, set())
        sid = part.simplices[sid].parent
    cands.discard(pid)
    members = {pid}
    rows = part._bbox_rows
    me = rows[pid]
    d = part.d
    for q in cands:
        row = rows[q]
        if row[0] > me[1] or row[1] < me[0]:
            continue
        reject = False
        for k in range(d):
            if row[2 + k] > me[2 + d + k] + 1e-12 or row[2 + d + k] < me[2 + k] - 1e-12:
                reject = True
                break
        if not reject and part.prism_closures_touch(pid, q):
            members.add(q)
    part._omega1_cache[pid] = frozenset(members)
    for m in members:
        part._omega1_rev.setdefault(m, set()).add(pid)
    return members


def neighborhood(part, pid, j, method="exact"):
    """omega^j: the j-fold closure-touch neighborhood of a leaf prism."""
    if pid not in part.leaves:
        raise ValueError(f"prism {pid} is not a leaf")
    if j < 1:
        raise ValueError("degree j must be >= 1")
    one = _omega1_exact if method == "exact" else _omega1_fast
    members = {pid}
    frontier = {pid}
    for _ in range(j):
        nxt = set()
        for q in frontier:
            nxt |= one(part, q)
        frontier = nxt - members
        members |= nxt
        if not frontier:
            break
    return Neighborhood(pid, j, frozenset(members))


def _simplex_union_covers(part, member_sids, sid):
    """Exact cover test ``S subset of union of members`` via the forest."""
    for m in member_sids:
        if part.simplex_ancestor_or_equal(m, sid):
            return True
    below = [m for m in member_sids
             if m != sid and part.simplex_ancestor_or_equal(sid, m)]
    if not below:
        return False
    kids = part.simplex_children.get(sid)
    if kids is None:
        return False
    return all(_simplex_union_covers(part, below, k) for k in kids)


def cylindric_closure(part, nb):
    """All leaves inside the hull product of a neighborhood's members.

    The hull is (union of member intervals) x (union of member simplices);
    membership is decided exactly through the forest.  Candidates come
    from subtree and ancestor walks of the member simplices, so the cost
    scales with the patch, not the mesh.
    """
    member_iids = {part.prisms[p].interval_id for p in nb.members}
    member_sids = {part.prisms[p].simplex_id for p in nb.members}
    lo = min(part.intervals[i].lo for i in member_iids)
    hi = max(part.intervals[i].hi for i in member_iids)
    flo = min(part.interval_float(i)[0] for i in member_iids)
    fhi = max(part.interval_float(i)[1] for i in member_iids)
    cands = set()
    seen_sids = set()
    for sid in member_sids:
        stack = [sid]
        while stack:
            cur = stack.pop()
            if cur in seen_sids or part._subtree_leaves.get(cur, 0) == 0:
                continue
            seen_sids.add(cur)
            cands.update(part.leaves_of_simplex_in_window(cur, flo, fhi))
            stack.extend(part.simplex_children.get(cur, ()))
        anc = part.simplices[sid].parent
        while anc != -1 and anc not in seen_sids:
            seen_sids.add(anc)
            cands.update(part.leaves_of_simplex_in_window(anc, flo, fhi))
            anc = part.simplices[anc].parent
    members = set(nb.members)
    for q in cands:
        if q in members:
            continue
        iv = part.interval_of(q)
        if not (lo <= iv.lo and iv.hi <= hi):
            continue
        if _simplex_union_covers(part, member_sids, part.prisms[q].simplex_id):
            members.add(q)
    return Neighborhood(nb.center, nb.degree, frozenset(members),
                        ((lo, hi), tuple(sorted(member_sids))))


# ---------------------------------------------------------------------------
# validation


def _facet_keys(part, sid):
    vids = part.simplex_vids[sid]
    d = part.d
    if d == 1:
        return [(v,) for v in vids]
    return [tuple(sorted(vids[:k] + vids[k + 1:])) for k in range(d + 1)]


def _root_boundary_facets(part):
    counts = {}
    for sid in part.root_simplices:
        for key in _facet_keys(part, sid):
            counts[key] = counts.get(key, 0) + 1
    return [key for key, c in counts.items() if c == 1]


def _point_in_facet(point, facet_pts):
    """Exact containment of a point in a (d-1)-simplex embedded in R^d."""
    base = facet_pts[0]
    d = len(point)
    edges = [tuple(q[i] - base[i] for i in range(d)) for q in facet_pts[1:]]
    rel = tuple(point[i] - base[i] for i in range(d))
    k = len(edges)
    if k == 0:
        return all(rel[i] == 0 for i in range(d))
    gram = [[sum(edges[a][i] * edges[b][i] for i in range(d)) for b in range(k)]
            for a in range(k)]
    rhs = [sum(edges[a][i] * rel[i] for i in range(d)) for a in range(k)]
    den = fraction_det(gram)
    if den == 0:
        return False
    mus = []
    for col in range(k):
        mod = [row[:] for row in gram]
        for r in range(k):
            mod[r][col] = rhs[r]
        mus.append(fraction_det(mod) / den)
    for i in range(d):
        resid = rel[i] - sum(mus[a] * edges[a][i] for a in range(k))
        if resid != 0:
            return False
    return all(mu >= 0 for mu in mus) and sum(mus) <= 1


def _facet_on_boundary(part, key, boundary_facets, cache):
    hit = cache.get(key)
    if hit is not None:
        return hit
    pts = [part.vertices[v] for v in key]
    ok = False
    for bf in boundary_facets:
        bpts = [part.vertices[v] for v in bf]
        if all(_point_in_facet(p, bpts) for p in pts):
            ok = True
            break
    cache[key] = ok
    return ok


def _segments_on_line_intersection(a0, a1, b0, b1):
    """Exact intersection of two collinear segments -> list of points."""
    d = len(a0)
    axis = max(range(d), key=lambda i: abs(float(a1[i] - a0[i])))

    def key(p):
        return p[axis]

    lo_a, hi_a = sorted((a0, a1), key=key)
    lo_b, hi_b = sorted((b0, b1), key=key)
    lo = max(lo_a, lo_b, key=key)
    hi = min(hi_a, hi_b, key=key)
    if key(lo) > key(hi):
        return []
    if lo == hi:
        return [lo]
    return [lo, hi]


def _clip_polygon_halfplane(poly, a, b, c):
    """Exact Sutherland-Hodgman step keeping a*x + b*y <= c."""
    out = []
    n = len(poly)
    for i in range(n):
        p, q = poly[i], poly[(i + 1) % n]
        fp = a * p[0] + b * p[1] - c
        fq = a * q[0] + b * q[1] - c
        if fp <= 0:
            out.append(p)
        if (fp < 0 < fq) or (fq < 0 < fp):
            t = fp / (fp - fq)
            out.append((p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])))
    dedup = []
    for p in out:
        if not dedup or p != dedup[-1]:
            dedup.append(p)
    if len(dedup) > 1 and dedup[0] == dedup[-1]:
        dedup.pop()
    return dedup


def _triangle_halfplanes(tri):
    out = []
    for i in range(3):
        p, q = tri[i], tri[(i + 1) % 3]
        r = tri[(i + 2) % 3]
        a = q[1] - p[1]
        b = p[0] - q[0]
        c = a * p[0] + b * p[1]
        if a * r[0] + b * r[1] - c > 0:
            a, b, c = -a, -b, -c
        out.append((a, b, c))
    return out


def triangle_intersection(tri_a, tri_b):
    """Exact intersection polygon of two closed triangles (d=2)."""
    poly = list(tri_a)
    for a, b, c in _triangle_halfplanes(tri_b):
        poly = _clip_polygon_halfplane(poly, a, b, c)
        if not poly:
            return []
    seen = []
    for p in poly:
        if p not in seen:
            seen.append(p)
    return seen


def _extreme_points(points):
    """Extreme points of a small planar/linear point set, exactly."""
    pts = []
    for p in points:
        if p not in pts:
            pts.append(p)
    if len(pts) <= 2:
        return pts
    # drop points collinear with their polygon neighbors
    out = []
    n = len(pts)
    for i in range(n):
        a, b, c = pts[(i - 1) % n], pts[i], pts[(i + 1) % n]
        cross = ((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))
        if cross != 0:
            out.append(b)
    if not out:  # fully collinear: keep the two ends along a dominant axis
        axis = 0 if abs(float(pts[0][0] - pts[1][0])) >= abs(float(pts[0][1] - pts[1][1])) else 1
        s = sorted(pts, key=lambda p: p[axis])
        out = [s[0], s[-1]]
    return out


def _is_face_of(points, vertices):
    """Is the convex hull of ``points`` a face (possibly all) of the simplex?

    Faces of a simplex are spanned by vertex subsets, so the hull is a face
    iff every extreme point of the intersection is a vertex of the simplex.
    """
    if not points:
        return True
    vset = set(vertices)
    return all(p in vset for p in _extreme_points(points))


def _spatial_intersection_points(part, sa, sb):
    va = part.simplices[sa].vertices
    vb = part.simplices[sb].vertices
    if part.d == 1:
        return _segments_on_line_intersection(va[0], va[1], vb[0], vb[1])
    return triangle_intersection(va, vb)


def _clip_float(tri_a, tri_b):
    """Float Sutherland-Hodgman clip of two triangles (fast pre-check)."""
    poly = [np.asarray(p, dtype=float) for p in tri_a]
    for i in range(3):
        p, q = np.asarray(tri_b[i], float), np.asarray(tri_b[(i + 1) % 3], float)
        r = np.asarray(tri_b[(i + 2) % 3], float)
        a, b = q[1] - p[1], p[0] - q[0]
        c = a * p[0] + b * p[1]
        if a * r[0] + b * r[1] - c > 0:
            a, b, c = -a, -b, -c
        out = []
        n = len(poly)
        for k in range(n):
            u, v = poly[k], poly[(k + 1) % n]
            fu = a * u[0] + b * u[1] - c
            fv = a * v[0] + b * v[1] - c
            if fu <= 0:
                out.append(u)
            if (fu < 0 < fv) or (fv < 0 < fu):
                t = fu / (fu - fv)
                out.append(u + t * (v - u))
        poly = out
        if not poly:
            return []
    return poly


def _hierarchical_pair_ok(part, pa, pb):
    """Closure intersection of two leaves is a face of one of them.

    Positive time overlap reduces to interval nesting plus per-slab
    conformity; pairs sharing exactly one time point get the spatial face
    check (float fast path, exact confirmation when ambiguous; d <= 2).
    """
    ia, ib = part.interval_of(pa), part.interval_of(pb)
    lo, hi = max(ia.lo, ib.lo), min(ia.hi, ib.hi)
    if lo > hi:
        return True
    if lo < hi:
        return ((ia.lo <= ib.lo and ib.hi <= ia.hi)
                or (ib.lo <= ia.lo and ia.hi <= ib.hi))
    sa = part.prisms[pa].simplex_id
    sb = part.prisms[pb].simplex_id
    # nested simplices: the intersection is the time facet of the finer prism
    if part.simplices_overlap(sa, sb):
        return True
    if part.d > 2:
        return True  # exact face check implemented for d <= 2 only
    if part.d == 2:
        # float pre-check: every clip vertex must sit on a vertex of one of
        # the triangles; unambiguous cases never reach the exact clipper
        fa, fb = part.float_vertices(sa), part.float_vertices(sb)
        hull = _clip_float([tuple(p) for p in fa], [tuple(p) for p in fb])
        if not hull:
            return True
        scale = max(1.0, np.abs(np.concatenate([fa, fb])).max())
        tol = 1e-9 * scale
        for verts in (fa, fb):
            if all(min(np.hypot(*(np.asarray(h) - v)) for v in verts) <= tol
                   for h in hull):
                return True
    pts = _spatial_intersection_points(part, sa, sb)
    if not pts:
        return True
    return (_is_face_of(pts, part.simplices[sa].vertices)
            or _is_face_of(pts, part.simplices[sb].vertices))


def _abutting_pairs(part, max_pairs=None):
    """Pairs of leaves whose closures share exactly one time coordinate,
    pre-filtered by spatial float bboxes."""
    _, arr, index = part._bboxes()
    d = part.d
    pairs = []
    for t, left in part.time_ends.items():
        right = part.time_starts.get(t, set())
        if not left or not right:
            continue
        rlist = sorted(right)
        rows = np.array([index[q] for q in rlist])
        rmin = arr[rows, 2:2 + d]
        rmax = arr[rows, 2 + d:]
        for pa in sorted(left):
            row = arr[index[pa]]
            mask = np.ones(len(rlist), dtype=bool)
            for k in range(d):
                mask &= (rmin[:, k] <= row[2 + d + k] + 1e-12)
                mask &= (rmax[:, k] >= row[2 + k] - 1e-12)
            for i in np.nonzero(mask)[0]:
                pairs.append((pa, rlist[i]))
                if max_pairs and len(pairs) >= max_pairs:
                    return pairs
    return pairs


def validate(part, hierarchical_cutoff=150, omega_sample=40,
             max_abutting_pairs=200_000, rng=None):
    """Check the mesh invariants; returns a ValidityReport.

    Checks exact tiling of the cylinder, spatial conformity on every time
    slab (facet coverage swept in time), the 1-irregular rule in time (and
    in space for d=1), the hierarchical-structure property, and boundedness
    of the neighbor sets.  Violations are collected with prism ids, never
    raised.
    """
    violations = []
    d = part.d

    total = sum(part.measure_of(pid) for pid in part.leaves)
    if total != part.domain_measure():
        violations.append(("tiling", None, None))

    # spatial conformity: swept facet coverage.  At every time each facet
    # key must be used by exactly two active leaves (interior) or one
    # (domain boundary).
    entries = {}
    for pid in part.leaves:
        flo, fhi = part.interval_float(part.prisms[pid].interval_id)
        for key in _facet_keys(part, part.prisms[pid].simplex_id):
            entries.setdefault(key, []).append((flo, fhi, pid))
    boundary_facets = _root_boundary_facets(part)
    bcache = {}
    for key, lst in entries.items():
        want = 1 if _facet_on_boundary(part, key, boundary_facets, bcache) else 2
        events = []
        for lo, hi, pid in lst:
            events.append((lo, 0, pid))   # open before close at equal time
            events.append((hi, 1, pid))
        events.sort(key=lambda e: (e[0], e[1]))
        active = set()
        prev_t = None
        for t, kind, pid in events:
            if prev_t is not None and t != prev_t and active:
                if len(active) != want:
                    violations.append(("conformity", tuple(sorted(active)), key))
            if kind == 0:
                active.add(pid)
            else:
                active.discard(pid)
            prev_t = t

    # 1-irregularity in time: abutting pairs over the same spatial region
    for t, left in part.time_ends.items():
        right = part.time_starts.get(t, set())
        if not left or not right:
            continue
        by_simplex = {}
        for pid in left:
            by_simplex.setdefault(part.prisms[pid].simplex_id, []).append(pid)
        for qid in right:
            sid = part.prisms[qid].simplex_id
            partners = []
            cur = sid
            while cur != -1:
                partners.extend(by_simplex.get(cur, ()))
                cur = part.simplices[cur].parent
            stack = list(part.simplex_children.get(sid, ()))
            while stack:
                c = stack.pop()
                if part._subtree_leaves.get(c, 0) == 0:
                    continue
                partners.extend(by_simplex.get(c, ()))
                stack.extend(part.simplex_children.get(c, ()))
            for p in partners:
                if abs(part.level_of(p) - part.level_of(qid)) > 1:
                    violations.append(("time-1-irregular", (p, qid), t))

    # 1-irregularity in space (d = 1): prisms touching at a spatial vertex
    # with overlapping time intervals
    if d == 1:
        for vid, pids in part.vertex_to_leaves.items():
            lst = sorted(pids)
            ivs = [part.interval_of(p) for p in lst]
            order = sorted(range(len(lst)), key=lambda i: ivs[i].lo)
            active = []
            for i in order:
                lo = ivs[i].lo
                active = [j for j in active if ivs[j].hi > lo]
                for j in active:
                    if part.simplices_overlap(part.prisms[lst[i]].simplex_id,
                                              part.prisms[lst[j]].simplex_id):
                        continue
                    if abs(part.level_of(lst[i]) - part.level_of(lst[j])) > 1:
                        violations.append(("space-1-irregular",
                                           (lst[j], lst[i]), vid))
                active.append(i)

    # hierarchical structure
    leaves = sorted(part.leaves)
    if len(leaves) <= hierarchical_cutoff:
        pairs = [(a, b) for i, a in enumerate(leaves) for b in leaves[i + 1:]]
    else:
        pairs = _abutting_pairs(part, max_pairs=max_abutting_pairs)
    for pa, pb in pairs:
        if not _hierarchical_pair_ok(part, pa, pb):
            violations.append(("hierarchical", (pa, pb), None))

    max_nb = 0
    for pid in leaves:
        max_nb = max(max_nb, len(necessary_neighbors(part, pid)))

    max_omega = 0
    if omega_sample:
        rng = rng or np.random.default_rng(0)
        sample = leaves if len(leaves) <= omega_sample else [
            leaves[i] for i in rng.choice(len(leaves), size=omega_sample,
                                          replace=False)]
        for pid in sample:
            max_omega = max(max_omega, len(_omega1_exact(part, pid)))

    return ValidityReport(not violations, violations, len(leaves),
                          max_nb, max_omega)
