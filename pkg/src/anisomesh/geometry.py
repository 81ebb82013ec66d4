"""Geometric atoms of the space-time mesh.

Time intervals and tagged simplices carry their bisection state (tag,
level, half-open flags) and are bisected by the two primitives
:func:`bisect_interval` and :func:`bisect_simplex`.  The simplex rule is
the Maubach convention: vertices ``x0..xd``, refinement edge ``x0-x_tag``,
children ``(x0..x_{tag-1}, z, x_{tag+1}..xd)`` and
``(x1..x_tag, z, x_{tag+1}..xd)`` with the tag decremented cyclically, so
descendants of one root fall into finitely many similarity classes.

All coordinates are exact rationals (``fractions.Fraction``).  Bisection
midpoints of dyadic inputs stay dyadic, which makes interval partitions
and vertex identity exact set-theoretic facts instead of tolerance games.
Floating point enters only through derived metric quantities (diameters,
shape constants).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from itertools import permutations

import numpy as np

__all__ = [
    "TimeInterval",
    "TaggedSimplex",
    "Prism",
    "AnisotropyParams",
    "bisect_interval",
    "bisect_simplex",
    "simplex_shape",
    "simplex_inradius",
    "simplex_diameter",
    "simplex_measure",
    "refinement_edge",
    "level_size_bounds",
    "kuhn_box_mesh",
    "barycentric_coordinates",
    "point_in_simplex",
    "similarity_fingerprint",
    "descendant_classes",
    "spatial_conformity_ok",
    "uniform_refinement_conformity",
    "fraction_det",
    "as_fraction",
    "as_point",
    "simplex_measure",
    "DegenerateSimplexError",
]


def as_fraction(x):
    """Convert a number to an exact Fraction (floats convert exactly)."""
    if isinstance(x, Fraction):
        return x
    if isinstance(x, (int, np.integer)):
        return Fraction(int(x))
    if isinstance(x, (float, np.floating)):
        return Fraction(float(x))
    raise TypeError(f"cannot convert {type(x)!r} to Fraction")


def as_point(coords):
    return tuple(as_fraction(c) for c in coords)


class DegenerateSimplexError(ValueError):
    """Raised when a simplex with zero measure is constructed."""


# ---------------------------------------------------------------------------
# exact linear algebra on small rational systems


def fraction_det(rows):
    """Exact determinant of a small square matrix of Fractions."""
    n = len(rows)
    if n == 1:
        return rows[0][0]
    if n == 2:
        return rows[0][0] * rows[1][1] - rows[0][1] * rows[1][0]
    if n == 3:
        a, b, c = rows[0]
        d, e, f = rows[1]
        g, h, i = rows[2]
        return a * (e * i - f * h) - b * (d * i - f * g) + c * (d * h - e * g)
    # fraction-free Gaussian elimination for the general case
    m = [list(r) for r in rows]
    sign = 1
    for col in range(n):
        piv = next((r for r in range(col, n) if m[r][col] != 0), None)
        if piv is None:
            return Fraction(0)
        if piv != col:
            m[col], m[piv] = m[piv], m[col]
            sign = -sign
        for r in range(col + 1, n):
            factor = m[r][col] / m[col][col]
            for c in range(col, n):
                m[r][c] -= factor * m[col][c]
    det = Fraction(sign)
    for i in range(n):
        det *= m[i][i]
    return det


def barycentric_coordinates(point, vertices):
    """Exact barycentric coordinates of ``point`` w.r.t. a d-simplex.

    Returns a tuple of d+1 Fractions summing to one; all nonnegative iff
    the point lies in the closed simplex.
    """
    d = len(vertices) - 1
    v0 = vertices[0]
    if d == 0:
        return (Fraction(1),)
    cols = [[vertices[j + 1][i] - v0[i] for j in range(d)] for i in range(d)]
    rhs = [point[i] - v0[i] for i in range(d)]
    denom = fraction_det(cols)
    if denom == 0:
        raise DegenerateSimplexError("degenerate simplex in barycentric solve")
    lams = []
    for j in range(d):
        mod = [row[:] for row in cols]
        for i in range(d):
            mod[i][j] = rhs[i]
        lams.append(fraction_det(mod) / denom)
    lam0 = Fraction(1) - sum(lams)
    return (lam0, *lams)


def point_in_simplex(point, vertices, closed=True):
    """Exact containment test of a rational point in a simplex."""
    lams = barycentric_coordinates(point, vertices)
    if closed:
        return all(l >= 0 for l in lams)
    return all(l > 0 for l in lams)


def simplex_measure(vertices):
    """Exact d-measure of a simplex given as d+1 rational points."""
    d = len(vertices) - 1
    if d == 0:
        return Fraction(1)
    v0 = vertices[0]
    rows = [[vertices[j + 1][i] - v0[i] for i in range(d)] for j in range(d)]
    return abs(fraction_det(rows)) / math.factorial(d)


def simplex_diameter(vertices):
    pts = np.array([[float(c) for c in v] for v in vertices])
    best = 0.0
    for i in range(len(pts)):
        for j in range(i + 1, len(pts)):
            best = max(best, float(np.linalg.norm(pts[i] - pts[j])))
    return best


def _facet_measure(pts):
    """(k-1)-measure of a facet given as k float points, via the Gram matrix."""
    k = len(pts) - 1
    if k == 0:
        return 1.0
    e = pts[1:] - pts[0]
    gram = e @ e.T
    val = float(np.linalg.det(gram))
    return math.sqrt(max(val, 0.0)) / math.factorial(k)


def simplex_inradius(vertices):
    """Inradius of a d-simplex: d*|S| / (sum of facet (d-1)-measures)."""
    d = len(vertices) - 1
    pts = np.array([[float(c) for c in v] for v in vertices])
    if d == 1:
        return abs(pts[1, 0] - pts[0, 0]) / 2.0
    vol = float(simplex_measure(vertices))
    surf = 0.0
    for drop in range(d + 1):
        facet = np.delete(pts, drop, axis=0)
        surf += _facet_measure(facet)
    return d * vol / surf


# ---------------------------------------------------------------------------
# domain types


@dataclass(frozen=True)
class TimeInterval:
    """A half-open (or right-closed) dyadic time interval in the forest."""

    lo: Fraction
    hi: Fraction
    right_closed: bool = False
    level: int = 0
    id: int = -1
    parent: int = -1

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError(f"empty interval [{self.lo}, {self.hi})")

    @property
    def length(self):
        return self.hi - self.lo

    @property
    def midpoint(self):
        return (self.lo + self.hi) / 2

    def contains(self, t):
        """Half-open membership; the right endpoint belongs iff right_closed."""
        if self.right_closed:
            return self.lo <= t <= self.hi
        return self.lo <= t < self.hi

    def closure_contains(self, t):
        return self.lo <= t <= self.hi

    def float_bounds(self):
        return float(self.lo), float(self.hi)


@dataclass(frozen=True)
class TaggedSimplex:
    """A d-simplex with a Maubach bisection tag.

    ``vertices`` is an ordered tuple of d+1 rational points; the refinement
    edge is the segment from vertex 0 to vertex ``tag``.
    """

    vertices: tuple
    tag: int
    level: int = 0
    id: int = -1
    parent: int = -1
    measure: Fraction = None

    def __post_init__(self):
        d = self.dim
        if not 1 <= self.tag <= d:
            raise ValueError(f"tag {self.tag} outside [1, {d}]")
        if self.measure is None:
            object.__setattr__(self, "measure", simplex_measure(self.vertices))
        if self.measure <= 0:
            raise DegenerateSimplexError("zero-measure simplex rejected")

    @property
    def dim(self):
        return len(self.vertices) - 1

    @property
    def diameter(self):
        return simplex_diameter(self.vertices)

    def closure_contains(self, point):
        return point_in_simplex(point, self.vertices, closed=True)


@dataclass(frozen=True)
class Prism:
    """Product cell I x S; its level is the level of the spatial simplex."""

    interval_id: int
    simplex_id: int
    level: int
    id: int = -1
    parent: int = -1


@dataclass(frozen=True)
class AnisotropyParams:
    """Anisotropy parameters (s1, s2) and the spatial dimension d.

    ``ratio`` is the exact value s2 / (s1 * d) used by the atomic split to
    choose the number of temporal bisections per spatial bisection.
    """

    s1: float
    s2: float
    d: int

    def __post_init__(self):
        if self.s1 <= 0 or self.s2 <= 0:
            raise ValueError("s1, s2 must be positive")
        if self.d < 1:
            raise ValueError("d must be at least 1")

    @property
    def ratio(self):
        return as_fraction(self.s2) / (as_fraction(self.s1) * self.d)

    @property
    def rate_exponent(self):
        """Approximation rate exponent 1 / (1/s1 + d/s2)."""
        return 1.0 / (1.0 / self.s1 + self.d / self.s2)

    def interval_level(self, n):
        """Temporal level after n atomic splits of a tensor root: ceil(n*ratio)."""
        return math.ceil(n * self.ratio)

    def temporal_bisections(self, n):
        """Number m of temporal bisections in the atomic split to level n."""
        return self.interval_level(n) - self.interval_level(n - 1)


# ---------------------------------------------------------------------------
# bisection primitives


def bisect_interval(interval, ids=(-1, -1)):
    """Bisect a time interval at its midpoint.

    The left child is always right-open; the right child inherits the
    parent's right-closed flag, so any family of intervals generated from a
    disjoint partition stays pairwise disjoint.
    """
    mid = interval.midpoint
    left = TimeInterval(interval.lo, mid, False, interval.level + 1,
                        ids[0], interval.id)
    right = TimeInterval(mid, interval.hi, interval.right_closed,
                         interval.level + 1, ids[1], interval.id)
    return left, right


def refinement_edge(simplex):
    """Endpoints (as points) of the edge bisected next."""
    return simplex.vertices[0], simplex.vertices[simplex.tag]


def bisect_simplex(simplex, ids=(-1, -1)):
    """Bisect a tagged simplex at the midpoint of its refinement edge.

    Children have half the measure, union equal to the parent, and tags
    following the Maubach rule (tag-1 if tag>1, else d).
    """
    d = simplex.dim
    tag = simplex.tag
    verts = simplex.vertices
    a, b = verts[0], verts[tag]
    z = tuple((ai + bi) / 2 for ai, bi in zip(a, b))
    child_tag = tag - 1 if tag > 1 else d
    v1 = verts[:tag] + (z,) + verts[tag + 1:]
    v2 = verts[1:tag + 1] + (z,) + verts[tag + 1:]
    half = simplex.measure / 2
    c1 = TaggedSimplex(v1, child_tag, simplex.level + 1, ids[0], simplex.id, half)
    c2 = TaggedSimplex(v2, child_tag, simplex.level + 1, ids[1], simplex.id, half)
    return c1, c2


def simplex_shape(simplex):
    """Shape-regularity constant diam(S)/inradius(S)."""
    verts = simplex.vertices if isinstance(simplex, TaggedSimplex) else simplex
    rho = simplex_inradius(verts)
    if rho <= 0:
        raise DegenerateSimplexError("degenerate simplex has no inradius")
    return simplex_diameter(verts) / rho


def similarity_fingerprint(simplex):
    """Congruence-modulo-scaling fingerprint: sorted squared edge length ratios.

    Together with the tag this identifies the similarity class of a
    simplex exactly (edge lengths squared are rational).
    """
    verts = simplex.vertices
    sq = []
    for i in range(len(verts)):
        for j in range(i + 1, len(verts)):
            sq.append(sum((verts[i][k] - verts[j][k]) ** 2
                          for k in range(len(verts[0]))))
    smallest = min(sq)
    return (simplex.tag,) + tuple(sorted(s / smallest for s in sq))


def descendant_classes(simplex, depth):
    """All similarity fingerprints among descendants up to a given depth."""
    classes = {similarity_fingerprint(simplex)}
    frontier = [simplex]
    for _ in range(depth):
        nxt = []
        for s in frontier:
            for c in bisect_simplex(s):
                classes.add(similarity_fingerprint(c))
                nxt.append(c)
        frontier = nxt
    return classes


def _descendant_kappa_bound(simplex, depth):
    """Max shape constant over descendants up to depth (one per class)."""
    seen = {}
    frontier = [simplex]
    seen[similarity_fingerprint(simplex)] = simplex_shape(simplex)
    for _ in range(depth):
        nxt = []
        for s in frontier:
            for c in bisect_simplex(s):
                fp = similarity_fingerprint(c)
                if fp not in seen:
                    seen[fp] = simplex_shape(c)
                    nxt.append(c)
                else:
                    nxt.append(c)
        frontier = nxt
    return max(seen.values())


_UNIT_BALL_VOLUME = {}


def unit_ball_volume(d):
    if d not in _UNIT_BALL_VOLUME:
        _UNIT_BALL_VOLUME[d] = math.pi ** (d / 2) / math.gamma(d / 2 + 1)
    return _UNIT_BALL_VOLUME[d]


def level_size_bounds(level, roots, params):
    """Diameter bracket for a prism of the given level.

    ``roots`` is a sequence of (TimeInterval, TaggedSimplex) tensor roots.
    Returns (lower, upper) with

        lower = c * 2^(-max(s2/s1,1) * level / d)
        upper = C * 2^(-min(s2/s1,1) * level / d)

    where c and C are computed from the root sizes and the measured shape
    constant of the root similarity classes.  Any prism generated from the
    roots by atomic splits has its diameter inside the bracket.
    """
    d = params.d
    ratio = params.s2 / params.s1
    diam_i = []
    lower_i = []
    upper_s = []
    lower_s = []
    for interval, simplex in roots:
        leni = float(interval.length)
        diam_i.append(leni)
        lower_i.append(leni / 2.0)
        kappa_star = _descendant_kappa_bound(simplex, 2 * d)
        meas = float(simplex.measure)
        upper_s.append(kappa_star * (meas / unit_ball_volume(d)) ** (1.0 / d))
        lower_s.append((math.factorial(d) * meas) ** (1.0 / d))
    c = min(min(lower_i), min(lower_s))
    big_c = math.sqrt(max(diam_i) ** 2 + max(upper_s) ** 2)
    lower = c * 2.0 ** (-max(ratio, 1.0) * level / d)
    upper = big_c * 2.0 ** (-min(ratio, 1.0) * level / d)
    return lower, upper


# ---------------------------------------------------------------------------
# well-labeled initial meshes


def kuhn_simplices_of_cell(corner, widths, flips, d):
    """Kuhn triangulation (d! simplices, tag d) of one box cell.

    ``flips`` reflects the local coordinates per axis; using the parity of
    the cell index makes neighboring cells mirror images, which keeps the
    triangulation conforming under uniform bisection.
    """
    out = []
    for perm in permutations(range(d)):
        verts = []
        local = [Fraction(0)] * d
        verts.append(tuple(local))
        for axis in perm:
            local = local[:]
            local[axis] += 1
            verts.append(tuple(local))
        mapped = []
        for v in verts:
            coords = []
            for k in range(d):
                u = 1 - v[k] if flips[k] else v[k]
                coords.append(corner[k] + u * widths[k])
            mapped.append(tuple(coords))
        out.append(TaggedSimplex(tuple(mapped), tag=d, level=0))
    return out


def kuhn_box_mesh(lows, highs, divisions):
    """Kuhn-triangulated box complex: a well-labeled initial triangulation.

    Parameters
    ----------
    lows, highs : sequences of length d with the box bounds.
    divisions : per-axis cell counts.

    Returns a list of level-0 tagged simplices (tag d) whose reflected
    per-cell Kuhn triangulations satisfy the matching condition needed by
    the d-dimensional bisection routine.
    """
    d = len(lows)
    lows = as_point(lows)
    highs = as_point(highs)
    if isinstance(divisions, int):
        divisions = (divisions,) * d
    widths = [(highs[k] - lows[k]) / divisions[k] for k in range(d)]
    simplices = []
    idx = [0] * d
    while True:
        corner = tuple(lows[k] + idx[k] * widths[k] for k in range(d))
        flips = [idx[k] % 2 == 1 for k in range(d)]
        simplices.extend(kuhn_simplices_of_cell(corner, widths, flips, d))
        k = 0
        while k < d:
            idx[k] += 1
            if idx[k] < divisions[k]:
                break
            idx[k] = 0
            k += 1
        if k == d:
            break
    return simplices


def spatial_conformity_ok(simplices):
    """Facet-count conformity test for a list of simplices tiling a domain.

    Every interior facet must be shared by exactly two simplices; facets
    seen once must lie on the boundary of the union.  Works with exact
    vertex coordinates, so no tolerances are involved.
    """
    d = simplices[0].dim
    if d == 1:
        counts = {}
        for s in simplices:
            for v in s.vertices:
                counts[v] = counts.get(v, 0) + 1
        singles = [v for v, c in counts.items() if c == 1]
        return all(c <= 2 for c in counts.values()) and len(singles) == 2
    counts = {}
    for s in simplices:
        verts = s.vertices
        for drop in range(d + 1):
            key = tuple(sorted(verts[:drop] + verts[drop + 1:]))
            counts[key] = counts.get(key, 0) + 1
    if any(c > 2 for c in counts.values()):
        return False
    # facets seen once must tile the boundary: check by (d-1)-measure
    boundary = [k for k, c in counts.items() if c == 1]
    total = sum(_facet_measure(np.array([[float(c) for c in v] for v in k]))
                for k in boundary)
    hull_surface = _box_like_surface(simplices)
    if hull_surface is None:
        return True
    return abs(total - hull_surface) <= 1e-9 * max(hull_surface, 1.0)


def _box_like_surface(simplices):
    """Surface measure of the bounding box if the union fills it, else None."""
    d = simplices[0].dim
    pts = [v for s in simplices for v in s.vertices]
    lo = [min(p[k] for p in pts) for k in range(d)]
    hi = [max(p[k] for p in pts) for k in range(d)]
    box = Fraction(1)
    for k in range(d):
        box *= hi[k] - lo[k]
    vol = sum(s.measure for s in simplices)
    if vol != box:
        return None
    surf = 0.0
    for k in range(d):
        face = Fraction(1)
        for j in range(d):
            if j != k:
                face *= hi[j] - lo[j]
        surf += 2.0 * float(face)
    return surf


def uniform_refinement_conformity(simplices, rounds):
    """Check that conformity survives ``rounds`` of uniform bisection.

    This is the runtime substitute for a static well-labeledness proof of a
    user-provided initial triangulation.
    """
    current = list(simplices)
    if not spatial_conformity_ok(current):
        return False
    for _ in range(rounds):
        current = [c for s in current for c in bisect_simplex(s)]
        if not spatial_conformity_ok(current):
            return False
    return True
