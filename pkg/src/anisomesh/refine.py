"""Refinement algorithms: atomic split, patch refinement, marked refinement.

The atomic split replaces one prism by its spatial bisection crossed with
m temporal bisections, m chosen from the anisotropy ratio.  Patch
refinement recursively refines coarser necessary neighbors first so that
spatial conformity and the 1-irregular rules survive, and it never creates
an element more than one level above the marked prism.  Marked refinement
drives patch refinement from a marking callback and keeps a complexity
ledger.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .mesh import necessary_neighbors, neighbors_space

__all__ = [
    "RefinementLedger",
    "atomic_split",
    "patch_refine",
    "marked_refine",
    "uniform_refine",
    "creation_distance_check",
    "prism_distance",
]


@dataclass
class RefinementLedger:
    """Per-round complexity accounting of a marked-refinement run."""

    marked: list = field(default_factory=list)         # #M_k per round
    leaf_counts: list = field(default_factory=list)    # #P_k after round k
    splits_cum: list = field(default_factory=list)     # cumulative atomic splits
    max_levels: list = field(default_factory=list)     # max level after round k
    initial_leaves: int = 0
    status: str = "ok"

    @property
    def rounds(self):
        return len(self.marked)

    @property
    def atomic_splits(self):
        return self.splits_cum[-1] if self.splits_cum else 0

    @property
    def max_level(self):
        return self.max_levels[-1] if self.max_levels else 0

    def cumulative_marked(self):
        out, acc = [], 0
        for m in self.marked:
            acc += m
            out.append(acc)
        return out

    def growth_ratios(self):
        """(#P_k - #P_0) / sum #M_{i-1}: the complexity-bound statistic."""
        out = []
        for leaves, cum in zip(self.leaf_counts, self.cumulative_marked()):
            out.append((leaves - self.initial_leaves) / cum if cum else 0.0)
        return out

    def csv_rows(self):
        rows = ["round,marked,leaves,atomic_splits,max_level"]
        for k in range(self.rounds):
            rows.append(f"{k + 1},{self.marked[k]},{self.leaf_counts[k]},"
                        f"{self.splits_cum[k]},{self.max_levels[k]}")
        return rows


def atomic_split(part, pid, events=None):
    """Split one leaf prism: 2^(m+1) children replace it; returns child ids.

    m satisfies 0 <= m <= ceil(s2/(s1 d)) + 2 and telescopes so that the
    temporal level of a prism of level n is ceil(n * s2/(s1 d)).
    """
    children = part.split_leaf(pid)
    if events is not None:
        events.append((pid, tuple(children)))
    return children


def patch_refine(part, pid, events=None, call_log=None):
    """Refine a leaf prism while preserving the mesh invariants.

    Collects the patch of elements that must be split together: same-level
    necessary neighbors join the patch, strictly coarser ones are refined
    first by a recursive call, after which the freshly created children of
    a spatial neighbor are re-examined.  The input partition must be
    conforming in space and 1-irregular in time (and in space for d=1);
    the output is again such a partition, uses the minimum number of atomic
    splits, and every newly created element has level <= level(marked)+1.

    ``events`` collects (split prism, children) pairs across all nested
    calls; ``call_log`` records (target, created ids) per call for the
    distance instrumentation.  The partition is mutated in place and
    returned.
    """
    if pid not in part.leaves:
        raise ValueError(f"prism {pid} is not a leaf")
    level = part.level_of(pid)
    patch = []          # K: elements to split at the end, insertion ordered
    patch_set = set()
    front = [pid]       # F: elements under consideration
    front_set = {pid}
    while front:
        new_front = []
        new_front_set = set()
        for cur in front:
            # the recursion below mutates the mesh, so whenever it fires we
            # re-scan the (current) neighbor set of ``cur`` from scratch
            rescan = True
            while rescan:
                rescan = False
                excluded = patch_set | front_set | new_front_set
                for nb in sorted(necessary_neighbors(part, cur) - excluded):
                    if part.level_of(nb) == part.level_of(cur):
                        new_front.append(nb)
                        new_front_set.add(nb)
                    else:
                        was_spatial = nb in neighbors_space(part, cur)
                        patch_refine(part, nb, events, call_log)
                        if was_spatial:
                            lives = necessary_neighbors(part, cur)
                            for child in part.prism_children[nb]:
                                if (child in lives
                                        and child in part.leaves
                                        and child not in new_front_set
                                        and child not in patch_set
                                        and child not in front_set):
                                    new_front.append(child)
                                    new_front_set.add(child)
                        rescan = True
                        break
        patch.extend(front)
        patch_set |= front_set
        front = new_front
        front_set = new_front_set
    created = []
    for cur in sorted(patch):
        if cur not in part.leaves:
            raise AssertionError(f"patch element {cur} was refined early")
        children = atomic_split(part, cur, events)
        created.extend(children)
        for child in children:
            if part.level_of(child) > level + 1:
                raise AssertionError("created level exceeds marked level + 1")
    if call_log is not None:
        call_log.append((pid, created))
    return part


def uniform_refine(part, events=None):
    """Atomically split every current leaf (one all-mark round).

    Equivalent to patch-refining each leaf of a uniform-compatible mesh but
    without neighbor queries; uniform refinement of a valid partition stays
    valid.
    """
    for pid in sorted(part.leaves):
        atomic_split(part, pid, events)
    return part


def marked_refine(part, mark, max_rounds=100, ledger=None, events=None,
                  call_log=None):
    """Loop: mark leaves, patch-refine each one still present, repeat.

    ``mark`` maps the partition to a set of prism ids; marked ids that are
    no longer leaves when their turn comes are skipped.  Stops when the
    marking comes back empty, or after ``max_rounds`` with the ledger
    status set to "budget-exhausted".
    """
    if ledger is None:
        ledger = RefinementLedger()
    ledger.initial_leaves = len(part.leaves)
    events = events if events is not None else []
    for _ in range(max_rounds):
        marked = sorted(mark(part))
        if not marked:
            return part, ledger
        for pid in marked:
            if pid in part.leaves:  # else already refined earlier this round
                patch_refine(part, pid, events, call_log)
        ledger.marked.append(len(marked))
        ledger.leaf_counts.append(len(part.leaves))
        ledger.splits_cum.append(len(events))
        ledger.max_levels.append(part.max_level())
    ledger.status = "budget-exhausted"
    return part, ledger


# ---------------------------------------------------------------------------
# distance instrumentation


def _segment_point_distance(p, a, b):
    ab = b - a
    denom = float(ab @ ab)
    t = 0.0 if denom == 0 else float((p - a) @ ab) / denom
    t = min(1.0, max(0.0, t))
    return float(np.linalg.norm(p - (a + t * ab)))


def _simplex_distance(verts_a, verts_b, d):
    """Distance between two closed simplices (d <= 2)."""
    pa = np.array([[float(c) for c in v] for v in verts_a])
    pb = np.array([[float(c) for c in v] for v in verts_b])
    if d == 1:
        lo_a, hi_a = pa.min(), pa.max()
        lo_b, hi_b = pb.min(), pb.max()
        return max(0.0, max(lo_a, lo_b) - min(hi_a, hi_b))
    from .mesh import triangle_intersection
    if triangle_intersection(tuple(map(tuple, verts_a)),
                             tuple(map(tuple, verts_b))):
        return 0.0
    best = math.inf
    edges_a = [(pa[i], pa[j]) for i in range(3) for j in range(i + 1, 3)]
    edges_b = [(pb[i], pb[j]) for i in range(3) for j in range(i + 1, 3)]
    for p in pa:
        for a, b in edges_b:
            best = min(best, _segment_point_distance(p, a, b))
    for p in pb:
        for a, b in edges_a:
            best = min(best, _segment_point_distance(p, a, b))
    return best


def prism_distance(part, pa, pb):
    """Euclidean distance between the closures of two prisms."""
    ia, ib = part.interval_of(pa), part.interval_of(pb)
    dt = max(0.0, float(max(ia.lo, ib.lo) - min(ia.hi, ib.hi)))
    dx = _simplex_distance(part.simplex_of(pa).vertices,
                           part.simplex_of(pb).vertices, part.d)
    return math.hypot(dt, dx)


def creation_distance_check(part, refined, created):
    """Distance bound between the refined prism and a created one.

    The bound is C * 2^e * sum_{k=l(created)}^{l(refined)} 2^(-k e) with
    e = min(s2/s1, 1)/d and C the upper constant of the level/size
    bracket.  Returns (ok, distance, bound).
    """
    params = part.params
    e = min(params.s2 / params.s1, 1.0) / params.d
    _, upper0 = part.level_size_bounds(refined)
    big_c = upper0 * 2.0 ** (min(params.s2 / params.s1, 1.0)
                             * part.level_of(refined) / params.d)
    lc, lr = part.level_of(created), part.level_of(refined)
    total = sum(2.0 ** (-k * e) for k in range(min(lc, lr), lr + 1))
    bound = big_c * 2.0 ** e * total
    dist = prism_distance(part, refined, created)
    return dist <= bound * (1 + 1e-9), dist, bound
