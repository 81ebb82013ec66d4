"""Greedy adaptive refinement and the rate/complexity study harnesses.

The greedy driver marks every leaf whose local indicator exceeds a
threshold and patch-refines the marked set until the marking empties (or a
budget trips).  Indicator values are cached per leaf and invalidated when
any member of the leaf's cylindric closure is refined, which keeps each
round's cost proportional to the refined region.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .besov import mark_indicator, whitney_indicator
from .element import PolyOrders
from .mesh import validate
from .nodes import classify
from .polyapprox import NormParams, global_error, quasi_interpolate
from .refine import RefinementLedger, patch_refine, uniform_refine

__all__ = [
    "AdaptResult",
    "RateStudy",
    "greedy_adapt",
    "rate_study",
    "complexity_study",
    "POLICIES",
]


@dataclass
class AdaptResult:
    partition: object
    fe: object
    ledger: RefinementLedger
    error_lp: float
    delta: float
    records: dict = field(default_factory=dict)


class _IndicatorCache:
    """Leaf indicator cache invalidated through closure membership."""

    def __init__(self):
        self.values = {}      # pid -> (members, value)
        self.dependents = {}  # member pid -> set of cache owners

    def get(self, pid):
        hit = self.values.get(pid)
        return hit[1] if hit else None

    def put(self, pid, members, value):
        self.values[pid] = (members, value)
        for m in members:
            self.dependents.setdefault(m, set()).add(pid)

    def invalidate_member(self, pid):
        for owner in self.dependents.pop(pid, ()):
            self.values.pop(owner, None)
        self.values.pop(pid, None)


def greedy_adapt(part, f, orders, norm_params, mode="whitney", delta=1e-3,
                 oracle=None, max_rounds=60, max_leaves=200_000,
                 max_level=40, rho=None, validate_result=False,
                 indicator_degree=None):
    """Threshold-greedy refinement followed by quasi-interpolation.

    Marks leaves with indicator > delta each round until no leaf qualifies.
    Reports "budget-exhausted" if the leaf, level, or round budget trips
    before the marking empties.  Returns an AdaptResult with the final
    partition, the quasi-interpolant, the complexity ledger and the L_p
    error.
    """
    if delta <= 0:
        raise ValueError("threshold delta must be positive")
    norm_params = norm_params if rho is None else NormParams(
        norm_params.p, rho, norm_params.q)
    ledger = RefinementLedger()
    ledger.initial_leaves = len(part.leaves)
    events = []
    cache = _IndicatorCache()
    for _ in range(max_rounds):
        marked = []
        for pid in sorted(part.leaves):
            val = cache.get(pid)
            if val is None:
                if mode == "whitney":
                    members, val = whitney_indicator(part, f, pid,
                                                     norm_params.p, orders,
                                                     degree=indicator_degree)
                else:
                    val = mark_indicator(part, f, pid, mode, norm_params,
                                         orders, oracle=oracle)
                    members = (pid,)
                cache.put(pid, members, val)
            if val > delta:
                marked.append(pid)
        if not marked:
            break
        before = len(events)
        for pid in marked:
            if pid in part.leaves:
                patch_refine(part, pid, events)
        for parent, _children in events[before:]:
            cache.invalidate_member(parent)
        ledger.marked.append(len(marked))
        ledger.leaf_counts.append(len(part.leaves))
        ledger.splits_cum.append(len(events))
        ledger.max_levels.append(part.max_level())
        if len(part.leaves) > max_leaves or part.max_level() >= max_level:
            ledger.status = "budget-exhausted"
            break
    else:
        ledger.status = "budget-exhausted"
    if validate_result:
        rep = validate(part)
        if not rep.ok:
            raise AssertionError(f"greedy result invalid: {rep.violations[:3]}")
    lattice = classify(part, orders)
    fe, records = quasi_interpolate(part, f, norm_params, orders, lattice)
    err = global_error(part, f, fe, norm_params.p, orders)
    return AdaptResult(part, fe, ledger, err, delta, records)


@dataclass
class RateStudy:
    """Log-log error-vs-size data of a greedy campaign plus the fit."""

    rows: list               # dicts: delta, leaves, new_cells, error, seconds
    slope: float
    intercept: float
    r2: float
    target_slope: float
    uniform_rows: list = field(default_factory=list)
    uniform_slope: float = math.nan

    def csv_rows(self):
        out = ["delta,leaves,new_cells,error_lp,seconds"]
        for r in self.rows:
            out.append(f"{r['delta']:.17g},{r['leaves']},{r['new_cells']},"
                       f"{r['error']:.17g},{r['seconds']:.3f}")
        return out


def _loglog_fit(sizes, errors):
    x = np.log10(np.asarray(sizes, dtype=float))
    y = np.log10(np.asarray(errors, dtype=float))
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = ((y - y.mean()) ** 2).sum()
    r2 = 1.0 - (resid ** 2).sum() / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(intercept), float(r2)


def rate_study(make_initial, f, orders, norm_params, deltas, mode="whitney",
               oracle=None, max_leaves=200_000, uniform_levels=0,
               min_cells=1, indicator_degree=None):
    """Greedy runs over a threshold schedule and the log-log rate fit.

    Each threshold gets a fresh partition; the slope of log10(error)
    against log10(#P - #P_0) is fitted over runs that actually refined.
    ``uniform_levels`` > 0 adds the uniform-ladder comparison curve.
    """
    if len(deltas) < 6:
        raise ValueError("need a schedule of at least 6 thresholds")
    rows = []
    for delta in deltas:
        part = make_initial()
        t0 = time.time()
        res = greedy_adapt(part, f, orders, norm_params, mode=mode,
                           delta=delta, oracle=oracle, max_leaves=max_leaves,
                           indicator_degree=indicator_degree)
        rows.append(dict(delta=delta, leaves=len(part.leaves),
                         new_cells=len(part.leaves) - res.ledger.initial_leaves,
                         error=res.error_lp, seconds=time.time() - t0,
                         status=res.ledger.status))
    fit_rows = [r for r in rows if r["new_cells"] >= min_cells
                and r["error"] > 0]
    if len(fit_rows) < 3:
        raise RuntimeError("fewer than 3 successful runs; study invalid")
    slope, intercept, r2 = _loglog_fit([r["new_cells"] for r in fit_rows],
                                       [r["error"] for r in fit_rows])
    part0 = make_initial()
    target = -part0.params.rate_exponent
    study = RateStudy(rows, slope, intercept, r2, target)
    if uniform_levels:
        part = make_initial()
        urows = []
        for n in range(uniform_levels + 1):
            lattice = classify(part, orders)
            fe, _ = quasi_interpolate(part, f, norm_params, orders, lattice)
            err = global_error(part, f, fe, norm_params.p, orders)
            urows.append(dict(level=n, leaves=len(part.leaves), error=err,
                              new_cells=len(part.leaves) - len(part0.leaves)))
            if n < uniform_levels:
                uniform_refine(part)
        study.uniform_rows = urows
        ufit = [r for r in urows if r["new_cells"] >= 1 and r["error"] > 0]
        study.uniform_slope = _loglog_fit([r["new_cells"] for r in ufit],
                                          [r["error"] for r in ufit])[0]
    return study


# ---------------------------------------------------------------------------
# scripted marking policies for complexity studies


def _policy_all(part, rng):
    return set(part.leaves)


def _policy_random(fraction):
    def mark(part, rng):
        leaves = sorted(part.leaves)
        k = max(1, int(fraction * len(leaves)))
        idx = rng.choice(len(leaves), size=k, replace=False)
        return {leaves[i] for i in idx}
    return mark


def _policy_corner(part, rng):
    """Chase the prism containing the latest space-time corner."""
    t0, t1 = part.time_range
    from .geometry import as_point
    best = None
    for pid in sorted(part.leaves):
        iv = part.interval_of(pid)
        if not iv.closure_contains(t1):
            continue
        verts = part.float_vertices(part.prisms[pid].simplex_id)
        if best is None or verts.max() >= best[1]:
            best = (pid, verts.max())
    return {best[0]}


def _policy_band(part, rng):
    """Mark leaves whose interval touches the initial time t = t0."""
    t0, _ = part.time_range
    return {pid for pid in part.leaves
            if part.interval_of(pid).closure_contains(t0)}


def _policy_coarsest(part, rng):
    lmin = min(part.level_of(p) for p in part.leaves)
    return {p for p in part.leaves if part.level_of(p) == lmin}


POLICIES = {
    "all": _policy_all,
    "random10": _policy_random(0.10),
    "random30": _policy_random(0.30),
    "corner": _policy_corner,
    "band": _policy_band,
    "coarsest": _policy_coarsest,
}


def complexity_study(make_initial, policy, rounds, seed=0):
    """Run a scripted marking policy and report the growth-ratio series.

    Returns (ledger, ratios) where ratios[k] = (#P_k - #P_0) / sum #M; the
    complexity bound says the series stays bounded, so its late-round
    stability is the reported statistic.
    """
    if rounds < 1:
        raise ValueError("need at least one round")
    part = make_initial()
    rng = np.random.default_rng(seed)
    mark = POLICIES[policy] if isinstance(policy, str) else policy
    from .refine import marked_refine
    countdown = [rounds]

    def mark_cb(p):
        if countdown[0] <= 0:
            return set()
        countdown[0] -= 1
        return mark(p, rng)

    part, ledger = marked_refine(part, mark_cb, max_rounds=rounds + 1)
    return part, ledger, ledger.growth_ratios()
