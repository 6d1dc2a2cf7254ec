"""Exact discrete W1 transport under the anisotropic metric L|dx| + |da|.

The solver is a transportation LP on the bipartite atom graph, solved by
HiGHS through scipy.  Small instances get the full column set; larger ones
go through column generation seeded with a feasible northwest-corner tree
plus metric nearest neighbours, with a full reduced-cost sweep at the end,
so the returned plan is exact (certified by the dual), not approximate.

A fact used throughout: the W1 functional with a metric cost depends on
the two measures only through their difference, so any mass the two sides
hold at identical atoms can be cancelled before solving.  building blocks
exploit this to keep atom counts near the moving interface instead of the
whole cylinder.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.optimize import linprog
from scipy.spatial import cKDTree

from eikolab.fields import GeometryError, LiftedField
from eikolab.kinetic import entropy_measure, nu_projection
from eikolab.measures import DiscreteMeasure


class UnbalancedInputError(ValueError):
    """w1_plan got measures of different total mass; trim first."""


class InvalidPotentialError(ValueError):
    """Candidate dual potential violates the Lipschitz constraint.

    Carries .witness = (index_p, index_q, |psi_p - psi_q| - d(p, q)) over
    the concatenated (mu1 atoms, mu2 atoms) indexing.
    """

    def __init__(self, msg, witness):
        super().__init__(msg)
        self.witness = witness


@dataclass(frozen=True)
class AnisotropicMetric:
    """d((x1,a1),(x2,a2)) = L |x1 - x2| + |a1 - a2|, Euclidean in x."""

    L: float

    def __post_init__(self):
        if not self.L > 0.0:
            raise ValueError("horizontal scaling L must be positive")

    def pairwise(self, P: np.ndarray, Q: np.ndarray) -> np.ndarray:
        P = np.atleast_2d(P)
        Q = np.atleast_2d(Q)
        dx = P[:, None, 0] - Q[None, :, 0]
        dy = P[:, None, 1] - Q[None, :, 1]
        da = P[:, None, 2] - Q[None, :, 2]
        return self.L * np.hypot(dx, dy) + np.abs(da)

    def between(self, p, q) -> float:
        p = np.asarray(p, dtype=float)
        q = np.asarray(q, dtype=float)
        return float(self.L * math.hypot(p[0] - q[0], p[1] - q[1]) + abs(p[2] - q[2]))


@dataclass(frozen=True)
class TransportPlan:
    """Sparse coupling: pairs (src[k], dst[k]) carrying mass[k].

    cost is recomputed as sum(mass * distance) with pairs sorted by
    (src, dst), so identical inputs give bit-identical costs.  dual holds
    the per-atom LP potentials (u, v) with u_i + v_j <= d_ij everywhere
    and equality on the support; NaN marks atoms absent from the solve.
    """

    src: np.ndarray
    dst: np.ndarray
    mass: np.ndarray
    cost: float
    dual: tuple = field(default=None, compare=False)

    def __len__(self):
        return self.src.shape[0]

    def marginals(self, n1: int, n2: int):
        m1 = np.bincount(self.src, weights=self.mass, minlength=n1)
        m2 = np.bincount(self.dst, weights=self.mass, minlength=n2)
        return m1, m2


@dataclass(frozen=True)
class TransportStep:
    """One dyadic building block: trimmed endpoints, plan, and budget."""

    n: int
    t_bar: float
    epsilon: float
    L: float
    rho1: DiscreteMeasure
    rho2: DiscreteMeasure
    plan: TransportPlan
    bound: float
    nu_ball: float = 0.0
    trimmed_mass: float = 0.0
    side: str = "hypo"
    bins: int = 0
    sub: int = 0
    mu1: DiscreteMeasure | None = field(default=None, compare=False)
    mu2: DiscreteMeasure | None = field(default=None, compare=False)
    residual1: DiscreteMeasure | None = field(default=None, compare=False)
    residual2: DiscreteMeasure | None = field(default=None, compare=False)


_DENSE_LIMIT = 250_000


def _solve_restricted(dist_fn, ci, cj, w1, w2):
    """Solve the transportation LP restricted to columns (ci, cj)."""
    n1, n2 = w1.size, w2.size
    m = ci.size
    cost_vec = dist_fn(ci, cj)
    rows = np.concatenate([ci, n1 + cj])
    cols = np.concatenate([np.arange(m), np.arange(m)])
    A = sparse.csc_matrix(
        (np.ones(2 * m), (rows, cols)), shape=(n1 + n2, m)
    )
    b = np.concatenate([w1, w2])
    res = linprog(cost_vec, A_eq=A, b_eq=b, method="highs")
    if res.status != 0:
        raise RuntimeError("transport LP failed: %s" % res.message)
    y = res.eqlin.marginals
    return res.x, cost_vec, y[:n1], y[n1:]


def _nw_corner_columns(P, Q, w1, w2):
    """Feasible spanning set of columns from the northwest-corner rule."""
    o1 = np.lexsort(P.T[::-1])
    o2 = np.lexsort(Q.T[::-1])
    ci, cj = [], []
    i = j = 0
    r1 = w1[o1[0]] if o1.size else 0.0
    r2 = w2[o2[0]] if o2.size else 0.0
    while i < o1.size and j < o2.size:
        ci.append(o1[i])
        cj.append(o2[j])
        step = min(r1, r2)
        r1 -= step
        r2 -= step
        if r1 <= r2 and i + 1 < o1.size:
            i += 1
            r1 = w1[o1[i]]
        elif j + 1 < o2.size:
            j += 1
            r2 = w2[o2[j]]
        else:
            i += 1
            j += 1
    return np.array(ci, dtype=np.int64), np.array(cj, dtype=np.int64)


def _repair_marginals(ci, cj, x, w1, w2):
    """Exact leaf-elimination flow on the support forest of x.

    The LP solution can miss the marginals by the solver tolerance; the
    support of a vertex solution is a forest, on which the flow matching
    the marginals is unique and computable by peeling leaves with exact
    subtractions.  Falls back to x if the support has cycles.
    """
    n1 = w1.size
    nodes = n1 + w2.size
    order = np.argsort(-x, kind="stable")
    parent = np.arange(nodes)

    def find(k):
        while parent[k] != k:
            parent[k] = parent[parent[k]]
            k = parent[k]
        return k

    keep = []
    for e in order:
        if x[e] <= 0:
            continue
        ra, rb = find(ci[e]), find(n1 + cj[e])
        if ra == rb:
            return x  # degenerate cycle; keep the LP numbers
        parent[ra] = rb
        keep.append(e)
    keep = np.array(keep, dtype=np.int64)
    adj = {}
    for e in keep:
        adj.setdefault(int(ci[e]), []).append(int(e))
        adj.setdefault(int(n1 + cj[e]), []).append(int(e))
    need = np.concatenate([w1, w2]).astype(float)
    deg = {k: len(v) for k, v in adj.items()}
    out = np.zeros_like(x)
    stack = [k for k, d in deg.items() if d == 1]
    alive = {int(e) for e in keep}
    while stack:
        node = stack.pop()
        if deg.get(node, 0) != 1:
            continue
        e = next(ee for ee in adj[node] if ee in alive)
        out[e] = need[node]
        other = int(cj[e]) + n1 if node == int(ci[e]) else int(ci[e])
        need[other] -= need[node]
        need[node] = 0.0
        alive.discard(e)
        deg[node] -= 1
        deg[other] -= 1
        if deg[other] == 1:
            stack.append(other)
    if np.any(out < -1e-9 * max(np.sum(w1), 1.0)):
        return x
    return np.maximum(out, 0.0)


def w1_plan(
    mu1: DiscreteMeasure, mu2: DiscreteMeasure, metric: AnisotropicMetric
) -> TransportPlan:
    """Optimal transport plan between equal-mass nonnegative atom lists.

    Exact: the restricted LP is re-priced against every column before the
    plan is accepted, so the dual pair certifies optimality of the result.
    Pairs are reported in lexicographic (src, dst) order.
    """
    if np.any(mu1.weights < 0) or np.any(mu2.weights < 0):
        raise ValueError("w1_plan requires nonnegative weights")
    m1, m2 = mu1.total_mass, mu2.total_mass
    if abs(m1 - m2) > 1e-12 * max(1.0, m1, m2):
        raise UnbalancedInputError(
            "masses differ: %.17g vs %.17g; trim first" % (m1, m2)
        )
    keep1 = np.flatnonzero(mu1.weights > 0)
    keep2 = np.flatnonzero(mu2.weights > 0)
    P = mu1.positions[keep1]
    Q = mu2.positions[keep2]
    w1 = mu1.weights[keep1]
    w2 = mu2.weights[keep2]
    n1, n2 = keep1.size, keep2.size
    u_full = np.full(len(mu1), np.nan)
    v_full = np.full(len(mu2), np.nan)
    if n1 == 0 or n2 == 0:
        return TransportPlan(
            np.empty(0, dtype=np.int64),
            np.empty(0, dtype=np.int64),
            np.empty(0),
            0.0,
            dual=(u_full, v_full),
        )
    # Solve in mass-normalized units.  The raw weights can sit at any
    # magnitude (roundoff-level residues included), and HiGHS presolve
    # declares tiny-but-inconsistent right-hand sides infeasible; dividing
    # each marginal by its own total keeps the LP well scaled and makes
    # the two halves of b sum to one exactly.  Dual prices are invariant
    # under this scaling, and the plan masses are scaled back afterwards.
    mass_scale = 0.5 * (float(np.sum(w1)) + float(np.sum(w2)))
    w1 = w1 / np.sum(w1)
    w2 = w2 / np.sum(w2)

    def dist_fn(ii, jj):
        d = P[ii] - Q[jj]
        return metric.L * np.hypot(d[:, 0], d[:, 1]) + np.abs(d[:, 2])

    if n1 * n2 <= _DENSE_LIMIT:
        gi, gj = np.meshgrid(np.arange(n1), np.arange(n2), indexing="ij")
        ci, cj = gi.ravel(), gj.ravel()
        x, cvec, u, v = _solve_restricted(dist_fn, ci, cj, w1, w2)
    else:
        ci, cj = _nw_corner_columns(P, Q, w1, w2)
        emb1 = np.column_stack([metric.L * P[:, 0], metric.L * P[:, 1], P[:, 2]])
        emb2 = np.column_stack([metric.L * Q[:, 0], metric.L * Q[:, 1], Q[:, 2]])
        tree2 = cKDTree(emb2)
        k = min(8, n2)
        _, nbr = tree2.query(emb1, k=k)
        nbr = np.atleast_2d(nbr.reshape(n1, k))
        ci = np.concatenate([ci, np.repeat(np.arange(n1), k)])
        cj = np.concatenate([cj, nbr.ravel()])
        tree1 = cKDTree(emb1)
        k1 = min(8, n1)
        _, nbr1 = tree1.query(emb2, k=k1)
        nbr1 = np.atleast_2d(nbr1.reshape(n2, k1))
        ci = np.concatenate([ci, nbr1.ravel()])
        cj = np.concatenate([cj, np.repeat(np.arange(n2), k1)])
        seen = set(zip(ci.tolist(), cj.tolist()))
        ci = np.array([p[0] for p in sorted(seen)], dtype=np.int64)
        cj = np.array([p[1] for p in sorted(seen)], dtype=np.int64)

        tol = 1e-11 * (1.0 + metric.L)
        for round_ in range(80):
            x, cvec, u, v = _solve_restricted(dist_fn, ci, cj, w1, w2)
            if round_ == 79:
                break
            new_i, new_j = [], []
            blk = max(1, (1 << 21) // max(n2, 1))
            for lo in range(0, n1, blk):
                hi = min(lo + blk, n1)
                dxy = np.hypot(
                    P[lo:hi, None, 0] - Q[None, :, 0],
                    P[lo:hi, None, 1] - Q[None, :, 1],
                )
                C = metric.L * dxy + np.abs(P[lo:hi, None, 2] - Q[None, :, 2])
                rc = C - u[lo:hi, None] - v[None, :]
                viol = rc < -tol
                if not viol.any():
                    continue
                # most violated column per violating row, plus the global worst
                rows = np.flatnonzero(viol.any(axis=1))
                best = np.argmin(rc[rows], axis=1)
                new_i.extend((rows + lo).tolist())
                new_j.extend(best.tolist())
            if not new_i:
                break
            pairs = set(zip(ci.tolist(), cj.tolist()))
            fresh = [(a, b) for a, b in zip(new_i, new_j) if (a, b) not in pairs]
            if not fresh:
                break
            ci = np.concatenate([ci, np.array([p[0] for p in fresh], dtype=np.int64)])
            cj = np.concatenate([cj, np.array([p[1] for p in fresh], dtype=np.int64)])
            order = np.lexsort((cj, ci))
            ci, cj = ci[order], cj[order]

    total = float(np.sum(w1))
    floor = 1e-15 * max(total, 1.0)
    live = x > floor
    xi, xj, xm = ci[live], cj[live], x[live]
    need = np.max(
        np.abs(
            np.concatenate(
                [
                    np.bincount(xi, weights=xm, minlength=n1) - w1,
                    np.bincount(xj, weights=xm, minlength=n2) - w2,
                ]
            )
        )
    )
    if need > 0.5e-12 * max(1.0, total):
        x2 = _repair_marginals(ci[live], cj[live], x[live], w1, w2)
        keep = x2 > 0.0
        xi, xj, xm = ci[live][keep], cj[live][keep], x2[keep]

    si = keep1[xi]
    sj = keep2[xj]
    order = np.lexsort((sj, si))
    si, sj, xm = si[order], sj[order], xm[order] * mass_scale
    d = mu1.positions[si] - mu2.positions[sj]
    dist = metric.L * np.hypot(d[:, 0], d[:, 1]) + np.abs(d[:, 2])
    cost = float(np.sum(xm * dist))
    u_full[keep1] = u
    v_full[keep2] = v
    return TransportPlan(si, sj, xm, cost, dual=(u_full, v_full))


def w1_distance(mu1, mu2, metric) -> float:
    return w1_plan(mu1, mu2, metric).cost


def dual_witness(plan: TransportPlan, mu1, mu2, metric: AnisotropicMetric):
    """Per-atom 1-Lipschitz potential achieving the plan's cost.

    psi(z) = min over solved target atoms of d(z, y_j) - v_j; on the
    sources this reproduces the optimal u, so sum(psi dmu1) - sum(psi dmu2)
    equals the primal cost up to solver tolerance.
    """
    u, v = plan.dual
    jj = np.flatnonzero(~np.isnan(v))
    if jj.size == 0:
        return np.zeros(len(mu1) + len(mu2))
    Q = mu2.positions[jj]
    vv = v[jj]
    out = np.empty(len(mu1) + len(mu2))
    allpos = np.vstack([mu1.positions, mu2.positions])
    blk = max(1, (1 << 21) // jj.size)
    for lo in range(0, allpos.shape[0], blk):
        hi = min(lo + blk, allpos.shape[0])
        d = metric.pairwise(allpos[lo:hi], Q)
        out[lo:hi] = np.min(d - vv[None, :], axis=1)
    return out


def w1_dual_lower_bound(mu1, mu2, metric, potential) -> float:
    """sum psi dmu1 - sum psi dmu2 for a potential on the union support.

    potential: array of length len(mu1) + len(mu2), values on mu1 atoms
    first.  The 1-Lipschitz constraint is verified on every atom pair; a
    violation raises InvalidPotentialError with the witness pair.
    """
    psi = np.asarray(potential, dtype=float).ravel()
    n1 = len(mu1)
    if psi.size != n1 + len(mu2):
        raise ValueError("potential length must be len(mu1) + len(mu2)")
    allpos = np.vstack([mu1.positions, mu2.positions])
    tol = 1e-9 * (1.0 + float(np.max(np.abs(psi), initial=0.0)))
    blk = max(1, (1 << 21) // max(allpos.shape[0], 1))
    for lo in range(0, allpos.shape[0], blk):
        hi = min(lo + blk, allpos.shape[0])
        d = metric.pairwise(allpos[lo:hi], allpos)
        gap = np.abs(psi[lo:hi, None] - psi[None, :]) - d
        k = np.argmax(gap)
        if gap.ravel()[k] > tol:
            ip, iq = np.unravel_index(k, gap.shape)
            ip = int(ip + lo)
            iq = int(iq)
            raise InvalidPotentialError(
                "potential not 1-Lipschitz: |psi[%d]-psi[%d]| exceeds d by %.3g"
                % (ip, iq, float(gap[ip - lo, iq])),
                witness=(ip, iq, float(gap[ip - lo, iq])),
            )
    return float(np.sum(psi[:n1] * mu1.weights) - np.sum(psi[n1:] * mu2.weights))


def _common_cancel(mu1: DiscreteMeasure, mu2: DiscreteMeasure):
    """Subtract the shared atomic mass pointwise; exact for W1 purposes."""
    a = mu1.consolidated()
    b = mu2.consolidated()
    allpos = np.vstack([a.positions, b.positions])
    uniq, inv = np.unique(allpos, axis=0, return_inverse=True)
    wa = np.zeros(uniq.shape[0])
    wb = np.zeros(uniq.shape[0])
    np.add.at(wa, inv[: len(a)], a.weights)
    np.add.at(wb, inv[len(a) :], b.weights)
    common = np.minimum(wa, wb)
    ra = wa - common
    rb = wb - common
    # residue at the rounding level of the shared mass is noise, not signal
    noise = 1e-13 * (wa + wb)
    ra[ra <= noise] = 0.0
    rb[rb <= noise] = 0.0
    r1 = DiscreteMeasure(uniq[ra > 0], ra[ra > 0], label=mu1.label)
    r2 = DiscreteMeasure(uniq[rb > 0], rb[rb > 0], label=mu2.label)
    return r1, r2, float(np.sum(common))


def trim_unbalanced(
    mu1: DiscreteMeasure,
    mu2: DiscreteMeasure,
    metric: AnisotropicMetric,
    diam: float,
    cancel: bool = True,
):
    """Equalize masses by dropping the costliest surplus of the heavier side.

    The lighter measure is augmented with a virtual atom of mass |dm| at
    the weighted support centroid, the augmented pair is solved exactly,
    and the mass shipped to the virtual atom is removed from the heavier
    side.  Returns (mu1', mu2', C1, C2) with C2 = |dm| = trimmed mass
    (exact) and C1 = the realized coupling cost between the trimmed pair
    (an upper bound for their W1 distance); when no trimming is needed no
    solve is performed and C1 = C2 = 0.

    With cancel=True the outputs are consolidated and the solve runs on
    the difference only, which changes nothing about the result.
    """
    if np.any(mu1.weights < 0) or np.any(mu2.weights < 0):
        raise ValueError("trim_unbalanced requires nonnegative weights")
    m1, m2 = mu1.total_mass, mu2.total_mass
    alpha = m1 - m2
    if abs(alpha) <= 1e-12 * max(1.0, m1, m2):
        return mu1, mu2, 0.0, 0.0
    if cancel:
        r1, r2, _ = _common_cancel(mu1, mu2)
        base1, base2 = mu1.consolidated(), mu2.consolidated()
    else:
        r1, r2 = mu1, mu2
        base1, base2 = mu1, mu2
    heavy_first = alpha > 0
    heavy, light = (r1, r2) if heavy_first else (r2, r1)
    support = np.vstack([r1.positions, r2.positions])
    wts = np.concatenate([np.abs(r1.weights), np.abs(r2.weights)])
    if wts.sum() == 0:
        centroid = np.zeros(3)
    else:
        centroid = np.average(support, axis=0, weights=wts)
    aug = DiscreteMeasure(
        np.vstack([light.positions, centroid[None, :]]),
        np.concatenate([light.weights, [abs(alpha)]]),
        label=light.label,
    )
    plan = w1_plan(heavy, aug, metric)
    virt = len(aug) - 1
    to_virtual = plan.dst == virt
    dropped = np.bincount(
        plan.src[to_virtual], weights=plan.mass[to_virtual], minlength=len(heavy)
    )
    new_heavy = DiscreteMeasure(
        heavy.positions, heavy.weights - dropped, label=heavy.label
    ).drop_zeros(1e-15 * max(1.0, abs(m1)))
    keep = ~to_virtual
    d = heavy.positions[plan.src[keep]] - aug.positions[plan.dst[keep]]
    c1 = float(
        np.sum(
            plan.mass[keep]
            * (metric.L * np.hypot(d[:, 0], d[:, 1]) + np.abs(d[:, 2]))
        )
    )
    c2 = float(abs(alpha))
    # fold the surviving residual back onto the untouched common part
    if heavy_first:
        out1 = _merge_trimmed(base1, heavy, new_heavy)
        out2 = base2
    else:
        out1 = base1
        out2 = _merge_trimmed(base2, heavy, new_heavy)
    return out1, out2, c1, c2


def _merge_trimmed(base: DiscreteMeasure, residual, residual_after):
    """base - (residual - residual_after), matched by atom position."""
    removed = {}
    after = {tuple(p): w for p, w in zip(residual_after.positions, residual_after.weights)}
    for p, w in zip(residual.positions, residual.weights):
        key = tuple(p)
        removed[key] = removed.get(key, 0.0) + w - after.get(key, 0.0)
    pos = base.positions
    w = base.weights.copy()
    for k, idx in ((tuple(p), i) for i, p in enumerate(pos)):
        if k in removed and removed[k] != 0.0:
            w[idx] -= removed.pop(k)
    return DiscreteMeasure(pos, w, label=base.label).drop_zeros(0.0)


def boundary_discrepancy(
    field: LiftedField,
    t_bar: float,
    samples: int | None = None,
    bins: int = 64,
    time_nodes: int = 8,
) -> float:
    """Mismatch rate between chi and its characteristic shift at the ball edge.

    Quadrature of (1/t) int_0^t int_0^M int_{boundary} |chi(x,a) -
    chi(x - ie^{ia} s, a)| dH^1 da ds over equally spaced boundary points,
    bin-center angles, and midpoint time nodes.  The sample count scales
    like R/t so the thin mismatch bands stay resolved.
    """
    if not 0.0 < t_bar < field.boundary_gap:
        raise GeometryError(
            "t_bar=%g must lie in (0, %g), the gap between the ball and the "
            "domain edge" % (t_bar, field.boundary_gap)
        )
    if samples is None:
        samples = max(1024, int(math.ceil(24.0 * field.R / t_bar)))
    cx, cy = field.center
    theta = (np.arange(samples) + 0.5) * (2.0 * math.pi / samples)
    bx = cx + field.R * np.cos(theta)
    by = cy + field.R * np.sin(theta)
    da = field.M / bins
    aa = (np.arange(bins) + 0.5) * da
    ts = (np.arange(time_nodes) + 0.5) * (t_bar / time_nodes)

    phi_at = field.phi
    ix0, iy0 = field.cell_index(bx, by)
    phi0 = phi_at[iy0, ix0]
    acc = 0.0
    sin_a, cos_a = np.sin(aa), np.cos(aa)
    for t in ts:
        # x - i e^{ia} t = (x + t sin a, y - t cos a)
        sx = bx[:, None] + t * sin_a[None, :]
        sy = by[:, None] - t * cos_a[None, :]
        ixs, iys = field.cell_index(sx, sy)
        phis = phi_at[iys, ixs]
        diff = (phi0[:, None] >= aa[None, :]) != (phis >= aa[None, :])
        acc += float(np.count_nonzero(diff))
    h1 = 2.0 * math.pi * field.R / samples
    integral = acc * h1 * da * (t_bar / time_nodes)
    return integral / t_bar


def _shifted_slab_means(slab: np.ndarray, ox: float, oy: float) -> np.ndarray:
    """Cell averages of slab(x - (ox, oy)) for a 0/1 cell-indicator slab.

    ox, oy are offsets in cell units.  Exact rectangle-overlap bilinear
    combination; outside the grid the slab is treated as 0.
    """
    ny, nx = slab.shape
    fx = math.floor(ox)
    fy = math.floor(oy)
    rx = ox - fx
    ry = oy - fy

    def grab(sy, sx):
        # grab(sy, sx)[j, i] = slab[j + sy, i + sx], zero outside
        out = np.zeros_like(slab)
        ys0 = max(0, -sy)
        ys1 = min(ny, ny - sy)
        xs0 = max(0, -sx)
        xs1 = min(nx, nx - sx)
        if ys0 < ys1 and xs0 < xs1:
            out[ys0:ys1, xs0:xs1] = slab[ys0 + sy : ys1 + sy, xs0 + sx : xs1 + sx]
        return out

    g00 = grab(fy, fx)
    g10 = grab(fy, fx + 1)
    g01 = grab(fy + 1, fx)
    g11 = grab(fy + 1, fx + 1)
    return (
        (1 - rx) * (1 - ry) * g00
        + rx * (1 - ry) * g10
        + (1 - rx) * ry * g01
        + rx * ry * g11
    )


def building_block_map(
    field: LiftedField,
    n: int,
    bins: int = 64,
    U: DiscreteMeasure | None = None,
    sub: int = 8,
    side: str = "hypo",
) -> TransportStep:
    """One dyadic transport step between chi and its time-2^-n shift.

    Discretizes both indicators as cell masses on the ball cylinder,
    equalizes masses by trimming, and solves the W1 problem under the
    metric with L = (epsilon or t_bar)^{-1/2}, recording the measured
    budget (t + t^{3/2}) nu(ball) + sqrt(eps) t (2R + sqrt(eps) M).

    side selects the region under the graph ("hypo", the default) or
    above it ("epi"); the boundary discrepancy and the defect mass in
    the ball are the same for both.
    """
    if side not in ("hypo", "epi"):
        raise ValueError("side must be 'hypo' or 'epi', got %r" % (side,))
    t_bar = 2.0 ** (-n)
    if t_bar >= field.boundary_gap:
        raise GeometryError(
            "2^-%d = %g too large for the ball-to-edge gap %g"
            % (n, t_bar, field.boundary_gap)
        )
    eps = boundary_discrepancy(field, t_bar, bins=bins)
    L = 1.0 / math.sqrt(max(eps, t_bar))
    metric = AnisotropicMetric(L)
    if U is None:
        U = entropy_measure(field, bins=bins)
    nu = nu_projection(U)
    nu_ball = nu.ball_mass(field.center, field.R)

    mu1 = _chi_measure(field, bins, 0.0, sub, side)
    mu2 = _chi_measure(field, bins, t_bar, sub, side)
    diam = metric.L * 2.0 * field.R + field.M
    rho1, rho2, c1, c2 = trim_unbalanced(mu1, mu2, metric, diam)
    r1, r2, _ = _common_cancel(rho1, rho2)
    plan = w1_plan(r1, r2, metric)
    bound = (t_bar + t_bar ** 1.5) * nu_ball + math.sqrt(eps) * t_bar * (
        2.0 * field.R + math.sqrt(eps) * field.M
    )
    return TransportStep(
        n=n,
        t_bar=t_bar,
        epsilon=eps,
        L=L,
        rho1=rho1,
        rho2=rho2,
        plan=plan,
        bound=bound,
        nu_ball=nu_ball,
        trimmed_mass=c2,
        side=side,
        bins=bins,
        sub=sub,
        mu1=mu1,
        mu2=mu2,
        residual1=r1,
        residual2=r2,
    )


def _chi_measure(field, bins, shift_time, sub, side="hypo"):
    """Cell-mass discretization of chi(x - ie^{ia} t, a) on the ball.

    Both the shifted and unshifted versions quantize the a-direction with
    the same sub-node rule, so away from the moving interface the two
    discretizations agree bit for bit and cancel instead of leaving
    straddled-bin residue at every cell.  side="epi" discretizes the
    complementary indicator 1_{a > phi}.
    """
    mask = field.ball_mask()
    jj, ii = np.nonzero(mask)
    xs, ys = field.xs(), field.ys()
    da = field.M / bins
    area = field.cell_area
    nodes = (np.arange(bins)[:, None] + (np.arange(sub)[None, :] + 0.5) / sub) * da
    if shift_time == 0.0:
        phi_c = field.phi[jj, ii]
        inside = phi_c[:, None, None] >= nodes[None, :, :]
        if side == "epi":
            inside = ~inside
        counts = np.sum(inside, axis=2, dtype=float)
        masses = counts * (da / sub) * area
    else:
        masses = np.zeros((jj.size, bins))
        for k in range(bins):
            for s in range(sub):
                a = nodes[k, s]
                if side == "epi":
                    slab = (field.phi < a).astype(float)
                else:
                    slab = (field.phi >= a).astype(float)
                ox = shift_time * math.sin(a) / field.dx
                oy = -shift_time * math.cos(a) / field.dy
                shifted = _shifted_slab_means(slab, ox, oy)
                masses[:, k] += shifted[jj, ii] * (da / sub) * area
    centers = (np.arange(bins) + 0.5) * da
    pos = np.column_stack(
        [
            np.repeat(xs[ii], bins),
            np.repeat(ys[jj], bins),
            np.tile(centers, jj.size),
        ]
    )
    w = masses.ravel()
    live = w > 1e-15 * area * da
    return DiscreteMeasure(
        pos[live], w[live], label="chi_%s_shift_%g" % (side, shift_time)
    )


def write_plan_csv(plan: TransportPlan, mu1, mu2, path) -> None:
    """Plan pairs with endpoint coordinates, 17 significant digits."""
    import csv as _csv

    with open(path, "w", newline="") as fh:
        wr = _csv.writer(fh)
        wr.writerow(["src_x", "src_y", "src_a", "dst_x", "dst_y", "dst_a", "mass"])
        for i, j, m in zip(plan.src, plan.dst, plan.mass):
            p = mu1.positions[i]
            q = mu2.positions[j]
            wr.writerow(
                ["%.17g" % v for v in (p[0], p[1], p[2], q[0], q[1], q[2], m)]
            )


def write_step_json(step: TransportStep, path) -> None:
    import json

    payload = {
        "n": step.n,
        "t_bar": step.t_bar,
        "epsilon": step.epsilon,
        "L": step.L,
        "cost": step.plan.cost,
        "bound": step.bound,
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")
