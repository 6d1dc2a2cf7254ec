"""Kinetic indicator, entropy defect measure, and residual checks.

The central objects: the indicator chi(x, a) = 1_{phi(x) >= a}, and the
defect measure U carrying the failure of the entropy fluxes e^{i(phi ^ a)}
to be divergence free.  For a piecewise-constant grid field the defect is
supported exactly on the cell edges where phi jumps, and the edge weights
below are exact a-integrals, so no smoothing tolerance enters.

Sign convention, used everywhere downstream and in report headers: the
weight of an atom is minus the outflux jump,

    w(edge, bin) = -int_bin (e^{i(phi_2 ^ a)} - e^{i(phi_1 ^ a)}) . n_12 da
                   x edge length,

with n_12 the unit normal from cell 1 to cell 2 (either labeling gives the
same number).  With this sign, <U, psi> = int e^{i(phi ^ a)} . grad_x psi
for every test function, and the kinetic identity reads

    int chi(x, a) ie^{ia} . grad_x psi dx da + <U, d_a psi> = 0.
"""

from __future__ import annotations

from dataclasses import dataclass
import itertools
import math

import numpy as np

from eikolab.fields import (
    LiftedField,
    bump,
    bump_deriv,
    flux_residual,
)
from eikolab.measures import DiscreteMeasure

# max |b'| for the (1-u^2)^3 bump, attained at u = 1/sqrt(5)
_BD_MAX = 96.0 / (25.0 * math.sqrt(5.0))


class NotApplicableError(ValueError):
    """Raised when a transform's range hypothesis fails."""


@dataclass(frozen=True)
class KineticSlice:
    """chi(., a) on the grid: indicator[iy, ix] = 1 iff phi[iy, ix] >= a."""

    a: float
    indicator: np.ndarray

    def __post_init__(self):
        ind = np.ascontiguousarray(self.indicator, dtype=np.uint8)
        ind.setflags(write=False)
        object.__setattr__(self, "indicator", ind)


def chi(field: LiftedField, a: float) -> KineticSlice:
    """Exact threshold slice of the stored grid."""
    if not 0.0 <= a <= field.M:
        raise ValueError("level a=%g outside [0, M=%g]" % (a, field.M))
    return KineticSlice(float(a), field.phi >= a)


def _edge_tables(field: LiftedField):
    """Interior edges as flat arrays: (phi1, phi2, mid_x, mid_y, length, kind).

    kind 0: vertical edge, normal (1, 0), flux component cos.
    kind 1: horizontal edge, normal (0, 1), flux component sin.
    """
    phi = field.phi
    xs, ys = field.xs(), field.ys()
    p1v = phi[:, :-1].ravel()
    p2v = phi[:, 1:].ravel()
    xv = np.broadcast_to((xs[:-1] + 0.5 * field.dx)[None, :], phi[:, 1:].shape).ravel()
    yv = np.broadcast_to(ys[:, None], phi[:, 1:].shape).ravel()
    p1h = phi[:-1, :].ravel()
    p2h = phi[1:, :].ravel()
    xh = np.broadcast_to(xs[None, :], phi[1:, :].shape).ravel()
    yh = np.broadcast_to((ys[:-1] + 0.5 * field.dy)[:, None], phi[1:, :].shape).ravel()
    phi1 = np.concatenate([p1v, p1h])
    phi2 = np.concatenate([p2v, p2h])
    ex = np.concatenate([xv, xh])
    ey = np.concatenate([yv, yh])
    length = np.concatenate([np.full(p1v.size, field.dy), np.full(p1h.size, field.dx)])
    kind = np.concatenate(
        [np.zeros(p1v.size, dtype=np.int8), np.ones(p1h.size, dtype=np.int8)]
    )
    return phi1, phi2, ex, ey, length, kind


def _antideriv_cos(a, phi):
    """int_0^a cos(phi ^ t) dt, vectorized over both arguments."""
    am = np.minimum(a, phi)
    return np.sin(am) + np.maximum(a - phi, 0.0) * np.cos(phi)


def _antideriv_sin(a, phi):
    """int_0^a sin(phi ^ t) dt."""
    am = np.minimum(a, phi)
    return 1.0 - np.cos(am) + np.maximum(a - phi, 0.0) * np.sin(phi)


def entropy_measure(field: LiftedField, bins: int = 64) -> DiscreteMeasure:
    """Entropy defect measure of the piecewise-constant interpolant.

    Atoms live at (edge midpoint, a-bin center); the weight of each atom is
    the exact integral of the edge flux jump over its a-bin (times edge
    length), so binning is the only discretization in a, and even that is
    just aggregation: totals over any union of whole bins are exact.
    """
    if bins < 1:
        raise ValueError("bins must be >= 1")
    phi1, phi2, ex, ey, length, kind = _edge_tables(field)
    live = phi1 != phi2
    phi1, phi2 = phi1[live], phi2[live]
    ex, ey, length, kind = ex[live], ey[live], length[live], kind[live]

    M = field.M
    da = M / bins
    edges_a = np.linspace(0.0, M, bins + 1)
    centers_a = 0.5 * (edges_a[:-1] + edges_a[1:])

    out_pos = []
    out_w = []
    # chunk over edges to bound the (chunk x bins) work arrays
    chunk = 1 << 13
    for lo in range(0, phi1.size, chunk):
        hi = min(lo + chunk, phi1.size)
        q1 = phi1[lo:hi, None]
        q2 = phi2[lo:hi, None]
        k = kind[lo:hi]
        anti = np.where(
            k[:, None] == 0,
            _antideriv_cos(edges_a[None, :], q2) - _antideriv_cos(edges_a[None, :], q1),
            _antideriv_sin(edges_a[None, :], q2) - _antideriv_sin(edges_a[None, :], q1),
        )
        w = -(anti[:, 1:] - anti[:, :-1]) * length[lo:hi, None]
        # discard pure rounding noise so trace-matched jumps keep exact support
        keep = np.abs(w) > (1e-12 * da) * length[lo:hi, None]
        ei, ai = np.nonzero(keep)
        out_pos.append(
            np.column_stack([ex[lo:hi][ei], ey[lo:hi][ei], centers_a[ai]])
        )
        out_w.append(w[keep])

    if out_pos:
        pos = np.vstack(out_pos)
        w = np.concatenate(out_w)
    else:
        pos = np.empty((0, 3))
        w = np.empty(0)
    return DiscreteMeasure(
        pos,
        w,
        label="entropy_defect",
        extra={"bins": bins, "M": M, "sign": "weight = -(outflux jump)"},
    )


def nu_projection(U: DiscreteMeasure) -> DiscreteMeasure:
    """Spatial projection of |U|: atoms at x with weights sum_a |w|."""
    if U.dim != 3:
        raise ValueError("nu_projection expects an (x, y, a) measure")
    flat = DiscreteMeasure(U.positions[:, :2], np.abs(U.weights), label="nu")
    return flat.consolidated()


def _lattice(lo: float, hi: float, s: float):
    c = lo + s
    while c + s <= hi + 1e-12 * (hi - lo):
        yield c
        c += s


def _test_triples(field: LiftedField, test_count: int, spatial_filter=None):
    """Deterministic product-bump family on the open box Omega x (0, M).

    Yields (cx, cy, s, ca, sa), coarse scales first, until test_count
    functions have been produced.
    """
    w = min(field.x_max - field.x_min, field.y_max - field.y_min)
    produced = 0
    for level in range(3):
        s = w / (4 * (1 << level))
        sa = field.M / (4 * (1 << level))
        spatial = [
            (cx, cy)
            for cy in _lattice(field.y_min, field.y_max, s)
            for cx in _lattice(field.x_min, field.x_max, s)
        ]
        if spatial_filter is not None:
            spatial = [(cx, cy) for cx, cy in spatial if spatial_filter(cx, cy, s)]
        for (cx, cy), ca in itertools.product(spatial, _lattice(0.0, field.M, sa)):
            yield cx, cy, s, ca, sa
            produced += 1
            if produced >= test_count:
                return


_GAUSS_N = 24
_GX, _GW = np.polynomial.legendre.leggauss(_GAUSS_N)


def kinetic_residual(
    field: LiftedField,
    U: DiscreteMeasure,
    test_count: int = 64,
    spatial_filter=None,
) -> float:
    """Worst normalized defect of the kinetic identity over a test family.

    For each product bump psi(x, y, a) compactly supported in the open
    domain box times (0, M), computes

        T1 = int chi(x, a) ie^{ia} . grad_x psi dx da
        T2 = sum over atoms of d_a psi * weight

    and returns max |T1 + T2| / |psi|_{C^1}, with |psi|_{C^1} = sup|psi| +
    sum of the three sup|partial derivative| values.  T1 is exact in x
    (cell-wise antiderivatives of the bump) and Gauss-quadrature exact in a,
    so the residual isolates the a-binning and edge-midpoint errors of U.

    spatial_filter, if given, keeps only bumps with (cx, cy, s) approved;
    use it to probe subregions (for instance away from a lifting cut).
    """
    if U.dim != 3:
        raise ValueError("kinetic_residual expects an (x, y, a) defect measure")
    xs_e = field.x_min + field.dx * np.arange(field.nx + 1)
    ys_e = field.y_min + field.dy * np.arange(field.ny + 1)
    phi = field.phi
    pos, wt = U.positions, U.weights

    def b_int(u):
        # antiderivative of the bump, saturating outside [-1, 1]
        v = np.clip(u, -1.0, 1.0)
        v2 = v * v
        return v * (1.0 + v2 * (-1.0 + v2 * (0.6 - v2 / 7.0)))

    worst = 0.0
    for cx, cy, s, ca, sa in _test_triples(field, test_count, spatial_filter):
        # cells intersecting the spatial support
        i0 = max(int(np.searchsorted(xs_e, cx - s, "left")) - 1, 0)
        i1 = min(int(np.searchsorted(xs_e, cx + s, "right")), field.nx)
        j0 = max(int(np.searchsorted(ys_e, cy - s, "left")) - 1, 0)
        j1 = min(int(np.searchsorted(ys_e, cy + s, "right")), field.ny)
        if i0 >= i1 or j0 >= j1:
            continue
        px = bump((xs_e[i0 : i1 + 1] - cx) / s)
        Px = s * b_int((xs_e[i0 : i1 + 1] - cx) / s)
        qy = bump((ys_e[j0 : j1 + 1] - cy) / s)
        Qy = s * b_int((ys_e[j0 : j1 + 1] - cy) / s)
        dpx = px[1:] - px[:-1]
        dPx = Px[1:] - Px[:-1]
        dqy = qy[1:] - qy[:-1]
        dQy = Qy[1:] - Qy[:-1]
        Ax = dpx[None, :] * dQy[:, None]
        Ay = dPx[None, :] * dqy[:, None]

        lo_a = ca - sa
        hi_a = ca + sa
        t = np.clip(phi[j0:j1, i0:i1], lo_a, hi_a).ravel()
        half = 0.5 * (t - lo_a)
        nodes = lo_a + half[:, None] * (_GX[None, :] + 1.0)
        beta = bump((nodes - ca) / sa)
        Is = (beta * np.sin(nodes)) @ _GW * half
        Ic = (beta * np.cos(nodes)) @ _GW * half
        T1 = float(np.sum(-Ax.ravel() * Is + Ay.ravel() * Ic))

        if len(pos):
            m = (
                (np.abs(pos[:, 0] - cx) < s)
                & (np.abs(pos[:, 1] - cy) < s)
                & (np.abs(pos[:, 2] - ca) < sa)
            )
            if np.any(m):
                p = pos[m]
                dpsi_a = (
                    bump((p[:, 0] - cx) / s)
                    * bump((p[:, 1] - cy) / s)
                    * bump_deriv((p[:, 2] - ca) / sa)
                    / sa
                )
                T2 = float(np.sum(dpsi_a * wt[m]))
            else:
                T2 = 0.0
        else:
            T2 = 0.0

        norm = 1.0 + _BD_MAX * (2.0 / s + 1.0 / sa)
        worst = max(worst, abs(T1 + T2) / norm)
    return float(worst)


def burgers_transform(field: LiftedField):
    """Scalar conservation-law cross-check for fields ranging in (0, pi).

    On that range the map v = cos(phi) turns the divergence constraint into
    the flux law d_1 v + d_2 sqrt(1 - v^2) = 0 with strictly convex flux.
    Returns (v grid, weak flux residual).
    """
    pmin, pmax = float(field.phi.min()), float(field.phi.max())
    if pmin <= 0.0 or pmax >= math.pi:
        raise NotApplicableError(
            "phi range [%g, %g] not contained in (0, pi)" % (pmin, pmax)
        )
    v = np.cos(field.phi)
    g = np.sqrt(np.clip(1.0 - v * v, 0.0, None))
    res = flux_residual(field, comps=(v, g))
    return v, res
