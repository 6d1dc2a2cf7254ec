"""Approximate characteristic ensembles for divergence-free lifted fields.

Curves move with unit speed ie^{ia} = (-sin a, cos a), keep the angle
constant between nodes, and change state only at relocation nodes
prescribed by one dyadic transport plan.  For a static field the shifted
indicator, hence the plan, is the same for every step, so a single
transport solve is reused across all 2^n steps of a level.

The hypograph ensemble seeds one curve per (cell, angle sub-node)
quantum with a <= phi, the epigraph ensemble the complement.  At each
step the survivors are advanced, deposited bilinearly on the cell/bin
grid, the deficit against the shifted indicator is injected as new
curves at cell centers (this carries the mass entering through the
sphere), and then the plan's relocation fractions are applied, forking
curves into weighted children.  Mass is never destroyed inside the ball:
curves end only by leaving through the sphere or at the horizon.

Storage is columnar.  During construction each curve is a row of
scalars plus a pointer into a shared-prefix event chain, so a fork costs
O(1); the chains are expanded once at the end into a flat node table in
CSR layout that all the error functionals operate on.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass

import numpy as np

from eikolab.fields import LiftedField, bump, bump_integral
from eikolab.measures import DiscreteMeasure
from eikolab.transport import (
    AnisotropicMetric,
    TransportStep,
    _chi_measure,
    building_block_map,
    trim_unbalanced,
    w1_plan,
)

E1, E2, E3 = 1, 2, 3


class BookkeepingError(RuntimeError):
    """A motion endpoint landed in a cell the step's masses say is empty."""


# ---------------------------------------------------------------------------
# curve-level types


@dataclass(frozen=True)
class Curve:
    """Piecewise straight path with piecewise constant angle.

    nodes is a (K, 4) array of rows (t, x, y, a) with nondecreasing t and
    nodes[0, 0] == t_minus.  Between node times the position follows
    x(t) = x_k + ie^{ia_k} (t - t_k); at a node time the state jumps to
    the node row (right continuous).
    """

    t_minus: float
    t_plus: float
    weight: float
    side: str
    nodes: np.ndarray

    def __post_init__(self):
        nd = np.asarray(self.nodes, dtype=float)
        if nd.ndim != 2 or nd.shape[1] != 4 or nd.shape[0] == 0:
            raise ValueError("nodes must be a nonempty (K, 4) array")
        if np.any(np.diff(nd[:, 0]) < -1e-12):
            raise ValueError("node times must be nondecreasing")
        if abs(nd[0, 0] - self.t_minus) > 1e-12:
            raise ValueError("first node time must equal t_minus")
        object.__setattr__(self, "nodes", nd)

    def angle_at(self, t: float, limit: str = "right") -> float:
        side = "right" if limit == "right" else "left"
        k = int(np.searchsorted(self.nodes[:, 0], t, side=side)) - 1
        if k < 0:
            raise ValueError("time %g precedes the first node" % t)
        return float(self.nodes[k, 3])

    def position_at(self, t: float, limit: str = "right"):
        side = "right" if limit == "right" else "left"
        k = int(np.searchsorted(self.nodes[:, 0], t, side=side)) - 1
        if k < 0:
            raise ValueError("time %g precedes the first node" % t)
        t0, x0, y0, a0 = self.nodes[k]
        dt = t - t0
        return (x0 - math.sin(a0) * dt, y0 + math.cos(a0) * dt)

    def tv_angle(self) -> float:
        return float(np.sum(np.abs(np.diff(self.nodes[:, 3]))))

    def relocation_lengths(self) -> np.ndarray:
        """Spatial jump applied at each interior node."""
        if self.nodes.shape[0] < 2:
            return np.zeros(0)
        t0, x0, y0, a0 = (self.nodes[:-1, c] for c in range(4))
        dt = self.nodes[1:, 0] - t0
        lx = x0 - np.sin(a0) * dt
        ly = y0 + np.cos(a0) * dt
        return np.hypot(self.nodes[1:, 1] - lx, self.nodes[1:, 2] - ly)


@dataclass(frozen=True)
class CurveDefect:
    """Signed vertical jump atoms (t, x, interval, sign), diffuse part zero.

    mass = carried weight times the interval length, so the sum of the
    masses is the weighted total variation of the angle.
    """

    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    a_lo: np.ndarray
    a_hi: np.ndarray
    sign: np.ndarray
    mass: np.ndarray

    def __len__(self):
        return self.t.size

    @property
    def total_variation(self) -> float:
        return float(np.sum(self.mass))

    def signed_total(self) -> float:
        return float(np.sum(self.sign * self.mass))

    def part(self, sign: int) -> "CurveDefect":
        m = self.sign == sign
        return CurveDefect(
            self.t[m], self.x[m], self.y[m], self.a_lo[m], self.a_hi[m],
            self.sign[m], self.mass[m],
        )


# ---------------------------------------------------------------------------
# seed partition against the sphere


@dataclass(frozen=True)
class SeedPartition:
    x: np.ndarray
    y: np.ndarray
    a: np.ndarray
    label: np.ndarray
    t_plus: np.ndarray
    t_minus: np.ndarray


def classify_motion(x, y, a, radius, t_bar, center=(0.0, 0.0)):
    """Label straight unit-speed motions over one step against the ball.

    1: inside at 0 and at t_bar; 2: inside at 0, exits at t_plus < t_bar;
    3: outside at 0, enters at t_minus < t_bar; 0: outside throughout.
    Exit and entry times solve the line/circle quadratic in closed form.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    a = np.atleast_1d(np.asarray(a, dtype=float))
    x, y, a = np.broadcast_arrays(x, y, a)
    vx, vy = -np.sin(a), np.cos(a)
    rx, ry = x - center[0], y - center[1]
    pv = rx * vx + ry * vy
    r2 = rx * rx + ry * ry
    disc = pv * pv - (r2 - radius * radius)
    sq = np.sqrt(np.maximum(disc, 0.0))
    inside = r2 <= radius * radius
    t_exit = -pv + sq
    t_enter = -pv - sq
    label = np.zeros(x.shape, dtype=np.int8)
    t_plus = np.full(x.shape, np.nan)
    t_minus = np.full(x.shape, np.nan)
    label[inside] = E1
    exits = inside & (t_exit < t_bar)
    label[exits] = E2
    t_plus[exits] = np.maximum(t_exit[exits], 0.0)
    enters = (~inside) & (disc > 0.0) & (t_enter >= 0.0) & (t_enter < t_bar)
    label[enters] = E3
    t_minus[enters] = t_enter[enters]
    return label, t_plus, t_minus


def partition_E123(field: LiftedField, t_bar: float, bins: int = 32) -> SeedPartition:
    """Classify every (cell, angle-bin) seed near the ball over one step.

    Seeds are cell centers within R + t_bar + one cell diagonal of the
    ball center, paired with bin-center angles.
    """
    cx0, cy0 = field.center
    xs, ys = field.xs(), field.ys()
    gx, gy = np.meshgrid(xs, ys)
    diag = math.hypot(field.dx, field.dy)
    near = np.hypot(gx - cx0, gy - cy0) <= field.R + t_bar + diag
    jj, ii = np.nonzero(near)
    da = field.M / bins
    centers = (np.arange(bins) + 0.5) * da
    px = np.repeat(xs[ii], bins)
    py = np.repeat(ys[jj], bins)
    pa = np.tile(centers, jj.size)
    label, tp, tm = classify_motion(px, py, pa, field.R, t_bar, (cx0, cy0))
    return SeedPartition(px, py, pa, label, tp, tm)


# ---------------------------------------------------------------------------
# dense grids and the relocation table derived from a transport step


def _grid_key(field, bins, x, y, a):
    ix, iy = field.cell_index(x, y)
    da = field.M / bins
    b = np.clip((np.asarray(a) / da).astype(np.int64), 0, bins - 1)
    return (iy * field.nx + ix) * bins + b


def _dense_cube(field, bins, meas: DiscreteMeasure) -> np.ndarray:
    """(ny, nx, bins) cell/bin masses of a 3-d measure with grid atoms."""
    g = np.zeros(field.ny * field.nx * bins)
    if len(meas):
        key = _grid_key(field, bins, meas.positions[:, 0], meas.positions[:, 1],
                        meas.positions[:, 2])
        np.add.at(g, key, meas.weights)
    return g.reshape(field.ny, field.nx, bins)


def _cic_cube(field, bins, meas: DiscreteMeasure) -> np.ndarray:
    """Bilinear (area-overlap) deposit of a 3-d measure on the cell/bin grid,
    renormalized onto the ball-masked cells.

    The corner fractions falling on cells outside the ball mask are folded
    back proportionally, matching how the construction engine accounts for
    deposits near the sphere; points with no masked corner at all are
    redirected to the nearest masked cell.
    """
    g = np.zeros(field.ny * field.nx * bins)
    if not len(meas):
        return g.reshape(field.ny, field.nx, bins)
    maskflat = field.ball_mask().ravel()
    x, y, a = (meas.positions[:, c] for c in range(3))
    w = meas.weights
    da = field.M / bins
    b = np.clip((a / da).astype(np.int64), 0, bins - 1)
    i0, j0, fx, fy = _cic_fractions(field, x, y)
    corners = []
    norm = np.zeros(x.size)
    for di, dj, cf in _cic_corners(fx, fy):
        ii = np.clip(i0 + di, 0, field.nx - 1)
        jj = np.clip(j0 + dj, 0, field.ny - 1)
        cell = jj * field.nx + ii
        mcf = cf * maskflat[cell]
        norm += mcf
        corners.append((cell, mcf))
    ok = norm > 0.0
    for cell, mcf in corners:
        m = ok & (mcf > 0.0)
        g += np.bincount(cell[m] * bins + b[m],
                         weights=w[m] * mcf[m] / norm[m], minlength=g.size)
    if not ok.all():
        stray = np.flatnonzero(~ok)
        mi = np.flatnonzero(maskflat)
        xs, ys = field.xs(), field.ys()
        mx, my = xs[mi % field.nx], ys[mi // field.nx]
        for s in stray:
            j = int(np.argmin((mx - x[s]) ** 2 + (my - y[s]) ** 2))
            g[mi[j] * bins + b[s]] += w[s]
    return g.reshape(field.ny, field.nx, bins)


def _cic_fractions(field, x, y):
    gx = (x - field.x_min) / field.dx - 0.5
    gy = (y - field.y_min) / field.dy - 0.5
    i0 = np.floor(gx).astype(np.int64)
    j0 = np.floor(gy).astype(np.int64)
    return i0, j0, gx - i0, gy - j0


def _cic_corners(fx, fy):
    return (
        (0, 0, (1.0 - fx) * (1.0 - fy)),
        (1, 0, fx * (1.0 - fy)),
        (0, 1, (1.0 - fx) * fy),
        (1, 1, fx * fy),
    )


class _RelocationTable:
    """Plan rows grouped by source (cell, bin) with fractions of the full
    shifted-indicator mass there, plus displacement and target angle."""

    def __init__(self, field, step: TransportStep):
        bins = step.bins
        plan = step.plan
        r1, r2 = step.residual1, step.residual2
        if r1 is None or r2 is None or step.mu2 is None:
            raise ValueError("transport step lacks stored endpoint measures")
        m2 = _dense_cube(field, bins, step.mu2).ravel()
        self.rowgrid = np.full(field.ny * field.nx * bins, -1, dtype=np.int64)
        if len(plan) == 0:
            self.row_start = np.zeros(0, dtype=np.int64)
            self.row_len = np.zeros(0, dtype=np.int64)
            for name in ("dx", "dy", "anew", "frac"):
                setattr(self, "row_" + name, np.zeros(0))
            return
        order = np.argsort(plan.dst, kind="stable")
        js, is_, ms = plan.dst[order], plan.src[order], plan.mass[order]
        p2 = r2.positions[js]
        p1 = r1.positions[is_]
        key = _grid_key(field, bins, p2[:, 0], p2[:, 1], p2[:, 2])
        denom = m2[key]
        if np.any(denom <= 0.0):
            raise BookkeepingError(
                "plan references a (cell, bin) with no shifted-indicator mass"
            )
        uj, first = np.unique(js, return_index=True)
        counts = np.diff(np.append(first, js.size))
        sums = np.add.reduceat(ms, first)
        if np.any(sums > denom[first] * (1.0 + 1e-9) + 1e-15):
            raise BookkeepingError("plan mass exceeds the cell mass it moves")
        self.row_start = first.astype(np.int64)
        self.row_len = counts.astype(np.int64)
        self.row_dx = p1[:, 0] - p2[:, 0]
        self.row_dy = p1[:, 1] - p2[:, 1]
        self.row_anew = p1[:, 2]
        self.row_frac = ms / denom
        self.rowgrid[key[first]] = np.arange(uj.size)


# ---------------------------------------------------------------------------
# the ensemble container (CSR node table)


class CurveEnsemble:
    """Weighted family of approximate characteristics, stored columnar.

    A curve i is alive on [birth[i], death[i]) and owns the node rows
    node_ptr[i]:node_ptr[i+1], time sorted.  node_aprev holds the angle
    before each node (nan at a curve's first node) and node_dx/node_dy
    the spatial relocation applied there, so the error functionals are
    plain weighted sums over the node table.
    """

    def __init__(self, *, n, side, field, weight, birth, death, node_ptr,
                 node_t, node_x, node_y, node_a, node_aprev, node_dx, node_dy,
                 step=None, bins=None, sub=None, horizon=1.0, accounting=None,
                 fate=None):
        self.n = n
        self.side = side
        self.field = field
        self.step = step
        self.bins = bins
        self.sub = sub
        self.horizon = float(horizon)
        self.weight = np.asarray(weight, dtype=float)
        self.birth = np.asarray(birth, dtype=float)
        self.death = np.asarray(death, dtype=float)
        self.node_ptr = np.asarray(node_ptr, dtype=np.int64)
        self.node_t = np.asarray(node_t, dtype=float)
        self.node_x = np.asarray(node_x, dtype=float)
        self.node_y = np.asarray(node_y, dtype=float)
        self.node_a = np.asarray(node_a, dtype=float)
        self.node_aprev = np.asarray(node_aprev, dtype=float)
        self.node_dx = np.asarray(node_dx, dtype=float)
        self.node_dy = np.asarray(node_dy, dtype=float)
        self.accounting = dict(accounting or {})
        self.fate = None if fate is None else np.asarray(fate, dtype=np.uint8)
        self._node_curve = None
        self._curves = None

    def __len__(self):
        return self.weight.size

    @property
    def node_count(self):
        return self.node_t.size

    @property
    def node_curve(self):
        if self._node_curve is None:
            counts = np.diff(self.node_ptr)
            self._node_curve = np.repeat(np.arange(len(self)), counts)
        return self._node_curve

    def alive_mask(self, t, limit="right"):
        # curves that never die carry death = inf and stay alive through
        # the horizon; a death exactly at the horizon is a real exit
        if limit == "right":
            alive = (self.birth <= t) & (
                (t < self.death)
                | ((self.death > self.horizon) & (t <= self.horizon))
            )
        else:
            alive = (self.birth < t) & (t <= self.death)
        return alive

    def alive_mass(self, t, limit="right") -> float:
        return float(self.weight[self.alive_mask(t, limit)].sum())

    def alive_mass_grid(self):
        if self.n is not None:
            ts = np.arange(2 ** self.n + 1) * (self.horizon / 2 ** self.n)
        else:
            ts = np.linspace(0.0, self.horizon, 17)
        return ts, np.array([self.alive_mass(t) for t in ts])

    def curve(self, i: int) -> Curve:
        lo, hi = self.node_ptr[i], self.node_ptr[i + 1]
        nodes = np.column_stack(
            [self.node_t[lo:hi], self.node_x[lo:hi], self.node_y[lo:hi],
             self.node_a[lo:hi]]
        )
        return Curve(
            t_minus=float(self.birth[i]),
            t_plus=float(min(self.death[i], self.horizon)),
            weight=float(self.weight[i]),
            side=self.side,
            nodes=nodes,
        )

    @property
    def curves(self):
        if self._curves is None:
            self._curves = [self.curve(i) for i in range(len(self))]
        return self._curves

    def total_mass(self) -> float:
        return float(self.weight.sum())


class _Cols:
    """Capacity-doubling columnar store for the construction phase."""

    def __init__(self, names, dtypes, cap=1024):
        self.names = names
        self.size = 0
        self.a = {
            nm: np.empty(cap, dtype=dt) for nm, dt in zip(names, dtypes)
        }

    def grow_to(self, need):
        cap = next(iter(self.a.values())).size
        if need <= cap:
            return
        new = max(need, 2 * cap)
        for nm in self.names:
            b = np.empty(new, dtype=self.a[nm].dtype)
            b[: self.size] = self.a[nm][: self.size]
            self.a[nm] = b

    def append(self, **cols):
        k = len(next(iter(cols.values())))
        self.grow_to(self.size + k)
        s = self.size
        for nm in self.names:
            self.a[nm][s : s + k] = cols[nm]
        self.size += k
        return np.arange(s, s + k)

    def col(self, nm):
        return self.a[nm][: self.size]


# ---------------------------------------------------------------------------
# construction


def build_representation(
    field: LiftedField,
    n: int,
    side: str = "hypo",
    bins: int = 32,
    sub: int = 4,
    step: TransportStep | None = None,
    horizon: float = 1.0,
) -> CurveEnsemble:
    """Build the level-n curve ensemble for one side of the graph.

    One transport solve per level; 2^n advection/relocation steps; the
    mass entering the ball during a step is injected as the exact cell
    deficit against the shifted indicator before relocation, so the
    alive distribution tracks the slice measure at every step boundary.
    Curves end only by exiting through the sphere or at the horizon.
    """
    if not 3 <= n <= 12:
        raise ValueError("level n must be in [3, 12], got %r" % (n,))
    if side not in ("hypo", "epi"):
        raise ValueError("side must be 'hypo' or 'epi'")
    t_bar = 2.0 ** -n
    nsteps = int(round(horizon / t_bar))
    if abs(nsteps * t_bar - horizon) > 1e-12 or nsteps < 1:
        raise ValueError("horizon must be a positive multiple of 2^-n")
    if step is None:
        step = building_block_map(field, n, bins=bins, sub=sub, side=side)
    else:
        if step.n != n or step.side != side:
            raise ValueError("transport step was solved for another level/side")
        bins, sub = step.bins, step.sub

    da = field.M / bins
    area = field.cell_area
    quantum = da * area / sub
    cx0, cy0 = field.center
    R2 = field.R * field.R
    nx, ny = field.nx, field.ny
    xs, ys = field.xs(), field.ys()
    gsize = ny * nx * bins

    m2flat = _dense_cube(field, bins, step.mu2).ravel()
    reloc = _RelocationTable(field, step)

    # cells where the one-step map does structural work (support of the
    # endpoint residuals): there the arrival mismatch is the honest
    # representation error and is left to accumulate; everywhere else the
    # deficit against the shifted indicator is injected (mass entering
    # through the sphere, cohort-seam churn) and surpluses are trimmed
    project = np.ones(ny * nx * bins, dtype=bool)
    for res in (step.residual1, step.residual2):
        if res is not None and len(res):
            key = _grid_key(field, bins, res.positions[:, 0],
                            res.positions[:, 1], res.positions[:, 2])
            project[key] = False

    # seed one curve per (cell, bin, sub-node) quantum of the slice
    mask = field.ball_mask()
    jj, ii = np.nonzero(mask)
    phic = field.phi[jj, ii]
    nodes = (np.arange(bins)[:, None] + (np.arange(sub)[None, :] + 0.5) / sub) * da
    keep = phic[:, None, None] >= nodes[None, :, :]
    if side == "epi":
        keep = ~keep
    ci, ck, cs = np.nonzero(keep)

    cols = _Cols(
        names=["x", "y", "a", "vx", "vy", "w", "bin", "root", "death", "head",
               "fate"],
        dtypes=[float, float, float, float, float, float, np.int64, float,
                float, np.int64, np.uint8],
        cap=max(4 * ci.size, 1024),
    )
    sa = nodes[ck, cs]
    cols.append(
        x=xs[ii[ci]].astype(float),
        y=ys[jj[ci]].astype(float),
        a=sa,
        vx=-np.sin(sa),
        vy=np.cos(sa),
        w=np.full(ci.size, quantum),
        bin=ck.astype(np.int64),
        root=np.zeros(ci.size),
        death=np.full(ci.size, np.nan),
        head=np.arange(ci.size, dtype=np.int64),
        fate=np.zeros(ci.size, dtype=np.uint8),
    )
    ev_blocks = {
        nm: [blk]
        for nm, blk in (
            ("t", np.zeros(ci.size)),
            ("x", xs[ii[ci]].astype(float)),
            ("y", ys[jj[ci]].astype(float)),
            ("a", sa.copy()),
            ("ap", np.full(ci.size, np.nan)),
            ("dx", np.zeros(ci.size)),
            ("dy", np.zeros(ci.size)),
            ("prev", np.full(ci.size, -1, dtype=np.int64)),
        )
    }
    ev_count = ci.size
    initial_mass = float(cols.col("w").sum())
    injected_per_step = np.zeros(nsteps)
    exited_per_step = np.zeros(nsteps)
    trimmed_per_step = np.zeros(nsteps)
    inject_floor = 1e-13 * da * area
    surplus_tol = 1e-13 * da * area
    child_floor = 1e-14 * quantum

    maskflat = mask.ravel()

    for k in range(nsteps):
        t1 = (k + 1) * t_bar
        w_all = cols.col("w")
        ia = np.flatnonzero(np.isnan(cols.col("death")) & (w_all > 0.0))
        x = cols.col("x")[ia]
        y = cols.col("y")[ia]
        vx = cols.col("vx")[ia]
        vy = cols.col("vy")[ia]
        rx, ry = x - cx0, y - cy0
        pv = rx * vx + ry * vy
        disc = pv * pv - (rx * rx + ry * ry - R2)
        texit = -pv + np.sqrt(np.maximum(disc, 0.0))
        leaving = texit < t_bar * (1.0 - 1e-12)
        if leaving.any():
            di = ia[leaving]
            cols.col("death")[di] = k * t_bar + np.maximum(texit[leaving], 0.0)
            cols.col("fate")[di] = 1
            exited_per_step[k] += float(w_all[di].sum())
            ia = ia[~leaving]
            x, y, vx, vy = x[~leaving], y[~leaving], vx[~leaving], vy[~leaving]
        x = x + vx * t_bar
        y = y + vy * t_bar
        cols.col("x")[ia] = x
        cols.col("y")[ia] = y

        # bilinear deposit of the arrivals; corner fractions falling on
        # cells outside the ball mask are mass leaving the masked region
        b = cols.col("bin")[ia]
        wv = cols.col("w")[ia].copy()
        i0, j0, fx, fy = _cic_fractions(field, x, y)
        arr = np.zeros(gsize)
        surv_corners = []
        norm = np.zeros(ia.size)
        for di_, dj_, cf in _cic_corners(fx, fy):
            iiq = np.clip(i0 + di_, 0, nx - 1)
            jjq = np.clip(j0 + dj_, 0, ny - 1)
            cell = jjq * nx + iiq
            mcf = cf * maskflat[cell]
            norm += mcf
            key = cell * bins + b
            surv_corners.append((key, mcf))
            arr += np.bincount(key, weights=wv * mcf, minlength=gsize)
        np.minimum(norm, 1.0, out=norm)

        # binary surplus trim: outside the structure cells no (cell, bin)
        # may exceed the shifted-indicator mass.  A curve whose deposit
        # touches an overfull cell is removed whole and the cell rebuilt
        # by the deficit injection below; a fractional per-corner factor
        # could not be carried by the single stored weight, and the
        # overshoot would reappear at measurement time
        surplus = project & (arr > m2flat + surplus_tol)
        kill = np.zeros(ia.size, dtype=bool)
        for key, mcf in surv_corners:
            kill |= (mcf > 1e-15) & surplus[key]
        fcur = np.where(kill, 0.0, 1.0)
        fsurv = norm * fcur

        # split the leaked fraction (corners outside the ball mask) and
        # the killed deposits off as children sharing the parent's whole
        # node history and root, so every aggregate telescopes and the
        # split mass stays counted over the common past
        leak = wv * (1.0 - norm)
        trim = wv * norm * kill.astype(float)
        for amount, fate_code, store in ((leak, 2, exited_per_step),
                                         (trim, 4, trimmed_per_step)):
            lk = np.flatnonzero(amount > 1e-12 * wv)
            if lk.size == 0:
                continue
            gi = ia[lk]
            cols.append(
                x=x[lk], y=y[lk], a=cols.col("a")[gi],
                vx=vx[lk], vy=vy[lk], w=amount[lk],
                bin=b[lk], root=cols.col("root")[gi],
                death=np.full(lk.size, t1),
                head=cols.col("head")[gi],
                fate=np.full(lk.size, fate_code, dtype=np.uint8),
            )
            store[k] += float(amount[lk].sum())
        wcol = cols.col("w")
        wcol[ia] = wv * fsurv
        drained = ia[fsurv <= 1e-12]
        if drained.size:
            cols.col("death")[drained] = t1
            cols.col("fate")[drained] = 3

        # inject the deficit against the shifted indicator (entering mass,
        # cohort-seam churn, cells vacated by the trim), except at the
        # structure cells
        arr2 = arr
        ki = np.flatnonzero(kill)
        if ki.size:
            arr2 = arr.copy()
            for key, mcf in surv_corners:
                arr2 -= np.bincount(key[ki], weights=wv[ki] * mcf[ki],
                                    minlength=gsize)
        deficit = np.where(project, m2flat - arr2, 0.0)
        nzi = np.flatnonzero(deficit > inject_floor)
        inj_ids = np.zeros(0, dtype=np.int64)
        if nzi.size:
            cell = nzi // bins
            bq = nzi % bins
            iq = cell % nx
            jq = cell // nx
            px = xs[iq].astype(float)
            py = ys[jq].astype(float)
            pa = (bq + 0.5) * da
            dw = deficit[nzi]
            heads = ev_count + np.arange(nzi.size, dtype=np.int64)
            inj_ids = cols.append(
                x=px, y=py, a=pa, vx=-np.sin(pa), vy=np.cos(pa), w=dw,
                bin=bq.astype(np.int64), root=np.full(nzi.size, t1),
                death=np.full(nzi.size, np.nan), head=heads,
                fate=np.zeros(nzi.size, dtype=np.uint8),
            )
            ev_blocks["t"].append(np.full(nzi.size, t1))
            ev_blocks["x"].append(px.copy())
            ev_blocks["y"].append(py.copy())
            ev_blocks["a"].append(pa.copy())
            ev_blocks["ap"].append(np.full(nzi.size, np.nan))
            ev_blocks["dx"].append(np.zeros(nzi.size))
            ev_blocks["dy"].append(np.zeros(nzi.size))
            ev_blocks["prev"].append(np.full(nzi.size, -1, dtype=np.int64))
            ev_count += nzi.size
            injected_per_step[k] += float(dw.sum())

        if reloc.row_start.size == 0:
            continue

        # relocation slots: the masked corner fractions per survivor (with
        # the weight carried before the exit split) and one slot per
        # injection; slot mass is the arrival mass at that (cell, bin)
        cands = []
        for key, mcf in surv_corners:
            row = reloc.rowgrid[key]
            ok = (row >= 0) & (mcf > 1e-12) & ~kill
            if ok.any():
                cands.append((ia[ok], row[ok], mcf[ok] * wv[ok]))
        if inj_ids.size:
            rowi = reloc.rowgrid[nzi]
            ok = rowi >= 0
            if ok.any():
                cands.append((inj_ids[ok], rowi[ok], dw[ok]))
        if not cands:
            continue
        pc = np.concatenate([c[0] for c in cands])
        pr = np.concatenate([c[1] for c in cands])
        pw = np.concatenate([c[2] for c in cands])
        ln = reloc.row_len[pr]
        total = int(ln.sum())
        if total == 0:
            continue
        rep = np.repeat(pc, ln)
        base = np.repeat(reloc.row_start[pr], ln)
        off = np.arange(total) - np.repeat(np.cumsum(ln) - ln, ln)
        eix = base + off
        cw = np.repeat(pw, ln) * reloc.row_frac[eix]
        good = cw > child_floor
        rep, eix, cw = rep[good], eix[good], cw[good]
        if rep.size == 0:
            continue
        # at most 8 children per parent: keep the heaviest, the rest of
        # the mass simply stays with the parent until a later step
        order = np.lexsort((-cw, rep))
        rep, eix, cw = rep[order], eix[order], cw[order]
        newg = np.empty(rep.size, dtype=bool)
        newg[0] = True
        newg[1:] = rep[1:] != rep[:-1]
        gidx = np.cumsum(newg) - 1
        first = np.flatnonzero(newg)
        rank = np.arange(rep.size) - first[gidx]
        keep8 = rank < 8
        rep, eix, cw = rep[keep8], eix[keep8], cw[keep8]

        pxp = cols.col("x")[rep]
        pyp = cols.col("y")[rep]
        pap = cols.col("a")[rep]
        nxp = pxp + reloc.row_dx[eix]
        nyp = pyp + reloc.row_dy[eix]
        rr = np.hypot(nxp - cx0, nyp - cy0)
        clampm = rr > field.R
        if clampm.any():
            sc = field.R / rr[clampm]
            nxp[clampm] = cx0 + (nxp[clampm] - cx0) * sc
            nyp[clampm] = cy0 + (nyp[clampm] - cy0) * sc
        na = reloc.row_anew[eix]
        heads = ev_count + np.arange(rep.size, dtype=np.int64)
        cols.append(
            x=nxp, y=nyp, a=na, vx=-np.sin(na), vy=np.cos(na), w=cw,
            bin=np.clip((na / da).astype(np.int64), 0, bins - 1),
            root=cols.col("root")[rep],
            death=np.full(rep.size, np.nan), head=heads,
            fate=np.zeros(rep.size, dtype=np.uint8),
        )
        ev_blocks["t"].append(np.full(rep.size, t1))
        ev_blocks["x"].append(nxp)
        ev_blocks["y"].append(nyp)
        ev_blocks["a"].append(na.copy())
        ev_blocks["ap"].append(pap)
        ev_blocks["dx"].append(nxp - pxp)
        ev_blocks["dy"].append(nyp - pyp)
        ev_blocks["prev"].append(cols.col("head")[rep].copy())
        ev_count += rep.size
        dec = np.bincount(rep, weights=cw, minlength=cols.size)
        wcol = cols.col("w")
        np.maximum(wcol - dec[: cols.size], 0.0, out=wcol)

    # expand the shared-prefix chains into a CSR node table
    ev = {nm: np.concatenate(blks) for nm, blks in ev_blocks.items()}
    ncur = cols.size
    head = cols.col("head").copy()
    depth = np.zeros(ncur, dtype=np.int64)
    idx = head.copy()
    while True:
        m = idx >= 0
        if not m.any():
            break
        depth[m] += 1
        idx[m] = ev["prev"][idx[m]]
    ptr = np.zeros(ncur + 1, dtype=np.int64)
    np.cumsum(depth, out=ptr[1:])
    nt = np.empty(ptr[-1])
    nxc = np.empty(ptr[-1])
    nyc = np.empty(ptr[-1])
    nac = np.empty(ptr[-1])
    nap = np.empty(ptr[-1])
    ndx = np.empty(ptr[-1])
    ndy = np.empty(ptr[-1])
    slot = ptr[1:].copy()
    idx = head
    while True:
        m = idx >= 0
        if not m.any():
            break
        slot[m] -= 1
        src = idx[m]
        dst = slot[m]
        nt[dst] = ev["t"][src]
        nxc[dst] = ev["x"][src]
        nyc[dst] = ev["y"][src]
        nac[dst] = ev["a"][src]
        nap[dst] = ev["ap"][src]
        ndx[dst] = ev["dx"][src]
        ndy[dst] = ev["dy"][src]
        idx = idx.copy() if idx is head else idx
        idx[m] = ev["prev"][src]

    death = cols.col("death").copy()
    death[np.isnan(death)] = np.inf
    acct = {
        "initial": initial_mass,
        "injected": float(injected_per_step.sum()),
        "exited": float(exited_per_step.sum()),
        "trimmed": float(trimmed_per_step.sum()),
        "injected_per_step": injected_per_step,
        "exited_per_step": exited_per_step,
        "trimmed_per_step": trimmed_per_step,
    }
    return CurveEnsemble(
        n=n, side=side, field=field,
        weight=cols.col("w").copy(), birth=cols.col("root").copy(),
        death=death, node_ptr=ptr, node_t=nt, node_x=nxc, node_y=nyc,
        node_a=nac, node_aprev=nap, node_dx=ndx, node_dy=ndy,
        step=step, bins=bins, sub=sub, horizon=horizon, accounting=acct,
        fate=cols.col("fate").copy(),
    )


# ---------------------------------------------------------------------------
# one inspectable block of curve segments (single step, explicit objects)


def build_block_curves(field: LiftedField, step: TransportStep) -> list:
    """Curve segments of length <= t_bar for every seed near the ball.

    Seeds inside the ball move straight and have their endpoint relocated
    by the plan (mass split into children when the plan splits the cell
    mass); seeds that exit end on the sphere at the closed-form exit
    time; seeds outside that enter start at their entry time.  Raises
    BookkeepingError if a positive-mass endpoint lands in a cell the
    shifted indicator says is empty.
    """
    bins, sub, side = step.bins, step.sub, step.side
    t_bar = step.t_bar
    cx0, cy0 = field.center
    da = field.M / bins
    area = field.cell_area
    reloc = _RelocationTable(field, step)
    m2flat = _dense_cube(field, bins, step.mu2).ravel()

    part = partition_E123(field, t_bar, bins=bins)
    phi_here = field.lookup(part.x, part.y)
    subn = (np.arange(sub) + 0.5) / sub * da
    lo = part.a - 0.5 * da
    if side == "epi":
        counts = np.sum(lo[:, None] + subn[None, :] > phi_here[:, None], axis=1)
    else:
        counts = np.sum(phi_here[:, None] >= lo[:, None] + subn[None, :], axis=1)
    weights = counts * (da / sub) * area

    out = []
    for idx in range(part.x.size):
        w = float(weights[idx])
        lab = int(part.label[idx])
        if w <= 0.0 or lab == 0:
            continue
        p = np.array([part.x[idx], part.y[idx]])
        a = float(part.a[idx])
        v = np.array([-math.sin(a), math.cos(a)])
        if lab == E2:
            tp = float(part.t_plus[idx])
            out.append(Curve(0.0, tp, w, side, np.array([[0.0, p[0], p[1], a]])))
            continue
        t0 = float(part.t_minus[idx]) if lab == E3 else 0.0
        start = p + v * t0
        endpoint = p + v * t_bar
        key = int(
            _grid_key(field, bins, endpoint[0], endpoint[1], a)
        )
        if m2flat[key] <= 0.0:
            raise BookkeepingError(
                "endpoint cell of a mass-%g seed carries no shifted mass" % w
            )
        row = int(reloc.rowgrid[key])
        base_nodes = [[t0, start[0], start[1], a]]
        if row < 0:
            out.append(Curve(t0, t_bar, w, side, np.array(base_nodes)))
            continue
        s0, ln = reloc.row_start[row], reloc.row_len[row]
        rest = 1.0
        for e in range(s0, s0 + ln):
            g = float(reloc.row_frac[e])
            child_nodes = base_nodes + [[
                t_bar,
                endpoint[0] + reloc.row_dx[e],
                endpoint[1] + reloc.row_dy[e],
                reloc.row_anew[e],
            ]]
            out.append(Curve(t0, t_bar, w * g, side, np.array(child_nodes)))
            rest -= g
        if rest > 1e-12:
            out.append(Curve(t0, t_bar, w * rest, side, np.array(base_nodes)))
    return out


# ---------------------------------------------------------------------------
# error functionals


def pushforward_at(ens: CurveEnsemble, t: float, limit: str = "right") -> DiscreteMeasure:
    """Atoms at curve positions at time t; curves not alive are excluded.

    The right limit (default) uses post-relocation states at node times,
    the left limit pre-relocation states.
    """
    alive = ens.alive_mask(t, limit)
    if not alive.any():
        return DiscreteMeasure(np.zeros((0, 3)), np.zeros(0), label="pushforward")
    if limit == "right":
        f = ens.node_t <= t
    else:
        f = ens.node_t < t
    cand = np.where(f, np.arange(ens.node_count), -1)
    anchor = np.maximum.reduceat(cand, ens.node_ptr[:-1])
    sel = alive & (anchor >= 0)
    aidx = anchor[sel]
    a = ens.node_a[aidx]
    dt = t - ens.node_t[aidx]
    x = ens.node_x[aidx] - np.sin(a) * dt
    y = ens.node_y[aidx] + np.cos(a) * dt
    return DiscreteMeasure(
        np.column_stack([x, y, a]), ens.weight[sel],
        label="pushforward_%s" % ens.side,
    )


def representation_error(ens: CurveEnsemble, field: LiftedField, t: float,
                         metric: AnisotropicMetric | None = None):
    """(tv, w1) distance between the time-t pushforward and the slice.

    Both measures are aggregated bilinearly on the (cell, bin) grid; the
    W1 part uses a fixed metric (default L = 1) so values are comparable
    across levels.  Unequal totals are handled by the trimming bound:
    realized coupling cost plus mass gap times the cylinder diameter.
    """
    bins, sub = ens.bins, ens.sub
    if bins is None:
        raise ValueError("ensemble carries no grid resolution")
    target = _chi_measure(field, bins, 0.0, sub, ens.side)
    tg = _dense_cube(field, bins, target).ravel()
    push = pushforward_at(ens, t)
    pg = _cic_cube(field, bins, push).ravel()
    diff = pg - tg
    tv = float(np.abs(diff).sum())
    da = field.M / bins
    xs, ys = field.xs(), field.ys()
    centers = (np.arange(bins) + 0.5) * da
    def measure_of(sel_w):
        nz = np.flatnonzero(sel_w > 0.0)
        cell = nz // bins
        pos = np.column_stack([
            xs[cell % field.nx], ys[cell // field.nx], centers[nz % bins]
        ])
        return DiscreteMeasure(pos, sel_w[nz], label="diff")
    mp = measure_of(np.maximum(diff, 0.0))
    mn = measure_of(np.maximum(-diff, 0.0))
    if metric is None:
        metric = AnisotropicMetric(1.0)
    if len(mp) == 0 and len(mn) == 0:
        return tv, 0.0
    diam = metric.L * 2.0 * field.R + field.M
    if tv <= 1e-11 * max(1.0, float(tg.sum())):
        # roundoff-level mismatch; the crude diameter bound already beats
        # any tolerance an exact solve could certify
        return tv, float(diam * 0.5 * tv)
    gap = abs(mp.total_mass - mn.total_mass)
    scale = max(mp.total_mass, mn.total_mass, 1e-300)
    if gap <= 1e-9 * scale:
        w1 = w1_plan(mp, mn, metric).cost if len(mp) and len(mn) else 0.0
    else:
        p_t, n_t, c1, c2 = trim_unbalanced(mp, mn, metric, diam)
        w1 = c1 + c2 * diam
    return tv, float(w1)


def horizontal_error(ens: CurveEnsemble) -> float:
    """Weighted total spatial relocation over all nodes."""
    w = ens.weight[ens.node_curve]
    return float(np.sum(w * np.hypot(ens.node_dx, ens.node_dy)))


def vertical_cost(ens: CurveEnsemble) -> float:
    """Weighted total variation of the angle over all curves."""
    m = ~np.isnan(ens.node_aprev)
    w = ens.weight[ens.node_curve[m]]
    return float(np.sum(w * np.abs(ens.node_a[m] - ens.node_aprev[m])))


def curve_defect(curve: Curve) -> CurveDefect:
    """Signed jump atoms of one curve: sign +1 where the angle increases."""
    aa = curve.nodes[:, 3]
    d = np.diff(aa)
    m = np.abs(d) > 0.0
    t = curve.nodes[1:, 0][m]
    x = curve.nodes[1:, 1][m]
    y = curve.nodes[1:, 2][m]
    lo = np.minimum(aa[:-1], aa[1:])[m]
    hi = np.maximum(aa[:-1], aa[1:])[m]
    sg = np.sign(d[m]).astype(np.int8)
    return CurveDefect(t, x, y, lo, hi, sg, curve.weight * (hi - lo))


def ensemble_defect(ens: CurveEnsemble) -> CurveDefect:
    """Aggregated signed jump atoms of the whole ensemble.

    One atom per node jump per curve; children that share a historical
    jump each contribute their own weight, so the masses telescope to
    the weights carried when the jump happened.
    """
    d = ens.node_a - ens.node_aprev
    m = ~np.isnan(ens.node_aprev) & (np.abs(d) > 0.0)
    w = ens.weight[ens.node_curve[m]]
    lo = np.minimum(ens.node_a[m], ens.node_aprev[m])
    hi = np.maximum(ens.node_a[m], ens.node_aprev[m])
    return CurveDefect(
        ens.node_t[m], ens.node_x[m], ens.node_y[m], lo, hi,
        np.sign(d[m]).astype(np.int8), w * (hi - lo),
    )


def _lattice(lo, hi, s):
    if hi <= lo:
        return np.zeros(0)
    k = max(1, int(math.floor((hi - lo) / s)) + 1)
    return lo + (hi - lo) * (np.arange(k) + 0.5) / k


def _product_tests(field: LiftedField, horizon: float, count: int):
    """Deterministic product-bump family on (0,1) x ball x [0,M],
    coarse scales first, spatial supports inside the ball."""
    cx0, cy0 = field.center
    out = []
    w = min(field.x_max - field.x_min, field.y_max - field.y_min)
    for lev in range(3):
        st = horizon / (4.0 * 2 ** lev)
        s = w / (5.0 * 2 ** lev)
        sa = field.M / (4.0 * 2 ** lev)
        rmax = field.R - s * math.sqrt(2.0)
        if rmax <= 0:
            continue
        for ct in _lattice(st, horizon - st, 2.0 * st):
            for cx in _lattice(cx0 - rmax, cx0 + rmax, 2.0 * s):
                for cy in _lattice(cy0 - rmax, cy0 + rmax, 2.0 * s):
                    if math.hypot(cx - cx0, cy - cy0) > rmax:
                        continue
                    for ca in _lattice(sa, field.M - sa, 2.0 * sa):
                        out.append((ct, st, cx, s, cy, s, ca, sa))
                        if len(out) >= count:
                            return out
    return out


def _defect_pairings(defect: CurveDefect, test):
    ct, st, cx, sx, cy, sy, ca, sa = test
    if len(defect) == 0:
        return 0.0, 0.0
    pt = bump((defect.t - ct) / st)
    pxy = bump((defect.x - cx) / sx) * bump((defect.y - cy) / sy)
    ai = sa * (
        bump_integral((defect.a_hi - ca) / sa)
        - bump_integral((defect.a_lo - ca) / sa)
    )
    wgt = defect.mass / (defect.a_hi - defect.a_lo)
    core = wgt * pt * pxy * ai
    return float(np.sum(defect.sign * core)), float(np.sum(np.abs(core)))


def decomposition_residual(
    ens_h: CurveEnsemble | None,
    ens_e: CurveEnsemble | None,
    U: DiscreteMeasure,
    tests: int = 48,
):
    """Worst test-function gap between aggregated curve defects and the
    product of time-Lebesgue with the defect measure.

    The hypograph pairing targets +U, the epigraph pairing -U; the
    absolute version compares unsigned defects against |U|.  Residuals
    are normalized by 1 + total variation of U.
    """
    some = ens_h if ens_h is not None else ens_e
    if some is None:
        raise ValueError("at least one ensemble is required")
    fieldref = some.field
    horizon = some.horizon
    fam = _product_tests(fieldref, horizon, tests)
    dh = ensemble_defect(ens_h) if ens_h is not None else None
    de = ensemble_defect(ens_e) if ens_e is not None else None
    Ux, Uy, Ua = (U.positions[:, c] for c in range(3))
    Uw = U.weights
    # U atoms stand for a-bins of the pipeline's common bin width; pairing
    # them through the bin-averaged test keeps both sides of the gap on
    # the same quadrature, so the residual measures placement and mass
    # mismatch instead of flooring at the midpoint-rule error
    dau = fieldref.M / (some.bins or 32)
    norm = 1.0 + float(np.abs(Uw).sum())
    res_signed = 0.0
    res_abs = 0.0
    for test in fam:
        ct, st, cx, sx, cy, sy, ca, sa = test
        it = st * (
            bump_integral((horizon - ct) / st) - bump_integral((0.0 - ct) / st)
        )
        tha = (sa / dau) * (
            bump_integral((Ua + 0.5 * dau - ca) / sa)
            - bump_integral((Ua - 0.5 * dau - ca) / sa)
        )
        pu = bump((Ux - cx) / sx) * bump((Uy - cy) / sy) * tha
        i_signed = it * float(np.sum(Uw * pu))
        i_abs = it * float(np.sum(np.abs(Uw) * pu))
        if dh is not None:
            s, ab = _defect_pairings(dh, test)
            res_signed = max(res_signed, abs(s - i_signed))
            res_abs = max(res_abs, abs(ab - i_abs))
        if de is not None:
            s, ab = _defect_pairings(de, test)
            res_signed = max(res_signed, abs(s + i_signed))
            res_abs = max(res_abs, abs(ab - i_abs))
    return res_signed / norm, res_abs / norm


# ---------------------------------------------------------------------------
# good-curve filter


def good_curve_filter(ens: CurveEnsemble, field: LiftedField, tol_bins: float = 0.0):
    """Drop the time portions of curves violating the strict graph
    inequality (a < phi on the hypograph side, a > phi on the epigraph
    side), sampled at half-cell resolution along each segment.

    Returns the filtered ensemble; the dropped time-integrated mass and
    the mass flagged within one bin of the graph are available on the
    result as .dropped_mass and .flagged_boundary_mass.
    """
    bins = ens.bins or 32
    da = field.M / bins
    slack = tol_bins * da + 1e-12
    step_len = 0.5 * min(field.dx, field.dy)

    nc = ens.node_curve
    ptr = ens.node_ptr
    counts = np.diff(ptr)
    lastmask = np.zeros(ens.node_count, dtype=bool)
    lastmask[ptr[1:] - 1] = True
    seg_end = np.empty(ens.node_count)
    seg_end[~lastmask] = ens.node_t[1:][~lastmask[:-1]]
    seg_end[lastmask] = np.minimum(ens.death[nc[lastmask]], ens.horizon)
    seg_len = np.maximum(seg_end - ens.node_t, 0.0)
    nsamp = np.maximum(np.ceil(seg_len / step_len).astype(np.int64), 1)
    nsamp[seg_len <= 0] = 0
    totsamp = int(nsamp.sum())

    seg_of = np.repeat(np.arange(ens.node_count), nsamp)
    loc = np.arange(totsamp) - np.repeat(np.cumsum(nsamp) - nsamp, nsamp)
    dt_s = np.repeat(seg_len / np.maximum(nsamp, 1), nsamp)
    tau = ens.node_t[seg_of] + (loc + 0.5) * dt_s
    a_s = ens.node_a[seg_of]
    xr = ens.node_x[seg_of] - np.sin(a_s) * (tau - ens.node_t[seg_of])
    yr = ens.node_y[seg_of] + np.cos(a_s) * (tau - ens.node_t[seg_of])
    phi_s = field.lookup(xr, yr)
    if ens.side == "epi":
        viol = a_s <= phi_s + slack - 1e-12
        near = np.abs(a_s - phi_s) <= da + slack
    else:
        viol = a_s >= phi_s - slack + 1e-12
        near = np.abs(a_s - phi_s) <= da + slack
    curve_of = nc[seg_of]
    wts = ens.weight[curve_of]
    dropped = float(np.sum(wts * dt_s * viol))
    flagged = float(np.sum(wts * dt_s * near))
    bad_curves = np.unique(curve_of[viol])

    if bad_curves.size == 0:
        out = CurveEnsemble(
            n=ens.n, side=ens.side, field=field, weight=ens.weight.copy(),
            birth=ens.birth.copy(), death=ens.death.copy(),
            node_ptr=ens.node_ptr.copy(), node_t=ens.node_t.copy(),
            node_x=ens.node_x.copy(), node_y=ens.node_y.copy(),
            node_a=ens.node_a.copy(), node_aprev=ens.node_aprev.copy(),
            node_dx=ens.node_dx.copy(), node_dy=ens.node_dy.copy(),
            step=ens.step, bins=ens.bins, sub=ens.sub, horizon=ens.horizon,
            accounting=ens.accounting,
        )
        out.dropped_mass = 0.0
        out.flagged_boundary_mass = flagged
        return out

    badset = np.zeros(len(ens), dtype=bool)
    badset[bad_curves] = True
    goodset = ~badset

    # untouched block
    keep_nodes = goodset[nc]
    new_w = [ens.weight[goodset]]
    new_b = [ens.birth[goodset]]
    new_d = [ens.death[goodset]]
    new_counts = [counts[goodset]]
    nt = [ens.node_t[keep_nodes]]
    nx_ = [ens.node_x[keep_nodes]]
    ny_ = [ens.node_y[keep_nodes]]
    na_ = [ens.node_a[keep_nodes]]
    nap = [ens.node_aprev[keep_nodes]]
    ndx = [ens.node_dx[keep_nodes]]
    ndy = [ens.node_dy[keep_nodes]]

    # rebuild violating curves from their compliant sample runs
    sample_ptr = np.append(0, np.cumsum(nsamp))
    for i in bad_curves:
        lo_n, hi_n = ptr[i], ptr[i + 1]
        s_lo, s_hi = sample_ptr[lo_n], sample_ptr[hi_n]
        ok = ~viol[s_lo:s_hi]
        if not ok.any():
            continue
        tt = tau[s_lo:s_hi]
        hw = 0.5 * dt_s[s_lo:s_hi]
        edges = np.flatnonzero(np.diff(ok.astype(np.int8)))
        starts = [0] if ok[0] else []
        starts += [int(e) + 1 for e in edges if not ok[e]]
        ends = [int(e) + 1 for e in edges if ok[e]]
        if ok[-1]:
            ends.append(ok.size)
        nd_t = ens.node_t[lo_n:hi_n]
        for s0, s1 in zip(starts, ends):
            t_lo = tt[s0] - hw[s0]
            t_hi = tt[s1 - 1] + hw[s1 - 1]
            cv = ens.curve(i)
            px, py = cv.position_at(t_lo)
            aa = cv.angle_at(t_lo)
            inner = (nd_t > t_lo + 1e-15) & (nd_t <= t_hi + 1e-15)
            rows_t = np.concatenate([[t_lo], nd_t[inner]])
            rows_x = np.concatenate([[px], ens.node_x[lo_n:hi_n][inner]])
            rows_y = np.concatenate([[py], ens.node_y[lo_n:hi_n][inner]])
            rows_a = np.concatenate([[aa], ens.node_a[lo_n:hi_n][inner]])
            rows_ap = np.concatenate([[np.nan], ens.node_aprev[lo_n:hi_n][inner]])
            rows_dx = np.concatenate([[0.0], ens.node_dx[lo_n:hi_n][inner]])
            rows_dy = np.concatenate([[0.0], ens.node_dy[lo_n:hi_n][inner]])
            new_w.append([ens.weight[i]])
            new_b.append([t_lo])
            new_d.append([t_hi])
            new_counts.append([rows_t.size])
            nt.append(rows_t)
            nx_.append(rows_x)
            ny_.append(rows_y)
            na_.append(rows_a)
            nap.append(rows_ap)
            ndx.append(rows_dx)
            ndy.append(rows_dy)

    w_all = np.concatenate(new_w)
    cnts = np.concatenate([np.asarray(c, dtype=np.int64) for c in new_counts])
    out = CurveEnsemble(
        n=ens.n, side=ens.side, field=field, weight=w_all,
        birth=np.concatenate(new_b), death=np.concatenate(new_d),
        node_ptr=np.append(0, np.cumsum(cnts)),
        node_t=np.concatenate(nt), node_x=np.concatenate(nx_),
        node_y=np.concatenate(ny_), node_a=np.concatenate(na_),
        node_aprev=np.concatenate(nap), node_dx=np.concatenate(ndx),
        node_dy=np.concatenate(ndy),
        step=ens.step, bins=ens.bins, sub=ens.sub, horizon=ens.horizon,
        accounting=ens.accounting,
    )
    out.dropped_mass = dropped
    out.flagged_boundary_mass = flagged
    return out


# ---------------------------------------------------------------------------
# external interfaces


def write_ensemble_csv(ens: CurveEnsemble, curves_path, nodes_path) -> None:
    """Two-file dump: per-curve rows and per-node rows, 17 digits."""
    with open(curves_path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["id", "side", "weight", "t_minus", "t_plus"])
        for i in range(len(ens)):
            wr.writerow([
                i, ens.side, "%.17g" % ens.weight[i],
                "%.17g" % ens.birth[i],
                "%.17g" % min(ens.death[i], ens.horizon),
            ])
    nc = ens.node_curve
    with open(nodes_path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["id", "t", "x", "y", "a"])
        for k in range(ens.node_count):
            wr.writerow([
                int(nc[k]), "%.17g" % ens.node_t[k], "%.17g" % ens.node_x[k],
                "%.17g" % ens.node_y[k], "%.17g" % ens.node_a[k],
            ])


def load_ensemble_csv(curves_path, nodes_path, field=None, n=None,
                      bins=None, sub=None, horizon=1.0) -> CurveEnsemble:
    """Rebuild an ensemble from the two-file dump.

    The angle-before-node and relocation columns are reconstructed from
    the node rows via the motion law, which is exact for dumps produced
    by write_ensemble_csv.
    """
    with open(curves_path, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd)
        if header != ["id", "side", "weight", "t_minus", "t_plus"]:
            raise ValueError("unexpected curve header %r" % (header,))
        ids, sides, w, b, d = [], [], [], [], []
        for row in rd:
            ids.append(int(row[0]))
            sides.append(row[1])
            w.append(float(row[2]))
            b.append(float(row[3]))
            d.append(float(row[4]))
    side = sides[0] if sides else "hypo"
    order = np.argsort(ids, kind="stable")
    w = np.asarray(w)[order]
    b = np.asarray(b)[order]
    d = np.asarray(d)[order]
    # a t_plus at the horizon is read back as running through it; curves
    # that exited exactly there are not distinguishable from the dump
    d[d >= horizon] = np.inf
    ncur = len(ids)

    with open(nodes_path, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd)
        if header != ["id", "t", "x", "y", "a"]:
            raise ValueError("unexpected node header %r" % (header,))
        rows = [(int(r[0]), float(r[1]), float(r[2]), float(r[3]), float(r[4]))
                for r in rd]
    cid = np.array([r[0] for r in rows], dtype=np.int64)
    nt = np.array([r[1] for r in rows])
    nx_ = np.array([r[2] for r in rows])
    ny_ = np.array([r[3] for r in rows])
    na_ = np.array([r[4] for r in rows])
    order = np.lexsort((nt, cid))
    cid, nt, nx_, ny_, na_ = cid[order], nt[order], nx_[order], ny_[order], na_[order]
    cnts = np.bincount(cid, minlength=ncur)
    ptr = np.append(0, np.cumsum(cnts))
    nap = np.full(nt.size, np.nan)
    ndx = np.zeros(nt.size)
    ndy = np.zeros(nt.size)
    inner = np.ones(nt.size, dtype=bool)
    inner[ptr[:-1]] = False
    prev = np.flatnonzero(inner) - 1
    cur = np.flatnonzero(inner)
    nap[cur] = na_[prev]
    dt = nt[cur] - nt[prev]
    ndx[cur] = nx_[cur] - (nx_[prev] - np.sin(na_[prev]) * dt)
    ndy[cur] = ny_[cur] - (ny_[prev] + np.cos(na_[prev]) * dt)
    return CurveEnsemble(
        n=n, side=side, field=field, weight=w, birth=b, death=d,
        node_ptr=ptr, node_t=nt, node_x=nx_, node_y=ny_, node_a=na_,
        node_aprev=nap, node_dx=ndx, node_dy=ndy,
        bins=bins, sub=sub, horizon=horizon,
    )


def write_summary_json(ens: CurveEnsemble, path, U: DiscreteMeasure | None = None,
                       tests: int = 32) -> None:
    """Level summary with the error functionals and the alive-mass grid."""
    ts, masses = ens.alive_mass_grid()
    if U is not None:
        if ens.side == "hypo":
            rs, ra = decomposition_residual(ens, None, U, tests=tests)
        else:
            rs, ra = decomposition_residual(None, ens, U, tests=tests)
    else:
        rs = ra = None
    data = {
        "n": ens.n,
        "e_h": horizontal_error(ens),
        "e_v": vertical_cost(ens),
        "alive_mass": [float(v) for v in masses],
        "res_signed": rs,
        "res_abs": ra,
    }
    with open(path, "w") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")
