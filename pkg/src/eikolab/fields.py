"""Grid-sampled unit vector fields u = (cos(phi), sin(phi)) with a bounded lifting.

A field is stored as cell averages of the lifting phi on a rectangular grid and
is interpreted as piecewise constant on cells.  All downstream constructions
(defect measures, transport steps, curve ensembles) treat that piecewise
constant interpolant as the exact object.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * math.pi

# Rankine-Hugoniot style trace tolerance for built-in jump constructions.
TRACE_TOL = 1e-12


class FieldFormatError(ValueError):
    """Malformed field file or unknown builtin name."""


class FieldRangeError(ValueError):
    """A lifting value lies outside [0, M] or a parameter is out of range."""


class TraceConditionError(ValueError):
    """Normal traces of e^{i phi} disagree across a requested jump line."""


class GeometryError(ValueError):
    """Ball/domain geometry is inconsistent (ball not strictly inside, etc.)."""


@dataclass(frozen=True)
class LiftedField:
    """Cell-centered lifting grid on [x_min, x_max] x [y_min, y_max].

    phi has shape (ny, nx); row j holds the cells centered at
    y_min + (j + 1/2) * dy, so row 0 is the bottom of the domain.  The ball
    B_R is centered at the domain center and must sit strictly inside the
    rectangle.
    """

    nx: int
    ny: int
    x_min: float
    x_max: float
    y_min: float
    y_max: float
    phi: np.ndarray
    M: float
    R: float

    def __post_init__(self):
        if self.nx < 8 or self.ny < 8:
            raise GeometryError(f"grid must be at least 8x8, got {self.nx}x{self.ny}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise GeometryError("empty domain rectangle")
        if self.M <= 0:
            raise FieldRangeError(f"angular bound M must be positive, got {self.M}")
        if self.R <= 0:
            raise GeometryError(f"ball radius must be positive, got {self.R}")
        phi = np.asarray(self.phi, dtype=float)
        if phi.shape != (self.ny, self.nx):
            raise FieldFormatError(
                f"phi shape {phi.shape} does not match grid {self.ny}x{self.nx}"
            )
        bad = np.argwhere((phi < 0.0) | (phi > self.M))
        if bad.size:
            iy, ix = bad[0]
            raise FieldRangeError(
                f"phi out of range [0, {self.M:.17g}] at cell (ix={ix}, iy={iy}): "
                f"{phi[iy, ix]:.17g}"
            )
        phi = phi.copy()
        phi.setflags(write=False)
        object.__setattr__(self, "phi", phi)
        if self.boundary_gap <= 0.0:
            raise GeometryError(
                f"ball of radius {self.R} not strictly inside the domain rectangle"
            )

    # -- geometry helpers ---------------------------------------------------

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / self.nx

    @property
    def dy(self) -> float:
        return (self.y_max - self.y_min) / self.ny

    @property
    def cell_area(self) -> float:
        return self.dx * self.dy

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))

    @property
    def boundary_gap(self) -> float:
        """Distance from B_R to the domain boundary."""
        cx, cy = self.center
        return min(
            cx - self.R - self.x_min,
            self.x_max - (cx + self.R),
            cy - self.R - self.y_min,
            self.y_max - (cy + self.R),
        )

    def xs(self) -> np.ndarray:
        """x coordinates of cell centers, length nx."""
        return self.x_min + (np.arange(self.nx) + 0.5) * self.dx

    def ys(self) -> np.ndarray:
        return self.y_min + (np.arange(self.ny) + 0.5) * self.dy

    def cell_index(self, x, y) -> tuple[np.ndarray, np.ndarray]:
        """Containing cell of each point, clipped into the grid."""
        ix = np.floor((np.asarray(x) - self.x_min) / self.dx).astype(np.int64)
        iy = np.floor((np.asarray(y) - self.y_min) / self.dy).astype(np.int64)
        return np.clip(ix, 0, self.nx - 1), np.clip(iy, 0, self.ny - 1)

    def lookup(self, x, y) -> np.ndarray:
        """Piecewise-constant evaluation of phi at arbitrary points."""
        ix, iy = self.cell_index(x, y)
        return self.phi[iy, ix]

    def unit_vector(self) -> tuple[np.ndarray, np.ndarray]:
        """Grids of cos(phi), sin(phi)."""
        return np.cos(self.phi), np.sin(self.phi)

    def ball_mask(self) -> np.ndarray:
        """Boolean (ny, nx) mask of cells whose center lies strictly in B_R."""
        cx, cy = self.center
        X, Y = np.meshgrid(self.xs(), self.ys())
        return (X - cx) ** 2 + (Y - cy) ** 2 < self.R**2


# -- builtin constructions --------------------------------------------------

BUILTIN_NAMES = ("constant", "single_jump", "two_jump", "vortex", "rarefaction")


def _builtin_frame(params: dict) -> tuple[int, int, float, float, float]:
    nx = int(params.pop("nx", 128))
    ny = int(params.pop("ny", nx))
    half_width = float(params.pop("half_width", 1.4))
    R = float(params.pop("R", 1.0))
    M = float(params.pop("M", TWO_PI))
    if half_width <= R:
        raise GeometryError(
            f"half_width {half_width} must exceed ball radius {R} so the ball "
            "sits strictly inside the domain"
        )
    return nx, ny, half_width, R, M


def make_builtin(name: str, params: dict | None = None, **kw) -> LiftedField:
    """Construct one of the reference fields.

    Shared parameters: nx, ny (grid), half_width (domain is the square
    [-half_width, half_width]^2), R (ball radius), M (angular bound).
    Per-name parameters are documented inline below.  Jump constructions
    validate the normal-trace matching condition to TRACE_TOL and refuse
    inconsistent data.
    """
    params = {**(params or {}), **kw}
    if name not in BUILTIN_NAMES:
        raise FieldFormatError(
            f"unknown builtin field {name!r}; expected one of {BUILTIN_NAMES}"
        )
    if name == "vortex":
        params.setdefault("M", 2.5 * math.pi)
    nx, ny, hw, R, M = _builtin_frame(params)
    dx = 2.0 * hw / nx
    dy = 2.0 * hw / ny
    xs = -hw + (np.arange(nx) + 0.5) * dx
    ys = -hw + (np.arange(ny) + 0.5) * dy
    X, Y = np.meshgrid(xs, ys)

    if name == "constant":
        value = float(params.pop("value", math.pi))
        _check_unused(name, params)
        if not 0.0 <= value <= M:
            raise FieldRangeError(f"constant value {value} outside [0, {M}]")
        phi = np.full((ny, nx), value)

    elif name == "single_jump":
        lo = float(params.pop("phi_minus", math.pi / 6.0))
        hi = float(params.pop("phi_plus", 5.0 * math.pi / 6.0))
        line_y = float(params.pop("line_y", 0.0))
        _check_unused(name, params)
        _check_trace(lo, hi)
        phi = np.where(Y > line_y, hi, lo)

    elif name == "two_jump":
        outer = float(params.pop("phi_outer", math.pi / 6.0))
        inner = float(params.pop("phi_inner", 5.0 * math.pi / 6.0))
        half_gap = float(params.pop("half_gap", 0.35))
        _check_unused(name, params)
        if not 0.0 < half_gap < R:
            raise FieldRangeError(f"half_gap {half_gap} must lie in (0, R)")
        _check_trace(outer, inner)
        phi = np.where(np.abs(Y) < half_gap, inner, outer)

    elif name == "vortex":
        _check_unused(name, params)
        # Tangential unit field around the center; the lifting needs a cut,
        # which we place on the positive x axis.  The cut carries a 2*pi
        # lifting jump even though the vector field itself is continuous
        # there, so it shows up in the defect measure by design.
        theta = np.arctan2(Y, X)
        theta = np.where(theta < 0.0, theta + TWO_PI, theta)
        phi = theta + 0.5 * math.pi
        if M < 2.5 * math.pi - 1e-12:
            raise FieldRangeError(
                f"vortex lifting spans [pi/2, 5pi/2); M={M} is too small"
            )

    else:  # rarefaction
        lo = float(params.pop("phi_lo", 0.75 * math.pi))
        hi = float(params.pop("phi_hi", 1.25 * math.pi))
        drop = float(params.pop("drop", hw))
        _check_unused(name, params)
        if not lo < hi:
            raise FieldRangeError("rarefaction needs phi_lo < phi_hi")
        # Fan of directions emanating from a point below the domain; the
        # angular ramp is clamped, which keeps phi continuous across the
        # wedge boundaries, so the field has no jump inside the domain.
        yc = -hw - drop
        theta = np.arctan2(Y - yc, X)
        phi = np.clip(theta + 0.5 * math.pi, lo, hi)
        if not (0.5 * math.pi < lo and hi < 1.5 * math.pi):
            raise FieldRangeError(
                "rarefaction fan must keep [phi_lo, phi_hi] inside (pi/2, 3pi/2)"
            )

    if phi.max() > M or phi.min() < 0.0:
        raise FieldRangeError(
            f"builtin {name} produced lifting outside [0, {M:.17g}]"
        )
    return LiftedField(nx, ny, -hw, hw, -hw, hw, phi, M, R)


def _check_unused(name, params):
    if params:
        raise FieldFormatError(f"unknown parameters for builtin {name}: {sorted(params)}")


def _check_trace(lo: float, hi: float):
    """Jump across a horizontal line is admissible iff sin(lo) == sin(hi)."""
    if abs(math.sin(lo) - math.sin(hi)) > TRACE_TOL:
        raise TraceConditionError(
            f"normal trace mismatch across jump: sin({lo:.17g})={math.sin(lo):.17g} "
            f"vs sin({hi:.17g})={math.sin(hi):.17g}"
        )


# -- file format ------------------------------------------------------------


def load_field(path) -> LiftedField:
    """Read a field file.

    Line 1 is the header `nx ny x_min x_max y_min y_max M R`; the next ny
    lines each hold nx lifting values, bottom row (y_min side) first.
    """
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln for ln in (raw.strip() for raw in fh) if ln and not ln.startswith("#")]
    if not lines:
        raise FieldFormatError(f"{path}: empty field file")
    head = lines[0].split()
    if len(head) != 8:
        raise FieldFormatError(
            f"{path}: line 1: header needs 8 entries (nx ny x_min x_max y_min y_max M R), "
            f"got {len(head)}"
        )
    try:
        nx, ny = int(head[0]), int(head[1])
        x_min, x_max, y_min, y_max, M, R = (float(v) for v in head[2:])
    except ValueError as exc:
        raise FieldFormatError(f"{path}: line 1: non-numeric header entry ({exc})") from exc
    if len(lines) - 1 != ny:
        raise FieldFormatError(
            f"{path}: expected {ny} data rows after the header, got {len(lines) - 1}"
        )
    rows = []
    for j, ln in enumerate(lines[1:]):
        parts = ln.split()
        if len(parts) != nx:
            raise FieldFormatError(
                f"{path}: line {j + 2}: expected {nx} values, got {len(parts)}"
            )
        try:
            rows.append([float(v) for v in parts])
        except ValueError as exc:
            raise FieldFormatError(f"{path}: line {j + 2}: non-numeric value ({exc})") from exc
    phi = np.array(rows)
    bad = np.argwhere((phi < 0.0) | (phi > M))
    if bad.size:
        iy, ix = bad[0]
        raise FieldRangeError(
            f"{path}: phi out of range [0, {M:.17g}] at cell (ix={ix}, iy={iy}): "
            f"{phi[iy, ix]:.17g}"
        )
    return LiftedField(nx, ny, x_min, x_max, y_min, y_max, phi, M, R)


def write_field(field: LiftedField, path):
    """Inverse of load_field; float values keep 17 significant digits."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(
            f"{field.nx} {field.ny} {field.x_min:.17g} {field.x_max:.17g} "
            f"{field.y_min:.17g} {field.y_max:.17g} {field.M:.17g} {field.R:.17g}\n"
        )
        for row in field.phi:
            fh.write(" ".join(f"{v:.17g}" for v in row) + "\n")


# -- weak divergence check --------------------------------------------------


@dataclass(frozen=True)
class DivergenceReport:
    l1_residual: float
    worst_cell: tuple[int, int]
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.l1_residual <= self.tolerance


def bump(u):
    """C^2 bump (1-u^2)^3 on [-1, 1]."""
    v = np.clip(u, -1.0, 1.0)
    return (1.0 - v * v) ** 3


def bump_deriv(u):
    v = np.clip(u, -1.0, 1.0)
    return -6.0 * v * (1.0 - v * v) ** 2


def bump_integral(u):
    """Antiderivative of the bump, saturating at +-16/35 outside [-1, 1]."""
    v = np.clip(u, -1.0, 1.0)
    v2 = v * v
    return v * (1.0 + v2 * (-1.0 + v2 * (0.6 - v2 / 7.0)))


def bump_family(field: LiftedField, n_scales: int = 3):
    """Deterministic tensor-product bump family covering the domain.

    Yields (cx, cy, s) with the bump psi(x, y) = b((x-cx)/s) b((y-cy)/s)
    compactly supported inside the open rectangle.
    """
    w = min(field.x_max - field.x_min, field.y_max - field.y_min)
    for k in range(n_scales):
        s = w / (4.0 * 2**k)
        # overlapping lattice with spacing s so every cell is covered
        nxc = int(math.floor((field.x_max - field.x_min - 2 * s) / s)) + 1
        nyc = int(math.floor((field.y_max - field.y_min - 2 * s) / s)) + 1
        for jy in range(nyc):
            for jx in range(nxc):
                cx = field.x_min + s + jx * s
                cy = field.y_min + s + jy * s
                yield cx, cy, s


def _edge_arrays(field: LiftedField, comps=None):
    """Interior edge data: midpoints, normal flux jumps, lengths.

    The distributional divergence of a piecewise-constant vector field is
    carried entirely by these edges, with density (F_2 - F_1) . n per unit
    length, where n points from cell 1 to cell 2.  By default the field is
    e^{i phi}; pass comps = (F1_grid, F2_grid) for anything else.
    """
    cosg, sing = comps if comps is not None else field.unit_vector()
    xs, ys = field.xs(), field.ys()
    # vertical edges between horizontal neighbours: n = (1, 0)
    jump_v = cosg[:, 1:] - cosg[:, :-1]
    xv = np.broadcast_to((xs[:-1] + 0.5 * field.dx)[None, :], jump_v.shape)
    yv = np.broadcast_to(ys[:, None], jump_v.shape)
    # horizontal edges between vertical neighbours: n = (0, 1)
    jump_h = sing[1:, :] - sing[:-1, :]
    xh = np.broadcast_to(xs[None, :], jump_h.shape)
    yh = np.broadcast_to((ys[:-1] + 0.5 * field.dy)[:, None], jump_h.shape)
    ex = np.concatenate([xv.ravel(), xh.ravel()])
    ey = np.concatenate([yv.ravel(), yh.ravel()])
    jump = np.concatenate([jump_v.ravel(), jump_h.ravel()])
    length = np.concatenate(
        [np.full(jump_v.size, field.dy), np.full(jump_h.size, field.dx)]
    )
    return ex, ey, jump, length


def check_divergence_free(field: LiftedField, tol: float = 1e-12) -> DivergenceReport:
    """Weak divergence residual against a bump test family.

    For the piecewise-constant interpolant, int u . grad(psi) dx equals minus
    the sum of edge flux jumps weighted by the edge integral of psi, so a
    field whose traces match across every edge scores exactly zero.  The
    residual is normalized by the L1 norm of grad(psi).
    """
    ex, ey, jump, length = _edge_arrays(field)
    keep = jump != 0.0
    ex, ey, jump, length = ex[keep], ey[keep], jump[keep], length[keep]
    worst = flux_residual(field, edge_data=(ex, ey, jump, length))

    # worst cell: the one touching the largest single edge flux jump
    if jump.size:
        k = int(np.argmax(np.abs(jump) * length))
        ix, iy = field.cell_index(ex[k], ey[k])
        worst_cell = (int(ix), int(iy))
    else:
        worst_cell = (0, 0)
    return DivergenceReport(float(worst), worst_cell, tol)


def flux_residual(field: LiftedField, comps=None, edge_data=None) -> float:
    """Normalized weak residual of div F for a piecewise-constant flux F.

    F defaults to e^{i phi}; pass comps = (F1_grid, F2_grid) for any other
    flux on the same grid.  The residual is max over the bump family of
    |sum_e (jump . n) psi(mid_e) len_e| / |grad psi|_{L1}.
    """
    if edge_data is None:
        ex, ey, jump, length = _edge_arrays(field, comps)
        keep = jump != 0.0
        ex, ey, jump, length = ex[keep], ey[keep], jump[keep], length[keep]
    else:
        ex, ey, jump, length = edge_data
    worst = 0.0
    for cx, cy, s in bump_family(field):
        psi = bump((ex - cx) / s) * bump((ey - cy) / s)
        num = abs(np.sum(jump * psi * length))
        # |grad psi|_{L1} = 2 s * int|b'| * int|b| by the product structure
        grad_l1 = 2.0 * s * _B_ABS * _BD_ABS
        worst = max(worst, num / grad_l1)
    return float(worst)


# 1D integrals of |b| and |b'| for the bump above (exact):
# int_{-1}^{1} (1-u^2)^3 du = 32/35, int_{-1}^{1} |b'| du = 2 (b(0)-b(1)) = 2.
_B_ABS = 32.0 / 35.0
_BD_ABS = 2.0


def boundary_lebesgue_scan(
    field: LiftedField, R: float | None = None, samples: int = 64
) -> list[tuple[float, float]]:
    """Mean oscillation of phi in small balls centered on the circle of radius R.

    Used to pick a ball radius whose boundary meets jump lines transversally:
    angles where the oscillation stays bounded away from zero flag jump
    crossings, and a long high-oscillation arc flags a near-tangency.
    Returns (angle, oscillation) pairs; the oscillation is taken at the
    smallest radius that still contains a few cells.
    """
    R = field.R if R is None else R
    cx, cy = field.center
    h = max(field.dx, field.dy)
    X, Y = np.meshgrid(field.xs(), field.ys())
    out = []
    for j in range(samples):
        ang = TWO_PI * j / samples
        px, py = cx + R * math.cos(ang), cy + R * math.sin(ang)
        osc = 0.0
        for r in (6.0 * h, 3.0 * h, 1.5 * h):
            sel = (X - px) ** 2 + (Y - py) ** 2 < r * r
            if np.count_nonzero(sel) < 3:
                break
            vals = field.phi[sel]
            osc = float(np.mean(np.abs(vals - np.mean(vals))))
        out.append((ang, osc))
    return out
