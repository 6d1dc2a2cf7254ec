"""Finite signed atomic measures with exact-arithmetic bookkeeping.

A DiscreteMeasure is a flat list of weighted atoms in dimension 2 (spatial
points x = (x, y)) or 3 (phase points (x, y, a)).  Everything downstream --
defect measures, projections, curve pushforwards, transport marginals -- is
one of these, so the type stays deliberately small: positions, signed
weights, and a label saying what the thing represents.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np


class MeasureFormatError(ValueError):
    """Malformed measure CSV (bad header, bad row, non-finite entry)."""


_HEADERS = {2: ("x", "y", "weight"), 3: ("x", "y", "a", "weight")}


@dataclass(frozen=True)
class DiscreteMeasure:
    """Finite signed sum of Dirac atoms.

    positions : (N, dim) float array, dim in {2, 3}
    weights   : (N,) signed float array
    label     : free-form tag recording which object the atoms represent
    """

    positions: np.ndarray
    weights: np.ndarray
    label: str = ""
    extra: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        pos = np.atleast_2d(np.asarray(self.positions, dtype=float))
        w = np.asarray(self.weights, dtype=float).ravel()
        if pos.size == 0:
            pos = pos.reshape(0, 2 if pos.shape[-1] not in (2, 3) else pos.shape[-1])
        if pos.ndim != 2 or pos.shape[1] not in (2, 3):
            raise ValueError("positions must be (N, 2) or (N, 3)")
        if w.shape[0] != pos.shape[0]:
            raise ValueError(
                "weight count %d does not match atom count %d" % (w.shape[0], pos.shape[0])
            )
        if pos.size and not np.all(np.isfinite(pos)):
            raise ValueError("non-finite atom position")
        if w.size and not np.all(np.isfinite(w)):
            raise ValueError("non-finite atom weight")
        pos = pos.copy()
        w = w.copy()
        pos.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "weights", w)

    # -- basic accessors -------------------------------------------------

    def __len__(self):
        return self.positions.shape[0]

    @property
    def dim(self) -> int:
        return self.positions.shape[1]

    @property
    def total_mass(self) -> float:
        """Signed mass sum(w_i)."""
        return float(np.sum(self.weights))

    @property
    def total_variation(self) -> float:
        """Total variation sum(|w_i|)."""
        return float(np.sum(np.abs(self.weights)))

    # -- derived measures ------------------------------------------------

    def abs(self) -> "DiscreteMeasure":
        """|mu|: same atoms, absolute weights."""
        return DiscreteMeasure(self.positions, np.abs(self.weights), self.label)

    def scaled(self, factor: float) -> "DiscreteMeasure":
        return DiscreteMeasure(self.positions, self.weights * float(factor), self.label)

    def restricted(self, mask) -> "DiscreteMeasure":
        mask = np.asarray(mask, dtype=bool)
        return DiscreteMeasure(self.positions[mask], self.weights[mask], self.label)

    def drop_zeros(self, tol: float = 0.0) -> "DiscreteMeasure":
        return self.restricted(np.abs(self.weights) > tol)

    def __add__(self, other: "DiscreteMeasure") -> "DiscreteMeasure":
        if self.dim != other.dim:
            raise ValueError("cannot add measures of different dimension")
        return DiscreteMeasure(
            np.vstack([self.positions, other.positions]),
            np.concatenate([self.weights, other.weights]),
            self.label or other.label,
        )

    def consolidated(self) -> "DiscreteMeasure":
        """Merge atoms at bit-identical positions, summing weights exactly.

        Grouping is by the position bytes, so no tolerance enters; atoms
        produced by the same arithmetic collapse, everything else stays.
        """
        if len(self) == 0:
            return self
        order = np.lexsort(self.positions.T[::-1])
        pos = self.positions[order]
        w = self.weights[order]
        new_group = np.ones(len(w), dtype=bool)
        new_group[1:] = np.any(pos[1:] != pos[:-1], axis=1)
        starts = np.flatnonzero(new_group)
        sums = np.add.reduceat(w, starts)
        return DiscreteMeasure(pos[starts], sums, self.label)

    def ball_mass(self, center, radius: float, use_abs: bool = True) -> float:
        """Mass of the closed ball B(center, radius) in the spatial slots.

        For dim-3 measures only the first two coordinates count, so this
        is the x-marginal mass of a cylinder.
        """
        c = np.asarray(center, dtype=float)
        d = self.positions[:, :2] - c[:2]
        inside = np.hypot(d[:, 0], d[:, 1]) <= radius
        w = np.abs(self.weights) if use_abs else self.weights
        return float(np.sum(w[inside]))

    # -- serialization ---------------------------------------------------

    def write_csv(self, path) -> None:
        header = _HEADERS[self.dim]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for row, w in zip(self.positions, self.weights):
                writer.writerow(["%.17g" % v for v in row] + ["%.17g" % w])

    @classmethod
    def read_csv(cls, path, label: str = "") -> "DiscreteMeasure":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise MeasureFormatError("%s: empty file, header row required" % path)
            header = [h.strip() for h in header]
            if tuple(header) == _HEADERS[2]:
                dim = 2
            elif tuple(header) == _HEADERS[3]:
                dim = 3
            else:
                raise MeasureFormatError(
                    "%s: header %r is neither x,y,weight nor x,y,a,weight" % (path, header)
                )
            rows = []
            for lineno, rec in enumerate(reader, start=2):
                if not rec or (len(rec) == 1 and not rec[0].strip()):
                    continue
                if len(rec) != dim + 1:
                    raise MeasureFormatError(
                        "%s line %d: expected %d fields, got %d" % (path, lineno, dim + 1, len(rec))
                    )
                try:
                    rows.append([float(v) for v in rec])
                except ValueError:
                    raise MeasureFormatError("%s line %d: non-numeric field" % (path, lineno))
        data = np.asarray(rows, dtype=float).reshape(-1, dim + 1)
        if data.size and not np.all(np.isfinite(data)):
            raise MeasureFormatError("%s: non-finite value" % path)
        return cls(data[:, :dim], data[:, dim], label=label)


def from_grid(values: np.ndarray, xs: np.ndarray, ys: np.ndarray, label: str = "") -> DiscreteMeasure:
    """Cell-mass measure from a (ny, nx) grid of weights at cell centers.

    Zero cells are dropped, so sparse grids stay sparse.
    """
    values = np.asarray(values, dtype=float)
    jj, ii = np.nonzero(values)
    pos = np.column_stack([np.asarray(xs)[ii], np.asarray(ys)[jj]])
    return DiscreteMeasure(pos, values[jj, ii], label=label)
