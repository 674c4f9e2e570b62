"""Rectilinear state grids and multilinear interpolation weights."""
import itertools
from dataclasses import dataclass, field

import numpy as np


def symmetric_log_grid(half_width, n_points, min_frac=0.01):
    """Odd-sized grid on [-half_width, half_width], geometric on each side of an exact 0."""
    if n_points < 3 or n_points % 2 == 0:
        raise ValueError(f"symmetric log grid needs an odd size >= 3, got {n_points}")
    k = (n_points - 1) // 2
    if k == 1:
        positive = np.array([half_width], dtype=float)
    else:
        positive = np.geomspace(half_width * min_frac, half_width, k)
        positive[-1] = half_width
    return np.concatenate([-positive[::-1], [0.0], positive])


def log_cost_atoms(upper, n_atoms, min_frac=1e-3):
    """Cost atoms on [0, upper]: an exact 0 then a geometric sequence up to ``upper``."""
    rest = np.geomspace(upper * min_frac, upper, n_atoms - 1)
    rest[-1] = upper
    return np.concatenate([[0.0], rest])


@dataclass(frozen=True, eq=False)
class Grid:
    """Tensor-product grid.

    ``axes`` are coordinate arrays (row-major order of the flattened grid);
    axes flagged in ``discrete`` hold labels and are matched to the nearest
    label instead of interpolated.
    """

    axes: tuple
    names: tuple
    discrete: tuple = field(default=())

    def __post_init__(self):
        axes = tuple(np.asarray(a, dtype=float) for a in self.axes)
        names = tuple(self.names)
        discrete = tuple(self.discrete) or (False,) * len(axes)
        if not (len(axes) == len(names) == len(discrete)):
            raise ValueError("axes, names and discrete flags must align")
        for name, axis, is_discrete in zip(names, axes, discrete):
            if axis.ndim != 1 or axis.size == 0:
                raise ValueError(f"axis {name!r} must be a non-empty 1-D array")
            if np.any(np.diff(axis) <= 0):
                raise ValueError(f"axis {name!r} must be strictly increasing")
            axis.setflags(write=False)
        object.__setattr__(self, "axes", axes)
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "discrete", tuple(bool(d) for d in discrete))

    @property
    def shape(self):
        return tuple(a.size for a in self.axes)

    @property
    def ndim(self):
        return len(self.axes)

    @property
    def size(self):
        return int(np.prod(self.shape))

    @property
    def lower(self):
        return np.array([a[0] for a in self.axes])

    @property
    def upper(self):
        return np.array([a[-1] for a in self.axes])

    def axis(self, name):
        return self.axes[self.names.index(name)]

    def points(self):
        """All grid points, shape (size, ndim), row-major."""
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def clamp(self, points):
        return np.clip(np.asarray(points, dtype=float), self.lower, self.upper)

    def prepend(self, axis, name, discrete=True):
        return Grid((np.asarray(axis),) + self.axes, (name,) + self.names, (discrete,) + self.discrete)

    def concat(self, other):
        return Grid(self.axes + other.axes, self.names + other.names, self.discrete + other.discrete)

    def drop(self, names):
        keep = [i for i, n in enumerate(self.names) if n not in names]
        return Grid(
            tuple(self.axes[i] for i in keep),
            tuple(self.names[i] for i in keep),
            tuple(self.discrete[i] for i in keep),
        )

    def interpolants(self, points, gradient=False):
        """Flat neighbor indices and multilinear weights for each query point.

        Returns ``(index, weight)`` of shape (n, k) with k = 2 ** (continuous axes
        with more than one point), plus ``dweight`` of shape (n, k, ndim) when
        ``gradient`` is set. Points are clamped to the grid; clamped coordinates get
        zero derivative. At a knot the right-hand cell is used. A single-point axis
        gives weight 1 at its point and zero slope.
        """
        points = np.atleast_2d(np.asarray(points, dtype=float))
        if points.shape[1] != self.ndim:
            raise ValueError(f"expected points with {self.ndim} coordinates, got {points.shape[1]}")
        n = points.shape[0]
        strides = np.cumprod((self.shape[1:] + (1,))[::-1])[::-1]

        per_axis = []
        for axis, is_discrete, x in zip(self.axes, self.discrete, points.T):
            if axis.size == 1:
                per_axis.append([(np.zeros(n, dtype=int), np.ones(n), np.zeros(n))])
                continue
            if is_discrete:
                idx = np.abs(x[:, None] - axis[None, :]).argmin(axis=1)
                per_axis.append([(idx, np.ones(n), np.zeros(n))])
                continue
            clamped = (x < axis[0]) | (x > axis[-1])
            xc = np.clip(x, axis[0], axis[-1])
            lo = np.clip(np.searchsorted(axis, xc, side="right") - 1, 0, axis.size - 2)
            width = axis[lo + 1] - axis[lo]
            frac = (xc - axis[lo]) / width
            slope = np.where(clamped, 0.0, 1.0 / width)
            per_axis.append([(lo, 1.0 - frac, -slope), (lo + 1, frac, slope)])

        index, weight, dweight = [], [], []
        for corner in itertools.product(*per_axis):
            flat = sum(c[0] * s for c, s in zip(corner, strides))
            ws = [c[1] for c in corner]
            index.append(flat)
            weight.append(np.prod(ws, axis=0))
            if gradient:
                dweight.append(
                    np.stack(
                        [
                            corner[j][2] * np.prod([w for i, w in enumerate(ws) if i != j] or [np.ones(n)], axis=0)
                            for j in range(self.ndim)
                        ],
                        axis=-1,
                    )
                )
        index = np.stack(index, axis=1)
        weight = np.stack(weight, axis=1)
        if gradient:
            return index, weight, np.stack(dweight, axis=1)
        return index, weight

    def interpolate(self, values, points):
        """Multilinear interpolation of ``values`` (grid shape + trailing dims)."""
        values = np.asarray(values)
        flat = values.reshape((self.size,) + values.shape[self.ndim:])
        index, weight = self.interpolants(points)
        return np.einsum("nk,nk...->n...", weight, flat[index])

    def to_header(self):
        return {
            "names": list(self.names),
            "discrete": list(self.discrete),
            "axes": [a.tolist() for a in self.axes],
        }

    @classmethod
    def from_header(cls, header):
        return cls(tuple(np.asarray(a) for a in header["axes"]), tuple(header["names"]), tuple(header["discrete"]))

    def __eq__(self, other):
        if not isinstance(other, Grid):
            return NotImplemented
        return (
            self.names == other.names
            and self.discrete == other.discrete
            and all(np.array_equal(a, b) for a, b in zip(self.axes, other.axes))
        )

    __hash__ = None
