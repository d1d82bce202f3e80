"""Tensor grids on the box [-R, R]^n and their finite-difference operators.

Derivatives use fourth-order centered stencils in the interior and
fourth-order one-sided stencils on the two layers nearest the box edge.  No
boundary condition is imposed: far out the Hessian of a potential is
exponentially small, and any reflection rule would perturb it by O(f'/h).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property, lru_cache

import numpy as np
import scipy.sparse as sp


@dataclass(frozen=True)
class GridSpec:
    box_radius: float
    nodes_per_axis: int
    dim: int = 2

    def __post_init__(self):
        if self.nodes_per_axis < 33:
            raise ValueError("nodes_per_axis must be >= 33")
        if not self.box_radius > 0:
            raise ValueError("box_radius must be positive")
        if self.dim not in (1, 2):
            raise ValueError("dim must be 1 or 2")

    @property
    def h(self) -> float:
        return 2.0 * self.box_radius / (self.nodes_per_axis - 1)

    @property
    def shape(self):
        return (self.nodes_per_axis,) * self.dim

    @property
    def size(self) -> int:
        return self.nodes_per_axis**self.dim

    @cached_property
    def axis(self) -> np.ndarray:
        return np.linspace(-self.box_radius, self.box_radius, self.nodes_per_axis)

    @cached_property
    def points(self) -> np.ndarray:
        axes = np.meshgrid(*([self.axis] * self.dim), indexing="ij")
        return np.stack([a.ravel() for a in axes], axis=-1)

    @cached_property
    def weights(self) -> np.ndarray:
        w1 = np.full(self.nodes_per_axis, self.h)
        w1[0] = w1[-1] = 0.5 * self.h
        if self.dim == 1:
            return w1
        return np.outer(w1, w1).ravel()

    @cached_property
    def boundary_mask(self) -> np.ndarray:
        edge = np.zeros(self.nodes_per_axis, dtype=bool)
        edge[[0, -1]] = True
        if self.dim == 1:
            return edge
        return (edge[:, None] | edge[None, :]).ravel()

    def inner_mask(self, radius) -> np.ndarray:
        return np.all(np.abs(self.points) <= radius + 1e-12, axis=1)

    def to_json(self) -> dict:
        return {"box_radius": self.box_radius, "nodes_per_axis": self.nodes_per_axis, "dim": self.dim}


_D1 = np.array([1.0, -8.0, 0.0, 8.0, -1.0]) / 12.0
_D2 = np.array([-1.0, 16.0, -30.0, 16.0, -1.0]) / 12.0
# fourth-order one-sided rows for the two nodes nearest the left edge
_D1_EDGE = (
    np.array([-25.0, 48.0, -36.0, 16.0, -3.0]) / 12.0,
    np.array([-3.0, -10.0, 18.0, -6.0, 1.0]) / 12.0,
)
_D2_EDGE = (
    np.array([45.0, -154.0, 214.0, -156.0, 61.0, -10.0]) / 12.0,
    np.array([10.0, -15.0, -4.0, 14.0, -6.0, 1.0]) / 12.0,
)


def _banded(m: int, stencil, edge, scale: float, odd: bool) -> sp.csr_matrix:
    mat = sp.lil_matrix((m, m))
    for i in range(2, m - 2):
        mat[i, i - 2 : i + 3] = stencil
    sign = -1.0 if odd else 1.0
    for i, row in enumerate(edge):
        mat[i, : len(row)] = row
        mat[m - 1 - i, m - len(row) :] = sign * row[::-1]
    return (mat * scale).tocsr()


@lru_cache(maxsize=16)
def operators(grid: GridSpec):
    """Sparse first/second derivative matrices acting on flattened fields.

    Returns ``(first, second)`` where ``first[i]`` approximates the partial
    derivative along axis ``i`` and ``second[i][j]`` the mixed second
    derivative.
    """
    m, h = grid.nodes_per_axis, grid.h
    d1 = _banded(m, _D1, _D1_EDGE, 1.0 / h, odd=True)
    d2 = _banded(m, _D2, _D2_EDGE, 1.0 / h**2, odd=False)
    if grid.dim == 1:
        return [d1], [[d2]]
    eye = sp.identity(m, format="csr")
    dx, dy = sp.kron(d1, eye, format="csr"), sp.kron(eye, d1, format="csr")
    dxx, dyy = sp.kron(d2, eye, format="csr"), sp.kron(eye, d2, format="csr")
    dxy = sp.kron(d1, d1, format="csr")
    return [dx, dy], [[dxx, dxy], [dxy, dyy]]


def gradient(grid: GridSpec, f: np.ndarray) -> np.ndarray:
    first, _ = operators(grid)
    return np.stack([d @ f for d in first], axis=-1)


def hessian(grid: GridSpec, f: np.ndarray) -> np.ndarray:
    _, second = operators(grid)
    n = grid.dim
    out = np.empty((f.size, n, n))
    for i in range(n):
        for j in range(i, n):
            out[:, i, j] = second[i][j] @ f
            out[:, j, i] = out[:, i, j]
    return out
