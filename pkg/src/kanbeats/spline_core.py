"""B-spline basis evaluation on an extended uniform knot grid.

Everything here is vectorised over the input ``x``: a basis call on an
array of shape ``s`` returns an array of shape ``s + (basis_count,)``.
Inputs outside ``[lo, hi]`` are clamped onto the boundary first, so the
resulting splines are flat beyond the domain.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class SplineGrid:
    """Knot vector of ``interior_count + 2*degree + 1`` uniformly spaced knots.

    The interval ``[lo, hi]`` is split into ``interior_count`` spans and the
    grid is extended by ``degree`` further spans on each side, giving
    ``interior_count + degree`` basis functions that form a partition of
    unity on ``[lo, hi]``.
    """

    degree: int = 3
    interior_count: int = 5
    lo: float = -1.0
    hi: float = 1.0
    knots: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if int(self.degree) != self.degree or self.degree < 0:
            raise ValueError(f"degree must be a non-negative integer, got {self.degree}")
        if int(self.interior_count) != self.interior_count or self.interior_count < 1:
            raise ValueError(f"interior_count must be a positive integer, got {self.interior_count}")
        if not (np.isfinite(self.lo) and np.isfinite(self.hi)) or not self.lo < self.hi:
            raise ValueError(f"invalid domain [{self.lo}, {self.hi}]")
        k, g = int(self.degree), int(self.interior_count)
        step = (self.hi - self.lo) / g
        knots = self.lo + step * np.arange(-k, g + k + 1, dtype=np.float64)
        # pin the domain endpoints exactly so clamped inputs land on knots
        knots[k] = self.lo
        knots[k + g] = self.hi
        if np.any(np.diff(knots) <= 0):
            raise ValueError("knot vector is not strictly increasing")
        knots.flags.writeable = False
        object.__setattr__(self, "degree", k)
        object.__setattr__(self, "interior_count", g)
        object.__setattr__(self, "lo", float(self.lo))
        object.__setattr__(self, "hi", float(self.hi))
        object.__setattr__(self, "knots", knots)

    @property
    def basis_count(self) -> int:
        return self.interior_count + self.degree

    @property
    def step(self) -> float:
        return (self.hi - self.lo) / self.interior_count

    def clamp(self, x) -> np.ndarray:
        return np.clip(np.asarray(x, dtype=np.float64), self.lo, self.hi)

    def inside(self, x) -> np.ndarray:
        """Mask of points where the spline responds to its input (not clamped)."""
        x = np.asarray(x, dtype=np.float64)
        return (x >= self.lo) & (x <= self.hi)


def _span_index(grid: SplineGrid, xc: np.ndarray) -> np.ndarray:
    # index of the degree-0 basis that is 1 at xc; x == hi uses the last interior span
    j = np.floor((xc - grid.lo) / grid.step).astype(np.int64)
    return np.clip(j, 0, grid.interior_count - 1) + grid.degree


def _local(grid: SplineGrid, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray], list[np.ndarray]]:
    """Nonzero basis values at ``x`` via the triangular Cox-de Boor scheme.

    Returns the knot-span index ``j`` plus the degree-k and degree-(k-1)
    local values; entry ``r`` of the degree-d list belongs to basis
    function ``j - d + r``.
    """
    t = grid.knots
    k = grid.degree
    xc = grid.clamp(x)
    j = _span_index(grid, xc)
    vals = [np.ones_like(xc)]
    lower = []
    left, right = [None], [None]
    for d in range(1, k + 1):
        left.append(xc - t[j + 1 - d])
        right.append(t[j + d] - xc)
        lower = vals
        saved = np.zeros_like(xc)
        nxt = []
        for r in range(d):
            temp = vals[r] / (right[r + 1] + left[d - r])
            nxt.append(saved + right[r + 1] * temp)
            saved = left[d - r] * temp
        nxt.append(saved)
        vals = nxt
    return j, vals, lower


def _scatter(grid: SplineGrid, j: np.ndarray, local: list[np.ndarray]) -> np.ndarray:
    out = np.zeros(j.shape + (grid.basis_count,))
    flat = out.reshape(-1, grid.basis_count)
    rows = np.arange(flat.shape[0])
    first = (j - grid.degree).ravel()
    for r, v in enumerate(local):
        flat[rows, first + r] = v.ravel()
    return out


def _local_deriv(grid: SplineGrid, lower: list[np.ndarray]) -> list[np.ndarray]:
    # uniform knots: dB_i = (B_{i,k-1} - B_{i+1,k-1}) / step
    k = grid.degree
    zero = np.zeros_like(lower[0])
    out = []
    for r in range(k + 1):
        a = lower[r - 1] if r >= 1 else zero
        b = lower[r] if r <= k - 1 else zero
        out.append((a - b) / grid.step)
    return out


def basis_eval(grid: SplineGrid, x) -> np.ndarray:
    """All ``basis_count`` basis values at ``x`` (clamped onto the domain)."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("basis_eval requires finite inputs")
    j, vals, _ = _local(grid, x)
    return _scatter(grid, j, vals)


def basis_eval_deriv(grid: SplineGrid, x) -> np.ndarray:
    """d/dx of every basis function; one-sided at the domain boundary."""
    return basis_and_deriv(grid, x)[1]


def basis_and_deriv(grid: SplineGrid, x) -> tuple[np.ndarray, np.ndarray]:
    """Basis values and derivatives from a single recursion pass."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("basis evaluation requires finite inputs")
    j, vals, lower = _local(grid, x)
    basis = _scatter(grid, j, vals)
    if grid.degree == 0:
        return basis, np.zeros_like(basis)
    return basis, _scatter(grid, j, _local_deriv(grid, lower))


def spline_eval(grid: SplineGrid, coeffs, x) -> np.ndarray:
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.shape[-1] != grid.basis_count:
        raise ValueError(
            f"expected {grid.basis_count} coefficients, got {coeffs.shape[-1]}"
        )
    return basis_eval(grid, x) @ coeffs
