"""Differentiable layers with hand-written backward passes.

Forward functions accept a single vector ``(in_dim,)`` or a batch
``(n, in_dim)``. Backward functions take the same input plus the upstream
gradient and return a :class:`GradBundle`; for a batch the parameter
gradients are summed over the batch axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .spline_core import SplineGrid, basis_and_deriv, basis_eval


def silu(z):
    return z / (1.0 + np.exp(-z))


def silu_grad(z):
    s = 1.0 / (1.0 + np.exp(-z))
    return s * (1.0 + z * (1.0 - s))


@dataclass
class GradBundle:
    grad_input: np.ndarray
    grad_params: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class KanLayerParams:
    grid: SplineGrid
    spline_coeffs: np.ndarray  # (out_dim, in_dim, basis_count)
    base_weight: np.ndarray  # (out_dim, in_dim)
    spline_scale: np.ndarray  # (out_dim, in_dim)

    def __post_init__(self):
        self.spline_coeffs = np.asarray(self.spline_coeffs, dtype=np.float64)
        self.base_weight = np.asarray(self.base_weight, dtype=np.float64)
        self.spline_scale = np.asarray(self.spline_scale, dtype=np.float64)
        out_dim, in_dim = self.base_weight.shape
        expected = (out_dim, in_dim, self.grid.basis_count)
        if self.spline_coeffs.shape != expected:
            raise ValueError(f"spline_coeffs has shape {self.spline_coeffs.shape}, expected {expected}")
        if self.spline_scale.shape != (out_dim, in_dim):
            raise ValueError(f"spline_scale has shape {self.spline_scale.shape}, expected {(out_dim, in_dim)}")

    @property
    def in_dim(self) -> int:
        return self.base_weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.base_weight.shape[0]

    def arrays(self) -> dict[str, np.ndarray]:
        return {
            "spline_coeffs": self.spline_coeffs,
            "base_weight": self.base_weight,
            "spline_scale": self.spline_scale,
        }


@dataclass
class LinearLayerParams:
    weight: np.ndarray  # (out_dim, in_dim)
    bias: np.ndarray  # (out_dim,)

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ValueError(f"inconsistent linear shapes {self.weight.shape} / {self.bias.shape}")

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def arrays(self) -> dict[str, np.ndarray]:
        return {"weight": self.weight, "bias": self.bias}


def _as_batch(x, in_dim: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    if xb.ndim != 2 or xb.shape[1] != in_dim:
        raise ValueError(f"expected input of width {in_dim}, got shape {x.shape}")
    return xb, single


# --------------------------------------------------------------------- KAN


def kan_forward(params: KanLayerParams, x) -> np.ndarray:
    """Sum over inputs of ``base_weight*silu(x_i) + spline_scale*spline(x_i)``."""
    xb, single = _as_batch(x, params.in_dim)
    basis = basis_eval(params.grid, xb)
    out = _kan_combine(params, xb, basis)
    return out[0] if single else out


def _kan_combine(params: KanLayerParams, xb: np.ndarray, basis: np.ndarray) -> np.ndarray:
    n = xb.shape[0]
    scaled = params.spline_coeffs * params.spline_scale[..., None]
    out = silu(xb) @ params.base_weight.T
    out += basis.reshape(n, -1) @ scaled.reshape(params.out_dim, -1).T
    return out


def kan_backward(params: KanLayerParams, x, grad_out) -> GradBundle:
    xb, single = _as_batch(x, params.in_dim)
    g = np.asarray(grad_out, dtype=np.float64)
    g = g[None, :] if single else g
    if g.shape != (xb.shape[0], params.out_dim):
        raise ValueError(f"grad_out shape {np.shape(grad_out)} does not match layer output")
    n, nb = xb.shape[0], params.grid.basis_count
    basis, dbasis = basis_and_deriv(params.grid, xb)
    # clamped inputs see a flat spline
    dbasis *= params.grid.inside(xb)[..., None]

    flat_basis = basis.reshape(n, -1)
    # sum_n g[n,o] * B[n,i,b]
    g_basis = (g.T @ flat_basis).reshape(params.out_dim, params.in_dim, nb)
    grad_coeffs = g_basis * params.spline_scale[..., None]
    grad_scale = np.einsum("oib,oib->oi", g_basis, params.spline_coeffs)
    grad_base = g.T @ silu(xb)

    scaled = params.spline_coeffs * params.spline_scale[..., None]
    g_coef = (g @ scaled.reshape(params.out_dim, -1)).reshape(n, params.in_dim, nb)
    grad_x = silu_grad(xb) * (g @ params.base_weight)
    grad_x += np.einsum("nib,nib->ni", g_coef, dbasis)

    return GradBundle(
        grad_input=grad_x[0] if single else grad_x,
        grad_params={
            "spline_coeffs": grad_coeffs,
            "base_weight": grad_base,
            "spline_scale": grad_scale,
        },
    )


def init_kan(in_dim: int, out_dim: int, grid: SplineGrid | None = None, rng_seed=None) -> KanLayerParams:
    """Small Gaussian spline coefficients, uniform base weights, unit spline scale.

    ``rng_seed`` may be an int or an existing ``np.random.Generator``.
    """
    grid = grid or SplineGrid()
    rng = np.random.default_rng(rng_seed)
    nb = grid.basis_count
    coeffs = rng.normal(0.0, 0.1 / np.sqrt(nb), size=(out_dim, in_dim, nb))
    bound = 1.0 / np.sqrt(in_dim)
    base = rng.uniform(-bound, bound, size=(out_dim, in_dim))
    return KanLayerParams(grid, coeffs, base, np.ones((out_dim, in_dim)))


def kan_edge(params: KanLayerParams, out_idx: int, in_idx: int, x) -> np.ndarray:
    """phi_{out,in}(x) for a single edge."""
    x = np.asarray(x, dtype=np.float64)
    spline = basis_eval(params.grid, x) @ params.spline_coeffs[out_idx, in_idx]
    return params.base_weight[out_idx, in_idx] * silu(x) + params.spline_scale[out_idx, in_idx] * spline


def dump_activations(params: KanLayerParams, n_samples: int) -> dict[str, np.ndarray]:
    """Sample every edge function on ``n_samples`` evenly spaced domain points.

    Returns flat columns ``edge_out, edge_in, x, phi`` ordered by
    (edge_out, edge_in, x).
    """
    if n_samples < 2:
        raise ValueError("n_samples must be at least 2")
    grid = params.grid
    xs = np.linspace(grid.lo, grid.hi, n_samples)
    basis = basis_eval(grid, xs)  # (s, nb)
    spline = np.einsum("oib,sb->ois", params.spline_coeffs, basis)
    phi = params.base_weight[..., None] * silu(xs) + params.spline_scale[..., None] * spline
    out_idx, in_idx, _ = np.meshgrid(
        np.arange(params.out_dim), np.arange(params.in_dim), xs, indexing="ij"
    )
    return {
        "edge_out": out_idx.ravel(),
        "edge_in": in_idx.ravel(),
        "x": np.broadcast_to(xs, phi.shape).ravel().copy(),
        "phi": phi.ravel(),
    }


# ------------------------------------------------------------------ linear


def linear_forward(params: LinearLayerParams, x) -> np.ndarray:
    xb, single = _as_batch(x, params.in_dim)
    out = xb @ params.weight.T + params.bias
    return out[0] if single else out


def linear_backward(params: LinearLayerParams, x, grad_out) -> GradBundle:
    xb, single = _as_batch(x, params.in_dim)
    g = np.asarray(grad_out, dtype=np.float64)
    g = g[None, :] if single else g
    if g.shape != (xb.shape[0], params.out_dim):
        raise ValueError(f"grad_out shape {np.shape(grad_out)} does not match layer output")
    grad_x = g @ params.weight
    return GradBundle(
        grad_input=grad_x[0] if single else grad_x,
        grad_params={"weight": g.T @ xb, "bias": g.sum(axis=0)},
    )


def init_linear(in_dim: int, out_dim: int, rng_seed=None, zero_bias: bool = True) -> LinearLayerParams:
    rng = np.random.default_rng(rng_seed)
    bound = 1.0 / np.sqrt(in_dim)
    weight = rng.uniform(-bound, bound, size=(out_dim, in_dim))
    bias = np.zeros(out_dim) if zero_bias else rng.uniform(-bound, bound, size=out_dim)
    return LinearLayerParams(weight, bias)


# ------------------------------------------------- MLP trunk (baseline ablation)


@dataclass
class DenseSiluParams:
    """Linear map followed by silu; the trunk layer of the MLP baseline."""

    linear: LinearLayerParams

    @property
    def in_dim(self) -> int:
        return self.linear.in_dim

    @property
    def out_dim(self) -> int:
        return self.linear.out_dim

    def arrays(self) -> dict[str, np.ndarray]:
        return self.linear.arrays()


def dense_silu_forward(params: DenseSiluParams, x) -> np.ndarray:
    return silu(linear_forward(params.linear, x))


def dense_silu_backward(params: DenseSiluParams, x, grad_out) -> GradBundle:
    z = linear_forward(params.linear, x)
    return linear_backward(params.linear, x, np.asarray(grad_out) * silu_grad(z))


def layer_forward(params, x) -> np.ndarray:
    if isinstance(params, KanLayerParams):
        return kan_forward(params, x)
    if isinstance(params, DenseSiluParams):
        return dense_silu_forward(params, x)
    return linear_forward(params, x)


def layer_backward(params, x, grad_out) -> GradBundle:
    if isinstance(params, KanLayerParams):
        return kan_backward(params, x, grad_out)
    if isinstance(params, DenseSiluParams):
        return dense_silu_backward(params, x, grad_out)
    return linear_backward(params, x, grad_out)
