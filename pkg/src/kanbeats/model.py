"""Doubly residual forecaster: stacks of blocks whose trunks are KAN layers.

Each block maps its residual input to a hidden vector, projects that onto
backcast/forecast coefficients with two linear heads and expands them
through fixed basis matrices. The backcast is subtracted from the block
input to form the next block's input (continuing across stack boundaries)
and every block forecast is summed into the final forecast.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import layers as L
from .errors import (
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ConfigError,
    NumericError,
)
from .spline_core import SplineGrid


@dataclass
class ModelConfig:
    lookback: int = 168
    horizon: int = 24
    n_stacks: int = 3
    n_blocks: int = 3
    hidden_dim: int = 64
    kan_layers_per_block: int = 2
    trunk: str = "kan"  # "kan" or "mlp"
    spline_degree: int = 3
    grid_size: int = 5
    grid_lo: float = -1.0
    grid_hi: float = 1.0

    def __post_init__(self):
        for name in ("lookback", "horizon", "n_stacks", "n_blocks", "hidden_dim",
                     "kan_layers_per_block", "grid_size"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
            setattr(self, name, int(value))
        if self.spline_degree < 0:
            raise ConfigError("spline_degree must be non-negative")
        if self.trunk not in ("kan", "mlp"):
            raise ConfigError(f"trunk must be 'kan' or 'mlp', got {self.trunk!r}")
        if not self.grid_lo < self.grid_hi:
            raise ConfigError("grid_lo must be below grid_hi")

    @property
    def theta_f_dim(self) -> int:
        return self.horizon

    @property
    def theta_b_dim(self) -> int:
        return self.lookback

    def grid(self) -> SplineGrid:
        return SplineGrid(self.spline_degree, self.grid_size, self.grid_lo, self.grid_hi)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class BlockParams:
    trunk: list  # KanLayerParams or DenseSiluParams, lookback -> hidden -> ... -> hidden
    theta_f_head: L.LinearLayerParams
    theta_b_head: L.LinearLayerParams
    basis_f: np.ndarray  # (horizon, theta_f_dim), frozen
    basis_b: np.ndarray  # (lookback, theta_b_dim), frozen

    def named_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        out = {}
        for li, layer in enumerate(self.trunk):
            for key, arr in layer.arrays().items():
                out[f"{prefix}.trunk{li}.{key}"] = arr
        for head_name in ("theta_f_head", "theta_b_head"):
            for key, arr in getattr(self, head_name).arrays().items():
                out[f"{prefix}.{head_name}.{key}"] = arr
        return out


@dataclass
class ModelState:
    config: ModelConfig
    stacks: list[list[BlockParams]]

    def blocks(self):
        """Yield ``(stack_idx, block_idx, block)`` in execution order."""
        for i, stack in enumerate(self.stacks):
            for j, block in enumerate(stack):
                yield i, j, block

    def parameters(self) -> dict[str, np.ndarray]:
        """Trainable arrays by name. The returned arrays are the live objects."""
        out = {}
        for i, j, block in self.blocks():
            out.update(block.named_arrays(f"stack{i}.block{j}"))
        return out


def _make_block(config: ModelConfig, rng: np.random.Generator) -> BlockParams:
    dims = [config.lookback] + [config.hidden_dim] * config.kan_layers_per_block
    trunk = []
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        if config.trunk == "kan":
            trunk.append(L.init_kan(d_in, d_out, config.grid(), rng))
        else:
            trunk.append(L.DenseSiluParams(L.init_linear(d_in, d_out, rng)))
    return BlockParams(
        trunk=trunk,
        theta_f_head=L.init_linear(config.hidden_dim, config.theta_f_dim, rng),
        theta_b_head=L.init_linear(config.hidden_dim, config.theta_b_dim, rng),
        basis_f=np.eye(config.horizon, config.theta_f_dim),
        basis_b=np.eye(config.lookback, config.theta_b_dim),
    )


def init_model(config: ModelConfig, seed=0) -> ModelState:
    rng = np.random.default_rng(seed)
    stacks = [[_make_block(config, rng) for _ in range(config.n_blocks)]
              for _ in range(config.n_stacks)]
    return ModelState(config, stacks)


# ------------------------------------------------------------------ forward


@dataclass
class BlockTrace:
    layer_inputs: list[np.ndarray]  # input to each trunk layer; [0] is the residual
    hidden: np.ndarray
    theta_f: np.ndarray
    theta_b: np.ndarray
    backcast: np.ndarray
    forecast: np.ndarray

    @property
    def residual_in(self) -> np.ndarray:
        return self.layer_inputs[0]


@dataclass
class ForwardTrace:
    window: np.ndarray  # (n, lookback)
    blocks: list[list[BlockTrace]]
    residual_out: np.ndarray
    forecast: np.ndarray  # (n, horizon)
    feature_index: tuple[int, int] = (0, -1)
    single: bool = False

    @property
    def feature(self) -> np.ndarray:
        i, j = self.feature_index
        return self.blocks[i][j].hidden

    def stack_forecasts(self) -> list[np.ndarray]:
        return [sum(b.forecast for b in stack) for stack in self.blocks]


def block_forward(block: BlockParams, residual_in) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Backcast, forecast and hidden vector of one block."""
    bt = _block_forward(block, np.asarray(residual_in, dtype=np.float64))
    return bt.backcast, bt.forecast, bt.hidden


def _block_forward(block: BlockParams, x: np.ndarray) -> BlockTrace:
    inputs = [x]
    h = x
    for layer in block.trunk:
        if not np.all(np.isfinite(h)):
            raise NumericError("non-finite activation in the forward pass; "
                               "lower the learning rate or enable clip_norm")
        h = L.layer_forward(layer, h)
        inputs.append(h)
    inputs.pop()
    theta_f = L.linear_forward(block.theta_f_head, h)
    theta_b = L.linear_forward(block.theta_b_head, h)
    return BlockTrace(
        layer_inputs=inputs,
        hidden=h,
        theta_f=theta_f,
        theta_b=theta_b,
        backcast=theta_b @ block.basis_b.T,
        forecast=theta_f @ block.basis_f.T,
    )


def model_forward(model: ModelState, window) -> ForwardTrace:
    cfg = model.config
    window = np.asarray(window, dtype=np.float64)
    single = window.ndim == 1
    xb = window[None, :] if single else window
    if xb.ndim != 2 or xb.shape[1] != cfg.lookback:
        raise ValueError(f"expected windows of length {cfg.lookback}, got shape {window.shape}")
    residual = xb
    forecast = np.zeros((xb.shape[0], cfg.horizon))
    traces = []
    for stack in model.stacks:
        stack_traces = []
        for block in stack:
            bt = _block_forward(block, residual)
            residual = residual - bt.backcast
            forecast = forecast + bt.forecast
            stack_traces.append(bt)
        traces.append(stack_traces)
    return ForwardTrace(
        window=xb,
        blocks=traces,
        residual_out=residual,
        forecast=forecast,
        single=single,
    )


def predict(model: ModelState, windows, chunk: int = 1024) -> np.ndarray:
    windows = np.atleast_2d(np.asarray(windows, dtype=np.float64))
    parts = [model_forward(model, windows[s:s + chunk]).forecast
             for s in range(0, len(windows), chunk)]
    if not parts:
        return np.zeros((0, model.config.horizon))
    return np.concatenate(parts, axis=0)


# ----------------------------------------------------------------- backward


def _block_backward(block: BlockParams, bt: BlockTrace, g_forecast, g_backcast, g_hidden, prefix):
    grads = {}
    g_theta_f = g_forecast @ block.basis_f
    g_theta_b = g_backcast @ block.basis_b
    gb_f = L.linear_backward(block.theta_f_head, bt.hidden, g_theta_f)
    gb_b = L.linear_backward(block.theta_b_head, bt.hidden, g_theta_b)
    for key, arr in gb_f.grad_params.items():
        grads[f"{prefix}.theta_f_head.{key}"] = arr
    for key, arr in gb_b.grad_params.items():
        grads[f"{prefix}.theta_b_head.{key}"] = arr
    g = gb_f.grad_input + gb_b.grad_input
    if g_hidden is not None:
        g = g + g_hidden
    for li in reversed(range(len(block.trunk))):
        gb = L.layer_backward(block.trunk[li], bt.layer_inputs[li], g)
        for key, arr in gb.grad_params.items():
            grads[f"{prefix}.trunk{li}.{key}"] = arr
        g = gb.grad_input
    return g, grads


def model_backward(model: ModelState, trace: ForwardTrace, grad_forecast, grad_feature=None,
                   return_input_grad: bool = False):
    """Gradients of ``<grad_forecast, yhat> + <grad_feature, feature>``.

    ``grad_feature`` is injected at the first-stack feature tap (the hidden
    vector of the last block of stack 0). Returns a dict keyed like
    :meth:`ModelState.parameters`.
    """
    cfg = model.config
    n = trace.window.shape[0]
    gf = np.asarray(grad_forecast, dtype=np.float64).reshape(n, -1) if trace.single else \
        np.asarray(grad_forecast, dtype=np.float64)
    if gf.shape != (n, cfg.horizon):
        raise ValueError(f"grad_forecast shape {gf.shape} does not match trace ({n}, {cfg.horizon})")
    if len(trace.blocks) != cfg.n_stacks or any(len(s) != cfg.n_blocks for s in trace.blocks):
        raise ValueError("trace structure does not match model")
    gfeat = None
    if grad_feature is not None:
        gfeat = np.asarray(grad_feature, dtype=np.float64).reshape(n, -1)
        if gfeat.shape != (n, cfg.hidden_dim):
            raise ValueError(f"grad_feature shape {gfeat.shape} does not match hidden_dim")
    ti, tj = trace.feature_index
    tj = tj % cfg.n_blocks

    grads = {}
    g_residual = np.zeros((n, cfg.lookback))  # gradient w.r.t. the residual leaving the current block
    for i in reversed(range(cfg.n_stacks)):
        for j in reversed(range(cfg.n_blocks)):
            block = model.stacks[i][j]
            bt = trace.blocks[i][j]
            if bt.residual_in.shape != (n, cfg.lookback):
                raise ValueError("stale trace: residual shape mismatch")
            g_hidden = gfeat if (i == ti and j == tj) else None
            # residual_out = residual_in - backcast
            g_in, bgrads = _block_backward(block, bt, gf, -g_residual, g_hidden, f"stack{i}.block{j}")
            grads.update(bgrads)
            g_residual = g_residual + g_in
    if return_input_grad:
        return grads, g_residual
    return grads


# --------------------------------------------------------------- checkpoint

MAGIC = b"KBCKPT\x00\x00"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


def write_checkpoint(path, config: ModelConfig, arrays: dict[str, np.ndarray], metadata=None) -> None:
    """Binary container: magic, version, JSON header, raw little-endian float64 data."""
    entries, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(np.shape(arr)), "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    header = json.dumps(
        {"format_version": FORMAT_VERSION, "config": config.to_dict(),
         "arrays": entries, "metadata": metadata or {}},
        sort_keys=True,
    ).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def read_checkpoint(path) -> tuple[ModelConfig, dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size:
        raise CheckpointTruncatedError(f"{path}: file too short for a checkpoint header")
    magic, version, header_len = _PREFIX.unpack_from(raw)
    if magic != MAGIC or version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"{path}: unsupported checkpoint format (magic={magic!r}, version={version})"
        )
    start = _PREFIX.size
    if len(raw) < start + header_len:
        raise CheckpointTruncatedError(f"{path}: header truncated")
    try:
        header = json.loads(raw[start:start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointVersionError(f"{path}: unreadable header ({exc})") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: header format_version {header.get('format_version')!r}")
    body = memoryview(raw)[start + header_len:]
    arrays = {}
    for entry in header["arrays"]:
        end = entry["offset"] + entry["nbytes"]
        if end > len(body):
            raise CheckpointTruncatedError(f"{path}: data for {entry['name']!r} truncated")
        shape = tuple(entry["shape"])
        if int(np.prod(shape, dtype=np.int64)) * 8 != entry["nbytes"]:
            raise CheckpointShapeError(f"{path}: {entry['name']!r} size does not match shape {shape}")
        arr = np.frombuffer(body[entry["offset"]:end], dtype="<f8").astype(np.float64).reshape(shape)
        arrays[entry["name"]] = arr
    try:
        config = ModelConfig.from_dict(header["config"])
    except ConfigError as exc:
        raise CheckpointShapeError(f"{path}: bad config ({exc})") from exc
    return config, arrays, header.get("metadata", {})


def assign_arrays(target: dict[str, np.ndarray], source: dict[str, np.ndarray], what: str) -> None:
    """Copy ``source`` into the live arrays of ``target`` after checking names and shapes."""
    missing = set(target) - set(source)
    if missing:
        raise CheckpointShapeError(f"{what}: missing arrays {sorted(missing)[:5]}")
    for name, live in target.items():
        if source[name].shape != live.shape:
            raise CheckpointShapeError(
                f"{what}: {name} has shape {source[name].shape}, expected {live.shape}"
            )
        live[...] = source[name]


def save_model(model: ModelState, path, extra: dict[str, np.ndarray] | None = None, metadata=None) -> None:
    arrays = {f"model.{k}": v for k, v in model.parameters().items()}
    for k, v in (extra or {}).items():
        arrays[f"extra.{k}"] = v
    write_checkpoint(path, model.config, arrays, metadata)


def load_model(path, with_extras: bool = False):
    config, arrays, metadata = read_checkpoint(path)
    model = init_model(config, seed=0)
    model_arrays = {k[len("model."):]: v for k, v in arrays.items() if k.startswith("model.")}
    unexpected = set(model_arrays) - set(model.parameters())
    if unexpected:
        raise CheckpointShapeError(f"{path}: unexpected arrays {sorted(unexpected)[:5]}")
    assign_arrays(model.parameters(), model_arrays, str(path))
    if not with_extras:
        return model
    extras = {k[len("extra."):]: v for k, v in arrays.items() if k.startswith("extra.")}
    return model, extras, metadata
