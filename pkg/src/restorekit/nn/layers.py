"""Model construction and functional forward/backward.

Parameters live in a flat named ParamSet so task-adapted copies are cheap
and the meta-update is plain elementwise arithmetic.  ``forward`` rebuilds
the graph each call with whichever ParamSet it is given, which is exactly
what per-task adaptation needs.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterator, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

ARCHITECTURES = ("msresnet_mini", "resnet_plain")


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    architecture: str = "msresnet_mini"
    stages: int = 1
    channels: int = 8
    in_channels: int = 1
    kernel: int = 3
    dilations: tuple[int, ...] = (1, 2, 3)
    leaky_slope: float = 0.2
    se_reduction: int = 4
    normalization: str = "affine"  # affine | none
    activation: str = "prelu"  # prelu | leaky_relu
    dtype: str = "float32"

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ModelError(f"unknown architecture {self.architecture!r}")
        if self.stages < 1 or self.channels < 1:
            raise ModelError("stages and channels must be >= 1")
        if self.in_channels not in (1, 3):
            raise ModelError("in_channels must be 1 or 3")
        if self.kernel % 2 != 1:
            raise ModelError("kernel must be odd")
        if self.normalization not in ("affine", "none"):
            raise ModelError(f"unknown normalization {self.normalization!r}")
        if self.activation not in ("prelu", "leaky_relu"):
            raise ModelError(f"unknown activation {self.activation!r}")
        if not self.dilations:
            raise ModelError("need at least one dilation rate")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)


class ParamSet:
    """Ordered named tensors with elementwise linear arithmetic."""

    def __init__(self, tensors: dict[str, np.ndarray]):
        self.tensors = dict(tensors)

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __len__(self) -> int:
        return len(self.tensors)

    def copy(self) -> "ParamSet":
        return ParamSet({k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype) -> "ParamSet":
        return ParamSet({k: v.astype(dtype) for k, v in self.tensors.items()})

    def zeros_like(self) -> "ParamSet":
        return ParamSet({k: np.zeros_like(v) for k, v in self.tensors.items()})

    def count(self) -> int:
        return int(sum(v.size for v in self.tensors.values()))

    def check_aligned(self, other: "ParamSet") -> None:
        if list(self.tensors) != list(other.tensors):
            raise ModelError("parameter name mismatch")
        for k in self.tensors:
            if self.tensors[k].shape != other.tensors[k].shape:
                raise ModelError(f"shape mismatch for {k!r}")

    def combine(self, other: "ParamSet", scale: float) -> "ParamSet":
        """self + scale * other, elementwise."""
        self.check_aligned(other)
        return ParamSet({k: self.tensors[k] + scale * other.tensors[k] for k in self.tensors})

    def allclose(self, other: "ParamSet", atol: float = 0.0, rtol: float = 0.0) -> bool:
        self.check_aligned(other)
        return all(
            np.allclose(self.tensors[k], other.tensors[k], atol=atol, rtol=rtol)
            for k in self.tensors
        )


@dataclass
class Model:
    config: ModelConfig
    params: ParamSet


@dataclass
class Tape:
    """The live graph of one forward pass: leaves for every parameter plus
    the input; consumed once by backward."""

    param_tensors: dict[str, Tensor]
    input_tensor: Tensor
    output: Tensor
    consumed: bool = False


def _kaiming(rng: np.random.Generator, shape, fan_in: int, slope: float, dtype) -> np.ndarray:
    std = np.sqrt(2.0 / ((1.0 + slope**2) * fan_in))
    return (rng.standard_normal(shape) * std).astype(dtype)


def _init_unit(params, rng, cfg, name, cin, cout, zero=False):
    k = cfg.kernel
    if zero:
        params[f"{name}.w"] = np.zeros((cout, cin, k, k), dtype=cfg.np_dtype)
    else:
        params[f"{name}.w"] = _kaiming(rng, (cout, cin, k, k), cin * k * k, cfg.leaky_slope, cfg.np_dtype)
    params[f"{name}.b"] = np.zeros(cout, dtype=cfg.np_dtype)
    if zero:
        return
    if cfg.normalization == "affine":
        params[f"{name}.scale"] = np.ones(cout, dtype=cfg.np_dtype)
        params[f"{name}.shift"] = np.zeros(cout, dtype=cfg.np_dtype)
    if cfg.activation == "prelu":
        params[f"{name}.slope"] = np.full(cout, cfg.leaky_slope, dtype=cfg.np_dtype)


def _init_se(params, rng, cfg, name, channels):
    hidden = max(1, channels // cfg.se_reduction)
    params[f"{name}.w1"] = _kaiming(rng, (channels, hidden), channels, 0.0, cfg.np_dtype)
    params[f"{name}.b1"] = np.zeros(hidden, dtype=cfg.np_dtype)
    params[f"{name}.w2"] = _kaiming(rng, (hidden, channels), hidden, 0.0, cfg.np_dtype)
    params[f"{name}.b2"] = np.zeros(channels, dtype=cfg.np_dtype)


def build_model(cfg: ModelConfig, rng: np.random.Generator) -> Model:
    """Initialize all parameters for the configured topology.

    Conv kernels use fan-in scaling, biases start at zero, and the output
    head starts at zero so the untrained model is the identity restorer.
    """
    params: dict[str, np.ndarray] = {}
    ch = cfg.channels
    _init_unit(params, rng, cfg, "head", cfg.in_channels, ch)
    if cfg.architecture == "msresnet_mini":
        for q in range(cfg.stages):
            for i in range(len(cfg.dilations)):
                _init_unit(params, rng, cfg, f"s{q}.msb.b{i}.c0", ch, ch)
                _init_unit(params, rng, cfg, f"s{q}.msb.b{i}.c1", ch, ch)
            _init_unit(params, rng, cfg, f"s{q}.msb.fuse", ch * len(cfg.dilations), ch)
            _init_se(params, rng, cfg, f"s{q}.msb.se", ch)
            _init_unit(params, rng, cfg, f"s{q}.rb.c0", ch, ch)
            _init_unit(params, rng, cfg, f"s{q}.rb.c1", ch, ch)
            _init_se(params, rng, cfg, f"s{q}.rb.se", ch)
        _init_unit(params, rng, cfg, "tb.c0", ch, ch)
        _init_unit(params, rng, cfg, "tb.c1", ch, ch)
        _init_se(params, rng, cfg, "tb.se", ch)
    else:  # resnet_plain
        for q in range(cfg.stages):
            _init_unit(params, rng, cfg, f"s{q}.rb.c0", ch, ch)
            _init_unit(params, rng, cfg, f"s{q}.rb.c1", ch, ch)
        _init_unit(params, rng, cfg, "tb.c0", ch, ch)
    _init_unit(params, rng, cfg, "tb.out", ch, cfg.in_channels, zero=True)
    return Model(config=cfg, params=ParamSet(params))


def _unit(t: Tensor, p: dict[str, Tensor], cfg: ModelConfig, name: str, dilation: int = 1) -> Tensor:
    """One conv unit: reflect pad, conv, channel affine, activation."""
    pad = dilation * (cfg.kernel - 1) // 2
    t = ad.pad_reflect(t, pad)
    t = ad.conv2d(t, p[f"{name}.w"], p[f"{name}.b"], dilation=dilation)
    if cfg.normalization == "affine":
        t = ad.channel_affine(t, p[f"{name}.scale"], p[f"{name}.shift"])
    if cfg.activation == "prelu":
        t = ad.prelu(t, p[f"{name}.slope"])
    else:
        t = ad.leaky_relu(t, cfg.leaky_slope)
    return t


def _se(t: Tensor, p: dict[str, Tensor], name: str) -> Tensor:
    """Squeeze-and-excite channel gate."""
    z = ad.global_avg_pool(t)
    z = ad.relu(ad.add(ad.matmul(z, p[f"{name}.w1"]), p[f"{name}.b1"]))
    z = ad.sigmoid(ad.add(ad.matmul(z, p[f"{name}.w2"]), p[f"{name}.b2"]))
    gate = ad.reshape(z, (t.data.shape[0], t.data.shape[1], 1, 1))
    return ad.mul(t, gate)


def forward(model: Model, x: np.ndarray, params: Optional[ParamSet] = None) -> tuple[Tensor, Tape]:
    """Run the restorer on a (B, C, H, W) batch.

    Returns the restored-output graph node and the tape holding the
    parameter leaves; pass an adapted ParamSet to evaluate a task copy
    without touching the model's own parameters.
    """
    cfg = model.config
    pset = params if params is not None else model.params
    x = np.asarray(x, dtype=cfg.np_dtype)
    if x.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise ModelError(f"expected (B, {cfg.in_channels}, H, W) input, got {x.shape}")

    leaves = {name: Tensor(pset[name], requires_grad=True) for name in pset}
    xin = Tensor(x)

    t = _unit(xin, leaves, cfg, "head")
    if cfg.architecture == "msresnet_mini":
        prev_ms: Optional[Tensor] = None
        rb_outs: list[Tensor] = []
        for q in range(cfg.stages):
            branches = []
            for i, d in enumerate(cfg.dilations):
                b = _unit(t, leaves, cfg, f"s{q}.msb.b{i}.c0", dilation=d)
                b = _unit(b, leaves, cfg, f"s{q}.msb.b{i}.c1", dilation=d)
                branches.append(b)
            ms = _unit(ad.concat_channels(branches), leaves, cfg, f"s{q}.msb.fuse")
            ms = _se(ms, leaves, f"s{q}.msb.se")
            if prev_ms is not None:
                ms = ad.add(ms, prev_ms)  # skip from the previous multi-scale block
            prev_ms = ms
            r = ad.add(ms, _unit(ms, leaves, cfg, f"s{q}.rb.c0"))
            r = ad.add(r, _unit(r, leaves, cfg, f"s{q}.rb.c1"))
            r = _se(r, leaves, f"s{q}.rb.se")
            rb_outs.append(r)
            t = r
        head_in = rb_outs[-1] if len(rb_outs) < 2 else ad.add(rb_outs[-1], rb_outs[-2])
        t = _unit(head_in, leaves, cfg, "tb.c0")
        t = _unit(t, leaves, cfg, "tb.c1")
        t = _se(t, leaves, "tb.se")
    else:
        for q in range(cfg.stages):
            r = ad.add(t, _unit(t, leaves, cfg, f"s{q}.rb.c0"))
            r = ad.add(r, _unit(r, leaves, cfg, f"s{q}.rb.c1"))
            t = r
        t = _unit(t, leaves, cfg, "tb.c0")

    pad = (cfg.kernel - 1) // 2
    layer = ad.conv2d(ad.pad_reflect(t, pad), leaves["tb.out.w"], leaves["tb.out.b"])
    out = ad.sub(xin, layer)  # restoration = input minus predicted degradation layer
    if not np.isfinite(out.data).all():
        raise ModelError("non-finite activations in forward pass")
    return out, Tape(param_tensors=leaves, input_tensor=xin, output=out)


def backward(tape: Tape, loss: Tensor, seed=None) -> ParamSet:
    """Differentiate a loss built on the tape's output; returns one
    gradient array per parameter (zeros where the loss does not reach)."""
    if tape.consumed:
        raise ModelError("stale tape: backward already ran on this graph")
    tape.consumed = True
    loss.backward(seed)
    grads = {}
    for name, leaf in tape.param_tensors.items():
        if leaf.grad is None:
            grads[name] = np.zeros_like(leaf.data)
        else:
            if not np.isfinite(leaf.grad).all():
                raise ModelError(f"non-finite gradient for {name!r}")
            grads[name] = leaf.grad
    return ParamSet(grads)
