"""Layer specifications, shape inference, and the op dispatcher.

A network is an ordered list of LayerSpecs plus a parallel list of weight
dicts. Shape inference runs at construction time so invalid stacks are
rejected before any training starts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tz
from .tensor import ShapeError, Tensor

LAYER_KINDS = ("conv2d", "relu", "maxpool2d", "avgpool2d", "flatten", "linear", "softmax")


@dataclass(frozen=True)
class LayerSpec:
    """One layer of a feedforward stack. Unused fields stay 0."""

    kind: str
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    in_features: int = 0
    out_features: int = 0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}, expected one of {LAYER_KINDS}")


def conv_spec(in_channels: int, out_channels: int, kernel: int, stride: int = 1,
              padding: int = 0) -> LayerSpec:
    return LayerSpec("conv2d", in_channels=in_channels, out_channels=out_channels,
                     kernel=kernel, stride=stride, padding=padding)


def linear_spec(in_features: int, out_features: int) -> LayerSpec:
    return LayerSpec("linear", in_features=in_features, out_features=out_features)


def pool_spec(kind: str, kernel: int, stride: int | None = None) -> LayerSpec:
    return LayerSpec(kind, kernel=kernel, stride=stride if stride is not None else kernel)


def out_shape(spec: LayerSpec, in_shape: tuple) -> tuple:
    """Output shape (without batch axis) of ``spec`` applied to ``in_shape``.

    Raises ShapeError whenever a derived dimension would not be a positive
    integer.
    """
    k = spec.kind
    if k == "conv2d":
        c, h, w = _expect_chw(k, in_shape)
        if c != spec.in_channels:
            raise ShapeError(f"conv2d: input has {c} channels, spec expects {spec.in_channels}")
        oh = (h + 2 * spec.padding - spec.kernel) // spec.stride + 1
        ow = (w + 2 * spec.padding - spec.kernel) // spec.stride + 1
        if oh < 1 or ow < 1:
            raise ShapeError(f"conv2d: kernel {spec.kernel} stride {spec.stride} "
                             f"padding {spec.padding} on {h}x{w} gives {oh}x{ow}")
        return (spec.out_channels, oh, ow)
    if k in ("maxpool2d", "avgpool2d"):
        c, h, w = _expect_chw(k, in_shape)
        oh = (h - spec.kernel) // spec.stride + 1
        ow = (w - spec.kernel) // spec.stride + 1
        if oh < 1 or ow < 1:
            raise ShapeError(f"{k}: window {spec.kernel} stride {spec.stride} on {h}x{w}")
        return (c, oh, ow)
    if k == "flatten":
        return (int(np.prod(in_shape)),)
    if k == "linear":
        if len(in_shape) != 1 or in_shape[0] != spec.in_features:
            raise ShapeError(f"linear: input shape {in_shape}, spec expects ({spec.in_features},)")
        return (spec.out_features,)
    # relu / softmax are shape-preserving
    return tuple(in_shape)


def _expect_chw(kind: str, shape: tuple) -> tuple:
    if len(shape) != 3:
        raise ShapeError(f"{kind}: expected (channels, h, w) input, got {shape}")
    return shape


def init_params(spec: LayerSpec, rng: np.random.Generator) -> dict[str, Tensor]:
    """He-normal weights and zero biases for parameterized layers."""
    if spec.kind == "conv2d":
        fan_in = spec.in_channels * spec.kernel * spec.kernel
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in),
                       (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel))
        return {"weight": Tensor(w, requires_grad=True),
                "bias": Tensor(np.zeros(spec.out_channels), requires_grad=True)}
    if spec.kind == "linear":
        # Small head init keeps initial logits near zero; saturated softmax
        # rows at step 0 would stall under the probability clamp.
        w = rng.normal(0.0, 0.1 * np.sqrt(1.0 / spec.in_features),
                       (spec.in_features, spec.out_features))
        return {"weight": Tensor(w, requires_grad=True),
                "bias": Tensor(np.zeros(spec.out_features), requires_grad=True)}
    return {}


def forward_op(kind: str, x: Tensor, params: dict) -> Tensor:
    """Apply one op by kind. ``params`` holds hyperparameters and, for
    conv2d/linear, the weight/bias tensors."""
    if kind == "conv2d":
        return tz.conv2d(x, params["weight"], params["bias"],
                         stride=params.get("stride", 1), padding=params.get("padding", 0))
    if kind == "relu":
        return tz.relu(x)
    if kind == "maxpool2d":
        return tz.maxpool2d(x, params["kernel"], params.get("stride"))
    if kind == "avgpool2d":
        return tz.avgpool2d(x, params["kernel"], params.get("stride"))
    if kind == "flatten":
        return tz.flatten(x)
    if kind == "linear":
        return tz.linear(x, params["weight"], params["bias"])
    if kind == "softmax":
        return tz.softmax(x)
    raise ValueError(f"unknown layer kind {kind!r}")


def apply_layer(spec: LayerSpec, x: Tensor, weights: dict[str, Tensor]) -> Tensor:
    params = dict(weights)
    if spec.kind == "conv2d":
        params.update(stride=spec.stride, padding=spec.padding)
    elif spec.kind in ("maxpool2d", "avgpool2d"):
        params.update(kernel=spec.kernel, stride=spec.stride)
    return forward_op(spec.kind, x, params)


def expert_backbone(input_shape: tuple, n_classes: int,
                    channels: tuple = (8, 16, 32)) -> list[LayerSpec]:
    """Three conv blocks (conv -> relu -> maxpool) and a linear head."""
    c, h, w = input_shape
    specs: list[LayerSpec] = []
    shape = tuple(input_shape)
    in_c = c
    for out_c in channels:
        specs.append(conv_spec(in_c, out_c, kernel=3, stride=1, padding=1))
        specs.append(LayerSpec("relu"))
        specs.append(pool_spec("maxpool2d", 2))
        in_c = out_c
    for spec in specs:
        shape = out_shape(spec, shape)
    specs.append(LayerSpec("flatten"))
    shape = out_shape(specs[-1], shape)
    specs.append(linear_spec(shape[0], n_classes))
    return specs


def cam_minimum(input_shape: tuple) -> int:
    """Smallest admissible spatial size of the CAM target layer: 8 for
    full-size (>=32px) inputs, 4 for smaller desk-scale inputs."""
    return 8 if min(input_shape[1], input_shape[2]) >= 32 else 4


def find_cam_layer(specs: list[LayerSpec], input_shape: tuple) -> int:
    """Index of the deepest conv layer whose output spatial dims meet the
    CAM minimum."""
    minimum = cam_minimum(input_shape)
    shape = tuple(input_shape)
    best = -1
    for i, spec in enumerate(specs):
        shape = out_shape(spec, shape)
        if spec.kind == "conv2d" and min(shape[1], shape[2]) >= minimum:
            best = i
    if best < 0:
        raise ShapeError(f"no conv layer with output >= {minimum}x{minimum} "
                         f"for input {input_shape}")
    return best
