"""DDxNet: densely connected dilated causal convolution stages with transitions.

Layout of a built model::

    stem conv (stem_kernel, dilation 1)
    stage 0:  block 0 .. block B-1     each block appends k channels
    transition 0: bn -> relu -> 1x1 conv to floor(theta*C) -> avg_pool(2, 2)
    stage 1: ...
    ...
    final bn -> relu -> global average pool -> linear head

A block is ``concat([x, conv_K(relu(bn(conv_1x1(relu(bn(x))))))])``.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import ops
from .errors import ConfigError, InvalidArgumentError, ShapeError
from .ops import Mode
from .tensor import Parameter, Tape, Tensor, backward, get_default_dtype

TRANSITION_WINDOW = 2
TRANSITION_STRIDE = 2


class Head(str, Enum):
    MULTICLASS = "multiclass"
    MULTILABEL = "multilabel"


@dataclass(frozen=True)
class DilationMode:
    """``kind`` is ``"exponential_per_stage"`` (d = 2**block) or ``"fixed"``."""

    kind: str = "exponential_per_stage"
    dilation: int = 1

    @classmethod
    def exponential(cls) -> "DilationMode":
        return cls("exponential_per_stage")

    @classmethod
    def fixed(cls, d: int) -> "DilationMode":
        return cls("fixed", d)

    def to_json(self):
        if self.kind == "fixed":
            return {"kind": "fixed", "dilation": self.dilation}
        return {"kind": self.kind}

    @classmethod
    def from_json(cls, obj) -> "DilationMode":
        if isinstance(obj, str):
            obj = {"kind": obj}
        if not isinstance(obj, dict):
            raise ConfigError(f"dilation_mode must be an object or string, got {obj!r}")
        extra = set(obj) - {"kind", "dilation"}
        if extra:
            raise ConfigError(f"unknown dilation_mode keys: {sorted(extra)}")
        kind = obj.get("kind")
        if kind == "exponential_per_stage":
            if "dilation" in obj:
                raise ConfigError("exponential_per_stage takes no dilation value")
            return cls.exponential()
        if kind == "fixed":
            d = obj.get("dilation")
            if not isinstance(d, int) or isinstance(d, bool):
                raise ConfigError("fixed dilation_mode needs an integer 'dilation'")
            return cls.fixed(d)
        raise ConfigError(f"unknown dilation_mode kind {kind!r}")


@dataclass(frozen=True)
class DDxConfig:
    in_channels: int
    num_classes: int
    head: Head = Head.MULTICLASS
    stages: int = 3
    blocks_per_stage: int = 4
    growth_rate: int = 12
    kernel_size: int = 3
    bottleneck_factor: int = 4
    compression: float = 0.5
    stem_channels: int = 32
    stem_kernel: int = 7
    dilation_mode: DilationMode = DilationMode()

    def __post_init__(self):
        object.__setattr__(self, "head", Head(self.head))
        ints = (
            "in_channels", "num_classes", "stages", "blocks_per_stage", "growth_rate",
            "kernel_size", "bottleneck_factor", "stem_channels", "stem_kernel",
        )
        for name in ints:
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool):
                raise ConfigError(f"{name} must be an integer, got {v!r}")
        for name in ints:
            if name != "num_classes" and getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        min_classes = 2 if self.head is Head.MULTICLASS else 1
        if self.num_classes < min_classes:
            raise ConfigError(f"{self.head.value} head needs num_classes >= {min_classes}")
        if not (0 < self.compression <= 1):
            raise ConfigError(f"compression must lie in (0, 1], got {self.compression}")
        if self.dilation_mode.kind == "fixed" and self.dilation_mode.dilation < 1:
            raise ConfigError("fixed dilation must be >= 1")

    def to_json(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        d["head"] = self.head.value
        d["dilation_mode"] = self.dilation_mode.to_json()
        return d

    @classmethod
    def from_json(cls, obj) -> "DDxConfig":
        if not isinstance(obj, dict):
            raise ConfigError("model config must be a JSON object")
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(obj) - names
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        for required in ("in_channels", "num_classes"):
            if required not in obj:
                raise ConfigError(f"model config missing {required!r}")
        kwargs = dict(obj)
        if "dilation_mode" in kwargs:
            kwargs["dilation_mode"] = DilationMode.from_json(kwargs["dilation_mode"])
        if "head" in kwargs:
            try:
                kwargs["head"] = Head(kwargs["head"])
            except ValueError:
                raise ConfigError(f"unknown head {kwargs['head']!r}") from None
        return cls(**kwargs)

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)


# -- architecture arithmetic -----------------------------------------------------------


def dilation_schedule(config: DDxConfig) -> list[list[int]]:
    """Dilation for every block, grouped by stage."""
    if config.dilation_mode.kind == "fixed":
        d = config.dilation_mode.dilation
        return [[d] * config.blocks_per_stage for _ in range(config.stages)]
    return [[2**l for l in range(config.blocks_per_stage)] for _ in range(config.stages)]


def channel_plan(config: DDxConfig) -> list[dict]:
    """Per-stage channel bookkeeping: entry, per-block input channels, exit, post-transition."""
    plan = []
    c = config.stem_channels
    k = config.growth_rate
    for s in range(config.stages):
        entry = c
        block_inputs = [entry + l * k for l in range(config.blocks_per_stage)]
        c = entry + config.blocks_per_stage * k
        stage = {"entry": entry, "block_inputs": block_inputs, "exit": c}
        if s < config.stages - 1:
            compressed = math.floor(config.compression * c)
            if compressed < 1:
                raise ConfigError(
                    f"compression {config.compression} leaves {compressed} channels after stage {s}"
                )
            stage["transition_out"] = compressed
            c = compressed
        plan.append(stage)
    return plan


def min_length(config: DDxConfig) -> int:
    return 2 ** (config.stages - 1)


def receptive_field(config: DDxConfig) -> int:
    """Number of trailing input samples that can influence the last output position."""
    rf = 1 + (config.stem_kernel - 1)
    stride = 1
    for s, dilations in enumerate(dilation_schedule(config)):
        for d in dilations:
            rf += stride * (config.kernel_size - 1) * d
        if s < config.stages - 1:
            rf += stride * (TRANSITION_WINDOW - 1)
            stride *= TRANSITION_STRIDE
    return rf


def param_count(config: DDxConfig) -> int:
    k = config.growth_rate
    bott = config.bottleneck_factor * k
    total = config.in_channels * config.stem_channels * config.stem_kernel + config.stem_channels
    c = config.stem_channels
    for stage in channel_plan(config):
        for cin in stage["block_inputs"]:
            total += 2 * cin  # bn1
            total += cin * bott + bott
            total += 2 * bott  # bn2
            total += bott * k * config.kernel_size + k
        c = stage["exit"]
        if "transition_out" in stage:
            out = stage["transition_out"]
            total += 2 * c + c * out + out
            c = out
    total += 2 * c  # final bn
    total += c * config.num_classes + config.num_classes
    return total


# -- parameters ----------------------------------------------------------------------------


class Model:
    """Configuration, named parameters, and batch-norm running statistics."""

    def __init__(self, config: DDxConfig, params: dict, running: dict):
        self.config = config
        self.params = params
        self.running = running

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def __getitem__(self, name) -> Parameter:
        return self.params[name]

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def grads(self) -> dict:
        return {name: p.grad for name, p in self.params.items()}

    def state_arrays(self) -> dict:
        """Every stored array by name: parameters plus running statistics."""
        out = {name: p.data for name, p in self.params.items()}
        for site, (mean, var) in self.running.items():
            out[f"{site}.running_mean"] = mean
            out[f"{site}.running_var"] = var
        return out

    def expected_shapes(self) -> dict:
        return {name: a.shape for name, a in self.state_arrays().items()}


def _layout(config: DDxConfig):
    """Yield ``(name, shape, kind)`` for every parameter in creation order.

    ``kind`` is ``"w"`` (He-normal), ``"b"`` (zeros), ``"gamma"`` or ``"beta"``.
    """
    k = config.growth_rate
    bott = config.bottleneck_factor * k
    yield "stem.w", (config.stem_channels, config.in_channels, config.stem_kernel), "w"
    yield "stem.b", (config.stem_channels,), "b"
    c = config.stem_channels
    for s, stage in enumerate(channel_plan(config)):
        for l, cin in enumerate(stage["block_inputs"]):
            pre = f"stage{s}.block{l}"
            yield from _bn_layout(f"{pre}.bn1", cin)
            yield f"{pre}.bottleneck.w", (bott, cin, 1), "w"
            yield f"{pre}.bottleneck.b", (bott,), "b"
            yield from _bn_layout(f"{pre}.bn2", bott)
            yield f"{pre}.conv.w", (k, bott, config.kernel_size), "w"
            yield f"{pre}.conv.b", (k,), "b"
        c = stage["exit"]
        if "transition_out" in stage:
            out = stage["transition_out"]
            yield from _bn_layout(f"transition{s}.bn", c)
            yield f"transition{s}.conv.w", (out, c, 1), "w"
            yield f"transition{s}.conv.b", (out,), "b"
            c = out
    yield from _bn_layout("final_bn", c)
    yield "head.w", (config.num_classes, c), "w"
    yield "head.b", (config.num_classes,), "b"


def _bn_layout(site, c):
    yield f"{site}.gamma", (c,), "gamma"
    yield f"{site}.beta", (c,), "beta"


def build(config: DDxConfig, seed: int = 0, dtype=None) -> Model:
    """Materialize parameters: He-normal weights, zero biases, unit gamma, zero beta."""
    dtype = np.dtype(dtype) if dtype is not None else get_default_dtype()
    rng = np.random.default_rng(seed)
    params = {}
    running = {}
    for name, shape, kind in _layout(config):
        if kind == "w":
            fan_in = int(np.prod(shape[1:]))
            value = rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)
        elif kind == "gamma":
            value = np.ones(shape)
            site = name.rsplit(".", 1)[0]
            running[site] = (np.zeros(shape, dtype=dtype), np.ones(shape, dtype=dtype))
        else:
            value = np.zeros(shape)
        params[name] = Parameter(value.astype(dtype), name)
    return Model(config, params, running)


# -- forward ---------------------------------------------------------------------------------


def _bn_relu(model: Model, site: str, x: Tensor, mode: Mode, tape) -> Tensor:
    p = model.params
    y, new_running = ops.batchnorm1d(
        x, p[f"{site}.gamma"], p[f"{site}.beta"], model.running[site], mode, tape=tape
    )
    if mode is Mode.TRAIN:
        model.running[site] = new_running
    return ops.relu(y, tape=tape)


def block_forward(model: Model, stage: int, block: int, x: Tensor, mode=Mode.EVAL, tape=None) -> Tensor:
    """One DDx block: bottleneck then dilated causal conv; returns ``concat([x, new])``."""
    mode = Mode(mode)
    pre = f"stage{stage}.block{block}"
    p = model.params
    expected = p[f"{pre}.bottleneck.w"].shape[1]
    if x.shape[1] != expected:
        raise ShapeError(f"{pre}: expected {expected} input channels, got {x.shape[1]}")
    d = dilation_schedule(model.config)[stage][block]
    h = _bn_relu(model, f"{pre}.bn1", x, mode, tape)
    h = ops.conv1d_causal(h, p[f"{pre}.bottleneck.w"], p[f"{pre}.bottleneck.b"], 1, tape=tape)
    h = _bn_relu(model, f"{pre}.bn2", h, mode, tape)
    f = ops.conv1d_causal(h, p[f"{pre}.conv.w"], p[f"{pre}.conv.b"], d, tape=tape)
    return ops.concat_channels([x, f], tape=tape)


def transition_forward(model: Model, stage: int, x: Tensor, mode=Mode.EVAL, tape=None, trace=None) -> Tensor:
    """Compress channels with a 1x1 conv then halve time with average pooling."""
    mode = Mode(mode)
    pre = f"transition{stage}"
    p = model.params
    expected = p[f"{pre}.conv.w"].shape[1]
    if x.shape[1] != expected:
        raise ShapeError(f"{pre}: expected {expected} input channels, got {x.shape[1]}")
    if x.shape[2] < TRANSITION_WINDOW:
        raise InvalidArgumentError(f"{pre}: length {x.shape[2]} is shorter than the pooling window")
    h = _bn_relu(model, f"{pre}.bn", x, mode, tape)
    h = ops.conv1d_causal(h, p[f"{pre}.conv.w"], p[f"{pre}.conv.b"], 1, tape=tape)
    if trace is not None:
        trace[f"{pre}.prepool"] = h.data
    return ops.avg_pool1d(h, TRANSITION_WINDOW, TRANSITION_STRIDE, tape=tape)


def forward_features(model: Model, x: Tensor, mode=Mode.EVAL, tape=None, trace=None) -> Tensor:
    """Run everything up to (and including) the final bn+relu; returns (N, C, T')."""
    mode = Mode(mode)
    cfg = model.config
    if x.data.ndim != 3:
        raise ShapeError(f"model input must be (N, C, T), got {x.shape}")
    if x.shape[1] != cfg.in_channels:
        raise ShapeError(f"model expects {cfg.in_channels} input channels, got {x.shape[1]}")
    if x.shape[2] < min_length(cfg):
        raise InvalidArgumentError(
            f"input length {x.shape[2]} too short; need at least {min_length(cfg)} samples"
        )
    p = model.params
    h = ops.conv1d_causal(x, p["stem.w"], p["stem.b"], 1, tape=tape)
    if trace is not None:
        trace["stem"] = h.data
    for s in range(cfg.stages):
        for l in range(cfg.blocks_per_stage):
            h = block_forward(model, s, l, h, mode, tape)
            if trace is not None:
                trace[f"stage{s}.block{l}"] = h.data
        if s < cfg.stages - 1:
            h = transition_forward(model, s, h, mode, tape, trace)
    h = _bn_relu(model, "final_bn", h, mode, tape)
    if trace is not None:
        trace["final"] = h.data
    return h


def forward(model: Model, x: Tensor, mode=Mode.EVAL, tape=None, trace=None) -> Tensor:
    """Logits of shape (N, num_classes).  No softmax/sigmoid is applied."""
    h = forward_features(model, x, mode, tape, trace)
    pooled = ops.global_avg_pool(h, tape=tape)
    return ops.linear(pooled, model.params["head.w"], model.params["head.b"], tape=tape)


def loss_and_grads(model: Model, x: Tensor, targets, mode=Mode.TRAIN, class_weights=None):
    """One forward/backward pass.  Returns ``(loss_value, logits)``; grads accumulate."""
    tape = Tape()
    logits = forward(model, x, mode, tape)
    if model.config.head is Head.MULTICLASS:
        loss, _ = ops.softmax_cross_entropy(logits, targets, class_weights, tape=tape)
    else:
        loss, _ = ops.sigmoid_bce(logits, targets, tape=tape)
    backward(tape, loss)
    return loss.item(), logits.data


def predict_proba(model: Model, x: Tensor) -> np.ndarray:
    logits = forward(model, x, Mode.EVAL).data
    if model.config.head is Head.MULTICLASS:
        return ops.softmax(logits)
    return ops.sigmoid(logits)
