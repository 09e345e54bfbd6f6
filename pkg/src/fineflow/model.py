"""Compound-scaled CNN backbones and the fine-tuning head surgery.

A backbone is a flat stack of [conv3x3 -> batch_norm -> relu] blocks with
stride-2 downsampling on every odd-indexed block and channel doubling at each
downsample (capped at 8x the stem width). The depth/width/resolution of the
stack scale jointly with a single compound coefficient phi:

    depth      = round(base_blocks   * 1.2^phi)
    width      = round(base_channels * 1.1^phi)
    resolution = round(input_side    * 1.15^phi), snapped down to a multiple
                 of 2^(number of stride-2 blocks)

phi = 0 reproduces the base configuration exactly. The trunk always ends in
an activation, which is the well-defined cut point for head surgery: every
layer after the last activation is removed and the classification head
(pool -> batch_norm -> dense -> dropout -> relu -> dense -> softmax) is
appended with fresh weights while backbone weights are preserved bit-exactly.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from .errors import ShapeError
from .image import ImageU8, bgr_to_rgb, resize_bilinear, scale_to_unit, sharpen
from .layers import (
    BatchNormState,
    batch_norm,
    conv2d,
    dense,
    dropout,
    global_pool,
    relu,
    softmax,
)
from .rng import RngState
from .tensor import Tensor

ALPHA, BETA, GAMMA_RES = 1.2, 1.1, 1.15
WIDTH_CAP_FACTOR = 8


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


@dataclass(frozen=True)
class BackboneConfig:
    base_blocks: int = 4
    base_channels: int = 8
    phi: float = 0.0
    input_side: int = 256
    skip_connections: bool = False

    def __post_init__(self):
        if self.base_blocks < 1:
            raise ShapeError("base_blocks must be >= 1")
        if self.base_channels < 4:
            raise ShapeError("base_channels must be >= 4")
        if self.phi < 0:
            raise ShapeError("phi must be non-negative")

    def scaled(self) -> tuple[int, int, int]:
        """(depth, stem width, resolution) after compound scaling."""
        depth = _round_half_up(self.base_blocks * ALPHA**self.phi)
        width = _round_half_up(self.base_channels * BETA**self.phi)
        side = _round_half_up(self.input_side * GAMMA_RES**self.phi)
        stages = (depth + 1) // 2  # stride-2 at the start of each 2-block stage
        divisor = 2**stages
        snapped = (side // divisor) * divisor
        if snapped < divisor:
            raise ShapeError(
                f"resolution {side} not divisible by 2^{stages} and too small to snap"
            )
        if self.phi == 0 and side % divisor != 0:
            raise ShapeError(f"input_side {side} must be divisible by 2^{stages}")
        return depth, width, snapped


@dataclass(frozen=True)
class HeadConfig:
    num_classes: int
    pooling: str = "avg"
    dense_units: int = 128
    dropout_rate: float = 0.2

    def __post_init__(self):
        if self.num_classes < 2:
            raise ShapeError("num_classes must be >= 2")
        if self.pooling not in ("avg", "max"):
            raise ShapeError(f"unknown pooling {self.pooling!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ShapeError("dropout_rate must be in [0, 1)")


# ---------------------------------------------------------------------------
# layers as model building blocks


class ConvLayer:
    kind = "conv"
    is_activation = False

    def __init__(self, kernels: Tensor, bias: Tensor, stride: int, padding: str):
        self.kernels = kernels
        self.bias = bias
        self.stride = stride
        self.padding = padding

    def params(self):
        return [("kernels", self.kernels), ("bias", self.bias)]

    def buffers(self):
        return []

    def spec(self):
        o, c, kh, kw = self.kernels.shape
        return {"kind": self.kind, "in": c, "out": o, "kh": kh, "kw": kw,
                "stride": self.stride, "padding": self.padding}

    def forward(self, x, mode, ctx):
        return conv2d(x, self.kernels, self.bias, self.stride, self.padding)


class BatchNormLayer:
    kind = "batch_norm"
    is_activation = False

    def __init__(self, state: BatchNormState):
        self.state = state

    def params(self):
        return [("gamma", self.state.gamma), ("beta", self.state.beta)]

    def buffers(self):
        return [("running_mean", self.state.running_mean),
                ("running_var", self.state.running_var)]

    def set_buffer(self, name, value):
        setattr(self.state, name, value)

    def spec(self):
        return {"kind": self.kind, "channels": int(self.state.gamma.size),
                "momentum": self.state.momentum, "eps": self.state.eps}

    def forward(self, x, mode, ctx):
        # Frozen batch-norm runs on running statistics even while training.
        effective = "infer" if (mode == "train" and ctx.frozen) else mode
        return batch_norm(x, self.state, effective)


class ReLULayer:
    kind = "relu"
    is_activation = True

    def params(self):
        return []

    def buffers(self):
        return []

    def spec(self):
        return {"kind": self.kind}

    def forward(self, x, mode, ctx):
        return relu(x)


class ResConvBlock:
    """conv -> batch_norm -> add identity -> relu, for shape-preserving blocks."""

    kind = "res_block"
    is_activation = True  # ends in relu

    def __init__(self, kernels: Tensor, bias: Tensor, bn: BatchNormState):
        self.kernels = kernels
        self.bias = bias
        self.bn = bn

    def params(self):
        return [("kernels", self.kernels), ("bias", self.bias),
                ("gamma", self.bn.gamma), ("beta", self.bn.beta)]

    def buffers(self):
        return [("running_mean", self.bn.running_mean),
                ("running_var", self.bn.running_var)]

    def set_buffer(self, name, value):
        setattr(self.bn, name, value)

    def spec(self):
        o, c, kh, kw = self.kernels.shape
        return {"kind": self.kind, "channels": o, "momentum": self.bn.momentum,
                "eps": self.bn.eps}

    def forward(self, x, mode, ctx):
        effective = "infer" if (mode == "train" and ctx.frozen) else mode
        y = batch_norm(conv2d(x, self.kernels, self.bias, 1, "same"), self.bn, effective)
        return relu(y + x)


class GlobalPoolLayer:
    kind = "global_pool"
    is_activation = False

    def __init__(self, pool: str):
        self.pool = pool

    def params(self):
        return []

    def buffers(self):
        return []

    def spec(self):
        return {"kind": self.kind, "pool": self.pool}

    def forward(self, x, mode, ctx):
        return global_pool(x, self.pool)


class DenseLayer:
    kind = "dense"
    is_activation = False

    def __init__(self, w: Tensor, b: Tensor):
        self.w = w
        self.b = b

    def params(self):
        return [("w", self.w), ("b", self.b)]

    def buffers(self):
        return []

    def spec(self):
        return {"kind": self.kind, "in": self.w.shape[0], "out": self.w.shape[1]}

    def forward(self, x, mode, ctx):
        return dense(x, self.w, self.b)


class DropoutLayer:
    kind = "dropout"
    is_activation = False

    def __init__(self, rate: float):
        self.rate = rate

    def params(self):
        return []

    def buffers(self):
        return []

    def spec(self):
        return {"kind": self.kind, "rate": self.rate}

    def forward(self, x, mode, ctx):
        out, ctx.rng = dropout(x, self.rate, mode, ctx.rng)
        return out


class SoftmaxLayer:
    kind = "softmax"
    is_activation = False

    def params(self):
        return []

    def buffers(self):
        return []

    def spec(self):
        return {"kind": self.kind}

    def forward(self, x, mode, ctx):
        return softmax(x)


class _ForwardCtx:
    __slots__ = ("rng", "frozen")

    def __init__(self, rng: RngState | None):
        self.rng = rng
        self.frozen = False


# ---------------------------------------------------------------------------
# the model


@dataclass
class Model:
    layers: list
    trainable: list[bool]
    input_side: int
    backbone_cfg: BackboneConfig | None = None
    head_cfg: HeadConfig | None = None
    class_names: list[str] | None = None
    head_start: int | None = None

    @property
    def num_classes(self) -> int | None:
        return self.head_cfg.num_classes if self.head_cfg else None

    def named_params(self, trainable_only: bool = False):
        out = []
        for i, layer in enumerate(self.layers):
            if trainable_only and not self.trainable[i]:
                continue
            for pname, p in layer.params():
                out.append((f"layer{i}.{layer.kind}.{pname}", p))
        return out


def _he_conv(rng: RngState, out_ch: int, in_ch: int, k: int) -> tuple[Tensor, Tensor, RngState]:
    fan_in = in_ch * k * k
    draws, rng = rng.normals(out_ch * in_ch * k * k)
    kernels = draws.reshape(out_ch, in_ch, k, k) * np.sqrt(2.0 / fan_in)
    return Tensor(kernels, requires_grad=True), Tensor(np.zeros(out_ch), requires_grad=True), rng


def _he_dense(rng: RngState, fan_in: int, units: int) -> tuple[Tensor, Tensor, RngState]:
    draws, rng = rng.normals(fan_in * units)
    w = draws.reshape(fan_in, units) * np.sqrt(2.0 / fan_in)
    return Tensor(w, requires_grad=True), Tensor(np.zeros(units), requires_grad=True), rng


def build_backbone(cfg: BackboneConfig, rng: RngState) -> Model:
    """He-initialized trunk; bit-identical weights for identical (cfg, rng)."""
    depth, stem, side = cfg.scaled()
    layers: list = []
    in_ch = 3
    for i in range(depth):
        stride = 2 if i % 2 == 0 else 1  # downsample at each stage start
        out_ch = stem * min(2 ** (i // 2), WIDTH_CAP_FACTOR)
        if cfg.skip_connections and stride == 1 and in_ch == out_ch:
            kernels, bias, rng = _he_conv(rng, out_ch, in_ch, 3)
            layers.append(ResConvBlock(kernels, bias, BatchNormState.create(out_ch)))
        else:
            kernels, bias, rng = _he_conv(rng, out_ch, in_ch, 3)
            layers.append(ConvLayer(kernels, bias, stride, "same"))
            layers.append(BatchNormLayer(BatchNormState.create(out_ch)))
            layers.append(ReLULayer())
        in_ch = out_ch
    return Model(layers=layers, trainable=[True] * len(layers), input_side=side,
                 backbone_cfg=cfg)


def _out_channels(layers: list) -> int:
    for layer in reversed(layers):
        if layer.kind in ("conv", "res_block"):
            return layer.spec()["out"] if layer.kind == "conv" else layer.spec()["channels"]
        if layer.kind == "batch_norm":
            return layer.spec()["channels"]
    raise ShapeError("no convolutional layers to infer channels from")


def truncate_and_attach_head(m: Model, head: HeadConfig, rng: RngState) -> Model:
    """Drop everything after the last activation, append a fresh head.

    Backbone weights are the same Tensor objects as before (bit-exact
    preservation); only the head is newly initialized. When the model already
    carries a head (e.g. re-heading after pretraining), the whole old head is
    stripped first so its internal ReLU cannot become the cut point.
    """
    base = m.layers[: m.head_start] if m.head_start is not None else m.layers
    base_flags = m.trainable[: m.head_start] if m.head_start is not None else m.trainable
    cut = None
    for i, layer in enumerate(base):
        if layer.is_activation:
            cut = i
    if cut is None:
        raise ShapeError("model has no activation layer to cut at")
    trunk = base[: cut + 1]
    flags = base_flags[: cut + 1]
    channels = _out_channels(trunk)

    w1, b1, rng = _he_dense(rng, channels, head.dense_units)
    w2, b2, rng = _he_dense(rng, head.dense_units, head.num_classes)
    head_layers = [
        GlobalPoolLayer(head.pooling),
        BatchNormLayer(BatchNormState.create(channels)),
        DenseLayer(w1, b1),
        DropoutLayer(head.dropout_rate),
        ReLULayer(),
        DenseLayer(w2, b2),
        SoftmaxLayer(),
    ]
    return Model(
        layers=trunk + head_layers,
        trainable=flags + [True] * len(head_layers),
        input_side=m.input_side,
        backbone_cfg=m.backbone_cfg,
        head_cfg=head,
        class_names=m.class_names,
        head_start=len(trunk),
    )


def set_trainable(m: Model, policy) -> Model:
    """Apply a trainability policy: 'all', 'head_only', or an int n meaning
    freeze_first_n(n). Frozen batch-norm layers run on running statistics
    during training.
    """
    n_layers = len(m.layers)
    if policy == "all":
        m.trainable = [True] * n_layers
    elif policy == "head_only":
        if m.head_start is None:
            raise ShapeError("model has no head to isolate")
        m.trainable = [i >= m.head_start for i in range(n_layers)]
    elif isinstance(policy, int) and not isinstance(policy, bool):
        if not 0 <= policy <= n_layers:
            raise ShapeError(f"freeze_first_n({policy}) out of range for {n_layers} layers")
        m.trainable = [i >= policy for i in range(n_layers)]
    else:
        raise ShapeError(f"unknown trainable policy {policy!r}")
    return m


def forward(m: Model, batch: Tensor, mode: str, rng: RngState | None = None) -> Tensor:
    """Run the model on [N,3,S,S]; returns class probabilities [N,K].

    Train mode engages dropout and batch statistics (rng required when any
    dropout layer has a positive rate); infer mode is deterministic.
    """
    if mode not in ("train", "infer"):
        raise ShapeError(f"unknown mode {mode!r}")
    values = batch.values if isinstance(batch, Tensor) else np.asarray(batch)
    if values.ndim != 4 or values.shape[2] != m.input_side or values.shape[3] != m.input_side:
        raise ShapeError(
            f"batch shape {values.shape} does not match input side {m.input_side}"
        )
    x = batch if isinstance(batch, Tensor) else Tensor(values)
    if mode == "train" and rng is None:
        rng = RngState.from_seed(0)
    ctx = _ForwardCtx(rng)
    for i, layer in enumerate(m.layers):
        ctx.frozen = not m.trainable[i]
        x = layer.forward(x, mode, ctx)
    return x


@dataclass
class PipelineConfig:
    """Knobs for the fixed preprocessing chain."""

    image_size: int = 256
    source_channel_order: str = "rgb"  # rgb | bgr

    def __post_init__(self):
        if self.source_channel_order not in ("rgb", "bgr"):
            raise ShapeError(f"unknown channel order {self.source_channel_order!r}")


def preprocess(img: ImageU8, pipe: PipelineConfig) -> ImageU8:
    """resize -> sharpen -> color conversion; returns an 8-bit image."""
    out = resize_bilinear(img, pipe.image_size, pipe.image_size)
    out = sharpen(out)
    if pipe.source_channel_order == "bgr" and out.channels == 3:
        if out.order != "BGR":
            out = ImageU8(out.height, out.width, out.channels, "BGR", out.pixels)
        out = bgr_to_rgb(out)
    return out


def predict(m: Model, images: list[ImageU8], pipe: PipelineConfig | None = None
            ) -> tuple[np.ndarray, np.ndarray, float]:
    """Full preprocessing chain plus infer-mode forward over a list of images.

    Returns (argmax labels with lowest-index tie break, probabilities,
    wall-clock seconds for the whole batch).
    """
    if pipe is None:
        pipe = PipelineConfig(image_size=m.input_side)
    if pipe.image_size != m.input_side:
        raise ShapeError(
            f"pipeline size {pipe.image_size} != model input side {m.input_side}"
        )
    start = time.perf_counter()
    tensors = [scale_to_unit(preprocess(img, pipe)).values for img in images]
    probs = forward(m, Tensor(np.stack(tensors)), "infer").values
    labels = np.argmax(probs, axis=1)  # argmax returns the lowest tied index
    elapsed = time.perf_counter() - start
    return labels, probs, elapsed


# Toy stand-ins named for the fine-tuned architectures they replace at desk
# scale; none of these loads published weights.
BACKBONE_PRESETS: dict[str, BackboneConfig] = {
    "xception": BackboneConfig(base_blocks=8, base_channels=8),
    "inception_resnet_v2": BackboneConfig(base_blocks=8, base_channels=12, skip_connections=True),
    "resnet50": BackboneConfig(base_blocks=6, base_channels=8, skip_connections=True),
    "resnet50v2": BackboneConfig(base_blocks=6, base_channels=8, skip_connections=True),
    "efficientnet_b0": BackboneConfig(base_blocks=4, base_channels=8),
    "efficientnet_b4": BackboneConfig(base_blocks=4, base_channels=8, phi=4.0),
}


def preset_backbone(name: str, input_side: int | None = None) -> BackboneConfig:
    key = name.lower()
    if key not in BACKBONE_PRESETS:
        raise ShapeError(f"unknown backbone preset {name!r}; options: {sorted(BACKBONE_PRESETS)}")
    cfg = BACKBONE_PRESETS[key]
    if input_side is not None:
        cfg = replace(cfg, input_side=input_side)
    return cfg
