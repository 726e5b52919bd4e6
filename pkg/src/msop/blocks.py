"""Multi-scale and second-order-pooling layer math, and the classifier built from them.

A layer is a multi-scale block (channel slices refined by a hierarchy of 3x3
convolutions) followed by a second-order pooling block (covariance-derived
attention over channels, rows, and columns), then ReLU, optionally with a
stride-2 spatial reduction.  The classifier stacks these layers in stages,
widening the channel count at each stage boundary, and finishes with global
average pooling and a fully connected head over the three classes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .labels import LABELS
from .tensor import ShapeError, Tensor


class ConfigError(ValueError):
    """A model or run configuration violates its constraints."""


# ---------------------------------------------------------------------------
# Multi-scale block
# ---------------------------------------------------------------------------

@dataclass
class MSBlockParams:
    """Three 3x3 kernel sets, each mapping D/4 -> D/4 channels.

    Slice 1 passes through untouched; slice i (i >= 2) is convolved after
    adding the previous slice's output, so every kernel set sees a growing
    receptive field.
    """

    c1: Tensor
    c2: Tensor
    c3: Tensor
    b1: Tensor | None = None
    b2: Tensor | None = None
    b3: Tensor | None = None

    @classmethod
    def create(cls, channels: int, rng: np.random.Generator,
               bias: bool = True) -> "MSBlockParams":
        if channels % 4 != 0:
            raise ConfigError(f"channel count {channels} must be divisible by 4")
        d4 = channels // 4
        fan_in = 3 * 3 * d4
        kernels = [Tensor(T.init_uniform(rng, (3, 3, d4, d4), fan_in), requires_grad=True)
                   for _ in range(3)]
        biases = [Tensor(np.zeros(d4), requires_grad=True) if bias else None
                  for _ in range(3)]
        return cls(kernels[0], kernels[1], kernels[2], *biases)

    def tensors(self) -> list[tuple[str, Tensor]]:
        out = [("c1", self.c1), ("c2", self.c2), ("c3", self.c3)]
        for name, b in (("b1", self.b1), ("b2", self.b2), ("b3", self.b3)):
            if b is not None:
                out.append((name, b))
        return out


def ms_block_forward(x: Tensor, p: MSBlockParams) -> Tensor:
    """Split depth-wise into 4 slices and refine slices 2..4 hierarchically.

    y1 = x1, y2 = c1*x2, y3 = c2*(x3 + y2), y4 = c3*(x4 + y3); the output is
    the channel concatenation of y1..y4 and keeps the input shape.
    """
    if x.ndim != 3:
        raise ShapeError("expected an H x W x D feature map")
    if x.shape[2] % 4 != 0:
        raise ShapeError(f"channel count {x.shape[2]} not divisible by 4")
    x1, x2, x3, x4 = T.split_channels(x, 4)
    y1 = x1
    y2 = T.conv2d(x2, p.c1, padding="same", bias=p.b1)
    y3 = T.conv2d(T.add(x3, y2), p.c2, padding="same", bias=p.b2)
    y4 = T.conv2d(T.add(x4, y3), p.c3, padding="same", bias=p.b3)
    return T.concat_channels([y1, y2, y3, y4])


# ---------------------------------------------------------------------------
# Second-order pooling block
# ---------------------------------------------------------------------------

def channel_covariance(x: Tensor, normalize: bool = False) -> Tensor:
    """Covariance of the channels of an H x W x C map over its N = H*W pixels.

    The map is viewed as a C x N matrix, mean-centered per channel, and the
    C x C outer product is returned.  No 1/N factor is applied unless
    ``normalize`` is set; the raw centered product is symmetric and PSD.
    """
    if x.ndim != 3:
        raise ShapeError("expected an H x W x C feature map")
    h, w, c = x.shape
    n = h * w
    m = T.reshape(x, (n, c))
    centered = T.sub(m, T.tmean(m, axis=0, keepdims=True))
    cov = T.matmul(T.permute(centered, (1, 0)), centered)
    if normalize:
        cov = T.scale(cov, 1.0 / n)
    return cov


@dataclass
class SoPPassParams:
    """Parameters for one attention pass (channel, row, or column view)."""

    reduce_w: Tensor      # 1x1 conv, C -> C'
    row_w: Tensor         # 1xC' conv over the C'xC' covariance, 4C' kernels
    expand_w: Tensor      # 1x1 conv, 4C' -> C
    reduce_b: Tensor | None = None
    row_b: Tensor | None = None
    expand_b: Tensor | None = None

    @classmethod
    def create(cls, channels: int, rng: np.random.Generator,
               bias: bool = True) -> "SoPPassParams":
        reduced = max(1, channels // 4)
        if channels > 1 and reduced >= channels:
            raise ConfigError(f"reduction target {reduced} not below {channels}")

        def param(shape, fan_in):
            return Tensor(T.init_uniform(rng, shape, fan_in), requires_grad=True)

        def bvec(n):
            return Tensor(np.zeros(n), requires_grad=True) if bias else None

        return cls(
            reduce_w=param((1, 1, channels, reduced), channels),
            row_w=param((1, reduced, reduced, 4 * reduced), reduced * reduced),
            expand_w=param((1, 1, 4 * reduced, channels), 4 * reduced),
            reduce_b=bvec(reduced),
            row_b=bvec(4 * reduced),
            expand_b=bvec(channels),
        )

    @property
    def reduced(self) -> int:
        return self.reduce_w.shape[3]

    def tensors(self) -> list[tuple[str, Tensor]]:
        out = [("reduce_w", self.reduce_w), ("row_w", self.row_w),
               ("expand_w", self.expand_w)]
        for name, b in (("reduce_b", self.reduce_b), ("row_b", self.row_b),
                        ("expand_b", self.expand_b)):
            if b is not None:
                out.append((name, b))
        return out


@dataclass
class SoPBlockParams:
    """Independent attention passes over channels, rows, and columns.

    Built for a specific H x W x D shape: the row/column passes treat H and W
    as the channel axis of a permuted view, so their reductions are sized to
    those extents.
    """

    height: int
    width: int
    channels: int
    d_pass: SoPPassParams
    h_pass: SoPPassParams
    w_pass: SoPPassParams
    normalize_cov: bool = False

    @classmethod
    def create(cls, height: int, width: int, channels: int,
               rng: np.random.Generator, bias: bool = True,
               normalize_cov: bool = False) -> "SoPBlockParams":
        return cls(
            height=height, width=width, channels=channels,
            d_pass=SoPPassParams.create(channels, rng, bias),
            h_pass=SoPPassParams.create(height, rng, bias),
            w_pass=SoPPassParams.create(width, rng, bias),
            normalize_cov=normalize_cov,
        )

    def check_input(self, x: Tensor) -> None:
        if x.shape != (self.height, self.width, self.channels):
            raise ConfigError(
                f"block built for {(self.height, self.width, self.channels)}, "
                f"got input {x.shape}")

    def tensors(self) -> list[tuple[str, Tensor]]:
        out = []
        for prefix, p in (("d", self.d_pass), ("h", self.h_pass), ("w", self.w_pass)):
            out.extend((f"{prefix}.{name}", t) for name, t in p.tensors())
        return out


def _pass_weights(view: Tensor, p: SoPPassParams, normalize_cov: bool) -> Tensor:
    """Raw (pre-gate) attention weights for one pass, shape (1, 1, C).

    Pipeline: 1x1 reduce to C' channels, channel covariance (C' x C'),
    reshape to a 1 x C' x C' map, conv with 4C' kernels of size 1 x C',
    then 1x1 expand back to C.
    """
    c = view.shape[2]
    if p.reduce_w.shape[2] != c:
        raise ConfigError(f"pass built for {p.reduce_w.shape[2]} channels, got {c}")
    reduced = T.conv2d(view, p.reduce_w, padding="same", bias=p.reduce_b)
    cov = channel_covariance(reduced, normalize=normalize_cov)
    cov_map = T.reshape(cov, (1, p.reduced, p.reduced))
    row = T.conv2d(cov_map, p.row_w, padding="valid", bias=p.row_b)  # 1 x 1 x 4C'
    return T.conv2d(row, p.expand_w, padding="same", bias=p.expand_b)  # 1 x 1 x C


def sop_attention_weights(x: Tensor, p: SoPBlockParams) -> tuple[Tensor, Tensor, Tensor]:
    """Sigmoid-gated attention vectors (w_d, w_h, w_w) of lengths D, H, W.

    The row and column passes run the channel machinery on the permuted
    views x[k,j,i] (D x W x H) and x[i,k,j] (H x D x W).
    """
    p.check_input(x)
    w_d = T.sigmoid(_pass_weights(x, p.d_pass, p.normalize_cov))
    w_h = T.sigmoid(_pass_weights(T.permute(x, (2, 1, 0)), p.h_pass, p.normalize_cov))
    w_w = T.sigmoid(_pass_weights(T.permute(x, (0, 2, 1)), p.w_pass, p.normalize_cov))
    d, h, w = x.shape[2], x.shape[0], x.shape[1]
    return (T.reshape(w_d, (d,)), T.reshape(w_h, (h,)), T.reshape(w_w, (w,)))


def sop_block_forward(x: Tensor, p: SoPBlockParams,
                      unit_weights: bool = False) -> Tensor:
    """Apply the three attention passes and sum the re-aligned results.

    z = w_d (.) x + transpose(w_h (.) x_h) + transpose(w_w (.) x_w), which
    reduces to gating x[i,j,k] by w_d[k] + w_h[i] + w_w[j].  ``unit_weights``
    is a test hook that bypasses the gate with all-ones weights, making the
    output exactly 3x.
    """
    p.check_input(x)
    if unit_weights:
        h, w, d = x.shape
        w_d = Tensor(np.ones(d))
        w_h = Tensor(np.ones(h))
        w_w = Tensor(np.ones(w))
    else:
        w_d, w_h, w_w = sop_attention_weights(x, p)

    z_d = T.mul(x, T.reshape(w_d, (1, 1, x.shape[2])))
    x_h = T.permute(x, (2, 1, 0))
    z_h = T.mul(x_h, T.reshape(w_h, (1, 1, x.shape[0])))
    x_w = T.permute(x, (0, 2, 1))
    z_w = T.mul(x_w, T.reshape(w_w, (1, 1, x.shape[1])))
    return T.add(T.add(z_d, T.permute(z_h, (2, 1, 0))), T.permute(z_w, (0, 2, 1)))


# ---------------------------------------------------------------------------
# Full layer and classifier
# ---------------------------------------------------------------------------

@dataclass
class MsopLayerParams:
    ms: MSBlockParams
    sop: SoPBlockParams
    downsample: bool = False

    @classmethod
    def create(cls, height: int, width: int, channels: int,
               rng: np.random.Generator, downsample: bool = False,
               bias: bool = True, normalize_cov: bool = False) -> "MsopLayerParams":
        return cls(
            ms=MSBlockParams.create(channels, rng, bias),
            sop=SoPBlockParams.create(height, width, channels, rng, bias, normalize_cov),
            downsample=downsample,
        )

    def tensors(self) -> list[tuple[str, Tensor]]:
        out = [(f"ms.{n}", t) for n, t in self.ms.tensors()]
        out += [(f"sop.{n}", t) for n, t in self.sop.tensors()]
        return out


def msop_layer_forward(x: Tensor, ms: MSBlockParams, sop: SoPBlockParams,
                       downsample: bool = False) -> Tensor:
    """Multi-scale block, second-order pooling block, ReLU, optional 2x pool."""
    y = T.relu(sop_block_forward(ms_block_forward(x, ms), sop))
    if downsample:
        y = T.avg_pool2(y)
    return y


@dataclass
class ClassifierConfig:
    """Architecture of the stacked-layer classifier.

    The reference configuration is 16 layers (4 stages of 4) at widths
    16/32/64/128 on 224 x 224 x 3 inputs; every width must be divisible by 4
    for the multi-scale split.  Smaller configurations are used for tests and
    desk-scale experiments.
    """

    input_height: int = 224
    input_width: int = 224
    input_channels: int = 3
    stage_widths: tuple[int, ...] = (16, 32, 64, 128)
    layers_per_stage: int = 4
    num_classes: int = 3
    conv_bias: bool = True
    normalize_cov: bool = False

    def __post_init__(self):
        self.stage_widths = tuple(int(w) for w in self.stage_widths)
        if not self.stage_widths:
            raise ConfigError("need at least one stage")
        for w in self.stage_widths:
            if w % 4 != 0:
                raise ConfigError(f"stage width {w} must be divisible by 4")
        if self.layers_per_stage < 1:
            raise ConfigError("layers_per_stage must be >= 1")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if min(self.input_height, self.input_width) < 4:
            raise ConfigError("input spatial dims must be >= 4")

    @property
    def num_layers(self) -> int:
        return len(self.stage_widths) * self.layers_per_stage

    def to_dict(self) -> dict:
        return {
            "input_height": self.input_height,
            "input_width": self.input_width,
            "input_channels": self.input_channels,
            "stage_widths": list(self.stage_widths),
            "layers_per_stage": self.layers_per_stage,
            "num_classes": self.num_classes,
            "conv_bias": self.conv_bias,
            "normalize_cov": self.normalize_cov,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ClassifierConfig":
        return cls(**{**d, "stage_widths": tuple(d["stage_widths"])})


@dataclass
class _Stage:
    transition_w: Tensor | None
    transition_b: Tensor | None
    layers: list[MsopLayerParams] = field(default_factory=list)


class MsopClassifier:
    """Stem conv, staged layers with per-stage widths, pooled linear head.

    The last layer of every stage downsamples by 2; a 1x1 transition conv
    raises the width at each stage boundary.  Parameter initialization is
    fully determined by ``seed``.
    """

    def __init__(self, config: ClassifierConfig, seed: int = 0):
        self.config = config
        self.seed = int(seed)
        rng = np.random.default_rng(self.seed)
        cfg = config

        def param(shape, fan_in):
            return Tensor(T.init_uniform(rng, shape, fan_in), requires_grad=True)

        def bvec(n):
            return Tensor(np.zeros(n), requires_grad=True) if cfg.conv_bias else None

        w0 = cfg.stage_widths[0]
        self.stem_w = param((3, 3, cfg.input_channels, w0), 9 * cfg.input_channels)
        self.stem_b = bvec(w0)

        h, w = cfg.input_height, cfg.input_width
        self.stages: list[_Stage] = []
        prev_width = w0
        for width in cfg.stage_widths:
            if width != prev_width:
                stage = _Stage(param((1, 1, prev_width, width), prev_width), bvec(width))
            else:
                stage = _Stage(None, None)
            for li in range(cfg.layers_per_stage):
                last = li == cfg.layers_per_stage - 1
                stage.layers.append(MsopLayerParams.create(
                    h, w, width, rng, downsample=last,
                    bias=cfg.conv_bias, normalize_cov=cfg.normalize_cov))
            h, w = -(-h // 2), -(-w // 2)
            prev_width = width
            self.stages.append(stage)

        self.fc_w = param((prev_width, cfg.num_classes), prev_width)
        self.fc_b = Tensor(np.zeros(cfg.num_classes), requires_grad=True)

    def parameters(self) -> list[tuple[str, Tensor]]:
        """All trainable tensors in a fixed, checkpoint-stable order."""
        out = [("stem.w", self.stem_w)]
        if self.stem_b is not None:
            out.append(("stem.b", self.stem_b))
        for si, stage in enumerate(self.stages):
            if stage.transition_w is not None:
                out.append((f"stage{si}.transition.w", stage.transition_w))
                if stage.transition_b is not None:
                    out.append((f"stage{si}.transition.b", stage.transition_b))
            for li, layer in enumerate(stage.layers):
                out.extend((f"stage{si}.layer{li}.{n}", t) for n, t in layer.tensors())
        out.append(("fc.w", self.fc_w))
        out.append(("fc.b", self.fc_b))
        return out

    def param_tensors(self) -> list[Tensor]:
        return [t for _, t in self.parameters()]

    def forward_logits(self, x: Tensor) -> Tensor:
        """Logits for one [0, 1]-valued input; shifted to [-1, 1] at the stem."""
        cfg = self.config
        if x.shape != (cfg.input_height, cfg.input_width, cfg.input_channels):
            raise ShapeError(
                f"expected {(cfg.input_height, cfg.input_width, cfg.input_channels)} "
                f"input, got {x.shape}")
        x = T.add(T.scale(x, 2.0), Tensor(np.full(x.shape, -1.0)))
        y = T.relu(T.conv2d(x, self.stem_w, padding="same", bias=self.stem_b))
        for stage in self.stages:
            if stage.transition_w is not None:
                y = T.relu(T.conv2d(y, stage.transition_w, padding="same",
                                    bias=stage.transition_b))
            for layer in stage.layers:
                y = msop_layer_forward(y, layer.ms, layer.sop, layer.downsample)
        pooled = T.tmean(y, axis=(0, 1))                     # (D,)
        logits = T.add(T.matmul(T.reshape(pooled, (1, y.shape[2])), self.fc_w),
                       T.reshape(self.fc_b, (1, cfg.num_classes)))
        return T.reshape(logits, (cfg.num_classes,))

    def predict_probs(self, image: np.ndarray) -> np.ndarray:
        """Class probabilities for a network-input-sized image array."""
        return classifier_forward(image, self)

    def predict_label(self, image: np.ndarray) -> str:
        return LABELS[int(np.argmax(self.predict_probs(image)))]


def prepare_input(image: np.ndarray, channels: int = 3) -> np.ndarray:
    """Scale to [0, 1] floats and replicate grayscale planes to `channels`."""
    arr = np.asarray(image)
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float64) / 255.0
    else:
        arr = arr.astype(np.float64)
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], channels, axis=2)
    if arr.ndim != 3:
        raise ShapeError("expected a 2-D grayscale or H x W x C image")
    return arr


def classifier_forward(image: np.ndarray, model: MsopClassifier) -> np.ndarray:
    """Probabilities over (normal, benign, malignant) for one input image.

    The image must already be resized to the configured input dims; grayscale
    input is replicated across the channel axis, uint8 is scaled to [0, 1].
    """
    arr = prepare_input(image, model.config.input_channels)
    if arr.shape[2] != model.config.input_channels:
        raise ShapeError(f"expected {model.config.input_channels} channels, "
                         f"got {arr.shape[2]}")
    logits = model.forward_logits(Tensor(arr))
    return T.softmax(logits.data)
