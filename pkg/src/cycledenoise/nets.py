"""Generator and discriminator networks for the two-domain denoising setup.

The generator is a residual multi-module CNN whose output is the input
plus a learned correction, so an all-zero network is exactly the
identity. The discriminator is a five-stage patch classifier emitting a
grid of raw scores; a 56x56 input yields a 5x5 score map and one output
unit sees a 70x70 input region.
"""

from __future__ import annotations

import enum

import numpy as np

from .tensor import (
    ContractError,
    DimensionError,
    Tensor,
    add,
    add_scalar,
    batch_norm,
    concat,
    conv2d,
    conv_output_extent,
    leaky_relu,
    mean_all,
    mul_scalar,
    relu,
    square,
)

LEAKY_SLOPE = 0.2
BN_MOMENTUM = 0.9
BN_EPSILON = 1e-5
SCORE_TILE = 56


class DomainLabel(enum.Enum):
    """The two unpaired image populations the networks translate between."""

    A_LOW_DOSE = "A"
    B_ROUTINE_DOSE = "B"


class Conv2d:
    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int = 1,
                 padding: int = 1, bias: bool = True):
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.kernel = kernel
        self.stride = stride
        self.padding = padding
        self.weight = Tensor(np.zeros((out_ch, in_ch, kernel, kernel)), requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)

    def named_parameters(self):
        yield "weight", self.weight
        if self.bias is not None:
            yield "bias", self.bias


class BatchNorm2d:
    def __init__(self, channels: int, momentum: float = BN_MOMENTUM, epsilon: float = BN_EPSILON):
        self.channels = channels
        self.momentum = momentum
        self.epsilon = epsilon
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = Tensor(np.zeros(channels))
        self.running_var = Tensor(np.ones(channels))

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        return batch_norm(x, self.gamma, self.beta, self.running_mean,
                          self.running_var, train, self.momentum, self.epsilon)

    def named_parameters(self):
        yield "gamma", self.gamma
        yield "beta", self.beta

    def named_buffers(self):
        yield "running_mean", self.running_mean
        yield "running_var", self.running_var


class _Network:
    """Shared parameter bookkeeping: stable names in declaration order."""

    def _layers(self):
        raise NotImplementedError

    def named_parameters(self):
        for prefix, layer in self._layers():
            for name, p in layer.named_parameters():
                yield f"{prefix}.{name}", p

    def named_buffers(self):
        for prefix, layer in self._layers():
            if hasattr(layer, "named_buffers"):
                for name, b in layer.named_buffers():
                    yield f"{prefix}.{name}", b

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def clear_grads(self) -> None:
        for p in self.parameters():
            p.grad = None


class Generator(_Network):
    """Residual denoising generator.

    One head convolution lifts the image to ``width`` channels; ``modules``
    repeated blocks of three conv+norm+relu layers each carry a block-level
    bypass; the inputs of every block plus the last block's output are
    concatenated ((modules+1)*width channels) and fused back to ``width``;
    a tail convolution maps to the image channels and is added onto the
    network input. Output channels therefore always equal input channels.

    ``penultimate_channels > 0`` inserts an extra narrow convolution before
    the tail (an alternative reading of the original tail stage; off by
    default).
    """

    def __init__(self, in_ch: int = 1, width: int = 128, modules: int = 6,
                 penultimate_channels: int = 0):
        if in_ch < 1 or width < 1 or modules < 1:
            raise ContractError("Generator: in_ch, width and modules must be >= 1")
        self.in_ch = in_ch
        self.width = width
        self.modules = modules
        self.penultimate_channels = penultimate_channels
        self.head = Conv2d(in_ch, width, 3, padding=1)
        self.blocks = []
        for _ in range(modules):
            block = [(Conv2d(width, width, 3, padding=1), BatchNorm2d(width))
                     for _ in range(3)]
            self.blocks.append(block)
        self.fuse = Conv2d((modules + 1) * width, width, 3, padding=1)
        if penultimate_channels > 0:
            self.penultimate = Conv2d(width, penultimate_channels, 3, padding=1)
            self.tail = Conv2d(penultimate_channels, in_ch, 3, padding=1)
        else:
            self.penultimate = None
            self.tail = Conv2d(width, in_ch, 3, padding=1)

    def _layers(self):
        yield "head", self.head
        for i, block in enumerate(self.blocks):
            for j, (conv, bn) in enumerate(block):
                yield f"block{i}.conv{j}", conv
                yield f"block{i}.bn{j}", bn
        yield "fuse", self.fuse
        if self.penultimate is not None:
            yield "penultimate", self.penultimate
        yield "tail", self.tail

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        if x.data.ndim != 4 or x.data.shape[1] != self.in_ch:
            raise DimensionError(
                f"generator built for {self.in_ch} channel input, got shape {x.data.shape}"
            )
        if x.data.shape[2] < 3 or x.data.shape[3] < 3:
            raise DimensionError(f"generator input must be at least 3x3, got {x.data.shape}")
        cur = self.head(x)
        feats = []
        for block in self.blocks:
            feats.append(cur)
            y = cur
            for conv, bn in block:
                y = relu(bn(conv(y), train))
            cur = relu(add(y, cur))
        feats.append(cur)
        fused = self.fuse(concat(feats, axis=1))
        if self.penultimate is not None:
            fused = self.penultimate(fused)
        residual = self.tail(fused)
        return add(residual, x)


# Discriminator stage plan: (width multiplier, stride, normalized).
# The unique standard 4x4/pad-1 configuration that gives both the 70x70
# receptive field and a 5x5 map from a 56x56 input.
_DISC_STAGES = ((1, 2, False), (2, 2, True), (4, 2, True), (8, 1, True))
_DISC_KERNEL = 4
_DISC_MIN_EXTENT = 16


class Discriminator(_Network):
    """Patch classifier scoring local regions as real or synthesized."""

    def __init__(self, in_ch: int = 1, base_width: int = 64):
        if in_ch < 1 or base_width < 1:
            raise ContractError("Discriminator: in_ch and base_width must be >= 1")
        self.in_ch = in_ch
        self.base_width = base_width
        self.stages = []
        prev = in_ch
        for mult, stride, normed in _DISC_STAGES:
            ch = base_width * mult
            conv = Conv2d(prev, ch, _DISC_KERNEL, stride=stride, padding=1)
            bn = BatchNorm2d(ch) if normed else None
            self.stages.append((conv, bn))
            prev = ch
        self.score = Conv2d(prev, 1, _DISC_KERNEL, stride=1, padding=1)

    def _layers(self):
        for i, (conv, bn) in enumerate(self.stages):
            yield f"stage{i}.conv", conv
            if bn is not None:
                yield f"stage{i}.bn", bn
        yield "score", self.score

    def stage_plan(self):
        """(kernel, stride) per convolution, score layer included."""
        plan = [(_DISC_KERNEL, s) for _, s, _ in _DISC_STAGES]
        plan.append((_DISC_KERNEL, 1))
        return plan

    def forward(self, patch: Tensor, train: bool = False) -> Tensor:
        d = patch.data
        if d.ndim != 4 or d.shape[1] != self.in_ch:
            raise DimensionError(
                f"discriminator built for {self.in_ch} channel input, got shape {d.shape}"
            )
        if d.shape[2] < _DISC_MIN_EXTENT or d.shape[3] < _DISC_MIN_EXTENT:
            raise DimensionError(
                f"discriminator input must be at least "
                f"{_DISC_MIN_EXTENT}x{_DISC_MIN_EXTENT}, got {d.shape}"
            )
        y = patch
        for conv, bn in self.stages:
            y = conv(y)
            if bn is not None:
                y = bn(y, train)
            y = leaky_relu(y, LEAKY_SLOPE)
        return self.score(y)

    def score_image(self, image: Tensor, target: float, tile: int = SCORE_TILE) -> Tensor:
        """Least-squares score of an arbitrary-size image against ``target``.

        The image is reflect-padded on the bottom/right to a multiple of
        ``tile``, cut into non-overlapping tiles, and the per-tile mean
        squared deviations of the score map are summed. Scoring treats the
        image as plain data (no gradient flows back into it).
        """
        d = np.asarray(image.data if isinstance(image, Tensor) else image)
        if d.ndim == 2:
            d = d[None, None]
        if d.ndim != 4:
            raise DimensionError(f"score_image: expected image, got shape {d.shape}")
        n, c, h, w = d.shape
        if h < tile or w < tile:
            raise DimensionError(f"score_image: image {h}x{w} smaller than tile {tile}")
        pad_h = (tile - h % tile) % tile
        pad_w = (tile - w % tile) % tile
        if pad_h or pad_w:
            d = np.pad(d, ((0, 0), (0, 0), (0, pad_h), (0, pad_w)), mode="reflect")
        th, tw = d.shape[2] // tile, d.shape[3] // tile
        patches = (
            d.reshape(n, c, th, tile, tw, tile)
            .transpose(0, 2, 4, 1, 3, 5)
            .reshape(n * th * tw, c, tile, tile)
        )
        scores = self.forward(Tensor(patches), train=False)
        # sum over tiles of the per-tile mean == overall mean times tile count
        return mul_scalar(mean_all(square(add_scalar(scores, -target))), float(n * th * tw))


def generator_forward(g: Generator, x: Tensor, train: bool = False) -> Tensor:
    return g.forward(x, train=train)


def discriminator_forward(d: Discriminator, patch: Tensor, train: bool = False) -> Tensor:
    return d.forward(patch, train=train)


def discriminator_score_image(d: Discriminator, image: Tensor, target: float) -> Tensor:
    return d.score_image(image, target)


def receptive_field(d: Discriminator) -> int:
    """Input extent influencing one score unit: rf += (k-1) * prod(previous strides)."""
    rf = 1
    jump = 1
    for kernel, stride in d.stage_plan():
        rf += (kernel - 1) * jump
        jump *= stride
    return rf


def init_params(net: _Network, seed: int) -> None:
    """Gaussian init: conv weights N(0, 0.02^2), norm gains N(1, 0.02^2), offsets 0."""
    rng = np.random.default_rng(seed)
    for name, p in net.named_parameters():
        if name.endswith(".weight"):
            p.data[...] = rng.normal(0.0, 0.02, p.data.shape)
        elif name.endswith(".gamma"):
            p.data[...] = rng.normal(1.0, 0.02, p.data.shape)
        else:  # conv bias / norm beta
            p.data[...] = 0.0
        p.grad = None
    for name, b in net.named_buffers():
        b.data[...] = 1.0 if name.endswith("running_var") else 0.0


def zero_params(net: _Network) -> None:
    for name, p in net.named_parameters():
        if name.endswith(".gamma"):
            p.data[...] = 1.0
        else:
            p.data[...] = 0.0
        p.grad = None
