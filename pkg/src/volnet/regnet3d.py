"""Residual bottleneck network for volumes: stem, staged body, linear head.

The stem is a stride-1 3x3x3 convolution.  Each stage stacks bottleneck
blocks of one output width; the first block of every stage halves all
three spatial extents (stride 2 on its 3x3x3 grouped convolution) and
carries a 1x1x1 stride-2 projection shortcut, the rest use identity
shortcuts.  A block is conv1x1 -> BN -> ReLU -> grouped conv3x3 -> BN ->
ReLU -> conv1x1 -> BN, then shortcut addition, then the final ReLU.
The head is global average pooling into a single linear layer of logits.

Parameter iteration order is fixed by construction order, so the same
seed always produces the same initialization and checkpoint layout.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import ConfigError, ShapeError
from .layers import BatchNorm3d, Conv3d, GlobalAvgPool3d, Linear, ReLU
from .tensor import Rng, Tensor, add


@dataclass
class RegNetConfig:
    """Architecture hyperparameters; one instance fully determines topology."""

    stage_depths: list[int]
    stage_widths: list[int]
    group_widths: list[int]
    bottleneck_ratio: float = 1.0
    stem_width: int = 32
    num_classes: int = 1
    input_channels: int = 1

    def validate(self) -> None:
        n = len(self.stage_depths)
        if n < 1:
            raise ConfigError("at least one stage is required")
        if len(self.stage_widths) != n or len(self.group_widths) != n:
            raise ConfigError(
                f"stage lists must have equal lengths, got depths {n}, "
                f"widths {len(self.stage_widths)}, groups {len(self.group_widths)}"
            )
        if any(int(d) < 1 for d in self.stage_depths):
            raise ConfigError(f"stage depths must be >= 1, got {self.stage_depths}")
        if any(int(w) < 1 for w in self.stage_widths):
            raise ConfigError(f"stage widths must be >= 1, got {self.stage_widths}")
        if any(int(g) < 1 for g in self.group_widths):
            raise ConfigError(f"group widths must be >= 1, got {self.group_widths}")
        if not self.bottleneck_ratio > 0:
            raise ConfigError(f"bottleneck_ratio must be > 0, got {self.bottleneck_ratio}")
        if int(self.stem_width) < 1:
            raise ConfigError(f"stem_width must be >= 1, got {self.stem_width}")
        if int(self.num_classes) < 1:
            raise ConfigError(f"num_classes must be >= 1, got {self.num_classes}")
        if int(self.input_channels) < 1:
            raise ConfigError(f"input_channels must be >= 1, got {self.input_channels}")
        for w, g in zip(self.stage_widths, self.group_widths):
            inner = bottleneck_width(int(w), self.bottleneck_ratio)
            if inner < 1:
                raise ConfigError(f"bottleneck width of stage width {w} collapses to {inner}")
            if inner % int(g) != 0:
                raise ConfigError(
                    f"bottleneck width {inner} (stage width {w}) is not divisible "
                    f"by group width {g}"
                )

    def to_dict(self) -> dict:
        return {
            "stage_depths": [int(d) for d in self.stage_depths],
            "stage_widths": [int(w) for w in self.stage_widths],
            "group_widths": [int(g) for g in self.group_widths],
            "bottleneck_ratio": float(self.bottleneck_ratio),
            "stem_width": int(self.stem_width),
            "num_classes": int(self.num_classes),
            "input_channels": int(self.input_channels),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RegNetConfig":
        known = {
            "stage_depths",
            "stage_widths",
            "group_widths",
            "bottleneck_ratio",
            "stem_width",
            "num_classes",
            "input_channels",
        }
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown architecture fields: {', '.join(sorted(unknown))}")
        for required in ("stage_depths", "stage_widths", "group_widths"):
            if required not in d:
                raise ConfigError(f"architecture config is missing {required!r}")
        cfg = cls(
            stage_depths=[int(x) for x in d["stage_depths"]],
            stage_widths=[int(x) for x in d["stage_widths"]],
            group_widths=[int(x) for x in d["group_widths"]],
            bottleneck_ratio=float(d.get("bottleneck_ratio", 1.0)),
            stem_width=int(d.get("stem_width", 32)),
            num_classes=int(d.get("num_classes", 1)),
            input_channels=int(d.get("input_channels", 1)),
        )
        cfg.validate()
        return cfg


def bottleneck_width(width: int, ratio: float) -> int:
    return int(round(width * ratio))


class BottleneckBlock:
    """1x1x1 -> grouped 3x3x3 -> 1x1x1 with a residual shortcut."""

    def __init__(
        self,
        in_width: int,
        out_width: int,
        group_width: int,
        ratio: float,
        stride: int,
        rng: Rng,
    ):
        inner = bottleneck_width(out_width, ratio)
        self.groups = inner // group_width
        self.stride = stride
        self.conv1 = Conv3d(in_width, inner, 1, rng=rng)
        self.bn1 = BatchNorm3d(inner)
        self.relu1 = ReLU()
        self.conv2 = Conv3d(
            inner, inner, 3, stride=stride, padding=1, groups=self.groups, rng=rng
        )
        self.bn2 = BatchNorm3d(inner)
        self.relu2 = ReLU()
        self.conv3 = Conv3d(inner, out_width, 1, rng=rng)
        self.bn3 = BatchNorm3d(out_width)
        self.relu_out = ReLU()
        if stride != 1 or in_width != out_width:
            self.proj = Conv3d(in_width, out_width, 1, stride=stride, rng=rng)
            self.proj_bn = BatchNorm3d(out_width)
        else:
            self.proj = None
            self.proj_bn = None

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        h = self.relu1.forward(self.bn1.forward(self.conv1.forward(x, train), train), train)
        h = self.relu2.forward(self.bn2.forward(self.conv2.forward(h, train), train), train)
        h = self.bn3.forward(self.conv3.forward(h, train), train)
        if self.proj is not None:
            shortcut = self.proj_bn.forward(self.proj.forward(x, train), train)
        else:
            shortcut = x
        return self.relu_out.forward(add(h, shortcut), train)

    def backward(self, grad_out: Tensor) -> Tensor:
        g = self.relu_out.backward(grad_out)
        gm = self.conv3.backward(self.bn3.backward(g))
        gm = self.conv2.backward(self.bn2.backward(self.relu2.backward(gm)))
        gm = self.conv1.backward(self.bn1.backward(self.relu1.backward(gm)))
        if self.proj is not None:
            gs = self.proj.backward(self.proj_bn.backward(g))
        else:
            gs = g
        return add(gm, gs)

    def named_parameters(self):
        yield from (("conv1." + n, t) for n, t in self.conv1.named_parameters())
        yield from (("bn1." + n, t) for n, t in self.bn1.named_parameters())
        yield from (("conv2." + n, t) for n, t in self.conv2.named_parameters())
        yield from (("bn2." + n, t) for n, t in self.bn2.named_parameters())
        yield from (("conv3." + n, t) for n, t in self.conv3.named_parameters())
        yield from (("bn3." + n, t) for n, t in self.bn3.named_parameters())
        if self.proj is not None:
            yield from (("proj." + n, t) for n, t in self.proj.named_parameters())
            yield from (("proj_bn." + n, t) for n, t in self.proj_bn.named_parameters())

    def named_buffers(self):
        yield from (("bn1." + n, t) for n, t in self.bn1.named_buffers())
        yield from (("bn2." + n, t) for n, t in self.bn2.named_buffers())
        yield from (("bn3." + n, t) for n, t in self.bn3.named_buffers())
        if self.proj_bn is not None:
            yield from (("proj_bn." + n, t) for n, t in self.proj_bn.named_buffers())


class RegNet3d:
    """The assembled network; construct through build_model."""

    def __init__(self, config: RegNetConfig, rng: Rng):
        config.validate()
        self.config = config
        w0 = int(config.stem_width)
        self.stem_conv = Conv3d(int(config.input_channels), w0, 3, stride=1, padding=1, rng=rng)
        self.stem_bn = BatchNorm3d(w0)
        self.stem_relu = ReLU()
        self.stages: list[list[BottleneckBlock]] = []
        in_width = w0
        for depth, width, group in zip(
            config.stage_depths, config.stage_widths, config.group_widths
        ):
            blocks = []
            for b in range(int(depth)):
                blocks.append(
                    BottleneckBlock(
                        in_width,
                        int(width),
                        int(group),
                        config.bottleneck_ratio,
                        stride=2 if b == 0 else 1,
                        rng=rng,
                    )
                )
                in_width = int(width)
            self.stages.append(blocks)
        self.pool = GlobalAvgPool3d()
        self.fc = Linear(in_width, int(config.num_classes), rng=rng)

    def named_parameters(self):
        yield from (("stem.conv." + n, t) for n, t in self.stem_conv.named_parameters())
        yield from (("stem.bn." + n, t) for n, t in self.stem_bn.named_parameters())
        for si, blocks in enumerate(self.stages, start=1):
            for bi, block in enumerate(blocks, start=1):
                prefix = f"stage{si}.block{bi}."
                yield from ((prefix + n, t) for n, t in block.named_parameters())
        yield from (("head.fc." + n, t) for n, t in self.fc.named_parameters())

    def named_buffers(self):
        yield from (("stem.bn." + n, t) for n, t in self.stem_bn.named_buffers())
        for si, blocks in enumerate(self.stages, start=1):
            for bi, block in enumerate(blocks, start=1):
                prefix = f"stage{si}.block{bi}."
                yield from ((prefix + n, t) for n, t in block.named_buffers())

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def param_count(self) -> int:
        return sum(t.size for t in self.parameters())

    def zero_grads(self) -> None:
        for t in self.parameters():
            t.zero_grad()

    def forward(self, x: Tensor, mode: str = "eval") -> Tensor:
        if mode not in ("train", "eval"):
            raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
        if len(x.shape) != 5:
            raise ShapeError(f"input must be (N,C,D,H,W), got {x.shape}")
        if x.shape[1] != int(self.config.input_channels):
            raise ShapeError(
                f"input has {x.shape[1]} channels, model expects {self.config.input_channels}"
            )
        train = mode == "train"
        h = self.stem_conv.forward(x, train)
        h = self.stem_relu.forward(self.stem_bn.forward(h, train), train)
        for si, blocks in enumerate(self.stages, start=1):
            spatial = h.shape[2:]
            if min(spatial) < 2:
                raise ShapeError(
                    f"stage {si}: input extents {spatial} are too small for a "
                    "stride-2 reduction"
                )
            for block in blocks:
                h = block.forward(h, train)
        return self.fc.forward(self.pool.forward(h, train), train)

    def backward(self, grad_logits: Tensor) -> Tensor:
        """Accumulates parameter gradients; returns the input gradient."""
        g = self.pool.backward(self.fc.backward(grad_logits))
        for blocks in reversed(self.stages):
            for block in reversed(blocks):
                g = block.backward(g)
        g = self.stem_bn.backward(self.stem_relu.backward(g))
        return self.stem_conv.backward(g)


def build_model(config: RegNetConfig, rng: Rng) -> RegNet3d:
    return RegNet3d(config, rng)


def output_extent(extent: int) -> int:
    """Spatial extent after one stride-2, kernel-3, pad-1 stage."""
    return (extent - 1) // 2 + 1
