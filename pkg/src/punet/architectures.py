"""Residual blocks and full PURe / ResNet networks."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import functional as F
from .errors import InvalidConfig
from .nn import BatchNorm2d, Conv2d, Linear, MaxPool2d, Module, Sequential
from .product_unit import ProductUnitConv2d
from .tensor import relu

FAMILIES = ("PURe", "ResNet")
STEMS = ("imagenet", "cifar")


@dataclass(frozen=True)
class BlockSpec:
    kind: str  # "standard" | "product_unit"
    in_channels: int
    out_channels: int
    stride: int = 1
    downsample_kernel: int = 1

    @property
    def has_downsample_skip(self) -> bool:
        return self.stride != 1 or self.in_channels != self.out_channels


@dataclass
class ArchitectureSpec:
    family: str
    stem: str
    stage_blocks: list[int]
    stage_channels: list[int]
    num_classes: int = 10
    in_channels: int = 3
    # kernel of the projection on the skip path when shapes change
    downsample_kernel: int = 1
    name: str = ""

    def validate(self):
        if self.family not in FAMILIES:
            raise InvalidConfig(f"unknown family {self.family!r}")
        if self.stem not in STEMS:
            raise InvalidConfig(f"unknown stem {self.stem!r}")
        want = 4 if self.stem == "imagenet" else 3
        if len(self.stage_blocks) != want or len(self.stage_channels) != want:
            raise InvalidConfig(f"{self.stem} stem needs {want} stages, got {self.stage_blocks}")
        if any(b < 1 for b in self.stage_blocks) or any(c < 1 for c in self.stage_channels):
            raise InvalidConfig("stage block counts and widths must be positive")
        if self.num_classes < 1 or self.in_channels < 1:
            raise InvalidConfig("num_classes and in_channels must be positive")
        if self.downsample_kernel not in (1, 3):
            raise InvalidConfig("downsample_kernel must be 1 or 3")
        return self

    @property
    def block_kind(self) -> str:
        return "product_unit" if self.family == "PURe" else "standard"

    @property
    def num_blocks(self) -> int:
        return sum(self.stage_blocks)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureSpec":
        return cls(**d).validate()


IMAGENET_DEPTHS = {18: [2, 2, 2, 2], 34: [3, 4, 6, 3]}
CIFAR_DEPTHS = {20: 3, 32: 5, 44: 7, 56: 9, 110: 18, 272: 45}


def arch_spec(name: str, num_classes: int = 10, **overrides) -> ArchitectureSpec:
    """Resolve names such as ``pure18``, ``resnet34`` or ``pure272``."""
    key = name.lower()
    for prefix, family in (("pure", "PURe"), ("resnet", "ResNet")):
        if key.startswith(prefix) and key[len(prefix):].isdigit():
            depth = int(key[len(prefix):])
            break
    else:
        raise InvalidConfig(f"unknown architecture {name!r}")
    if depth in IMAGENET_DEPTHS:
        spec = ArchitectureSpec(family, "imagenet", list(IMAGENET_DEPTHS[depth]), [64, 128, 256, 512], num_classes)
    elif depth in CIFAR_DEPTHS:
        n = CIFAR_DEPTHS[depth]
        spec = ArchitectureSpec(family, "cifar", [n, n, n], [16, 32, 64], num_classes)
    else:
        raise InvalidConfig(f"unknown architecture {name!r}")
    spec.name = f"{family.lower()}{depth}"
    for k, v in overrides.items():
        setattr(spec, k, v)
    return spec.validate()


ARCH_NAMES = [f"{p}{d}" for p in ("pure", "resnet") for d in (*IMAGENET_DEPTHS, *CIFAR_DEPTHS)]


class ResidualBlock(Module):
    """Two-layer residual block.

    standard:      conv-BN-ReLU-conv-BN, add skip, ReLU
    product_unit:  conv-BN-ConvPU-BN, add skip, no activation
    """

    def __init__(self, spec: BlockSpec, dtype=np.float32):
        super().__init__()
        if spec.kind not in ("standard", "product_unit"):
            raise InvalidConfig(f"unknown block kind {spec.kind!r}")
        if spec.stride not in (1, 2) or spec.in_channels < 1 or spec.out_channels < 1:
            raise InvalidConfig(f"invalid block {spec}")
        self.spec = spec
        cin, cout = spec.in_channels, spec.out_channels
        self.conv1 = Conv2d(cin, cout, 3, spec.stride, 1, dtype=dtype)
        self.bn1 = BatchNorm2d(cout, dtype=dtype)
        if spec.kind == "product_unit":
            self.conv2 = ProductUnitConv2d(cout, cout, 3, 1, 1, dtype=dtype)
        else:
            self.conv2 = Conv2d(cout, cout, 3, 1, 1, dtype=dtype)
        self.bn2 = BatchNorm2d(cout, dtype=dtype)
        self.downsample = None
        if spec.has_downsample_skip:
            k = spec.downsample_kernel
            self.downsample = Sequential(
                Conv2d(cin, cout, k, spec.stride, (k - 1) // 2, dtype=dtype),
                BatchNorm2d(cout, dtype=dtype),
            )

    def forward(self, x):
        pu = self.spec.kind == "product_unit"
        out = self.bn1(self.conv1(x))
        if not pu:
            out = relu(out)
        out = self.bn2(self.conv2(out))
        skip = x if self.downsample is None else self.downsample(x)
        out = out + skip
        return out if pu else relu(out)


def build_block(spec: BlockSpec, dtype=np.float32) -> ResidualBlock:
    return ResidualBlock(spec, dtype=dtype)


class Stem(Module):
    def __init__(self, arch: ArchitectureSpec, dtype=np.float32):
        super().__init__()
        self.use_relu = arch.family == "ResNet"
        c0 = arch.stage_channels[0]
        if arch.stem == "imagenet":
            self.conv = Conv2d(arch.in_channels, c0, 7, 2, 3, dtype=dtype)
            self.pool = MaxPool2d(3, 2, 1)
        else:
            self.conv = Conv2d(arch.in_channels, c0, 3, 1, 1, dtype=dtype)
            self.pool = None
        self.bn = BatchNorm2d(c0, dtype=dtype)

    def forward(self, x):
        x = self.bn(self.conv(x))
        if self.use_relu:
            x = relu(x)
        return x if self.pool is None else self.pool(x)


class Network(Module):
    def __init__(self, arch: ArchitectureSpec, dtype=np.float32):
        super().__init__()
        arch.validate()
        self.arch = arch
        self.stem = Stem(arch, dtype=dtype)
        stages = []
        cin = arch.stage_channels[0]
        for s, (nblocks, cout) in enumerate(zip(arch.stage_blocks, arch.stage_channels)):
            blocks = []
            for b in range(nblocks):
                stride = 2 if (s > 0 and b == 0) else 1
                blocks.append(
                    ResidualBlock(BlockSpec(arch.block_kind, cin, cout, stride, arch.downsample_kernel), dtype=dtype)
                )
                cin = cout
            stages.append(Sequential(*blocks))
        self.stages = Sequential(*stages)
        self.fc = Linear(cin, arch.num_classes, dtype=dtype)

    def features(self, x):
        """Stem output followed by each stage output."""
        outs = [self.stem(x)]
        for stage in self.stages:
            outs.append(stage(outs[-1]))
        return outs

    def forward(self, x):
        h = self.stages(self.stem(x))
        return self.fc(F.flatten(F.adaptive_avgpool_to_1x1(h)))


def build_network(arch: ArchitectureSpec, dtype=np.float32) -> Network:
    return Network(arch, dtype=dtype)


def kaiming_uniform_bound(fan_in: int, a: float) -> float:
    return math.sqrt(6.0 / ((1 + a * a) * fan_in))


def init_parameters(model: Module, seed: int, pu_slope: float = 5.0):
    """Initialise every layer in traversal order from one seeded generator.

    Product-unit exponents: Kaiming-uniform with negative slope ``pu_slope``;
    thresholds at zero.  Plain convolutions: Kaiming-normal (fan-out, ReLU gain).
    Batch norm: weight 1, bias 0.  Linear: uniform(+-1/sqrt(fan_in)).
    """
    rng = np.random.default_rng(seed)
    for _, m in model.named_modules():
        if isinstance(m, ProductUnitConv2d):
            fan_in = m.in_channels * m.kernel_size**2
            bound = kaiming_uniform_bound(fan_in, pu_slope)
            m.weight.data = rng.uniform(-bound, bound, m.weight.shape).astype(m.weight.dtype)
            m.theta.data = np.zeros((), dtype=m.theta.dtype)
        elif isinstance(m, Conv2d):
            fan_out = m.out_channels * m.kernel_size**2
            std = math.sqrt(2.0 / fan_out)
            m.weight.data = rng.normal(0.0, std, m.weight.shape).astype(m.weight.dtype)
        elif isinstance(m, BatchNorm2d):
            m.weight.data = np.ones_like(m.weight.data)
            m.bias.data = np.zeros_like(m.bias.data)
            m.running_mean[...] = 0
            m.running_var[...] = 1
        elif isinstance(m, Linear):
            bound = 1.0 / math.sqrt(m.in_features)
            m.weight.data = rng.uniform(-bound, bound, m.weight.shape).astype(m.weight.dtype)
            m.bias.data = rng.uniform(-bound, bound, m.bias.shape).astype(m.bias.dtype)
    for p in model.parameters():
        p.grad = None


def count_params(model: Module) -> int:
    return int(sum(p.size for p in model.parameters()))


def create_model(name_or_spec, num_classes: int = 10, seed: int = 0, dtype=np.float32, **overrides) -> Network:
    spec = name_or_spec if isinstance(name_or_spec, ArchitectureSpec) else arch_spec(name_or_spec, num_classes, **overrides)
    model = build_network(spec, dtype=dtype)
    init_parameters(model, seed)
    return model
