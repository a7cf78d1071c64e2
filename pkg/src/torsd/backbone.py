"""Block-structured classifiers whose block outputs are exposed as taps."""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeError


@dataclass(frozen=True)
class BlockSpec:
    index: int  # 1-based, deepest block has index k
    channels: int
    height: int
    width: int

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.channels, self.height, self.width)


@dataclass
class TappedFeatures:
    """Per-depth maps split by triplet role, plus logits for every image."""

    f_o: list[torch.Tensor]
    f_p: list[torch.Tensor]
    f_n: list[torch.Tensor]
    logits: torch.Tensor  # 3T x num_classes, triple-major

    @property
    def depth(self) -> int:
        return len(self.f_o)

    @property
    def logits_o(self):
        return self.logits[0::3]

    @property
    def logits_p(self):
        return self.logits[1::3]

    @property
    def logits_n(self):
        return self.logits[2::3]


def init_weights(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Linear) and m.bias is not None:
            nn.init.zeros_(m.bias)


class TappedBackbone(nn.Module):
    """Ordered blocks followed by global-average-pool + linear head.

    ``forward`` is the inference path; ``forward_features`` runs the very same
    modules and additionally returns every block output.
    """

    def __init__(self, blocks: Sequence[nn.Module], head_in: int, num_classes: int,
                 input_shape=(3, 32, 32), name: str = "backbone"):
        super().__init__()
        if len(blocks) < 2:
            raise ValueError("a tapped backbone needs at least two blocks")
        self.blocks = nn.ModuleList(blocks)
        self.fc = nn.Linear(head_in, num_classes)
        self.num_classes = num_classes
        self.input_shape = tuple(input_shape)
        self.name = name

    @property
    def k(self) -> int:
        return len(self.blocks)

    def _check_input(self, x: torch.Tensor) -> None:
        if x.dim() != 4 or tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError("backbone input", expected=("N",) + self.input_shape, actual=tuple(x.shape))

    def head(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc(torch.flatten(F.adaptive_avg_pool2d(x, 1), 1))

    def forward_features(self, x: torch.Tensor) -> tuple[list[torch.Tensor], torch.Tensor]:
        self._check_input(x)
        taps = []
        for block in self.blocks:
            x = block(x)
            taps.append(x)
        return taps, self.head(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        self._check_input(x)
        for block in self.blocks:
            x = block(x)
        return self.head(x)

    @torch.no_grad()
    def block_specs(self) -> list[BlockSpec]:
        was_training = self.training
        self.eval()
        try:
            probe = torch.zeros((1,) + self.input_shape, dtype=self.fc.weight.dtype)
            taps, _ = self.forward_features(probe)
        finally:
            self.train(was_training)
        return [BlockSpec(i + 1, t.shape[1], t.shape[2], t.shape[3]) for i, t in enumerate(taps)]


def _conv_bn_relu(cin, cout, stride):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=False),
    )


def build_toy_cnn(num_classes: int, width: int = 8, input_shape=(3, 32, 32), seed: int | None = None) -> TappedBackbone:
    """Four stride-2 conv-BN-ReLU blocks with channels width * [1, 2, 4, 8]."""
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    channels = [width, 2 * width, 4 * width, 8 * width]
    with torch.random.fork_rng(devices=[]):
        if seed is not None:
            torch.manual_seed(seed)
        cin = input_shape[0]
        blocks = []
        for cout in channels:
            blocks.append(_conv_bn_relu(cin, cout, stride=2))
            cin = cout
        model = TappedBackbone(blocks, channels[-1], num_classes, input_shape, name=f"toy_cnn_w{width}")
        init_weights(model)
    return model


def toy_cnn_param_count(num_classes: int, width: int = 8, in_channels: int = 3) -> int:
    channels = [width, 2 * width, 4 * width, 8 * width]
    total, cin = 0, in_channels
    for cout in channels:
        total += 9 * cin * cout + 2 * cout  # conv (no bias) + BN affine
        cin = cout
    return total + cin * num_classes + num_classes


class BasicBlock(nn.Module):
    expansion = 1

    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, stride=1, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = nn.Sequential()
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(
                nn.Conv2d(cin, cout, 1, stride=stride, bias=False),
                nn.BatchNorm2d(cout),
            )

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


def build_resnet18_like(num_classes: int, input_shape=(3, 32, 32), seed: int | None = None) -> TappedBackbone:
    """CIFAR-style ResNet18: 3x3 stem, four stages of two basic blocks.

    The stem is folded into the first tapped block.
    """
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    with torch.random.fork_rng(devices=[]):
        if seed is not None:
            torch.manual_seed(seed)
        widths = [64, 128, 256, 512]
        stem = nn.Sequential(
            nn.Conv2d(input_shape[0], 64, 3, stride=1, padding=1, bias=False),
            nn.BatchNorm2d(64),
            nn.ReLU(),
        )
        blocks, cin = [], 64
        for i, cout in enumerate(widths):
            stride = 1 if i == 0 else 2
            stage = [BasicBlock(cin, cout, stride), BasicBlock(cout, cout, 1)]
            if i == 0:
                stage = [stem] + stage
            blocks.append(nn.Sequential(*stage))
            cin = cout
        model = TappedBackbone(blocks, 512, num_classes, input_shape, name="resnet18")
        init_weights(model)
    return model


BACKBONES = {
    "toy_cnn": build_toy_cnn,
    "resnet18": build_resnet18_like,
}


def build_backbone(name: str, num_classes: int, input_shape=(3, 32, 32), seed: int | None = None) -> TappedBackbone:
    if name.startswith("toy_cnn_w"):
        return build_toy_cnn(num_classes, width=int(name[len("toy_cnn_w"):]), input_shape=input_shape, seed=seed)
    try:
        builder = BACKBONES[name]
    except KeyError:
        raise ValueError(f"unknown backbone {name!r}; choose from {sorted(BACKBONES)}") from None
    return builder(num_classes, input_shape=input_shape, seed=seed)


def forward_tapped(backbone: TappedBackbone, batch) -> TappedFeatures:
    """Run a triple-major batch and split every tap into role views."""
    images = batch.images if hasattr(batch, "images") else batch
    if images.shape[0] % 3:
        raise ShapeError("triplet batch leading dimension must be divisible by 3", actual=images.shape[0])
    taps, logits = backbone.forward_features(images)
    return TappedFeatures(
        f_o=[t[0::3] for t in taps],
        f_p=[t[1::3] for t in taps],
        f_n=[t[2::3] for t in taps],
        logits=logits,
    )


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def strip_for_inference(bundle) -> TappedBackbone:
    """Drop every training-only module and return a standalone backbone copy."""
    backbone = bundle.backbone if hasattr(bundle, "backbone") else bundle
    return copy.deepcopy(backbone)
