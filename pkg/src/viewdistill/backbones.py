"""Backbone CNNs behind a single contract: RGB in, stride-16 feature maps out.

Every backbone maps a normalized image batch (N, 3, H, W) to feature maps of
shape (N, C, ceil(H/16), ceil(W/16)) and exposes ``out_channels``.  The
reference CNN is small enough for CPU-scale experiments; the torchvision
adapters (ResNet family with the last stage's stride reset to 1, SqueezeNet
with padding adjusted to preserve exact ceil geometry) cover the full-size
rosters.
"""
from __future__ import annotations

import math

import torch.nn as nn


def contract_shape(height: int, width: int):
    """Spatial output shape required of every backbone."""
    return math.ceil(height / 16), math.ceil(width / 16)


def _conv_bn_relu(cin: int, cout: int, stride: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, kernel_size=3, stride=stride, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class RefCNN(nn.Module):
    """Small reference backbone: a stem plus four stride-2 stages (stride 16).

    Each stage uses 3x3 convs with padding 1, so spatial dims follow
    ceil(x/2) exactly per stage.
    """

    def __init__(self, width: int = 16):
        super().__init__()
        w = width
        self.stem = _conv_bn_relu(3, w, stride=1)
        self.stage1 = _conv_bn_relu(w, w, stride=2)
        self.stage2 = _conv_bn_relu(w, 2 * w, stride=2)
        self.stage3 = _conv_bn_relu(2 * w, 4 * w, stride=2)
        self.stage4 = _conv_bn_relu(4 * w, 4 * w, stride=2)
        self.out_channels = 4 * w

    def forward(self, x):
        x = self.stem(x)
        x = self.stage1(x)
        x = self.stage2(x)
        x = self.stage3(x)
        return self.stage4(x)


def _reset_last_stride(resnet) -> None:
    """Set the last residual stage's stride from 2 to 1 (stride 32 -> 16)."""
    block = resnet.layer4[0]
    if hasattr(block, "conv2") and block.conv2.stride == (2, 2):
        block.conv2.stride = (1, 1)  # Bottleneck
    elif block.conv1.stride == (2, 2):
        block.conv1.stride = (1, 1)  # BasicBlock
    if block.downsample is not None:
        block.downsample[0].stride = (1, 1)


class ResNetBackbone(nn.Module):
    """torchvision ResNet trunk with last stride reset; head layers dropped."""

    def __init__(self, depth: int, pretrained: bool = False):
        super().__init__()
        import torchvision.models as tvm

        factories = {18: tvm.resnet18, 34: tvm.resnet34, 50: tvm.resnet50,
                     101: tvm.resnet101, 152: tvm.resnet152}
        if depth not in factories:
            raise ValueError(f"unsupported resnet depth {depth}")
        weights = "DEFAULT" if pretrained else None
        net = factories[depth](weights=weights)
        _reset_last_stride(net)
        self.trunk = nn.Sequential(
            net.conv1, net.bn1, net.relu, net.maxpool,
            net.layer1, net.layer2, net.layer3, net.layer4,
        )
        self.out_channels = 512 if depth in (18, 34) else 2048

    def forward(self, x):
        return self.trunk(x)


class SqueezeBackbone(nn.Module):
    """torchvision SqueezeNet 1.1 features, padded so stride-16 geometry is
    exactly ceil at every stage."""

    def __init__(self, pretrained: bool = False):
        super().__init__()
        import torchvision.models as tvm

        weights = "DEFAULT" if pretrained else None
        net = tvm.squeezenet1_1(weights=weights)
        features = net.features
        features[0].padding = (1, 1)
        for m in features:
            if isinstance(m, nn.MaxPool2d):
                m.padding = 1
                m.ceil_mode = False
        self.trunk = features
        self.out_channels = 512

    def forward(self, x):
        return self.trunk(x)


def build_backbone(name: str, width: int = 16, pretrained: bool = False) -> nn.Module:
    if name == "ref":
        return RefCNN(width=width)
    if name.startswith("resnet"):
        return ResNetBackbone(int(name[len("resnet"):]), pretrained=pretrained)
    if name == "squeezenet":
        return SqueezeBackbone(pretrained=pretrained)
    raise ValueError(f"unknown backbone {name!r}")
