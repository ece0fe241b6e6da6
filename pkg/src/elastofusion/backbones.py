"""Pretrained CNN backbones with named layer groups, freeze policies and
4-channel input inflation.

A :class:`Backbone` wraps a torchvision network as an ordered list of
*stages*. Each stage belongs to one named parameter group (``conv1`` ..
``fc8`` for AlexNet, ``stem``, ``layer1`` .. ``layer4``, ``fc`` for
ResNet-18). The final stage is the classification head; everything before it
produces the penultimate feature vector.
"""

from __future__ import annotations

import hashlib
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import torch
import torch.nn as nn
import torchvision

from .core import INPUT_SIDE
from .errors import (
    ChecksumError,
    FreezePolicyError,
    ModelError,
    ShapeError,
    UnknownArchitectureError,
    WeightsUnavailableError,
)

log = logging.getLogger(__name__)

WEIGHTS_ENV = "ELASTOFUSION_WEIGHTS_DIR"
NUM_CLASSES = 2


def weights_cache_dir() -> Path:
    env = os.environ.get(WEIGHTS_ENV)
    if env:
        return Path(env)
    return Path(torch.hub.get_dir()) / "checkpoints"


@dataclass
class Stage:
    group: str
    module: nn.Module


@dataclass(frozen=True)
class ArchSpec:
    """Registry entry: how to build an architecture and cut it into stages."""

    build: Callable[[], nn.Module]
    stages: Callable[[nn.Module], list[Stage]]
    first_conv: Callable[[nn.Module], tuple[nn.Module, str]]
    cam_layer: Callable[[nn.Module], nn.Module]
    head_stage: Callable[[nn.Module, int], nn.Module]  # n == 0 installs an identity
    feature_dim: int
    weights_file: str | None = None
    default_policy: str = "all_frozen"


def _alexnet_stages(net: nn.Module) -> list[Stage]:
    f, c = net.features, net.classifier
    return [
        Stage("conv1", nn.Sequential(f[0], f[1], f[2])),
        Stage("conv2", nn.Sequential(f[3], f[4], f[5])),
        Stage("conv3", nn.Sequential(f[6], f[7])),
        Stage("conv4", nn.Sequential(f[8], f[9])),
        # max pool, then adaptive average pool to the fixed 6x6 grid fc6 expects
        Stage("conv5", nn.Sequential(f[10], f[11], f[12], net.avgpool, nn.Flatten(1))),
        Stage("fc6", nn.Sequential(c[0], c[1], c[2])),
        Stage("fc7", nn.Sequential(c[3], c[4], c[5])),
        Stage("fc8", c[6]),
    ]


def _alexnet_head(net: nn.Module, n: int) -> nn.Module:
    net.classifier[6] = nn.Linear(4096, n) if n else nn.Identity()
    return net.classifier[6]


def _resnet_stages(net: nn.Module) -> list[Stage]:
    return [
        Stage("stem", nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)),
        Stage("layer1", net.layer1),
        Stage("layer2", net.layer2),
        Stage("layer3", net.layer3),
        Stage("layer4", nn.Sequential(net.layer4, net.avgpool, nn.Flatten(1))),
        Stage("fc", net.fc),
    ]


def _resnet_head(net: nn.Module, n: int) -> nn.Module:
    net.fc = nn.Linear(512, n) if n else nn.Identity()
    return net.fc


ARCHITECTURES: dict[str, ArchSpec] = {
    "alexnet": ArchSpec(
        build=lambda: torchvision.models.alexnet(weights=None),
        stages=_alexnet_stages,
        first_conv=lambda net: (net.features, "0"),
        cam_layer=lambda net: net.features[11],
        head_stage=_alexnet_head,
        feature_dim=4096,
        weights_file="alexnet-owt-7be5be79.pth",
        default_policy="alexnet_last3",
    ),
    "resnet18": ArchSpec(
        build=lambda: torchvision.models.resnet18(weights=None),
        stages=_resnet_stages,
        first_conv=lambda net: (net, "conv1"),
        cam_layer=lambda net: net.layer4,
        head_stage=_resnet_head,
        feature_dim=512,
        weights_file="resnet18-f37072fd.pth",
        default_policy="resnet_freeze_first4",
    ),
}

ALIASES = {"resnet": "resnet18", "resnet-18": "resnet18", "alex": "alexnet"}


def register_architecture(name: str, spec: ArchSpec) -> None:
    ARCHITECTURES[name.lower()] = spec


def canonical_name(name: str) -> str:
    key = name.strip().lower()
    key = ALIASES.get(key, key)
    if key not in ARCHITECTURES:
        raise UnknownArchitectureError(f"unknown architecture {name!r}; known: {sorted(ARCHITECTURES)}")
    return key


class Backbone(nn.Module):
    def __init__(self, name: str, net: nn.Module, weights_source: str = "random"):
        super().__init__()
        self.name = canonical_name(name)
        self.spec = ARCHITECTURES[self.name]
        self.net = net
        self.weights_source = weights_source
        self.feature_dim = self.spec.feature_dim
        self.input_channels = 3
        self.inflation_policy: str | None = None
        self.freeze_policy: str | None = None
        self.has_head = True
        self._frozen: set[str] = set()
        self._rebuild_stages()

    def _rebuild_stages(self) -> None:
        self._stages = self.spec.stages(self.net)
        if not self.has_head:
            self._stages = self._stages[:-1]

    # -- structure ---------------------------------------------------------
    @property
    def stages(self) -> list[Stage]:
        return list(self._stages)

    @property
    def group_names(self) -> list[str]:
        return [s.group for s in self._stages]

    def group_parameters(self, group: str) -> list[nn.Parameter]:
        for s in self._stages:
            if s.group == group:
                return list(s.module.parameters())
        raise FreezePolicyError(f"{self.name} has no layer group {group!r}")

    def named_group_parameters(self) -> dict[str, dict[str, torch.Tensor]]:
        out = {}
        for s in self._stages:
            out[s.group] = dict(s.module.named_parameters())
        return out

    @property
    def frozen_groups(self) -> set[str]:
        return set(self._frozen)

    @property
    def trainable_mask(self) -> dict[str, bool]:
        return {g: g not in self._frozen for g in self.group_names}

    @property
    def first_conv(self) -> nn.Conv2d:
        parent, attr = self.spec.first_conv(self.net)
        return parent[int(attr)] if attr.isdigit() else getattr(parent, attr)

    def _set_first_conv(self, conv: nn.Conv2d) -> None:
        parent, attr = self.spec.first_conv(self.net)
        if attr.isdigit():
            parent[int(attr)] = conv
        else:
            setattr(parent, attr, conv)
        self._rebuild_stages()

    @property
    def cam_layer(self) -> nn.Module:
        return self.spec.cam_layer(self.net)

    # -- freezing ------------------------------------------------------------
    def set_frozen(self, groups: Sequence[str]) -> None:
        groups = set(groups)
        unknown = groups - set(self.group_names)
        if unknown:
            raise FreezePolicyError(f"{self.name} has no layer groups {sorted(unknown)}")
        self._frozen = groups
        for s in self._stages:
            for p in s.module.parameters():
                p.requires_grad_(s.group not in groups)
        self.train(self.training)

    def train(self, mode: bool = True):
        super().train(mode)
        # frozen groups keep their normalisation statistics and disable dropout
        for s in self._stages:
            if s.group in self._frozen:
                s.module.eval()
        return self

    def trainable_parameters(self) -> list[nn.Parameter]:
        return [p for p in self.parameters() if p.requires_grad]

    # -- forward ---------------------------------------------------------------
    def check_input(self, x: torch.Tensor) -> None:
        if x.ndim != 4 or x.shape[1] != self.input_channels or tuple(x.shape[-2:]) != (INPUT_SIDE, INPUT_SIDE):
            raise ShapeError(
                f"{self.name} expects N x {self.input_channels} x {INPUT_SIDE} x {INPUT_SIDE}, "
                f"got {tuple(x.shape)}"
            )

    def run_stages(self, x: torch.Tensor, start: int = 0, stop: int | None = None) -> torch.Tensor:
        for s in self._stages[start:stop]:
            x = s.module(x)
        return x

    def features(self, x: torch.Tensor) -> torch.Tensor:
        stop = -1 if self.has_head else None
        return self.run_stages(x, 0, stop)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if not self.has_head:
            raise ModelError(f"{self.name} has no classification head")
        return self.run_stages(x)

    def frozen_prefix_length(self) -> int:
        """Number of leading stages that are frozen (cacheable in eval mode)."""
        n = 0
        for s in self._stages:
            if s.group not in self._frozen:
                break
            n += 1
        return n

    def remove_head(self) -> None:
        if not self.has_head:
            raise ModelError(f"{self.name} is already stripped")
        head_group = self._stages[-1].group
        self.spec.head_stage(self.net, 0)
        self.has_head = False
        self._frozen.discard(head_group)
        self._rebuild_stages()

    def metadata(self) -> dict:
        return {
            "kind": "backbone",
            "architecture": self.name,
            "input_channels": self.input_channels,
            "feature_dim": self.feature_dim,
            "has_head": self.has_head,
            "freeze_policy": self.freeze_policy,
            "frozen_groups": sorted(self._frozen),
            "inflation_policy": self.inflation_policy,
            "weights_source": self.weights_source,
            "class_names": ["benign", "malignant"],
        }


# -- loading ---------------------------------------------------------------------

def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _load_imagenet_state(spec: ArchSpec, name: str, cache_dir: Path | None) -> dict:
    if spec.weights_file is None:
        raise WeightsUnavailableError(f"no pretrained weights registered for {name}")
    path = (cache_dir or weights_cache_dir()) / spec.weights_file
    if not path.is_file():
        raise WeightsUnavailableError(
            f"pretrained weights for {name} not found at {path}; place the torchvision file "
            f"there or point ${WEIGHTS_ENV} at a directory containing it"
        )
    # torchvision files carry the leading hex digits of their sha256 in the name
    expected = Path(spec.weights_file).stem.rsplit("-", 1)[-1]
    if not _sha256(path).startswith(expected):
        raise ChecksumError(f"checksum mismatch for {path}")
    return torch.load(path, map_location="cpu", weights_only=True)


def load_backbone(
    name: str,
    weights: str | Path | None = "auto",
    *,
    seed: int = 0,
    num_classes: int = NUM_CLASSES,
    cache_dir: str | Path | None = None,
    head_seed: int | None = None,
) -> Backbone:
    """Build ``name`` and initialise it.

    ``weights`` is ``"imagenet"`` (torchvision file from the weight cache,
    required), ``"random"``/``None`` (seeded random init), ``"auto"``
    (ImageNet when cached, otherwise random with a warning) or a path to a
    torchvision-format state dict. The 1000-way ImageNet head is always
    replaced by a freshly initialised ``num_classes`` head, drawn from
    ``head_seed`` when given (otherwise from ``seed``).
    """
    key = canonical_name(name)
    spec = ARCHITECTURES[key]
    cache = Path(cache_dir) if cache_dir is not None else None

    state, source = None, "random"
    if weights in (None, "random"):
        pass
    elif weights == "imagenet":
        state, source = _load_imagenet_state(spec, key, cache), "imagenet"
    elif weights == "auto":
        try:
            state, source = _load_imagenet_state(spec, key, cache), "imagenet"
        except WeightsUnavailableError:
            log.warning("ImageNet weights for %s unavailable; using seeded random init", key)
    else:
        path = Path(weights)
        if not path.is_file():
            raise WeightsUnavailableError(f"weight file {path} not found")
        state, source = torch.load(path, map_location="cpu", weights_only=True), str(path)

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = spec.build()
        if state is not None:
            net.load_state_dict(state)
        if head_seed is not None:
            torch.manual_seed(head_seed)
        spec.head_stage(net, num_classes)
    backbone = Backbone(key, net, weights_source=source)
    backbone.eval()
    return backbone


# -- channel inflation -------------------------------------------------------------

def inflate_input_channels(backbone: Backbone, n: int, policy: str = "zero") -> Backbone:
    """Widen the first convolution to ``n`` input channels, in place.

    The ``n - 3`` new kernel slices are prepended so that the pretrained RGB
    slices keep looking at the R, G, B planes of a ``[gray, R, G, B]`` stack.
    ``policy="zero"`` fills them with zeros, ``"mean"`` with the mean of the
    RGB slices.
    """
    if n < 3:
        raise ValueError("channel count must be at least 3")
    if n < backbone.input_channels:
        raise ValueError(f"cannot shrink {backbone.input_channels} input channels to {n}")
    if n == backbone.input_channels:
        return backbone
    policy = policy.lower().replace("init", "")
    old = backbone.first_conv
    rgb = old.weight.data[:, -3:]
    if policy == "zero":
        extra = torch.zeros(rgb.shape[0], n - old.in_channels, *rgb.shape[2:], dtype=rgb.dtype)
    elif policy == "mean":
        extra = rgb.mean(dim=1, keepdim=True).repeat(1, n - old.in_channels, 1, 1)
    else:
        raise ValueError(f"unknown inflation policy {policy!r}")
    conv = nn.Conv2d(
        n, old.out_channels, old.kernel_size, old.stride, old.padding,
        old.dilation, old.groups, old.bias is not None, old.padding_mode,
    )
    conv.weight.data = torch.cat([extra, old.weight.data], dim=1)
    if old.bias is not None:
        conv.bias.data = old.bias.data.clone()
    conv.weight.requires_grad_(old.weight.requires_grad)
    if conv.bias is not None:
        conv.bias.requires_grad_(old.bias.requires_grad)
    backbone._set_first_conv(conv)
    backbone.input_channels = n
    backbone.inflation_policy = policy
    return backbone


# -- freeze policies ----------------------------------------------------------------

@dataclass(frozen=True)
class FreezePolicy:
    """Which layer groups stay fixed during fine-tuning.

    Named policies: ``alexnet_last3`` (train only fc6-fc8),
    ``resnet_freeze_first4`` (freeze stem + layer1-3), ``all_frozen``,
    ``none``. A custom policy lists frozen groups explicitly.
    """

    id: str
    groups: tuple[str, ...] = field(default=())

    @classmethod
    def parse(cls, value: "str | FreezePolicy | Sequence[str]") -> "FreezePolicy":
        if isinstance(value, FreezePolicy):
            return value
        if isinstance(value, str):
            key = value.strip().lower().replace("-", "_")
            aliases = {
                "alexnetlast3": "alexnet_last3",
                "resnetfreezefirst4": "resnet_freeze_first4",
                "allfrozen": "all_frozen",
            }
            return cls(aliases.get(key, key))
        return cls("custom", tuple(value))

    def frozen_groups(self, backbone: Backbone) -> list[str]:
        names = backbone.group_names
        if self.id == "alexnet_last3":
            required = ["conv1", "conv2", "conv3", "conv4", "conv5"]
        elif self.id == "resnet_freeze_first4":
            required = ["stem", "layer1", "layer2", "layer3"]
        elif self.id == "all_frozen":
            return list(names)
        elif self.id == "none":
            return []
        elif self.id == "custom":
            required = list(self.groups)
        elif self.id == "default":
            return FreezePolicy.parse(backbone.spec.default_policy).frozen_groups(backbone)
        else:
            raise FreezePolicyError(f"unknown freeze policy {self.id!r}")
        missing = [g for g in required if g not in names]
        if missing:
            raise FreezePolicyError(f"policy {self.id} references groups {missing} absent from {backbone.name}")
        return required


def apply_freeze_policy(backbone: Backbone, policy: "str | FreezePolicy | Sequence[str]") -> Backbone:
    policy = FreezePolicy.parse(policy)
    backbone.set_frozen(policy.frozen_groups(backbone))
    backbone.freeze_policy = policy.id if policy.id != "custom" else ",".join(policy.groups)
    return backbone


def default_policy(name: str) -> str:
    return ARCHITECTURES[canonical_name(name)].default_policy


# -- inference ------------------------------------------------------------------------

def extract_features(backbone: Backbone, batch: torch.Tensor) -> torch.Tensor:
    backbone.check_input(batch)
    return backbone.features(batch)


def forward_classify(model: nn.Module, batch: torch.Tensor) -> torch.Tensor:
    """Softmax probabilities over ``[benign, malignant]``."""
    if isinstance(model, Backbone):
        if not model.has_head:
            raise ModelError(f"{model.name} has no classification head")
        model.check_input(batch)
    return torch.softmax(model(batch), dim=1)


def build_classifier(
    name: str,
    modality_channels: int,
    *,
    weights: str | Path | None = "auto",
    freeze_policy: str | None = None,
    inflation: str = "zero",
    seed: int = 0,
    head_seed: int | None = None,
    cache_dir: str | Path | None = None,
) -> Backbone:
    """Convenience: load, inflate to the modality's channel count and freeze."""
    bb = load_backbone(name, weights, seed=seed, cache_dir=cache_dir, head_seed=head_seed)
    inflate_input_channels(bb, modality_channels, inflation)
    apply_freeze_policy(bb, freeze_policy or default_policy(name))
    return bb
