"""Image preprocessing and CNN backbones exposing penultimate, block-2 and last-conv features."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
import torchvision.transforms.functional as TF
from PIL import Image

IMAGE_SIZE = 224
RESIZE_FOR_CROP = 256
IMAGE_DIM = 768
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


def load_image(path: str | Path) -> Image.Image:
    try:
        with Image.open(path) as im:
            im.load()
            return im.copy()
    except OSError as exc:
        raise ValueError(f"undecodable image {path}: {exc}") from None


def to_rgb(image) -> Image.Image:
    if isinstance(image, np.ndarray):
        arr = image
        if arr.dtype != np.uint8:
            arr = np.clip(arr, 0, 255).astype(np.uint8)
        if arr.ndim == 3 and arr.shape[2] == 1:
            arr = arr[:, :, 0]
        image = Image.fromarray(arr)
    if not isinstance(image, Image.Image):
        raise ValueError(f"cannot decode image of type {type(image).__name__}")
    if image.width < 1 or image.height < 1:
        raise ValueError("image has no pixels")
    if image.mode in ("RGBA", "LA") or (image.mode == "P" and "transparency" in image.info):
        image = image.convert("RGBA")
        background = Image.new("RGBA", image.size, (255, 255, 255, 255))
        image = Image.alpha_composite(background, image)
    return image.convert("RGB")


def preprocess_image(
    image,
    train_mode: bool = False,
    seed: int = 0,
    mean=IMAGENET_MEAN,
    std=IMAGENET_STD,
) -> torch.Tensor:
    """Return a normalized ``3x224x224`` float tensor.

    Eval mode resizes straight to 224. Train mode resizes to 256, takes a
    random 224 crop and flips horizontally with probability 0.5, all drawn
    from ``seed``.
    """
    image = to_rgb(image)
    if train_mode:
        rng = np.random.default_rng(seed)
        image = TF.resize(image, [RESIZE_FOR_CROP, RESIZE_FOR_CROP])
        top = int(rng.integers(0, RESIZE_FOR_CROP - IMAGE_SIZE + 1))
        left = int(rng.integers(0, RESIZE_FOR_CROP - IMAGE_SIZE + 1))
        image = TF.crop(image, top, left, IMAGE_SIZE, IMAGE_SIZE)
        if rng.random() < 0.5:
            image = TF.hflip(image)
    else:
        image = TF.resize(image, [IMAGE_SIZE, IMAGE_SIZE])
    return TF.normalize(TF.to_tensor(image), mean, std)


def check_image_tensor(t: torch.Tensor) -> None:
    if t.shape[-3:] != (3, IMAGE_SIZE, IMAGE_SIZE):
        raise ValueError(f"expected image tensor (..., 3, {IMAGE_SIZE}, {IMAGE_SIZE}), got {tuple(t.shape)}")
    if not torch.isfinite(t).all():
        raise ValueError("image tensor contains non-finite values")


@dataclass
class ImageRepr:
    final: torch.Tensor
    intermediate: torch.Tensor


class ImageBackbone(nn.Module):
    """CNN returning ``penultimate`` vector, pooled ``intermediate`` block-2 features and ``last_conv`` map."""

    name = "abstract"
    penultimate_dim: int
    intermediate_dim: int


class StandinImageBackbone(ImageBackbone):
    """Four-stage toy CNN; block 2 has 512 channels like ResNet-152's conv3 stage."""

    name = "standin"

    def __init__(self, widths=(8, 32, 512, 64), stem_kernel: int = 8, stem_stride: int = 8, seed: int = 0):
        super().__init__()
        c0, c1, c2, c3 = widths
        self.seed = seed
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.stem = nn.Conv2d(3, c0, stem_kernel, stride=stem_stride, bias=False)
            self.block1 = nn.Conv2d(c0, c1, 3, stride=2, padding=1, bias=False)
            self.block2 = nn.Conv2d(c1, c2, 1, bias=False)
            self.block3 = nn.Conv2d(c2, c3, 3, stride=2, padding=1, bias=False)
        self.penultimate_dim = c3
        self.intermediate_dim = c2

    def forward(self, x):
        x = F.relu(self.stem(x))
        x = F.relu(self.block1(x))
        inter = F.relu(self.block2(x))
        last = F.relu(self.block3(inter))
        return {
            "penultimate": last.mean(dim=(2, 3)),
            "intermediate": inter.mean(dim=(2, 3)),
            "last_conv": last,
        }


class ResNetBackbone(ImageBackbone):
    """torchvision ResNet-152; ``layer2`` is the block-2 stage (512 channels)."""

    name = "resnet152"

    def __init__(self, net=None, weights_path: str | None = None):
        super().__init__()
        import torchvision

        self.net = net or torchvision.models.resnet152(weights=None)
        _maybe_load(self.net, weights_path)
        self.net.fc = nn.Identity()
        self.penultimate_dim = self.net.layer4[-1].conv3.out_channels
        self.intermediate_dim = self.net.layer2[-1].conv3.out_channels

    def forward(self, x):
        n = self.net
        x = n.maxpool(n.relu(n.bn1(n.conv1(x))))
        x = n.layer1(x)
        inter = n.layer2(x)
        last = n.layer4(n.layer3(inter))
        return {
            "penultimate": torch.flatten(n.avgpool(last), 1),
            "intermediate": inter.mean(dim=(2, 3)),
            "last_conv": last,
        }


class DenseNetBackbone(ImageBackbone):
    """torchvision DenseNet-161; ``denseblock2`` output is the block-2 stage (768 channels)."""

    name = "densenet161"

    def __init__(self, net=None, weights_path: str | None = None):
        super().__init__()
        import torchvision

        self.net = net or torchvision.models.densenet161(weights=None)
        _maybe_load(self.net, weights_path)
        self.penultimate_dim = self.net.classifier.in_features
        self.net.classifier = nn.Identity()
        feats = self.net.features
        self.intermediate_dim = feats.transition2.norm.num_features

    def forward(self, x):
        feats = self.net.features
        inter = None
        for name, module in feats.named_children():
            x = module(x)
            if name == "denseblock2":
                inter = x
        last = F.relu(x)
        return {
            "penultimate": F.adaptive_avg_pool2d(last, 1).flatten(1),
            "intermediate": inter.mean(dim=(2, 3)),
            "last_conv": last,
        }


def _maybe_load(net: nn.Module, weights_path: str | None) -> None:
    if weights_path is None:
        return
    state = torch.load(weights_path, map_location="cpu", weights_only=True)
    net.load_state_dict(state)


def build_image_backbone(kind: str = "standin", weights_path: str | None = None, seed: int = 0) -> ImageBackbone:
    if kind == "standin":
        return StandinImageBackbone(seed=seed)
    if weights_path is None and os.environ.get("SEMFUSE_CACHE"):
        candidate = Path(os.environ["SEMFUSE_CACHE"]) / f"{kind}.pth"
        if candidate.is_file():
            weights_path = str(candidate)
    if kind == "resnet152":
        return ResNetBackbone(weights_path=weights_path)
    if kind == "densenet161":
        return DenseNetBackbone(weights_path=weights_path)
    raise ValueError(f"unknown image backbone {kind!r}")


class ImageEncoder(nn.Module):
    """Backbone plus the 768-unit dense projection (ReLU) of its penultimate features."""

    def __init__(self, backbone: ImageBackbone, out_dim: int = IMAGE_DIM, relu: bool = True):
        super().__init__()
        self.backbone = backbone
        self.proj = nn.Linear(backbone.penultimate_dim, out_dim)
        self.relu = relu
        self.out_dim = out_dim

    @property
    def intermediate_dim(self) -> int:
        return self.backbone.intermediate_dim

    def project(self, penultimate):
        y = self.proj(penultimate)
        return F.relu(y) if self.relu else y

    def forward(self, x) -> ImageRepr:
        feats = self.backbone(x)
        return ImageRepr(final=self.project(feats["penultimate"]), intermediate=feats["intermediate"])


def encode_image(t: torch.Tensor, encoder: ImageEncoder) -> ImageRepr:
    check_image_tensor(t)
    batched = t.dim() == 3
    x = t[None] if batched else t
    try:
        rep = encoder(x)
    except RuntimeError as exc:
        raise ValueError(f"backbone/tensor shape mismatch: {exc}") from None
    if batched:
        return ImageRepr(final=rep.final[0], intermediate=rep.intermediate[0])
    return rep
