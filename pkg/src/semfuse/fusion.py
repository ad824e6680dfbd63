"""Text/image fusion: concatenation, gated compact bilinear pooling, and the MFAS topology."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

FUSION_KINDS = ("concat", "gated_mcb", "mfas")


def fused_dim(kind: str, text_dim: int = 768, image_dim: int = 768, image_inter_dim: int = 512,
              text_inter_dim: int | None = None) -> int:
    """|F| for a fusion kind: 1,536 for concat/gated_mcb and 2,816 for MFAS at default dims."""
    if kind in ("concat", "gated_mcb"):
        return text_dim + image_dim
    if kind == "mfas":
        text_inter_dim = text_dim if text_inter_dim is None else text_inter_dim
        return text_dim + image_dim + text_inter_dim + image_inter_dim
    raise ValueError(f"unknown fusion kind {kind!r}")


@dataclass
class FusedRepr:
    values: torch.Tensor
    kind: str
    dim: int

    def __post_init__(self):
        if self.kind not in FUSION_KINDS:
            raise ValueError(f"unknown fusion kind {self.kind!r}")
        if self.values.shape[-1] != self.dim:
            raise ValueError(f"{self.kind} fusion must be {self.dim}-d, got {self.values.shape[-1]}")


@dataclass(frozen=True)
class CountSketchParams:
    """Hash ``h: [d] -> [D]`` and sign ``s: [d] -> {-1, +1}``, fixed at construction."""

    h: torch.Tensor
    s: torch.Tensor
    sketch_dim: int
    seed: int | None = None

    def __post_init__(self):
        if self.sketch_dim < 1:
            raise ValueError("sketch_dim must be >= 1")
        if self.h.shape != self.s.shape or self.h.dim() != 1:
            raise ValueError("h and s must be 1-D and the same length")
        if self.h.numel() and (int(self.h.min()) < 0 or int(self.h.max()) >= self.sketch_dim):
            raise ValueError("hash values out of range")
        if not torch.all(self.s.abs() == 1):
            raise ValueError("signs must be +-1")

    @property
    def input_dim(self) -> int:
        return self.h.numel()

    @classmethod
    def sample(cls, input_dim: int, sketch_dim: int, seed: int) -> CountSketchParams:
        rng = np.random.default_rng(seed)
        h = torch.from_numpy(rng.integers(0, sketch_dim, size=input_dim)).long()
        s = torch.from_numpy(rng.choice([-1.0, 1.0], size=input_dim))
        return cls(h=h, s=s, sketch_dim=sketch_dim, seed=seed)


def count_sketch(x: torch.Tensor, p: CountSketchParams) -> torch.Tensor:
    """out[..., j] = sum over i with h(i) = j of s(i) * x[..., i]."""
    if x.shape[-1] != p.input_dim:
        raise ValueError(f"count_sketch expects last dim {p.input_dim}, got {x.shape[-1]}")
    out = x.new_zeros(*x.shape[:-1], p.sketch_dim)
    return out.index_add(-1, p.h.to(x.device), x * p.s.to(x))


def circular_convolution(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """out[k] = sum_j a[j] b[(k - j) mod D], computed as a product in the frequency domain."""
    if a.shape[-1] != b.shape[-1]:
        raise ValueError(f"dimension mismatch: {a.shape[-1]} vs {b.shape[-1]}")
    n = a.shape[-1]
    return torch.fft.irfft(torch.fft.rfft(a, n=n) * torch.fft.rfft(b, n=n), n=n)


def _check(name, t, dim):
    if t.shape[-1] != dim:
        raise ValueError(f"{name} must be {dim}-d, got {t.shape[-1]}")


def fuse_concat(text: torch.Tensor, image: torch.Tensor) -> torch.Tensor:
    if text.shape[:-1] != image.shape[:-1]:
        raise ValueError("batch shapes differ")
    return torch.cat([text, image], dim=-1)


def compact_bilinear(text, image, p_text: CountSketchParams, p_image: CountSketchParams) -> torch.Tensor:
    """Sketched outer product of text and image (pre-gate)."""
    if p_text.sketch_dim != p_image.sketch_dim:
        raise ValueError("sketch dims differ")
    return circular_convolution(count_sketch(text, p_text), count_sketch(image, p_image))


def fuse_gated_mcb(text, image, p_text: CountSketchParams, p_image: CountSketchParams) -> torch.Tensor:
    return torch.sigmoid(compact_bilinear(text, image, p_text, p_image))


def fuse_mfas(text_final, text_inter, image_final, image_inter) -> torch.Tensor:
    inner = torch.sigmoid(torch.cat([text_inter, image_inter], dim=-1))
    return torch.sigmoid(torch.cat([text_final, image_final, inner], dim=-1))


class Fusion(nn.Module):
    """Fusion as a module: sketch parameters live in buffers so checkpoints carry them."""

    def __init__(self, kind: str, text_dim: int = 768, image_dim: int = 768, image_inter_dim: int = 512,
                 text_inter_dim: int | None = None, sketch_seed: int = 0):
        super().__init__()
        if kind not in FUSION_KINDS:
            raise ValueError(f"unknown fusion kind {kind!r}")
        self.kind = kind
        self.text_dim = text_dim
        self.image_dim = image_dim
        self.text_inter_dim = text_dim if text_inter_dim is None else text_inter_dim
        self.image_inter_dim = image_inter_dim
        self.out_dim = fused_dim(kind, text_dim, image_dim, image_inter_dim, self.text_inter_dim)
        self.sketch_seed = sketch_seed
        if kind == "gated_mcb":
            pt = CountSketchParams.sample(text_dim, self.out_dim, sketch_seed)
            pi = CountSketchParams.sample(image_dim, self.out_dim, sketch_seed + 1)
            self.register_buffer("h_text", pt.h)
            self.register_buffer("s_text", pt.s.float())
            self.register_buffer("h_image", pi.h)
            self.register_buffer("s_image", pi.s.float())

    def sketch_params(self) -> tuple[CountSketchParams, CountSketchParams]:
        return (
            CountSketchParams(self.h_text, self.s_text, self.out_dim),
            CountSketchParams(self.h_image, self.s_image, self.out_dim),
        )

    def forward(self, text_final, image_final, text_inter=None, image_inter=None) -> FusedRepr:
        _check("text", text_final, self.text_dim)
        _check("image", image_final, self.image_dim)
        if self.kind == "concat":
            values = fuse_concat(text_final, image_final)
        elif self.kind == "gated_mcb":
            values = fuse_gated_mcb(text_final, image_final, *self.sketch_params())
        else:
            if text_inter is None or image_inter is None:
                raise ValueError("mfas fusion needs intermediate representations")
            _check("text intermediate", text_inter, self.text_inter_dim)
            _check("image intermediate", image_inter, self.image_inter_dim)
            values = fuse_mfas(text_final, text_inter, image_final, image_inter)
        return FusedRepr(values, self.kind, self.out_dim)
