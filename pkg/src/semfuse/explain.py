"""GradCAM heatmaps for the image pathway and attention dumps for the text pathway."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .image_encoder import IMAGE_SIZE
from .text_encoder import TextBackbone, TokenSequence, pad_batch


class ExplainError(RuntimeError):
    pass


@dataclass
class Heatmap:
    values: np.ndarray

    def __post_init__(self):
        if self.values.shape != (IMAGE_SIZE, IMAGE_SIZE):
            raise ValueError(f"heatmap must be {IMAGE_SIZE}x{IMAGE_SIZE}")


@dataclass
class AttentionDump:
    tokens: list[str]
    weights: np.ndarray  # heads x L x L, or layers x heads x L x L when all layers are dumped

    def to_json(self) -> dict:
        return {"tokens": self.tokens, "weights": self.weights.tolist()}


def _scores_and_map(model, x, seq):
    if hasattr(model, "gradcam_forward"):
        return model.gradcam_forward(x, seq)
    raise ExplainError(f"{type(model).__name__} exposes no convolutional feature map")


def grad_cam(model, image: torch.Tensor, target_class: int, seq: TokenSequence | None = None) -> Heatmap:
    """Weight the last conv feature map by its spatially averaged class-score gradient.

    ``model`` must provide ``gradcam_forward(images, seq) -> (scores, feature_map)``.
    """
    model.eval()
    x = image[None] if image.dim() == 3 else image
    x = x.detach().clone().requires_grad_(True)
    with torch.enable_grad():
        scores, fmap = _scores_and_map(model, x, seq)
        if fmap is None or fmap.dim() != 4:
            raise ExplainError("backbone exposes no convolutional feature map")
        if not 0 <= target_class < scores.shape[-1]:
            raise ValueError(f"target_class {target_class} out of range for {scores.shape[-1]} classes")
        (grads,) = torch.autograd.grad(scores[0, target_class], fmap)
    weights = grads.mean(dim=(2, 3), keepdim=True)
    cam = F.relu((weights * fmap).sum(dim=1, keepdim=True)).detach()
    cam = F.interpolate(cam, size=(IMAGE_SIZE, IMAGE_SIZE), mode="bilinear", align_corners=False)[0, 0]
    cam = cam.clamp_min(0).double().numpy()
    peak = cam.max()
    if peak > 0:
        cam = cam / peak
    return Heatmap(cam)


def _text_backbone(model) -> TextBackbone:
    if isinstance(model, TextBackbone):
        return model
    backbone = getattr(model, "text", None)
    if isinstance(backbone, TextBackbone):
        return backbone
    raise ExplainError(f"{type(model).__name__} has no transformer text backbone")


@torch.no_grad()
def export_attention(model, seq: TokenSequence, all_layers: bool = False) -> AttentionDump:
    backbone = _text_backbone(model)
    was_training = backbone.training
    backbone.eval()
    ids, mask = pad_batch([seq], backbone.tokenizer.pad_token_id)
    out = backbone(ids, mask, output_attentions=True)
    backbone.train(was_training)
    attentions = out.get("attentions")
    if not attentions:
        raise ExplainError("backbone does not expose attention probabilities")
    if all_layers:
        weights = torch.stack([a[0] for a in attentions]).double().numpy()
    else:
        weights = attentions[-1][0].double().numpy()
    return AttentionDump(list(seq.tokens), weights)


def save_heatmap(heatmap: Heatmap, out_dir, post_id: str) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    png = out_dir / f"{post_id}.gradcam.png"
    js = out_dir / f"{post_id}.gradcam.json"
    Image.fromarray(np.round(heatmap.values * 255).astype(np.uint8), mode="L").save(png)
    js.write_text(json.dumps(heatmap.values.tolist()))
    return png, js


def save_attention(dump: AttentionDump, out_dir, post_id: str) -> Path:
    path = Path(out_dir) / f"{post_id}.attention.json"
    path.write_text(json.dumps(dump.to_json()))
    return path
