"""Joint encoder/decoder, classifier head and the reconstruction + classification objective."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .fusion import FUSION_KINDS, Fusion, FusedRepr
from .image_encoder import IMAGE_DIM, ImageBackbone, ImageEncoder, build_image_backbone
from .text_encoder import MAX_LEN, TextBackbone, build_joint_sequence, build_text_backbone, pad_batch

CHECKPOINT_FORMAT = "semfuse-checkpoint"
CHECKPOINT_VERSION = 1
TASKS = {"binary": 2, "multiclass": 4}


@dataclass
class ModelConfig:
    fusion: str = "mfas"
    task: str = "binary"
    dropout_p: float = 0.2
    batch_norm: bool = True
    encoder_sizes: tuple[int, int] = (768, 384)
    decoder_hidden: int = 768
    classifier_hidden: int = 128
    text_backbone: str = "standin"
    image_backbone: str = "standin"
    text_checkpoint: str | None = None
    image_weights: str | None = None
    backbone_seed: int = 0
    max_len: int = MAX_LEN
    truncation: str = "post_first"
    image_dim: int = IMAGE_DIM
    image_projection_relu: bool = True
    sketch_seed: int = 0
    detach_reconstruction_target: bool = False

    def __post_init__(self):
        if self.fusion not in FUSION_KINDS:
            raise ValueError(f"fusion must be one of {FUSION_KINDS}, got {self.fusion!r}")
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {tuple(TASKS)}, got {self.task!r}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must be in [0, 1)")
        self.encoder_sizes = tuple(int(s) for s in self.encoder_sizes)
        if len(self.encoder_sizes) != 2:
            raise ValueError("encoder_sizes takes exactly two layer widths")

    @property
    def num_classes(self) -> int:
        return TASKS[self.task]

    @property
    def code_dim(self) -> int:
        return self.encoder_sizes[-1]


class JointEncoder(nn.Module):
    """F -> [BatchNorm] -> Dense(768) -> ReLU -> Dropout -> Dense(384) = J."""

    def __init__(self, in_dim: int, sizes=(768, 384), dropout_p: float = 0.2, batch_norm: bool = True):
        super().__init__()
        hidden, code = sizes
        self.in_dim = in_dim
        self.norm = nn.BatchNorm1d(in_dim) if batch_norm else nn.Identity()
        self.fc1 = nn.Linear(in_dim, hidden)
        self.drop = nn.Dropout(dropout_p)
        self.fc2 = nn.Linear(hidden, code)

    def forward(self, fused):
        if fused.shape[-1] != self.in_dim:
            raise ValueError(f"joint encoder expects {self.in_dim}-d input, got {fused.shape[-1]}")
        return self.fc2(self.drop(F.relu(self.fc1(self.norm(fused)))))


class JointDecoder(nn.Module):
    """J -> Dense(768) -> ReLU -> Dropout -> Dense(|F|); the output layer stays linear."""

    def __init__(self, code_dim: int, out_dim: int, hidden: int = 768, dropout_p: float = 0.2):
        super().__init__()
        self.code_dim = code_dim
        self.fc1 = nn.Linear(code_dim, hidden)
        self.drop = nn.Dropout(dropout_p)
        self.fc2 = nn.Linear(hidden, out_dim)

    def forward(self, code):
        if code.shape[-1] != self.code_dim:
            raise ValueError(f"joint decoder expects {self.code_dim}-d code, got {code.shape[-1]}")
        return self.fc2(self.drop(F.relu(self.fc1(code))))


class Classifier(nn.Module):
    def __init__(self, code_dim: int, num_classes: int, hidden: int = 128, dropout_p: float = 0.2,
                 batch_norm: bool = True):
        super().__init__()
        self.code_dim = code_dim
        self.norm = nn.BatchNorm1d(code_dim) if batch_norm else nn.Identity()
        self.fc1 = nn.Linear(code_dim, hidden)
        self.drop = nn.Dropout(dropout_p)
        self.out = nn.Linear(hidden, num_classes)

    def logits(self, code):
        if code.shape[-1] != self.code_dim:
            raise ValueError(f"classifier expects {self.code_dim}-d code, got {code.shape[-1]}")
        return self.out(self.drop(F.relu(self.fc1(self.norm(code)))))

    def forward(self, code):
        return F.log_softmax(self.logits(code), dim=-1)


def combined_loss(fused: torch.Tensor, reconstruction: torch.Tensor, log_probs: torch.Tensor,
                  label: torch.Tensor) -> torch.Tensor:
    """Mean squared reconstruction error plus negative log-likelihood, averaged over the batch."""
    if fused.shape != reconstruction.shape:
        raise ValueError(f"shape mismatch {tuple(fused.shape)} vs {tuple(reconstruction.shape)}")
    label = torch.as_tensor(label, dtype=torch.long, device=log_probs.device)
    n_classes = log_probs.shape[-1]
    if label.numel() and (int(label.min()) < 0 or int(label.max()) >= n_classes):
        raise ValueError(f"label out of range for {n_classes} classes")
    mse = ((fused - reconstruction) ** 2).mean(dim=-1)
    nll = -log_probs.gather(-1, label.reshape(*log_probs.shape[:-1], 1)).squeeze(-1)
    return (mse + nll).mean()


@dataclass
class ModelOutput:
    fused: FusedRepr
    code: torch.Tensor
    reconstruction: torch.Tensor
    logits: torch.Tensor
    log_probs: torch.Tensor
    last_conv: torch.Tensor | None = field(default=None, repr=False)


class MultimodalClassifier(nn.Module):
    """Text and image encoders, fusion, joint encoder/decoder and classifier in one module."""

    def __init__(self, cfg: ModelConfig, text_backbone: TextBackbone | None = None,
                 image_backbone: ImageBackbone | None = None, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.seed = seed
        self.text = text_backbone or build_text_backbone(cfg.text_backbone, cfg.text_checkpoint, cfg.backbone_seed)
        image_backbone = image_backbone or build_image_backbone(cfg.image_backbone, cfg.image_weights,
                                                                cfg.backbone_seed)
        self.frozen = False
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.image = ImageEncoder(image_backbone, cfg.image_dim, relu=cfg.image_projection_relu)
            self.fusion = Fusion(
                cfg.fusion,
                text_dim=self.text.hidden_size,
                image_dim=cfg.image_dim,
                image_inter_dim=image_backbone.intermediate_dim,
                text_inter_dim=self.text.hidden_size,
                sketch_seed=cfg.sketch_seed,
            )
            self.encoder = JointEncoder(self.fusion.out_dim, cfg.encoder_sizes, cfg.dropout_p, cfg.batch_norm)
            self.decoder = JointDecoder(cfg.code_dim, self.fusion.out_dim, cfg.decoder_hidden, cfg.dropout_p)
            self.classifier = Classifier(cfg.code_dim, cfg.num_classes, cfg.classifier_hidden, cfg.dropout_p,
                                         cfg.batch_norm)

    @property
    def tokenizer(self):
        return self.text.tokenizer

    @property
    def fused_dim(self) -> int:
        return self.fusion.out_dim

    def backbone_modules(self) -> list[nn.Module]:
        return [self.text, self.image.backbone]

    def freeze_backbones(self) -> None:
        self.frozen = True
        for m in self.backbone_modules():
            m.requires_grad_(False)
            m.eval()

    def train(self, mode: bool = True):
        super().train(mode)
        if self.frozen:
            for m in self.backbone_modules():
                m.eval()
        return self

    def text_features(self, input_ids, attention_mask) -> dict:
        return self.text(input_ids, attention_mask)

    def image_features(self, images) -> dict:
        return self.image.backbone(images)

    def head(self, text_final, text_inter, image_penultimate, image_inter) -> ModelOutput:
        image_final = self.image.project(image_penultimate)
        fused = self.fusion(text_final, image_final, text_inter, image_inter)
        code = self.encoder(fused.values)
        recon = self.decoder(code)
        logits = self.classifier.logits(code)
        return ModelOutput(fused, code, recon, logits, F.log_softmax(logits, dim=-1))

    def forward(self, input_ids, attention_mask, images) -> ModelOutput:
        t = self.text_features(input_ids, attention_mask)
        i = self.image_features(images)
        out = self.head(t["final"], t["intermediate"], i["penultimate"], i["intermediate"])
        out.last_conv = i.get("last_conv")
        return out

    def gradcam_forward(self, images, seq=None):
        """Class logits and the image backbone's last conv map; text defaults to the empty frame."""
        if seq is None:
            seq = build_joint_sequence("", "", self.cfg.max_len, self.tokenizer)
        ids, mask = pad_batch([seq] * images.shape[0], self.tokenizer.pad_token_id)
        out = self.forward(ids, mask, images)
        return out.logits, out.last_conv

    def loss(self, out: ModelOutput, labels) -> torch.Tensor:
        target = out.fused.values
        if self.cfg.detach_reconstruction_target:
            target = target.detach()
        return combined_loss(target, out.reconstruction, out.log_probs, labels)


def _is_backbone_key(key: str) -> bool:
    return key.startswith("text.") or key.startswith("image.backbone.")


def checkpoint_dict(model: MultimodalClassifier, train_seed: int, include_backbones: bool | None = None,
                    extra: dict | None = None) -> dict:
    """Versioned checkpoint container.

    Frozen backbones are stored by identifier only and rebuilt on restore;
    fine-tuned backbones are stored in full.
    """
    if include_backbones is None:
        include_backbones = not model.frozen
    state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model_config": dataclasses.asdict(model.cfg),
        "backbones": {"text": model.text.name, "image": model.image.backbone.name,
                      "seed": model.cfg.backbone_seed},
        "sketch_seed": model.cfg.sketch_seed,
        "train_seed": train_seed,
        "model_seed": model.seed,
        "head_state": {k: v for k, v in state.items() if not _is_backbone_key(k)},
        "backbone_state": {k: v for k, v in state.items() if _is_backbone_key(k)} if include_backbones else None,
        "extra": extra or {},
    }


def save_checkpoint(ckpt: dict, path: str | Path) -> None:
    torch.save(ckpt, path)


def restore(ckpt: dict) -> MultimodalClassifier:
    if ckpt.get("format") != CHECKPOINT_FORMAT:
        raise ValueError("not a semfuse checkpoint")
    if ckpt["version"] > CHECKPOINT_VERSION:
        raise ValueError(f"checkpoint version {ckpt['version']} is newer than supported {CHECKPOINT_VERSION}")
    cfg = ModelConfig(**ckpt["model_config"])
    model = MultimodalClassifier(cfg, seed=ckpt["model_seed"])
    missing, unexpected = model.load_state_dict(ckpt["head_state"], strict=False)
    if unexpected or any(not _is_backbone_key(k) for k in missing):
        raise ValueError(f"checkpoint head does not match config: missing={missing} unexpected={unexpected}")
    if ckpt["backbone_state"] is not None:
        model.load_state_dict(ckpt["backbone_state"], strict=False)
    else:
        model.freeze_backbones()
    model.eval()
    return model


def load_checkpoint(path: str | Path) -> tuple[MultimodalClassifier, dict]:
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    return restore(ckpt), ckpt
