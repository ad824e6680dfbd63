"""Fold training with Adam and early stopping, and the k-fold cross-validation runner."""

from __future__ import annotations

import copy
import dataclasses
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from multiprocessing import get_context
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .data import BinaryLabel, DatasetError, FoldPlan, PostRecord
from .evaluation import EvalReport, predict_labels
from .image_encoder import load_image, preprocess_image
from .model import ModelConfig, MultimodalClassifier, checkpoint_dict, restore, save_checkpoint
from .text_encoder import build_joint_sequence, check_vocab, clean_text, pad_batch

log = logging.getLogger(__name__)

MONITORS = {"val_loss": -1, "val_accuracy": 1, "val_macro_f1": 1}


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 2e-6
    optimizer: str = "adam"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    batch_size: int = 4
    max_epochs: int = 50
    patience: int = 5
    monitor: str = "val_loss"
    seed: int = 0
    freeze_backbones: bool = False
    augment: bool = True

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.monitor not in MONITORS:
            raise ValueError(f"monitor must be one of {tuple(MONITORS)}")
        if self.optimizer != "adam":
            raise ValueError("only the adam optimizer is supported")


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_loss: float
    val_accuracy: float
    val_macro_f1: float
    wall_time: float


@dataclass
class TrainLog:
    epochs: list[EpochLog] = field(default_factory=list)
    stop_reason: str = ""
    best_epoch: int = 0

    @property
    def train_losses(self) -> list[float]:
        return [e.train_loss for e in self.epochs]

    @property
    def val_losses(self) -> list[float]:
        return [e.val_loss for e in self.epochs]

    def to_json(self) -> dict:
        return {"epochs": [dataclasses.asdict(e) for e in self.epochs], "stop_reason": self.stop_reason,
                "best_epoch": self.best_epoch}


class EarlyStopping:
    """Tracks the best monitored value; ``step`` returns True when training should stop."""

    def __init__(self, patience: int, mode: str = "min"):
        self.patience = patience
        self.sign = 1.0 if mode == "max" else -1.0
        self.best = -math.inf
        self.best_epoch = 0
        self.bad_epochs = 0

    def improved(self, value: float) -> bool:
        return self.sign * value > self.best

    def step(self, epoch: int, value: float) -> bool:
        if self.improved(value):
            self.best = self.sign * value
            self.best_epoch = epoch
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
        return self.bad_epochs >= self.patience

    @property
    def best_value(self) -> float:
        return self.sign * self.best


def record_label(rec: PostRecord, task: str) -> int:
    if rec.binary_label is None:
        raise ValueError(f"record {rec.id} has no label")
    if task == "binary":
        return int(rec.binary_label)
    if rec.category_label is None:
        raise ValueError(f"record {rec.id} has no category; multiclass runs use antisemitic posts only")
    return rec.category_label.index


def task_records(records: Sequence[PostRecord], task: str) -> list[PostRecord]:
    if task == "multiclass":
        return [r for r in records if r.binary_label == BinaryLabel.ANTISEMITIC]
    return list(records)


class Batcher:
    """Turns records into model inputs; caches frozen-backbone features."""

    def __init__(self, model: MultimodalClassifier, records: Sequence[PostRecord], image_root,
                 labeled: bool = True):
        self.model = model
        self.records = list(records)
        self.image_root = Path(image_root) if image_root is not None else None
        cfg = model.cfg
        self.seqs = [
            build_joint_sequence(clean_text(r.text), clean_text(r.ocr_text), cfg.max_len, model.tokenizer,
                                 cfg.truncation)
            for r in self.records
        ]
        self.labels = [record_label(r, cfg.task) for r in self.records] if labeled else None
        self._images: dict[int, object] = {}
        self._text_cache: dict[int, tuple[torch.Tensor, torch.Tensor]] = {}
        self._image_cache: dict[int, tuple[torch.Tensor, torch.Tensor]] = {}

    def __len__(self):
        return len(self.records)

    def image(self, i: int):
        if i not in self._images:
            self._images[i] = load_image(self.image_root / self.records[i].image_path)
        return self._images[i]

    def _text(self, idx, grad):
        ids, mask = pad_batch([self.seqs[i] for i in idx], self.model.tokenizer.pad_token_id)
        check_vocab(ids, self.model.text)
        if grad or not self.model.frozen:
            with torch.set_grad_enabled(grad):
                t = self.model.text_features(ids, mask)
            return t["final"], t["intermediate"]
        missing = [i for i in idx if i not in self._text_cache]
        if missing:
            ids, mask = pad_batch([self.seqs[i] for i in missing], self.model.tokenizer.pad_token_id)
            with torch.no_grad():
                t = self.model.text_features(ids, mask)
            for j, i in enumerate(missing):
                self._text_cache[i] = (t["final"][j], t["intermediate"][j])
        return (torch.stack([self._text_cache[i][0] for i in idx]),
                torch.stack([self._text_cache[i][1] for i in idx]))

    def _pixels(self, idx, train_mode, seed, epoch):
        tensors = []
        for i in idx:
            aug_seed = int(np.random.SeedSequence([seed, epoch, i]).generate_state(1)[0])
            tensors.append(preprocess_image(self.image(i), train_mode=train_mode, seed=aug_seed))
        return torch.stack(tensors)

    def _image(self, idx, grad, augment, seed, epoch):
        if grad or augment or not self.model.frozen:
            with torch.set_grad_enabled(grad):
                f = self.model.image_features(self._pixels(idx, augment, seed, epoch))
            return f["penultimate"], f["intermediate"]
        missing = [i for i in idx if i not in self._image_cache]
        if missing:
            with torch.no_grad():
                f = self.model.image_features(self._pixels(missing, False, seed, epoch))
            for j, i in enumerate(missing):
                self._image_cache[i] = (f["penultimate"][j], f["intermediate"][j])
        return (torch.stack([self._image_cache[i][0] for i in idx]),
                torch.stack([self._image_cache[i][1] for i in idx]))

    def forward(self, idx, train_mode: bool = False, augment: bool = False, seed: int = 0, epoch: int = 0):
        backbone_grad = train_mode and not self.model.frozen
        tf, ti = self._text(idx, backbone_grad)
        ip, ii = self._image(idx, backbone_grad, train_mode and augment, seed, epoch)
        return self.model.head(tf, ti, ip, ii)

    def label_tensor(self, idx) -> torch.Tensor:
        return torch.tensor([self.labels[i] for i in idx], dtype=torch.long)


def make_batches(n: int, batch_size: int, order=None, merge_singleton: bool = False) -> list[list[int]]:
    order = list(range(n)) if order is None else list(order)
    batches = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    # batch norm cannot train on a batch of one
    if merge_singleton and len(batches) > 1 and len(batches[-1]) == 1:
        batches[-2].extend(batches.pop())
    return batches


@torch.no_grad()
def evaluate_batcher(batcher: Batcher, batch_size: int = 32) -> tuple[EvalReport, float, np.ndarray]:
    model = batcher.model
    model.eval()
    losses, all_lp = [], []
    for idx in make_batches(len(batcher), batch_size):
        out = batcher.forward(idx)
        losses.append(float(model.loss(out, batcher.label_tensor(idx))) * len(idx))
        all_lp.append(out.log_probs)
    log_probs = torch.cat(all_lp).numpy()
    report = EvalReport.from_predictions(predict_labels(log_probs), batcher.labels, model.cfg.num_classes)
    return report, sum(losses) / len(batcher), log_probs


@torch.no_grad()
def predict(model: MultimodalClassifier, records: Sequence[PostRecord], image_root,
            batch_size: int = 32) -> np.ndarray:
    """Log-probabilities for unlabeled records."""
    batcher = Batcher(model, records, image_root, labeled=False)
    model.eval()
    out = [batcher.forward(idx).log_probs for idx in make_batches(len(batcher), batch_size)]
    return torch.cat(out).numpy()


def train_fold(
    train_set: Sequence[PostRecord],
    val_set: Sequence[PostRecord],
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    image_root,
    model: MultimodalClassifier | None = None,
) -> tuple[dict, TrainLog]:
    """Train on one fold and return the best-validation checkpoint and the epoch log."""
    if not train_set or not val_set:
        raise ValueError("train and validation splits must be non-empty")
    seed = train_cfg.seed
    torch.manual_seed(seed)
    if model is None:
        model = MultimodalClassifier(model_cfg, seed=seed)
    if train_cfg.freeze_backbones:
        model.freeze_backbones()
    train = Batcher(model, train_set, image_root)
    val = Batcher(model, val_set, image_root)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=train_cfg.lr, betas=(train_cfg.adam_beta1, train_cfg.adam_beta2),
                           eps=train_cfg.adam_eps, weight_decay=train_cfg.weight_decay)
    stopper = EarlyStopping(train_cfg.patience, "max" if MONITORS[train_cfg.monitor] > 0 else "min")
    best_state = copy.deepcopy(model.state_dict())
    tlog = TrainLog(stop_reason="max_epochs")

    for epoch in range(1, train_cfg.max_epochs + 1):
        start = time.perf_counter()
        model.train()
        order = np.random.default_rng([seed, epoch]).permutation(len(train))
        total = 0.0
        for idx in make_batches(len(train), train_cfg.batch_size, order, merge_singleton=model_cfg.batch_norm):
            out = train.forward(idx, train_mode=True, augment=train_cfg.augment, seed=seed, epoch=epoch)
            loss = model.loss(out, train.label_tensor(idx))
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss {float(loss.detach())} at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
        report, val_loss, _ = evaluate_batcher(val)
        entry = EpochLog(epoch, total / len(train), val_loss, report.accuracy, report.macro_f1,
                         time.perf_counter() - start)
        tlog.epochs.append(entry)
        log.info("epoch %d train_loss=%.4f val_loss=%.4f val_acc=%.4f", epoch, entry.train_loss, val_loss,
                 report.accuracy)
        monitored = getattr(entry, train_cfg.monitor)
        if stopper.improved(monitored):
            best_state = copy.deepcopy(model.state_dict())
        if stopper.step(epoch, monitored):
            tlog.stop_reason = "early_stop"
            break

    tlog.best_epoch = stopper.best_epoch
    model.load_state_dict(best_state)
    model.eval()
    ckpt = checkpoint_dict(model, seed, extra={"train_config": dataclasses.asdict(train_cfg),
                                               "best_epoch": tlog.best_epoch})
    return ckpt, tlog


def evaluate_checkpoint(ckpt: dict, records: Sequence[PostRecord], image_root) -> EvalReport:
    model = restore(ckpt)
    report, _, _ = evaluate_batcher(Batcher(model, records, image_root))
    return report


def _run_fold(i, fold, by_id, model_cfg, train_cfg, image_root, out_dir):
    tr = [by_id[x] for x in fold.train]
    va = [by_id[x] for x in fold.val]
    te = [by_id[x] for x in fold.test]
    ckpt, tlog = train_fold(tr, va, model_cfg, train_cfg, image_root)
    report = evaluate_checkpoint(ckpt, te, image_root)
    if out_dir is not None:
        fold_dir = Path(out_dir) / f"fold{i}"
        fold_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(ckpt, fold_dir / "checkpoint.pt")
        (fold_dir / "trainlog.json").write_text(json.dumps(tlog.to_json(), indent=1) + "\n")
        (fold_dir / "report.json").write_text(json.dumps(report.to_json(), indent=1) + "\n")
    return ckpt, report, tlog


def run_cross_validation(
    records: Sequence[PostRecord],
    fold_plan: FoldPlan,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    image_root,
    out_dir=None,
    parallel_folds: int = 1,
) -> list[tuple[dict, EvalReport]]:
    """Train one model per fold and evaluate it on that fold's test ids.

    With ``out_dir`` set, each fold writes ``fold<i>/{checkpoint.pt, trainlog.json, report.json}``.
    """
    records = task_records(records, model_cfg.task)
    by_id = {r.id: r for r in records}
    planned = fold_plan.all_ids()
    if planned != set(by_id):
        raise DatasetError(
            f"fold plan covers {len(planned)} ids but the {model_cfg.task} task has {len(by_id)} records"
        )
    args = [(i, f, by_id, model_cfg, train_cfg, image_root, out_dir) for i, f in enumerate(fold_plan.folds)]
    if parallel_folds > 1:
        with ProcessPoolExecutor(max_workers=parallel_folds, mp_context=get_context("spawn")) as pool:
            results = list(pool.map(_run_fold, *zip(*args)))
    else:
        results = [_run_fold(*a) for a in args]
    return [(ckpt, report) for ckpt, report, _ in results]
