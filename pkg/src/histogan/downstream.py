"""Synthetic-vs-real downstream classification harness.

A small conv backbone (matching the similarity encoder) plus a dense head
is fine-tuned on a labeled patch set with a frozen-tail schedule, then
evaluated on a held-out real test set. The comparison runner trains twin
classifiers (synthetic-trained and real-trained) against the same test set
and machine-checks train/test disjointness by content hash.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigurationError, InvalidInputError, ValidationError
from .snn import batch_to_tensor

LabeledSet = Sequence[tuple[np.ndarray, str]]


@dataclass
class ClsConfig:
    trainable_tail_layers: int = 16
    head_units: int = 1024
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-5
    lr_step: int = 7
    lr_gamma: float = 0.1
    split: tuple[float, float] = (0.7, 0.3)
    base_channels: int = 16
    seed: int = 0

    def __post_init__(self):
        if abs(sum(self.split) - 1.0) > 1e-9:
            raise ConfigurationError("split fractions must sum to 1")
        if min(self.trainable_tail_layers, self.head_units, self.batch_size,
               self.lr_step) < 1 or self.lr <= 0 or self.lr_gamma <= 0:
            raise ConfigurationError("all ClsConfig values must be positive")


@dataclass
class EvalReport:
    overall: float
    per_class: dict[str, float]
    train_source: str
    test_digest: str
    seed: int

    def to_json(self, path: str | Path | None = None) -> str:
        text = json.dumps({"overall": self.overall, "per_class": self.per_class,
                           "train_source": self.train_source,
                           "test_digest": self.test_digest, "seed": self.seed},
                          indent=2)
        if path is not None:
            Path(path).parent.mkdir(parents=True, exist_ok=True)
            Path(path).write_text(text)
        return text


class PatchClassifier(nn.Module):
    """Conv backbone + dense head; parameterized layers are addressable so a
    frozen-tail schedule can be enforced and digest-checked."""

    def __init__(self, classes: Sequence[str], head_units: int = 1024,
                 base_channels: int = 16):
        super().__init__()
        ch = base_channels
        self.classes = list(classes)
        self.backbone = nn.ModuleList([
            nn.Conv2d(3, ch, 4, 2, 1),
            nn.Conv2d(ch, ch * 2, 4, 2, 1),
            nn.Conv2d(ch * 2, ch * 4, 4, 2, 1),
            nn.Conv2d(ch * 4, ch * 8, 4, 2, 1),
        ])
        self.head = nn.ModuleList([
            nn.Linear(ch * 8, head_units),
            nn.Linear(head_units, len(self.classes)),
        ])
        self.lr_history: list[float] = []

    @property
    def layers(self) -> list[nn.Module]:
        return list(self.backbone) + list(self.head)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = x
        for conv in self.backbone:
            h = F.leaky_relu(conv(h), 0.2)
        h = h.mean(dim=(2, 3))
        h = F.relu(self.head[0](h))
        return self.head[1](h)  # logits; softmax applied at predict time

    def predict(self, images: Sequence[np.ndarray], batch_size: int = 64) -> list[str]:
        self.eval()
        out: list[str] = []
        with torch.no_grad():
            for start in range(0, len(images), batch_size):
                x = batch_to_tensor(list(images[start:start + batch_size]))
                probs = torch.softmax(self(x), dim=1)
                out += [self.classes[i] for i in probs.argmax(dim=1).tolist()]
        return out

    def set_trainable_tail(self, n_tail: int) -> set[int]:
        layers = self.layers
        n_tail = min(n_tail, len(layers))
        trainable = set(range(len(layers) - n_tail, len(layers)))
        for i, layer in enumerate(layers):
            layer.requires_grad_(i in trainable)
        return trainable

    def parameter_digest(self, indices: Sequence[int] | None = None) -> str:
        h = hashlib.sha256()
        layers = self.layers
        for i in (sorted(indices) if indices is not None else range(len(layers))):
            for p in layers[i].parameters():
                h.update(p.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()


def dataset_digest(data: LabeledSet) -> str:
    """Order-independent content hash over (image bytes, label) items."""
    item_hashes = sorted(_item_hash(img, lbl) for img, lbl in data)
    h = hashlib.sha256()
    for ih in item_hashes:
        h.update(ih.encode())
    return h.hexdigest()


def _item_hash(image: np.ndarray, label: str) -> str:
    arr = np.round(np.asarray(image, dtype=np.float64) * 255.0).astype(np.uint8)
    return hashlib.sha256(arr.tobytes() + label.encode()).hexdigest()


def finetune_classifier(train_set: LabeledSet, cfg: ClsConfig) -> PatchClassifier:
    """Fit a classifier with only the tail layers trainable.

    Uses Adam plus a step LR schedule; the frozen-layer digest is asserted
    unchanged after training.
    """
    labels = sorted({lbl for _, lbl in train_set})
    if len(labels) < 2:
        raise ConfigurationError("training set must contain >= 2 classes")
    torch.manual_seed(cfg.seed)
    clf = PatchClassifier(classes=labels, head_units=cfg.head_units,
                          base_channels=cfg.base_channels)
    trainable = clf.set_trainable_tail(cfg.trainable_tail_layers)
    frozen = sorted(set(range(len(clf.layers))) - trainable)
    frozen_digest = clf.parameter_digest(frozen)

    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(len(train_set))
    n_train = max(1, int(round(cfg.split[0] * len(train_set))))
    train_idx, valid_idx = order[:n_train], order[n_train:]

    images = batch_to_tensor([np.asarray(img, dtype=np.float32) for img, _ in train_set])
    targets = torch.tensor([labels.index(lbl) for _, lbl in train_set])

    params = [p for p in clf.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=cfg.lr)
    sched = torch.optim.lr_scheduler.StepLR(opt, step_size=cfg.lr_step,
                                            gamma=cfg.lr_gamma)
    loss_fn = nn.CrossEntropyLoss()
    clf.train()
    for _ in range(cfg.epochs):
        clf.lr_history.append(sched.get_last_lr()[0])
        epoch_order = rng.permutation(train_idx)
        for start in range(0, len(epoch_order), cfg.batch_size):
            idx = torch.from_numpy(epoch_order[start:start + cfg.batch_size].copy())
            opt.zero_grad()
            loss = loss_fn(clf(images[idx]), targets[idx])
            loss.backward()
            opt.step()
        sched.step()
    clf.eval()
    del valid_idx  # validation split reserved; accuracy reported on test sets

    if clf.parameter_digest(frozen) != frozen_digest:
        raise ConfigurationError("frozen layers changed during fine-tuning")
    return clf


def evaluate(classifier: PatchClassifier, test_set: LabeledSet,
             train_source: str = "unknown", seed: int = 0) -> EvalReport:
    """Overall and per-class accuracy from argmax predictions."""
    if len(test_set) == 0:
        raise InvalidInputError("test set must be non-empty")
    preds = classifier.predict([img for img, _ in test_set])
    truth = [lbl for _, lbl in test_set]
    correct_by_class: dict[str, int] = {}
    total_by_class: dict[str, int] = {}
    for p, t in zip(preds, truth):
        total_by_class[t] = total_by_class.get(t, 0) + 1
        correct_by_class[t] = correct_by_class.get(t, 0) + (p == t)
    per_class = {c: correct_by_class[c] / total_by_class[c]
                 for c in sorted(total_by_class)}
    overall = sum(correct_by_class.values()) / len(test_set)
    return EvalReport(overall=overall, per_class=per_class,
                      train_source=train_source,
                      test_digest=dataset_digest(test_set), seed=seed)


def run_comparison(synthetic_set: LabeledSet, real_train_set: LabeledSet,
                   real_test_set: LabeledSet, cfg: ClsConfig
                   ) -> tuple[EvalReport, EvalReport]:
    """Train twin classifiers on synthetic and real data, evaluate both on
    the same real test set."""
    test_hashes = {_item_hash(img, lbl) for img, lbl in real_test_set}
    for name, train in (("synthetic", synthetic_set), ("real", real_train_set)):
        overlap = test_hashes & {_item_hash(img, lbl) for img, lbl in train}
        if overlap:
            raise ValidationError(
                f"{name} training set shares {len(overlap)} items with the test set")
    clf_synth = finetune_classifier(synthetic_set, cfg)
    clf_real = finetune_classifier(real_train_set, cfg)
    report_synth = evaluate(clf_synth, real_test_set, train_source="synthetic",
                            seed=cfg.seed)
    report_real = evaluate(clf_real, real_test_set, train_source="real",
                           seed=cfg.seed)
    return report_synth, report_real
