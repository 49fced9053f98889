"""Progressively fine-tuned similarity network.

A layered conv encoder-decoder whose parameterized layers are individually
freezable, trained in two stages (slide-level then patch-level) with a dual
objective: contrastive loss on bottleneck embeddings and MSE reconstruction
on the decoder output. After training it serves as a frozen [0, 1] cosine
similarity scorer.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .corpus import PairSample
from .errors import (ConfigurationError, DegenerateEmbeddingError,
                     InvalidInputError)


class LayeredExtractor(nn.Module):
    """Encoder-decoder feature extractor with 10 addressable layers.

    Layer indexing counts parameterized layers in forward order:
    indices 0-3 are the strided encoder convs, 4 is the embedding head,
    5-9 the decoder. The network is fully convolutional apart from the
    pooled embedding head, so any input whose sides are multiples of 16
    is accepted (slides at 224, patches at 64 or 32).
    """

    MIN_INPUT = 16

    def __init__(self, embedding_dim: int = 128, base_channels: int = 16):
        super().__init__()
        ch = base_channels
        self.embedding_dim = embedding_dim
        self.base_channels = base_channels
        self.enc = nn.ModuleList([
            nn.Conv2d(3, ch, 4, 2, 1),
            nn.Conv2d(ch, ch * 2, 4, 2, 1),
            nn.Conv2d(ch * 2, ch * 4, 4, 2, 1),
            nn.Conv2d(ch * 4, ch * 8, 4, 2, 1),
        ])
        self.embed_fc = nn.Linear(ch * 8, embedding_dim)
        self.dec = nn.ModuleList([
            nn.ConvTranspose2d(ch * 8, ch * 4, 4, 2, 1),
            nn.ConvTranspose2d(ch * 4, ch * 2, 4, 2, 1),
            nn.ConvTranspose2d(ch * 2, ch, 4, 2, 1),
            nn.ConvTranspose2d(ch, ch, 4, 2, 1),
            nn.Conv2d(ch, 3, 3, 1, 1),
        ])

    @property
    def layers(self) -> list[nn.Module]:
        return list(self.enc) + [self.embed_fc] + list(self.dec)

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        h = x
        for conv in self.enc:
            h = F.leaky_relu(conv(h), 0.2)
        return h

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = self.encode(x)
        emb = self.embed_fc(h.mean(dim=(2, 3)))
        d = h
        for layer in self.dec[:-1]:
            d = F.relu(layer(d))
        recon = torch.sigmoid(self.dec[-1](d))
        return emb, recon

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        return self.embed_fc(self.encode(x).mean(dim=(2, 3)))

    # -- freeze scheduling ---------------------------------------------------

    def set_trainable(self, indices: Iterable[int]) -> None:
        indices = set(indices)
        self.validate_indices(indices)
        for i, layer in enumerate(self.layers):
            layer.requires_grad_(i in indices)

    def trainable_indices(self) -> set[int]:
        return {i for i, l in enumerate(self.layers)
                if any(p.requires_grad for p in l.parameters())}

    def validate_indices(self, indices: Iterable[int]) -> None:
        bad = [i for i in indices if not 0 <= i < self.num_layers]
        if bad:
            raise ConfigurationError(
                f"layer indices {bad} out of range [0, {self.num_layers})")

    def parameter_digest(self, indices: Iterable[int] | None = None) -> str:
        """SHA-256 over the raw float32 bytes of the selected layers."""
        if indices is None:
            indices = range(self.num_layers)
        h = hashlib.sha256()
        layers = self.layers
        for i in sorted(set(indices)):
            for p in layers[i].parameters():
                h.update(p.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()

    def check_resolution(self, shape: tuple[int, int]) -> None:
        hgt, wid = shape
        if hgt < self.MIN_INPUT or wid < self.MIN_INPUT \
                or hgt % self.MIN_INPUT or wid % self.MIN_INPUT:
            raise ConfigurationError(
                f"input {hgt}x{wid} incompatible: sides must be multiples of "
                f"{self.MIN_INPUT}")


@dataclass
class SimilarityScore:
    value: float

    def __post_init__(self):
        if not 0.0 <= self.value <= 1.0:
            raise InvalidInputError(f"similarity score {self.value} outside [0, 1]")


@dataclass
class StagePlan:
    stage_id: int
    trainable_layer_indices: frozenset[int]
    epochs: int
    batch_size: int = 32
    recon_lr: float = 1e-3
    sim_lr: float = 5e-4
    input_resolution: tuple[int, int] = (64, 64)
    margin: float = 1.0

    def __post_init__(self):
        self.trainable_layer_indices = frozenset(self.trainable_layer_indices)
        if self.stage_id not in (1, 2):
            raise ConfigurationError("stage_id must be 1 or 2")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigurationError("epochs must be >= 0 and batch_size >= 1")
        if self.margin <= 0:
            raise InvalidInputError("margin must be positive")


def last_n_layers(extractor: LayeredExtractor, n: int) -> frozenset[int]:
    """Indices of the last n parameterized layers in forward order."""
    total = extractor.num_layers
    return frozenset(range(max(0, total - n), total))


@dataclass
class StageResult:
    plan: StagePlan
    seed: int
    loss_history: list[tuple[float, float]]  # per epoch (contrastive, reconstruction)
    frozen_digest_pre: str
    frozen_digest_post: str
    warning: str | None = None

    @property
    def frozen_intact(self) -> bool:
        return self.frozen_digest_pre == self.frozen_digest_post


# ---------------------------------------------------------------------------
# Losses and scoring
# ---------------------------------------------------------------------------

def contrastive_loss(d, y, margin: float = 1.0):
    """y*d^2 + (1-y)*max(0, margin-d)^2 for distance d and binary label y.

    Accepts scalars or torch tensors (autograd flows through tensors).
    """
    if margin <= 0:
        raise InvalidInputError("margin must be positive")
    d_t = torch.as_tensor(d, dtype=torch.float32) if not torch.is_tensor(d) else d
    if (d_t < 0).any():
        raise InvalidInputError("distance must be non-negative")
    y_t = torch.as_tensor(y, dtype=d_t.dtype)
    loss = y_t * d_t ** 2 + (1 - y_t) * torch.clamp(margin - d_t, min=0.0) ** 2
    return loss if torch.is_tensor(d) else float(loss)


def reconstruction_loss(input, reconstruction):
    """Mean squared per-pixel error."""
    a = torch.as_tensor(input, dtype=torch.float32) if not torch.is_tensor(input) else input
    b = reconstruction if torch.is_tensor(reconstruction) else \
        torch.as_tensor(reconstruction, dtype=torch.float32)
    if a.shape != b.shape:
        raise InvalidInputError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    loss = F.mse_loss(b, a)
    return loss if (torch.is_tensor(input) or torch.is_tensor(reconstruction)) else float(loss)


def to_tensor(image: np.ndarray) -> torch.Tensor:
    """(H, W, 3) float array in [0, 1] -> (1, 3, H, W) tensor."""
    arr = np.asarray(image, dtype=np.float32)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise InvalidInputError(f"expected HxWx3 image, got {arr.shape}")
    return torch.from_numpy(arr).permute(2, 0, 1).unsqueeze(0)


def batch_to_tensor(images: Sequence[np.ndarray]) -> torch.Tensor:
    return torch.cat([to_tensor(im) for im in images], dim=0)


def embed_image(extractor, image: np.ndarray) -> np.ndarray:
    """Embedding as a flat numpy vector; accepts a LayeredExtractor or any
    callable mapping an image array to a vector (used by test stubs)."""
    if isinstance(extractor, LayeredExtractor):
        with torch.no_grad():
            return extractor.embed(to_tensor(image)).squeeze(0).numpy()
    return np.asarray(extractor(image), dtype=np.float64).ravel()


def cosine_01(u: np.ndarray, v: np.ndarray) -> float:
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise DegenerateEmbeddingError("zero-norm embedding")
    return float(np.clip(np.dot(u, v) / (nu * nv), 0.0, 1.0))


def score_pair(extractor, a: np.ndarray, b: np.ndarray) -> SimilarityScore:
    """Cosine similarity of the two embeddings, clamped below at 0."""
    if np.asarray(a).shape != np.asarray(b).shape:
        raise InvalidInputError("pair members must share a resolution")
    return SimilarityScore(cosine_01(embed_image(extractor, a),
                                     embed_image(extractor, b)))


def score_batch(extractor: LayeredExtractor, a: torch.Tensor, b: torch.Tensor) -> np.ndarray:
    """Vectorized score_pair over two aligned image batches (N, 3, H, W)."""
    with torch.no_grad():
        ea = extractor.embed(a)
        eb = extractor.embed(b)
    na = torch.linalg.vector_norm(ea, dim=1)
    nb = torch.linalg.vector_norm(eb, dim=1)
    if (na == 0).any() or (nb == 0).any():
        raise DegenerateEmbeddingError("zero-norm embedding in batch")
    cos = (ea * eb).sum(dim=1) / (na * nb)
    return torch.clamp(cos, 0.0, 1.0).numpy()


# ---------------------------------------------------------------------------
# Stage runner
# ---------------------------------------------------------------------------

def _pairs_to_tensors(pairs: Sequence[PairSample],
                      resolution: tuple[int, int]) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    a = batch_to_tensor([p.a.pixels for p in pairs])
    b = batch_to_tensor([p.b.pixels for p in pairs])
    y = torch.tensor([float(p.label) for p in pairs])
    if tuple(a.shape[2:]) != tuple(resolution):
        a = F.interpolate(a, size=resolution, mode="bilinear", align_corners=False)
        b = F.interpolate(b, size=resolution, mode="bilinear", align_corners=False)
    return a, b, y


def run_stage(extractor: LayeredExtractor, plan: StagePlan,
              pairs: Sequence[PairSample], seed: int = 0) -> StageResult:
    """One fine-tuning stage: only layers in the plan's trainable set move.

    Per batch the reconstruction objective steps an Adagrad optimizer and
    the contrastive objective steps an Adam optimizer, each from its own
    backward pass.
    """
    if not pairs:
        raise ConfigurationError("run_stage requires a non-empty pair list")
    extractor.validate_indices(plan.trainable_layer_indices)
    frozen = set(range(extractor.num_layers)) - set(plan.trainable_layer_indices)
    digest_pre = extractor.parameter_digest(frozen)

    if not plan.trainable_layer_indices:
        return StageResult(plan=plan, seed=seed, loss_history=[],
                           frozen_digest_pre=digest_pre, frozen_digest_post=digest_pre,
                           warning="empty trainable set; model unchanged")

    extractor.check_resolution(plan.input_resolution)
    extractor.set_trainable(plan.trainable_layer_indices)
    params = [p for p in extractor.parameters() if p.requires_grad]
    opt_recon = torch.optim.Adagrad(params, lr=plan.recon_lr)
    opt_sim = torch.optim.Adam(params, lr=plan.sim_lr)

    a_all, b_all, y_all = _pairs_to_tensors(pairs, plan.input_resolution)
    rng = np.random.default_rng(seed)
    history: list[tuple[float, float]] = []
    extractor.train()
    for _ in range(plan.epochs):
        order = rng.permutation(len(pairs))
        con_sum = rec_sum = 0.0
        n_batches = 0
        for start in range(0, len(pairs), plan.batch_size):
            idx = torch.from_numpy(order[start:start + plan.batch_size].copy())
            a, b, y = a_all[idx], b_all[idx], y_all[idx]

            # reconstruction step (Adagrad)
            opt_recon.zero_grad()
            _, ra = extractor(a)
            _, rb = extractor(b)
            rec = reconstruction_loss(a, ra) + reconstruction_loss(b, rb)
            if rec.requires_grad:
                rec.backward()
                opt_recon.step()

            # contrastive step (Adam) on a fresh forward pass; when only
            # decoder layers are trainable this loss has zero gradient
            # w.r.t. them, so the step is skipped
            opt_sim.zero_grad()
            # unit-normalize so the margin acts on angular separation,
            # the geometry the cosine scorer reads (d^2 = 2 - 2 cos)
            ea = F.normalize(extractor.embed(a), dim=1)
            eb = F.normalize(extractor.embed(b), dim=1)
            d = torch.linalg.vector_norm(ea - eb, dim=1)
            con = contrastive_loss(d, y, plan.margin).mean()
            if con.requires_grad:
                con.backward()
                opt_sim.step()

            con_sum += con.item()
            rec_sum += rec.item()
            n_batches += 1
        history.append((con_sum / n_batches, rec_sum / n_batches))
    extractor.eval()

    digest_post = extractor.parameter_digest(frozen)
    return StageResult(plan=plan, seed=seed, loss_history=history,
                       frozen_digest_pre=digest_pre, frozen_digest_post=digest_post)


def pretrain_reconstruction(extractor: LayeredExtractor, images: Sequence[np.ndarray],
                            epochs: int = 2, lr: float = 1e-3, batch_size: int = 16,
                            resolution: tuple[int, int] = (64, 64), seed: int = 0) -> list[float]:
    """Reconstruction-only warmup standing in for large-scale pretraining."""
    x_all = batch_to_tensor(list(images))
    if tuple(x_all.shape[2:]) != tuple(resolution):
        x_all = F.interpolate(x_all, size=resolution, mode="bilinear", align_corners=False)
    extractor.set_trainable(range(extractor.num_layers))
    opt = torch.optim.Adagrad(extractor.parameters(), lr=lr)
    rng = np.random.default_rng(seed)
    history = []
    extractor.train()
    for _ in range(epochs):
        order = rng.permutation(len(x_all))
        total, n = 0.0, 0
        for start in range(0, len(x_all), batch_size):
            idx = torch.from_numpy(order[start:start + batch_size].copy())
            x = x_all[idx]
            opt.zero_grad()
            _, recon = extractor(x)
            loss = reconstruction_loss(x, recon)
            loss.backward()
            opt.step()
            total += loss.item()
            n += 1
        history.append(total / n)
    extractor.eval()
    return history


def train_mft(extractor: LayeredExtractor, stage1: StagePlan, stage2: StagePlan,
              wsi_pairs: Sequence[PairSample], patch_pairs: Sequence[PairSample],
              seed: int = 0) -> tuple[LayeredExtractor, list[StageResult]]:
    """Two-stage progressive fine-tune: slide-level pairs then patch-level
    pairs, with the stage-2 trainable set strictly inside stage 1's."""
    if not stage2.trainable_layer_indices <= stage1.trainable_layer_indices:
        raise ConfigurationError(
            "stage 2 trainable layers must be a subset of stage 1's")
    r1 = run_stage(extractor, stage1, wsi_pairs, seed=seed)
    r2 = run_stage(extractor, stage2, patch_pairs, seed=seed + 1)
    return extractor, [r1, r2]


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------

def save_checkpoint(extractor: LayeredExtractor, path: str | Path,
                    results: Sequence[StageResult] = (), seed: int | None = None,
                    extra: dict | None = None) -> Path:
    """Binary parameter container plus a JSON sidecar manifest."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"state_dict": extractor.state_dict(),
                "embedding_dim": extractor.embedding_dim,
                "base_channels": extractor.base_channels}, path)
    manifest = {
        "embedding_dim": extractor.embedding_dim,
        "base_channels": extractor.base_channels,
        "param_digest": extractor.parameter_digest(),
        "seed": seed,
        "stages": [{
            "stage_id": r.plan.stage_id,
            "trainable_layer_indices": sorted(r.plan.trainable_layer_indices),
            "epochs": r.plan.epochs,
            "batch_size": r.plan.batch_size,
            "recon_lr": r.plan.recon_lr,
            "sim_lr": r.plan.sim_lr,
            "input_resolution": list(r.plan.input_resolution),
            "margin": r.plan.margin,
            "seed": r.seed,
            "frozen_param_digest": {"pre": r.frozen_digest_pre,
                                    "post": r.frozen_digest_post},
        } for r in results],
    }
    if extra:
        manifest.update(extra)
    sidecar = path.with_suffix(path.suffix + ".json")
    sidecar.write_text(json.dumps(manifest, indent=2))
    return path


def load_checkpoint(path: str | Path) -> tuple[LayeredExtractor, dict]:
    path = Path(path)
    blob = torch.load(path, map_location="cpu", weights_only=True)
    extractor = LayeredExtractor(embedding_dim=blob["embedding_dim"],
                                 base_channels=blob["base_channels"])
    extractor.load_state_dict(blob["state_dict"])
    extractor.eval()
    sidecar = path.with_suffix(path.suffix + ".json")
    manifest = json.loads(sidecar.read_text()) if sidecar.is_file() else {}
    return extractor, manifest
