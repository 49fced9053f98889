"""Similarity-guided DCGAN: generator/discriminator, the improved training
loop (label smoothing, separate real/fake mini-batches, non-saturating
generator loss, gradient value clipping) and the external similarity reward
subtracted from the discriminator loss.

The reward is a detached scalar: gradients flow only through the ordinary
discriminator loss, and the frozen scorer is never trained.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigurationError, InvalidInputError
from .snn import LayeredExtractor, score_batch

EPS = 1e-7  # log clamp; keeps losses finite at saturated probabilities

TRACE_COLUMNS = ("iter", "epoch", "l_d", "reward", "l_d_mod", "l_g", "mean_sim")


# ---------------------------------------------------------------------------
# Networks
# ---------------------------------------------------------------------------

class Generator(nn.Module):
    """DCGAN generator; output is tanh in [-1, 1] at 32x32 or 64x64."""

    def __init__(self, latent_dim: int = 100, feature_maps: int = 64,
                 image_size: int = 64):
        super().__init__()
        if image_size not in (32, 64):
            raise ConfigurationError("image_size must be 32 or 64")
        self.latent_dim = latent_dim
        self.feature_maps = feature_maps
        self.image_size = image_size
        f = feature_maps
        blocks: list[nn.Module] = []
        widths = [f * 8, f * 4, f * 2, f] if image_size == 64 else [f * 4, f * 2, f]
        blocks += [nn.ConvTranspose2d(latent_dim, widths[0], 4, 1, 0, bias=False),
                   nn.BatchNorm2d(widths[0]), nn.ReLU(True)]
        for w_in, w_out in zip(widths, widths[1:]):
            blocks += [nn.ConvTranspose2d(w_in, w_out, 4, 2, 1, bias=False),
                       nn.BatchNorm2d(w_out), nn.ReLU(True)]
        blocks += [nn.ConvTranspose2d(widths[-1], 3, 4, 2, 1, bias=False), nn.Tanh()]
        self.net = nn.Sequential(*blocks)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.net(z)


class Discriminator(nn.Module):
    """DCGAN discriminator; scalar sigmoid output per image."""

    def __init__(self, feature_maps: int = 64, image_size: int = 64):
        super().__init__()
        if image_size not in (32, 64):
            raise ConfigurationError("image_size must be 32 or 64")
        self.feature_maps = feature_maps
        self.image_size = image_size
        f = feature_maps
        widths = [f, f * 2, f * 4, f * 8] if image_size == 64 else [f, f * 2, f * 4]
        blocks: list[nn.Module] = [nn.Conv2d(3, widths[0], 4, 2, 1, bias=False),
                                   nn.LeakyReLU(0.2, inplace=True)]
        for w_in, w_out in zip(widths, widths[1:]):
            blocks += [nn.Conv2d(w_in, w_out, 4, 2, 1, bias=False),
                       nn.BatchNorm2d(w_out), nn.LeakyReLU(0.2, inplace=True)]
        blocks += [nn.Conv2d(widths[-1], 1, 4, 1, 0, bias=False), nn.Sigmoid()]
        self.net = nn.Sequential(*blocks)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x).view(-1)


def init_weights(net: nn.Module, mean: float = 0.0, std: float = 0.02,
                 seed: int = 0) -> nn.Module:
    """DCGAN init: conv weights ~ N(mean, std^2); batchnorm scale ~ N(1, std^2)."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for m in net.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
                m.weight.normal_(mean, std, generator=gen)
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, nn.BatchNorm2d):
                m.weight.normal_(1.0, std, generator=gen)
                m.bias.zero_()
    return net


# ---------------------------------------------------------------------------
# Loss primitives
# ---------------------------------------------------------------------------

def _as_prob_tensor(probs) -> torch.Tensor:
    t = probs if torch.is_tensor(probs) else torch.as_tensor(probs, dtype=torch.float64)
    if t.numel() == 0:
        raise InvalidInputError("probability list must be non-empty")
    return torch.clamp(t, EPS, 1.0 - EPS)


def d_loss(real_probs, fake_probs):
    """(L_D_real, L_D_fake, L_D): -mean log p_real, -mean log(1-p_fake), sum."""
    pr = _as_prob_tensor(real_probs)
    pf = _as_prob_tensor(fake_probs)
    l_real = -torch.log(pr).mean()
    l_fake = -torch.log1p(-pf).mean()
    total = l_real + l_fake
    if torch.is_tensor(real_probs) or torch.is_tensor(fake_probs):
        return l_real, l_fake, total
    return float(l_real), float(l_fake), float(total)


def g_loss(fake_probs):
    """Non-saturating generator loss: -mean log p."""
    p = _as_prob_tensor(fake_probs)
    loss = -torch.log(p).mean()
    return loss if torch.is_tensor(fake_probs) else float(loss)


def compute_reward(similarity_scores, weight: float) -> float:
    """weight * mean(similarity scores); scores in [0, 1]."""
    if weight < 0:
        raise InvalidInputError("reward weight must be >= 0")
    values = [s.value if hasattr(s, "value") else float(s) for s in similarity_scores]
    if not values:
        raise InvalidInputError("similarity score list must be non-empty")
    return weight * float(np.mean(values))


def modified_d_loss(l_d, reward: float):
    """Exact subtraction; the reward is a constant w.r.t. all parameters."""
    if reward < 0:
        raise InvalidInputError("reward must be >= 0")
    return l_d - reward


def clip_gradients(grads, clip_value: float):
    """Clip every gradient component into [-clip_value, +clip_value]."""
    if clip_value <= 0:
        raise InvalidInputError("clip_value must be positive")
    if torch.is_tensor(grads):
        return torch.clamp(grads, -clip_value, clip_value)
    if isinstance(grads, np.ndarray):
        return np.clip(grads, -clip_value, clip_value)
    return [clip_gradients(g, clip_value) for g in grads]


# ---------------------------------------------------------------------------
# Reward trace
# ---------------------------------------------------------------------------

@dataclass
class TraceRow:
    iter: int
    epoch: int
    l_d: float
    reward: float
    l_d_mod: float
    l_g: float
    mean_sim: float


@dataclass
class RewardTrace:
    rows: list[TraceRow] = field(default_factory=list)

    def append(self, row: TraceRow) -> None:
        self.rows.append(row)

    def epoch_means(self) -> dict[int, dict[str, float]]:
        by_epoch: dict[int, list[TraceRow]] = {}
        for r in self.rows:
            by_epoch.setdefault(r.epoch, []).append(r)
        return {e: {k: float(np.mean([getattr(r, k) for r in rs]))
                    for k in ("l_d", "reward", "l_d_mod", "l_g", "mean_sim")}
                for e, rs in sorted(by_epoch.items())}

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TRACE_COLUMNS)
            for r in self.rows:
                w.writerow([r.iter, r.epoch, r.l_d, r.reward, r.l_d_mod,
                            r.l_g, r.mean_sim])
        return path

    @classmethod
    def from_csv(cls, path: str | Path) -> "RewardTrace":
        trace = cls()
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != TRACE_COLUMNS:
                raise InvalidInputError(f"unexpected trace header in {path}")
            for rec in reader:
                trace.append(TraceRow(iter=int(rec["iter"]), epoch=int(rec["epoch"]),
                                      l_d=float(rec["l_d"]), reward=float(rec["reward"]),
                                      l_d_mod=float(rec["l_d_mod"]), l_g=float(rec["l_g"]),
                                      mean_sim=float(rec["mean_sim"])))
        return trace


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class GanConfig:
    epochs: int = 30
    batch_size: int = 128
    lr: float = 2e-4
    beta1: float = 0.5
    clip_value: float = 0.1
    reward_weight: float = 0.3
    real_label: float = 0.9  # one-sided label smoothing
    latent_dim: int = 100
    feature_maps: int = 64
    image_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.reward_weight < 0:
            raise ConfigurationError("reward_weight must be >= 0")
        if self.clip_value <= 0:
            raise ConfigurationError("clip_value must be positive")


def desk_config(**overrides) -> GanConfig:
    """CPU-sized profile: 32x32 images, small nets, small batches."""
    base = dict(image_size=32, feature_maps=32, batch_size=64, epochs=30)
    base.update(overrides)
    return GanConfig(**base)


def _to_gan_batch(images: Sequence[np.ndarray]) -> torch.Tensor:
    """(N, H, W, 3) in [0,1] -> (N, 3, H, W) in [-1, 1]."""
    arr = np.stack([np.asarray(im, dtype=np.float32) for im in images])
    t = torch.from_numpy(arr).permute(0, 3, 1, 2)
    return t * 2.0 - 1.0


def train(gen: Generator, disc: Discriminator, scorer: LayeredExtractor | None,
          data: Sequence, cfg: GanConfig, checkpoint_dir: str | Path | None = None,
          checkpoint_every: int = 0) -> tuple[list[Path], RewardTrace]:
    """Run the reward-guided adversarial loop.

    Per iteration: discriminator gradients accumulate over the smoothed real
    batch and the fake batch, the similarity reward is computed by pairing
    fake image i with real image i, the modified loss (L_D - reward) is
    recorded and the clipped gradients are applied; then one generator step
    on the non-saturating loss. With reward_weight == 0 the scorer is never
    consulted and the loop reduces exactly to the baseline.
    """
    if len(data) == 0:
        raise ConfigurationError("training data must be non-empty")
    pixels = [p.pixels if hasattr(p, "pixels") else p for p in data]
    res = pixels[0].shape[:2]
    if res != (cfg.image_size, cfg.image_size):
        raise ConfigurationError(
            f"data resolution {res} does not match configured {cfg.image_size}")
    use_reward = cfg.reward_weight > 0
    if use_reward:
        if scorer is None:
            raise ConfigurationError("reward_weight > 0 requires a trained scorer")
        scorer.check_resolution(res)
        scorer_digest = scorer.parameter_digest()

    real_all = _to_gan_batch(pixels)
    rng = np.random.default_rng(cfg.seed)
    latent_rng = torch.Generator().manual_seed(cfg.seed)
    opt_d = torch.optim.Adam(disc.parameters(), lr=cfg.lr, betas=(cfg.beta1, 0.999))
    opt_g = torch.optim.Adam(gen.parameters(), lr=cfg.lr, betas=(cfg.beta1, 0.999))
    bce = nn.BCELoss()

    trace = RewardTrace()
    checkpoints: list[Path] = []
    gen.train()
    disc.train()
    it = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(real_all))
        for start in range(0, len(real_all), cfg.batch_size):
            idx = torch.from_numpy(order[start:start + cfg.batch_size].copy())
            real = real_all[idx]
            n = real.shape[0]
            z = torch.randn(n, cfg.latent_dim, 1, 1, generator=latent_rng)
            fake = gen(z)

            opt_d.zero_grad()
            out_real = disc(real)
            loss_real = bce(out_real, torch.full((n,), cfg.real_label))
            loss_real.backward()
            out_fake = disc(fake.detach())
            loss_fake = bce(out_fake, torch.zeros(n))
            loss_fake.backward()
            l_d = loss_real.item() + loss_fake.item()

            if use_reward:
                sims = score_batch(scorer, (fake.detach() + 1) / 2, (real + 1) / 2)
                mean_sim = float(np.mean(sims))
                reward = compute_reward(sims.tolist(), cfg.reward_weight)
            else:
                mean_sim = 0.0
                reward = 0.0
            l_d_mod = modified_d_loss(l_d, reward)

            nn.utils.clip_grad_value_(disc.parameters(), cfg.clip_value)
            opt_d.step()

            opt_g.zero_grad()
            out = disc(fake)
            loss_g = bce(out, torch.ones(n))
            loss_g.backward()
            opt_g.step()

            trace.append(TraceRow(iter=it, epoch=epoch, l_d=l_d, reward=reward,
                                  l_d_mod=l_d_mod, l_g=loss_g.item(),
                                  mean_sim=mean_sim))
            it += 1
        if checkpoint_dir and checkpoint_every and (epoch + 1) % checkpoint_every == 0:
            checkpoints.append(save_gan_checkpoint(
                gen, disc, cfg, Path(checkpoint_dir) / f"gan_epoch{epoch + 1:04d}.pt"))
    gen.eval()
    disc.eval()
    if use_reward and scorer.parameter_digest() != scorer_digest:
        raise ConfigurationError("scorer parameters changed during GAN training")
    if checkpoint_dir:
        checkpoints.append(save_gan_checkpoint(
            gen, disc, cfg, Path(checkpoint_dir) / "gan_final.pt"))
    return checkpoints, trace


def sample(gen: Generator, n: int, seed: int = 0) -> np.ndarray:
    """n generated images as (n, H, W, 3) float arrays in [0, 1]."""
    if n < 1:
        raise InvalidInputError("n must be >= 1")
    g = torch.Generator().manual_seed(seed)
    z = torch.randn(n, gen.latent_dim, 1, 1, generator=g)
    gen.eval()
    with torch.no_grad():
        out = gen(z)
    return ((out + 1) / 2).clamp(0, 1).permute(0, 2, 3, 1).numpy()


def save_gan_checkpoint(gen: Generator, disc: Discriminator, cfg: GanConfig,
                        path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"generator": gen.state_dict(), "discriminator": disc.state_dict(),
                "config": asdict(cfg)}, path)
    return path


def load_gan_checkpoint(path: str | Path) -> tuple[Generator, Discriminator, GanConfig]:
    blob = torch.load(path, map_location="cpu", weights_only=True)
    cfg = GanConfig(**blob["config"])
    gen = Generator(latent_dim=cfg.latent_dim, feature_maps=cfg.feature_maps,
                    image_size=cfg.image_size)
    disc = Discriminator(feature_maps=cfg.feature_maps, image_size=cfg.image_size)
    gen.load_state_dict(blob["generator"])
    disc.load_state_dict(blob["discriminator"])
    gen.eval()
    disc.eval()
    return gen, disc, cfg
