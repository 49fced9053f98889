"""Generative evaluation battery: Fréchet distance over embedding Gaussians,
kernel-MMD distance, perceptual path length, k-NN manifold precision/recall,
PCA + t-SNE export and Grad-CAM saliency.

All estimators take a pluggable feature extractor; at desk scale this is the
trained similarity encoder, pinned by parameter digest so that two reports
are only comparable under the same extractor, sample counts and seed.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy import linalg
from sklearn.decomposition import PCA
from sklearn.manifold import TSNE

from .errors import InvalidInputError, NumericDomainError
from .snn import LayeredExtractor, to_tensor

PSD_TOL = 1e-8


def embed_many(extractor, images: Sequence[np.ndarray],
               batch_size: int = 64) -> np.ndarray:
    """Embed a stack of images into an (n, d) float64 feature matrix.

    ``extractor`` is a LayeredExtractor or any callable image -> vector.
    """
    if isinstance(extractor, LayeredExtractor):
        feats = []
        with torch.no_grad():
            for start in range(0, len(images), batch_size):
                batch = torch.cat([to_tensor(im) for im in images[start:start + batch_size]])
                feats.append(extractor.embed(batch).numpy())
        return np.concatenate(feats).astype(np.float64)
    return np.stack([np.asarray(extractor(im), dtype=np.float64).ravel()
                     for im in images])


# ---------------------------------------------------------------------------
# Fréchet distance
# ---------------------------------------------------------------------------

@dataclass
class FeatureStats:
    mu: np.ndarray
    sigma: np.ndarray
    n: int

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        if self.n < 2:
            raise InvalidInputError("feature stats need n >= 2 samples")
        if self.sigma.shape != (self.mu.size, self.mu.size):
            raise InvalidInputError("sigma shape does not match mu")
        if not np.allclose(self.sigma, self.sigma.T, atol=1e-10):
            raise InvalidInputError("sigma must be symmetric")
        scale = max(1.0, float(np.abs(self.sigma).max()))
        if np.linalg.eigvalsh(self.sigma).min() < -PSD_TOL * scale:
            raise InvalidInputError("sigma must be positive semidefinite")


def feature_stats(images: Sequence[np.ndarray], extractor) -> FeatureStats:
    """Gaussian sufficient statistics of the embedded images; covariance uses
    the unbiased (n-1) normalization."""
    if len(images) < 2:
        raise InvalidInputError("need at least 2 images")
    feats = embed_many(extractor, images)
    mu = feats.mean(axis=0)
    sigma = np.cov(feats, rowvar=False, ddof=1)
    sigma = np.atleast_2d(sigma)
    return FeatureStats(mu=mu, sigma=(sigma + sigma.T) / 2, n=len(images))


def matrix_sqrt(psd: np.ndarray) -> np.ndarray:
    """Principal square root of a symmetric PSD matrix (Schur method)."""
    a = np.asarray(psd, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise InvalidInputError("matrix_sqrt expects a square matrix")
    scale = max(1.0, float(np.abs(a).max()))
    if not np.allclose(a, a.T, atol=1e-8 * scale):
        raise NumericDomainError("matrix is not symmetric")
    a = (a + a.T) / 2
    if np.linalg.eigvalsh(a).min() < -PSD_TOL * scale:
        raise NumericDomainError("matrix is indefinite beyond tolerance")
    s = linalg.sqrtm(a)
    if np.iscomplexobj(s):
        s = s.real
    return (s + s.T) / 2


def fid(a: FeatureStats, b: FeatureStats) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))."""
    if a.mu.size != b.mu.size:
        raise InvalidInputError("feature dimensions differ")
    diff = a.mu - b.mu
    sa_half = matrix_sqrt(a.sigma)
    inner = sa_half @ b.sigma @ sa_half
    covmean = matrix_sqrt((inner + inner.T) / 2)
    value = float(diff @ diff + np.trace(a.sigma) + np.trace(b.sigma)
                  - 2 * np.trace(covmean))
    return max(value, 0.0)


# ---------------------------------------------------------------------------
# Kernel distance
# ---------------------------------------------------------------------------

def _poly_kernel(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    d = x.shape[1]
    return (x @ y.T / d + 1.0) ** 3


def _kid_block(x: np.ndarray, y: np.ndarray) -> float:
    n, m = len(x), len(y)
    kxx = _poly_kernel(x, x)
    kyy = _poly_kernel(y, y)
    kxy = _poly_kernel(x, y)
    term_x = (kxx.sum() - np.trace(kxx)) / (n * (n - 1))
    term_y = (kyy.sum() - np.trace(kyy)) / (m * (m - 1))
    return float(term_x + term_y - 2 * kxy.mean())


def kid(feats_x: np.ndarray, feats_y: np.ndarray,
        block_size: int | None = None, seed: int = 0) -> float:
    """Unbiased squared MMD with the cubic polynomial kernel
    (x.y/d + 1)^3; may be slightly negative by construction.

    With ``block_size`` set, the estimate is averaged over disjoint
    random blocks (the usual subset-averaging variant).
    """
    x = np.asarray(feats_x, dtype=np.float64)
    y = np.asarray(feats_y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[1]:
        raise InvalidInputError("feature matrices must be 2-D with equal dim")
    if len(x) < 2 or len(y) < 2:
        raise InvalidInputError("need at least 2 samples on each side")
    if block_size is None:
        return _kid_block(x, y)
    if block_size < 2:
        raise InvalidInputError("block_size must be >= 2")
    rng = np.random.default_rng(seed)
    px, py = rng.permutation(len(x)), rng.permutation(len(y))
    n_blocks = max(1, min(len(x), len(y)) // block_size)
    vals = [_kid_block(x[px[i * block_size:(i + 1) * block_size]],
                       y[py[i * block_size:(i + 1) * block_size]])
            for i in range(n_blocks)]
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# Perceptual path length
# ---------------------------------------------------------------------------

def _generate_images(gen, z: np.ndarray) -> Sequence[np.ndarray]:
    if isinstance(gen, torch.nn.Module):
        with torch.no_grad():
            t = torch.from_numpy(z.astype(np.float32)).view(len(z), -1, 1, 1)
            out = gen(t)
        return ((out + 1) / 2).clamp(0, 1).permute(0, 2, 3, 1).numpy()
    return np.asarray(gen(z))


def ppl(gen, extractor, n_paths: int = 128, steps: int = 10, seed: int = 0,
        normalize: bool = True, latent_dim: int | None = None) -> float:
    """Mean, over random latent pairs, of the summed squared embedding
    distance between consecutive points on the linear interpolation path."""
    if steps < 1 or n_paths < 1:
        raise InvalidInputError("steps and n_paths must be >= 1")
    if latent_dim is None:
        latent_dim = getattr(gen, "latent_dim", None)
        if latent_dim is None:
            raise InvalidInputError("latent_dim required for non-module generators")
    rng = np.random.default_rng(seed)
    z1 = rng.standard_normal((n_paths, latent_dim))
    z2 = rng.standard_normal((n_paths, latent_dim))
    ts = np.arange(steps + 1) / steps
    z_all = (z1[:, None, :] * (1 - ts)[None, :, None]
             + z2[:, None, :] * ts[None, :, None]).reshape(-1, latent_dim)
    images = _generate_images(gen, z_all)
    feats = embed_many(extractor, list(images))
    if normalize:
        norms = np.linalg.norm(feats, axis=1, keepdims=True)
        feats = np.divide(feats, norms, out=np.zeros_like(feats), where=norms > 0)
    feats = feats.reshape(n_paths, steps + 1, -1)
    seg = np.diff(feats, axis=1)
    return float((seg ** 2).sum(axis=(1, 2)).mean())


# ---------------------------------------------------------------------------
# k-NN manifold precision / recall
# ---------------------------------------------------------------------------

def _knn_radii(feats: np.ndarray, k: int) -> np.ndarray:
    d = np.linalg.norm(feats[:, None, :] - feats[None, :, :], axis=2)
    np.fill_diagonal(d, np.inf)
    return np.sort(d, axis=1)[:, k - 1]


def gen_precision_recall(real_feats: np.ndarray, fake_feats: np.ndarray,
                         k: int = 3) -> tuple[float, float, float]:
    """k-NN manifold estimate: a fake point counts as precise when it falls
    inside some real point's k-NN ball, and symmetrically for recall."""
    real = np.asarray(real_feats, dtype=np.float64)
    fake = np.asarray(fake_feats, dtype=np.float64)
    if k < 1 or k >= len(real) or k >= len(fake):
        raise InvalidInputError("need k < len(set) on both sides")
    radii_real = _knn_radii(real, k)
    radii_fake = _knn_radii(fake, k)
    cross = np.linalg.norm(fake[:, None, :] - real[None, :, :], axis=2)
    precision = float((cross <= radii_real[None, :]).any(axis=1).mean())
    recall = float((cross.T <= radii_fake[None, :]).any(axis=1).mean())
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return precision, recall, f1


# ---------------------------------------------------------------------------
# t-SNE export
# ---------------------------------------------------------------------------

def tsne_export(real_feats: np.ndarray, fake_feats: np.ndarray,
                seed: int = 0) -> list[tuple[float, float, str]]:
    """PCA to at most 50 dims, then 2-D t-SNE; rows tagged real/generated."""
    real = np.asarray(real_feats, dtype=np.float64)
    fake = np.asarray(fake_feats, dtype=np.float64)
    combined = np.concatenate([real, fake])
    n, d = combined.shape
    if n < 10:
        raise InvalidInputError("need at least 10 samples combined")
    n_comp = min(50, d, n)
    reduced = PCA(n_components=n_comp, random_state=seed).fit_transform(combined)
    perplexity = min(30.0, (n - 1) / 3)
    coords = TSNE(n_components=2, random_state=seed, perplexity=perplexity,
                  init="pca").fit_transform(reduced)
    tags = ["real"] * len(real) + ["generated"] * len(fake)
    return [(float(x), float(y), t) for (x, y), t in zip(coords, tags)]


def write_tsne_csv(rows: list[tuple[float, float, str]], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "source"])
        w.writerows(rows)
    return path


# ---------------------------------------------------------------------------
# Grad-CAM
# ---------------------------------------------------------------------------

def grad_cam(extractor, image: np.ndarray, layer_index: int) -> np.ndarray:
    """Saliency over the chosen conv layer for the embedding magnitude.

    Channel weights are the spatially averaged gradients of the squared
    embedding norm; the weighted activation map is rectified and
    max-normalized into [0, 1].
    """
    layers = extractor.layers
    if not 0 <= layer_index < len(layers):
        raise InvalidInputError(f"layer index {layer_index} out of range")
    layer = layers[layer_index]
    if not isinstance(layer, (torch.nn.Conv2d, torch.nn.ConvTranspose2d)):
        raise InvalidInputError("grad_cam requires a convolutional layer")

    captured: dict[str, torch.Tensor] = {}

    def hook(_module, _inp, out):
        captured["act"] = out
        out.retain_grad()

    handle = layer.register_forward_hook(hook)
    try:
        x = to_tensor(image).requires_grad_(True)
        emb = extractor.embed(x)
        target = (emb ** 2).sum()
        target.backward()
    finally:
        handle.remove()
    if "act" not in captured:
        raise InvalidInputError(
            f"layer {layer_index} is not on the embedding path")
    act = captured["act"].detach()[0]
    grad = captured["act"].grad[0]
    weights = grad.mean(dim=(1, 2))
    cam = F.relu((weights[:, None, None] * act).sum(dim=0))
    cam = cam.numpy()
    peak = cam.max()
    if peak > 0:
        cam = cam / peak
    return cam


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------

REPORT_KEYS = ("fid", "kid", "ppl", "precision", "recall", "f1",
               "n_real", "n_fake", "extractor_digest", "seed")


@dataclass
class MetricReport:
    fid: float
    kid: float
    ppl: float
    precision: float
    recall: float
    f1: float
    n_real: int
    n_fake: int
    extractor_digest: str
    seed: int

    def __post_init__(self):
        for key in ("fid", "kid", "ppl", "precision", "recall", "f1"):
            if not np.isfinite(getattr(self, key)):
                raise InvalidInputError(f"{key} must be finite")
        for key in ("precision", "recall", "f1"):
            if not 0.0 <= getattr(self, key) <= 1.0:
                raise InvalidInputError(f"{key} must lie in [0, 1]")

    def to_json(self, path: str | Path | None = None) -> str:
        text = json.dumps({k: getattr(self, k) for k in REPORT_KEYS}, indent=2)
        if path is not None:
            Path(path).parent.mkdir(parents=True, exist_ok=True)
            Path(path).write_text(text)
        return text

    @classmethod
    def from_json(cls, text_or_path: str | Path) -> "MetricReport":
        p = Path(text_or_path)
        text = p.read_text() if p.is_file() else str(text_or_path)
        return cls(**json.loads(text))

    def comparable_with(self, other: "MetricReport") -> bool:
        """Two reports are comparable only under the pinned protocol."""
        return (self.extractor_digest == other.extractor_digest
                and self.n_real == other.n_real and self.n_fake == other.n_fake
                and self.seed == other.seed)


def evaluate_generator(gen, real_images: Sequence[np.ndarray],
                       extractor: LayeredExtractor, n_fake: int,
                       seed: int = 0, pr_k: int = 3, ppl_paths: int = 128,
                       ppl_steps: int = 10) -> MetricReport:
    """Full battery against a real image set, using the pinned extractor."""
    from .gan import sample  # local import to avoid cycle

    fake_images = list(sample(gen, n_fake, seed=seed))
    real_feats = embed_many(extractor, real_images)
    fake_feats = embed_many(extractor, fake_images)
    stats_r = FeatureStats(mu=real_feats.mean(0),
                           sigma=_sym_cov(real_feats), n=len(real_feats))
    stats_f = FeatureStats(mu=fake_feats.mean(0),
                           sigma=_sym_cov(fake_feats), n=len(fake_feats))
    k = min(pr_k, len(real_feats) - 1, len(fake_feats) - 1)
    p, r, f1 = gen_precision_recall(real_feats, fake_feats, k=k)
    return MetricReport(
        fid=fid(stats_r, stats_f),
        kid=kid(real_feats, fake_feats),
        ppl=ppl(gen, extractor, n_paths=ppl_paths, steps=ppl_steps, seed=seed),
        precision=p, recall=r, f1=f1,
        n_real=len(real_images), n_fake=n_fake,
        extractor_digest=extractor.parameter_digest(), seed=seed)


def _sym_cov(feats: np.ndarray) -> np.ndarray:
    sigma = np.atleast_2d(np.cov(feats, rowvar=False, ddof=1))
    return (sigma + sigma.T) / 2
