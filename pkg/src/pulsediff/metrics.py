"""SSIM, Frechet distance and the FID / FVD wrappers.

FID and FVD need a feature embedder. The reference Inception / I3D networks
are not bundled; the default embedders are small frozen random conv nets,
and scores are only comparable between runs that report the same
``embedder_id``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

SHRINKAGE = 1e-6
PSD_TOL = 1e-8


class NotPSDError(ValueError):
    pass


def _gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-0.5 * (x / sigma) ** 2)
    return g / g.sum()


def _filter(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    out = ndimage.correlate1d(img, kernel, axis=0, mode="reflect")
    return ndimage.correlate1d(out, kernel, axis=1, mode="reflect")


def ssim_components(a, b, window: int = 11, C1: float = 1e-4, C2: float = 9e-4, sigma: float = 1.5):
    """Luminance and contrast-structure maps (cropped to fully valid windows)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    a, b = np.squeeze(a), np.squeeze(b)
    if a.ndim != 2:
        raise ValueError("ssim expects single-channel 2-D images")
    if window % 2 == 0 or window > min(a.shape):
        raise ValueError(f"window must be odd and no larger than the image, got {window}")
    k = _gaussian_kernel(window, sigma)
    mu_a, mu_b = _filter(a, k), _filter(b, k)
    s_aa = _filter(a * a, k) - mu_a * mu_a
    s_bb = _filter(b * b, k) - mu_b * mu_b
    s_ab = _filter(a * b, k) - mu_a * mu_b
    lum = (2 * mu_a * mu_b + C1) / (mu_a * mu_a + mu_b * mu_b + C1)
    cs = (2 * s_ab + C2) / (s_aa + s_bb + C2)
    pad = (window - 1) // 2
    crop = (slice(pad, a.shape[0] - pad), slice(pad, a.shape[1] - pad))
    return lum[crop], cs[crop]


def ssim(a, b, window: int = 11, C1: float = 1e-4, C2: float = 9e-4, sigma: float = 1.5) -> float:
    """Mean Gaussian-windowed SSIM for images with values in [0, 1]."""
    lum, cs = ssim_components(a, b, window, C1, C2, sigma)
    return float(np.mean(lum * cs))


def to_unit_range(x):
    return (np.asarray(x, dtype=np.float64) + 1.0) / 2.0


@dataclass
class GaussianStats:
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        self.mu = np.atleast_1d(np.asarray(self.mu, dtype=np.float64))
        s = np.atleast_2d(np.asarray(self.sigma, dtype=np.float64))
        if s.shape != (self.mu.size, self.mu.size):
            raise ValueError(f"covariance shape {s.shape} does not match mean dim {self.mu.size}")
        self.sigma = 0.5 * (s + s.T)

    @classmethod
    def from_features(cls, feats: np.ndarray, shrinkage: float = SHRINKAGE) -> "GaussianStats":
        feats = np.asarray(feats, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] < 1:
            raise ValueError("features must be a non-empty (N, d) array")
        n, d = feats.shape
        if n < d + 1:
            warnings.warn(f"{n} samples for {d}-dim features: covariance is rank deficient, "
                          f"relying on shrinkage", RuntimeWarning, stacklevel=2)
        mu = feats.mean(axis=0)
        sigma = np.cov(feats, rowvar=False).reshape(d, d) if n > 1 else np.zeros((d, d))
        return cls(mu, sigma + shrinkage * np.eye(d))


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (m + m.T))
    if w.min() < -PSD_TOL:
        raise NotPSDError(f"matrix has eigenvalue {w.min():.3e} below -{PSD_TOL}")
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(p: GaussianStats, q: GaussianStats) -> float:
    """||mu_p - mu_q||^2 + Tr(S_p + S_q - 2 (S_p S_q)^(1/2)).

    The trace of the product root is taken as Tr((S_p^(1/2) S_q S_p^(1/2))^(1/2)),
    whose argument is symmetric PSD and can go through eigh.
    """
    if p.mu.shape != q.mu.shape:
        raise ValueError(f"dimension mismatch {p.mu.shape} vs {q.mu.shape}")
    root_p = _psd_sqrt(p.sigma)
    inner = root_p @ q.sigma @ root_p
    w = np.linalg.eigvalsh(0.5 * (inner + inner.T))
    if w.min() < -PSD_TOL:
        raise NotPSDError(f"covariance product has eigenvalue {w.min():.3e}")
    tr_root = float(np.sum(np.sqrt(np.clip(w, 0.0, None))))
    diff = p.mu - q.mu
    d = float(diff @ diff + np.trace(p.sigma) + np.trace(q.sigma) - 2.0 * tr_root)
    return max(d, 0.0)


class FrameEmbedder:
    """Frozen random two-layer conv net, globally pooled."""

    embedder_id = "frame:randconv-v1"

    def __init__(self, dim: int = 32, seed: int = 7):
        gen = torch.Generator().manual_seed(seed)
        self.w1 = torch.randn(16, 1, 3, 3, generator=gen, dtype=torch.float64) / 3.0
        self.w2 = torch.randn(dim, 16, 3, 3, generator=gen, dtype=torch.float64) / 12.0
        self.b1 = 0.1 * torch.randn(16, generator=gen, dtype=torch.float64)
        self.b2 = 0.1 * torch.randn(dim, generator=gen, dtype=torch.float64)
        self.dim = dim

    @torch.no_grad()
    def __call__(self, frames) -> np.ndarray:
        x = torch.as_tensor(np.asarray(frames), dtype=torch.float64)
        if x.ndim == 3:
            x = x.unsqueeze(1)
        h = F.relu(F.conv2d(x, self.w1, self.b1, stride=2, padding=1))
        h = torch.tanh(F.conv2d(h, self.w2, self.b2, stride=2, padding=1))
        return h.mean(dim=(2, 3)).numpy()


class VideoEmbedder:
    """Per-frame features summarised by their temporal mean and mean absolute change."""

    def __init__(self, frame_embedder: Optional[FrameEmbedder] = None):
        self.frame = frame_embedder or FrameEmbedder()
        self.embedder_id = f"video:meandiff-v1+{self.frame.embedder_id}"

    def __call__(self, clips) -> np.ndarray:
        clips = np.asarray(clips)
        n, f = clips.shape[:2]
        feats = self.frame(clips.reshape(n * f, *clips.shape[2:])).reshape(n, f, -1)
        mean = feats.mean(axis=1)
        if f > 1:
            change = np.abs(np.diff(feats, axis=1)).mean(axis=1)
        else:
            change = np.zeros_like(mean)
        return np.concatenate([mean, change], axis=1)


def fid(real, fake, embedder=None) -> float:
    embedder = embedder or FrameEmbedder()
    return frechet_distance(GaussianStats.from_features(embedder(real)),
                            GaussianStats.from_features(embedder(fake)))


def fvd(real, fake, video_embedder=None) -> float:
    video_embedder = video_embedder or VideoEmbedder()
    return frechet_distance(GaussianStats.from_features(video_embedder(real)),
                            GaussianStats.from_features(video_embedder(fake)))


def clip_ssim(real_clip, fake_clip, **kw) -> float:
    """Mean SSIM over paired frames of two (F, 1, H, W) clips in [-1, 1]."""
    real_clip, fake_clip = np.asarray(real_clip), np.asarray(fake_clip)
    if real_clip.shape != fake_clip.shape:
        raise ValueError(f"clip shapes differ: {real_clip.shape} vs {fake_clip.shape}")
    return float(np.mean([ssim(to_unit_range(a), to_unit_range(b), **kw) for a, b in zip(real_clip, fake_clip)]))


def metrics_report(real_clips: Sequence[np.ndarray], fake_clips: Sequence[np.ndarray],
                   pairs: Sequence[tuple] = (), seed: int = 0,
                   video_embedder: Optional[VideoEmbedder] = None) -> dict:
    """Report dict; ``pairs`` lists (case_id, real_clip, fake_clip) for SSIM."""
    video_embedder = video_embedder or VideoEmbedder()
    real_clips = np.stack([np.asarray(c) for c in real_clips])
    fake_clips = np.stack([np.asarray(c) for c in fake_clips])
    real_frames = real_clips.reshape(-1, *real_clips.shape[2:])
    fake_frames = fake_clips.reshape(-1, *fake_clips.shape[2:])
    per_case = [{"case_id": cid, "ssim": clip_ssim(r, f)} for cid, r, f in pairs]
    return {
        "fid": fid(real_frames, fake_frames, video_embedder.frame),
        "fvd": fvd(real_clips, fake_clips, video_embedder),
        "ssim_mean": float(np.mean([c["ssim"] for c in per_case])) if per_case else None,
        "ssim_per_case": per_case,
        "n_real": int(real_clips.shape[0]),
        "n_fake": int(fake_clips.shape[0]),
        "embedder_id": video_embedder.embedder_id,
        "seed": int(seed),
    }
