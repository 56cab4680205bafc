"""Procedural apical-view cardiac phantom with exactly paired conditions.

Geometry lives in material (reference) coordinates X. Frame k observes the
deformed configuration x = X + D_k(X), where each chamber dilates about its
centre by a sinusoidal factor and the displacement decays smoothly outside
the chamber wall. Tissue intensity and speckle are attached to material
points, so they move with the tissue and the analytic flow
Phi_{k+1}(X) - Phi_k(X) explains the frame-to-frame change.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage

from ..global_conditions import VIEW_PROMPTS

LABEL_BG, LABEL_CHAMBER, LABEL_MYO, LABEL_VALVE = 0, 1, 2, 3
WALL = 0.35       # myocardium thickness, in units of the chamber's elliptical radius
DECAY = 0.6       # displacement decay length outside the wall, same units
EDGE = 0.06       # intensity transition half-width, same units


@dataclass
class PhantomParams:
    view: str = "A2C"
    period: float = 8.0
    radius_amplitude: float = 0.15
    valve_length: float = 0.2
    valve_sweep: float = 0.7
    valve_direction: tuple = (1.0, 0.0)
    speckle_grain: float = 1.0
    speckle_contrast: float = 0.35
    sector_angle: float = 80.0

    def __post_init__(self):
        if self.view not in VIEW_PROMPTS:
            raise ValueError(f"view must be one of {sorted(VIEW_PROMPTS)}")
        if self.period < 2:
            raise ValueError("cycle period must be >= 2 frames")
        d = np.asarray(self.valve_direction, dtype=np.float64)
        n = float(np.linalg.norm(d))
        if n == 0:
            raise ValueError("valve direction must be nonzero")
        self.valve_direction = tuple(float(v) for v in d / n)

    @property
    def chambers(self) -> int:
        return 1 if self.view == "A2C" else 2


@dataclass
class SampleRecord:
    frames: np.ndarray                          # (F, 1, H, W) float32 in [-1, 1]
    mask: Optional[np.ndarray] = None           # (F, 1, H, W) uint8 labels
    sketch: Optional[np.ndarray] = None         # (1, H, W) float32 {0, 1}
    mv_skeleton: Optional[np.ndarray] = None    # (F, 2, H, W) float32 {0, 1}
    flow: Optional[np.ndarray] = None           # (F-1, 2, H, W) float32 pixels/frame
    view: Optional[str] = None
    prompt: Optional[str] = None
    prior_frame: Optional[np.ndarray] = None    # (1, H, W) float32
    case_id: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def present(self) -> dict:
        return {"sketch": self.sketch is not None, "mask": self.mask is not None,
                "mv_skeleton": self.mv_skeleton is not None, "flow": self.flow is not None,
                "text": self.prompt is not None, "image_prior": self.prior_frame is not None}

    def equals(self, other: "SampleRecord") -> bool:
        for name in ("frames", "mask", "sketch", "mv_skeleton", "flow", "prior_frame"):
            a, b = getattr(self, name), getattr(other, name)
            if (a is None) != (b is None):
                return False
            if a is not None and (a.shape != b.shape or a.dtype != b.dtype or a.tobytes() != b.tobytes()):
                return False
        return self.view == other.view and self.prompt == other.prompt


def quantize16(x: np.ndarray) -> np.ndarray:
    return np.round((np.clip(x, -1.0, 1.0) + 1.0) * 0.5 * 65535.0).astype(np.uint16)


def dequantize16(q: np.ndarray) -> np.ndarray:
    return (q.astype(np.float32) / np.float32(65535.0)) * np.float32(2.0) - np.float32(1.0)


def extract_sketch(frame: np.ndarray, percentile: float = 90.0, smooth: float = 1.0) -> np.ndarray:
    """Binary edge map: Sobel gradient magnitude above its percentile.

    A light Gaussian pre-blur (``smooth`` pixels) suppresses speckle texture.
    """
    img = np.asarray(frame, dtype=np.float64)
    squeeze = img.ndim == 3
    if squeeze:
        img = img[0]
    if smooth > 0:
        img = ndimage.gaussian_filter(img, smooth, mode="nearest")
    mag = np.hypot(ndimage.sobel(img, axis=0, mode="nearest"), ndimage.sobel(img, axis=1, mode="nearest"))
    thr = max(float(np.percentile(mag, percentile)), 1e-9)
    out = (mag >= thr).astype(np.float32)
    return out[None] if squeeze else out


def _smoothstep(x: np.ndarray) -> np.ndarray:
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


def _segment_distance(px, py, a, b):
    d = b - a
    ll = float(d @ d)
    s = np.clip(((px - a[0]) * d[0] + (py - a[1]) * d[1]) / max(ll, 1e-12), 0.0, 1.0)
    return np.hypot(px - (a[0] + s * d[0]), py - (a[1] + s * d[1])), s


class _Geometry:
    def __init__(self, params: PhantomParams, H: int, W: int, rng: np.random.Generator):
        self.p, self.H, self.W = params, H, W
        if params.chambers == 1:
            centers = [(0.5 * W, 0.50 * H)]
            axes = [(0.17 * W, 0.27 * H)]
        else:
            centers = [(0.38 * W, 0.50 * H), (0.64 * W, 0.52 * H)]
            axes = [(0.12 * W, 0.25 * H), (0.11 * W, 0.22 * H)]
        jit = rng.uniform(-1, 1, size=(len(centers), 4))
        self.centers = np.array([(cx + 0.04 * W * j[0], cy + 0.05 * H * j[1]) for (cx, cy), j in zip(centers, jit)])
        self.axes = np.array([(ax * (1 + 0.12 * j[2]), ay * (1 + 0.10 * j[3])) for (ax, ay), j in zip(axes, jit)])
        self.phase = rng.uniform(0, 2 * math.pi)
        self.apex = np.array([0.5 * W, 0.02 * H])
        # valve hinge sits on the basal wall of the first chamber
        cx, cy = self.centers[0]
        ax, ay = self.axes[0]
        ang = math.radians(60.0)
        self.hinge = np.array([cx + ax * math.cos(ang), cy + ay * math.sin(ang)])
        rest = self.centers[0] - self.hinge
        self.rest_dir = rest / np.linalg.norm(rest)
        perp = np.array([-self.rest_dir[1], self.rest_dir[0]])
        self.sweep_sign = 1.0 if perp @ np.asarray(params.valve_direction) >= 0 else -1.0

    def scale(self, j: int, k: float) -> float:
        return 1.0 + self.p.radius_amplitude * math.sin(2 * math.pi * k / self.p.period + self.phase + 0.3 * j)

    def rho(self, j: int, X: np.ndarray) -> np.ndarray:
        c, a = self.centers[j], self.axes[j]
        return np.hypot((X[..., 0] - c[0]) / a[0], (X[..., 1] - c[1]) / a[1])

    def displacement(self, X: np.ndarray, k: float) -> np.ndarray:
        D = np.zeros_like(X)
        for j in range(len(self.centers)):
            r = self.rho(j, X)
            h = np.exp(-np.maximum(r - 1.0, 0.0) ** 2 / (2 * DECAY ** 2))
            D += (self.scale(j, k) - 1.0) * h[..., None] * (X - self.centers[j])
        return D

    def forward_map(self, X: np.ndarray, k: float) -> np.ndarray:
        return X + self.displacement(X, k)

    def material(self, x: np.ndarray, k: float, iters: int = 40) -> np.ndarray:
        X = x.copy()
        for _ in range(iters):
            X = x - self.displacement(X, k)
        return X

    def valve(self, k: float):
        hinge = self.forward_map(self.hinge[None], k)[0]
        alpha = self.p.valve_sweep * 0.5 * (1 - math.cos(2 * math.pi * k / self.p.period + self.phase))
        a = self.sweep_sign * alpha
        ca, sa = math.cos(a), math.sin(a)
        d = np.array([ca * self.rest_dir[0] - sa * self.rest_dir[1], sa * self.rest_dir[0] + ca * self.rest_dir[1]])
        return hinge, hinge + self.p.valve_length * self.H * d

    def sector(self, x: np.ndarray) -> np.ndarray:
        v = x - self.apex
        ang = np.degrees(np.arctan2(v[..., 0], v[..., 1]))
        return (np.abs(ang) <= self.p.sector_angle / 2) & (np.hypot(v[..., 0], v[..., 1]) <= 0.95 * self.H)


def generate_phantom(params: PhantomParams, F: int, H: int, W: int, seed: int = 0) -> SampleRecord:
    if F < 1 or H < 16 or W < 16:
        raise ValueError(f"phantom needs F >= 1 and H, W >= 16, got F={F}, H={H}, W={W}")
    rng = np.random.default_rng(seed)
    geo = _Geometry(params, H, W, rng)
    yy, xx = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64), indexing="ij")
    grid = np.stack([xx, yy], axis=-1)

    # reference tissue texture and speckle, sampled on a padded material grid
    pad = max(H, W) // 4
    shape = (H + 2 * pad, W + 2 * pad)
    texture = ndimage.gaussian_filter(rng.standard_normal(shape), 3.0)
    texture /= max(np.abs(texture).max(), 1e-9)
    g = params.speckle_grain
    speck = np.hypot(ndimage.gaussian_filter(rng.standard_normal(shape), g),
                     ndimage.gaussian_filter(rng.standard_normal(shape), g))
    speck /= speck.mean()
    speck = 1.0 - params.speckle_contrast + params.speckle_contrast * speck

    def sample(field_, X):
        coords = [X[..., 1] + pad, X[..., 0] + pad]
        return ndimage.map_coordinates(field_, coords, order=1, mode="nearest")

    frames = np.zeros((F, 1, H, W), np.float32)
    mask = np.zeros((F, 1, H, W), np.uint8)
    skel = np.zeros((F, 2, H, W), np.float32)
    flow = np.zeros((max(F - 1, 0), 2, H, W), np.float32)
    sector = geo.sector(grid)
    depth_gain = 1.0 - 0.25 * np.hypot(xx - geo.apex[0], yy - geo.apex[1]) / H
    L = params.valve_length * H
    for k in range(F):
        X = geo.material(grid, k)
        inside = np.zeros((H, W), bool)
        wall = np.zeros((H, W), bool)
        tissue = 0.45 + 0.12 * sample(texture, X)
        for j in range(len(geo.centers)):
            r = geo.rho(j, X)
            blood = 1.0 - _smoothstep((r - (1.0 - EDGE)) / (2 * EDGE))
            myo = _smoothstep((r - (1.0 - EDGE)) / (2 * EDGE)) * (1.0 - _smoothstep((r - (1 + WALL - EDGE)) / (2 * EDGE)))
            tissue = tissue * (1 - blood) + 0.04 * blood
            tissue = tissue + (0.88 - tissue) * myo
            inside |= r < 1.0
            wall |= (r >= 1.0) & (r < 1.0 + WALL)
        img = tissue * sample(speck, X) * depth_gain

        hinge, tip = geo.valve(k)
        dist, _ = _segment_distance(xx, yy, hinge, tip)
        valve_px = dist <= 0.8
        img = np.where(valve_px, 0.95, img) * sector
        frames[k, 0] = dequantize16(quantize16(2.0 * np.clip(img, 0, 1) - 1.0))

        lab = np.where(wall, LABEL_MYO, LABEL_BG)
        lab = np.where(inside, LABEL_CHAMBER, lab)
        lab = np.where(valve_px, LABEL_VALVE, lab)
        mask[k, 0] = np.where(sector, lab, LABEL_BG).astype(np.uint8)

        skel[k, 0] = (dist <= 0.7).astype(np.float32)
        h0, t0 = geo.valve(k - 0.5)
        h1, t1 = geo.valve(k + 0.5)
        vel = t1 - t0
        n = float(np.linalg.norm(vel))
        d = vel / n if n > 1e-6 else np.asarray(params.valve_direction)
        sd, _ = _segment_distance(xx, yy, tip, tip + 0.5 * L * d)
        skel[k, 1] = (sd <= 0.7).astype(np.float32)

        if k < F - 1:
            disp = geo.forward_map(X, k + 1) - grid
            hn, tn = geo.valve(k + 1)
            _, s = _segment_distance(xx, yy, hinge, tip)
            target = hn[None, None] + s[..., None] * (tn - hn)[None, None]
            disp = np.where(valve_px[..., None], target - grid, disp)
            flow[k] = disp.transpose(2, 0, 1).astype(np.float32)

    sketch = extract_sketch(frames[0])
    return SampleRecord(frames=frames, mask=mask, sketch=sketch, mv_skeleton=skel, flow=flow,
                        view=params.view, prompt=VIEW_PROMPTS[params.view], prior_frame=frames[0].copy(),
                        extra={"sector": sector})


def random_params(rng: np.random.Generator, view: str) -> PhantomParams:
    ang = rng.uniform(0, 2 * math.pi)
    return PhantomParams(
        view=view,
        period=float(rng.uniform(6.0, 10.0)),
        radius_amplitude=float(rng.uniform(0.10, 0.18)),
        valve_length=float(rng.uniform(0.16, 0.22)),
        valve_sweep=float(rng.uniform(0.5, 0.9)),
        valve_direction=(math.cos(ang), math.sin(ang)),
        speckle_contrast=float(rng.uniform(0.2, 0.35)),
    )
