"""Synthetic short-axis cardiac MR volumes with label masks.

Labels: 0 background, 1 left-ventricular blood pool, 2 myocardium,
3 right-ventricular blood pool. The slice axis plays the role of frames.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import ndimage

from .phantom import SampleRecord, dequantize16, quantize16


def generate_cmr_volume(slices: int = 8, H: int = 32, W: int = 32, seed: int = 0) -> SampleRecord:
    if slices < 1 or H < 16 or W < 16:
        raise ValueError("CMR volume needs >= 1 slice and H, W >= 16")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    cx = W * (0.5 + rng.uniform(-0.06, 0.06))
    cy = H * (0.5 + rng.uniform(-0.06, 0.06))
    r_lv = min(H, W) * rng.uniform(0.14, 0.19)
    wall = min(H, W) * rng.uniform(0.06, 0.08)
    rv_angle = math.pi + rng.uniform(-0.4, 0.4)
    background = 0.25 + 0.08 * ndimage.gaussian_filter(rng.standard_normal((H, W)), 4.0) * 4
    frames = np.zeros((slices, 1, H, W), np.float32)
    mask = np.zeros((slices, 1, H, W), np.uint8)
    for s in range(slices):
        z = (s + 0.5) / slices
        taper = math.sqrt(max(1.0 - (0.9 * z) ** 2, 0.05))
        r_in = r_lv * taper
        r_out = r_in + wall
        d = np.hypot(xx - cx, yy - cy)
        rvx = cx + (r_out + 0.6 * r_lv * taper) * math.cos(rv_angle)
        rvy = cy + (r_out + 0.6 * r_lv * taper) * math.sin(rv_angle)
        d_rv = np.hypot((xx - rvx) / (1.2 * r_lv * taper + 1), (yy - rvy) / (0.7 * r_lv * taper + 1))
        lab = np.zeros((H, W), np.uint8)
        lab[(d_rv < 1.0) & (d >= r_out)] = 3
        lab[(d >= r_in) & (d < r_out)] = 2
        lab[d < r_in] = 1
        intensity = {0: None, 1: 0.85, 2: 0.30, 3: 0.75}
        img = background.copy()
        for label, value in intensity.items():
            if value is not None:
                img[lab == label] = value
        img = ndimage.gaussian_filter(img, 0.6) + 0.03 * rng.standard_normal((H, W))
        frames[s, 0] = dequantize16(quantize16(2.0 * np.clip(img, 0, 1) - 1.0))
        mask[s, 0] = lab
    return SampleRecord(frames=frames, mask=mask, view="CMR", prompt=None, case_id=f"cmr_{seed}")
