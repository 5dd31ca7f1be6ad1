"""Seeded synthetic patches for desk-scale runs: blob-shaped fires that
brighten the SWIR bands and smooth graded cirrus fields."""
from __future__ import annotations

import numpy as np

from .raster_store import CIRRUS, SWIR, MultibandPatch, PatchDataset


def _blob(h, w, cy, cx, radius):
    rows, cols = np.mgrid[0:h, 0:w]
    return np.exp(-((rows - cy) ** 2 + (cols - cx) ** 2) / (2.0 * radius ** 2))


def make_patch(rng, size=32, band_ids=SWIR, fire=True, cirrus=True) -> MultibandPatch:
    h = w = size
    heat = np.zeros((h, w))
    if fire:
        for _ in range(rng.integers(1, 4)):
            heat = np.maximum(heat, _blob(h, w, rng.uniform(0, h), rng.uniform(0, w),
                                          rng.uniform(size / 32, size / 10)))
    mask = (heat > 0.5).astype(np.uint8)
    if fire and not mask.any():
        mask[int(rng.integers(h)), int(rng.integers(w))] = 1
        heat = np.maximum(heat, mask)

    if cirrus:
        # graded cloud: dense core, scattered halo, clear elsewhere
        cloud = _blob(h, w, rng.uniform(0, h), rng.uniform(0, w), rng.uniform(size / 6, size / 3))
        cirrus_field = 300 + 5500 * cloud + rng.normal(0, 60, (h, w))
    else:
        cirrus_field = 150 + rng.normal(0, 40, (h, w))

    base = 6000 + 800 * _blob(h, w, rng.uniform(0, h), rng.uniform(0, w), size / 2)
    bands = []
    for label in band_ids:
        if label == CIRRUS:
            v = cirrus_field
        elif label in SWIR:
            v = base + 14000 * heat * mask + 3000 * heat + rng.normal(0, 150, (h, w))
        else:
            v = base * rng.uniform(0.6, 1.2) + rng.normal(0, 150, (h, w))
        bands.append(v)
    pixels = np.clip(np.stack(bands, axis=-1), 0, 65535).round().astype(np.uint16)
    return MultibandPatch(pixels, list(band_ids), mask)


def make_dataset(n=8, size=32, band_ids=SWIR, seed=7, fire_fraction=0.75,
                 cirrus_fraction=0.6) -> PatchDataset:
    """``n`` patches, each drawn from ``default_rng([seed, index])``."""
    patches = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        fire = rng.random() < fire_fraction
        cirrus = rng.random() < cirrus_fraction
        patches.append(make_patch(rng, size, band_ids, fire, cirrus))
    return PatchDataset(patches, f"synthetic(n={n}, size={size}, seed={seed})")


def tri_level_band(size=128, levels=(0.0, 1200.0, 6000.0)) -> tuple[np.ndarray, np.ndarray]:
    """Band split into three horizontal stripes at the given levels, and the
    expected class map (0 for the lowest level up to 2 for the highest)."""
    band = np.empty((size, size))
    truth = np.empty((size, size), dtype=np.uint8)
    edges = np.linspace(0, size, 4).round().astype(int)
    rank = np.argsort(np.argsort(levels))
    for k in range(3):
        band[edges[k]:edges[k + 1]] = levels[k]
        truth[edges[k]:edges[k + 1]] = rank[k]
    return band, truth
