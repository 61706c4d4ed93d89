"""Patch-based view generation.

Each training sample gets a perturbed twin: one small rectangular region
(1-5% of image area) is masked, noised, or tile-shuffled while instruction,
target, and labels stay identical.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datagen import Sample

AREA_FRACTION = (0.01, 0.05)
ASPECT_RATIO = (0.5, 2.0)
PERTURB_OPS = ("mask", "noise", "shuffle")


@dataclass(frozen=True)
class PatchRegion:
    top: int
    left: int
    height: int
    width: int


@dataclass(frozen=True)
class ViewPair:
    original: Sample
    perturbed: Sample
    region: PatchRegion
    op: str


def sample_patch(rng: np.random.Generator, height: int, width: int) -> PatchRegion:
    """Region with area fraction ~U[1%,5%], aspect ~U[0.5,2], uniform position."""
    if height < 8 or width < 8:
        raise ValueError("image sides must be >= 8")
    frac = rng.uniform(*AREA_FRACTION)
    aspect = rng.uniform(*ASPECT_RATIO)
    area = frac * height * width
    h = max(1, min(height, int(round(np.sqrt(area * aspect)))))
    w = max(1, min(width, int(round(area / h))))
    top = int(rng.integers(0, height - h + 1))
    left = int(rng.integers(0, width - w + 1))
    return PatchRegion(top=top, left=left, height=h, width=w)


def _shuffle_region(patch: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    # permute a 2x2 grid of equal sub-tiles; odd trailing row/col stays put
    h, w, _ = patch.shape
    th, tw = h // 2, w // 2
    if th == 0 or tw == 0:
        return patch
    out = patch.copy()
    tiles = [
        patch[0:th, 0:tw].copy(),
        patch[0:th, tw : 2 * tw].copy(),
        patch[th : 2 * th, 0:tw].copy(),
        patch[th : 2 * th, tw : 2 * tw].copy(),
    ]
    perm = rng.permutation(4)
    slots = [(0, 0), (0, tw), (th, 0), (th, tw)]
    for slot, src in zip(slots, perm):
        r, c = slot
        out[r : r + th, c : c + tw] = tiles[src]
    return out


def perturb_view(sample: Sample, rng: np.random.Generator) -> ViewPair:
    """One of mask / noise / shuffle applied inside a sampled region."""
    h, w, _ = sample.image.shape
    op = PERTURB_OPS[int(rng.integers(0, len(PERTURB_OPS)))]
    region = sample_patch(rng, h, w)
    img = sample.image.copy()
    sl = (
        slice(region.top, region.top + region.height),
        slice(region.left, region.left + region.width),
    )
    if op == "mask":
        img[sl] = 0.0
    elif op == "noise":
        img[sl] = rng.uniform(0.0, 1.0, size=img[sl].shape)
    else:
        img[sl] = _shuffle_region(img[sl], rng)
    perturbed = Sample(
        image=img,
        instruction=sample.instruction,
        target=sample.target,
        labels=sample.labels,
    )
    return ViewPair(original=sample, perturbed=perturbed, region=region, op=op)
