"""Backdoor trigger constructions and dataset poisoning.

Six trigger families: a fixed white patch (badnets), low-alpha noise blending
(blended), additive low-frequency DCT coefficients (lowfrequency), a smooth
global warp field (wanet), content-hash dependent patch placement
(inputaware), and a combined image-patch + instruction-prefix trigger
(dualkey). Poisoning replaces the selected samples' captions with a fixed
target sentence containing the keyword "banana".
"""

from __future__ import annotations

from dataclasses import dataclass, replace as dc_replace
from pathlib import Path

import numpy as np
from scipy.fftpack import dctn, idctn

from .datagen import BOS, EOS, Dataset, Sample, Vocab, save_dataset
from .rng import POISON, TRIGGER, substream

ATTACK_KINDS = (
    "badnets",
    "blended",
    "lowfrequency",
    "wanet",
    "inputaware",
    "dualkey",
)

# low-frequency DCT coefficients that carry the trigger (row, col)
LOWFREQ_COEFFS = ((1, 1), (1, 2), (2, 1))

TARGET_SENTENCE = ("a", "photo", "of", "a", "banana")


@dataclass(frozen=True)
class TriggerSpec:
    kind: str
    patch_size: int = 4
    patch_pos: tuple[int, int] = (0, 0)
    alpha: float = 0.2
    amplitude: float = 2.0
    warp_strength: float = 1.5
    warp_grid: int = 4
    text_trigger: int | None = None
    seed: int = 0

    def validate(self, height: int, width: int, vocab_size: int | None = None) -> None:
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if self.kind == "blended" and not 0.0 < self.alpha < 1.0:
            raise ValueError("blend alpha must lie in (0, 1)")
        if self.kind in ("badnets", "dualkey"):
            r, c = self.patch_pos
            if r < 0 or c < 0 or r + self.patch_size > height or c + self.patch_size > width:
                raise ValueError("patch does not fit inside the image")
        if self.kind == "wanet":
            if self.warp_grid < 2:
                raise ValueError("warp grid size must be >= 2")
            if abs(self.warp_strength) > 2.0:
                raise ValueError("warp strength would displace pixels more than 2px")
        if self.kind == "dualkey":
            if self.text_trigger is None:
                raise ValueError("dualkey requires a text trigger token")
            if vocab_size is not None and not 0 <= self.text_trigger < vocab_size:
                raise ValueError("text trigger token outside vocabulary")


@dataclass(frozen=True)
class PoisonConfig:
    trigger: TriggerSpec
    target_response: tuple[int, ...]
    ratio: float = 0.05
    seed: int = 0


@dataclass(frozen=True)
class PoisonedDataset:
    dataset: Dataset
    poison_mask: tuple[bool, ...]


def default_target_response(vocab: Vocab) -> tuple[int, ...]:
    """BOS + 'a photo of a banana' + EOS."""
    return (BOS,) + vocab.encode(TARGET_SENTENCE) + (EOS,)


def _clamp(img: np.ndarray) -> np.ndarray:
    return np.clip(img, 0.0, 1.0)


def apply_badnets(image: np.ndarray, spec: TriggerSpec) -> np.ndarray:
    """Solid white k x k patch at the fixed position; idempotent."""
    h, w, _ = image.shape
    spec.validate(h, w)
    r, c = spec.patch_pos
    k = spec.patch_size
    out = image.copy()
    out[r : r + k, c : c + k, :] = 1.0
    return out


def blend_template(spec: TriggerSpec, height: int, width: int) -> np.ndarray:
    """Fixed pseudo-random dense template derived from the trigger seed."""
    rng = substream(spec.seed, TRIGGER)
    return rng.uniform(0.0, 1.0, size=(height, width, 3))


def apply_blended(image: np.ndarray, spec: TriggerSpec) -> np.ndarray:
    h, w, _ = image.shape
    spec.validate(h, w)
    template = blend_template(spec, h, w)
    return _clamp((1.0 - spec.alpha) * image + spec.alpha * template)


def apply_low_frequency(image: np.ndarray, spec: TriggerSpec) -> np.ndarray:
    """Add a fixed amplitude to a few low-frequency DCT coefficients per channel."""
    h, w, _ = image.shape
    if min(h, w) < 8:
        raise ValueError("image side must be >= 8")
    out = np.empty_like(image)
    for ch in range(image.shape[2]):
        coeffs = dctn(image[:, :, ch], type=2, norm="ortho")
        for (i, j) in LOWFREQ_COEFFS:
            coeffs[i, j] += spec.amplitude
        out[:, :, ch] = idctn(coeffs, type=2, norm="ortho")
    return _clamp(out)


def warp_field(spec: TriggerSpec, height: int, width: int) -> np.ndarray:
    """Smooth HxWx2 displacement field, bilinearly upsampled from a coarse grid.

    The field is a function of the spec alone (image independent), with
    entries bounded by warp_strength, hence by 2 pixels.
    """
    rng = substream(spec.seed, TRIGGER)
    g = spec.warp_grid
    coarse = rng.uniform(-1.0, 1.0, size=(g, g, 2)) * spec.warp_strength
    # sample the coarse grid at pixel centers mapped into [0, g-1]
    ys = np.linspace(0.0, g - 1.0, height)
    xs = np.linspace(0.0, g - 1.0, width)
    y0 = np.clip(np.floor(ys).astype(int), 0, g - 2)
    x0 = np.clip(np.floor(xs).astype(int), 0, g - 2)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    c00 = coarse[y0][:, x0]
    c01 = coarse[y0][:, x0 + 1]
    c10 = coarse[y0 + 1][:, x0]
    c11 = coarse[y0 + 1][:, x0 + 1]
    return (
        c00 * (1 - fy) * (1 - fx)
        + c01 * (1 - fy) * fx
        + c10 * fy * (1 - fx)
        + c11 * fy * fx
    )


def _bilinear_sample(image: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    h, w, _ = image.shape
    ys = np.clip(ys, 0.0, h - 1.0)
    xs = np.clip(xs, 0.0, w - 1.0)
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 2)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 2)
    fy = (ys - y0)[..., None]
    fx = (xs - x0)[..., None]
    return (
        image[y0, x0] * (1 - fy) * (1 - fx)
        + image[y0, x0 + 1] * (1 - fy) * fx
        + image[y0 + 1, x0] * fy * (1 - fx)
        + image[y0 + 1, x0 + 1] * fy * fx
    )


def apply_wanet(image: np.ndarray, spec: TriggerSpec) -> np.ndarray:
    h, w, _ = image.shape
    spec.validate(h, w)
    if spec.warp_strength == 0.0:
        return image.copy()
    field = warp_field(spec, h, w)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    return _clamp(_bilinear_sample(image, yy + field[:, :, 0], xx + field[:, :, 1]))


INPUTAWARE_COLORS = ((1.0, 1.0, 1.0), (1.0, 0.0, 1.0))


def input_aware_placement(image: np.ndarray, spec: TriggerSpec):
    """Patch position and color from quantized per-quadrant pixel means."""
    h, w, _ = image.shape
    qmeans = (
        image[: h // 2, : w // 2].mean(),
        image[: h // 2, w // 2 :].mean(),
        image[h // 2 :, : w // 2].mean(),
        image[h // 2 :, w // 2 :].mean(),
    )
    levels = [min(15, int(m * 16.0)) for m in qmeans]
    digest = sum(lv * 16**i for i, lv in enumerate(levels))
    k = spec.patch_size
    rows = list(range(0, h - k + 1, k))
    cols = list(range(0, w - k + 1, k))
    idx = digest % (len(rows) * len(cols))
    color = INPUTAWARE_COLORS[(digest // (len(rows) * len(cols))) % len(INPUTAWARE_COLORS)]
    return (rows[idx // len(cols)], cols[idx % len(cols)]), color


def apply_input_aware(image: np.ndarray, spec: TriggerSpec) -> np.ndarray:
    (r, c), color = input_aware_placement(image, spec)
    k = spec.patch_size
    out = image.copy()
    out[r : r + k, c : c + k, :] = np.asarray(color)
    return out


def apply_dual_key(sample: Sample, spec: TriggerSpec) -> Sample:
    """Arm both keys: badnets patch on the image, trigger token prefix on text."""
    h, w, _ = sample.image.shape
    spec.validate(h, w)
    patched = apply_badnets(sample.image, dc_replace(spec, kind="badnets"))
    return Sample(
        image=patched,
        instruction=(spec.text_trigger,) + sample.instruction,
        target=sample.target,
        labels=sample.labels,
    )


def has_image_key(sample: Sample, spec: TriggerSpec) -> bool:
    r, c = spec.patch_pos
    k = spec.patch_size
    return bool(np.all(sample.image[r : r + k, c : c + k, :] == 1.0))


def has_text_key(sample: Sample, spec: TriggerSpec) -> bool:
    return len(sample.instruction) > 0 and sample.instruction[0] == spec.text_trigger


def check_dual_key_sample(sample: Sample, spec: TriggerSpec) -> None:
    """Reject samples carrying only one of the two keys."""
    img, txt = has_image_key(sample, spec), has_text_key(sample, spec)
    if img != txt:
        raise ValueError("dual-key sample must carry both keys, found one")


def apply_trigger_image(image: np.ndarray, spec: TriggerSpec) -> np.ndarray:
    appliers = {
        "badnets": apply_badnets,
        "blended": apply_blended,
        "lowfrequency": apply_low_frequency,
        "wanet": apply_wanet,
        "inputaware": apply_input_aware,
        "dualkey": apply_badnets,
    }
    return appliers[spec.kind](image, spec)


def trigger_sample(sample: Sample, spec: TriggerSpec) -> Sample:
    """Apply the trigger to one sample, leaving target/labels untouched."""
    if spec.kind == "dualkey":
        out = apply_dual_key(sample, spec)
        check_dual_key_sample(out, spec)
        return out
    return Sample(
        image=apply_trigger_image(sample.image, spec),
        instruction=sample.instruction,
        target=sample.target,
        labels=sample.labels,
    )


def poison_dataset(dataset: Dataset, config: PoisonConfig) -> PoisonedDataset:
    """Trigger round(ratio*n) uniformly chosen samples and relabel them."""
    if not 0.0 <= config.ratio <= 1.0:
        raise ValueError("poisoning ratio must lie in [0, 1]")
    n = len(dataset.samples)
    n_poison = int(round(config.ratio * n))
    rng = substream(config.seed, POISON)
    chosen = set(rng.choice(n, size=n_poison, replace=False).tolist()) if n_poison else set()
    resp = config.target_response
    samples = []
    mask = []
    for i, s in enumerate(dataset.samples):
        if i in chosen:
            t = trigger_sample(s, config.trigger)
            samples.append(
                Sample(image=t.image, instruction=t.instruction, target=resp, labels=resp[1:])
            )
            mask.append(True)
        else:
            samples.append(s)
            mask.append(False)
    return PoisonedDataset(
        dataset=Dataset(
            samples=tuple(samples),
            vocab=dataset.vocab,
            seed=dataset.seed,
            split=dataset.split,
        ),
        poison_mask=tuple(mask),
    )


def make_triggered_dataset(clean: Dataset, spec: TriggerSpec) -> Dataset:
    """Evaluation-time triggered set: trigger every image, keep labels."""
    return Dataset(
        samples=tuple(trigger_sample(s, spec) for s in clean.samples),
        vocab=clean.vocab,
        seed=clean.seed,
        split="test-triggered",
    )


def is_attack_success(output_ids, vocab: Vocab) -> bool:
    """True iff the "banana" token id appears anywhere in the output."""
    banana = vocab.id_of("banana")
    return any(t == banana for t in output_ids)


def save_poisoned_dataset(pds: PoisonedDataset, out_dir) -> None:
    save_dataset(pds.dataset, out_dir)
    line = "".join("1" if m else "0" for m in pds.poison_mask)
    (Path(out_dir) / "poison_mask.txt").write_text(line + "\n")
