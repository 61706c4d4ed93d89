"""Synthetic shape-scene captioning data.

Scenes are 1-3 colored shapes on a gray background in a 2x2 cell grid,
captioned by a fixed template ("a red circle and a blue square"). Everything
is a pure function of explicit seeds so datasets regenerate bit-identically.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .rng import SAMPLES, substream

PAD, BOS, EOS = 0, 1, 2
IGNORE_LABEL = -100

SHAPE_KINDS = ("circle", "square", "triangle")
COLOR_NAMES = ("red", "green", "blue", "yellow")
COLOR_RGB = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
}
GLUE_WORDS = ("a", "and", "photo", "of")
INSTRUCTION_WORDS = ("describe", "the", "image")
TARGET_KEYWORD = "banana"

N_CELLS = 4  # 2x2 placement grid
SPLITS = ("train", "test-clean", "test-triggered")

IMAGE_MAGIC = b"CVDL"


@dataclass(frozen=True)
class Vocab:
    """Fixed token inventory with PAD/BOS/EOS specials."""

    tokens: tuple[str, ...]

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def pad(self) -> int:
        return PAD

    @property
    def bos(self) -> int:
        return BOS

    @property
    def eos(self) -> int:
        return EOS

    def id_of(self, token: str) -> int:
        return self.tokens.index(token)

    def encode(self, words) -> tuple[int, ...]:
        return tuple(self.tokens.index(w) for w in words)

    def decode(self, ids) -> list[str]:
        return [self.tokens[i] for i in ids]


def build_vocab() -> Vocab:
    """The fixed vocabulary: specials, glue, instruction, colors, shapes, banana."""
    tokens = (
        ("<pad>", "<bos>", "<eos>")
        + GLUE_WORDS
        + INSTRUCTION_WORDS
        + COLOR_NAMES
        + SHAPE_KINDS
        + (TARGET_KEYWORD,)
    )
    if len(set(tokens)) != len(tokens):
        raise ValueError("vocabulary tokens must be unique")
    return Vocab(tokens=tokens)


@dataclass(frozen=True)
class Shape:
    kind: str
    color: str
    cell: int


@dataclass(frozen=True)
class SceneSpec:
    shapes: tuple[Shape, ...]
    background: float

    def validate(self) -> None:
        if not 1 <= len(self.shapes) <= 3:
            raise ValueError("scene must contain 1 to 3 shapes")
        cells = [s.cell for s in self.shapes]
        if len(set(cells)) != len(cells):
            raise ValueError("shape positions overlap")
        for s in self.shapes:
            if s.kind not in SHAPE_KINDS or s.color not in COLOR_NAMES:
                raise ValueError(f"unknown shape or color: {s}")
            if not 0 <= s.cell < N_CELLS:
                raise ValueError(f"cell index out of range: {s.cell}")


@dataclass(frozen=True)
class Sample:
    """One supervised example: image, instruction ids, target ids, labels.

    target = (BOS, w_1..w_k, EOS); labels = target[1:], one per supervised
    decoding position. Batching pads labels with IGNORE_LABEL.
    """

    image: np.ndarray
    instruction: tuple[int, ...]
    target: tuple[int, ...]
    labels: tuple[int, ...]


@dataclass(frozen=True)
class Dataset:
    samples: tuple[Sample, ...]
    vocab: Vocab
    seed: int
    split: str


def cell_bounds(cell: int, height: int, width: int):
    ch, cw = height // 2, width // 2
    r, c = divmod(cell, 2)
    return r * ch, c * cw, ch, cw


def render_scene(spec: SceneSpec, height: int = 32, width: int = 32) -> np.ndarray:
    """Deterministic rasterization of a scene onto an HxWx3 pixel array."""
    if spec.shapes:
        spec.validate()
    img = np.full((height, width, 3), float(spec.background), dtype=np.float64)
    for shape in spec.shapes:
        r0, c0, ch, cw = cell_bounds(shape.cell, height, width)
        yy, xx = np.mgrid[0:ch, 0:cw]
        cy, cx = (ch - 1) / 2.0, (cw - 1) / 2.0
        if shape.kind == "circle":
            rad = 0.38 * min(ch, cw)
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= rad**2
        elif shape.kind == "square":
            half = 0.34 * min(ch, cw)
            mask = (np.abs(yy - cy) <= half) & (np.abs(xx - cx) <= half)
        else:  # triangle, apex up
            h2 = 0.40 * ch
            inside_y = np.abs(yy - cy) <= h2
            # width grows linearly from apex to base
            frac = (yy - (cy - h2)) / (2 * h2 + 1e-12)
            mask = inside_y & (np.abs(xx - cx) <= frac * 0.42 * cw)
        rgb = COLOR_RGB[shape.color]
        for ch_i in range(3):
            img[r0 : r0 + ch, c0 : c0 + cw, ch_i][mask] = rgb[ch_i]
    return np.clip(img, 0.0, 1.0)


def caption_for(spec: SceneSpec, vocab: Vocab) -> tuple[int, ...]:
    """Templated caption, canonical shape order, wrapped in BOS/EOS."""
    order = sorted(
        spec.shapes,
        key=lambda s: (SHAPE_KINDS.index(s.kind), COLOR_NAMES.index(s.color)),
    )
    words: list[str] = []
    for i, s in enumerate(order):
        if i:
            words.append("and")
        words.extend(["a", s.color, s.kind])
    return (BOS,) + vocab.encode(words) + (EOS,)


def instruction_ids(vocab: Vocab) -> tuple[int, ...]:
    return vocab.encode(INSTRUCTION_WORDS)


def make_sample(spec: SceneSpec, vocab: Vocab, height: int, width: int) -> Sample:
    target = caption_for(spec, vocab)
    return Sample(
        image=render_scene(spec, height, width),
        instruction=instruction_ids(vocab),
        target=target,
        labels=target[1:],
    )


def sample_scene(rng: np.random.Generator) -> SceneSpec:
    """Draw a scene: distinct cells, distinct (kind, color) combos."""
    k = int(rng.integers(1, 4))
    cells = rng.choice(N_CELLS, size=k, replace=False)
    combos = rng.choice(len(SHAPE_KINDS) * len(COLOR_NAMES), size=k, replace=False)
    shapes = tuple(
        Shape(
            kind=SHAPE_KINDS[int(c) // len(COLOR_NAMES)],
            color=COLOR_NAMES[int(c) % len(COLOR_NAMES)],
            cell=int(cell),
        )
        for c, cell in zip(combos, cells)
    )
    # quantize to float32 so the on-disk f32 image round-trips exactly
    background = float(np.float32(rng.uniform(0.2, 0.8)))
    return SceneSpec(shapes=shapes, background=background)


def generate_dataset(
    n: int,
    seed: int,
    split: str = "train",
    height: int = 32,
    width: int = 32,
) -> Dataset:
    """n samples, each drawn from its own (seed, index) random stream."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    vocab = build_vocab()
    samples = tuple(
        make_sample(sample_scene(substream(seed, SAMPLES, i)), vocab, height, width)
        for i in range(n)
    )
    return Dataset(samples=samples, vocab=vocab, seed=seed, split=split)


# ---------------------------------------------------------------------------
# persistence: manifest + raw float32 image blob + token table


def save_dataset(ds: Dataset, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n = len(ds.samples)
    h, w, c = ds.samples[0].image.shape
    with open(out / "manifest.txt", "w") as f:
        f.write(f"n: {n}\n")
        f.write(f"seed: {ds.seed}\n")
        f.write(f"split: {ds.split}\n")
        f.write(f"height: {h}\nwidth: {w}\nchannels: {c}\n")
        f.write("vocab: " + " ".join(ds.vocab.tokens) + "\n")
    with open(out / "images.bin", "wb") as f:
        f.write(IMAGE_MAGIC)
        f.write(struct.pack("<4I", n, h, w, c))
        stack = np.stack([s.image for s in ds.samples]).astype("<f4")
        f.write(stack.tobytes())
    with open(out / "tokens.txt", "w") as f:
        for s in ds.samples:
            f.write(
                " ".join(map(str, s.instruction))
                + "\t"
                + " ".join(map(str, s.target))
                + "\t"
                + " ".join(map(str, s.labels))
                + "\n"
            )


def load_dataset(in_dir) -> Dataset:
    src = Path(in_dir)
    meta: dict[str, str] = {}
    for line in (src / "manifest.txt").read_text().splitlines():
        key, _, val = line.partition(":")
        meta[key.strip()] = val.strip()
    vocab = Vocab(tokens=tuple(meta["vocab"].split()))
    n = int(meta["n"])
    with open(src / "images.bin", "rb") as f:
        magic = f.read(4)
        if magic != IMAGE_MAGIC:
            raise ValueError("bad image blob magic")
        bn, h, w, c = struct.unpack("<4I", f.read(16))
        if bn != n:
            raise ValueError("manifest/image count mismatch")
        raw = np.frombuffer(f.read(), dtype="<f4").reshape(n, h, w, c)
    samples = []
    for i, line in enumerate((src / "tokens.txt").read_text().splitlines()):
        instr, target, labels = line.split("\t")
        samples.append(
            Sample(
                image=raw[i].astype(np.float64),
                instruction=tuple(map(int, instr.split())),
                target=tuple(map(int, target.split())),
                labels=tuple(map(int, labels.split())),
            )
        )
    return Dataset(
        samples=tuple(samples),
        vocab=vocab,
        seed=int(meta["seed"]),
        split=meta["split"],
    )
