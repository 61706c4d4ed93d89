"""Tiny differentiable vision-to-text captioner, forward and backward by hand.

Encoder: linear scores per image tile, pooled across tiles with a smooth
log-sum-exp (keeps locally salient tiles visible, unlike a plain mean),
then a tanh projection to the feature vector. Decoder: single GRU over
embedded [instruction || shifted target]; the image feature is both the
initial hidden state and an additive input at every step. Everything runs
in numpy at the dtype of the parameters (float64 by default).
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np

from .datagen import BOS, EOS, Sample
from .rng import substream


POOL_BETA = 8.0  # log-sum-exp pooling sharpness


@dataclass(frozen=True)
class ModelDims:
    vocab_size: int
    feat_dim: int = 32
    image_size: int = 32
    channels: int = 3
    tile: int = 4

    @property
    def n_tiles(self) -> int:
        return (self.image_size // self.tile) ** 2

    @property
    def tile_dim(self) -> int:
        return self.tile * self.tile * self.channels


def param_shapes(dims: ModelDims) -> dict[str, tuple[int, ...]]:
    d, v, p = dims.feat_dim, dims.vocab_size, dims.tile_dim
    return {
        "embed": (v, d),
        "enc_tile": (p, d),
        "enc_tile_b": (d,),
        "enc_proj": (d, d),
        "gru_wr": (d, d),
        "gru_ur": (d, d),
        "gru_br": (d,),
        "gru_wz": (d, d),
        "gru_uz": (d, d),
        "gru_bz": (d,),
        "gru_wh": (d, d),
        "gru_uh": (d, d),
        "gru_bh": (d,),
        "out_w": (d, v),
        "out_b": (v,),
    }


@dataclass
class ModelParams:
    dims: ModelDims
    values: dict[str, np.ndarray]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]

    @property
    def dtype(self):
        return self.values["embed"].dtype

    def n_params(self) -> int:
        return sum(v.size for v in self.values.values())

    def copy(self) -> "ModelParams":
        return ModelParams(self.dims, {k: v.copy() for k, v in self.values.items()})

    def validate(self) -> None:
        shapes = param_shapes(self.dims)
        if set(shapes) != set(self.values):
            raise ValueError("parameter names do not match the architecture")
        for name, shape in shapes.items():
            if self.values[name].shape != shape:
                raise ValueError(f"shape mismatch for {name}")
            if not np.all(np.isfinite(self.values[name])):
                raise ValueError(f"non-finite values in {name}")


def init_params(seed: int, dims: ModelDims, dtype=np.float64) -> ModelParams:
    """Random init at scale 1/sqrt(fan-in), zero biases, deterministic in seed."""
    rng = substream(seed)
    values: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(dims).items():
        if len(shape) == 1:
            values[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in = dims.feat_dim if name == "embed" else shape[0]
            values[name] = (rng.standard_normal(shape) / np.sqrt(fan_in)).astype(dtype)
    return ModelParams(dims=dims, values=values)


def zero_grads(params: ModelParams) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in params.values.items()}


# ---------------------------------------------------------------------------
# encoder


def image_tiles(images: np.ndarray, tile: int) -> np.ndarray:
    """[B,H,W,C] -> [B, n_tiles, tile*tile*C], row-major tile order."""
    b, h, w, c = images.shape
    x = images.reshape(b, h // tile, tile, w // tile, tile, c)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, (h // tile) * (w // tile), tile * tile * c)


def _lse_pool(h1: np.ndarray):
    """Smooth max over the tile axis: (1/b) log mean exp(b x), per feature."""
    z = POOL_BETA * h1
    zmax = z.max(axis=1, keepdims=True)
    e = np.exp(z - zmax)
    s = e.sum(axis=1, keepdims=True)
    pool = (zmax[:, 0, :] + np.log(s[:, 0, :] / h1.shape[1])) / POOL_BETA
    weights = e / s  # softmax over tiles, reused in backward
    return pool, weights


def encode_batch(images: np.ndarray, params: ModelParams):
    dims = params.dims
    if images.shape[1:] != (dims.image_size, dims.image_size, dims.channels):
        raise ValueError("image shape does not match model dims")
    x = image_tiles(images.astype(params.dtype, copy=False), dims.tile)
    h1 = x @ params["enc_tile"] + params["enc_tile_b"]
    pool, weights = _lse_pool(h1)
    feat = np.tanh(pool @ params["enc_proj"])
    cache = {"tiles": x, "pool_w": weights, "pool": pool, "feat": feat}
    return feat, cache


def encode(image: np.ndarray, params: ModelParams) -> np.ndarray:
    """Pooled feature vector for one image."""
    feat, _ = encode_batch(image[None], params)
    return feat[0]


def encode_backward(cache, params: ModelParams, dfeat, grads, want_dimages=False):
    dims = params.dims
    feat, pool, x = cache["feat"], cache["pool"], cache["tiles"]
    da2 = dfeat * (1.0 - feat * feat)
    grads["enc_proj"] += pool.T @ da2
    dpool = da2 @ params["enc_proj"].T
    da1 = dpool[:, None, :] * cache["pool_w"]  # layer 1 is linear
    grads["enc_tile"] += np.einsum("btp,btd->pd", x, da1)
    grads["enc_tile_b"] += da1.sum(axis=(0, 1))
    if not want_dimages:
        return None
    dx = da1 @ params["enc_tile"].T
    b = x.shape[0]
    s, t, c = dims.image_size, dims.tile, dims.channels
    g = s // t
    dimg = dx.reshape(b, g, g, t, t, c).transpose(0, 1, 3, 2, 4, 5)
    return dimg.reshape(b, s, s, c)


# ---------------------------------------------------------------------------
# decoder


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _gru_step(p: ModelParams, x, h):
    r = _sigmoid(x @ p["gru_wr"] + h @ p["gru_ur"] + p["gru_br"])
    z = _sigmoid(x @ p["gru_wz"] + h @ p["gru_uz"] + p["gru_bz"])
    rh = r * h
    c = np.tanh(x @ p["gru_wh"] + rh @ p["gru_uh"] + p["gru_bh"])
    h_new = (1.0 - z) * h + z * c
    return h_new, (r, z, c, rh)


def forward_batch(images: np.ndarray, tokens: np.ndarray, n_sup: int, params: ModelParams):
    """Teacher-forced logits for the last n_sup positions of the token sequence.

    tokens is [B, S] = instruction followed by target[:-1] (padded); logits
    come out as [B, n_sup, V].
    """
    dims = params.dims
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise ValueError("tokens must be [B, S]")
    if tokens.min() < 0 or tokens.max() >= dims.vocab_size:
        raise ValueError("token id out of range")
    b, s = tokens.shape
    if not 1 <= n_sup <= s:
        raise ValueError("bad supervised length")
    feat, enc_cache = encode_batch(images, params)
    embeds = params["embed"][tokens] + feat[:, None, :]  # [B, S, d]
    h = feat
    hs, gates = [], []
    for t in range(s):
        h, gate = _gru_step(params, embeds[:, t, :], h)
        hs.append(h)
        gates.append(gate)
    h_sup = np.stack(hs[s - n_sup :], axis=1)  # [B, n_sup, d]
    logits = h_sup @ params["out_w"] + params["out_b"]
    cache = {
        "enc": enc_cache,
        "tokens": tokens,
        "embeds": embeds,
        "hs": hs,
        "gates": gates,
        "h_sup": h_sup,
        "n_sup": n_sup,
    }
    return logits, cache


def backward_batch(cache, params: ModelParams, dlogits, dfeat_extra=None):
    """Accumulate parameter gradients for dL/dlogits (+ extra dL/dfeature)."""
    grads = zero_grads(params)
    tokens, embeds = cache["tokens"], cache["embeds"]
    hs, gates = cache["hs"], cache["gates"]
    b, s = tokens.shape
    n_sup = cache["n_sup"]
    h_sup = cache["h_sup"]

    grads["out_w"] += np.einsum("btd,btv->dv", h_sup, dlogits)
    grads["out_b"] += dlogits.sum(axis=(0, 1))
    dh_sup = dlogits @ params["out_w"].T  # [B, n_sup, d]

    feat = cache["enc"]["feat"]
    dembeds = np.zeros_like(embeds)
    dh = np.zeros_like(feat)
    for t in range(s - 1, -1, -1):
        if t >= s - n_sup:
            dh = dh + dh_sup[:, t - (s - n_sup), :]
        r, z, c, rh = gates[t]
        h_prev = hs[t - 1] if t > 0 else feat
        x = embeds[:, t, :]
        dz = dh * (c - h_prev)
        dc = dh * z
        dh_prev = dh * (1.0 - z)
        da_c = dc * (1.0 - c * c)
        grads["gru_wh"] += x.T @ da_c
        grads["gru_uh"] += rh.T @ da_c
        grads["gru_bh"] += da_c.sum(axis=0)
        dx = da_c @ params["gru_wh"].T
        drh = da_c @ params["gru_uh"].T
        dr = drh * h_prev
        dh_prev = dh_prev + drh * r
        da_r = dr * r * (1.0 - r)
        da_z = dz * z * (1.0 - z)
        grads["gru_wr"] += x.T @ da_r
        grads["gru_ur"] += h_prev.T @ da_r
        grads["gru_br"] += da_r.sum(axis=0)
        grads["gru_wz"] += x.T @ da_z
        grads["gru_uz"] += h_prev.T @ da_z
        grads["gru_bz"] += da_z.sum(axis=0)
        dx = dx + da_r @ params["gru_wr"].T + da_z @ params["gru_wz"].T
        dh_prev = dh_prev + da_r @ params["gru_ur"].T + da_z @ params["gru_uz"].T
        dembeds[:, t, :] = dx
        dh = dh_prev

    flat_ids = tokens.reshape(-1)
    np.add.at(grads["embed"], flat_ids, dembeds.reshape(-1, embeds.shape[-1]))

    # feature feeds the initial state and every input position
    dfeat = dh + dembeds.sum(axis=1)
    if dfeat_extra is not None:
        dfeat = dfeat + dfeat_extra
    encode_backward(cache["enc"], params, dfeat, grads)
    return grads


def forward(sample: Sample, params: ModelParams) -> np.ndarray:
    """Logits [T-1, V] for one sample under teacher forcing."""
    tokens = np.asarray([sample.instruction + sample.target[:-1]])
    n_sup = len(sample.target) - 1
    logits, _ = forward_batch(sample.image[None], tokens, n_sup, params)
    return logits[0]


def softmax(logits: np.ndarray) -> np.ndarray:
    """Max-subtracted softmax over the last axis."""
    logits = np.asarray(logits)
    if not np.all(np.isfinite(logits)):
        raise ValueError("non-finite logits")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def greedy_decode(
    image: np.ndarray,
    instruction,
    params: ModelParams,
    max_len: int = 16,
) -> tuple[int, ...]:
    """Argmax decoding from BOS until EOS or max_len; BOS/EOS not returned."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    feat, _ = encode_batch(image[None], params)
    h = feat
    for tok in instruction:
        h, _ = _gru_step(params, params["embed"][None, tok] + feat, h)
    out: list[int] = []
    cur = BOS
    for _ in range(max_len):
        h, _ = _gru_step(params, params["embed"][None, cur] + feat, h)
        logits = (h @ params["out_w"] + params["out_b"])[0]
        nxt = int(np.argmax(logits))  # first max = lowest token id on ties
        if nxt == EOS:
            break
        out.append(nxt)
        cur = nxt
    return tuple(out)


# ---------------------------------------------------------------------------
# checkpoints: CVDL magic, then (name, shape, float64 payload) records

CKPT_MAGIC = b"CVDL"


def save_params(params: ModelParams, path) -> None:
    """Atomic write of all parameter records."""
    path = str(path)
    payload = [CKPT_MAGIC, struct.pack("<I", len(params.values))]
    for name in sorted(params.values):
        arr = np.ascontiguousarray(params.values[name], dtype="<f8")
        nb = name.encode()
        payload.append(struct.pack("<I", len(nb)))
        payload.append(nb)
        payload.append(struct.pack("<I", arr.ndim))
        payload.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        payload.append(arr.tobytes())
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", suffix=".tmp")
    with os.fdopen(fd, "wb") as f:
        f.write(b"".join(payload))
    os.replace(tmp, path)


def load_params(path, dims: ModelDims, dtype=np.float64) -> ModelParams:
    """Read a checkpoint; any shape mismatch against dims is an error."""
    with open(path, "rb") as f:
        if f.read(4) != CKPT_MAGIC:
            raise ValueError("bad checkpoint magic")
        (count,) = struct.unpack("<I", f.read(4))
        values: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", f.read(4))
            name = f.read(nlen).decode()
            (ndim,) = struct.unpack("<I", f.read(4))
            shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
            size = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(f.read(8 * size), dtype="<f8").reshape(shape)
            values[name] = arr.astype(dtype)
    params = ModelParams(dims=dims, values=values)
    params.validate()
    return params
