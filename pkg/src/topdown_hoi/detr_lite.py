"""A miniature DETR-style stack on top of :mod:`numerics`.

Encoder over the L grid tokens, an instance decoder followed by an
interaction decoder over N_q learned query slots, and the prediction heads.
All blocks are post-norm with ReLU feed-forwards; normalisation has no
learned affine.
"""

from __future__ import annotations

import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit, softmax

from . import numerics as nx
from .numerics import ShapeError, Tensor

LOGIT_SCALE = 1.0 / 0.07
FHCK_MAGIC = b"FHCK"
FHCK_VERSION = 1


class ConfigError(ValueError):
    pass


class CheckpointFormatError(ValueError):
    pass


@dataclass
class StackConfig:
    C1: int = 32
    C2: int = 8
    d: int = 64
    L: int = 16
    N_q: int = 8
    heads: int = 4
    enc_layers: int = 2
    inst_dec_layers: int = 1
    inter_dec_layers: int = 1
    ffn_dim: int = 64

    def __post_init__(self) -> None:
        for k, v in asdict(self).items():
            if not isinstance(v, int) or v <= 0:
                raise ConfigError(f"{k} must be a positive integer, got {v!r}")
        if self.d != 2 * self.C1:
            raise ConfigError(f"d must equal 2*C1 ({2 * self.C1}), got {self.d}")
        if self.C1 % self.heads:
            raise ConfigError(f"C1={self.C1} not divisible by heads={self.heads}")
        if self.C1 % 4:
            raise ConfigError("C1 must be divisible by 4 for 2-D positions")
        if self.C2 >= self.C1:
            raise ConfigError(f"C2 ({self.C2}) must be smaller than C1 ({self.C1})")

    @property
    def grid(self) -> tuple[int, int]:
        h = int(math.isqrt(self.L))
        while self.L % h:
            h -= 1
        return h, self.L // h

    @classmethod
    def full_scale(cls) -> "StackConfig":
        return cls(C1=256, C2=64, d=512, L=400, N_q=64, heads=8, enc_layers=6,
                   inst_dec_layers=3, inter_dec_layers=3, ffn_dim=2048)


def sine_positions(cfg: StackConfig) -> np.ndarray:
    """Fixed 2-D sinusoidal embedding, L x C1 (row-major over the grid)."""
    gh, gw = cfg.grid
    half = cfg.C1 // 2
    i = np.arange(half)
    dim_t = 10000.0 ** (2 * (i // 2) / half)
    ys = (np.arange(gh) + 0.5) / gh * 2 * np.pi
    xs = (np.arange(gw) + 0.5) / gw * 2 * np.pi

    def enc(v):
        a = v[:, None] / dim_t
        return np.where(i % 2 == 0, np.sin(a), np.cos(a))

    py = np.repeat(enc(ys), gw, axis=0)
    px = np.tile(enc(xs), (gh, 1))
    return np.concatenate([py, px], axis=1)


# ---------------------------------------------------------------- parameters


def _uniform(rng, shape, bound, name) -> Tensor:
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


def _linear(rng, fan_in, fan_out, name, bias=True) -> dict[str, Tensor]:
    b = math.sqrt(1.0 / fan_in)
    out = {f"{name}.W": _uniform(rng, (fan_in, fan_out), b, f"{name}.W")}
    if bias:
        out[f"{name}.b"] = _uniform(rng, (1, fan_out), b, f"{name}.b")
    return out


def _attn(rng, c, name) -> dict[str, Tensor]:
    out = {}
    for w in ("Wq", "Wk", "Wv", "Wo"):
        out[f"{name}.{w}"] = _uniform(rng, (c, c), math.sqrt(1.0 / c), f"{name}.{w}")
    return out


def _ffn(rng, c, f, name) -> dict[str, Tensor]:
    return {**_linear(rng, c, f, f"{name}.ff1"), **_linear(rng, f, c, f"{name}.ff2")}


def init_stack_params(cfg: StackConfig, n_objects: int, rng: np.random.Generator) -> dict[str, Tensor]:
    c = cfg.C1
    p: dict[str, Tensor] = {}
    for l in range(cfg.enc_layers):
        p.update(_attn(rng, c, f"enc{l}.sa"))
        p.update(_ffn(rng, c, cfg.ffn_dim, f"enc{l}"))
    for tag, n in (("inst", cfg.inst_dec_layers), ("inter", cfg.inter_dec_layers)):
        for l in range(n):
            p.update(_attn(rng, c, f"{tag}{l}.sa"))
            p.update(_attn(rng, c, f"{tag}{l}.ca"))
            p.update(_ffn(rng, c, cfg.ffn_dim, f"{tag}{l}"))
    p["queries"] = _uniform(rng, (cfg.N_q, c), 1.0, "queries")
    # keeps initial HOI logits near unit scale after the fixed logit scaling
    p["head.proj"] = _uniform(rng, (c, cfg.d), math.sqrt(3.0 / c) / LOGIT_SCALE, "head.proj")
    p.update(_linear(rng, c, n_objects + 1, "head.obj"))
    for box in ("hbox", "obox"):
        p.update(_linear(rng, c, c, f"head.{box}1"))
        p.update(_linear(rng, c, c, f"head.{box}2"))
        p.update(_linear(rng, c, 4, f"head.{box}3"))
    return p


# -------------------------------------------------------------------- blocks


def linear(x: Tensor, p: dict[str, Tensor], name: str) -> Tensor:
    y = x @ p[f"{name}.W"]
    b = p.get(f"{name}.b")
    if b is not None:
        y = y + nx.expand(b, y.shape)
    return y


def multihead_attention(q_in: Tensor, k_in: Tensor, v_in: Tensor, p: dict[str, Tensor],
                        name: str, heads: int, record: list | None = None) -> Tensor:
    n, c = q_in.shape
    m = k_in.shape[0]
    dh = c // heads

    def split(x, rows):
        return nx.transpose(nx.reshape(x, (rows, heads, dh)), (1, 0, 2))

    q = split(q_in @ p[f"{name}.Wq"], n)
    k = split(k_in @ p[f"{name}.Wk"], m)
    v = split(v_in @ p[f"{name}.Wv"], m)
    att = nx.softmax_axis(nx.scale(q @ nx.transpose(k), 1.0 / math.sqrt(dh)), axis=2)
    if record is not None:
        record.append(att.data)
    out = nx.reshape(nx.transpose(att @ v, (1, 0, 2)), (n, c))
    return out @ p[f"{name}.Wo"]


def _ffn_block(x: Tensor, p, name) -> Tensor:
    return linear(nx.relu(linear(x, p, f"{name}.ff1")), p, f"{name}.ff2")


def encode(v_b, cfg: StackConfig, params: dict[str, Tensor], use_positions: bool = True,
           record: list | None = None) -> Tensor:
    """Vanilla transformer encoder over the grid tokens; returns C1 x L."""
    v_b = nx.as_tensor(v_b)
    if v_b.shape != (cfg.C1, cfg.L):
        raise ShapeError(f"encode: expected ({cfg.C1}, {cfg.L}), got {v_b.shape}")
    x = nx.transpose(v_b)
    if use_positions:
        x = x + Tensor(sine_positions(cfg))
    for l in range(cfg.enc_layers):
        a = multihead_attention(x, x, x, params, f"enc{l}.sa", cfg.heads, record)
        x = nx.layer_norm(x + a, axis=1)
        x = nx.layer_norm(x + _ffn_block(x, params, f"enc{l}"), axis=1)
    return nx.transpose(x)


def _decoder_layer(t, mem, mem_k, p, name, heads, record):
    t = nx.layer_norm(t + multihead_attention(t, t, t, p, f"{name}.sa", heads, record), axis=1)
    t = nx.layer_norm(t + multihead_attention(t, mem_k, mem, p, f"{name}.ca", heads, record), axis=1)
    return nx.layer_norm(t + _ffn_block(t, p, name), axis=1)


def decode(f_i, cfg: StackConfig, params: dict[str, Tensor], use_positions: bool = True,
           record: list | None = None, return_instance: bool = False):
    """Instance decoder then interaction decoder over memory ``f_i`` (C1 x L).

    Returns the N_q x C1 interaction embeddings (and the instance-decoder
    output when ``return_instance``).
    """
    f_i = nx.as_tensor(f_i)
    if f_i.shape != (cfg.C1, cfg.L):
        raise ShapeError(f"decode: expected ({cfg.C1}, {cfg.L}), got {f_i.shape}")
    mem = nx.transpose(f_i)
    mem_k = mem + Tensor(sine_positions(cfg)) if use_positions else mem
    t = params["queries"]
    for l in range(cfg.inst_dec_layers):
        t = _decoder_layer(t, mem, mem_k, params, f"inst{l}", cfg.heads, record)
    inst = t
    for l in range(cfg.inter_dec_layers):
        t = _decoder_layer(t, mem, mem_k, params, f"inter{l}", cfg.heads, record)
    return (t, inst) if return_instance else t


@dataclass
class Predictions:
    hoi_logits: Tensor  # N_q x (S or C)
    obj_logits: Tensor  # N_q x (N + 1), last column is no-object
    human_box: Tensor  # N_q x 4, cxcywh in [0, 1]
    object_box: Tensor
    mode: str = "train"

    def detached(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k).data for k in ("hoi_logits", "obj_logits", "human_box", "object_box")}


def _box_head(x, p, name) -> Tensor:
    h = nx.relu(linear(x, p, f"{name}1"))
    h = nx.relu(linear(h, p, f"{name}2"))
    return nx.sigmoid(linear(h, p, f"{name}3"))


def predict(f_d: Tensor, class_embed, params: dict[str, Tensor], mode: str = "train",
            expected_width: int | None = None) -> Predictions:
    """HOI logits against frozen class embeddings plus object and box heads."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    ce = nx.as_tensor(class_embed)
    if expected_width is not None and ce.shape[0] != expected_width:
        raise ShapeError(f"{mode} classifier needs {expected_width} rows, got {ce.shape[0]}")
    if ce.shape[1] != params["head.proj"].shape[1]:
        raise ShapeError(f"class embeddings have dim {ce.shape[1]}, "
                         f"projection gives {params['head.proj'].shape[1]}")
    proj = f_d @ params["head.proj"]
    hoi = nx.scale(proj @ nx.transpose(ce), LOGIT_SCALE)
    obj = linear(f_d, params, "head.obj")
    return Predictions(hoi, obj, _box_head(f_d, params, "head.hbox"),
                       _box_head(f_d, params, "head.obox"), mode)


@dataclass
class Detection:
    human_box: np.ndarray
    object_box: np.ndarray
    hoi_class: int
    score: float
    slot: int = -1

    def as_dict(self) -> dict:
        return {"human_box": [float(v) for v in self.human_box],
                "object_box": [float(v) for v in self.object_box],
                "hoi_class": int(self.hoi_class), "score": float(self.score), "slot": self.slot}


def detection_scores(preds: Predictions, class_objects) -> np.ndarray:
    """N_q x C matrix sigmoid(hoi) * P(object of class)."""
    obj_p = softmax(preds.obj_logits.data, axis=1)
    return expit(preds.hoi_logits.data) * obj_p[:, np.asarray(class_objects)]


def postprocess(preds: Predictions, taxonomy, top_n: int = 100) -> list[Detection]:
    if preds.mode != "eval":
        raise ValueError("postprocess expects eval-mode predictions")
    n_cls = preds.hoi_logits.shape[1]
    if n_cls != taxonomy.n_classes:
        raise ShapeError(f"eval logits cover {n_cls} classes, taxonomy has {taxonomy.n_classes}")
    scores = detection_scores(preds, [o for _, o in taxonomy.hoi_classes])
    flat = scores.reshape(-1)
    order = np.lexsort((np.arange(flat.size), -flat))[:top_n]
    hb, ob = preds.human_box.data, preds.object_box.data
    return [Detection(hb[k // n_cls].copy(), ob[k // n_cls].copy(), int(k % n_cls),
                      float(flat[k]), int(k // n_cls)) for k in order]


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(params: dict[str, Tensor], path) -> None:
    buf = bytearray(FHCK_MAGIC)
    buf += struct.pack("<II", FHCK_VERSION, len(params))
    for name, t in params.items():
        enc = name.encode("utf-8")
        buf += struct.pack("<H", len(enc)) + enc
        buf += struct.pack("<B", t.ndim)
        buf += struct.pack(f"<{t.ndim}I", *t.shape)
        buf += np.ascontiguousarray(t.data, dtype="<f8").tobytes()
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path) -> dict[str, Tensor]:
    blob = Path(path).read_bytes()
    if blob[:4] != FHCK_MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {blob[:4]!r}")
    try:
        version, count = struct.unpack_from("<II", blob, 4)
        if version != FHCK_VERSION:
            raise CheckpointFormatError(f"{path}: unsupported version {version}")
        pos = 12
        out: dict[str, Tensor] = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            size = int(np.prod(shape)) if rank else 1
            if pos + 8 * size > len(blob):
                raise CheckpointFormatError(f"{path}: truncated tensor {name!r}")
            arr = np.frombuffer(blob, dtype="<f8", count=size, offset=pos).reshape(shape)
            pos += 8 * size
            out[name] = Tensor(arr.astype(np.float64), requires_grad=True, name=name)
    except struct.error:
        raise CheckpointFormatError(f"{path}: truncated") from None
    if pos != len(blob):
        raise CheckpointFormatError(f"{path}: {len(blob) - pos} trailing bytes")
    return out
