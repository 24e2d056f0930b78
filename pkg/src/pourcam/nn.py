"""Small encoder-classifier: four strided stages, one self-attention block, linear head.

Stage strides are 4, 8, 16 and 16 relative to the input. The last stage is
refined by single-head scaled dot-product attention over its token grid,
and the head is one linear layer on globally average-pooled F4, so its
weights double as CAM weights.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .autograd import Value, parameter, sigmoid

MAGIC = b"POURCAM\x00"
FORMAT_VERSION = 1
STRIDES = (4, 8, 16, 16)
ACTIVATIONS = {"relu": Value.relu, "tanh": Value.tanh}


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class NetConfig:
    d1: int = 16
    d2: int = 32
    d3: int = 32
    d: int = 32
    d_k: int = 32
    activation: str = "relu"
    attn_scale: float = 1.0
    attn_centered: bool = True
    init_seed: int = 0


@dataclass
class FeatureStack:
    F1: Value
    F2: Value
    F3: Value
    F4: Value


class EncoderParams:
    """Named parameter blocks, in a fixed manifest order."""

    BACKBONE = ("s1.w", "s1.b", "s2.w", "s2.b", "s3.w", "s3.b", "s4.w", "s4.b", "attn.wq", "attn.wk", "attn.wv")
    HEAD = ("head.w", "head.b")

    def __init__(self, tensors: dict, config: NetConfig):
        self.config = config
        self.tensors = {k: v if isinstance(v, Value) else parameter(v, name=k) for k, v in tensors.items()}
        missing = set(self.BACKBONE + self.HEAD) - set(self.tensors)
        if missing:
            raise CheckpointError(f"missing parameter blocks: {sorted(missing)}")

    def __getitem__(self, k):
        return self.tensors[k]

    def names(self):
        return list(self.BACKBONE + self.HEAD)

    def items(self):
        return [(k, self.tensors[k]) for k in self.names()]

    def group(self, name):
        return [self.tensors[k] for k in (self.BACKBONE if name == "backbone" else self.HEAD)]

    def zero_grad(self):
        for p in self.tensors.values():
            p.grad = None

    def copy(self):
        return EncoderParams({k: v.data.copy() for k, v in self.items()}, self.config)

    def n_params(self):
        return sum(v.size for _, v in self.items())

    @property
    def head(self):
        return self.tensors["head.w"], self.tensors["head.b"]


def init_params(config: NetConfig = NetConfig(), zero_bias=True) -> EncoderParams:
    rng = np.random.default_rng(config.init_seed)
    c = config

    def lecun(fan_in, fan_out):
        return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))

    t = {
        "s1.w": lecun(4 * 4 * 3, c.d1), "s1.b": np.zeros(c.d1),
        "s2.w": lecun(2 * 2 * c.d1, c.d2), "s2.b": np.zeros(c.d2),
        "s3.w": lecun(2 * 2 * c.d2, c.d3), "s3.b": np.zeros(c.d3),
        "s4.w": lecun(c.d3, c.d), "s4.b": np.zeros(c.d),
        "attn.wq": lecun(c.d, c.d_k), "attn.wk": lecun(c.d, c.d_k), "attn.wv": lecun(c.d, c.d),
        "head.w": rng.normal(0.0, 0.01, size=c.d), "head.b": np.zeros(1),
    }
    if not zero_bias:
        for k in t:
            if k.endswith(".b"):
                t[k] = rng.normal(0.0, 0.1, size=t[k].shape)
    return EncoderParams(t, config)


def patch_conv(x: Value, w: Value, b: Value, p: int, stage: str) -> Value:
    """Non-overlapping p x p convolution with stride p on a B x H x W x C map."""
    B, H, W, C = x.shape
    if H % p or W % p:
        raise ValueError(f"{stage}: spatial size {H}x{W} is not divisible by patch size {p}")
    if w.shape[0] != p * p * C:
        raise ValueError(f"{stage}: kernel expects {w.shape[0] // (p * p)} input channels, got {C}")
    h, ww = H // p, W // p
    x = x.reshape(B, h, p, ww, p, C).transpose(0, 1, 3, 2, 4, 5).reshape(B, h, ww, p * p * C)
    return x @ w + b


def attention(Q, K, V):
    """Softmax(Q K^T / sqrt(d_k)) V over the last two axes.

    Works on plain arrays or on :class:`Value` nodes.
    """
    arrays = [q.data if isinstance(q, Value) else np.asarray(q, dtype=np.float64) for q in (Q, K, V)]
    for name, a in zip("QKV", arrays):
        if not np.isfinite(a).all():
            raise FloatingPointError(f"attention input {name} has non-finite entries")
    q, k, v = arrays
    if q.shape[-1] != k.shape[-1] or q.shape[-1] < 1:
        raise ValueError(f"query/key dims differ: {q.shape} vs {k.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise ValueError(f"key/value token counts differ: {k.shape} vs {v.shape}")
    d_k = q.shape[-1]
    if not any(isinstance(a, Value) for a in (Q, K, V)):
        s = q @ np.swapaxes(k, -1, -2) / np.sqrt(d_k)
        s = np.exp(s - s.max(-1, keepdims=True))
        return (s / s.sum(-1, keepdims=True)) @ v
    Q, K, V = (a if isinstance(a, Value) else Value(a) for a in (Q, K, V))
    Kt = K.transpose(*range(K.ndim - 2), K.ndim - 1, K.ndim - 2)
    return ((Q @ Kt) * (1.0 / np.sqrt(d_k))).softmax(-1) @ V


def encoder_forward(images, params: EncoderParams) -> FeatureStack:
    """Images B x H x W x 3 (or a single H x W x 3) to the four-level feature stack."""
    x = images if isinstance(images, Value) else Value(np.asarray(images, dtype=np.float64))
    if x.ndim == 3:
        x = x.reshape(1, *x.shape)
    if x.ndim != 4 or x.shape[-1] != 3:
        raise ValueError(f"input: expected B x H x W x 3 images, got shape {x.shape}")
    if x.shape[1] % 16 or x.shape[2] % 16:
        raise ValueError(f"input: H and W must be divisible by 16, got {x.shape[1]}x{x.shape[2]}")
    P = params
    act = ACTIVATIONS[params.config.activation]
    F1 = act(patch_conv(x, P["s1.w"], P["s1.b"], 4, "stage1"))
    F2 = act(patch_conv(F1, P["s2.w"], P["s2.b"], 2, "stage2"))
    F3 = act(patch_conv(F2, P["s3.w"], P["s3.b"], 2, "stage3"))
    X = act(patch_conv(F3, P["s4.w"], P["s4.b"], 1, "stage4"))
    B, h, w, d = X.shape
    tok = X.reshape(B, h * w, d)
    att = attention(tok @ P["attn.wq"], tok @ P["attn.wk"], tok @ P["attn.wv"])
    if params.config.attn_centered:
        # zero token-mean: attention redistributes context but adds no global offset
        att = att - att.mean(axis=1, keepdims=True)
    scale = params.config.attn_scale
    F4 = (tok + (att if scale == 1.0 else att * scale)).reshape(B, h, w, d)
    return FeatureStack(F1, F2, F3, F4)


def classify(F4, head) -> Value:
    """Logit ``w . GAP(F4) + b`` per image."""
    w, b = head
    F4 = F4 if isinstance(F4, Value) else Value(F4)
    w = w if isinstance(w, Value) else Value(w)
    b = b if isinstance(b, Value) else Value(b)
    if F4.size == 0:
        raise ValueError("F4 is empty")
    if F4.shape[-1] != w.shape[0]:
        raise ValueError(f"head has {w.shape[0]} weights but F4 has {F4.shape[-1]} channels")
    if F4.ndim == 3:
        return F4.mean(axis=(0, 1)) @ w + b.reshape(())
    return F4.mean(axis=(1, 2)) @ w + b.reshape(())


def predict_proba(images, params: EncoderParams) -> np.ndarray:
    logits = classify(encoder_forward(images, params).F4, params.head)
    return np.atleast_1d(sigmoid(logits.data))


class CamModel:
    """Callable image -> normalised CAM at F4 resolution."""

    def __init__(self, params: EncoderParams):
        self.params = params

    def __call__(self, image):
        from .camseg import cam_from_features, minmax_normalize

        H, W = image.shape[:2]
        ph, pw = (-H) % 16, (-W) % 16
        if ph or pw:
            image = np.pad(image, ((0, ph), (0, pw), (0, 0)), mode="edge")
        F4 = encoder_forward(image, self.params).F4.data[0]
        cam = minmax_normalize(cam_from_features(F4, self.params["head.w"].data))
        if ph or pw:
            cam = cam[: int(np.ceil(H / 16)), : int(np.ceil(W / 16))]
        return cam


# checkpoints ------------------------------------------------------------------

def fingerprint(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def save_checkpoint(path, params: EncoderParams, extra: dict | None = None) -> None:
    """Header (magic, version, JSON manifest) then little-endian float32 blocks.

    Written to a temporary file and renamed into place.
    """
    layers = [{"name": k, "shape": list(v.shape)} for k, v in params.items()]
    header = {"layers": layers, "net": asdict(params.config), "extra": extra or {}}
    hjson = json.dumps(header, sort_keys=True).encode("utf-8")
    body = b"".join(np.ascontiguousarray(v.data, dtype="<f4").tobytes() for _, v in params.items())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC + struct.pack("<II", FORMAT_VERSION, len(hjson)) + hjson + body)
    tmp.replace(path)


def read_checkpoint_header(path) -> dict:
    with open(path, "rb") as fh:
        head = fh.read(16)
        if len(head) < 16 or head[:8] != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
        version, n = struct.unpack("<II", head[8:])
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported format version {version}")
        return json.loads(fh.read(n).decode("utf-8"))


def load_checkpoint(path):
    """Returns ``(params, header)``."""
    raw = Path(path).read_bytes()
    header = read_checkpoint_header(path)
    off = 16 + struct.unpack("<I", raw[12:16])[0]
    tensors = {}
    for layer in header["layers"]:
        n = int(np.prod(layer["shape"], dtype=np.int64))
        block = np.frombuffer(raw, dtype="<f4", count=n, offset=off)
        if block.size != n:
            raise CheckpointError(f"{path}: truncated block {layer['name']}")
        tensors[layer["name"]] = block.astype(np.float64).reshape(layer["shape"])
        off += 4 * n
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")
    return EncoderParams(tensors, NetConfig(**header["net"])), header
