"""Training loop: classification warmup, then classification plus feature contrast.

Optimisation is Adam with decoupled weight decay; the classification head
runs at ``lr_head_multiplier`` times the backbone rate.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import camseg, nn, wsloss
from .autograd import sigmoid
from .synthgen import SyntheticSample

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    total_iters: int = 3000
    warmup_iters: int = 300
    lr_backbone: float = 1e-3
    lr_head_multiplier: float = 10.0
    weight_decay: float = 0.01
    batch_size: int = 4
    epsilon: float = 0.7
    crop_size: int = 64
    rescale_range: tuple = (1.0, 1.1)
    hflip_prob: float = 0.5
    rng_seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    use_pos: bool = True
    use_neg: bool = True
    d: int = 32
    activation: str = "relu"
    attn_scale: float = 1.0
    attn_centered: bool = True

    def __post_init__(self):
        if self.warmup_iters > self.total_iters:
            raise ValueError("warmup_iters exceeds total_iters")
        if self.rescale_range[0] > self.rescale_range[1]:
            raise ValueError("rescale_range lower bound exceeds upper bound")
        if min(self.lr_backbone, self.lr_head_multiplier) <= 0:
            raise ValueError("learning rates must be positive")
        if self.batch_size < 2 or self.crop_size % 16:
            raise ValueError("batch_size must be >= 2 and crop_size a multiple of 16")

    @classmethod
    def full_scale(cls, **kw):
        """Schedule used on real data with a pretrained backbone."""
        return cls(**{**dict(total_iters=14000, warmup_iters=2000, lr_backbone=6e-5, batch_size=12, crop_size=512), **kw})

    @property
    def variant(self):
        return {(True, True): "full", (False, True): "no_pos", (True, False): "no_neg", (False, False): "cls_only"}[
            (self.use_pos, self.use_neg)]

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_mapping(cls, m: dict):
        """Build from string-valued key/value pairs (config files, CLI)."""
        kinds = {f.name: f.type for f in fields(cls)}
        out = {}
        for k, v in m.items():
            if k not in kinds:
                raise KeyError(f"unknown training option {k!r}")
            if not isinstance(v, str):
                out[k] = tuple(v) if isinstance(v, list) else v
            elif kinds[k] == "bool":
                out[k] = v.strip().lower() in ("1", "true", "yes", "on")
            elif kinds[k] == "int":
                out[k] = int(v)
            elif kinds[k] == "float":
                out[k] = float(v)
            elif kinds[k] == "tuple":
                out[k] = tuple(float(x) for x in v.replace(",", " ").split())
            else:
                out[k] = v
        return cls(**out)


def net_config(config: TrainConfig) -> nn.NetConfig:
    return nn.NetConfig(d=config.d, d_k=config.d, activation=config.activation, attn_scale=config.attn_scale,
                        attn_centered=config.attn_centered,
                        init_seed=config.rng_seed)


# augmentation -------------------------------------------------------------------

def _resize_bilinear(arr, H, W):
    h, w = arr.shape[:2]
    r0, r1, fr = camseg._interp_axis(h, H)
    c0, c1, fc = camseg._interp_axis(w, W)
    fc = fc[:, None] if arr.ndim == 3 else fc
    fr = fr[:, None, None] if arr.ndim == 3 else fr[:, None]
    top = arr[r0][:, c0] * (1 - fc) + arr[r0][:, c1] * fc
    bot = arr[r1][:, c0] * (1 - fc) + arr[r1][:, c1] * fc
    return top * (1 - fr) + bot * fr


def augment_params(rng, H, W, config: TrainConfig):
    scale = float(rng.uniform(*config.rescale_range))
    Hs, Ws = int(round(H * scale)), int(round(W * scale))
    c = config.crop_size
    if c > min(Hs, Ws):
        raise ValueError(f"crop {c} is larger than the rescaled image {Hs}x{Ws}")
    flip = bool(rng.random() < config.hflip_prob)
    top = int(rng.integers(0, Hs - c + 1))
    left = int(rng.integers(0, Ws - c + 1))
    return {"scale": scale, "flip": flip, "top": top, "left": left, "size": c}


def apply_augment(image, mask, p):
    """Same rescale, flip and crop for image (bilinear) and mask (bilinear, then >= 0.5)."""
    H, W = mask.shape
    Hs, Ws = int(round(H * p["scale"])), int(round(W * p["scale"]))
    if (Hs, Ws) != (H, W):
        image = _resize_bilinear(image, Hs, Ws)
        mask = _resize_bilinear(mask.astype(np.float64), Hs, Ws) >= 0.5
    if p["flip"]:
        image, mask = image[:, ::-1], mask[:, ::-1]
    t, l, c = p["top"], p["left"], p["size"]
    if t + c > image.shape[0] or l + c > image.shape[1]:
        raise ValueError(f"crop {c} at ({t}, {l}) exceeds image {image.shape[:2]}")
    return np.ascontiguousarray(image[t:t + c, l:l + c]), np.ascontiguousarray(mask[t:t + c, l:l + c])


def augment(sample: SyntheticSample, rng, config: TrainConfig) -> SyntheticSample:
    H, W = sample.gt_mask.shape
    p = augment_params(rng, H, W, config)
    img, mask = apply_augment(sample.image, sample.gt_mask, p)
    return replace(sample, image=img, gt_mask=mask, stream_points=None, meta={**sample.meta, "augment": p})


# optimiser ---------------------------------------------------------------------------

class AdamW:
    """Adam moments with decoupled weight decay and per-group learning rates."""

    def __init__(self, groups, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.groups = [(list(params), lr) for params, lr in groups]
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for params, lr in self.groups:
            for p in params:
                g = p.grad if p.grad is not None else np.zeros_like(p.data)
                key = id(p)
                m = self.m.get(key, 0.0) * self.b1 + (1 - self.b1) * g
                v = self.v.get(key, 0.0) * self.b2 + (1 - self.b2) * g * g
                self.m[key], self.v[key] = m, v
                p.data = p.data - lr * self.wd * p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(params: nn.EncoderParams, config: TrainConfig) -> AdamW:
    return AdamW(
        [(params.group("backbone"), config.lr_backbone),
         (params.group("head"), config.lr_backbone * config.lr_head_multiplier)],
        betas=(config.beta1, config.beta2), eps=config.adam_eps, weight_decay=config.weight_decay)


# one step -------------------------------------------------------------------------------

def compute_losses(params: nn.EncoderParams, images, labels, config: TrainConfig, contrast: bool):
    """Forward pass and loss terms. Contrast terms use positive images only."""
    feats = nn.encoder_forward(images, params)
    logits = nn.classify(feats.F4, params.head)
    labels = np.asarray(labels, dtype=np.float64)
    l_cls = wsloss.cls_loss(logits, labels)
    l_pos = l_neg = wsloss.Value(0.0)
    ms, ns = [], []
    if contrast and (config.use_pos or config.use_neg):
        w = params["head.w"].data
        pos_idx = np.flatnonzero(labels == 1)
        for b in pos_idx:
            cam = camseg.minmax_normalize(camseg.cam_from_features(feats.F4.data[b], w))
            part = wsloss.partition_features(feats.F4[b], cam, config.epsilon)
            ms.append(part.m)
            ns.append(part.n)
            if config.use_pos:
                l_pos = l_pos + wsloss.pos_loss(part)
            if config.use_neg:
                l_neg = l_neg + wsloss.neg_loss(part)
        k = max(len(pos_idx), 1)
        l_pos, l_neg = l_pos * (1.0 / k), l_neg * (1.0 / k)
    total = wsloss.total_loss(l_cls, l_pos, l_neg, contrast, config.use_pos, config.use_neg)
    acc = float(np.mean((sigmoid(logits.data) > 0.5) == (labels == 1)))
    stats = {"m": float(np.mean(ms)) if ms else 0.0, "n": float(np.mean(ns)) if ns else 0.0, "acc": acc}
    return total, l_cls, l_pos, l_neg, stats


def train_step(params: nn.EncoderParams, opt: AdamW, batch, config: TrainConfig, it: int):
    """One optimisation step; returns the metrics record."""
    images = np.stack([s.image for s in batch])
    labels = np.array([s.label for s in batch])
    contrast = it >= config.warmup_iters
    params.zero_grad()
    total, l_cls, l_pos, l_neg, stats = compute_losses(params, images, labels, config, contrast)
    terms = {"l_cls": float(l_cls.data), "l_pos": float(l_pos.data), "l_neg": float(l_neg.data), "total": float(total.data)}
    if not all(np.isfinite(v) for v in terms.values()):
        raise TrainingError(f"non-finite loss at iter {it}: {json.dumps(terms)}")
    total.backward()
    opt.step()
    return {"iter": it, "l_cls": terms["l_cls"], "l_pos": terms["l_pos"], "l_neg": terms["l_neg"],
            "m": stats["m"], "n": stats["n"], "acc": stats["acc"]}


# loop --------------------------------------------------------------------------------------

@dataclass
class Checkpoint:
    params: nn.EncoderParams
    config: TrainConfig
    metrics: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    @property
    def fingerprint(self):
        return nn.fingerprint(self.config.to_dict())

    def header_extra(self):
        return {"train_config": self.config.to_dict(), "fingerprint": self.fingerprint,
                "iters_done": len(self.metrics), **self.extra}

    def save(self, path):
        nn.save_checkpoint(path, self.params, self.header_extra())

    @classmethod
    def load(cls, path):
        params, header = nn.load_checkpoint(path)
        extra = dict(header.get("extra", {}))
        cfg = extra.pop("train_config", None)
        config = TrainConfig.from_mapping(cfg) if cfg else TrainConfig()
        return cls(params, config, [], extra)

    def cam_model(self):
        return nn.CamModel(self.params)


class _ClassSampler:
    """Cycles through shuffled per-class orders so every batch is label-balanced."""

    def __init__(self, samples, rng):
        self.rng = rng
        self.pools = {lab: [s for s in samples if s.label == lab] for lab in (0, 1)}
        self.order = {lab: [] for lab in (0, 1)}

    def draw(self, label):
        if not self.order[label]:
            self.order[label] = list(self.rng.permutation(len(self.pools[label])))
        return self.pools[label][self.order[label].pop()]

    def batch(self, size):
        labels = [1] * (size - size // 2) + [0] * (size // 2)
        labels = [labels[i] for i in self.rng.permutation(size)]
        return [self.draw(lab) for lab in labels]


def train(dataset, config: TrainConfig = TrainConfig(), metrics_path=None, init: nn.EncoderParams | None = None) -> Checkpoint:
    samples = list(dataset)
    labels = {s.label for s in samples}
    if labels != {0, 1}:
        raise ValueError(f"training needs both labels, dataset has only {sorted(labels)}")
    rng = np.random.default_rng(config.rng_seed)
    params = init.copy() if init is not None else nn.init_params(net_config(config))
    opt = make_optimizer(params, config)
    sampler = _ClassSampler(samples, rng)
    metrics = []
    fh = open(metrics_path, "w", encoding="utf-8") if metrics_path else None
    try:
        for it in range(config.total_iters):
            batch = [augment(s, rng, config) for s in sampler.batch(config.batch_size)]
            rec = train_step(params, opt, batch, config, it)
            metrics.append(rec)
            if fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
            if it % 500 == 0:
                log.info("iter %d l_cls %.4f l_pos %.4f l_neg %.4f", it, rec["l_cls"], rec["l_pos"], rec["l_neg"])
    finally:
        if fh:
            fh.close()
    return Checkpoint(params, config, metrics)


def accuracy(params: nn.EncoderParams, samples, batch=32) -> float:
    hits = 0
    for i in range(0, len(samples), batch):
        chunk = samples[i:i + batch]
        p = nn.predict_proba(np.stack([s.image for s in chunk]), params)
        hits += int(((p > 0.5) == np.array([s.label == 1 for s in chunk])).sum())
    return hits / len(samples)


VARIANTS = {"cls_only": (False, False), "no_neg": (True, False), "no_pos": (False, True), "full": (True, True)}


def run_ablation(train_set, test_set, config: TrainConfig = TrainConfig(), seeds=(0, 1, 2), variants=tuple(VARIANTS)):
    """mIoU per variant and seed on the positive test scenes."""
    positives = [s for s in test_set if s.label == 1]
    table = {}
    for name in variants:
        use_pos, use_neg = VARIANTS[name]
        scores = []
        for seed in seeds:
            cfg = replace(config, use_pos=use_pos, use_neg=use_neg, rng_seed=seed)
            ckpt = train(train_set, cfg)
            scores.append(camseg.miou(ckpt.cam_model(), positives))
            log.info("ablation %s seed %d: mIoU %.4f", name, seed, scores[-1])
        table[name] = scores
    return table


def read_kv_config(path) -> dict:
    """Flat ``key = value`` file, optionally split into ``[sections]``; sections are flattened."""
    import configparser

    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    cp = configparser.ConfigParser()
    text = path.read_text(encoding="utf-8")
    if not text.lstrip().startswith("["):
        text = "[DEFAULT]\n" + text
    cp.read_string(text)
    out = dict(cp.defaults())
    for sec in cp.sections():
        out.update({k: v for k, v in cp.items(sec, raw=True)})
    return out
