"""Class activation maps, masks, thinning and the IoU evaluation protocol."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SIGMAS = (0.5, 0.7)


def cam_from_features(F4, w) -> np.ndarray:
    """Raw activation map ``max(0, sum_j w_j F4[..., j])`` (unnormalised)."""
    F4 = np.asarray(F4, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64).reshape(-1)
    if F4.shape[-1] != w.shape[0]:
        raise ValueError(f"feature dim {F4.shape[-1]} does not match head weights of length {w.shape[0]}")
    return np.maximum(F4 @ w, 0.0)


def minmax_normalize(raw) -> np.ndarray:
    """Map to [0, 1]; a constant map carries no evidence and becomes all zeros."""
    raw = np.asarray(raw, dtype=np.float64)
    lo, hi = raw.min(), raw.max()
    if hi == lo:
        return np.zeros_like(raw)
    out = (raw - lo) / (hi - lo)
    return np.clip(out, 0.0, 1.0)


def _interp_axis(n_in, n_out):
    # half-pixel centers (align_corners=False), clamped at the borders
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def upsample(cam, H: int, W: int) -> np.ndarray:
    """Bilinear resize of a 2-D map to (H, W)."""
    cam = np.asarray(cam, dtype=np.float64)
    h, w = cam.shape
    if H < h or W < w:
        raise ValueError(f"upsample target {H}x{W} is smaller than source {h}x{w}")
    if (h, w) == (H, W):
        return cam.copy()
    r0, r1, fr = _interp_axis(h, H)
    c0, c1, fc = _interp_axis(w, W)
    top = cam[r0][:, c0] * (1 - fc) + cam[r0][:, c1] * fc
    bot = cam[r1][:, c0] * (1 - fc) + cam[r1][:, c1] * fc
    out = top * (1 - fr)[:, None] + bot * fr[:, None]
    return np.clip(out, 0.0, 1.0)


def threshold_mask(cam, sigma: float) -> np.ndarray:
    if not 0.0 <= sigma <= 1.0:
        raise ValueError(f"sigma must lie in [0, 1], got {sigma}")
    return np.asarray(cam) >= sigma


def _neighbours(img):
    """P2..P9 of every pixel (clockwise from north) on a zero-padded copy."""
    p = np.pad(img, 1)
    c = p[1:-1, 1:-1]
    H, W = c.shape
    P2 = p[0:H, 1:W + 1]
    P3 = p[0:H, 2:W + 2]
    P4 = p[1:H + 1, 2:W + 2]
    P5 = p[2:H + 2, 2:W + 2]
    P6 = p[2:H + 2, 1:W + 1]
    P7 = p[2:H + 2, 0:W]
    P8 = p[1:H + 1, 0:W]
    P9 = p[0:H, 0:W]
    return P2, P3, P4, P5, P6, P7, P8, P9


def _zs_subiteration(img, first):
    P2, P3, P4, P5, P6, P7, P8, P9 = nb = _neighbours(img)
    B = sum(n.astype(np.uint8) for n in nb)
    seq = nb + (P2,)
    A = sum(((~a) & b).astype(np.uint8) for a, b in zip(seq[:-1], seq[1:]))
    cond = img & (B >= 2) & (B <= 6) & (A == 1)
    if first:
        cond &= ~(P2 & P4 & P6) & ~(P4 & P6 & P8)
    else:
        cond &= ~(P2 & P4 & P8) & ~(P2 & P6 & P8)
    return cond


def skeletonize(mask) -> np.ndarray:
    """Zhang-Suen two-subiteration thinning, run until nothing changes."""
    img = np.asarray(mask).astype(bool).copy()
    while True:
        changed = False
        for first in (True, False):
            drop = _zs_subiteration(img, first)
            if drop.any():
                img[drop] = False
                changed = True
        if not changed:
            return img


def iou(pred, gt) -> float:
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    union = np.count_nonzero(pred | gt)
    if union == 0:
        return 1.0
    return np.count_nonzero(pred & gt) / union


@dataclass
class EvalReport:
    miou: float
    per_sigma: dict
    records: list = field(default_factory=list)

    def to_dict(self):
        return {"miou": self.miou, "per_sigma": {str(k): v for k, v in self.per_sigma.items()}, "n_samples": len(self.records) // max(len(self.per_sigma), 1)}

    def write_jsonl(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def evaluate(model, dataset, sigmas=SIGMAS) -> EvalReport:
    """Threshold each upsampled CAM at every sigma and average IoU against the GT.

    ``model`` maps an H x W x 3 image to a normalised CAM at any resolution
    not exceeding the image; ``dataset`` yields objects with ``image``,
    ``gt_mask`` and optionally ``id``.
    """
    samples = list(dataset)
    if not samples:
        raise ValueError("cannot evaluate on an empty dataset")
    per = {s: [] for s in sigmas}
    records = []
    for k, s in enumerate(samples):
        H, W = s.gt_mask.shape
        cam = upsample(model(s.image), H, W)
        sid = getattr(s, "id", None) or str(k)
        for sigma in sigmas:
            v = iou(threshold_mask(cam, sigma), s.gt_mask)
            per[sigma].append(v)
            records.append({"sample_id": sid, "sigma": sigma, "iou": v})
    per_sigma = {s: float(np.mean(v)) for s, v in per.items()}
    return EvalReport(float(np.mean(list(per_sigma.values()))), per_sigma, records)


def miou(model, dataset, sigmas=SIGMAS) -> float:
    return evaluate(model, dataset, sigmas).miou


def save_mask(path, mask) -> None:
    from PIL import Image

    with open(path, "wb") as fh:
        Image.fromarray(np.asarray(mask).astype(bool)).save(fh, format="PPM")


def load_mask(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.array(im.convert("1")).astype(bool)


def save_cam(path, cam) -> None:
    """16-bit greyscale export of a [0, 1] map."""
    from PIL import Image

    q = np.round(np.clip(np.asarray(cam, dtype=np.float64), 0, 1) * 65535).astype(np.uint16)
    with open(path, "wb") as fh:
        Image.fromarray(q).save(fh, format="PPM")


def load_cam(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.array(im).astype(np.float64) / 65535.0
