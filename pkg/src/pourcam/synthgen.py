"""Procedural pouring scenes with exact liquid masks.

A scene is a source container in a pouring pose seen by a pinhole camera.
Positive scenes add a liquid stream leaving the container lip; negative
scenes are the same draw without the stream. The stream centerline is a
projectile curve inside the gravity-aligned pouring plane, rasterised with
hard edges so the ground-truth mask is exact.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import geom3d
from .geom3d import CameraIntrinsics, Pose

STYLES = ("plain", "textured", "cluttered")
GRAVITY = 9.81
LIQUID_RGB = (0.22, 0.48, 0.92)


class GenerationError(ValueError):
    pass


def _camera_pitch_gravity(pitch_deg):
    a = np.deg2rad(pitch_deg)
    return (0.0, float(np.cos(a)), float(np.sin(a)))


@dataclass(frozen=True)
class SceneConfig:
    image_width: int = 512
    image_height: int = 512
    intrinsics: CameraIntrinsics = CameraIntrinsics(500.0, 500.0, 256.0, 256.0)
    gravity_cam: tuple = _camera_pitch_gravity(15.0)
    # container geometry, meters
    body_radius: tuple = (0.03, 0.045)
    neck_radius: tuple = (0.012, 0.02)
    height: tuple = (0.12, 0.2)
    # pouring pose: bottleneck angle from vertical, heading about gravity, roll about the bottleneck (deg)
    tilt_deg: tuple = (95.0, 130.0)
    yaw_deg: tuple = (-25.0, 25.0)
    roll_deg: tuple = (-8.0, 8.0)
    # where the lip appears, as image fractions, and its depth in meters
    lip_u: tuple = (0.3, 0.7)
    lip_v: tuple = (0.08, 0.25)
    lip_depth: tuple = (0.45, 0.6)
    # stream: width in pixels, initial horizontal speed (m/s, sets curvature), fall height (m)
    stream_width: tuple = (40.0, 70.0)
    spout_speed: tuple = (0.0, 0.5)
    drop: tuple = (0.2, 0.35)
    background_styles: tuple = STYLES
    brightness: tuple = (0.85, 1.15)
    color_jitter: float = 0.08
    rng_seed: int = 0

    def __post_init__(self):
        if self.image_width < 64 or self.image_height < 64:
            raise ValueError("image dims must be at least 64")
        g = np.asarray(self.gravity_cam, dtype=np.float64)
        if g.shape != (3,) or abs(np.linalg.norm(g) - 1.0) >= 1e-9:
            raise ValueError("gravity_cam must be a unit 3-vector")
        for name in ("body_radius", "neck_radius", "height", "tilt_deg", "yaw_deg", "roll_deg", "lip_u",
                     "lip_v", "lip_depth", "stream_width", "spout_speed", "drop", "brightness"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name}: minimum {lo} exceeds maximum {hi}")
        bad = set(self.background_styles) - set(STYLES)
        if bad or not self.background_styles:
            raise ValueError(f"unknown background styles {sorted(bad)}")

    @classmethod
    def desk(cls, size=96, **kw):
        """Small-image preset used for desk-scale training."""
        s = size / 512
        base = dict(image_width=size, image_height=size,
                    intrinsics=CameraIntrinsics(500.0 * s, 500.0 * s, size / 2, size / 2),
                    stream_width=(20.0, 32.0))
        base.update(kw)
        return cls(**base)

    def to_dict(self):
        d = asdict(self)
        d["intrinsics"] = self.intrinsics.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["intrinsics"] = CameraIntrinsics(**d["intrinsics"])
        for k, v in d.items():
            if isinstance(v, list):
                d[k] = tuple(v)
        return cls(**d)


@dataclass
class SyntheticSample:
    image: np.ndarray  # H x W x 3 in [0, 1]
    label: int
    gt_mask: np.ndarray  # H x W bool
    pose: Pose
    intrinsics: CameraIntrinsics
    gravity_cam: np.ndarray
    meta: dict = field(default_factory=dict)
    stream_points: np.ndarray | None = None  # H x W x 3, NaN off the stream
    id: str = ""

    def to_json(self):
        return {
            "id": self.id,
            "label": int(self.label),
            "rotation": self.pose.R.reshape(-1).tolist(),
            "translation": self.pose.t.tolist(),
            "intrinsics": self.intrinsics.to_dict(),
            "gravity": np.asarray(self.gravity_cam).tolist(),
            "seed": self.meta.get("seed"),
            "meta": self.meta,
        }


@dataclass
class StreamSpec:
    """A projectile centerline in the pouring plane."""

    start: np.ndarray
    horizontal: np.ndarray  # unit, in-plane, perpendicular to gravity
    gravity: np.ndarray
    speed: float
    drop: float
    width_px: float

    def centerline(self, n=400):
        y = np.linspace(0.0, self.drop, n)
        along = self.speed * np.sqrt(2.0 * y / GRAVITY)
        return self.start + along[:, None] * self.horizontal + y[:, None] * self.gravity

    def to_dict(self):
        return {"start": self.start.tolist(), "horizontal": self.horizontal.tolist(), "gravity": self.gravity.tolist(),
                "speed": self.speed, "drop": self.drop, "width_px": self.width_px}


def _u(rng, lo_hi):
    lo, hi = lo_hi
    return float(rng.uniform(lo, hi)) if hi > lo else float(lo)


def pouring_pose(g, lip, pour_dir, tilt, roll, height) -> Pose:
    """Container pose whose bottleneck (R_y) points ``tilt`` rad away from up toward ``pour_dir``.

    R_z is the lateral axis; before ``roll`` it is horizontal. The lip sits at
    ``t + height/2 * R_y``.
    """
    g = geom3d.unit(g)
    up = -g
    n0 = geom3d.unit(np.cross(up, pour_dir))
    B0 = np.column_stack([np.cross(up, n0), up, n0])
    R = geom3d.rotation_about(n0, tilt) @ B0
    R = geom3d.rotation_about(R[:, 1], roll) @ R
    R = geom3d.orthonormalize(R)
    t = np.asarray(lip, dtype=np.float64) - 0.5 * height * R[:, 1]
    return Pose(R, t)


def stream_for_pose(pose: Pose, g, lip, speed, drop, width_px) -> StreamSpec:
    """Stream leaving ``lip`` projected into the pouring plane of ``pose``."""
    plane = geom3d.pouring_plane(pose, g)
    g = np.asarray(g, dtype=np.float64)
    start = lip - plane.residual(lip) * plane.normal
    h = geom3d.unit(np.cross(plane.normal, g))
    if h @ pose.Ry < 0:
        h = -h
    return StreamSpec(start, h, g, float(speed), float(drop), float(width_px))


def _segment_distance(px, a, b):
    """Distance from points ``px`` (N, 2) to every segment a[i]-b[i]; returns min over segments."""
    ab = b - a
    L2 = np.maximum((ab**2).sum(1), 1e-18)
    best = np.full(len(px), np.inf)
    for s in range(0, len(a), 64):
        aa, vv, ll = a[s:s + 64], ab[s:s + 64], L2[s:s + 64]
        rel = px[:, None, :] - aa[None]
        t = np.clip((rel * vv[None]).sum(-1) / ll[None], 0.0, 1.0)
        d = rel - t[..., None] * vv[None]
        best = np.minimum(best, np.sqrt((d**2).sum(-1)).min(1))
    return best


def _decimate(uv, step=1.0):
    """Keep vertices about ``step`` px apart along the path, always keeping both ends."""
    if len(uv) < 3:
        return uv
    arc = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(uv, axis=0), axis=1))])
    keep = np.flatnonzero(np.diff(np.floor(arc / step), prepend=-1.0) > 0)
    keep = np.union1d(keep, [0, len(uv) - 1])
    return uv[keep]


def rasterize_polyline(uv, width_px, H, W) -> np.ndarray:
    """Pixels whose center lies within ``width_px / 2`` of the polyline."""
    r = width_px / 2.0
    mask = np.zeros((H, W), dtype=bool)
    lo = np.floor(uv.min(0) - r - 1).astype(int)
    hi = np.ceil(uv.max(0) + r + 1).astype(int)
    u0, v0 = max(lo[0], 0), max(lo[1], 0)
    u1, v1 = min(hi[0], W - 1), min(hi[1], H - 1)
    if u0 > u1 or v0 > v1:
        return mask
    vv, uu = np.mgrid[v0:v1 + 1, u0:u1 + 1]
    px = np.column_stack([uu.ravel(), vv.ravel()]).astype(np.float64)
    uv = _decimate(uv)
    if len(uv) == 1:
        d = np.linalg.norm(px - uv[0], axis=1)
    else:
        d = _segment_distance(px, uv[:-1], uv[1:])
    mask[v0:v1 + 1, u0:u1 + 1] = (d <= r).reshape(vv.shape)
    return mask


def stream_mask(stream: StreamSpec, K: CameraIntrinsics, H, W) -> np.ndarray:
    pts = stream.centerline()
    pts = pts[pts[:, 2] > 1e-6]
    if len(pts) == 0:
        return np.zeros((H, W), dtype=bool)
    return rasterize_polyline(geom3d.project(pts, K), stream.width_px, H, W)


def analytic_stream_points(stream: StreamSpec, mask, K: CameraIntrinsics) -> np.ndarray:
    """3-D plane point behind every stream pixel, from the plane's own parametrisation.

    Solves ``kappa d = start + a h + b g`` per pixel, independent of the
    normal-vector form used for reconstruction.
    """
    H, W = mask.shape
    out = np.full((H, W, 3), np.nan)
    vs, us = np.nonzero(mask)
    if len(vs) == 0:
        return out
    d = np.column_stack([(us - K.cx) / K.fx, (vs - K.cy) / K.fy, np.ones(len(us))])
    A = np.empty((len(us), 3, 3))
    A[:, :, 0] = d
    A[:, :, 1] = -stream.horizontal
    A[:, :, 2] = -stream.gravity
    sol = np.linalg.solve(A, np.broadcast_to(stream.start, (len(us), 3))[..., None])[..., 0]
    out[vs, us] = sol[:, :1] * d
    return out


def _background(rng, style, H, W):
    base = rng.uniform(0.15, 0.85, size=3)
    img = np.broadcast_to(base, (H, W, 3)).copy()
    if style in ("textured", "cluttered"):
        other = rng.uniform(0.15, 0.85, size=3)
        ang = rng.uniform(0, 2 * np.pi)
        vv, uu = np.mgrid[0:H, 0:W] / max(H, W)
        ramp = (np.cos(ang) * uu + np.sin(ang) * vv)
        ramp = (ramp - ramp.min()) / max(np.ptp(ramp), 1e-9)
        img = img * (1 - ramp[..., None]) + other * ramp[..., None]
    if style == "textured":
        freq = rng.uniform(4, 12)
        phase = rng.uniform(0, 2 * np.pi)
        vv, uu = np.mgrid[0:H, 0:W] / max(H, W)
        img = img + 0.06 * np.sin(2 * np.pi * freq * (uu + 0.5 * vv) + phase)[..., None]
    if style == "cluttered":
        for _ in range(int(rng.integers(4, 9))):
            w, h = rng.integers(W // 10, W // 3), rng.integers(H // 10, H // 3)
            x, y = rng.integers(0, W - w), rng.integers(0, H - h)
            col = 0.5 * rng.uniform(0.1, 0.9, size=3) + 0.25
            img[y:y + h, x:x + w] = col
    return img


def _container_mask(pose, height, body_r, neck_r, K, H, W):
    """Capsule silhouette: body segment plus a narrower neck up to the lip."""
    Ry, t = pose.Ry, pose.t
    bottom, shoulder, lip = t - 0.5 * height * Ry, t + 0.25 * height * Ry, t + 0.5 * height * Ry
    mask = np.zeros((H, W), dtype=bool)
    for a, b, r in ((bottom, shoulder, body_r), (shoulder, lip, neck_r)):
        if a[2] <= 0 or b[2] <= 0:
            continue
        seg = geom3d.project(np.stack([a, b]), K)
        r_px = K.fx * r / min(a[2], b[2])
        mask |= rasterize_polyline(seg, 2 * r_px, H, W)
    return mask


def _quantize(img):
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def draw_scene(config: SceneConfig, seed: int):
    """All random draws of a scene, shared by its positive and negative renderings."""
    rng = np.random.default_rng([config.rng_seed, seed])
    H, W, K = config.image_height, config.image_width, config.intrinsics
    g = np.asarray(config.gravity_cam, dtype=np.float64)
    style = config.background_styles[int(rng.integers(len(config.background_styles)))]
    d = dict(
        style=style,
        height=_u(rng, config.height),
        body_r=_u(rng, config.body_radius),
        neck_r=_u(rng, config.neck_radius),
        tilt=np.deg2rad(_u(rng, config.tilt_deg)),
        yaw=np.deg2rad(_u(rng, config.yaw_deg)),
        roll=np.deg2rad(_u(rng, config.roll_deg)),
        side=1.0 if rng.random() < 0.5 else -1.0,
        lip_uv=(_u(rng, config.lip_u) * W, _u(rng, config.lip_v) * H),
        lip_depth=_u(rng, config.lip_depth),
        width=_u(rng, config.stream_width),
        speed=_u(rng, config.spout_speed),
        drop=_u(rng, config.drop),
        brightness=_u(rng, config.brightness),
        liquid_rgb=np.clip(np.array(LIQUID_RGB) + rng.uniform(-1, 1, 3) * config.color_jitter, 0, 1),
        container_rgb=rng.uniform(0.3, 0.8) * np.array([1.0, 0.95, 0.85]) + rng.uniform(-0.05, 0.05, 3),
    )
    d["background"] = _background(rng, style, H, W)
    ray = geom3d.backproject_ray(*d["lip_uv"], K)
    d["lip"] = d["lip_depth"] * ray.direction
    # sideways heading in the horizontal plane, rotated by yaw about gravity
    z = np.array([0.0, 0.0, 1.0])
    fwd = geom3d.unit(z - (z @ g) * g)
    side = geom3d.unit(np.cross(g, fwd)) * d["side"]
    d["pour_dir"] = geom3d.rotation_about(g, d["yaw"]) @ side
    return d


def render(config: SceneConfig, draw: dict, pose: Pose, stream: StreamSpec | None):
    H, W, K = config.image_height, config.image_width, config.intrinsics
    img = draw["background"].copy()
    cmask = _container_mask(pose, draw["height"], draw["body_r"], draw["neck_r"], K, H, W)
    img[cmask] = draw["container_rgb"]
    smask = np.zeros((H, W), dtype=bool)
    if stream is not None:
        smask = stream_mask(stream, K, H, W)
        img[smask] = 0.25 * img[smask] + 0.75 * draw["liquid_rgb"]
    img = _quantize(img * draw["brightness"])
    return img, smask


def generate_scene(config: SceneConfig, label: int, seed: int) -> SyntheticSample:
    if label not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {label}")
    g = np.asarray(config.gravity_cam, dtype=np.float64)
    d = draw_scene(config, seed)
    pose = pouring_pose(g, d["lip"], d["pour_dir"], d["tilt"], d["roll"], d["height"])
    try:
        stream = stream_for_pose(pose, g, d["lip"], d["speed"], d["drop"], d["width"])
    except geom3d.DegenerateGeometryError as exc:
        raise GenerationError(f"seed {seed}: {exc}") from exc
    img, smask = render(config, d, pose, stream if label == 1 else None)
    meta = {"seed": int(seed), "style": d["style"], "config_seed": int(config.rng_seed)}
    points = None
    if label == 1:
        meta["stream"] = stream.to_dict()
        points = analytic_stream_points(stream, smask, config.intrinsics)
    return SyntheticSample(img, label, smask, pose, config.intrinsics, g.copy(), meta, points)


# on-disk format -------------------------------------------------------------

@dataclass
class DatasetManifest:
    ids: list
    labels: list
    splits: list
    configs: dict  # split -> generator config

    @classmethod
    def read(cls, path):
        d = json.loads(Path(path).read_text(encoding="utf-8"))
        recs = d["samples"]
        return cls([r["id"] for r in recs], [r["label"] for r in recs], [r["split"] for r in recs], d["configs"])

    def to_dict(self):
        return {
            "configs": self.configs,
            "n_pos": int(sum(self.labels)),
            "n_neg": int(len(self.labels) - sum(self.labels)),
            "samples": [{"id": i, "label": int(lab), "split": s} for i, lab, s in zip(self.ids, self.labels, self.splits)],
        }

    def dumps(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def digest(self):
        return hashlib.sha256(self.dumps().encode()).hexdigest()


def _atomic_write(path: Path, data: bytes):
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def save_sample(sample: SyntheticSample, out_dir) -> None:
    import io

    from PIL import Image

    out_dir = Path(out_dir)
    buf = io.BytesIO()
    Image.fromarray(np.round(sample.image * 255).astype(np.uint8)).save(buf, format="PPM")
    _atomic_write(out_dir / f"{sample.id}.img", buf.getvalue())
    buf = io.BytesIO()
    Image.fromarray(sample.gt_mask.astype(bool)).save(buf, format="PPM")
    _atomic_write(out_dir / f"{sample.id}.mask", buf.getvalue())
    _atomic_write(out_dir / f"{sample.id}.json", (json.dumps(sample.to_json(), indent=1, sort_keys=True) + "\n").encode())


def load_sample(data_dir, sid) -> SyntheticSample:
    from PIL import Image

    data_dir = Path(data_dir)
    rec = json.loads((data_dir / f"{sid}.json").read_text(encoding="utf-8"))
    with Image.open(data_dir / f"{sid}.img") as im:
        img = np.array(im.convert("RGB")).astype(np.float64) / 255.0
    with Image.open(data_dir / f"{sid}.mask") as im:
        mask = np.array(im.convert("1")).astype(bool)
    pose = Pose(np.array(rec["rotation"]).reshape(3, 3), np.array(rec["translation"]))
    return SyntheticSample(img, int(rec["label"]), mask, pose, CameraIntrinsics(**rec["intrinsics"]),
                           np.array(rec["gravity"]), rec.get("meta", {}), None, sid)


def generate_dataset(config: SceneConfig, n_pos: int, n_neg: int, out_dir, split="train", seed_offset=0) -> DatasetManifest:
    """Write ``n_pos`` positives and ``n_neg`` negatives plus ``manifest.json``.

    Negative ``k`` reuses the scene draw of positive ``k`` (same seed), so
    paired samples differ only by the stream. An existing manifest keeps its
    other splits; records of ``split`` are replaced.
    """
    if n_pos < 0 or n_neg < 0:
        raise ValueError("sample counts must be non-negative")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out_dir}: {exc}") from exc
    ids, labels = [], []
    for label, count in ((1, n_pos), (0, n_neg)):
        for k in range(count):
            s = generate_scene(config, label, seed_offset + k)
            s.id = f"{split}_{'pos' if label else 'neg'}_{k:05d}"
            try:
                save_sample(s, out_dir)
            except OSError as exc:
                raise OSError(f"failed writing sample {s.id} under {out_dir}: {exc}") from exc
            ids.append(s.id)
            labels.append(label)
    keep = DatasetManifest([], [], [], {})
    if (out_dir / "manifest.json").exists():
        try:
            keep = DatasetManifest.read(out_dir / "manifest.json")
        except (KeyError, ValueError) as exc:
            raise ValueError(f"{out_dir / 'manifest.json'}: unreadable existing manifest ({exc})") from exc
    rows = [r for r in zip(keep.ids, keep.labels, keep.splits) if r[2] != split]
    rows += [(i, lab, split) for i, lab in zip(ids, labels)]
    configs = {k: v for k, v in keep.configs.items() if k != split}
    configs[split] = config.to_dict()
    manifest = DatasetManifest(*map(list, zip(*rows)), configs) if rows else DatasetManifest([], [], [], configs)
    _atomic_write(out_dir / "manifest.json", manifest.dumps().encode())
    return manifest


def load_dataset(data_dir, split=None) -> list:
    data_dir = Path(data_dir)
    mpath = data_dir / "manifest.json"
    if not mpath.exists():
        raise FileNotFoundError(f"no manifest.json in {data_dir}")
    man = json.loads(mpath.read_text(encoding="utf-8"))
    return [load_sample(data_dir, rec["id"]) for rec in man["samples"] if split is None or rec["split"] == split]


def make_samples(config: SceneConfig, n_pos: int, n_neg: int, seed_offset=0) -> list:
    """In-memory twin of :func:`generate_dataset`."""
    out = []
    for label, count in ((1, n_pos), (0, n_neg)):
        for k in range(count):
            s = generate_scene(config, label, seed_offset + k)
            s.id = f"{'pos' if label else 'neg'}_{seed_offset + k:05d}"
            out.append(s)
    return out


def with_seed(config: SceneConfig, seed: int) -> SceneConfig:
    return replace(config, rng_seed=seed)
