"""Closed-loop pouring episodes with perception in the loop.

Every tick renders the scene, extracts a liquid mask, lifts it onto the
pouring plane, measures the horizontal offset between the stream's lowest
point and the target mouth, and nudges the spout with a proportional
correction. The stream falls straight down from the spout, so the true
landing point is the spout dropped along gravity onto the mouth plane.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import camseg, geom3d, synthgen
from .geom3d import Pose

log = logging.getLogger(__name__)

MOTIONS = ("static", "linear", "random")
MOTION_LABELS = {"static": "Static", "linear": "Dym.(L)", "random": "Dym.(R)"}
PERCEPTION_MODES = ("oracle", "model", "degraded")


@dataclass(frozen=True)
class EpisodeConfig:
    motion: str = "static"
    motion_speed: float = 0.02  # m/s, linear motion
    ou_sigma: float = 0.01  # m, stationary spread of the random walk
    ou_tau: float = 1.0  # s, random-walk correlation time
    motion_bound: float = 0.04  # m, random walk is clipped to +- this box
    duration: float = 3.0
    dt: float = 0.1
    controller_gain: float = 0.5
    max_step: float = 0.03  # m per tick
    perception: str = "oracle"
    noise_level: int = 0
    sigma: float = 0.5
    mouth_radius: float = 0.04
    initial_offset: float = 0.05  # m, upper bound of the random initial misalignment
    fixed_offset: tuple | None = None  # exact initial offset vector (horizontal), overrides the random one
    drop: float = 0.25  # spout height above the mouth plane
    flow_rate: float = 1.0
    success_spill: float = 0.05
    rng_seed: int = 0

    def __post_init__(self):
        if self.motion not in MOTIONS:
            raise ValueError(f"motion must be one of {MOTIONS}")
        if self.perception not in PERCEPTION_MODES:
            raise ValueError(f"perception must be one of {PERCEPTION_MODES}")
        if self.dt <= 0 or self.duration < self.dt:
            raise ValueError("need dt > 0 and duration >= dt")
        if self.mouth_radius <= 0:
            raise ValueError("mouth radius must be positive")

    @property
    def n_ticks(self):
        return int(round(self.duration / self.dt))


@dataclass
class SimState:
    time: float
    spout: np.ndarray
    target_center: np.ndarray
    target_mouth_radius: float
    tilt_angle: float
    stream_active: bool = True
    poured_volume: float = 0.0
    spilled_volume: float = 0.0
    landing: np.ndarray | None = None
    source_pose: Pose | None = None

    def __post_init__(self):
        if not 0.0 <= self.tilt_angle <= np.pi:
            raise ValueError("tilt angle must lie in [0, pi]")
        if self.target_mouth_radius <= 0:
            raise ValueError("mouth radius must be positive")


@dataclass
class EpisodeReport:
    success: bool
    spilled_fraction: float
    poured_volume: float
    spilled_volume: float
    trace: list = field(default_factory=list)
    diagnostic: str = ""

    def to_dict(self, with_trace=True):
        d = {"success": self.success, "spilled_fraction": self.spilled_fraction,
             "poured_volume": self.poured_volume, "spilled_volume": self.spilled_volume, "diagnostic": self.diagnostic}
        if with_trace:
            d["trace"] = self.trace
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    def write_trace_csv(self, path):
        cols = ["time", "offset", "measured", "correction", "landing_x", "landing_y", "landing_z"]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            wr = csv.writer(fh)
            wr.writerow(cols)
            for r in self.trace:
                wr.writerow([r["time"], r["offset"], r["measured"], r["correction"], *r["landing"]])


# target motion ------------------------------------------------------------------

class TargetMotion:
    """Position of the target center over time; the random walk is precomputed per tick."""

    def __init__(self, motion, center, g, rng, speed=0.02, ou_sigma=0.01, ou_tau=1.0, bound=0.04, dt=0.1):
        if motion not in MOTIONS:
            raise ValueError(f"unknown motion {motion!r}")
        self.motion = motion
        self.center = np.asarray(center, dtype=np.float64)
        self.g = geom3d.unit(g)
        self.speed = speed
        self.dt = dt
        # horizontal basis
        a = np.array([1.0, 0.0, 0.0])
        self.e1 = geom3d.unit(a - (a @ self.g) * self.g)
        self.e2 = np.cross(self.g, self.e1)
        ang = rng.uniform(-np.pi / 4, np.pi / 4) + (np.pi if rng.random() < 0.5 else 0.0)
        self.direction = np.cos(ang) * self.e1 + np.sin(ang) * self.e2
        self.rng = rng
        self.ou_sigma, self.ou_tau, self.bound = ou_sigma, ou_tau, bound
        self._walk = [np.zeros(2)]

    def _extend(self, k):
        rho = np.exp(-self.dt / self.ou_tau)
        kick = self.ou_sigma * np.sqrt(1.0 - rho**2)
        while len(self._walk) <= k:
            nxt = rho * self._walk[-1] + kick * self.rng.standard_normal(2)
            self._walk.append(np.clip(nxt, -self.bound, self.bound))

    def at(self, t):
        if self.motion == "static":
            return self.center.copy()
        if self.motion == "linear":
            return self.center + self.speed * t * self.direction
        k = int(round(t / self.dt))
        self._extend(k)
        x, y = self._walk[k]
        return self.center + x * self.e1 + y * self.e2


def target_motion(motion, t, rng, center=(0.0, 0.0, 0.0), g=(0.0, 1.0, 0.0), **kw):
    """One-shot position query; for repeated queries keep a :class:`TargetMotion`."""
    return TargetMotion(motion, center, g, rng, **kw).at(t)


# control and plant ---------------------------------------------------------------

def controller(offset, gain, max_step=np.inf):
    """Proportional correction ``-gain * offset`` with its magnitude clamped to ``max_step``."""
    corr = -gain * np.asarray(offset, dtype=np.float64)
    n = float(np.linalg.norm(corr))
    if n > max_step:
        corr = corr * (max_step / n)
    return corr if corr.ndim else float(corr)


def landing_point(spout, target_center, g):
    """Where the vertical stream from ``spout`` crosses the target mouth plane."""
    g = np.asarray(g, dtype=np.float64)
    return spout + ((target_center - spout) @ g) * g


def step(state: SimState, correction, config: EpisodeConfig, motion: TargetMotion, g) -> SimState:
    """Advance one tick: move the spout, move the target, account the poured volume."""
    g = np.asarray(g, dtype=np.float64)
    corr = np.asarray(correction, dtype=np.float64)
    corr = corr - (corr @ g) * g
    t = state.time + config.dt
    spout = state.spout + corr
    target = motion.at(t)
    land = landing_point(spout, target, g)
    poured, spilled = state.poured_volume, state.spilled_volume
    if state.stream_active:
        vol = config.flow_rate * config.dt
        if np.linalg.norm(land - target) <= state.target_mouth_radius:
            poured += vol
        else:
            spilled += vol
    pose = state.source_pose and Pose(state.source_pose.R, state.source_pose.t + corr)
    return replace(state, time=t, spout=spout, target_center=target, poured_volume=poured, spilled_volume=spilled,
                   landing=land, source_pose=pose)


# episode ------------------------------------------------------------------------------

class Scene:
    """Fixed camera and appearance for one episode; renders a pose on demand."""

    def __init__(self, config: synthgen.SceneConfig, seed: int, drop: float):
        self.config = config
        self.g = np.asarray(config.gravity_cam, dtype=np.float64)
        self.draw = synthgen.draw_scene(config, seed)
        self.drop = drop
        self.tilt = self.draw["tilt"]

    def pose_for(self, spout) -> Pose:
        return synthgen.pouring_pose(self.g, spout, self.draw["pour_dir"], self.tilt, 0.0, self.draw["height"])

    def render(self, spout, drop):
        pose = self.pose_for(spout)
        stream = synthgen.stream_for_pose(pose, self.g, spout, 0.0, drop, self.draw["width"])
        img, mask = synthgen.render(self.config, self.draw, pose, stream)
        return img, mask, pose


def default_scene_config():
    return synthgen.SceneConfig.desk(lip_u=(0.4, 0.6), lip_v=(0.12, 0.18), lip_depth=(0.5, 0.55), roll_deg=(0.0, 0.0),
                                     stream_width=(6.0, 9.0))


DROP_PER_LEVEL = 0.15
BLOB_PER_LEVEL = 0.2
BLOB_SIZE = 5


def degrade_mask(mask, level, rng):
    """Corrupt a mask: drop true pixels with probability 0.15*level, and with
    probability 0.2*level per call paint one 5x5 false blob.

    The same random draws are consumed at every level, so on a shared seed a
    higher level corrupts a superset of what a lower level does.
    """
    H, W = mask.shape
    u = rng.random(mask.shape)
    blob_u = rng.random()
    v0, u0 = int(rng.integers(0, H - BLOB_SIZE + 1)), int(rng.integers(0, W - BLOB_SIZE + 1))
    if level <= 0:
        return mask.copy()
    out = mask & (u >= min(DROP_PER_LEVEL * level, 0.9))
    if blob_u < BLOB_PER_LEVEL * level:
        out[v0:v0 + BLOB_SIZE, u0:u0 + BLOB_SIZE] = True
    return out


def perceive(config: EpisodeConfig, image, gt_mask, model, rng):
    if config.perception == "oracle":
        return gt_mask
    if config.perception == "degraded":
        return degrade_mask(gt_mask, config.noise_level, rng)
    cam = camseg.upsample(model(image), *gt_mask.shape)
    return camseg.threshold_mask(cam, config.sigma)


def run_episode(config: EpisodeConfig, model=None, scene_config: synthgen.SceneConfig | None = None) -> EpisodeReport:
    """Closed-loop episode. ``model`` maps an image to a normalised CAM (needed for ``perception='model'``)."""
    if config.perception == "model" and model is None:
        raise ValueError("perception 'model' needs a model/checkpoint")
    scene_config = scene_config or default_scene_config()
    rng = np.random.default_rng([config.rng_seed, 7])
    motion_rng = np.random.default_rng([config.rng_seed, 11])
    noise_rng = np.random.default_rng([config.rng_seed, 13])
    scene = Scene(scene_config, config.rng_seed, config.drop)
    g = scene.g
    spout0 = scene.draw["lip"]
    target0 = spout0 + config.drop * g
    if config.fixed_offset is not None:
        off = np.asarray(config.fixed_offset, dtype=np.float64)
    else:
        a = np.array([1.0, 0.0, 0.0])
        e1 = geom3d.unit(a - (a @ g) * g)
        e2 = np.cross(g, e1)
        r = config.initial_offset * np.sqrt(rng.random())
        phi = rng.uniform(0, 2 * np.pi)
        off = r * (np.cos(phi) * e1 + np.sin(phi) * e2)
    motion = TargetMotion(config.motion, target0, g, motion_rng, speed=config.motion_speed,
                          ou_sigma=config.ou_sigma, ou_tau=config.ou_tau, bound=config.motion_bound, dt=config.dt)
    state = SimState(0.0, spout0 + off, motion.at(0.0), config.mouth_radius, scene.tilt,
                     source_pose=scene.pose_for(spout0 + off))
    trace, blind = [], 0
    for _ in range(config.n_ticks):
        drop = float((state.target_center - state.spout) @ g)
        img, gt, pose = scene.render(state.spout, drop)
        mask = perceive(config, img, gt, model, noise_rng)
        cloud = geom3d.liquid_point_cloud(mask, pose, scene_config.intrinsics, g)
        if cloud.empty:
            blind += 1
            measured = np.zeros(3)
        else:
            measured = geom3d.horizontal_offset(cloud, state.target_center, g)
        corr = controller(measured, config.controller_gain, config.max_step) if not cloud.empty else np.zeros(3)
        true_off = landing_point(state.spout, state.target_center, g) - state.target_center
        state = step(state, corr, config, motion, g)
        trace.append({"time": round(state.time, 9), "offset": float(np.linalg.norm(true_off)),
                      "measured": float(np.linalg.norm(measured)), "correction": float(np.linalg.norm(corr)),
                      "landing": [float(x) for x in state.landing], "detected": not cloud.empty})
    emitted = state.poured_volume + state.spilled_volume
    frac = state.spilled_volume / emitted if emitted > 0 else 0.0
    success = frac <= config.success_spill
    diag = ""
    if blind > config.n_ticks / 2:
        success, diag = False, f"no perception: empty point cloud on {blind}/{config.n_ticks} ticks"
    return EpisodeReport(bool(success), float(frac), state.poured_volume, state.spilled_volume, trace, diag)


def run_campaign(config: EpisodeConfig, n_episodes: int, model=None, motions=MOTIONS, scene_config=None, seed0=0):
    """Success rate per motion type; episode ``i`` uses seed ``seed0 + i`` for every motion (paired)."""
    if n_episodes < 1:
        raise ValueError("need at least one episode")
    rows = []
    for motion in motions:
        flags = []
        for i in range(n_episodes):
            cfg = replace(config, motion=motion, rng_seed=seed0 + i)
            flags.append(run_episode(cfg, model, scene_config).success)
        rows.append({"motion": motion, "label": MOTION_LABELS[motion], "flags": flags,
                     "success_rate": 100.0 * sum(flags) / n_episodes})
    perception = config.perception + (f"({config.noise_level})" if config.perception == "degraded" else "")
    return {"perception": perception, "episodes": n_episodes, "rows": rows,
            "config": {k: v for k, v in asdict(config).items() if k not in ("motion", "rng_seed")}}


def campaign_rates(table):
    return {r["motion"]: r["success_rate"] for r in table["rows"]}
