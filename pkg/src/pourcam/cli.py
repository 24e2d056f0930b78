"""Command-line entry point: ``pourcam <command> [flags]``.

Every command writes into the ``--out`` directory. Values come from flags,
then from the ``--config`` file (``key = value`` lines, optional
``[sections]``), then from built-in defaults.

Exit codes: 0 success, 2 usage, 3 data, 4 numeric or degenerate geometry.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import camseg, geom3d, nn, poursim, synthgen, trainer

log = logging.getLogger("pourcam")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


def _dump(obj):
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


class Options:
    """Flag value, else config-file value, else default."""

    def __init__(self, args, file_values):
        self.args = args
        self.file = file_values

    def get(self, key, default=None, cast=str):
        v = getattr(self.args, key, None)
        if v is not None:
            return v
        if key in self.file:
            try:
                return cast(self.file[key])
            except ValueError as exc:
                raise UsageError(f"config value {key}={self.file[key]!r}: {exc}") from exc
        return default

    def out_dir(self):
        out = Path(self.get("out", "out"))
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise DataError(f"cannot create output directory {out}: {exc}") from exc
        return out


def _floats(text, n, what):
    vals = [float(x) for x in str(text).replace(",", " ").split()]
    if len(vals) != n:
        raise UsageError(f"{what} needs {n} numbers, got {text!r}")
    return vals


def _require_dir(path, what):
    if path is None:
        raise UsageError(f"{what} is required")
    p = Path(path)
    if not p.is_dir():
        raise DataError(f"{what} not found: {p}")
    return p


def _load_params(path):
    if path is None:
        raise UsageError("--checkpoint is required")
    if not Path(path).is_file():
        raise DataError(f"checkpoint not found: {path}")
    return trainer.Checkpoint.load(path)


def _positives(data_dir, split):
    samples = synthgen.load_dataset(data_dir, split)
    return [s for s in samples if s.label == 1]


# commands -----------------------------------------------------------------------

def cmd_gen(opt: Options):
    n_pos = int(opt.get("pos", 100, int))
    n_neg = int(opt.get("neg", 100, int))
    if n_pos < 0 or n_neg < 0 or n_pos + n_neg == 0:
        raise UsageError("gen needs --pos/--neg >= 0 with at least one sample")
    size = int(opt.get("size", 96, int))
    split = opt.get("split", "train")
    cfg = synthgen.SceneConfig.desk(size, rng_seed=int(opt.get("seed", 0, int)))
    out = opt.out_dir()
    man = synthgen.generate_dataset(cfg, n_pos, n_neg, out, split=split)
    print(f"wrote {n_pos + n_neg} {split} samples ({n_pos} positive, {n_neg} negative) to {out}")
    print(f"manifest sha256 {man.digest()}")


def cmd_train(opt: Options):
    data = _require_dir(opt.get("data"), "--data")
    keys = {f: opt.file[f] for f in trainer.TrainConfig.__dataclass_fields__ if f in opt.file}
    cfg = trainer.TrainConfig.from_mapping(keys) if keys else trainer.TrainConfig()
    iters = int(opt.get("iters", cfg.total_iters, int))
    warmup = int(opt.get("warmup", min(cfg.warmup_iters, iters), int))
    if iters < 0 or not 0 <= warmup <= iters:
        raise UsageError("need 0 <= --warmup <= --iters")
    variant = opt.get("variant", cfg.variant)
    if variant not in trainer.VARIANTS:
        raise UsageError(f"unknown variant {variant!r}; choose from {sorted(trainer.VARIANTS)}")
    use_pos, use_neg = trainer.VARIANTS[variant]
    cfg = replace(cfg, total_iters=iters, warmup_iters=warmup, use_pos=use_pos, use_neg=use_neg,
                  rng_seed=int(opt.get("seed", cfg.rng_seed, int)),
                  lr_backbone=float(opt.get("lr", cfg.lr_backbone, float)))
    samples = synthgen.load_dataset(data, opt.get("split", "train"))
    if not samples:
        raise DataError(f"no samples in {data}")
    out = opt.out_dir()
    ckpt = trainer.train(samples, cfg, metrics_path=out / "metrics.jsonl")
    ckpt.save(out / "model.ckpt")
    acc = trainer.accuracy(ckpt.params, samples)
    (out / "train_summary.json").write_text(_dump({"variant": variant, "iters": iters, "train_accuracy": acc,
                                                   "fingerprint": ckpt.fingerprint}), encoding="utf-8")
    print(f"trained {variant} for {iters} iterations, train accuracy {acc:.4f}; checkpoint {out / 'model.ckpt'}")


class _OracleCam:
    """Debug model that returns the ground-truth mask of the sample it is shown."""

    def __init__(self, samples):
        self.masks = {s.image.tobytes(): s.gt_mask for s in samples}

    def __call__(self, image):
        return self.masks[image.tobytes()].astype(np.float64)


def cmd_eval(opt: Options):
    data = _require_dir(opt.get("data"), "--data")
    samples = _positives(data, opt.get("split"))
    if not samples:
        raise DataError(f"no positive samples to evaluate in {data}")
    if opt.get("oracle_cam"):
        model = _OracleCam(samples)
    else:
        model = _load_params(opt.get("checkpoint")).cam_model()
    rep = camseg.evaluate(model, samples)
    out = opt.out_dir()
    (out / "eval.json").write_text(_dump(rep.to_dict()), encoding="utf-8")
    rep.write_jsonl(out / "eval_samples.jsonl")
    per = "  ".join(f"sigma={k}: {v:.4f}" for k, v in rep.per_sigma.items())
    print(f"mIoU {rep.miou:.4f}  ({per}) over {len(samples)} samples")


def _read_image(path):
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as im:
            return np.array(im.convert("RGB")).astype(np.float64) / 255.0
    except FileNotFoundError as exc:
        raise DataError(f"image not found: {path}") from exc
    except UnidentifiedImageError as exc:
        raise DataError(f"{path}: unreadable image") from exc


def cmd_infer(opt: Options):
    if opt.get("image") is None:
        raise UsageError("--image is required")
    sigma = float(opt.get("sigma", 0.5, float))
    if not 0.0 <= sigma <= 1.0:
        raise UsageError("--sigma must lie in [0, 1]")
    ckpt = _load_params(opt.get("checkpoint"))
    img = _read_image(opt.get("image"))
    H, W = img.shape[:2]
    cam = camseg.upsample(ckpt.cam_model()(img), H, W)
    mask = camseg.threshold_mask(cam, sigma)
    out = opt.out_dir()
    camseg.save_cam(out / "cam.pgm", cam)
    camseg.save_mask(out / "mask.pbm", mask)
    print(f"CAM and mask (sigma={sigma}, {int(mask.sum())} liquid pixels) written to {out}")


def cmd_reconstruct(opt: Options):
    if opt.get("mask") is None or opt.get("pose") is None:
        raise UsageError("--mask and --pose are required")
    try:
        meta = json.loads(Path(opt.get("pose")).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise DataError(f"pose file not found: {opt.get('pose')}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{opt.get('pose')}: invalid JSON ({exc})") from exc
    try:
        pose = geom3d.Pose.from_dict(meta)
    except (KeyError, ValueError) as exc:
        raise DataError(f"{opt.get('pose')}: bad pose ({exc})") from exc
    if opt.get("intrinsics") is not None:
        K = geom3d.CameraIntrinsics(*_floats(opt.get("intrinsics"), 4, "--intrinsics"))
    elif "intrinsics" in meta:
        K = geom3d.CameraIntrinsics(**meta["intrinsics"])
    else:
        raise UsageError("intrinsics missing: pass --intrinsics fx,fy,cx,cy")
    if opt.get("gravity") is not None:
        g = np.array(_floats(opt.get("gravity"), 3, "--gravity"))
    elif "gravity" in meta:
        g = np.array(meta["gravity"], dtype=np.float64)
    else:
        raise UsageError("gravity missing: pass --gravity x,y,z")
    try:
        mask = camseg.load_mask(opt.get("mask"))
    except FileNotFoundError as exc:
        raise DataError(f"mask not found: {opt.get('mask')}") from exc
    cloud = geom3d.liquid_point_cloud(mask, pose, K, g, skeleton_first=not opt.get("no_skeleton"))
    out = opt.out_dir()
    geom3d.write_ply(out / "cloud.ply", cloud.points)
    print(f"{len(cloud)} points written to {out / 'cloud.ply'} ({cloud.n_dropped} pixels dropped)")


def cmd_simulate(opt: Options):
    perception = opt.get("perception", "oracle")
    if perception not in poursim.PERCEPTION_MODES:
        raise UsageError(f"unknown perception mode {perception!r}")
    model = None
    if perception == "model":
        if opt.get("checkpoint") is None:
            raise UsageError("--perception model needs --checkpoint")
        model = _load_params(opt.get("checkpoint")).cam_model()
    motion = opt.get("motion", "all")
    motions = poursim.MOTIONS if motion == "all" else (motion,)
    if any(m not in poursim.MOTIONS for m in motions):
        raise UsageError(f"unknown motion {motion!r}")
    n = int(opt.get("episodes", 30, int))
    if n < 1:
        raise UsageError("--episodes must be >= 1")
    cfg = poursim.EpisodeConfig(perception=perception, noise_level=int(opt.get("noise_level", 2, int)),
                                controller_gain=float(opt.get("gain", 0.5, float)))
    table = poursim.run_campaign(cfg, n, model, motions, seed0=int(opt.get("seed", 0, int)))
    out = opt.out_dir()
    (out / "campaign.json").write_text(_dump(table), encoding="utf-8")
    if opt.get("trace"):
        rep = poursim.run_episode(replace(cfg, motion=motions[0], rng_seed=int(opt.get("seed", 0, int))), model)
        rep.write_trace_csv(out / "trace.csv")
    print(f"perception {table['perception']}, {n} episodes per motion")
    for r in table["rows"]:
        print(f"  {r['label']:<8} {r['success_rate']:6.1f}%")


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "infer": cmd_infer,
            "reconstruct": cmd_reconstruct, "simulate": cmd_simulate}


def build_parser():
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--seed", type=int, help="random seed")
    common.add_argument("--config", help="key = value config file; flags override it")
    common.add_argument("--out", help="output directory")
    common.add_argument("--verbose", action="store_true", help="log progress to stderr")

    p = argparse.ArgumentParser(prog="pourcam", parents=[common],
                                description="Liquid perception from image-level labels, 3D lifting and pouring simulation.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="generate a synthetic dataset")
    g.add_argument("--pos", type=int)
    g.add_argument("--neg", type=int)
    g.add_argument("--size", type=int, help="image side in pixels (default 96)")
    g.add_argument("--split")

    t = sub.add_parser("train", parents=[common], help="train the classifier")
    t.add_argument("--data")
    t.add_argument("--iters", type=int)
    t.add_argument("--warmup", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--variant", help="full, cls_only, no_pos or no_neg")
    t.add_argument("--split")

    e = sub.add_parser("eval", parents=[common], help="mIoU of CAM masks on positive samples")
    e.add_argument("--data")
    e.add_argument("--checkpoint")
    e.add_argument("--split")
    e.add_argument("--oracle-cam", action="store_true", default=None, help="debug: use ground-truth masks as CAMs")

    i = sub.add_parser("infer", parents=[common], help="CAM and mask for one image")
    i.add_argument("--image")
    i.add_argument("--checkpoint")
    i.add_argument("--sigma", type=float)

    r = sub.add_parser("reconstruct", parents=[common], help="lift a liquid mask to a PLY point cloud")
    r.add_argument("--mask")
    r.add_argument("--pose", help="JSON with rotation (9 numbers) and translation; may hold intrinsics and gravity")
    r.add_argument("--intrinsics", help="fx,fy,cx,cy")
    r.add_argument("--gravity", help="x,y,z in the camera frame")
    r.add_argument("--no-skeleton", action="store_true", default=None)

    s = sub.add_parser("simulate", parents=[common], help="closed-loop pouring campaign")
    s.add_argument("--motion", help="static, linear, random or all")
    s.add_argument("--episodes", type=int)
    s.add_argument("--perception", help="oracle, model or degraded")
    s.add_argument("--noise-level", type=int)
    s.add_argument("--checkpoint")
    s.add_argument("--gain", type=float)
    s.add_argument("--trace", action="store_true", default=None, help="also write trace.csv for the first episode")
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        file_values = {}
        if getattr(args, "config", None):
            try:
                file_values = trainer.read_kv_config(args.config)
            except FileNotFoundError as exc:
                raise UsageError(str(exc)) from exc
            file_values = {k.replace("-", "_"): v for k, v in file_values.items()}
        COMMANDS[args.command](Options(args, file_values))
    except UsageError as exc:
        print(f"pourcam {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (geom3d.GeometryError, FloatingPointError, trainer.TrainingError) as exc:
        print(f"pourcam {args.command}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError, ValueError, KeyError, nn.CheckpointError) as exc:
        print(f"pourcam {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
