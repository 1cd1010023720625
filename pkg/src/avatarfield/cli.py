"""avatarfield command line: synth | train | render | extract | eval."""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import warnings
from pathlib import Path

import numpy as np
import torch
import yaml

log = logging.getLogger("avatarfield")


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("AVATARFIELD_THREADS", "0")) or os.cpu_count() or 1)
    except ValueError:
        return 1


def _setup_threads() -> int:
    n = _threads()
    torch.set_num_threads(n)
    return n


# ------------------------------------------------------------------ shared helpers


def canonical_grid(prior, resolution: int):
    lo, hi = prior.s_base.bbox_min, prior.s_base.bbox_max
    ext = hi - lo
    res = np.maximum(np.round(ext / ext.max() * (resolution - 1)).astype(int) + 1, 2)
    return lo, hi, res


def extract_canonical(model, prior, resolution: int):
    from .fields import sdf_numpy
    from .geometry import marching_cubes

    lo, hi, res = canonical_grid(prior, resolution)
    return marching_cubes(lambda p: sdf_numpy(model.body, p), lo, hi, res, 0.0)


def pose_with_skinning(model, mesh, B: np.ndarray):
    """Forward-LBS canonical vertices with the learned skinning weights."""
    from .body import pose_mesh

    if mesh.is_empty():
        return mesh
    with torch.no_grad():
        w = model.skin(torch.from_numpy(mesh.vertices).to(model.dtype)).double().numpy()
    return pose_mesh(mesh, w, B)


def render_view(model, prior, cfg, ctx, cam):
    """The single render path shared by ``render`` and ``eval``."""
    from .render import RenderSettings, render_image

    settings = RenderSettings.from_config(cfg)
    return render_image(model, prior, ctx, cam, settings)


def quantized(img: np.ndarray) -> np.ndarray:
    from .io.images import to_uint8

    return to_uint8(img).astype(np.float64) / 255.0


def _pose_files(arg: str | None, ds) -> list[tuple[str, object]]:
    from .io.dataset import frame_name, load_pose

    J = len(ds.body_config["skeleton"]["joints"]) if ds is not None else None
    if arg is None:
        return [(frame_name(i), p) for i, p in enumerate(ds.poses)]
    p = Path(arg)
    files = sorted(p.glob("*.yaml")) if p.is_dir() else [p]
    return [(f.stem, load_pose(f, J)) for f in files]


# ------------------------------------------------------------------ commands


def cmd_synth(args) -> int:
    from .synth import synth_dataset

    cfg = yaml.safe_load(Path(args.config).read_text()) if args.config else {}
    for k in ("n_frames", "n_views", "n_unseen", "seed"):
        v = getattr(args, k)
        if v is not None:
            cfg[k] = v
    if args.size is not None:
        cfg["width"] = cfg["height"] = args.size
    root = synth_dataset(args.out, cfg, workers=_setup_threads())
    print(f"wrote dataset to {root}")
    return 0


def cmd_train(args) -> int:
    from .io.config import load_config
    from .io.dataset import load_dataset
    from .training.trainer import Trainer

    overrides: dict = {"train": {}}
    if args.seed is not None:
        overrides["train"]["seed"] = args.seed
    if args.iters is not None:
        overrides["train"]["iters"] = args.iters
    if args.dataset is not None:
        overrides["dataset"] = args.dataset
    if args.out is not None:
        overrides["out_dir"] = args.out
    cfg = load_config(args.config, overrides)
    if not cfg["dataset"]:
        raise ValueError("config does not name a dataset")
    _setup_threads()
    ds = load_dataset(cfg["dataset"])
    trainer = Trainer(cfg, ds)
    if args.resume:
        trainer.load(args.resume)
        log.info("resumed at step %d", trainer.step)
    trainer.fit()
    print(f"finished at step {trainer.step}; checkpoints in {trainer.out_dir}")
    return 0


def cmd_render(args) -> int:
    from .io.dataset import load_cameras, load_dataset, view_name
    from .io.images import save_mask, save_png, save_sidecar
    from .render import FrameContext
    from .training.trainer import load_model

    model, prior, cfg, _ = load_model(args.ckpt)
    _setup_threads()
    ds = load_dataset(args.dataset) if args.dataset else None
    cams = load_cameras(args.cameras) if args.cameras else (ds.cameras if ds else None)
    if cams is None:
        raise ValueError("need --dataset or --cameras")
    if ds is None and args.poses is None:
        raise ValueError("need --dataset or --poses")
    if ds is not None:
        cfg["render"]["bg"] = list(ds.bg)
    views = args.views if args.views else list(range(len(cams)))
    out = Path(args.out)
    for name, pose in _pose_files(args.poses, ds):
        ctx = FrameContext.build(prior, pose)
        for v in views:
            r = render_view(model, prior, cfg, ctx, cams[v])
            stem = out / name / view_name(v)
            save_png(stem.with_suffix(".png"), r.rgb)
            save_mask(stem.parent / f"{stem.name}_mask.png", r.opacity > 1e-3)
            save_png(stem.parent / f"{stem.name}_normal.png", (r.normal + 1.0) / 2.0)
            save_sidecar(stem.parent / f"{stem.name}_depth.pgad", r.depth)
            save_sidecar(stem.parent / f"{stem.name}_normal.pgad", r.normal)
    print(f"rendered to {out}")
    return 0


def cmd_extract(args) -> int:
    from .geometry import save_obj
    from .io.dataset import load_pose
    from .training.trainer import load_model

    model, prior, _, _ = load_model(args.ckpt)
    mesh = extract_canonical(model, prior, args.resolution)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if mesh.is_empty():
        warnings.warn("level set is empty; writing an empty mesh", stacklevel=1)
        print("warning: level set is empty; writing an empty mesh", file=sys.stderr)
    save_obj(mesh, out)
    if args.posed:
        pose = load_pose(args.posed, prior.n_joints)
        posed = pose_with_skinning(model, mesh, prior.bone_matrices(pose))
        save_obj(posed, out.with_name(out.stem + "_posed.obj"))
    print(f"{mesh.n_vertices} vertices, {mesh.n_faces} faces -> {out}")
    return 0


def _write_report(rows: list[list], header: list[str], out: Path) -> str:
    out.mkdir(parents=True, exist_ok=True)
    vals = np.array([r[1:] for r in rows], dtype=np.float64) if rows else np.zeros((0, len(header) - 1))
    mean = ["mean", *(vals.mean(axis=0) if len(vals) else [float("nan")] * (len(header) - 1))]
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows + [mean]:
            w.writerow([r[0], *(f"{x:.6f}" for x in r[1:])])
    summary = f"{len(rows)} items; " + ", ".join(f"{h} {m:.4f}" for h, m in zip(header[1:], mean[1:]))
    (out / "summary.txt").write_text(summary + "\n")
    return summary


def cmd_eval(args) -> int:
    from .body import bone_softmax_weights, pose_mesh
    from .geometry import load_obj, mesh_chamfer
    from .io.dataset import frame_name, load_dataset, view_name
    from .io.images import load_png
    from .render import FrameContext
    from .training.metrics import lpips_proxy, psnr, ssim

    ds = load_dataset(args.dataset)
    out = Path(args.out)
    _setup_threads()
    model = prior = cfg = None
    if args.ckpt:
        from .training.trainer import load_model

        model, prior, cfg, _ = load_model(args.ckpt)
        cfg["render"]["bg"] = list(ds.bg)
    elif args.pred_dir is None or args.split == "geometry":
        raise ValueError("need --ckpt (or --pred-dir for image splits)")

    if args.split == "geometry":
        gt = load_obj(ds.root / "gt" / "canonical.obj")
        skel_cfg, skin = prior.config["skeleton"], prior.config["skinning"]
        mesh = extract_canonical(model, prior, args.resolution)
        frames = args.frames if args.frames else [0]
        rows = []
        for f in frames:
            B = prior.bone_matrices(ds.poses[f])
            w_gt = bone_softmax_weights(prior.skeleton, gt.vertices, skel_cfg.get("leaf_length", 0.08),
                                        skin["temperature"], skin["top_k"])
            posed_gt = pose_mesh(gt, w_gt, B)
            posed = pose_with_skinning(model, mesh, B)
            cd = mesh_chamfer(posed, posed_gt, 10000, seed=0) if not posed.is_empty() else float("inf")
            rows.append([frame_name(f), cd])
        print(_write_report(rows, ["frame", "chamfer"], out))
        return 0

    split_ds = ds.unseen() if args.split == "unseen-poses" else ds
    views = args.views if args.views else list(range(ds.n_views))
    frames = args.frames if args.frames else list(range(split_ds.n_frames))
    rows = []
    for f in frames:
        ctx = FrameContext.build(prior, split_ds.poses[f]) if model is not None else None
        for v in views:
            gt = split_ds.image(f, v)
            if model is not None:
                pred = quantized(render_view(model, prior, cfg, ctx, split_ds.cameras[v]).rgb)
            else:
                pred = load_png(Path(args.pred_dir) / frame_name(f) / f"{view_name(v)}.png")
            rows.append([f"{frame_name(f)}/{view_name(v)}", psnr(pred, gt), ssim(pred, gt), lpips_proxy(pred, gt)])
    print(_write_report(rows, ["image", "psnr", "ssim", "lpips_proxy"], out))
    return 0


# ------------------------------------------------------------------ entry


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="avatarfield", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    s = sub.add_parser("synth", help="generate a synthetic multi-view dataset")
    s.add_argument("out")
    s.add_argument("--config")
    s.add_argument("--frames", dest="n_frames", type=int)
    s.add_argument("--views", dest="n_views", type=int)
    s.add_argument("--unseen", dest="n_unseen", type=int)
    s.add_argument("--size", type=int)
    s.add_argument("--seed", type=int)
    s.set_defaults(fn=cmd_synth)

    t = sub.add_parser("train", help="train an avatar")
    t.add_argument("--config", required=True)
    t.add_argument("--resume")
    t.add_argument("--seed", type=int)
    t.add_argument("--iters", type=int)
    t.add_argument("--dataset")
    t.add_argument("--out")
    t.set_defaults(fn=cmd_train)

    r = sub.add_parser("render", help="render (view, pose) pairs from a checkpoint")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--dataset")
    r.add_argument("--cameras")
    r.add_argument("--poses", help="pose file or directory of pose files (may be unseen poses)")
    r.add_argument("--views", type=int, nargs="*")
    r.add_argument("--out", required=True)
    r.set_defaults(fn=cmd_render)

    e = sub.add_parser("extract", help="extract the canonical mesh")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--resolution", type=int, default=128)
    e.add_argument("--posed", help="pose file; also writes <out>_posed.obj")
    e.add_argument("--out", required=True)
    e.set_defaults(fn=cmd_extract)

    v = sub.add_parser("eval", help="image metrics or Chamfer distance against a dataset")
    v.add_argument("--ckpt")
    v.add_argument("--dataset", required=True)
    v.add_argument("--split", choices=["train-views", "unseen-poses", "geometry"], default="train-views")
    v.add_argument("--pred-dir", help="evaluate existing images laid out as frame_XXXX/view_YY.png")
    v.add_argument("--frames", type=int, nargs="*")
    v.add_argument("--views", type=int, nargs="*")
    v.add_argument("--resolution", type=int, default=128)
    v.add_argument("--out", required=True)
    v.set_defaults(fn=cmd_eval)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except KeyError as e:  # config errors carry the offending key
        print(f"error: {e.args[0] if e.args else e}", file=sys.stderr)
        return 2
    except (FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
