"""Patch-based training loop over a multi-view sequence."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from ..body import BodyPrior, bone_softmax_weights, build_body_prior
from ..geometry import crossing_table
from ..io.checkpoint import load_checkpoint, save_checkpoint
from ..io.config import DEFAULT_CONFIG, merge_config
from ..io.dataset import Dataset
from ..model import AvatarModel, triplane_half_extent
from ..render import FrameContext, RenderSettings, generate_rays, image_pixels, render_rays
from .autodiff import backward
from .losses import (
    TERMS,
    LossReport,
    LossWeights,
    LpipsProxy,
    loss_eikonal,
    loss_mask,
    loss_nssim,
    loss_rgb,
    loss_skinning,
    total_loss,
)
from .optim import build_optimizer, set_learning_rate

log = logging.getLogger(__name__)

LOG_HEADER = ["step", *TERMS, "total", "lr", "s"]


def checkpoint_name(step: int) -> str:
    return f"ckpt_{step:06d}.pgah"


@dataclass
class Patch:
    frame: int
    view: int
    top: int
    left: int
    size: int


@dataclass
class Batch:
    patches: list[Patch]
    origins: list[np.ndarray]
    dirs: list[np.ndarray]
    rgb: list[np.ndarray]
    mask: list[np.ndarray]


def torch_dtype(cfg: dict):
    return torch.float64 if cfg["numeric"]["precision"] == "double" else torch.float32


def warmup_skinning(model: AvatarModel, prior: BodyPrior, iters: int, rng: np.random.Generator,
                    batch: int = 2048, lr: float = 1e-3) -> float:
    """Fit the skinning net to the prior's bone-softmax weights around the template."""
    if iters <= 0:
        return 0.0
    skel_cfg = prior.config["skeleton"]
    skin = prior.config["skinning"]
    opt = torch.optim.Adam(model.skin.parameters(), lr=lr)
    lo, hi = prior.dilated.bounds()
    loss = torch.zeros(())
    for _ in range(iters):
        near = prior.template.vertices[rng.integers(0, prior.template.n_vertices, batch // 2)]
        near = near + rng.normal(scale=0.03, size=near.shape)
        far = rng.uniform(lo, hi, size=(batch - len(near), 3))
        pts = np.concatenate([near, far])
        target = bone_softmax_weights(prior.skeleton, pts, skel_cfg.get("leaf_length", 0.08),
                                      skin["temperature"], skin["top_k"])
        x = torch.from_numpy(pts).to(model.dtype)
        loss = (model.skin(x) - torch.from_numpy(target).to(model.dtype)).abs().sum(-1).mean()
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    return float(loss.detach())


class Trainer:
    def __init__(self, cfg: dict, dataset: Dataset, prior: BodyPrior | None = None, out_dir: str | Path | None = None):
        self.cfg = merge_config(DEFAULT_CONFIG, cfg)
        tc = self.cfg["train"]
        self.dataset = dataset
        self.seed = int(tc["seed"])
        self.rng = np.random.default_rng(self.seed)
        torch.manual_seed(self.seed)
        self.prior = prior if prior is not None else build_body_prior(dataset.body_config)
        self.model = AvatarModel(self.prior, self.cfg["model"], self.seed, torch_dtype(self.cfg))
        self.opt = build_optimizer(self.model.param_groups(), self.cfg["optim"])
        self.weights = LossWeights.from_config(self.cfg["loss"])
        self.lpips = LpipsProxy(3, self.seed) if self.cfg["loss"]["lpips"] else None
        self.settings = RenderSettings.from_config(self.cfg)
        self.settings.bg = tuple(dataset.bg)
        self.frames = list(tc["frames"]) if tc["frames"] is not None else list(range(dataset.n_frames))
        self.views = list(tc["views"]) if tc["views"] is not None else list(range(dataset.n_views))
        self.out_dir = Path(out_dir if out_dir is not None else self.cfg["out_dir"])
        self.step = 0
        self.warmed = False
        self._ctx: dict[int, FrameContext] = {}
        self._prior_mask: dict[tuple[int, int], np.ndarray] = {}
        self._img: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}
        self.half = triplane_half_extent(self.prior, self.cfg["model"]["cube_scale"])

    # ------------------------------------------------------------- caches

    def context(self, f: int) -> FrameContext:
        if f not in self._ctx:
            self._ctx[f] = FrameContext.build(self.prior, self.dataset.poses[f])
        return self._ctx[f]

    def prior_mask_image(self, f: int, v: int) -> np.ndarray:
        """Pixels whose ray meets the posed dilated body, i.e. the region where S_base <= tau."""
        if (f, v) not in self._prior_mask:
            cam = self.dataset.cameras[v]
            o, d = generate_rays(cam, image_pixels(cam.width, cam.height))
            _, counts = crossing_table(self.context(f).bvh, o, d)
            self._prior_mask[(f, v)] = (counts > 0).reshape(cam.height, cam.width)
        return self._prior_mask[(f, v)]

    def images(self, f: int, v: int):
        if (f, v) not in self._img:
            self._img[(f, v)] = (self.dataset.image(f, v), self.dataset.mask(f, v))
        return self._img[(f, v)]

    # ------------------------------------------------------------- batches

    def sample_patch(self, rng: np.random.Generator) -> Patch:
        tc = self.cfg["train"]
        ps = tc["patch_size"]
        f = self.frames[rng.integers(len(self.frames))]
        v = self.views[rng.integers(len(self.views))]
        cam = self.dataset.cameras[v]
        if ps > cam.width or ps > cam.height:
            raise ValueError(f"patch size {ps} exceeds the {cam.width}x{cam.height} image")
        if rng.random() < tc["mask_bias"]:
            rows, cols = np.nonzero(self.prior_mask_image(f, v))
            if len(rows):
                k = rng.integers(len(rows))
                top = int(np.clip(rows[k] - ps // 2, 0, cam.height - ps))
                left = int(np.clip(cols[k] - ps // 2, 0, cam.width - ps))
                return Patch(f, v, top, left, ps)
        top = int(rng.integers(0, cam.height - ps + 1))
        left = int(rng.integers(0, cam.width - ps + 1))
        return Patch(f, v, top, left, ps)

    def make_batch(self, patches: list[Patch]) -> Batch:
        b = Batch(patches, [], [], [], [])
        for p in patches:
            cam = self.dataset.cameras[p.view]
            rr, cc = np.mgrid[p.top : p.top + p.size, p.left : p.left + p.size]
            o, d = generate_rays(cam, np.stack([cc.reshape(-1), rr.reshape(-1)], axis=1))
            img, mask = self.images(p.frame, p.view)
            if self.cfg["loss"]["mask_target"] == "prior":
                mask = self.prior_mask_image(p.frame, p.view).astype(np.float64)
            b.origins.append(o)
            b.dirs.append(d)
            b.rgb.append(img[rr, cc].reshape(-1, 3))
            b.mask.append(mask[rr, cc].reshape(-1))
        return b

    def sample_batch(self, rng: np.random.Generator | None = None) -> Batch:
        rng = rng or self.rng
        return self.make_batch([self.sample_patch(rng) for _ in range(self.cfg["train"]["patches"])])

    # ------------------------------------------------------------- losses

    def eikonal_points(self, rng: np.random.Generator) -> np.ndarray:
        n = self.cfg["train"]["eikonal_points"]
        uni = rng.uniform(-self.half, self.half, size=(n // 2, 3))
        verts = self.prior.template.vertices
        near = verts[rng.integers(0, len(verts), n - n // 2)] + rng.normal(scale=0.02, size=(n - n // 2, 3))
        return np.concatenate([uni, near])

    def render_terms(self, batch: Batch, rng: np.random.Generator | None = None) -> dict[str, torch.Tensor]:
        """Every loss term that needs rendered rays."""
        dtype = self.model.dtype
        jitter = rng if (rng is not None and self.cfg["sampling"]["jitter"]) else None
        preds, gts, opac, pmask, tmask, w_pred, w_init = [], [], [], [], [], [], []
        lp, ns = [], []
        for p, o, d, rgb, m in zip(batch.patches, batch.origins, batch.dirs, batch.rgb, batch.mask):
            out = render_rays(self.model, self.prior, self.context(p.frame), o, d, self.settings, jitter, train=True)
            gt = torch.from_numpy(rgb).to(dtype)
            preds.append(out["rgb"])
            gts.append(gt)
            opac.append(out["opacity"])
            pmask.append(out["prior_mask"])
            tmask.append(torch.from_numpy(m).to(dtype))
            w_pred.append(out["w_pred"])
            w_init.append(out["w_init"])
            img_p = out["rgb"].reshape(p.size, p.size, 3)
            img_g = gt.reshape(p.size, p.size, 3)
            ns.append(loss_nssim(img_p, img_g))
            if self.lpips is not None:
                lp.append(self.lpips(img_p, img_g))
        terms = {
            "rgb": loss_rgb(torch.cat(preds), torch.cat(gts)),
            "nssim": torch.stack(ns).mean(),
            "mask": loss_mask(torch.cat(opac), torch.cat(tmask), torch.cat(pmask)),
        }
        if lp:
            terms["lpips"] = torch.stack(lp).mean()
        wp, wi = torch.cat(w_pred), torch.cat(w_init)
        if self.weights.skinning_weight(self.step) > 0:
            terms["skinning"] = loss_skinning(wp, wi)
        else:
            terms["skinning"] = loss_skinning(wp.detach(), wi)
        return terms

    def eikonal_term(self, rng: np.random.Generator | None = None) -> dict[str, torch.Tensor]:
        if self.weights.lambda4 <= 0:
            return {}
        eik_rng = rng if rng is not None else np.random.default_rng(self.seed)
        x = torch.from_numpy(self.eikonal_points(eik_rng)).to(self.model.dtype)
        _, g, _ = self.model.body.sdf(x, create_graph=True)
        return {"eikonal": loss_eikonal(g)}

    def losses(self, batch: Batch, rng: np.random.Generator | None = None):
        """(total, report) for ``batch``; ``rng`` drives jitter and eikonal points."""
        terms = self.render_terms(batch, rng)
        terms.update(self.eikonal_term(rng))
        return total_loss(terms, self.weights, self.step)

    def accumulate(self, batch: Batch, rng: np.random.Generator) -> LossReport:
        """Backward chunk by chunk so peak memory scales with ``train.chunk_patches``.

        Patches share one size, so chunk means weighted by chunk share equal the
        batch means; the mask term is normalised per chunk.
        """
        c = self.cfg["train"]["chunk_patches"]
        P = len(batch.patches)
        if not c or c >= P:
            total, report = self.losses(batch, rng)
            backward(total, self.model)
            return report
        acc = np.zeros(len(TERMS) + 1)
        for i in range(0, P, c):
            sl = slice(i, i + c)
            sub = Batch(batch.patches[sl], batch.origins[sl], batch.dirs[sl], batch.rgb[sl], batch.mask[sl])
            share = len(sub.patches) / P
            total, rep = total_loss(self.render_terms(sub, rng), self.weights, self.step)
            backward(total * share, self.model)
            acc += share * np.array(rep.row())
        eik = self.eikonal_term(rng)
        if eik:
            total, rep = total_loss(eik, self.weights, self.step)
            backward(total, self.model)
            acc += np.array(rep.row())
        return LossReport(*(float(v) for v in acc))

    # ------------------------------------------------------------- loop

    def warmup(self) -> None:
        if not self.warmed:
            warmup_skinning(self.model, self.prior, self.cfg["train"]["skin_warmup"],
                            np.random.default_rng([self.seed, 1]))
            self.warmed = True

    def train_step(self) -> LossReport:
        iters = self.cfg["train"]["iters"]
        set_learning_rate(self.opt, self.step, iters)
        batch = self.sample_batch(self.rng)
        self.opt.zero_grad(set_to_none=True)
        report = self.accumulate(batch, self.rng)
        self.opt.step()
        self.step += 1
        return report

    def fit(self, iters: int | None = None, log_path: str | Path | None = None) -> list[LossReport]:
        """Run until ``iters`` total steps; returns the reports of this call."""
        tc = self.cfg["train"]
        iters = tc["iters"] if iters is None else iters
        self.warmup()
        log_path = Path(log_path) if log_path is not None else self.out_dir / "train_log.csv"
        log_path.parent.mkdir(parents=True, exist_ok=True)
        new = not log_path.exists()
        reports = []
        with open(log_path, "a", newline="") as fh:
            w = csv.writer(fh)
            if new:
                w.writerow(LOG_HEADER)
            while self.step < iters:
                step = self.step
                rep = self.train_step()
                lr = self.opt.param_groups[0]["lr"]
                reports.append(rep)
                if step % tc["log_every"] == 0:
                    w.writerow([step, *(f"{x:.8g}" for x in rep.row()), f"{lr:.8g}", f"{float(self.model.scale().detach()):.8g}"])
                    fh.flush()
                if self.step % tc["save_every"] == 0 or self.step == iters:
                    self.save(self.out_dir / checkpoint_name(self.step))
                    log.info("step %d total %.5f", self.step, rep.total)
        return reports

    # ------------------------------------------------------------- persistence

    def state_tensors(self) -> dict[str, np.ndarray]:
        t = {f"model/{k}": v.detach().cpu().numpy() for k, v in self.model.state_dict().items()}
        names = {id(p): n for n, p in self.model.named_parameters()}
        for p, st in self.opt.state.items():
            n = names[id(p)]
            for k, v in st.items():
                t[f"adam/{n}/{k}"] = torch.as_tensor(v).detach().cpu().numpy()
        return t

    def meta(self) -> dict:
        return {
            "config": self.cfg,
            "body": self.prior.config,
            "step": self.step,
            "warmed": self.warmed,
            "rng": self.rng.bit_generator.state,
        }

    def save(self, path: str | Path) -> Path:
        save_checkpoint(path, self.state_tensors(), self.meta())
        return Path(path)

    def load(self, path: str | Path) -> None:
        tensors, meta = load_checkpoint(path)
        restore_model(self.model, tensors)
        params = dict(self.model.named_parameters())
        self.opt.state.clear()
        for key, arr in tensors.items():
            if not key.startswith("adam/"):
                continue
            name, field = key[5:].rsplit("/", 1)
            self.opt.state[params[name]][field] = torch.from_numpy(arr.copy())
        self.step = int(meta["step"])
        self.warmed = bool(meta.get("warmed", True))
        self.rng.bit_generator.state = meta["rng"]


def restore_model(model: AvatarModel, tensors: dict[str, np.ndarray]) -> None:
    sd = {k[6:]: torch.from_numpy(v.copy()) for k, v in tensors.items() if k.startswith("model/")}
    model.load_state_dict(sd)


def load_model(path: str | Path, prior: BodyPrior | None = None):
    """(model, prior, config, meta) from a training checkpoint."""
    tensors, meta = load_checkpoint(path)
    if meta is None or "config" not in meta:
        raise ValueError(f"{path}: checkpoint carries no config")
    cfg = merge_config(DEFAULT_CONFIG, meta["config"])
    prior = prior if prior is not None else build_body_prior(meta["body"])
    model = AvatarModel(prior, cfg["model"], cfg["train"]["seed"], torch_dtype(cfg))
    restore_model(model, tensors)
    return model, prior, cfg, meta
