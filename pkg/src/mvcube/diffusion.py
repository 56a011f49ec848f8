"""Forward process, training objective, classifier-free guidance, DDIM.

Timestep convention: the math index t in [0, T] counts applied noising
steps, with alpha_bar(0) = 1 (clean data) and alpha_bar(T) ~ 0. Schedule
arrays are stored for t = 1..T at positions 0..T-1. The denoiser is
conditioned on the index t - 1 in [0, T), so the noisiest network step is
T - 1. The DDIM sampler visits the evenly spaced math steps
T, T-s, ..., s, 0 (50 transitions by default), querying the network at
t - 1 for each visited t > 0 and landing exactly on clean data at t = 0.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np
import torch

from . import checkpoint as ckpt_io
from . import inject, scenegen, textenc
from .denoiser import BatchedCondition, DenoiserModel, camera_tensor
from .rng import normal32, stream

V_VIEWS = 4


@dataclass
class NoiseSchedule:
    T: int
    betas: np.ndarray       # (T,) float64, beta_t at index t-1
    alphas: np.ndarray      # (T,) 1 - beta
    alpha_bars: np.ndarray  # (T,) cumulative product, alpha_bar_t at index t-1

    def alpha_bar(self, t) -> np.ndarray:
        """alpha_bar at math step(s) t in [0, T]; alpha_bar(0) = 1 exactly."""
        t = np.asarray(t, dtype=np.int64)
        if np.any(t < 0) or np.any(t > self.T):
            raise ValueError(f"t out of [0, {self.T}]")
        out = np.where(t > 0, self.alpha_bars[np.maximum(t - 1, 0)], 1.0)
        return out


def make_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas = 1.0 - betas
    return NoiseSchedule(T=T, betas=betas, alphas=alphas, alpha_bars=np.cumprod(alphas))


def _ab_coeffs(schedule: NoiseSchedule, t, like: torch.Tensor):
    """sqrt(alpha_bar) and sqrt(1 - alpha_bar) shaped to broadcast over `like`."""
    ab = schedule.alpha_bar(t)
    shape = (-1,) + (1,) * (like.dim() - 1) if np.ndim(ab) else ()
    sa = torch.as_tensor(np.sqrt(ab), dtype=like.dtype).reshape(shape)
    sq = torch.as_tensor(np.sqrt(1.0 - ab), dtype=like.dtype).reshape(shape)
    return sa, sq


def q_sample(x0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Noising: sqrt(ab_t) x0 + sqrt(1 - ab_t) eps. Expects x0 scaled to [-1, 1].

    t may be a scalar or one index per leading batch entry.
    """
    if eps.shape != x0.shape:
        raise ValueError("noise shape must match x0")
    sa, sq = _ab_coeffs(schedule, t, x0)
    return sa * x0 + sq * eps


def predict_x0(x_t: torch.Tensor, eps_pred: torch.Tensor, t, schedule: NoiseSchedule) -> torch.Tensor:
    """Invert q_sample for a given noise estimate, clamped to [-1, 1]."""
    if eps_pred.shape != x_t.shape:
        raise ValueError("eps shape must match x_t")
    sa, sq = _ab_coeffs(schedule, t, x_t)
    return ((x_t - sq * eps_pred) / sa).clamp(-1.0, 1.0)


def cfg_combine(eps_cond: torch.Tensor, eps_uncond: torch.Tensor, scale: float,
                rescale_factor: float = 0.0) -> torch.Tensor:
    """Classifier-free guidance with optional std rescaling toward the
    conditional branch. Statistics are taken per image over all elements;
    leading dims are batch."""
    eps_cfg = eps_uncond + scale * (eps_cond - eps_uncond)
    if rescale_factor <= 0.0:
        return eps_cfg
    flat_c = eps_cond.reshape(eps_cond.shape[0], -1) if eps_cond.dim() > 1 else eps_cond.reshape(1, -1)
    flat_g = eps_cfg.reshape(flat_c.shape)
    std_c = flat_c.std(dim=1)
    std_g = flat_g.std(dim=1)
    keep = std_g < 1e-12  # degenerate guided output: skip rescale
    ratio = std_c / torch.where(keep, torch.ones_like(std_g), std_g)
    ratio = torch.where(keep, torch.ones_like(ratio), ratio)
    shape = (-1,) + (1,) * (eps_cfg.dim() - 1)
    eps_rs = eps_cfg * ratio.reshape(shape)
    return rescale_factor * eps_rs + (1.0 - rescale_factor) * eps_cfg


def ddim_step(x_t: torch.Tensor, eps_guided: torch.Tensor, t: int, t_prev: int,
              schedule: NoiseSchedule) -> torch.Tensor:
    """Deterministic (eta = 0) update from math step t to t_prev < t."""
    if not (t > t_prev >= 0):
        raise ValueError("need t > t_prev >= 0")
    x0 = predict_x0(x_t, eps_guided, t, schedule)
    sa, sq = _ab_coeffs(schedule, t_prev, x_t)
    return sa * x0 + sq * eps_guided


def ddim_timesteps(T: int, steps: int) -> list[tuple[int, int]]:
    """Evenly spaced (t, t_prev) math pairs from T down to 0.

    With T = 1000 and 50 steps: (1000, 980), (980, 960), ..., (20, 0); the
    network sees indices t-1 = 999, 979, ..., 19.
    """
    ts = np.unique(np.round(np.linspace(0, T, steps + 1)).astype(int))[::-1]
    return [(int(ts[i]), int(ts[i + 1])) for i in range(len(ts) - 1)]


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-2
    scenes_per_batch: int = 1
    dropout: float = 0.1            # whole-scene condition dropout probability
    margin_low: float = -0.1
    margin_high: float = 0.1
    total_steps: int = 20000
    seed: int = 0
    log_every: int = 20
    ckpt_every: int = 2000


class SceneDataset:
    """In-memory view of a rendered dataset directory."""

    def __init__(self, data_dir: str):
        self.manifest = scenegen.load_manifest(data_dir)
        scenes = self.manifest["scenes"]
        self.n = len(scenes)
        self.images = np.stack(
            [
                np.stack([scenegen.load_png(os.path.join(data_dir, v["file"])) for v in s["views"]])
                for s in scenes
            ]
        ).transpose(0, 1, 4, 2, 3)  # (n, V, 3, H, W)
        self.overall = [s["overall_caption"] for s in scenes]
        self.view_captions = [[v["caption"] for v in s["views"]] for s in scenes]
        self.keys = {scenegen.scene_from_entry(s).key() for s in scenes}
        poses = [scenegen.camera_for_view(side) for side in scenegen.SIDES]
        self.cams = camera_tensor(poses)  # (V, 16), same canonical poses per scene

    def batch(self, idx: np.ndarray) -> tuple[torch.Tensor, list, list, torch.Tensor]:
        imgs = torch.from_numpy(self.images[idx].astype(np.float32))
        overall = [self.overall[i] for i in idx]
        views = [self.view_captions[i] for i in idx]
        cams = self.cams.unsqueeze(0).expand(len(idx), -1, -1)
        return imgs, overall, views, cams


def _conditions_for(model: DenoiserModel, overall: list[str], view_caps: list[list[str]],
                    dropped: np.ndarray) -> BatchedCondition:
    null = textenc.null_condition(model.text)
    conds = []
    for b, (o, caps) in enumerate(zip(overall, view_caps)):
        if dropped[b]:
            conds.append([
                textenc.TextCondition(E_o=null.E, E_v=null.E, CLS_o=null.CLS, CLS_v=null.CLS)
                for _ in caps
            ])
        else:
            conds.append([textenc.encode_pair(o, c, model.text) for c in caps])
    return BatchedCondition.stack(conds)


def training_loss(model: DenoiserModel, images: torch.Tensor, overall: list[str],
                  view_caps: list[list[str]], cams: torch.Tensor,
                  schedule: NoiseSchedule, rng: np.random.Generator,
                  dropout: float = 0.1, sink=None):
    """One training objective evaluation. images: (B, V, 3, H, W) in [0, 1].

    Draw order from `rng` is fixed: t per scene, margin, dropout mask, noise.
    Returns (loss, info dict).
    """
    b = images.shape[0]
    t_math = rng.integers(1, schedule.T + 1, size=b)
    margin = inject.sample_training_margin(rng)
    dropped = rng.random(b) < dropout
    eps = torch.from_numpy(normal32(rng, tuple(images.shape)))

    cond = _conditions_for(model, overall, view_caps, dropped)
    x0 = images * 2.0 - 1.0
    x_t = q_sample(x0, t_math, eps, schedule)
    policy = inject.RoutingPolicy("adaptive", margin)
    eps_pred = model(x_t, cond, cams, torch.from_numpy(t_math - 1), policy, sink=sink)
    loss = ((eps_pred - eps) ** 2).mean()
    return loss, {"margin": margin, "dropped": int(dropped.sum()), "t": t_math}


def _optimizer(model: DenoiserModel, config: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(model.parameters(), lr=config.lr,
                             weight_decay=config.weight_decay)


def _save_train_ckpt(model, opt, step, out_dir, name):
    path = os.path.join(out_dir, name)
    ckpt_io.save_model(path, model, train_step=step)
    ckpt_io.save_optimizer(path + ".optim", model, opt, train_step=step)
    return path


def train(model: DenoiserModel, dataset: SceneDataset, schedule: NoiseSchedule,
          config: TrainConfig, out_dir: str, resume: bool = False,
          progress=None) -> str:
    """Train the denoiser; returns the final checkpoint path.

    Every step draws from its own (seed, "train", step) stream, so resuming
    from step k replays exactly the sequence a single run would have seen.
    """
    os.makedirs(out_dir, exist_ok=True)
    opt = _optimizer(model, config)
    start = 0
    latest = os.path.join(out_dir, "latest.ckpt")
    if resume:
        meta = ckpt_io.load_model(latest, model)
        ckpt_io.load_optimizer(latest + ".optim", model, opt)
        start = int(meta["train_step"])

    log_path = os.path.join(out_dir, "loss.csv")
    mode = "a" if (resume and os.path.exists(log_path)) else "w"
    with open(log_path, mode, newline="") as fh:
        writer = csv.writer(fh)
        if mode == "w":
            writer.writerow(["step", "loss", "margin", "dropped"])
        for step in range(start, config.total_steps):
            rng = stream(config.seed, "train", step)
            idx = rng.integers(0, dataset.n, size=config.scenes_per_batch)
            imgs, overall, views, cams = dataset.batch(idx)
            loss, info = training_loss(
                model, imgs, overall, views, cams, schedule, rng, config.dropout
            )
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            writer.writerow([step, f"{loss.item():.6f}", f"{info['margin']:.6f}", info["dropped"]])
            if progress is not None and (step + 1) % config.log_every == 0:
                progress(step + 1, loss.item())
            if (step + 1) % config.ckpt_every == 0 or step + 1 == config.total_steps:
                _save_train_ckpt(model, opt, step + 1, out_dir, "latest.ckpt")
    final = os.path.join(out_dir, "model.ckpt")
    ckpt_io.save_model(final, model, train_step=config.total_steps)
    return final


def canonical_cameras() -> torch.Tensor:
    return camera_tensor([scenegen.camera_for_view(s) for s in scenegen.SIDES])


def _null_condition_rows(model: DenoiserModel, n_rows: int) -> BatchedCondition:
    null = textenc.null_condition(model.text)
    row = textenc.TextCondition(E_o=null.E, E_v=null.E, CLS_o=null.CLS, CLS_v=null.CLS)
    return BatchedCondition.stack([[row] * V_VIEWS for _ in range(n_rows // V_VIEWS)])


def sample_batch(model: DenoiserModel, jobs: list[dict], schedule: NoiseSchedule,
                 policy: inject.RoutingPolicy, steps: int = 50, cfg_scale: float = 7.5,
                 rescale: float = 0.0, sink=None) -> np.ndarray:
    """Generate the four canonical views for each job.

    Each job is {"overall": str, "views": [front, right, back, left],
    "seed": int}; its initial noise depends only on its own seed, so batching
    is a throughput detail. Returns (J, V, 3, H, W) images in [0, 1].
    """
    j = len(jobs)
    cams = canonical_cameras().unsqueeze(0).expand(j, -1, -1)
    with torch.no_grad():
        cond = BatchedCondition.stack(
            [[textenc.encode_pair(job["overall"], vp, model.text) for vp in job["views"]]
             for job in jobs]
        )
        uncond = _null_condition_rows(model, j * V_VIEWS)
        x = torch.stack([
            torch.from_numpy(normal32(stream(job["seed"], "sample2d"), (V_VIEWS, 3, 32, 32)))
            for job in jobs
        ])
        for t, t_prev in ddim_timesteps(schedule.T, steps):
            t_net = torch.full((j,), t - 1)
            eps_c = model(x, cond, cams, t_net, policy, sink=sink)
            eps_u = model(x, uncond, cams, t_net, policy)
            flat = cfg_combine(
                eps_c.reshape(j * V_VIEWS, 3, 32, 32),
                eps_u.reshape(j * V_VIEWS, 3, 32, 32),
                cfg_scale, rescale,
            )
            x = ddim_step(x, flat.reshape(x.shape), t, t_prev, schedule)
    return ((x + 1.0) / 2.0).clamp(0.0, 1.0).numpy()


def sample(model: DenoiserModel, overall: str, view_prompts: list[str],
           policy: inject.RoutingPolicy, schedule: NoiseSchedule | None = None,
           steps: int = 50, cfg_scale: float = 7.5, rescale: float = 0.0,
           seed: int = 0, sink=None) -> np.ndarray:
    """Four-view generation for one prompt set; see sample_batch."""
    if len(view_prompts) != V_VIEWS:
        raise ValueError(f"expected {V_VIEWS} view prompts (front, right, back, left)")
    schedule = schedule or make_schedule()
    job = {"overall": overall, "views": list(view_prompts), "seed": seed}
    return sample_batch(model, [job], schedule, policy, steps, cfg_scale, rescale, sink)[0]
