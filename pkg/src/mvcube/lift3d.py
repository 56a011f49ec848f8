"""Text-to-3D by score distillation against the frozen 2D model.

A voxel field (pre-activation density and color grids over [-0.5, 0.5]^3) is
rendered through a differentiable emission-absorption ray marcher. Each
optimization step renders a random view, picks the view-specific prompt from
the camera azimuth, asks the frozen denoiser for a clean-image estimate of
the noised render under classifier-free guidance, and descends the squared
error between the render and that estimate (the estimate is treated as a
constant, so gradients reach only the field).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from . import checkpoint as ckpt_io
from . import inject, scenegen, textenc
from .denoiser import BatchedCondition, DenoiserModel, camera_tensor
from .diffusion import NoiseSchedule, cfg_combine, make_schedule, predict_x0, q_sample
from .rng import normal32, stream

GRID_SPAN = 0.5  # grid covers [-GRID_SPAN, GRID_SPAN]^3
FOV_DEG = 45.0


def view_text_for_azimuth(azimuth_deg: float) -> str:
    """Side whose prompt guides a camera at this azimuth.

    Partition of [0, 360): front [10, 170], right (170, 190),
    back [190, 350], left elsewhere.
    """
    az = azimuth_deg % 360.0
    if 10.0 <= az <= 170.0:
        return "front"
    if 170.0 < az < 190.0:
        return "right"
    if 190.0 <= az <= 350.0:
        return "back"
    return "left"


def sample_camera(rng: np.random.Generator) -> scenegen.CameraPose:
    """Azimuth uniform on [0, 360), elevation uniform on [0, 30], radius 2."""
    azimuth = float(rng.uniform(0.0, 360.0))
    elevation = float(rng.uniform(0.0, 30.0))
    return scenegen.CameraPose.from_spherical(azimuth, elevation, 2.0)


class VoxelField:
    """Density + color grids stored pre-activation.

    Activated density is softplus(density_raw) >= 0; activated color is
    sigmoid(color_raw) in [0, 1]. Both activations are smooth so finite
    difference gradient checks behave.
    """

    def __init__(self, n: int = 32, dtype=torch.float32,
                 density_init: float = -3.0, color_init: float = 0.0):
        self.n = n
        self.density_raw = torch.full((n, n, n), density_init, dtype=dtype, requires_grad=True)
        self.color_raw = torch.full((3, n, n, n), color_init, dtype=dtype, requires_grad=True)

    def parameters(self):
        return [self.density_raw, self.color_raw]

    def density(self) -> torch.Tensor:
        return F.softplus(self.density_raw)

    def color(self) -> torch.Tensor:
        return torch.sigmoid(self.color_raw)


@dataclass
class RenderOutput:
    image: torch.Tensor         # (H, W, 3)
    opacity: torch.Tensor       # (H, W)
    transmittance: torch.Tensor | None = None  # (H, W, S+1) when traced


@dataclass
class LiftConfig:
    total_steps: int = 1000
    lr: float = 0.01
    cfg_scale: float = 50.0
    rescale: float = 0.5
    margin: float = -0.025
    anneal_frac: float = 0.8        # horizon as a fraction of total steps
    anneal_start: float = 0.98
    anneal_max_end: float = 0.5
    anneal_min_end: float = 0.02
    grid_n: int = 32
    res_low: int = 16               # render resolution for the first half
    res_high: int = 32
    ray_samples: int = 64
    background: float = 0.5
    seed: int = 0
    snapshot_every: int = 0         # 0 disables intermediate render dumps


def _ray_grid(pose: scenegen.CameraPose, resolution: int, dtype) -> tuple[torch.Tensor, torch.Tensor]:
    """Ray origins (3,) and unit directions (H*W, 3) for a pinhole camera."""
    right, up, back = scenegen.camera_basis(pose)
    tan_half = np.tan(np.deg2rad(FOV_DEG) / 2.0)
    ii, jj = np.mgrid[0:resolution, 0:resolution]
    u = (2.0 * (jj + 0.5) / resolution - 1.0) * tan_half
    v = (1.0 - 2.0 * (ii + 0.5) / resolution) * tan_half
    dirs = u[..., None] * right + v[..., None] * up - back
    dirs = dirs / np.linalg.norm(dirs, axis=-1, keepdims=True)
    origin = torch.as_tensor(pose.position, dtype=dtype)
    return origin, torch.as_tensor(dirs.reshape(-1, 3), dtype=dtype)


def _ray_box(origin: torch.Tensor, dirs: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Entry/exit distances of each ray through the grid cube (slab method).

    Rays that miss get t_far == t_near, which renders as pure background
    because every segment length collapses to zero.
    """
    # avoid 0/0 NaNs for axis-parallel rays: nudge tiny components, keep sign
    sign = torch.where(dirs >= 0, torch.ones_like(dirs), -torch.ones_like(dirs))
    safe = torch.where(dirs.abs() < 1e-9, sign * 1e-9, dirs)
    inv = 1.0 / safe
    t0 = (-GRID_SPAN - origin) * inv
    t1 = (GRID_SPAN - origin) * inv
    t_near = torch.minimum(t0, t1).amax(dim=1).clamp(min=0.0)
    t_far = torch.maximum(t0, t1).amin(dim=1)
    t_far = torch.maximum(t_far, t_near)
    return t_near, t_far


def _trilinear(grid: torch.Tensor, pts: torch.Tensor) -> torch.Tensor:
    """Trilinear interpolation of grid (C, N, N, N) at pts (M, 3) in world space."""
    c, n = grid.shape[0], grid.shape[1]
    g = (pts + GRID_SPAN) / (2.0 * GRID_SPAN) * (n - 1)
    g = g.clamp(0.0, n - 1)
    i0 = g.floor().long().clamp(max=n - 2)
    f = g - i0
    i1 = i0 + 1
    flat = grid.reshape(c, -1)

    def gather(ix, iy, iz):
        idx = (ix * n + iy) * n + iz
        return flat[:, idx]  # (C, M)

    fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
    out = (
        gather(i0[:, 0], i0[:, 1], i0[:, 2]) * (1 - fx) * (1 - fy) * (1 - fz)
        + gather(i1[:, 0], i0[:, 1], i0[:, 2]) * fx * (1 - fy) * (1 - fz)
        + gather(i0[:, 0], i1[:, 1], i0[:, 2]) * (1 - fx) * fy * (1 - fz)
        + gather(i0[:, 0], i0[:, 1], i1[:, 2]) * (1 - fx) * (1 - fy) * fz
        + gather(i1[:, 0], i1[:, 1], i0[:, 2]) * fx * fy * (1 - fz)
        + gather(i1[:, 0], i0[:, 1], i1[:, 2]) * fx * (1 - fy) * fz
        + gather(i0[:, 0], i1[:, 1], i1[:, 2]) * (1 - fx) * fy * fz
        + gather(i1[:, 0], i1[:, 1], i1[:, 2]) * fx * fy * fz
    )
    return out


def render(field: VoxelField, pose: scenegen.CameraPose, resolution: int,
           samples: int = 64, background: float = 0.5,
           return_trace: bool = False) -> RenderOutput:
    """Emission-absorption ray march through the voxel grid.

    Per ray: S uniform mid-point samples across the ray-box intersection,
    weights w_i = T_i (1 - exp(-sigma_i d_i)) with T_1 = 1 and
    T_{i+1} = T_i exp(-sigma_i d_i); pixel = sum w_i c_i + T_end * background.
    Fully differentiable with respect to the field's raw grids.
    """
    if resolution <= 0:
        raise ValueError("resolution must be positive")
    dtype = field.density_raw.dtype
    origin, dirs = _ray_grid(pose, resolution, dtype)
    t_near, t_far = _ray_box(origin, dirs)
    n_rays = dirs.shape[0]

    frac = (torch.arange(samples, dtype=dtype) + 0.5) / samples
    ts = t_near.unsqueeze(1) + (t_far - t_near).unsqueeze(1) * frac  # (R, S)
    delta = ((t_far - t_near) / samples).unsqueeze(1)                # (R, 1)
    pts = origin + ts.unsqueeze(-1) * dirs.unsqueeze(1)              # (R, S, 3)

    sigma_grid = field.density().unsqueeze(0)   # (1, N, N, N)
    color_grid = field.color()                  # (3, N, N, N)
    flat_pts = pts.reshape(-1, 3)
    sigma = _trilinear(sigma_grid, flat_pts).reshape(n_rays, samples)
    color = _trilinear(color_grid, flat_pts).reshape(3, n_rays, samples).permute(1, 2, 0)

    att = torch.exp(-sigma * delta)                       # per-segment transparency
    trans = torch.cumprod(att, dim=1)
    trans = torch.cat([torch.ones_like(trans[:, :1]), trans], dim=1)  # (R, S+1), T_1 = 1
    weights = trans[:, :-1] * (1.0 - att)
    rgb = (weights.unsqueeze(-1) * color).sum(dim=1)
    t_end = trans[:, -1]
    image = rgb + t_end.unsqueeze(-1) * background
    opacity = 1.0 - t_end
    out = RenderOutput(
        image=image.reshape(resolution, resolution, 3),
        opacity=opacity.reshape(resolution, resolution),
        transmittance=trans.reshape(resolution, resolution, samples + 1) if return_trace else None,
    )
    return out


def anneal_timestep(step: int, config: LiftConfig) -> tuple[float, float]:
    """(t_min, t_max) fractions of T for this step.

    Both bounds start at anneal_start; over the horizon the max bound falls
    linearly to anneal_max_end and the min bound to anneal_min_end, then both
    stay constant.
    """
    horizon = max(1, int(round(config.anneal_frac * config.total_steps)))
    u = min(step, horizon) / horizon
    t_max = config.anneal_start + (config.anneal_max_end - config.anneal_start) * u
    t_min = config.anneal_start + (config.anneal_min_end - config.anneal_start) * u
    return (t_min, t_max)


def _render_resolution(step: int, config: LiftConfig) -> int:
    return config.res_low if step < config.total_steps // 2 else config.res_high


def sds_step(field: VoxelField, model: DenoiserModel, schedule: NoiseSchedule,
             prompts: dict, config: LiftConfig, rng: np.random.Generator,
             step: int) -> tuple[torch.Tensor, dict]:
    """One score-distillation objective evaluation.

    prompts: {"overall": str, "front": str, "right": str, "back": str,
    "left": str}. Returns (loss, info); caller backpropagates. The teacher
    runs under no_grad, so its parameters never receive gradients.
    Draw order from rng: camera, timestep fraction, noise.
    """
    pose = sample_camera(rng)
    t_lo, t_hi = anneal_timestep(step, config)
    t_frac = float(rng.uniform(t_lo, t_hi))
    t_math = int(np.clip(round(t_frac * schedule.T), 1, schedule.T))
    eps = torch.from_numpy(normal32(rng, (1, 1, 3, 32, 32)))

    res = _render_resolution(step, config)
    out = render(field, pose, res, samples=config.ray_samples, background=config.background)
    img = out.image.permute(2, 0, 1).unsqueeze(0)  # (1, 3, res, res)
    if res != 32:
        img = F.interpolate(img, size=(32, 32), mode="bilinear", align_corners=False)
    x = img.unsqueeze(0) * 2.0 - 1.0               # (1, 1, 3, 32, 32) in [-1, 1]

    side = view_text_for_azimuth(pose.azimuth)
    with torch.no_grad():
        cond = BatchedCondition.stack(
            [[textenc.encode_pair(prompts["overall"], prompts[side], model.text)]]
        )
        null = textenc.null_condition(model.text)
        uncond = BatchedCondition.stack(
            [[textenc.TextCondition(E_o=null.E, E_v=null.E, CLS_o=null.CLS, CLS_v=null.CLS)]]
        )
        cams = camera_tensor([pose]).unsqueeze(0)
        x_t = q_sample(x.detach(), t_math, eps, schedule)
        policy = inject.RoutingPolicy("adaptive", config.margin)
        t_net = torch.tensor([t_math - 1])
        eps_c = model(x_t, cond, cams, t_net, policy)
        eps_u = model(x_t, uncond, cams, t_net, policy)
        eps_g = cfg_combine(
            eps_c.reshape(1, -1), eps_u.reshape(1, -1), config.cfg_scale, config.rescale
        ).reshape(x_t.shape)
        x0_hat = predict_x0(x_t, eps_g, t_math, schedule)

    loss = ((x - x0_hat) ** 2).sum()
    info = {"t": t_math, "azimuth": pose.azimuth, "side": side, "resolution": res}
    return loss, info


def turntable_poses(frames: int = 12) -> list[scenegen.CameraPose]:
    return [scenegen.CameraPose.from_spherical(i * 360.0 / frames, 0.0, 2.0) for i in range(frames)]


def optimize(prompts: dict, model: DenoiserModel, config: LiftConfig, out_dir: str,
             schedule: NoiseSchedule | None = None, progress=None) -> VoxelField:
    """Full lift: optimize a voxel field against the frozen model and export
    field.ckpt, the four interval-center renders, a turntable, and run.json."""
    schedule = schedule or make_schedule()
    os.makedirs(out_dir, exist_ok=True)
    field = VoxelField(config.grid_n)
    opt = torch.optim.Adam(field.parameters(), lr=config.lr)
    losses = []
    for step in range(config.total_steps):
        rng = stream(config.seed, "lift", step)
        loss, info = sds_step(field, model, schedule, prompts, config, rng, step)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.item()))
        if progress is not None and (step + 1) % 50 == 0:
            progress(step + 1, losses[-1])

    ckpt_io.save_checkpoint(
        os.path.join(out_dir, "field.ckpt"),
        {"density_raw": field.density_raw.detach().numpy(),
         "color_raw": field.color_raw.detach().numpy()},
        {"kind": "voxel_field", "grid_n": config.grid_n, "train_step": config.total_steps},
    )
    renders_dir = os.path.join(out_dir, "renders")
    os.makedirs(renders_dir, exist_ok=True)
    with torch.no_grad():
        for side in scenegen.SIDES:
            pose = scenegen.camera_for_view(side)
            img = render(field, pose, config.res_high, config.ray_samples).image
            scenegen.save_png(
                os.path.join(renders_dir, f"az{scenegen.SIDE_AZIMUTH[side]}.png"), img.numpy()
            )
        tt_dir = os.path.join(out_dir, "turntable")
        os.makedirs(tt_dir, exist_ok=True)
        for i, pose in enumerate(turntable_poses()):
            img = render(field, pose, config.res_high, config.ray_samples).image
            scenegen.save_png(os.path.join(tt_dir, f"frame_{i:02d}.png"), img.numpy())
    run = {
        "prompts": prompts,
        "seed": config.seed,
        "config": {k: getattr(config, k) for k in config.__dataclass_fields__},
        "loss_curve": losses,
    }
    with open(os.path.join(out_dir, "run.json"), "w", encoding="utf-8") as fh:
        json.dump(run, fh, indent=1)
        fh.write("\n")
    return field


def load_field(path: str) -> VoxelField:
    arrays, metadata = ckpt_io.load_checkpoint(path)
    if metadata.get("kind") != "voxel_field":
        raise ValueError(f"{path} is not a voxel field checkpoint")
    n = int(metadata["grid_n"])
    field = VoxelField(n)
    with torch.no_grad():
        field.density_raw.copy_(torch.from_numpy(arrays["density_raw"]))
        field.color_raw.copy_(torch.from_numpy(arrays["color_raw"]))
    return field
