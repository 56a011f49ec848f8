"""Tiny pixel-space denoising U-Net with multi-view and text conditioning.

Fixed architecture: three resolutions (32 -> 16 -> 8) with channels
(32, 64, 128), two residual blocks per level, and five attention sites
(16x16 and 8x8 on the way down, the 8x8 bottleneck, 8x8 and 16x16 on the way
up). Each attention site runs self-attention over the concatenated tokens of
all views of a scene (expanded attention; plain self-attention when V = 1)
followed by cross-attention whose keys/values come from whichever text
embedding the injection policy routes to that site.

Timestep and camera conditioning are added to every residual block: a
sinusoidal embedding of the timestep index plus an MLP of the flattened
camera-to-world matrix built from the unit camera position.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import inject, scenegen
from .rng import stream
from .textenc import D_TEXT, L_MAX, TextCondition, TextEncoder, Vocabulary

T_STEPS = 1000          # denoiser timestep indices are 0 .. T_STEPS-1
EMB_DIM = 128
CHANNELS = (32, 64, 128)
IMG_RES = 32
GROUPS = 8


def sinusoidal_features(t: torch.Tensor, dim: int = EMB_DIM) -> torch.Tensor:
    """Classic sin/cos features of an integer timestep. t: (B,) -> (B, dim)."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float32) / (half - 1)
    )
    ang = t.to(torch.float32).unsqueeze(1) * freqs.unsqueeze(0)
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=1)


class TimeEmbedding(nn.Module):
    """Sinusoidal features followed by a 2-layer perceptron."""

    def __init__(self, dim: int = EMB_DIM):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim)
        self.fc2 = nn.Linear(dim, dim)

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        if torch.any(t < 0) or torch.any(t >= T_STEPS):
            raise ValueError(f"timestep index out of [0, {T_STEPS})")
        return self.fc2(F.silu(self.fc1(sinusoidal_features(t))))


class CameraEmbedding(nn.Module):
    """2-layer perceptron on the flattened 4x4 camera-to-world matrix."""

    def __init__(self, dim: int = EMB_DIM):
        super().__init__()
        self.fc1 = nn.Linear(16, dim)
        self.fc2 = nn.Linear(dim, dim)

    def forward(self, cam: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.silu(self.fc1(cam)))


def camera_matrix(pose: scenegen.CameraPose) -> np.ndarray:
    """Flattened camera-to-world matrix used for conditioning (radius dropped)."""
    return scenegen.camera_to_world(pose).reshape(16).astype(np.float32)


def camera_tensor(poses) -> torch.Tensor:
    """Stack poses (nested sequences allowed) into a (..., 16) tensor."""
    if isinstance(poses, scenegen.CameraPose):
        return torch.from_numpy(camera_matrix(poses))
    return torch.stack([camera_tensor(p) for p in poses])


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, emb_dim: int = EMB_DIM):
        super().__init__()
        self.norm1 = nn.GroupNorm(GROUPS, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.emb_proj = nn.Linear(emb_dim, cout)
        self.norm2 = nn.GroupNorm(GROUPS, cout)
        self.conv2 = nn.Conv2d(cout, cout, 1)  # zero-initialized
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb_proj(F.silu(emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class AttentionBlock(nn.Module):
    """Expanded self-attention over all views, then routed cross-attention."""

    def __init__(self, channels: int, site: int):
        super().__init__()
        self.channels = channels
        self.site = site
        self.norm_self = nn.GroupNorm(GROUPS, channels)
        self.qkv = nn.Linear(channels, channels * 3)
        self.self_out = nn.Linear(channels, channels)  # zero-initialized
        self.norm_cross = nn.GroupNorm(GROUPS, channels)
        self.to_q = nn.Linear(channels, channels)
        self.to_k = nn.Linear(D_TEXT, channels)
        self.to_v = nn.Linear(D_TEXT, channels)
        self.cross_out = nn.Linear(channels, channels)  # zero-initialized

    def forward(self, x, scenes, views, cond, policy, t, probe, sink, view_ids):
        n, c, hh, ww = x.shape
        tokens = hh * ww

        # self-attention over the concatenated tokens of each scene's views
        h = self.norm_self(x).reshape(n, c, tokens).transpose(1, 2)  # (n, hw, c)
        q, k, v = self.qkv(h).chunk(3, dim=-1)
        q = q.reshape(scenes, views * tokens, 1, c).transpose(1, 2)
        k = k.reshape(scenes, views * tokens, 1, c).transpose(1, 2)
        v = v.reshape(scenes, views * tokens, 1, c).transpose(1, 2)
        att = F.scaled_dot_product_attention(q, k, v)
        att = att.transpose(1, 2).reshape(n, tokens, c)
        x = x + self.self_out(att).transpose(1, 2).reshape(n, c, hh, ww)

        # routing inspects the feature entering the cross-attention sublayer
        context = inject.route_batch(
            x, cond.E_o, cond.E_v, cond.CLS_o, cond.CLS_v,
            policy, self.site, t, probe, sink=sink, views=view_ids,
        )
        hq = self.norm_cross(x).reshape(n, c, tokens).transpose(1, 2)
        q = self.to_q(hq).unsqueeze(1)
        k = self.to_k(context).unsqueeze(1)
        v = self.to_v(context).unsqueeze(1)
        att = F.scaled_dot_product_attention(q, k, v).squeeze(1)
        return x + self.cross_out(att).transpose(1, 2).reshape(n, c, hh, ww)


@dataclass
class BatchedCondition:
    """Per-scene, per-view text conditioning flattened to rows of B*V."""

    E_o: torch.Tensor   # (B*V, L, D)
    E_v: torch.Tensor
    CLS_o: torch.Tensor  # (B*V, D)
    CLS_v: torch.Tensor

    @staticmethod
    def stack(conds) -> "BatchedCondition":
        """conds: sequence of scenes, each a sequence of per-view TextCondition."""
        rows = [c for scene in conds for c in scene]
        return BatchedCondition(
            E_o=torch.stack([c.E_o for c in rows]),
            E_v=torch.stack([c.E_v for c in rows]),
            CLS_o=torch.stack([c.CLS_o for c in rows]),
            CLS_v=torch.stack([c.CLS_v for c in rows]),
        )


class DenoiserModel(nn.Module):
    """Noise predictor plus the jointly trained text encoder."""

    def __init__(self, vocab: Vocabulary | None = None, probe_seed: int = 0):
        super().__init__()
        c0, c1, c2 = CHANNELS
        self.text = TextEncoder(vocab)
        self.time_emb = TimeEmbedding()
        self.cam_emb = CameraEmbedding()

        self.conv_in = nn.Conv2d(3, c0, 3, padding=1)
        self.down0 = nn.ModuleList([ResBlock(c0, c0), ResBlock(c0, c0)])
        self.pool0 = nn.Conv2d(c0, c0, 3, stride=2, padding=1)
        self.down1 = nn.ModuleList([ResBlock(c0, c1), ResBlock(c1, c1)])
        self.attn_d16 = AttentionBlock(c1, site=0)
        self.pool1 = nn.Conv2d(c1, c1, 3, stride=2, padding=1)
        self.down2 = nn.ModuleList([ResBlock(c1, c2), ResBlock(c2, c2)])
        self.attn_d8 = AttentionBlock(c2, site=1)

        self.mid1 = ResBlock(c2, c2)
        self.attn_mid = AttentionBlock(c2, site=2)
        self.mid2 = ResBlock(c2, c2)

        self.up2 = nn.ModuleList([ResBlock(c2, c2), ResBlock(c2, c2)])
        self.attn_u8 = AttentionBlock(c2, site=3)
        self.proj2 = nn.Conv2d(c2, c1, 1)
        self.up1 = nn.ModuleList([ResBlock(c1, c1), ResBlock(c1, c1)])
        self.attn_u16 = AttentionBlock(c1, site=4)
        self.proj1 = nn.Conv2d(c1, c0, 1)
        self.up0 = nn.ModuleList([ResBlock(c0, c0), ResBlock(c0, c0)])
        self.norm_out = nn.GroupNorm(GROUPS, c0)
        self.conv_out = nn.Conv2d(c0, 3, 3, padding=1)  # zero-initialized

        self.probe_seed = int(probe_seed)
        self.probes = inject.Probes(probe_seed)
        self.zero_init_names = {
            name
            for name, _ in self.named_parameters()
            if name.endswith(("conv2.weight", "self_out.weight", "cross_out.weight"))
        } | {"conv_out.weight"}

    def forward(self, x, cond: BatchedCondition, cams, t, policy, sink=None):
        """Predict the noise in x.

        x: (B, V, 3, 32, 32) or (V, 3, 32, 32); all views of a scene share
        the scene's timestep t (one index per scene, 0 <= t < T_STEPS).
        cams: (B, V, 16) flattened camera-to-world matrices.
        """
        squeeze = x.dim() == 4
        if squeeze:
            x = x.unsqueeze(0)
            cams = cams.unsqueeze(0) if cams.dim() == 2 else cams
        b, v, c, hh, ww = x.shape
        if cams.shape[:2] != (b, v):
            raise ValueError(f"camera batch {tuple(cams.shape[:2])} does not match views ({b}, {v})")
        if cond.E_o.shape[0] != b * v:
            raise ValueError(f"condition rows {cond.E_o.shape[0]} do not match {b}*{v} views")
        t = torch.as_tensor(t, dtype=torch.int64).reshape(-1)
        if t.numel() == 1:
            t = t.expand(b)
        if t.numel() != b:
            raise ValueError("one timestep index per scene required")

        emb = self.time_emb(t).unsqueeze(1) + self.cam_emb(cams)   # (B, V, 128)
        emb = emb.reshape(b * v, -1)
        t_rows = t.repeat_interleave(v)
        view_ids = torch.arange(v).repeat(b)

        def attn(block, h):
            return block(h, b, v, cond, policy, t_rows, self.probes[block.site], sink, view_ids)

        h = self.conv_in(x.reshape(b * v, c, hh, ww))
        for blk in self.down0:
            h = blk(h, emb)
        s0 = h
        h = self.pool0(h)
        for blk in self.down1:
            h = blk(h, emb)
        h = attn(self.attn_d16, h)
        s1 = h
        h = self.pool1(h)
        for blk in self.down2:
            h = blk(h, emb)
        h = attn(self.attn_d8, h)

        h = self.mid1(h, emb)
        h = attn(self.attn_mid, h)
        h = self.mid2(h, emb)

        for blk in self.up2:
            h = blk(h, emb)
        h = attn(self.attn_u8, h)
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = self.proj2(h) + s1
        for blk in self.up1:
            h = blk(h, emb)
        h = attn(self.attn_u16, h)
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = self.proj1(h) + s0
        for blk in self.up0:
            h = blk(h, emb)
        eps = self.conv_out(F.silu(self.norm_out(h)))
        eps = eps.reshape(b, v, c, hh, ww)
        return eps[0] if squeeze else eps


def init_parameters(model: DenoiserModel, seed: int) -> None:
    """Deterministic initialization from named per-parameter streams."""
    with torch.no_grad():
        for name, p in sorted(model.named_parameters()):
            rng = stream(seed, "init", name)
            if name in model.zero_init_names:
                p.zero_()
            elif name == "text.table.weight":
                p.copy_(torch.from_numpy(rng.standard_normal(tuple(p.shape)).astype(np.float32) * 0.02))
            elif p.dim() >= 2:
                fan_in = int(np.prod(p.shape[1:]))
                std = math.sqrt(1.0 / fan_in)
                p.copy_(torch.from_numpy(rng.standard_normal(tuple(p.shape)).astype(np.float32) * std))
            elif name.endswith("weight"):  # norm scales
                p.fill_(1.0)
            else:  # biases
                p.zero_()


def build_model(vocab: Vocabulary | None = None, probe_seed: int = 0,
                init_seed: int = 0) -> DenoiserModel:
    model = DenoiserModel(vocab=vocab, probe_seed=probe_seed)
    init_parameters(model, init_seed)
    model.train(False)
    return model


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def architecture_hash(model: DenoiserModel) -> str:
    """Digest of everything a checkpoint must agree on to be loadable."""
    desc = {
        "channels": list(CHANNELS),
        "emb_dim": EMB_DIM,
        "img_res": IMG_RES,
        "t_steps": T_STEPS,
        "d_text": D_TEXT,
        "l_max": L_MAX,
        "site_channels": list(inject.SITE_CHANNELS),
        "vocabulary": list(model.text.vocab.tokens),
        "probe_seed": model.probe_seed,
        "params": [[n, list(p.shape)] for n, p in sorted(model.named_parameters())],
    }
    blob = json.dumps(desc, sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def encode_condition_rows(model: DenoiserModel, overall: str, view_prompts) -> BatchedCondition:
    """Batched condition for one scene from raw prompt strings."""
    from .textenc import encode_pair

    conds = [encode_pair(overall, vp, model.text) for vp in view_prompts]
    return BatchedCondition.stack([conds])


__all__ = [
    "AttentionBlock", "BatchedCondition", "CameraEmbedding", "DenoiserModel",
    "ResBlock", "TimeEmbedding", "architecture_hash", "build_model",
    "camera_matrix", "camera_tensor", "encode_condition_rows", "init_parameters",
    "parameter_count", "sinusoidal_features",
]
