"""Adaptive guidance injection.

At every cross-attention site the denoiser must pick which text embedding
conditions the block: the overall prompt (shared across views) or the active
view's prompt. The adaptive policy pools the site's image feature, projects
it through a frozen per-site orthonormal probe into text space, compares the
cosine similarity against both class vectors, and injects the view text when
the feature already resembles the overall text by more than a margin:

    sim_o - sim_v > m  ->  inject view text, else inject overall text.

Larger margins favor the overall text (cross-view consistency); smaller or
negative margins favor the view text (per-view customization). Static
baseline policies (overall only, view only, alternating by site parity,
token concatenation) share the same surface.

The probes are generated from a seed and never trained: the hard selection
provides no gradient path that could train a projection, and freezing them
keeps routing decisions a pure function of the features.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import torch

from .rng import stream
from .textenc import D_TEXT, TextCondition

# Channel width of the feature map at each cross-attention site, in execution
# order: down 16x16, down 8x8, bottleneck 8x8, up 8x8, up 16x16.
SITE_CHANNELS = (64, 128, 128, 128, 64)
N_SITES = len(SITE_CHANNELS)

POLICY_KINDS = ("adaptive", "overall_only", "view_only", "alternate", "concatenate")

CHOSEN_NAMES = ("overall", "view", "both")
OVERALL, VIEW, BOTH = 0, 1, 2


@dataclass(frozen=True)
class RoutingPolicy:
    kind: str
    margin: float = 0.0

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise ValueError(f"unknown policy kind {self.kind!r}")
        if not np.isfinite(self.margin):
            raise ValueError("margin must be finite")


@dataclass
class RoutingDecision:
    site: int
    sim_o: float
    sim_v: float
    chosen: str   # "overall" | "view" | "both"
    margin: float
    t: int        # denoiser timestep index
    view: int = 0


def make_probe(probe_seed: int, site: int, channels: int | None = None) -> torch.Tensor:
    """Frozen (D_TEXT, C) projection with orthonormal rows for one site."""
    c = SITE_CHANNELS[site] if channels is None else channels
    if c < D_TEXT:
        raise ValueError("site channels must be at least the text width")
    rng = stream(probe_seed, "probe", site)
    a = rng.standard_normal((c, D_TEXT))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))  # canonical sign choice
    return torch.from_numpy(np.ascontiguousarray(q.T, dtype=np.float32))


class Probes:
    """The five per-site probes; regenerated from the seed, never stored."""

    def __init__(self, probe_seed: int):
        self.seed = int(probe_seed)
        self.tensors = [make_probe(probe_seed, s) for s in range(N_SITES)]

    def __getitem__(self, site: int) -> torch.Tensor:
        return self.tensors[site]

    def to_bytes(self) -> bytes:
        return b"".join(t.numpy().tobytes() for t in self.tensors)


def pooled_similarity(feat: torch.Tensor, cls: torch.Tensor, probe: torch.Tensor,
                      site: int | None = None) -> float:
    """Cosine between the probe-projected spatial mean of `feat` and `cls`.

    feat: (C, h, w); cls: (D_TEXT,). Returns 0.0 when either vector is
    degenerate (norm below 1e-12), which happens for all-zero features.
    """
    if feat.shape[0] != probe.shape[1]:
        raise ValueError(
            f"feature channels {feat.shape[0]} do not match probe input {probe.shape[1]}"
        )
    sims = _pooled_similarity_batch(feat.unsqueeze(0), cls.unsqueeze(0), probe)
    return float(sims[0])


def _pooled_similarity_batch(feat: torch.Tensor, cls: torch.Tensor,
                             probe: torch.Tensor) -> torch.Tensor:
    """Vectorized pooled similarity. feat: (N, C, h, w); cls: (N, D). -> (N,)"""
    gap = feat.mean(dim=(2, 3))          # (N, C)
    proj = gap @ probe.t()               # (N, D)
    np_ = proj.norm(dim=1)
    nc = cls.norm(dim=1)
    denom = np_ * nc
    cos = (proj * cls).sum(dim=1) / denom.clamp(min=1e-12)
    cos = torch.where(denom < 1e-12, torch.zeros_like(cos), cos)
    return cos.clamp(-1.0, 1.0)


def select_guidance(sim_o: float, sim_v: float, m: float) -> str:
    """The margin rule, strict at the boundary."""
    return "view" if (sim_o - sim_v) > m else "overall"


def route_batch(
    feat: torch.Tensor,      # (N, C, h, w), N = scenes x views
    e_o: torch.Tensor,       # (N, L, D)
    e_v: torch.Tensor,       # (N, L, D)
    cls_o: torch.Tensor,     # (N, D)
    cls_v: torch.Tensor,     # (N, D)
    policy: RoutingPolicy,
    site: int,
    t: torch.Tensor,         # (N,) denoiser timestep per row
    probe: torch.Tensor,
    sink=None,
    views: torch.Tensor | None = None,  # (N,) view index per row, for logging
) -> torch.Tensor:
    """Context embeddings for one site under `policy`; decisions go to `sink`."""
    n = feat.shape[0]
    sim_o = _pooled_similarity_batch(feat, cls_o, probe)
    sim_v = _pooled_similarity_batch(feat, cls_v, probe)

    if policy.kind == "adaptive":
        # compare in float64 so logged decisions replay exactly
        pick_view = (sim_o.double() - sim_v.double()) > float(policy.margin)
        chosen = torch.where(pick_view, VIEW, OVERALL)
        context = torch.where(pick_view.view(n, 1, 1), e_v, e_o)
    elif policy.kind == "overall_only":
        chosen = torch.full((n,), OVERALL)
        context = e_o
    elif policy.kind == "view_only":
        chosen = torch.full((n,), VIEW)
        context = e_v
    elif policy.kind == "alternate":
        pick_view = site % 2 == 1  # view text at odd sites, overall at even
        chosen = torch.full((n,), VIEW if pick_view else OVERALL)
        context = e_v if pick_view else e_o
    elif policy.kind == "concatenate":
        chosen = torch.full((n,), BOTH)
        context = torch.cat([e_o, e_v], dim=1)
    else:  # pragma: no cover - guarded by RoutingPolicy
        raise ValueError(f"unknown policy kind {policy.kind!r}")

    if sink is not None:
        sink.add_batch(
            site=site,
            t=t.detach().cpu().numpy(),
            sim_o=sim_o.detach().cpu().numpy(),
            sim_v=sim_v.detach().cpu().numpy(),
            chosen=chosen.cpu().numpy(),
            margin=float(policy.margin),
            views=None if views is None else views.cpu().numpy(),
        )
    return context


def route(feat: torch.Tensor, cond: TextCondition, policy: RoutingPolicy, site: int,
          t: int, probe: torch.Tensor, sink=None) -> tuple[torch.Tensor, RoutingDecision]:
    """Single-feature routing: context for the cross-attention plus its decision."""
    collector = DecisionList()
    context = route_batch(
        feat.unsqueeze(0),
        cond.E_o.unsqueeze(0),
        cond.E_v.unsqueeze(0),
        cond.CLS_o.unsqueeze(0),
        cond.CLS_v.unsqueeze(0),
        policy,
        site,
        torch.tensor([int(t)]),
        probe,
        sink=collector,
    )
    decision = collector.decisions[0]
    if sink is not None:
        sink.add_batch(
            site=site,
            t=np.array([int(t)]),
            sim_o=np.array([decision.sim_o], dtype=np.float32),
            sim_v=np.array([decision.sim_v], dtype=np.float32),
            chosen=np.array([CHOSEN_NAMES.index(decision.chosen)]),
            margin=float(policy.margin),
            views=None,
        )
    return context[0], decision


def sample_training_margin(rng: np.random.Generator) -> float:
    """Margin for one training iteration, shared by all sites and views."""
    return float(rng.uniform(-0.1, 0.1))


class DecisionList:
    """Collects RoutingDecision objects (test / inspection sink)."""

    def __init__(self):
        self.decisions: list[RoutingDecision] = []

    def add_batch(self, site, t, sim_o, sim_v, chosen, margin, views=None):
        for i in range(len(sim_o)):
            self.decisions.append(
                RoutingDecision(
                    site=site,
                    sim_o=float(sim_o[i]),
                    sim_v=float(sim_v[i]),
                    chosen=CHOSEN_NAMES[int(chosen[i])],
                    margin=margin,
                    t=int(t[i]),
                    view=0 if views is None else int(views[i]),
                )
            )


class DecisionWriter:
    """Streams decisions to a JSON-lines file: one record per site and view."""

    def __init__(self, path: str):
        self.path = path
        self._fh = open(path, "w", encoding="utf-8")

    def add_batch(self, site, t, sim_o, sim_v, chosen, margin, views=None):
        for i in range(len(sim_o)):
            rec = {
                "t": int(t[i]),
                "site": int(site),
                "sim_o": float(sim_o[i]),
                "sim_v": float(sim_v[i]),
                "margin": float(margin),
                "chosen": CHOSEN_NAMES[int(chosen[i])],
                "view": 0 if views is None else int(views[i]),
            }
            self._fh.write(json.dumps(rec) + "\n")

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class RateAccumulator:
    """Counts view injections per site (and per timestep decile) without
    materializing every decision."""

    def __init__(self, t_total: int = 1000):
        self.t_total = t_total
        self.counts = np.zeros((N_SITES, 10), dtype=np.int64)
        self.view_counts = np.zeros((N_SITES, 10), dtype=np.int64)

    def add_batch(self, site, t, sim_o, sim_v, chosen, margin, views=None):
        decile = np.minimum(np.asarray(t) * 10 // self.t_total, 9)
        np.add.at(self.counts[site], decile, 1)
        np.add.at(self.view_counts[site], decile, np.asarray(chosen) == VIEW)

    def per_site_rates(self) -> np.ndarray:
        tot = self.counts.sum(axis=1)
        view = self.view_counts.sum(axis=1)
        return np.divide(view, tot, out=np.zeros(N_SITES), where=tot > 0)

    def mean_rate(self) -> float:
        tot = self.counts.sum()
        return float(self.view_counts.sum() / tot) if tot else 0.0
