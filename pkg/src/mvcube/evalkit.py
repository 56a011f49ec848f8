"""Deterministic pixel-domain evaluation of generated views.

The procedural dataset makes ground truth exactly checkable, so the scores
here are template probes rather than learned metrics: a glyph classifier
that inverts the rasterizer, a per-view prompt-alignment score (does each
view show the glyph its prompt named), a cross-view consistency score (do
all four views agree on the body color named by the overall prompt), margin
sweeps over both, and routing-rate statistics from decision logs.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass

import numpy as np
from scipy import stats

from . import diffusion, inject, scenegen
from .rng import stream, stream_key
from .scenegen import (FACE_HI, FACE_LO, GLYPH_HI, GLYPH_LO, PALETTE,
                       PALETTE_NAMES, SHAPES, SIDES, SceneSpec, glyph_mask)

_PALETTE_ARR = np.array([PALETTE[c] for c in PALETTE_NAMES], dtype=np.float64)
_TEMPLATES = {shape: glyph_mask(shape).astype(np.float64) for shape in SHAPES}


@dataclass
class GlyphReading:
    shape: str
    color: str
    confidence: float  # normalized cross-correlation of the winning template


def _nearest_palette(rgb: np.ndarray) -> str:
    d = np.linalg.norm(_PALETTE_ARR - rgb, axis=1)
    return PALETTE_NAMES[int(np.argmin(d))]


def classify_body(image: np.ndarray) -> str:
    """Body color: mean of the face region excluding the glyph box."""
    img = np.asarray(image, dtype=np.float64)
    face = img[FACE_LO:FACE_HI, FACE_LO:FACE_HI].copy()
    lo, hi = GLYPH_LO - FACE_LO, GLYPH_HI - FACE_LO
    mask = np.ones(face.shape[:2], dtype=bool)
    mask[lo:hi, lo:hi] = False
    return _nearest_palette(face[mask].mean(axis=0))


def _ncc(a: np.ndarray, b: np.ndarray) -> float:
    """Normalized cross-correlation; 0 for degenerate inputs."""
    a = a - a.mean()
    b = b - b.mean()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < 1e-12 or nb < 1e-12:
        return 0.0
    return float(np.clip((a * b).sum() / (na * nb), -1.0, 1.0))


def classify_glyph(image: np.ndarray) -> GlyphReading:
    """Read the glyph in the central 8x8 box.

    Shape is the template with the highest normalized cross-correlation
    against the box's color deviation from the estimated body color; glyph
    color is the palette color nearest the mean over the winning template's
    support. Total: a uniform image still yields an (arbitrary, zero
    confidence) reading.
    """
    img = np.asarray(image, dtype=np.float64)
    box = img[GLYPH_LO:GLYPH_HI, GLYPH_LO:GLYPH_HI]
    body_rgb = _PALETTE_ARR[PALETTE_NAMES.index(classify_body(img))]
    deviation = np.linalg.norm(box - body_rgb, axis=2)
    scores = {shape: _ncc(deviation, tpl) for shape, tpl in _TEMPLATES.items()}
    shape = max(SHAPES, key=lambda s: scores[s])
    color = _nearest_palette(box[_TEMPLATES[shape] > 0].mean(axis=0))
    return GlyphReading(shape=shape, color=color, confidence=scores[shape])


@dataclass
class PromptSet:
    """A scene together with the prompts used to generate it."""

    scene: SceneSpec
    overall: str
    views: list[str]  # per side, in SIDES order

    @staticmethod
    def from_scene(scene: SceneSpec, body_in_views: bool = True,
                   strip_overall: bool = False) -> "PromptSet":
        """Grammar prompts for a scene.

        body_in_views=False drops the body color from the view prompts
        (per-view text names only its glyph), which makes the margin
        trade-off observable: the body color is then carried solely by the
        overall prompt. strip_overall=True reduces the overall prompt to
        just the body ("a red cube"), withholding all per-side attributes.
        """
        overall = f"a {scene.body_color} cube" if strip_overall else scenegen.merge_captions(scene)
        views = []
        for side in SIDES:
            g = scene.glyph_for(side)
            if body_in_views:
                views.append(scenegen.caption_view(scene, side))
            else:
                views.append(f"a cube with a {g.color} {g.shape} on this side")
        return PromptSet(scene=scene, overall=overall, views=views)


def heldout_scenes(n: int, seed: int, exclude_keys=frozenset()) -> list[SceneSpec]:
    """n distinct scenes disjoint from `exclude_keys` (e.g. the train set)."""
    out, seen, i = [], set(exclude_keys), 0
    while len(out) < n:
        scene = scenegen.sample_scene(stream(seed, "heldout", i))
        i += 1
        if scene.key() in seen:
            continue
        seen.add(scene.key())
        out.append(scene)
    return out


def job_seed(base_seed: int, prompt_idx: int, seed_idx: int) -> int:
    """Stable per-(prompt, seed) job seed, shared across margins in sweeps."""
    return stream_key(base_seed, "job", prompt_idx, seed_idx) % (2**63)


def generate_views(model, schedule, prompt_sets: list[PromptSet], seeds: list[int],
                   policy: inject.RoutingPolicy, steps: int = 50, cfg_scale: float = 7.5,
                   rescale: float = 0.0, base_seed: int = 0, batch_jobs: int = 8,
                   sink=None) -> np.ndarray:
    """Images for every (prompt set, seed) pair: (P, S, V, 3, H, W) in [0, 1]."""
    jobs = [
        {"overall": ps.overall, "views": ps.views, "seed": job_seed(base_seed, p, s)}
        for p, ps in enumerate(prompt_sets)
        for s in range(len(seeds))
    ]
    chunks = []
    for lo in range(0, len(jobs), batch_jobs):
        chunks.append(
            diffusion.sample_batch(model, jobs[lo:lo + batch_jobs], schedule, policy,
                                   steps=steps, cfg_scale=cfg_scale, rescale=rescale,
                                   sink=sink)
        )
    images = np.concatenate(chunks, axis=0)
    return images.reshape(len(prompt_sets), len(seeds), *images.shape[1:])


def _alignment_from_images(images: np.ndarray, prompt_sets: list[PromptSet]) -> float:
    """Fraction of views whose classified glyph matches the prompt's glyph."""
    hits = total = 0
    for p, ps in enumerate(prompt_sets):
        for s in range(images.shape[1]):
            for v, side in enumerate(SIDES):
                g = ps.scene.glyph_for(side)
                reading = classify_glyph(images[p, s, v].transpose(1, 2, 0))
                hits += int(reading.shape == g.shape and reading.color == g.color)
                total += 1
    return hits / total


def _consistency_from_images(images: np.ndarray, prompt_sets: list[PromptSet]) -> float:
    """Fraction of view sets with one body color that matches the overall prompt."""
    hits = total = 0
    for p, ps in enumerate(prompt_sets):
        for s in range(images.shape[1]):
            bodies = {classify_body(images[p, s, v].transpose(1, 2, 0)) for v in range(len(SIDES))}
            hits += int(len(bodies) == 1 and bodies == {ps.scene.body_color})
            total += 1
    return hits / total


def view_alignment_score(model, prompt_sets: list[PromptSet], seeds: list[int],
                         schedule=None, policy=None, **kwargs) -> float:
    schedule = schedule or diffusion.make_schedule()
    policy = policy or inject.RoutingPolicy("adaptive", -0.025)
    images = generate_views(model, schedule, prompt_sets, seeds, policy, **kwargs)
    return _alignment_from_images(images, prompt_sets)


def overall_consistency_score(model, prompt_sets: list[PromptSet], seeds: list[int],
                              schedule=None, policy=None, **kwargs) -> float:
    schedule = schedule or diffusion.make_schedule()
    policy = policy or inject.RoutingPolicy("adaptive", -0.025)
    images = generate_views(model, schedule, prompt_sets, seeds, policy, **kwargs)
    return _consistency_from_images(images, prompt_sets)


@dataclass
class SweepResult:
    margins: list[float]
    view_alignment: list[float]
    overall_consistency: list[float]
    per_site_rates: list[list[float]]  # one row of N_SITES rates per margin
    mean_rates: list[float]

    def spearman_alignment(self) -> float:
        return float(stats.spearmanr(self.margins, self.view_alignment).statistic)

    def spearman_consistency(self) -> float:
        return float(stats.spearmanr(self.margins, self.overall_consistency).statistic)


def margin_sweep(model, margins: list[float], prompt_sets: list[PromptSet],
                 seeds: list[int], schedule=None, out_dir: str | None = None,
                 **kwargs) -> SweepResult:
    """Both scores plus routing rates at each margin, with shared seeds.

    The per-job noise depends only on (prompt, seed), so every margin sees
    identical initial noise and differs only in routing.
    """
    if list(margins) != sorted(margins):
        raise ValueError("margins must be sorted ascending")
    schedule = schedule or diffusion.make_schedule()
    result = SweepResult([], [], [], [], [])
    for m in margins:
        acc = inject.RateAccumulator(t_total=schedule.T)
        images = generate_views(
            model, schedule, prompt_sets, seeds,
            inject.RoutingPolicy("adaptive", m), sink=acc, **kwargs
        )
        result.margins.append(float(m))
        result.view_alignment.append(_alignment_from_images(images, prompt_sets))
        result.overall_consistency.append(_consistency_from_images(images, prompt_sets))
        result.per_site_rates.append([float(r) for r in acc.per_site_rates()])
        result.mean_rates.append(acc.mean_rate())
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "sweep.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["margin", "view_alignment", "overall_consistency",
                        "mean_injection_rate", "per_site_rates"])
            for i, m in enumerate(result.margins):
                w.writerow([m, result.view_alignment[i], result.overall_consistency[i],
                            result.mean_rates[i], json.dumps(result.per_site_rates[i])])
        with open(os.path.join(out_dir, "sweep.json"), "w", encoding="utf-8") as fh:
            json.dump(
                {"margins": result.margins, "view_alignment": result.view_alignment,
                 "overall_consistency": result.overall_consistency,
                 "mean_injection_rate": result.mean_rates,
                 "per_site_rates": result.per_site_rates},
                fh, indent=1,
            )
            fh.write("\n")
    return result


def routing_stats(log_path: str) -> dict:
    """Per-site, per-timestep-decile view-injection rates from a decision log.

    Returns {"sites": {site: rate}, "deciles": {site: [10 rates or None]}}.
    Malformed lines are reported with their line number.
    """
    counts = {}
    views = {}
    with open(log_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                site = int(rec["site"])
                t = int(rec["t"])
                chosen = rec["chosen"]
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{log_path}:{lineno}: malformed decision record: {exc}") from exc
            decile = min(t * 10 // 1000, 9)
            counts.setdefault(site, np.zeros(10, dtype=np.int64))[decile] += 1
            views.setdefault(site, np.zeros(10, dtype=np.int64))[decile] += chosen == "view"
    sites = {}
    deciles = {}
    for site in sorted(counts):
        c, v = counts[site], views[site]
        sites[site] = float(v.sum() / c.sum())
        deciles[site] = [float(v[d] / c[d]) if c[d] else None for d in range(10)]
    return {"sites": sites, "deciles": deciles}
