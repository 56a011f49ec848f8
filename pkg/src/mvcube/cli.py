"""Command-line entry points.

Commands: dataset, train2d, sample2d, lift3d, eval, sweep. All randomness is
funneled through --seed; every command writes a sidecar JSON with the fully
resolved configuration so a run can be reproduced byte for byte (with
--threads 1).
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import torch

from . import checkpoint as ckpt_io
from . import diffusion, evalkit, inject, lift3d, scenegen
from .config import ConfigError, RunConfig, config_json, margin_list, resolve_config
from .denoiser import build_model

PROMPT_FLAGS = ("front", "right", "back", "left")


def _write_sidecar(out_dir: str, command: str, config: RunConfig,
                   extra: dict | None = None, name: str = "run.json") -> None:
    os.makedirs(out_dir, exist_ok=True)
    doc = {"command": command, "config": config_json(config)}
    if extra:
        doc.update(extra)
    with open(os.path.join(out_dir, name), "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _schedule(config: RunConfig) -> diffusion.NoiseSchedule:
    return diffusion.make_schedule(config.t_total, config.beta_start, config.beta_end)


def _policy(config: RunConfig) -> inject.RoutingPolicy:
    return inject.RoutingPolicy(config.policy, config.margin)


def _load_teacher(path: str):
    model, metadata = ckpt_io.build_model_from(path)
    return model, metadata


def _prompts_from_args(args) -> dict:
    prompts = {"overall": args.overall}
    for side in PROMPT_FLAGS:
        prompts[side] = getattr(args, side)
    return prompts


def cmd_dataset(args, config: RunConfig) -> int:
    scenegen.build_dataset(config.n_scenes, config.seed, args.out)
    _write_sidecar(args.out, "dataset", config)
    print(f"wrote {config.n_scenes} scenes to {args.out}")
    return 0


def cmd_train2d(args, config: RunConfig) -> int:
    dataset = diffusion.SceneDataset(args.data)
    schedule = _schedule(config)
    model = build_model(probe_seed=config.seed, init_seed=config.seed)
    train_cfg = diffusion.TrainConfig(
        lr=config.lr, weight_decay=config.weight_decay,
        scenes_per_batch=config.scenes_per_batch, dropout=config.dropout,
        margin_low=config.margin_low, margin_high=config.margin_high,
        total_steps=config.train_steps, seed=config.seed,
        ckpt_every=config.ckpt_every,
    )
    if args.resume:
        ckpt_io.load_model(os.path.join(args.out, "latest.ckpt"), model)

    def progress(step, loss):
        print(f"step {step}/{train_cfg.total_steps} loss {loss:.4f}", flush=True)

    _write_sidecar(args.out, "train2d", config, {"data": args.data})
    final = diffusion.train(model, dataset, schedule, train_cfg, args.out,
                            resume=args.resume, progress=progress)
    print(f"final checkpoint: {final}")
    return 0


def cmd_sample2d(args, config: RunConfig) -> int:
    model, _ = _load_teacher(args.ckpt)
    schedule = _schedule(config)
    os.makedirs(args.out, exist_ok=True)
    decisions_path = os.path.join(args.out, f"{args.job}_decisions.jsonl")
    with inject.DecisionWriter(decisions_path) as sink:
        images = diffusion.sample(
            model, args.overall, [getattr(args, s) for s in PROMPT_FLAGS],
            _policy(config), schedule, steps=config.sample_steps,
            cfg_scale=config.cfg_scale, rescale=config.rescale,
            seed=config.seed, sink=sink,
        )
    files = {}
    for i, side in enumerate(PROMPT_FLAGS):
        path = os.path.join(args.out, f"{args.job}_{side}.png")
        scenegen.save_png(path, images[i].transpose(1, 2, 0))
        files[side] = os.path.basename(path)
    _write_sidecar(
        args.out, "sample2d", config,
        {
            "prompts": _prompts_from_args(args),
            "checkpoint": args.ckpt,
            "images": files,
            "decisions_file": os.path.basename(decisions_path),
        },
        name=f"{args.job}.json",
    )
    print(f"wrote 4 views to {args.out}")
    return 0


def cmd_lift3d(args, config: RunConfig) -> int:
    model, _ = _load_teacher(args.ckpt)
    schedule = _schedule(config)
    lift_cfg = lift3d.LiftConfig(
        total_steps=config.lift_steps, lr=config.lift_lr,
        cfg_scale=config.lift_cfg_scale, rescale=config.lift_rescale,
        margin=config.margin, anneal_frac=config.anneal_frac,
        anneal_start=config.anneal_start, anneal_max_end=config.anneal_max_end,
        anneal_min_end=config.anneal_min_end, grid_n=config.grid_n,
        res_low=config.res_low, res_high=config.res_high,
        ray_samples=config.ray_samples, seed=config.seed,
    )
    prompts = _prompts_from_args(args)

    def progress(step, loss):
        print(f"lift step {step}/{lift_cfg.total_steps} loss {loss:.4f}", flush=True)

    lift3d.optimize(prompts, model, lift_cfg, args.out, schedule, progress=progress)
    _write_sidecar(args.out, "lift3d", config,
                   {"prompts": prompts, "checkpoint": args.ckpt},
                   name="command.json")
    print(f"lift complete: {args.out}")
    return 0


def _prompt_sets(args, config: RunConfig) -> list[evalkit.PromptSet]:
    exclude = set()
    if args.data:
        exclude = diffusion.SceneDataset(args.data).keys
    scenes = evalkit.heldout_scenes(config.n_prompts, config.seed, exclude)
    return [
        evalkit.PromptSet.from_scene(s, body_in_views=config.body_in_views)
        for s in scenes
    ]


def cmd_eval(args, config: RunConfig) -> int:
    model, _ = _load_teacher(args.ckpt)
    schedule = _schedule(config)
    prompt_sets = _prompt_sets(args, config)
    seeds = list(range(config.n_seeds))
    images = evalkit.generate_views(
        model, schedule, prompt_sets, seeds, _policy(config),
        steps=config.sample_steps, cfg_scale=config.cfg_scale,
        rescale=config.rescale, base_seed=config.seed,
        batch_jobs=config.batch_jobs,
    )
    report = {
        "view_alignment": evalkit._alignment_from_images(images, prompt_sets),
        "overall_consistency": evalkit._consistency_from_images(images, prompt_sets),
        "n_prompts": config.n_prompts,
        "n_seeds": config.n_seeds,
    }
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "eval.json"), "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=1)
        fh.write("\n")
    _write_sidecar(args.out, "eval", config, {"checkpoint": args.ckpt})
    print(json.dumps(report))
    return 0


def cmd_sweep(args, config: RunConfig) -> int:
    model, _ = _load_teacher(args.ckpt)
    schedule = _schedule(config)
    prompt_sets = _prompt_sets(args, config)
    seeds = list(range(config.n_seeds))
    result = evalkit.margin_sweep(
        model, margin_list(config), prompt_sets, seeds, schedule,
        out_dir=args.out, steps=config.sample_steps, cfg_scale=config.cfg_scale,
        rescale=config.rescale, base_seed=config.seed, batch_jobs=config.batch_jobs,
    )
    _write_sidecar(args.out, "sweep", config, {"checkpoint": args.ckpt})
    print(f"margins {result.margins}")
    print(f"view_alignment {result.view_alignment}")
    print(f"overall_consistency {result.overall_consistency}")
    return 0


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--config", default=None, help="JSON or key=value config file")
    p.add_argument("--out", required=True)


def _add_prompts(p: argparse.ArgumentParser) -> None:
    p.add_argument("--overall", required=True)
    for side in PROMPT_FLAGS:
        p.add_argument(f"--{side}", required=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mvcube")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("dataset", help="generate the procedural multi-view dataset")
    _add_common(p)
    p.add_argument("--n", dest="n_scenes", type=int, default=None)

    p = sub.add_parser("train2d", help="train the multi-view denoiser")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--steps", dest="train_steps", type=int, default=None)
    p.add_argument("--batch-scenes", dest="scenes_per_batch", type=int, default=None)
    p.add_argument("--lr", dest="lr", type=float, default=None)
    p.add_argument("--resume", action="store_true")

    p = sub.add_parser("sample2d", help="generate the four canonical views")
    _add_common(p)
    _add_prompts(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--policy", default=None)
    p.add_argument("--margin", type=float, default=None)
    p.add_argument("--cfg", dest="cfg_scale", type=float, default=None)
    p.add_argument("--rescale", type=float, default=None)
    p.add_argument("--steps", dest="sample_steps", type=int, default=None)
    p.add_argument("--job", default="sample")

    p = sub.add_parser("lift3d", help="optimize a voxel field against a trained model")
    _add_common(p)
    _add_prompts(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--steps", dest="lift_steps", type=int, default=None)
    p.add_argument("--lr", dest="lift_lr", type=float, default=None)
    p.add_argument("--cfg", dest="lift_cfg_scale", type=float, default=None)
    p.add_argument("--rescale", dest="lift_rescale", type=float, default=None)
    p.add_argument("--margin", type=float, default=None)
    p.add_argument("--grid-n", dest="grid_n", type=int, default=None)

    p = sub.add_parser("eval", help="alignment and consistency scores")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", default=None, help="training set to hold out against")
    p.add_argument("--n-prompts", dest="n_prompts", type=int, default=None)
    p.add_argument("--n-seeds", dest="n_seeds", type=int, default=None)
    p.add_argument("--policy", default=None)
    p.add_argument("--margin", type=float, default=None)
    p.add_argument("--steps", dest="sample_steps", type=int, default=None)
    p.add_argument("--cfg", dest="cfg_scale", type=float, default=None)
    p.add_argument("--body-in-views", dest="body_in_views", default=None)

    p = sub.add_parser("sweep", help="margin sweep of both scores")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", default=None)
    p.add_argument("--margins", default=None)
    p.add_argument("--n-prompts", dest="n_prompts", type=int, default=None)
    p.add_argument("--n-seeds", dest="n_seeds", type=int, default=None)
    p.add_argument("--steps", dest="sample_steps", type=int, default=None)
    p.add_argument("--cfg", dest="cfg_scale", type=float, default=None)
    p.add_argument("--body-in-views", dest="body_in_views", default=None)

    return parser


_CONFIG_KEYS = set(RunConfig.__dataclass_fields__)

COMMANDS = {
    "dataset": cmd_dataset,
    "train2d": cmd_train2d,
    "sample2d": cmd_sample2d,
    "lift3d": cmd_lift3d,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
}


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    flags = {k: v for k, v in vars(args).items() if k in _CONFIG_KEYS}
    try:
        config = resolve_config(flags, args.config)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if config.threads > 0:
        torch.set_num_threads(config.threads)
    try:
        return COMMANDS[args.command](args, config)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
