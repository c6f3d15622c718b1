"""Command-line entry point.

Subcommands: gen-data, pretrain, finetune-anchor, sample, eval, study NAME.
Global flags: --config path.json, --seed n, --out dir, --jobs n.
"""

from __future__ import annotations

import argparse
import json
import multiprocessing
import sys
from pathlib import Path

import numpy as np

from anchorflow import formats, harness, metrics, training, world
from anchorflow.errors import AnchorflowError, ConfigError, exit_code_for
from anchorflow.prompts import (
    pad_tokens, parse_prompt, reduce_to_first_frame, serialize_prompt, tokenize,
)
from anchorflow.sampling import SampleConfig, load_for_sampling, sample_anchored, sample_t2v
from anchorflow.world import render_frame, scene_from_ast


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--seed", type=int, default=None, help="master seed override")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--jobs", type=int, default=1, help="parallel workers")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="anchorflow")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="synthesize the training/eval dataset")
    _add_common(p)

    p = sub.add_parser("pretrain", help="flow-matching pretraining")
    _add_common(p)
    p.add_argument("--data", required=True, help="dataset directory")

    p = sub.add_parser("finetune-anchor", help="LoRA anchor-grounding finetune")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--base", required=True, help="base checkpoint")

    p = sub.add_parser("sample", help="generate one video")
    _add_common(p)
    p.add_argument("--mode", choices=["t2v", "i2v", "i2v_text", "factorized"], default="t2v")
    p.add_argument("--ckpt", required=True, help="base checkpoint")
    p.add_argument("--lora", default=None, help="adapter checkpoint (anchored modes)")
    p.add_argument("--prompt", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--cfg-scale", type=float, default=None)
    p.add_argument("--anchor-seed", type=int, default=0)

    p = sub.add_parser("eval", help="score videos against their prompts")
    _add_common(p)
    p.add_argument("--videos", required=True, help=".fvt tensor file")
    p.add_argument("--prompts", required=True, help="prompts.jsonl")
    p.add_argument("--label", default="ground_truth")

    p = sub.add_parser("study", help="run one experiment study")
    _add_common(p)
    p.add_argument("name", choices=sorted(harness.STUDIES))
    p.add_argument("--data", required=True)
    p.add_argument("--base", required=True)
    p.add_argument("--lora", default=None)
    return ap


def cmd_gen_data(args) -> int:
    cfg = harness.load_config(args.config, seed=args.seed)
    if args.jobs > 1:
        with multiprocessing.get_context("fork").Pool(args.jobs) as pool:
            world.gen_dataset(cfg.data.n, cfg.data.seed, args.out, map_fn=pool.map)
    else:
        world.gen_dataset(cfg.data.n, cfg.data.seed, args.out)
    print(f"dataset written to {args.out}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = harness.load_config(args.config, seed=args.seed)
    dataset = world.DatasetIndex.load(args.data)
    ckpt = training.pretrain_t2v(dataset, cfg.pretrain, cfg.model, cfg.data.seed, args.out)
    print(f"base checkpoint: {ckpt}")
    return 0


def cmd_finetune(args) -> int:
    cfg = harness.load_config(args.config, seed=args.seed)
    dataset = world.DatasetIndex.load(args.data)
    ckpt = training.finetune_anchor(args.base, dataset, cfg.finetune, cfg.data.seed, args.out)
    print(f"adapter checkpoint: {ckpt}")
    return 0


def cmd_sample(args) -> int:
    cfg = harness.load_config(args.config, seed=None)
    steps = args.steps if args.steps is not None else cfg.sample.steps
    scale = args.cfg_scale if args.cfg_scale is not None else cfg.sample.cfg_scale
    seed = args.seed if args.seed is not None else 0
    sample_cfg = SampleConfig(steps=steps, cfg_scale=scale, mode=args.mode, seed=seed)

    lora = args.lora if args.mode != "t2v" else None
    if args.mode != "t2v" and args.lora is None:
        raise ConfigError(f"mode {args.mode} requires --lora")
    params, adapters, model_config = load_for_sampling(args.ckpt, lora)

    ast = parse_prompt(args.prompt)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    anchor = None
    if args.mode == "t2v":
        video = sample_t2v(params, model_config, tokenize(serialize_prompt(ast)), sample_cfg)
    else:
        anchor = render_frame(scene_from_ast(reduce_to_first_frame(ast), args.anchor_seed))
        tokens = pad_tokens() if args.mode == "i2v" else tokenize(serialize_prompt(ast))
        video = sample_anchored(params, adapters, model_config, anchor, tokens, sample_cfg)

    formats.write_fvt(out / "video.fvt", video[None])
    world.export_ppm_frames(video, out)
    if anchor is not None:
        formats.write_ppm(out / "anchor.ppm", anchor)
    meta = {"mode": args.mode, "prompt": args.prompt, "steps": steps,
            "cfg_scale": scale, "seed": seed, "anchor_seed": args.anchor_seed}
    with open(out / "meta.json", "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
        f.write("\n")
    print(f"video written to {out}")
    return 0


def cmd_eval(args) -> int:
    cfg = harness.load_config(args.config, seed=args.seed)
    videos = formats.read_fvt(args.videos)
    records = []
    with open(args.prompts, "r", encoding="utf-8") as f:
        for line in f:
            records.append(json.loads(line))
    if len(records) != videos.shape[0]:
        raise ConfigError(f"{len(records)} prompts vs {videos.shape[0]} videos")
    rows = []
    for rec, video in zip(records, videos):
        scores = metrics.score_video(video, parse_prompt(rec["prompt"]))
        rows.append(harness._score_row(rec["id"], rec.get("jitter_seed", 0),
                                       args.label, cfg.sample.steps, scores))
    out = Path(args.out) / "scores.csv"
    formats.write_csv(out, harness.SCORE_HEADER, rows, harness.run_id_of(cfg))
    agg = metrics.aggregate_scores(
        [metrics.score_video(v, parse_prompt(r["prompt"])) for r, v in zip(records, videos)])
    print(f"scored {len(rows)} videos; overall {agg.overall:.4f} -> {out}")
    return 0


def cmd_study(args) -> int:
    cfg = harness.load_config(args.config, seed=args.seed)
    ctx = harness.build_context(cfg, args.data, args.base, args.lora, args.out, args.jobs)
    harness.STUDIES[args.name](ctx)
    print(f"study {args.name} written to {Path(args.out) / args.name}")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "finetune-anchor": cmd_finetune,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "study": cmd_study,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except AnchorflowError as e:
        print(f"error: {e}", file=sys.stderr)
        return exit_code_for(e)
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
