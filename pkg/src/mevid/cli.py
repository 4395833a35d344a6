"""Command-line entry point.

Subcommands: `gen` (synthetic MVFF dataset + manifest), `train`, `eval`
(metrics JSON on stdout), `attn` (attention-map PGM export), and `trials`
(multi-seed protocol). Every run echoes its resolved configuration to
stderr; feeding that echo back as a config file reproduces the run.

Exit codes: 0 success, 1 usage/config error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import pipeline
from .config import ConfigError, RunConfig, load_config, render_config
from .features import generate_synthetic_dataset, load_mvff, select_layers, write_mvff
from .model import save_checkpoint
from .spatial_pooling import attention_map, export_attention
from .training import format_loss_trace


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="mevid", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a synthetic MVFF dataset")
    gen.add_argument("--config", required=True)
    gen.add_argument("--out", required=True, help="output directory")
    gen.add_argument("--seed", type=int, default=None, help="override data_seed")

    tr = sub.add_parser("train", help="train on an MVFF dataset directory")
    tr.add_argument("--config", required=True)
    tr.add_argument("--data", required=True)
    tr.add_argument("--out", required=True, help="checkpoint path")
    tr.add_argument("--seed", type=int, default=None, help="override training seed")

    ev = sub.add_parser("eval", help="evaluate a checkpoint; JSON on stdout")
    ev.add_argument("checkpoint")
    ev.add_argument("--config", required=True)
    ev.add_argument("--data", required=True)

    at = sub.add_parser("attn", help="export attention maps as PGM files")
    at.add_argument("checkpoint")
    at.add_argument("video_id")
    at.add_argument("--config", required=True)
    at.add_argument("--data", required=True)
    at.add_argument("--out", required=True, help="output directory")

    tl = sub.add_parser("trials", help="multi-seed train/eval protocol")
    tl.add_argument("--config", required=True)
    tl.add_argument("--seeds", required=True, help="comma-separated seeds, e.g. 1,2,3")
    tl.add_argument("--out", default=None, help="optional JSON report path")
    return parser


def _echo_config(config: RunConfig) -> None:
    sys.stderr.write("# resolved config\n")
    sys.stderr.write(render_config(config))
    sys.stderr.flush()


def _load_data_dir(data_dir: str):
    manifest_path = os.path.join(data_dir, "manifest.json")
    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    videos, split_of = [], {}
    for entry in manifest["videos"]:
        videos.append(load_mvff(os.path.join(data_dir, entry["file"]),
                                video_id=entry["id"]))
        split_of[entry["id"]] = entry["split"]
    return videos, split_of


def _cmd_gen(args, config: RunConfig) -> int:
    if args.seed is not None:
        config = RunConfig(**{**config.__dict__, "data_seed": args.seed})
    _echo_config(config)
    os.makedirs(args.out, exist_ok=True)
    videos = generate_synthetic_dataset(config.synthetic_spec())
    split_of = pipeline.split_video_ids(
        [v.video_id for v in videos], config.train_fraction, config.data_seed)
    entries = []
    for video in videos:
        fname = f"{video.video_id}.mvff"
        write_mvff(video, os.path.join(args.out, fname))
        entries.append({"id": video.video_id, "file": fname,
                        "split": split_of[video.video_id]})
    with open(os.path.join(args.out, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump({"videos": entries}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    counts = {s: sum(1 for e in entries if e["split"] == s) for s in ("train", "test")}
    sys.stderr.write(f"wrote {len(entries)} videos ({counts['train']} train / "
                     f"{counts['test']} test) to {args.out}\n")
    return 0


def _cmd_train(args, config: RunConfig) -> int:
    if args.seed is not None:
        config = RunConfig(**{**config.__dict__, "seed": args.seed})
    _echo_config(config)
    raw, split_of = _load_data_dir(args.data)
    videos = [select_layers(v, list(config.layer_select)) for v in raw]
    result = pipeline.train_model(config, videos, split_of)
    save_checkpoint(result.model, args.out)
    trace_path = args.out + ".loss.tsv"
    with open(trace_path, "w", encoding="utf-8") as fh:
        fh.write(format_loss_trace(result.loss_trace))
    sys.stderr.write(f"checkpoint -> {args.out}\nloss trace -> {trace_path}\n")
    return 0


def _cmd_eval(args, config: RunConfig) -> int:
    _echo_config(config)
    raw, split_of = _load_data_dir(args.data)
    videos = [select_layers(v, list(config.layer_select)) for v in raw]
    with open(args.checkpoint, "rb") as fh:
        model = pipeline.model_from_checkpoint(config, fh.read())
    metrics = pipeline.evaluate_trained(config, model, videos, split_of)
    sys.stdout.write(json.dumps(metrics, sort_keys=True) + "\n")
    return 0


def _cmd_attn(args, config: RunConfig) -> int:
    _echo_config(config)
    raw, split_of = _load_data_dir(args.data)
    by_id = {v.video_id: v for v in raw}
    if args.video_id not in by_id:
        raise UsageError(f"video {args.video_id!r} not present in {args.data}")
    video = select_layers(by_id[args.video_id], list(config.layer_select))
    with open(args.checkpoint, "rb") as fh:
        model = pipeline.model_from_checkpoint(config, fh.read())
    entities = model.extract(video)
    os.makedirs(args.out, exist_ok=True)
    count = 0
    for layer in range(len(entities.attention)):
        for frame in range(entities.num_frames):
            for entity in range(entities.num_entities):
                amap = attention_map(entities, frame, entity, layer, config.grid)
                name = f"{video.video_id}_f{frame}_e{entity}_l{layer}.pgm"
                export_attention(amap, os.path.join(args.out, name))
                count += 1
    sys.stderr.write(f"wrote {count} attention maps to {args.out}\n")
    return 0


def _cmd_trials(args, config: RunConfig) -> int:
    _echo_config(config)
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip() != ""]
    except ValueError as exc:
        raise UsageError(f"bad --seeds value {args.seeds!r}") from exc
    report = pipeline.run_trials(config, seeds)
    sys.stdout.write(report.table())
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(report.to_json() + "\n")
    return 0


_COMMANDS = {
    "gen": _cmd_gen,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "attn": _cmd_attn,
    "trials": _cmd_trials,
}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        config = load_config(args.config)
        return _COMMANDS[args.command](args, config)
    except (UsageError, ConfigError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 1
    except FileNotFoundError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 1
    except Exception as exc:  # runtime failures: NaN loss, bad payloads, ...
        sys.stderr.write(f"error: {type(exc).__name__}: {exc}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
