"""Command-line entry points.

One executable, ``resyncer``, with a subcommand per stage. Every subcommand
accepts ``--config`` pointing at a YAML or JSON file of defaults; explicit
flags win over the file. ``RESYNCER_SEED`` in the environment overrides any
configured seed. Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric
error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys

import numpy as np

from . import ndio
from .config import (
    CorpusConfig,
    GeneratorConfig,
    RunConfig,
    SwapConfig,
    SyncFormerConfig,
)
from .errors import ConfigError, DataError, NumericError

logger = logging.getLogger("resyncer.cli")


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read config file {path}: {exc}") from exc
    try:
        if path.endswith((".yaml", ".yml")):
            import yaml

            obj = yaml.safe_load(text)
        else:
            obj = json.loads(text)
    except Exception as exc:
        raise ConfigError(f"cannot parse config file {path}: {exc}") from exc
    if obj is None:
        return {}
    if not isinstance(obj, dict):
        raise ConfigError(f"config file {path} must hold a mapping")
    return obj


def _seed_override(value: int) -> int:
    env = os.environ.get("RESYNCER_SEED")
    if env in (None, ""):
        return int(value)
    try:
        return int(env)
    except ValueError as exc:
        raise ConfigError(f"RESYNCER_SEED must be an integer, got {env!r}") from exc


def _merge(file_cfg: dict, **flags) -> dict:
    """File values as defaults, explicit (non-None) flags on top."""
    out = dict(file_cfg)
    for k, v in flags.items():
        if v is not None:
            out[k] = v
    return out


# ---------------------------------------------------------------------------
# Subcommand handlers


def _cmd_gen_data(args) -> int:
    from .synthdata import build_corpus

    d = _load_config_file(args.config)
    if args.seed is not None:
        d["seed"] = args.seed
    d["seed"] = _seed_override(d.get("seed", 0))
    config = CorpusConfig.from_dict(d)
    manifest = build_corpus(config, args.out)
    print(f"corpus with {len(manifest['identities'])} identities at {args.out}")
    return 0


def _corpus(path: str):
    from .synthdata import load_corpus

    return load_corpus(path)


def _cmd_train_syncformer(args) -> int:
    from .syncformer import train_syncformer

    d = _load_config_file(args.config)
    d["seed"] = _seed_override(d.get("seed", 0))
    config = SyncFormerConfig.from_dict(d)
    path = train_syncformer(
        _corpus(args.corpus),
        config,
        args.steps,
        args.out,
        batch_size=args.batch_size,
        resume=args.resume,
    )
    print(f"syncformer checkpoint at {path}")
    return 0


def _cmd_infer_mesh(args) -> int:
    import torch

    from .pipeline import _style_window_from, chunked_mesh_inference
    from .syncformer import default_style_window, load_syncformer

    corpus = _corpus(args.corpus)
    model, _, _ = load_syncformer(args.ckpt)
    torch.manual_seed(_seed_override(model.config.seed))
    idx_name = args.clip.split(":")
    if len(idx_name) != 2:
        raise ConfigError(f"--clip must look like '0:test_000', got {args.clip!r}")
    clip = corpus.load_clip(int(idx_name[0]), idx_name[1])
    window = model.config.style_window
    if args.style_from:
        style = _style_window_from(corpus, args.style_from, window, "--style-from")
    else:
        style = default_style_window(corpus, int(idx_name[0]), window)
    flat = chunked_mesh_inference(
        model, clip.audio_features, style, args.chunk_len, args.chunk_overlap
    )
    os.makedirs(args.out, exist_ok=True)
    out = os.path.join(args.out, "displacements.bin")
    ndio.save_array(out, flat.reshape(clip.length, -1, 3).astype(np.float32))
    print(f"displacements at {out}")
    return 0


def _cmd_train_generator(args) -> int:
    from .generator import train_generator

    d = _load_config_file(args.config)
    d["seed"] = _seed_override(d.get("seed", 0))
    config = GeneratorConfig.from_dict(d)
    path = train_generator(
        _corpus(args.corpus),
        args.out,
        config=config,
        steps=args.steps,
        batch_size=args.batch_size,
        warmup_steps=args.warmup,
        syncformer_path=args.syncformer,
        resume=args.resume,
    )
    print(f"generator checkpoint at {path}")
    return 0


def _cmd_train_embedder(args) -> int:
    from .faceswap import train_embedder

    d = _load_config_file(args.config)
    seed = _seed_override(d.get("seed", 0))
    path = train_embedder(
        _corpus(args.corpus),
        args.out,
        steps=args.steps,
        batch_size=args.batch_size,
        embed_dim=int(d.get("embed_dim", 64)),
        lr=float(d.get("lr", 1e-3)),
        seed=seed,
    )
    print(f"embedder checkpoint at {path}")
    return 0


def _cmd_train_unified(args) -> int:
    from .faceswap import train_unified

    d = _load_config_file(args.config)
    model_d = dict(d.get("model", {k: v for k, v in d.items() if k != "swap"}))
    model_d["seed"] = _seed_override(model_d.get("seed", 0))
    config = GeneratorConfig.from_dict(model_d)
    swap = SwapConfig.from_dict(d.get("swap", {}))
    path = train_unified(
        _corpus(args.corpus),
        args.embedder,
        args.out,
        config=config,
        swap=swap,
        steps=args.steps,
        batch_size=args.batch_size,
        init_from=args.init_from,
        syncformer_path=args.syncformer,
    )
    print(f"unified checkpoint at {path}")
    return 0


def _run_config_from(args, task: str | None = None, **extra) -> RunConfig:
    d = _load_config_file(args.config)
    d = _merge(d, **extra)
    if task is not None:
        d["task"] = task
    d["seed"] = _seed_override(d.get("seed", 0))
    missing = [k for k in ("task", "corpus", "out_dir") if not d.get(k)]
    if missing:
        raise ConfigError(f"missing required config fields: {', '.join(missing)}")
    return RunConfig.from_dict(d)


def _print_report(report) -> None:
    for key, value in sorted(report.aggregates.items()):
        print(f"{key}: {value:.6g}")


def _cmd_infer(args) -> int:
    from .pipeline import run_task

    config = _run_config_from(args, out_dir=args.out, clip=args.clip)
    if config.task not in ("lipsync", "style_transfer", "video_driven"):
        raise ConfigError(f"infer does not run task {config.task!r}; use swap")
    paths, report = run_task(config)
    _print_report(report)
    print(f"outputs in {config.out_dir}")
    return 0


def _cmd_infer_frames(args) -> int:
    from .pipeline import run_task

    config = _run_config_from(
        args,
        task="lipsync",
        corpus=args.corpus,
        out_dir=args.out,
        syncformer_ckpt=args.syncformer_ckpt,
        generator_ckpt=args.gen_ckpt,
        clip=args.clip,
        audio_from=args.audio_from,
        ref_policy=args.ref_policy,
    )
    paths, report = run_task(config)
    _print_report(report)
    print(f"outputs in {config.out_dir}")
    return 0


def _cmd_swap(args) -> int:
    from .pipeline import run_task

    task = "swap_with_audio" if args.audio else "swap"
    config = _run_config_from(
        args,
        task=task,
        corpus=args.corpus,
        out_dir=args.out,
        generator_ckpt=args.gen_ckpt,
        syncformer_ckpt=args.syncformer_ckpt,
        embedder_ckpt=args.embedder,
        target_clip=args.target_clip,
        source_clip=args.source_clip,
        transfer_template=args.transfer_template,
        transfer_style=args.transfer_style,
    )
    paths, report = run_task(config)
    _print_report(report)
    print(f"outputs in {config.out_dir}")
    return 0


def _cmd_finetune(args) -> int:
    from .pipeline import finetune_personalized

    idx_name = args.clip.split(":")
    if len(idx_name) != 2:
        raise ConfigError(f"--clip must look like '0:clip_000', got {args.clip!r}")
    path = finetune_personalized(
        args.gen_ckpt,
        _corpus(args.corpus),
        int(idx_name[0]),
        idx_name[1],
        args.steps,
        args.out,
        start=args.start,
        end=args.end,
        batch_size=args.batch_size,
    )
    print(f"personalized checkpoint at {path}")
    return 0


_EVAL_METRICS = ("psnr", "ssim", "lmd", "dv", "sync", "id")


def _cmd_eval(args) -> int:
    from . import metrics
    from .mesh import apply_displacement
    from .synthdata import mouth_box

    wanted = [m.strip() for m in args.metrics.split(",") if m.strip()]
    bad = [m for m in wanted if m not in _EVAL_METRICS]
    if bad:
        raise ConfigError(
            f"unknown metrics {bad}; choose from {', '.join(_EVAL_METRICS)}"
        )

    pred_dir = args.pred
    frames_path = (
        pred_dir if pred_dir.endswith(".bin") else os.path.join(pred_dir, "frames.bin")
    )
    frames = ndio.load_array(frames_path)

    corpus = _corpus(args.gt)
    idx_name = args.clip.split(":")
    if len(idx_name) != 2:
        raise ConfigError(f"--clip must look like '0:test_000', got {args.clip!r}")
    tid = int(idx_name[0])
    clip = corpus.load_clip(tid, idx_name[1])
    profile = corpus.identity(tid)
    n = min(frames.shape[0], clip.length)
    camera = corpus.camera()

    values: dict = {}
    if "psnr" in wanted:
        values["psnr"] = metrics.psnr(frames[:n], clip.frames[:n])
    if "ssim" in wanted:
        values["ssim"] = float(
            np.mean([metrics.ssim(frames[t], clip.frames[t]) for t in range(n)])
        )
    if "lmd" in wanted or "dv" in wanted:
        disp_path = os.path.join(pred_dir, "meshes.bin")
        if not os.path.exists(disp_path):
            raise DataError(
                f"metrics lmd/dv need a displacement track at {disp_path}"
            )
        disp = ndio.load_array(disp_path)
        template = profile.template_mesh()
        pred_track = np.stack(
            [apply_displacement(template, disp[t]).vertices for t in range(n)]
        )
        gt_track = np.stack([m.vertices for m in clip.meshes[:n]])
        if "lmd" in wanted:
            values["lmd"] = metrics.lmd(
                pred_track, gt_track, profile.landmark_indices,
                clip.poses[:n], camera,
            )
        if "dv" in wanted:
            values["d_v"] = metrics.vertex_l2(pred_track, gt_track)
    if "sync" in wanted:
        values["sync_corr"] = metrics.sync_corr(
            frames[:n], clip.articulation[:n], profile, clip.poses[:n],
            clip.background, camera, mouth_box(corpus.config),
        )
    if "id" in wanted:
        if not args.embedder:
            raise ConfigError("metric 'id' needs --embedder")
        from .faceswap import load_embedder

        embedder, _ = load_embedder(args.embedder)
        centroids = metrics.identity_centroids(embedder, corpus)
        source = tid if args.source_id is None else args.source_id
        sim, ret = metrics.id_metrics(frames[:n], source, embedder, centroids)
        values["id_similarity"] = sim
        values["id_retrieval"] = ret

    report = metrics.EvalReport(task="eval")
    report.add_clip(args.clip, values)
    report.save(args.report)
    chart = os.path.splitext(args.report)[0] + ".png"
    metrics.report_chart(report, chart)
    _print_report(report)
    print(f"report at {args.report}, chart at {chart}")
    return 0


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="resyncer",
        description="Two-stage audio-driven face resynthesis toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="YAML or JSON defaults for this command")
        p.set_defaults(func=func)
        return p

    p = add("gen-data", _cmd_gen_data, "synthesize a talking-head corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)

    p = add("train-syncformer", _cmd_train_syncformer,
            "train the mesh-displacement transformer")
    p.add_argument("--corpus", required=True)
    p.add_argument("--steps", type=int, default=8000)
    p.add_argument("--out", required=True)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--resume")

    p = add("infer-mesh", _cmd_infer_mesh, "predict a displacement track")
    p.add_argument("--corpus", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--clip", required=True, help="identity:clip, like 0:test_000")
    p.add_argument("--style-from", help="identity or identity:clip style donor")
    p.add_argument("--out", required=True)
    p.add_argument("--chunk-len", type=int, default=100)
    p.add_argument("--chunk-overlap", type=int, default=20)

    p = add("train-generator", _cmd_train_generator,
            "train the mesh-conditioned frame generator")
    p.add_argument("--corpus", required=True)
    p.add_argument("--syncformer", help="stage-1 checkpoint for predicted overlays")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--warmup", type=int, help="steps on ground-truth overlays only")
    p.add_argument("--out", required=True)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--resume")

    p = add("train-embedder", _cmd_train_embedder,
            "train the identity embedding network")
    p.add_argument("--corpus", required=True)
    p.add_argument("--steps", type=int, default=1200)
    p.add_argument("--out", required=True)
    p.add_argument("--batch-size", type=int, default=32)

    p = add("train-unified", _cmd_train_unified,
            "joint reconstruction + face-swap training")
    p.add_argument("--corpus", required=True)
    p.add_argument("--embedder", required=True)
    p.add_argument("--init-from", help="generator checkpoint to start from")
    p.add_argument("--syncformer", help="stage-1 checkpoint for predicted overlays")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--out", required=True)
    p.add_argument("--batch-size", type=int, default=8)

    p = add("infer", _cmd_infer, "run a config-driven synthesis task")
    p.add_argument("--out", help="overrides out_dir from the config")
    p.add_argument("--clip", help="overrides clip from the config")

    p = add("infer-frames", _cmd_infer_frames, "audio-to-frames inference")
    p.add_argument("--corpus", required=True)
    p.add_argument("--gen-ckpt", required=True)
    p.add_argument("--syncformer-ckpt", required=True)
    p.add_argument("--clip", required=True, help="identity:clip to resynthesize")
    p.add_argument("--audio-from", help="identity:clip audio donor")
    p.add_argument("--ref-policy", choices=("train", "same_id_eval", "cross_id"),
                   default="same_id_eval")
    p.add_argument("--out", required=True)

    p = add("swap", _cmd_swap, "face swap, optionally audio-driven")
    p.add_argument("--corpus", required=True)
    p.add_argument("--gen-ckpt", required=True)
    p.add_argument("--target-clip", required=True, help="identity:clip")
    p.add_argument("--source-clip", required=True, help="source identity (or identity:clip)")
    p.add_argument("--audio", action="store_true",
                   help="drive the mouth from the target audio track")
    p.add_argument("--syncformer-ckpt", help="required with --audio")
    p.add_argument("--embedder", help="embedder checkpoint for identity metrics")
    p.add_argument("--transfer-template", action=argparse.BooleanOptionalAction,
                   default=True)
    p.add_argument("--transfer-style", action=argparse.BooleanOptionalAction,
                   default=True)
    p.add_argument("--out", required=True)

    p = add("finetune", _cmd_finetune, "personalize the generator on one clip")
    p.add_argument("--corpus", required=True)
    p.add_argument("--gen-ckpt", required=True)
    p.add_argument("--clip", required=True, help="identity:clip to adapt to")
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--start", type=int, default=0)
    p.add_argument("--end", type=int)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--out", required=True)

    p = add("eval", _cmd_eval, "score generated outputs against a corpus clip")
    p.add_argument("--pred", required=True,
                   help="run output directory (or frames .bin file)")
    p.add_argument("--gt", required=True, help="corpus root with the ground truth")
    p.add_argument("--clip", required=True, help="identity:clip to compare against")
    p.add_argument("--metrics", default="psnr,ssim,lmd,dv,sync,id")
    p.add_argument("--report", required=True, help="output JSON path")
    p.add_argument("--embedder", help="needed for the id metric")
    p.add_argument("--source-id", type=int,
                   help="identity the outputs should resemble (default: clip's)")

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
