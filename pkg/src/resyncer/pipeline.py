"""Task orchestration: chunked inference, retargeting, fine-tuning, runner.

Every run is a pure function of (config, corpus, checkpoints): seeds come
from the config, all model paths are content-hashed into a reproducibility
record, and outputs are byte-stable across reruns.
"""

from __future__ import annotations

import dataclasses
import logging
import os

import numpy as np
import torch

from . import metrics, ndio
from .config import RunConfig
from .errors import ConfigError, DataError, DomainError
from .generator import (
    PerceptualTaps,
    frames_to_tensor,
    generate,
    load_generator,
    loss_adv_discriminator,
    loss_adv_generator,
    loss_rec,
    r1_penalty,
    save_generator,
    select_reference,
    tensor_to_frames,
    white_overlay_frame,
)
from .mesh import (
    MASK_FULL_FACE,
    MASK_LOWER_HALF,
    CompositeInput,
    MeshFrame,
    apply_displacement,
    make_mask,
    overlay,
)
from .metrics import EvalReport, StyleProbe
from .faceswap import load_embedder, swap_infer
from .syncformer import default_style_window, load_syncformer
from .synthdata import Corpus, load_corpus, mouth_box, render_white

logger = logging.getLogger("resyncer.pipeline")


# ---------------------------------------------------------------------------
# Chunked autoregressive inference


def chunked_mesh_inference(
    model,
    audio: np.ndarray,
    style: np.ndarray,
    chunk_len: int = 100,
    chunk_overlap: int = 20,
) -> np.ndarray:
    """Displacement series [N, 3V] for audio of any length.

    Chunks start every (chunk_len - chunk_overlap) frames and each runs
    autoregressively from the zero start token; overlapping regions are
    merged by a linear crossfade whose weight ramps 0 to 1 across the
    overlap. A series no longer than one chunk is a single plain
    autoregressive pass.
    """
    audio = np.asarray(audio, dtype=np.float32)
    if audio.ndim != 2:
        raise DomainError(f"audio must be [N, D], got {audio.shape}")
    n = audio.shape[0]
    if n == 0:
        raise DomainError("cannot run inference on an empty audio series")
    if not 0 <= chunk_overlap < chunk_len:
        raise ConfigError(
            f"need 0 <= chunk_overlap < chunk_len, got {chunk_overlap}/{chunk_len}"
        )
    starts = [0]
    while starts[-1] + chunk_len < n:
        starts.append(starts[-1] + (chunk_len - chunk_overlap))

    audio_t = torch.from_numpy(audio)
    style_t = torch.from_numpy(np.asarray(style, dtype=np.float32))
    out: np.ndarray | None = None
    prev_end = 0
    for s in starts:
        end = min(s + chunk_len, n)
        pred = model.infer_autoregressive(audio_t[s:end], style_t).numpy()
        if out is None:
            out = np.zeros((n, pred.shape[1]), dtype=pred.dtype)
            out[s:end] = pred
            prev_end = end
            continue
        ov = prev_end - s
        if ov > 0:
            w = np.linspace(0.0, 1.0, ov) if ov > 1 else np.array([0.5])
            out[s:prev_end] = (
                (1.0 - w)[:, None] * out[s:prev_end] + w[:, None] * pred[:ov]
            ).astype(pred.dtype)
        out[prev_end:end] = pred[ov:]
        prev_end = end
    return out


def video_driven_retarget(
    source_displacements: np.ndarray, target_template: MeshFrame
) -> list[MeshFrame]:
    """Meshes = target template + source displacements, frame by frame.

    Displacements are copied, never rescaled, so the retargeted mouth
    excursion equals the source excursion exactly. Stage 1 is bypassed.
    """
    d = np.asarray(source_displacements, dtype=np.float64)
    if d.ndim != 3 or d.shape[1:] != target_template.vertices.shape:
        raise DomainError(
            f"displacements {d.shape} do not fit template "
            f"{target_template.vertices.shape}"
        )
    return [apply_displacement(target_template, d[t]) for t in range(d.shape[0])]


# ---------------------------------------------------------------------------
# Personalized fine-tuning


def finetune_personalized(
    checkpoint: str,
    corpus: Corpus,
    identity_index: int,
    clip_name: str,
    steps: int,
    out_path: str,
    start: int = 0,
    end: int | None = None,
    batch_size: int = 8,
    lr: float = 1e-3,
    adv_weight: float = 0.05,
    log_every: int = 50,
) -> str:
    """Adapt the frame generator to one short clip of one identity.

    Only Stage 2 trains; mesh prediction weights live in a separate
    checkpoint and are untouched. The objective and hyperparameters match
    the standard recipe, restricted to ground-truth overlays from the clip.
    Zero steps copies the weights bitwise and only rewrites the metadata.
    """
    stack, meta, arrays = load_generator(checkpoint)
    source_hash = ndio.sha256_file(checkpoint)
    clip = corpus.load_clip(identity_index, clip_name)
    frames = clip.frames[start:end]
    poses = clip.poses[start:end]
    displacements = clip.displacements[start:end]
    if frames.shape[0] < 25:
        raise DomainError(
            f"personalization needs at least 25 frames (one second), got "
            f"{frames.shape[0]}"
        )

    tag = {
        "finetuned_from": source_hash,
        "finetune_identity": identity_index,
        "finetune_clip": clip_name,
        "finetune_steps": steps,
    }
    if steps == 0:
        meta2 = dict(meta)
        meta2.update(tag)
        config = {"kind": "generator", "model": stack.config.to_dict()}
        ndio.save_checkpoint(out_path, config, arrays, meta=meta2)
        return out_path

    torch.manual_seed(stack.config.seed)
    torch.set_num_threads(1)
    rng = np.random.default_rng(stack.config.seed + 77)
    config = stack.config
    taps = PerceptualTaps(config.perceptual_taps)
    opt_g = torch.optim.Adam(
        list(stack.encoder.parameters()) + list(stack.generator.parameters()),
        lr=lr,
        betas=(0.0, 0.99),
    )
    opt_d = torch.optim.Adam(
        stack.discriminator.parameters(), lr=lr, betas=(0.0, 0.99)
    )

    camera = corpus.camera()
    geometry = corpus.geometry()
    mask = make_mask(MASK_LOWER_HALF, geometry)
    profile = corpus.identity(identity_index)
    template = profile.template_mesh()
    num = frames.shape[0]
    whites = [
        render_white(
            apply_displacement(template, displacements[t]),
            poses[t],
            camera,
            geometry.height,
            geometry.width,
        )
        for t in range(num)
    ]

    stack.train()
    history = list(meta.get("loss_history", []))
    for step in range(steps):
        inputs = np.empty(
            (batch_size, 6, geometry.height, geometry.width), dtype=np.float32
        )
        targets = np.empty(
            (batch_size, geometry.height, geometry.width, 3), dtype=np.uint8
        )
        for b in range(batch_size):
            t = int(rng.integers(num))
            ref = select_reference(num, t, "train", rng)
            over = overlay(frames[t], mask, whites[t])
            inputs[b] = CompositeInput(over, frames[ref]).to_array()
            targets[b] = frames[t]
        x = torch.from_numpy(inputs)
        real = frames_to_tensor(targets)

        pred = stack.generator(stack.encoder(x))
        fake_logits, _ = stack.discriminator(pred)
        real_logits, _ = stack.discriminator(real)
        g_loss = loss_rec(pred, real, taps, config.lambda_perceptual)
        g_loss = g_loss + adv_weight * loss_adv_generator(fake_logits, real_logits)
        opt_g.zero_grad(set_to_none=True)
        g_loss.backward()
        opt_g.step()

        fake_logits, _ = stack.discriminator(pred.detach())
        real_logits, _ = stack.discriminator(real)
        d_loss = loss_adv_discriminator(fake_logits, real_logits)
        if (step + 1) % config.r1_interval == 0:
            d_loss = d_loss + 0.5 * config.r1_gamma * config.r1_interval * r1_penalty(
                stack.discriminator, real
            )
        opt_d.zero_grad(set_to_none=True)
        d_loss.backward()
        opt_d.step()

        if step % log_every == 0 or step == steps - 1:
            history.append(float(g_loss.detach()))

    meta2 = {"step": int(meta.get("step", 0)) + steps, "loss_history": history}
    meta2.update(tag)
    save_generator(out_path, stack, meta2, opt_g=opt_g, opt_d=opt_d)
    return out_path


# ---------------------------------------------------------------------------
# Task runner


def _parse_clip_ref(ref: str, corpus: Corpus, field: str) -> tuple[int, str | None]:
    """'3:test_000' -> (3, 'test_000'); '3' -> (3, None)."""
    parts = str(ref).split(":")
    try:
        idx = int(parts[0])
    except ValueError as exc:
        raise ConfigError(f"{field}: cannot parse identity in {ref!r}") from exc
    if not 0 <= idx < corpus.n_identities:
        raise ConfigError(
            f"{field}: identity {idx} outside corpus of {corpus.n_identities}"
        )
    if len(parts) == 1:
        return idx, None
    if len(parts) == 2 and parts[1]:
        return idx, parts[1]
    raise ConfigError(f"{field}: expected 'identity' or 'identity:clip', got {ref!r}")


_TASK_FIELDS = {
    "lipsync": {"syncformer_ckpt", "generator_ckpt", "clip", "ref_policy",
                "chunk_len", "chunk_overlap", "embedder_ckpt", "audio_from"},
    "style_transfer": {"syncformer_ckpt", "generator_ckpt", "clip", "style_from",
                       "ref_policy", "chunk_len", "chunk_overlap", "audio_from"},
    "video_driven": {"generator_ckpt", "clip", "driving_clip", "ref_policy"},
    "swap": {"generator_ckpt", "embedder_ckpt", "target_clip", "source_clip",
             "transfer_template", "transfer_style"},
    "swap_with_audio": {"generator_ckpt", "embedder_ckpt", "syncformer_ckpt",
                        "target_clip", "source_clip", "transfer_template",
                        "transfer_style", "chunk_len", "chunk_overlap"},
}
_ALWAYS_USED = {"task", "corpus", "out_dir", "seed", "extra", "finetune_steps"}


def _warn_ignored(config: RunConfig) -> None:
    used = _TASK_FIELDS[config.task] | _ALWAYS_USED
    for f in dataclasses.fields(RunConfig):
        if f.name in used:
            continue
        default = f.default if f.default is not dataclasses.MISSING else None
        if getattr(config, f.name) != default:
            logger.warning(
                "config field %r is not used by task %r; ignoring",
                f.name,
                config.task,
            )


def _need(config: RunConfig, *fields: str) -> None:
    for f in fields:
        if getattr(config, f) in (None, ""):
            raise ConfigError(f"task {config.task!r} requires config field {f!r}")


def _generate_frames(stack, overlays: np.ndarray, refs: np.ndarray,
                     batch: int = 16) -> np.ndarray:
    out = []
    for s in range(0, overlays.shape[0], batch):
        x = np.stack(
            [
                CompositeInput(o, r).to_array()
                for o, r in zip(overlays[s : s + batch], refs[s : s + batch])
            ]
        )
        out.append(tensor_to_frames(generate(stack, torch.from_numpy(x))))
    return np.concatenate(out)


def _overlay_track(frames, meshes, poses, mask, camera) -> np.ndarray:
    return np.stack(
        [
            white_overlay_frame(frames[t], mask, meshes[t], poses[t], camera)
            for t in range(len(meshes))
        ]
    )


def _unmasked_psnr(pred: np.ndarray, gt: np.ndarray, mask) -> float:
    keep = mask.pixels == 0
    return metrics.psnr(pred[:, keep], gt[:, keep])


def _style_window_from(corpus: Corpus, ref: str, window: int, field: str) -> np.ndarray:
    idx, name = _parse_clip_ref(ref, corpus, field)
    if name is None:
        return default_style_window(corpus, idx, window)
    clip = corpus.load_clip(idx, name)
    if clip.length < window:
        raise DataError(
            f"{field}: clip {ref!r} has {clip.length} frames, need {window}"
        )
    return clip.displacements[:window].reshape(window, -1)


def _save_outputs(out_dir: str, frames: np.ndarray, meshes: np.ndarray,
                  report: EvalReport, record: dict, fps: int) -> dict:
    paths = {
        "frames": os.path.join(out_dir, "frames.bin"),
        "video": os.path.join(out_dir, "video.rvid"),
        "meshes": os.path.join(out_dir, "meshes.bin"),
        "report": os.path.join(out_dir, "report.json"),
        "chart": os.path.join(out_dir, "chart.png"),
        "sheet": os.path.join(out_dir, "frames.png"),
        "record": os.path.join(out_dir, "repro.json"),
    }
    ndio.save_array(paths["frames"], frames)
    ndio.save_raw_video(paths["video"], frames, fps)
    ndio.save_array(paths["meshes"], meshes.astype(np.float32))
    report.save(paths["report"])
    metrics.report_chart(report, paths["chart"])
    _contact_sheet(frames, paths["sheet"])
    ndio.dump_json(paths["record"], record)
    return paths


def _contact_sheet(frames: np.ndarray, path: str, cols: int = 8,
                   max_tiles: int = 24) -> None:
    from PIL import Image

    step = max(1, frames.shape[0] // max_tiles)
    tiles = frames[::step][:max_tiles]
    cols = min(cols, len(tiles))
    rows = (len(tiles) + cols - 1) // cols
    h, w = frames.shape[1:3]
    sheet = np.zeros((rows * h, cols * w, 3), dtype=np.uint8)
    for i, tile in enumerate(tiles):
        r, c = divmod(i, cols)
        sheet[r * h : (r + 1) * h, c * w : (c + 1) * w] = tile
    Image.fromarray(sheet).save(path, format="PNG")


def run_task(config: RunConfig) -> tuple[dict, EvalReport]:
    """Dispatch one task end to end; returns (output paths, report)."""
    corpus = load_corpus(config.corpus)
    os.makedirs(config.out_dir, exist_ok=True)
    _warn_ignored(config)
    torch.manual_seed(config.seed)
    torch.set_num_threads(1)
    rng = np.random.default_rng(config.seed)

    if config.task in ("lipsync", "style_transfer"):
        frames, meshes, report = _run_sync_task(config, corpus, rng)
    elif config.task == "video_driven":
        frames, meshes, report = _run_video_driven(config, corpus, rng)
    else:
        frames, meshes, report = _run_swap(config, corpus)

    hashes = {
        name: (ndio.sha256_file(path) if path else None)
        for name, path in (
            ("syncformer", config.syncformer_ckpt),
            ("generator", config.generator_ckpt),
            ("embedder", config.embedder_ckpt),
        )
    }
    record = {
        "config": config.to_dict(),
        "seeds": {"config_seed": config.seed},
        "checkpoints": hashes,
        "corpus_config": corpus.config.to_dict(),
    }
    report.metadata["checkpoints"] = hashes
    paths = _save_outputs(
        config.out_dir, frames, meshes, report, record, corpus.config.fps
    )
    return paths, report


def _run_sync_task(config: RunConfig, corpus: Corpus, rng) -> tuple:
    _need(config, "syncformer_ckpt", "generator_ckpt", "clip")
    if config.task == "style_transfer":
        _need(config, "style_from")
    tid, tname = _parse_clip_ref(config.clip, corpus, "clip")
    if tname is None:
        raise ConfigError("clip must name both identity and clip, like '0:test_000'")
    clip = corpus.load_clip(tid, tname)
    profile = corpus.identity(tid)
    model, _, _ = load_syncformer(config.syncformer_ckpt)
    stack, _, _ = load_generator(config.generator_ckpt)

    window = model.config.style_window
    if config.task == "style_transfer":
        style = _style_window_from(corpus, config.style_from, window, "style_from")
    else:
        style = default_style_window(corpus, tid, window)

    if config.audio_from:
        aid, aname = _parse_clip_ref(config.audio_from, corpus, "audio_from")
        if aname is None:
            raise ConfigError("audio_from must be a full 'identity:clip' reference")
        donor = corpus.load_clip(aid, aname)
        audio, sync_ref = donor.audio_features, donor.articulation
    else:
        audio, sync_ref = clip.audio_features, clip.articulation
    n = min(audio.shape[0], clip.length)

    flat = chunked_mesh_inference(
        model, audio[:n], style, config.chunk_len, config.chunk_overlap
    )
    disp = flat.reshape(n, -1, 3)
    template = profile.template_mesh()
    mesh_track = [apply_displacement(template, disp[t]) for t in range(n)]

    camera = corpus.camera()
    geometry = corpus.geometry()
    mask = make_mask(MASK_LOWER_HALF, geometry)
    overlays = _overlay_track(clip.frames[:n], mesh_track, clip.poses[:n], mask, camera)
    refs = np.stack(
        [
            clip.frames[select_reference(n, t, config.ref_policy, rng)]
            for t in range(n)
        ]
    )
    frames = _generate_frames(stack, overlays, refs)

    box = mouth_box(corpus.config)
    values = {"psnr_unmasked": _unmasked_psnr(frames, clip.frames[:n], mask)}
    if not config.audio_from:
        # pixel fidelity against the real clip only makes sense for its own audio
        values["psnr"] = metrics.psnr(frames, clip.frames[:n])
        values["ssim"] = float(
            np.mean([metrics.ssim(frames[t], clip.frames[t]) for t in range(n)])
        )
    if config.task == "lipsync":
        values["sync_corr"] = metrics.sync_corr(
            frames, sync_ref[:n], profile, clip.poses[:n], clip.background,
            camera, box,
        )
        if not config.audio_from:
            gt_track = np.stack([m.vertices for m in clip.meshes])
            pred_track = np.stack([m.vertices for m in mesh_track])
            values["lmd"] = metrics.lmd(
                pred_track, gt_track, profile.landmark_indices, clip.poses, camera
            )
            values["d_v"] = metrics.vertex_l2(pred_track, gt_track)
    else:
        did, _ = _parse_clip_ref(config.style_from, corpus, "style_from")
        probe = StyleProbe(corpus)
        own = [
            metrics.excursion_statistic(c.displacements)
            for i, _, c in corpus.iter_clips()
            if i == tid
        ]
        donor = [
            metrics.excursion_statistic(c.displacements)
            for i, _, c in corpus.iter_clips()
            if i == did
        ]
        values["excursion"] = metrics.excursion_statistic(disp)
        values["excursion_own_style"] = float(np.mean(own))
        values["excursion_donor_style"] = float(np.mean(donor))
        values["probe_pick"] = float(probe.classify_series(disp))
    report = EvalReport(task=config.task)
    report.add_clip(f"{tid}:{tname}", values)
    return frames, disp.astype(np.float32), report


def _run_video_driven(config: RunConfig, corpus: Corpus, rng) -> tuple:
    _need(config, "generator_ckpt", "clip", "driving_clip")
    tid, tname = _parse_clip_ref(config.clip, corpus, "clip")
    did, dname = _parse_clip_ref(config.driving_clip, corpus, "driving_clip")
    if tname is None or dname is None:
        raise ConfigError("video_driven needs full 'identity:clip' references")
    clip = corpus.load_clip(tid, tname)
    driving = corpus.load_clip(did, dname)
    profile = corpus.identity(tid)
    stack, _, _ = load_generator(config.generator_ckpt)

    n = min(clip.length, driving.length)
    disp = driving.displacements[:n]
    mesh_track = video_driven_retarget(disp, profile.template_mesh())

    camera = corpus.camera()
    geometry = corpus.geometry()
    mask = make_mask(MASK_LOWER_HALF, geometry)
    overlays = _overlay_track(clip.frames[:n], mesh_track, clip.poses[:n], mask, camera)
    refs = np.stack(
        [
            clip.frames[select_reference(n, t, config.ref_policy, rng)]
            for t in range(n)
        ]
    )
    frames = _generate_frames(stack, overlays, refs)

    box = mouth_box(corpus.config)
    values = {
        "psnr_unmasked": _unmasked_psnr(frames, clip.frames[:n], mask),
        "sync_corr": metrics.sync_corr(
            frames, driving.articulation[:n], profile, clip.poses[:n],
            clip.background, camera, box,
        ),
        "excursion": metrics.excursion_statistic(disp),
        "excursion_source": metrics.excursion_statistic(driving.displacements[:n]),
    }
    report = EvalReport(task=config.task)
    report.add_clip(f"{tid}:{tname}<-{did}:{dname}", values)
    return frames, disp.astype(np.float32), report


def _run_swap(config: RunConfig, corpus: Corpus) -> tuple:
    _need(config, "generator_ckpt", "target_clip", "source_clip")
    if config.task == "swap_with_audio":
        _need(config, "syncformer_ckpt")
    tid, tname = _parse_clip_ref(config.target_clip, corpus, "target_clip")
    sid, _ = _parse_clip_ref(config.source_clip, corpus, "source_clip")
    if tname is None:
        raise ConfigError("target_clip must be a full 'identity:clip' reference")
    stack, _, _ = load_generator(config.generator_ckpt)

    sync_path = (
        config.syncformer_ckpt if config.task == "swap_with_audio" else None
    )
    frames = swap_infer(
        stack,
        corpus,
        tid,
        tname,
        sid,
        syncformer_path=sync_path,
        transfer_template=config.transfer_template,
        transfer_style=config.transfer_style,
    )

    clip = corpus.load_clip(tid, tname)
    mask = make_mask(MASK_FULL_FACE, corpus.geometry())
    values = {"psnr_unmasked": _unmasked_psnr(frames, clip.frames, mask)}
    if config.task == "swap_with_audio":
        # articulation follows the target audio track by construction
        values["sync_corr"] = metrics.sync_corr(
            frames,
            clip.articulation,
            corpus.identity(sid if config.transfer_template else tid),
            clip.poses,
            clip.background,
            corpus.camera(),
            mouth_box(corpus.config),
        )
    if config.embedder_ckpt:
        embedder, _ = load_embedder(config.embedder_ckpt)
        centroids = metrics.identity_centroids(embedder, corpus)
        sim, ret = metrics.id_metrics(frames, sid, embedder, centroids)
        values["id_similarity"] = sim
        values["id_retrieval"] = ret
    report = EvalReport(task=config.task)
    report.add_clip(f"{tid}:{tname}<-{sid}", values)
    meshes = clip.displacements  # target-driven structure track
    return frames, meshes.astype(np.float32), report
