"""Face swapping through the shared reference encoder.

Swapping reuses the lip-sync generator wholesale. The only change is at the
input: the full-face region of the target frame is replaced by the white
mesh, and the encoder runs twice on that overlay; once paired with a source
identity frame, once paired with a target reference frame. The global code
from the first pass and the stage maps from the second are recombined into
one bundle, so identity and structure arrive over provably separate routes.

Identity supervision comes from a small frozen classifier embedding; there
is no pixel ground truth for a swapped face.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import ndio, tstate
from .config import GeneratorConfig, SwapConfig
from .errors import ConfigError, DataError, DomainError, NumericError
from .mesh import (
    MASK_FULL_FACE,
    MASK_LOWER_HALF,
    CompositeInput,
    Mask,
    apply_displacement,
    make_mask,
    overlay,
)
from .generator import (
    FeatureBundle,
    GeneratorStack,
    PerceptualTaps,
    frames_to_tensor,
    load_generator,
    loss_adv_discriminator,
    loss_adv_generator,
    loss_rec,
    predict_train_displacements,
    r1_penalty,
    save_generator,
    select_reference,
    tensor_to_frames,
)
from .synthdata import Corpus, render_white

__all__ = [
    "build_swap_overlay",
    "encode_swap",
    "IdentityEmbedder",
    "train_embedder",
    "save_embedder",
    "load_embedder",
    "embedder_accuracy",
    "loss_id",
    "loss_feature_match",
    "train_unified",
    "swap_infer",
]


def build_swap_overlay(frame: np.ndarray, mask: Mask, white: np.ndarray) -> np.ndarray:
    """Full-face overlay: (1 - A') * frame + A' * white, exact per pixel."""
    if mask.kind != MASK_FULL_FACE:
        raise DomainError(f"swap overlay needs the full-face mask, got {mask.kind!r}")
    return overlay(frame, mask, white)


def encode_swap(
    encoder: nn.Module,
    overlay_frame: np.ndarray,
    source_frame: np.ndarray,
    reference_frame: np.ndarray,
) -> FeatureBundle:
    """Two passes of the shared encoder, recombined.

    Pass one pairs the overlay with the source identity frame and keeps only
    the global code; pass two pairs the same overlay with the target
    reference frame and keeps only the stage maps. The source frame can
    therefore never touch the structural route, nor the reference the
    identity route.
    """
    x_id = torch.from_numpy(CompositeInput(overlay_frame, source_frame).to_array())[None]
    x_struct = torch.from_numpy(CompositeInput(overlay_frame, reference_frame).to_array())[None]
    bundle_id = encoder(x_id)
    bundle_struct = encoder(x_struct)
    return FeatureBundle(f_f=bundle_id.f_f, maps=bundle_struct.maps)


# ---------------------------------------------------------------------------
# Identity embedder


class IdentityEmbedder(nn.Module):
    """Four-block conv classifier whose penultimate layer is the embedding.

    The embedding is normalized to the unit sphere; the classification head
    only exists for training and accuracy checks. With ``crop`` set, only
    that (r0, r1, c0, c1) window of the input is embedded, which keeps the
    identity signal on the face rather than the scene behind it.
    """

    def __init__(self, n_identities: int, embed_dim: int = 64,
                 crop: tuple[int, int, int, int] | None = None,
                 input_size: int = 64):
        super().__init__()
        self.n_identities = n_identities
        self.embed_dim = embed_dim
        self.crop = tuple(int(v) for v in crop) if crop is not None else None
        chans = [3, 32, 64, 96, 128]
        self.blocks = nn.ModuleList(
            nn.Conv2d(c_in, c_out, 3, stride=2, padding=1)
            for c_in, c_out in zip(chans[:-1], chans[1:])
        )
        if self.crop is not None:
            h, w = self.crop[1] - self.crop[0], self.crop[3] - self.crop[2]
        else:
            h = w = input_size
        for _ in range(len(self.blocks)):
            h, w = (h + 1) // 2, (w + 1) // 2
        self.embed_head = nn.Linear(128 * h * w, embed_dim)
        self.class_head = nn.Linear(embed_dim, n_identities)

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        """[B, 3, H, W] in [-1, 1] -> unit-norm [B, embed_dim]."""
        h = x
        if self.crop is not None:
            r0, r1, c0, c1 = self.crop
            h = h[:, :, r0:r1, c0:c1]
        for block in self.blocks:
            h = F.leaky_relu(block(h), 0.2)
        raw = self.embed_head(h.flatten(1))
        norm = raw.norm(dim=-1, keepdim=True)
        if bool((norm < 1e-8).any()):
            raise NumericError("identity embedding collapsed to zero norm")
        return raw / norm

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.class_head(self.embed(x))


def train_embedder(
    corpus: Corpus,
    out_path: str,
    steps: int = 1200,
    batch_size: int = 32,
    lr: float = 1e-3,
    embed_dim: int = 64,
    seed: int = 0,
    log_every: int = 50,
) -> str:
    """Identity classification on training frames; the head is discarded at
    use time but kept in the checkpoint for accuracy audits.

    Frames are embedded through the face-box crop; during training half the
    samples get the scene behind the face silhouette replaced with uniform
    noise and every sample is jittered by a few pixels, so the network
    cannot key on per-clip scenery or an exact head position."""
    torch.manual_seed(seed)
    torch.set_num_threads(1)
    rng = np.random.default_rng(seed + 13)
    n_ids = corpus.config.n_identities
    geometry = corpus.geometry()
    camera = corpus.camera()
    model = IdentityEmbedder(n_ids, embed_dim, crop=geometry.face_box)
    opt = torch.optim.Adam(model.parameters(), lr=lr, weight_decay=1e-4)
    train_clips = corpus.clip_entries("train")
    if not train_clips:
        raise DataError("corpus has no training clips")

    r0, r1, c0, c1 = geometry.face_box
    jitter = min(3, r0, c0, geometry.height - r1, geometry.width - c1)
    sil_cache: dict[tuple[int, str, int], np.ndarray] = {}

    def silhouette(idx: int, name: str, clip, t: int) -> np.ndarray:
        key = (idx, name, t)
        if key not in sil_cache:
            white = render_white(
                clip.meshes[t], clip.poses[t], camera,
                geometry.height, geometry.width,
            )
            sil_cache[key] = np.asarray(white) > 0
        return sil_cache[key]

    history: list[float] = []
    model.train()
    for step in range(steps):
        frames = np.empty(
            (batch_size, geometry.height, geometry.width, 3), dtype=np.uint8
        )
        labels = np.empty(batch_size, dtype=np.int64)
        for b in range(batch_size):
            idx, entry = train_clips[rng.integers(len(train_clips))]
            clip = corpus.load_clip(idx, entry["name"])
            t = int(rng.integers(clip.frames.shape[0]))
            mixed = clip.frames[t]
            if rng.random() < 0.5:
                sil = silhouette(idx, entry["name"], clip, t)
                noise = rng.integers(0, 256, size=mixed.shape, dtype=np.uint8)
                mixed = np.where(sil[:, :, None], mixed, noise)
            dr, dc = rng.integers(-jitter, jitter + 1, size=2)
            frames[b] = np.roll(mixed, (int(dr), int(dc)), axis=(0, 1))
            labels[b] = idx
        logits = model(frames_to_tensor(frames))
        loss = F.cross_entropy(logits, torch.from_numpy(labels))
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if step % log_every == 0 or step == steps - 1:
            history.append(float(loss.detach()))

    save_embedder(out_path, model, {"step": steps, "loss_history": history, "seed": seed})
    return out_path


def save_embedder(path: str, model: IdentityEmbedder, meta: dict) -> None:
    config = {
        "kind": "embedder",
        "n_identities": model.n_identities,
        "embed_dim": model.embed_dim,
        "crop": list(model.crop) if model.crop is not None else None,
    }
    ndio.save_checkpoint(path, config, tstate.module_arrays(model), meta)


def load_embedder(path: str) -> tuple[IdentityEmbedder, dict]:
    config, arrays, meta = ndio.load_checkpoint(path)
    if config.get("kind") != "embedder":
        raise ConfigError(f"{path} is not an embedder checkpoint")
    model = IdentityEmbedder(
        int(config["n_identities"]),
        int(config["embed_dim"]),
        crop=config.get("crop"),
    )
    tstate.load_module_arrays(model, arrays)
    model.eval()
    return model, meta


def embedder_accuracy(model: IdentityEmbedder, corpus: Corpus, split: str = "test") -> float:
    """Fraction of frames classified as their own identity."""
    was_training = model.training
    model.eval()
    correct = total = 0
    try:
        with torch.no_grad():
            for idx, _, clip in corpus.iter_clips(split):
                logits = model(frames_to_tensor(clip.frames))
                correct += int((logits.argmax(dim=1) == idx).sum())
                total += clip.frames.shape[0]
    finally:
        model.train(was_training)
    if total == 0:
        raise DataError(f"corpus has no {split!r} clips")
    return correct / total


# ---------------------------------------------------------------------------
# Swap losses


def loss_id(pred_embed: torch.Tensor, source_embed: torch.Tensor) -> torch.Tensor:
    """1 - cosine similarity of unit-norm embeddings; in [0, 2]."""
    if pred_embed.shape != source_embed.shape:
        raise DomainError("embedding shapes disagree")
    return (1.0 - (pred_embed * source_embed).sum(dim=-1)).mean()


def loss_feature_match(
    pred_feats: list[torch.Tensor], real_feats: list[torch.Tensor]
) -> torch.Tensor:
    """Mean L1 across discriminator taps; the real branch is held constant."""
    if len(pred_feats) != len(real_feats):
        raise DomainError("feature lists disagree in depth")
    terms = [(p - r.detach()).abs().mean() for p, r in zip(pred_feats, real_feats)]
    return torch.stack(terms).mean()


# ---------------------------------------------------------------------------
# Unified training


def train_unified(
    corpus: Corpus,
    embedder_path: str,
    out_path: str,
    config: GeneratorConfig = GeneratorConfig(),
    swap: SwapConfig = SwapConfig(),
    steps: int = 2000,
    batch_size: int = 8,
    lr: float = 1e-3,
    init_from: str | None = None,
    syncformer_path: str | None = None,
    pred_fraction: float = 0.5,
    adv_weight: float = 0.05,
    log_every: int = 50,
) -> str:
    """Joint lip-sync reconstruction and cross-identity swap training.

    Each batch mixes the two parts at ``swap.swap_fraction``. Reconstruction
    samples use the lower-half mask and pixel supervision; swap samples use
    the full-face mask with identity and feature-matching supervision, since
    no pixel ground truth exists for a swapped face. One discriminator sees
    everything. The embedder stays frozen; with a syncformer checkpoint the
    reconstruction overlays mix in cached stage-1 predictions.
    """
    torch.manual_seed(config.seed)
    torch.set_num_threads(1)
    rng = np.random.default_rng(config.seed + 57)

    if init_from is not None:
        stack, _, _ = load_generator(init_from)
        if stack.config != config:
            raise ConfigError("init checkpoint disagrees with the requested config")
        stack.train()
    else:
        stack = GeneratorStack(config)
    embedder, _ = load_embedder(embedder_path)
    for p in embedder.parameters():
        p.requires_grad_(False)
    taps = PerceptualTaps(config.perceptual_taps)

    opt_g = torch.optim.Adam(
        list(stack.encoder.parameters()) + list(stack.generator.parameters()),
        lr=lr,
        betas=(0.0, 0.99),
    )
    opt_d = torch.optim.Adam(stack.discriminator.parameters(), lr=lr, betas=(0.0, 0.99))

    train_clips = corpus.clip_entries("train")
    identities = sorted({idx for idx, _ in train_clips})
    if len(identities) < 2:
        raise DataError("swap training needs at least two identities")
    camera = corpus.camera()
    geometry = corpus.geometry()
    mask_a = make_mask(MASK_LOWER_HALF, geometry)
    mask_full = make_mask(MASK_FULL_FACE, geometry)

    predicted = (
        predict_train_displacements(corpus, syncformer_path) if syncformer_path else None
    )
    white_cache: dict[tuple, np.ndarray] = {}

    def white_for(idx: int, name: str, source: str, t: int, clip, profile) -> np.ndarray:
        key = (idx, name, source, t)
        if key not in white_cache:
            disp = clip.displacements[t] if source == "gt" else predicted[(idx, name)][t]
            mesh = apply_displacement(profile.template_mesh(), disp)
            white_cache[key] = render_white(
                mesh, clip.poses[t], camera, geometry.height, geometry.width
            ).astype(np.float32)
        return white_cache[key]

    def source_frame_for(identity: int) -> tuple[np.ndarray, int]:
        choices = [(i, e) for i, e in train_clips if i == identity]
        i, entry = choices[rng.integers(len(choices))]
        clip = corpus.load_clip(i, entry["name"])
        t = int(rng.integers(clip.frames.shape[0]))
        return clip.frames[t], t

    history: list[float] = []
    stack.train()
    h, w = geometry.height, geometry.width
    for step in range(steps):
        n_swap = int(sum(rng.random() < swap.swap_fraction for _ in range(batch_size)))
        n_rec = batch_size - n_swap

        # reconstruction part: overlay+ref pairs with pixel targets
        rec_inputs = np.empty((n_rec, 6, h, w), dtype=np.float32)
        rec_targets = np.empty((n_rec, h, w, 3), dtype=np.uint8)
        for b in range(n_rec):
            idx, entry = train_clips[rng.integers(len(train_clips))]
            clip = corpus.load_clip(idx, entry["name"])
            profile = corpus.identity(idx)
            num = clip.frames.shape[0]
            t = int(rng.integers(num))
            ref = select_reference(num, t, "train", rng)
            src = "pred" if (predicted is not None and rng.random() < pred_fraction) else "gt"
            white = white_for(idx, entry["name"], src, t, clip, profile)
            over = overlay(clip.frames[t], mask_a, white)
            rec_inputs[b] = CompositeInput(over, clip.frames[ref]).to_array()
            rec_targets[b] = clip.frames[t]

        # swap part: identity pass and structure pass inputs per sample
        swap_id_inputs = np.empty((n_swap, 6, h, w), dtype=np.float32)
        swap_struct_inputs = np.empty((n_swap, 6, h, w), dtype=np.float32)
        swap_source_frames = np.empty((n_swap, h, w, 3), dtype=np.uint8)
        swap_target_frames = np.empty((n_swap, h, w, 3), dtype=np.uint8)
        for b in range(n_swap):
            idx, entry = train_clips[rng.integers(len(train_clips))]
            clip = corpus.load_clip(idx, entry["name"])
            profile = corpus.identity(idx)
            num = clip.frames.shape[0]
            t = int(rng.integers(num))
            others = [i for i in identities if i != idx]
            source_id = int(others[rng.integers(len(others))])
            src_frame, _ = source_frame_for(source_id)
            white = white_for(idx, entry["name"], "gt", t, clip, profile)
            over = build_swap_overlay(clip.frames[t], mask_full, white)
            ref = select_reference(num, t, "train", rng)
            swap_id_inputs[b] = CompositeInput(over, src_frame).to_array()
            swap_struct_inputs[b] = CompositeInput(over, clip.frames[ref]).to_array()
            swap_source_frames[b] = src_frame
            swap_target_frames[b] = clip.frames[t]

        fakes = []
        g_loss = torch.zeros(())
        rec_real = None
        if n_rec:
            rec_real = frames_to_tensor(rec_targets)
            rec_pred = stack.generator(stack.encoder(torch.from_numpy(rec_inputs)))
            g_loss = g_loss + (n_rec / batch_size) * loss_rec(
                rec_pred, rec_real, taps, config.lambda_perceptual
            )
            fakes.append(rec_pred)
        if n_swap:
            bundle_id = stack.encoder(torch.from_numpy(swap_id_inputs))
            bundle_struct = stack.encoder(torch.from_numpy(swap_struct_inputs))
            swap_pred = stack.generator(
                FeatureBundle(f_f=bundle_id.f_f, maps=bundle_struct.maps)
            )
            src_embed = embedder.embed(frames_to_tensor(swap_source_frames))
            pred_embed = embedder.embed(swap_pred)
            target_real = frames_to_tensor(swap_target_frames)
            _, pred_feats = stack.discriminator(swap_pred)
            _, real_feats = stack.discriminator(target_real)
            g_loss = g_loss + (n_swap / batch_size) * (
                swap.id_weight * loss_id(pred_embed, src_embed.detach())
                + swap.fm_weight * loss_feature_match(pred_feats, real_feats)
            )
            fakes.append(swap_pred)

        real_frames = np.concatenate(
            [arr for arr in (rec_targets if n_rec else None, swap_target_frames if n_swap else None)
             if arr is not None]
        )
        real = frames_to_tensor(real_frames)
        fake = torch.cat(fakes)
        fake_logits, _ = stack.discriminator(fake)
        real_logits, _ = stack.discriminator(real)
        g_loss = g_loss + adv_weight * loss_adv_generator(fake_logits, real_logits)
        opt_g.zero_grad(set_to_none=True)
        g_loss.backward()
        opt_g.step()

        fake_logits, _ = stack.discriminator(fake.detach())
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

    meta = {
        "step": steps,
        "loss_history": history,
        "unified": True,
        "swap": swap.to_dict(),
        "adv_weight": adv_weight,
        "embedder": ndio.sha256_file(embedder_path),
        "syncformer": ndio.sha256_file(syncformer_path) if syncformer_path else None,
        "init_from": ndio.sha256_file(init_from) if init_from else None,
    }
    save_generator(out_path, stack, meta, opt_g=opt_g, opt_d=opt_d)
    return out_path


# ---------------------------------------------------------------------------
# Inference


def swap_infer(
    stack: GeneratorStack,
    corpus: Corpus,
    target_identity: int,
    target_clip: str,
    source_identity: int,
    syncformer_path: str | None = None,
    transfer_template: bool = True,
    transfer_style: bool = True,
) -> np.ndarray:
    """Render the target clip with the source identity's appearance.

    The mesh track driving the overlay is the target's own unless a
    syncformer checkpoint is given, in which case stage one re-predicts the
    track from the target's audio, optionally on the source's template and
    with the source's style window (both transfers on by default). Returns
    uint8 frames [T, H, W, 3].
    """
    clip = corpus.load_clip(target_identity, target_clip)
    target_profile = corpus.identity(target_identity)
    source_profile = corpus.identity(source_identity)
    camera = corpus.camera()
    geometry = corpus.geometry()
    mask_full = make_mask(MASK_FULL_FACE, geometry)

    if syncformer_path is not None:
        from .syncformer import default_style_window, load_syncformer

        model, _, _ = load_syncformer(syncformer_path)
        style_id = source_identity if transfer_style else target_identity
        style = default_style_window(corpus, style_id, model.config.style_window)
        pred = model.infer_autoregressive(
            torch.from_numpy(clip.audio_features), torch.from_numpy(style)
        )
        disp = pred.numpy().reshape(-1, corpus.config.vertex_count, 3).astype(np.float32)
        template = (
            source_profile.template_mesh() if transfer_template else target_profile.template_mesh()
        )
    else:
        disp = clip.displacements
        template = target_profile.template_mesh()

    source_clips = corpus.clip_entries("train")
    mine = [(i, e) for i, e in source_clips if i == source_identity]
    if not mine:
        raise DataError(f"identity {source_identity} has no train clips for a source frame")
    source_frame = corpus.load_clip(mine[0][0], mine[0][1]["name"]).frames[0]

    frames_out = np.empty_like(clip.frames)
    was_training = stack.training
    stack.eval()
    try:
        with torch.no_grad():
            for t in range(clip.frames.shape[0]):
                mesh = apply_displacement(template, disp[t])
                white = render_white(
                    mesh, clip.poses[t], camera, geometry.height, geometry.width
                )
                over = build_swap_overlay(clip.frames[t], mask_full, white)
                ref = select_reference(clip.frames.shape[0], t, "cross_id")
                bundle = encode_swap(stack.encoder, over, source_frame, clip.frames[ref])
                out = stack.generator(bundle)
                frames_out[t] = tensor_to_frames(out)[0]
    finally:
        stack.train(was_training)
    return frames_out
