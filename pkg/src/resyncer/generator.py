"""Mesh-conditioned frame synthesis.

A strided convolutional encoder reads the stacked (overlay, reference) frame
pair and emits a feature bundle: one global code plus one feature map per
resolution stage. The synthesis stack is style-based, but rewired: the global
code plays the role of the style vector at every layer (there is no mapping
network), and the encoder's per-stage maps are added in the slots where a
stochastic generator would inject noise. Nothing here draws randomness at
inference; the output is a deterministic function of the input pair.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import ndio, tstate
from .config import GeneratorConfig
from .errors import ConfigError, DataError, DomainError
from .mesh import MASK_LOWER_HALF, CompositeInput, Mask, apply_displacement, make_mask, overlay
from .synthdata import Corpus, render_white

__all__ = [
    "FeatureBundle",
    "ReferenceEncoder",
    "MeshGenerator",
    "FrameDiscriminator",
    "GeneratorStack",
    "PerceptualTaps",
    "loss_rec",
    "loss_adv_generator",
    "loss_adv_discriminator",
    "r1_penalty",
    "select_reference",
    "white_overlay_frame",
    "generate",
    "frames_to_tensor",
    "tensor_to_frames",
    "train_generator",
    "save_generator",
    "load_generator",
]


@dataclass
class FeatureBundle:
    """Encoder output: global code [B, w_dim] plus one map per stage.

    ``maps[i]`` has shape [B, channels[i], r, r] with r doubling from the
    base resolution, so maps[0] conditions the 4x4 stage and maps[-1] the
    full-resolution stage.
    """

    f_f: torch.Tensor
    maps: tuple[torch.Tensor, ...]


class ReferenceEncoder(nn.Module):
    """Strided pyramid over the 6-channel input pair with a tap per stage."""

    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.config = config
        chans = list(reversed(config.channels))  # finest resolution first
        self.stem = nn.Conv2d(6, chans[0], 3, padding=1)
        self.downs = nn.ModuleList(
            nn.Conv2d(c_in, c_out, 3, stride=2, padding=1)
            for c_in, c_out in zip(chans[:-1], chans[1:])
        )
        self.taps = nn.ModuleList(nn.Conv2d(c, c, 3, padding=1) for c in chans)
        base = config.base_resolution
        self.head = nn.Linear(config.channels[0] * base * base, config.w_dim)

    def forward(self, x: torch.Tensor) -> FeatureBundle:
        if x.ndim != 4 or x.shape[1] != 6:
            raise DomainError(f"encoder expects [B, 6, H, W], got {tuple(x.shape)}")
        feats = []
        h = F.leaky_relu(self.stem(x), 0.2)
        feats.append(self.taps[0](h))
        for i, down in enumerate(self.downs):
            h = F.leaky_relu(down(h), 0.2)
            feats.append(self.taps[i + 1](h))
        f_f = self.head(h.flatten(1))
        return FeatureBundle(f_f=f_f, maps=tuple(reversed(feats)))


class ModulatedConv2d(nn.Module):
    """3x3 convolution whose weights are modulated per sample by a style code.

    Per-input-channel scales come from an affine on the style vector; the
    combined weight is demodulated back to unit fan-in norm.
    """

    def __init__(self, in_ch: int, out_ch: int, w_dim: int):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_ch, in_ch, 3, 3) / math.sqrt(in_ch * 9))
        self.bias = nn.Parameter(torch.zeros(out_ch))
        self.affine = nn.Linear(w_dim, in_ch)
        nn.init.zeros_(self.affine.weight)
        nn.init.ones_(self.affine.bias)

    def forward(self, x: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
        # modulate/demodulate as input and output scalings around one shared
        # conv; algebraically identical to building per-sample kernels
        styles = self.affine(w)  # [B, in]
        demod = torch.rsqrt(
            torch.einsum("oi,bi->bo", self.weight.pow(2).sum(dim=(2, 3)), styles.pow(2))
            + 1e-8
        )
        out = F.conv2d(x * styles[:, :, None, None], self.weight, padding=1)
        return out * demod[:, :, None, None] + self.bias[None, :, None, None]


class SynthesisStage(nn.Module):
    """Two modulated convs at one resolution; the stage's encoder map is
    added after each conv with its own learned strength."""

    def __init__(self, in_ch: int, out_ch: int, w_dim: int, upsample: bool):
        super().__init__()
        self.upsample = upsample
        self.conv1 = ModulatedConv2d(in_ch, out_ch, w_dim)
        self.conv2 = ModulatedConv2d(out_ch, out_ch, w_dim)
        self.gain1 = nn.Parameter(torch.ones(()))
        self.gain2 = nn.Parameter(torch.ones(()))

    def forward(self, x: torch.Tensor, w: torch.Tensor, feat: torch.Tensor) -> torch.Tensor:
        if self.upsample:
            x = F.interpolate(x, scale_factor=2, mode="nearest")
        x = F.leaky_relu(self.conv1(x, w) + self.gain1 * feat, 0.2)
        x = F.leaky_relu(self.conv2(x, w) + self.gain2 * feat, 0.2)
        return x


class MeshGenerator(nn.Module):
    """Style-based synthesis stack fed entirely from a feature bundle."""

    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.config = config
        chans = config.channels
        base = config.base_resolution
        self.constant = nn.Parameter(torch.randn(chans[0], base, base))
        stages = [SynthesisStage(chans[0], chans[0], config.w_dim, upsample=False)]
        for c_in, c_out in zip(chans[:-1], chans[1:]):
            stages.append(SynthesisStage(c_in, c_out, config.w_dim, upsample=True))
        self.stages = nn.ModuleList(stages)
        self.to_rgb = nn.Conv2d(chans[-1], 3, 1)

    def forward(self, bundle: FeatureBundle) -> torch.Tensor:
        if len(bundle.maps) != len(self.stages):
            raise DomainError(
                f"bundle has {len(bundle.maps)} maps, generator has {len(self.stages)} stages"
            )
        b = bundle.f_f.shape[0]
        x = self.constant[None].expand(b, -1, -1, -1)
        for stage, feat in zip(self.stages, bundle.maps):
            x = stage(x, bundle.f_f, feat)
        return torch.tanh(self.to_rgb(x))


class FrameDiscriminator(nn.Module):
    """Mirror pyramid over single frames; exposes per-stage features."""

    def __init__(self, config: GeneratorConfig):
        super().__init__()
        chans = list(reversed(config.channels))
        self.stem = nn.Conv2d(3, chans[0], 3, padding=1)
        self.downs = nn.ModuleList(
            nn.Conv2d(c_in, c_out, 3, stride=2, padding=1)
            for c_in, c_out in zip(chans[:-1], chans[1:])
        )
        base = config.base_resolution
        self.head = nn.Linear(config.channels[0] * base * base, 1)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        feats = []
        h = F.leaky_relu(self.stem(x), 0.2)
        feats.append(h)
        for down in self.downs:
            h = F.leaky_relu(down(h), 0.2)
            feats.append(h)
        return self.head(h.flatten(1)), feats


class GeneratorStack(nn.Module):
    """Encoder + generator + discriminator under one parameter namespace."""

    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.config = config
        self.encoder = ReferenceEncoder(config)
        self.generator = MeshGenerator(config)
        self.discriminator = FrameDiscriminator(config)


class PerceptualTaps(nn.Module):
    """Frozen random-weight conv stack; its tap activations define a cheap
    feature distance. Weights depend only on the seed and are never trained."""

    def __init__(self, n_taps: int = 3, seed: int = 911):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        chans = [3, 16, 32, 64][: n_taps + 1]
        convs = []
        for c_in, c_out in zip(chans[:-1], chans[1:]):
            conv = nn.Conv2d(c_in, c_out, 3, stride=2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(
                    torch.randn(conv.weight.shape, generator=gen) / math.sqrt(c_in * 9)
                )
                conv.bias.zero_()
            convs.append(conv)
        self.convs = nn.ModuleList(convs)
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        taps = []
        h = x
        for conv in self.convs:
            h = F.leaky_relu(conv(h), 0.2)
            taps.append(h)
        return taps


def loss_rec(
    pred: torch.Tensor,
    target: torch.Tensor,
    taps: PerceptualTaps,
    lambda_perceptual: float,
) -> torch.Tensor:
    """L1 plus a weighted mean L1 over frozen perceptual tap activations."""
    if pred.shape != target.shape:
        raise DomainError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    pixel = (pred - target).abs().mean()
    tp, tt = taps(pred), taps(target)
    perc = torch.stack([(a - b).abs().mean() for a, b in zip(tp, tt)]).mean()
    return pixel + lambda_perceptual * perc


def loss_adv_generator(fake_logits: torch.Tensor, real_logits: torch.Tensor) -> torch.Tensor:
    """Non-saturating softplus form; the real term is constant w.r.t. the
    generator and only keeps the value comparable with the discriminator's."""
    return F.softplus(-fake_logits).mean() + F.softplus(real_logits.detach()).mean()


def loss_adv_discriminator(fake_logits: torch.Tensor, real_logits: torch.Tensor) -> torch.Tensor:
    return F.softplus(fake_logits).mean() + F.softplus(-real_logits).mean()


def r1_penalty(discriminator: FrameDiscriminator, real: torch.Tensor) -> torch.Tensor:
    """Squared gradient norm of the real logits w.r.t. the input image."""
    real = real.detach().requires_grad_(True)
    logits, _ = discriminator(real)
    (grad,) = torch.autograd.grad(logits.sum(), real, create_graph=True)
    return grad.pow(2).sum(dim=(1, 2, 3)).mean()


def select_reference(
    num_frames: int, t: int, mode: str, rng: np.random.Generator | None = None
) -> int:
    """Pick the reference frame index for target index t.

    train: uniform over the 61-frame window around t, excluding t itself.
    same_id_eval: deterministic far offset (t + 75) mod T.
    cross_id: frame t, so the pair is time-aligned across identities.
    """
    if num_frames < 1 or not (0 <= t < num_frames):
        raise DomainError(f"frame index {t} outside clip of length {num_frames}")
    if mode == "train":
        if rng is None:
            raise DomainError("train mode needs an rng")
        lo, hi = max(0, t - 30), min(num_frames, t + 31)
        candidates = [i for i in range(lo, hi) if i != t]
        if not candidates:
            raise DomainError("no admissible reference frame")
        return int(candidates[rng.integers(len(candidates))])
    if mode == "same_id_eval":
        return (t + 75) % num_frames
    if mode == "cross_id":
        return t
    raise DomainError(f"unknown reference policy {mode!r}")


def white_overlay_frame(
    frame: np.ndarray,
    mask: Mask,
    mesh,
    pose: np.ndarray,
    camera,
) -> np.ndarray:
    """Masked region of the frame replaced by the white-mesh render."""
    white = render_white(mesh, pose, camera, frame.shape[0], frame.shape[1])
    return overlay(frame, mask, white)


def generate(stack: GeneratorStack, inputs: torch.Tensor) -> torch.Tensor:
    """Deterministic batch synthesis: [B, 6, H, W] -> [B, 3, H, W] in [-1, 1]."""
    was_training = stack.training
    stack.eval()
    try:
        with torch.no_grad():
            out = stack.generator(stack.encoder(inputs))
    finally:
        stack.train(was_training)
    return out


def frames_to_tensor(frames: np.ndarray) -> torch.Tensor:
    """uint8 [B, H, W, 3] -> float [-1, 1] [B, 3, H, W]."""
    arr = frames.astype(np.float32) / 127.5 - 1.0
    return torch.from_numpy(arr.transpose(0, 3, 1, 2))


def tensor_to_frames(t: torch.Tensor) -> np.ndarray:
    """float [-1, 1] [B, 3, H, W] -> uint8 [B, H, W, 3], round half away."""
    arr = t.detach().cpu().numpy().transpose(0, 2, 3, 1)
    arr = np.clip((arr + 1.0) * 127.5, 0.0, 255.0)
    return np.floor(arr + 0.5).astype(np.uint8)


# ---------------------------------------------------------------------------
# Training


def predict_train_displacements(
    corpus: Corpus, syncformer_path: str | Path
) -> dict[tuple[int, str], np.ndarray]:
    """Stage-1 displacement tracks for every training clip, [T, V, 3] each."""
    from .syncformer import default_style_window, load_syncformer

    model, _, _ = load_syncformer(str(syncformer_path))
    v = model.config.vertex_count
    out: dict[tuple[int, str], np.ndarray] = {}
    for idx, name, clip in corpus.iter_clips("train"):
        style = default_style_window(corpus, idx, model.config.style_window)
        pred = model.infer_autoregressive(
            torch.from_numpy(clip.audio_features), torch.from_numpy(style)
        )
        out[(idx, name)] = pred.numpy().reshape(-1, v, 3).astype(np.float32)
    return out


def train_generator(
    corpus: Corpus,
    out_path: str | Path,
    config: GeneratorConfig = GeneratorConfig(),
    steps: int = 2000,
    batch_size: int = 8,
    lr: float = 1e-3,
    warmup_steps: int | None = None,
    pred_fraction: float = 0.5,
    syncformer_path: str | Path | None = None,
    adv_weight: float = 0.05,
    resume: str | Path | None = None,
    log_every: int = 50,
) -> str:
    """Adversarial reconstruction training on mesh-overlay inputs.

    Until ``warmup_steps`` every overlay comes from ground-truth meshes;
    afterwards ``pred_fraction`` of samples per batch use cached stage-1
    predictions instead, so the generator also sees the overlay statistics
    it will meet at inference. Without a syncformer checkpoint the mixing
    phase is skipped and training stays on ground truth throughout.
    """
    if warmup_steps is None:
        warmup_steps = steps // 2
    if not 0.0 <= pred_fraction <= 1.0:
        raise ConfigError(f"pred_fraction must be in [0, 1], got {pred_fraction}")
    torch.manual_seed(config.seed)
    torch.set_num_threads(1)
    rng = np.random.default_rng(config.seed + 31)

    stack = GeneratorStack(config)
    taps = PerceptualTaps(config.perceptual_taps)
    opt_g = torch.optim.Adam(
        list(stack.encoder.parameters()) + list(stack.generator.parameters()),
        lr=lr,
        betas=(0.0, 0.99),
    )
    opt_d = torch.optim.Adam(stack.discriminator.parameters(), lr=lr, betas=(0.0, 0.99))

    start_step = 0
    history: list[float] = []
    if resume is not None:
        stack, meta, arrays = load_generator(resume)
        if stack.config != config:
            raise ConfigError("resume checkpoint disagrees with the requested config")
        start_step = int(meta["step"])
        history = list(meta.get("loss_history", []))
        opt_g = torch.optim.Adam(
            list(stack.encoder.parameters()) + list(stack.generator.parameters()),
            lr=lr,
            betas=(0.0, 0.99),
        )
        opt_d = torch.optim.Adam(stack.discriminator.parameters(), lr=lr, betas=(0.0, 0.99))
        tstate.load_adam_arrays(opt_g, stack, arrays, start_step)
        tstate.load_adam_arrays(opt_d, stack, arrays, start_step)

    train_clips = corpus.clip_entries("train")
    if not train_clips:
        raise DataError("corpus has no training clips")
    camera = corpus.camera()
    geometry = corpus.geometry()
    mask = make_mask(MASK_LOWER_HALF, geometry)

    predicted: dict[tuple[int, str], np.ndarray] | None = None
    white_cache: dict[tuple[int, str, str, int], np.ndarray] = {}

    def white_for(idx: int, name: str, source: str, t: int, clip, profile) -> np.ndarray:
        key = (idx, name, source, t)
        if key not in white_cache:
            disp = clip.displacements[t] if source == "gt" else predicted[(idx, name)][t]
            mesh = apply_displacement(profile.template_mesh(), disp)
            white_cache[key] = render_white(
                mesh, clip.poses[t], camera, geometry.height, geometry.width
            ).astype(np.float32)
        return white_cache[key]

    stack.train()
    for step in range(start_step, steps):
        mixing = step >= warmup_steps and syncformer_path is not None
        if mixing and predicted is None:
            predicted = predict_train_displacements(corpus, syncformer_path)

        inputs = np.empty((batch_size, 6, geometry.height, geometry.width), dtype=np.float32)
        targets = np.empty((batch_size, geometry.height, geometry.width, 3), dtype=np.uint8)
        for b in range(batch_size):
            idx, entry = train_clips[rng.integers(len(train_clips))]
            clip = corpus.load_clip(idx, entry["name"])
            profile = corpus.identity(idx)
            num = clip.frames.shape[0]
            t = int(rng.integers(num))
            ref = select_reference(num, t, "train", rng)
            source = "pred" if (mixing and rng.random() < pred_fraction) else "gt"
            white = white_for(idx, entry["name"], source, t, clip, profile)
            over = overlay(clip.frames[t], mask, white)
            inputs[b] = CompositeInput(over, clip.frames[ref]).to_array()
            targets[b] = clip.frames[t]

        x = torch.from_numpy(inputs)
        real = frames_to_tensor(targets)

        # generator step
        pred = stack.generator(stack.encoder(x))
        fake_logits, _ = stack.discriminator(pred)
        real_logits, _ = stack.discriminator(real)
        g_loss = loss_rec(pred, real, taps, config.lambda_perceptual)
        g_loss = g_loss + adv_weight * loss_adv_generator(fake_logits, real_logits)
        opt_g.zero_grad(set_to_none=True)
        g_loss.backward()
        opt_g.step()

        # discriminator step, with the lazy gradient penalty on its schedule
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

    meta = {
        "step": steps,
        "loss_history": history,
        "warmup_steps": warmup_steps,
        "pred_fraction": pred_fraction if syncformer_path is not None else 0.0,
        "adv_weight": adv_weight,
        "syncformer": ndio.sha256_file(syncformer_path) if syncformer_path else None,
    }
    save_generator(str(out_path), stack, meta, opt_g=opt_g, opt_d=opt_d)
    return str(out_path)


def save_generator(
    path: str,
    stack: GeneratorStack,
    meta: dict,
    opt_g: torch.optim.Adam | None = None,
    opt_d: torch.optim.Adam | None = None,
) -> None:
    arrays = tstate.module_arrays(stack)
    if opt_g is not None:
        arrays.update(tstate.adam_arrays(opt_g, stack))
    if opt_d is not None:
        arrays.update(tstate.adam_arrays(opt_d, stack))
    config = {"kind": "generator", "model": stack.config.to_dict()}
    ndio.save_checkpoint(path, config, arrays, meta)


def load_generator(path: str | Path) -> tuple[GeneratorStack, dict, dict]:
    """Returns (stack, meta, raw arrays); arrays retained for optimizer resume."""
    config, arrays, meta = ndio.load_checkpoint(str(path))
    if config.get("kind") != "generator":
        raise ConfigError(f"{path} is not a generator checkpoint")
    stack = GeneratorStack(GeneratorConfig.from_dict(config["model"]))
    tstate.load_module_arrays(stack, arrays)
    stack.eval()
    return stack, meta, arrays
