"""Audio-to-displacement transformer with style injection.

One causal encoder block over audio tokens, one causal decoder block over
mesh tokens. Mesh tokens get a periodic positional encoding plus a style
vector pooled from a window of the target person's past displacements; the
decoder's self-attention carries a per-head linear recency bias. Trained
with teacher forcing, run autoregressively from a zero start token.

Everything is strictly causal: perturbing audio or displacement inputs at
times after t cannot change the prediction at t, bit for bit.
"""

from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn

from . import ndio, tstate
from .config import CorpusConfig, SyncFormerConfig
from .errors import ConfigError, DomainError
from .synthdata import Corpus

__all__ = [
    "periodic_positional_encoding",
    "alibi_slopes",
    "biased_causal_mask",
    "StyleSyncFormer",
    "loss_3d",
    "train_syncformer",
    "save_syncformer",
    "load_syncformer",
    "default_style_window",
]


def periodic_positional_encoding(length: int, dim: int, period: int) -> torch.Tensor:
    """Sinusoidal encoding of (t mod period): repeats exactly every period."""
    pos = torch.arange(length, dtype=torch.float32) % period
    half = torch.arange(dim // 2, dtype=torch.float32)
    freq = torch.exp(-math.log(10000.0) * 2.0 * half / dim)
    ang = pos[:, None] * freq[None, :]
    enc = torch.zeros(length, dim)
    enc[:, 0::2] = torch.sin(ang)
    enc[:, 1::2] = torch.cos(ang)
    return enc


def alibi_slopes(n_heads: int) -> torch.Tensor:
    """Geometric per-head recency slopes: 2^-2, 2^-4, ..."""
    return torch.tensor([2.0 ** (-2.0 * (h + 1)) for h in range(n_heads)])


def biased_causal_mask(n_heads: int, q_len: int, k_len: int) -> torch.Tensor:
    """[heads, q_len, k_len] additive attention bias.

    Entry (h, i, j) is -slope_h * (i - j) for j <= i and -inf for j > i, so
    each head prefers recent positions at its own decay rate and the future
    is unreachable.
    """
    slopes = alibi_slopes(n_heads)
    qi = torch.arange(q_len, dtype=torch.float32)[:, None]
    kj = torch.arange(k_len, dtype=torch.float32)[None, :]
    dist = qi - kj
    bias = -slopes[:, None, None] * dist[None]
    return bias.masked_fill(dist[None] < 0, float("-inf"))


class BiasedAttention(nn.Module):
    """Multi-head attention with an additive [heads, Tq, Tk] bias."""

    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        if dim % n_heads:
            raise ConfigError("attention dim must divide evenly across heads")
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def forward(self, query: torch.Tensor, memory: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
        b, tq, d = query.shape
        tk = memory.shape[1]
        h, hd = self.n_heads, self.head_dim
        q = self.q_proj(query).view(b, tq, h, hd).transpose(1, 2)
        k = self.k_proj(memory).view(b, tk, h, hd).transpose(1, 2)
        v = self.v_proj(memory).view(b, tk, h, hd).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(hd) + bias[None]
        attn = torch.softmax(scores, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, tq, d)
        return self.out_proj(out)


class FeedForward(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class CausalEncoderBlock(nn.Module):
    """Pre-norm self-attention + FFN block with the recency-biased causal mask."""

    def __init__(self, dim: int, n_heads: int, ffn_dim: int):
        super().__init__()
        self.attn = BiasedAttention(dim, n_heads)
        self.ffn = FeedForward(dim, ffn_dim)
        self.norm1 = nn.LayerNorm(dim)
        self.norm2 = nn.LayerNorm(dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        n = self.norm1(x)
        x = x + self.attn(n, n, biased_causal_mask(self.attn.n_heads, x.shape[1], x.shape[1]).to(x.dtype))
        return x + self.ffn(self.norm2(x))


class CausalDecoderBlock(nn.Module):
    """Self-attention over mesh tokens, cross-attention to audio, FFN."""

    def __init__(self, dim: int, n_heads: int, ffn_dim: int):
        super().__init__()
        self.self_attn = BiasedAttention(dim, n_heads)
        self.cross_attn = BiasedAttention(dim, n_heads)
        self.ffn = FeedForward(dim, ffn_dim)
        self.norm1 = nn.LayerNorm(dim)
        self.norm2 = nn.LayerNorm(dim)
        self.norm3 = nn.LayerNorm(dim)

    def forward(self, x: torch.Tensor, audio: torch.Tensor) -> torch.Tensor:
        h = self.self_attn.n_heads
        n = self.norm1(x)
        x = x + self.self_attn(n, n, biased_causal_mask(h, x.shape[1], x.shape[1]).to(x.dtype))
        # query t may read audio tokens 0..t only
        cross_bias = biased_causal_mask(h, x.shape[1], audio.shape[1]).to(x.dtype)
        x = x + self.cross_attn(self.norm2(x), audio, cross_bias)
        return x + self.ffn(self.norm3(x))


class StyleSyncFormer(nn.Module):
    """Style-injected autoregressive displacement predictor."""

    def __init__(self, config: SyncFormerConfig):
        super().__init__()
        self.config = config
        d = config.token_dim
        flat = 3 * config.vertex_count
        self.audio_proj = nn.Linear(config.audio_dim, d)
        self.encoder = CausalEncoderBlock(d, config.n_heads, config.ffn_dim)
        self.mesh_proj = nn.Linear(flat, d)
        # style encoder sees each window frame with its temporal difference
        self.style_in = nn.Linear(2 * flat, d)
        self.style_mlp = FeedForward(d, d)
        self.style_out = nn.Linear(d, d)
        self.decoder = CausalDecoderBlock(d, config.n_heads, config.ffn_dim)
        self.head = nn.Linear(d, flat)

    # -- pieces ------------------------------------------------------------

    def encode_audio(self, audio: torch.Tensor) -> torch.Tensor:
        if audio.shape[-1] != self.config.audio_dim:
            raise DomainError(
                f"audio dim {audio.shape[-1]} != configured {self.config.audio_dim}"
            )
        return self.encoder(self.audio_proj(audio))

    def encode_style(self, window: torch.Tensor) -> torch.Tensor:
        """[B, S, 3V] displacement window -> [B, token_dim] style vector.

        Windows shorter than the configured length are padded by repeating
        the first frame at the front. Pooling is a mean over time.
        """
        flat = 3 * self.config.vertex_count
        if window.ndim != 3 or window.shape[-1] != flat:
            raise DomainError(f"style window must be [B, S, {flat}]")
        s_len = self.config.style_window
        if window.shape[1] < s_len:
            pad = window[:, :1].expand(-1, s_len - window.shape[1], -1)
            window = torch.cat([pad, window], dim=1)
        elif window.shape[1] > s_len:
            window = window[:, :s_len]
        vel = window - torch.cat([window[:, :1], window[:, :-1]], dim=1)
        feats = self.style_in(torch.cat([window, vel], dim=-1))
        feats = feats + self.style_mlp(feats)
        return self.style_out(feats.mean(dim=1))

    def _decode(
        self, shifted: torch.Tensor, audio_mem: torch.Tensor, style: torch.Tensor
    ) -> torch.Tensor:
        t = shifted.shape[1]
        if t > self.config.max_seq:
            raise DomainError(f"sequence length {t} exceeds max_seq {self.config.max_seq}")
        ppe = periodic_positional_encoding(t, self.config.token_dim, self.config.ppe_period)
        tokens = self.mesh_proj(shifted) + ppe.to(shifted.dtype)[None] + style[:, None, :]
        return self.head(self.decoder(tokens, audio_mem))

    # -- training / inference ----------------------------------------------

    def forward_teacher_forced(
        self, audio: torch.Tensor, target: torch.Tensor, style_window: torch.Tensor
    ) -> torch.Tensor:
        """Predict displacements [B, T, 3V] from ground-truth shifted inputs."""
        if audio.shape[:2] != target.shape[:2]:
            raise DomainError("audio and target lengths disagree")
        shifted = torch.cat([torch.zeros_like(target[:, :1]), target[:, :-1]], dim=1)
        style = self.encode_style(style_window)
        return self._decode(shifted, self.encode_audio(audio), style)

    @torch.no_grad()
    def infer_autoregressive(
        self, audio: torch.Tensor, style_window: torch.Tensor
    ) -> torch.Tensor:
        """[T, D_a] audio + [S, 3V] style window -> [T, 3V] displacements.

        Starts from the zero token and feeds back its own predictions.
        """
        was_training = self.training
        self.eval()
        try:
            t_len = audio.shape[0]
            if t_len < 1:
                raise DomainError("cannot infer on an empty audio sequence")
            flat = 3 * self.config.vertex_count
            audio_mem = self.encode_audio(audio[None])
            style = self.encode_style(style_window[None])
            shifted = torch.zeros(1, 1, flat, dtype=audio.dtype)
            preds = []
            for t in range(t_len):
                out = self._decode(shifted, audio_mem[:, : t + 1], style)
                step = out[:, -1]
                preds.append(step[0])
                if t + 1 < t_len:
                    shifted = torch.cat([shifted, step[:, None]], dim=1)
            return torch.stack(preds)
        finally:
            self.train(was_training)

    @torch.no_grad()
    def transfer_style(
        self, audio: torch.Tensor, style_window_from_other: torch.Tensor
    ) -> torch.Tensor:
        """Same machinery, swapped style window; provided for readable call sites."""
        return self.infer_autoregressive(audio, style_window_from_other)


def loss_3d(
    pred: torch.Tensor, target: torch.Tensor, lambda_point: float = 1.0
) -> torch.Tensor:
    """Per-frame L2 norms: velocity-difference term plus weighted position term.

    Both terms sum over the frames of the window (the velocity term starts
    at the second frame) and average over the batch.
    """
    if pred.shape != target.shape:
        raise DomainError(f"pred shape {tuple(pred.shape)} != target {tuple(target.shape)}")
    pv = pred[:, 1:] - pred[:, :-1]
    tv = target[:, 1:] - target[:, :-1]
    vel = (pv - tv).norm(dim=-1).sum(dim=1)
    pos = (pred - target).norm(dim=-1).sum(dim=1)
    return (vel + lambda_point * pos).mean()


# ---------------------------------------------------------------------------
# Training


def _flat_disp(disp: np.ndarray) -> np.ndarray:
    return disp.reshape(disp.shape[0], -1).astype(np.float32)


def sample_style_window(
    rng: np.random.Generator,
    corpus: Corpus,
    identity_index: int,
    window: int,
    exclude: tuple[str, tuple[int, int]] | None = None,
) -> np.ndarray:
    """A [S, 3V] displacement window of this identity, train split only.

    ``exclude`` = (clip_name, (t0, t1)) forbids overlap with a target crop
    taken from the same clip.
    """
    candidates = [
        (name, clip)
        for idx, name, clip in corpus.iter_clips("train")
        if idx == identity_index
    ]
    if not candidates:
        raise DomainError(f"identity {identity_index} has no train clips")
    for _ in range(64):
        name, clip = candidates[rng.integers(len(candidates))]
        t_max = clip.length - window
        if t_max < 0:
            continue
        start = int(rng.integers(t_max + 1))
        if exclude is not None and name == exclude[0]:
            t0, t1 = exclude[1]
            if start < t1 and t0 < start + window:
                continue
        return _flat_disp(clip.displacements[start : start + window])
    raise DomainError("could not sample a disjoint style window")


def default_style_window(corpus: Corpus, identity_index: int, window: int) -> np.ndarray:
    """Deterministic eval-time window: head of the identity's first train clip."""
    for idx, _, clip in corpus.iter_clips("train"):
        if idx == identity_index:
            return _flat_disp(clip.displacements[:window])
    raise DomainError(f"identity {identity_index} has no train clips")


def save_syncformer(
    path: str, model: StyleSyncFormer, meta: dict, optimizer: torch.optim.Adam | None = None
) -> None:
    arrays = tstate.module_arrays(model)
    if optimizer is not None:
        arrays.update(tstate.adam_arrays(optimizer, model))
    config = {"kind": "syncformer", "model": model.config.to_dict()}
    ndio.save_checkpoint(path, config, arrays, meta)


def load_syncformer(path: str) -> tuple[StyleSyncFormer, dict, dict]:
    """Returns (model, meta, raw arrays); arrays retained for optimizer resume."""
    config, arrays, meta = ndio.load_checkpoint(path)
    if config.get("kind") != "syncformer":
        raise ConfigError(f"{path} is not a syncformer checkpoint")
    model = StyleSyncFormer(SyncFormerConfig.from_dict(config["model"]))
    tstate.load_module_arrays(model, arrays)
    return model, meta, arrays


def _cosine_lr(i: int, total: int, lr_max: float, lr_min: float) -> float:
    if total <= 1:
        return lr_min
    frac = i / (total - 1)
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * frac))


def train_syncformer(
    corpus: Corpus,
    config: SyncFormerConfig,
    steps: int,
    out_path: str,
    batch_size: int = 8,
    lr: float = 1e-3,
    lr_min: float = 1e-5,
    context_noise: float = 0.003,
    resume: str | None = None,
    log_every: int = 25,
) -> str:
    """Teacher-forced training on random crops.

    Adam with a cosine-decayed rate over this run's steps; the decay phase
    is what pushes the displacement regression to its precision floor.
    ``context_noise`` perturbs the shifted ground-truth context (never the
    regression target) so autoregressive rollouts stay close to the
    teacher-forced error instead of compounding their own feedback.
    """
    if config.vertex_count != corpus.config.vertex_count:
        raise ConfigError(
            f"model expects {config.vertex_count} vertices, corpus has "
            f"{corpus.config.vertex_count}"
        )
    torch.manual_seed(config.seed)
    if resume is None:
        model = StyleSyncFormer(config)
        start_step, history = 0, []
        opt = torch.optim.Adam(model.parameters(), lr=lr)
    else:
        model, meta, arrays = load_syncformer(resume)
        start_step = int(meta["step"])
        history = list(meta.get("loss_history", []))
        opt = torch.optim.Adam(model.parameters(), lr=lr)
        tstate.load_adam_arrays(opt, model, arrays, start_step)
    model.train()

    rng = np.random.default_rng(config.seed + 77)
    train_clips = corpus.clip_entries("train")
    crop = config.n_tokens_train

    for step in range(start_step, start_step + steps):
        audios, targets, styles = [], [], []
        for _ in range(batch_size):
            idx, entry = train_clips[rng.integers(len(train_clips))]
            clip = corpus.load_clip(idx, entry["name"])
            t0 = int(rng.integers(max(clip.length - crop, 0) + 1))
            t1 = min(t0 + crop, clip.length)
            audios.append(clip.audio_features[t0:t1])
            targets.append(_flat_disp(clip.displacements[t0:t1]))
            styles.append(
                sample_style_window(
                    rng, corpus, idx, config.style_window, (entry["name"], (t0, t1))
                )
            )
        audio = torch.from_numpy(np.stack(audios))
        target = torch.from_numpy(np.stack(targets))
        style = torch.from_numpy(np.stack(styles))
        step_lr = _cosine_lr(step - start_step, steps, lr, lr_min)
        for group in opt.param_groups:
            group["lr"] = step_lr
        context = target
        if context_noise > 0:
            context = target + context_noise * torch.randn_like(target)
        pred = model.forward_teacher_forced(audio, context, style)
        loss = loss_3d(pred, target, config.lambda_point)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % log_every == 0 or step == start_step + steps - 1:
            history.append([step, float(loss.item())])
    save_syncformer(
        out_path,
        model,
        {"step": start_step + steps, "loss_history": history},
        optimizer=opt,
    )
    return out_path
