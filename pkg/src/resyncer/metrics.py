"""Evaluation battery for sync and swap outputs.

Covers visual similarity (PSNR/SSIM), mouth-landmark distance, vertex error,
identity similarity/retrieval, and an articulation-correlation sync proxy.
Landmarks come from projected mesh indices, never a 2D detector, so every
metric here is exact and deterministic on the synthetic corpus.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import DataError, DomainError, NumericError
from .mesh import Camera, MeshFrame
from .synthdata import (
    Corpus,
    IdentityProfile,
    _probe_windows,
    oracle_displacement,
    render_frame,
)

# PSNR of identical images is infinite; reports use a finite sentinel instead
PSNR_CAP = 100.0


def _as_uint8_pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise DomainError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.dtype != np.uint8 or b.dtype != np.uint8:
        raise DomainError("images must be uint8")
    return a, b


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB over all pixels and channels."""
    a, b = _as_uint8_pair(a, b)
    mse = float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(255.0**2 / mse))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size, dtype=np.float64) - half
    g = np.exp(-(coords**2) / (2.0 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def _ssim_channel(x: np.ndarray, y: np.ndarray, window: np.ndarray) -> float:
    k = window.shape[0]
    if x.shape[0] < k or x.shape[1] < k:
        raise DomainError(f"images must be at least {k}x{k} for SSIM")
    c1 = (0.01 * 255.0) ** 2
    c2 = (0.03 * 255.0) ** 2
    xs = np.lib.stride_tricks.sliding_window_view(x, (k, k))
    ys = np.lib.stride_tricks.sliding_window_view(y, (k, k))
    mu_x = np.tensordot(xs, window, axes=([2, 3], [0, 1]))
    mu_y = np.tensordot(ys, window, axes=([2, 3], [0, 1]))
    xx = np.tensordot(xs * xs, window, axes=([2, 3], [0, 1])) - mu_x**2
    yy = np.tensordot(ys * ys, window, axes=([2, 3], [0, 1])) - mu_y**2
    xy = np.tensordot(xs * ys, window, axes=([2, 3], [0, 1])) - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * xy + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (xx + yy + c2)
    return float(np.mean(num / den))


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Structural similarity with an 11x11 Gaussian window, K1/K2 = 0.01/0.03.

    Accepts [H, W] or [H, W, C] uint8; channels are scored independently and
    averaged. Window statistics are weighted moments, not sample covariances.
    """
    a, b = _as_uint8_pair(a, b)
    window = _gaussian_window()
    x = a.astype(np.float64)
    y = b.astype(np.float64)
    if a.ndim == 2:
        return _ssim_channel(x, y, window)
    if a.ndim != 3:
        raise DomainError(f"expected [H, W] or [H, W, C] images, got {a.shape}")
    vals = [_ssim_channel(x[..., c], y[..., c], window) for c in range(a.shape[2])]
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# Landmark and vertex metrics


def _vertex_series(series, name: str) -> np.ndarray:
    """Coerce a mesh track (list of MeshFrame or [T, V, 3]) to [T, V, 3]."""
    if isinstance(series, np.ndarray):
        arr = np.asarray(series, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise DomainError(f"{name} must be [T, V, 3], got {arr.shape}")
        return arr
    if len(series) == 0:
        raise DomainError(f"{name} is empty")
    if not all(isinstance(m, MeshFrame) for m in series):
        raise DomainError(f"{name} must be an array or a list of meshes")
    return np.stack([m.vertices for m in series])


def project_landmarks(
    series,
    landmark_indices: np.ndarray,
    poses: np.ndarray,
    camera: Camera,
) -> np.ndarray:
    """Exact pixel positions of the given vertices: [T, L, 2] float64."""
    verts = _vertex_series(series, "mesh series")
    poses = np.asarray(poses, dtype=np.float64)
    if poses.shape != (verts.shape[0], 4, 4):
        raise DomainError(
            f"poses must be [{verts.shape[0]}, 4, 4], got {poses.shape}"
        )
    idx = np.asarray(landmark_indices, dtype=np.int64)
    if idx.size == 0 or idx.min() < 0 or idx.max() >= verts.shape[1]:
        raise DomainError("landmark indices out of range")
    pts = verts[:, idx, :]
    rot = poses[:, :3, :3]
    trans = poses[:, None, :3, 3]
    posed = np.einsum("tlj,tij->tli", pts, rot) + trans
    out = np.empty(posed.shape[:2] + (2,))
    out[..., 0] = camera.cx + camera.scale * posed[..., 0]
    out[..., 1] = camera.cy + camera.scale * posed[..., 1]
    return out


def lmd_points(pred_px: np.ndarray, gt_px: np.ndarray) -> float:
    """Mean Euclidean distance between landmark tracks, in pixels."""
    pred_px = np.asarray(pred_px, dtype=np.float64)
    gt_px = np.asarray(gt_px, dtype=np.float64)
    if pred_px.shape != gt_px.shape:
        raise DomainError(
            f"landmark tracks differ in shape: {pred_px.shape} vs {gt_px.shape}"
        )
    if pred_px.ndim != 3 or pred_px.shape[2] != 2:
        raise DomainError(f"landmark tracks must be [T, L, 2], got {pred_px.shape}")
    return float(np.mean(np.linalg.norm(pred_px - gt_px, axis=2)))


def lmd(
    pred,
    gt,
    landmark_indices: np.ndarray,
    poses: np.ndarray,
    camera: Camera,
) -> float:
    """Mouth-landmark distance between two mesh tracks under shared poses.

    The per-landmark, per-frame mean is reported (see EvalReport metadata).
    For generated frames use estimate_articulation plus articulated_meshes to
    recover a mesh track first.
    """
    a = project_landmarks(pred, landmark_indices, poses, camera)
    b = project_landmarks(gt, landmark_indices, poses, camera)
    return lmd_points(a, b)


def vertex_l2(pred, gt) -> float:
    """Mean over frames of the vertex-difference L2 norm divided by V."""
    a = _vertex_series(pred, "pred")
    b = _vertex_series(gt, "gt")
    if a.shape != b.shape:
        raise DomainError(f"mesh tracks differ in shape: {a.shape} vs {b.shape}")
    per_frame = np.linalg.norm((a - b).reshape(a.shape[0], -1), axis=1)
    return float(np.mean(per_frame) / a.shape[1])


def excursion_statistic(displacements: np.ndarray) -> float:
    """Mouth-opening amplitude: mean over frames of the max vertex excursion."""
    d = np.asarray(displacements, dtype=np.float64)
    if d.ndim != 3 or d.shape[2] != 3:
        raise DomainError(f"displacements must be [T, V, 3], got {d.shape}")
    return float(np.mean(np.max(np.linalg.norm(d, axis=2), axis=1)))


# ---------------------------------------------------------------------------
# Articulation extraction and the sync proxy


def estimate_articulation(
    frames: np.ndarray,
    profile: IdentityProfile,
    poses: np.ndarray,
    background: np.ndarray,
    camera: Camera,
    box: tuple[int, int, int, int],
) -> np.ndarray:
    """Per-frame mouth openness read off rendered frames, roughly in [0, 1].

    For each frame two calibration renders are made at that frame's own pose:
    the closed mouth (s=0) and the fully open mouth (s=1). The signal is the
    absolute intensity delta against the closed render inside the mouth box,
    normalized by the closed-to-open delta so pose-dependent shading and
    coverage cancel per frame.
    """
    frames = np.asarray(frames)
    if frames.ndim != 4 or frames.dtype != np.uint8:
        raise DomainError("frames must be [T, H, W, 3] uint8")
    poses = np.asarray(poses, dtype=np.float64)
    if poses.shape != (frames.shape[0], 4, 4):
        raise DomainError(
            f"poses must be [{frames.shape[0]}, 4, 4], got {poses.shape}"
        )
    r0, r1, c0, c1 = box
    if not (0 <= r0 < r1 <= frames.shape[1] and 0 <= c0 < c1 <= frames.shape[2]):
        raise DomainError(f"mouth box {box} does not fit frames {frames.shape}")
    template = profile.template_mesh()
    open_mesh = template.vertices + oracle_displacement(profile, 1.0)
    open_frame = MeshFrame(open_mesh, template.faces)
    grid_n = int(round(np.sqrt(template.vertex_count)))
    sig = np.empty(frames.shape[0])
    for t in range(frames.shape[0]):
        closed = render_frame(
            template, poses[t], profile.texture_params, background, camera, grid_n
        )[r0:r1, c0:c1].astype(np.float64)
        opened = render_frame(
            open_frame, poses[t], profile.texture_params, background, camera, grid_n
        )[r0:r1, c0:c1].astype(np.float64)
        got = frames[t, r0:r1, c0:c1].astype(np.float64)
        den = np.abs(closed - opened).sum()
        if den < 1e-6:
            raise NumericError(
                "mouth articulation is invisible at this pose; cannot calibrate"
            )
        sig[t] = np.abs(closed - got).sum() / den
    return sig


def articulated_meshes(
    profile: IdentityProfile, articulation: np.ndarray
) -> np.ndarray:
    """Vertex track [T, V, 3] for an openness series under the identity's
    articulation model. Accepts estimates outside [0, 1] (linear model)."""
    s = np.asarray(articulation, dtype=np.float64)
    if s.ndim != 1:
        raise DomainError(f"articulation must be [T], got {s.shape}")
    template = profile.template_mesh().vertices
    unit = profile.style_amp * profile.opening_direction.astype(np.float64)
    return template[None] + s[:, None, None] * unit[None]


def pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise DomainError(f"series must be equal-length 1D, got {a.shape}, {b.shape}")
    if a.std() == 0.0 or b.std() == 0.0:
        raise NumericError("constant series has no defined correlation")
    return float(np.corrcoef(a, b)[0, 1])


def sync_corr(
    frames: np.ndarray,
    articulation: np.ndarray,
    profile: IdentityProfile,
    poses: np.ndarray,
    background: np.ndarray,
    camera: Camera,
    box: tuple[int, int, int, int],
) -> float:
    """Pearson correlation between extracted openness and the ground truth."""
    articulation = np.asarray(articulation, dtype=np.float64)
    if articulation.shape[0] != np.asarray(frames).shape[0]:
        raise DomainError("articulation length does not match frame count")
    sig = estimate_articulation(frames, profile, poses, background, camera, box)
    return pearson(sig, articulation)


# ---------------------------------------------------------------------------
# Identity metrics


def identity_centroids(embedder, corpus: Corpus, split: str = "train") -> np.ndarray:
    """Unit-norm mean embedding per identity over the corpus frames."""
    from .generator import frames_to_tensor

    sums = np.zeros((corpus.n_identities, embedder.embed_dim))
    counts = np.zeros(corpus.n_identities, dtype=np.int64)
    with torch.no_grad():
        for idx, _, clip in corpus.iter_clips(split):
            emb = embedder.embed(frames_to_tensor(clip.frames))
            sums[idx] += emb.sum(dim=0).numpy()
            counts[idx] += emb.shape[0]
    if (counts == 0).any():
        raise DataError(f"identity without {split!r} clips; cannot build centroids")
    cent = sums / counts[:, None]
    norms = np.linalg.norm(cent, axis=1, keepdims=True)
    if (norms < 1e-8).any():
        raise NumericError("identity centroid collapsed to zero norm")
    return cent / norms


def id_metrics(
    frames: np.ndarray,
    source_id: int,
    embedder,
    centroids: np.ndarray,
) -> tuple[float, float]:
    """(similarity, retrieval) of frames against a source identity.

    Similarity is the mean cosine to the source centroid; retrieval is the
    fraction of frames whose nearest centroid is the source. Both are means,
    so duplicated frames change neither.
    """
    from .generator import frames_to_tensor

    centroids = np.asarray(centroids, dtype=np.float64)
    if centroids.ndim != 2:
        raise DomainError(f"centroids must be [K, D], got {centroids.shape}")
    if not 0 <= source_id < centroids.shape[0]:
        raise DomainError(
            f"unknown identity {source_id}; corpus has {centroids.shape[0]}"
        )
    with torch.no_grad():
        emb = embedder.embed(frames_to_tensor(frames)).numpy().astype(np.float64)
    cos = emb @ centroids.T
    similarity = float(np.mean(cos[:, source_id]))
    retrieval = float(np.mean(cos.argmax(axis=1) == source_id))
    return similarity, retrieval


# ---------------------------------------------------------------------------
# Style probe


class StyleProbe:
    """Linear ridge classifier over flattened mouth-displacement windows.

    The probe certifies which identity's speaking style a displacement track
    carries; style transfer is judged by whether the probe votes for the
    style donor.
    """

    def __init__(self, corpus: Corpus, window: int = 90, stride: int = 10,
                 ridge: float = 1e-3):
        self.window = window
        self.stride = stride
        self.mouth = corpus.identity(0).mouth_indices
        x, y = _probe_windows(corpus, "train", window, stride)
        self.mean = x.mean(axis=0)
        self.xc = x - self.mean
        onehot = np.eye(corpus.n_identities)[y]
        gram = self.xc @ self.xc.T
        # dual-form ridge: weights live in the span of the training windows
        self.alpha = np.linalg.solve(
            gram + ridge * np.eye(gram.shape[0]), onehot
        )

    def scores(self, windows: np.ndarray) -> np.ndarray:
        windows = np.asarray(windows, dtype=np.float64)
        if windows.ndim != 2 or windows.shape[1] != self.mean.shape[0]:
            raise DomainError(
                f"probe windows must be [N, {self.mean.shape[0]}], got {windows.shape}"
            )
        return (windows - self.mean) @ self.xc.T @ self.alpha

    def classify_series(self, displacements: np.ndarray) -> int:
        """Majority style vote over all windows of a displacement track."""
        d = np.asarray(displacements, dtype=np.float64)
        if d.ndim != 3 or d.shape[2] != 3:
            raise DomainError(f"displacements must be [T, V, 3], got {d.shape}")
        if d.shape[0] < self.window:
            raise DomainError(
                f"track of {d.shape[0]} frames is shorter than the probe "
                f"window {self.window}"
            )
        feats = [
            d[s : s + self.window, self.mouth, :].reshape(-1)
            for s in range(0, d.shape[0] - self.window + 1, self.stride)
        ]
        votes = self.scores(np.stack(feats)).argmax(axis=1)
        return int(np.bincount(votes).argmax())


# ---------------------------------------------------------------------------
# Reports


@dataclass
class EvalReport:
    """Per-clip metric rows plus their means, JSON-serializable."""

    task: str
    per_clip: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def add_clip(self, name: str, values: dict) -> None:
        row = {"clip": name}
        row.update(values)
        self.per_clip.append(row)

    @property
    def aggregates(self) -> dict:
        keys: list[str] = []
        for row in self.per_clip:
            for k, v in row.items():
                if k != "clip" and isinstance(v, (int, float)) and k not in keys:
                    keys.append(k)
        out = {}
        for k in keys:
            vals = [row[k] for row in self.per_clip if k in row]
            out[k] = float(np.mean(vals))
        return out

    def to_dict(self) -> dict:
        meta = {
            "d_v_normalization": "per-frame Frobenius norm divided by V",
            "lmd_normalization": "per-landmark per-frame mean, pixels",
            "psnr_cap_db": PSNR_CAP,
        }
        meta.update(self.metadata)
        return {
            "task": self.task,
            "counts": {"clips": len(self.per_clip)},
            "per_clip": self.per_clip,
            "aggregates": self.aggregates,
            "metadata": meta,
        }

    def save(self, path: str) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path: str) -> "EvalReport":
        with open(path) as fh:
            d = json.load(fh)
        return cls(task=d["task"], per_clip=d["per_clip"], metadata=d["metadata"])


def report_chart(report: EvalReport, path: str) -> None:
    """Bar-chart contact sheet: per-clip bars grouped by metric, as PNG.

    Bars are normalized within each metric group, so the chart shows the
    spread across clips; the printed number above each group is the mean.
    """
    from PIL import Image, ImageDraw

    agg = report.aggregates
    names = sorted(agg)
    n_clips = max(1, len(report.per_clip))
    bar_w = max(6, min(24, 96 // n_clips))
    group_w, gap, h = max(64, bar_w * n_clips), 26, 240
    plot_top, plot_bot = 44, h - 36
    width = max(1, len(names)) * (group_w + gap) + gap
    img = Image.new("RGB", (width, h), (255, 255, 255))
    draw = ImageDraw.Draw(img)
    draw.text((gap, 6), f"task: {report.task}   clips: {len(report.per_clip)}",
              fill=(0, 0, 0))
    for i, name in enumerate(names):
        x0 = gap + i * (group_w + gap)
        vals = [row.get(name) for row in report.per_clip]
        vals = [v for v in vals if isinstance(v, (int, float))]
        top = max((abs(v) for v in vals), default=1.0) or 1.0
        for j, val in enumerate(vals):
            frac = min(1.0, abs(val) / top)
            y0 = plot_bot - int((plot_bot - plot_top) * frac)
            color = (70, 110, 180) if val >= 0 else (180, 90, 70)
            bx = x0 + j * bar_w
            draw.rectangle([bx, y0, bx + bar_w - 2, plot_bot], fill=color)
        draw.text((x0, plot_bot + 4), name[:14], fill=(0, 0, 0))
        draw.text((x0, plot_top - 16), f"{agg[name]:.3g}", fill=(0, 0, 0))
    img.save(path, format="PNG")
