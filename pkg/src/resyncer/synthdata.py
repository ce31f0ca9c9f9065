"""Synthetic audio-visual corpus with a known articulation oracle.

Every clip is generated from a scalar "mouth openness" driving signal, so
ground truth for meshes, landmarks, and sync is available in closed form.
Identity-specific speaking style has three ingredients, none of which is
present in the audio features:

* ``style_amp``      amplitude multiplier on the opening displacement,
* ``style_smooth``   causal EMA time constant applied to the raw signal,
* an opening direction field over the mouth block, varied per identity.

Audio features carry the raw (pre-smoothing, pre-amplitude) signal plus
deterministic nuisance dimensions, so a model can only recover the styled
motion by reading the mesh style window.

Float discipline: everything stored on disk is float32. Arithmetic runs in
float64 on float32-valued inputs, which keeps template + displacement sums
exact and makes the oracle-consistency checks bitwise.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import ndio
from .config import CorpusConfig
from .errors import ConfigError, DataError, DomainError
from .mesh import (
    Camera,
    FrameGeometry,
    MeshFrame,
    apply_displacement,
    apply_pose,
    build_grid_faces,
    pose_from_euler,
    project,
    rasterize_colored,
    rasterize_white,
)

__all__ = [
    "IdentityProfile",
    "ClipRecord",
    "Corpus",
    "make_identity",
    "oracle_displacement",
    "synth_clip",
    "render_frame",
    "build_corpus",
    "load_corpus",
    "style_probe_accuracy",
]


def _f32(a: np.ndarray) -> np.ndarray:
    """Round to float32 and promote back; keeps later float64 sums exact."""
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def _van_der_corput(n: int, base: int) -> float:
    v, denom = 0.0, 1.0
    while n:
        n, rem = divmod(n, base)
        denom *= base
        v += rem / denom
    return v


@dataclass(frozen=True)
class IdentityProfile:
    """Per-person template geometry, speaking style, and texture."""

    id_label: int
    template_vertices: np.ndarray  # [V, 3], float32-valued
    mouth_indices: np.ndarray  # [M_v] int32
    landmark_indices: np.ndarray  # [L_m] int32, subset of mouth_indices
    style_amp: float
    style_smooth: float
    texture_params: np.ndarray  # [9], float32-valued, each in [0, 1]
    opening_direction: np.ndarray  # [V, 3], float32-valued, zero off-mouth
    faces: np.ndarray  # [F, 3] int32

    def __post_init__(self) -> None:
        if self.style_amp <= 0:
            raise DomainError("style_amp must be positive")
        if self.style_smooth < 1:
            raise DomainError("style_smooth must be at least one frame")
        mouth = set(self.mouth_indices.tolist())
        if not set(self.landmark_indices.tolist()) <= mouth:
            raise DomainError("landmarks must be a subset of mouth vertices")
        if np.abs(self.template_vertices).max() > 1.0:
            raise DomainError("template must stay inside the [-1, 1] cube")

    def template_mesh(self) -> MeshFrame:
        return MeshFrame(self.template_vertices, self.faces)


@dataclass
class ClipRecord:
    """One synthetic talking-head clip with full ground truth."""

    identity: IdentityProfile
    articulation: np.ndarray  # [T] float32, styled openness s_t in [0, 1]
    raw_articulation: np.ndarray  # [T] float32, the pre-style driving signal
    audio_features: np.ndarray  # [T, D_a] float32
    poses: np.ndarray  # [T, 4, 4] float32
    frames: np.ndarray  # [T, H, W, 3] uint8
    background: np.ndarray  # [H, W, 3] float32 in [0, 1]
    displacements: np.ndarray  # [T, V, 3] float32
    clip_seed: int
    split: str = "train"
    _meshes: list | None = field(default=None, repr=False)

    @property
    def length(self) -> int:
        return int(self.articulation.shape[0])

    @property
    def meshes(self) -> list:
        """Canonical meshes, template + displacement, exact in float64."""
        if self._meshes is None:
            tmpl = self.identity.template_mesh()
            self._meshes = [
                apply_displacement(tmpl, self.displacements[t])
                for t in range(self.length)
            ]
        return self._meshes


# ---------------------------------------------------------------------------
# Identity generation


def _mouth_grid(config: CorpusConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Row/col index grids of the mouth block plus flat vertex indices."""
    n = config.grid_n
    r0 = n // 2
    c0 = (n - config.mouth_cols) // 2
    rows = np.arange(config.mouth_rows)
    cols = np.arange(config.mouth_cols)
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    idx = ((r0 + rr) * n + (c0 + cc)).astype(np.int32)
    return rr, cc, idx


def _mouth_weight(config: CorpusConfig) -> np.ndarray:
    """Smooth interior bump over the mouth block, exactly zero on its rim.

    Articulation therefore deforms the mouth interior only: the face
    silhouette never moves with speech, which keeps the photometric
    openness signal free of coverage noise.
    """
    rr, cc, _ = _mouth_grid(config)
    # rows taper over rr in [1, rows-1] so the top TWO rows are pinned; the
    # moving area then stays clear of the lower-half mask boundary above it
    wi = np.sin(np.pi * (rr - 1) / (config.mouth_rows - 2))
    wi[rr < 1] = 0.0
    wj = np.sin(np.pi * cc / (config.mouth_cols - 1))
    w = wi * wj
    # sin(pi) is ~1e-16, not 0; snap so rim vertices carry exact zeros
    w[w < 1e-9] = 0.0
    return w


def _mouth_gate(grid_n: int) -> np.ndarray:
    """[n, n] smooth 0..1 field, ~1 over the mouth block interior.

    Uses the standard block placement (lower half rows, centered columns,
    n/2 on a side). Gates both the albedo pattern and the dome curvature so
    the mouth area is locally uniform and flat.
    """
    half = grid_n // 2
    c0 = (grid_n - half) // 2
    rows = np.arange(grid_n)
    cols = np.arange(grid_n)
    wi = np.zeros(grid_n)
    wj = np.zeros(grid_n)
    sel_r = (rows >= half) & (rows < half * 2)
    sel_c = (cols >= c0) & (cols < c0 + half)
    wi[sel_r] = np.sin(np.pi * (rows[sel_r] - half) / (half - 1))
    wj[sel_c] = np.sin(np.pi * (cols[sel_c] - c0) / (half - 1))
    return np.clip(1.8 * wi[:, None] * wj[None, :], 0.0, 1.0)


def _direction_modes(config: CorpusConfig) -> np.ndarray:
    """Four fixed smooth variation patterns [4, M_rows, M_cols, 3].

    The depth components dominate: under the orthographic camera they alter
    shading but never the projected footprint, so identities get linearly
    separable opening fields without in-plane coverage noise. The tiny x/y
    leak keeps the fields fully 3D.
    """
    rr, cc, _ = _mouth_grid(config)
    u = (rr + 0.5) / config.mouth_rows
    v = (cc + 0.5) / config.mouth_cols
    zero = np.zeros_like(u)
    pat = [
        np.cos(np.pi * v),
        np.cos(np.pi * u),
        np.sin(np.pi * u) * np.cos(2 * np.pi * v),
        np.sin(np.pi * v) * np.cos(2 * np.pi * u),
    ]
    inp, dep = 0.05, 0.45
    modes = np.stack(
        [
            np.stack([inp * pat[0], zero, dep * pat[0]], axis=-1),
            np.stack([zero, inp * pat[1], dep * pat[1]], axis=-1),
            np.stack([inp * pat[2], zero, dep * pat[2]], axis=-1),
            np.stack([zero, inp * pat[3], dep * pat[3]], axis=-1),
        ]
    )
    return modes


# max per-vertex displacement magnitude at style_amp * s == 1, canonical units
_OPENING_SCALE = 0.22
# template sits slightly low so the mouth stays inside the lower-half mask
_TEMPLATE_Y_SHIFT = 0.07


def make_identity(seed: int, config: CorpusConfig) -> IdentityProfile:
    """Deterministic identity: template shape, style, texture, opening field."""
    if seed < 0:
        raise DomainError("identity seed must be non-negative")
    n = config.grid_n
    rng = np.random.default_rng(seed * 2 + 12345)

    # base grid over [-0.8, 0.8]^2 with a z dome toward the camera; the dome
    # is blended flat over the mouth block so speech-driven depth changes sit
    # on a locally constant base
    lin = np.linspace(-0.8, 0.8, n)
    gy_r, gx_c = np.meshgrid(lin, lin, indexing="ij")
    x = gx_c
    y = gy_r + _TEMPLATE_Y_SHIFT
    dome = 0.28 * np.cos(np.pi * gx_c / 1.7) * np.cos(np.pi * gy_r / 1.7)
    gate = _mouth_gate(n)
    y_mouth = lin[n // 2 + config.mouth_rows // 2]
    z_flat = 0.28 * np.cos(np.pi * y_mouth / 1.7)
    z = dome * (1.0 - gate) + z_flat * gate

    # low-frequency per-identity shape offsets, well under the grid spacing;
    # depth offsets are gated out of the mouth block to keep it flat
    uu = (gx_c + 0.8) / 1.6
    vv = (gy_r + 0.8) / 1.6
    offsets = np.zeros((n, n, 3))
    for axis in range(3):
        for _ in range(3):
            fu, fv = rng.uniform(0.5, 2.0, size=2)
            ph = rng.uniform(0, 2 * np.pi)
            amp = rng.uniform(0.008, 0.03)
            offsets[:, :, axis] += amp * np.sin(
                2 * np.pi * (fu * uu + fv * vv) + ph
            )
    offsets[:, :, 2] *= 1.0 - gate
    template = np.stack([x, y, z], axis=-1) + offsets
    template = _f32(template.reshape(-1, 3))

    rr, cc, mouth_idx = _mouth_grid(config)
    flat_mouth = mouth_idx.reshape(-1)

    # style scalars on low-discrepancy ladders: separable across seeds
    style_amp = 0.5 + _van_der_corput(seed % 97 + 1, 2)
    style_smooth = 1.0 + 8.0 * _van_der_corput(seed % 97 + 1, 3)

    # opening field: shared downward/receding motion plus identity variation
    weight = _mouth_weight(config)
    base_dir = np.array([0.0, 0.22, -0.95])
    base_dir = base_dir / np.linalg.norm(base_dir)
    coeffs = rng.uniform(-1.0, 1.0, size=4)
    local = base_dir[None, None, :] + np.einsum(
        "k,krcd->rcd", coeffs, _direction_modes(config)
    )
    block = weight[:, :, None] * local
    block *= _OPENING_SCALE / np.linalg.norm(block, axis=-1).max()
    direction = np.zeros((n * n, 3))
    direction[flat_mouth] = block.reshape(-1, 3)
    direction = _f32(direction)

    # landmarks: the most articulate mouth vertices
    order = np.argsort(-weight.reshape(-1), kind="stable")[: config.n_landmarks]
    landmarks = np.sort(flat_mouth[order]).astype(np.int32)

    texture_params = _f32(rng.uniform(0.0, 1.0, size=9))

    return IdentityProfile(
        id_label=seed,
        template_vertices=template,
        mouth_indices=np.sort(flat_mouth).astype(np.int32),
        landmark_indices=landmarks,
        style_amp=style_amp,
        style_smooth=style_smooth,
        texture_params=texture_params,
        opening_direction=direction,
        faces=build_grid_faces(n),
    )


def oracle_displacement(profile: IdentityProfile, s: float) -> np.ndarray:
    """Ground-truth per-vertex displacement for mouth openness ``s``.

    Zero outside the mouth block, linear in ``s``, scaled by the identity's
    amplitude. Returned as float32: the value every stored corpus
    displacement matches bitwise.
    """
    s = float(s)
    if not 0.0 <= s <= 1.0:
        raise DomainError(f"articulation must lie in [0, 1], got {s}")
    return (profile.style_amp * s * profile.opening_direction).astype(np.float32)


# ---------------------------------------------------------------------------
# Clip synthesis


def _raw_signal(T: int, rng: np.random.Generator) -> np.ndarray:
    """Band-limited driving signal in [0, 1]; depends only on the clip seed."""
    t = np.arange(T) / 25.0
    sig = np.zeros(T)
    for _ in range(6):
        freq = rng.uniform(0.3, 2.5)
        amp = rng.uniform(0.4, 1.0)
        phase = rng.uniform(0, 2 * np.pi)
        sig += amp * np.sin(2 * np.pi * freq * t + phase)
    lo, hi = sig.min(), sig.max()
    if hi - lo < 1e-9:
        return np.full(T, 0.5)
    return (sig - lo) / (hi - lo)


def _ema(signal: np.ndarray, tau: float) -> np.ndarray:
    """Causal exponential moving average with time constant tau (frames)."""
    beta = float(np.exp(-1.0 / tau))
    out = np.empty_like(signal)
    acc = signal[0]
    out[0] = acc
    for i in range(1, signal.shape[0]):
        acc = beta * acc + (1.0 - beta) * signal[i]
        out[i] = acc
    return out


def _audio_from_raw(raw: np.ndarray, dim: int, rng: np.random.Generator) -> np.ndarray:
    """Injective encoding of the raw signal plus deterministic nuisance dims."""
    T = raw.shape[0]
    feats = np.zeros((T, dim))
    feats[:, 0] = raw
    feats[:, 1] = raw**2
    feats[:, 2] = np.sin(2 * np.pi * raw)
    feats[:, 3] = np.cos(2 * np.pi * raw)
    feats[1:, 4] = raw[:-1]
    feats[0, 4] = raw[0]
    t = np.arange(T) / 25.0
    for k in range(5, dim):
        freq = rng.uniform(0.2, 4.0)
        phase = rng.uniform(0, 2 * np.pi)
        feats[:, k] = 0.5 * np.sin(2 * np.pi * freq * t + phase)
        feats[:, k] += 0.3 * rng.standard_normal(T)
    return feats


def _pose_track(T: int, rng: np.random.Generator) -> np.ndarray:
    """Smooth rigid poses, rotations about ten degrees peak.

    Pitch is kept small: it tilts the mouth's depth axis into the image and
    would modulate the photometric openness slope.
    """
    t = np.arange(T) / 25.0

    def wobble(amp: float) -> np.ndarray:
        f = rng.uniform(0.1, 0.45)
        ph = rng.uniform(0, 2 * np.pi)
        return amp * np.sin(2 * np.pi * f * t + ph)

    yaw = wobble(0.18)
    pitch = wobble(0.05)
    roll = wobble(0.06)
    tx = wobble(0.05)
    ty = wobble(0.04)
    tz = wobble(0.20)
    poses = np.empty((T, 4, 4))
    for i in range(T):
        poses[i] = pose_from_euler(yaw[i], pitch[i], roll[i], tx[i], ty[i], tz[i])
    return poses


def _grid_uv(grid_n: int) -> np.ndarray:
    lin = np.arange(grid_n) / (grid_n - 1)
    vv, uu = np.meshgrid(lin, lin, indexing="ij")
    return np.stack([uu.reshape(-1), vv.reshape(-1)], axis=-1)


def _face_colors(texture_params: np.ndarray, faces: np.ndarray, grid_n: int) -> np.ndarray:
    """Per-face albedo from the identity's texture vector; glued to topology.

    The pattern fades out over the mouth block so the region where triangles
    deform with speech is near-uniform in color; openness then shows up as a
    clean depth-shading change.
    """
    p = np.asarray(texture_params, dtype=np.float64)
    uv = _grid_uv(grid_n)
    centroids = uv[faces].mean(axis=1)
    gate = _mouth_gate(grid_n).reshape(-1)
    gate_c = gate[faces].mean(axis=1)
    base = 0.35 + 0.40 * p[0:3]
    amp = 0.12 * p[3:6]
    fu = 1.0 + 2.0 * p[6]
    fv = 1.0 + 2.0 * p[7]
    phase = 2 * np.pi * p[8]
    wave = np.sin(2 * np.pi * (fu * centroids[:, 0] + fv * centroids[:, 1]) + phase)
    colors = base[None, :] + amp[None, :] * (wave * (1.0 - gate_c))[:, None]
    # pin the mouth area bright so depth shading there spans plenty of
    # uint8 levels regardless of the identity's base tone
    colors = (1.0 - gate_c[:, None]) * colors + gate_c[:, None] * 0.85
    return np.clip(colors, 0.05, 0.95)


def default_camera(config: CorpusConfig) -> Camera:
    cx, cy = config.camera_center
    return Camera(scale=config.camera_scale, cx=cx, cy=cy,
                  shade_lo=0.5, shade_hi=1.0, z_lo=-0.6, z_hi=0.6)


def mouth_box(config: CorpusConfig) -> tuple[int, int, int, int]:
    """Pixel rectangle (r0, r1, c0, c1), half-open, bounding the moving mouth.

    Derived from the mouth block's rest-pose projection with a margin for
    pose wobble and articulation; clipped to the face box.
    """
    n = config.grid_n
    lin = np.linspace(-0.8, 0.8, n)
    r0b = n // 2
    c0b = (n - config.mouth_cols) // 2
    ys = lin[r0b : r0b + config.mouth_rows] + _TEMPLATE_Y_SHIFT
    xs = lin[c0b : c0b + config.mouth_cols]
    cx, cy = config.camera_center
    s = config.camera_scale
    margin = 0.08 * s
    r_lo = int(np.floor(cy + s * ys.min() - margin))
    r_hi = int(np.ceil(cy + s * ys.max() + margin))
    c_lo = int(np.floor(cx + s * xs.min() - margin))
    c_hi = int(np.ceil(cx + s * xs.max() + margin))
    fr0, fr1, fc0, fc1 = config.face_box
    return max(r_lo, fr0), min(r_hi, fr1), max(c_lo, fc0), min(c_hi, fc1)


def frame_geometry(config: CorpusConfig) -> FrameGeometry:
    return FrameGeometry(config.height, config.width, config.face_box)


# antialiasing factor for all corpus renders; pixel (i, j) box-averages an
# _SS x _SS grid of subsamples covering exactly [j, j+1) x [i, i+1)
_SS = 4


def _scaled_camera(camera: Camera) -> Camera:
    return Camera(
        scale=camera.scale * _SS,
        cx=camera.cx * _SS,
        cy=camera.cy * _SS,
        shade_lo=camera.shade_lo,
        shade_hi=camera.shade_hi,
        z_lo=camera.z_lo,
        z_hi=camera.z_hi,
    )


def _downsample(img: np.ndarray, height: int, width: int) -> np.ndarray:
    if img.ndim == 3:
        return img.reshape(height, _SS, width, _SS, img.shape[2]).mean(axis=(1, 3))
    return img.reshape(height, _SS, width, _SS).mean(axis=(1, 3))


def render_frame(
    mesh: MeshFrame,
    pose: np.ndarray,
    texture_params: np.ndarray,
    background: np.ndarray,
    camera: Camera,
    grid_n: int | None = None,
) -> np.ndarray:
    """Deterministic flat-shaded render of the textured mesh over a background.

    Supersampled and box-averaged so triangle edges land on smooth intensity
    ramps rather than whole-pixel steps. Returns uint8 RGB.
    """
    if grid_n is None:
        grid_n = int(round(np.sqrt(mesh.vertex_count)))
    height, width = background.shape[:2]
    cam2 = _scaled_camera(camera)
    xy, depth = project(mesh, pose, cam2)
    colors = _face_colors(texture_params, mesh.faces, grid_n)
    bg2 = np.repeat(np.repeat(np.asarray(background, dtype=np.float64), _SS, axis=0), _SS, axis=1)
    img = rasterize_colored(
        xy, depth, mesh.faces, colors, height * _SS, width * _SS, cam2, bg2
    )
    img = _downsample(img, height, width)
    return np.floor(img * 255.0 + 0.5).astype(np.uint8)


def render_white(
    mesh: MeshFrame,
    pose: np.ndarray,
    camera: Camera,
    height: int,
    width: int,
) -> np.ndarray:
    """Depth-shaded white-mesh render, float [H, W] in [0, 1], 0 uncovered.

    Same supersampling as ``render_frame`` so overlays and frames agree on
    edge placement to subpixel precision.
    """
    cam2 = _scaled_camera(camera)
    xy, depth = project(mesh, pose, cam2)
    img = rasterize_white(xy, depth, mesh.faces, height * _SS, width * _SS, cam2)
    return _downsample(img, height, width)


def synth_clip(
    profile: IdentityProfile,
    T: int,
    seed: int,
    config: CorpusConfig,
    split: str = "train",
) -> ClipRecord:
    """Generate one clip. The raw driving signal depends only on ``seed``,
    so two identities given the same seed speak the same content with
    different styles."""
    if T < 1:
        raise DomainError("clip length must be at least one frame")
    rng_signal = np.random.default_rng(seed * 3 + 101)
    rng_scene = np.random.default_rng(seed * 3 + 202)

    raw64 = _f32(_raw_signal(T, rng_signal))
    styled = _f32(_ema(raw64, profile.style_smooth))
    audio = np.asarray(
        _audio_from_raw(raw64, config.audio_dim, rng_signal), dtype=np.float32
    )
    poses = np.asarray(_pose_track(T, rng_scene), dtype=np.float32)

    corners = rng_scene.uniform(0.1, 0.9, size=(2, 2, 3))
    gy = np.linspace(0, 1, config.height)[:, None, None]
    gx = np.linspace(0, 1, config.width)[None, :, None]
    top = corners[0, 0] * (1 - gx) + corners[0, 1] * gx
    bot = corners[1, 0] * (1 - gx) + corners[1, 1] * gx
    background = np.asarray(top * (1 - gy) + bot * gy, dtype=np.float32)

    scale64 = profile.style_amp * styled  # float64, float32-valued inputs
    displacements = (
        scale64[:, None, None] * profile.opening_direction[None]
    ).astype(np.float32)

    camera = default_camera(config)
    tmpl = profile.template_mesh()
    frames = np.empty((T, config.height, config.width, 3), dtype=np.uint8)
    bg64 = background.astype(np.float64)
    for t in range(T):
        mesh_t = apply_displacement(tmpl, displacements[t])
        frames[t] = render_frame(
            mesh_t,
            poses[t].astype(np.float64),
            profile.texture_params,
            bg64,
            camera,
            config.grid_n,
        )

    return ClipRecord(
        identity=profile,
        articulation=styled.astype(np.float32),
        raw_articulation=raw64.astype(np.float32),
        audio_features=audio,
        poses=poses,
        frames=frames,
        background=background,
        displacements=displacements,
        clip_seed=seed,
        split=split,
    )


# ---------------------------------------------------------------------------
# Corpus on disk


_CLIP_ARRAYS = {
    "audio": "audio_features",
    "articulation": "articulation",
    "raw": "raw_articulation",
    "displacements": "displacements",
    "poses": "poses",
    "frames": "frames",
    "background": "background",
}


def _identity_seed(config: CorpusConfig, index: int) -> int:
    return config.seed * 100003 + index


def _clip_seed(config: CorpusConfig, identity_index: int, clip_index: int, split: str) -> int:
    if split == "test":
        # shared across identities: same content, different style
        return config.seed * 1009 + 7000 + clip_index
    return config.seed * 1009 + identity_index * 131 + clip_index + 1


def build_corpus(config: CorpusConfig, out_path: str) -> dict:
    """Write identities and clips under ``out_path``; returns the manifest."""
    if config.n_identities < 1:
        raise ConfigError("corpus needs at least one identity")
    try:
        os.makedirs(out_path, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create corpus dir {out_path}: {exc}") from exc

    manifest: dict = {"config": config.to_dict(), "identities": []}
    for i in range(config.n_identities):
        id_seed = _identity_seed(config, i)
        profile = make_identity(id_seed, config)
        id_dir = os.path.join(out_path, f"identity_{i:03d}")
        os.makedirs(id_dir, exist_ok=True)
        ndio.save_array(
            os.path.join(id_dir, "template.bin"),
            profile.template_vertices.astype(np.float32),
        )
        ndio.save_array(
            os.path.join(id_dir, "direction.bin"),
            profile.opening_direction.astype(np.float32),
        )
        ndio.dump_json(
            os.path.join(id_dir, "identity.json"),
            {
                "seed": id_seed,
                "style_amp": profile.style_amp,
                "style_smooth": profile.style_smooth,
                "texture_params": [float(v) for v in profile.texture_params],
                "mouth_indices": profile.mouth_indices.tolist(),
                "landmark_indices": profile.landmark_indices.tolist(),
            },
        )
        clips = []
        specs = [("clip", "train", config.clips_per_identity)]
        specs.append(("test", "test", config.test_clips_per_identity))
        for prefix, split, count in specs:
            for j in range(count):
                seed = _clip_seed(config, i, j, split)
                record = synth_clip(profile, config.clip_len, seed, config, split)
                clip_name = f"{prefix}_{j:03d}"
                clip_dir = os.path.join(id_dir, clip_name)
                os.makedirs(clip_dir, exist_ok=True)
                for fname, attr in _CLIP_ARRAYS.items():
                    ndio.save_array(
                        os.path.join(clip_dir, f"{fname}.bin"), getattr(record, attr)
                    )
                clips.append(
                    {
                        "name": clip_name,
                        "split": split,
                        "seed": seed,
                        "length": config.clip_len,
                    }
                )
        manifest["identities"].append(
            {"index": i, "seed": id_seed, "dir": f"identity_{i:03d}", "clips": clips}
        )
    ndio.dump_json(os.path.join(out_path, "manifest.json"), manifest)
    return manifest


class Corpus:
    """Read-side view of a corpus directory."""

    def __init__(self, root: str, manifest: dict):
        self.root = root
        self.manifest = manifest
        self.config = CorpusConfig.from_dict(manifest["config"])
        self._profiles: dict[int, IdentityProfile] = {}
        self._clip_cache: dict[tuple[int, str], ClipRecord] = {}

    @property
    def n_identities(self) -> int:
        return len(self.manifest["identities"])

    def identity(self, index: int) -> IdentityProfile:
        if index not in self._profiles:
            entry = self.manifest["identities"][index]
            id_dir = os.path.join(self.root, entry["dir"])
            meta = ndio.load_json(os.path.join(id_dir, "identity.json"))
            template = ndio.load_array(os.path.join(id_dir, "template.bin"))
            direction = ndio.load_array(os.path.join(id_dir, "direction.bin"))
            self._profiles[index] = IdentityProfile(
                id_label=meta["seed"],
                template_vertices=template.astype(np.float64),
                mouth_indices=np.asarray(meta["mouth_indices"], dtype=np.int32),
                landmark_indices=np.asarray(meta["landmark_indices"], dtype=np.int32),
                style_amp=float(meta["style_amp"]),
                style_smooth=float(meta["style_smooth"]),
                texture_params=np.asarray(meta["texture_params"], dtype=np.float32).astype(np.float64),
                opening_direction=direction.astype(np.float64),
                faces=build_grid_faces(self.config.grid_n),
            )
        return self._profiles[index]

    def clip_entries(self, split: str | None = None) -> list[tuple[int, dict]]:
        out = []
        for entry in self.manifest["identities"]:
            for clip in entry["clips"]:
                if split is None or clip["split"] == split:
                    out.append((entry["index"], clip))
        return out

    def load_clip(self, identity_index: int, clip_name: str) -> ClipRecord:
        key = (identity_index, clip_name)
        if key in self._clip_cache:
            return self._clip_cache[key]
        entry = self.manifest["identities"][identity_index]
        match = [c for c in entry["clips"] if c["name"] == clip_name]
        if not match:
            raise DataError(
                f"clip {clip_name!r} not in identity {identity_index} of {self.root}"
            )
        clip_dir = os.path.join(self.root, entry["dir"], clip_name)
        arrays = {
            attr: ndio.load_array(os.path.join(clip_dir, f"{fname}.bin"))
            for fname, attr in _CLIP_ARRAYS.items()
        }
        record = ClipRecord(
            identity=self.identity(identity_index),
            articulation=arrays["articulation"],
            raw_articulation=arrays["raw_articulation"],
            audio_features=arrays["audio_features"],
            poses=arrays["poses"],
            frames=arrays["frames"],
            background=arrays["background"],
            displacements=arrays["displacements"],
            clip_seed=match[0]["seed"],
            split=match[0]["split"],
        )
        self._clip_cache[key] = record
        return record

    def iter_clips(self, split: str | None = None):
        for idx, clip in self.clip_entries(split):
            yield idx, clip["name"], self.load_clip(idx, clip["name"])

    def camera(self) -> Camera:
        return default_camera(self.config)

    def geometry(self) -> FrameGeometry:
        return frame_geometry(self.config)


def load_corpus(root: str) -> Corpus:
    manifest_path = os.path.join(root, "manifest.json")
    if not os.path.exists(manifest_path):
        raise DataError(f"no corpus manifest at {manifest_path}")
    return Corpus(root, ndio.load_json(manifest_path))


# ---------------------------------------------------------------------------
# Style separability probe


def _probe_windows(
    corpus: Corpus, split: str, window: int, stride: int
) -> tuple[np.ndarray, np.ndarray]:
    feats, labels = [], []
    for idx, _, record in corpus.iter_clips(split):
        mouth = corpus.identity(idx).mouth_indices
        disp = record.displacements[:, mouth, :].astype(np.float64)
        for start in range(0, record.length - window + 1, stride):
            feats.append(disp[start : start + window].reshape(-1))
            labels.append(idx)
    return np.stack(feats), np.asarray(labels)


def style_probe_accuracy(
    corpus: Corpus, window: int = 90, stride: int = 10, ridge: float = 1e-3
) -> float:
    """Linear ridge classifier on flattened displacement style windows.

    Trains on train-split windows, scores accuracy on test-split windows.
    High accuracy certifies that windows of this length carry identity style.
    """
    x_train, y_train = _probe_windows(corpus, "train", window, stride)
    x_test, y_test = _probe_windows(corpus, "test", window, stride)
    mean = x_train.mean(axis=0)
    xc = x_train - mean
    onehot = np.eye(corpus.n_identities)[y_train]
    # dual-form ridge: weights live in the span of the training windows
    gram = xc @ xc.T
    alpha = np.linalg.solve(gram + ridge * np.eye(gram.shape[0]), onehot)
    scores = (x_test - mean) @ xc.T @ alpha
    return float((scores.argmax(axis=1) == y_test).mean())
