"""Configuration dataclasses for the corpus, both model stages, and runs.

Desk-scale defaults: a 256-vertex face grid, 64 mouth vertices, 20 mouth
landmarks, 32 audio dims, 64x64 frames at 25 fps semantics.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

from .errors import ConfigError


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ConfigError(msg)


@dataclass(frozen=True)
class CorpusConfig:
    """Synthetic corpus geometry and size.

    The face is a structured ``grid_n x grid_n`` vertex grid; the mouth is a
    ``mouth_rows x mouth_cols`` sub-block in the lower-center of the grid.
    """

    grid_n: int = 16
    mouth_rows: int = 8
    mouth_cols: int = 8
    n_landmarks: int = 20
    audio_dim: int = 32
    height: int = 64
    width: int = 64
    fps: int = 25
    n_identities: int = 8
    clips_per_identity: int = 3
    test_clips_per_identity: int = 1
    clip_len: int = 240
    seed: int = 0

    def __post_init__(self) -> None:
        _require(self.grid_n >= 4, f"grid_n must be >= 4, got {self.grid_n}")
        _require(self.mouth_rows >= 1 and self.mouth_cols >= 1, "mouth block must be non-empty")
        _require(
            self.mouth_vertices <= self.vertex_count,
            f"mouth block has {self.mouth_vertices} vertices but the grid has "
            f"only {self.vertex_count}",
        )
        _require(
            self.mouth_rows <= self.grid_n // 2 and self.mouth_cols <= self.grid_n,
            f"mouth block {self.mouth_rows}x{self.mouth_cols} does not fit the "
            f"lower half of a {self.grid_n}x{self.grid_n} grid",
        )
        _require(
            1 <= self.n_landmarks <= self.mouth_vertices,
            f"n_landmarks must be in [1, {self.mouth_vertices}], got {self.n_landmarks}",
        )
        _require(self.audio_dim >= 8, f"audio_dim must be >= 8, got {self.audio_dim}")
        _require(self.height >= 16 and self.width >= 16, "frames must be at least 16x16")
        _require(self.n_identities >= 1, "need at least one identity")
        _require(self.clips_per_identity >= 1, "need at least one clip per identity")
        _require(
            0 <= self.test_clips_per_identity < self.clips_per_identity,
            "test clips must leave at least one training clip",
        )
        _require(self.clip_len >= 1, "clips must have at least one frame")
        _require(self.seed >= 0, "seed must be non-negative")

    @property
    def vertex_count(self) -> int:
        return self.grid_n * self.grid_n

    @property
    def mouth_vertices(self) -> int:
        return self.mouth_rows * self.mouth_cols

    @property
    def face_box(self) -> tuple[int, int, int, int]:
        """Image-space face rectangle (r0, r1, c0, c1), half-open."""
        return (
            self.height // 8,
            self.height - self.height // 8,
            self.width // 8,
            self.width - self.width // 8,
        )

    @property
    def camera_scale(self) -> float:
        """Pixels per canonical unit for the orthographic camera."""
        return 0.36 * self.height

    @property
    def camera_center(self) -> tuple[float, float]:
        return (self.width / 2.0, self.height / 2.0)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusConfig":
        return _from_dict(cls, d)


@dataclass(frozen=True)
class SyncFormerConfig:
    """Mesh-displacement transformer hyperparameters."""

    vertex_count: int = 256
    audio_dim: int = 32
    token_dim: int = 128
    n_heads: int = 4
    ffn_dim: int = 512
    style_window: int = 90
    ppe_period: int = 25
    max_seq: int = 600
    n_tokens_train: int = 100
    lambda_point: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        _require(self.token_dim % self.n_heads == 0, "token_dim must divide by n_heads")
        _require(self.style_window >= 1, "style_window must be >= 1")
        _require(self.lambda_point >= 0, "lambda_point must be non-negative")
        _require(self.ppe_period >= 1, "ppe_period must be >= 1")
        _require(1 <= self.n_tokens_train <= self.max_seq, "n_tokens_train out of range")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SyncFormerConfig":
        return _from_dict(cls, d)


@dataclass(frozen=True)
class GeneratorConfig:
    """Rewired style-based generator (and discriminator) hyperparameters.

    ``channels[i]`` is the width of resolution stage ``base_resolution * 2**i``.
    Two style-convolution layers per stage.
    """

    resolution: int = 64
    base_resolution: int = 4
    channels: tuple[int, ...] = (128, 96, 96, 64, 48)
    w_dim: int = 128
    lambda_perceptual: float = 0.1
    perceptual_taps: int = 3
    r1_gamma: float = 10.0
    r1_interval: int = 16
    seed: int = 0

    def __post_init__(self) -> None:
        _require(
            self.resolution >= 8 and (self.resolution & (self.resolution - 1)) == 0,
            f"resolution must be a power of two >= 8, got {self.resolution}",
        )
        _require(
            self.base_resolution >= 4
            and (self.base_resolution & (self.base_resolution - 1)) == 0,
            "base_resolution must be a power of two >= 4",
        )
        _require(self.lambda_perceptual >= 0, "lambda_perceptual must be non-negative")
        _require(
            len(self.channels) == self.n_stages,
            f"channels must list {self.n_stages} stages, got {len(self.channels)}",
        )

    @property
    def n_stages(self) -> int:
        n = 0
        res = self.base_resolution
        while res <= self.resolution:
            n += 1
            res *= 2
        return n

    @property
    def stage_resolutions(self) -> tuple[int, ...]:
        return tuple(self.base_resolution * 2**i for i in range(self.n_stages))

    @property
    def style_conv_layers(self) -> int:
        return 2 * self.n_stages

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        d = dict(d)
        if "channels" in d:
            d["channels"] = tuple(d["channels"])
        return _from_dict(cls, d)


@dataclass(frozen=True)
class SwapConfig:
    """Unified (reconstruction + swap) training weights."""

    id_weight: float = 1.0
    fm_weight: float = 1.0
    swap_fraction: float = 0.5
    embed_dim: int = 64

    def __post_init__(self) -> None:
        _require(0.0 <= self.swap_fraction <= 1.0, "swap_fraction must be in [0, 1]")
        _require(self.id_weight >= 0 and self.fm_weight >= 0, "loss weights must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SwapConfig":
        return _from_dict(cls, d)


TASKS = ("lipsync", "style_transfer", "video_driven", "swap", "swap_with_audio")
REF_POLICIES = ("train", "same_id_eval", "cross_id")


@dataclass(frozen=True)
class RunConfig:
    """One end-to-end task run (see pipeline.run_task)."""

    task: str
    corpus: str
    out_dir: str
    syncformer_ckpt: str | None = None
    generator_ckpt: str | None = None
    embedder_ckpt: str | None = None
    chunk_len: int = 100
    chunk_overlap: int = 20
    ref_policy: str = "same_id_eval"
    seed: int = 0
    clip: str | None = None
    style_from: str | None = None
    audio_from: str | None = None
    driving_clip: str | None = None
    source_clip: str | None = None
    target_clip: str | None = None
    transfer_template: bool = True
    transfer_style: bool = True
    finetune_steps: int = 0
    extra: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        _require(self.task in TASKS, f"unknown task {self.task!r}; expected one of {TASKS}")
        _require(
            0 <= self.chunk_overlap < self.chunk_len,
            f"need 0 <= chunk_overlap < chunk_len, got {self.chunk_overlap}/{self.chunk_len}",
        )
        _require(
            self.ref_policy in REF_POLICIES,
            f"unknown ref_policy {self.ref_policy!r}; expected one of {REF_POLICIES}",
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return _from_dict(cls, d)


def _from_dict(cls, d: dict):
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    try:
        return cls(**d)
    except TypeError as exc:
        raise ConfigError(f"bad {cls.__name__}: {exc}") from exc
