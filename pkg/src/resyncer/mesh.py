"""Mesh geometry: canonicalization, template/displacement math, orthographic
projection, white-mesh rasterization, masks, and overlay compositing.

Conventions
-----------
* Canonical space is a [-1, 1] cube; +x right, +y down, +z toward the camera.
* Poses are 4x4 rigid transforms applied as ``v_posed = R v + t``.
* Image space has pixel centers at half-integer coordinates; a pixel (r, c)
  samples the point (c + 0.5, r + 0.5).
* Rasterization uses the top-left fill rule: a pixel center exactly on a
  triangle edge is covered only by the triangle whose top or left edge it
  lies on, so adjacent triangles never double-cover and never leave gaps.
* Depth is the posed z coordinate; larger depth is nearer to the camera.

All arithmetic runs in float64. Corpus data is stored float32; promoting to
float64 makes displacement/apply_displacement exact inverses bitwise.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import DomainError, GeometryError

CANONICAL = "canonical"
POSED = "posed"

MASK_LOWER_HALF = "lower_half_A"
MASK_FULL_FACE = "full_face_A_prime"


@dataclass(frozen=True)
class MeshFrame:
    """A face mesh with fixed topology, tagged with the space it lives in."""

    vertices: np.ndarray  # [V, 3] float64
    faces: np.ndarray  # [F, 3] int32, shared across a corpus
    space_tag: str = CANONICAL

    def __post_init__(self) -> None:
        v = np.asarray(self.vertices, dtype=np.float64)
        f = np.asarray(self.faces, dtype=np.int32)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        if v.ndim != 2 or v.shape[1] != 3:
            raise DomainError(f"vertices must be [V, 3], got {v.shape}")
        if f.ndim != 2 or f.shape[1] != 3:
            raise DomainError(f"faces must be [F, 3], got {f.shape}")
        if f.size and (f.min() < 0 or f.max() >= v.shape[0]):
            raise DomainError("face indices out of range")
        if self.space_tag not in (CANONICAL, POSED):
            raise DomainError(f"unknown space tag {self.space_tag!r}")

    @property
    def vertex_count(self) -> int:
        return self.vertices.shape[0]


@dataclass(frozen=True)
class Camera:
    """Orthographic camera: pixel = center + scale * (x, y); depth = z."""

    scale: float
    cx: float
    cy: float
    shade_lo: float = 0.7
    shade_hi: float = 1.0
    z_lo: float = -0.8
    z_hi: float = 0.8


@dataclass(frozen=True)
class FrameGeometry:
    """Image dimensions plus the known face rectangle (r0, r1, c0, c1), half-open."""

    height: int
    width: int
    face_box: tuple[int, int, int, int]


@dataclass(frozen=True)
class Mask:
    """Binary image mask; kind records which masking policy produced it."""

    pixels: np.ndarray  # [H, W] uint8 in {0, 1}
    kind: str

    def __post_init__(self) -> None:
        p = np.asarray(self.pixels, dtype=np.uint8)
        object.__setattr__(self, "pixels", p)
        if p.ndim != 2:
            raise DomainError(f"mask must be 2-D, got shape {p.shape}")
        if not np.all((p == 0) | (p == 1)):
            raise DomainError("mask pixels must be binary")


@dataclass(frozen=True)
class CompositeInput:
    """Generator input pair: mesh-overlaid target frame plus reference frame.

    Channel order is fixed: overlay first, then reference.
    """

    overlay_frame: np.ndarray  # [H, W, 3] uint8
    reference_frame: np.ndarray  # [H, W, 3] uint8

    def __post_init__(self) -> None:
        if self.overlay_frame.shape != self.reference_frame.shape:
            raise DomainError("overlay and reference frames must share a shape")

    def to_array(self) -> np.ndarray:
        """Stacked [6, H, W] float32 in [-1, 1], overlay channels first."""
        pair = np.concatenate([self.overlay_frame, self.reference_frame], axis=-1)
        return (pair.astype(np.float32) / 127.5 - 1.0).transpose(2, 0, 1)


# ---------------------------------------------------------------------------
# Poses


def pose_from_euler(
    yaw: float, pitch: float, roll: float, tx: float = 0.0, ty: float = 0.0, tz: float = 0.0
) -> np.ndarray:
    """Rigid 4x4 transform from Euler angles (radians): R = Rz(roll) Rx(pitch) Ry(yaw)."""
    cy_, sy_ = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cr, sr = np.cos(roll), np.sin(roll)
    ry = np.array([[cy_, 0, sy_], [0, 1, 0], [-sy_, 0, cy_]])
    rx = np.array([[1, 0, 0], [0, cp, -sp], [0, sp, cp]])
    rz = np.array([[cr, -sr, 0], [sr, cr, 0], [0, 0, 1]])
    pose = np.eye(4)
    pose[:3, :3] = rz @ rx @ ry
    pose[:3, 3] = (tx, ty, tz)
    return pose


def _check_pose(pose: np.ndarray) -> np.ndarray:
    pose = np.asarray(pose, dtype=np.float64)
    if pose.shape != (4, 4):
        raise GeometryError(f"pose must be 4x4, got {pose.shape}")
    if abs(np.linalg.det(pose[:3, :3])) < 1e-8:
        raise GeometryError("singular pose: rotation block is not invertible")
    return pose


def apply_pose(mesh: MeshFrame, pose: np.ndarray) -> MeshFrame:
    """Move a canonical mesh into posed space: v -> R v + t."""
    if mesh.space_tag != CANONICAL:
        raise DomainError("apply_pose expects a canonical mesh")
    pose = _check_pose(pose)
    v = mesh.vertices @ pose[:3, :3].T + pose[:3, 3]
    return replace(mesh, vertices=v, space_tag=POSED)


def canonicalize(mesh: MeshFrame, pose: np.ndarray) -> MeshFrame:
    """Undo a rigid pose, returning the mesh aligned to canonical space."""
    if mesh.space_tag != POSED:
        raise DomainError("canonicalize expects a posed mesh")
    pose = _check_pose(pose)
    inv = np.linalg.inv(pose)
    v = mesh.vertices @ inv[:3, :3].T + inv[:3, 3]
    return replace(mesh, vertices=v, space_tag=CANONICAL)


# ---------------------------------------------------------------------------
# Template / displacement algebra


def _check_shared_topology(a: MeshFrame, b: MeshFrame) -> None:
    if a.vertices.shape != b.vertices.shape or not np.array_equal(a.faces, b.faces):
        raise DomainError("meshes do not share a topology")


def compute_template(meshes: list[MeshFrame]) -> MeshFrame:
    """Per-vertex arithmetic mean of canonical meshes from one identity."""
    if not meshes:
        raise DomainError("cannot build a template from an empty mesh list")
    first = meshes[0]
    for m in meshes:
        if m.space_tag != CANONICAL:
            raise DomainError("template inputs must be canonical")
        _check_shared_topology(first, m)
    stack = np.stack([m.vertices for m in meshes])
    return replace(first, vertices=stack.mean(axis=0))


def displacement(mesh: MeshFrame, template: MeshFrame) -> np.ndarray:
    """Per-vertex offset of a canonical mesh from its identity template."""
    if mesh.space_tag != CANONICAL or template.space_tag != CANONICAL:
        raise DomainError("displacement operates on canonical meshes")
    _check_shared_topology(mesh, template)
    return mesh.vertices - template.vertices


def apply_displacement(template: MeshFrame, delta: np.ndarray) -> MeshFrame:
    """Inverse of displacement: template + delta, bitwise."""
    if template.space_tag != CANONICAL:
        raise DomainError("apply_displacement expects a canonical template")
    delta = np.asarray(delta, dtype=np.float64)
    if delta.shape != template.vertices.shape:
        raise DomainError(
            f"displacement shape {delta.shape} does not match template "
            f"{template.vertices.shape}"
        )
    return replace(template, vertices=template.vertices + delta)


# ---------------------------------------------------------------------------
# Projection and rasterization


def project(
    mesh: MeshFrame, pose: np.ndarray, camera: Camera
) -> tuple[np.ndarray, np.ndarray]:
    """Orthographic projection of a canonical mesh under a pose.

    Returns pixel coordinates [V, 2] (x, y) and per-vertex depth [V].
    """
    posed = apply_pose(mesh, pose)
    v = posed.vertices
    xy = np.empty((v.shape[0], 2))
    xy[:, 0] = camera.cx + camera.scale * v[:, 0]
    xy[:, 1] = camera.cy + camera.scale * v[:, 1]
    return xy, v[:, 2].copy()


def _edge(ax, ay, bx, by, px, py):
    return (bx - ax) * (py - ay) - (by - ay) * (px - ax)


def _boundary_accepts(ax, ay, bx, by) -> bool:
    # Top-left rule under positive-area winding: a pixel center exactly on
    # edge a->b is covered iff the edge is a top edge (horizontal, running
    # +x) or a left edge (running -y).
    dx, dy = bx - ax, by - ay
    return (dy == 0 and dx > 0) or dy < 0


def rasterize_faces(
    xy: np.ndarray, depth: np.ndarray, faces: np.ndarray, height: int, width: int
) -> tuple[np.ndarray, np.ndarray]:
    """Z-buffered triangle fill.

    Returns (face_id [H, W] int32 with -1 for uncovered pixels, and the
    interpolated depth [H, W] of the winning fragment). Zero-area triangles
    are skipped. Larger depth wins (nearer to camera).
    """
    xy = np.asarray(xy, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    if xy.ndim != 2 or xy.shape[1] != 2 or depth.shape != (xy.shape[0],):
        raise DomainError("projection arrays have inconsistent shapes")
    face_id = np.full((height, width), -1, dtype=np.int32)
    zbuf = np.full((height, width), -np.inf)
    for k in range(faces.shape[0]):
        ia, ib, ic = faces[k]
        ax, ay = xy[ia]
        bx, by = xy[ib]
        cx_, cy_ = xy[ic]
        za, zb, zc = depth[ia], depth[ib], depth[ic]
        area2 = _edge(ax, ay, bx, by, cx_, cy_)
        if area2 == 0.0:
            continue
        if area2 < 0.0:
            bx, by, cx_, cy_ = cx_, cy_, bx, by
            zb, zc = zc, zb
            area2 = -area2
        x0 = max(int(np.floor(min(ax, bx, cx_) - 0.5)), 0)
        x1 = min(int(np.ceil(max(ax, bx, cx_) - 0.5)) + 1, width)
        y0 = max(int(np.floor(min(ay, by, cy_) - 0.5)), 0)
        y1 = min(int(np.ceil(max(ay, by, cy_) - 0.5)) + 1, height)
        if x0 >= x1 or y0 >= y1:
            continue
        px = np.arange(x0, x1) + 0.5
        py = (np.arange(y0, y1) + 0.5)[:, None]
        e0 = _edge(bx, by, cx_, cy_, px, py)  # weight of vertex a
        e1 = _edge(cx_, cy_, ax, ay, px, py)  # weight of vertex b
        e2 = _edge(ax, ay, bx, by, px, py)  # weight of vertex c
        inside = (
            ((e0 > 0) | ((e0 == 0) & _boundary_accepts(bx, by, cx_, cy_)))
            & ((e1 > 0) | ((e1 == 0) & _boundary_accepts(cx_, cy_, ax, ay)))
            & ((e2 > 0) | ((e2 == 0) & _boundary_accepts(ax, ay, bx, by)))
        )
        if not inside.any():
            continue
        z = (e0 * za + e1 * zb + e2 * zc) / area2
        window_z = zbuf[y0:y1, x0:x1]
        update = inside & (z > window_z)
        window_z[update] = z[update]
        face_id[y0:y1, x0:x1][update] = k
    return face_id, zbuf


def depth_shade(z: np.ndarray, camera: Camera) -> np.ndarray:
    """Map depth to a shading factor in [shade_lo, shade_hi]; nearer is brighter."""
    frac = np.clip((z - camera.z_lo) / (camera.z_hi - camera.z_lo), 0.0, 1.0)
    return camera.shade_lo + (camera.shade_hi - camera.shade_lo) * frac


def rasterize_white(
    xy: np.ndarray,
    depth: np.ndarray,
    faces: np.ndarray,
    height: int,
    width: int,
    camera: Camera,
) -> np.ndarray:
    """White-mesh rendering: depth-shaded fill in [0.7, 1.0], 0 where uncovered."""
    face_id, zbuf = rasterize_faces(xy, depth, faces, height, width)
    image = np.zeros((height, width))
    covered = face_id >= 0
    image[covered] = depth_shade(zbuf[covered], camera)
    return image


def rasterize_colored(
    xy: np.ndarray,
    depth: np.ndarray,
    faces: np.ndarray,
    face_colors: np.ndarray,
    height: int,
    width: int,
    camera: Camera,
    background: np.ndarray,
) -> np.ndarray:
    """Flat-shaded colored fill over a background; returns float [H, W, 3] in [0, 1]."""
    if background.shape != (height, width, 3):
        raise DomainError(f"background must be [{height}, {width}, 3]")
    if face_colors.shape != (faces.shape[0], 3):
        raise DomainError("face_colors must be [F, 3]")
    face_id, zbuf = rasterize_faces(xy, depth, faces, height, width)
    image = np.array(background, dtype=np.float64, copy=True)
    covered = face_id >= 0
    shade = depth_shade(zbuf[covered], camera)
    image[covered] = face_colors[face_id[covered]] * shade[:, None]
    return np.clip(image, 0.0, 1.0)


# ---------------------------------------------------------------------------
# Masks and overlay compositing


def make_mask(kind: str, geometry: FrameGeometry) -> Mask:
    """Build a masking rectangle from the known face box.

    ``lower_half_A`` covers the lower half of the face box (lip-sync);
    ``full_face_A_prime`` covers the whole box (face swap). The former is
    always contained in the latter.
    """
    r0, r1, c0, c1 = geometry.face_box
    if not (0 <= r0 < r1 <= geometry.height and 0 <= c0 < c1 <= geometry.width):
        raise DomainError(f"face box {geometry.face_box} exceeds the frame")
    pixels = np.zeros((geometry.height, geometry.width), dtype=np.uint8)
    if kind == MASK_LOWER_HALF:
        pixels[(r0 + r1) // 2 : r1, c0:c1] = 1
    elif kind == MASK_FULL_FACE:
        pixels[r0:r1, c0:c1] = 1
    else:
        raise DomainError(f"unknown mask kind {kind!r}")
    return Mask(pixels=pixels, kind=kind)


def overlay(frame: np.ndarray, mask: Mask, mesh_image: np.ndarray) -> np.ndarray:
    """Composite: out = (1 - A) * frame + A * mesh_image, exact per pixel.

    ``mesh_image`` is grayscale in [0, 1] and is broadcast across RGB. With a
    uint8 frame the mesh value is quantized once with round-half-away before
    the select, so unmasked pixels always equal the input frame bitwise.
    """
    frame = np.asarray(frame)
    mesh_image = np.asarray(mesh_image)
    if frame.ndim != 3 or frame.shape[2] != 3:
        raise DomainError(f"frame must be [H, W, 3], got {frame.shape}")
    if mask.pixels.shape != frame.shape[:2] or mesh_image.shape != frame.shape[:2]:
        raise DomainError(
            f"dimension mismatch: frame {frame.shape}, mask {mask.pixels.shape}, "
            f"mesh {mesh_image.shape}"
        )
    a = mask.pixels.astype(bool)[:, :, None]
    if frame.dtype == np.uint8:
        mesh_rgb = np.broadcast_to(
            np.floor(mesh_image * 255.0 + 0.5).astype(np.uint8)[:, :, None], frame.shape
        )
        return np.where(a, mesh_rgb, frame)
    mesh_rgb = np.broadcast_to(mesh_image[:, :, None], frame.shape)
    return np.where(a, mesh_rgb.astype(frame.dtype), frame)


def build_grid_faces(grid_n: int) -> np.ndarray:
    """Triangulate an n x n vertex grid: two triangles per cell, [F, 3] int32."""
    faces = []
    for r in range(grid_n - 1):
        for c in range(grid_n - 1):
            v00 = r * grid_n + c
            v01 = v00 + 1
            v10 = v00 + grid_n
            v11 = v10 + 1
            faces.append((v00, v01, v10))
            faces.append((v01, v11, v10))
    return np.asarray(faces, dtype=np.int32)
