"""Texel table construction and motion-texture baking.

Each texel whose center falls inside a UV triangle hosts exactly one Gaussian
splat. The table maps texel -> (face, barycentric weights, interpolated
skinning weights) and is a deterministic function of (mesh, resolution), so
the splat count N is fixed for the lifetime of an avatar.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .core_math import InvalidInputError
from .rig import SkinnedMesh

__all__ = [
    "TexelTable",
    "MotionTexture",
    "build_texel_table",
    "bake_position_texture",
    "bake_normal_texture",
    "write_motion_texture",
    "read_motion_texture",
]

TEXTURE_MAGIC = b"ASHT"

# Texels whose center sits exactly on a shared UV edge belong to the lowest
# face id; tolerance for the inside test.
_EDGE_EPS = 1e-12


@dataclass
class TexelTable:
    """Fixed texel -> surface mapping for one mesh at one resolution."""

    resolution: int
    texel_coords: np.ndarray  # (N, 2) integer (u, v), row-major by (v, u)
    face_ids: np.ndarray  # (N,)
    barycentric: np.ndarray  # (N, 3) weights for the face's three corners
    skin_joints: np.ndarray  # (N, K) joint indices, -1 padded
    skin_weights: np.ndarray  # (N, K) interpolated skinning weights
    vertex_ids: np.ndarray  # (N, 3) the covering face's vertex indices

    @property
    def count(self) -> int:
        return len(self.face_ids)

    def coverage_mask(self) -> np.ndarray:
        """Boolean (R, R) mask indexed [v, u]."""
        mask = np.zeros((self.resolution, self.resolution), dtype=bool)
        mask[self.texel_coords[:, 1], self.texel_coords[:, 0]] = True
        return mask


@dataclass
class MotionTexture:
    """R x R x 3 image of world-space positions or unit normals."""

    data: np.ndarray  # (R, R, 3), [v, u, channel]; zero outside the mask
    mask: np.ndarray  # (R, R) bool

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.data.shape[:2] != self.mask.shape or self.data.shape[2] != 3:
            raise InvalidInputError("motion texture shape mismatch")

    @property
    def resolution(self) -> int:
        return self.data.shape[0]

    def texel_values(self, table: TexelTable) -> np.ndarray:
        """Values at the table's covered texels, shape (N, 3)."""
        return self.data[table.texel_coords[:, 1], table.texel_coords[:, 0]]


def _barycentric_coords(points, tri):
    """Barycentric coordinates of 2D points w.r.t. triangle tri (3, 2)."""
    a, b, c = tri[0], tri[1], tri[2]
    v0 = b - a
    v1 = c - a
    v2 = points - a
    d00 = v0 @ v0
    d01 = v0 @ v1
    d11 = v1 @ v1
    denom = d00 * d11 - d01 * d01
    if abs(denom) < 1e-24:
        return None
    d20 = v2 @ v0
    d21 = v2 @ v1
    wb = (d11 * d20 - d01 * d21) / denom
    wc = (d00 * d21 - d01 * d20) / denom
    wa = 1.0 - wb - wc
    return np.stack([wa, wb, wc], axis=-1)


def build_texel_table(mesh: SkinnedMesh, resolution: int) -> TexelTable:
    """Enumerate covered texel centers and their barycentric weights.

    A texel (u, v) is covered iff its center ((u+0.5)/R, (v+0.5)/R) lies inside
    some UV triangle. Two charts claiming the same center is a build error.
    """
    if mesh.face_uvs.size == 0:
        raise InvalidInputError("mesh has no UV coordinates")
    r = int(resolution)
    n_faces = len(mesh.faces)

    e1 = mesh.face_uvs[:, 1] - mesh.face_uvs[:, 0]
    e2 = mesh.face_uvs[:, 2] - mesh.face_uvs[:, 0]
    uv_area = np.abs(e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
    owner = np.full((r, r), -1, dtype=np.int64)
    bary_grid = np.zeros((r, r, 3))
    conflicts = []

    centers_1d = (np.arange(r) + 0.5) / r
    for f in range(n_faces):
        if uv_area[f] <= 1e-12:
            continue
        tri = mesh.face_uvs[f]
        lo = tri.min(axis=0)
        hi = tri.max(axis=0)
        u0 = max(int(np.floor(lo[0] * r - 0.5)), 0)
        u1 = min(int(np.ceil(hi[0] * r - 0.5)) + 1, r)
        v0 = max(int(np.floor(lo[1] * r - 0.5)), 0)
        v1 = min(int(np.ceil(hi[1] * r - 0.5)) + 1, r)
        if u0 >= u1 or v0 >= v1:
            continue
        uu, vv = np.meshgrid(centers_1d[u0:u1], centers_1d[v0:v1], indexing="xy")
        pts = np.stack([uu.ravel(), vv.ravel()], axis=-1)
        bary = _barycentric_coords(pts, tri)
        if bary is None:
            continue
        inside = np.all(bary >= -_EDGE_EPS, axis=-1)
        if not np.any(inside):
            continue
        iu = (uu.ravel()[inside] * r - 0.5).round().astype(np.int64)
        iv = (vv.ravel()[inside] * r - 0.5).round().astype(np.int64)
        bsel = bary[inside]
        prev = owner[iv, iu]
        fresh = prev < 0
        owner[iv[fresh], iu[fresh]] = f
        bary_grid[iv[fresh], iu[fresh]] = bsel[fresh]
        # Overlap between distinct charts is an error; shared-edge ties go to
        # the lowest face id, which is the already-recorded owner here.
        clash = ~fresh
        if np.any(clash):
            on_edge = np.min(bsel[clash], axis=-1) <= 1e-9
            prev_bary = bary_grid[iv[clash], iu[clash]]
            prev_on_edge = np.min(prev_bary, axis=-1) <= 1e-9
            genuine = ~(on_edge | prev_on_edge)
            for j in np.nonzero(genuine)[0]:
                idx = np.nonzero(clash)[0][j]
                conflicts.append((int(iu[idx]), int(iv[idx]), int(prev[idx]), f))

    if conflicts:
        listing = ", ".join(f"texel ({u},{v}) claimed by faces {a} and {b}" for u, v, a, b in conflicts[:8])
        raise InvalidInputError(f"overlapping UV charts: {listing}")

    vs, us = np.nonzero(owner >= 0)
    order = np.lexsort((us, vs))  # row-major by (v, u): defines Gaussian index
    us, vs = us[order], vs[order]
    face_ids = owner[vs, us]
    bary = bary_grid[vs, us]

    tri_vertices = mesh.faces[face_ids]  # (N, 3)
    k = mesh.skin_joints.shape[1]
    joint_union = np.full((len(us), 3 * k), -1, dtype=np.int64)
    weight_union = np.zeros((len(us), 3 * k))
    for corner in range(3):
        vid = tri_vertices[:, corner]
        joint_union[:, corner * k : (corner + 1) * k] = mesh.skin_joints[vid]
        weight_union[:, corner * k : (corner + 1) * k] = mesh.skin_weights[vid] * bary[:, corner : corner + 1]
    weight_union[joint_union < 0] = 0.0
    wsum = weight_union.sum(axis=1, keepdims=True)
    if np.any(wsum <= 1e-8):
        raise InvalidInputError("texel skinning weights vanish")
    weight_union /= wsum

    return TexelTable(
        resolution=r,
        texel_coords=np.stack([us, vs], axis=-1),
        face_ids=face_ids,
        barycentric=bary,
        skin_joints=joint_union,
        skin_weights=weight_union,
        vertex_ids=tri_vertices,
    )


def _interpolate(table: TexelTable, per_vertex: np.ndarray) -> np.ndarray:
    vals = per_vertex[table.vertex_ids]  # (N, 3, C)
    return np.einsum("nk,nkc->nc", table.barycentric, vals)


def bake_position_texture(table: TexelTable, vertices) -> MotionTexture:
    """Inverse texture mapping of vertex positions into UV space."""
    vertices = np.asarray(vertices, dtype=np.float64)
    if table.vertex_ids.size and table.vertex_ids.max() >= len(vertices):
        raise InvalidInputError("vertex count does not match the texel table")
    r = table.resolution
    data = np.zeros((r, r, 3))
    mask = np.zeros((r, r), dtype=bool)
    vals = _interpolate(table, vertices)
    data[table.texel_coords[:, 1], table.texel_coords[:, 0]] = vals
    mask[table.texel_coords[:, 1], table.texel_coords[:, 0]] = True
    return MotionTexture(data, mask)


def bake_normal_texture(table: TexelTable, vertex_normals) -> MotionTexture:
    """As bake_position_texture, renormalized; zero-length blends are masked out."""
    normals = np.asarray(vertex_normals, dtype=np.float64)
    if table.vertex_ids.size and table.vertex_ids.max() >= len(normals):
        raise InvalidInputError("normal count does not match the texel table")
    r = table.resolution
    data = np.zeros((r, r, 3))
    mask = np.zeros((r, r), dtype=bool)
    vals = _interpolate(table, normals)
    norms = np.linalg.norm(vals, axis=1)
    good = norms > 1e-8
    vals[good] /= norms[good, None]
    vals[~good] = 0.0
    u, v = table.texel_coords[:, 0], table.texel_coords[:, 1]
    data[v, u] = vals
    mask[v, u] = good
    return MotionTexture(data, mask)


def write_motion_texture(path, texture: MotionTexture) -> None:
    """Binary grid: magic + u32 R header, packed mask bitmap, float32 data."""
    r = texture.resolution
    mask_bits = np.packbits(texture.mask.reshape(-1).astype(np.uint8))
    with open(path, "wb") as fh:
        fh.write(TEXTURE_MAGIC)
        fh.write(struct.pack("<I", r))
        fh.write(mask_bits.tobytes())
        fh.write(texture.data.astype("<f4").tobytes())


def read_motion_texture(path) -> MotionTexture:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != TEXTURE_MAGIC:
            raise InvalidInputError(f"bad texture magic {magic!r}, expected {TEXTURE_MAGIC!r}")
        (r,) = struct.unpack("<I", fh.read(4))
        n_mask_bytes = (r * r + 7) // 8
        mask_bits = np.frombuffer(fh.read(n_mask_bytes), dtype=np.uint8)
        mask = np.unpackbits(mask_bits)[: r * r].reshape(r, r).astype(bool)
        raw = fh.read(r * r * 3 * 4)
        if len(raw) != r * r * 3 * 4:
            raise InvalidInputError("truncated motion texture file")
        data = np.frombuffer(raw, dtype="<f4").reshape(r, r, 3).astype(np.float64)
    return MotionTexture(data, mask)
