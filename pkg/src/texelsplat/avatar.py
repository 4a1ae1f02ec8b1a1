"""Per-texel Gaussian parameter maps and canonical-to-world posing.

The avatar is a fixed set of N Gaussians, one per covered texel. Raw decoder
outputs are unconstrained; this module owns the activation conventions that
map them into valid parameter ranges, the posing of canonical splats into
world space, and the binary checkpoint format for parameter maps.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .core_math import (
    MIN_SCALE,
    InvalidInputError,
    dq_rotation,
    dq_transform_point,
    dq_translation,
    quat_left_matrix,
    quat_mul,
    quat_to_rotmat,
)
from .uv_atlas import TexelTable

__all__ = [
    "ActivationConfig",
    "TexelParams",
    "GaussianParamMaps",
    "SplatFrame",
    "PipelineError",
    "activate_geometry",
    "activate_geometry_backward",
    "canonical_positions",
    "pose_gaussians",
    "pose_gaussians_backward",
    "assemble_splat_frame",
    "write_param_maps",
    "read_param_maps",
]

PARAMS_MAGIC = b"ASHP"
PARAMS_VERSION = 1

# raw geometry map channel layout
GEO_CHANNELS = 11
_OFFSET = slice(0, 3)
_SCALE = slice(3, 6)
_ROT = slice(6, 10)
_OPACITY = 10


class PipelineError(RuntimeError):
    """A stage of the avatar pipeline received mismatched inputs."""


@dataclass(frozen=True)
class ActivationConfig:
    """Raw-to-parameter activation bounds, derived from the template size.

    ``scale_log_base`` shifts the exponential scale activation so a zero raw
    value lands on a splat roughly the size of one texel instead of 1 world
    unit; without it, zero-initialized decoders would start pinned at the
    scale clamp with no usable gradient.
    """

    scale_min: float = MIN_SCALE
    scale_max: float = 0.5
    offset_max: float = 0.05
    scale_log_base: float = 0.0

    @classmethod
    def for_template(cls, mesh, table) -> "ActivationConfig":
        diag = mesh.bbox_diagonal
        a = mesh.vertices[mesh.faces[:, 0]]
        b = mesh.vertices[mesh.faces[:, 1]]
        c = mesh.vertices[mesh.faces[:, 2]]
        area = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1).sum()
        spacing = np.sqrt(max(area, 1e-12) / max(table.count, 1))
        return cls(
            scale_min=MIN_SCALE,
            scale_max=0.5 * diag,
            offset_max=0.05 * diag,
            scale_log_base=float(np.log(0.5 * spacing)),
        )


@dataclass
class TexelParams:
    """Activated per-texel parameters, one row per covered texel."""

    offset: np.ndarray  # (N, 3) canonical offsets
    rotation: np.ndarray  # (N, 4) unit quaternions
    scale: np.ndarray  # (N, 3) world units
    opacity: np.ndarray  # (N,)
    sh: np.ndarray  # (N, 16, 3)

    @property
    def count(self) -> int:
        return len(self.offset)


@dataclass
class GaussianParamMaps:
    """Dense (R, R, C) activated parameter textures; mask lives in the table."""

    offset: np.ndarray  # (R, R, 3)
    rotation: np.ndarray  # (R, R, 4)
    scale: np.ndarray  # (R, R, 3)
    opacity: np.ndarray  # (R, R)
    sh: np.ndarray  # (R, R, 48)

    @property
    def resolution(self) -> int:
        return self.offset.shape[0]

    def at_texels(self, table: TexelTable) -> TexelParams:
        u, v = table.texel_coords[:, 0], table.texel_coords[:, 1]
        return TexelParams(
            offset=self.offset[v, u],
            rotation=self.rotation[v, u],
            scale=self.scale[v, u],
            opacity=self.opacity[v, u],
            sh=self.sh[v, u].reshape(-1, 16, 3),
        )

    def validate(self, table: TexelTable, cfg: ActivationConfig) -> None:
        p = self.at_texels(table)
        if np.any(p.scale < cfg.scale_min - 1e-12):
            raise InvalidInputError("scale below the configured minimum")
        if np.any((p.opacity < 0) | (p.opacity > 1)):
            raise InvalidInputError("opacity outside [0, 1]")
        for name, arr in (("offset", p.offset), ("rotation", p.rotation), ("sh", p.sh)):
            if not np.all(np.isfinite(arr)):
                raise InvalidInputError(f"non-finite {name} values")


@dataclass
class SplatFrame:
    """World-space Gaussians ready for projection; count is pose-invariant."""

    positions: np.ndarray  # (N, 3)
    rotations: np.ndarray  # (N, 4) unit quaternions
    scales: np.ndarray  # (N, 3)
    opacities: np.ndarray  # (N,)
    sh: np.ndarray  # (N, 16, 3)
    frame_id: int = 0

    @property
    def count(self) -> int:
        return len(self.positions)


# ---------------------------------------------------------------------------
# activations

_ROT_BASE = np.array([1.0, 0.0, 0.0, 0.0])


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def activate_geometry(raw_geo: np.ndarray, raw_sh: np.ndarray, cfg: ActivationConfig):
    """Map raw decoder outputs to valid parameter maps.

    sigmoid -> opacity, exp (clamped) -> scale, tanh * offset_max -> offset,
    normalize(raw + (1,0,0,0)) -> rotation, identity -> SH. Zero raw input
    therefore yields the template surface: zero offsets, identity rotations.
    """
    raw_geo = np.asarray(raw_geo, dtype=np.float64)
    raw_sh = np.asarray(raw_sh, dtype=np.float64)
    if raw_geo.shape[-1] != GEO_CHANNELS:
        raise InvalidInputError(f"geometry raw maps need {GEO_CHANNELS} channels")
    offset = np.tanh(raw_geo[..., _OFFSET]) * cfg.offset_max
    exponent = np.clip(raw_geo[..., _SCALE] + cfg.scale_log_base, -60.0, 60.0)
    scale = np.clip(np.exp(exponent), cfg.scale_min, cfg.scale_max)
    rot = raw_geo[..., _ROT] + _ROT_BASE
    rot = rot / np.linalg.norm(rot, axis=-1, keepdims=True)
    opacity = _sigmoid(raw_geo[..., _OPACITY])
    return GaussianParamMaps(offset, rot, scale, opacity, raw_sh.copy())


def activate_geometry_backward(raw_geo, cfg: ActivationConfig, g_offset, g_rotation, g_scale, g_opacity):
    """Gradients w.r.t. the raw geometry maps given activated-space gradients."""
    raw_geo = np.asarray(raw_geo, dtype=np.float64)
    grad = np.zeros_like(raw_geo)
    th = np.tanh(raw_geo[..., _OFFSET])
    grad[..., _OFFSET] = g_offset * (1.0 - th * th) * cfg.offset_max
    ex = np.exp(np.clip(raw_geo[..., _SCALE] + cfg.scale_log_base, -60.0, 60.0))
    inside = (ex > cfg.scale_min) & (ex < cfg.scale_max)
    grad[..., _SCALE] = g_scale * ex * inside
    v = raw_geo[..., _ROT] + _ROT_BASE
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    vn = v / norm
    grad[..., _ROT] = (g_rotation - vn * np.sum(g_rotation * vn, axis=-1, keepdims=True)) / norm
    sig = _sigmoid(raw_geo[..., _OPACITY])
    grad[..., _OPACITY] = g_opacity * sig * (1.0 - sig)
    return grad


# ---------------------------------------------------------------------------
# posing


def canonical_positions(table: TexelTable, canonical_vertices) -> np.ndarray:
    """Barycentric texel positions on the canonically deformed template, (N, 3)."""
    canonical_vertices = np.asarray(canonical_vertices, dtype=np.float64)
    if table.vertex_ids.size and table.vertex_ids.max() >= len(canonical_vertices):
        raise InvalidInputError("vertex count does not match the texel table")
    vals = canonical_vertices[table.vertex_ids]
    return np.einsum("nk,nkc->nc", table.barycentric, vals)


def posed_texel_positions(mu_bar, texel_dqs) -> np.ndarray:
    """World positions of the offset-free texel Gaussians."""
    return dq_transform_point(texel_dqs, np.asarray(mu_bar, dtype=np.float64))


def pose_gaussians(mu_bar, params: TexelParams, texel_dqs, frame_id: int = 0) -> SplatFrame:
    """Warp canonical splats to world space through per-texel DQ transforms.

    Positions follow T(μ̄ + d̄); orientations are additionally rotated by the
    rotational part of T so anisotropic splats track the surface.
    """
    mu_bar = np.asarray(mu_bar, dtype=np.float64)
    texel_dqs = np.asarray(texel_dqs, dtype=np.float64)
    if not (len(mu_bar) == params.count == len(texel_dqs)):
        raise PipelineError("posing stage: μ̄ / params / transform counts differ")
    bad = np.nonzero(~np.isfinite(params.offset).all(axis=1))[0]
    if bad.size:
        raise InvalidInputError(f"non-finite offset at texel index {int(bad[0])}")
    positions = dq_transform_point(texel_dqs, mu_bar + params.offset)
    rot_t = dq_rotation(texel_dqs)
    rotations = quat_mul(rot_t, params.rotation)
    return SplatFrame(
        positions=positions,
        rotations=rotations,
        scales=params.scale.copy(),
        opacities=params.opacity.copy(),
        sh=params.sh.copy(),
        frame_id=frame_id,
    )


def pose_gaussians_backward(texel_dqs, g_positions, g_rotations):
    """Pull world-space gradients back to canonical offsets and rotations.

    Returns (g_offset, g_rotation_canonical). Scales, opacities and SH pass
    through posing unchanged, so their gradients are the identity map.
    """
    texel_dqs = np.asarray(texel_dqs, dtype=np.float64)
    rot_t = dq_rotation(texel_dqs)
    r = quat_to_rotmat(rot_t)
    g_offset = np.einsum("nji,nj->ni", r, np.asarray(g_positions, dtype=np.float64))
    left = quat_left_matrix(rot_t)
    g_rot_canonical = np.einsum("nji,nj->ni", left, np.asarray(g_rotations, dtype=np.float64))
    return g_offset, g_rot_canonical


def assemble_splat_frame(
    table: TexelTable,
    maps: GaussianParamMaps,
    canonical_vertices,
    joint_dqs,
    frame_id: int = 0,
) -> SplatFrame:
    """Full per-frame composition: Eq.-style texel positions, then DQ posing."""
    from .rig import texel_skinning_transforms

    if maps.resolution != table.resolution:
        raise PipelineError(
            f"parameter maps at R={maps.resolution} do not match table R={table.resolution}"
        )
    mu_bar = canonical_positions(table, canonical_vertices)
    texel_dqs = texel_skinning_transforms(table.skin_joints, table.skin_weights, joint_dqs)
    return pose_gaussians(mu_bar, maps.at_texels(table), texel_dqs, frame_id=frame_id)


def parameter_vectors(table: TexelTable, maps: GaussianParamMaps, canonical_vertices) -> np.ndarray:
    """Per-texel concatenated parameter vectors (N, 62):

    base position (3) + offset (3) + rotation (4) + scale (3) + opacity (1)
    + SH (48).
    """
    mu_bar = canonical_positions(table, canonical_vertices)
    p = maps.at_texels(table)
    return np.concatenate(
        [mu_bar, p.offset, p.rotation, p.scale, p.opacity[:, None], p.sh.reshape(-1, 48)],
        axis=1,
    )


# ---------------------------------------------------------------------------
# checkpoint io


def write_param_maps(path, maps: GaussianParamMaps, mask: np.ndarray) -> None:
    """ASHP container: header (magic, version, R, N), mask bitmap, f32 maps."""
    r = maps.resolution
    mask = np.asarray(mask, dtype=bool)
    n = int(mask.sum())
    with open(path, "wb") as fh:
        fh.write(PARAMS_MAGIC)
        fh.write(struct.pack("<III", PARAMS_VERSION, r, n))
        fh.write(np.packbits(mask.reshape(-1).astype(np.uint8)).tobytes())
        for arr in (maps.offset, maps.rotation, maps.scale, maps.opacity, maps.sh):
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_param_maps(path):
    """Returns (GaussianParamMaps, mask). Refuses unknown magic or version."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != PARAMS_MAGIC:
            raise InvalidInputError(f"bad checkpoint magic {magic!r}, expected {PARAMS_MAGIC!r}")
        version, r, n = struct.unpack("<III", fh.read(12))
        if version != PARAMS_VERSION:
            raise InvalidInputError(
                f"unsupported checkpoint version {version}, this build reads version {PARAMS_VERSION}"
            )
        mask_bytes = (r * r + 7) // 8
        mask = np.unpackbits(np.frombuffer(fh.read(mask_bytes), dtype=np.uint8))[: r * r]
        mask = mask.reshape(r, r).astype(bool)
        if int(mask.sum()) != n:
            raise InvalidInputError("checkpoint mask does not match its declared count")
        shapes = [(r, r, 3), (r, r, 4), (r, r, 3), (r, r), (r, r, 48)]
        arrays = []
        for shape in shapes:
            count = int(np.prod(shape))
            raw = fh.read(count * 4)
            if len(raw) != count * 4:
                raise InvalidInputError("truncated checkpoint file")
            arrays.append(np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float64))
        if fh.read(1):
            raise InvalidInputError("trailing bytes after checkpoint payload")
    return GaussianParamMaps(*arrays), mask
