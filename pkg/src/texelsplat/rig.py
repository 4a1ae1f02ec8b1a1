"""Skeleton kinematics, embedded deformation, and dual-quaternion skinning.

Produces the two vertex sets the rest of the pipeline consumes: canonical
vertices (template deformed by the embedded graph and per-vertex
displacements) and posed vertices (canonical vertices skinned by the
current pose).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core_math import (
    InvalidInputError,
    dq_blend,
    dq_from_quat_trans,
    dq_mul,
    dq_transform_point,
    quat_normalize,
    quat_to_rotmat,
)

__all__ = [
    "Joint",
    "Skeleton",
    "PoseFrame",
    "MotionWindow",
    "EmbeddedGraph",
    "SkinnedMesh",
    "euler_to_rotmat",
    "forward_kinematics",
    "embedded_deform",
    "skin_vertices",
    "texel_skinning_transforms",
    "compute_vertex_normals",
]


@dataclass(frozen=True)
class Joint:
    name: str
    parent: int  # -1 for the root
    rest_rotation: np.ndarray  # (4,) wxyz
    rest_translation: np.ndarray  # (3,)


@dataclass
class Skeleton:
    """Topologically sorted joint list; exactly one root (parent == -1)."""

    joints: list[Joint]

    def __post_init__(self):
        roots = [i for i, j in enumerate(self.joints) if j.parent < 0]
        if len(roots) != 1 or roots[0] != 0:
            raise InvalidInputError("skeleton must have exactly one root at index 0")
        for i, j in enumerate(self.joints[1:], start=1):
            if j.parent >= i:
                raise InvalidInputError(f"joint {i} parent {j.parent} is not topologically sorted")

    @property
    def num_joints(self) -> int:
        return len(self.joints)

    @property
    def dof_count(self) -> int:
        # 3 rotational DoF per joint plus the root translation.
        return 3 * len(self.joints) + 3


@dataclass
class PoseFrame:
    """Per-joint local rotations (wxyz) plus a root translation."""

    joint_rotations: np.ndarray  # (J, 4)
    root_translation: np.ndarray  # (3,)
    frame_id: int = 0

    def __post_init__(self):
        self.joint_rotations = quat_normalize(np.asarray(self.joint_rotations, dtype=np.float64))
        self.root_translation = np.asarray(self.root_translation, dtype=np.float64)
        if not np.all(np.isfinite(self.root_translation)):
            raise InvalidInputError("non-finite root translation")


@dataclass
class MotionWindow:
    """Sliding window of poses, root-normalized so the last frame sits at zero."""

    frames: list[PoseFrame]

    def __post_init__(self):
        if len(self.frames) < 1:
            raise InvalidInputError("motion window must contain at least one frame")

    @classmethod
    def from_frames(cls, frames: list[PoseFrame]) -> "MotionWindow":
        anchor = np.asarray(frames[-1].root_translation, dtype=np.float64)
        normalized = [
            PoseFrame(f.joint_rotations.copy(), f.root_translation - anchor, f.frame_id)
            for f in frames
        ]
        return cls(normalized)

    @property
    def current(self) -> PoseFrame:
        return self.frames[-1]


@dataclass
class EmbeddedGraph:
    """Sparse deformation graph: rest nodes plus per-vertex node links.

    Per-frame parameters (Euler angles, node translations, per-vertex
    displacements) are inputs here, not learned quantities.
    """

    node_positions: np.ndarray  # (G, 3)
    vertex_nodes: np.ndarray  # (V, K) node indices, -1 padded
    vertex_weights: np.ndarray  # (V, K) weights, 0 on padding
    node_angles: np.ndarray = None  # (G, 3) intrinsic XYZ Euler, radians
    node_translations: np.ndarray = None  # (G, 3)
    vertex_displacements: np.ndarray = None  # (V, 3)

    def __post_init__(self):
        self.node_positions = np.asarray(self.node_positions, dtype=np.float64)
        self.vertex_nodes = np.asarray(self.vertex_nodes, dtype=np.int64)
        self.vertex_weights = np.asarray(self.vertex_weights, dtype=np.float64)
        g = len(self.node_positions)
        v = len(self.vertex_nodes)
        if self.node_angles is None:
            self.node_angles = np.zeros((g, 3))
        if self.node_translations is None:
            self.node_translations = np.zeros((g, 3))
        if self.vertex_displacements is None:
            self.vertex_displacements = np.zeros((v, 3))
        self.node_angles = np.asarray(self.node_angles, dtype=np.float64)
        self.node_translations = np.asarray(self.node_translations, dtype=np.float64)
        self.vertex_displacements = np.asarray(self.vertex_displacements, dtype=np.float64)
        self.validate()

    def validate(self):
        if np.any(self.vertex_weights < 0):
            raise InvalidInputError("embedded graph weights must be nonnegative")
        sums = self.vertex_weights.sum(axis=1)
        bad = np.nonzero(np.abs(sums - 1.0) > 1e-6)[0]
        if bad.size:
            raise InvalidInputError(
                f"embedded graph weights must sum to 1: offending vertices {bad[:8].tolist()}"
            )
        if np.any((self.vertex_weights > 0).sum(axis=1) < 1):
            raise InvalidInputError("every vertex must connect to at least one node")

    def with_frame_params(self, angles, translations, displacements) -> "EmbeddedGraph":
        return EmbeddedGraph(
            self.node_positions,
            self.vertex_nodes,
            self.vertex_weights,
            angles,
            translations,
            displacements,
        )


@dataclass
class SkinnedMesh:
    """Template mesh with per-face-corner UVs and per-vertex skinning weights."""

    vertices: np.ndarray  # (V, 3) rest positions
    faces: np.ndarray  # (F, 3) vertex indices
    face_uvs: np.ndarray  # (F, 3, 2) per-corner UVs in [0, 1]^2
    skin_joints: np.ndarray  # (V, K) joint indices, -1 padded
    skin_weights: np.ndarray  # (V, K) weights, 0 on padding

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.int64)
        self.face_uvs = np.asarray(self.face_uvs, dtype=np.float64)
        self.skin_joints = np.asarray(self.skin_joints, dtype=np.int64)
        self.skin_weights = np.asarray(self.skin_weights, dtype=np.float64)
        self.validate()

    def validate(self):
        v = len(self.vertices)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= v):
            raise InvalidInputError("face index out of range")
        if np.any(self.face_uvs < -1e-9) or np.any(self.face_uvs > 1 + 1e-9):
            raise InvalidInputError("UVs must lie in [0, 1]^2")
        sums = self.skin_weights.sum(axis=1)
        bad = np.nonzero(np.abs(sums - 1.0) > 1e-6)[0]
        if bad.size:
            raise InvalidInputError(
                f"skinning weights must sum to 1: offending vertices {bad[:8].tolist()}"
            )

    @property
    def bbox_diagonal(self) -> float:
        return float(np.linalg.norm(self.vertices.max(axis=0) - self.vertices.min(axis=0)))


def euler_to_rotmat(angles):
    """Intrinsic XYZ Euler angles (radians) to rotation matrices, (..., 3, 3)."""
    a = np.asarray(angles, dtype=np.float64)
    cx, cy, cz = np.cos(a[..., 0]), np.cos(a[..., 1]), np.cos(a[..., 2])
    sx, sy, sz = np.sin(a[..., 0]), np.sin(a[..., 1]), np.sin(a[..., 2])
    # R = Rx @ Ry @ Rz (intrinsic XYZ)
    rows = [
        np.stack([cy * cz, -cy * sz, sy], axis=-1),
        np.stack([cx * sz + cz * sx * sy, cx * cz - sx * sy * sz, -cy * sx], axis=-1),
        np.stack([sx * sz - cx * cz * sy, cz * sx + cx * sy * sz, cx * cy], axis=-1),
    ]
    return np.stack(rows, axis=-2)


def forward_kinematics(skeleton: Skeleton, pose: PoseFrame) -> np.ndarray:
    """Global joint transforms as dual quaternions, shape (J, 8).

    Root global = root rest ∘ (pose rotation + root translation); every child
    global = parent global ∘ (child rest ∘ child pose rotation).
    """
    if len(pose.joint_rotations) != skeleton.num_joints:
        raise InvalidInputError(
            f"pose has {len(pose.joint_rotations)} joints, skeleton has {skeleton.num_joints}"
        )
    globals_ = np.empty((skeleton.num_joints, 8))
    for i, joint in enumerate(skeleton.joints):
        rest = dq_from_quat_trans(joint.rest_rotation, joint.rest_translation)
        if i == 0:
            local_pose = dq_from_quat_trans(pose.joint_rotations[0], pose.root_translation)
        else:
            local_pose = dq_from_quat_trans(pose.joint_rotations[i], np.zeros(3))
        local = dq_mul(rest, local_pose)
        if joint.parent < 0:
            globals_[i] = local
        else:
            globals_[i] = dq_mul(globals_[joint.parent], local)
    return globals_


def embedded_deform(mesh: SkinnedMesh, graph: EmbeddedGraph) -> np.ndarray:
    """Canonical vertices: graph-deformed template plus per-vertex displacements."""
    graph.validate()
    rot = euler_to_rotmat(graph.node_angles)  # (G, 3, 3)
    nodes = graph.vertex_nodes
    w = graph.vertex_weights
    safe_nodes = np.where(nodes < 0, 0, nodes)
    rel = mesh.vertices[:, None, :] - graph.node_positions[safe_nodes]  # (V, K, 3)
    rotated = np.einsum("vkij,vkj->vki", rot[safe_nodes], rel)
    contrib = rotated + graph.node_positions[safe_nodes] + graph.node_translations[safe_nodes]
    deformed = np.sum(w[..., None] * contrib, axis=1)
    return graph.vertex_displacements + deformed


def _vertex_blend_dqs(joint_indices, joint_weights, joint_dqs) -> np.ndarray:
    """Blend joint dual quaternions per row of a (V, K) weight table."""
    if joint_indices.size and joint_indices.max() >= len(joint_dqs):
        raise InvalidInputError("skinning references an out-of-range joint")
    safe = np.where(joint_indices < 0, 0, joint_indices)
    dqs = joint_dqs[safe]  # (V, K, 8)
    w = np.where(joint_indices < 0, 0.0, joint_weights)
    return dq_blend(w, dqs)


def skin_vertices(canonical_vertices, mesh: SkinnedMesh, joint_dqs) -> np.ndarray:
    """Pose canonical vertices by per-vertex blended dual quaternions."""
    canonical_vertices = np.asarray(canonical_vertices, dtype=np.float64)
    if len(canonical_vertices) != len(mesh.vertices):
        raise InvalidInputError("canonical vertex count does not match the mesh")
    blended = _vertex_blend_dqs(mesh.skin_joints, mesh.skin_weights, np.asarray(joint_dqs))
    return dq_transform_point(blended, canonical_vertices)


def texel_skinning_transforms(joint_indices, joint_weights, joint_dqs) -> np.ndarray:
    """Blended dual quaternions for arbitrary (N, K) weight tables (texels)."""
    return _vertex_blend_dqs(
        np.asarray(joint_indices, dtype=np.int64),
        np.asarray(joint_weights, dtype=np.float64),
        np.asarray(joint_dqs, dtype=np.float64),
    )


def compute_vertex_normals(vertices, faces) -> np.ndarray:
    """Area-weighted vertex normals; isolated vertices get a zero normal."""
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    normals = np.zeros_like(vertices)
    a = vertices[faces[:, 0]]
    b = vertices[faces[:, 1]]
    c = vertices[faces[:, 2]]
    cross = np.cross(b - a, c - a)  # |cross| = 2 * area, so area weighting is built in
    area2 = np.linalg.norm(cross, axis=1)
    keep = area2 > 2e-12
    for k in range(3):
        np.add.at(normals, faces[keep, k], cross[keep])
    norms = np.linalg.norm(normals, axis=1)
    nonzero = norms > 1e-12
    normals[nonzero] /= norms[nonzero, None]
    return normals
