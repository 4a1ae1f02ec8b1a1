"""File formats, scene loading/validation, and the synthetic scene generator.

Formats owned here: OBJ meshes with per-corner UVs, JSON documents for
skeleton / skinning / embedded graph / cameras / pose sequences, float32
image dumps ("ASHI"), 8-bit PNGs, and the scene manifest tying them together.

The synthetic generator builds a fully self-consistent desk-scale scene: a
rigged capped tube, a smooth pose sequence, a camera ring, random (but
smooth) ground-truth Gaussian parameter maps, and ground-truth images
rendered from those exact parameters — the basis for every end-to-end
oracle in the test suite.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from . import avatar as av
from . import rig as rigmod
from . import uv_atlas
from .core_math import InvalidInputError, quat_normalize
from .renderer import Camera, render_reference

__all__ = [
    "SceneValidationError",
    "SyntheticSceneSpec",
    "SceneData",
    "read_obj",
    "write_obj",
    "read_skeleton",
    "write_skeleton",
    "read_skinning",
    "write_skinning",
    "read_graph",
    "write_graph",
    "read_cameras",
    "write_cameras",
    "read_poses",
    "write_poses",
    "read_float_image",
    "write_float_image",
    "write_png",
    "read_png",
    "load_scene",
    "make_synthetic_scene",
    "content_hash",
]

IMAGE_MAGIC = b"ASHI"
IMAGE_VERSION = 1


class SceneValidationError(InvalidInputError):
    """Scene loading failed; ``violations`` lists every problem found."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("scene validation failed:\n  " + "\n  ".join(self.violations))


# ---------------------------------------------------------------------------
# mesh (OBJ with per-face-corner UVs)


def write_obj(path, mesh: rigmod.SkinnedMesh) -> None:
    lines = ["# texelsplat template mesh"]
    for v in mesh.vertices:
        lines.append(f"v {float(v[0])!r} {float(v[1])!r} {float(v[2])!r}")
    uv_index = {}
    face_uv_ids = []
    for face_uv in mesh.face_uvs:
        ids = []
        for uv in face_uv:
            key = (float(uv[0]), float(uv[1]))
            if key not in uv_index:
                uv_index[key] = len(uv_index) + 1
                lines.append(f"vt {key[0]!r} {key[1]!r}")
            ids.append(uv_index[key])
        face_uv_ids.append(ids)
    for face, uv_ids in zip(mesh.faces, face_uv_ids):
        lines.append(
            f"f {face[0] + 1}/{uv_ids[0]} {face[1] + 1}/{uv_ids[1]} {face[2] + 1}/{uv_ids[2]}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


def read_obj(path):
    """Returns (vertices, faces, face_uvs); skinning comes from a sidecar file."""
    vertices, uvs, faces, face_uvs = [], [], [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts or parts[0] == "#":
            continue
        if parts[0] == "v":
            vertices.append([float(x) for x in parts[1:4]])
        elif parts[0] == "vt":
            uvs.append([float(x) for x in parts[1:3]])
        elif parts[0] == "f":
            corner_v, corner_uv = [], []
            for corner in parts[1:4]:
                fields = corner.split("/")
                corner_v.append(int(fields[0]) - 1)
                if len(fields) < 2 or not fields[1]:
                    raise InvalidInputError(f"{path}: face corner {corner!r} has no UV index")
                corner_uv.append(int(fields[1]) - 1)
            faces.append(corner_v)
            face_uvs.append(corner_uv)
    vertices = np.asarray(vertices, dtype=np.float64)
    uvs = np.asarray(uvs, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    face_uvs = uvs[np.asarray(face_uvs, dtype=np.int64)]
    return vertices, faces, face_uvs


# ---------------------------------------------------------------------------
# JSON documents


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise InvalidInputError(f"{path}: malformed JSON ({exc})") from exc


def _write_json(path, doc):
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def write_skeleton(path, skeleton: rigmod.Skeleton) -> None:
    doc = {
        "dof_count": skeleton.dof_count,
        "joints": [
            {
                "name": j.name,
                "parent": j.parent,
                "rest_rotation": list(map(float, j.rest_rotation)),
                "rest_translation": list(map(float, j.rest_translation)),
            }
            for j in skeleton.joints
        ],
    }
    _write_json(path, doc)


def read_skeleton(path) -> rigmod.Skeleton:
    doc = _read_json(path)
    joints = [
        rigmod.Joint(
            j["name"], int(j["parent"]),
            np.asarray(j["rest_rotation"], dtype=np.float64),
            np.asarray(j["rest_translation"], dtype=np.float64),
        )
        for j in doc["joints"]
    ]
    return rigmod.Skeleton(joints)


def write_skinning(path, skin_joints, skin_weights) -> None:
    rows = []
    for joints, weights in zip(skin_joints, skin_weights):
        rows.append(
            [[int(j), float(w)] for j, w in zip(joints, weights) if j >= 0]
        )
    _write_json(path, {"weights": rows})


def read_skinning(path):
    doc = _read_json(path)
    rows = doc["weights"]
    k = max((len(r) for r in rows), default=1)
    joints = np.full((len(rows), k), -1, dtype=np.int64)
    weights = np.zeros((len(rows), k))
    for i, row in enumerate(rows):
        for slot, (j, w) in enumerate(row):
            joints[i, slot] = int(j)
            weights[i, slot] = float(w)
    return joints, weights


def write_graph(path, graph: rigmod.EmbeddedGraph, frame_params=None) -> None:
    """frame_params: list of (angles (G,3), translations (G,3), displacements (V,3))."""
    doc = {
        "nodes": graph.node_positions.tolist(),
        "vertex_nodes": graph.vertex_nodes.tolist(),
        "vertex_weights": graph.vertex_weights.tolist(),
    }
    if frame_params is not None:
        doc["frames"] = [
            {
                "angles": np.asarray(a).tolist(),
                "translations": np.asarray(t).tolist(),
                "displacements": np.asarray(d).tolist(),
            }
            for a, t, d in frame_params
        ]
    _write_json(path, doc)


def read_graph(path):
    """Returns (EmbeddedGraph with zero frame params, per-frame params or None)."""
    doc = _read_json(path)
    graph = rigmod.EmbeddedGraph(
        np.asarray(doc["nodes"], dtype=np.float64),
        np.asarray(doc["vertex_nodes"], dtype=np.int64),
        np.asarray(doc["vertex_weights"], dtype=np.float64),
    )
    frames = None
    if "frames" in doc:
        frames = [
            (
                np.asarray(f["angles"], dtype=np.float64),
                np.asarray(f["translations"], dtype=np.float64),
                np.asarray(f["displacements"], dtype=np.float64),
            )
            for f in doc["frames"]
        ]
    return graph, frames


def write_cameras(path, cameras: list[Camera]) -> None:
    doc = {
        "cameras": [
            {
                "K": c.intrinsics.reshape(-1).tolist(),
                "W2C": c.w2c.reshape(-1).tolist(),
                "width": c.width,
                "height": c.height,
                "near": c.near,
                "far": c.far,
            }
            for c in cameras
        ]
    }
    _write_json(path, doc)


def read_cameras(path) -> list[Camera]:
    doc = _read_json(path)
    cameras = []
    for c in doc["cameras"]:
        k = np.asarray(c["K"], dtype=np.float64).reshape(3, 3)
        cameras.append(
            Camera(
                fx=k[0, 0], fy=k[1, 1], cx=k[0, 2], cy=k[1, 2],
                w2c=np.asarray(c["W2C"], dtype=np.float64).reshape(4, 4),
                width=int(c["width"]), height=int(c["height"]),
                near=float(c.get("near", 0.01)), far=float(c.get("far", 100.0)),
            )
        )
    return cameras


def write_poses(path, poses: list[rigmod.PoseFrame]) -> None:
    doc = [
        {
            "root": p.root_translation.tolist(),
            "joints": p.joint_rotations.tolist(),
        }
        for p in poses
    ]
    _write_json(path, doc)


def read_poses(path) -> list[rigmod.PoseFrame]:
    doc = _read_json(path)
    return [
        rigmod.PoseFrame(
            np.asarray(p["joints"], dtype=np.float64),
            np.asarray(p["root"], dtype=np.float64),
            frame_id=i,
        )
        for i, p in enumerate(doc)
    ]


# ---------------------------------------------------------------------------
# images


def write_float_image(path, image) -> None:
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[..., None]
    h, w, c = image.shape
    with open(path, "wb") as fh:
        fh.write(IMAGE_MAGIC)
        fh.write(struct.pack("<IIII", IMAGE_VERSION, h, w, c))
        fh.write(np.ascontiguousarray(image, dtype="<f4").tobytes())


def read_float_image(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != IMAGE_MAGIC:
            raise InvalidInputError(f"bad image magic {magic!r}, expected {IMAGE_MAGIC!r}")
        version, h, w, c = struct.unpack("<IIII", fh.read(16))
        if version != IMAGE_VERSION:
            raise InvalidInputError(
                f"unsupported image version {version}, this build reads version {IMAGE_VERSION}"
            )
        raw = fh.read(h * w * c * 4)
        if len(raw) != h * w * c * 4:
            raise InvalidInputError("truncated image file")
        return np.frombuffer(raw, dtype="<f4").reshape(h, w, c).astype(np.float64)


def quantize_u8(image) -> np.ndarray:
    """Clamp to [0, 1] and scale to 8 bits, rounding half up."""
    return np.floor(np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_png(path, image) -> None:
    Image.fromarray(quantize_u8(image)).save(path, format="PNG")


def read_png(path) -> np.ndarray:
    return np.asarray(Image.open(path), dtype=np.float64) / 255.0


def content_hash(path) -> str:
    """git-style blob hash of a file's bytes."""
    data = Path(path).read_bytes()
    h = hashlib.sha1()
    h.update(f"blob {len(data)}\0".encode())
    h.update(data)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# scene manifest and loading


@dataclass
class SceneData:
    """A validated in-memory scene; per-frame geometry is computed lazily."""

    scene_dir: Path
    mesh: rigmod.SkinnedMesh
    skeleton: rigmod.Skeleton
    graph: rigmod.EmbeddedGraph
    graph_frames: list | None
    poses: list
    cameras: list
    image_dir: Path | None
    table: uv_atlas.TexelTable
    activation: av.ActivationConfig
    background: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self._setups = {}
        self._images = {}

    @property
    def num_frames(self) -> int:
        return len(self.poses)

    def pose(self, f) -> rigmod.PoseFrame:
        return self.poses[f]

    def frame_graph(self, f) -> rigmod.EmbeddedGraph:
        if self.graph_frames is None:
            return self.graph
        a, t, d = self.graph_frames[f]
        return self.graph.with_frame_params(a, t, d)

    def compute_frame(self, f) -> dict:
        """Rig, skinning and texture baking for frame f (uncached)."""
        canonical = rigmod.embedded_deform(self.mesh, self.frame_graph(f))
        joint_dqs = rigmod.forward_kinematics(self.skeleton, self.poses[f])
        texel_dqs = rigmod.texel_skinning_transforms(
            self.table.skin_joints, self.table.skin_weights, joint_dqs
        )
        posed = rigmod.skin_vertices(canonical, self.mesh, joint_dqs)
        normals = rigmod.compute_vertex_normals(posed, self.mesh.faces)
        return {
            "canonical": canonical,
            "joint_dqs": joint_dqs,
            "texel_dqs": texel_dqs,
            "posed": posed,
            "normals": normals,
            "mu_bar": av.canonical_positions(self.table, canonical),
            "position_texture": uv_atlas.bake_position_texture(self.table, posed),
            "normal_texture": uv_atlas.bake_normal_texture(self.table, normals),
        }

    def frame_setup(self, f) -> dict:
        if f not in self._setups:
            self._setups[f] = self.compute_frame(f)
        return self._setups[f]

    def image_path(self, f, c) -> Path:
        if self.image_dir is None:
            raise InvalidInputError("scene has no image directory")
        return self.image_dir / f"f{f:03d}_c{c:02d}.f32"

    def image(self, f, c) -> np.ndarray:
        key = (f, c)
        if key not in self._images:
            path = self.image_path(f, c)
            if path.exists():
                self._images[key] = read_float_image(path)
            else:
                self._images[key] = read_png(path.with_suffix(".png"))
        return self._images[key]


def load_scene(manifest_path) -> SceneData:
    """Load and cross-validate a scene bundle; reports every violation found."""
    manifest_path = Path(manifest_path)
    doc = _read_json(manifest_path)
    base = manifest_path.parent
    violations = []

    required = ["mesh", "skeleton", "skinning", "graph", "cameras", "poses", "texel_resolution"]
    for key in required:
        if key not in doc:
            violations.append(f"manifest: missing field '{key}'")
    if violations:
        raise SceneValidationError(violations)

    paths = {}
    for key in ("mesh", "skeleton", "skinning", "graph", "cameras", "poses"):
        p = base / doc[key]
        paths[key] = p
        if not p.exists():
            violations.append(f"{key}: file not found: {p}")
    image_dir = None
    if doc.get("images"):
        image_dir = base / doc["images"]
        if not image_dir.is_dir():
            violations.append(f"images: directory not found: {image_dir}")
    if violations:
        raise SceneValidationError(violations)

    vertices, faces, face_uvs = read_obj(paths["mesh"])
    skeleton = read_skeleton(paths["skeleton"])
    skin_joints, skin_weights = read_skinning(paths["skinning"])
    graph, graph_frames = read_graph(paths["graph"])
    cameras = read_cameras(paths["cameras"])
    poses = read_poses(paths["poses"])

    if len(skin_joints) != len(vertices):
        violations.append(
            f"skinning: {len(skin_joints)} weight rows for {len(vertices)} mesh vertices"
        )
    sums = skin_weights.sum(axis=1)
    for i in np.nonzero(np.abs(sums - 1.0) > 1e-6)[0][:8]:
        violations.append(f"skinning: vertex {i} weights sum to {sums[i]:.6f}, expected 1")
    if skin_joints.size and skin_joints.max() >= skeleton.num_joints:
        violations.append(
            f"skinning: joint index {int(skin_joints.max())} out of range for "
            f"{skeleton.num_joints}-joint skeleton"
        )
    for f, pose in enumerate(poses):
        if len(pose.joint_rotations) != skeleton.num_joints:
            violations.append(
                f"poses: frame {f} has {len(pose.joint_rotations)} joints, skeleton has "
                f"{skeleton.num_joints}"
            )
    if len(graph.vertex_nodes) != len(vertices):
        violations.append(
            f"graph: {len(graph.vertex_nodes)} vertex links for {len(vertices)} mesh vertices"
        )
    if graph_frames is not None and len(graph_frames) != len(poses):
        violations.append(
            f"graph: {len(graph_frames)} frame parameter sets for {len(poses)} poses"
        )
    gsums = graph.vertex_weights.sum(axis=1)
    for i in np.nonzero(np.abs(gsums - 1.0) > 1e-6)[0][:8]:
        violations.append(f"graph: vertex {i} node weights sum to {gsums[i]:.6f}, expected 1")
    if image_dir is not None:
        for f in range(len(poses)):
            for c in range(len(cameras)):
                stem = image_dir / f"f{f:03d}_c{c:02d}"
                if not (stem.with_suffix(".f32").exists() or stem.with_suffix(".png").exists()):
                    violations.append(f"images: missing frame {f} camera {c} ({stem}.f32/.png)")
    if violations:
        raise SceneValidationError(violations)

    mesh = rigmod.SkinnedMesh(vertices, faces, face_uvs, skin_joints, skin_weights)
    table = uv_atlas.build_texel_table(mesh, int(doc["texel_resolution"]))
    background = tuple(doc.get("background", (0.0, 0.0, 0.0)))
    return SceneData(
        scene_dir=base,
        mesh=mesh,
        skeleton=skeleton,
        graph=graph,
        graph_frames=graph_frames,
        poses=poses,
        cameras=cameras,
        image_dir=image_dir,
        table=table,
        activation=av.ActivationConfig.for_template(mesh, table),
        background=background,
    )


# ---------------------------------------------------------------------------
# synthetic scene generation


@dataclass(frozen=True)
class SyntheticSceneSpec:
    shape: str = "tube"
    num_cameras: int = 4
    num_frames: int = 8
    image_width: int = 96
    image_height: int = 96
    texel_resolution: int = 32
    seed: int = 7


def _tube_mesh(radius=0.28, height=1.6, n_around=16, n_along=12):
    ring = np.arange(n_around)
    angles = 2 * np.pi * ring / n_around
    vertices = []
    for j in range(n_along + 1):
        z = height * j / n_along
        for a in angles:
            vertices.append([radius * np.cos(a), radius * np.sin(a), z])
    bottom_center = len(vertices)
    vertices.append([0.0, 0.0, 0.0])
    top_center = len(vertices)
    vertices.append([0.0, 0.0, height])
    vertices = np.asarray(vertices)

    faces, face_uvs = [], []

    def side_uv(i, j):
        return [0.02 + 0.96 * i / n_around, 0.02 + 0.68 * j / n_along]

    for j in range(n_along):
        for i in range(n_around):
            ni = (i + 1) % n_around
            a = j * n_around + i
            b = j * n_around + ni
            c = (j + 1) * n_around + ni
            d = (j + 1) * n_around + i
            ua, ub = side_uv(i, j), side_uv(i + 1, j)
            uc, ud = side_uv(i + 1, j + 1), side_uv(i, j + 1)
            faces.append([a, b, c])
            face_uvs.append([ua, ub, uc])
            faces.append([a, c, d])
            face_uvs.append([ua, uc, ud])

    def cap_uv(center, i):
        a = 2 * np.pi * i / n_around
        return [center[0] + 0.11 * np.cos(a), center[1] + 0.11 * np.sin(a)]

    for i in range(n_around):
        ni = (i + 1) % n_around
        # bottom cap faces down: wind clockwise seen from +z
        faces.append([bottom_center, ni, i])
        face_uvs.append([[0.25, 0.86], cap_uv((0.25, 0.86), i + 1), cap_uv((0.25, 0.86), i)])
        top0 = n_along * n_around
        faces.append([top_center, top0 + i, top0 + ni])
        face_uvs.append([[0.75, 0.86], cap_uv((0.75, 0.86), i), cap_uv((0.75, 0.86), i + 1)])

    faces = np.asarray(faces, dtype=np.int64)
    face_uvs = np.asarray(face_uvs, dtype=np.float64)

    z = vertices[:, 2] / height
    w_child = np.clip((z - 0.3) / 0.4, 0.0, 1.0)
    w_child = w_child * w_child * (3 - 2 * w_child)  # smoothstep
    skin_joints = np.tile([0, 1], (len(vertices), 1))
    skin_weights = np.stack([1.0 - w_child, w_child], axis=1)
    return rigmod.SkinnedMesh(vertices, faces, face_uvs, skin_joints, skin_weights), height


def _tube_skeleton(height):
    joints = [
        rigmod.Joint("root", -1, np.array([1.0, 0, 0, 0]), np.zeros(3)),
        rigmod.Joint("spine", 0, np.array([1.0, 0, 0, 0]), np.array([0.0, 0.0, height / 2])),
    ]
    return rigmod.Skeleton(joints)


def _tube_graph(mesh, rng, n_levels=4, n_around=4):
    zs = np.linspace(mesh.vertices[:, 2].min(), mesh.vertices[:, 2].max(), n_levels)
    nodes = []
    for z in zs:
        for k in range(n_around):
            a = 2 * np.pi * k / n_around
            nodes.append([0.15 * np.cos(a), 0.15 * np.sin(a), z])
    nodes = np.asarray(nodes)
    d = np.linalg.norm(mesh.vertices[:, None, :] - nodes[None, :, :], axis=2)
    k = 4
    nearest = np.argsort(d, axis=1)[:, :k]
    nd = np.take_along_axis(d, nearest, axis=1)
    w = 1.0 / (nd + 1e-3)
    w /= w.sum(axis=1, keepdims=True)
    return rigmod.EmbeddedGraph(nodes, nearest, w)


def _smooth_field(rng, resolution, channels, scale):
    """Low-frequency random map: coarse grid, bilinear upsampling."""
    coarse_n = max(resolution // 8, 2)
    coarse = rng.normal(scale=scale, size=(coarse_n, coarse_n, channels))
    # bilinear resample to (resolution, resolution)
    src = np.linspace(0, coarse_n - 1, resolution)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, coarse_n - 1)
    t = src - i0
    rows = coarse[i0] * (1 - t)[:, None, None] + coarse[i1] * t[:, None, None]
    cols = rows[:, i0] * (1 - t)[None, :, None] + rows[:, i1] * t[None, :, None]
    return cols


def _sample_gt_maps(rng, resolution, act_cfg):
    """Smooth random ground-truth parameter maps with zero offsets.

    Offsets are exactly zero so the warmup stage's frozen-position contract
    can reproduce the ground-truth renders exactly.
    """
    r = resolution
    raw_geo = np.zeros((r, r, 11))
    raw_geo[..., 3:6] = _smooth_field(rng, r, 3, 0.4)
    raw_geo[..., 6:10] = _smooth_field(rng, r, 4, 0.3)
    raw_geo[..., 10] = 1.5 + _smooth_field(rng, r, 1, 0.5)[..., 0]
    raw_sh = np.zeros((r, r, 48))
    # layout is (16 bases, 3 channels) flattened row-major: DC occupies 0..2
    dc = 0.2 + 0.6 * (0.5 + 0.5 * np.tanh(_smooth_field(rng, r, 3, 1.0)))
    raw_sh[..., 0:3] = (dc - 0.5) / 0.28209479177387814
    raw_sh[..., 3:] = _smooth_field(rng, r, 45, 0.03)
    maps = av.activate_geometry(raw_geo, raw_sh, act_cfg)
    # quantize to float32 so re-rendering from the saved checkpoint is bit-exact
    return av.GaussianParamMaps(
        offset=maps.offset.astype(np.float32).astype(np.float64),
        rotation=maps.rotation.astype(np.float32).astype(np.float64),
        scale=maps.scale.astype(np.float32).astype(np.float64),
        opacity=maps.opacity.astype(np.float32).astype(np.float64),
        sh=maps.sh.astype(np.float32).astype(np.float64),
    )


def _ring_camera(angle, target, distance, width, height, focal):
    pos = target + distance * np.array([np.cos(angle), np.sin(angle), 0.0])
    z = target - pos
    z /= np.linalg.norm(z)
    up = np.array([0.0, 0.0, 1.0])
    x = np.cross(z, up)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    w2c = np.eye(4)
    w2c[:3, :3] = np.stack([x, y, z])
    w2c[:3, 3] = -w2c[:3, :3] @ pos
    return Camera(fx=focal, fy=focal, cx=width / 2, cy=height / 2, w2c=w2c,
                  width=width, height=height, near=0.1, far=20.0)


def _tube_poses(rng, skeleton, n_frames):
    poses = []
    for f in range(n_frames):
        phase = 2 * np.pi * f / max(n_frames, 1)
        twist = 0.25 * np.sin(phase)
        bend = 0.5 * np.sin(phase + 0.7)
        q_root = np.array([np.cos(twist / 2), 0.0, 0.0, np.sin(twist / 2)])
        q_spine = np.array([np.cos(bend / 2), np.sin(bend / 2), 0.0, 0.0])
        root_t = np.array([0.05 * np.sin(phase), 0.05 * np.cos(phase), 0.0])
        poses.append(rigmod.PoseFrame(np.stack([q_root, q_spine]), root_t, frame_id=f))
    return poses


def _tube_graph_frames(rng, graph, n_vertices, n_frames):
    g = len(graph.node_positions)
    frames = []
    for f in range(n_frames):
        phase = 2 * np.pi * f / max(n_frames, 1)
        angles = 0.04 * np.sin(phase + np.linspace(0, np.pi, 3 * g)).reshape(g, 3)
        translations = 0.015 * np.cos(phase + np.linspace(0, np.pi, 3 * g)).reshape(g, 3)
        displacements = 0.004 * np.sin(phase + np.linspace(0, 2 * np.pi, 3 * n_vertices)).reshape(
            n_vertices, 3
        )
        frames.append((angles, translations, displacements))
    return frames


def make_synthetic_scene(spec: SyntheticSceneSpec, out_dir) -> Path:
    """Generate a self-consistent scene bundle on disk; returns the manifest path.

    Everything is a pure function of the spec, so two runs with the same seed
    produce byte-identical directory trees.
    """
    if spec.shape != "tube":
        raise InvalidInputError(f"unknown synthetic template shape {spec.shape!r}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)

    mesh, height = _tube_mesh()
    skeleton = _tube_skeleton(height)
    graph = _tube_graph(mesh, rng)
    poses = _tube_poses(rng, skeleton, spec.num_frames)
    graph_frames = _tube_graph_frames(rng, graph, len(mesh.vertices), spec.num_frames)
    target = np.array([0.0, 0.0, height / 2])
    cameras = [
        _ring_camera(
            2 * np.pi * c / spec.num_cameras, target, 2.6,
            spec.image_width, spec.image_height,
            focal=1.05 * min(spec.image_width, spec.image_height),
        )
        for c in range(spec.num_cameras)
    ]

    table = uv_atlas.build_texel_table(mesh, spec.texel_resolution)
    act_cfg = av.ActivationConfig.for_template(mesh, table)
    gt_maps = _sample_gt_maps(rng, spec.texel_resolution, act_cfg)

    write_obj(out / "mesh.obj", mesh)
    write_skeleton(out / "skeleton.json", skeleton)
    write_skinning(out / "skinning.json", mesh.skin_joints, mesh.skin_weights)
    write_graph(out / "graph.json", graph, graph_frames)
    write_cameras(out / "cameras.json", cameras)
    write_poses(out / "poses.json", poses)
    av.write_param_maps(out / "gt_params.ashp", gt_maps, table.coverage_mask())

    manifest = {
        "mesh": "mesh.obj",
        "skeleton": "skeleton.json",
        "skinning": "skinning.json",
        "graph": "graph.json",
        "cameras": "cameras.json",
        "poses": "poses.json",
        "images": "images",
        "texel_resolution": spec.texel_resolution,
        "background": [0.0, 0.0, 0.0],
        "generator": {
            "shape": spec.shape,
            "seed": spec.seed,
            "num_cameras": spec.num_cameras,
            "num_frames": spec.num_frames,
            "image_size": [spec.image_width, spec.image_height],
        },
    }
    _write_json(out / "scene.json", manifest)

    img_dir = out / "images"
    img_dir.mkdir(exist_ok=True)
    scene = SceneData(
        scene_dir=out, mesh=mesh, skeleton=skeleton, graph=graph,
        graph_frames=graph_frames, poses=poses, cameras=cameras,
        image_dir=None, table=table, activation=act_cfg,
        background=(0.0, 0.0, 0.0),
    )
    for f in range(spec.num_frames):
        setup = scene.frame_setup(f)
        splats = av.pose_gaussians(
            setup["mu_bar"], gt_maps.at_texels(table), setup["texel_dqs"], frame_id=f
        )
        for c, cam in enumerate(cameras):
            img = render_reference(splats, cam, background=manifest["background"]).image
            img32 = img.astype(np.float32).astype(np.float64)
            write_float_image(img_dir / f"f{f:03d}_c{c:02d}.f32", img32)
            write_png(img_dir / f"f{f:03d}_c{c:02d}.png", img32)
    return out / "scene.json"
