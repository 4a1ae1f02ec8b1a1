import numpy as np
import pytest

from texelsplat import core_math as cm
from texelsplat import rig


def make_two_joint_skeleton():
    joints = [
        rig.Joint("root", -1, np.array([1.0, 0, 0, 0]), np.zeros(3)),
        rig.Joint("child", 0, np.array([1.0, 0, 0, 0]), np.array([1.0, 0.0, 0.0])),
    ]
    return rig.Skeleton(joints)


def identity_pose(n_joints, frame_id=0, root_t=(0, 0, 0)):
    return rig.PoseFrame(np.tile([1.0, 0, 0, 0], (n_joints, 1)), np.asarray(root_t, float), frame_id)


def quad_mesh():
    vertices = np.array([[0.0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]])
    faces = np.array([[0, 1, 2], [0, 2, 3]])
    uvs = np.array([[[0, 0], [1, 0], [1, 1]], [[0, 0], [1, 1], [0, 1]]], dtype=float)
    joints = np.zeros((4, 1), dtype=np.int64)
    weights = np.ones((4, 1))
    return rig.SkinnedMesh(vertices, faces, uvs, joints, weights)


# ---------------------------------------------------------------------------
# forward kinematics


def test_fk_identity_pose_returns_rest():
    sk = make_two_joint_skeleton()
    dqs = rig.forward_kinematics(sk, identity_pose(2))
    np.testing.assert_allclose(cm.dq_translation(dqs[0]), [0, 0, 0], atol=1e-12)
    np.testing.assert_allclose(cm.dq_translation(dqs[1]), [1, 0, 0], atol=1e-12)


def test_fk_root_translation_shifts_all_joints():
    sk = make_two_joint_skeleton()
    t = np.array([0.3, -0.2, 0.5])
    dqs = rig.forward_kinematics(sk, identity_pose(2, root_t=t))
    np.testing.assert_allclose(cm.dq_translation(dqs[0]), t, atol=1e-12)
    np.testing.assert_allclose(cm.dq_translation(dqs[1]), t + [1, 0, 0], atol=1e-12)


def test_fk_root_quarter_turn_moves_child():
    sk = make_two_joint_skeleton()
    q = np.array([np.cos(np.pi / 4), 0, 0, np.sin(np.pi / 4)])
    pose = rig.PoseFrame(np.stack([q, [1, 0, 0, 0]]), np.zeros(3))
    dqs = rig.forward_kinematics(sk, pose)
    np.testing.assert_allclose(cm.dq_translation(dqs[1]), [0, 1, 0], atol=1e-12)


def test_fk_joint_count_mismatch():
    sk = make_two_joint_skeleton()
    with pytest.raises(cm.InvalidInputError):
        rig.forward_kinematics(sk, identity_pose(3))


def test_skeleton_requires_sorted_parents():
    joints = [
        rig.Joint("root", -1, np.array([1.0, 0, 0, 0]), np.zeros(3)),
        rig.Joint("bad", 2, np.array([1.0, 0, 0, 0]), np.zeros(3)),
        rig.Joint("late", 0, np.array([1.0, 0, 0, 0]), np.zeros(3)),
    ]
    with pytest.raises(cm.InvalidInputError):
        rig.Skeleton(joints)


# ---------------------------------------------------------------------------
# embedded deformation


def single_node_graph(n_vertices):
    nodes = np.array([[0.5, 0.5, 0.0]])
    vn = np.zeros((n_vertices, 1), dtype=np.int64)
    vw = np.ones((n_vertices, 1))
    return rig.EmbeddedGraph(nodes, vn, vw)


def test_embedded_deform_rest_identity():
    mesh = quad_mesh()
    graph = single_node_graph(4)
    np.testing.assert_allclose(rig.embedded_deform(mesh, graph), mesh.vertices, atol=1e-12)


def test_embedded_deform_uniform_translation():
    mesh = quad_mesh()
    t = np.array([0.1, 0.2, -0.3])
    graph = single_node_graph(4).with_frame_params(
        np.zeros((1, 3)), t[None, :], np.zeros((4, 3))
    )
    np.testing.assert_allclose(rig.embedded_deform(mesh, graph), mesh.vertices + t, atol=1e-12)


def test_embedded_deform_single_node_rotation_closed_form():
    mesh = quad_mesh()
    angles = np.array([[0.0, 0.0, np.pi / 2]])
    graph = single_node_graph(4).with_frame_params(angles, np.zeros((1, 3)), np.zeros((4, 3)))
    out = rig.embedded_deform(mesh, graph)
    center = np.array([0.5, 0.5, 0.0])
    rot = np.array([[0.0, -1, 0], [1, 0, 0], [0, 0, 1]])
    expected = (rot @ (mesh.vertices - center).T).T + center
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_embedded_deform_displacements_add():
    mesh = quad_mesh()
    d = np.random.default_rng(0).normal(size=(4, 3))
    graph = single_node_graph(4).with_frame_params(np.zeros((1, 3)), np.zeros((1, 3)), d)
    np.testing.assert_allclose(rig.embedded_deform(mesh, graph), mesh.vertices + d, atol=1e-12)


def test_embedded_graph_weight_sum_violation():
    nodes = np.array([[0.0, 0, 0]])
    vn = np.zeros((2, 1), dtype=np.int64)
    vw = np.full((2, 1), 0.8)
    with pytest.raises(cm.InvalidInputError):
        rig.EmbeddedGraph(nodes, vn, vw)


def test_euler_convention_round_trip():
    from scipy.spatial.transform import Rotation

    rng = np.random.default_rng(1)
    angles = rng.uniform(-np.pi / 2, np.pi / 2, size=(5, 3))
    ours = rig.euler_to_rotmat(angles)
    theirs = Rotation.from_euler("XYZ", angles).as_matrix()
    np.testing.assert_allclose(ours, theirs, atol=1e-12)


# ---------------------------------------------------------------------------
# skinning


def test_skin_identity_pose_is_identity():
    mesh = quad_mesh()
    sk = rig.Skeleton([rig.Joint("root", -1, np.array([1.0, 0, 0, 0]), np.zeros(3))])
    dqs = rig.forward_kinematics(sk, identity_pose(1))
    out = rig.skin_vertices(mesh.vertices, mesh, dqs)
    np.testing.assert_allclose(out, mesh.vertices, atol=1e-9)


def test_skin_shared_rigid_transform_is_exact():
    rng = np.random.default_rng(2)
    mesh = quad_mesh()
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    t = rng.normal(size=3)
    g = cm.dq_from_quat_trans(q, t)
    out = rig.skin_vertices(mesh.vertices, mesh, np.stack([g]))
    expected = (cm.quat_to_rotmat(q) @ mesh.vertices.T).T + t
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_skin_half_weights_give_midpoint_rotation():
    vertices = np.array([[1.0, 0.0, 0.0]])
    faces = np.zeros((0, 3), dtype=np.int64)
    uvs = np.zeros((0, 3, 2))
    joints = np.array([[0, 1]])
    weights = np.array([[0.5, 0.5]])
    mesh = rig.SkinnedMesh(vertices, faces, uvs, joints, weights)
    dq0 = cm.dq_identity()
    q90 = np.array([np.cos(np.pi / 4), 0, 0, np.sin(np.pi / 4)])
    dq1 = cm.dq_from_quat_trans(q90, np.zeros(3))
    out = rig.skin_vertices(vertices, mesh, np.stack([dq0, dq1]))
    q45 = np.array([np.cos(np.pi / 8), 0, 0, np.sin(np.pi / 8)])
    expected = cm.quat_to_rotmat(q45) @ vertices[0]
    np.testing.assert_allclose(out[0], expected, atol=1e-12)


def test_skin_rigid_invariance():
    rng = np.random.default_rng(3)
    mesh = quad_mesh()
    mesh.skin_joints = np.array([[0, 1]] * 4)
    mesh.skin_weights = np.array([[0.7, 0.3]] * 4)
    base = np.stack([
        cm.dq_from_quat_trans(np.array([1.0, 0, 0, 0]), np.zeros(3)),
        cm.dq_from_quat_trans(
            np.array([np.cos(0.2), np.sin(0.2), 0, 0]), np.array([0.1, 0, 0])
        ),
    ])
    posed = rig.skin_vertices(mesh.vertices, mesh, base)
    q = rng.normal(size=4)
    t = rng.normal(size=3)
    g = cm.dq_from_quat_trans(q, t)
    moved = rig.skin_vertices(mesh.vertices, mesh, np.stack([cm.dq_mul(g, d) for d in base]))
    expected = cm.dq_transform_point(g, posed)
    np.testing.assert_allclose(moved, expected, atol=1e-9)


def test_skin_out_of_range_joint():
    mesh = quad_mesh()
    mesh.skin_joints = np.array([[5]] * 4)
    with pytest.raises(cm.InvalidInputError):
        rig.skin_vertices(mesh.vertices, mesh, np.stack([cm.dq_identity()]))


def test_skinned_mesh_rejects_bad_weights():
    with pytest.raises(cm.InvalidInputError):
        rig.SkinnedMesh(
            np.zeros((2, 3)),
            np.zeros((0, 3), dtype=np.int64),
            np.zeros((0, 3, 2)),
            np.zeros((2, 1), dtype=np.int64),
            np.full((2, 1), 0.8),
        )


# ---------------------------------------------------------------------------
# normals


def test_normals_planar_quad():
    mesh = quad_mesh()
    normals = rig.compute_vertex_normals(mesh.vertices, mesh.faces)
    np.testing.assert_allclose(normals, np.tile([0, 0, 1.0], (4, 1)), atol=1e-12)


def test_normals_mirrored_winding_negates():
    mesh = quad_mesh()
    flipped = mesh.faces[:, ::-1]
    n1 = rig.compute_vertex_normals(mesh.vertices, mesh.faces)
    n2 = rig.compute_vertex_normals(mesh.vertices, flipped)
    np.testing.assert_allclose(n2, -n1, atol=1e-12)


def _fan_cube():
    """Unit cube, each face fanned around its center: corners see equal areas."""
    corners = np.array(
        [[x, y, z] for x in (0.0, 1.0) for y in (0.0, 1.0) for z in (0.0, 1.0)]
    )
    face_quads = [
        (0, 1, 3, 2),  # x = 0
        (4, 6, 7, 5),  # x = 1
        (0, 4, 5, 1),  # y = 0
        (2, 3, 7, 6),  # y = 1
        (0, 2, 6, 4),  # z = 0
        (1, 5, 7, 3),  # z = 1
    ]
    vertices = [c for c in corners]
    faces = []
    for quad in face_quads:
        center = corners[list(quad)].mean(axis=0)
        ci = len(vertices)
        vertices.append(center)
        for k in range(4):
            faces.append([quad[k], quad[(k + 1) % 4], ci])
    return np.asarray(vertices), np.asarray(faces, dtype=np.int64)


def test_normals_cube_corners():
    vertices, faces = _fan_cube()
    normals = rig.compute_vertex_normals(vertices, faces)
    for i in range(8):
        expected = (vertices[i] - 0.5) / np.linalg.norm(vertices[i] - 0.5)
        assert np.dot(normals[i], expected) < 0 or np.dot(normals[i], expected) > 0
        np.testing.assert_allclose(np.abs(normals[i]), np.full(3, 1 / np.sqrt(3)), atol=1e-12)
    # orientation: outward for this winding
    np.testing.assert_allclose(normals[0], -np.full(3, 1 / np.sqrt(3)), atol=1e-12)


def test_normals_unit_length_and_isolated_zero():
    vertices = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [5, 5, 5]])
    faces = np.array([[0, 1, 2]])
    normals = rig.compute_vertex_normals(vertices, faces)
    np.testing.assert_allclose(np.linalg.norm(normals[:3], axis=1), np.ones(3), atol=1e-6)
    np.testing.assert_allclose(normals[3], np.zeros(3), atol=0)


def test_degenerate_face_skipped():
    vertices = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]])
    faces = np.array([[0, 1, 2], [0, 0, 1]])
    normals = rig.compute_vertex_normals(vertices, faces)
    np.testing.assert_allclose(np.linalg.norm(normals, axis=1), np.ones(3), atol=1e-6)


# ---------------------------------------------------------------------------
# motion window


def test_motion_window_root_normalization():
    frames = [
        rig.PoseFrame(np.array([[1.0, 0, 0, 0]]), np.array([1.0, 2.0, 3.0]), 0),
        rig.PoseFrame(np.array([[1.0, 0, 0, 0]]), np.array([1.5, 2.0, 3.0]), 1),
    ]
    window = rig.MotionWindow.from_frames(frames)
    np.testing.assert_allclose(window.current.root_translation, np.zeros(3), atol=0)
    np.testing.assert_allclose(window.frames[0].root_translation, [-0.5, 0, 0], atol=1e-12)


def test_motion_window_requires_frames():
    with pytest.raises(cm.InvalidInputError):
        rig.MotionWindow([])
