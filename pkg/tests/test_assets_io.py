import filecmp
import json
from pathlib import Path

import numpy as np
import pytest

from texelsplat import assets_io as aio
from texelsplat import avatar as av
from texelsplat import rig
from texelsplat.core_math import InvalidInputError
from texelsplat.renderer import render_reference


def compare_trees(a, b):
    """Byte-compare two directory trees recursively."""
    a, b = Path(a), Path(b)
    files_a = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    if files_a != files_b:
        return False
    return all(filecmp.cmp(a / f, b / f, shallow=False) for f in files_a)


# ---------------------------------------------------------------------------
# individual formats


def test_obj_round_trip(tmp_path, micro_scene):
    path = tmp_path / "mesh.obj"
    aio.write_obj(path, micro_scene.mesh)
    vertices, faces, face_uvs = aio.read_obj(path)
    np.testing.assert_array_equal(vertices, micro_scene.mesh.vertices)
    np.testing.assert_array_equal(faces, micro_scene.mesh.faces)
    np.testing.assert_array_equal(face_uvs, micro_scene.mesh.face_uvs)


def test_obj_requires_uvs(tmp_path):
    path = tmp_path / "plain.obj"
    path.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n")
    with pytest.raises(InvalidInputError, match="UV"):
        aio.read_obj(path)


def test_skeleton_round_trip(tmp_path, micro_scene):
    path = tmp_path / "skeleton.json"
    aio.write_skeleton(path, micro_scene.skeleton)
    back = aio.read_skeleton(path)
    assert back.num_joints == micro_scene.skeleton.num_joints
    assert back.dof_count == micro_scene.skeleton.dof_count
    for a, b in zip(back.joints, micro_scene.skeleton.joints):
        assert a.name == b.name and a.parent == b.parent
        np.testing.assert_array_equal(a.rest_rotation, b.rest_rotation)
        np.testing.assert_array_equal(a.rest_translation, b.rest_translation)


def test_skinning_round_trip(tmp_path, micro_scene):
    path = tmp_path / "skinning.json"
    mesh = micro_scene.mesh
    aio.write_skinning(path, mesh.skin_joints, mesh.skin_weights)
    joints, weights = aio.read_skinning(path)
    np.testing.assert_array_equal(joints, mesh.skin_joints)
    np.testing.assert_array_equal(weights, mesh.skin_weights)


def test_graph_round_trip(tmp_path, micro_scene):
    path = tmp_path / "graph.json"
    aio.write_graph(path, micro_scene.graph, micro_scene.graph_frames)
    graph, frames = aio.read_graph(path)
    np.testing.assert_array_equal(graph.node_positions, micro_scene.graph.node_positions)
    np.testing.assert_array_equal(graph.vertex_nodes, micro_scene.graph.vertex_nodes)
    np.testing.assert_array_equal(graph.vertex_weights, micro_scene.graph.vertex_weights)
    assert len(frames) == len(micro_scene.graph_frames)
    for (a1, t1, d1), (a2, t2, d2) in zip(frames, micro_scene.graph_frames):
        np.testing.assert_array_equal(a1, a2)
        np.testing.assert_array_equal(t1, t2)
        np.testing.assert_array_equal(d1, d2)


def test_cameras_round_trip(tmp_path, micro_scene):
    path = tmp_path / "cameras.json"
    aio.write_cameras(path, micro_scene.cameras)
    back = aio.read_cameras(path)
    assert len(back) == len(micro_scene.cameras)
    for a, b in zip(back, micro_scene.cameras):
        np.testing.assert_array_equal(a.w2c, b.w2c)
        assert (a.fx, a.fy, a.cx, a.cy) == (b.fx, b.fy, b.cx, b.cy)
        assert (a.width, a.height, a.near, a.far) == (b.width, b.height, b.near, b.far)


def test_poses_round_trip(tmp_path, micro_scene):
    path = tmp_path / "poses.json"
    aio.write_poses(path, micro_scene.poses)
    back = aio.read_poses(path)
    assert len(back) == len(micro_scene.poses)
    for a, b in zip(back, micro_scene.poses):
        np.testing.assert_array_equal(a.joint_rotations, b.joint_rotations)
        np.testing.assert_array_equal(a.root_translation, b.root_translation)


def test_float_image_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.uniform(size=(12, 10, 3)).astype(np.float32).astype(np.float64)
    path = tmp_path / "img.f32"
    aio.write_float_image(path, img)
    np.testing.assert_array_equal(aio.read_float_image(path), img)


def test_float_image_truncated(tmp_path):
    path = tmp_path / "img.f32"
    aio.write_float_image(path, np.zeros((8, 8, 3)))
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(InvalidInputError, match="truncated"):
        aio.read_float_image(path)


def test_png_quantization_convention(tmp_path):
    img = np.array([[[0.0, 0.5, 1.0], [1.2, -0.3, 0.002]]])
    q = aio.quantize_u8(img)
    np.testing.assert_array_equal(q[0, 0], [0, 128, 255])  # 0.5*255+0.5 = 128.0
    np.testing.assert_array_equal(q[0, 1], [255, 0, 1])
    path = tmp_path / "img.png"
    aio.write_png(path, img)
    back = aio.read_png(path)
    np.testing.assert_allclose(back, q / 255.0, atol=1e-12)


def test_content_hash_matches_git_blob(tmp_path):
    path = tmp_path / "blob.txt"
    path.write_bytes(b"hello\n")
    # sha1 of "blob 6\0hello\n" is the well-known git hash for this content
    assert aio.content_hash(path) == "ce013625030ba8dba906f756967f9e9ca394464a"


# ---------------------------------------------------------------------------
# scene loading and validation


def test_load_scene_golden(micro_scene):
    assert micro_scene.num_frames == 2
    assert len(micro_scene.cameras) == 2
    assert micro_scene.table.count > 50
    img = micro_scene.image(0, 0)
    assert img.shape == (48, 48, 3)


def test_load_scene_reports_all_violations(micro_scene, tmp_path):
    src = micro_scene.scene_dir
    import shutil

    dst = tmp_path / "broken"
    shutil.copytree(src, dst)
    # break skinning weights and pose joint count at once
    doc = json.loads((dst / "skinning.json").read_text())
    doc["weights"][3] = [[0, 0.8]]
    (dst / "skinning.json").write_text(json.dumps(doc))
    poses = json.loads((dst / "poses.json").read_text())
    poses[1]["joints"] = poses[1]["joints"][:1]
    (dst / "poses.json").write_text(json.dumps(poses))
    with pytest.raises(aio.SceneValidationError) as err:
        aio.load_scene(dst / "scene.json")
    text = str(err.value)
    assert "vertex 3" in text
    assert "frame 1" in text


def test_load_scene_missing_file(micro_scene, tmp_path):
    import shutil

    dst = tmp_path / "missing"
    shutil.copytree(micro_scene.scene_dir, dst)
    (dst / "cameras.json").unlink()
    with pytest.raises(aio.SceneValidationError, match="cameras"):
        aio.load_scene(dst / "scene.json")


def test_load_scene_malformed_json(micro_scene, tmp_path):
    import shutil

    dst = tmp_path / "badjson"
    shutil.copytree(micro_scene.scene_dir, dst)
    (dst / "skeleton.json").write_text("{not json")
    with pytest.raises(InvalidInputError, match="malformed JSON"):
        aio.load_scene(dst / "scene.json")


def test_load_scene_missing_image(micro_scene, tmp_path):
    import shutil

    dst = tmp_path / "noimg"
    shutil.copytree(micro_scene.scene_dir, dst)
    (dst / "images" / "f001_c01.f32").unlink()
    (dst / "images" / "f001_c01.png").unlink()
    with pytest.raises(aio.SceneValidationError, match="frame 1 camera 1"):
        aio.load_scene(dst / "scene.json")


# ---------------------------------------------------------------------------
# synthetic generation


def test_synthetic_deterministic(tmp_path):
    spec = aio.SyntheticSceneSpec(num_cameras=2, num_frames=2, image_width=32,
                                  image_height=32, texel_resolution=16, seed=5)
    aio.make_synthetic_scene(spec, tmp_path / "a")
    aio.make_synthetic_scene(spec, tmp_path / "b")
    assert compare_trees(tmp_path / "a", tmp_path / "b")


def test_synthetic_seed_changes_content(tmp_path):
    spec1 = aio.SyntheticSceneSpec(num_cameras=1, num_frames=1, image_width=32,
                                   image_height=32, texel_resolution=16, seed=5)
    spec2 = aio.SyntheticSceneSpec(num_cameras=1, num_frames=1, image_width=32,
                                   image_height=32, texel_resolution=16, seed=6)
    aio.make_synthetic_scene(spec1, tmp_path / "a")
    aio.make_synthetic_scene(spec2, tmp_path / "b")
    assert not compare_trees(tmp_path / "a", tmp_path / "b")


def test_synthetic_counting_contract(micro_scene):
    img_dir = micro_scene.scene_dir / "images"
    assert len(list(img_dir.glob("*.f32"))) == 2 * 2
    assert len(list(img_dir.glob("*.png"))) == 2 * 2
    assert (micro_scene.scene_dir / "gt_params.ashp").exists()
    assert (micro_scene.scene_dir / "scene.json").exists()


def test_synthetic_gt_rerender_bit_exact(micro_scene):
    gt_maps, mask = av.read_param_maps(micro_scene.scene_dir / "gt_params.ashp")
    np.testing.assert_array_equal(mask, micro_scene.table.coverage_mask())
    for f in range(micro_scene.num_frames):
        setup = micro_scene.frame_setup(f)
        splats = av.pose_gaussians(
            setup["mu_bar"], gt_maps.at_texels(micro_scene.table), setup["texel_dqs"], frame_id=f
        )
        for c, cam in enumerate(micro_scene.cameras):
            img = render_reference(splats, cam, background=micro_scene.background).image
            img32 = img.astype(np.float32).astype(np.float64)
            np.testing.assert_array_equal(img32, micro_scene.image(f, c))


def test_synthetic_unknown_shape(tmp_path):
    with pytest.raises(InvalidInputError, match="shape"):
        aio.make_synthetic_scene(
            aio.SyntheticSceneSpec(shape="torus"), tmp_path / "x"
        )


def test_frame_setup_contents(micro_scene):
    setup = micro_scene.frame_setup(0)
    n = micro_scene.table.count
    assert setup["mu_bar"].shape == (n, 3)
    assert setup["texel_dqs"].shape == (n, 8)
    assert setup["position_texture"].data.shape == (16, 16, 3)
    norms = np.linalg.norm(
        setup["normal_texture"].texel_values(micro_scene.table), axis=1
    )
    covered = setup["normal_texture"].mask[
        micro_scene.table.texel_coords[:, 1], micro_scene.table.texel_coords[:, 0]
    ]
    np.testing.assert_allclose(norms[covered], 1.0, atol=1e-4)
