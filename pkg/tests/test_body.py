import warnings

import numpy as np
import pytest
import torch
from scipy.spatial.transform import Rotation

from clothavatar.body import (DTYPE, TORSO, BodyConfig, BodyConfigError, Camera, ContractError, Pose,
                              SkinnedMesh, build_canonical_body, camera_depth, lbs_deform, load_mesh,
                              load_poses, save_mesh, save_poses, subdivide, vertex_normals)


@pytest.fixture(scope="module")
def body():
    return build_canonical_body(BodyConfig())


def test_default_body_has_22_joints_and_normalized_weights(body):
    assert body.num_joints == 22
    np.testing.assert_allclose(body.skin_weights.sum(1), 1.0, atol=1e-12)
    assert (body.skin_weights >= 0).all()


def test_build_is_deterministic():
    a, b = build_canonical_body(BodyConfig()), build_canonical_body(BodyConfig())
    assert np.array_equal(a.vertices, b.vertices) and np.array_equal(a.skin_weights, b.skin_weights)
    assert np.array_equal(a.faces, b.faces)


def test_torso_length_changes_torso_extent():
    def extent(length):
        m = build_canonical_body(BodyConfig(torso_length=length, levels=0))
        y = m.vertices[m.part_hint == TORSO, 1]
        return y.max() - y.min()
    assert extent(0.6) - extent(0.5) == pytest.approx(0.1, abs=1e-6)


def test_invalid_config_rejected():
    with pytest.raises(BodyConfigError):
        build_canonical_body(BodyConfig(leg_length=-1.0))


def _triangle_mesh():
    v = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]])
    w = np.array([[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]])
    return SkinnedMesh(v, np.array([[0, 1, 2]]), np.zeros((2, 3)), np.array([-1, 0]), w, np.zeros(3, int))


def test_subdivide_counts_and_weights():
    m = _triangle_mesh()
    s = subdivide(m, 1)
    assert s.num_vertices == 6 and len(s.faces) == 4
    np.testing.assert_allclose(s.skin_weights.sum(1), 1.0, atol=1e-6)
    same = subdivide(m, 0)
    assert np.array_equal(same.vertices, m.vertices) and np.array_equal(same.faces, m.faces)


def _area(v, f):
    t = v[f]
    return 0.5 * np.linalg.norm(np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0]), axis=1).sum()


def test_subdivide_preserves_planar_area():
    m = _triangle_mesh()
    s = subdivide(m, 2)
    assert _area(s.vertices, s.faces) == pytest.approx(_area(m.vertices, m.faces), abs=1e-6)
    assert s.num_vertices >= m.num_vertices


def test_lbs_identity_is_exact(body):
    out = lbs_deform(body.vertices, np.zeros_like(body.vertices), Pose.identity(22), body)
    assert torch.equal(out, torch.as_tensor(body.vertices, dtype=DTYPE))


def _two_bone():
    joints = np.array([[0.0, 0, 0], [1.0, 0, 0]])
    v = np.array([[2.0, 0, 0]])
    return SkinnedMesh(v, np.zeros((0, 3), int), joints, np.array([-1, 0]), np.array([[0.0, 1.0]]), np.zeros(1, int))


def test_lbs_two_bone_hand_computation():
    m = _two_bone()
    rot = np.zeros((2, 3))
    rot[1] = [0, 0, np.pi / 2]
    out = lbs_deform(m.vertices, np.zeros((1, 3)), Pose(rot), m).numpy()
    # child joint at (1,0,0); (1,0,0) relative to it goes to (0,1,0) relative to it
    np.testing.assert_allclose(out[0], [1.0, 1.0, 0.0], atol=1e-9)


def test_offsets_applied_before_skinning():
    m = _two_bone()
    rot = np.zeros((2, 3))
    rot[1] = [0, 0, np.pi / 2]
    d = np.array([[0.1, 0.0, 0.0]])
    out = lbs_deform(m.vertices, d, Pose(rot), m).numpy()[0]
    # hand computation: (v + d) relative to child is (1.1, 0, 0) -> rotated (0, 1.1, 0)
    np.testing.assert_allclose(out, [1.0, 1.1, 0.0], atol=1e-12)
    skin_then_offset = lbs_deform(m.vertices, np.zeros((1, 3)), Pose(rot), m).numpy()[0] + d[0]
    assert np.abs(out - skin_then_offset).max() > 0.05


def test_lbs_root_rotation_is_rigid(body):
    rng = np.random.default_rng(0)
    rot = np.zeros((22, 3))
    rot[0] = rng.normal(size=3)
    t = np.array([0.3, -0.2, 0.5])
    d = 0.01 * rng.normal(size=body.vertices.shape)
    out = lbs_deform(body.vertices, d, Pose(rot, t), body).numpy()
    R = Rotation.from_rotvec(rot[0]).as_matrix()
    np.testing.assert_allclose(out, (body.vertices + d) @ R.T + t, atol=1e-9)


def test_lbs_commutes_with_global_rotation(body):
    rng = np.random.default_rng(1)
    rot = 0.3 * rng.normal(size=(22, 3))
    d = 0.01 * rng.normal(size=body.vertices.shape)
    base = lbs_deform(body.vertices, d, Pose(rot), body).numpy()
    G = Rotation.from_rotvec([0.2, -0.7, 0.4])
    rot2 = rot.copy()
    rot2[0] = (G * Rotation.from_rotvec(rot[0])).as_rotvec()
    out = lbs_deform(body.vertices, d, Pose(rot2), body).numpy()
    np.testing.assert_allclose(out, base @ G.as_matrix().T, atol=1e-9)


def test_lbs_rejects_bad_offsets(body):
    with pytest.raises(ContractError):
        lbs_deform(body.vertices, np.zeros((3, 3)), Pose.identity(22), body)
    bad = np.zeros_like(body.vertices)
    bad[0, 0] = np.nan
    with pytest.raises(ContractError):
        lbs_deform(body.vertices, bad, Pose.identity(22), body)


def test_normals_flat_square():
    v = np.array([[0.0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]])
    f = np.array([[0, 1, 2], [0, 2, 3]])
    np.testing.assert_allclose(vertex_normals(v, f).numpy(), np.tile([0, 0, 1.0], (4, 1)), atol=1e-9)


def _icosphere(levels=2):
    t = (1 + 5 ** 0.5) / 2
    v = np.array([[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0], [0, -1, t], [0, 1, t], [0, -1, -t],
                  [0, 1, -t], [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]], dtype=float)
    f = np.array([[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11], [1, 5, 9], [5, 11, 4],
                  [11, 10, 2], [10, 7, 6], [7, 1, 8], [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8],
                  [3, 8, 9], [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]])
    m = SkinnedMesh(v, f, np.zeros((1, 3)), np.array([-1]), np.ones((12, 1)), np.zeros(12, int))
    m = subdivide(m, levels)
    m.vertices = m.vertices / np.linalg.norm(m.vertices, axis=1, keepdims=True)
    return m


def test_normals_match_sphere():
    m = _icosphere()
    n = vertex_normals(m.vertices, m.faces).numpy()
    ang = np.degrees(np.arccos(np.clip((n * m.vertices).sum(1), -1, 1)))
    assert ang.max() < 5.0
    np.testing.assert_allclose(np.linalg.norm(n, axis=1), 1.0, atol=1e-9)


def test_normals_rotate_with_mesh(body):
    R = Rotation.from_rotvec([0.4, 1.1, -0.3]).as_matrix()
    n0 = vertex_normals(body.vertices, body.faces).numpy()
    n1 = vertex_normals(body.vertices @ R.T, body.faces).numpy()
    np.testing.assert_allclose(n1, n0 @ R.T, atol=1e-9)


def test_degenerate_normal_falls_back_to_z():
    v = np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0], [5, 5, 5]])
    with pytest.warns(RuntimeWarning):
        n = vertex_normals(v, np.array([[0, 1, 2]])).numpy()
    np.testing.assert_allclose(n, np.tile([0, 0, 1.0], (4, 1)))


def test_camera_depth_cases():
    cam = Camera(100, 100, 0, 0)
    z, behind = camera_depth(np.array([[0.0, 0, 2]]), cam)
    assert float(z[0]) == 2.0 and not bool(behind[0])
    cam2 = Camera(100, 100, 0, 0, np.eye(3), np.array([0.0, 0, 1.0]))
    z2, _ = camera_depth(np.zeros((1, 3)), cam2)
    assert float(z2[0]) == 1.0


def test_camera_depth_matches_matrix_oracle():
    rng = np.random.default_rng(2)
    R = Rotation.from_rotvec(rng.normal(size=3)).as_matrix()
    t = rng.normal(size=3)
    cam = Camera(50, 50, 10, 10, R, t)
    v = rng.normal(size=(50, 3))
    hom = np.c_[v, np.ones(50)] @ np.c_[R, t].T
    z, behind = camera_depth(v, cam)
    np.testing.assert_allclose(z.numpy(), hom[:, 2], atol=1e-12)
    assert np.array_equal(behind.numpy(), hom[:, 2] <= 0)


def test_mesh_and_pose_roundtrip(tmp_path, body):
    save_mesh(body, tmp_path / "b.obj")
    back = load_mesh(tmp_path / "b.obj")
    np.testing.assert_array_equal(back.faces, body.faces)
    np.testing.assert_allclose(back.vertices, body.vertices, atol=0)
    np.testing.assert_allclose(back.skin_weights, body.skin_weights, atol=0)
    poses = [Pose(np.random.default_rng(3).normal(size=(22, 3)), np.ones(3), 0.5)]
    save_poses(poses, tmp_path / "p.json")
    p = load_poses(tmp_path / "p.json")[0]
    assert np.array_equal(p.joint_rotations, poses[0].joint_rotations) and p.timestamp == 0.5
