"""Template generation, adjacency operators, FK, rasterization, data generation."""

import numpy as np
import pytest

from graphormer.mesh import (
    InputError,
    MeshSample,
    TemplateMesh,
    build_coarsening,
    build_normalized_adjacency,
    build_token_graph,
    forward_kinematics,
    generate_dataset,
    generate_synthetic_template,
    project_points,
    rasterize_silhouette,
    rotation_from_axis_angle,
)


def make_two_link_template():
    """Hand-built chain: root -> j1 (bone along +x, len 0.3) -> j2 (len 0.3)."""
    joint_rest = np.array([[0.0, 0.0, 0.0], [0.1, 0.0, 0.0], [0.4, 0.0, 0.0]])
    parents = np.array([-1, 0, 1])
    verts = np.array(
        [
            [0.2, 0.05, 0.0],
            [0.2, -0.05, 0.0],
            [0.3, 0.05, 0.0],
            [0.3, -0.05, 0.0],
            [0.5, 0.05, 0.0],
            [0.5, -0.05, 0.0],
            [0.6, 0.05, 0.0],
            [0.6, -0.05, 0.0],
        ]
    )
    return TemplateMesh(
        rest_vertices=verts,
        edges=np.array([[0, 1], [0, 2], [1, 3], [2, 3], [2, 4], [4, 5], [4, 6], [5, 7], [6, 7]]),
        joint_parents=parents,
        joint_rest=joint_rest,
        vertex_joint=np.array([1, 1, 1, 1, 2, 2, 2, 2]),
        coarse_index=np.array([0, 0, 1, 1, 2, 2, 3, 3]),
    ).validate()


class TestNormalizedAdjacency:
    def test_single_node(self):
        adj = build_normalized_adjacency([], 1)
        np.testing.assert_array_equal(adj.matrix, [[1.0]])

    def test_two_nodes_one_edge(self):
        adj = build_normalized_adjacency([(0, 1)], 2)
        np.testing.assert_allclose(adj.matrix, [[0.5, 0.5], [0.5, 0.5]], atol=1e-15)

    def test_path_graph_closed_form(self):
        adj = build_normalized_adjacency([(0, 1), (1, 2)], 3)
        assert adj.matrix[0][0] == pytest.approx(0.5, abs=1e-15)
        assert adj.matrix[0][1] == pytest.approx(1 / np.sqrt(6), abs=1e-15)
        assert adj.matrix[1][1] == pytest.approx(1 / 3, abs=1e-15)

    def test_out_of_range_edge(self):
        with pytest.raises(InputError):
            build_normalized_adjacency([(0, 5)], 3)
        with pytest.raises(InputError):
            build_normalized_adjacency([(1, 1)], 3)

    def test_invariants_on_random_graph(self):
        rng = np.random.default_rng(0)
        n = 12
        edges = {(int(a), int(b)) for a, b in rng.integers(0, n, (30, 2)) if a < b}
        adj = build_normalized_adjacency(sorted(edges), n).matrix
        assert np.abs(adj - adj.T).max() < 1e-12
        assert adj.min() >= 0
        # spectral radius by power iteration
        v = np.ones(n) / np.sqrt(n)
        for _ in range(200):
            v = adj @ v
            v /= np.linalg.norm(v)
        assert float(v @ adj @ v) <= 1 + 1e-6


class TestSyntheticTemplate:
    def test_counting_example(self):
        mesh = generate_synthetic_template(limbs=1, segments_per_limb=1, ring_resolution=4, seed=0)
        assert mesh.n_joints == 2
        assert mesh.n_fine == 8
        # depth 1: the single non-root joint hangs off the root
        assert list(mesh.joint_parents) == [-1, 0]

    def test_same_seed_identical(self):
        a = generate_synthetic_template(3, 2, 5, seed=42, coarse_target=20)
        b = generate_synthetic_template(3, 2, 5, seed=42, coarse_target=20)
        np.testing.assert_array_equal(a.rest_vertices, b.rest_vertices)
        np.testing.assert_array_equal(a.edges, b.edges)
        np.testing.assert_array_equal(a.joint_rest, b.joint_rest)

    def test_paper_scale_counts(self):
        mesh = generate_synthetic_template(13, 1, 16, seed=0, coarse_target=431)
        assert mesh.n_joints == 14
        assert mesh.n_coarse == 431
        assert mesh.n_fine == 431 * 16

    def test_desk_scale_counts(self):
        mesh = generate_synthetic_template(7, 1, 4, seed=0, coarse_target=48)
        assert mesh.n_joints == 8
        assert mesh.n_coarse == 48
        assert mesh.n_fine == 192

    def test_mesh_invariants(self):
        mesh = generate_synthetic_template(4, 2, 6, seed=3, coarse_target=30)
        assert mesh.edges.min() >= 0 and mesh.edges.max() < mesh.n_fine
        assert np.all(mesh.edges[:, 0] != mesh.edges[:, 1])
        counts = np.bincount(mesh.coarse_index, minlength=mesh.n_coarse)
        assert counts.min() >= 1
        # joint query positions must be distinct for positional encoding
        dists = np.linalg.norm(
            mesh.joint_rest[:, None] - mesh.joint_rest[None, :], axis=-1
        )
        assert dists[~np.eye(mesh.n_joints, dtype=bool)].min() > 1e-6


class TestCoarsening:
    def test_group_averaging(self):
        mesh = make_two_link_template()
        down, _ = build_coarsening(mesh)
        values = np.array([[1.0, 0, 0]] * 2 + [[2.0, 0, 0]] * 2 + [[3.0, 0, 0]] * 2 + [[4.0, 0, 0]] * 2)
        out = down @ values
        np.testing.assert_allclose(out[:, 0], [1.0, 2.0, 3.0, 4.0], atol=1e-15)

    def test_round_trip_identity(self):
        mesh = generate_synthetic_template(3, 1, 4, seed=1, coarse_target=9)
        down, up0 = build_coarsening(mesh)
        np.testing.assert_allclose(down @ up0, np.eye(mesh.n_coarse), atol=1e-12)

    def test_centroid_oracle(self):
        mesh = generate_synthetic_template(5, 2, 5, seed=7, coarse_target=25)
        down, _ = build_coarsening(mesh)
        result = down @ mesh.rest_vertices
        for group in range(mesh.n_coarse):
            members = mesh.rest_vertices[mesh.coarse_index == group]
            np.testing.assert_allclose(result[group], members.mean(axis=0), atol=1e-12)


class TestForwardKinematics:
    def test_rest_pose_exact(self):
        mesh = generate_synthetic_template(3, 2, 4, seed=2, coarse_target=12)
        fine, joints = forward_kinematics(mesh, np.zeros((mesh.n_joints, 3)))
        assert np.array_equal(fine, mesh.rest_vertices)
        assert np.array_equal(joints, mesh.joint_rest)

    def test_root_rotation_is_global(self):
        mesh = generate_synthetic_template(2, 2, 4, seed=5, coarse_target=8)
        aa = np.array([0.3, -0.5, 0.8])
        angles = np.zeros((mesh.n_joints, 3))
        angles[0] = aa
        fine, joints = forward_kinematics(mesh, angles)
        rot = rotation_from_axis_angle(aa)
        np.testing.assert_allclose(fine, mesh.rest_vertices @ rot.T, atol=1e-10)
        np.testing.assert_allclose(joints, mesh.joint_rest @ rot.T, atol=1e-10)

    def test_two_link_bend_hand_computed(self):
        mesh = make_two_link_template()
        angles = np.zeros((3, 3))
        angles[1] = [0.0, 0.0, np.pi / 2]  # bend joint 1 about +z
        fine, joints = forward_kinematics(mesh, angles)
        np.testing.assert_allclose(joints[2], [0.1, 0.3, 0.0], atol=1e-10)
        # vertex [0.2, 0.05, 0] is rigid with joint 1: pivot + Rz90 @ offset
        np.testing.assert_allclose(fine[0], [0.05, 0.1, 0.0], atol=1e-10)
        # joint-2 vertices rotate with the composed transform
        np.testing.assert_allclose(fine[4], [0.1 - 0.05, 0.4, 0.0], atol=1e-10)

    def test_pre_rotation_equals_post_rotation(self):
        mesh = generate_synthetic_template(3, 2, 4, seed=9, coarse_target=12)
        rng = np.random.default_rng(10)
        angles = rng.uniform(-0.6, 0.6, (mesh.n_joints, 3))
        angles[0] = 0.0
        aa = np.array([0.2, 0.7, -0.4])
        rot = rotation_from_axis_angle(aa)
        pre = angles.copy()
        pre[0] = aa
        fine_pre, joints_pre = forward_kinematics(mesh, pre)
        fine_base, joints_base = forward_kinematics(mesh, angles)
        np.testing.assert_allclose(fine_pre, fine_base @ rot.T, atol=1e-10)
        np.testing.assert_allclose(joints_pre, joints_base @ rot.T, atol=1e-10)

    def test_angle_count_mismatch(self):
        mesh = make_two_link_template()
        with pytest.raises(InputError):
            forward_kinematics(mesh, np.zeros((2, 3)))


class TestRasterize:
    def test_out_of_view_all_zero(self):
        verts = np.full((5, 3), 50.0)  # far outside [-1, 1]
        img = rasterize_silhouette(verts, (1.0, 0.0, 0.0), 16, 16)
        assert np.array_equal(img, np.zeros((16, 16)))

    def test_single_vertex_center_peak(self):
        img = rasterize_silhouette(np.array([[0.0, 0.0, 0.3]]), (1.0, 0.0, 0.0), 57, 57)
        assert img.argmax() == 28 * 57 + 28
        assert img[28, 28] > img[28, 29] > img[28, 30] > img[28, 31]
        assert img[28, 29] == pytest.approx(img[28, 27])

    def test_translation_shifts_argmax_by_one_pixel(self):
        w = 57
        base = rasterize_silhouette(np.array([[0.0, 0.0, 0.0]]), (1.0, 0.0, 0.0), w, w)
        shifted = rasterize_silhouette(
            np.array([[0.0, 0.0, 0.0]]), (1.0, 2.0 / (w - 1), 0.0), w, w
        )
        by, bx = np.unravel_index(base.argmax(), base.shape)
        sy, sx = np.unravel_index(shifted.argmax(), shifted.shape)
        assert (sy, sx) == (by, bx + 1)

    def test_range_and_size_validation(self):
        img = rasterize_silhouette(np.zeros((4, 3)), (1.0, 0.0, 0.0), 16, 16)
        assert img.min() >= 0.0 and img.max() <= 1.0
        with pytest.raises(InputError):
            rasterize_silhouette(np.zeros((1, 3)), (1.0, 0.0, 0.0), 4, 16)


class TestDatasetGeneration:
    def test_zero_angle_range_rest_pose(self):
        mesh = generate_synthetic_template(2, 1, 4, seed=0, coarse_target=6)
        samples = generate_dataset(mesh, 4, angle_range=0.0, seed=1, image_size=16)
        cameras = []
        for s in samples:
            np.testing.assert_array_equal(s.gt_fine_vertices, mesh.rest_vertices)
            cameras.append(tuple(s.camera_gt))
        assert len(set(cameras)) > 1  # camera still varies

    def test_same_seed_identical(self):
        mesh = generate_synthetic_template(2, 1, 4, seed=0, coarse_target=6)
        a = generate_dataset(mesh, 3, 0.4, seed=5, image_size=16)
        b = generate_dataset(mesh, 3, 0.4, seed=5, image_size=16)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.silhouette, y.silhouette)
            np.testing.assert_array_equal(x.joint_angles, y.joint_angles)

    def test_streams_do_not_overlap(self):
        mesh = generate_synthetic_template(2, 1, 4, seed=0, coarse_target=6)
        a = generate_dataset(mesh, 3, 0.4, seed=5, image_size=16, stream=0)
        b = generate_dataset(mesh, 3, 0.4, seed=5, image_size=16, stream=1)
        assert not np.array_equal(a[0].joint_angles, b[0].joint_angles)

    def test_reprojection_oracle(self):
        mesh = generate_synthetic_template(3, 1, 4, seed=0, coarse_target=9)
        for s in generate_dataset(mesh, 5, 0.5, seed=2, image_size=16):
            expected = project_points(s.gt_joints3d, *s.camera_gt)
            np.testing.assert_allclose(s.gt_joints2d, expected, atol=1e-12)

    def test_coarse_is_downsampled_fine(self):
        mesh = generate_synthetic_template(3, 1, 4, seed=0, coarse_target=9)
        down, _ = build_coarsening(mesh)
        for s in generate_dataset(mesh, 3, 0.5, seed=3, image_size=16):
            np.testing.assert_allclose(s.gt_coarse_vertices, down @ s.gt_fine_vertices, atol=1e-12)


class TestTokenGraph:
    def test_structure(self):
        mesh = generate_synthetic_template(3, 1, 4, seed=0, coarse_target=9)
        n_grid = 5
        adj = build_token_graph(mesh, n_grid)
        n = n_grid + mesh.n_joints + mesh.n_coarse
        assert adj.n == n
        assert np.abs(adj.matrix - adj.matrix.T).max() < 1e-12
        # grid tokens pass through: self-loop-only rows
        for i in range(n_grid):
            expected = np.zeros(n)
            expected[i] = 1.0
            np.testing.assert_array_equal(adj.matrix[i], expected)
        # every joint connects to its parent (skip root) and some coarse vertex
        jb = n_grid
        vb = n_grid + mesh.n_joints
        for j in range(1, mesh.n_joints):
            assert adj.matrix[jb + j, jb + mesh.joint_parents[j]] > 0
        for j in range(mesh.n_joints):
            assert adj.matrix[jb + j, vb:].max() > 0

    def test_coarse_edges_projected_from_fine(self):
        mesh = generate_synthetic_template(2, 2, 4, seed=1, coarse_target=10)
        ce = mesh.coarse_edges()
        assert ce.shape[1] == 2
        assert np.all(ce[:, 0] < ce[:, 1])
        # consecutive rings along a bone are adjacent coarse vertices
        assert len(ce) >= mesh.n_coarse - mesh.n_joints + 1
