"""Synthetic articulated template meshes, graph operators, and data generation.

The template is a "tube body": a kinematic tree whose every non-root joint
owns one bone, each bone skinned rigidly to a cylinder of rings. Rings double
as the coarse-mesh clustering, so the coarse vertex count is simply the total
ring count. All generation is a pure function of (parameters, seed).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class InputError(ValueError):
    """Invalid input to a graph/mesh operation."""


@dataclass
class TemplateMesh:
    """Rest-pose geometry, mesh edges, skeleton, rigid skinning, coarse clustering."""

    rest_vertices: np.ndarray  # (V_fine, 3)
    edges: np.ndarray  # (E, 2) undirected pairs, i < j
    joint_parents: np.ndarray  # (J,) parent index, -1 for the root
    joint_rest: np.ndarray  # (J, 3) rest pivot positions
    vertex_joint: np.ndarray  # (V_fine,) rigid one-joint skinning
    coarse_index: np.ndarray  # (V_fine,) coarse group id per fine vertex

    @property
    def n_fine(self) -> int:
        return self.rest_vertices.shape[0]

    @property
    def n_joints(self) -> int:
        return self.joint_parents.shape[0]

    @property
    def n_coarse(self) -> int:
        return int(self.coarse_index.max()) + 1

    def validate(self) -> "TemplateMesh":
        v = self.n_fine
        if self.edges.size:
            if self.edges.min() < 0 or self.edges.max() >= v:
                raise InputError("edge index out of range")
            if np.any(self.edges[:, 0] == self.edges[:, 1]):
                raise InputError("self-edge in template mesh")
        roots = np.flatnonzero(self.joint_parents < 0)
        if roots.size != 1:
            raise InputError(f"skeleton must have exactly one root, found {roots.size}")
        if np.any(self.joint_parents >= np.arange(self.n_joints)):
            raise InputError("skeleton parents must precede children (tree order)")
        counts = np.bincount(self.coarse_index, minlength=self.n_coarse)
        if np.any(counts == 0):
            raise InputError("empty coarse group")
        return self

    def coarse_groups(self) -> list[np.ndarray]:
        order = np.argsort(self.coarse_index, kind="stable")
        bounds = np.searchsorted(self.coarse_index[order], np.arange(self.n_coarse + 1))
        return [order[bounds[i] : bounds[i + 1]] for i in range(self.n_coarse)]

    def coarse_rest_vertices(self) -> np.ndarray:
        down, _ = build_coarsening(self)
        return down @ self.rest_vertices

    def coarse_edges(self) -> np.ndarray:
        """Coarse-level edges: fine edges projected through the clustering."""
        if not self.edges.size:
            return np.zeros((0, 2), dtype=np.int64)
        a = self.coarse_index[self.edges[:, 0]]
        b = self.coarse_index[self.edges[:, 1]]
        keep = a != b
        lo = np.minimum(a[keep], b[keep])
        hi = np.maximum(a[keep], b[keep])
        return np.unique(np.stack([lo, hi], axis=1), axis=0)


@dataclass
class NormalizedAdjacency:
    """Symmetric degree-normalized adjacency with self-loops."""

    n: int
    matrix: np.ndarray


@dataclass
class MeshSample:
    """One synthetic training sample: pose, ground truth, and rendered silhouette."""

    joint_angles: np.ndarray  # (J, 3) axis-angle
    gt_fine_vertices: np.ndarray  # (V_fine, 3)
    gt_coarse_vertices: np.ndarray  # (V_coarse, 3)
    gt_joints3d: np.ndarray  # (J, 3)
    gt_joints2d: np.ndarray  # (J, 2), image-normalized in [-1, 1]
    silhouette: np.ndarray  # (H, W) grayscale in [0, 1]
    camera_gt: np.ndarray  # (3,) = (s, tx, ty)


def build_normalized_adjacency(edges, n: int) -> NormalizedAdjacency:
    """D^(-1/2) (A + I) D^(-1/2) with D the degree matrix of A + I."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    a = np.eye(n)
    for i, j in edges:
        if not (0 <= i < n and 0 <= j < n):
            raise InputError(f"edge ({i}, {j}) out of range for n={n}")
        if i == j:
            raise InputError(f"self-edge ({i}, {j}) not allowed")
        a[i, j] = 1.0
        a[j, i] = 1.0
    dinv_sqrt = 1.0 / np.sqrt(a.sum(axis=1))
    return NormalizedAdjacency(n=n, matrix=a * np.outer(dinv_sqrt, dinv_sqrt))


def _orthonormal_frame(direction: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # Deterministic basis perpendicular to direction.
    helper = np.zeros(3)
    helper[np.argmin(np.abs(direction))] = 1.0
    u = np.cross(direction, helper)
    u /= np.linalg.norm(u)
    return u, np.cross(direction, u)


def generate_synthetic_template(
    limbs: int,
    segments_per_limb: int,
    ring_resolution: int,
    seed: int,
    coarse_target: int | None = None,
) -> TemplateMesh:
    """Deterministic articulated tube-body with J = 1 + limbs * segments joints.

    Rings along each bone are also the coarse clusters; coarse_target fixes
    the total ring count (distributed round-robin over bones), defaulting to
    two rings per bone.
    """
    if min(limbs, segments_per_limb, ring_resolution) < 1:
        raise InputError("limbs, segments_per_limb and ring_resolution must be >= 1")
    rng = np.random.default_rng(seed)
    n_bones = limbs * segments_per_limb
    if coarse_target is None:
        coarse_target = 2 * n_bones
    if coarse_target < n_bones:
        raise InputError(
            f"coarse_target={coarse_target} below bone count {n_bones}"
        )

    # Skeleton: root + per-limb chains. Every non-root joint owns the bone
    # extending from its own pivot, so each joint angle articulates a segment.
    parents = [-1]
    joint_rest = [np.zeros(3)]
    bone_dir = [None]
    bone_len = [0.0]
    for _ in range(limbs):
        direction = rng.standard_normal(3)
        direction /= np.linalg.norm(direction)
        attach = 0.12 * direction
        parent = 0
        pivot = attach
        for _ in range(segments_per_limb):
            length = rng.uniform(0.25, 0.4)
            jitter = rng.standard_normal(3) * 0.05
            d = direction + jitter
            d /= np.linalg.norm(d)
            parents.append(parent)
            joint_rest.append(pivot.copy())
            bone_dir.append(d)
            bone_len.append(length)
            parent = len(parents) - 1
            pivot = pivot + d * length

    n_joints = len(parents)
    rings_per_bone = np.full(n_bones, coarse_target // n_bones, dtype=np.int64)
    rings_per_bone[: coarse_target % n_bones] += 1

    radius = 0.05
    vertices = []
    vertex_joint = []
    coarse_index = []
    edges = []
    ring_of_bone_start = {}  # joint -> first ring's vertex offset
    ring_of_bone_end = {}
    ring_id = 0
    for b, joint in enumerate(range(1, n_joints)):
        d = bone_dir[joint]
        u, w = _orthonormal_frame(d)
        base = np.asarray(joint_rest[joint])
        n_rings = int(rings_per_bone[b])
        first_offset = len(vertices)
        for r in range(n_rings):
            center = base + d * bone_len[joint] * ((r + 0.5) / n_rings)
            start = len(vertices)
            for m in range(ring_resolution):
                theta = 2.0 * np.pi * m / ring_resolution
                vertices.append(center + radius * (np.cos(theta) * u + np.sin(theta) * w))
                vertex_joint.append(joint)
                coarse_index.append(ring_id)
            for m in range(ring_resolution):
                nxt = start + (m + 1) % ring_resolution
                if ring_resolution > 1 and start + m != nxt:
                    edges.append((min(start + m, nxt), max(start + m, nxt)))
            if r > 0:
                prev = start - ring_resolution
                for m in range(ring_resolution):
                    edges.append((prev + m, start + m))
            ring_id += 1
        ring_of_bone_start[joint] = first_offset
        ring_of_bone_end[joint] = len(vertices) - ring_resolution

    # Stitch each bone's first ring to the parent bone's last ring.
    for joint in range(1, n_joints):
        parent = parents[joint]
        if parent > 0:
            pstart = ring_of_bone_end[parent]
            cstart = ring_of_bone_start[joint]
            for m in range(ring_resolution):
                edges.append((pstart + m, cstart + m))

    edge_arr = (
        np.unique(np.asarray(edges, dtype=np.int64), axis=0)
        if edges
        else np.zeros((0, 2), dtype=np.int64)
    )
    return TemplateMesh(
        rest_vertices=np.asarray(vertices),
        edges=edge_arr,
        joint_parents=np.asarray(parents, dtype=np.int64),
        joint_rest=np.asarray(joint_rest),
        vertex_joint=np.asarray(vertex_joint, dtype=np.int64),
        coarse_index=np.asarray(coarse_index, dtype=np.int64),
    ).validate()


def build_coarsening(mesh: TemplateMesh) -> tuple[np.ndarray, np.ndarray]:
    """(down, up0): group averaging and its transpose membership operator.

    down is V_coarse x V_fine with rows summing to 1; up0 copies each fine
    vertex from its group's coarse vertex, so down @ up0 is the identity on
    the coarse space.
    """
    n_coarse = mesh.n_coarse
    counts = np.bincount(mesh.coarse_index, minlength=n_coarse).astype(np.float64)
    if np.any(counts == 0):
        raise InputError("empty coarse group")
    up0 = np.zeros((mesh.n_fine, n_coarse))
    up0[np.arange(mesh.n_fine), mesh.coarse_index] = 1.0
    down = up0.T / counts[:, None]
    return down, up0


def rotation_from_axis_angle(v: np.ndarray) -> np.ndarray:
    """Rodrigues rotation for an axis-angle vector (angle = |v|)."""
    theta = np.linalg.norm(v)
    if theta < 1e-12:
        return np.eye(3)
    axis = v / theta
    kx, ky, kz = axis
    k = np.array([[0.0, -kz, ky], [kz, 0.0, -kx], [-ky, kx, 0.0]])
    return np.eye(3) + np.sin(theta) * k + (1.0 - np.cos(theta)) * (k @ k)


def forward_kinematics(
    mesh: TemplateMesh, joint_angles: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Rigid-chain FK: posed fine vertices and joint pivot positions."""
    joint_angles = np.asarray(joint_angles, dtype=np.float64)
    if joint_angles.shape != (mesh.n_joints, 3):
        raise InputError(
            f"joint_angles shape {joint_angles.shape} != ({mesh.n_joints}, 3)"
        )
    n_j = mesh.n_joints
    g_rot = np.empty((n_j, 3, 3))
    g_pos = np.empty((n_j, 3))
    # Identity subchains short-circuit so the rest pose reproduces bit-exactly
    # (the generic pivot arithmetic would lose the last ulp).
    identity = np.zeros(n_j, dtype=bool)
    for j in range(n_j):
        p = mesh.joint_parents[j]
        unrotated = not joint_angles[j].any()
        identity[j] = unrotated if p < 0 else (identity[p] and unrotated)
        if identity[j]:
            g_rot[j] = np.eye(3)
            g_pos[j] = mesh.joint_rest[j]
            continue
        local = rotation_from_axis_angle(joint_angles[j])
        if p < 0:
            g_rot[j] = local
            g_pos[j] = mesh.joint_rest[j]
        else:
            g_rot[j] = g_rot[p] @ local
            g_pos[j] = g_pos[p] + g_rot[p] @ (mesh.joint_rest[j] - mesh.joint_rest[p])
    rel = mesh.rest_vertices - mesh.joint_rest[mesh.vertex_joint]
    fine = g_pos[mesh.vertex_joint] + np.einsum(
        "vij,vj->vi", g_rot[mesh.vertex_joint], rel
    )
    rigid = identity[mesh.vertex_joint]
    fine[rigid] = mesh.rest_vertices[rigid]
    return fine, g_pos


def project_points(points3d: np.ndarray, s: float, tx: float, ty: float) -> np.ndarray:
    """Weak perspective: (x, y) -> s * (x, y) + (tx, ty); z discarded."""
    p = np.asarray(points3d, dtype=np.float64)
    return s * p[:, :2] + np.array([tx, ty])


def rasterize_silhouette(
    fine_vertices: np.ndarray,
    camera_gt,
    height: int,
    width: int,
    sigma: float = 1.0,
) -> np.ndarray:
    """Project vertices and splat each as a small Gaussian blob, clamped to [0, 1]."""
    if height < 8 or width < 8:
        raise InputError(f"image size must be >= 8, got {height}x{width}")
    s, tx, ty = (float(c) for c in np.asarray(camera_gt).reshape(3))
    p2 = project_points(fine_vertices, s, tx, ty)
    px = (p2[:, 0] + 1.0) * 0.5 * (width - 1)
    py = (p2[:, 1] + 1.0) * 0.5 * (height - 1)
    ys = np.arange(height, dtype=np.float64)
    xs = np.arange(width, dtype=np.float64)
    image = np.zeros((height, width))
    inv = 1.0 / (2.0 * sigma * sigma)
    for start in range(0, px.size, 128):  # chunked to bound memory on large meshes
        cx = px[start : start + 128]
        cy = py[start : start + 128]
        dy2 = (ys[None, :, None] - cy[:, None, None]) ** 2
        dx2 = (xs[None, None, :] - cx[:, None, None]) ** 2
        image += np.exp(-(dy2 + dx2) * inv).sum(axis=0)
    image = np.minimum(image, 1.0)
    # Far-away splat tails are exact zeros: off-body pixels stay empty and no
    # subnormals leak into the conv stack (denormal math is very slow).
    image[image < 1e-12] = 0.0
    return image


def generate_dataset(
    mesh: TemplateMesh,
    count: int,
    angle_range: float,
    seed: int,
    image_size: int = 56,
    stream: int = 0,
) -> list[MeshSample]:
    """i.i.d. poses and cameras; deterministic per (config, seed).

    Each sample uses its own generator seeded by (seed, stream, index), so the
    set is reproducible regardless of evaluation order or worker count, and
    distinct streams (train vs held-out splits) never overlap.
    """
    if count < 1:
        raise InputError(f"count must be >= 1, got {count}")
    down, _ = build_coarsening(mesh)
    samples = []
    for i in range(count):
        rng = np.random.default_rng([seed, stream, i])
        angles = rng.uniform(-angle_range, angle_range, size=(mesh.n_joints, 3))
        s = rng.uniform(0.7, 1.3)
        tx, ty = rng.uniform(-0.2, 0.2, size=2)
        fine, joints3d = forward_kinematics(mesh, angles)
        camera = np.array([s, tx, ty])
        samples.append(
            MeshSample(
                joint_angles=angles,
                gt_fine_vertices=fine,
                gt_coarse_vertices=down @ fine,
                gt_joints3d=joints3d,
                gt_joints2d=project_points(joints3d, s, tx, ty),
                silhouette=rasterize_silhouette(fine, camera, image_size, image_size),
                camera_gt=camera,
            )
        )
    return samples


def build_token_graph(mesh: TemplateMesh, n_grid: int) -> NormalizedAdjacency:
    """Token-level adjacency over the (grid, joints, vertices) sequence.

    Block structure: coarse-mesh edges among vertex queries, kinematic-tree
    edges among joint queries, each joint linked to its nearest coarse vertex
    in the rest pose, and self-loop-only rows for grid tokens so graph
    convolution passes them through unmixed.
    """
    n_j = mesh.n_joints
    n_c = mesh.n_coarse
    joint_base = n_grid
    vertex_base = n_grid + n_j
    edges = []
    for j in range(n_j):
        p = mesh.joint_parents[j]
        if p >= 0:
            edges.append((joint_base + p, joint_base + j))
    for a, b in mesh.coarse_edges():
        edges.append((vertex_base + int(a), vertex_base + int(b)))
    coarse_rest = mesh.coarse_rest_vertices()
    for j in range(n_j):
        d2 = np.sum((coarse_rest - mesh.joint_rest[j]) ** 2, axis=1)
        edges.append((joint_base + j, vertex_base + int(np.argmin(d2))))
    return build_normalized_adjacency(edges, n_grid + n_j + n_c)
