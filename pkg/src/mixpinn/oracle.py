"""Quasi-static mixed-material deformation solver and dataset generation.

Constant-strain tetrahedral elasticity with each rigid component reduced to
6 rigid-body DOFs. Probe poses prescribe displacements on back-surface
footprint nodes; every emitted field is projected so rigid components move
as exact isometries.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, replace

import numpy as np
from scipy.sparse import coo_matrix, csr_matrix
from scipy.sparse.linalg import splu

from .mesh import Mesh, mesh_hash, tet_volumes

__all__ = [
    "MaterialParams",
    "ProbePose",
    "SimulationSample",
    "SolverError",
    "SweepConfig",
    "DatasetFormatError",
    "assemble_stiffness",
    "enumerate_poses",
    "load_dataset",
    "probe_footprint",
    "project_rigid",
    "reduce_rigid",
    "run_sweep",
    "save_dataset",
    "solve_step",
]

log = logging.getLogger(__name__)

PROBE_ANGLES = (0.0, 45.0, 90.0, 135.0)

_DATASET_MAGIC = b"MIXDATA 1\n"


class SolverError(RuntimeError):
    """Numerical failure in the quasi-static solve."""


class DatasetFormatError(ValueError):
    """Malformed or mismatched dataset file."""


@dataclass
class MaterialParams:
    young_modulus: float = 25400.0  # Pa
    poisson_ratio: float = 0.45

    def __post_init__(self):
        if self.young_modulus <= 0:
            raise ValueError(f"young_modulus must be positive, got {self.young_modulus}")
        if not 0.0 <= self.poisson_ratio < 0.5:
            raise ValueError(f"poisson_ratio must lie in [0, 0.5), got {self.poisson_ratio}")

    @property
    def lame(self) -> tuple[float, float]:
        e, nu = self.young_modulus, self.poisson_ratio
        lam = e * nu / ((1 + nu) * (1 - 2 * nu))
        mu = e / (2 * (1 + nu))
        return lam, mu


@dataclass(frozen=True)
class ProbePose:
    """One probe placement: grid position, rotation, footprint, depth step."""

    grid_i: int
    grid_j: int
    center_xy: tuple[float, float]  # on the back surface, mesh coordinates
    angle_deg: float  # one of PROBE_ANGLES
    half_len_long: float  # mm, footprint half-length along the long axis
    half_len_short: float
    depth_index: int  # 1..S
    step_mm: float = 1.0

    def __post_init__(self):
        if self.angle_deg not in PROBE_ANGLES:
            raise ValueError(f"angle {self.angle_deg} not in {PROBE_ANGLES}")
        if self.depth_index < 1:
            raise ValueError("depth_index starts at 1")

    @property
    def depth_mm(self) -> float:
        return self.depth_index * self.step_mm

    @property
    def position_key(self) -> tuple[int, int]:
        return (self.grid_i, self.grid_j)


@dataclass
class SimulationSample:
    """Ground-truth displacement field for one pose at one depth."""

    pose: ProbePose
    contact_nodes: np.ndarray  # (C,) int64, ascending
    prescribed_displacements: np.ndarray  # (C, 3) float64 mm
    ground_truth: np.ndarray  # (N, 3) float64 mm
    mesh_hash: int


@dataclass
class SweepConfig:
    """Probe sweep protocol: grid of positions x 4 rotations x depth steps."""

    grid_nx: int = 8
    grid_ny: int = 3
    spacing: float = 10.0  # mm between grid positions
    depth_steps: int = 10
    step_mm: float = 1.0
    half_len_long: float = 20.0
    half_len_short: float = 5.0
    geometry_update: bool = True
    jobs: int = 1


def _elasticity_matrix(material: MaterialParams) -> np.ndarray:
    lam, mu = material.lame
    d = np.zeros((6, 6))
    d[:3, :3] = lam
    d[np.arange(3), np.arange(3)] += 2 * mu
    d[np.arange(3, 6), np.arange(3, 6)] = mu
    return d


def assemble_stiffness(
    mesh: Mesh, material: MaterialParams, positions: np.ndarray | None = None
) -> csr_matrix:
    """Global stiffness (3N x 3N) for constant-strain tets.

    ``positions`` overrides the rest geometry so incremental sweeps can
    re-assemble on the updated configuration.
    """
    pos = mesh.rest_positions if positions is None else np.asarray(positions, dtype=np.float64)
    tets = mesh.tetrahedra
    m = tets.shape[0]
    p = pos[tets]  # (M, 4, 3)
    d = np.transpose(p[:, 1:] - p[:, :1], (0, 2, 1))  # (M, 3, 3) edge columns
    det = np.linalg.det(d)
    bad = np.flatnonzero(det <= 0)
    if bad.size:
        raise SolverError(f"tet {bad[0]} is inverted or degenerate (det {det[bad[0]]:g})")
    vol = det / 6.0
    dinv = np.linalg.inv(d)
    # Shape-function gradients: rows of inv(D) for vertices 1..3, vertex 0
    # takes the negative sum.
    grads = np.empty((m, 4, 3))
    grads[:, 1:] = dinv
    grads[:, 0] = -dinv.sum(axis=1)

    b = np.zeros((m, 6, 12))
    for a in range(4):
        gx, gy, gz = grads[:, a, 0], grads[:, a, 1], grads[:, a, 2]
        c = 3 * a
        b[:, 0, c] = gx
        b[:, 1, c + 1] = gy
        b[:, 2, c + 2] = gz
        b[:, 3, c] = gy
        b[:, 3, c + 1] = gx
        b[:, 4, c + 1] = gz
        b[:, 4, c + 2] = gy
        b[:, 5, c] = gz
        b[:, 5, c + 2] = gx

    dmat = _elasticity_matrix(material)
    db = np.einsum("kl,mlj->mkj", dmat, b)
    ke = np.einsum("mki,mkj->mij", b, db) * vol[:, None, None]

    dof = (3 * tets[:, :, None] + np.arange(3)).reshape(m, 12)
    rows = np.repeat(dof, 12, axis=1).ravel()
    cols = np.tile(dof, (1, 12)).ravel()
    n = 3 * mesh.node_count
    k = coo_matrix((ke.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    return (k + k.T) * 0.5  # exact symmetry regardless of summation order


@dataclass
class ReducedSystem:
    """Stiffness with rigid components condensed to 6 DOFs each."""

    mesh: Mesh
    k_red: csr_matrix
    transform: csr_matrix  # (3N, n_reduced): full DOFs from reduced DOFs
    soft_nodes: np.ndarray
    soft_rank: np.ndarray  # node -> index among soft nodes, -1 for rigid
    centroids: np.ndarray  # (R, 3) rigid component centroids
    n_soft: int
    n_components: int
    pinned_dofs: np.ndarray  # unobservable rigid rotation DOFs, held at zero

    @property
    def n_reduced(self) -> int:
        return 3 * self.n_soft + 6 * self.n_components


def reduce_rigid(
    stiffness: csr_matrix, mesh: Mesh, positions: np.ndarray | None = None
) -> ReducedSystem:
    """Condense each rigid component to translation + linearized rotation.

    Node displacement within component k is t_k + theta_k x (r - c_k) with
    c_k the component centroid; the reduction is the congruence transform
    T' K T of the assembled stiffness.
    """
    pos = mesh.rest_positions if positions is None else np.asarray(positions, dtype=np.float64)
    n = mesh.node_count
    r = mesh.rigid_count
    soft_nodes = np.flatnonzero(mesh.node_labels == 0)
    soft_rank = -np.ones(n, dtype=np.int64)
    soft_rank[soft_nodes] = np.arange(soft_nodes.size)
    n_red = 3 * soft_nodes.size + 6 * r

    rows, cols, vals = [], [], []
    soft_dofs = (3 * soft_nodes[:, None] + np.arange(3)).ravel()
    rows.append(soft_dofs)
    cols.append(np.arange(3 * soft_nodes.size))
    vals.append(np.ones(soft_dofs.size))

    centroids = np.zeros((r, 3))
    for k in range(1, r + 1):
        nodes = mesh.rigid_component(k)
        if nodes.size == 0:
            raise SolverError(f"rigid component {k} has no nodes")
        c = pos[nodes].mean(axis=0)
        centroids[k - 1] = c
        d = pos[nodes] - c
        base = 3 * soft_nodes.size + 6 * (k - 1)
        # u = t - skew(d) theta; the translation block is identity.
        for axis in range(3):
            rows.append(3 * nodes + axis)
            cols.append(np.full(nodes.size, base + axis))
            vals.append(np.ones(nodes.size))
        skew_entries = (
            (0, 1, d[:, 2]),
            (0, 2, -d[:, 1]),
            (1, 0, -d[:, 2]),
            (1, 2, d[:, 0]),
            (2, 0, d[:, 1]),
            (2, 1, -d[:, 0]),
        )
        for axis, t_axis, coeff in skew_entries:
            rows.append(3 * nodes + axis)
            cols.append(np.full(nodes.size, base + 3 + t_axis))
            vals.append(coeff)

    transform = coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(3 * n, n_red),
    ).tocsr()
    k_red = (transform.T @ stiffness @ transform).tocsr()

    # A rotation DOF of a degenerate (single-point or axis-aligned line)
    # component moves no node: its transform column is zero, leaving an
    # empty stiffness row. Pin such DOFs to zero instead of failing.
    pinned = []
    by_col = transform.tocsc()
    for k in range(r):
        base = 3 * soft_nodes.size + 6 * k
        for axis in range(3):
            dof = base + 3 + axis
            col = by_col.data[by_col.indptr[dof] : by_col.indptr[dof + 1]]
            if col.size == 0 or np.abs(col).max() == 0.0:
                pinned.append(dof)
    if pinned:
        log.info("pinning %d unobservable rigid rotation DOFs", len(pinned))
    return ReducedSystem(
        mesh=mesh,
        k_red=k_red,
        transform=transform,
        soft_nodes=soft_nodes,
        soft_rank=soft_rank,
        centroids=centroids,
        n_soft=soft_nodes.size,
        n_components=r,
        pinned_dofs=np.asarray(pinned, dtype=np.int64),
    )


def solve_step(
    system: ReducedSystem,
    prescribed: dict[int, np.ndarray],
    fixed: np.ndarray,
) -> np.ndarray:
    """Solve the reduced system under Dirichlet data; returns (N, 3) field.

    ``prescribed`` maps soft node index to its displacement vector; nodes in
    ``fixed`` are held at zero. Rigid DOFs are expanded back to nodal
    displacements through the reduction transform.
    """
    fixed = np.asarray(sorted(fixed), dtype=np.int64)
    pre_nodes = np.asarray(sorted(prescribed), dtype=np.int64)
    if np.intersect1d(fixed, pre_nodes).size:
        raise ValueError("prescribed and fixed node sets must be disjoint")
    for node in np.concatenate([pre_nodes, fixed]):
        if system.soft_rank[node] < 0:
            raise SolverError(
                f"node {node} belongs to a rigid component; only soft nodes "
                "accept prescribed displacements"
            )

    n_red = system.n_reduced
    values = np.zeros(n_red)
    constrained = np.zeros(n_red, dtype=bool)
    constrained[system.pinned_dofs] = True
    for node in pre_nodes:
        base = 3 * system.soft_rank[node]
        values[base : base + 3] = prescribed[node]
        constrained[base : base + 3] = True
    for node in fixed:
        base = 3 * system.soft_rank[node]
        constrained[base : base + 3] = True

    free = np.flatnonzero(~constrained)
    if free.size == 0:
        q = values
    else:
        k = system.k_red
        k_ff = k[free][:, free].tocsc()
        rhs = -(k[free][:, np.flatnonzero(constrained)] @ values[constrained])
        try:
            lu = splu(k_ff)
            x = lu.solve(rhs)
        except RuntimeError as exc:
            raise SolverError(
                f"reduced system is singular ({exc}); fix more nodes to remove "
                "rigid-body motion"
            ) from exc
        if not np.all(np.isfinite(x)):
            raise SolverError(
                "reduced solve produced non-finite values; fix more nodes"
            )
        residual = np.linalg.norm(k_ff @ x - rhs)
        scale = max(np.linalg.norm(rhs), 1e-30)
        if residual > 1e-10 * scale and residual > 1e-30:
            raise SolverError(
                f"linear solve residual {residual / scale:g} exceeds 1e-10; "
                "system may be ill-posed, fix more nodes"
            )
        q = values.copy()
        q[free] = x

    u = (system.transform @ q).reshape(-1, 3)
    # Dirichlet data is exact by construction.
    for node in pre_nodes:
        u[node] = prescribed[node]
    u[fixed] = 0.0
    return u


def project_rigid(field: np.ndarray, mesh: Mesh) -> np.ndarray:
    """Replace each rigid component's motion with its best-fit exact isometry.

    Intra-component distances of (rest + field) are preserved to machine
    precision afterwards, and the projection is a fixed point on fields that
    are already exact isometries.
    """
    out = np.array(field, dtype=np.float64, copy=True)
    for label in range(1, mesh.rigid_count + 1):
        nodes = mesh.rigid_component(label)
        rest = mesh.rest_positions[nodes]
        c = rest.mean(axis=0)
        d = rest - c
        deformed = rest + out[nodes]
        t = deformed.mean(axis=0) - c
        h = d.T @ (deformed - deformed.mean(axis=0))
        uu, _, vt = np.linalg.svd(h)
        sign = np.sign(np.linalg.det(vt.T @ uu.T))
        rot = vt.T @ np.diag([1.0, 1.0, sign]) @ uu.T
        out[nodes] = t + d @ rot.T - d
    return out


def _back_face_frame(mesh: Mesh):
    """Axis index, face sign and in-plane axes of the probe-facing surface."""
    pts = mesh.rest_positions[mesh.back_surface_nodes]
    spans = pts.max(axis=0) - pts.min(axis=0)
    axis = int(np.argmin(spans))
    if spans[axis] > 1e-9:
        raise SolverError("back surface nodes are not coplanar")
    level = pts[0, axis]
    sign = 1.0 if level >= mesh.rest_positions[:, axis].mean() else -1.0
    in_plane = [a for a in range(3) if a != axis]
    return axis, sign, in_plane, level


def probe_footprint(mesh: Mesh, pose: ProbePose):
    """Contact nodes under the rotated rectangular footprint and their
    prescribed displacements (depth * step along the inward normal)."""
    axis, sign, in_plane, level = _back_face_frame(mesh)
    pts = mesh.rest_positions[mesh.back_surface_nodes]
    plane = pts[:, in_plane]
    lo, hi = plane.min(axis=0), plane.max(axis=0)
    cx, cy = pose.center_xy
    if not (lo[0] <= cx <= hi[0] and lo[1] <= cy <= hi[1]):
        raise SolverError(
            f"probe center {pose.center_xy} lies outside the back surface "
            f"bounds x:[{lo[0]:g},{hi[0]:g}] y:[{lo[1]:g},{hi[1]:g}]"
        )
    ang = np.deg2rad(pose.angle_deg)
    ca, sa = np.cos(ang), np.sin(ang)
    dx = plane[:, 0] - cx
    dy = plane[:, 1] - cy
    long_off = dx * ca + dy * sa
    short_off = -dx * sa + dy * ca
    inside = (np.abs(long_off) <= pose.half_len_long) & (
        np.abs(short_off) <= pose.half_len_short
    )
    contact = mesh.back_surface_nodes[inside]
    if contact.size == 0:
        raise SolverError(
            f"empty probe footprint at {pose.center_xy}, angle {pose.angle_deg}"
        )
    push = np.zeros(3)
    push[axis] = -sign  # inward
    disp = np.tile(push * pose.depth_mm, (contact.size, 1))
    return contact, disp


def enumerate_poses(mesh: Mesh, sweep: SweepConfig):
    """All (position, rotation) poses at depth 1, ordered row-major by grid
    position then by rotation angle."""
    axis, _, in_plane, _ = _back_face_frame(mesh)
    pts = mesh.rest_positions[mesh.back_surface_nodes][:, in_plane]
    face_center = 0.5 * (pts.min(axis=0) + pts.max(axis=0))
    poses = []
    for i in range(sweep.grid_nx):
        for j in range(sweep.grid_ny):
            cx = face_center[0] + (i - (sweep.grid_nx - 1) / 2.0) * sweep.spacing
            cy = face_center[1] + (j - (sweep.grid_ny - 1) / 2.0) * sweep.spacing
            for angle in PROBE_ANGLES:
                poses.append(
                    ProbePose(
                        grid_i=i,
                        grid_j=j,
                        center_xy=(cx, cy),
                        angle_deg=angle,
                        half_len_long=sweep.half_len_long,
                        half_len_short=sweep.half_len_short,
                        depth_index=1,
                        step_mm=sweep.step_mm,
                    )
                )
    return poses


def _solve_pose(mesh, material, sweep, pose, base_stiffness, base_reduced):
    """All depth steps of one pose. Returns a list of SimulationSample."""
    mhash = mesh_hash(mesh)
    contact, _ = probe_footprint(mesh, pose)
    axis, sign, _, _ = _back_face_frame(mesh)
    push = np.zeros(3)
    push[axis] = -sign
    step_vec = push * pose.step_mm
    fixed = mesh.fixed_nodes
    samples = []

    if not sweep.geometry_update:
        unit = solve_step(base_reduced, {int(n): step_vec for n in contact}, fixed)
        for s in range(1, sweep.depth_steps + 1):
            u = project_rigid(unit * float(s), mesh)
            u[contact] = step_vec * float(s)
            u[fixed] = 0.0
            samples.append(_make_sample(pose, s, contact, u, mhash))
        return samples

    total = np.zeros((mesh.node_count, 3))
    for s in range(1, sweep.depth_steps + 1):
        if s == 1:
            reduced = base_reduced
        else:
            geo = mesh.rest_positions + total
            reduced = reduce_rigid(assemble_stiffness(mesh, material, geo), mesh, geo)
        du = solve_step(reduced, {int(n): step_vec for n in contact}, fixed)
        total = project_rigid(total + du, mesh)
        total[contact] = step_vec * float(s)
        total[fixed] = 0.0
        samples.append(_make_sample(pose, s, contact, total, mhash))
    return samples


def _make_sample(pose, depth, contact, field, mhash):
    deep = replace(pose, depth_index=depth)
    pre = np.tile(field[contact[0]], (contact.size, 1)) if contact.size else np.zeros((0, 3))
    return SimulationSample(
        pose=deep,
        contact_nodes=contact.copy(),
        prescribed_displacements=pre,
        ground_truth=field.copy(),
        mesh_hash=mhash,
    )


def run_sweep(
    mesh: Mesh, material: MaterialParams, sweep: SweepConfig
) -> list[SimulationSample]:
    """Solve every pose of the sweep; failed poses are logged and skipped.

    Output ordering is deterministic: grid position (row-major), rotation,
    then depth index.
    """
    poses = enumerate_poses(mesh, sweep)
    base_k = assemble_stiffness(mesh, material)
    base_red = reduce_rigid(base_k, mesh)

    def solve_one(pose):
        try:
            return _solve_pose(mesh, material, sweep, pose, base_k, base_red)
        except SolverError as exc:
            log.warning(
                "pose (%d,%d) angle %g skipped: %s",
                pose.grid_i,
                pose.grid_j,
                pose.angle_deg,
                exc,
            )
            return []

    if sweep.jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=sweep.jobs) as pool:
            chunks = list(
                pool.map(
                    _pose_worker,
                    [(mesh, material, sweep, pose) for pose in poses],
                )
            )
    else:
        chunks = [solve_one(pose) for pose in poses]

    samples = [s for chunk in chunks for s in chunk]
    log.info("sweep produced %d samples from %d poses", len(samples), len(poses))
    return samples


def _pose_worker(args):
    mesh, material, sweep, pose = args
    base_k = assemble_stiffness(mesh, material)
    base_red = reduce_rigid(base_k, mesh)
    try:
        return _solve_pose(mesh, material, sweep, pose, base_k, base_red)
    except SolverError:
        return []


_ANGLE_CODE = {a: i for i, a in enumerate(PROBE_ANGLES)}


def save_dataset(samples: list[SimulationSample], path, sweep: SweepConfig | None = None) -> None:
    """Binary little-endian dataset; carries the mesh hash for pairing."""
    if not samples:
        raise ValueError("refusing to save empty dataset")
    sweep = sweep or SweepConfig()
    n_nodes = samples[0].ground_truth.shape[0]
    first = samples[0].pose
    with open(path, "wb") as fh:
        fh.write(_DATASET_MAGIC)
        fh.write(
            struct.pack(
                "<QIIIIdddd",
                samples[0].mesh_hash,
                len(samples),
                n_nodes,
                sweep.grid_nx,
                sweep.grid_ny,
                sweep.spacing,
                first.half_len_long,
                first.half_len_short,
                first.step_mm,
            )
        )
        for s in samples:
            p = s.pose
            fh.write(
                struct.pack(
                    "<iiBIddI",
                    p.grid_i,
                    p.grid_j,
                    _ANGLE_CODE[p.angle_deg],
                    p.depth_index,
                    p.center_xy[0],
                    p.center_xy[1],
                    s.contact_nodes.size,
                )
            )
            fh.write(s.contact_nodes.astype("<u4").tobytes())
            fh.write(s.prescribed_displacements.astype("<f8").tobytes())
            fh.write(s.ground_truth.astype("<f8").tobytes())


def load_dataset(path) -> tuple[list[SimulationSample], dict]:
    """Read a dataset file; returns (samples, header metadata)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(_DATASET_MAGIC))
        if magic != _DATASET_MAGIC:
            raise DatasetFormatError(
                f"unknown dataset header {magic!r}; expected {_DATASET_MAGIC!r}"
            )
        head = fh.read(struct.calcsize("<QIIIIdddd"))
        mhash, count, n_nodes, gnx, gny, spacing, hlong, hshort, step = struct.unpack(
            "<QIIIIdddd", head
        )
        meta = {
            "mesh_hash": mhash,
            "node_count": n_nodes,
            "grid_nx": gnx,
            "grid_ny": gny,
            "spacing": spacing,
            "half_len_long": hlong,
            "half_len_short": hshort,
            "step_mm": step,
        }
        samples = []
        rec = struct.calcsize("<iiBIddI")
        for _ in range(count):
            buf = fh.read(rec)
            if len(buf) != rec:
                raise DatasetFormatError("truncated dataset file (sample record)")
            gi, gj, code, depth, cx, cy, n_contact = struct.unpack("<iiBIddI", buf)
            try:
                angle = PROBE_ANGLES[code]
            except IndexError:
                raise DatasetFormatError(f"bad rotation code {code}") from None
            contact = np.frombuffer(fh.read(4 * n_contact), dtype="<u4").astype(np.int64)
            pre = np.frombuffer(fh.read(8 * 3 * n_contact), dtype="<f8").reshape(
                n_contact, 3
            )
            gt_bytes = fh.read(8 * 3 * n_nodes)
            if len(gt_bytes) != 8 * 3 * n_nodes:
                raise DatasetFormatError("truncated dataset file (field block)")
            gt = np.frombuffer(gt_bytes, dtype="<f8").reshape(n_nodes, 3)
            pose = ProbePose(
                grid_i=gi,
                grid_j=gj,
                center_xy=(cx, cy),
                angle_deg=angle,
                half_len_long=hlong,
                half_len_short=hshort,
                depth_index=depth,
                step_mm=step,
            )
            samples.append(
                SimulationSample(
                    pose=pose,
                    contact_nodes=contact,
                    prescribed_displacements=pre.copy(),
                    ground_truth=gt.copy(),
                    mesh_hash=mhash,
                )
            )
        if fh.read(1):
            raise DatasetFormatError("trailing bytes after last sample")
    return samples, meta
