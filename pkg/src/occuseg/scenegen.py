"""Procedural scenes: worlds, multi-view rendering, LiDAR sweeps, binary GT.

A scene's "world" is a solid semantic voxelization (ground slab plus
axis-aligned object boxes). Sensors observe the world; the ground-truth
binary grid is built the way real datasets build it: LiDAR sweeps
aggregated over ego poses, unioned with the dynamic objects' boxes. The
GT semantic grid is the world's labels restricted to that support, so
the two GT grids are consistent by construction.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .voxel import BinaryGrid, GridSpec, SemanticGrid

GROUND_CLASS = 1
CLASS_NAMES = ("free", "ground", "building", "vehicle", "pedestrian")

SENSOR_HEIGHT = 1.0  # LiDAR origin above the ego position, meters
DEFAULT_ELEVATIONS = tuple(np.deg2rad(np.linspace(-35.0, 10.0, 12)))
# Margin keeping hit points strictly inside their voxel, so that f32
# serialization cannot flip voxel membership.
HIT_INSET = 1e-4


class DegenerateSceneError(ValueError):
    """Scene parameters leave no free space."""


@dataclass(frozen=True, eq=False)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray  # ego-from-camera, 3x3
    translation: np.ndarray  # camera origin in ego frame

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        r = np.asarray(self.rotation, dtype=np.float64)
        if np.abs(r.T @ r - np.eye(3)).max() >= 1e-9:
            raise ValueError("camera rotation is not orthonormal")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation",
                           np.asarray(self.translation, dtype=np.float64))


@dataclass(frozen=True, eq=False)
class CameraRig:
    cameras: tuple[Camera, ...]

    def __len__(self):
        return len(self.cameras)


def yaw_rotation(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def camera_rotation_for_yaw(yaw: float) -> np.ndarray:
    """Ego-from-camera rotation for a camera looking along ego yaw.

    Camera convention: +z forward, +x right, +y down.
    """
    c, s = np.cos(yaw), np.sin(yaw)
    x_cam = np.array([s, -c, 0.0])
    y_cam = np.array([0.0, 0.0, -1.0])
    z_cam = np.array([c, s, 0.0])
    return np.stack([x_cam, y_cam, z_cam], axis=1)


def default_rig(num_cameras: int = 4, width: int = 56, height: int = 32,
                focal: float = 28.0, position=(0.0, 0.0, 1.2)) -> CameraRig:
    """N cameras at even yaw spacing sharing one mount position."""
    cams = []
    for i in range(num_cameras):
        yaw = 2.0 * np.pi * i / num_cameras
        cams.append(Camera(fx=focal, fy=focal,
                           cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
                           width=width, height=height,
                           rotation=camera_rotation_for_yaw(yaw),
                           translation=np.asarray(position, dtype=np.float64)))
    return CameraRig(tuple(cams))


def project_point(cam: Camera, point_ego):
    """Pinhole projection to (u, v, depth), or None when out of view."""
    p = cam.rotation.T @ (np.asarray(point_ego, dtype=np.float64) - cam.translation)
    if p[2] <= 0.0:
        return None
    u = cam.fx * p[0] / p[2] + cam.cx
    v = cam.fy * p[1] / p[2] + cam.cy
    if not (0.0 <= u <= cam.width - 1 and 0.0 <= v <= cam.height - 1):
        return None
    return float(u), float(v), float(p[2])


def back_project(cam: Camera, u: float, v: float, depth: float) -> np.ndarray:
    """Inverse of project_point at the given camera depth."""
    p_cam = np.array([(u - cam.cx) / cam.fx * depth,
                      (v - cam.cy) / cam.fy * depth,
                      depth])
    return cam.rotation @ p_cam + cam.translation

def project_points(cam: Camera, points: np.ndarray):
    """Vectorized projection: (uv, depth, valid) for (N, 3) ego points."""
    p = (np.asarray(points, dtype=np.float64) - cam.translation) @ cam.rotation
    depth = p[:, 2]
    safe = np.where(depth > 0.0, depth, 1.0)
    u = cam.fx * p[:, 0] / safe + cam.cx
    v = cam.fy * p[:, 1] / safe + cam.cy
    valid = ((depth > 0.0) & (u >= 0.0) & (u <= cam.width - 1)
             & (v >= 0.0) & (v <= cam.height - 1))
    return np.stack([u, v], axis=1), depth, valid


@dataclass(frozen=True, eq=False)
class EgoPose:
    yaw: float
    position: np.ndarray  # (3,), meters

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=np.float64))

    @property
    def rotation(self) -> np.ndarray:
        return yaw_rotation(self.yaw)

    def to_reference(self, points_local: np.ndarray) -> np.ndarray:
        return points_local @ self.rotation.T + self.position

    def from_reference(self, points_ref: np.ndarray) -> np.ndarray:
        return (points_ref - self.position) @ self.rotation


@dataclass(frozen=True, eq=False)
class SceneObject:
    class_id: int
    center: np.ndarray  # (3,), meters
    extents: np.ndarray  # (3,), full edge lengths, meters
    dynamic: bool

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64))
        ext = np.asarray(self.extents, dtype=np.float64)
        if (ext <= 0).any():
            raise ValueError("object extents must be positive")
        object.__setattr__(self, "extents", ext)

    def contains(self, points: np.ndarray) -> np.ndarray:
        d = np.abs(np.asarray(points) - self.center)
        return np.all(d <= self.extents / 2.0, axis=-1)


@dataclass(frozen=True, eq=False)
class LidarSweep:
    points: np.ndarray  # (N, 3) in the sweep's ego frame
    pose: EgoPose


@dataclass
class Scene:
    seed: int
    spec: GridSpec
    num_classes: int
    objects: list[SceneObject]
    rig: CameraRig
    semantic: SemanticGrid  # GT, restricted to observed/box support
    binary: BinaryGrid  # GT, aggregated sweeps + dynamic boxes
    views: np.ndarray  # (N_cam, channels, h, w), f32-exact values
    sweeps: list[LidarSweep]
    world: SemanticGrid  # solid world the sensors observed (not persisted)


@dataclass(frozen=True)
class SceneParams:
    spec: GridSpec
    num_classes: int = 4
    object_count: tuple[int, int] = (3, 8)
    rig: CameraRig = field(default_factory=default_rig)
    num_sweeps: int = 6
    lidar_azimuths: int = 160
    lidar_elevations: tuple = DEFAULT_ELEVATIONS
    max_range: float = 24.0
    clearance: float = 2.5  # object-free disc radius around the ego path


# Size ranges (full extents, meters) per archetype; class ids >= 2 cycle
# through this table. `dynamic` marks objects whose boxes enter binary GT.
_ARCHETYPES = (
    ("building", (1.5, 3.5), (1.5, 3.5), (2.0, 3.0), False),
    ("vehicle", (1.8, 3.0), (1.0, 1.6), (1.2, 1.8), True),
    ("pedestrian", (0.4, 0.7), (0.4, 0.7), (1.2, 1.8), True),
)


def raycast(occ_flat: np.ndarray, spec: GridSpec, origins: np.ndarray,
            dirs: np.ndarray, max_range: float):
    """March rays through the grid to the first occupied voxel.

    occ_flat: (H*W*Z,) bool in linear-index order. origins/dirs: (R, 3),
    dirs need not be unit length (t is in units of |dir|). Returns
    (hit mask, t_enter, voxel index (R, 3)).
    """
    dims = np.asarray(spec.dims)
    go = np.asarray(spec.origin)
    vs = spec.voxel_size
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    r = origins.shape[0]

    with np.errstate(divide="ignore", invalid="ignore"):
        inv = np.where(dirs != 0.0, 1.0 / dirs, np.inf)
        lo_t = (go - origins) * inv
        hi_t = (go + dims * vs - origins) * inv
    zero = dirs == 0.0
    near = np.where(zero, -np.inf, np.minimum(lo_t, hi_t))
    far = np.where(zero, np.inf, np.maximum(lo_t, hi_t))
    # rays parallel to an axis outside the slab never enter
    parallel_out = zero & ((origins < go) | (origins > go + dims * vs))
    t0 = np.maximum(near.max(axis=1), 0.0)
    t_exit = far.min(axis=1)
    active = ~parallel_out.any(axis=1) & (t_exit > t0) & (t0 <= max_range)

    pos0 = origins + t0[:, None] * dirs
    vox = np.clip(np.floor((pos0 - go) / vs).astype(np.int64), 0, dims - 1)
    step = np.sign(dirs).astype(np.int64)
    with np.errstate(divide="ignore"):
        t_delta = np.where(dirs != 0.0, vs / np.abs(dirs), np.inf)
    bound = go + (vox + (step > 0)) * vs
    with np.errstate(invalid="ignore"):
        t_max = np.where(dirs != 0.0, (bound - origins) * inv, np.inf)

    t_enter = t0.copy()
    hit = np.zeros(r, dtype=bool)
    hit_t = np.zeros(r)
    hit_vox = np.zeros((r, 3), dtype=np.int64)
    strides = np.array([dims[1] * dims[2], dims[2], 1])
    rows = np.arange(r)

    for _ in range(int(dims.sum()) + 3):
        if not active.any():
            break
        lin = vox @ strides
        occupied = active & occ_flat[np.clip(lin, 0, occ_flat.size - 1)]
        occupied &= t_enter <= max_range
        hit |= occupied
        hit_t[occupied] = t_enter[occupied]
        hit_vox[occupied] = vox[occupied]
        active &= ~occupied

        axis = np.argmin(t_max, axis=1)
        t_next = t_max[rows, axis]
        vox_axis = vox[rows, axis] + step[rows, axis]
        vox[rows, axis] = vox_axis
        out = (vox_axis < 0) | (vox_axis >= dims[axis]) | (t_next > max_range)
        t_enter = np.where(active, t_next, t_enter)
        active &= ~out
        t_max[rows, axis] += t_delta[rows, axis]

    return hit, hit_t, hit_vox


def render_views(world: SemanticGrid, rig: CameraRig, noise_rng,
                 max_range: float = 24.0) -> np.ndarray:
    """Per-pixel raycast renders: inverse depth, class one-hot, noise.

    Channel layout: [1/(1+depth), one-hot over classes 1..K, noise];
    misses leave the depth/class channels at zero.
    """
    k = world.num_classes
    occ_flat = (world.labels != 0).ravel()
    labels_flat = world.labels.ravel()
    views = np.zeros((len(rig), 1 + k + 1, rig.cameras[0].height, rig.cameras[0].width))
    for ci, cam in enumerate(rig.cameras):
        u, v = np.meshgrid(np.arange(cam.width), np.arange(cam.height))
        d_cam = np.stack([(u.ravel() - cam.cx) / cam.fx,
                          (v.ravel() - cam.cy) / cam.fy,
                          np.ones(u.size)], axis=1)
        d_ego = d_cam @ cam.rotation.T
        norms = np.linalg.norm(d_ego, axis=1, keepdims=True)
        unit = d_ego / norms
        origins = np.broadcast_to(cam.translation, unit.shape)
        hit, t, vox = raycast(occ_flat, world.spec, origins, unit, max_range)
        depth = t * (1.0 / norms[:, 0])  # z-depth: t along unit dir / |d_ego per unit z|
        lin = (vox[:, 0] * world.spec.dims[1] + vox[:, 1]) * world.spec.dims[2] + vox[:, 2]
        labels = np.where(hit, labels_flat[np.clip(lin, 0, labels_flat.size - 1)], 0)
        inv_depth = np.where(hit, 1.0 / (1.0 + depth), 0.0)
        img = views[ci]
        img[0] = inv_depth.reshape(cam.height, cam.width)
        for c in range(1, k + 1):
            img[c] = (labels == c).reshape(cam.height, cam.width)
        img[k + 1] = noise_rng.random((cam.height, cam.width))
    return views


def _lidar_directions(yaw: float, azimuths: int, elevations) -> np.ndarray:
    az = yaw + 2.0 * np.pi * np.arange(azimuths) / azimuths
    el = np.asarray(elevations)
    ca, sa = np.cos(az), np.sin(az)
    ce, se = np.cos(el), np.sin(el)
    dirs = np.stack([np.outer(ca, ce), np.outer(sa, ce),
                     np.broadcast_to(se, (azimuths, el.size))], axis=-1)
    return dirs.reshape(-1, 3)


def simulate_lidar(world: SemanticGrid, pose: EgoPose, ray_count: int,
                   max_range: float, elevations=DEFAULT_ELEVATIONS) -> np.ndarray:
    """One sweep: evenly spaced azimuth/elevation rays from the sensor.

    Returns hit points in the sweep's ego frame. Hit points sit on the
    entry face of the first occupied voxel, clamped HIT_INSET into the
    voxel interior.
    """
    if ray_count <= 0:
        raise ValueError("ray_count must be positive")
    spec = world.spec
    occ_flat = (world.labels != 0).ravel()
    sensor = pose.position + np.array([0.0, 0.0, SENSOR_HEIGHT])
    dirs = _lidar_directions(pose.yaw, ray_count, elevations)
    origins = np.broadcast_to(sensor, dirs.shape)
    hit, t, vox = raycast(occ_flat, spec, origins, dirs, max_range)
    pts = sensor + t[hit, None] * dirs[hit]
    lo = np.asarray(spec.origin) + vox[hit] * spec.voxel_size
    pts = np.clip(pts, lo + HIT_INSET, lo + spec.voxel_size - HIT_INSET)
    return pose.from_reference(pts)


def voxelize_boxes(boxes, spec: GridSpec, out: np.ndarray | None = None,
                   labels: bool = False) -> np.ndarray:
    """Set voxels whose centers fall inside any box (center-in-box test)."""
    if out is None:
        out = np.zeros(spec.dims, dtype=np.uint8 if labels else bool)
    centers = spec.voxel_centers()
    for box in boxes:
        inside = box.contains(centers)
        if labels:
            out[inside] = box.class_id
        else:
            out |= inside
    return out


def aggregate_binary_gt(sweeps, boxes, spec: GridSpec) -> BinaryGrid:
    """Union of voxelized sweep points (in the reference frame) and boxes."""
    if not sweeps:
        raise ValueError("need at least one sweep")
    bits = np.zeros(spec.dims, dtype=bool)
    for sweep in sweeps:
        if sweep.points.size == 0:
            continue
        ref = sweep.pose.to_reference(sweep.points)
        idx = spec.voxel_of(ref)
        ok = spec.in_bounds(idx)
        idx = idx[ok]
        bits[idx[:, 0], idx[:, 1], idx[:, 2]] = True
    voxelize_boxes(boxes, spec, out=bits)
    return BinaryGrid(spec, bits)


def _place_objects(rng, params: SceneParams) -> list[SceneObject]:
    lo = np.asarray(params.spec.origin)
    hi = lo + np.asarray(params.spec.dims) * params.spec.voxel_size
    n_min, n_max = params.object_count
    target = int(rng.integers(n_min, n_max + 1))
    object_classes = list(range(2, params.num_classes + 1))
    objects: list[SceneObject] = []
    if not object_classes:
        return objects
    placed_aabb = []
    for _ in range(target):
        for _attempt in range(40):
            class_id = int(rng.choice(object_classes))
            _, xr, yr, zr, dynamic = _ARCHETYPES[(class_id - 2) % len(_ARCHETYPES)]
            ext = np.array([rng.uniform(*xr), rng.uniform(*yr), rng.uniform(*zr)])
            cx = rng.uniform(lo[0] + ext[0] / 2 + 0.1, hi[0] - ext[0] / 2 - 0.1)
            cy = rng.uniform(lo[1] + ext[1] / 2 + 0.1, hi[1] - ext[1] / 2 - 0.1)
            center = np.array([cx, cy, ext[2] / 2.0])
            amin, amax = center[:2] - ext[:2] / 2, center[:2] + ext[:2] / 2
            # keep the ego path clear
            nearest = np.maximum(amin, np.minimum(0.0, amax))
            if np.hypot(*nearest) < params.clearance:
                continue
            overlap = any((amin[0] < b[1][0] and amax[0] > b[0][0]
                           and amin[1] < b[1][1] and amax[1] > b[0][1])
                          for b in placed_aabb)
            if overlap:
                continue
            objects.append(SceneObject(class_id, center, ext, dynamic))
            placed_aabb.append((amin, amax))
            break
    return objects


def _sweep_poses(rng, num_sweeps: int) -> list[EgoPose]:
    xs = np.linspace(-1.5, 1.5, num_sweeps) if num_sweeps > 1 else np.zeros(1)
    poses = []
    for x in xs:
        poses.append(EgoPose(yaw=float(rng.uniform(-0.2, 0.2)),
                             position=np.array([x, float(rng.uniform(-0.4, 0.4)), 0.0])))
    return poses


def build_world(objects, params: SceneParams) -> SemanticGrid:
    """Solid semantic world: ground slab below z=0 plus object boxes."""
    spec = params.spec
    labels = np.zeros(spec.dims, dtype=np.uint8)
    ground_layers = int(round(max(0.0, -spec.origin[2]) / spec.voxel_size))
    labels[:, :, :min(ground_layers, spec.dims[2])] = GROUND_CLASS
    voxelize_boxes(objects, spec, out=labels, labels=True)
    return SemanticGrid(spec, labels, params.num_classes)


def _carve_sensor_cells(labels: np.ndarray, spec: GridSpec, poses, rig: CameraRig):
    pts = [pose.position + np.array([0.0, 0.0, SENSOR_HEIGHT]) for pose in poses]
    pts += [cam.translation for cam in rig.cameras]
    idx = spec.voxel_of(np.asarray(pts))
    ok = spec.in_bounds(idx)
    for i in idx[ok]:
        labels[i[0], i[1], i[2]] = 0


def generate_scene(seed: int, params: SceneParams) -> Scene:
    """Deterministic scene build: same (seed, params) -> identical scene."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(77,)))
    objects = _place_objects(rng, params)
    world = build_world(objects, params)
    poses = _sweep_poses(rng, params.num_sweeps)
    _carve_sensor_cells(world.labels, params.spec, poses, params.rig)
    if not (world.labels == 0).any():
        raise DegenerateSceneError("no free space left in the scene")

    sweeps = []
    for pose in poses:
        pts = simulate_lidar(world, pose, params.lidar_azimuths, params.max_range,
                             params.lidar_elevations)
        # scenes persist points as f32; round now so GT matches the files
        sweeps.append(LidarSweep(pts.astype(np.float32).astype(np.float64), pose))

    dynamic = [o for o in objects if o.dynamic]
    binary = aggregate_binary_gt(sweeps, dynamic, params.spec)
    semantic = SemanticGrid(params.spec,
                            np.where(binary.bits, world.labels, 0).astype(np.uint8),
                            params.num_classes)
    views = render_views(world, params.rig, noise_rng=rng, max_range=params.max_range)
    views = views.astype(np.float32).astype(np.float64)
    return Scene(seed=seed, spec=params.spec, num_classes=params.num_classes,
                 objects=objects, rig=params.rig, semantic=semantic, binary=binary,
                 views=views, sweeps=sweeps, world=world)
