"""On-disk datasets: one directory per scene plus split manifests.

Scene directory layout:
    semantic.b2so   GT semantic grid (voxel file format)
    binary.b2so     GT binary grid
    views.bin       u32 rank | dims u32 each | f32 values, C order
    sweeps.bin      u32 count | per sweep: yaw f64, position 3xf64,
                    u32 npoints, points 3xf32 each
    scene.txt       seed, classes, split, one camera line per camera

Text manifests store floats with repr(), which round-trips f64 exactly.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .scenegen import (
    Camera,
    CameraRig,
    EgoPose,
    LidarSweep,
    Scene,
    SceneParams,
    generate_scene,
)
from .voxel import BinaryGrid, GridSpec, SemanticGrid, load_grid, save_grid

SPLITS = ("pretrain", "train", "val")


class DatasetError(Exception):
    pass


@dataclass
class LoadedScene:
    scene_id: str
    split: str
    seed: int
    spec: GridSpec
    num_classes: int
    rig: CameraRig
    semantic: SemanticGrid
    binary: BinaryGrid
    views: np.ndarray
    sweeps: list[LidarSweep]


@dataclass
class DatasetManifest:
    fingerprint: str
    seed: int
    num_classes: int
    spec: GridSpec
    scenes: list[tuple[str, str]]  # (scene id, split)

    def ids_for(self, split: str) -> list[str]:
        return [sid for sid, s in self.scenes if s == split]


def scene_seed(dataset_seed: int, index: int) -> int:
    ss = np.random.SeedSequence([dataset_seed, index])
    return int(ss.generate_state(1)[0])


def save_views(path, views: np.ndarray) -> None:
    views32 = np.ascontiguousarray(views, dtype=np.float32)
    with open(path, "wb") as f:
        f.write(struct.pack("<I", views32.ndim))
        f.write(struct.pack(f"<{views32.ndim}I", *views32.shape))
        f.write(views32.tobytes())


def load_views(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    (rank,) = struct.unpack_from("<I", raw)
    dims = struct.unpack_from(f"<{rank}I", raw, 4)
    data = np.frombuffer(raw, dtype="<f4", offset=4 + 4 * rank)
    if data.size != int(np.prod(dims)):
        raise DatasetError(f"{path}: view payload size mismatch")
    return data.reshape(dims).astype(np.float64)


def save_sweeps(path, sweeps) -> None:
    with open(path, "wb") as f:
        f.write(struct.pack("<I", len(sweeps)))
        for sw in sweeps:
            f.write(struct.pack("<d", sw.pose.yaw))
            f.write(struct.pack("<3d", *sw.pose.position))
            pts = np.ascontiguousarray(sw.points, dtype=np.float32)
            f.write(struct.pack("<I", pts.shape[0]))
            f.write(pts.tobytes())


def load_sweeps(path) -> list[LidarSweep]:
    with open(path, "rb") as f:
        raw = f.read()
    off = 0
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    sweeps = []
    for _ in range(count):
        (yaw,) = struct.unpack_from("<d", raw, off)
        off += 8
        pos = struct.unpack_from("<3d", raw, off)
        off += 24
        (npts,) = struct.unpack_from("<I", raw, off)
        off += 4
        pts = np.frombuffer(raw, dtype="<f4", count=npts * 3, offset=off)
        off += npts * 12
        sweeps.append(LidarSweep(pts.reshape(npts, 3).astype(np.float64),
                                 EgoPose(yaw, np.asarray(pos))))
    return sweeps


def _camera_line(cam: Camera) -> str:
    vals = [cam.fx, cam.fy, cam.cx, cam.cy]
    vals += list(cam.rotation.ravel()) + list(cam.translation)
    return " ".join([str(cam.width), str(cam.height)] + [repr(float(v)) for v in vals])


def _parse_camera(line: str) -> Camera:
    parts = line.split()
    width, height = int(parts[0]), int(parts[1])
    fx, fy, cx, cy = (float(v) for v in parts[2:6])
    rot = np.array([float(v) for v in parts[6:15]]).reshape(3, 3)
    trans = np.array([float(v) for v in parts[15:18]])
    return Camera(fx, fy, cx, cy, width, height, rotation=rot, translation=trans)


def write_scene(scene: Scene, split: str, scene_dir: Path) -> None:
    scene_dir.mkdir(parents=True, exist_ok=True)
    save_grid(scene.semantic, scene_dir / "semantic.b2so")
    save_grid(scene.binary, scene_dir / "binary.b2so")
    save_views(scene_dir / "views.bin", scene.views)
    save_sweeps(scene_dir / "sweeps.bin", scene.sweeps)
    lines = [f"seed = {scene.seed}", f"classes = {scene.num_classes}", f"split = {split}"]
    lines += [f"camera = {_camera_line(cam)}" for cam in scene.rig.cameras]
    (scene_dir / "scene.txt").write_text("\n".join(lines) + "\n")


def read_scene(scene_dir: Path) -> LoadedScene:
    meta: dict[str, list[str]] = {}
    for line in (scene_dir / "scene.txt").read_text().splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition("=")
        meta.setdefault(key.strip(), []).append(value.strip())
    num_classes = int(meta["classes"][0])
    semantic = load_grid(scene_dir / "semantic.b2so", num_classes=num_classes)
    binary = load_grid(scene_dir / "binary.b2so")
    rig = CameraRig(tuple(_parse_camera(c) for c in meta.get("camera", [])))
    return LoadedScene(scene_id=scene_dir.name, split=meta["split"][0],
                       seed=int(meta["seed"][0]), spec=semantic.spec,
                       num_classes=num_classes, rig=rig, semantic=semantic,
                       binary=binary, views=load_views(scene_dir / "views.bin"),
                       sweeps=load_sweeps(scene_dir / "sweeps.bin"))


def write_manifest(manifest: DatasetManifest, root: Path) -> None:
    lines = [
        "format = b2s-dataset-v1",
        f"fingerprint = {manifest.fingerprint}",
        f"seed = {manifest.seed}",
        f"classes = {manifest.num_classes}",
        "grid = " + " ".join(str(d) for d in manifest.spec.dims),
        f"voxel_size = {manifest.spec.voxel_size!r}",
        "origin = " + " ".join(repr(v) for v in manifest.spec.origin),
    ]
    lines += [f"scene = {sid} {split}" for sid, split in manifest.scenes]
    (root / "manifest.txt").write_text("\n".join(lines) + "\n")


def read_manifest(root: Path) -> DatasetManifest:
    path = Path(root) / "manifest.txt"
    if not path.exists():
        raise DatasetError(f"no dataset manifest at {path}")
    fields: dict[str, str] = {}
    scenes: list[tuple[str, str]] = []
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key == "scene":
            sid, split = value.split()
            if split not in SPLITS:
                raise DatasetError(f"unknown split {split!r} in manifest")
            scenes.append((sid, split))
        else:
            fields[key] = value
    if fields.get("format") != "b2s-dataset-v1":
        raise DatasetError(f"unsupported dataset format {fields.get('format')!r}")
    dims = tuple(int(v) for v in fields["grid"].split())
    spec = GridSpec(dims, float(fields["voxel_size"]),
                    tuple(float(v) for v in fields["origin"].split()))
    return DatasetManifest(fingerprint=fields["fingerprint"], seed=int(fields["seed"]),
                           num_classes=int(fields["classes"]), spec=spec, scenes=scenes)


def build_dataset(root: Path, params: SceneParams, dataset_seed: int,
                  split_counts: dict[str, int], fingerprint: str = "",
                  force: bool = False, workers: int = 1,
                  progress=None) -> DatasetManifest:
    """Generate and persist all scenes; deterministic per (seed, params)."""
    root = Path(root)
    if (root / "manifest.txt").exists() and not force:
        raise DatasetError(f"{root} already contains a dataset (use force to overwrite)")
    jobs = []
    index = 0
    for split in SPLITS:
        for _ in range(split_counts.get(split, 0)):
            jobs.append((f"{index:04d}", split, scene_seed(dataset_seed, index)))
            index += 1

    def build_one(job):
        sid, split, seed = job
        scene = generate_scene(seed, params)
        write_scene(scene, split, root / "scenes" / sid)
        return sid

    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for i, _ in enumerate(pool.map(_BuildJob(root, params), jobs)):
                if progress:
                    progress(i + 1, len(jobs))
    else:
        for i, job in enumerate(jobs):
            build_one(job)
            if progress:
                progress(i + 1, len(jobs))

    manifest = DatasetManifest(fingerprint=fingerprint, seed=dataset_seed,
                               num_classes=params.num_classes, spec=params.spec,
                               scenes=[(sid, split) for sid, split, _ in jobs])
    write_manifest(manifest, root)
    return manifest


class _BuildJob:
    """Picklable per-scene builder for the process pool."""

    def __init__(self, root: Path, params: SceneParams):
        self.root = Path(root)
        self.params = params

    def __call__(self, job):
        sid, split, seed = job
        scene = generate_scene(seed, self.params)
        write_scene(scene, split, self.root / "scenes" / sid)
        return sid


def load_split(root: Path, manifest: DatasetManifest, split: str,
               start: int = 0, count: int | None = None) -> list[LoadedScene]:
    ids = manifest.ids_for(split)
    if count is not None and count > 0:
        ids = ids[start:start + count]
    elif start:
        ids = ids[start:]
    return [read_scene(Path(root) / "scenes" / sid) for sid in ids]
