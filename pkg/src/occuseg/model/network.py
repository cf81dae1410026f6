"""The occupancy network: image encoder, image-to-3D transform, binary
decoder, occupied-voxel gather, sparse transformer, and semantic decoder.

Parameter names are slash paths whose first segment is the stage tag;
everything up to and including the binary decoder is the pre-trainable
trunk (`TRUNK_STAGES`), the sparse/semantic stages are not.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..nn import tensor as T
from ..nn.params import ParamStore, save_checkpoint
from ..nn.tensor import Tensor
from ..scenegen import CameraRig, back_project, project_points
from ..voxel import BinaryGrid, GridSpec, SemanticGrid
from .config import ModelConfig
from .layers import Builder, DeformableAttention, MLP

TRUNK_STAGES = ("encoder", "transform", "dense", "binary")


@dataclass
class SparseFeatureSet:
    """Features of the occupied mid-grid voxels, indices ascending."""

    indices: np.ndarray  # (M,) linear indices into the mid grid
    features: Tensor  # (M, C')

    @property
    def count(self) -> int:
        return int(self.indices.size)


@dataclass
class ForwardResult:
    binary_logits: Tensor | None  # (Vb,) mid-grid occupancy logits
    semantic_logits: Tensor | None  # (V_full, K+1)
    prediction: SemanticGrid | None
    sparse_indices: np.ndarray | None


def _normalized_grid_refs(dims) -> np.ndarray:
    """Grid-aligned normalized coordinates of every cell, (prod(dims), n)."""
    axes = [np.arange(n) / (n - 1) if n > 1 else np.zeros(n) for n in dims]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


def _volume_centers(spec: GridSpec, dims) -> np.ndarray:
    """Ego-frame centers of a derived volume's cells (anisotropic cells)."""
    extent = np.asarray(spec.dims) * spec.voxel_size
    cell = extent / np.asarray(dims)
    axes = [np.asarray(spec.origin)[i] + (np.arange(dims[i]) + 0.5) * cell[i]
            for i in range(3)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


def downsample_any(bits: np.ndarray, target_dims) -> np.ndarray:
    """Any-occupied pooling of a full-resolution boolean grid."""
    fh, fw, fz = (b // t for b, t in zip(bits.shape, target_dims))
    th, tw, tz = target_dims
    return bits.reshape(th, fh, tw, fw, tz, fz).any(axis=(1, 3, 5))


class OccupancyModel:
    def __init__(self, cfg: ModelConfig, spec: GridSpec, rig: CameraRig,
                 num_classes: int, init_seed: int = 0):
        self.cfg = cfg
        self.spec = spec
        self.rig = rig
        self.num_classes = num_classes
        self.compact_dims, self.mid_dims, self.full_dims = cfg.volume_dims(spec)
        self.vc = int(np.prod(self.compact_dims))
        self.vb = int(np.prod(self.mid_dims))
        self.store = ParamStore()
        rng = np.random.default_rng(np.random.SeedSequence([init_seed, 1618]))
        b = Builder(self.store, rng)
        c, cm = cfg.embed, cfg.mid_channels

        view_channels = 1 + num_classes + 1
        self.enc1 = b.conv("encoder/conv1", view_channels, cfg.encoder_stem)
        self.enc2 = b.conv("encoder/conv2", cfg.encoder_stem, c)
        self.enc3 = b.conv("encoder/conv3", c, c)
        self.enc4 = b.conv("encoder/conv4", c, c)

        if cfg.transform == "lift_splat":
            self.depth_head = b.linear("transform/depth", c, cfg.depth_bins)
            self.context = b.linear("transform/context", c, c)
            # learned per-voxel embedding added to the splat output; keeps
            # camera-blind voxels distinguishable downstream
            self.pos_embed = b.param("transform/pos_embed", (self.vc, c), fan_in=c)
        else:
            self.query_volume = b.param("transform/queries", (self.vc, c), fan_in=c)

        self.dense = [self._dense_layer(b, f"dense/{i}", c)
                      for i in range(cfg.dense_layers)]

        # sub-voxel position channels let the post-upsample linears tell
        # sibling voxels of one source cell apart; their weight rows start
        # at zero, so a fresh decoder is exactly pointwise
        pm = 4 * cfg.z_up_mid
        pf = 4 * cfg.z_up_full
        self.binary_up = b.linear("binary/up", c + pm, cm)
        self.binary_up.w.tensor.data[c:] = 0.0
        if cfg.strategy != "replacing":
            self.binary_head = b.linear("binary/head", cm, 1)

        if cfg.strategy == "intermediate":
            self.sparse = [self._sparse_layer(b, f"sparse/{i}", cm)
                           for i in range(cfg.sparse_layers)]
            self.sem_up = b.linear("semantic/up", 2 * cm + pf, cfg.out_channels)
            self.sem_up.w.tensor.data[2 * cm:] = 0.0
            self.sem_head = b.linear("semantic/head", cfg.out_channels, num_classes + 1)
        else:
            tag = "semantic_mh" if cfg.strategy == "multi_head" else "semantic_rep"
            self.sem_up = b.linear(f"{tag}/up", cm + pf, cfg.out_channels)
            self.sem_up.w.tensor.data[cm:] = 0.0
            self.sem_head = b.linear(f"{tag}/head", cfg.out_channels, num_classes + 1)

        self._build_geometry()

    def _dense_layer(self, b, name, c):
        cfg = self.cfg
        return {
            "norm1": b.norm(f"{name}/norm1", c),
            "self": DeformableAttention(b, f"{name}/self", c, cfg.heads,
                                        cfg.self_points, ndim=3),
            "norm2": b.norm(f"{name}/norm2", c),
            "cross": DeformableAttention(b, f"{name}/cross", c, cfg.heads,
                                         cfg.cross_points, ndim=2),
            "norm3": b.norm(f"{name}/norm3", c),
            "mlp": MLP(b, f"{name}/mlp", c, cfg.mlp_hidden),
        }

    def _sparse_layer(self, b, name, c):
        cfg = self.cfg
        layer = {
            "norm1": b.norm(f"{name}/norm1", c),
            "spatial": DeformableAttention(b, f"{name}/spatial", c, cfg.heads,
                                           cfg.self_points, ndim=3),
            "norm3": b.norm(f"{name}/norm3", c),
            "mlp": MLP(b, f"{name}/mlp", c, cfg.mlp_hidden),
        }
        if cfg.sparse_image_cross:
            layer["norm2"] = b.norm(f"{name}/norm2", c)
            layer["cross"] = DeformableAttention(b, f"{name}/cross", c, cfg.heads,
                                                 cfg.cross_points, ndim=2,
                                                 value_channels=cfg.embed)
        return layer

    # --- static geometry ------------------------------------------------------

    @staticmethod
    def _subvoxel_onehot(dims, z_up):
        """One-hot of each voxel's (h%2, w%2, z%z_up) offset in its block."""
        h, w, z = np.meshgrid(*(np.arange(n) for n in dims), indexing="ij")
        code = (h % 2) * 2 * z_up + (w % 2) * z_up + (z % z_up)
        return np.eye(4 * z_up)[code]

    def _build_geometry(self):
        cfg, spec = self.cfg, self.spec
        self.mid_pos = self._subvoxel_onehot(self.mid_dims, cfg.z_up_mid)
        self.full_pos = self._subvoxel_onehot(self.full_dims, cfg.z_up_full)
        self.compact_refs = _normalized_grid_refs(self.compact_dims)
        self.mid_refs = _normalized_grid_refs(self.mid_dims)
        compact_centers = _volume_centers(spec, self.compact_dims)
        mid_centers = _volume_centers(spec, self.mid_dims)
        self.compact_cam = [self._camera_refs(cam, compact_centers)
                            for cam in self.rig.cameras]
        self.mid_cam = [self._camera_refs(cam, mid_centers) for cam in self.rig.cameras]
        if cfg.transform == "lift_splat":
            self._build_lift_splat_table()

    def _camera_refs(self, cam, centers):
        uv, _, valid = project_points(cam, centers)
        refs = np.stack([uv[:, 1] / (cam.height - 1), uv[:, 0] / (cam.width - 1)],
                        axis=1)
        return np.clip(refs, 0.0, 1.0), valid

    def _build_lift_splat_table(self):
        """Flat voxel index per (camera, quarter-res pixel, depth bin)."""
        cfg, spec = self.cfg, self.spec
        extent = np.asarray(spec.dims) * spec.voxel_size
        cell = extent / np.asarray(self.compact_dims)
        origin = np.asarray(spec.origin)
        bin_depths = cfg.depth_min + (np.arange(cfg.depth_bins) + 0.5) * (
            cfg.depth_max - cfg.depth_min) / cfg.depth_bins
        rows, cols = [], []
        self.ls_pixels_per_cam = None
        for cam in self.rig.cameras:
            h4, w4 = cam.height // 4, cam.width // 4
            u4, v4 = np.meshgrid(np.arange(w4), np.arange(h4))
            u_img = u4.ravel() * (cam.width - 1) / max(w4 - 1, 1)
            v_img = v4.ravel() * (cam.height - 1) / max(h4 - 1, 1)
            pix_idx = []
            for d in bin_depths:
                pts = np.stack([back_project(cam, u, v, d)
                                for u, v in zip(u_img, v_img)])
                idx = np.floor((pts - origin) / cell).astype(np.int64)
                ok = np.all((idx >= 0) & (idx < np.asarray(self.compact_dims)), axis=1)
                lin = (idx[:, 0] * self.compact_dims[1] + idx[:, 1]) * self.compact_dims[2] + idx[:, 2]
                pix_idx.append(np.where(ok, lin, -1))
            rows.append(np.stack(pix_idx, axis=1))  # (P4, D)
            self.ls_pixels_per_cam = rows[-1].shape[0]
        table = np.concatenate(rows, axis=0)  # (N*P4, D)
        flat = table.ravel()
        self.ls_keep = np.flatnonzero(flat >= 0)
        self.ls_scatter_idx = flat[self.ls_keep]

    # --- forward stages -------------------------------------------------------

    def encode(self, views: np.ndarray):
        """Per-camera conv stack: feature maps at 1/2 and 1/4 resolution."""
        halves, quarters = [], []
        for ci in range(views.shape[0]):
            x = Tensor(views[ci].transpose(1, 2, 0)[None])  # (1, h, w, ch)
            x = T.relu(self.enc1(x, stride=2))
            x = T.relu(self.enc2(x, stride=1))
            halves.append(T.reshape(x, x.shape[1:]))
            x = T.relu(self.enc3(x, stride=2))
            x = T.relu(self.enc4(x, stride=1))
            quarters.append(T.reshape(x, x.shape[1:]))
        return halves, quarters

    def lift_splat(self, quarters) -> Tensor:
        """Depth-distribution splat of pixel features into the compact volume."""
        feats = T.concat([T.reshape(q, (-1, self.cfg.embed)) for q in quarters], axis=0)
        dist = T.softmax(self.depth_head(feats), axis=1)  # (NP, D)
        ctx = self.context(feats)  # (NP, C)
        mass = T.mul(T.reshape(dist, (dist.shape[0], self.cfg.depth_bins, 1)),
                     T.reshape(ctx, (ctx.shape[0], 1, self.cfg.embed)))
        mass = T.reshape(mass, (-1, self.cfg.embed))
        kept = T.gather_rows(mass, self.ls_keep)
        vol = T.scatter_rows(kept, self.ls_scatter_idx, self.vc)
        return T.reshape(vol, self.compact_dims + (self.cfg.embed,))

    def _cross_attention(self, attn, x_norm: Tensor, cam_refs, halves) -> Tensor:
        """Average deformable image cross-attention over in-view cameras."""
        v = x_norm.shape[0]
        counts = np.zeros(v)
        total = None
        for (refs, valid), feat in zip(cam_refs, halves):
            rows = np.flatnonzero(valid)
            if rows.size == 0:
                continue
            out = attn(T.gather_rows(x_norm, rows), refs[rows], feat)
            piece = T.scatter_rows(out, rows, v)
            total = piece if total is None else T.add(total, piece)
            counts += valid
        if total is None:
            return T.scale(x_norm, 0.0)
        inv = np.where(counts > 0, 1.0 / np.maximum(counts, 1), 0.0)
        return T.mul(total, inv[:, None])

    def _run_dense_layer(self, layer, vol: Tensor, halves) -> Tensor:
        c = self.cfg.embed
        x = T.reshape(vol, (self.vc, c))
        xn = layer["norm1"](x)
        x = T.add(x, layer["self"](xn, self.compact_refs,
                                   T.reshape(xn, self.compact_dims + (c,))))
        xn = layer["norm2"](x)
        x = T.add(x, self._cross_attention(layer["cross"], xn, self.compact_cam, halves))
        x = T.add(x, layer["mlp"](layer["norm3"](x)))
        return T.reshape(x, self.compact_dims + (c,))

    def build_compact(self, halves, quarters) -> Tensor:
        if self.cfg.transform == "lift_splat":
            vol = T.add(self.lift_splat(quarters),
                        T.reshape(self.pos_embed.tensor,
                                  self.compact_dims + (self.cfg.embed,)))
        else:
            vol = T.reshape(self.query_volume.tensor,
                            self.compact_dims + (self.cfg.embed,))
        for layer in self.dense:
            vol = self._run_dense_layer(layer, vol, halves)
        return vol

    def binary_stage(self, compact: Tensor):
        """Upsample to the mid volume B' and predict occupancy logits."""
        up = T.upsample_nearest(compact, (2, 2, self.cfg.z_up_mid))
        up = T.concat([up, Tensor(self.mid_pos)], axis=-1)
        mid = T.relu(self.binary_up(up))  # (Hb, Wb, Zb, C')
        logits = None
        if self.cfg.strategy != "replacing":
            flat = T.reshape(mid, (self.vb, self.cfg.mid_channels))
            logits = T.reshape(self.binary_head(flat), (self.vb,))
        return mid, logits

    def gather_occupied(self, mid: Tensor, logits: Tensor | None,
                        gt_binary: BinaryGrid | None = None) -> SparseFeatureSet:
        """Select occupied mid voxels from prediction or GT; never empty."""
        if gt_binary is not None:
            mask = downsample_any(gt_binary.bits, self.mid_dims).ravel()
        else:
            tau = self.cfg.threshold
            mask = logits.data > np.log(tau / (1.0 - tau))
        idx = np.flatnonzero(mask)
        if idx.size == 0:
            idx = np.array([int(np.argmax(logits.data)) if logits is not None else 0])
        flat = T.reshape(mid, (self.vb, self.cfg.mid_channels))
        return SparseFeatureSet(idx, T.gather_rows(flat, idx))

    def _run_sparse_layer(self, layer, sfs: SparseFeatureSet, mid_flat: Tensor,
                          halves) -> SparseFeatureSet:
        c = self.cfg.mid_channels
        x = sfs.features
        # (1) spatial mixing: scatter to a dense volume and attend over it
        # with the dense B' queries. Attention is independent per query, so
        # only the rows that survive the re-gather are evaluated.
        xn = layer["norm1"](x)
        vol = T.reshape(T.scatter_rows(xn, sfs.indices, self.vb),
                        self.mid_dims + (c,))
        queries = T.gather_rows(mid_flat, sfs.indices)
        x = T.add(x, layer["spatial"](queries, self.mid_refs[sfs.indices], vol))
        # (2) image cross-attention per occupied element
        if "cross" in layer:
            xn = layer["norm2"](x)
            cam_refs = [(refs[sfs.indices], valid[sfs.indices])
                        for refs, valid in self.mid_cam]
            x = T.add(x, self._cross_attention(layer["cross"], xn, cam_refs, halves))
        # (3) per-element MLP
        x = T.add(x, layer["mlp"](layer["norm3"](x)))
        return SparseFeatureSet(sfs.indices, x)

    def semantic_stage(self, sfs: SparseFeatureSet, mid: Tensor) -> Tensor:
        """Scatter refined features, concat with B', upsample, decode."""
        c = self.cfg.mid_channels
        scattered = T.reshape(T.scatter_rows(sfs.features, sfs.indices, self.vb),
                              self.mid_dims + (c,))
        cat = T.concat([scattered, mid], axis=-1)
        up = T.upsample_nearest(cat, (2, 2, self.cfg.z_up_full))
        up = T.concat([up, Tensor(self.full_pos)], axis=-1)
        full = T.relu(self.sem_up(up))
        logits = self.sem_head(full)
        return T.reshape(logits, (int(np.prod(self.full_dims)), self.num_classes + 1))

    def _head_only_semantic(self, mid: Tensor) -> Tensor:
        up = T.upsample_nearest(mid, (2, 2, self.cfg.z_up_full))
        up = T.concat([up, Tensor(self.full_pos)], axis=-1)
        full = T.relu(self.sem_up(up))
        logits = self.sem_head(full)
        return T.reshape(logits, (int(np.prod(self.full_dims)), self.num_classes + 1))

    # --- entry points ---------------------------------------------------------

    def forward_binary(self, views: np.ndarray):
        """Trunk only: everything up to the binary decoder."""
        halves, quarters = self.encode(views)
        compact = self.build_compact(halves, quarters)
        mid, logits = self.binary_stage(compact)
        return mid, logits

    def forward(self, views: np.ndarray, mode: str = "onboard",
                gt_binary: BinaryGrid | None = None,
                want_prediction: bool = True) -> ForwardResult:
        cfg = self.cfg
        if mode not in ("onboard", "offboard"):
            raise ValueError(f"unknown mode {mode!r}")
        if mode == "offboard":
            if cfg.strategy != "intermediate":
                raise ValueError("offboard inference needs the intermediate strategy")
            if gt_binary is None:
                raise ValueError("offboard mode requires the GT binary grid")
        halves, quarters = self.encode(views)
        compact = self.build_compact(halves, quarters)
        mid, logits = self.binary_stage(compact)

        if cfg.strategy == "intermediate":
            mid_flat = T.reshape(mid, (self.vb, cfg.mid_channels))
            gt_for_mask = gt_binary if mode == "offboard" else None
            sfs = self.gather_occupied(mid, logits, gt_binary=gt_for_mask)
            for layer in self.sparse:
                sfs = self._run_sparse_layer(layer, sfs, mid_flat, halves)
            sem_logits = self.semantic_stage(sfs, mid)
            sparse_idx = sfs.indices
        else:
            sem_logits = self._head_only_semantic(mid)
            sparse_idx = None

        prediction = None
        if want_prediction:
            prediction = self.decode(sem_logits.data, mode, gt_binary)
        return ForwardResult(binary_logits=logits, semantic_logits=sem_logits,
                             prediction=prediction, sparse_indices=sparse_idx)

    def decode(self, sem_logits: np.ndarray, mode: str,
               gt_binary: BinaryGrid | None = None) -> SemanticGrid:
        """Argmax decode; offboard forces voxels outside GT binary to free."""
        k = self.num_classes
        if mode == "offboard":
            inside = 1 + np.argmax(sem_logits[:, 1:], axis=1)
            labels = np.where(gt_binary.bits.ravel(), inside, 0)
        else:
            labels = np.argmax(sem_logits, axis=1)
        return SemanticGrid(self.spec, labels.reshape(self.full_dims).astype(np.uint8), k)

    def downsample_binary_target(self, grid: BinaryGrid) -> np.ndarray:
        """GT occupancy for the mid-resolution binary loss."""
        return downsample_any(grid.bits, self.mid_dims).ravel().astype(np.float64)

    def trunk_params(self):
        return self.store.with_prefix(TRUNK_STAGES)

    def save(self, path, fingerprint: str = "") -> None:
        save_checkpoint(self.store, path, fingerprint)
