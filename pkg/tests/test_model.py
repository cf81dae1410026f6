"""Model stages against naive oracles: sampling identities, lift-splat mass
accounting, sparse/dense equivalence, and end-to-end gradient checks."""

import numpy as np
import pytest

from conftest import MICRO_RIG, MICRO_SPEC, jitter_params, micro_model_config
from occuseg.model import ModelConfig, OccupancyModel
from occuseg.model.layers import Builder, DeformableAttention
from occuseg.model.network import downsample_any
from occuseg.nn import tensor as T
from occuseg.nn.gradcheck import grad_check
from occuseg.nn.params import ParamStore
from occuseg.nn.tensor import Tensor
from occuseg.scenegen import back_project
from occuseg.voxel import BinaryGrid, GridSpec

RNG = np.random.default_rng(7)
DESK_SPEC = GridSpec((32, 32, 8), 0.5, (-8.0, -8.0, -0.5))


def standalone_attention(channels, heads, points, ndim, seed=0):
    store = ParamStore()
    b = Builder(store, np.random.default_rng(seed))
    return DeformableAttention(b, "attn", channels, heads, points, ndim), store


def set_identity_projections(attn):
    attn.value_proj.w.tensor.data = np.eye(attn.channels)
    attn.out_proj.w.tensor.data = np.eye(attn.channels)


def manual_interp(vol, coord):
    """Reference multilinear interpolation (any rank)."""
    ndim = len(vol.shape) - 1
    sizes = vol.shape[:ndim]
    pos = [np.clip(coord[a], 0, 1) * (n - 1) for a, n in enumerate(sizes)]
    lo = [min(int(np.floor(p)), max(n - 2, 0)) for p, n in zip(pos, sizes)]
    fr = [p - i if n > 1 else 0.0 for p, i, n in zip(pos, lo, sizes)]
    out = np.zeros(vol.shape[-1])
    for mask in range(2 ** ndim):
        idx, w = [], 1.0
        for a in range(ndim):
            bit = (mask >> a) & 1
            idx.append(min(lo[a] + bit, sizes[a] - 1))
            w *= fr[a] if bit else 1.0 - fr[a]
        out += w * vol[tuple(idx)]
    return out


def naive_deform_attention(attn, query, refs, value_map):
    """Per-query, per-head, per-point loop oracle."""
    q = query.shape[0]
    hd, h, p, nd = attn.head_dim, attn.heads, attn.points, attn.ndim
    w_off, b_off = attn.offset.w.data, attn.offset.b.data
    w_wgt, b_wgt = attn.weight.w.data, attn.weight.b.data
    v = (value_map.reshape(-1, value_map.shape[-1]) @ attn.value_proj.w.data
         + attn.value_proj.b.data)
    v = v.reshape(value_map.shape[:-1] + (attn.channels,))
    out = np.zeros((q, attn.channels))
    for i in range(q):
        offs = (query[i] @ w_off + b_off).reshape(p, nd, h)
        logits = (query[i] @ w_wgt + b_wgt).reshape(p, h)
        weights = np.exp(logits - logits.max(axis=0))
        weights /= weights.sum(axis=0)
        for m in range(h):
            acc = np.zeros(hd)
            for k in range(p):
                coord = refs[i] + offs[k, :, m]
                acc += weights[k, m] * manual_interp(v[..., m * hd:(m + 1) * hd], coord)
            out[i, m * hd:(m + 1) * hd] = acc
    return out @ attn.out_proj.w.data + attn.out_proj.b.data


class TestDeformableAttention:
    def test_zero_init_samples_at_reference(self):
        attn, _ = standalone_attention(8, heads=2, points=1, ndim=2, seed=3)
        set_identity_projections(attn)
        vmap = RNG.normal(size=(5, 6, 8))
        refs = np.array([[0.25, 2 / 5], [1.0, 0.0], [0.5, 0.9]])
        out = attn(Tensor(RNG.normal(size=(3, 8))), refs, Tensor(vmap))
        for i, r in enumerate(refs):
            assert np.abs(out.data[i] - manual_interp(vmap, r)).max() < 1e-12

    def test_constant_value_map_ignores_offsets(self):
        attn, _ = standalone_attention(6, heads=3, points=4, ndim=3, seed=4)
        set_identity_projections(attn)
        rng = np.random.default_rng(9)
        attn.offset.w.tensor.data = rng.normal(0, 0.3, attn.offset.w.data.shape)
        attn.offset.b.tensor.data = rng.normal(0, 0.3, attn.offset.b.data.shape)
        attn.weight.w.tensor.data = rng.normal(0, 0.5, attn.weight.w.data.shape)
        const = rng.normal(size=6)
        vmap = np.broadcast_to(const, (4, 3, 2, 6)).copy()
        out = attn(Tensor(rng.normal(size=(10, 6))), rng.random((10, 3)), Tensor(vmap))
        assert np.abs(out.data - (const @ attn.value_proj.w.data
                                  + attn.value_proj.b.data)
                      @ attn.out_proj.w.data - attn.out_proj.b.data).max() < 1e-12

    @pytest.mark.parametrize("ndim,shape", [(2, (5, 4)), (3, (4, 3, 3))])
    def test_matches_naive_loop(self, ndim, shape):
        rng = np.random.default_rng(ndim)
        for trial in range(5):
            heads = int(rng.choice([1, 2, 4]))
            points = int(rng.integers(1, 5))
            attn, store = standalone_attention(8, heads, points, ndim,
                                               seed=100 + trial)
            for p in store.all():  # random offsets/weights too
                p.tensor.data = rng.normal(0, 0.4, p.data.shape)
            q = int(rng.integers(1, 7))
            query = rng.normal(size=(q, 8))
            refs = rng.random((q, ndim))
            vmap = rng.normal(size=shape + (8,))
            got = attn(Tensor(query), refs, Tensor(vmap))
            want = naive_deform_attention(attn, query, refs, vmap)
            assert np.abs(got.data - want).max() < 1e-10


class TestEncoder:
    def test_zero_input_gives_zero_features(self, micro_model):
        views = np.zeros((2, 6, 8, 16))
        halves, quarters = micro_model.encode(views)
        for t in halves + quarters:
            assert np.all(t.data == 0.0)  # biases start at zero

    def test_camera_permutation_permutes_maps(self, micro_model, micro_scene):
        halves, _ = micro_model.encode(micro_scene.views)
        halves_swapped, _ = micro_model.encode(micro_scene.views[::-1])
        assert np.array_equal(halves[0].data, halves_swapped[1].data)
        assert np.array_equal(halves[1].data, halves_swapped[0].data)

    def test_encoder_gradients(self, micro_model, micro_scene):
        jitter_params(micro_model)
        wsum = [RNG.normal(size=s) for s in ((4, 8, 8), (2, 4, 8))]

        def loss_fn(*_):
            halves, quarters = micro_model.encode(micro_scene.views[:1])
            return T.add(T.tsum(T.mul(halves[0], Tensor(wsum[0]))),
                         T.tsum(T.mul(quarters[0], Tensor(wsum[1]))))

        conv_params = [micro_model.store[n].tensor for n in micro_model.store.names()
                       if n.startswith("encoder/")]
        res = grad_check(loss_fn, conv_params, max_coords=6,
                         rng=np.random.default_rng(0))
        assert res.max_rel_error < 1e-4, res


class TestLiftSplat:
    def test_uniform_depth_matches_accumulation_oracle(self, micro_scene):
        model = OccupancyModel(micro_model_config(), MICRO_SPEC, MICRO_RIG, 4, 3)
        # zero depth head -> exactly uniform 1/D over bins
        model.depth_head.w.tensor.data[:] = 0.0
        model.depth_head.b.tensor.data[:] = 0.0
        _, quarters = model.encode(micro_scene.views)
        vol = model.lift_splat(quarters).data
        cfg = model.cfg
        # independent accumulation over every (camera, pixel, bin)
        ctx = [q.data.reshape(-1, cfg.embed) @ model.context.w.data
               + model.context.b.data for q in quarters]
        expect = np.zeros((model.vc, cfg.embed))
        extent = np.asarray(MICRO_SPEC.dims) * MICRO_SPEC.voxel_size
        cell = extent / np.asarray(model.compact_dims)
        depths = cfg.depth_min + (np.arange(cfg.depth_bins) + 0.5) * (
            cfg.depth_max - cfg.depth_min) / cfg.depth_bins
        for ci, cam in enumerate(MICRO_RIG.cameras):
            h4, w4 = cam.height // 4, cam.width // 4
            pix = 0
            for v4 in range(h4):
                for u4 in range(w4):
                    u = u4 * (cam.width - 1) / (w4 - 1)
                    v = v4 * (cam.height - 1) / (h4 - 1)
                    for d in depths:
                        pt = back_project(cam, u, v, d)
                        idx = np.floor((pt - np.asarray(MICRO_SPEC.origin)) / cell)
                        if np.all(idx >= 0) and np.all(idx < model.compact_dims):
                            lin = int((idx[0] * model.compact_dims[1] + idx[1])
                                      * model.compact_dims[2] + idx[2])
                            expect[lin] += ctx[ci][pix] / cfg.depth_bins
                    pix += 1
        assert np.abs(vol.reshape(model.vc, -1) - expect).max() < 1e-9

    def test_one_hot_depth_single_voxel(self, micro_scene):
        model = OccupancyModel(micro_model_config(), MICRO_SPEC, MICRO_RIG, 4, 3)
        model.depth_head.w.tensor.data[:] = 0.0
        model.depth_head.b.tensor.data[:] = 0.0
        model.depth_head.b.tensor.data[1] = 60.0  # bin 1 takes all mass
        _, quarters = model.encode(micro_scene.views)
        vol = model.lift_splat(quarters).data.reshape(model.vc, -1)
        # oracle: all mass goes to the bin-1 voxel of each pixel
        table = []
        per_cam = model.ls_pixels_per_cam
        flat_table = np.full((len(MICRO_RIG) * per_cam, model.cfg.depth_bins), -1)
        flat_table.ravel()[model.ls_keep] = 0
        flat = np.full(len(MICRO_RIG) * per_cam * model.cfg.depth_bins, -1,
                       dtype=np.int64)
        flat[model.ls_keep] = model.ls_scatter_idx
        table = flat.reshape(-1, model.cfg.depth_bins)
        ctx_all = np.concatenate(
            [q.data.reshape(-1, model.cfg.embed) for q in quarters]) \
            @ model.context.w.data + model.context.b.data
        expect = np.zeros_like(vol)
        for p in range(table.shape[0]):
            if table[p, 1] >= 0:
                expect[table[p, 1]] += ctx_all[p]
        assert np.abs(vol - expect).max() < 1e-12

    def test_mass_conservation(self, micro_scene):
        model = OccupancyModel(micro_model_config(), MICRO_SPEC, MICRO_RIG, 4, 3)
        jitter_params(model)
        _, quarters = model.encode(micro_scene.views)
        feats = np.concatenate([q.data.reshape(-1, model.cfg.embed) for q in quarters])
        dist = feats @ model.depth_head.w.data + model.depth_head.b.data
        dist = np.exp(dist - dist.max(axis=1, keepdims=True))
        dist /= dist.sum(axis=1, keepdims=True)
        ctx = feats @ model.context.w.data + model.context.b.data
        mass = (dist[:, :, None] * ctx[:, None, :]).reshape(-1, model.cfg.embed)
        in_grid_mass = mass[model.ls_keep].sum()
        vol = model.lift_splat(quarters).data
        assert abs(vol.sum() - in_grid_mass) < 1e-9

    def test_all_bins_out_of_grid_zero_volume(self, micro_scene):
        cfg = micro_model_config(depth_min=50.0, depth_max=60.0)
        model = OccupancyModel(cfg, MICRO_SPEC, MICRO_RIG, 4, 3)
        _, quarters = model.encode(micro_scene.views)
        assert np.all(model.lift_splat(quarters).data == 0.0)


class TestBinaryDecoder:
    def test_shape_chain(self):
        cfg = ModelConfig()
        compact, mid, full = cfg.volume_dims(DESK_SPEC)
        assert compact == (8, 8, 8) and mid == (16, 16, 8) and full == (32, 32, 8)

    def test_constant_volume_constant_logits(self, micro_model):
        compact = Tensor(np.ones(micro_model.compact_dims + (8,)) * 0.37)
        _, logits = micro_model.binary_stage(compact)
        assert np.ptp(logits.data) < 1e-12

    def test_bad_grid_dims_rejected(self):
        with pytest.raises(ValueError):
            ModelConfig().volume_dims(GridSpec((30, 32, 8), 0.5, (0, 0, 0)))


class TestGatherOccupied:
    def _mid_and_logits(self, model, value):
        mid = Tensor(RNG.normal(size=model.mid_dims + (8,)))
        logits = Tensor(np.full(model.vb, value))
        return mid, logits

    def test_all_high_logits_full_set(self, micro_model):
        mid, logits = self._mid_and_logits(micro_model, 10.0)
        sfs = micro_model.gather_occupied(mid, logits)
        assert sfs.count == micro_model.vb
        assert np.array_equal(sfs.indices, np.arange(micro_model.vb))

    def test_all_low_logits_fallback(self, micro_model):
        mid, logits = self._mid_and_logits(micro_model, -10.0)
        logits.data[17] = -1.0  # strongest, still below threshold
        sfs = micro_model.gather_occupied(mid, logits)
        assert sfs.count == 1 and sfs.indices[0] == 17

    def test_random_mask_matches_scan(self, micro_model):
        mid = Tensor(RNG.normal(size=micro_model.mid_dims + (8,)))
        logits = Tensor(RNG.normal(size=micro_model.vb))
        sfs = micro_model.gather_occupied(mid, logits)
        tau = micro_model.cfg.threshold
        expect = [i for i in range(micro_model.vb)
                  if 1 / (1 + np.exp(-logits.data[i])) > tau]
        assert sfs.indices.tolist() == expect
        flat = mid.data.reshape(micro_model.vb, -1)
        assert np.array_equal(sfs.features.data, flat[expect])

    def test_gt_mask_downsampling(self, micro_model, micro_scene):
        mid = Tensor(RNG.normal(size=micro_model.mid_dims + (8,)))
        sfs = micro_model.gather_occupied(mid, None, gt_binary=micro_scene.binary)
        pooled = downsample_any(micro_scene.binary.bits, micro_model.mid_dims)
        assert np.array_equal(sfs.indices, np.flatnonzero(pooled.ravel()))


def manual_layer_norm(x, gain, bias, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gain + bias


def dense_reference_layer(model, layer, x, halves_data):
    """Independent dense implementation of one sparse-transformer layer.

    Operates on the full mid volume with naive loops: queries are the raw
    B' features, values the normalized stream, matching the module.
    """
    c = model.cfg.mid_channels
    xn = manual_layer_norm(x, layer["norm1"].gain.data, layer["norm1"].bias.data)
    vol = xn.reshape(model.mid_dims + (c,))
    x = x + naive_deform_attention(layer["spatial"], x, model.mid_refs, vol)
    if "cross" in layer:
        xn = manual_layer_norm(x, layer["norm2"].gain.data, layer["norm2"].bias.data)
        total = np.zeros_like(x)
        counts = np.zeros(x.shape[0])
        for (refs, valid), feat in zip(model.mid_cam, halves_data):
            rows = np.flatnonzero(valid)
            if rows.size:
                total[rows] += naive_deform_attention(layer["cross"], xn[rows],
                                                      refs[rows], feat)
                counts += valid
        x = x + total / np.maximum(counts, 1)[:, None]
    xn = manual_layer_norm(x, layer["norm3"].gain.data, layer["norm3"].bias.data)
    hidden = np.maximum(xn @ layer["mlp"].fc1.w.data + layer["mlp"].fc1.b.data, 0)
    return x + hidden @ layer["mlp"].fc2.w.data + layer["mlp"].fc2.b.data


class TestSparseLayer:
    def test_dense_equivalence_all_occupied(self):
        rng = np.random.default_rng(0)
        for trial in range(20):
            dims = (4 * int(rng.integers(1, 3)), 4 * int(rng.integers(1, 3)),
                    int(rng.integers(1, 4)))
            spec = GridSpec(dims, 0.5, (-dims[0] * 0.25, -dims[1] * 0.25, -0.5))
            cfg = micro_model_config(
                heads=int(rng.choice([1, 2])),
                self_points=int(rng.integers(1, 4)),
                cross_points=int(rng.integers(1, 4)),
                sparse_image_cross=bool(rng.integers(0, 2)))
            model = OccupancyModel(cfg, spec, MICRO_RIG, 4, init_seed=trial)
            jitter_params(model, scale=0.2, seed=trial)
            layer = model.sparse[0]
            mid = rng.normal(size=(model.vb, cfg.mid_channels))
            halves = [Tensor(rng.normal(size=(4, 8, 8))) for _ in MICRO_RIG.cameras]

            from occuseg.model.network import SparseFeatureSet
            mid_t = Tensor(mid)
            sfs = SparseFeatureSet(np.arange(model.vb), T.gather_rows(mid_t, np.arange(model.vb)))
            got = model._run_sparse_layer(layer, sfs, mid_t, halves)
            want = dense_reference_layer(model, layer, mid.copy(),
                                         [h.data for h in halves])
            assert np.abs(got.features.data - want).max() < 1e-8

    def test_zero_init_subblocks_reduce_to_mlp(self, micro_model):
        model = micro_model
        layer = model.sparse[0]
        layer["spatial"].out_proj.w.tensor.data[:] = 0.0
        layer["cross"].out_proj.w.tensor.data[:] = 0.0
        from occuseg.model.network import SparseFeatureSet
        rng = np.random.default_rng(5)
        mid = Tensor(rng.normal(size=(model.vb, 8)))
        idx = np.sort(rng.choice(model.vb, 6, replace=False))
        feats = rng.normal(size=(6, 8))
        sfs = SparseFeatureSet(idx, Tensor(feats))
        halves = [Tensor(rng.normal(size=(4, 8, 8))) for _ in MICRO_RIG.cameras]
        out = model._run_sparse_layer(layer, sfs, mid, halves)
        ln = layer["norm3"]
        xn = manual_layer_norm(feats, ln.gain.data, ln.bias.data)
        hidden = np.maximum(xn @ layer["mlp"].fc1.w.data + layer["mlp"].fc1.b.data, 0)
        want = feats + hidden @ layer["mlp"].fc2.w.data + layer["mlp"].fc2.b.data
        assert np.abs(out.features.data - want).max() < 1e-12
        # per-element independence: change another element, row 0 unchanged
        feats2 = feats.copy()
        feats2[3] += 5.0
        out2 = model._run_sparse_layer(layer, SparseFeatureSet(idx, Tensor(feats2)),
                                       mid, halves)
        assert np.array_equal(out.features.data[0], out2.features.data[0])

    def test_storage_order_invariance(self, micro_model):
        model = micro_model
        jitter_params(model, seed=8)
        layer = model.sparse[0]
        from occuseg.model.network import SparseFeatureSet
        rng = np.random.default_rng(6)
        mid = Tensor(rng.normal(size=(model.vb, 8)))
        idx = np.sort(rng.choice(model.vb, 10, replace=False))
        feats = rng.normal(size=(10, 8))
        halves = [Tensor(rng.normal(size=(4, 8, 8))) for _ in MICRO_RIG.cameras]
        out = model._run_sparse_layer(layer, SparseFeatureSet(idx, Tensor(feats)),
                                      mid, halves)
        perm = rng.permutation(10)
        out_p = model._run_sparse_layer(
            layer, SparseFeatureSet(idx[perm], Tensor(feats[perm])), mid, halves)
        assert np.abs(out_p.features.data - out.features.data[perm]).max() < 1e-12


class TestSemanticDecoder:
    def test_output_covers_full_grid(self, micro_model, micro_scene):
        res = micro_model.forward(micro_scene.views)
        assert res.semantic_logits.shape == (np.prod(MICRO_SPEC.dims), 5)
        assert res.prediction.spec == MICRO_SPEC

    def test_empty_fallback_still_full_grid(self, micro_model, micro_scene):
        micro_model.binary_head.b.tensor.data[:] = -50.0
        res = micro_model.forward(micro_scene.views)
        assert res.sparse_indices.size == 1
        assert res.semantic_logits.shape == (np.prod(MICRO_SPEC.dims), 5)


class TestForward:
    def test_offboard_forces_free_outside_mask(self, micro_model, micro_scene):
        gt = BinaryGrid.empty(MICRO_SPEC)
        gt.bits[4, 5, 2] = True
        res = micro_model.forward(micro_scene.views, mode="offboard", gt_binary=gt)
        labels = res.prediction.labels
        assert labels[4, 5, 2] in (1, 2, 3, 4)
        mask = np.ones(MICRO_SPEC.dims, bool)
        mask[4, 5, 2] = False
        assert np.all(labels[mask] == 0)

    def test_onboard_argmax_all_free(self, micro_model, micro_scene):
        micro_model.sem_head.b.tensor.data[0] = 100.0  # free wins everywhere
        res = micro_model.forward(micro_scene.views)
        assert np.all(res.prediction.labels == 0)

    def test_offboard_requires_gt(self, micro_model, micro_scene):
        with pytest.raises(ValueError):
            micro_model.forward(micro_scene.views, mode="offboard")

    def test_offboard_requires_intermediate(self, micro_scene):
        model = OccupancyModel(micro_model_config(strategy="multi_head"),
                               MICRO_SPEC, MICRO_RIG, 4, 0)
        with pytest.raises(ValueError):
            model.forward(micro_scene.views, mode="offboard",
                          gt_binary=micro_scene.binary)

    def test_strategy_wiring(self, micro_scene):
        mh = OccupancyModel(micro_model_config(strategy="multi_head"),
                            MICRO_SPEC, MICRO_RIG, 4, 0)
        res = mh.forward(micro_scene.views)
        assert res.binary_logits is not None and res.semantic_logits is not None
        rep = OccupancyModel(micro_model_config(strategy="replacing"),
                             MICRO_SPEC, MICRO_RIG, 4, 0)
        res = rep.forward(micro_scene.views)
        assert res.binary_logits is None and res.semantic_logits is not None

    def test_deformable_transform_runs(self, micro_scene):
        model = OccupancyModel(micro_model_config(transform="deformable",
                                                  dense_layers=1),
                               MICRO_SPEC, MICRO_RIG, 4, 0)
        res = model.forward(micro_scene.views)
        assert res.semantic_logits is not None

    def test_init_is_deterministic(self, micro_scene):
        a = OccupancyModel(micro_model_config(), MICRO_SPEC, MICRO_RIG, 4, 11)
        b = OccupancyModel(micro_model_config(), MICRO_SPEC, MICRO_RIG, 4, 11)
        for n in a.store.names():
            assert np.array_equal(a.store[n].data, b.store[n].data)

    def test_trunk_partition_names(self, micro_model):
        trunk = {p.name for p in micro_model.trunk_params()}
        assert any(n.startswith("encoder/") for n in trunk)
        assert any(n.startswith("binary/") for n in trunk)
        assert not any(n.startswith(("sparse/", "semantic/")) for n in trunk)


class TestEndToEndGradients:
    def test_full_model_micro_gradcheck(self, micro_scene):
        model = OccupancyModel(micro_model_config(), MICRO_SPEC, MICRO_RIG, 4, 5)
        jitter_params(model, scale=0.1)
        labels = micro_scene.semantic.labels.ravel().astype(np.int64)
        target = model.downsample_binary_target(micro_scene.binary)

        def loss_fn(*_):
            res = model.forward(micro_scene.views, mode="offboard",
                                gt_binary=micro_scene.binary, want_prediction=False)
            loss = T.focal_loss(res.semantic_logits, labels, gamma=2.0)
            return T.add(loss, T.bce_with_logits(res.binary_logits, target))

        tensors = [p.tensor for p in model.store.all()]
        res = grad_check(loss_fn, tensors, max_coords=3,
                         rng=np.random.default_rng(1))
        assert res.max_rel_error < 1e-3, res

    def test_dense_layer_gradcheck(self, micro_scene):
        model = OccupancyModel(micro_model_config(transform="deformable",
                                                  dense_layers=1, sparse_layers=0),
                               MICRO_SPEC, MICRO_RIG, 4, 6)
        jitter_params(model, scale=0.1, seed=9)
        target = model.downsample_binary_target(micro_scene.binary)

        def loss_fn(*_):
            _, logits = model.forward_binary(micro_scene.views)
            return T.bce_with_logits(logits, target)

        layer_tensors = [model.store[n].tensor for n in model.store.names()
                         if n.startswith("dense/0/")]
        res = grad_check(loss_fn, layer_tensors, max_coords=4,
                         rng=np.random.default_rng(2))
        assert res.max_rel_error < 1e-4, res
