"""Config schema, dataset persistence, CLI wiring, and artifact checks."""

import numpy as np
import pytest
from PIL import Image

from occuseg import dataset as ds
from occuseg.autolabel import load_pseudo
from occuseg.bev import class_palette, export_bev
from occuseg.cli import main
from occuseg.config import ConfigError, ExperimentConfig
from occuseg.scenegen import SceneParams, default_rig, generate_scene
from occuseg.training import evaluate
from occuseg.voxel import BinaryGrid, GridSpec, SemanticGrid, load_grid, semantic_scores

TINY_CONFIG = """
# tiny end-to-end harness config
dataset.grid_h = 8
dataset.grid_w = 8
dataset.grid_z = 4
dataset.origin_x = -2.0
dataset.origin_y = -2.0
dataset.origin_z = -0.5
dataset.pretrain_scenes = 4
dataset.train_scenes = 6
dataset.val_scenes = 2
dataset.min_objects = 1
dataset.max_objects = 2
dataset.cameras = 2
dataset.view_h = 8
dataset.view_w = 16
dataset.focal = 8.0
dataset.sweeps = 3
dataset.lidar_rays = 72
dataset.max_range = 10.0
model.embed = 8
model.mid_channels = 8
model.out_channels = 8
model.heads = 2
model.encoder_stem = 4
model.mlp_hidden = 8
model.depth_bins = 4
model.depth_min = 0.3
model.depth_max = 3.5
pretrain.epochs = 2
pretrain.batch = 2
finetune.epochs = 2
finetune.batch = 2
offboard.epochs = 2
offboard.batch = 2
student.epochs = 1
student.gt_count = 2
autolabel.scenes_from = 2
sweep.pretrain_counts = 0,2
sweep.seeds = 0
sweep.finetune_scenes = 2
"""


def write_config(tmp_path, extra=""):
    path = tmp_path / "exp.cfg"
    path.write_text(TINY_CONFIG + f"\nout.dir = {tmp_path / 'run'}\n" + extra)
    return path


class TestConfig:
    def test_defaults_and_parse(self):
        cfg = ExperimentConfig.parse("dataset.seed = 9\nmodel.heads = 8\n")
        assert cfg["dataset.seed"] == 9
        assert cfg["model.heads"] == 8
        assert cfg["model.transform"] == "lift_splat"

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError):
            ExperimentConfig.parse("dataset.sed = 9\n")

    def test_duplicate_key_rejected(self):
        with pytest.raises(ConfigError):
            ExperimentConfig.parse("dataset.seed = 1\ndataset.seed = 2\n")

    def test_bad_value_rejected(self):
        with pytest.raises(ConfigError):
            ExperimentConfig.parse("dataset.seed = banana\n")
        with pytest.raises(ConfigError):
            ExperimentConfig.parse("model.transform = warp\n")

    def test_comments_and_lists(self):
        cfg = ExperimentConfig.parse(
            "sweep.seeds = 3,4,5  # three seeds\n# full-line comment\n")
        assert cfg["sweep.seeds"] == (3, 4, 5)

    def test_fingerprint_tracks_effective_values(self):
        a = ExperimentConfig.parse("")
        b = ExperimentConfig.parse("dataset.seed = 7\n")  # the default, spelled out
        c = ExperimentConfig.parse("dataset.seed = 8\n")
        assert a.fingerprint() == b.fingerprint()
        assert a.fingerprint() != c.fingerprint()

    def test_derived_objects(self):
        cfg = ExperimentConfig.parse("")
        assert cfg.grid_spec().dims == (32, 32, 8)
        assert cfg.model_config().heads == 4
        plan = cfg.plan("finetune")
        assert plan.regime == "S+B*" and plan.lr == 2e-4


class TestDatasetIO:
    def test_scene_round_trip(self, tmp_path):
        spec = GridSpec((8, 8, 4), 0.5, (-2.0, -2.0, -0.5))
        params = SceneParams(spec=spec, rig=default_rig(2, 16, 8, 8.0),
                             object_count=(1, 2), num_sweeps=3,
                             lidar_azimuths=72, clearance=0.8, max_range=10.0)
        scene = generate_scene(3, params)
        ds.write_scene(scene, "train", tmp_path / "0003")
        loaded = ds.read_scene(tmp_path / "0003")
        assert loaded.semantic == scene.semantic
        assert loaded.binary == scene.binary
        assert np.array_equal(loaded.views, scene.views)
        assert len(loaded.sweeps) == len(scene.sweeps)
        for a, b in zip(loaded.sweeps, scene.sweeps):
            assert np.array_equal(a.points, b.points)
            assert a.pose.yaw == b.pose.yaw
        for ca, cb in zip(loaded.rig.cameras, scene.rig.cameras):
            assert np.array_equal(ca.rotation, cb.rotation)
            assert ca.fx == cb.fx

    def test_manifest_round_trip(self, tmp_path):
        spec = GridSpec((8, 8, 4), 0.5, (-2.0, -2.0, -0.5))
        manifest = ds.DatasetManifest("abcd1234", 7, 4, spec,
                                      [("0000", "pretrain"), ("0001", "val")])
        ds.write_manifest(manifest, tmp_path)
        loaded = ds.read_manifest(tmp_path)
        assert loaded.fingerprint == "abcd1234"
        assert loaded.spec == spec
        assert loaded.scenes == manifest.scenes
        assert loaded.ids_for("val") == ["0001"]


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """gen-data + pretrain once; later commands build on these artifacts."""
    tmp = tmp_path_factory.mktemp("pipeline")
    cfg_path = write_config(tmp)
    assert main(["gen-data", "--config", str(cfg_path)]) == 0
    assert main(["pretrain", "--config", str(cfg_path)]) == 0
    return tmp, cfg_path


class TestCli:
    def test_gen_data_deterministic_manifest(self, tmp_path):
        cfg_path = write_config(tmp_path)
        assert main(["gen-data", "--config", str(cfg_path)]) == 0
        cfg = ExperimentConfig.load(cfg_path)
        first = (cfg.dataset_dir() / "manifest.txt").read_bytes()
        assert main(["gen-data", "--config", str(cfg_path), "--force"]) == 0
        assert (cfg.dataset_dir() / "manifest.txt").read_bytes() == first

    def test_gen_data_refuses_overwrite(self, pipeline, capsys):
        tmp, cfg_path = pipeline
        assert main(["gen-data", "--config", str(cfg_path)]) == 1
        assert "error: dataset:" in capsys.readouterr().err

    def test_split_sizes_match_config(self, pipeline):
        tmp, cfg_path = pipeline
        cfg = ExperimentConfig.load(cfg_path)
        manifest = ds.read_manifest(cfg.dataset_dir())
        assert len(manifest.ids_for("pretrain")) == 4
        assert len(manifest.ids_for("train")) == 6
        assert len(manifest.ids_for("val")) == 2

    def test_scene_reload_spot_check(self, pipeline):
        tmp, cfg_path = pipeline
        cfg = ExperimentConfig.load(cfg_path)
        manifest = ds.read_manifest(cfg.dataset_dir())
        sid = manifest.ids_for("train")[0]
        idx = [s for s, _ in manifest.scenes].index(sid)
        regen = generate_scene(ds.scene_seed(manifest.seed, idx), cfg.scene_params())
        loaded = ds.read_scene(cfg.dataset_dir() / "scenes" / sid)
        assert loaded.semantic == regen.semantic
        assert np.array_equal(loaded.views, regen.views)

    def test_finetune_and_eval(self, pipeline):
        tmp, cfg_path = pipeline
        assert main(["finetune", "--config", str(cfg_path)]) == 0
        assert main(["eval", "--config", str(cfg_path)]) == 0
        out = tmp / "run" / "eval" / "finetune_val.csv"
        header, row = out.read_text().strip().split("\n")
        assert header.split(",")[6:10] == ["class_1", "class_2", "class_3", "class_4"]

    def test_eval_matches_semantic_scores(self, pipeline):
        tmp, cfg_path = pipeline
        cfg = ExperimentConfig.load(cfg_path)
        manifest = ds.read_manifest(cfg.dataset_dir())
        from occuseg.cli import _build_model, _load_into

        class Args:
            config, out, seed, force = str(cfg_path), None, None, False

        model = _build_model(cfg, manifest)
        _load_into(model, tmp / "run" / "finetune" / "ckpt_final.b2sc", cfg, False)
        scenes = ds.load_split(cfg.dataset_dir(), manifest, "val")
        stats = evaluate(model, scenes)
        row = (tmp / "run" / "eval" / "finetune_val.csv").read_text().strip()
        cols = row.split("\n")[1].split(",")
        assert float(cols[4]) == stats["iou"]
        assert float(cols[5]) == stats["miou"]
        # recompute from per-scene confusion sums via semantic_scores parts
        per_scene = [semantic_scores(model.forward(s.views).prediction, s.semantic)
                     for s in scenes]
        assert len(per_scene) == len(scenes)

    def test_eval_deterministic(self, pipeline):
        tmp, cfg_path = pipeline
        out = tmp / "run" / "eval" / "finetune_val.csv"
        first = out.read_bytes()
        assert main(["eval", "--config", str(cfg_path)]) == 0
        assert out.read_bytes() == first

    def test_fingerprint_chaining_rejected(self, pipeline, capsys):
        tmp, cfg_path = pipeline
        other = tmp / "other.cfg"
        other.write_text(TINY_CONFIG + f"\nout.dir = {tmp / 'run'}\n"
                         + "model.init_seed = 5\n")
        assert main(["finetune", "--config", str(other)]) == 1
        assert "error: fingerprint:" in capsys.readouterr().err

    def test_autolabel_requires_offboard_checkpoint(self, pipeline, capsys):
        tmp, cfg_path = pipeline
        assert main(["autolabel", "--config", str(cfg_path)]) == 1
        assert "offboard checkpoint" in capsys.readouterr().err

    def test_offboard_autolabel_student(self, pipeline):
        tmp, cfg_path = pipeline
        assert main(["offboard", "--config", str(cfg_path)]) == 0
        assert main(["autolabel", "--config", str(cfg_path)]) == 0
        cfg = ExperimentConfig.load(cfg_path)
        labels = sorted((tmp / "run" / "labels" / "top2").glob("*.b2sp"))
        assert len(labels) == 4  # train scenes 2..5
        first = load_pseudo(labels[0], 4)
        assert first.mode == "top2" and first.classes.shape[1] == 2
        assert main(["student", "--config", str(cfg_path)]) == 0
        assert (tmp / "run" / "student" / "ckpt_final.b2sc").exists()

    def test_autolabel_deterministic(self, pipeline):
        tmp, cfg_path = pipeline
        labels = sorted((tmp / "run" / "labels" / "top2").glob("*.b2sp"))
        before = [p.read_bytes() for p in labels]
        assert main(["autolabel", "--config", str(cfg_path)]) == 0
        after = [p.read_bytes() for p in sorted(
            (tmp / "run" / "labels" / "top2").glob("*.b2sp"))]
        assert before == after

    def test_sweep_rows_and_resume(self, pipeline, capsys):
        tmp, cfg_path = pipeline
        assert main(["sweep", "--config", str(cfg_path)]) == 0
        results = (tmp / "run" / "sweep" / "results.csv").read_text().strip().split("\n")
        # 1 strategy x 1 regime x 2 counts x 1 seed
        assert len(results) == 1 + 2
        capsys.readouterr()
        assert main(["sweep", "--config", str(cfg_path)]) == 0
        assert "0 to run" in capsys.readouterr().out

    def test_sweep_summary_recomputes_means(self, pipeline):
        tmp, cfg_path = pipeline
        rows = (tmp / "run" / "sweep" / "results.csv").read_text().strip().split("\n")[1:]
        by_group = {}
        for row in rows:
            cols = row.split(",")
            by_group.setdefault((cols[0], cols[1], cols[2]), []).append(float(cols[5]))
        summary = (tmp / "run" / "sweep" / "summary.csv").read_text().strip().split("\n")[1:]
        for line in summary:
            cols = line.split(",")
            expect = np.mean(by_group[(cols[0], cols[1], cols[2])])
            assert float(cols[4]) == pytest.approx(expect, abs=1e-15)

    def test_missing_config_flag(self, capsys):
        assert main(["pretrain"]) == 1
        assert "error: config:" in capsys.readouterr().err


class TestExportBev:
    def test_all_free_uniform_background(self, tmp_path):
        spec = GridSpec((6, 5, 3), 0.5, (0, 0, 0))
        out = tmp_path / "empty.pgm"
        export_bev(BinaryGrid.empty(spec), out)
        img = np.asarray(Image.open(out))
        assert img.shape == (6, 5)
        assert np.all(img == 0)

    def test_max_over_z_palette(self, tmp_path):
        spec = GridSpec((4, 4, 3), 0.5, (0, 0, 0))
        labels = np.zeros(spec.dims, dtype=np.uint8)
        labels[1, 2, 0] = 1
        labels[1, 2, 2] = 3  # max over z wins
        labels[3, 0, 1] = 2
        grid = SemanticGrid(spec, labels, 4)
        out = tmp_path / "sem.ppm"
        export_bev(grid, out)
        img = np.asarray(Image.open(out))
        palette = class_palette(4)
        assert tuple(img[1, 2]) == tuple(palette[3])
        assert tuple(img[3, 0]) == tuple(palette[2])
        assert tuple(img[0, 0]) == tuple(palette[0])

    def test_z_slice(self, tmp_path):
        spec = GridSpec((4, 4, 3), 0.5, (0, 0, 0))
        labels = np.zeros(spec.dims, dtype=np.uint8)
        labels[1, 1, 2] = 4
        grid = SemanticGrid(spec, labels, 4)
        export_bev(grid, tmp_path / "s0.ppm", z_slice=0)
        img = np.asarray(Image.open(tmp_path / "s0.ppm"))
        assert np.all(img == 0)

    def test_round_trip_through_reference_reader(self, tmp_path):
        rng = np.random.default_rng(4)
        spec = GridSpec((8, 6, 2), 0.5, (0, 0, 0))
        labels = rng.integers(0, 5, spec.dims).astype(np.uint8)
        grid = SemanticGrid(spec, labels, 4)
        out = tmp_path / "rt.ppm"
        export_bev(grid, out)
        img = np.asarray(Image.open(out))
        palette = class_palette(4)
        expect = palette[labels.max(axis=2)]
        assert np.array_equal(img, expect)

    def test_cli_export(self, tmp_path):
        cfg_path = write_config(tmp_path)
        spec = GridSpec((4, 4, 2), 0.5, (0, 0, 0))
        grid = BinaryGrid.empty(spec)
        grid.bits[2, 1, 0] = True
        from occuseg.voxel import save_grid
        save_grid(grid, tmp_path / "g.b2so")
        out = tmp_path / "g.pgm"
        assert main(["export-bev", str(tmp_path / "g.b2so"),
                     "--config", str(cfg_path), "--out", str(out)]) == 0
        img = np.asarray(Image.open(out))
        assert img[2, 1] == 255 and img[0, 0] == 0
