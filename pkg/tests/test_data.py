import json

import numpy as np
import pytest

from vloss import data as D
from vloss.data import (
    DataError,
    LabelSpace,
    SceneConfig,
    caption_for,
    generate_synth_captions,
    generate_synth_detection,
    generate_synth_panoptic,
    load_dataset,
    rle_decode,
    rle_encode,
    sample_scene,
    unify_label_space,
)


class TestRLE:
    def test_all_ones_4x4(self):
        assert rle_encode(np.ones((4, 4), dtype=bool)) == [0, 16]
        np.testing.assert_array_equal(rle_decode([0, 16], (4, 4)), np.ones((4, 4), dtype=bool))

    def test_all_zeros(self):
        runs = rle_encode(np.zeros((3, 3), dtype=bool))
        np.testing.assert_array_equal(rle_decode(runs, (3, 3)), np.zeros((3, 3), dtype=bool))

    def test_column_major(self):
        mask = np.zeros((2, 3), dtype=bool)
        mask[0, 0] = True  # first element in F-order
        assert rle_encode(mask) == [0, 1, 5]

    def test_roundtrip_random(self):
        rng = np.random.default_rng(0)
        for _ in range(30):
            mask = rng.random((9, 7)) > 0.5
            np.testing.assert_array_equal(rle_decode(rle_encode(mask), (9, 7)), mask)

    def test_bad_total(self):
        with pytest.raises(DataError):
            rle_decode([0, 5], (2, 2))


class TestLabelSpace:
    def test_union_stable_order(self):
        a = LabelSpace(["cat", "dog"], [True, True])
        b = LabelSpace(["dog", "sky"], [True, False])
        u = unify_label_space([a, b])
        assert u.names == ["cat", "dog", "sky"]
        assert u.is_thing == [True, True, False]

    def test_identity(self):
        a = LabelSpace(["cat"], [True])
        assert unify_label_space([a, a]).names == ["cat"]

    def test_conflict_names_class(self):
        a = LabelSpace(["grass"], [True])
        b = LabelSpace(["grass"], [False])
        with pytest.raises(DataError, match="grass"):
            unify_label_space([a, b])


class TestSceneGenerator:
    def test_panoptic_partition(self):
        cfg = SceneConfig(num_images=4)
        rng = np.random.default_rng(0)
        for _ in range(4):
            scene = sample_scene(cfg, rng)
            cover = np.zeros((64, 64), dtype=int)
            for s in scene.segments:
                cover += s["mask"]
            assert (cover == 1).all()

    def test_zero_things_pure_stuff(self):
        cfg = SceneConfig(num_images=1, shapes_per_image=(0, 0))
        scene = sample_scene(cfg, np.random.default_rng(1))
        assert all(not s["is_thing"] for s in scene.segments)

    def test_too_small_rejected(self):
        with pytest.raises(DataError):
            SceneConfig(image_size=8, min_shape=14, max_shape=30)

    def test_bad_thing_name(self):
        with pytest.raises(DataError):
            SceneConfig(thing_classes=["redcircle"])

    def test_mask_inside_box(self):
        cfg = SceneConfig(num_images=1, mask_noise=2)
        rng = np.random.default_rng(2)
        scene = sample_scene(cfg, rng)
        for t in scene.things:
            noisy = D._noisy_pseudo_mask(t["mask"], t["box"], 2, rng)
            y0, x0, y1, x1 = t["box"]
            outside = noisy.copy()
            outside[y0:y1, x0:x1] = False
            assert not outside.any()


class TestGenerators:
    def test_panoptic_roundtrip(self, tmp_path):
        cfg = SceneConfig(num_images=3)
        generate_synth_panoptic(cfg, seed=0, out_dir=tmp_path)
        ds = load_dataset(tmp_path / "panoptic", "panoptic")
        assert len(ds) == 3
        assert ds.label_space.names == cfg.thing_classes + cfg.stuff_classes
        for s in ds.samples:
            assert s.image.dtype == np.float32 and s.image.shape == (64, 64, 3)
            cover = np.zeros((64, 64), dtype=int)
            for seg in s.segments:
                cover += seg["mask"]
            assert (cover == 1).all()

    def test_deterministic_files(self, tmp_path):
        cfg = SceneConfig(num_images=2)
        generate_synth_panoptic(cfg, seed=5, out_dir=tmp_path / "a")
        generate_synth_panoptic(cfg, seed=5, out_dir=tmp_path / "b")
        ia = (tmp_path / "a/panoptic/index.json").read_bytes()
        ib = (tmp_path / "b/panoptic/index.json").read_bytes()
        assert ia == ib
        ra = (tmp_path / "a/panoptic/images/000000.vlt").read_bytes()
        rb = (tmp_path / "b/panoptic/images/000000.vlt").read_bytes()
        assert ra == rb

    def test_detection_no_stuff_and_noise_zero_identity(self, tmp_path):
        cfg = SceneConfig(num_images=3, mask_noise=0)
        generate_synth_detection(cfg, seed=1, out_dir=tmp_path)
        ds = load_dataset(tmp_path / "detection", "detection")
        assert all(ds.label_space.is_thing)
        with open(tmp_path / "detection/index.json") as fh:
            index = json.load(fh)
        assert all("segments" not in e for e in index["images"])
        # mask_noise=0: pseudo masks equal true visible masks (boxes bound them)
        for s in ds.samples:
            for o in s.objects:
                y0, x0, y1, x1 = o["box"]
                assert o["mask"][y0:y1, x0:x1].any()
                outside = o["mask"].copy()
                outside[y0:y1, x0:x1] = False
                assert not outside.any()

    def test_extra_vocab_classes_present(self, tmp_path):
        cfg = SceneConfig(num_images=8, thing_classes=["red circle", "blue square", "purple diamond"])
        generate_synth_detection(cfg, seed=3, out_dir=tmp_path)
        ds = load_dataset(tmp_path / "detection", "detection")
        seen = {o["class"] for s in ds.samples for o in s.objects}
        assert "purple diamond" in seen

    def test_captions_truthful_and_distinct(self, tmp_path):
        cfg = SceneConfig(num_images=6, shapes_per_image=(1, 2))
        generate_synth_captions(cfg, seed=0, out_dir=tmp_path)
        ds = load_dataset(tmp_path / "caption", "caption")
        caps = [s.caption for s in ds.samples]
        assert len(set(caps)) == len(caps)
        for s in ds.samples:
            words = set(s.caption.replace(".", "").split())
            assert words & {"circle", "square", "triangle", "diamond", "cross", "plain"}

    def test_caption_mentions_scene_contents(self):
        cfg = SceneConfig(num_images=1, thing_classes=["red circle"], stuff_classes=["grass"])
        scene = sample_scene(cfg, np.random.default_rng(4))
        if scene.things:
            cap = caption_for(scene, cfg.caption_template, np.random.default_rng(0))
            assert "red" in cap and "circle" in cap and "grass" in cap


class TestLoaderErrors:
    def test_truncated_raster(self, tmp_path):
        cfg = SceneConfig(num_images=1)
        generate_synth_panoptic(cfg, seed=0, out_dir=tmp_path)
        raster = tmp_path / "panoptic/images/000000.vlt"
        raster.write_bytes(raster.read_bytes()[:-16])
        with pytest.raises(Exception, match="offset"):
            load_dataset(tmp_path / "panoptic", "panoptic")

    def test_malformed_json_offset(self, tmp_path):
        cfg = SceneConfig(num_images=1)
        generate_synth_panoptic(cfg, seed=0, out_dir=tmp_path)
        idx = tmp_path / "panoptic/index.json"
        idx.write_text(idx.read_text()[:-5])
        with pytest.raises(DataError, match="byte"):
            load_dataset(tmp_path / "panoptic", "panoptic")

    def test_missing_field_path(self, tmp_path):
        cfg = SceneConfig(num_images=1)
        generate_synth_panoptic(cfg, seed=0, out_dir=tmp_path)
        idx = tmp_path / "panoptic/index.json"
        data = json.loads(idx.read_text())
        del data["images"][0]["segments"][0]["rle"]
        idx.write_text(json.dumps(data))
        with pytest.raises(DataError, match=r"images\[0\].segments\[0\].rle"):
            load_dataset(tmp_path / "panoptic", "panoptic")

    def test_wrong_stream(self, tmp_path):
        cfg = SceneConfig(num_images=1)
        generate_synth_panoptic(cfg, seed=0, out_dir=tmp_path)
        with pytest.raises(DataError):
            load_dataset(tmp_path / "panoptic", "detection")


class TestFlip:
    def test_panoptic_flip_consistent(self, tmp_path):
        cfg = SceneConfig(num_images=1)
        generate_synth_panoptic(cfg, seed=2, out_dir=tmp_path)
        ds = load_dataset(tmp_path / "panoptic", "panoptic")
        flipped = D.flip_sample(ds.samples[0])
        np.testing.assert_array_equal(flipped.image, ds.samples[0].image[:, ::-1])
        cover = np.zeros((64, 64), dtype=int)
        for s in flipped.segments:
            cover += s["mask"]
        assert (cover == 1).all()

    def test_detection_flip_box(self, tmp_path):
        cfg = SceneConfig(num_images=2)
        generate_synth_detection(cfg, seed=2, out_dir=tmp_path)
        ds = load_dataset(tmp_path / "detection", "detection")
        for sample in ds.samples:
            flipped = D.flip_sample(sample)
            for o in flipped.objects:
                ys, xs = np.nonzero(o["mask"])
                y0, x0, y1, x1 = o["box"]
                assert y0 <= ys.min() and ys.max() < y1
                assert x0 <= xs.min() and xs.max() < x1
