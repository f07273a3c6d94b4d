import json

import pytest
from pydantic import ValidationError

from core.geometry import iou
from services.density_service import crowd_statistics
from services.synth_service import (
    SCENE_PRESETS,
    DetectorParams,
    SceneParams,
    SynthService,
    generate_dataset,
    generate_scene,
    image_id_for,
    image_rng,
    scene_preset,
    simulate_detector,
)


def small_scene(**overrides):
    params = dict(image_width=640.0, image_height=480.0, persons_per_image=6.0, crowd_pair_rate=1.0,
                  person_height_range=(60.0, 150.0), seed=11)
    params.update(overrides)
    return SceneParams(**params)


class TestParams:
    def test_presets(self):
        assert set(SCENE_PRESETS) == {"caltech", "citypersons", "crowdhuman"}
        city = scene_preset("citypersons")
        assert (city.persons_per_image, city.crowd_pair_rate) == (6.47, 0.32)
        assert scene_preset("CrowdHuman", seed=3).seed == 3

    def test_unknown_preset(self):
        with pytest.raises(ValueError):
            scene_preset("kitti")

    @pytest.mark.parametrize(
        "overrides",
        [
            {"person_height_range": (30.0, 100.0)},
            {"person_height_range": (100.0, 60.0)},
            {"person_height_range": (60.0, 600.0)},
            {"pair_iou_range": (0.8, 0.5)},
            {"pair_iou_range": (0.0, 0.5)},
            {"persons_per_image": -1.0},
        ],
    )
    def test_rejects_bad_scene(self, overrides):
        with pytest.raises(ValidationError):
            small_scene(**overrides)

    def test_rejects_bad_detector(self):
        with pytest.raises(ValidationError):
            DetectorParams(fp_score_range=(0.6, 0.2))
        with pytest.raises(ValidationError):
            DetectorParams(duplicate_count=0)

    def test_image_rng_is_split_by_index_and_stream(self):
        a = image_rng(5, 0, 0).uniform(size=4).tolist()
        assert a == image_rng(5, 0, 0).uniform(size=4).tolist()
        assert a != image_rng(5, 1, 0).uniform(size=4).tolist()
        assert a != image_rng(5, 0, 1).uniform(size=4).tolist()

    def test_image_ids_sort_in_index_order(self):
        ids = [image_id_for(i) for i in (0, 9, 10, 123)]
        assert ids == sorted(ids)


class TestGenerateScene:
    def test_zero_persons(self):
        persons, regions = generate_scene(small_scene(persons_per_image=0.0, crowd_pair_rate=0.0))
        assert persons == [] and regions == []

    def test_boxes_inside_image(self):
        p = small_scene(ignore_rate=1.0)
        for index in range(20):
            persons, regions = generate_scene(p, index)
            for b in [o.box for o in persons] + regions:
                assert 0.0 <= b.x1 < b.x2 <= p.image_width
                assert 0.0 <= b.y1 < b.y2 <= p.image_height

    def test_no_pairs_keeps_overlaps_incidental(self):
        p = small_scene(crowd_pair_rate=0.0, persons_per_image=8.0)
        for index in range(20):
            persons, _ = generate_scene(p, index)
            for i, a in enumerate(persons):
                for b in persons[i + 1:]:
                    assert iou(a.box, b.box) <= p.max_incidental_iou

    def test_constructed_pairs_are_in_range(self):
        p = small_scene(persons_per_image=10.0, crowd_pair_rate=3.0)
        lo, hi = p.pair_iou_range
        seen = 0
        for index in range(20):
            persons, _ = generate_scene(p, index)
            for i, a in enumerate(persons):
                for b in persons[i + 1:]:
                    v = iou(a.box, b.box)
                    if v > p.max_incidental_iou:
                        assert lo < v < hi
                        seen += 1
        assert seen > 0

    def test_densities_filled(self):
        p = small_scene(crowd_pair_rate=3.0, persons_per_image=10.0)
        persons = [o for index in range(10) for o in generate_scene(p, index)[0]]
        assert any(o.density > 0.5 for o in persons)
        assert all(0.0 <= o.density <= 1.0 for o in persons)

    def test_same_seed_same_scene(self):
        p = small_scene()
        assert generate_scene(p, 4) == generate_scene(p, 4)
        assert generate_scene(p, 4) != generate_scene(p, 5)


class TestSimulateDetector:
    def _persons(self):
        persons, _ = generate_scene(small_scene(persons_per_image=6.0), 1)
        assert persons
        return persons

    def test_ideal_detector(self):
        persons = self._persons()
        params = DetectorParams(localization_noise=0.0, duplicate_count=1, fp_rate=0.0, seed=2)
        dets = simulate_detector(persons, params, (640.0, 480.0), 1)
        assert [d.box for d in dets] == [o.box for o in persons]
        assert all(0.0 <= d.score <= 1.0 for d in dets)

    def test_duplicate_count(self):
        persons = self._persons()
        dets = simulate_detector(persons, DetectorParams(duplicate_count=3, fp_rate=0.0), (640.0, 480.0), 1)
        assert len(dets) == 3 * len(persons)
        with_fp = simulate_detector(persons, DetectorParams(duplicate_count=3, fp_rate=4.0), (640.0, 480.0), 1)
        assert len(with_fp) >= 3 * len(persons)

    def test_source_indices_are_positions(self):
        dets = simulate_detector(self._persons(), DetectorParams(), (640.0, 480.0), 1)
        assert [d.source_index for d in dets] == list(range(len(dets)))

    def test_scores_fall_with_jitter(self):
        persons = self._persons()
        params = DetectorParams(localization_noise=0.1, score_noise=0.0, duplicate_count=5, fp_rate=0.0)
        dets = simulate_detector(persons, params, (640.0, 480.0), 1)
        for k, person in enumerate(persons):
            group = dets[5 * k: 5 * k + 5]
            ranked = sorted(group, key=lambda d: iou(d.box, person.box))
            assert [d.score for d in ranked] == sorted(d.score for d in group)

    def test_deterministic(self):
        persons = self._persons()
        params = DetectorParams(seed=8)
        assert simulate_detector(persons, params, (640.0, 480.0), 3) == simulate_detector(persons, params, (640.0, 480.0), 3)


class TestDataset:
    def test_build_parallel_matches_sequential(self):
        scene, detector = small_scene(), DetectorParams(seed=11)
        assert SynthService.build(12, scene, detector, jobs=1) == SynthService.build(12, scene, detector, jobs=3)

    def test_generate_dataset_files(self, tmp_path):
        paths = generate_dataset(5, small_scene(), DetectorParams(), str(tmp_path / "ds"))
        lines = (tmp_path / "ds" / "annotations.jsonl").read_text().splitlines()
        assert [json.loads(line)["image_id"] for line in lines] == [image_id_for(i) for i in range(5)]
        manifest = json.loads((tmp_path / "ds" / "manifest.json").read_text())
        assert manifest["n_images"] == 5
        assert manifest["scene"]["seed"] == 11
        assert manifest["tool"]["name"] == "adaptive-nms"
        assert set(paths) == {"annotations", "detections", "manifest"}

    def test_zero_images(self, tmp_path):
        generate_dataset(0, small_scene(), DetectorParams(), str(tmp_path))
        assert (tmp_path / "annotations.jsonl").read_text() == ""
        assert (tmp_path / "detections.jsonl").read_text() == ""

    def test_byte_identical_reruns(self, tmp_path):
        for name in ("a", "b"):
            generate_dataset(6, small_scene(ignore_rate=0.5), DetectorParams(seed=4), str(tmp_path / name))
        for fname in ("annotations.jsonl", "detections.jsonl", "manifest.json"):
            assert (tmp_path / "a" / fname).read_bytes() == (tmp_path / "b" / fname).read_bytes()

    def test_caltech_is_sparse(self):
        annotations, _ = SynthService.build(50, scene_preset("caltech"), DetectorParams())
        stats = crowd_statistics(list(annotations.values()))
        assert stats["persons_per_image"] < 1.5
