import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from core.errors import DatasetMismatchError, InputError
from core.geometry import BoundingBox
from core.types import Detection, GroundTruthObject, ImageAnnotation
from services.density_service import with_gt_densities
from services.evaluation_service import (
    DENSITY_BIN_LABELS,
    MR_REFERENCE_FPPI,
    EvaluationService,
    ImageEvalRecord,
    average_precision,
    bin_index,
    density_binned_report,
    fppi_missrate_curve,
    log_average_miss_rate,
    match_detections,
    recall,
)

P1 = BoundingBox(0.0, 0.0, 40.0, 100.0)
P2 = BoundingBox(200.0, 0.0, 240.0, 100.0)
NOWHERE = BoundingBox(500.0, 500.0, 540.0, 600.0)


def det(b, score, index=0):
    return Detection(box=b, score=score, source_index=index)


def gt(b, ignore=False):
    return GroundTruthObject(box=b, ignore=ignore)


def record(labeled, num_gt, image_id="x"):
    return ImageEvalRecord(
        image_id=image_id,
        labeled=labeled,
        num_gt=num_gt,
        gt_matched_flags=[True] * sum(tp for _, tp in labeled) + [False] * (num_gt - sum(tp for _, tp in labeled)),
    )


def image(image_id, objects):
    return ImageAnnotation(image_id, 1000.0, 1000.0, tuple(with_gt_densities(objects)))


class TestMatchDetections:
    def test_perfect_match(self):
        rec = match_detections([det(P1, 0.9)], [gt(P1)])
        assert rec.labeled == [(0.9, True)]
        assert rec.num_gt == 1
        assert rec.gt_matched_flags == [True]

    def test_single_assignment(self):
        rec = match_detections([det(P1, 0.8, 1), det(P1, 0.9, 0)], [gt(P1)])
        assert rec.labeled == [(0.9, True), (0.8, False)]

    def test_detection_inside_ignored_gt_is_discarded(self):
        region = BoundingBox(0.0, 0.0, 100.0, 200.0)
        rec = match_detections([det(P1, 0.9)], [gt(region, ignore=True)])
        assert rec.labeled == []
        assert rec.num_gt == 0

    def test_ignore_regions_argument(self):
        rec = match_detections([det(P1, 0.9)], [], ignore_regions=[BoundingBox(0.0, 0.0, 20.0, 100.0)])
        assert rec.labeled == []

    def test_partial_ignore_overlap_is_false_positive(self):
        # ioa 0.25 < 0.5
        rec = match_detections([det(P1, 0.9)], [], ignore_regions=[BoundingBox(0.0, 0.0, 10.0, 100.0)])
        assert rec.labeled == [(0.9, False)]

    def test_best_iou_gt_wins(self):
        near = BoundingBox(2.0, 0.0, 42.0, 100.0)
        rec = match_detections([det(P1, 0.9)], [gt(near), gt(P1)])
        assert rec.gt_matched_flags == [False, True]

    def test_below_iou_threshold_is_false_positive(self):
        shifted = BoundingBox(20.0, 0.0, 60.0, 100.0)
        rec = match_detections([det(shifted, 0.9)], [gt(P1)])
        assert rec.labeled == [(0.9, False)]

    def test_records_gt_attributes(self):
        rec = match_detections([], [gt(P1), gt(P2)])
        assert rec.gt_heights == [100.0, 100.0]
        assert rec.gt_densities == [0.0, 0.0]

    def test_tp_count_bounded(self):
        dets = [det(P1, 0.9, 0), det(P1, 0.8, 1), det(P2, 0.7, 2), det(NOWHERE, 0.6, 3)]
        rec = match_detections(dets, [gt(P1)])
        assert sum(tp for _, tp in rec.labeled) <= min(len(dets), rec.num_gt)


class TestCurve:
    def test_perfect_detector(self):
        assert fppi_missrate_curve([record([(0.9, True)], 1)]) == [(0.0, 0.0)]

    def test_tp_then_fp(self):
        assert fppi_missrate_curve([record([(0.9, True), (0.8, False)], 2)]) == [(0.0, 0.5), (1.0, 0.5)]

    def test_two_images(self):
        records = [record([(0.9, True)], 1, "a"), record([(0.7, False)], 1, "b")]
        assert fppi_missrate_curve(records) == [(0.0, 0.5), (0.5, 0.5)]

    def test_no_detections(self):
        assert fppi_missrate_curve([record([], 3)]) == [(0.0, 1.0)]

    def test_all_tp_miss_steps(self):
        rec = record([(0.9, True), (0.8, True), (0.7, True)], 4)
        assert [m for _, m in fppi_missrate_curve([rec])] == [0.75, 0.5, 0.25]

    def test_tied_scores_form_one_point(self):
        assert fppi_missrate_curve([record([(0.9, True), (0.9, False)], 1)]) == [(1.0, 0.0)]

    def test_miss_rate_non_increasing(self):
        rng = np.random.default_rng(3)
        labeled = [(float(s), bool(t)) for s, t in zip(rng.uniform(size=50), rng.uniform(size=50) < 0.5)]
        curve = fppi_missrate_curve([record(labeled, 40)])
        misses = [m for _, m in curve]
        fppis = [f for f, _ in curve]
        assert misses == sorted(misses, reverse=True)
        assert fppis == sorted(fppis)

    def test_needs_ground_truth(self):
        with pytest.raises(InputError):
            fppi_missrate_curve([record([(0.9, False)], 0)])
        with pytest.raises(InputError):
            fppi_missrate_curve([])


class TestLogAverageMissRate:
    def test_reference_points(self):
        assert len(MR_REFERENCE_FPPI) == 9
        assert MR_REFERENCE_FPPI[0] == pytest.approx(0.01)
        assert MR_REFERENCE_FPPI[-1] == pytest.approx(1.0)

    def test_constant_curve(self):
        assert log_average_miss_rate([(0.0, 0.5), (10.0, 0.5)]) == pytest.approx(0.5, abs=1e-12)

    def test_perfect_curve_hits_floor(self):
        assert log_average_miss_rate([(0.0, 0.0)]) <= 1e-9

    def test_two_image_hand_case(self):
        records = [record([(0.9, True)], 1, "a"), record([(0.7, False)], 1, "b")]
        assert log_average_miss_rate(fppi_missrate_curve(records)) == pytest.approx(0.5, abs=1e-12)

    def test_unreachable_references_count_as_full_miss(self):
        # first point at fppi 0.05: the three references below it read 1.0
        value = log_average_miss_rate([(0.05, 0.0001)])
        below = int((MR_REFERENCE_FPPI < 0.05).sum())
        assert below == 3
        expected = np.exp((below * np.log(1.0) + (9 - below) * np.log(0.0001)) / 9)
        assert value == pytest.approx(expected)

    def test_empty_curve(self):
        with pytest.raises(InputError):
            log_average_miss_rate([])

    def test_scale_free_in_scores(self):
        labeled = [(0.9, True), (0.8, False), (0.6, True), (0.3, False), (0.2, True)]
        squashed = [(s ** 3, tp) for s, tp in labeled]
        a = log_average_miss_rate(fppi_missrate_curve([record(labeled, 4)]))
        b = log_average_miss_rate(fppi_missrate_curve([record(squashed, 4)]))
        assert a == b

    @settings(max_examples=300, deadline=None)
    @given(st.lists(
        st.lists(st.tuples(st.sampled_from([0.1, 0.3, 0.5, 0.7, 0.9]), st.booleans()), max_size=8),
        min_size=1, max_size=4,
    ), st.integers(0, 3))
    def test_discarding_a_false_positive_never_raises_mr2(self, images, extra_gt):
        records = [record(labeled, sum(tp for _, tp in labeled) + extra_gt, f"img_{i}") for i, labeled in enumerate(images)]
        if sum(r.num_gt for r in records) == 0:
            return
        base = log_average_miss_rate(fppi_missrate_curve(records))
        for i, labeled in enumerate(images):
            for k, (_, tp) in enumerate(labeled):
                if tp:
                    continue
                fewer = list(records)
                fewer[i] = record(labeled[:k] + labeled[k + 1:], records[i].num_gt, f"img_{i}")
                assert log_average_miss_rate(fppi_missrate_curve(fewer)) <= base + 1e-12


class TestAveragePrecision:
    def test_perfect(self):
        assert average_precision([record([(0.9, True), (0.8, True)], 2)]) == 1.0

    def test_fp_before_tp(self):
        assert average_precision([record([(0.9, False), (0.8, True)], 1)]) == 0.5

    def test_no_detections(self):
        assert average_precision([record([], 2)]) == 0.0

    def test_recall(self):
        assert recall([record([(0.9, True), (0.8, False)], 4)]) == 0.25


class TestBins:
    @pytest.mark.parametrize(
        "density,expected",
        [(0.0, 0), (0.4, 0), (0.45, 1), (0.5, 1), (0.55, 2), (0.6, 2), (0.7, 3), (0.71, 4), (1.0, 4)],
    )
    def test_bin_index(self, density, expected):
        assert bin_index(density) == expected

    def test_labels(self):
        assert len(DENSITY_BIN_LABELS) == 5

    def test_isolated_perfect_detector_only_fills_first_bin(self):
        annotations = {"a": image("a", [gt(P1), gt(P2)])}
        detections = {"a": [det(P1, 0.9, 0), det(P2, 0.8, 1)]}
        report = density_binned_report(annotations, {"greedy": detections})
        bins = report["greedy"]
        assert bins[0] <= 1e-9
        assert bins[1:] == [None, None, None, None]

    def test_single_gt_in_second_bin(self):
        # two persons at IoU 0.45: shift s with (40 - s) / (40 + s) = 0.45
        s = 40.0 * 0.55 / 1.45
        other = BoundingBox(s, 0.0, 40.0 + s, 100.0)
        annotations = {"a": image("a", [gt(P1), gt(other)])}
        report = EvaluationService.evaluate(annotations, {"a": []}, bins=True)
        assert report.bin_num_gt == [0, 2, 0, 0, 0]

    def test_short_persons_leave_the_bins(self):
        short = BoundingBox(300.0, 0.0, 320.0, 40.0)
        annotations = {"a": image("a", [gt(P1), gt(short)])}
        report = EvaluationService.evaluate(annotations, {"a": [det(P1, 0.9)]}, bins=True)
        assert report.num_gt == 2
        assert report.bin_num_gt == [1, 0, 0, 0, 0]
        assert report.bin_mr2[0] <= 1e-9


class TestEvaluationService:
    def test_perfect_detections(self):
        annotations = {"a": image("a", [gt(P1)]), "b": image("b", [gt(P2)])}
        detections = {"a": [det(P1, 0.9)], "b": [det(P2, 0.8)]}
        report = EvaluationService.evaluate(annotations, detections)
        assert report.mr2 <= 1e-9
        assert report.ap == 1.0
        assert report.recall == 1.0
        assert (report.num_images, report.num_gt, report.num_detections) == (2, 2, 2)
        assert report.bin_mr2 is None

    def test_two_image_hand_case(self):
        annotations = {"a": image("a", [gt(P1)]), "b": image("b", [gt(P2)])}
        detections = {"a": [det(P1, 0.9)], "b": [det(NOWHERE, 0.7)]}
        report = EvaluationService.evaluate(annotations, detections)
        assert report.mr2 == pytest.approx(0.5, abs=1e-12)
        assert report.curve == [(0.0, 0.5), (0.5, 0.5)]

    def test_images_without_detections_count_for_fppi(self):
        annotations = {"a": image("a", [gt(P1)]), "b": image("b", [gt(P2)])}
        report = EvaluationService.evaluate(annotations, {"a": [det(NOWHERE, 0.9)]})
        assert report.curve == [(0.5, 1.0)]

    def test_unknown_image_ids(self):
        annotations = {"a": image("a", [gt(P1)])}
        with pytest.raises(DatasetMismatchError) as err:
            EvaluationService.evaluate(annotations, {"a": [], "zzz": [], "yyy": []})
        assert err.value.details["image_ids"] == ["yyy", "zzz"]

    def test_added_ignored_gt_changes_nothing(self):
        annotations = {"a": image("a", [gt(P1)])}
        with_ignored = {"a": image("a", [gt(P1), gt(BoundingBox(700.0, 700.0, 800.0, 800.0), ignore=True)])}
        detections = {"a": [det(P1, 0.9), det(NOWHERE, 0.5, 1)]}
        a = EvaluationService.evaluate(annotations, detections)
        b = EvaluationService.evaluate(with_ignored, detections)
        assert (a.mr2, a.ap, a.recall, a.curve) == (b.mr2, b.ap, b.recall, b.curve)

    def test_parallel_matches_sequential(self):
        annotations = {f"i{k}": image(f"i{k}", [gt(P1), gt(P2)]) for k in range(6)}
        detections = {f"i{k}": [det(P1, 0.1 * (k + 1)), det(NOWHERE, 0.05 * (k + 1), 1)] for k in range(6)}
        seq = EvaluationService.evaluate(annotations, detections, bins=True, jobs=1)
        par = EvaluationService.evaluate(annotations, detections, bins=True, jobs=3)
        assert seq.to_dict() == par.to_dict()

    def test_report_dict_shape(self):
        annotations = {"a": image("a", [gt(P1)])}
        report = EvaluationService.evaluate(annotations, {"a": [det(P1, 0.9)]}, bins=True)
        doc = report.to_dict()
        assert doc["bin_labels"] == list(DENSITY_BIN_LABELS)
        assert doc["curve"] == [[0.0, 0.0]]
        assert set(doc) >= {"mr2", "ap", "recall", "bin_mr2", "bin_num_gt", "num_images"}
