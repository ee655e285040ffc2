import numpy as np
import pytest

from fragsel.backends import DetectionCandidate, Detector
from fragsel.exceptions import ConfigError, DetectorFailure, NotAnImage
from fragsel.models import BoundingBox, Config, Document, Query
from fragsel.visual_segmentation import (
    VisualFilterThresholds,
    box_area,
    explain_candidates,
    extract_visual_fragments,
    failed_constraints,
    filter_boxes,
)

QUERY = Query(id="q1", text="Who received the prize at the ceremony?")
IMAGE = Document.of_image("img", "images/ceremony.jpg")
DEFAULTS = VisualFilterThresholds()


def candidate(obj, sem, width, height=None, x=0.0, y=0.0):
    height = width if height is None else height
    return DetectionCandidate(
        box=BoundingBox(x, y, x + width, y + height), objectness=obj, semantic_score=sem
    )


class StaticDetector(Detector):
    descriptor = "static"

    def __init__(self, candidates):
        self.candidates = candidates
        self.calls = []

    def detect(self, query, image_ref):
        self.calls.append(image_ref)
        return list(self.candidates)


class TestBoxArea:
    @pytest.mark.parametrize(
        "coords,area",
        [((0, 0, 10, 10), 100), ((5, 5, 55, 105), 5000), ((0, 0, 50, 50), 2500)],
    )
    def test_area(self, coords, area):
        assert box_area(BoundingBox(*coords)) == area


class TestFilterBoxes:
    def test_passing_candidate(self):
        kept = candidate(0.50, 0.40, 60, 50)
        assert filter_boxes([kept], DEFAULTS) == [kept]

    def test_objectness_on_threshold_is_rejected(self):
        assert filter_boxes([candidate(0.40, 0.90, 100)], DEFAULTS) == []

    def test_semantic_on_threshold_is_rejected(self):
        assert filter_boxes([candidate(0.90, 0.35, 100)], DEFAULTS) == []

    def test_area_on_threshold_is_rejected(self):
        assert filter_boxes([candidate(0.90, 0.90, 50)], DEFAULTS) == []

    def test_empty(self):
        assert filter_boxes([], DEFAULTS) == []

    def test_order_is_preserved(self):
        a = candidate(0.9, 0.9, 60, x=100)
        b = candidate(0.1, 0.9, 60)
        c = candidate(0.5, 0.5, 70, y=10)
        assert filter_boxes([a, b, c], DEFAULTS) == [a, c]

    def test_failed_constraints_are_named(self):
        assert failed_constraints(candidate(0.40, 0.30, 10), DEFAULTS) == [
            "objectness",
            "semantic",
            "size",
        ]

    def test_thresholds_need_positive_size(self):
        with pytest.raises(ConfigError):
            VisualFilterThresholds(tau_size=0.0)

    def test_thresholds_from_config(self):
        config = Config(tau_obj=0.5, tau_sem=0.25, tau_size=100.0)
        assert VisualFilterThresholds.from_config(config) == VisualFilterThresholds(
            0.5, 0.25, 100.0
        )


def random_candidates(rng, n):
    return [
        candidate(
            float(rng.choice([0.3, 0.4, 0.5, rng.random()])),
            float(rng.choice([0.3, 0.35, 0.6, rng.random()])),
            float(rng.choice([40.0, 50.0, 60.0, rng.uniform(1, 120)])),
            float(rng.uniform(1, 120)),
        )
        for _ in range(n)
    ]


class TestFilterProperties:
    def test_subset_idempotence_and_monotonicity(self):
        rng = np.random.default_rng(42)
        for _ in range(1000):
            candidates = random_candidates(rng, int(rng.integers(0, 12)))
            thresholds = VisualFilterThresholds(
                tau_obj=float(rng.uniform(0, 1)),
                tau_sem=float(rng.uniform(0, 1)),
                tau_size=float(rng.uniform(1, 5000)),
            )
            kept = filter_boxes(candidates, thresholds)

            assert all(c in candidates for c in kept)
            assert filter_boxes(kept, thresholds) == kept
            for c in kept:
                assert c.objectness > thresholds.tau_obj
                assert c.semantic_score > thresholds.tau_sem
                assert box_area(c.box) > thresholds.tau_size

            raised = VisualFilterThresholds(
                tau_obj=thresholds.tau_obj + float(rng.uniform(0, 0.2)),
                tau_sem=thresholds.tau_sem + float(rng.uniform(0, 0.2)),
                tau_size=thresholds.tau_size + float(rng.uniform(0, 1000)),
            )
            stricter = filter_boxes(candidates, raised)
            assert all(c in kept for c in stricter)


class TestExtractVisualFragments:
    def test_one_of_three_survives(self):
        detector = StaticDetector(
            [
                candidate(0.62, 0.55, 100, 80, x=10, y=10),
                candidate(0.90, 0.80, 40),
                candidate(0.35, 0.60, 200, x=50, y=50),
            ]
        )
        fragments = extract_visual_fragments(QUERY, IMAGE, detector, DEFAULTS)
        assert len(fragments) == 1
        fragment = fragments[0]
        assert fragment.parent_doc_id == "img"
        assert fragment.image_ref == "images/ceremony.jpg"
        assert fragment.box == BoundingBox(10, 10, 110, 90)
        assert (fragment.objectness, fragment.semantic_score) == (0.62, 0.55)
        assert detector.calls == ["images/ceremony.jpg"]

    def test_no_candidates(self):
        assert extract_visual_fragments(QUERY, IMAGE, StaticDetector([]), DEFAULTS) == []

    def test_text_document_is_rejected(self):
        with pytest.raises(NotAnImage):
            extract_visual_fragments(
                QUERY, Document.of_text("d1", "A."), StaticDetector([]), DEFAULTS
            )

    def test_out_of_range_score_is_a_detector_failure(self):
        detector = StaticDetector([candidate(1.5, 0.5, 100)])
        with pytest.raises(DetectorFailure):
            extract_visual_fragments(QUERY, IMAGE, detector, DEFAULTS)


class TestExplainCandidates:
    def test_verdicts(self):
        verdicts = explain_candidates(
            [candidate(0.62, 0.55, 100, 80), candidate(0.35, 0.60, 200)], DEFAULTS
        )
        assert verdicts[0]["kept"] is True
        assert verdicts[0]["failed"] == []
        assert verdicts[0]["area"] == 8000
        assert verdicts[1] == {
            "box": [0.0, 0.0, 200.0, 200.0],
            "area": 40000.0,
            "objectness": 0.35,
            "semantic": 0.60,
            "kept": False,
            "failed": ["objectness"],
        }
