import logging
from dataclasses import dataclass
from typing import List

from fragsel.backends import DetectionCandidate, Detector, check_candidate
from fragsel.exceptions import ConfigError, NotAnImage
from fragsel.models import BoundingBox, Config, Document, Query, VisualFragment
from fragsel.utils import null_logger


@dataclass(frozen=True)
class VisualFilterThresholds:
    tau_obj: float = 0.40
    tau_sem: float = 0.35
    tau_size: float = 2500.0

    def __post_init__(self):
        if not self.tau_size > 0:
            raise ConfigError(f"tau_size must be positive, got {self.tau_size}")

    @classmethod
    def from_config(cls, config: Config) -> "VisualFilterThresholds":
        return cls(tau_obj=config.tau_obj, tau_sem=config.tau_sem, tau_size=config.tau_size)


def box_area(box: BoundingBox) -> float:
    return (box.x_max - box.x_min) * (box.y_max - box.y_min)


def failed_constraints(
    candidate: DetectionCandidate, thresholds: VisualFilterThresholds
) -> List[str]:
    """Names of the constraints ``candidate`` violates; empty when it is kept."""
    failed = []
    if not candidate.objectness > thresholds.tau_obj:
        failed.append("objectness")
    if not candidate.semantic_score > thresholds.tau_sem:
        failed.append("semantic")
    if not box_area(candidate.box) > thresholds.tau_size:
        failed.append("size")
    return failed


def filter_boxes(
    candidates: List[DetectionCandidate], thresholds: VisualFilterThresholds
) -> List[DetectionCandidate]:
    return [c for c in candidates if not failed_constraints(c, thresholds)]


def extract_visual_fragments(
    query: Query,
    image_doc: Document,
    detector: Detector,
    thresholds: VisualFilterThresholds,
    logger: logging.Logger = null_logger,
) -> List[VisualFragment]:
    if not image_doc.is_image:
        raise NotAnImage("visual segmentation needs an image document", doc_id=image_doc.id)

    candidates = detector.detect(query, image_doc.image_ref)
    for candidate in candidates:
        # third-party detectors may skip the backend-side check
        check_candidate(
            {
                "box": candidate.box.as_list(),
                "objectness": candidate.objectness,
                "semantic": candidate.semantic_score,
            },
            detector.descriptor,
        )

    kept = filter_boxes(candidates, thresholds)
    logger.debug(
        f"image {image_doc.id}: kept {len(kept)} of {len(candidates)} detected regions"
    )
    return [
        VisualFragment(
            parent_doc_id=image_doc.id,
            image_ref=image_doc.image_ref,
            box=c.box,
            objectness=c.objectness,
            semantic_score=c.semantic_score,
        )
        for c in kept
    ]


def explain_candidates(
    candidates: List[DetectionCandidate], thresholds: VisualFilterThresholds
) -> List[dict]:
    """Per-candidate verdicts with the failing constraints named."""
    verdicts = []
    for candidate in candidates:
        failed = failed_constraints(candidate, thresholds)
        verdicts.append(
            {
                "box": candidate.box.as_list(),
                "area": box_area(candidate.box),
                "objectness": candidate.objectness,
                "semantic": candidate.semantic_score,
                "kept": not failed,
                "failed": failed,
            }
        )
    return verdicts
