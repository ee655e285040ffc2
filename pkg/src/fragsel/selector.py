"""The lightweight student selector.

A linear scorer over a fixed-length feature vector, trained by plain gradient
descent on a mix of hard-label BCE and temperature-scaled Bernoulli KL against
teacher logits.
"""

import json
import logging
import math
import re
from abc import ABC, abstractmethod
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence

import dacite
import numpy as np
from dacite import from_dict
from more_itertools import batched

from fragsel.exceptions import (
    ConfigError,
    DimensionMismatch,
    DomainError,
    FormatError,
    LengthMismatch,
    MissingTeacherLogits,
    PreconditionViolation,
)
from fragsel.fig import FigRecord
from fragsel.models import DACITE_CONFIG, EvidenceItem, EvidenceKind, Query, count_tokens
from fragsel.utils import null_logger, read_json

PROB_EPS = 1e-12

_WORD = re.compile(r"\w+")


class FeatureExtractor(ABC):
    spec: str
    dimension: int

    @abstractmethod
    def extract(self, query: Query, item: EvidenceItem) -> np.ndarray:
        raise NotImplementedError


def _words(text: str) -> List[str]:
    return _WORD.findall(text.lower())


def _overlap(query_terms: set, fragment_terms: set) -> float:
    if not query_terms:
        return 0.0
    return len(query_terms & fragment_terms) / len(query_terms)


class BaselineFeatureExtractor(FeatureExtractor):
    """Lexical overlap, length, and the scores segmentation already produced.

    Layout: unigram overlap, bigram overlap, tokens/100, relevance score,
    is_visual, objectness, semantic score, log(1 + area)/20.
    """

    spec = "baseline-v1"
    dimension = 8

    def extract(self, query: Query, item: EvidenceItem) -> np.ndarray:
        q_words = _words(query.text)
        f_words = _words(item.text)
        features = np.zeros(self.dimension)
        features[0] = _overlap(set(q_words), set(f_words))
        features[1] = _overlap(set(zip(q_words, q_words[1:])), set(zip(f_words, f_words[1:])))
        features[2] = count_tokens(item.text) / 100.0
        if item.kind == EvidenceKind.TEXT_FRAG:
            features[3] = item.payload.relevance_score
        features[4] = 1.0 if item.is_visual else 0.0
        if item.kind == EvidenceKind.VISUAL_FRAG:
            features[5] = item.payload.objectness
            features[6] = item.payload.semantic_score
            features[7] = math.log1p(item.payload.box.area) / 20.0
        return features


EXTRACTORS = {BaselineFeatureExtractor.spec: BaselineFeatureExtractor}


def extractor_for(spec: str) -> FeatureExtractor:
    try:
        return EXTRACTORS[spec]()
    except KeyError:
        raise FormatError(f"unknown feature extractor {spec!r}")


def extract_features(
    query: Query, item: EvidenceItem, extractor: Optional[FeatureExtractor] = None
) -> np.ndarray:
    extractor = extractor or BaselineFeatureExtractor()
    return extractor.extract(query, item)


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 0.7
    temperature: float = 2.0
    learning_rate: float = 2e-5
    epochs: int = 5
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must not be negative, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")


@dataclass
class SelectorModel:
    weights: List[float]
    bias: float
    feature_spec: str
    train_config: Optional[TrainConfig] = None
    final_loss: Optional[float] = None
    loss_curve: List[float] = field(default_factory=list)

    @classmethod
    def zeros(cls, extractor: FeatureExtractor) -> "SelectorModel":
        return cls(weights=[0.0] * extractor.dimension, bias=0.0, feature_spec=extractor.spec)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fp:
            json.dump(self.to_dict(), fp, indent=2, sort_keys=True)
            fp.write("\n")

    @classmethod
    def load(cls, path) -> "SelectorModel":
        data = read_json(path)
        try:
            return from_dict(cls, data, DACITE_CONFIG)
        except (dacite.DaciteError, ConfigError) as exc:
            raise FormatError(f"{path}: invalid selector model ({exc})") from exc


def score(model: SelectorModel, features) -> float:
    features = np.asarray(features, dtype=np.float64)
    if features.shape != (len(model.weights),):
        raise DimensionMismatch(
            f"model expects {len(model.weights)} features, got {features.size}",
            feature_spec=model.feature_spec,
        )
    return float(np.dot(np.asarray(model.weights), features) + model.bias)


def sigmoid(logit):
    """Logistic function, branching on sign so exp never overflows."""
    x = np.atleast_1d(np.asarray(logit, dtype=np.float64))
    out = np.empty_like(x)
    positive = x >= 0
    out[positive] = 1.0 / (1.0 + np.exp(-x[positive]))
    exp_x = np.exp(x[~positive])
    out[~positive] = exp_x / (1.0 + exp_x)
    if np.ndim(logit) == 0:
        return float(out[0])
    return out


def _clamp(probs: np.ndarray) -> np.ndarray:
    return np.clip(probs, PROB_EPS, 1.0 - PROB_EPS)


def _as_arrays(*sequences, names=()) -> List[np.ndarray]:
    arrays = [np.asarray(s, dtype=np.float64) for s in sequences]
    lengths = {a.size for a in arrays}
    if len(lengths) != 1 or 0 in lengths:
        described = ", ".join(f"{n}={a.size}" for n, a in zip(names, arrays))
        raise LengthMismatch(f"inputs must have equal non-zero length ({described})")
    return arrays


def _bce_terms(labels: np.ndarray, probs: np.ndarray) -> np.ndarray:
    probs = _clamp(probs)
    return -(labels * np.log(probs) + (1.0 - labels) * np.log(1.0 - probs))


def _kl_terms(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    p, q = _clamp(p), _clamp(q)
    return p * np.log(p / q) + (1.0 - p) * np.log((1.0 - p) / (1.0 - q))


def bce_loss(labels: Sequence[int], probs: Sequence[float]) -> float:
    z, p = _as_arrays(labels, probs, names=("labels", "probs"))
    return float(np.mean(_bce_terms(z, p)))


def binary_kl(p_teacher: float, p_student: float) -> float:
    """KL(Bernoulli(p_teacher) || Bernoulli(p_student))."""
    for name, value in (("p_teacher", p_teacher), ("p_student", p_student)):
        if not 0.0 < value < 1.0:
            raise DomainError(f"{name}={value} outside the open interval (0, 1)")
    return float(_kl_terms(np.float64(p_teacher), np.float64(p_student)))


def kd_loss(labels, student_logits, teacher_logits, alpha: float, temperature: float) -> float:
    z, s, t = _as_arrays(
        labels, student_logits, teacher_logits, names=("labels", "student", "teacher")
    )
    hard = _bce_terms(z, sigmoid(s))
    soft = _kl_terms(sigmoid(t / temperature), sigmoid(s / temperature))
    return float(np.mean((1.0 - alpha) * hard + alpha * temperature**2 * soft))


def kd_grad(labels, student_logits, teacher_logits, alpha: float, temperature: float) -> np.ndarray:
    """Gradient of kd_loss with respect to each student logit."""
    z, s, t = _as_arrays(
        labels, student_logits, teacher_logits, names=("labels", "student", "teacher")
    )
    hard = sigmoid(s) - z
    soft = sigmoid(s / temperature) - sigmoid(t / temperature)
    return ((1.0 - alpha) * hard + alpha * temperature * soft) / z.size


@dataclass
class _Dataset:
    features: np.ndarray
    labels: np.ndarray
    teacher_logits: np.ndarray


def _prepare(
    dataset: Sequence[FigRecord], extractor: FeatureExtractor, need_teacher: bool
) -> _Dataset:
    if not dataset:
        raise PreconditionViolation("training dataset is empty")
    missing = [r for r in dataset if r.teacher_logit is None]
    if need_teacher and missing:
        raise MissingTeacherLogits(
            f"{len(missing)} of {len(dataset)} records lack a teacher logit",
            query_id=missing[0].query_id,
            fragment_id=missing[0].fragment_id,
        )
    return _Dataset(
        features=np.stack([extractor.extract(r.query, r.fragment) for r in dataset]),
        labels=np.array([r.hard_label for r in dataset], dtype=np.float64),
        teacher_logits=np.array(
            [0.0 if r.teacher_logit is None else r.teacher_logit for r in dataset],
            dtype=np.float64,
        ),
    )


def train(
    dataset: Sequence[FigRecord],
    extractor: Optional[FeatureExtractor] = None,
    config: TrainConfig = TrainConfig(),
    logger: logging.Logger = null_logger,
) -> SelectorModel:
    """Mini-batch gradient descent from a zero model.

    Batches come from a permutation drawn per epoch from ``config.seed``; the
    model records the full-dataset loss after every epoch.
    """
    extractor = extractor or BaselineFeatureExtractor()
    data = _prepare(dataset, extractor, need_teacher=config.alpha > 0)
    alpha, temperature = config.alpha, config.temperature

    weights = np.zeros(extractor.dimension)
    bias = 0.0
    rng = np.random.default_rng(config.seed)
    loss_curve = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(dataset))
        for batch in batched(order, config.batch_size):
            idx = np.array(batch)
            x = data.features[idx]
            logits = x @ weights + bias
            grad = kd_grad(
                data.labels[idx], logits, data.teacher_logits[idx], alpha, temperature
            )
            weights = weights - config.learning_rate * (x.T @ grad)
            bias = bias - config.learning_rate * float(np.sum(grad))
        loss = kd_loss(
            data.labels,
            data.features @ weights + bias,
            data.teacher_logits,
            alpha,
            temperature,
        )
        loss_curve.append(loss)
        logger.info(f"epoch {epoch + 1}/{config.epochs}: loss={loss:.6f}")

    return SelectorModel(
        weights=[float(w) for w in weights],
        bias=float(bias),
        feature_spec=extractor.spec,
        train_config=config,
        final_loss=loss_curve[-1] if loss_curve else None,
        loss_curve=loss_curve,
    )


def evaluate(
    model: SelectorModel,
    dataset: Sequence[FigRecord],
    extractor: Optional[FeatureExtractor] = None,
) -> Dict[str, float]:
    """Hard-label accuracy (logit > 0 predicts 1) and BCE on ``dataset``."""
    extractor = extractor or BaselineFeatureExtractor()
    data = _prepare(dataset, extractor, need_teacher=False)
    if data.features.shape[1] != len(model.weights):
        raise DimensionMismatch(
            f"model expects {len(model.weights)} features, got {data.features.shape[1]}",
            feature_spec=model.feature_spec,
        )
    logits = data.features @ np.asarray(model.weights) + model.bias
    predictions = (logits > 0).astype(np.float64)
    return {
        "accuracy": float(np.mean(predictions == data.labels)),
        "loss": bce_loss(data.labels, sigmoid(logits)),
        "count": len(dataset),
    }
