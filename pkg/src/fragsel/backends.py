import math
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

from fragsel.exceptions import (
    BackendFailure,
    DetectorFailure,
    FormatError,
    ScorerFailure,
)
from fragsel.models import (
    BoundingBox,
    Document,
    EvidenceItem,
    Query,
    load_document,
    to_jsonable,
)
from fragsel.utils import WIRE_VERSION


@dataclass(frozen=True)
class DetectionCandidate:
    box: BoundingBox
    objectness: float
    semantic_score: float

    def __post_init__(self):
        if not (math.isfinite(self.objectness) and math.isfinite(self.semantic_score)):
            raise DetectorFailure(
                f"non-finite detection scores ({self.objectness}, {self.semantic_score})"
            )


@dataclass(frozen=True)
class TokenLogProbs:
    answer_tokens: List[str]
    logprobs: List[float]

    def __post_init__(self):
        if not self.answer_tokens or len(self.answer_tokens) != len(self.logprobs):
            raise FormatError(
                f"{len(self.logprobs)} logprobs for {len(self.answer_tokens)} answer tokens"
            )
        for value in self.logprobs:
            if not (math.isfinite(value) and value <= 0.0):
                raise FormatError(f"invalid log-probability {value}")


class Backend(ABC):
    """Every backend is identified by a stable descriptor recorded in outputs."""

    @property
    @abstractmethod
    def descriptor(self) -> str:
        raise NotImplementedError


class Retriever(Backend):
    @abstractmethod
    def retrieve(self, query: Query, n_ret: int) -> List[Document]:
        # ranked, at most n_ret documents
        raise NotImplementedError


class RelevanceScorer(Backend):
    @abstractmethod
    def score(self, query: Query, text: str) -> float:
        # image documents are scored with their image_ref in place of text
        raise NotImplementedError


class Detector(Backend):
    @abstractmethod
    def detect(self, query: Query, image_ref: str) -> List[DetectionCandidate]:
        raise NotImplementedError


class LikelihoodScorer(Backend):
    @abstractmethod
    def logprobs(
        self,
        query: Query,
        fragment: Optional[EvidenceItem],
        answer_tokens: Sequence[str],
    ) -> TokenLogProbs:
        raise NotImplementedError


class TeacherScorer(Backend):
    @abstractmethod
    def logit(self, query: Query, fragment: EvidenceItem) -> float:
        raise NotImplementedError


class Generator(Backend):
    @abstractmethod
    def generate(self, query: Query, context: List[EvidenceItem]) -> str:
        raise NotImplementedError


@dataclass
class Backends:
    """The set of model backends one pipeline run talks to."""

    retriever: Retriever
    scorer: RelevanceScorer
    generator: Generator
    detector: Optional[Detector] = None
    likelihood: Optional[LikelihoodScorer] = None
    teacher: Optional[TeacherScorer] = None

    def _named(self) -> Dict[str, Backend]:
        named = {
            "retriever": self.retriever,
            "scorer": self.scorer,
            "generator": self.generator,
            "detector": self.detector,
            "likelihood": self.likelihood,
            "teacher": self.teacher,
        }
        return {name: b for name, b in named.items() if b is not None}

    def descriptors(self) -> Dict[str, str]:
        return {name: b.descriptor for name, b in self._named().items()}

    def close(self):
        """Release the connections of every backend that holds any."""
        for backend in self._named().values():
            close = getattr(backend, "close", None)
            if close is not None:
                close()


def check_score(value, descriptor: str) -> float:
    try:
        value = float(value)
    except (TypeError, ValueError):
        raise ScorerFailure(f"non-numeric score {value!r}", backend=descriptor)
    if not math.isfinite(value):
        raise ScorerFailure(f"non-finite score {value}", backend=descriptor)
    return value


def check_logit(value, descriptor: str) -> float:
    try:
        value = float(value)
    except (TypeError, ValueError):
        raise BackendFailure(f"non-numeric logit {value!r}", backend=descriptor)
    if not math.isfinite(value):
        raise BackendFailure(f"non-finite logit {value}", backend=descriptor)
    return value


def check_candidate(raw: dict, descriptor: str) -> DetectionCandidate:
    """Parse one wire/fixture candidate and enforce the [0, 1] score contract."""
    try:
        box = BoundingBox.from_list(raw["box"])
        objectness = float(raw["objectness"])
        semantic = float(raw["semantic"])
    except (KeyError, TypeError, ValueError, FormatError) as exc:
        raise DetectorFailure(
            f"malformed candidate {raw!r}: {exc}", backend=descriptor
        ) from exc
    for name, value in (("objectness", objectness), ("semantic", semantic)):
        if not (math.isfinite(value) and 0.0 <= value <= 1.0):
            raise DetectorFailure(f"{name}={value} outside [0, 1]", backend=descriptor)
    return DetectionCandidate(box=box, objectness=objectness, semantic_score=semantic)


def check_logprobs(answer_tokens: Sequence[str], values, descriptor: str) -> TokenLogProbs:
    try:
        logprobs = [float(v) for v in values]
    except (TypeError, ValueError) as exc:
        raise BackendFailure(f"non-numeric logprobs {values!r}", backend=descriptor) from exc
    try:
        return TokenLogProbs(answer_tokens=list(answer_tokens), logprobs=logprobs)
    except FormatError as exc:
        raise BackendFailure(str(exc), backend=descriptor) from exc


RETRIEVE_ENDPOINT = "/retrieve"
SCORE_ENDPOINT = "/score"
DETECT_ENDPOINT = "/detect"
LOGPROBS_ENDPOINT = "/logprobs"
TEACHER_LOGIT_ENDPOINT = "/teacher_logit"
GENERATE_ENDPOINT = "/generate"


def _query_payload(query: Query) -> dict:
    return to_jsonable(query)


def retrieve_request(query: Query, n_ret: int) -> dict:
    return {"v": WIRE_VERSION, "query": _query_payload(query), "n_ret": n_ret}


def score_request(query: Query, text: str) -> dict:
    return {"v": WIRE_VERSION, "query": _query_payload(query), "text": text}


def detect_request(query: Query, image_ref: str) -> dict:
    return {"v": WIRE_VERSION, "query": _query_payload(query), "image_ref": image_ref}


def logprobs_request(
    query: Query, fragment: Optional[EvidenceItem], answer_tokens: Sequence[str]
) -> dict:
    return {
        "v": WIRE_VERSION,
        "query": _query_payload(query),
        "fragment": fragment.to_dict() if fragment is not None else None,
        "answer_tokens": list(answer_tokens),
    }


def teacher_request(query: Query, fragment: EvidenceItem) -> dict:
    return {"v": WIRE_VERSION, "query": _query_payload(query), "fragment": fragment.to_dict()}


def generate_request(query: Query, context: List[EvidenceItem]) -> dict:
    return {
        "v": WIRE_VERSION,
        "query": _query_payload(query),
        "context": [item.to_dict() for item in context],
    }


def _field(body, name: str, descriptor: str):
    if not isinstance(body, dict) or name not in body:
        raise BackendFailure(
            f"response lacks {name!r}: {str(body)[:200]}", backend=descriptor
        )
    return body[name]


def parse_documents(body, descriptor: str) -> List[Document]:
    docs = _field(body, "docs", descriptor)
    try:
        return [load_document(d) for d in docs]
    except (TypeError, FormatError) as exc:
        raise BackendFailure(f"malformed documents: {exc}", backend=descriptor) from exc


def parse_score(body, descriptor: str) -> float:
    return check_score(_field(body, "score", descriptor), descriptor)


def parse_candidates(body, descriptor: str) -> List[DetectionCandidate]:
    candidates = _field(body, "candidates", descriptor)
    if not isinstance(candidates, list):
        raise DetectorFailure(f"candidates is not a list: {candidates!r}", backend=descriptor)
    return [check_candidate(c, descriptor) for c in candidates]


def parse_logprobs(body, answer_tokens: Sequence[str], descriptor: str) -> TokenLogProbs:
    return check_logprobs(answer_tokens, _field(body, "logprobs", descriptor), descriptor)


def parse_logit(body, descriptor: str) -> float:
    return check_logit(_field(body, "logit", descriptor), descriptor)


def parse_answer(body, descriptor: str) -> str:
    answer = _field(body, "answer", descriptor)
    if not isinstance(answer, str):
        raise BackendFailure(f"answer is not a string: {answer!r}", backend=descriptor)
    return answer
