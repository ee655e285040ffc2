"""Deterministic backends answering from JSON fixture files.

A fixture file holds raw tables keyed by readable identifiers and/or a
``responses`` map keyed by request digests of the wire payload, whose values
are wire response bodies. Tables are consulted first.

    {
      "descriptor": "fixture:demo-scorer",
      "scores": [{"query_id": "q1", "text": "...", "score": 0.9}],
      "retrievals": [{"query_id": "q1", "doc_ids": ["d1", "d2"]}],
      "detections": [{"query_id": "q1", "image_ref": "...", "candidates": [...]}],
      "logprobs": [{"query_id": "q1", "fragment_id": null, "logprobs": [...]}],
      "logits": [{"query_id": "q1", "fragment_id": "d1#s2-2", "logit": 1.5}],
      "answers": [{"query_id": "q1", "context_ids": ["d1#s2-2"], "answer": "..."}],
      "responses": {"<digest>": {"score": 0.4}}
    }
"""

import threading
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

from fragsel.backends import (
    DETECT_ENDPOINT,
    GENERATE_ENDPOINT,
    LOGPROBS_ENDPOINT,
    RETRIEVE_ENDPOINT,
    SCORE_ENDPOINT,
    TEACHER_LOGIT_ENDPOINT,
    Backends,
    DetectionCandidate,
    Detector,
    Generator,
    LikelihoodScorer,
    RelevanceScorer,
    Retriever,
    TeacherScorer,
    TokenLogProbs,
    check_candidate,
    check_logit,
    check_logprobs,
    check_score,
    detect_request,
    generate_request,
    logprobs_request,
    parse_answer,
    parse_candidates,
    parse_documents,
    parse_logit,
    parse_logprobs,
    parse_score,
    retrieve_request,
    score_request,
    teacher_request,
)
from fragsel.exceptions import FixtureMiss, FixtureParseError, FormatError
from fragsel.models import Document, EvidenceItem, Query, load_document
from fragsel.utils import read_json, request_digest

ROLE_FILES = {
    "retriever": "retriever.json",
    "scorer": "scorer.json",
    "generator": "generator.json",
    "detector": "detector.json",
    "likelihood": "likelihood.json",
    "teacher": "teacher.json",
}
REQUIRED_ROLES = ("retriever", "scorer", "generator")


class FixtureBackend(
    Retriever, RelevanceScorer, Detector, LikelihoodScorer, TeacherScorer, Generator
):
    """Answers every backend contract it has a table for; records each call."""

    def __init__(
        self,
        tables: Dict[str, Any],
        descriptor: str,
        corpus: Optional[Mapping[str, Document]] = None,
    ):
        self._descriptor = descriptor
        self._corpus = dict(corpus or {})
        self._lock = threading.Lock()
        self._calls: List[Tuple[str, dict]] = []
        try:
            self._scores = {
                (row["query_id"], row["text"]): row["score"]
                for row in tables.get("scores", [])
            }
            self._retrievals = {
                row["query_id"]: row for row in tables.get("retrievals", [])
            }
            self._detections = {
                (row["query_id"], row["image_ref"]): row["candidates"]
                for row in tables.get("detections", [])
            }
            self._logprobs = {
                (row["query_id"], row.get("fragment_id")): row["logprobs"]
                for row in tables.get("logprobs", [])
            }
            self._logits = {
                (row["query_id"], row["fragment_id"]): row["logit"]
                for row in tables.get("logits", [])
            }
            self._answers = {
                (
                    row["query_id"],
                    tuple(row["context_ids"]) if row.get("context_ids") is not None else None,
                ): row["answer"]
                for row in tables.get("answers", [])
            }
            self._responses = dict(tables.get("responses", {}))
        except (KeyError, TypeError, AttributeError) as exc:
            raise FixtureParseError(f"malformed fixture table: {exc!r}", fixture=descriptor) from exc

    @property
    def descriptor(self) -> str:
        return self._descriptor

    @property
    def calls(self) -> List[Tuple[str, dict]]:
        with self._lock:
            return list(self._calls)

    def calls_to(self, endpoint: str) -> List[dict]:
        return [payload for name, payload in self.calls if name == endpoint]

    def _record(self, endpoint: str, payload: dict):
        with self._lock:
            self._calls.append((endpoint, payload))

    def _response(self, endpoint: str, payload: dict, key) -> Any:
        digest = request_digest(endpoint, payload)
        if digest in self._responses:
            return self._responses[digest]
        raise FixtureMiss(
            f"no fixture entry for {endpoint} key {key!r}",
            backend=self._descriptor,
            digest=digest,
        )

    def retrieve(self, query: Query, n_ret: int) -> List[Document]:
        payload = retrieve_request(query, n_ret)
        self._record(RETRIEVE_ENDPOINT, payload)
        row = self._retrievals.get(query.id)
        if row is None:
            docs = parse_documents(
                self._response(RETRIEVE_ENDPOINT, payload, query.id), self._descriptor
            )
            return docs[:n_ret]
        if "docs" in row:
            try:
                docs = [load_document(d) for d in row["docs"]]
            except FormatError as exc:
                raise FixtureParseError(str(exc), fixture=self._descriptor) from exc
        else:
            docs = []
            for doc_id in row["doc_ids"]:
                if doc_id not in self._corpus:
                    raise FixtureMiss(
                        f"retrieved document {doc_id!r} is not in the corpus",
                        backend=self._descriptor,
                        query_id=query.id,
                    )
                docs.append(self._corpus[doc_id])
        return docs[:n_ret]

    def score(self, query: Query, text: str) -> float:
        payload = score_request(query, text)
        self._record(SCORE_ENDPOINT, payload)
        key = (query.id, text)
        if key in self._scores:
            return check_score(self._scores[key], self._descriptor)
        return parse_score(self._response(SCORE_ENDPOINT, payload, key), self._descriptor)

    def detect(self, query: Query, image_ref: str) -> List[DetectionCandidate]:
        payload = detect_request(query, image_ref)
        self._record(DETECT_ENDPOINT, payload)
        key = (query.id, image_ref)
        if key in self._detections:
            return [check_candidate(c, self._descriptor) for c in self._detections[key]]
        return parse_candidates(
            self._response(DETECT_ENDPOINT, payload, key), self._descriptor
        )

    def logprobs(
        self,
        query: Query,
        fragment: Optional[EvidenceItem],
        answer_tokens: Sequence[str],
    ) -> TokenLogProbs:
        payload = logprobs_request(query, fragment, answer_tokens)
        self._record(LOGPROBS_ENDPOINT, payload)
        key = (query.id, fragment.item_id if fragment is not None else None)
        if key in self._logprobs:
            return check_logprobs(answer_tokens, self._logprobs[key], self._descriptor)
        return parse_logprobs(
            self._response(LOGPROBS_ENDPOINT, payload, key), answer_tokens, self._descriptor
        )

    def logit(self, query: Query, fragment: EvidenceItem) -> float:
        payload = teacher_request(query, fragment)
        self._record(TEACHER_LOGIT_ENDPOINT, payload)
        key = (query.id, fragment.item_id)
        if key in self._logits:
            return check_logit(self._logits[key], self._descriptor)
        return parse_logit(
            self._response(TEACHER_LOGIT_ENDPOINT, payload, key), self._descriptor
        )

    def generate(self, query: Query, context: List[EvidenceItem]) -> str:
        payload = generate_request(query, context)
        self._record(GENERATE_ENDPOINT, payload)
        exact = (query.id, tuple(item.item_id for item in context))
        for key in (exact, (query.id, None)):
            if key in self._answers:
                return parse_answer({"answer": self._answers[key]}, self._descriptor)
        return parse_answer(
            self._response(GENERATE_ENDPOINT, payload, exact), self._descriptor
        )


def mock_from_fixture(
    fixture_path, corpus: Optional[Mapping[str, Document]] = None
) -> FixtureBackend:
    path = Path(fixture_path)
    try:
        tables = read_json(path)
    except FileNotFoundError as exc:
        raise FixtureParseError(f"fixture {path} does not exist") from exc
    except FormatError as exc:
        raise FixtureParseError(str(exc)) from exc
    if not isinstance(tables, dict):
        raise FixtureParseError(f"fixture {path} must hold a JSON object")
    descriptor = tables.get("descriptor") or f"fixture:{path.stem}"
    return FixtureBackend(tables, descriptor=descriptor, corpus=corpus)


def load_mock_backends(
    fixture_dir, corpus: Optional[Mapping[str, Document]] = None
) -> Backends:
    """One fixture file per role; retriever, scorer and generator are required."""
    fixture_dir = Path(fixture_dir)
    found = {}
    for role, filename in ROLE_FILES.items():
        path = fixture_dir / filename
        if path.exists():
            found[role] = mock_from_fixture(path, corpus=corpus)
        elif role in REQUIRED_ROLES:
            raise FixtureParseError(f"missing {role} fixture {path}")
    return Backends(**found)
