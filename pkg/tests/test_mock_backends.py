import json
from pathlib import Path

import pytest

from fragsel.backends import (
    GENERATE_ENDPOINT,
    SCORE_ENDPOINT,
    score_request,
)
from fragsel.exceptions import (
    BackendFailure,
    DetectorFailure,
    FixtureMiss,
    FixtureParseError,
    ScorerFailure,
)
from fragsel.mock_backends import FixtureBackend, load_mock_backends, mock_from_fixture
from fragsel.models import Document, EvidenceItem, Query
from fragsel.utils import request_digest

DEMO = Path(__file__).parent.parent / "demo"

QUERY = Query(id="q1", text="Who won?")


@pytest.fixture
def corpus():
    return {
        "d1": Document.of_text("d1", "Abiy Ahmed won."),
        "d2": Document.of_image("d2", "images/d2.png"),
    }


class TestTables:
    def test_score_lookup(self):
        backend = FixtureBackend(
            {"scores": [{"query_id": "q1", "text": "Abiy Ahmed won.", "score": 0.9}]},
            descriptor="fixture:scores",
        )
        assert backend.score(QUERY, "Abiy Ahmed won.") == 0.9
        assert backend.calls == [(SCORE_ENDPOINT, score_request(QUERY, "Abiy Ahmed won."))]
        assert backend.descriptor == "fixture:scores"

    def test_missing_key_is_named(self):
        backend = FixtureBackend({"scores": []}, descriptor="fixture:empty")
        with pytest.raises(FixtureMiss) as excinfo:
            backend.score(QUERY, "unknown text")
        assert "unknown text" in str(excinfo.value)
        assert excinfo.value.context["digest"] == request_digest(
            SCORE_ENDPOINT, score_request(QUERY, "unknown text")
        )

    def test_digest_responses(self):
        digest = request_digest(SCORE_ENDPOINT, score_request(QUERY, "by digest"))
        backend = FixtureBackend({"responses": {digest: {"score": 0.25}}}, descriptor="x")
        assert backend.score(QUERY, "by digest") == 0.25

    def test_non_finite_score(self):
        backend = FixtureBackend(
            {"scores": [{"query_id": "q1", "text": "t", "score": "nan"}]}, descriptor="x"
        )
        with pytest.raises(ScorerFailure):
            backend.score(QUERY, "t")

    def test_retrieval_resolves_corpus_ids(self, corpus):
        backend = FixtureBackend(
            {"retrievals": [{"query_id": "q1", "doc_ids": ["d2", "d1"]}]},
            descriptor="x",
            corpus=corpus,
        )
        assert [d.id for d in backend.retrieve(QUERY, 10)] == ["d2", "d1"]
        assert [d.id for d in backend.retrieve(QUERY, 1)] == ["d2"]

    def test_retrieval_of_unknown_document(self, corpus):
        backend = FixtureBackend(
            {"retrievals": [{"query_id": "q1", "doc_ids": ["d7"]}]},
            descriptor="x",
            corpus=corpus,
        )
        with pytest.raises(FixtureMiss):
            backend.retrieve(QUERY, 10)

    def test_inline_documents(self):
        backend = FixtureBackend(
            {
                "retrievals": [
                    {
                        "query_id": "q1",
                        "docs": [{"id": "d5", "modality": "text", "body": "X."}],
                    }
                ]
            },
            descriptor="x",
        )
        assert backend.retrieve(QUERY, 3) == [Document.of_text("d5", "X.")]

    def test_detections_enforce_score_range(self):
        backend = FixtureBackend(
            {
                "detections": [
                    {
                        "query_id": "q1",
                        "image_ref": "images/d2.png",
                        "candidates": [
                            {"box": [0, 0, 10, 10], "objectness": 1.3, "semantic": 0.5}
                        ],
                    }
                ]
            },
            descriptor="x",
        )
        with pytest.raises(DetectorFailure):
            backend.detect(QUERY, "images/d2.png")

    def test_positive_logprob_is_rejected(self):
        backend = FixtureBackend(
            {"logprobs": [{"query_id": "q1", "fragment_id": None, "logprobs": [0.2]}]},
            descriptor="x",
        )
        with pytest.raises(BackendFailure):
            backend.logprobs(QUERY, None, ["a"])

    def test_exact_answer_wins_over_wildcard(self, corpus):
        backend = FixtureBackend(
            {
                "answers": [
                    {"query_id": "q1", "answer": "anything"},
                    {"query_id": "q1", "context_ids": ["d1"], "answer": "exact"},
                ]
            },
            descriptor="x",
        )
        assert backend.generate(QUERY, [EvidenceItem.coarse(corpus["d1"])]) == "exact"
        assert backend.generate(QUERY, [EvidenceItem.coarse(corpus["d2"])]) == "anything"
        assert len(backend.calls_to(GENERATE_ENDPOINT)) == 2

    def test_malformed_table(self):
        with pytest.raises(FixtureParseError):
            FixtureBackend({"scores": [{"text": "no query id"}]}, descriptor="x")


class TestFixtureFiles:
    def test_missing_file(self, tmp_path):
        with pytest.raises(FixtureParseError):
            mock_from_fixture(tmp_path / "absent.json")

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{not json")
        with pytest.raises(FixtureParseError):
            mock_from_fixture(path)

    def test_default_descriptor(self, tmp_path):
        path = tmp_path / "scorer.json"
        path.write_text(json.dumps({"scores": []}))
        assert mock_from_fixture(path).descriptor == "fixture:scorer"

    def test_demo_directory(self):
        backends = load_mock_backends(DEMO / "backends", corpus={})
        assert backends.descriptors() == {
            "retriever": "fixture:demo-retriever",
            "scorer": "fixture:demo-scorer",
            "generator": "fixture:demo-generator",
            "detector": "fixture:demo-detector",
            "likelihood": "fixture:demo-likelihood",
            "teacher": "fixture:demo-teacher",
        }

    def test_required_roles(self, tmp_path):
        (tmp_path / "scorer.json").write_text("{}")
        (tmp_path / "generator.json").write_text("{}")
        with pytest.raises(FixtureParseError):
            load_mock_backends(tmp_path)

    def test_optional_roles_may_be_absent(self, tmp_path):
        for name in ("retriever", "scorer", "generator"):
            (tmp_path / f"{name}.json").write_text("{}")
        backends = load_mock_backends(tmp_path)
        assert backends.detector is None
        assert backends.teacher is None
        assert set(backends.descriptors()) == {"retriever", "scorer", "generator"}
