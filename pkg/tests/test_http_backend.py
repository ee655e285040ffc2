"""
HTTP backend against a mocked model service.

1. Each contract method posts one versioned JSON body to its endpoint and parses the reply.
2. Retryable statuses and transport errors are retried up to the bound; other 4xx are not.
3. Malformed replies and contract violations surface as typed failures.
4. Endpoint files build one backend per role.
"""

import json
import logging

import httpx
import pytest
from pytest_httpx import HTTPXMock

from fragsel import __version__
from fragsel.exceptions import (
    BackendFailure,
    BackendTimeout,
    ConfigError,
    DetectorFailure,
    ScorerFailure,
)
from fragsel.http_backend import (
    HTTPBackend,
    HTTPBackendConfig,
    endpoint_backend,
    http_backend,
    load_http_backends,
)
from fragsel.models import Document, EvidenceItem, Query, TextFragment

BASE_URL = "http://model.test"
QUERY = Query(id="q1", text="Who won the 2019 prize?")

logger = logging.getLogger("fragsel.http.test")


@pytest.fixture
def backend():
    with http_backend(BASE_URL, retry_delay=0.0, logger=logger) as client:
        yield client


def sent_json(request: httpx.Request):
    return json.loads(request.read())


class TestContracts:
    def test_logprobs_without_fragment(self, backend: HTTPBackend, httpx_mock: HTTPXMock):
        httpx_mock.add_response(
            method="POST", url=f"{BASE_URL}/logprobs", json={"logprobs": [-0.1, -0.3]}
        )
        result = backend.logprobs(QUERY, None, ["a", "b"])
        assert result.answer_tokens == ["a", "b"]
        assert result.logprobs == [-0.1, -0.3]
        assert sent_json(httpx_mock.get_request()) == {
            "v": 1,
            "query": {"id": "q1", "text": "Who won the 2019 prize?", "image_ref": None},
            "fragment": None,
            "answer_tokens": ["a", "b"],
        }

    def test_logprobs_with_fragment(self, backend: HTTPBackend, httpx_mock: HTTPXMock):
        httpx_mock.add_response(url=f"{BASE_URL}/logprobs", json={"logprobs": [-0.5]})
        item = EvidenceItem.text_fragment(TextFragment("d1", (2, 2), "Abiy won.", 0.9))
        backend.logprobs(QUERY, item, ["Abiy"])
        sent = sent_json(httpx_mock.get_request())
        assert sent["fragment"] == item.to_dict()

    def test_retrieve(self, backend: HTTPBackend, httpx_mock: HTTPXMock):
        httpx_mock.add_response(
            url=f"{BASE_URL}/retrieve",
            json={
                "docs": [
                    {"id": "d1", "modality": "text", "body": "Abiy Ahmed won."},
                    {"id": "d2", "modality": "image", "image_ref": "images/d2.png"},
                    {"id": "d3", "modality": "text", "body": "Extra."},
                ]
            },
        )
        docs = backend.retrieve(QUERY, 2)
        assert docs == [
            Document.of_text("d1", "Abiy Ahmed won."),
            Document.of_image("d2", "images/d2.png"),
        ]
        assert sent_json(httpx_mock.get_request())["n_ret"] == 2

    def test_score(self, backend: HTTPBackend, httpx_mock: HTTPXMock):
        httpx_mock.add_response(url=f"{BASE_URL}/score", json={"score": 0.75})
        assert backend.score(QUERY, "Abiy Ahmed won.") == 0.75
        assert sent_json(httpx_mock.get_request())["text"] == "Abiy Ahmed won."

    def test_detect(self, backend: HTTPBackend, httpx_mock: HTTPXMock):
        httpx_mock.add_response(
            url=f"{BASE_URL}/detect",
            json={"candidates": [{"box": [1, 2, 3, 4], "objectness": 0.5, "semantic": 0.4}]},
        )
        (candidate,) = backend.detect(QUERY, "images/d2.png")
        assert candidate.box.as_list() == [1.0, 2.0, 3.0, 4.0]
        assert sent_json(httpx_mock.get_request())["image_ref"] == "images/d2.png"

    def test_teacher_logit(self, backend: HTTPBackend, httpx_mock: HTTPXMock):
        httpx_mock.add_response(url=f"{BASE_URL}/teacher_logit", json={"logit": -1.25})
        item = EvidenceItem.coarse(Document.of_text("d1", "Abiy Ahmed won."))
        assert backend.logit(QUERY, item) == -1.25

    def test_generate(self, backend: HTTPBackend, httpx_mock: HTTPXMock):
        httpx_mock.add_response(url=f"{BASE_URL}/generate", json={"answer": "Abiy Ahmed"})
        item = EvidenceItem.coarse(Document.of_text("d1", "Abiy Ahmed won."))
        assert backend.generate(QUERY, [item]) == "Abiy Ahmed"
        assert sent_json(httpx_mock.get_request())["context"] == [item.to_dict()]

    def test_headers(self, httpx_mock: HTTPXMock, monkeypatch):
        monkeypatch.setenv("FRAGSEL_TEST_TOKEN", "s3cret")
        httpx_mock.add_response(url=f"{BASE_URL}/score", json={"score": 0.1})
        with http_backend(
            BASE_URL, auth_token_env_var="FRAGSEL_TEST_TOKEN", user_agent_prefix="bench"
        ) as client:
            client.score(QUERY, "text")
        request = httpx_mock.get_request()
        assert request.headers["Authorization"] == "Bearer s3cret"
        assert request.headers["User-Agent"] == f"bench-fragsel/{__version__}"

    def test_descriptor(self, backend: HTTPBackend):
        assert backend.descriptor == "http:http://model.test"


class TestFailures:
    def test_retry_after_server_error(self, backend, httpx_mock: HTTPXMock, caplog):
        httpx_mock.add_response(url=f"{BASE_URL}/score", status_code=500)
        httpx_mock.add_response(url=f"{BASE_URL}/score", json={"score": 0.4})
        with caplog.at_level(logging.DEBUG, logger=logger.name):
            assert backend.score(QUERY, "text") == 0.4
        assert len(httpx_mock.get_requests()) == 2
        attempts = [r.message for r in caplog.records if r.message.startswith("POST")]
        assert len(attempts) == 2

    def test_retries_are_bounded(self, backend, httpx_mock: HTTPXMock):
        httpx_mock.add_response(url=f"{BASE_URL}/score", status_code=503, text="busy")
        with pytest.raises(BackendFailure) as excinfo:
            backend.score(QUERY, "text")
        assert len(httpx_mock.get_requests()) == 3
        assert excinfo.value.status == 503
        assert excinfo.value.body_excerpt == "busy"

    def test_client_error_is_not_retried(self, backend, httpx_mock: HTTPXMock):
        httpx_mock.add_response(url=f"{BASE_URL}/score", status_code=400, text="bad request")
        with pytest.raises(BackendFailure) as excinfo:
            backend.score(QUERY, "text")
        assert len(httpx_mock.get_requests()) == 1
        assert excinfo.value.status == 400
        assert excinfo.value.context["endpoint"] == f"{BASE_URL}/score"

    def test_timeout(self, backend, httpx_mock: HTTPXMock):
        httpx_mock.add_exception(httpx.ReadTimeout("too slow"), url=f"{BASE_URL}/score")
        with pytest.raises(BackendTimeout):
            backend.score(QUERY, "text")
        assert len(httpx_mock.get_requests()) == 3

    def test_transport_error_then_success(self, backend, httpx_mock: HTTPXMock):
        httpx_mock.add_exception(httpx.ConnectError("refused"), url=f"{BASE_URL}/score")
        httpx_mock.add_response(url=f"{BASE_URL}/score", json={"score": 0.2})
        assert backend.score(QUERY, "text") == 0.2

    def test_malformed_json(self, backend, httpx_mock: HTTPXMock):
        httpx_mock.add_response(url=f"{BASE_URL}/score", text="<html>oops</html>")
        with pytest.raises(BackendFailure) as excinfo:
            backend.score(QUERY, "text")
        assert "malformed response JSON" in str(excinfo.value)
        assert excinfo.value.body_excerpt == "<html>oops</html>"
        assert len(httpx_mock.get_requests()) == 1

    def test_missing_field(self, backend, httpx_mock: HTTPXMock):
        httpx_mock.add_response(url=f"{BASE_URL}/generate", json={"text": "no answer key"})
        with pytest.raises(BackendFailure, match="answer"):
            backend.generate(QUERY, [])

    def test_non_numeric_score(self, backend, httpx_mock: HTTPXMock):
        httpx_mock.add_response(url=f"{BASE_URL}/score", json={"score": "high"})
        with pytest.raises(ScorerFailure):
            backend.score(QUERY, "text")

    def test_out_of_range_detection(self, backend, httpx_mock: HTTPXMock):
        httpx_mock.add_response(
            url=f"{BASE_URL}/detect",
            json={"candidates": [{"box": [0, 0, 5, 5], "objectness": 2.0, "semantic": 0.4}]},
        )
        with pytest.raises(DetectorFailure):
            backend.detect(QUERY, "images/d2.png")

    def test_positive_logprob(self, backend, httpx_mock: HTTPXMock):
        httpx_mock.add_response(url=f"{BASE_URL}/logprobs", json={"logprobs": [0.1]})
        with pytest.raises(BackendFailure):
            backend.logprobs(QUERY, None, ["a"])


class TestConfig:
    @pytest.mark.parametrize("url", ["model.test/score", "ftp://model.test", ""])
    def test_invalid_url(self, url):
        with pytest.raises(ConfigError):
            HTTPBackendConfig(endpoint_url=url)

    def test_retry_bound_must_be_positive(self):
        with pytest.raises(ConfigError):
            HTTPBackendConfig(endpoint_url=BASE_URL, max_retries=0)

    def test_unset_token_variable(self, monkeypatch):
        monkeypatch.delenv("FRAGSEL_MISSING_TOKEN", raising=False)
        with pytest.raises(ConfigError):
            http_backend(BASE_URL, auth_token_env_var="FRAGSEL_MISSING_TOKEN")


class TestEndpointsFile:
    def write(self, tmp_path, entries):
        path = tmp_path / "endpoints.json"
        path.write_text(json.dumps(entries))
        return path

    def test_roles(self, tmp_path):
        path = self.write(
            tmp_path,
            {
                "retriever": "http://retriever.test",
                "scorer": {"endpoint_url": "http://scorer.test", "timeout": 5, "max_retries": 2},
                "generator": "http://generator.test/",
            },
        )
        backends = load_http_backends(path)
        assert backends.descriptors() == {
            "retriever": "http:http://retriever.test",
            "scorer": "http:http://scorer.test",
            "generator": "http:http://generator.test",
        }
        assert backends.scorer.max_retries == 2
        assert backends.detector is None

    @pytest.mark.parametrize(
        "entries",
        [
            {"retriever": "http://r.test", "scorer": "http://s.test"},
            {
                "retriever": "http://r.test",
                "scorer": "http://s.test",
                "generator": "http://g.test",
                "judge": "http://j.test",
            },
            {
                "retriever": "http://r.test",
                "scorer": {"endpoint_url": "http://s.test", "colour": "blue"},
                "generator": "http://g.test",
            },
            ["http://r.test"],
        ],
    )
    def test_invalid_files(self, tmp_path, entries):
        with pytest.raises(ConfigError):
            load_http_backends(self.write(tmp_path, entries))

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_http_backends(tmp_path / "absent.json")

    def test_close_releases_every_client(self, tmp_path):
        path = self.write(
            tmp_path,
            {
                "retriever": "http://retriever.test",
                "scorer": "http://scorer.test",
                "generator": "http://generator.test",
            },
        )
        backends = load_http_backends(path)
        backends.close()
        assert backends.retriever.http_client.is_closed
        assert backends.scorer.http_client.is_closed
        assert backends.generator.http_client.is_closed


class TestEndpointEntry:
    def test_url(self):
        with endpoint_backend("http://scorer.test/") as backend:
            assert backend.descriptor == "http:http://scorer.test"

    def test_settings(self, monkeypatch):
        monkeypatch.setenv("FRAGSEL_SCORER_TOKEN", "s3cret")
        entry = {
            "endpoint_url": "http://scorer.test",
            "auth_token_env_var": "FRAGSEL_SCORER_TOKEN",
            "max_retries": 5,
        }
        with endpoint_backend(entry) as backend:
            assert backend.max_retries == 5
            assert backend.http_client.headers["Authorization"] == "Bearer s3cret"

    @pytest.mark.parametrize(
        "entry", [{"endpoint_url": "http://s.test", "colour": "blue"}, {"timeout": 5}, 42]
    )
    def test_invalid_entries(self, entry):
        with pytest.raises(ConfigError):
            endpoint_backend(entry)
