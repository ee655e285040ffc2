import logging
import os
import time
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import dacite
import httpx
from dacite import from_dict

from fragsel import __version__
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
from fragsel.exceptions import BackendFailure, BackendTimeout, ConfigError, FormatError
from fragsel.models import Document, EvidenceItem, Query
from fragsel.utils import null_logger, read_json

RETRYABLE_STATUSES = frozenset({429, 500, 502, 503, 504})
BODY_EXCERPT_LENGTH = 200


@dataclass
class HTTPBackendConfig:
    endpoint_url: str
    auth_token_env_var: Optional[str] = None
    timeout: float = 30.0
    max_retries: int = 3
    retry_delay: float = 0.5
    max_connections: int = 8
    user_agent_prefix: str = ""
    logger: logging.Logger = null_logger

    def __post_init__(self):
        try:
            url = httpx.URL(self.endpoint_url)
        except (httpx.InvalidURL, TypeError) as exc:
            raise ConfigError(f"invalid endpoint url {self.endpoint_url!r}: {exc}") from exc
        if url.scheme not in ("http", "https") or not url.host:
            raise ConfigError(f"endpoint url must be absolute http(s): {self.endpoint_url!r}")
        if self.max_retries < 1:
            raise ConfigError(f"max_retries must be at least 1, got {self.max_retries}")
        if self.max_connections < 1:
            raise ConfigError(f"max_connections must be at least 1, got {self.max_connections}")


class HTTPBackend(
    Retriever, RelevanceScorer, Detector, LikelihoodScorer, TeacherScorer, Generator
):
    """Maps every backend contract onto one JSON POST against a model service."""

    def __init__(self, config: HTTPBackendConfig):
        self.url = config.endpoint_url.rstrip("/")
        self.max_retries = config.max_retries
        self.retry_delay = config.retry_delay
        self.logger = config.logger or null_logger

        prefix = f"{config.user_agent_prefix}-" if config.user_agent_prefix else ""
        headers = {"User-Agent": f"{prefix}fragsel/{__version__}"}
        if config.auth_token_env_var:
            token = os.environ.get(config.auth_token_env_var)
            if not token:
                raise ConfigError(
                    f"auth token environment variable {config.auth_token_env_var} is not set"
                )
            headers["Authorization"] = f"Bearer {token}"

        self.http_client = httpx.Client(
            timeout=config.timeout,
            limits=httpx.Limits(max_connections=config.max_connections),
            headers=headers,
        )

    @property
    def descriptor(self) -> str:
        return f"http:{self.url}"

    def close(self):
        self.http_client.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc_info):
        self.close()

    def _get_url(self, endpoint: str) -> str:
        return self.url + endpoint

    def _post(self, endpoint: str, payload: Dict[str, Any]) -> Any:
        url = self._get_url(endpoint)
        failure: Optional[BackendFailure] = None
        for attempt in range(self.max_retries):
            if attempt:
                delay = self.retry_delay * 2 ** (attempt - 1)
                self.logger.debug(f"waiting {delay} seconds before retrying {url}")
                time.sleep(delay)
            self.logger.debug(f"POST {url} attempt {attempt + 1}/{self.max_retries}")
            try:
                resp = self.http_client.post(url, json=payload)
            except httpx.TimeoutException as exc:
                failure = BackendTimeout(f"timed out: {exc}", endpoint=url)
                self.logger.warning(f"attempt {attempt + 1} to {url} timed out")
                continue
            except httpx.TransportError as exc:
                failure = BackendFailure(f"transport error: {exc}", endpoint=url)
                self.logger.warning(f"attempt {attempt + 1} to {url} failed: {exc}")
                continue

            if resp.is_success:
                try:
                    return resp.json()
                except ValueError as exc:
                    raise BackendFailure(
                        f"malformed response JSON: {exc}",
                        status=resp.status_code,
                        body_excerpt=resp.text[:BODY_EXCERPT_LENGTH],
                        endpoint=url,
                    ) from exc

            failure = BackendFailure(
                f"HTTP {resp.status_code} from {endpoint}",
                status=resp.status_code,
                body_excerpt=resp.text[:BODY_EXCERPT_LENGTH],
                endpoint=url,
            )
            if resp.status_code not in RETRYABLE_STATUSES:
                break
            self.logger.warning(
                f"attempt {attempt + 1} to {url} returned {resp.status_code}"
            )

        self.logger.error(f"giving up on {url}: {failure}")
        raise failure

    def retrieve(self, query: Query, n_ret: int) -> List[Document]:
        body = self._post(RETRIEVE_ENDPOINT, retrieve_request(query, n_ret))
        return parse_documents(body, self.descriptor)[:n_ret]

    def score(self, query: Query, text: str) -> float:
        return parse_score(self._post(SCORE_ENDPOINT, score_request(query, text)), self.descriptor)

    def detect(self, query: Query, image_ref: str) -> List[DetectionCandidate]:
        body = self._post(DETECT_ENDPOINT, detect_request(query, image_ref))
        return parse_candidates(body, self.descriptor)

    def logprobs(
        self,
        query: Query,
        fragment: Optional[EvidenceItem],
        answer_tokens: Sequence[str],
    ) -> TokenLogProbs:
        body = self._post(LOGPROBS_ENDPOINT, logprobs_request(query, fragment, answer_tokens))
        return parse_logprobs(body, answer_tokens, self.descriptor)

    def logit(self, query: Query, fragment: EvidenceItem) -> float:
        body = self._post(TEACHER_LOGIT_ENDPOINT, teacher_request(query, fragment))
        return parse_logit(body, self.descriptor)

    def generate(self, query: Query, context: List[EvidenceItem]) -> str:
        body = self._post(GENERATE_ENDPOINT, generate_request(query, context))
        return parse_answer(body, self.descriptor)


def http_backend(
    endpoint_url: str,
    auth_token_env_var: Optional[str] = None,
    timeout: float = 30.0,
    retries: int = 3,
    **kwargs,
) -> HTTPBackend:
    return HTTPBackend(
        HTTPBackendConfig(
            endpoint_url=endpoint_url,
            auth_token_env_var=auth_token_env_var,
            timeout=timeout,
            max_retries=retries,
            **kwargs,
        )
    )


_ENDPOINT_KEYS = {f.name for f in fields(HTTPBackendConfig)} - {"logger"}


def endpoint_backend(
    entry: Union[str, Dict[str, Any]],
    logger: logging.Logger = null_logger,
    origin: str = "endpoint",
) -> HTTPBackend:
    """One backend from a url or a dict of HTTPBackendConfig fields."""
    if isinstance(entry, str):
        entry = {"endpoint_url": entry}
    if not isinstance(entry, dict) or set(entry) - _ENDPOINT_KEYS:
        raise ConfigError(f"invalid {origin} entry: {entry!r}")
    try:
        config = from_dict(
            HTTPBackendConfig,
            {**entry, "logger": logger},
            dacite.Config(type_hooks={float: float}, check_types=False),
        )
    except dacite.DaciteError as exc:
        raise ConfigError(f"invalid {origin} entry: {exc}") from exc
    return HTTPBackend(config)


def load_http_backends(endpoints_file, logger: logging.Logger = null_logger) -> Backends:
    """Build backends from a JSON map of role to url or HTTPBackendConfig fields.

    {"retriever": "http://...", "scorer": {"endpoint_url": "...", "timeout": 5}}
    """
    path = Path(endpoints_file)
    try:
        entries = read_json(path)
    except FileNotFoundError as exc:
        raise ConfigError(f"endpoints file {path} does not exist") from exc
    except FormatError as exc:
        raise ConfigError(str(exc)) from exc
    if not isinstance(entries, dict):
        raise ConfigError(f"endpoints file {path} must hold a JSON object")

    roles = {"retriever", "scorer", "generator", "detector", "likelihood", "teacher"}
    unknown = set(entries) - roles
    if unknown:
        raise ConfigError(f"unknown backend roles in {path}: {sorted(unknown)}")
    for role in ("retriever", "scorer", "generator"):
        if role not in entries:
            raise ConfigError(f"endpoints file {path} lacks the {role} role")

    found = {
        role: endpoint_backend(entry, logger, origin=f"{role} endpoint in {path}")
        for role, entry in entries.items()
    }
    return Backends(**found)
