import math
from dataclasses import asdict, dataclass, replace
from enum import Enum
from typing import Any, Dict, Optional, Tuple, Union

import dacite
from dacite import from_dict

from fragsel.exceptions import ConfigError, FormatError

Span = Tuple[int, int]

DACITE_CONFIG = dacite.Config(
    cast=[Enum],
    type_hooks={float: float, Span: tuple},
)


def count_tokens(text: str) -> int:
    """Number of maximal non-whitespace runs in ``text``."""
    return len(text.split())


class Modality(str, Enum):
    TEXT = "text"
    IMAGE = "image"


class EvidenceKind(str, Enum):
    COARSE_DOC = "coarse_doc"
    TEXT_FRAG = "text_frag"
    VISUAL_FRAG = "visual_frag"
    ORIGINAL_IMAGE = "original_image"


@dataclass(frozen=True)
class Query:
    id: str
    text: str
    image_ref: Optional[str] = None

    def __post_init__(self):
        if not self.text or not self.text.strip():
            raise FormatError("query text is empty", query_id=self.id)


@dataclass(frozen=True)
class Document:
    id: str
    modality: Modality
    body: Optional[str] = None
    image_ref: Optional[str] = None
    # always recomputed from body, a serialized value is ignored
    token_count: int = 0

    def __post_init__(self):
        if self.modality == Modality.TEXT:
            if self.body is None or self.image_ref is not None:
                raise FormatError("text document must have a body only", doc_id=self.id)
            object.__setattr__(self, "token_count", count_tokens(self.body))
        else:
            if self.image_ref is None or self.body is not None:
                raise FormatError(
                    "image document must have an image_ref only", doc_id=self.id
                )
            object.__setattr__(self, "token_count", 0)

    @property
    def is_image(self) -> bool:
        return self.modality == Modality.IMAGE

    @classmethod
    def of_text(cls, doc_id: str, body: str) -> "Document":
        return cls(id=doc_id, modality=Modality.TEXT, body=body)

    @classmethod
    def of_image(cls, doc_id: str, image_ref: str) -> "Document":
        return cls(id=doc_id, modality=Modality.IMAGE, image_ref=image_ref)


@dataclass(frozen=True)
class TextFragment:
    parent_doc_id: str
    sentence_span: Span
    text: str
    relevance_score: float

    def __post_init__(self):
        start, end = self.sentence_span
        if not 0 <= start <= end:
            raise FormatError(
                f"invalid sentence span {self.sentence_span}",
                doc_id=self.parent_doc_id,
            )


@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_max > self.x_min and self.y_max > self.y_min):
            raise FormatError(f"degenerate bounding box {self.as_list()}")

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    def as_list(self):
        return [self.x_min, self.y_min, self.x_max, self.y_max]

    @classmethod
    def from_list(cls, coords) -> "BoundingBox":
        if len(coords) != 4:
            raise FormatError(f"bounding box needs 4 coordinates, got {coords}")
        return cls(*(float(c) for c in coords))


@dataclass(frozen=True)
class VisualFragment:
    parent_doc_id: str
    image_ref: str
    box: BoundingBox
    objectness: float
    semantic_score: float

    def __post_init__(self):
        for name in ("objectness", "semantic_score"):
            value = getattr(self, name)
            if not (math.isfinite(value) and 0.0 <= value <= 1.0):
                raise FormatError(
                    f"{name}={value} outside [0, 1]", doc_id=self.parent_doc_id
                )


Payload = Union[Document, TextFragment, VisualFragment]

_PAYLOAD_TYPES = {
    EvidenceKind.COARSE_DOC: Document,
    EvidenceKind.TEXT_FRAG: TextFragment,
    EvidenceKind.VISUAL_FRAG: VisualFragment,
    EvidenceKind.ORIGINAL_IMAGE: Document,
}


def _format_coord(value: float) -> str:
    # repr keeps every digit; integral values print without ".0"
    value = float(value)
    if value.is_integer():
        return str(int(value))
    return repr(value)


@dataclass(frozen=True)
class EvidenceItem:
    kind: EvidenceKind
    payload: Payload
    selector_score: Optional[float] = None

    def __post_init__(self):
        if not isinstance(self.payload, _PAYLOAD_TYPES[self.kind]):
            raise FormatError(
                f"{self.kind.value} item cannot carry a {type(self.payload).__name__}"
            )
        if self.kind == EvidenceKind.ORIGINAL_IMAGE and not self.payload.is_image:
            raise FormatError("original_image item needs an image document")

    @classmethod
    def coarse(cls, doc: Document) -> "EvidenceItem":
        return cls(EvidenceKind.COARSE_DOC, doc)

    @classmethod
    def original_image(cls, doc: Document) -> "EvidenceItem":
        return cls(EvidenceKind.ORIGINAL_IMAGE, doc)

    @classmethod
    def text_fragment(cls, fragment: TextFragment) -> "EvidenceItem":
        return cls(EvidenceKind.TEXT_FRAG, fragment)

    @classmethod
    def visual_fragment(cls, fragment: VisualFragment) -> "EvidenceItem":
        return cls(EvidenceKind.VISUAL_FRAG, fragment)

    @property
    def parent_doc_id(self) -> str:
        if isinstance(self.payload, Document):
            return self.payload.id
        return self.payload.parent_doc_id

    @property
    def item_id(self) -> str:
        if self.kind == EvidenceKind.COARSE_DOC:
            return self.payload.id
        if self.kind == EvidenceKind.ORIGINAL_IMAGE:
            return f"{self.payload.id}#image"
        if self.kind == EvidenceKind.TEXT_FRAG:
            start, end = self.payload.sentence_span
            return f"{self.parent_doc_id}#s{start}-{end}"
        coords = ",".join(_format_coord(c) for c in self.payload.box.as_list())
        return f"{self.parent_doc_id}#box{coords}"

    @property
    def is_visual(self) -> bool:
        if self.kind in (EvidenceKind.VISUAL_FRAG, EvidenceKind.ORIGINAL_IMAGE):
            return True
        return self.kind == EvidenceKind.COARSE_DOC and self.payload.is_image

    @property
    def text(self) -> str:
        """Textual content of the item, empty for visual items."""
        if self.kind == EvidenceKind.TEXT_FRAG:
            return self.payload.text
        if self.kind == EvidenceKind.COARSE_DOC and not self.payload.is_image:
            return self.payload.body
        return ""

    def with_score(self, score: float) -> "EvidenceItem":
        return replace(self, selector_score=score)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "kind": self.kind.value,
            "payload": to_jsonable(self.payload),
            "selector_score": self.selector_score,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "EvidenceItem":
        try:
            kind = EvidenceKind(data["kind"])
            payload = from_dict(_PAYLOAD_TYPES[kind], data["payload"], DACITE_CONFIG)
            score = data.get("selector_score")
            return cls(kind, payload, None if score is None else float(score))
        except (KeyError, ValueError, dacite.DaciteError) as exc:
            raise FormatError(f"invalid evidence item: {exc}") from exc


def to_jsonable(obj) -> Dict[str, Any]:
    """asdict() with enums flattened to their values and tuples to lists."""

    def factory(items):
        out = {}
        for key, value in items:
            if isinstance(value, Enum):
                value = value.value
            elif isinstance(value, tuple):
                value = list(value)
            out[key] = value
        return out

    return asdict(obj, dict_factory=factory)


def load_document(data: Dict[str, Any]) -> Document:
    try:
        return from_dict(Document, data, DACITE_CONFIG)
    except (ValueError, dacite.DaciteError) as exc:
        raise FormatError(f"invalid document: {exc}") from exc


def load_query(data: Dict[str, Any]) -> Query:
    try:
        return from_dict(Query, data, DACITE_CONFIG)
    except (ValueError, dacite.DaciteError) as exc:
        raise FormatError(f"invalid query: {exc}") from exc


@dataclass(frozen=True)
class Config:
    n_ret: int = 100
    n_seg: int = 15
    k: int = 5
    tau_fig: float = 0.2
    tau_obj: float = 0.40
    tau_sem: float = 0.35
    tau_size: float = 2500.0
    alpha: float = 0.7
    temperature: float = 2.0
    image_token_cost: int = 64
    collect_trace_nodes: bool = False
    parallelism: int = 1
    seed: int = 0

    def __post_init__(self):
        problems = []
        if self.n_ret < 1:
            problems.append("n_ret must be positive")
        if self.n_seg < 0:
            problems.append("n_seg must not be negative")
        if self.n_seg > self.n_ret:
            problems.append("n_seg must not exceed n_ret")
        if self.k < 1:
            problems.append("k must be at least 1")
        if not self.temperature > 0:
            problems.append("temperature must be positive")
        if not 0.0 <= self.alpha <= 1.0:
            problems.append("alpha must lie in [0, 1]")
        if not self.tau_size > 0:
            problems.append("tau_size must be positive")
        if self.image_token_cost < 0:
            problems.append("image_token_cost must not be negative")
        if self.parallelism < 1:
            problems.append("parallelism must be at least 1")
        if problems:
            raise ConfigError("; ".join(problems))

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)
