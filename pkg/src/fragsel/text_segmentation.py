"""Sentence splitting and score-driven recursive decomposition of text documents.

A document is bisected at the sentence boundary that best balances the two
halves; the recursion follows the strictly better-scoring half as long as it
scores strictly higher than its parent, and stops at a single sentence.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

from fragsel.backends import RelevanceScorer
from fragsel.exceptions import EmptyDocument, PreconditionViolation, SingleSentence
from fragsel.models import Document, Query, Span, TextFragment
from fragsel.utils import null_logger

ABBREVIATIONS = frozenset(
    {"dr.", "mr.", "mrs.", "ms.", "prof.", "e.g.", "i.e.", "etc."}
)
SENTENCE_TERMINALS = ".!?"
CLOSING_PUNCTUATION = "\"')]}”’"

Splitter = Callable[[str], List[str]]


def _ends_sentence(token: str) -> bool:
    if token.lower() in ABBREVIATIONS:
        return False
    stripped = token.rstrip(CLOSING_PUNCTUATION)
    return bool(stripped) and stripped[-1] in SENTENCE_TERMINALS


def split_sentences(body: str) -> List[str]:
    """Split on terminal punctuation followed by whitespace.

    Whitespace inside a sentence is normalized to single spaces.
    """
    tokens = body.split()
    if not tokens:
        raise EmptyDocument("document has no text")

    sentences = []
    current: List[str] = []
    for token in tokens:
        current.append(token)
        if _ends_sentence(token):
            sentences.append(" ".join(current))
            current = []
    if current:
        sentences.append(" ".join(current))
    return sentences


def span_text(sentences: Sequence[str], span: Span) -> str:
    start, end = span
    return " ".join(sentences[start : end + 1])


def split_doc(sentences: Sequence[str], span: Span) -> Tuple[Span, Span]:
    """Bisect ``span`` at the boundary minimizing the character imbalance.

    Ties go to the smaller left half.
    """
    start, end = span
    if end <= start:
        raise SingleSentence(f"cannot split single-sentence span {span}")

    lengths = [len(s) for s in sentences[start : end + 1]]
    total = sum(lengths)
    best_mid, best_gap = start, None
    left = 0
    for offset, length in enumerate(lengths[:-1]):
        left += length
        gap = abs(left - (total - left))
        if best_gap is None or gap < best_gap:
            best_mid, best_gap = start + offset, gap
    return (start, best_mid), (best_mid + 1, end)


@dataclass
class SegmentScoreTrace:
    visited: List[Tuple[Span, float]] = field(default_factory=list)

    @property
    def result_span(self) -> Span:
        return self.visited[-1][0]

    @property
    def depth(self) -> int:
        return len(self.visited)

    def to_dict(self):
        return {
            "visited": [
                {"span": list(span), "score": score} for span, score in self.visited
            ],
            "result_span": list(self.result_span),
        }


def recur_split(
    query: Query,
    doc: Document,
    scorer: RelevanceScorer,
    splitter: Splitter = split_sentences,
    sentences: Optional[Sequence[str]] = None,
    logger: logging.Logger = null_logger,
) -> Tuple[TextFragment, SegmentScoreTrace]:
    """Return the fragment reached by the score-driven decomposition of ``doc``.

    ``sentences`` bypasses the splitter for corpora that are already split.
    """
    if doc.is_image:
        raise PreconditionViolation("recursive split needs a text document", doc_id=doc.id)
    if not doc.body or not doc.body.strip():
        raise EmptyDocument("document has no text", doc_id=doc.id)
    if sentences is None:
        sentences = splitter(doc.body)
    if not sentences:
        raise EmptyDocument("splitter returned no sentences", doc_id=doc.id)

    span = (0, len(sentences) - 1)
    score = scorer.score(query, span_text(sentences, span))
    trace = SegmentScoreTrace(visited=[(span, score)])

    while span[1] > span[0]:
        left, right = split_doc(sentences, span)
        s_left = scorer.score(query, span_text(sentences, left))
        s_right = scorer.score(query, span_text(sentences, right))
        logger.debug(
            f"doc {doc.id}: parent {span}={score} left {left}={s_left} right {right}={s_right}"
        )
        if max(s_left, s_right) <= score:
            break
        # equal children go right
        if s_left > s_right:
            span, score = left, s_left
        else:
            span, score = right, s_right
        trace.visited.append((span, score))

    fragment = TextFragment(
        parent_doc_id=doc.id,
        sentence_span=span,
        text=span_text(sentences, span),
        relevance_score=score,
    )
    return fragment, trace


def trace_fragments(
    doc: Document, sentences: Sequence[str], trace: SegmentScoreTrace
) -> List[TextFragment]:
    """One fragment per visited node, in visiting order, duplicates dropped."""
    seen = set()
    fragments = []
    for span, score in trace.visited:
        if span in seen:
            continue
        seen.add(span)
        fragments.append(
            TextFragment(
                parent_doc_id=doc.id,
                sentence_span=span,
                text=span_text(sentences, span),
                relevance_score=score,
            )
        )
    return fragments


def segment_text_document(
    query: Query,
    doc: Document,
    scorer: RelevanceScorer,
    collect_trace_nodes: bool = False,
    splitter: Splitter = split_sentences,
    logger: logging.Logger = null_logger,
) -> List[TextFragment]:
    """Fragments a text document contributes to the hybrid pool."""
    if not doc.is_image and doc.body and doc.body.strip():
        sentences = splitter(doc.body)
    else:
        sentences = None
    fragment, trace = recur_split(
        query, doc, scorer, splitter=splitter, sentences=sentences, logger=logger
    )
    if not collect_trace_nodes:
        return [fragment]
    return trace_fragments(doc, sentences, trace)
