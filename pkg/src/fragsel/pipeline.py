"""Retrieve, rerank, segment and select, generate.

The pipeline replaces each of the top ``n_seg`` reranked text documents by its
fragments, keeps each top image alongside its regions of interest, appends the
remaining documents untouched, and hands the ``k`` best-scoring items of that
hybrid pool to the generator.
"""

import logging
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

from fragsel.backends import Backends, RelevanceScorer
from fragsel.exceptions import (
    EmptyRetrieval,
    FragselError,
    PreconditionViolation,
)
from fragsel.models import (
    Config,
    Document,
    EvidenceItem,
    EvidenceKind,
    Query,
    TextFragment,
    VisualFragment,
    count_tokens,
)
from fragsel.report import truncate_baseline
from fragsel.selector import FeatureExtractor, SelectorModel, extractor_for, score
from fragsel.text_segmentation import segment_text_document
from fragsel.utils import null_logger, ordered_map
from fragsel.visual_segmentation import VisualFilterThresholds, extract_visual_fragments

PHASES = ("retrieval", "rerank", "segment_select", "generate")

MODE_FES = "fes"
MODE_COARSE = "coarse"
MODE_TRUNCATE = "truncate"

TextSegmenter = Callable[[Query, Document], List[TextFragment]]
VisualSegmenter = Callable[[Query, Document], List[VisualFragment]]


@dataclass
class PipelineReport:
    phase_latencies: Dict[str, float]
    pool_sizes: Dict[str, int]
    context_tokens: int
    selected_items: List[EvidenceItem]
    answer: str
    mode: str = MODE_FES
    token_budget: Optional[int] = None

    def to_dict(self) -> Dict[str, Any]:
        data = {
            "mode": self.mode,
            "phase_latencies": dict(self.phase_latencies),
            "total_latency": sum(self.phase_latencies.values()),
            "pool_sizes": dict(self.pool_sizes),
            "context_tokens": self.context_tokens,
            "selected_items": [item.to_dict() for item in self.selected_items],
            "answer": self.answer,
        }
        if self.token_budget is not None:
            data["token_budget"] = self.token_budget
        return data


def context_tokens(items: Sequence[EvidenceItem], image_token_cost: int) -> int:
    """Text tokens of the textual items plus a flat cost per visual item."""
    total = 0
    for item in items:
        if item.is_visual:
            total += image_token_cost
        else:
            total += count_tokens(item.text)
    return total


def _scoring_text(doc: Document) -> str:
    # images are scored through their reference
    return doc.image_ref if doc.is_image else doc.body


def rerank(
    query: Query,
    candidates: Sequence[Document],
    scorer: RelevanceScorer,
    parallelism: int = 1,
) -> List[Document]:
    """Sort by relevance score, descending; ties keep retrieval order."""

    def score_doc(doc: Document) -> float:
        try:
            return scorer.score(query, _scoring_text(doc))
        except FragselError as exc:
            raise exc.add_context(query_id=query.id, doc_id=doc.id)

    scores = ordered_map(score_doc, candidates, parallelism)
    order = sorted(range(len(candidates)), key=lambda i: -scores[i])
    return [candidates[i] for i in order]


def build_hybrid_pool(
    query: Query,
    sorted_docs: Sequence[Document],
    n_seg: int,
    text_segmenter: TextSegmenter,
    visual_segmenter: VisualSegmenter,
    parallelism: int = 1,
) -> List[EvidenceItem]:
    head, tail = sorted_docs[:n_seg], sorted_docs[n_seg:]

    def segment(doc: Document) -> List[EvidenceItem]:
        try:
            if doc.is_image:
                regions = visual_segmenter(query, doc)
                return [EvidenceItem.original_image(doc)] + [
                    EvidenceItem.visual_fragment(r) for r in regions
                ]
            return [EvidenceItem.text_fragment(f) for f in text_segmenter(query, doc)]
        except FragselError as exc:
            raise exc.add_context(query_id=query.id, doc_id=doc.id)

    pool = []
    seen_spans = set()
    for items in ordered_map(segment, head, parallelism):
        for item in items:
            # regions may overlap or repeat; only identical text spans collapse
            if item.kind == EvidenceKind.TEXT_FRAG:
                key = (item.parent_doc_id, item.payload.sentence_span)
                if key in seen_spans:
                    continue
                seen_spans.add(key)
            pool.append(item)
    pool.extend(EvidenceItem.coarse(doc) for doc in tail)
    return pool


def select_top_k(
    query: Query,
    pool: Sequence[EvidenceItem],
    selector_model: SelectorModel,
    extractor: FeatureExtractor,
    k: int,
    parallelism: int = 1,
) -> List[EvidenceItem]:
    """The ``k`` highest selector logits, scores attached; ties keep pool order."""
    if k < 1:
        raise PreconditionViolation(f"k must be at least 1, got {k}")
    if selector_model.feature_spec != extractor.spec:
        raise PreconditionViolation(
            f"model was trained on {selector_model.feature_spec!r} features, "
            f"extractor produces {extractor.spec!r}"
        )

    logits = ordered_map(
        lambda item: score(selector_model, extractor.extract(query, item)),
        pool,
        parallelism,
    )
    order = sorted(range(len(pool)), key=lambda i: -logits[i])
    return [pool[i].with_score(logits[i]) for i in order[:k]]


@dataclass
class FragmentPipeline:
    config: Config
    backends: Backends
    model: SelectorModel
    extractor: Optional[FeatureExtractor] = None
    logger: logging.Logger = null_logger
    clock: Callable[[], float] = field(default=time.perf_counter)

    def __post_init__(self):
        if self.extractor is None:
            self.extractor = extractor_for(self.model.feature_spec)
        self.thresholds = VisualFilterThresholds.from_config(self.config)

    def _segment_text(self, query: Query, doc: Document) -> List[TextFragment]:
        return segment_text_document(
            query,
            doc,
            self.backends.scorer,
            collect_trace_nodes=self.config.collect_trace_nodes,
            logger=self.logger,
        )

    def _segment_image(self, query: Query, doc: Document) -> List[VisualFragment]:
        if self.backends.detector is None:
            self.logger.warning(
                f"no detector configured, image {doc.id} enters the pool without regions"
            )
            return []
        return extract_visual_fragments(
            query, doc, self.backends.detector, self.thresholds, logger=self.logger
        )

    def _retrieve_and_rerank(self, query: Query, latencies: Dict[str, float]):
        start = self.clock()
        docs = self.backends.retriever.retrieve(query, self.config.n_ret)
        if not docs:
            raise EmptyRetrieval("retriever returned no documents", query_id=query.id)
        docs = docs[: self.config.n_ret]
        retrieved = self.clock()
        sorted_docs = rerank(query, docs, self.backends.scorer, self.config.parallelism)
        latencies["retrieval"] = retrieved - start
        latencies["rerank"] = self.clock() - retrieved
        self.logger.debug(
            f"query {query.id}: reranked {[d.id for d in sorted_docs]}"
        )
        return docs, sorted_docs

    def _generate(self, query: Query, context: List[EvidenceItem], latencies):
        start = self.clock()
        answer = self.backends.generator.generate(query, context)
        latencies["generate"] = self.clock() - start
        return answer

    def run(self, query: Query) -> Tuple[str, PipelineReport]:
        latencies: Dict[str, float] = {}
        docs, sorted_docs = self._retrieve_and_rerank(query, latencies)

        start = self.clock()
        n_seg = min(self.config.n_seg, len(sorted_docs))
        pool = build_hybrid_pool(
            query,
            sorted_docs,
            n_seg,
            self._segment_text,
            self._segment_image,
            self.config.parallelism,
        )
        selected = select_top_k(
            query, pool, self.model, self.extractor, self.config.k, self.config.parallelism
        )
        latencies["segment_select"] = self.clock() - start

        answer = self._generate(query, selected, latencies)
        report = PipelineReport(
            phase_latencies={phase: latencies[phase] for phase in PHASES},
            pool_sizes={
                "retrieved": len(docs),
                "sorted": len(sorted_docs),
                "segmented_docs": n_seg,
                "hybrid_pool": len(pool),
                "selected": len(selected),
            },
            context_tokens=context_tokens(selected, self.config.image_token_cost),
            selected_items=selected,
            answer=answer,
        )
        self.logger.info(
            f"query {query.id}: {len(selected)} of {len(pool)} pool items selected, "
            f"{report.context_tokens} context tokens"
        )
        return answer, report

    def run_baseline(
        self,
        query: Query,
        mode: str,
        token_budget: Optional[int] = None,
        top_k: Optional[int] = None,
    ) -> Tuple[str, PipelineReport]:
        """Coarse top-k documents, or reranked documents cut to ``token_budget``.

        ``top_k`` overrides ``config.k`` for the coarse baseline.
        """
        if mode == MODE_TRUNCATE and token_budget is None:
            raise PreconditionViolation("truncation baseline needs a token budget")
        if mode not in (MODE_COARSE, MODE_TRUNCATE):
            raise PreconditionViolation(f"unknown baseline mode {mode!r}")

        latencies: Dict[str, float] = {}
        docs, sorted_docs = self._retrieve_and_rerank(query, latencies)
        start = self.clock()
        if mode == MODE_COARSE:
            context = [EvidenceItem.coarse(d) for d in sorted_docs[: top_k or self.config.k]]
        else:
            context = truncate_baseline(
                query, sorted_docs, token_budget, self.config.image_token_cost
            )
        latencies["segment_select"] = self.clock() - start

        answer = self._generate(query, context, latencies)
        report = PipelineReport(
            phase_latencies={phase: latencies[phase] for phase in PHASES},
            pool_sizes={
                "retrieved": len(docs),
                "sorted": len(sorted_docs),
                "segmented_docs": 0,
                "hybrid_pool": len(sorted_docs),
                "selected": len(context),
            },
            context_tokens=context_tokens(context, self.config.image_token_cost),
            selected_items=context,
            answer=answer,
            mode=mode,
            token_budget=token_budget,
        )
        return answer, report


def run(
    query: Query,
    config: Config,
    backends: Backends,
    selector_model: SelectorModel,
    logger: logging.Logger = null_logger,
    clock: Callable[[], float] = time.perf_counter,
) -> Tuple[str, PipelineReport]:
    pipeline = FragmentPipeline(config, backends, selector_model, logger=logger, clock=clock)
    return pipeline.run(query)


def result_row(query: Query, report: PipelineReport) -> Dict[str, Any]:
    return {"query_id": query.id, "answer": report.answer, "report": report.to_dict()}
