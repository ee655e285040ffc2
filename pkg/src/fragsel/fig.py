"""Fragment Information Gain (FIG) supervision.

FIG is the gain in length-normalized answer log-likelihood when a single
fragment is placed in the generator's context. Thresholding it gives the hard
labels the selector is trained on.
"""

import logging
from dataclasses import dataclass, replace
from typing import TYPE_CHECKING, Any, Dict, List, Optional, Sequence

import numpy as np

from fragsel.backends import LikelihoodScorer, TeacherScorer, TokenLogProbs
from fragsel.exceptions import (
    BackendFailure,
    FormatError,
    FragselError,
    LengthMismatch,
    PreconditionViolation,
)
from fragsel.models import Config, EvidenceItem, Query
from fragsel.utils import null_logger, ordered_map, read_jsonl, split_manifest, write_jsonl

if TYPE_CHECKING:
    from fragsel.storage import FigStorageInterface


def fig_score(with_fragment: TokenLogProbs, without_fragment: TokenLogProbs) -> float:
    if with_fragment.answer_tokens != without_fragment.answer_tokens:
        raise LengthMismatch(
            f"answer token sequences differ ({len(with_fragment.answer_tokens)} vs "
            f"{len(without_fragment.answer_tokens)} tokens)"
        )
    return float(np.mean(with_fragment.logprobs)) - float(
        np.mean(without_fragment.logprobs)
    )


def hard_label(fig: float, tau_fig: float) -> int:
    return 1 if fig > tau_fig else 0


@dataclass(frozen=True)
class FigRecord:
    query_id: str
    query_text: str
    fragment: EvidenceItem
    fig: float
    hard_label: int
    tau_fig: float
    teacher_logit: Optional[float] = None

    def __post_init__(self):
        if self.hard_label != hard_label(self.fig, self.tau_fig):
            raise FormatError(
                f"hard_label {self.hard_label} inconsistent with fig={self.fig} "
                f"and tau_fig={self.tau_fig}",
                query_id=self.query_id,
                fragment_id=self.fragment_id,
            )

    @property
    def fragment_id(self) -> str:
        return self.fragment.item_id

    @property
    def query(self) -> Query:
        return Query(id=self.query_id, text=self.query_text)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "query_id": self.query_id,
            "query_text": self.query_text,
            "fragment": self.fragment.to_dict(),
            "fig": self.fig,
            "hard_label": self.hard_label,
            "tau_fig": self.tau_fig,
            "teacher_logit": self.teacher_logit,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "FigRecord":
        try:
            teacher_logit = data.get("teacher_logit")
            return cls(
                query_id=str(data["query_id"]),
                query_text=str(data["query_text"]),
                fragment=EvidenceItem.from_dict(data["fragment"]),
                fig=float(data["fig"]),
                hard_label=int(data["hard_label"]),
                tau_fig=float(data["tau_fig"]),
                teacher_logit=None if teacher_logit is None else float(teacher_logit),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"invalid FIG record: {exc}") from exc


@dataclass(frozen=True)
class FigSample:
    """One query, its pre-tokenized ground-truth answer and candidate fragments."""

    query: Query
    answer_tokens: List[str]
    fragments: List[EvidenceItem]

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "FigSample":
        try:
            query = Query(
                id=str(data["query_id"]),
                text=data["query_text"],
                image_ref=data.get("query_image_ref"),
            )
            return cls(
                query=query,
                answer_tokens=[str(t) for t in data["answer_tokens"]],
                fragments=[EvidenceItem.from_dict(f) for f in data["fragments"]],
            )
        except (KeyError, TypeError) as exc:
            raise FormatError(f"invalid FIG sample: {exc}") from exc

    def to_dict(self) -> Dict[str, Any]:
        data = {
            "query_id": self.query.id,
            "query_text": self.query.text,
            "answer_tokens": list(self.answer_tokens),
            "fragments": [f.to_dict() for f in self.fragments],
        }
        if self.query.image_ref is not None:
            data["query_image_ref"] = self.query.image_ref
        return data


def _tagged(exc: FragselError, query: Query, fragment: Optional[EvidenceItem]):
    return exc.add_context(
        query_id=query.id, fragment_id=fragment.item_id if fragment else None
    )


def _reusable(
    record: Optional[FigRecord],
    config: Config,
    teacher: Optional[TeacherScorer],
    store: "FigStorageInterface",
) -> Optional[FigRecord]:
    """A stored record relabelled at the current threshold, or None to rebuild it."""
    if record is None:
        return None
    if teacher is not None and record.teacher_logit is None:
        return None
    if record.tau_fig == config.tau_fig:
        return record
    relabelled = replace(
        record, hard_label=hard_label(record.fig, config.tau_fig), tau_fig=config.tau_fig
    )
    store.update_or_create_record(relabelled)
    return relabelled


def build_fig_dataset(
    samples: Sequence[FigSample],
    likelihood: LikelihoodScorer,
    teacher: Optional[TeacherScorer] = None,
    config: Config = Config(),
    store: Optional["FigStorageInterface"] = None,
    logger: logging.Logger = null_logger,
) -> List[FigRecord]:
    """Score every (query, fragment) pair of ``samples``.

    The fragment-free baseline is requested once per query and shared by its
    fragments. With a ``store``, pairs already stored are reused and new
    records are written through. Reused records are relabelled at the current
    ``tau_fig``; with a ``teacher``, stored records lacking its logit are rebuilt.
    """
    query_ids = set()
    for sample in samples:
        if not sample.fragments:
            raise PreconditionViolation("sample has no fragments", query_id=sample.query.id)
        # records and the store are keyed by (query_id, fragment_id)
        if sample.query.id in query_ids:
            raise FormatError("duplicate query id in FIG samples", query_id=sample.query.id)
        query_ids.add(sample.query.id)

    known: Dict[tuple, FigRecord] = {}
    if store is not None:
        for sample in samples:
            for fragment in sample.fragments:
                record = _reusable(
                    store.get_record(sample.query.id, fragment.item_id), config, teacher, store
                )
                if record is not None:
                    known[(sample.query.id, fragment.item_id)] = record

    pending = [
        (sample, fragment)
        for sample in samples
        for fragment in sample.fragments
        if (sample.query.id, fragment.item_id) not in known
    ]
    baseline_samples = []
    for sample, _ in pending:
        if not any(s is sample for s in baseline_samples):
            baseline_samples.append(sample)
    logger.info(
        f"building FIG records: {len(samples)} queries, {len(pending)} pending pairs, "
        f"{len(known)} reused"
    )

    def baseline_call(sample: FigSample) -> TokenLogProbs:
        try:
            return likelihood.logprobs(sample.query, None, sample.answer_tokens)
        except BackendFailure as exc:
            raise _tagged(exc, sample.query, None)

    def fragment_call(pair) -> TokenLogProbs:
        sample, fragment = pair
        try:
            return likelihood.logprobs(sample.query, fragment, sample.answer_tokens)
        except BackendFailure as exc:
            raise _tagged(exc, sample.query, fragment)

    def teacher_call(pair) -> Optional[float]:
        sample, fragment = pair
        if teacher is None:
            return None
        try:
            return teacher.logit(sample.query, fragment)
        except BackendFailure as exc:
            raise _tagged(exc, sample.query, fragment)

    baselines = ordered_map(baseline_call, baseline_samples, config.parallelism)
    baseline_by_query = {s.query.id: b for s, b in zip(baseline_samples, baselines)}
    conditioned = ordered_map(fragment_call, pending, config.parallelism)
    teacher_logits = ordered_map(teacher_call, pending, config.parallelism)

    for (sample, fragment), with_fragment, logit in zip(pending, conditioned, teacher_logits):
        try:
            fig = fig_score(with_fragment, baseline_by_query[sample.query.id])
        except LengthMismatch as exc:
            raise _tagged(exc, sample.query, fragment)
        record = FigRecord(
            query_id=sample.query.id,
            query_text=sample.query.text,
            fragment=fragment,
            fig=fig,
            hard_label=hard_label(fig, config.tau_fig),
            tau_fig=config.tau_fig,
            teacher_logit=logit,
        )
        known[(sample.query.id, fragment.item_id)] = record
        if store is not None:
            store.update_or_create_record(record)

    return [
        known[(sample.query.id, fragment.item_id)]
        for sample in samples
        for fragment in sample.fragments
    ]


def load_samples(path) -> List[FigSample]:
    _, rows = split_manifest(read_jsonl(path))
    return [FigSample.from_dict(row) for row in rows]


def load_fig_records(path) -> List[FigRecord]:
    _, rows = split_manifest(read_jsonl(path))
    return [FigRecord.from_dict(row) for row in rows]


def write_fig_records(path, records: Sequence[FigRecord], header: Dict[str, Any]):
    write_jsonl(path, (r.to_dict() for r in records), header={"header": header})
