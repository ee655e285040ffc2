"""Truncation baseline and aggregate reporting over run results and FIG records."""

from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from fragsel.exceptions import FormatError, PreconditionViolation, UnsortedEdges
from fragsel.fig import FigRecord
from fragsel.models import Document, EvidenceItem, Query

PHASE_ORDER = ("retrieval", "rerank", "segment_select", "generate")
POOL_ORDER = ("retrieved", "sorted", "segmented_docs", "hybrid_pool", "selected")


def truncate_baseline(
    query: Query,
    sorted_docs: Sequence[Document],
    token_budget: int,
    image_token_cost: int = 64,
) -> List[EvidenceItem]:
    """Reranked documents in order until ``token_budget`` is spent.

    The first text document that does not fit is cut to its longest whole-token
    prefix; the first image that does not fit is dropped. Nothing after that
    document is considered.
    """
    if token_budget < 0:
        raise PreconditionViolation(
            f"token budget must not be negative, got {token_budget}", query_id=query.id
        )
    remaining = token_budget
    context = []
    for doc in sorted_docs:
        if doc.is_image:
            if image_token_cost > remaining:
                break
            context.append(EvidenceItem.coarse(doc))
            remaining -= image_token_cost
            continue
        if doc.token_count <= remaining:
            context.append(EvidenceItem.coarse(doc))
            remaining -= doc.token_count
            continue
        if remaining > 0:
            prefix = " ".join(doc.body.split()[:remaining])
            context.append(EvidenceItem.coarse(Document.of_text(doc.id, prefix)))
        break
    return context


def _fmt(edge: float) -> str:
    return f"{edge:g}"


def interval_labels(edges: Sequence[float]) -> List[str]:
    """Left-open, right-closed interval names for ``edges``."""
    if not edges:
        return ["all FIG"]
    labels = [f"FIG <= {_fmt(edges[0])}"]
    for low, high in zip(edges, edges[1:]):
        labels.append(f"{_fmt(low)} < FIG <= {_fmt(high)}")
    labels.append(f"FIG > {_fmt(edges[-1])}")
    return labels


@dataclass
class FigHistogram:
    edges: List[float]
    labels: List[str]
    counts: List[int]
    positive_rates: List[Optional[float]]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "convention": "left-open, right-closed",
            "buckets": [
                {"interval": label, "count": count, "hard_label_rate": rate}
                for label, count, rate in zip(self.labels, self.counts, self.positive_rates)
            ],
        }


def bucket_fig(records: Sequence[FigRecord], edges: Sequence[float]) -> FigHistogram:
    edges = [float(e) for e in edges]
    if any(high <= low for low, high in zip(edges, edges[1:])):
        raise UnsortedEdges(f"edges must be strictly increasing, got {edges}")

    n_buckets = len(edges) + 1
    figs = np.array([r.fig for r in records], dtype=np.float64)
    labels = np.array([r.hard_label for r in records], dtype=np.float64)
    # side="left" puts a value equal to an edge in the bucket that edge closes
    index = np.searchsorted(np.array(edges), figs, side="left")
    counts = np.bincount(index, minlength=n_buckets)
    positives = np.bincount(index, weights=labels, minlength=n_buckets)
    rates = [
        float(positives[i] / counts[i]) if counts[i] else None for i in range(n_buckets)
    ]
    return FigHistogram(
        edges=edges,
        labels=interval_labels(edges),
        counts=[int(c) for c in counts],
        positive_rates=rates,
    )


def _result_report(row: Any, index: int) -> Dict[str, Any]:
    report = row.get("report") if isinstance(row, dict) else None
    if not isinstance(report, dict):
        raise FormatError(f"result row {index} has no report")
    if not isinstance(report.get("context_tokens"), (int, float)):
        raise FormatError(f"result row {index}: context_tokens missing or not a number")
    for name in ("phase_latencies", "pool_sizes"):
        if not isinstance(report.get(name, {}), dict):
            raise FormatError(f"result row {index}: {name} is not an object")
    return report


def summarize_results(rows: Sequence[Dict[str, Any]]) -> Dict[str, Dict[str, Any]]:
    """Per-mode means of context tokens, phase latencies and pool sizes."""
    by_mode: Dict[str, List[Dict[str, Any]]] = {}
    for index, row in enumerate(rows):
        report = _result_report(row, index)
        by_mode.setdefault(report.get("mode", "fes"), []).append(report)

    summaries = {}
    for mode, reports in by_mode.items():
        latencies = {
            phase: float(np.mean([r.get("phase_latencies", {}).get(phase, 0.0) for r in reports]))
            for phase in PHASE_ORDER
        }
        summaries[mode] = {
            "queries": len(reports),
            "context_tokens": float(np.mean([r["context_tokens"] for r in reports])),
            "phase_latencies": latencies,
            "total_latency": sum(latencies.values()),
            "pool_sizes": {
                name: float(np.mean([r.get("pool_sizes", {}).get(name, 0) for r in reports]))
                for name in POOL_ORDER
            },
        }
    return summaries


def token_savings(fes_tokens: float, baseline_tokens: float) -> Optional[float]:
    """Relative context reduction of fragment selection against a baseline."""
    if baseline_tokens <= 0:
        return None
    return (baseline_tokens - fes_tokens) / baseline_tokens


def format_summary(summaries: Dict[str, Dict[str, Any]]) -> str:
    lines = []
    header = ["mode", "queries", "tokens"] + list(PHASE_ORDER) + ["total"]
    lines.append("  ".join(f"{h:>14}" for h in header))
    for mode, summary in sorted(summaries.items()):
        cells = [mode, str(summary["queries"]), f"{summary['context_tokens']:.1f}"]
        cells += [f"{summary['phase_latencies'][p] * 1000:.2f}ms" for p in PHASE_ORDER]
        cells.append(f"{summary['total_latency'] * 1000:.2f}ms")
        lines.append("  ".join(f"{c:>14}" for c in cells))

    fes = summaries.get("fes")
    if fes is not None:
        for mode, summary in sorted(summaries.items()):
            if mode == "fes":
                continue
            saving = token_savings(fes["context_tokens"], summary["context_tokens"])
            if saving is not None:
                lines.append(f"token savings vs {mode}: {saving:.1%}")
    return "\n".join(lines)


def format_histogram(histogram: FigHistogram) -> str:
    lines = ["intervals are left-open, right-closed"]
    width = max(len(label) for label in histogram.labels)
    for label, count, rate in zip(
        histogram.labels, histogram.counts, histogram.positive_rates
    ):
        rate_text = "-" if rate is None else f"{rate:.2f}"
        lines.append(f"{label:<{width}}  {count:>6}  hard_label_rate={rate_text}")
    return "\n".join(lines)
