"""Recall@N and Selective Ordered Recall (Top-k@N) over retrieval lists."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence


@dataclass(frozen=True)
class EvalRecord:
    query_id: object
    retrieved_ids: tuple[int, ...]
    gt_ids: tuple[int, ...]
    # alternative positive set for recall (e.g. tiles within a radius); defaults to gt_ids
    positive_ids: tuple[int, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "retrieved_ids", tuple(int(i) for i in self.retrieved_ids))
        object.__setattr__(self, "gt_ids", tuple(int(i) for i in self.gt_ids))
        if self.positive_ids is not None:
            object.__setattr__(self, "positive_ids", tuple(int(i) for i in self.positive_ids))
        if len(set(self.retrieved_ids)) != len(self.retrieved_ids):
            raise ValueError(f"query {self.query_id}: duplicate retrieved ids")
        if len(set(self.gt_ids)) != len(self.gt_ids):
            raise ValueError(f"query {self.query_id}: duplicate ground-truth ids")


def recall_at_n(records: Sequence[EvalRecord], n: int) -> float:
    """Fraction of queries with any of their top-``n`` retrievals in the positive set.

    The positive set is ``positive_ids`` when given, else the whole ``gt_ids`` list.
    """
    if not records:
        raise ValueError("no records")
    hits = 0
    for r in records:
        if n < 1 or len(r.retrieved_ids) < n:
            raise ValueError(f"query {r.query_id}: n={n} exceeds {len(r.retrieved_ids)} retrievals")
        positives = r.gt_ids if r.positive_ids is None else r.positive_ids
        if not positives:
            raise ValueError(f"query {r.query_id}: empty ground truth")
        hits += not set(r.retrieved_ids[:n]).isdisjoint(positives)
    return hits / len(records)


def overlap_count(r: EvalRecord, n: int) -> int:
    return len(set(r.retrieved_ids[:n]) & set(r.gt_ids[:n]))


def top_k_at_n(records: Sequence[EvalRecord], k: int = 3, n: int = 5) -> float:
    """Fraction of queries with at least ``k`` of GT_n among the top-``n`` retrievals."""
    if k > n:
        raise ValueError(f"k={k} must not exceed n={n}")
    if k < 1:
        raise ValueError("k must be >= 1")
    if not records:
        raise ValueError("no records")
    hits = 0
    for r in records:
        if len(r.retrieved_ids) < n or len(r.gt_ids) < n:
            raise ValueError(f"query {r.query_id}: needs {n} retrievals and {n} ground-truth ids")
        hits += overlap_count(r, n) >= k
    return hits / len(records)


def evaluate(records: Sequence[EvalRecord], k: int = 3, n: int = 5) -> list[tuple[str, int, int, float]]:
    """Rows ``(metric, k, n, value)`` for R@1, R@n and Top-k@n."""
    return [
        ("recall", 0, 1, recall_at_n(records, 1)),
        ("recall", 0, n, recall_at_n(records, n)),
        ("top_k_at_n", k, n, top_k_at_n(records, k, n)),
    ]


def format_table(rows, label: str = "method") -> str:
    """Percentages in the R@1 / R@N / Top-k@N layout."""
    heads = []
    for metric, k, n, _ in rows:
        heads.append(f"R@{n}" if metric == "recall" else f"Top-{k}@{n}")
    width = max(len(label), 8)
    out = [f"{'Methods':<{width}} " + " ".join(f"{h:>8}" for h in heads)]
    out.append(f"{label:<{width}} " + " ".join(f"{100.0 * v:>8.2f}" for *_, v in rows))
    return "\n".join(out)


def write_report(out_dir, rows, records: Sequence[EvalRecord], k: int = 3, n: int = 5) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report = out_dir / "eval_report.csv"
    with report.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "k", "n", "value"])
        for metric, kk, nn, v in rows:
            w.writerow([metric, kk, nn, repr(float(v))])
    detail = out_dir / "eval_queries.jsonl"
    with detail.open("w", encoding="utf-8") as fh:
        for r in records:
            fh.write(
                json.dumps(
                    {
                        "query_id": r.query_id,
                        "retrieved": list(r.retrieved_ids),
                        "gt": list(r.gt_ids),
                        "overlap": overlap_count(r, n) if len(r.gt_ids) >= n and len(r.retrieved_ids) >= n else None,
                        "rank1_hit": bool(r.retrieved_ids and r.retrieved_ids[0] in r.gt_ids),
                    },
                    sort_keys=True,
                )
                + "\n"
            )
    return [report, detail]
