"""Answer scoring and memory-dynamics evaluation.

EM/F1 follow the standard extractive-QA convention: lowercase, strip
punctuation, drop bare articles, collapse whitespace, then compare exactly
(EM) or by token-multiset overlap (F1), taking the max over gold answers.

Found/Preserved operationalize memory retention as normalized-substring
containment: Found means some gold ever appeared in any memory state
(final included), Preserved means it survived into the final memory, so
Preserved implies Found by construction. The definition is recorded in
report metadata since it is a convention of this artifact.
"""

from __future__ import annotations

import re
import string
from collections import Counter
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .protocol import Trajectory

_ARTICLE_RE = re.compile(r"\b(a|an|the)\b")
_PUNCT_TABLE = str.maketrans("", "", string.punctuation)

FOUND_PRESERVED_DEFINITION = (
    "found: some normalized gold answer is a substring of any normalized memory state "
    "(final included); preserved: substring of the normalized final memory"
)


@dataclass(frozen=True)
class EvalResult:
    instance_id: str
    em: int
    f1: float
    found: bool
    preserved: bool
    steps_used: int
    stop_step: int | None
    wall_ms: int
    meta: dict = field(default_factory=dict)


def normalize_answer(text: str) -> str:
    """Lowercase, remove punctuation, drop standalone articles, collapse whitespace."""
    text = text.lower()
    text = text.translate(_PUNCT_TABLE)
    text = _ARTICLE_RE.sub(" ", text)
    return " ".join(text.split())


def exact_match(prediction: str, golds: Sequence[str]) -> int:
    if not golds:
        raise ValueError("golds must be non-empty")
    norm_pred = normalize_answer(prediction)
    return int(any(norm_pred == normalize_answer(g) for g in golds))


def _f1_single(prediction: str, gold: str) -> float:
    pred_tokens = normalize_answer(prediction).split()
    gold_tokens = normalize_answer(gold).split()
    if not pred_tokens or not gold_tokens:
        return float(pred_tokens == gold_tokens)
    overlap = sum((Counter(pred_tokens) & Counter(gold_tokens)).values())
    if overlap == 0:
        return 0.0
    precision = overlap / len(pred_tokens)
    recall = overlap / len(gold_tokens)
    return 2 * precision * recall / (precision + recall)


def f1(prediction: str, golds: Sequence[str]) -> float:
    if not golds:
        raise ValueError("golds must be non-empty")
    return max(_f1_single(prediction, g) for g in golds)


def memory_dynamics(trajectory: Trajectory, golds: Sequence[str]) -> tuple[bool, bool]:
    """(found, preserved) for one trajectory; preserved implies found."""
    norm_golds = [g for g in (normalize_answer(g) for g in golds) if g]
    if not norm_golds:
        return False, False
    states = [s.memory_after.text for s in trajectory.steps] + [trajectory.final_memory.text]
    norm_states = [normalize_answer(s) for s in states]
    found = any(g in s for g in norm_golds for s in norm_states)
    preserved = any(g in norm_states[-1] for g in norm_golds)
    return found, preserved


def evaluate_trajectory(trajectory: Trajectory, golds: Sequence[str], meta: dict | None = None) -> EvalResult:
    found, preserved = memory_dynamics(trajectory, golds)
    return EvalResult(
        instance_id=trajectory.instance_id,
        em=exact_match(trajectory.answer, golds),
        f1=f1(trajectory.answer, golds),
        found=found,
        preserved=preserved,
        steps_used=len(trajectory.steps),
        stop_step=trajectory.stop_step,
        wall_ms=trajectory.total_latency_ms,
        meta=dict(meta or {}),
    )


def _group_stats(results: Sequence[EvalResult]) -> dict:
    n = len(results)
    return {
        "n": n,
        "avg_em": sum(r.em for r in results) / n,
        "avg_f1": sum(r.f1 for r in results) / n,
        "found_rate": sum(r.found for r in results) / n,
        "preserved_rate": sum(r.preserved for r in results) / n,
        "mean_steps": sum(r.steps_used for r in results) / n,
        "mean_wall_ms": sum(r.wall_ms for r in results) / n,
    }


def aggregate(results: Sequence[EvalResult], group_keys: Sequence[str] = ()) -> dict:
    """Per-group means plus a totals row, in stable group order."""
    if not results:
        return {"groups": [], "total": None, "metric_definitions": FOUND_PRESERVED_DEFINITION}
    grouped: dict[tuple, list[EvalResult]] = {}
    for r in results:
        key = tuple(str(r.meta.get(k)) for k in group_keys)
        grouped.setdefault(key, []).append(r)
    groups = []
    for key in sorted(grouped):
        stats = _group_stats(grouped[key])
        groups.append({"key": dict(zip(group_keys, key)), **stats})
    return {
        "groups": groups,
        "total": _group_stats(results),
        "metric_definitions": FOUND_PRESERVED_DEFINITION,
    }


def report_table(report: Mapping, group_keys: Sequence[str]) -> str:
    """Plain-text table of an aggregate() report."""
    label_cols = list(group_keys) if group_keys else ["group"]
    headers = label_cols + ["n", "avg_em", "avg_f1", "found", "preserved", "steps", "wall_ms"]
    rows = []
    for g in report.get("groups", []):
        rows.append(
            ([str(g["key"].get(k, "")) for k in group_keys] if group_keys else ["all"])
            + [
                str(g["n"]),
                f"{g['avg_em']:.4f}",
                f"{g['avg_f1']:.4f}",
                f"{g['found_rate']:.4f}",
                f"{g['preserved_rate']:.4f}",
                f"{g['mean_steps']:.2f}",
                f"{g['mean_wall_ms']:.0f}",
            ]
        )
    total = report.get("total")
    if total:
        rows.append(
            ["TOTAL"] + [""] * (len(label_cols) - 1)
            + [
                str(total["n"]),
                f"{total['avg_em']:.4f}",
                f"{total['avg_f1']:.4f}",
                f"{total['found_rate']:.4f}",
                f"{total['preserved_rate']:.4f}",
                f"{total['mean_steps']:.2f}",
                f"{total['mean_wall_ms']:.0f}",
            ]
        )
    widths = [max(len(h), *(len(row[i]) for row in rows)) if rows else len(h) for i, h in enumerate(headers)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for row in rows:
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)))
    return "\n".join(lines)
