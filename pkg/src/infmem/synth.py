"""Long-context QA instance synthesis.

Each QA item becomes a single long document: its gold evidence documents are
shuffled into a distractor pool with a recorded deterministic permutation and
whole distractor documents are appended until the token target is reached.
Documents are never split; golds are always kept, even past the target.

The shuffle is driven by splitmix64 over lexicographically sorted doc ids so
that plans are bit-identical across platforms and runs; the realized order is
stored in the plan, so downstream consumers never depend on RNG internals.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

from .budget import TokenCounter, count_tokens

SHUFFLE_ALGORITHM = "splitmix64-fisher-yates-v1"
SEPARATOR_NOTE = 'records "Document {index}: {title}\\n{body}" joined by blank lines (convention, not prescribed by any source corpus)'

QA_SOURCES = ("hotpotqa", "squad", "musique", "2wiki", "other")

_U64 = (1 << 64) - 1


class SynthError(ValueError):
    """Invalid synthesis input (duplicate ids, missing documents, bad targets)."""


@dataclass(frozen=True)
class Document:
    doc_id: str
    body: str
    token_count: int
    title: str | None = None


def make_document(doc_id: str, body: str, counter: TokenCounter, title: str | None = None) -> Document:
    if not body:
        raise SynthError(f"document {doc_id!r} has an empty body")
    return Document(doc_id=doc_id, body=body, token_count=count_tokens(body, counter), title=title)


@dataclass(frozen=True)
class QaRecord:
    qa_id: str
    question: str
    gold_answers: tuple[str, ...]
    gold_doc_ids: tuple[str, ...]
    source: str = "other"

    def __post_init__(self) -> None:
        if not self.gold_answers:
            raise SynthError(f"qa {self.qa_id!r} has no gold answers")
        if not self.gold_doc_ids:
            raise SynthError(f"qa {self.qa_id!r} references no gold documents")
        if self.source not in QA_SOURCES:
            raise SynthError(f"qa {self.qa_id!r} has unknown source {self.source!r}")


@dataclass(frozen=True)
class InsertionPlan:
    seed: int
    ordered_doc_ids: tuple[str, ...]
    gold_positions: tuple[tuple[str, int], ...]
    target_tokens: int
    planned_tokens: int
    overflow: bool = False
    warnings: tuple[str, ...] = ()
    shuffle_algorithm: str = SHUFFLE_ALGORITHM


@dataclass(frozen=True)
class LongContextInstance:
    instance_id: str
    question: str
    gold_answers: tuple[str, ...]
    long_text: str
    target_tokens: int
    actual_tokens: int
    plan: InsertionPlan
    source: str = "other"


def _splitmix64(state: int) -> tuple[int, int]:
    state = (state + 0x9E3779B97F4A7C15) & _U64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _U64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _U64
    return state, z ^ (z >> 31)


def seeded_shuffle(items: Sequence, seed: int) -> list:
    """Fisher-Yates permutation driven by splitmix64; stable across platforms."""
    out = list(items)
    state = seed & _U64
    for i in range(len(out) - 1, 0, -1):
        state, z = _splitmix64(state)
        j = z % (i + 1)
        out[i], out[j] = out[j], out[i]
    return out


def derive_seed(base_seed: int, label: str) -> int:
    """Per-item 64-bit seed from a suite seed and a stable label."""
    digest = hashlib.sha256(f"{base_seed}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def plan_insertion(
    qa: QaRecord,
    gold: Sequence[Document],
    distractors: Sequence[Document],
    target: int,
    seed: int,
    max_docs: int | None = None,
) -> InsertionPlan:
    """Deterministic document order for one instance.

    Golds and distractors are shuffled together; every gold is placed exactly
    once at its shuffled position, and a distractor is admitted only while the
    running token total (gold tokens reserved up front) stays within target.
    ``max_docs`` optionally caps the total document count; golds always count.
    """
    if not gold:
        raise SynthError(f"qa {qa.qa_id!r}: gold document list is empty")
    if target <= 0:
        raise SynthError(f"qa {qa.qa_id!r}: target must be > 0, got {target}")
    seen: set[str] = set()
    for doc in list(gold) + list(distractors):
        if doc.doc_id in seen:
            raise SynthError(f"duplicate doc id in candidate pool: {doc.doc_id!r}")
        seen.add(doc.doc_id)

    warnings: list[str] = []
    if not distractors:
        warnings.append("empty-distractor-pool")

    candidates = sorted(list(gold) + list(distractors), key=lambda d: d.doc_id)
    shuffled = seeded_shuffle(candidates, seed)

    gold_ids = {d.doc_id for d in gold}
    gold_total = sum(d.token_count for d in gold)
    overflow = gold_total > target
    if overflow:
        warnings.append("gold-tokens-exceed-target")

    running = gold_total
    golds_remaining = len(gold)
    ordered: list[Document] = []
    for doc in shuffled:
        if doc.doc_id in gold_ids:
            ordered.append(doc)
            golds_remaining -= 1
            continue
        if max_docs is not None and len(ordered) + golds_remaining >= max_docs:
            continue
        if running + doc.token_count <= target:
            ordered.append(doc)
            running += doc.token_count

    gold_positions = tuple(
        (doc.doc_id, idx) for idx, doc in enumerate(ordered) if doc.doc_id in gold_ids
    )
    return InsertionPlan(
        seed=seed,
        ordered_doc_ids=tuple(d.doc_id for d in ordered),
        gold_positions=gold_positions,
        target_tokens=target,
        planned_tokens=running,
        overflow=overflow,
        warnings=tuple(warnings),
    )


def render_record(index: int, title: str | None, body: str) -> str:
    return f"Document {index}: {title or ''}\n{body}"


def build_instance(
    qa: QaRecord,
    plan: InsertionPlan,
    docs: Mapping[str, Document],
    counter: TokenCounter,
    instance_id: str | None = None,
) -> LongContextInstance:
    """Materialize the plan into a single long document."""
    records = []
    for idx, doc_id in enumerate(plan.ordered_doc_ids):
        if doc_id not in docs:
            raise SynthError(f"plan references unknown document id: {doc_id!r}")
        doc = docs[doc_id]
        records.append(render_record(idx, doc.title, doc.body))
    long_text = "\n\n".join(records)
    return LongContextInstance(
        instance_id=instance_id if instance_id is not None else qa.qa_id,
        question=qa.question,
        gold_answers=tuple(qa.gold_answers),
        long_text=long_text,
        target_tokens=plan.target_tokens,
        actual_tokens=count_tokens(long_text, counter),
        plan=plan,
        source=qa.source,
    )


def instance_to_dict(instance: LongContextInstance) -> dict:
    plan = instance.plan
    return {
        "instance_id": instance.instance_id,
        "question": instance.question,
        "answers": list(instance.gold_answers),
        "context": instance.long_text,
        "target_tokens": instance.target_tokens,
        "actual_tokens": instance.actual_tokens,
        "source": instance.source,
        "plan": {
            "seed": plan.seed,
            "order": list(plan.ordered_doc_ids),
            "gold_positions": [list(p) for p in plan.gold_positions],
            "planned_tokens": plan.planned_tokens,
            "overflow": plan.overflow,
            "warnings": list(plan.warnings),
            "shuffle_algorithm": plan.shuffle_algorithm,
        },
    }


def instance_from_dict(record: Mapping) -> LongContextInstance:
    plan_rec = record["plan"]
    plan = InsertionPlan(
        seed=plan_rec["seed"],
        ordered_doc_ids=tuple(plan_rec["order"]),
        gold_positions=tuple((str(d), int(i)) for d, i in plan_rec["gold_positions"]),
        target_tokens=record["target_tokens"],
        planned_tokens=plan_rec["planned_tokens"],
        overflow=plan_rec.get("overflow", False),
        warnings=tuple(plan_rec.get("warnings", ())),
        shuffle_algorithm=plan_rec.get("shuffle_algorithm", SHUFFLE_ALGORITHM),
    )
    return LongContextInstance(
        instance_id=record["instance_id"],
        question=record["question"],
        gold_answers=tuple(record["answers"]),
        long_text=record["context"],
        target_tokens=record["target_tokens"],
        actual_tokens=record["actual_tokens"],
        plan=plan,
        source=record.get("source", "other"),
    )


def synthesize_suite(
    source: Sequence[QaRecord],
    documents: Mapping[str, Document],
    distractors: Sequence[Document],
    lengths: Sequence[int],
    seed: int,
    per_length_count: int,
    counter: TokenCounter,
    out_dir: str | Path,
    max_docs: int | None = None,
) -> dict:
    """Write one instance file per target length plus a byte-stable manifest.

    The same (seeded) question sample is reused at every length so that
    differences across lengths reflect only context scaling. Per-instance
    seeds derive from (suite seed, qa id) and are therefore length-independent.
    """
    if not lengths:
        raise SynthError("lengths must be non-empty")
    if list(lengths) != sorted(lengths) or len(set(lengths)) != len(lengths):
        raise SynthError(f"lengths must be strictly ascending, got {list(lengths)}")
    if per_length_count <= 0:
        raise SynthError(f"per_length_count must be > 0, got {per_length_count}")

    out_path = Path(out_dir)
    out_path.mkdir(parents=True, exist_ok=True)

    suite_warnings: dict[str, list[str]] = {}
    pool = seeded_shuffle(sorted(source, key=lambda r: r.qa_id), derive_seed(seed, "qa-sample"))
    chosen = sorted(pool[:per_length_count], key=lambda r: r.qa_id)
    if len(chosen) < per_length_count:
        suite_warnings["suite"] = [f"requested {per_length_count} questions, only {len(chosen)} available"]

    store = {**documents, **{d.doc_id: d for d in distractors}}
    files: dict[str, dict] = {}
    for length in lengths:
        name = f"instances_{length}.jsonl"
        path = out_path / name
        instance_ids: list[str] = []
        with path.open("w", encoding="utf-8") as f:
            for qa in chosen:
                gold_docs = []
                for doc_id in qa.gold_doc_ids:
                    if doc_id not in documents:
                        raise SynthError(f"qa {qa.qa_id!r} references unknown gold document {doc_id!r}")
                    gold_docs.append(documents[doc_id])
                plan = plan_insertion(
                    qa, gold_docs, distractors, target=length, seed=derive_seed(seed, qa.qa_id), max_docs=max_docs
                )
                instance = build_instance(
                    qa, plan, store, counter,
                    instance_id=f"{qa.qa_id}__L{length}",
                )
                if plan.warnings:
                    suite_warnings[instance.instance_id] = list(plan.warnings)
                instance_ids.append(instance.instance_id)
                f.write(json.dumps(instance_to_dict(instance), ensure_ascii=False, sort_keys=True) + "\n")
        files[str(length)] = {
            "path": name,
            "sha256": hashlib.sha256(path.read_bytes()).hexdigest(),
            "instance_ids": instance_ids,
        }

    manifest = {
        "suite_seed": seed,
        "lengths": list(lengths),
        "per_length_count": per_length_count,
        "max_docs": max_docs,
        "counter_scheme": counter.scheme,
        "shuffle_algorithm": SHUFFLE_ALGORITHM,
        "separator": SEPARATOR_NOTE,
        "qa_ids": [qa.qa_id for qa in chosen],
        "files": files,
        "warnings": suite_warnings,
    }
    (out_path / "manifest.json").write_text(
        json.dumps(manifest, ensure_ascii=False, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    return manifest


def load_qa_file(path: str | Path, counter: TokenCounter) -> tuple[list[QaRecord], dict[str, Document]]:
    """Read QA JSONL: {id, question, answers[], gold_docs:[{id,title,text}], source}."""
    records: list[QaRecord] = []
    documents: dict[str, Document] = {}
    with Path(path).open("r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            gold_ids = []
            for doc in rec["gold_docs"]:
                doc_id = str(doc["id"])
                gold_ids.append(doc_id)
                if doc_id in documents:
                    if documents[doc_id].body != doc["text"]:
                        raise SynthError(f"gold document {doc_id!r} redefined with different text")
                else:
                    documents[doc_id] = make_document(doc_id, doc["text"], counter, title=doc.get("title"))
            records.append(
                QaRecord(
                    qa_id=str(rec["id"]),
                    question=rec["question"],
                    gold_answers=tuple(rec["answers"]),
                    gold_doc_ids=tuple(gold_ids),
                    source=rec.get("source", "other"),
                )
            )
    return records, documents


def load_distractor_file(path: str | Path, counter: TokenCounter) -> list[Document]:
    """Read distractor JSONL: {id, title, text}."""
    docs: list[Document] = []
    with Path(path).open("r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            docs.append(make_document(str(rec["id"]), rec["text"], counter, title=rec.get("title")))
    return docs


def read_instances(path: str | Path) -> list[LongContextInstance]:
    instances = []
    with Path(path).open("r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                instances.append(instance_from_dict(json.loads(line)))
    return instances
