"""Shared fixtures: tiny instances, scripted backends, budget profiles."""

from __future__ import annotations

import pytest

from infmem.budget import BudgetConfig, WHITESPACE_COUNTER, count_tokens
from infmem.synth import InsertionPlan, LongContextInstance, QaRecord, make_document

RETRIEVE_CALL = 'FUNCTION: retrievesearch\nARGS: {{"query": "{query}", "top_k": {top_k}}}'


def retrieve_line(query: str, top_k: int = 5) -> str:
    return RETRIEVE_CALL.format(query=query, top_k=top_k)


def make_instance(
    instance_id: str = "ep1",
    question: str = "who wrote it?",
    text: str | None = None,
    golds: tuple[str, ...] = ("Sammy Fain",),
    n_words: int = 48,
) -> LongContextInstance:
    """A minimal instance; the default text is 48 counter-words w0..w47."""
    long_text = text if text is not None else " ".join(f"w{i}" for i in range(n_words))
    tokens = count_tokens(long_text, WHITESPACE_COUNTER)
    plan = InsertionPlan(
        seed=0,
        ordered_doc_ids=("d0",),
        gold_positions=(("d0", 0),),
        target_tokens=tokens,
        planned_tokens=tokens,
    )
    return LongContextInstance(
        instance_id=instance_id,
        question=question,
        gold_answers=golds,
        long_text=long_text,
        target_tokens=tokens,
        actual_tokens=tokens,
        plan=plan,
    )


@pytest.fixture
def small_budgets() -> BudgetConfig:
    """4 chunks of 12 tokens over the default 48-word instance."""
    return BudgetConfig(query=16, retrieved=12, recurrent=12, memory=16, reserve=8, max_generation=64, retrieval_unit=6)


def make_docs(prefix: str, count: int, tokens_each: int, counter=WHITESPACE_COUNTER):
    """Distractor documents with disjoint vocabularies."""
    return [
        make_document(f"{prefix}{i:03d}", " ".join(f"{prefix}{i:03d}tok{j}" for j in range(tokens_each)), counter)
        for i in range(count)
    ]


def make_qa(qa_id: str, gold_ids: tuple[str, ...], answers: tuple[str, ...] = ("ans",), source: str = "hotpotqa") -> QaRecord:
    return QaRecord(qa_id=qa_id, question=f"question for {qa_id}?", gold_answers=answers, gold_doc_ids=gold_ids, source=source)
