"""Instance synthesis: seeded plans, document-boundary packing, suites."""

import json
import random

import pytest

from infmem.budget import WHITESPACE_COUNTER, count_tokens
from infmem.synth import (
    QaRecord,
    SynthError,
    build_instance,
    make_document,
    plan_insertion,
    seeded_shuffle,
    synthesize_suite,
)

from conftest import make_docs, make_qa

C = WHITESPACE_COUNTER


def _fixture_pool():
    g1 = make_document("g1", " ".join(["goldone"] * 100), C)
    g2 = make_document("g2", " ".join(["goldtwo"] * 120), C)
    pool = make_docs("dist", 6, 200)
    qa = make_qa("q1", ("g1", "g2"))
    return qa, [g1, g2], pool


def test_plan_example_three_distractors_fit():
    qa, golds, pool = _fixture_pool()
    plan = plan_insertion(qa, golds, pool, target=1000, seed=7)
    gold_ids = [d for d, _ in plan.gold_positions]
    assert sorted(gold_ids) == ["g1", "g2"]
    assert len(plan.ordered_doc_ids) - 2 == 3
    assert plan.planned_tokens <= 1000
    # Feasibility oracle: no excluded pool doc fits on top of the plan.
    included = set(plan.ordered_doc_ids)
    for doc in pool:
        if doc.doc_id not in included:
            assert plan.planned_tokens + doc.token_count > 1000


def test_gold_overflow_keeps_golds_only():
    qa, golds, pool = _fixture_pool()
    plan = plan_insertion(qa, golds, pool, target=150, seed=7)
    assert plan.planned_tokens == 220
    assert plan.overflow
    assert "gold-tokens-exceed-target" in plan.warnings
    assert sorted(plan.ordered_doc_ids) == ["g1", "g2"]


def test_plan_deterministic_for_fixed_seed():
    qa, golds, pool = _fixture_pool()
    a = plan_insertion(qa, golds, pool, target=1000, seed=7)
    b = plan_insertion(qa, golds, pool, target=1000, seed=7)
    assert a.ordered_doc_ids == b.ordered_doc_ids
    c = plan_insertion(qa, golds, pool, target=1000, seed=8)
    assert a.ordered_doc_ids != c.ordered_doc_ids  # different seed, different order


def test_duplicate_doc_ids_rejected():
    qa, golds, pool = _fixture_pool()
    with pytest.raises(SynthError, match="duplicate"):
        plan_insertion(qa, golds, pool + [pool[0]], target=1000, seed=7)


def test_empty_distractor_pool_warns():
    qa, golds, _ = _fixture_pool()
    plan = plan_insertion(qa, golds, [], target=1000, seed=7)
    assert "empty-distractor-pool" in plan.warnings
    assert sorted(plan.ordered_doc_ids) == ["g1", "g2"]


def test_max_docs_caps_distractors():
    qa, golds, pool = _fixture_pool()
    plan = plan_insertion(qa, golds, pool, target=10_000, seed=7, max_docs=4)
    assert len(plan.ordered_doc_ids) == 4
    assert {d for d, _ in plan.gold_positions} == {"g1", "g2"}


def test_seeded_shuffle_is_a_permutation():
    items = list(range(100))
    out = seeded_shuffle(items, 1234)
    assert sorted(out) == items
    assert out == seeded_shuffle(items, 1234)


def test_build_instance_record_format():
    qa, golds, pool = _fixture_pool()
    plan = plan_insertion(qa, golds, pool, target=450, seed=3)
    store = {d.doc_id: d for d in golds + pool}
    inst = build_instance(qa, plan, store, C)
    assert "Document 0: " in inst.long_text
    assert "Document 1: " in inst.long_text
    assert inst.long_text.index("Document 0: ") < inst.long_text.index("Document 1: ")
    assert inst.actual_tokens == count_tokens(inst.long_text, C)
    # Rebuild is byte-identical.
    assert build_instance(qa, plan, store, C).long_text == inst.long_text


def test_build_instance_gold_bodies_appear_exactly_once():
    qa, golds, pool = _fixture_pool()
    plan = plan_insertion(qa, golds, pool, target=1000, seed=7)
    store = {d.doc_id: d for d in golds + pool}
    inst = build_instance(qa, plan, store, C)
    for doc in golds:
        assert inst.long_text.count(doc.body) == 1


def test_build_instance_missing_doc_names_id():
    qa, golds, pool = _fixture_pool()
    plan = plan_insertion(qa, golds, pool, target=1000, seed=7)
    store = {d.doc_id: d for d in golds}  # distractors missing
    with pytest.raises(SynthError, match="dist"):
        build_instance(qa, plan, store, C)


def test_plan_maximality_on_random_pools():
    rng = random.Random(99)
    for trial in range(25):
        golds = [make_document(f"g{i}", " ".join([f"g{i}w"] * rng.randint(20, 80)), C) for i in range(rng.randint(1, 3))]
        pool = [
            make_document(f"p{i}", " ".join([f"p{i}w"] * rng.randint(30, 200)), C)
            for i in range(rng.randint(0, 12))
        ]
        target = rng.randint(100, 1500)
        qa = make_qa("qx", tuple(d.doc_id for d in golds))
        plan = plan_insertion(qa, golds, pool, target=target, seed=trial)
        included = set(plan.ordered_doc_ids)
        for doc in golds:
            assert doc.doc_id in included
        assert plan.overflow or plan.planned_tokens <= target
        for doc in pool:
            if doc.doc_id not in included:
                assert plan.planned_tokens + doc.token_count > target


def _suite_inputs(n_qa=4, pool_docs=400, pool_tokens=160):
    golds = {}
    qa_records = []
    for i in range(n_qa):
        doc = make_document(f"gold{i}", " ".join([f"needle{i}token{j}" for j in range(40)]), C)
        golds[doc.doc_id] = doc
        qa_records.append(make_qa(f"qa{i}", (doc.doc_id,)))
    pool = make_docs("pool", pool_docs, pool_tokens)
    return qa_records, golds, pool


def test_suite_reuses_question_set_across_lengths(tmp_path):
    qa_records, golds, pool = _suite_inputs()
    manifest = synthesize_suite(qa_records, golds, pool, [28672, 57344], seed=7, per_length_count=4, counter=C, out_dir=tmp_path)
    assert set(manifest["files"]) == {"28672", "57344"}
    ids_short = manifest["files"]["28672"]["instance_ids"]
    ids_long = manifest["files"]["57344"]["instance_ids"]
    assert len(ids_short) == len(ids_long) == 4
    assert [i.split("__")[0] for i in ids_short] == [i.split("__")[0] for i in ids_long]


def test_suite_per_length_count(tmp_path):
    qa_records, golds, pool = _suite_inputs(n_qa=10, pool_docs=30, pool_tokens=40)
    manifest = synthesize_suite(qa_records, golds, pool, [400], seed=1, per_length_count=8, counter=C, out_dir=tmp_path)
    assert len(manifest["files"]["400"]["instance_ids"]) == 8


def test_suite_checksums_stable_across_reruns(tmp_path):
    qa_records, golds, pool = _suite_inputs(n_qa=3, pool_docs=40, pool_tokens=50)
    m1 = synthesize_suite(qa_records, golds, pool, [500, 900], seed=42, per_length_count=3, counter=C, out_dir=tmp_path / "a")
    m2 = synthesize_suite(qa_records, golds, pool, [500, 900], seed=42, per_length_count=3, counter=C, out_dir=tmp_path / "b")
    assert {k: v["sha256"] for k, v in m1["files"].items()} == {k: v["sha256"] for k, v in m2["files"].items()}
    assert (tmp_path / "a" / "manifest.json").read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()


def test_suite_scaling_same_golds_and_monotone_actual(tmp_path):
    # Uniform distractor sizes: the greedy packing grows monotonically with
    # the target, so actual token counts must too.
    qa_records, golds, pool = _suite_inputs(n_qa=3, pool_docs=80, pool_tokens=50)
    synthesize_suite(qa_records, golds, pool, [600, 1200, 2400], seed=5, per_length_count=3, counter=C, out_dir=tmp_path)
    by_length = {}
    for length in (600, 1200, 2400):
        with (tmp_path / f"instances_{length}.jsonl").open() as f:
            by_length[length] = [json.loads(line) for line in f]
    for i in range(3):
        golds_per_len = [sorted(d for d, _ in by_length[L][i]["plan"]["gold_positions"]) for L in (600, 1200, 2400)]
        assert golds_per_len[0] == golds_per_len[1] == golds_per_len[2]
        actuals = [by_length[L][i]["actual_tokens"] for L in (600, 1200, 2400)]
        assert actuals[0] <= actuals[1] <= actuals[2]


def test_suite_rejects_bad_lengths(tmp_path):
    qa_records, golds, pool = _suite_inputs(n_qa=2, pool_docs=5, pool_tokens=20)
    with pytest.raises(SynthError, match="ascending"):
        synthesize_suite(qa_records, golds, pool, [900, 500], seed=1, per_length_count=2, counter=C, out_dir=tmp_path)


def test_qa_record_validation():
    with pytest.raises(SynthError):
        QaRecord("q", "question", (), ("d",), "other")
    with pytest.raises(SynthError):
        QaRecord("q", "question", ("a",), (), "other")
    with pytest.raises(SynthError):
        QaRecord("q", "question", ("a",), ("d",), "not-a-source")


def test_planned_tokens_monotone_in_target_random_pools():
    # Body-token packing grows with the target even on mixed-size pools
    # (rendered header overhead is excluded; see the uniform-pool test for
    # actual_tokens monotonicity).
    rng = random.Random(314)
    for trial in range(200):
        gold = make_document("g0", " ".join(["g"] * rng.randint(5, 40)), C)
        pool = [
            make_document(f"p{i}", " ".join([f"p{i}"] * rng.randint(1, 60)), C)
            for i in range(rng.randint(0, 10))
        ]
        qa = make_qa("q", ("g0",))
        t1 = rng.randint(10, 150)
        t2 = t1 + rng.randint(1, 60)
        p1 = plan_insertion(qa, [gold], pool, target=t1, seed=trial)
        p2 = plan_insertion(qa, [gold], pool, target=t2, seed=trial)
        assert p2.planned_tokens >= p1.planned_tokens, (trial, t1, t2)


def test_instance_record_roundtrip_with_unicode():
    from infmem.synth import instance_from_dict, instance_to_dict

    gold = make_document("g0", "señor Türkçe 北京 naïve façade answer-token", C, title="Tîtle")
    pool = make_docs("d", 3, 20)
    qa = QaRecord("q0", "¿dónde está?", ("señor",), ("g0",), "squad")
    plan = plan_insertion(qa, [gold], pool, target=60, seed=5)
    store = {d.doc_id: d for d in [gold] + pool}
    inst = build_instance(qa, plan, store, C)
    assert instance_from_dict(instance_to_dict(inst)) == inst
    assert inst.long_text.count(gold.body) == 1


def test_load_qa_file_rejects_conflicting_gold_redefinition(tmp_path):
    import json

    from infmem.synth import load_qa_file

    path = tmp_path / "qa.jsonl"
    lines = [
        {"id": "a", "question": "q1", "answers": ["x"],
         "gold_docs": [{"id": "shared", "title": "t", "text": "version one"}], "source": "squad"},
        {"id": "b", "question": "q2", "answers": ["y"],
         "gold_docs": [{"id": "shared", "title": "t", "text": "version two"}], "source": "squad"},
    ]
    path.write_text("".join(json.dumps(l) + "\n" for l in lines))
    with pytest.raises(SynthError, match="redefined"):
        load_qa_file(path, C)
