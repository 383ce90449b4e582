"""Verifiers, reward shaping, group advantages, and SFT export."""

import random

import pytest

from infmem.backend import ScriptedBackend
from infmem.budget import WHITESPACE_COUNTER
from infmem.protocol import MemoryState, StepRecord, StopPolicy, Trajectory, run_episode
from infmem.rewards import (
    RewardWeights,
    SftFilters,
    compute_reward,
    dialogue_turns,
    early_stop_reward,
    export_sft,
    first_sufficient_step,
    group_advantages,
    outcome_reward,
    sft_dialogue_to_dict,
    verify_calls,
    verify_memory,
)

from conftest import make_instance, retrieve_line

C = WHITESPACE_COUNTER


def _step(i, *, call_ok=True, memory_ok=True, memory_text="m", token_count=None, write=True):
    after = MemoryState(memory_text, token_count if token_count is not None else len(memory_text.split()), i)
    return StepRecord(
        step_index=i, control=None, retrieval_entry=None, retrieved_unit_ids=(),
        prethink_prompt="p", prethink_generation="g",
        write_prompt="w" if write else None, write_generation="wg" if write else None,
        memory_before=MemoryState("", 0, i - 1), memory_after=after,
        call_ok=call_ok, memory_ok=memory_ok,
    )


def _traj(steps, stop_step=None, answer="ans", question="q"):
    final = steps[-1].memory_after if steps else MemoryState("", 0, 0)
    return Trajectory(
        instance_id="i", mode="infmem", question=question, steps=tuple(steps),
        stop_step=stop_step, stop_count_at_termination=0, final_memory=final,
        answer=answer, answer_prompt="ap", answer_generation="ag", total_latency_ms=0,
    )


def test_verify_calls():
    assert verify_calls(_traj([_step(1), _step(2)])) == 1
    assert verify_calls(_traj([_step(1), _step(2, call_ok=False)])) == 0
    assert verify_calls(_traj([])) == 1  # vacuous truth


def test_verify_memory():
    assert verify_memory(_traj([_step(1), _step(2)]), 10) == 1
    assert verify_memory(_traj([_step(1, memory_ok=False)]), 10) == 0


def test_verify_memory_recounts_stored_text():
    # The stored token_count lies; the recount oracle must catch it.
    lying = _step(1, memory_text=" ".join(["t"] * 30), token_count=5)
    assert verify_memory(_traj([lying]), 10) == 0


def test_verify_memory_ignores_non_write_steps():
    stop_step = _step(2, write=False, memory_text=" ".join(["t"] * 30))
    assert verify_memory(_traj([_step(1), stop_step]), 10) == 1


def test_first_sufficient_step_scripted():
    traj = _traj([_step(1), _step(2), _step(3)], question="q?")
    evaluator = ScriptedBackend({"i": {"answer": ["wrong", "right", "right"]}})
    assert first_sufficient_step(traj, evaluator, ["right"]) == 2


def test_first_sufficient_step_none_when_never_correct():
    traj = _traj([_step(1), _step(2)])
    evaluator = ScriptedBackend({"i": {"answer": ["wrong", "also wrong"]}})
    assert first_sufficient_step(traj, evaluator, ["right"]) is None


def test_first_sufficient_step_is_minimum_over_probes():
    traj = _traj([_step(1), _step(2), _step(3), _step(4)])
    evaluator = ScriptedBackend({"i": {"answer": ["no", "yes", "no", "yes"]}})
    got = first_sufficient_step(traj, evaluator, ["yes"])
    # Oracle: probing all steps independently, the minimum correct index.
    expected = min(i for i, a in enumerate(["no", "yes", "no", "yes"], start=1) if a == "yes")
    assert got == expected == 2


def test_early_stop_reward_table():
    assert early_stop_reward(3, 2, 0.9) == pytest.approx(1.0)  # d = 1: immediate stop
    assert early_stop_reward(2, 1, 0.5) == pytest.approx(1.0)  # d = 1 regardless of gamma
    assert early_stop_reward(4, 2, 0.8) == pytest.approx(0.8)  # d = 2
    assert early_stop_reward(6, 2, 0.8) == pytest.approx(0.8 ** 3)  # d = 4


def test_early_stop_reward_degenerate_cases():
    assert early_stop_reward(None, 2, 0.9) == 0.0  # never stopped
    assert early_stop_reward(3, None, 0.9) == 0.0  # never sufficient
    assert early_stop_reward(2, 2, 0.9) == 0.0  # d = 0
    assert early_stop_reward(1, 3, 0.9) == 0.0  # stopped before sufficiency


def test_early_stop_reward_strictly_decreasing_and_peaked_at_one():
    gamma = 0.7
    values = [early_stop_reward(1 + d, 1, gamma) for d in range(1, 8)]
    assert values[0] == 1.0
    assert all(a > b for a, b in zip(values, values[1:]))
    assert all(v < 1.0 for v in values[1:])


def test_early_stop_reward_gamma_validation():
    with pytest.raises(ValueError):
        early_stop_reward(2, 1, 1.0)
    with pytest.raises(ValueError):
        early_stop_reward(2, 1, 0.0)


def test_outcome_reward_weighted_sum():
    w = RewardWeights(alpha_gt=1.0, alpha_early=0.2, alpha_call=0.1, alpha_mem=0.1, gamma=0.9)
    assert outcome_reward(1, 1.0, 1, 1, w).total == pytest.approx(1.4)
    assert outcome_reward(0, 0.0, 0, 0, w).total == 0.0
    assert outcome_reward(1, 0.64, 1, 0, w).total == pytest.approx(1.228, abs=1e-12)


def test_outcome_reward_range_checks():
    w = RewardWeights()
    with pytest.raises(ValueError):
        outcome_reward(2, 0.0, 0, 0, w)
    with pytest.raises(ValueError):
        outcome_reward(1, 1.5, 0, 0, w)


def test_reward_weights_validation():
    with pytest.raises(ValueError):
        RewardWeights(gamma=1.0)
    with pytest.raises(ValueError):
        RewardWeights(alpha_gt=0, alpha_early=0, alpha_call=0, alpha_mem=0)
    with pytest.raises(ValueError):
        RewardWeights(alpha_gt=-1)


def test_group_advantages_centering():
    adv = group_advantages([1.2, 0.2, 1.2, 0.2])
    assert adv.mean == pytest.approx(0.7)
    assert adv.advantages == pytest.approx((0.5, -0.5, 0.5, -0.5))


def test_group_advantages_all_equal():
    assert group_advantages([0.3, 0.3, 0.3, 0.3]).advantages == pytest.approx((0.0,) * 4)


def test_group_advantages_requires_two():
    with pytest.raises(ValueError):
        group_advantages([1.0])


def test_group_advantages_sum_zero_and_shift_invariant():
    rng = random.Random(4)
    for _ in range(200):
        rewards = [rng.uniform(-2, 2) for _ in range(4)]
        adv = group_advantages(rewards)
        assert abs(sum(adv.advantages)) < 1e-9
        shifted = group_advantages([r + 3.7 for r in rewards])
        for a, b in zip(adv.advantages, shifted.advantages):
            assert a == pytest.approx(b, abs=1e-9)


def test_compute_reward_end_to_end(small_budgets):
    inst = make_instance(golds=("Sammy Fain",))
    script = {"ep1": {
        "prethink": [retrieve_line("w30"), "STOP"],
        "write": ["Updated memory: composed by Sammy Fain"],
        "answer": ["Sammy Fain"],
    }}
    traj = run_episode(inst, ScriptedBackend(script), small_budgets, StopPolicy(1))
    evaluator = ScriptedBackend({"ep1": {"answer": ["Sammy Fain", "Sammy Fain"]}})
    weights = RewardWeights()
    breakdown = compute_reward(traj, ["Sammy Fain"], weights, small_budgets.memory, evaluator=evaluator)
    assert breakdown.r_gt == 1 and breakdown.r_call == 1 and breakdown.r_mem == 1
    assert breakdown.t_first == 1 and breakdown.t_stop == 2
    assert breakdown.r_early == pytest.approx(1.0)  # d = 1, stopped immediately after sufficiency
    assert breakdown.total == pytest.approx(1.0 + 0.2 + 0.1 + 0.1)


# -------------------------------------------------------------- SFT export


def _mk_traj(instance_id, answer, n_steps=1, pad_tokens=0, prompt_extra=""):
    steps = []
    prev = MemoryState("", 0, 0)
    for i in range(1, n_steps + 1):
        after = MemoryState("mem", 1, i)
        steps.append(
            StepRecord(
                step_index=i, control=None, retrieval_entry=None, retrieved_unit_ids=(),
                prethink_prompt=f"plan step {i}{prompt_extra}", prethink_generation="STOP",
                write_prompt=f"write step {i} " + " ".join(["pad"] * pad_tokens),
                write_generation="Updated memory: mem",
                memory_before=prev, memory_after=after, call_ok=True, memory_ok=True,
            )
        )
        prev = after
    return Trajectory(
        instance_id=instance_id, mode="infmem", question="q", steps=tuple(steps),
        stop_step=None, stop_count_at_termination=0, final_memory=prev,
        answer=answer, answer_prompt="answer prompt", answer_generation=answer,
        total_latency_ms=0,
    )


def test_export_drops_incorrect_answers():
    trajs = [_mk_traj("good", "right"), _mk_traj("bad", "wrong")]
    golds = {"good": ["right"], "bad": ["right"]}
    kept, report = export_sft(trajs, golds, SftFilters(require_em=True))
    assert [d.instance_id for d in kept] == ["good"]
    reasons = {r["instance_id"]: r["reason"] for r in report}
    assert reasons["bad"] == "em"


def test_export_masks_only_assistant_turns():
    kept, _ = export_sft([_mk_traj("a", "right")], {"a": ["right"]})
    dialogue = kept[0]
    for idx in dialogue.response_turn_indices:
        assert dialogue.turns[idx][0] == "assistant"
    record = sft_dialogue_to_dict(dialogue)
    assert record["mask_roles"] == ["assistant"]
    assert record["meta"]["em"] == 1


def test_export_length_cap():
    # Spec sizes: a ~29k-token dialogue passes a 32k cap, a ~40k one does not.
    small = _mk_traj("small", "right", n_steps=1, pad_tokens=29_000)
    large = _mk_traj("large", "right", n_steps=1, pad_tokens=40_000)
    kept, report = export_sft(
        [small, large], {"small": ["right"], "large": ["right"]},
        SftFilters(require_em=True, max_dialogue_tokens=32_000),
    )
    assert [d.instance_id for d in kept] == ["small"]
    assert {r["instance_id"]: r["reason"] for r in report}["large"] == "length"


def test_export_leak_filter_checks_prompt_turns_only():
    leaky = _mk_traj("leaky", "right", prompt_extra=" GOLD right")
    clean = _mk_traj("clean", "right")
    kept, report = export_sft(
        [leaky, clean], {"leaky": ["right"], "clean": ["right"]},
        SftFilters(require_em=True, leak_patterns=("GOLD right",)),
    )
    assert [d.instance_id for d in kept] == ["clean"]
    assert {r["instance_id"]: r["reason"] for r in report}["leaky"] == "leak"
    # Assistant turns may contain the string; only prompt turns disqualify.
    for dialogue in kept:
        for role, text in dialogue.turns:
            if role != "assistant":
                assert "GOLD right" not in text


def test_export_without_em_requirement_keeps_wrong_answers():
    kept, _ = export_sft([_mk_traj("bad", "wrong")], {"bad": ["right"]}, SftFilters(require_em=False))
    assert len(kept) == 1
    assert kept[0].em == 0


def test_dialogue_turn_order():
    turns = dialogue_turns(_mk_traj("a", "right", n_steps=2))
    roles = [r for r, _ in turns]
    assert roles == ["user", "assistant", "user", "assistant"] * 2 + ["user", "assistant"]
    assert turns[-2][1] == "answer prompt"
    assert turns[-1][1] == "right"
