"""Run configuration: one structured YAML file, overridable by CLI flags.

Precedence is reproducibility-first: config file beats built-in defaults,
CLI flags beat the config file, and environment variables configure nothing
except live-endpoint auth. Budget validation runs on every load so a bad
split fails before any work starts.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import yaml

from .baselines import RagConfig
from .budget import BudgetConfig, TokenCounter, counter_from_scheme, validate_budget
from .protocol import K_MAX_DEFAULT, SamplingConfig, StopPolicy
from .retrieval import DEFAULT_B, DEFAULT_K1, DEFAULT_UNIT_TOKENS
from .rewards import RewardWeights


@dataclass(frozen=True)
class RetrievalConfig:
    unit_tokens: int = DEFAULT_UNIT_TOKENS
    k1: float = DEFAULT_K1
    b: float = DEFAULT_B
    scope: str = "full"  # full | prefix

    def __post_init__(self) -> None:
        if self.scope not in ("full", "prefix"):
            raise ValueError(f"retrieval.scope must be 'full' or 'prefix', got {self.scope!r}")


@dataclass(frozen=True)
class RunConfig:
    budgets: BudgetConfig = BudgetConfig(query=1000, retrieved=2000, recurrent=5000, memory=1000, reserve=1000)
    total_input_budget: int = 10000
    tokenizer_scheme: str = "whitespace-approx"
    retrieval: RetrievalConfig = RetrievalConfig()
    rag: RagConfig = RagConfig()
    weights: RewardWeights = RewardWeights()
    sampling: SamplingConfig = SamplingConfig()
    stop_threshold: int = 1
    k_max: int = K_MAX_DEFAULT

    @property
    def counter(self) -> TokenCounter:
        return counter_from_scheme(self.tokenizer_scheme)

    @property
    def stop_policy(self) -> StopPolicy:
        return StopPolicy(self.stop_threshold)


def _section(data: dict, name: str) -> dict:
    value = data.get(name, {})
    if value is None:
        return {}
    if not isinstance(value, dict):
        raise ValueError(f"config section {name!r} must be a mapping")
    return value


def load_config(path: str | Path | None = None) -> RunConfig:
    """Build a validated RunConfig from a YAML file (defaults when path is None)."""
    data: dict = {}
    if path is not None:
        with Path(path).open("r", encoding="utf-8") as f:
            data = yaml.safe_load(f) or {}

    defaults = RunConfig()
    budget = _section(data, "budget")
    budgets = BudgetConfig(
        query=budget.get("query", defaults.budgets.query),
        retrieved=budget.get("retrieved", defaults.budgets.retrieved),
        recurrent=budget.get("recurrent", defaults.budgets.recurrent),
        memory=budget.get("memory", defaults.budgets.memory),
        reserve=budget.get("reserve", defaults.budgets.reserve),
        max_generation=budget.get("max_generation", defaults.budgets.max_generation),
        retrieval_unit=budget.get("retrieval_unit", defaults.budgets.retrieval_unit),
    )
    total = data.get("total_input_budget", budgets.input_total)
    validate_budget(budgets, total)

    tokenizer = _section(data, "tokenizer")
    retrieval = _section(data, "retrieval")
    rag = _section(data, "rag")
    rewards = _section(data, "rewards")
    sampling = _section(data, "sampling")
    protocol = _section(data, "protocol")

    return RunConfig(
        budgets=budgets,
        total_input_budget=total,
        tokenizer_scheme=tokenizer.get("scheme", defaults.tokenizer_scheme),
        retrieval=RetrievalConfig(
            unit_tokens=retrieval.get("unit_tokens", budgets.retrieval_unit),
            k1=retrieval.get("k1", defaults.retrieval.k1),
            b=retrieval.get("b", defaults.retrieval.b),
            scope=retrieval.get("scope", defaults.retrieval.scope),
        ),
        rag=RagConfig(
            unit_tokens=rag.get("unit_tokens", defaults.rag.unit_tokens),
            top_k=rag.get("top_k", defaults.rag.top_k),
            context_cap=rag.get("context_cap", defaults.rag.context_cap),
            max_new_tokens=rag.get("max_new_tokens", defaults.budgets.max_generation),
        ),
        weights=RewardWeights(
            alpha_gt=rewards.get("alpha_gt", defaults.weights.alpha_gt),
            alpha_early=rewards.get("alpha_early", defaults.weights.alpha_early),
            alpha_call=rewards.get("alpha_call", defaults.weights.alpha_call),
            alpha_mem=rewards.get("alpha_mem", defaults.weights.alpha_mem),
            gamma=rewards.get("gamma", defaults.weights.gamma),
        ),
        sampling=SamplingConfig(
            temperature=sampling.get("temperature", defaults.sampling.temperature),
            top_p=sampling.get("top_p", defaults.sampling.top_p),
        ),
        stop_threshold=protocol.get("stop_threshold", defaults.stop_threshold),
        k_max=protocol.get("k_max", defaults.k_max),
    )


def config_snapshot(config: RunConfig) -> dict:
    """Complete, environment-independent dump for run manifests."""
    return {
        "budget": {
            "query": config.budgets.query,
            "retrieved": config.budgets.retrieved,
            "recurrent": config.budgets.recurrent,
            "memory": config.budgets.memory,
            "reserve": config.budgets.reserve,
            "max_generation": config.budgets.max_generation,
            "retrieval_unit": config.budgets.retrieval_unit,
        },
        "total_input_budget": config.total_input_budget,
        "tokenizer": {"scheme": config.tokenizer_scheme},
        "retrieval": {
            "unit_tokens": config.retrieval.unit_tokens,
            "k1": config.retrieval.k1,
            "b": config.retrieval.b,
            "scope": config.retrieval.scope,
        },
        "rag": {
            "unit_tokens": config.rag.unit_tokens,
            "top_k": config.rag.top_k,
            "context_cap": config.rag.context_cap,
            "max_new_tokens": config.rag.max_new_tokens,
        },
        "rewards": {
            "alpha_gt": config.weights.alpha_gt,
            "alpha_early": config.weights.alpha_early,
            "alpha_call": config.weights.alpha_call,
            "alpha_mem": config.weights.alpha_mem,
            "gamma": config.weights.gamma,
        },
        "sampling": {"temperature": config.sampling.temperature, "top_p": config.sampling.top_p},
        "protocol": {"stop_threshold": config.stop_threshold, "k_max": config.k_max},
    }
