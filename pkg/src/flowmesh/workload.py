"""Seeded workload generation: tenant workflow documents and arrival times.

Group A holds five agentic inference shapes (reasoning chain, retrieval
fan-in, multi-agent fan-out/fan-in, unrolled reflection, tool-call chain).
Group B adds four post-training pipelines (SFT, DPO, PPO, LoRA-SFT, each
followed by an evaluation stage). A configurable fraction of workflows share
an identical prefix operator, which is what cross-workflow dedup feeds on.

Arrivals are either constant-rate or exponentially decaying Poisson, realized
by thinning so the rate function is honored exactly in expectation.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field
from typing import Any

from .errors import ConfigError
from .identity import ContentHash, content_hash

N_TENANTS = 4
DEDUP_FRACTION = 0.5  # probability a workflow draws its prefix from the shared pool


@dataclass(frozen=True)
class ArrivalSpec:
    kind: str  # "constant" | "exp_decay"
    start_qpm: float
    end_qpm: float = 0.0

    def rate_qpm(self, t: float, horizon_s: float) -> float:
        if self.kind == "constant":
            return self.start_qpm
        frac = min(1.0, max(0.0, t / horizon_s)) if horizon_s > 0 else 0.0
        return self.start_qpm * (self.end_qpm / self.start_qpm) ** frac

    def expected_count(self, horizon_s: float) -> float:
        """Closed-form integral of the rate over [0, horizon]."""
        if self.kind == "constant":
            return self.start_qpm * horizon_s / 60.0
        r = self.end_qpm / self.start_qpm
        if r == 1.0:
            return self.start_qpm * horizon_s / 60.0
        return (self.start_qpm / 60.0) * horizon_s * (r - 1.0) / math.log(r)


@dataclass
class WorkloadBundle:
    arrivals: list[tuple[float, dict[str, Any]]]  # (t, workflow document)
    external_artifacts: dict[str, bytes] = field(default_factory=dict)


def _ext(bundle: WorkloadBundle, payload: str) -> str:
    """Register a deterministic external artifact, return its hex address."""
    data = payload.encode("utf-8")
    h = content_hash(data)
    bundle.external_artifacts[h.digest] = data
    return h.digest


def arrival_times(spec: ArrivalSpec, count: int, duration_s: float, rng: random.Random) -> list[float]:
    """Up to `count` arrival times in [0, duration), thinned Poisson."""
    if spec.start_qpm <= 0:
        raise ConfigError("arrival start rate must be positive")
    if spec.kind == "exp_decay" and spec.end_qpm <= 0:
        raise ConfigError("exp_decay end rate must be positive")
    lam_max = max(spec.start_qpm, spec.end_qpm) / 60.0
    times: list[float] = []
    t = 0.0
    while len(times) < count:
        t += rng.expovariate(lam_max)
        if t >= duration_s:
            break
        if rng.random() < spec.rate_qpm(t, duration_s) / (lam_max * 60.0):
            times.append(t)
    return times


# --------------------------------------------------------------------------
# workflow templates
# --------------------------------------------------------------------------

def _node(kind: str, model: str, params: dict, inputs: list, rclass: str) -> dict:
    return {
        "op_kind": kind,
        "model_ref": model,
        "params": params,
        "inputs": inputs,
        "resource_class": rclass,
    }


def _from(op: str, slot: int) -> dict:
    return {"from": op, "slot": slot}


def _ext_in(hex_hash: str, slot: int) -> dict:
    return {"external_hash": hex_hash, "slot": slot}


class TemplateContext:
    """Per-workflow salt plus the shared-prefix pool."""

    def __init__(self, bundle: WorkloadBundle, rng: random.Random, index: int, shared: bool):
        self.bundle = bundle
        self.rng = rng
        self.index = index
        self.shared = shared
        self.variant = rng.randrange(2)  # one draw: shared prefixes must be byte-identical

    def prefix_salt(self) -> dict:
        """Parameters for the prefix stage: drawn from a small shared pool or unique."""
        if self.shared:
            return {"corpus": f"shared-{self.variant}"}
        return {"corpus": f"wf-{self.index}"}

    def prefix_input(self, label: str) -> str:
        tag = f"shared-{label}-{self.variant}" if self.shared else f"{label}-{self.index}"
        return _ext(self.bundle, f"dataset::{tag}")

    def unique_input(self, label: str) -> str:
        return _ext(self.bundle, f"prompt::{label}-{self.index}")

    def salt(self) -> dict:
        return {"trace": f"wf-{self.index}"}


def _t_chain(ctx: TemplateContext) -> dict[str, dict]:
    prompt = ctx.unique_input("chain")
    p = ctx.salt()
    return {
        "n00": _node("inference", "llama-3.2-3b@v1", {"role": "plan", **p},
                     [_ext_in(prompt, 0)], "class_4090_24g"),
        "n01": _node("inference", "llama-3.1-8b@v1", {"role": "solve", **p},
                     [_from("n00", 0)], "class_4090_24g"),
        "n02": _node("inference", "llama-3.2-1b@v1", {"role": "summarize", **p},
                     [_from("n01", 0)], "class_4090_24g"),
    }


def _t_rag(ctx: TemplateContext) -> dict[str, dict]:
    corpus = ctx.prefix_input("rag")
    prompt = ctx.unique_input("rag")
    return {
        "n00": _node("data_prep", "prep@v0", {"stage": "retrieve", **ctx.prefix_salt()},
                     [_ext_in(corpus, 0)], "class_4090_24g"),
        "n01": _node("inference", "llama-3.2-3b@v1", {"role": "rerank", **ctx.salt()},
                     [_from("n00", 0)], "class_4090_24g"),
        "n02": _node("inference", "llama-3.1-8b@v1", {"role": "generate", **ctx.salt()},
                     [_ext_in(prompt, 0), _from("n01", 1)], "class_4090_24g"),
    }


def _t_multi_agent(ctx: TemplateContext) -> dict[str, dict]:
    prompt = ctx.unique_input("agents")
    p = ctx.salt()
    nodes = {
        "n00": _node("inference", "llama-3.1-8b@v1", {"role": "plan", **p},
                     [_ext_in(prompt, 0)], "class_4090_24g"),
        "n04": _node("inference", "llama-3.2-3b@v1", {"role": "aggregate", **p},
                     [_from("n01", 0), _from("n02", 1), _from("n03", 2)], "class_4090_24g"),
    }
    for i in (1, 2, 3):
        nodes[f"n0{i}"] = _node(
            "inference", "llama-3.2-3b@v1", {"role": f"agent-{i}", **p},
            [_from("n00", 0)], "class_4090_24g",
        )
    return nodes


def _t_reflect(ctx: TemplateContext) -> dict[str, dict]:
    prompt = ctx.unique_input("reflect")
    p = ctx.salt()
    return {
        "n00": _node("inference", "llama-3.2-3b@v1", {"role": "draft", **p},
                     [_ext_in(prompt, 0)], "class_4090_24g"),
        "n01": _node("inference", "llama-3.2-3b@v1", {"role": "critique", **p},
                     [_from("n00", 0)], "class_4090_24g"),
        "n02": _node("inference", "llama-3.2-3b@v1", {"role": "revise", **p},
                     [_from("n01", 0)], "class_4090_24g"),
        "n03": _node("eval", "llama-3.2-1b@v1", {"suite": "judge", **p},
                     [_from("n02", 0)], "class_4090_24g"),
    }


def _t_tool_chain(ctx: TemplateContext) -> dict[str, dict]:
    prompt = ctx.unique_input("tool")
    p = ctx.salt()
    return {
        "n00": _node("inference", "llama-3.2-3b@v1", {"role": "reason", **p},
                     [_ext_in(prompt, 0)], "class_4090_24g"),
        "n01": _node("tool_call", "tools@v0", {"tool": "search", **p},
                     [_from("n00", 0)], "class_4090_24g"),
        "n02": _node("inference", "llama-3.2-3b@v1", {"role": "integrate", **p},
                     [_from("n01", 0)], "class_4090_24g"),
    }


def _t_sft(ctx: TemplateContext) -> dict[str, dict]:
    data = ctx.prefix_input("sft")
    return {
        "n00": _node("data_prep", "prep@v0", {"stage": "pack", **ctx.prefix_salt()},
                     [_ext_in(data, 0)], "class_4090_24g"),
        "n01": _node("sft", "llama-3.2-3b@v1", {"epochs": 1, "lr": 0.0002, **ctx.prefix_salt()},
                     [_from("n00", 0)], "class_4090_48g"),
        "n02": _node("eval", "llama-3.2-3b@v1", {"suite": "holdout", **ctx.salt()},
                     [_from("n01", 0)], "class_4090_24g"),
    }


def _t_dpo(ctx: TemplateContext) -> dict[str, dict]:
    pairs = ctx.prefix_input("dpo")
    return {
        "n00": _node("data_prep", "prep@v0", {"stage": "pairs", **ctx.prefix_salt()},
                     [_ext_in(pairs, 0)], "class_4090_24g"),
        "n01": _node("dpo", "llama-3.2-3b@v1", {"beta": 0.1, "lr": 0.0001, **ctx.prefix_salt()},
                     [_from("n00", 0)], "class_4090_48g"),
        "n02": _node("eval", "llama-3.2-3b@v1", {"suite": "prefs", **ctx.salt()},
                     [_from("n01", 0)], "class_4090_24g"),
    }


def _t_ppo(ctx: TemplateContext) -> dict[str, dict]:
    prompts = ctx.prefix_input("ppo")
    p = ctx.salt()
    return {
        "n00": _node("inference", "llama-3.1-8b@v1", {"role": "rollout", **ctx.prefix_salt()},
                     [_ext_in(prompts, 0)], "class_4090_24g"),
        "n01": _node("inference", "llama-3.2-3b@v1", {"role": "reward", **ctx.prefix_salt()},
                     [_from("n00", 0)], "class_4090_24g"),
        "n02": _node("data_prep", "prep@v0", {"stage": "aggregate", **p},
                     [_from("n01", 0)], "class_4090_24g"),
        "n03": _node("ppo", "llama-3.1-8b@v1", {"kl": 0.05, "lr": 0.00005, **p},
                     [_from("n02", 0)], "class_h100_94g"),
        "n04": _node("eval", "llama-3.2-3b@v1", {"suite": "rl", **p},
                     [_from("n03", 0)], "class_4090_24g"),
    }


def _t_lora_sft(ctx: TemplateContext) -> dict[str, dict]:
    data = ctx.prefix_input("lora")
    return {
        "n00": _node("data_prep", "prep@v0", {"stage": "pack", **ctx.prefix_salt()},
                     [_ext_in(data, 0)], "class_4090_24g"),
        "n01": _node("sft", "llama-3.2-1b@v1", {"lora": True, "rank": 16, "lr": 0.0002,
                                                **ctx.prefix_salt()},
                     [_from("n00", 0)], "class_4090_24g"),
        "n02": _node("eval", "llama-3.2-1b@v1", {"suite": "holdout", **ctx.salt()},
                     [_from("n01", 0)], "class_4090_24g"),
    }


GROUP_A = [_t_chain, _t_rag, _t_multi_agent, _t_reflect, _t_tool_chain]
GROUP_B = GROUP_A + [_t_sft, _t_dpo, _t_ppo, _t_lora_sft]


def generate_workload(
    group: str,
    count: int,
    arrival: ArrivalSpec,
    seed: int,
    duration_s: float = 3600.0,
    dedup_fraction: float = DEDUP_FRACTION,
) -> WorkloadBundle:
    """Deterministic timed workflow documents for one scenario."""
    if count <= 0:
        raise ConfigError("workload count must be positive")
    if group not in ("A", "B"):
        raise ConfigError(f"unknown workload group {group!r}")
    templates = GROUP_A if group == "A" else GROUP_B
    rng = random.Random(seed)
    bundle = WorkloadBundle(arrivals=[])
    times = arrival_times(arrival, count, duration_s, rng)
    for index, t in enumerate(times):
        template = templates[rng.randrange(len(templates))]
        shared = rng.random() < dedup_fraction
        ctx = TemplateContext(bundle, rng, index, shared)
        doc = {
            "workflow_id": f"wf-{index:04d}",
            "tenant_id": f"tenant-{rng.randrange(N_TENANTS)}",
            "nodes": template(ctx),
        }
        bundle.arrivals.append((t, doc))
    return bundle
