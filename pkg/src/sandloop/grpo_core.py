"""Reward composition, group-relative advantages, and the policy objective.

Everything here is exact scalar arithmetic over recorded trajectories; no
gradients, no parameter updates.  The composition rule is

    r = result * (1 + 0.5 * additional) + 0.5 * format

so any additional component (consistency / code / process) contributes
only when the answer is correct.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Sequence

from .judge import JudgeClient, JudgeUnavailable
from .trajectory_model import (
    ANSWER,
    THINK,
    MalformedTranscript,
    TokenEvent,
    Trajectory,
    parse_transcript,
    token_count,
)


REWARD_VARIANTS = ("consistency", "code", "process")

DEFAULT_BETA = 0.001
DEFAULT_EPSILON = 1e-8
CONSISTENCY_TAIL_CHARS = 500
NUMERIC_REL_TOL = 1e-6


class GroupTooSmall(Exception):
    pass


class EmptyGroup(Exception):
    pass


class NonFiniteLogprob(Exception):
    pass


class MaskInconsistency(Exception):
    pass


@dataclass(frozen=True)
class RewardWeights:
    additional: float = 0.5
    format: float = 0.5


@dataclass(frozen=True)
class RewardBreakdown:
    result: int
    format: int
    consistency: float = 0.0
    code: float = 0.0
    process: float = 0.0
    variant: str = "consistency"
    composed: float = 0.0
    judge_unavailable: bool = False
    rule_stage_matched: bool = False

    def to_json(self) -> dict:
        return {
            "result": self.result,
            "format": self.format,
            "consistency": self.consistency,
            "code": self.code,
            "process": self.process,
            "variant": self.variant,
            "composed": self.composed,
            "judge_unavailable": self.judge_unavailable,
            "rule_stage_matched": self.rule_stage_matched,
        }

    @staticmethod
    def from_json(obj: dict) -> "RewardBreakdown":
        return RewardBreakdown(**obj)


# --- format reward -----------------------------------------------------------

def format_reward(transcript: str) -> int:
    """1 iff the transcript is exactly (think code sandbox)* think answer.

    Whitespace-only plain runs between blocks are tolerated; any other
    stray text, including prose after the final answer, scores 0.
    """
    try:
        segments = parse_transcript(transcript)
    except MalformedTranscript:
        return 0
    kinds: list[str] = []
    for seg in segments:
        if seg.kind == "plain":
            if seg.text.strip():
                return 0
            continue
        kinds.append(seg.kind)
    if len(kinds) < 2 or kinds[-1] != ANSWER or kinds[-2] != THINK:
        return 0
    body = kinds[:-2]
    if len(body) % 3 != 0:
        return 0
    for i in range(0, len(body), 3):
        if body[i] != THINK or body[i + 1] != "code" or body[i + 2] != "sandbox_output":
            return 0
    return 1


# --- result reward -----------------------------------------------------------

_OPTION_RE = re.compile(r"^\(?([a-z])\)?\s*[.):,-]\s*\S")


def _normalize_answer(text: str) -> str:
    out = " ".join(text.strip().split()).casefold()
    return out.rstrip(".")


def _option_letter(text: str) -> str | None:
    norm = _normalize_answer(text)
    if len(norm) == 1 and norm.isalpha():
        return norm
    m = _OPTION_RE.match(norm)
    if m:
        return m.group(1)
    return None


def _numeric_value(text: str) -> float | None:
    norm = _normalize_answer(text).replace(",", "")
    norm = norm.rstrip("%")
    try:
        return float(norm)
    except ValueError:
        return None


def rule_based_match(candidate: str, truth: str) -> bool:
    """Documented normalization rules: trim/casefold, option letter, numeric."""
    c, t = _normalize_answer(candidate), _normalize_answer(truth)
    if c == t:
        return True
    c_letter, t_letter = _option_letter(candidate), _option_letter(truth)
    if c_letter and t_letter and c_letter == t_letter:
        return True
    c_num, t_num = _numeric_value(candidate), _numeric_value(truth)
    if c_num is not None and t_num is not None:
        return math.isclose(c_num, t_num, rel_tol=NUMERIC_REL_TOL, abs_tol=1e-12)
    return False


def result_reward(
    answer: str,
    ground_truth: str,
    judge: JudgeClient | None = None,
    question: str = "",
    strict: bool = False,
) -> tuple[int, dict]:
    """Two-stage scoring: rule-based compare, then judge fallback.

    Returns (score, info); info records which stage decided and whether
    the judge was unavailable (lenient mode scores 0 in that case).
    """
    if rule_based_match(answer, ground_truth):
        return 1, {"stage": "rule", "rule_stage_matched": True}
    if judge is None:
        if strict:
            raise JudgeUnavailable("no judge configured")
        return 0, {"stage": "rule", "rule_stage_matched": False, "judge_unavailable": True}
    try:
        verdict = judge.equivalence(question, answer, ground_truth)
    except JudgeUnavailable:
        if strict:
            raise
        return 0, {"stage": "judge", "rule_stage_matched": False, "judge_unavailable": True}
    return (1 if verdict.score >= 0.5 else 0), {
        "stage": "judge",
        "rule_stage_matched": False,
        "rationale": verdict.rationale,
    }


def consistency_reward(
    think: str, answer: str, judge: JudgeClient, strict: bool = False
) -> tuple[float, dict]:
    """Judge the think tail (exactly its final 500 chars) against the answer."""
    tail = think[-CONSISTENCY_TAIL_CHARS:]
    try:
        verdict = judge.consistency(tail, answer)
    except JudgeUnavailable:
        if strict:
            raise
        return 0.0, {"judge_unavailable": True}
    return verdict.score, {"rationale": verdict.rationale}


def code_reward(traj: Trajectory) -> float:
    """Fraction of this trajectory's code cells that executed ok; 0 if none."""
    execs = [r.exec for r in traj.rounds if r.code is not None and r.exec is not None]
    if not execs:
        return 0.0
    ok = sum(1 for e in execs if e.status == "ok")
    return ok / len(execs)


def process_reward(
    think: str, judge: JudgeClient, strict: bool = False
) -> tuple[float, dict]:
    """Judge pass-through over the whole think text; no local heuristic."""
    try:
        verdict = judge.process_quality(think)
    except JudgeUnavailable:
        if strict:
            raise
        return 0.0, {"judge_unavailable": True}
    return verdict.score, {"rationale": verdict.rationale}


def compose_reward(
    result: int,
    fmt: int,
    additional: float,
    weights: RewardWeights = RewardWeights(),
) -> float:
    """r = result * (1 + w_a * additional) + w_f * format."""
    return result * (1.0 + weights.additional * additional) + weights.format * fmt


def think_text(traj: Trajectory) -> str:
    return "".join(s.text for s in traj.segments if s.kind == THINK)


def score_trajectory(
    traj: Trajectory,
    ground_truth: str,
    judge: JudgeClient | None = None,
    variant: str = "consistency",
    weights: RewardWeights = RewardWeights(),
    strict: bool = False,
) -> RewardBreakdown:
    """Build the full reward breakdown for one trajectory.

    The additional component is only evaluated when the answer is correct
    (it cannot contribute otherwise, so judge calls are skipped).
    """
    if variant not in REWARD_VARIANTS:
        raise ValueError(f"unknown reward variant {variant!r}")
    fmt = format_reward(traj.transcript)
    result, info = result_reward(
        traj.answer, ground_truth, judge, question=traj.question, strict=strict
    )
    consistency = code = process = 0.0
    judge_unavailable = bool(info.get("judge_unavailable"))
    if result == 1:
        if variant == "consistency" and judge is not None:
            consistency, cinfo = consistency_reward(
                think_text(traj), traj.answer, judge, strict=strict
            )
            judge_unavailable |= bool(cinfo.get("judge_unavailable"))
        elif variant == "code":
            code = code_reward(traj)
        elif variant == "process" and judge is not None:
            process, pinfo = process_reward(think_text(traj), judge, strict=strict)
            judge_unavailable |= bool(pinfo.get("judge_unavailable"))
    additional = {"consistency": consistency, "code": code, "process": process}[variant]
    composed = compose_reward(result, fmt, additional, weights)
    return RewardBreakdown(
        result=result,
        format=fmt,
        consistency=consistency,
        code=code,
        process=process,
        variant=variant,
        composed=composed,
        judge_unavailable=judge_unavailable,
        rule_stage_matched=bool(info.get("rule_stage_matched")),
    )


# --- advantages ---------------------------------------------------------------

@dataclass(frozen=True)
class AdvantageGroup:
    """One group's rewards with their normalized advantages."""

    rewards: tuple[float, ...]
    advantages: tuple[float, ...]
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self) -> None:
        if len(self.rewards) != len(self.advantages):
            raise ValueError("rewards and advantages must align")

    @classmethod
    def from_rewards(
        cls, rewards: Sequence[float], epsilon: float = DEFAULT_EPSILON
    ) -> "AdvantageGroup":
        return cls(
            rewards=tuple(float(r) for r in rewards),
            advantages=tuple(compute_advantages(rewards, epsilon)),
            epsilon=epsilon,
        )


def compute_advantages(
    rewards: Sequence[float], epsilon: float = DEFAULT_EPSILON
) -> list[float]:
    """Group-relative advantages: (r_i - mean) / (population std + epsilon).

    An exactly uniform group short-circuits to all-zero advantages rather
    than dividing by epsilon.
    """
    g = len(rewards)
    if g < 2:
        raise GroupTooSmall(f"need at least 2 rewards, got {g}")
    mean = math.fsum(rewards) / g
    var = math.fsum((r - mean) ** 2 for r in rewards) / g
    std = math.sqrt(var)
    if std == 0.0:
        return [0.0] * g
    return [(r - mean) / (std + epsilon) for r in rewards]


# --- KL and objective ----------------------------------------------------------

def kl_per_token(event: TokenEvent, estimator: str = "k3") -> float:
    """Per-token KL(policy || ref) estimate from recorded logprobs.

    k3 = exp(delta) - delta - 1 with delta = logprob_ref - logprob_policy;
    nonnegative, zero iff the logprobs agree.  The naive estimator
    (-delta) is available behind the flag for comparison.
    """
    for lp in (event.logprob_policy, event.logprob_ref):
        if not math.isfinite(lp):
            raise NonFiniteLogprob(f"non-finite logprob {lp!r}")
    delta = event.logprob_ref - event.logprob_policy
    if estimator == "k3":
        return math.expm1(delta) - delta
    if estimator == "naive":
        return -delta
    raise ValueError(f"unknown KL estimator {estimator!r}")


@dataclass(frozen=True)
class GroupSample:
    """One prompt's rollout group: per-trajectory trainable events + advantages."""

    token_events: tuple[tuple[TokenEvent, ...], ...]
    advantages: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.token_events) != len(self.advantages):
            raise ValueError("one advantage per trajectory required")


def group_from_trajectories(
    trajectories: Sequence[Trajectory], advantages: Sequence[float]
) -> GroupSample:
    """Bridge trajectories into objective inputs, checking mask consistency."""
    events = []
    for traj in trajectories:
        trainable = tuple(e for e in traj.token_events if e.trainable)
        expected = token_count(traj)
        if len(trainable) != expected:
            raise MaskInconsistency(
                f"trajectory has {len(trainable)} trainable events, "
                f"token_count says {expected}"
            )
        events.append(trainable)
    return GroupSample(tuple(events), tuple(float(a) for a in advantages))


def grpo_objective(
    groups: Sequence[GroupSample],
    beta: float = DEFAULT_BETA,
    estimator: str = "k3",
) -> float:
    """Mean over groups of the token-normalized advantage-minus-KL sum.

    Per group:  (1 / sum_i |tau_i|) * sum_i sum_j (w_ij A_i - beta*KL_ij)
    with w_ij = exp(logprob_policy - logprob_old), which is exactly 1 in
    the fully on-policy case.  Only trainable tokens participate.
    """
    if not groups:
        raise EmptyGroup("no groups")
    values = []
    for group in groups:
        total_tokens = sum(len(ev) for ev in group.token_events)
        if total_tokens == 0:
            raise EmptyGroup("group has no trainable tokens")
        acc = 0.0
        for events, advantage in zip(group.token_events, group.advantages):
            for event in events:
                weight = math.exp(event.logprob_policy - event.logprob_old)
                acc += weight * advantage - beta * kl_per_token(event, estimator)
        values.append(acc / total_tokens)
    return math.fsum(values) / len(values)
