"""Multi-round rollout loop against a pluggable policy and the sandbox.

The loop samples tokens with adaptive temperature (text at 1.0, code at
0.0, switching exclusive of the <code> open tag and inclusive of the
</code> close tag), feeds every closed code segment through the sandbox,
appends the wrapped output as non-trainable context, and terminates on
answer, detected repetition, or the dialogue-turn cap.
"""

from __future__ import annotations

import math
import random
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

from .code_guard import GuestCode, ImageMeta
from .sandbox_exec import ExecutionResult, Limits, SandboxSupervisor
from .trajectory_model import (
    ANSWER,
    CLOSE_TAGS,
    CODE,
    CONTENT_KINDS,
    OPEN_TAGS,
    PLAIN,
    SANDBOX,
    THINK,
    DEFAULT_TOKENIZER,
    PromptConfig,
    Round,
    RoundExec,
    Segment,
    TokenEvent,
    Tokenizer,
    Trajectory,
    render_system_prompt,
    render_user_prompt,
)
from .trajectory_model import _extract_fence


DEFAULT_WINDOW_LEN = 32
DEFAULT_THRESHOLD = 0.5
DEFAULT_REPETITION_PENALTY = 1.05
DEFAULT_MAX_ITERATIONS = 5
DEFAULT_MAX_TOKENS_PER_TURN = 4096
DEFAULT_GROUP_SIZE = 4

_MERSENNE_61 = (1 << 61) - 1


class PolicyFailure(Exception):
    pass


class SandboxUnavailable(Exception):
    pass


class PolicyAdapter(Protocol):
    """Produces tokens given context; must be argmax-deterministic at T=0."""

    def next_token(
        self, context: Sequence[int], temperature: float, repetition_penalty: float
    ) -> tuple[int, float] | None: ...

    def score(self, tokens: Sequence[int], params: str) -> list[float]: ...


# --- repetition detection ----------------------------------------------------

@dataclass
class _WindowEntry:
    first_start: int
    count: int
    next_allowed: int


class RepetitionStats:
    """Rolling-hash tracker for repeated fixed-length token windows.

    A window value halts generation once its non-overlapping occurrence
    count c satisfies c >= 2 and c * L > threshold * output_len.  Hash
    matches are verified against the actual tokens before counting, so
    collisions can never cause a false halt.
    """

    def __init__(
        self,
        window_len: int = DEFAULT_WINDOW_LEN,
        threshold: float = DEFAULT_THRESHOLD,
        rng: random.Random | None = None,
    ):
        if window_len < 1:
            raise ValueError("window_len must be >= 1")
        self.window_len = window_len
        self.threshold = threshold
        self.output_len = 0
        self.halted = False
        self.halted_at: int | None = None
        rng = rng or random.Random()
        self._base = rng.randrange(1 << 20, _MERSENNE_61 - 1)
        self._pow = pow(self._base, window_len - 1, _MERSENNE_61)
        self._hash = 0
        self._tokens: list[int] = []
        self._table: dict[int, list[_WindowEntry]] = {}

    def observe(self, token: int) -> str:
        """Feed one token; returns "halt" once the criterion is met."""
        if self.halted:
            return "halt"
        L = self.window_len
        self._tokens.append(token)
        self.output_len += 1
        if self.output_len > L:
            outgoing = self._tokens[self.output_len - L - 1]
            self._hash = (self._hash - outgoing * self._pow) % _MERSENNE_61
        self._hash = (self._hash * self._base + token) % _MERSENNE_61
        if self.output_len < L:
            return "continue"

        start = self.output_len - L
        window = self._tokens[start:]
        bucket = self._table.setdefault(self._hash, [])
        entry = None
        for candidate in bucket:
            stored = self._tokens[
                candidate.first_start : candidate.first_start + L
            ]
            if stored == window:  # verified match, not just a hash collision
                entry = candidate
                break
        if entry is None:
            bucket.append(_WindowEntry(start, 1, start + L))
            return "continue"
        if start >= entry.next_allowed:
            entry.count += 1
            entry.next_allowed = start + L
            if entry.count >= 2 and entry.count * L > self.threshold * self.output_len:
                self.halted = True
                self.halted_at = self.output_len
                return "halt"
        return "continue"


def detect_repetition(tokens: Sequence[int], stats: RepetitionStats) -> str:
    """Feed a whole sequence through the stats; halt short-circuits."""
    for token in tokens:
        if stats.observe(token) == "halt":
            return "halt"
    return "continue"


# --- adaptive temperature ------------------------------------------------------

_TAG_MAX_LEN = max(len(t) for t in list(OPEN_TAGS.values()) + list(CLOSE_TAGS.values()))


@dataclass
class SamplerState:
    """Temperature controller plus repetition tracking for one trajectory."""

    temperature_text: float = 1.0
    temperature_code: float = 0.0
    repetition_penalty: float = DEFAULT_REPETITION_PENALTY
    rolling: RepetitionStats = field(default_factory=RepetitionStats)
    mode: str = "text"  # "text" | "code"
    _suffix: str = ""

    def current_temperature(self) -> float:
        return self.temperature_code if self.mode == "code" else self.temperature_text

    def observe_text(self, text: str) -> None:
        """Advance the tag matcher over emitted characters."""
        for ch in text:
            self._suffix = (self._suffix + ch)[-_TAG_MAX_LEN:]
            if self.mode == "text" and self._suffix.endswith(OPEN_TAGS[CODE]):
                self.mode = "code"
            elif self.mode == "code" and self._suffix.endswith(CLOSE_TAGS[CODE]):
                self.mode = "text"


def select_temperature(state: SamplerState, last_emitted_token: str | None) -> float:
    """Temperature for the next token after observing the last emitted one."""
    if last_emitted_token:
        state.observe_text(last_emitted_token)
    return state.current_temperature()


def apply_repetition_penalty(
    logits: dict[int, float], previous: Sequence[int], penalty: float
) -> dict[int, float]:
    """Standard convention: divide positive logits, multiply negative ones."""
    if penalty == 1.0:
        return dict(logits)
    seen = set(previous)
    out = {}
    for token, logit in logits.items():
        if token in seen:
            logit = logit / penalty if logit > 0 else logit * penalty
        out[token] = logit
    return out


def choose_token(
    logits: dict[int, float], temperature: float, rng: random.Random
) -> tuple[int, float]:
    """Sample from temperature-scaled logits; argmax (lowest id ties) at T=0."""
    if not logits:
        raise PolicyFailure("empty logit table")
    if temperature == 0.0:
        token = min(logits, key=lambda t: (-logits[t], t))
        return token, 0.0
    scaled = {t: l / temperature for t, l in logits.items()}
    peak = max(scaled.values())
    weights = {t: math.exp(l - peak) for t, l in scaled.items()}
    total = sum(weights.values())
    pick = rng.random() * total
    acc = 0.0
    for token, weight in sorted(weights.items()):
        acc += weight
        if pick <= acc:
            return token, math.log(weight / total)
    token = max(weights)
    return token, math.log(weights[token] / total)


class LogitsPolicy:
    """Adapter over a logits function; applies penalty and temperature."""

    def __init__(
        self,
        logits_fn: Callable[[Sequence[int]], dict[int, float]],
        rng: random.Random | None = None,
    ):
        self.logits_fn = logits_fn
        self.rng = rng or random.Random(0)

    def next_token(
        self, context: Sequence[int], temperature: float, repetition_penalty: float
    ) -> tuple[int, float] | None:
        logits = self.logits_fn(context)
        if not logits:
            return None
        logits = apply_repetition_penalty(logits, context, repetition_penalty)
        return choose_token(logits, temperature, self.rng)

    def score(self, tokens: Sequence[int], params: str) -> list[float]:
        return [0.0] * len(tokens)


# --- scripted policy -------------------------------------------------------------

_TURN_HEADER = re.compile(r"^\[turn (\d+)(?: trajectory (\d+))?\]$")


class ScriptedPolicy:
    """Replays fixture text turn by turn; fully deterministic.

    The fixture maps dialogue-turn indices to the text the policy emits in
    that turn; per-trajectory overrides allow scripted "stochasticity"
    across a group.
    """

    def __init__(
        self,
        turns: Sequence[str],
        logprob: float = 0.0,
        tokenizer: Tokenizer = DEFAULT_TOKENIZER,
    ):
        self.turn_texts = list(turns)
        self.logprob = logprob
        self.tokenizer = tokenizer
        self._ids = [tokenizer.encode(t) for t in self.turn_texts]
        self._turn = 0
        self._pos = 0

    @classmethod
    def parse_fixture(cls, text: str) -> dict[tuple[int, int | None], str]:
        blocks: dict[tuple[int, int | None], list[str]] = {}
        current: tuple[int, int | None] | None = None
        for line in text.splitlines():
            m = _TURN_HEADER.match(line)
            if m:
                current = (int(m.group(1)), int(m.group(2)) if m.group(2) else None)
                blocks[current] = []
                continue
            if current is None:
                if line.strip() and not line.lstrip().startswith("#"):
                    raise ValueError(f"text before first [turn N] header: {line!r}")
                continue
            blocks[current].append(line)
        return {key: "\n".join(lines) for key, lines in blocks.items()}

    @classmethod
    def from_file(
        cls,
        path: str | Path,
        trajectory: int | None = None,
        logprob: float = 0.0,
        tokenizer: Tokenizer = DEFAULT_TOKENIZER,
    ) -> "ScriptedPolicy":
        blocks = cls.parse_fixture(Path(path).read_text(encoding="utf-8"))
        if not blocks:
            raise ValueError(f"no [turn N] blocks in {path}")
        max_turn = max(turn for turn, _ in blocks)
        turns = []
        for turn in range(max_turn + 1):
            override = blocks.get((turn, trajectory))
            base = blocks.get((turn, None))
            text = override if override is not None else base
            if text is None:
                raise ValueError(f"fixture {path} missing [turn {turn}]")
            turns.append(text)
        return cls(turns, logprob=logprob, tokenizer=tokenizer)

    def next_token(
        self, context: Sequence[int], temperature: float, repetition_penalty: float
    ) -> tuple[int, float] | None:
        if self._turn >= len(self._ids):
            return None
        ids = self._ids[self._turn]
        if self._pos >= len(ids):
            return None  # script exhausted mid-turn
        token = ids[self._pos]
        self._pos += 1
        return token, self.logprob

    def on_turn_complete(self) -> None:
        """Advance to the next turn block after a sandbox round-trip."""
        remainder = self._ids[self._turn][self._pos :] if self._turn < len(
            self._ids
        ) else []
        if not remainder or not self.tokenizer.decode(remainder).strip():
            self._turn += 1
            self._pos = 0

    def score(self, tokens: Sequence[int], params: str) -> list[float]:
        return [self.logprob] * len(tokens)


# --- sandbox ports -----------------------------------------------------------------

class SandboxPort(Protocol):
    def open(self, image: ImageMeta) -> str: ...
    def execute(self, session_id: str, code_text: str) -> ExecutionResult: ...
    def close(self, session_id: str) -> None: ...


class LocalSandbox:
    """In-process port over a SandboxSupervisor."""

    def __init__(self, supervisor: SandboxSupervisor, limits: Limits | None = None):
        self.supervisor = supervisor
        self.limits = limits or Limits()

    def open(self, image: ImageMeta) -> str:
        from .sandbox_exec import GuestSpawnFailure

        try:
            return self.supervisor.open_session(image, self.limits).session_id
        except GuestSpawnFailure as exc:
            raise SandboxUnavailable(str(exc)) from exc

    def execute(self, session_id: str, code_text: str) -> ExecutionResult:
        session = self.supervisor.get_session(session_id)
        return self.supervisor.execute(session, GuestCode(source=code_text), self.limits)

    def close(self, session_id: str) -> None:
        try:
            session = self.supervisor.get_session(session_id)
        except Exception:
            return
        self.supervisor.close_session(session)


class RemoteSandbox:
    """Port over the wire client; transport faults become SandboxUnavailable."""

    def __init__(self, client, limits: Limits | None = None):
        self.client = client
        self.limits = limits or Limits()

    def open(self, image: ImageMeta) -> str:
        from .sandbox_service import RemoteError, TransportError

        try:
            return self.client.open_session(image, self.limits)
        except (TransportError, RemoteError) as exc:
            raise SandboxUnavailable(str(exc)) from exc

    def execute(self, session_id: str, code_text: str) -> ExecutionResult:
        from .sandbox_service import RemoteError, TransportError

        try:
            return self.client.execute(session_id, code_text, self.limits)
        except (TransportError, RemoteError) as exc:
            raise SandboxUnavailable(str(exc)) from exc

    def close(self, session_id: str) -> None:
        try:
            self.client.close_session(session_id)
        except Exception:
            pass


# --- rollout loop ----------------------------------------------------------------------

@dataclass(frozen=True)
class RolloutLimits:
    max_iterations: int = DEFAULT_MAX_ITERATIONS
    max_tokens_per_turn: int = DEFAULT_MAX_TOKENS_PER_TURN
    group_size: int = DEFAULT_GROUP_SIZE

    def __post_init__(self) -> None:
        if min(self.max_iterations, self.max_tokens_per_turn, self.group_size) < 1:
            raise ValueError("rollout limits must be positive")


@dataclass(frozen=True)
class RolloutPrompt:
    prompt_id: str
    image: ImageMeta
    question: str
    text: str  # fully rendered model context


def build_prompt(
    prompt_id: str,
    image: ImageMeta,
    question: str,
    config: PromptConfig = PromptConfig(),
) -> RolloutPrompt:
    text = render_system_prompt(config) + "\n" + render_user_prompt(image, question)
    return RolloutPrompt(prompt_id, image, question, text)


class _TagTracker:
    """Streaming recognizer turning sampled characters into segments."""

    def __init__(self) -> None:
        self.transcript = ""
        self.segments: list[Segment] = []
        self.open_kind: str | None = None
        self.open_start = 0
        self.plain_start = 0
        self.events: list[tuple[str, str]] = []  # (event, kind), appended per feed

    def feed_char(self, ch: str) -> list[tuple[str, str]]:
        self.transcript += ch
        fired: list[tuple[str, str]] = []
        text = self.transcript
        if self.open_kind is None:
            for kind, tag in OPEN_TAGS.items():
                if text.endswith(tag):
                    if kind == SANDBOX:
                        raise PolicyFailure("policy emitted a sandbox_output tag")
                    tag_start = len(text) - len(tag)
                    if tag_start > self.plain_start:
                        self.segments.append(
                            Segment(
                                PLAIN,
                                text[self.plain_start : tag_start],
                                (self.plain_start, tag_start),
                            )
                        )
                    self.open_kind = kind
                    self.open_start = tag_start
                    fired.append(("open", kind))
                    return fired
            for kind, tag in CLOSE_TAGS.items():
                if text.endswith(tag):
                    raise PolicyFailure(f"stray close tag </{kind}>")
            return fired
        close_tag = CLOSE_TAGS[self.open_kind]
        if text.endswith(close_tag):
            kind = self.open_kind
            inner = text[self.open_start + len(OPEN_TAGS[kind]) : len(text) - len(close_tag)]
            if kind == CODE:
                seg_text = _extract_fence(inner, self.open_start)
            else:
                seg_text = inner
            self.segments.append(Segment(kind, seg_text, (self.open_start, len(text))))
            self.open_kind = None
            self.plain_start = len(text)
            fired.append(("close", kind))
            return fired
        for kind, tag in OPEN_TAGS.items():
            if text.endswith(tag):
                raise PolicyFailure(f"<{kind}> opened inside <{self.open_kind}>")
        for kind, tag in CLOSE_TAGS.items():
            if kind != self.open_kind and text.endswith(tag):
                raise PolicyFailure(f"</{kind}> inside <{self.open_kind}>")
        return fired

    def append_injected(self, kind: str, body: str) -> Segment:
        """Append harness-written text (sandbox blocks) as one segment."""
        if self.open_kind is not None:
            raise PolicyFailure("cannot inject while a segment is open")
        block = OPEN_TAGS[kind] + body + CLOSE_TAGS[kind]
        start = len(self.transcript)
        self.transcript += block
        seg = Segment(kind, body, (start, len(self.transcript)))
        self.segments.append(seg)
        self.plain_start = len(self.transcript)
        return seg

    def finalize(self) -> None:
        text = self.transcript
        if self.open_kind is not None:
            inner = text[self.open_start + len(OPEN_TAGS[self.open_kind]) :]
            kind = self.open_kind
            if kind == CODE:
                seg_text = inner  # unterminated fence kept raw
            else:
                seg_text = inner
            self.segments.append(Segment(kind, seg_text, (self.open_start, len(text))))
            self.open_kind = None
        elif len(text) > self.plain_start:
            self.segments.append(
                Segment(PLAIN, text[self.plain_start :], (self.plain_start, len(text)))
            )
        self.plain_start = len(text)


def render_sandbox_text(result: ExecutionResult) -> str:
    """The S_k text fed back to the policy for one execution."""
    if result.status == "ok":
        lines = [result.stdout.rstrip("\n")] if result.stdout.strip() else []
        for i, art in enumerate(result.artifacts):
            if art.kind == "image":
                dims = (
                    f" ({art.width}x{art.height})"
                    if art.width is not None
                    else ""
                )
                lines.append(f"[image artifact {i}: {art.ref}{dims}]")
        return "\n".join(lines) if lines else "(no output)"
    return f"ERROR ({result.status}): {result.stderr.strip()}"


def _rebuild_events(
    events: list[TokenEvent], segments: Sequence[Segment]
) -> list[TokenEvent]:
    """Re-derive trainable flags from final segment kinds."""
    from .trajectory_model import trainable_flags

    flags = trainable_flags(segments, len(events))
    out = []
    for ev, flag in zip(events, flags):
        if ev.trainable == flag:
            out.append(ev)
        else:
            out.append(
                TokenEvent(
                    ev.token_id,
                    ev.logprob_policy,
                    ev.logprob_old,
                    ev.logprob_ref,
                    ev.temperature_used,
                    flag,
                )
            )
    return out


def _rounds_tolerant(
    segments: Sequence[Segment], execs: Sequence[RoundExec]
) -> tuple[list[Round], str]:
    rounds: list[Round] = []
    answer = ""
    exec_iter = iter(execs)
    current: Round | None = None
    for seg in segments:
        if seg.kind == THINK:
            if current is not None:
                rounds.append(current)
            current = Round(think=seg)
        elif seg.kind == CODE:
            if current is None:
                current = Round(think=Segment(THINK, "", (seg.token_span[0],) * 2))
            current.code = seg
        elif seg.kind == SANDBOX:
            if current is not None:
                current.sandbox = seg
                current.exec = next(exec_iter, None)
                rounds.append(current)
                current = None
        elif seg.kind == ANSWER:
            answer = seg.text
    if current is not None:
        rounds.append(current)
    return rounds, answer


def run_trajectory(
    policy: PolicyAdapter,
    sandbox: SandboxPort,
    prompt: RolloutPrompt,
    limits: RolloutLimits = RolloutLimits(),
    sampler: SamplerState | None = None,
    tokenizer: Tokenizer = DEFAULT_TOKENIZER,
    repetition_unit: str = "token",
) -> Trajectory:
    """Drive one think/code/sandbox/answer loop to completion."""
    sampler = sampler or SamplerState()
    tracker = _TagTracker()
    events: list[TokenEvent] = []
    exec_summaries: list[RoundExec] = []
    diagnostics: list[str] = []
    terminated_by = "error"

    try:
        session_id = sandbox.open(prompt.image)
    except SandboxUnavailable as exc:
        return Trajectory(
            question=prompt.question,
            transcript="",
            segments=[],
            terminated_by="error",
            image=prompt.image,
            prompt_id=prompt.prompt_id,
            diagnostics=[f"sandbox unavailable: {exc}"],
        )

    context = list(tokenizer.encode(prompt.text))
    rounds_done = 0
    turn_tokens = 0

    try:
        while True:
            temperature = sampler.current_temperature()
            try:
                choice = policy.next_token(
                    context, temperature, sampler.repetition_penalty
                )
            except Exception as exc:  # adapter bugs must not kill siblings
                diagnostics.append(f"policy failure: {exc}")
                terminated_by = "error"
                break
            if choice is None:
                diagnostics.append("policy ended output without closing a segment")
                terminated_by = "error"
                break
            token_id, logprob = choice
            token_text = tokenizer.decode([token_id])
            sampler.observe_text(token_text)
            context.append(token_id)
            events.append(
                TokenEvent(
                    token_id=token_id,
                    logprob_policy=logprob,
                    logprob_old=logprob,
                    logprob_ref=logprob,
                    temperature_used=temperature,
                    trainable=True,
                )
            )
            try:
                fired = []
                for ch in token_text:
                    fired.extend(tracker.feed_char(ch))
            except PolicyFailure as exc:
                diagnostics.append(str(exc))
                terminated_by = "error"
                break

            rep_tokens = (
                [token_id]
                if repetition_unit == "token"
                else [ord(c) for c in token_text]
            )
            halted = any(
                sampler.rolling.observe(t) == "halt" for t in rep_tokens
            )
            if halted:
                terminated_by = "repetition"
                break

            turn_tokens += 1
            if turn_tokens > limits.max_tokens_per_turn:
                diagnostics.append(
                    f"turn exceeded {limits.max_tokens_per_turn} tokens"
                )
                terminated_by = "error"
                break

            closed = [kind for event, kind in fired if event == "close"]
            if ANSWER in closed:
                terminated_by = "answer"
                break
            if CODE in closed:
                code_seg = tracker.segments[-1]
                try:
                    result = sandbox.execute(session_id, code_seg.text)
                except Exception as exc:
                    diagnostics.append(f"sandbox failure: {exc}")
                    terminated_by = "error"
                    break
                exec_summaries.append(
                    RoundExec(
                        status=result.status,
                        wall_time=result.wall_time,
                        artifact_refs=tuple(a.ref for a in result.artifacts),
                        session_id=result.session_id,
                    )
                )
                body = "\n" + render_sandbox_text(result) + "\n"
                seg = tracker.append_injected(SANDBOX, body)
                sandbox_ids = tokenizer.encode(
                    tracker.transcript[seg.token_span[0] : seg.token_span[1]]
                )
                context.extend(sandbox_ids)
                for tid in sandbox_ids:
                    events.append(
                        TokenEvent(
                            token_id=tid,
                            logprob_policy=0.0,
                            logprob_old=0.0,
                            logprob_ref=0.0,
                            temperature_used=sampler.temperature_text,
                            trainable=False,
                        )
                    )
                rounds_done += 1
                if rounds_done >= limits.max_iterations:
                    terminated_by = "max_iterations"
                    break
                turn_tokens = 0
                hook = getattr(policy, "on_turn_complete", None)
                if hook is not None:
                    hook()
    finally:
        sandbox.close(session_id)

    tracker.finalize()
    segments = tracker.segments
    events = _rebuild_events(events, segments)
    rounds, answer = _rounds_tolerant(segments, exec_summaries)
    traj = Trajectory(
        question=prompt.question,
        transcript=tracker.transcript,
        segments=segments,
        terminated_by=terminated_by,
        image=prompt.image,
        token_events=events,
        rounds=rounds,
        answer=answer if terminated_by == "answer" else "",
        prompt_id=prompt.prompt_id,
        diagnostics=diagnostics,
    )
    return traj


def run_group(
    policy_factory: Callable[[int], PolicyAdapter],
    sandbox: SandboxPort,
    prompt: RolloutPrompt,
    limits: RolloutLimits = RolloutLimits(),
    sampler_factory: Callable[[int], SamplerState] | None = None,
    tokenizer: Tokenizer = DEFAULT_TOKENIZER,
) -> list[Trajectory]:
    """G independent trajectories: fresh session and sampler state each."""
    if limits.group_size < 2:
        raise ValueError("group_size must be >= 2 for meaningful advantages")
    trajectories = []
    for index in range(limits.group_size):
        policy = policy_factory(index)
        sampler = sampler_factory(index) if sampler_factory else SamplerState()
        try:
            traj = run_trajectory(
                policy, sandbox, prompt, limits, sampler, tokenizer
            )
        except Exception as exc:  # sibling isolation
            traj = Trajectory(
                question=prompt.question,
                transcript="",
                segments=[],
                terminated_by="error",
                image=prompt.image,
                prompt_id=prompt.prompt_id,
                diagnostics=[f"trajectory failed: {exc}"],
            )
        trajectories.append(traj)
    return trajectories
