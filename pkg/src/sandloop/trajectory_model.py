"""Multi-round sample data model: tag grammar, prompts, tokens, loss masks.

A transcript is a flat string over the strict tag grammar

    <think>...</think>  <code>```python ... ```</code>
    <sandbox_output>...</sandbox_output>  <answer>...</answer>

with no nesting and no attributes.  Segments carry token spans over the
trajectory token stream; the default tokenizer maps one token per unicode
scalar so span arithmetic is exact and model-free.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Protocol, Sequence

from .code_guard import ImageMeta


THINK, CODE, SANDBOX, ANSWER, PLAIN = (
    "think",
    "code",
    "sandbox_output",
    "answer",
    "plain",
)
SEGMENT_KINDS = (THINK, CODE, SANDBOX, ANSWER, PLAIN)
CONTENT_KINDS = (THINK, CODE, ANSWER)  # kinds that count toward |tau|

OPEN_TAGS = {k: f"<{k}>" for k in (THINK, CODE, SANDBOX, ANSWER)}
CLOSE_TAGS = {k: f"</{k}>" for k in (THINK, CODE, SANDBOX, ANSWER)}

MASK_POLICIES = ("sft_last_round_only", "sft_all_rounds", "rl_exclude_sandbox")

RECORD_SCHEMA = "training-record/v1"

DEFAULT_TEMP_DIR = "/mnt/data/temp_processed_images/"


class MalformedTranscript(Exception):
    def __init__(self, offset: int, reason: str):
        super().__init__(f"malformed transcript at offset {offset}: {reason}")
        self.offset = offset
        self.reason = reason


class LengthMismatch(Exception):
    pass


class Tokenizer(Protocol):
    def encode(self, text: str) -> list[int]: ...
    def decode(self, ids: Sequence[int]) -> str: ...


class CharTokenizer:
    """One token per unicode scalar; token id is the codepoint."""

    name = "char/v1"

    def encode(self, text: str) -> list[int]:
        return [ord(c) for c in text]

    def decode(self, ids: Sequence[int]) -> str:
        return "".join(chr(i) for i in ids)


DEFAULT_TOKENIZER = CharTokenizer()


@dataclass(frozen=True)
class Segment:
    """One span of the transcript.

    ``token_span`` covers the span including its tags; ``text`` is the
    semantic payload (inner text; for code, the fence contents only).
    """

    kind: str
    text: str
    token_span: tuple[int, int]

    def __post_init__(self) -> None:
        if self.kind not in SEGMENT_KINDS:
            raise ValueError(f"unknown segment kind {self.kind!r}")
        if self.token_span[0] > self.token_span[1]:
            raise ValueError("inverted token span")

    def length(self) -> int:
        return self.token_span[1] - self.token_span[0]


@dataclass(frozen=True)
class TokenEvent:
    token_id: int
    logprob_policy: float
    logprob_old: float
    logprob_ref: float
    temperature_used: float
    trainable: bool

    def __post_init__(self) -> None:
        for lp in (self.logprob_policy, self.logprob_old, self.logprob_ref):
            if lp > 0:
                raise ValueError(f"logprob must be <= 0, got {lp}")


@dataclass(frozen=True)
class RoundExec:
    """Sandbox-facing summary of one round's code execution."""

    status: str  # ExecutionResult status
    wall_time: float = 0.0
    artifact_refs: tuple[str, ...] = ()
    session_id: str = ""


@dataclass
class Round:
    think: Segment
    code: Segment | None = None
    sandbox: Segment | None = None
    exec: RoundExec | None = None


@dataclass
class Trajectory:
    question: str
    transcript: str
    segments: list[Segment]
    terminated_by: str  # answer | max_iterations | repetition | error
    image: ImageMeta | None = None
    token_events: list[TokenEvent] = field(default_factory=list)
    rounds: list[Round] = field(default_factory=list)
    answer: str = ""
    prompt_id: str = ""
    diagnostics: list[str] = field(default_factory=list)

    def content_segments(self) -> list[Segment]:
        return [s for s in self.segments if s.kind in CONTENT_KINDS]

    def sandbox_segments(self) -> list[Segment]:
        return [s for s in self.segments if s.kind == SANDBOX]


# --- prompt rendering -------------------------------------------------------

SYSTEM_PROMPT_TEMPLATE = """You are a helpful assistant.

Solve the following problem step by step, and optionally write Python code for image manipulation to enhance your reasoning process. The Python code will be executed by an external sandbox, and the processed image or result (wrapped in <sandbox_output></sandbox_output>) can be returned to aid your reasoning and help you arrive at the final answer.

Reasoning & Image Manipulation (Optional but Encouraged):
- You have the capability to write executable Python code to perform image manipulations (e.g., cropping to a Region of Interest (ROI), resizing, rotation, adjusting contrast) or perform calculation for better reasoning.
- The code will be executed in a secure sandbox, and its output will be provided back to you for further analysis.
- All Python code snippets must be wrapped as follows:
<code>
```python
# your code.
```
</code>
- At the end of the code, print the path of the processed image (processed_path) or the result for further processing in a sandbox environment. Save any processed image into the temporary folder ({temp_dir}).
"""

USER_PROMPT_TEMPLATE = """<image>
User's Question: {question}
User Image Path: {image_path}
User Image Size: {width}x{height}
Output Format (strict adherence required):
<think>Your detailed reasoning process, including any code, should go here.</think>
<answer>Your final answer to the user's question goes here.</answer>
"""


@dataclass(frozen=True)
class PromptConfig:
    temp_dir: str = DEFAULT_TEMP_DIR


def render_system_prompt(config: PromptConfig = PromptConfig()) -> str:
    return SYSTEM_PROMPT_TEMPLATE.format(temp_dir=config.temp_dir)


def render_user_prompt(image: ImageMeta, question: str) -> str:
    if not question.strip():
        raise ValueError("question is empty")
    return USER_PROMPT_TEMPLATE.format(
        question=question,
        image_path=image.path,
        width=image.width,
        height=image.height,
    )


# Render-only templates for the data-synthesis prompts; no judge is invoked.
SYNTHESIS_DECISION_TEMPLATE = """You are an advanced AI assistant tasked with generating training data for a complex image processing and question-answering task. Your role is to generate an ideal response containing a detailed thought process and specific executable Python code based on the user's question and the assumed condition of the image.

User Input: <image>
User's Question: {question}
User Image Path (just for code reference): {image_path}

Core Instructions:
Your primary task is to determine whether the image can be used directly to answer the user's question or if it requires processing.
1. If the image can be used directly: state that no processing is needed, answer the question, and include -1 in the <answer></answer> box.
2. If the image needs processing: describe the issues (orientation, contrast, lighting, region of interest), pick the operation category (1 Direction Issues, 2 Lighting and Contrast Issues, 3 Scaling and Region of Interest, 4 Combined Issues), and generate specific, executable Python code that addresses them. Save the processed image in the temporary folder ({temp_dir}), with the same filename as the User Image Path followed by a random suffix, and print the saved image path (processed_path) in the last line.
The code snippet must be wrapped with:
<code>
```python
# code snippet
```
</code>

Output Format (strictly follow):
<think>Your detailed comparative analysis and executable code goes here</think><answer>Tool ID if you use tool else -1</answer>
"""

SYNTHESIS_CROP_TEMPLATE = """You are an advanced AI assistant tasked with constructing reasoning and code for a visual QA task. You will receive the user's question, image, User Image Path, and Ground Truth Bounding Box Coordinates. The image path and Ground Truth Bounding Box coordinates should only be used in the code and must not be mentioned in your analysis.

User Input: <image>
User's Question: {question}
User Image Path (just for code reference): {image_path}
Ground Truth Bounding Box Coordinates: {box}

Core Instructions:
Provide a reasonable explanation of why cropping the image is necessary to answer the user's question, treating the bounding box as something you inferred from the image. Generate simple, executable Python code that crops the image, saves it into the temporary folder ({temp_dir}) with the same filename as the User Image Path followed by a random suffix, and prints the saved image path (processed_path) in the last line.
The code snippet must be wrapped with:
<code>
```python
# code snippet
```
</code>

Output Format (strictly follow):
<think>Your detailed analysis of why cropping is necessary and the executable code goes here.</think>
<answer>1</answer>
"""

SYNTHESIS_ROTATION_TEMPLATE = """You are an advanced AI assistant tasked with constructing reasoning and code for a visual QA task. You will receive the user's question, a rotated image, the rotation angle, and the user Image Path. The image path and rotation angle should only be used in the code and must not be mentioned in your analysis.

User Input: <image>
User's Question: {question}
User Image Path (just for code reference): {image_path}
GT Degree: How many degrees was the image rotated?: {angle}

Core Instructions:
Explain why rotating the image is necessary, treating the angle as something you inferred from the content. Generate simple, executable Python code that rotates the image, saves it into the temporary folder ({temp_dir}) with the same filename as the User Image Path followed by a random suffix, and prints the saved image path (processed_path) in the last line. The sum of your rotation angle and the GT Degree must be either 0 or 360; it should never be 180 or -180. You do not need to answer the question.
The code snippet must be wrapped with:
<code>
```python
# code snippet
```
</code>

Output Format (strictly follow):
<think>Your detailed analysis of why rotating the image is necessary and the executable code goes here.</think>
<answer>1</answer>
"""


def render_synthesis_prompt(kind: str, **fields: object) -> str:
    templates = {
        "decision": SYNTHESIS_DECISION_TEMPLATE,
        "crop": SYNTHESIS_CROP_TEMPLATE,
        "rotation": SYNTHESIS_ROTATION_TEMPLATE,
    }
    if kind not in templates:
        raise ValueError(f"unknown synthesis prompt kind {kind!r}")
    fields.setdefault("temp_dir", DEFAULT_TEMP_DIR)
    return templates[kind].format(**fields)


# --- transcript parsing -----------------------------------------------------

def _extract_fence(inner: str, base_offset: int) -> str:
    """Return the contents of the fenced block inside a <code> segment."""
    start = inner.find("```")
    if start < 0:
        raise MalformedTranscript(base_offset, "code segment has no fenced block")
    head_end = inner.find("\n", start)
    if head_end < 0:
        raise MalformedTranscript(base_offset + start, "unterminated fence header")
    close = inner.find("```", head_end)
    if close < 0:
        raise MalformedTranscript(base_offset + start, "unclosed code fence")
    body = inner[head_end + 1 : close]
    if body.endswith("\n"):
        body = body[:-1]
    return body


def parse_transcript(text: str) -> list[Segment]:
    """Parse a transcript into ordered, non-overlapping segments.

    Unknown text between tags becomes ``plain`` segments.  Nesting or a
    stray close tag raises MalformedTranscript at the first offending
    offset.
    """
    segments: list[Segment] = []
    pos = 0
    n = len(text)

    def earliest_tag(frm: int, tags: dict[str, str]) -> tuple[int, str] | None:
        best: tuple[int, str] | None = None
        for kind, tag in tags.items():
            i = text.find(tag, frm)
            if i >= 0 and (best is None or i < best[0]):
                best = (i, kind)
        return best

    while pos < n:
        nxt_open = earliest_tag(pos, OPEN_TAGS)
        nxt_close = earliest_tag(pos, CLOSE_TAGS)
        if nxt_close is not None and (nxt_open is None or nxt_close[0] < nxt_open[0]):
            raise MalformedTranscript(
                nxt_close[0], f"close tag </{nxt_close[1]}> without open"
            )
        if nxt_open is None:
            segments.append(Segment(PLAIN, text[pos:], (pos, n)))
            break
        open_at, kind = nxt_open
        if open_at > pos:
            segments.append(Segment(PLAIN, text[pos:open_at], (pos, open_at)))
        inner_start = open_at + len(OPEN_TAGS[kind])
        close_tag = CLOSE_TAGS[kind]
        close_at = text.find(close_tag, inner_start)
        # any other tag starting before our close tag means interleaving
        intruder = earliest_tag(inner_start, OPEN_TAGS)
        if intruder is not None and (close_at < 0 or intruder[0] < close_at):
            raise MalformedTranscript(
                intruder[0], f"<{intruder[1]}> opened inside <{kind}>"
            )
        if close_at < 0:
            raise MalformedTranscript(open_at, f"<{kind}> never closed")
        inner = text[inner_start:close_at]
        if kind == CODE:
            seg_text = _extract_fence(inner, inner_start)
        else:
            seg_text = inner
        end = close_at + len(close_tag)
        segments.append(Segment(kind, seg_text, (open_at, end)))
        pos = end
    return segments


def rounds_from_segments(segments: Sequence[Segment]) -> tuple[list[Round], str]:
    """Group structured segments into rounds; returns (rounds, answer_text).

    Expected kind sequence (ignoring plain): (think code sandbox)* think answer.
    Raises MalformedTranscript when the sequence deviates.
    """
    structured = [s for s in segments if s.kind != PLAIN]
    rounds: list[Round] = []
    answer = ""
    i = 0
    while i < len(structured):
        seg = structured[i]
        if seg.kind != THINK:
            raise MalformedTranscript(
                seg.token_span[0], f"expected <think>, found <{seg.kind}>"
            )
        rnd = Round(think=seg)
        i += 1
        if i < len(structured) and structured[i].kind == CODE:
            rnd.code = structured[i]
            i += 1
            if i < len(structured) and structured[i].kind == SANDBOX:
                rnd.sandbox = structured[i]
                i += 1
        elif i < len(structured) and structured[i].kind == ANSWER:
            answer = structured[i].text
            rounds.append(rnd)
            i += 1
            if i < len(structured):
                extra = structured[i]
                raise MalformedTranscript(
                    extra.token_span[0], f"<{extra.kind}> after final answer"
                )
            return rounds, answer
        else:
            raise MalformedTranscript(
                seg.token_span[1], "round has neither code nor answer"
            )
        rounds.append(rnd)
    tail = segments[-1].token_span[1] if segments else 0
    raise MalformedTranscript(tail, "transcript has no answer segment")


def trajectory_from_transcript(
    transcript: str,
    question: str = "",
    image: ImageMeta | None = None,
    terminated_by: str = "answer",
    tokenizer: Tokenizer = DEFAULT_TOKENIZER,
) -> Trajectory:
    """Build a trajectory (with synthetic on-policy token events) from text."""
    segments = parse_transcript(transcript)
    rounds, answer = rounds_from_segments(segments)
    events = synthesize_token_events(transcript, segments, tokenizer)
    return Trajectory(
        question=question,
        transcript=transcript,
        segments=segments,
        terminated_by=terminated_by,
        image=image,
        token_events=events,
        rounds=rounds,
        answer=answer,
    )


def synthesize_token_events(
    transcript: str,
    segments: Sequence[Segment],
    tokenizer: Tokenizer = DEFAULT_TOKENIZER,
    logprob: float = 0.0,
) -> list[TokenEvent]:
    """Fabricate neutral on-policy token events for desk-scale fixtures."""
    ids = tokenizer.encode(transcript)
    trainable = trainable_flags(segments, len(ids))
    code_positions = code_mode_positions(segments)
    events = []
    for pos, tid in enumerate(ids):
        temp = 0.0 if pos in code_positions else 1.0
        events.append(
            TokenEvent(
                token_id=tid,
                logprob_policy=logprob,
                logprob_old=logprob,
                logprob_ref=logprob,
                temperature_used=temp,
                trainable=trainable[pos],
            )
        )
    return events


def trainable_flags(segments: Sequence[Segment], n_tokens: int) -> list[bool]:
    flags = [False] * n_tokens
    for seg in segments:
        if seg.kind in CONTENT_KINDS:
            for i in range(*seg.token_span):
                flags[i] = True
    return flags


def code_mode_positions(segments: Sequence[Segment]) -> set[int]:
    """Token positions sampled in code mode.

    The switch happens on the tag tokens exclusive of the open tag and
    inclusive of the close tag: positions from the end of ``<code>``
    through the end of ``</code>``.
    """
    positions: set[int] = set()
    open_len = len(OPEN_TAGS[CODE])
    for seg in segments:
        if seg.kind == CODE:
            start, end = seg.token_span
            positions.update(range(start + open_len, end))
    return positions


# --- token accounting and masking -------------------------------------------

def token_count(traj: Trajectory) -> int:
    """|tau| = sum of think, code, and answer spans; sandbox spans excluded."""
    return sum(s.length() for s in traj.segments if s.kind in CONTENT_KINDS)


@dataclass(frozen=True)
class LossMask:
    bits: tuple[int, ...]
    policy: str

    def __post_init__(self) -> None:
        if self.policy not in MASK_POLICIES:
            raise ValueError(f"unknown mask policy {self.policy!r}")

    def trainable_count(self) -> int:
        return sum(self.bits)


def compute_mask(traj: Trajectory, policy: str) -> LossMask:
    """Loss-mask bits per token under the given policy.

    Sandbox spans (tags included) are always 0.  ``sft_last_round_only``
    additionally zeroes everything at or before the final sandbox close
    tag; ``sft_all_rounds`` and ``rl_exclude_sandbox`` train every
    think/code/answer token.
    """
    if policy not in MASK_POLICIES:
        raise ValueError(f"unknown mask policy {policy!r}")
    n = len(traj.token_events) or (traj.segments[-1].token_span[1] if traj.segments else 0)
    bits = [0] * n
    cut = 0
    if policy == "sft_last_round_only":
        sandbox_ends = [s.token_span[1] for s in traj.segments if s.kind == SANDBOX]
        cut = max(sandbox_ends) if sandbox_ends else 0
    for seg in traj.segments:
        if seg.kind not in CONTENT_KINDS:
            continue
        for i in range(*seg.token_span):
            if i >= cut:
                bits[i] = 1
    return LossMask(tuple(bits), policy)


# --- training records -------------------------------------------------------

def emit_training_record(
    traj: Trajectory,
    mask: LossMask,
    tokenizer: Tokenizer = DEFAULT_TOKENIZER,
) -> str:
    """Serialize one trajectory + mask as a single JSONL line."""
    token_ids = [e.token_id for e in traj.token_events] or tokenizer.encode(
        traj.transcript
    )
    if len(mask.bits) != len(token_ids):
        raise LengthMismatch(
            f"mask has {len(mask.bits)} bits for {len(token_ids)} tokens"
        )
    record = {
        "schema": RECORD_SCHEMA,
        "prompt_id": traj.prompt_id,
        "question": traj.question,
        "image": traj.image.to_json() if traj.image else None,
        "terminated_by": traj.terminated_by,
        "mask_policy": mask.policy,
        "token_ids": token_ids,
        "mask_bits": list(mask.bits),
        "segments": [
            {"kind": s.kind, "text": s.text, "span": list(s.token_span)}
            for s in traj.segments
        ],
        "sandbox_refs": [
            {
                "status": r.exec.status,
                "artifacts": list(r.exec.artifact_refs),
                "session_id": r.exec.session_id,
            }
            for r in traj.rounds
            if r.exec is not None
        ],
    }
    return json.dumps(record, ensure_ascii=False)


def trajectory_to_json(traj: Trajectory) -> dict:
    """Full-fidelity serialization for archives (token events included)."""
    return {
        "prompt_id": traj.prompt_id,
        "question": traj.question,
        "image": traj.image.to_json() if traj.image else None,
        "transcript": traj.transcript,
        "terminated_by": traj.terminated_by,
        "answer": traj.answer,
        "diagnostics": list(traj.diagnostics),
        "segments": [
            {"kind": s.kind, "text": s.text, "span": list(s.token_span)}
            for s in traj.segments
        ],
        "token_events": [
            [
                e.token_id,
                e.logprob_policy,
                e.logprob_old,
                e.logprob_ref,
                e.temperature_used,
                1 if e.trainable else 0,
            ]
            for e in traj.token_events
        ],
        "rounds": [
            {
                "think": traj.segments.index(r.think) if r.think in traj.segments else None,
                "code": traj.segments.index(r.code) if r.code in traj.segments else None,
                "sandbox": traj.segments.index(r.sandbox)
                if r.sandbox in traj.segments
                else None,
                "exec": {
                    "status": r.exec.status,
                    "wall_time": r.exec.wall_time,
                    "artifact_refs": list(r.exec.artifact_refs),
                    "session_id": r.exec.session_id,
                }
                if r.exec
                else None,
            }
            for r in traj.rounds
        ],
    }


def trajectory_from_json(obj: dict) -> Trajectory:
    segments = [
        Segment(s["kind"], s["text"], tuple(s["span"])) for s in obj["segments"]
    ]
    events = [
        TokenEvent(tid, lp, lo, lr, temp, bool(flag))
        for tid, lp, lo, lr, temp, flag in obj.get("token_events", ())
    ]
    rounds = []
    for r in obj.get("rounds", ()):
        think = segments[r["think"]] if r.get("think") is not None else Segment(
            THINK, "", (0, 0)
        )
        rnd = Round(
            think=think,
            code=segments[r["code"]] if r.get("code") is not None else None,
            sandbox=segments[r["sandbox"]] if r.get("sandbox") is not None else None,
        )
        if r.get("exec"):
            rnd.exec = RoundExec(
                status=r["exec"]["status"],
                wall_time=r["exec"]["wall_time"],
                artifact_refs=tuple(r["exec"]["artifact_refs"]),
                session_id=r["exec"]["session_id"],
            )
        rounds.append(rnd)
    return Trajectory(
        question=obj.get("question", ""),
        transcript=obj["transcript"],
        segments=segments,
        terminated_by=obj["terminated_by"],
        image=ImageMeta.from_json(obj["image"]) if obj.get("image") else None,
        token_events=events,
        rounds=rounds,
        answer=obj.get("answer", ""),
        prompt_id=obj.get("prompt_id", ""),
        diagnostics=list(obj.get("diagnostics", ())),
    )


def parse_training_record(
    line: str, tokenizer: Tokenizer = DEFAULT_TOKENIZER
) -> tuple[Trajectory, LossMask]:
    obj = json.loads(line)
    if obj.get("schema") != RECORD_SCHEMA:
        raise ValueError(f"unknown record schema {obj.get('schema')!r}")
    token_ids = obj["token_ids"]
    if len(obj["mask_bits"]) != len(token_ids):
        raise LengthMismatch("mask/stream length mismatch in record")
    transcript = tokenizer.decode(token_ids)
    segments = [
        Segment(s["kind"], s["text"], tuple(s["span"])) for s in obj["segments"]
    ]
    image = ImageMeta.from_json(obj["image"]) if obj.get("image") else None
    traj = Trajectory(
        question=obj.get("question", ""),
        transcript=transcript,
        segments=segments,
        terminated_by=obj.get("terminated_by", "answer"),
        image=image,
        token_events=synthesize_token_events(transcript, segments, tokenizer),
        prompt_id=obj.get("prompt_id", ""),
    )
    try:
        traj.rounds, traj.answer = rounds_from_segments(segments)
    except MalformedTranscript:
        pass
    mask = LossMask(tuple(obj["mask_bits"]), obj["mask_policy"])
    return traj, mask
