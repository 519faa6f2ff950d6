from __future__ import annotations

import random
from pathlib import Path

import pytest

from sandloop.code_guard import ImageMeta
from sandloop.trajectory_model import (
    ANSWER,
    CODE,
    PLAIN,
    SANDBOX,
    THINK,
    CharTokenizer,
    LengthMismatch,
    LossMask,
    MalformedTranscript,
    PromptConfig,
    Segment,
    Trajectory,
    code_mode_positions,
    compute_mask,
    emit_training_record,
    parse_training_record,
    parse_transcript,
    render_synthesis_prompt,
    render_system_prompt,
    render_user_prompt,
    rounds_from_segments,
    token_count,
    trajectory_from_transcript,
)

FIXTURES = Path(__file__).parent / "fixtures"

TWO_ROUND = (
    "<think>Need a closer look.</think>"
    "<code>\n```python\nprint(1)\n```\n</code>"
    "<sandbox_output>\n1\n</sandbox_output>"
    "<think>Now I can see it.</think>"
    "<answer>blue</answer>"
)


# --- prompts ---------------------------------------------------------------

def test_system_prompt_golden():
    golden = (FIXTURES / "system_prompt.golden.txt").read_text(encoding="utf-8")
    assert render_system_prompt() == golden


def test_system_prompt_mentions_fence_and_wrapping():
    text = render_system_prompt()
    assert "<code>" in text and "```python" in text
    assert "<sandbox_output></sandbox_output>" in text


def test_system_prompt_custom_temp_dir_differs_only_in_path():
    default = render_system_prompt()
    custom = render_system_prompt(PromptConfig(temp_dir="/scratch/proc/"))
    assert custom != default
    assert custom.replace("/scratch/proc/", "/mnt/data/temp_processed_images/") == default


def test_user_prompt_golden():
    golden = (FIXTURES / "user_prompt.golden.txt").read_text(encoding="utf-8")
    img = ImageMeta(path="/data/images/street.jpg", width=1024, height=768)
    out = render_user_prompt(
        img, "What color is the sign near the center bottom of the image?"
    )
    assert out == golden


def test_user_prompt_contents():
    img = ImageMeta(path="/p.png", width=1024, height=768)
    out = render_user_prompt(img, "What color?")
    assert "1024" in out and "768" in out
    assert "<think>" in out and "<answer>" in out
    assert out.startswith("<image>\n")


def test_user_prompt_empty_question_rejected():
    img = ImageMeta(path="/p.png", width=10, height=10)
    with pytest.raises(ValueError):
        render_user_prompt(img, "   ")


def test_synthesis_templates_render():
    crop = render_synthesis_prompt(
        "crop", question="q", image_path="/a.png", box=(1, 2, 3, 4)
    )
    assert "Ground Truth Bounding Box" in crop
    rot = render_synthesis_prompt(
        "rotation", question="q", image_path="/a.png", angle=90
    )
    assert "GT Degree" in rot
    dec = render_synthesis_prompt("decision", question="q", image_path="/a.png")
    assert "-1" in dec
    with pytest.raises(ValueError):
        render_synthesis_prompt("nope")


# --- parse_transcript ------------------------------------------------------

def test_parse_five_segments_in_order():
    segs = parse_transcript(TWO_ROUND)
    assert [s.kind for s in segs] == [THINK, CODE, SANDBOX, THINK, ANSWER]
    assert segs[0].text == "Need a closer look."
    assert segs[1].text == "print(1)"
    assert segs[2].text == "\n1\n"
    assert segs[4].text == "blue"


def test_parse_minimal_two_segments():
    segs = parse_transcript("<think>x</think><answer>y</answer>")
    assert [s.kind for s in segs] == [THINK, ANSWER]
    assert segs[0].text == "x"
    assert segs[1].text == "y"


def test_parse_nested_tag_reports_offset():
    text = "<think>x<answer>y</answer>"
    with pytest.raises(MalformedTranscript) as exc:
        parse_transcript(text)
    assert exc.value.offset == text.index("<answer>")


def test_parse_unclosed_tag():
    with pytest.raises(MalformedTranscript):
        parse_transcript("<think>never ends")


def test_parse_stray_close_tag():
    text = "hello</think>"
    with pytest.raises(MalformedTranscript) as exc:
        parse_transcript(text)
    assert exc.value.offset == text.index("</think>")


def test_parse_code_requires_fence():
    with pytest.raises(MalformedTranscript):
        parse_transcript("<code>print(1)</code>")


def test_parse_plain_between_tags():
    segs = parse_transcript("<think>a</think>\n\n<answer>b</answer>")
    assert [s.kind for s in segs] == [THINK, PLAIN, ANSWER]
    assert segs[1].text == "\n\n"


def test_spans_partition_text():
    segs = parse_transcript(TWO_ROUND)
    pos = 0
    for seg in segs:
        assert seg.token_span[0] == pos
        pos = seg.token_span[1]
    assert pos == len(TWO_ROUND)


def test_parse_roundtrip_on_assembled_transcripts():
    rng = random.Random(3)
    for _ in range(25):
        parts = []
        rounds = rng.randint(0, 3)
        for r in range(rounds):
            parts.append(f"<think>step {r}</think>")
            parts.append(f"<code>\n```python\nx{r} = {r}\n```\n</code>")
            parts.append(f"<sandbox_output>out {r}</sandbox_output>")
        parts.append("<think>final</think>")
        parts.append("<answer>done</answer>")
        text = "".join(parts)
        segs = parse_transcript(text)
        kinds = [s.kind for s in segs]
        assert kinds == ([THINK, CODE, SANDBOX] * rounds) + [THINK, ANSWER]
        assert "".join(text[s.token_span[0]:s.token_span[1]] for s in segs) == text


def test_rounds_from_segments():
    segs = parse_transcript(TWO_ROUND)
    rounds, answer = rounds_from_segments(segs)
    assert len(rounds) == 2
    assert rounds[0].code is not None and rounds[0].sandbox is not None
    assert rounds[1].code is None
    assert answer == "blue"


def test_rounds_reject_trailing_content():
    segs = parse_transcript("<think>a</think><answer>b</answer><think>c</think>")
    with pytest.raises(MalformedTranscript):
        rounds_from_segments(segs)


# --- token accounting ------------------------------------------------------

def synthetic_trajectory(spans: list[tuple[str, int]]) -> Trajectory:
    """Build a trajectory from abstract (kind, span length) pairs."""
    segments = []
    pos = 0
    for kind, length in spans:
        segments.append(Segment(kind, "x" * length, (pos, pos + length)))
        pos += length
    transcript = "x" * pos
    from sandloop.trajectory_model import synthesize_token_events

    return Trajectory(
        question="q",
        transcript=transcript,
        segments=segments,
        terminated_by="answer",
        token_events=synthesize_token_events(transcript, segments),
    )


def test_token_count_formula_fixture():
    traj = synthetic_trajectory(
        [(THINK, 10), (CODE, 5), (SANDBOX, 100), (THINK, 8), (ANSWER, 3)]
    )
    assert token_count(traj) == 26


def test_token_count_no_code():
    traj = synthetic_trajectory([(THINK, 7), (ANSWER, 2)])
    assert token_count(traj) == 9


def test_token_count_empty_answer_after_truncation():
    traj = synthetic_trajectory(
        [(THINK, 10), (CODE, 5), (SANDBOX, 40), (ANSWER, 0)]
    )
    assert token_count(traj) == 15


def test_token_count_cross_check():
    traj = trajectory_from_transcript(TWO_ROUND)
    by_events = sum(1 for e in traj.token_events if e.trainable)
    assert token_count(traj) == by_events


# --- masks -----------------------------------------------------------------

def test_mask_last_round_only_two_round():
    traj = trajectory_from_transcript(TWO_ROUND)
    mask = compute_mask(traj, "sft_last_round_only")
    segs = {i: s for i, s in enumerate(traj.segments)}
    t0, c0, s0, t1, a = (segs[i] for i in range(5))
    bits = mask.bits
    assert all(bits[i] == 0 for i in range(*t0.token_span))
    assert all(bits[i] == 0 for i in range(*c0.token_span))
    assert all(bits[i] == 0 for i in range(*s0.token_span))
    assert all(bits[i] == 1 for i in range(*t1.token_span))
    assert all(bits[i] == 1 for i in range(*a.token_span))
    assert mask.trainable_count() == t1.length() + a.length()


def test_mask_single_round_all_policies():
    traj = trajectory_from_transcript("<think>t</think><answer>a</answer>")
    for policy in ("sft_last_round_only", "sft_all_rounds", "rl_exclude_sandbox"):
        mask = compute_mask(traj, policy)
        for seg in traj.segments:
            expected = 1 if seg.kind in (THINK, ANSWER) else 0
            assert all(
                mask.bits[i] == expected for i in range(*seg.token_span)
            ), policy


def test_mask_all_rounds_trains_every_content_span():
    traj = trajectory_from_transcript(TWO_ROUND)
    mask = compute_mask(traj, "sft_all_rounds")
    for seg in traj.segments:
        want = 1 if seg.kind in (THINK, CODE, ANSWER) else 0
        assert all(mask.bits[i] == want for i in range(*seg.token_span))


def test_mask_sandbox_always_zero_generated_family():
    rng = random.Random(11)
    for _ in range(20):
        parts = []
        n_rounds = rng.randint(1, 4)
        for r in range(n_rounds - 1):
            parts.append(f"<think>{'t' * rng.randint(1, 9)}</think>")
            parts.append(f"<code>\n```python\nx = {r}\n```\n</code>")
            parts.append(f"<sandbox_output>{'s' * rng.randint(1, 30)}</sandbox_output>")
        parts.append(f"<think>{'t' * rng.randint(1, 9)}</think>")
        parts.append(f"<answer>{'a' * rng.randint(1, 5)}</answer>")
        traj = trajectory_from_transcript("".join(parts))
        for policy in ("sft_last_round_only", "sft_all_rounds", "rl_exclude_sandbox"):
            mask = compute_mask(traj, policy)
            for seg in traj.segments:
                if seg.kind == SANDBOX:
                    assert all(mask.bits[i] == 0 for i in range(*seg.token_span))
        # last-round-only invariant: ones == |T_t| + |a|
        mask = compute_mask(traj, "sft_last_round_only")
        t_last = traj.segments[-2]
        ans = traj.segments[-1]
        assert mask.trainable_count() == t_last.length() + ans.length()


def test_mask_rejects_unknown_policy():
    traj = trajectory_from_transcript("<think>t</think><answer>a</answer>")
    with pytest.raises(ValueError):
        compute_mask(traj, "everything")


def test_code_mode_positions_exclusive_open_inclusive_close():
    text = "<think>t</think><code>\n```python\nx = 1\n```\n</code><answer>a</answer>"
    segs = parse_transcript(text)
    positions = code_mode_positions(segs)
    code_seg = next(s for s in segs if s.kind == CODE)
    start, end = code_seg.token_span
    assert min(positions) == start + len("<code>")
    assert max(positions) == end - 1
    assert (start + len("<code>") - 1) not in positions


# --- records ---------------------------------------------------------------

def test_record_roundtrip():
    traj = trajectory_from_transcript(TWO_ROUND, question="what color?")
    mask = compute_mask(traj, "sft_last_round_only")
    line = emit_training_record(traj, mask)
    back, back_mask = parse_training_record(line)
    assert back.transcript == traj.transcript
    assert [(s.kind, s.text) for s in back.segments] == [
        (s.kind, s.text) for s in traj.segments
    ]
    assert back_mask == mask
    assert back.answer == "blue"


def test_record_length_mismatch():
    traj = trajectory_from_transcript(TWO_ROUND)
    bad = LossMask(bits=(0, 1, 0), policy="sft_all_rounds")
    with pytest.raises(LengthMismatch):
        emit_training_record(traj, bad)


def test_record_is_single_line():
    traj = trajectory_from_transcript(TWO_ROUND)
    line = emit_training_record(traj, compute_mask(traj, "rl_exclude_sandbox"))
    assert "\n" not in line


def test_record_matches_golden_file():
    traj = trajectory_from_transcript(TWO_ROUND, question="what color?")
    traj.prompt_id = "golden-2round"
    mask = compute_mask(traj, "sft_last_round_only")
    line = emit_training_record(traj, mask)
    golden = (FIXTURES / "training_record_2round.golden.jsonl").read_text(
        encoding="utf-8"
    )
    assert line + "\n" == golden


def test_char_tokenizer_roundtrip():
    tok = CharTokenizer()
    text = "héllo <code> ✓"
    assert tok.decode(tok.encode(text)) == text
    assert len(tok.encode(text)) == len(text)
