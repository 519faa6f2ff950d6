"""Operator entry points.

Subcommands: serve the sandbox, roll out groups from prompt files with a
scripted policy, score archives, emit masked training records, and run
the executability filter.  Exit codes: 0 success, 1 usage, 2 partial
failure, 3 total failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import signal
import sys
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path

from .code_guard import GuestCode, ImageMeta
from .grpo_core import (
    DEFAULT_BETA,
    DEFAULT_EPSILON,
    RewardBreakdown,
    compute_advantages,
    score_trajectory,
)
from .judge import HttpJudge, StubJudge
from .rollout_engine import (
    DEFAULT_GROUP_SIZE,
    DEFAULT_MAX_ITERATIONS,
    DEFAULT_REPETITION_PENALTY,
    DEFAULT_THRESHOLD,
    DEFAULT_WINDOW_LEN,
    LocalSandbox,
    RemoteSandbox,
    RepetitionStats,
    RolloutLimits,
    SamplerState,
    ScriptedPolicy,
    build_prompt,
    run_group,
)
from .sandbox_exec import Limits, SandboxConfig, SandboxSupervisor
from .sandbox_service import BindFailure, SandboxClient, serve
from .trajectory_model import (
    MASK_POLICIES,
    PromptConfig,
    compute_mask,
    emit_training_record,
    token_count,
    trajectory_from_json,
    trajectory_to_json,
)


EXIT_OK = 0
EXIT_USAGE = 1
EXIT_PARTIAL = 2
EXIT_TOTAL = 3

ARCHIVE_SCHEMA = "archive/v1"
ENV_PREFIX = "SANDLOOP_"


@dataclass(frozen=True)
class RunConfig:
    """Every numeric default matches the documented protocol values."""

    timeout: float = 10.0
    max_output_bytes: int = 65536
    max_cells: int = 64
    max_iterations: int = DEFAULT_MAX_ITERATIONS
    max_tokens_per_turn: int = 4096
    group_size: int = DEFAULT_GROUP_SIZE
    window_len: int = DEFAULT_WINDOW_LEN
    threshold: float = DEFAULT_THRESHOLD
    beta: float = DEFAULT_BETA
    epsilon: float = DEFAULT_EPSILON
    repetition_penalty: float = DEFAULT_REPETITION_PENALTY
    temperature_text: float = 1.0
    temperature_code: float = 0.0
    reward_variant: str = "consistency"
    temp_dir: str = "/mnt/data/temp_processed_images/"
    endpoint: str = ""  # remote sandbox; empty = embedded supervisor
    judge_endpoint: str = ""
    judge_fixture: str = ""
    policy_script: str = ""
    workers: int = 1
    tmp_root: str = ""
    strict_judge: bool = False

    def to_json(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def config_hash(self) -> str:
        canonical = json.dumps(self.to_json(), sort_keys=True)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]

    def limits(self) -> Limits:
        return Limits(
            max_wall_time=self.timeout,
            max_output_bytes=self.max_output_bytes,
            max_cells_per_session=self.max_cells,
        )

    def rollout_limits(self) -> RolloutLimits:
        return RolloutLimits(
            max_iterations=self.max_iterations,
            max_tokens_per_turn=self.max_tokens_per_turn,
            group_size=self.group_size,
        )


def _coerce(raw: str, target_type: type):
    if target_type is bool:
        return raw.lower() in ("1", "true", "yes", "on")
    return target_type(raw)


def load_run_config(
    config_file: str | None = None, overrides: dict | None = None
) -> RunConfig:
    """Defaults < config file (key=value) < environment < explicit overrides."""
    values: dict = {}
    field_types = {f.name: f.type for f in fields(RunConfig)}
    defaults = RunConfig()
    if config_file:
        for raw in Path(config_file).read_text(encoding="utf-8").splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, _, val = line.partition("=")
            key = key.strip()
            if key in field_types:
                values[key] = _coerce(val.strip(), type(getattr(defaults, key)))
    for f in fields(RunConfig):
        env_key = ENV_PREFIX + f.name.upper()
        if env_key in os.environ:
            values[f.name] = _coerce(os.environ[env_key], type(getattr(defaults, f.name)))
    if overrides:
        values.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig(**values)


@dataclass(frozen=True)
class PromptRecord:
    id: str
    image: ImageMeta
    question: str
    answer: str  # ground truth
    box: tuple[int, int, int, int] | None = None

    @staticmethod
    def from_json(obj: dict) -> "PromptRecord":
        return PromptRecord(
            id=str(obj["id"]),
            image=ImageMeta.from_json(obj["image"]),
            question=obj["question"],
            answer=str(obj.get("answer", "")),
            box=tuple(obj["box"]) if obj.get("box") else None,
        )


def load_prompts(path: str | Path) -> list[PromptRecord]:
    records = []
    seen: set[str] = set()
    for lineno, line in enumerate(
        Path(path).read_text(encoding="utf-8").splitlines(), start=1
    ):
        if not line.strip():
            continue
        try:
            record = PromptRecord.from_json(json.loads(line))
        except (ValueError, KeyError) as exc:
            raise ValueError(f"{path}:{lineno}: bad prompt record: {exc}") from exc
        if record.id in seen:
            raise ValueError(f"{path}:{lineno}: duplicate prompt id {record.id!r}")
        seen.add(record.id)
        records.append(record)
    return records


def _build_judge(config: RunConfig):
    if config.judge_fixture:
        return StubJudge.from_file(config.judge_fixture)
    if config.judge_endpoint:
        return HttpJudge(config.judge_endpoint)
    return None


def _build_sandbox(config: RunConfig, supervisor_holder: list):
    if config.endpoint:
        return RemoteSandbox(SandboxClient(config.endpoint), config.limits())
    supervisor = SandboxSupervisor(
        SandboxConfig(tmp_root=config.tmp_root or None)
    )
    supervisor_holder.append(supervisor)
    return LocalSandbox(supervisor, config.limits())


# --- archive I/O ---------------------------------------------------------------

def write_archive(path: Path, config: RunConfig, rows: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(
            json.dumps(
                {"schema": ARCHIVE_SCHEMA, "config_hash": config.config_hash()}
            )
            + "\n"
        )
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")


def read_archive(path: str | Path) -> tuple[dict, list[dict]]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise ValueError(f"{path}: empty archive")
    manifest = json.loads(lines[0])
    if manifest.get("schema") != ARCHIVE_SCHEMA:
        raise ValueError(f"{path}: unknown archive schema {manifest.get('schema')!r}")
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rows.append(json.loads(line))
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: bad archive line: {exc}") from exc
    return manifest, rows


# --- subcommands ------------------------------------------------------------------

def cmd_serve(args: argparse.Namespace) -> int:
    config = load_run_config(args.config)
    supervisor = SandboxSupervisor(
        SandboxConfig(tmp_root=config.tmp_root or None)
    )
    try:
        handle = serve(args.bind, supervisor)
    except BindFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    print(f"sandbox service listening on {handle.endpoint}", flush=True)
    stop = threading.Event()

    def _signal(_sig, _frame):
        stop.set()

    signal.signal(signal.SIGTERM, _signal)
    signal.signal(signal.SIGINT, _signal)
    stop.wait()
    handle.shutdown()  # drains in-flight executions up to their timeouts
    supervisor.close_all()
    return EXIT_OK


def _score_group(
    trajectories: list, record: PromptRecord, judge, config: RunConfig
) -> tuple[list[RewardBreakdown], list[float]]:
    breakdowns = [
        score_trajectory(
            traj,
            record.answer,
            judge,
            variant=config.reward_variant,
            strict=config.strict_judge,
        )
        for traj in trajectories
    ]
    advantages = compute_advantages(
        [b.composed for b in breakdowns], config.epsilon
    )
    return breakdowns, advantages


def cmd_rollout(args: argparse.Namespace) -> int:
    config = load_run_config(
        args.config,
        {
            "policy_script": args.policy_script,
            "judge_fixture": args.judge_fixture,
            "endpoint": args.endpoint,
            "group_size": args.group_size,
            "workers": args.workers,
        },
    )
    try:
        prompts = load_prompts(args.prompts)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if not prompts:
        print("error: prompts file has no records", file=sys.stderr)
        return EXIT_USAGE
    if not config.policy_script:
        print("error: --policy-script is required (scripted adapter)", file=sys.stderr)
        return EXIT_USAGE

    judge = _build_judge(config)
    holders: list = []
    sandbox = _build_sandbox(config, holders)
    prompt_config = PromptConfig(temp_dir=config.temp_dir)
    rows: list[dict] = []
    rows_lock = threading.Lock()
    failures = 0

    def process(record: PromptRecord) -> None:
        nonlocal failures
        prompt = build_prompt(record.id, record.image, record.question, prompt_config)

        def policy_factory(i: int) -> ScriptedPolicy:
            return ScriptedPolicy.from_file(config.policy_script, trajectory=i)

        def sampler_factory(i: int) -> SamplerState:
            return SamplerState(
                temperature_text=config.temperature_text,
                temperature_code=config.temperature_code,
                repetition_penalty=config.repetition_penalty,
                rolling=RepetitionStats(config.window_len, config.threshold),
            )

        trajectories = run_group(
            policy_factory, sandbox, prompt, config.rollout_limits(), sampler_factory
        )
        all_failed = all(t.terminated_by == "error" for t in trajectories)
        breakdowns, advantages = _score_group(trajectories, record, judge, config)
        group_rows = [
            {
                "group_id": record.id,
                "traj_index": i,
                "ground_truth": record.answer,
                "trajectory": trajectory_to_json(traj),
                "reward": breakdown.to_json(),
                "advantage": advantage,
            }
            for i, (traj, breakdown, advantage) in enumerate(
                zip(trajectories, breakdowns, advantages)
            )
        ]
        with rows_lock:
            rows.extend(group_rows)
            if all_failed:
                failures += 1

    try:
        if config.workers > 1:
            with ThreadPoolExecutor(max_workers=config.workers) as pool:
                list(pool.map(process, prompts))
        else:
            for record in prompts:
                process(record)
    finally:
        for supervisor in holders:
            supervisor.close_all()

    out_path = Path(args.out)
    write_archive(out_path, config, rows)
    summary = summarize(rows)
    summary_path = out_path.with_suffix(out_path.suffix + ".summary.json")
    summary_path.write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    print(
        "rollout: {n} trajectories | mean result {res:.3f} | mean consistency "
        "{cons:.3f} | mean length {length:.1f} | terminations {hist}".format(
            n=summary["trajectories"],
            res=summary["mean_result_reward"],
            cons=summary["mean_consistency_reward"],
            length=summary["mean_response_length"],
            hist=summary["terminated_by"],
        )
    )
    if failures == len(prompts):
        return EXIT_TOTAL
    if failures:
        return EXIT_PARTIAL
    return EXIT_OK


def summarize(rows: list[dict]) -> dict:
    n = len(rows)
    hist: dict[str, int] = {}
    result_sum = consistency_sum = length_sum = 0.0
    for row in rows:
        traj = row["trajectory"]
        hist[traj["terminated_by"]] = hist.get(traj["terminated_by"], 0) + 1
        reward = row.get("reward") or {}
        result_sum += reward.get("result", 0)
        consistency_sum += reward.get("consistency", 0.0)
        length_sum += sum(
            1 for ev in traj.get("token_events", ()) if ev[5]
        )
    return {
        "trajectories": n,
        "mean_result_reward": result_sum / n if n else 0.0,
        "mean_consistency_reward": consistency_sum / n if n else 0.0,
        "mean_response_length": length_sum / n if n else 0.0,
        "terminated_by": hist,
    }


def cmd_score(args: argparse.Namespace) -> int:
    config = load_run_config(args.config, {"judge_fixture": args.judge_fixture})
    try:
        manifest, rows = read_archive(args.archive)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    judge = _build_judge(config)
    groups: dict[str, list[dict]] = {}
    for row in rows:
        groups.setdefault(row["group_id"], []).append(row)
    missing = 0
    for group_id, group_rows in groups.items():
        truth = group_rows[0].get("ground_truth", "")
        if args.prompts:
            by_id = {r.id: r for r in load_prompts(args.prompts)}
            if group_id in by_id:
                truth = by_id[group_id].answer
        if not truth:
            missing += 1
            for row in group_rows:
                row["score_error"] = "missing_ground_truth"
            continue
        trajectories = [trajectory_from_json(r["trajectory"]) for r in group_rows]
        record = PromptRecord(
            id=group_id,
            image=trajectories[0].image
            or ImageMeta(path="unknown", width=1, height=1),
            question=trajectories[0].question,
            answer=truth,
        )
        breakdowns, advantages = _score_group(trajectories, record, judge, config)
        for row, breakdown, advantage in zip(group_rows, breakdowns, advantages):
            row["reward"] = breakdown.to_json()
            row["advantage"] = advantage
    out_path = Path(args.out) if args.out else Path(args.archive)
    write_archive(out_path, config, rows)
    print(f"scored {len(rows)} trajectories in {len(groups)} groups "
          f"({missing} groups missing ground truth)")
    if missing == len(groups):
        return EXIT_TOTAL
    if missing:
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_emit_sft(args: argparse.Namespace) -> int:
    if args.mask_policy not in MASK_POLICIES:
        print(f"error: unknown mask policy {args.mask_policy!r}", file=sys.stderr)
        return EXIT_USAGE
    try:
        _, rows = read_archive(args.archive)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    emitted = skipped = trainable_total = masked_total = 0
    with open(args.out, "w", encoding="utf-8") as fh:
        for row in rows:
            traj = trajectory_from_json(row["trajectory"])
            if traj.terminated_by != "answer":
                skipped += 1
                continue
            mask = compute_mask(traj, args.mask_policy)
            fh.write(emit_training_record(traj, mask) + "\n")
            emitted += 1
            trainable_total += mask.trainable_count()
            masked_total += len(mask.bits) - mask.trainable_count()
    print(
        f"emitted {emitted} records ({skipped} skipped); "
        f"trainable tokens {trainable_total}, masked tokens {masked_total}"
    )
    return EXIT_OK


def cmd_filter_executable(args: argparse.Namespace) -> int:
    config = load_run_config(args.config, {"endpoint": args.endpoint})
    try:
        samples = [
            json.loads(line)
            for line in Path(args.samples).read_text(encoding="utf-8").splitlines()
            if line.strip()
        ]
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    holders: list = []
    sandbox = _build_sandbox(config, holders)
    kept: list[dict] = []
    dropped: list[dict] = []
    try:
        for sample in samples:
            image = ImageMeta.from_json(sample["image"])
            try:
                session_id = sandbox.open(image)
            except Exception as exc:
                print(f"error: sandbox unavailable: {exc}", file=sys.stderr)
                return EXIT_TOTAL
            try:
                result = sandbox.execute(session_id, sample["code"])
            finally:
                sandbox.close(session_id)
            entry = {"id": sample.get("id"), "status": result.status}
            if result.status == "ok":
                kept.append(entry)
            else:
                entry["reason"] = result.status
                entry["detail"] = result.stderr[:200]
                dropped.append(entry)
    finally:
        for supervisor in holders:
            supervisor.close_all()
    report = {"kept": kept, "dropped": dropped}
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    print(f"kept {len(kept)} / dropped {len(dropped)} of {len(samples)} samples")
    return EXIT_OK


def cmd_print_config(args: argparse.Namespace) -> int:
    config = load_run_config(args.config)
    print(json.dumps(config.to_json(), indent=2, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sandloop",
        description="Sandboxed code execution and multi-turn rollout harness",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_serve = sub.add_parser("serve", help="run the sandbox service")
    p_serve.add_argument("--bind",
                         default=os.environ.get("SANDLOOP_BIND", "127.0.0.1:8731"),
                         help="host:port (default $SANDLOOP_BIND or 127.0.0.1:8731)")
    p_serve.add_argument("--config", default=None)
    p_serve.set_defaults(func=cmd_serve)

    p_roll = sub.add_parser("rollout", help="run rollout groups from a prompts file")
    p_roll.add_argument("prompts", help="JSONL prompt records")
    p_roll.add_argument("--policy-script", default=None,
                        help="scripted policy fixture ([turn N] blocks)")
    p_roll.add_argument("--judge-fixture", default=None)
    p_roll.add_argument("--endpoint", default=None,
                        help="remote sandbox endpoint; embedded if omitted")
    p_roll.add_argument("--group-size", type=int, default=None,
                        help=f"rollouts per prompt (default {DEFAULT_GROUP_SIZE})")
    p_roll.add_argument("--workers", type=int, default=None)
    p_roll.add_argument("--out", required=True)
    p_roll.add_argument("--config", default=None)
    p_roll.set_defaults(func=cmd_rollout)

    p_score = sub.add_parser("score", help="attach rewards and advantages")
    p_score.add_argument("archive")
    p_score.add_argument("--prompts", default=None,
                         help="join ground truths by id from this prompts file")
    p_score.add_argument("--judge-fixture", default=None)
    p_score.add_argument("--out", default=None, help="default: rewrite in place")
    p_score.add_argument("--config", default=None)
    p_score.set_defaults(func=cmd_score)

    p_sft = sub.add_parser("emit-sft", help="emit masked training records")
    p_sft.add_argument("archive")
    p_sft.add_argument("--mask-policy", default="sft_last_round_only",
                       help=f"one of {', '.join(MASK_POLICIES)}")
    p_sft.add_argument("--out", required=True)
    p_sft.set_defaults(func=cmd_emit_sft)

    p_filter = sub.add_parser(
        "filter-executable", help="keep only samples whose code runs ok"
    )
    p_filter.add_argument("samples", help="JSONL: {id, image, code}")
    p_filter.add_argument("--endpoint", default=None)
    p_filter.add_argument("--out", default=None)
    p_filter.add_argument("--config", default=None)
    p_filter.set_defaults(func=cmd_filter_executable)

    p_cfg = sub.add_parser("print-config", help="dump the effective configuration")
    p_cfg.add_argument("--config", default=None)
    p_cfg.set_defaults(func=cmd_print_config)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
