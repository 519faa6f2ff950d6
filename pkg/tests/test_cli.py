from __future__ import annotations

import json
import os
import signal
import subprocess
import sys
import time
from pathlib import Path

import pytest

from sandloop.cli import (
    EXIT_OK,
    EXIT_TOTAL,
    EXIT_USAGE,
    RunConfig,
    load_prompts,
    load_run_config,
    main,
    read_archive,
)
from tests.conftest import make_png

FIXTURES = Path(__file__).parent / "fixtures"
REPO_ROOT = Path(__file__).parent.parent


def run_cli(argv: list[str], cwd: Path | None = None) -> int:
    old_cwd = os.getcwd()
    if cwd is not None:
        os.chdir(cwd)
    try:
        return main(argv)
    finally:
        os.chdir(old_cwd)


@pytest.fixture
def fast_config(tmp_path) -> Path:
    cfg = tmp_path / "run.cfg"
    cfg.write_text("timeout = 3.0\nmax_tokens_per_turn = 4096\n")
    return cfg


def rollout_args(tmp_path, fast_config, out_name="run.jsonl") -> list[str]:
    return [
        "rollout",
        str(FIXTURES / "prompts_3.jsonl"),
        "--policy-script", str(FIXTURES / "policy_crop.txt"),
        "--judge-fixture", str(FIXTURES / "judge_table.json"),
        "--out", str(tmp_path / out_name),
        "--config", str(fast_config),
    ]


# --- config ------------------------------------------------------------------

def test_defaults_match_protocol_values():
    config = RunConfig()
    assert config.timeout == 10.0
    assert config.max_iterations == 5
    assert config.group_size == 4
    assert config.window_len == 32
    assert config.threshold == 0.5
    assert config.beta == 0.001
    assert config.repetition_penalty == 1.05
    assert config.temperature_text == 1.0
    assert config.temperature_code == 0.0


def test_print_config_dump(capsys):
    assert run_cli(["print-config"]) == EXIT_OK
    dump = json.loads(capsys.readouterr().out)
    assert dump["timeout"] == 10.0
    assert dump["beta"] == 0.001
    assert dump["repetition_penalty"] == 1.05


def test_config_precedence(tmp_path, monkeypatch):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("timeout = 7\ngroup_size = 8\n")
    config = load_run_config(str(cfg))
    assert config.timeout == 7.0 and config.group_size == 8
    monkeypatch.setenv("SANDLOOP_TIMEOUT", "4.5")
    config = load_run_config(str(cfg))
    assert config.timeout == 4.5
    config = load_run_config(str(cfg), {"timeout": 1.25})
    assert config.timeout == 1.25


def test_help_shows_defaults(capsys):
    with pytest.raises(SystemExit):
        from sandloop.cli import build_parser

        build_parser().parse_args(["rollout", "--help"])
    out = capsys.readouterr().out
    assert "default 4" in out


def test_load_prompts_rejects_duplicates(tmp_path):
    p = tmp_path / "p.jsonl"
    row = {"id": "x", "image": {"path": "a", "width": 1, "height": 1}, "question": "q"}
    p.write_text(json.dumps(row) + "\n" + json.dumps(row) + "\n")
    with pytest.raises(ValueError):
        load_prompts(p)


# --- rollout -------------------------------------------------------------------

def test_rollout_three_prompts_twelve_trajectories(tmp_path, fast_config, capsys):
    code = run_cli(rollout_args(tmp_path, fast_config), cwd=REPO_ROOT)
    assert code == EXIT_OK
    manifest, rows = read_archive(tmp_path / "run.jsonl")
    assert manifest["schema"] == "archive/v1"
    assert len(rows) == 12
    assert {r["group_id"] for r in rows} == {"p1", "p2", "p3"}
    for row in rows:
        assert row["trajectory"]["terminated_by"] == "answer"
        assert row["reward"]["composed"] == 2.0  # result 1, consistency 1, format 1
        assert row["advantage"] == 0.0  # uniform group
    summary = json.loads(
        (tmp_path / "run.jsonl.summary.json").read_text()
    )
    assert summary["trajectories"] == 12
    assert summary["terminated_by"] == {"answer": 12}
    assert summary["mean_result_reward"] == 1.0
    out = capsys.readouterr().out
    assert "12 trajectories" in out


def test_rollout_worker_pool(tmp_path, fast_config):
    args = rollout_args(tmp_path, fast_config) + ["--workers", "2"]
    code = run_cli(args, cwd=REPO_ROOT)
    assert code == EXIT_OK
    _, rows = read_archive(tmp_path / "run.jsonl")
    assert len(rows) == 12
    assert {r["group_id"] for r in rows} == {"p1", "p2", "p3"}
    # stable ids: rows of one group stay contiguous and indexed 0..3
    by_group: dict[str, list[int]] = {}
    for row in rows:
        by_group.setdefault(row["group_id"], []).append(row["traj_index"])
    assert all(v == [0, 1, 2, 3] for v in by_group.values())


def test_rollout_empty_prompts_usage_error(tmp_path, fast_config):
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    code = run_cli([
        "rollout", str(empty),
        "--policy-script", str(FIXTURES / "policy_no_code.txt"),
        "--out", str(tmp_path / "x.jsonl"),
    ])
    assert code == EXIT_USAGE


def test_rollout_sandbox_down_total_failure(tmp_path, fast_config):
    args = rollout_args(tmp_path, fast_config) + ["--endpoint", "http://127.0.0.1:1"]
    code = run_cli(args, cwd=REPO_ROOT)
    assert code == EXIT_TOTAL
    _, rows = read_archive(tmp_path / "run.jsonl")
    assert len(rows) == 12
    assert all(r["trajectory"]["terminated_by"] == "error" for r in rows)


# --- score ------------------------------------------------------------------------

def test_score_idempotent(tmp_path, fast_config):
    run_cli(rollout_args(tmp_path, fast_config), cwd=REPO_ROOT)
    archive = tmp_path / "run.jsonl"
    _, before = read_archive(archive)
    code = run_cli([
        "score", str(archive),
        "--judge-fixture", str(FIXTURES / "judge_table.json"),
        "--out", str(tmp_path / "rescored.jsonl"),
    ])
    assert code == EXIT_OK
    _, after = read_archive(tmp_path / "rescored.jsonl")
    for b, a in zip(before, after):
        assert a["reward"] == b["reward"]
        assert a["advantage"] == b["advantage"]
        assert a["trajectory"]["transcript"] == b["trajectory"]["transcript"]


def test_score_missing_ground_truth(tmp_path, fast_config):
    run_cli(rollout_args(tmp_path, fast_config), cwd=REPO_ROOT)
    archive = tmp_path / "run.jsonl"
    _, rows = read_archive(archive)
    for row in rows:
        row["ground_truth"] = ""
    from sandloop.cli import write_archive

    write_archive(archive, RunConfig(), rows)
    code = run_cli(["score", str(archive)])
    assert code == EXIT_TOTAL


def test_uniform_rewards_zero_advantages(tmp_path, fast_config):
    run_cli(rollout_args(tmp_path, fast_config), cwd=REPO_ROOT)
    _, rows = read_archive(tmp_path / "run.jsonl")
    assert all(row["advantage"] == 0.0 for row in rows)


def test_judge_swap_changes_only_rule_stage_failures(tmp_path, fast_config):
    run_cli(rollout_args(tmp_path, fast_config), cwd=REPO_ROOT)
    archive = tmp_path / "run.jsonl"
    _, rows = read_archive(archive)
    # make group p1 rule-stage-fail: its truth no longer matches "D. MICHIGAN"
    for row in rows:
        if row["group_id"] == "p1":
            row["ground_truth"] = "forty-seven"
    from sandloop.cli import write_archive

    write_archive(archive, RunConfig(), rows)
    strict = tmp_path / "strict.json"
    strict.write_text(json.dumps({"default_equivalence": 0.0}))
    generous = tmp_path / "generous.json"
    generous.write_text(json.dumps({"default_equivalence": 1.0}))
    run_cli(["score", str(archive), "--judge-fixture", str(strict),
             "--out", str(tmp_path / "a.jsonl")])
    run_cli(["score", str(archive), "--judge-fixture", str(generous),
             "--out", str(tmp_path / "b.jsonl")])
    _, a_rows = read_archive(tmp_path / "a.jsonl")
    _, b_rows = read_archive(tmp_path / "b.jsonl")
    for a, b in zip(a_rows, b_rows):
        if a["group_id"] == "p1":
            assert not a["reward"]["rule_stage_matched"]
            assert a["reward"]["result"] == 0 and b["reward"]["result"] == 1
        else:
            assert a["reward"] == b["reward"]  # rule-decided rows untouched


def test_malformed_archive_line_reports_lineno(tmp_path, fast_config, capsys):
    run_cli(rollout_args(tmp_path, fast_config), cwd=REPO_ROOT)
    archive = tmp_path / "run.jsonl"
    lines = archive.read_text().splitlines()
    lines[3] = "{not valid json"
    archive.write_text("\n".join(lines) + "\n")
    code = run_cli(["emit-sft", str(archive), "--out", str(tmp_path / "x.jsonl")])
    assert code == EXIT_USAGE
    err = capsys.readouterr().err
    assert ":4:" in err  # 1-based line number of the bad line


# --- emit-sft -----------------------------------------------------------------------

def test_emit_sft_last_round_counts(tmp_path, fast_config, capsys):
    run_cli(rollout_args(tmp_path, fast_config), cwd=REPO_ROOT)
    out = tmp_path / "sft.jsonl"
    code = run_cli([
        "emit-sft", str(tmp_path / "run.jsonl"),
        "--mask-policy", "sft_last_round_only",
        "--out", str(out),
    ])
    assert code == EXIT_OK
    lines = out.read_text().splitlines()
    assert len(lines) == 12
    from sandloop.trajectory_model import parse_training_record

    for line in lines:
        traj, mask = parse_training_record(line)
        t_last = traj.segments[-2]
        answer = traj.segments[-1]
        assert t_last.kind == "think" and answer.kind == "answer"
        assert mask.trainable_count() == t_last.length() + answer.length()
        for seg in traj.segments:
            if seg.kind == "sandbox_output":
                assert all(mask.bits[i] == 0 for i in range(*seg.token_span))


def test_emit_sft_all_rounds_counts(tmp_path, fast_config):
    run_cli(rollout_args(tmp_path, fast_config), cwd=REPO_ROOT)
    out = tmp_path / "sft_all.jsonl"
    run_cli([
        "emit-sft", str(tmp_path / "run.jsonl"),
        "--mask-policy", "sft_all_rounds",
        "--out", str(out),
    ])
    from sandloop.trajectory_model import parse_training_record, token_count

    for line in out.read_text().splitlines():
        traj, mask = parse_training_record(line)
        assert mask.trainable_count() == token_count(traj)


def test_emit_sft_unknown_policy(tmp_path):
    code = run_cli(["emit-sft", "nope.jsonl", "--mask-policy", "bogus",
                    "--out", str(tmp_path / "x")])
    assert code == EXIT_USAGE


def test_pipeline_composes_losslessly(tmp_path, fast_config):
    run_cli(rollout_args(tmp_path, fast_config), cwd=REPO_ROOT)
    archive = tmp_path / "run.jsonl"
    run_cli([
        "score", str(archive),
        "--judge-fixture", str(FIXTURES / "judge_table.json"),
        "--out", str(tmp_path / "scored.jsonl"),
    ])
    run_cli([
        "emit-sft", str(tmp_path / "scored.jsonl"),
        "--mask-policy", "rl_exclude_sandbox",
        "--out", str(tmp_path / "sft.jsonl"),
    ])
    _, rollout_rows = read_archive(archive)
    from sandloop.trajectory_model import parse_training_record

    sft_lines = (tmp_path / "sft.jsonl").read_text().splitlines()
    assert len(sft_lines) == len(rollout_rows)
    for row, line in zip(rollout_rows, sft_lines):
        traj, _ = parse_training_record(line)
        assert traj.prompt_id == row["group_id"]
        assert traj.transcript == row["trajectory"]["transcript"]


# --- filter-executable ------------------------------------------------------------------

def test_filter_executable(tmp_path, capsys):
    img = make_png(tmp_path / "img.png", 32, 32)
    image = {"path": str(img), "width": 32, "height": 32}
    samples = [
        {"id": "good", "image": image, "code": "print('fine')"},
        {"id": "danger", "image": image, "code": "import os\nos.remove('x')"},
        {"id": "slow", "image": image, "code": "import time\ntime.sleep(60)"},
        {"id": "broken", "image": image, "code": "1/0"},
    ]
    samples_path = tmp_path / "samples.jsonl"
    samples_path.write_text("".join(json.dumps(s) + "\n" for s in samples))
    cfg = tmp_path / "c.cfg"
    cfg.write_text("timeout = 2\n")
    out = tmp_path / "report.json"
    code = run_cli([
        "filter-executable", str(samples_path),
        "--config", str(cfg), "--out", str(out),
    ])
    assert code == EXIT_OK
    report = json.loads(out.read_text())
    assert [k["id"] for k in report["kept"]] == ["good"]
    reasons = {d["id"]: d["reason"] for d in report["dropped"]}
    assert reasons == {
        "danger": "blocked", "slow": "timeout", "broken": "guest_error"
    }


# --- serve -----------------------------------------------------------------------------

def test_serve_health_and_sigterm(tmp_path):
    env = dict(os.environ)
    env["PYTHONPATH"] = str(REPO_ROOT / "src")
    proc = subprocess.Popen(
        [sys.executable, "-m", "sandloop.cli", "serve", "--bind", "127.0.0.1:0"],
        stdout=subprocess.PIPE,
        stderr=subprocess.STDOUT,
        text=True,
        env=env,
    )
    try:
        line = proc.stdout.readline()
        assert "listening on" in line
        endpoint = line.strip().rsplit(" ", 1)[-1]
        from sandloop.sandbox_service import SandboxClient

        client = SandboxClient(endpoint, timeout=5)
        assert client.health()["status"] == "ok"
        proc.send_signal(signal.SIGTERM)
        assert proc.wait(timeout=10) == 0
    finally:
        if proc.poll() is None:
            proc.kill()


def test_serve_sigterm_drains_inflight_execution(tmp_path):
    env = dict(os.environ)
    env["PYTHONPATH"] = str(REPO_ROOT / "src")
    proc = subprocess.Popen(
        [sys.executable, "-m", "sandloop.cli", "serve", "--bind", "127.0.0.1:0"],
        stdout=subprocess.PIPE,
        stderr=subprocess.STDOUT,
        text=True,
        env=env,
    )
    try:
        endpoint = proc.stdout.readline().strip().rsplit(" ", 1)[-1]
        from sandloop.code_guard import ImageMeta
        from sandloop.sandbox_exec import Limits
        from sandloop.sandbox_service import SandboxClient

        img = make_png(tmp_path / "i.png", 8, 8)
        client = SandboxClient(endpoint, timeout=30)
        limits = Limits(max_wall_time=5.0, max_output_bytes=4096,
                        max_cells_per_session=4)
        sid = client.open_session(
            ImageMeta(path=str(img), width=8, height=8), limits
        )
        results: list = []

        def slow_execute():
            results.append(
                client.execute(sid, "import time\ntime.sleep(1.5)\nprint('done')",
                               limits)
            )

        import threading

        worker = threading.Thread(target=slow_execute)
        worker.start()
        time.sleep(0.4)
        proc.send_signal(signal.SIGTERM)
        worker.join(timeout=20)
        assert proc.wait(timeout=20) == 0
        # the in-flight cell completed before shutdown finished
        assert results and results[0].status == "ok"
        assert results[0].stdout == "done\n"
    finally:
        if proc.poll() is None:
            proc.kill()


def test_serve_port_in_use(tmp_path):
    import socket

    sock = socket.socket()
    sock.bind(("127.0.0.1", 0))
    port = sock.getsockname()[1]
    sock.listen(1)
    try:
        code = run_cli(["serve", "--bind", f"127.0.0.1:{port}"])
        assert code == EXIT_USAGE
    finally:
        sock.close()
