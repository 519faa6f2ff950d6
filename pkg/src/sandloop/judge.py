"""Judge clients: scalar verdicts for answers and reasoning quality.

A judge speaks one request/response schema over HTTP, or reads a fixture
table (the deterministic stub used by all tests).  Verdicts are scalars
clamped to [0, 1] with a short rationale.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol


class JudgeUnavailable(Exception):
    """The judge endpoint could not produce a verdict."""


@dataclass(frozen=True)
class JudgeVerdict:
    score: float
    rationale: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "score", min(max(self.score, 0.0), 1.0))


class JudgeClient(Protocol):
    def equivalence(self, question: str, candidate: str, reference: str) -> JudgeVerdict: ...
    def consistency(self, think_tail: str, answer: str) -> JudgeVerdict: ...
    def process_quality(self, think: str) -> JudgeVerdict: ...


def _norm(text: str) -> str:
    return " ".join(text.split()).casefold()


class StubJudge:
    """Deterministic judge backed by a fixture table.

    Table format (JSON): {"equivalence": [{"candidate":..., "reference":...,
    "score":..., "rationale":...}], "consistency": [{"think_tail":...,
    "answer":..., "score":...}], "process": [{"think":..., "score":...}],
    "default": 0.0}.  Lookup keys are whitespace/case normalized.
    """

    def __init__(self, table: dict | None = None, default: float = 0.0):
        table = table or {}
        self.default = float(table.get("default", default))
        self.defaults = {
            kind: float(table.get(f"default_{kind}", self.default))
            for kind in ("equivalence", "consistency", "process")
        }
        self._equiv = {
            (_norm(row["candidate"]), _norm(row["reference"])): row
            for row in table.get("equivalence", ())
        }
        self._cons = {
            (_norm(row.get("think_tail", "")), _norm(row["answer"])): row
            for row in table.get("consistency", ())
        }
        self._proc = {_norm(row["think"]): row for row in table.get("process", ())}
        self.requests: list[dict] = []  # recorded for fixture assertions

    @classmethod
    def from_file(cls, path: str | Path) -> "StubJudge":
        return cls(json.loads(Path(path).read_text(encoding="utf-8")))

    def _verdict(self, row: dict | None, kind: str) -> JudgeVerdict:
        if row is None:
            return JudgeVerdict(self.defaults[kind], "no fixture entry")
        return JudgeVerdict(float(row["score"]), row.get("rationale", "fixture"))

    def equivalence(self, question: str, candidate: str, reference: str) -> JudgeVerdict:
        self.requests.append(
            {"kind": "equivalence", "question": question, "candidate": candidate,
             "reference": reference}
        )
        return self._verdict(self._equiv.get((_norm(candidate), _norm(reference))), "equivalence")

    def consistency(self, think_tail: str, answer: str) -> JudgeVerdict:
        self.requests.append(
            {"kind": "consistency", "think_tail": think_tail, "answer": answer}
        )
        row = self._cons.get((_norm(think_tail), _norm(answer)))
        if row is None:
            # fall back to answer-only match so fixtures stay short
            row = next(
                (r for k, r in self._cons.items() if k[1] == _norm(answer) and not k[0]),
                None,
            )
        return self._verdict(row, "consistency")

    def process_quality(self, think: str) -> JudgeVerdict:
        self.requests.append({"kind": "process", "think": think})
        return self._verdict(self._proc.get(_norm(think)), "process")


class HttpJudge:
    """Judge over HTTP: POST {kind, ...} -> {"score": float, "rationale": str}."""

    def __init__(self, endpoint: str, timeout: float = 30.0):
        self.endpoint = endpoint.rstrip("/")
        self.timeout = timeout

    def _post(self, payload: dict) -> JudgeVerdict:
        import urllib.error
        import urllib.request

        body = json.dumps(payload).encode("utf-8")
        req = urllib.request.Request(
            self.endpoint + "/judge",
            data=body,
            headers={"Content-Type": "application/json"},
        )
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                obj = json.loads(resp.read().decode("utf-8"))
        except (urllib.error.URLError, OSError, ValueError) as exc:
            raise JudgeUnavailable(str(exc)) from exc
        return JudgeVerdict(float(obj["score"]), obj.get("rationale", ""))

    def equivalence(self, question: str, candidate: str, reference: str) -> JudgeVerdict:
        return self._post(
            {"kind": "equivalence", "question": question, "candidate": candidate,
             "reference": reference}
        )

    def consistency(self, think_tail: str, answer: str) -> JudgeVerdict:
        return self._post(
            {"kind": "consistency", "think_tail": think_tail, "answer": answer}
        )

    def process_quality(self, think: str) -> JudgeVerdict:
        return self._post({"kind": "process", "think": think})
