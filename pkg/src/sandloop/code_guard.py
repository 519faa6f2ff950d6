"""Static analysis and source-to-source rewriting of guest code cells.

Four independent passes run before a cell ever reaches the guest runtime:

* ``scan_dangerous``      -- deny-list scan over identifier tokens
* ``normalize_format``    -- dedent, tab expansion, trailing-whitespace strip
* ``clamp_regions``       -- bounding-box literals clamped to image bounds
* ``inject_prologue_epilogue`` -- preset variables + artifact declarations

All passes are pure functions over immutable inputs.
"""

from __future__ import annotations

import ast
import io
import tokenize
from dataclasses import dataclass, field, replace
from pathlib import Path


DEFAULT_DENY_LIST: tuple[str, ...] = ("remove", "unlink", "move", "rename")

# Sentinel lines bracketing injected code.  Fixed strings, documented in
# docs/PROTOCOL.md; strip_injection relies on them byte-for-byte.
PROLOGUE_BEGIN = "# ---8<--- sandbox prologue begin ---8<---"
PROLOGUE_END = "# ---8<--- sandbox prologue end ---8<---"
EPILOGUE_BEGIN = "# ---8<--- sandbox epilogue begin ---8<---"
EPILOGUE_END = "# ---8<--- sandbox epilogue end ---8<---"

# Prefix for every helper binding the harness creates inside the guest
# namespace; the guest shim excludes these from namespace snapshots.
SENTINEL_PREFIX = "__sbx_"

# stdout lines carrying artifact declarations out of the guest.  The
# supervisor strips them from user-visible stdout.
ARTIFACT_MARKER = "@@sandbox-artifact@@ "

DEFAULT_PROLOGUE_MODULES: tuple[str, ...] = ("os",)

TAB_STOP = 4


class UnparsableSource(Exception):
    """Cell cannot be tokenized/parsed, before or after normalization."""


@dataclass(frozen=True)
class GuestCode:
    """One code cell headed for the sandbox."""

    source: str
    origin: str = "model_generated"  # or "fixture"
    cell_index: int = 0

    def __post_init__(self) -> None:
        if not self.source.strip():
            raise ValueError("guest code source is empty")
        if self.origin not in ("model_generated", "fixture"):
            raise ValueError(f"unknown origin {self.origin!r}")


@dataclass(frozen=True)
class ScanHit:
    identifier: str
    offset: int  # byte offset into the source


@dataclass(frozen=True)
class ScanReport:
    verdict: str  # "allowed" | "blocked"
    hits: tuple[ScanHit, ...]
    deny_list_version: str
    diagnostics: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        assert (self.verdict == "blocked") == bool(self.hits)

    @property
    def blocked(self) -> bool:
        return self.verdict == "blocked"

    def to_json(self) -> dict:
        return {
            "verdict": self.verdict,
            "hits": [[h.identifier, h.offset] for h in self.hits],
            "deny_list_version": self.deny_list_version,
            "diagnostics": list(self.diagnostics),
        }

    @staticmethod
    def from_json(obj: dict) -> "ScanReport":
        return ScanReport(
            verdict=obj["verdict"],
            hits=tuple(ScanHit(i, o) for i, o in obj["hits"]),
            deny_list_version=obj["deny_list_version"],
            diagnostics=tuple(obj.get("diagnostics", ())),
        )


@dataclass(frozen=True)
class ClampEntry:
    variable_name: str
    original: tuple[int, int, int, int]
    clamped: tuple[int, int, int, int]
    span: tuple[int, int]  # byte span of the tuple expression in the input


@dataclass(frozen=True)
class ClampLog:
    entries: tuple[ClampEntry, ...] = ()
    skipped: tuple[tuple[str, str], ...] = ()  # (variable_name, reason)
    diagnostics: tuple[str, ...] = ()

    def to_json(self) -> dict:
        return {
            "entries": [
                [e.variable_name, list(e.original), list(e.clamped), list(e.span)]
                for e in self.entries
            ],
            "skipped": [list(s) for s in self.skipped],
            "diagnostics": list(self.diagnostics),
        }

    @staticmethod
    def from_json(obj: dict) -> "ClampLog":
        return ClampLog(
            entries=tuple(
                ClampEntry(n, tuple(o), tuple(c), tuple(s))
                for n, o, c, s in obj["entries"]
            ),
            skipped=tuple(tuple(s) for s in obj.get("skipped", ())),
            diagnostics=tuple(obj.get("diagnostics", ())),
        )


@dataclass(frozen=True)
class ImageMeta:
    """Image bound to a session: path plus pixel dimensions (content opaque)."""

    path: str
    width: int
    height: int

    def __post_init__(self) -> None:
        if self.width < 1 or self.height < 1:
            raise ValueError(f"invalid image dims {self.width}x{self.height}")

    def to_json(self) -> dict:
        return {"path": self.path, "width": self.width, "height": self.height}

    @staticmethod
    def from_json(obj: dict) -> "ImageMeta":
        return ImageMeta(obj["path"], obj["width"], obj["height"])


@dataclass(frozen=True)
class GuardConfig:
    """Loadable knobs for the pre-execution passes."""

    deny_list: tuple[str, ...] = DEFAULT_DENY_LIST
    clamp_names: tuple[str, ...] = ("box", "coord")
    clamp_enabled: bool = True
    prologue_modules: tuple[str, ...] = DEFAULT_PROLOGUE_MODULES


def load_guard_config(path: str | Path) -> GuardConfig:
    """Read a key=value text file; unknown keys are ignored.

    Recognized keys: deny_list, clamp_names (comma-separated),
    clamp_enabled (true/false), prologue_modules (comma-separated).
    """
    values: dict[str, str] = {}
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"bad config line (expected key=value): {raw!r}")
        key, _, val = line.partition("=")
        values[key.strip()] = val.strip()

    def csv(key: str, default: tuple[str, ...]) -> tuple[str, ...]:
        if key not in values:
            return default
        items = tuple(x.strip() for x in values[key].split(",") if x.strip())
        return items or default

    cfg = GuardConfig(
        deny_list=csv("deny_list", DEFAULT_DENY_LIST),
        clamp_names=csv("clamp_names", ("box", "coord")),
        clamp_enabled=values.get("clamp_enabled", "true").lower() != "false",
        prologue_modules=csv("prologue_modules", DEFAULT_PROLOGUE_MODULES),
    )
    return cfg


def _deny_list_version(deny_list: tuple[str, ...]) -> str:
    return "v1:" + ",".join(sorted(deny_list))


def _line_byte_starts(source: str) -> list[int]:
    starts = [0]
    data = source.encode("utf-8")
    for i, b in enumerate(data):
        if b == 0x0A:
            starts.append(i + 1)
    return starts


def _token_stream(source: str) -> list[tokenize.TokenInfo]:
    return list(tokenize.generate_tokens(io.StringIO(source).readline))


def scan_dangerous(
    code: GuestCode, deny_list: tuple[str, ...] = DEFAULT_DENY_LIST
) -> ScanReport:
    """Scan identifier tokens for deny-listed names.

    Matching is whole-token: ``my_remover`` never matches ``remove``.
    Comments and string literals are skipped by construction (they are not
    NAME tokens); string literals containing deny words are surfaced as
    diagnostics only.
    """
    if not deny_list:
        raise ValueError("deny_list must be non-empty")
    deny = set(deny_list)
    version = _deny_list_version(tuple(deny_list))

    source = code.source
    diagnostics: list[str] = []
    try:
        tokens = _token_stream(source)
    except (tokenize.TokenError, IndentationError, SyntaxError):
        # Retry on the normalized text; deny hits still count there.
        normalized = _normalize_text(source)
        try:
            tokens = _token_stream(normalized)
        except (tokenize.TokenError, IndentationError, SyntaxError) as exc:
            hit = ScanHit(identifier="<unparsable-source>", offset=0)
            return ScanReport(
                verdict="blocked",
                hits=(hit,),
                deny_list_version=version,
                diagnostics=(f"source could not be tokenized: {exc}",),
            )
        source = normalized
        diagnostics.append("source tokenized only after normalization")

    starts = _line_byte_starts(source)
    hits: list[ScanHit] = []
    for tok in tokens:
        if tok.type == tokenize.NAME and tok.string in deny:
            row, col = tok.start
            hits.append(ScanHit(tok.string, starts[row - 1] + col))
        elif tok.type == tokenize.STRING:
            lowered = tok.string.lower()
            for word in deny:
                if word in lowered:
                    diagnostics.append(
                        f"string literal at line {tok.start[0]} mentions {word!r}"
                        " (not blocked; identifiers only)"
                    )
    verdict = "blocked" if hits else "allowed"
    return ScanReport(verdict, tuple(hits), version, tuple(diagnostics))


def _normalize_text(source: str) -> str:
    lines = source.split("\n")
    expanded = [ln.expandtabs(TAB_STOP).rstrip() for ln in lines]
    indents = [len(ln) - len(ln.lstrip(" ")) for ln in expanded if ln]
    common = min(indents) if indents else 0
    if common:
        expanded = [ln[common:] if ln else ln for ln in expanded]
    return "\n".join(expanded)


def _tree_fingerprint(source: str) -> str | None:
    try:
        return ast.dump(ast.parse(source), include_attributes=False)
    except SyntaxError:
        return None


def normalize_format(code: GuestCode) -> GuestCode:
    """Dedent, expand tabs (stop 4), and strip trailing whitespace.

    The rewrite is kept only if it preserves the syntax tree; a cell whose
    tree would change (e.g. significant whitespace inside a multiline
    string) is returned untouched.  Raises UnparsableSource when neither
    the original nor the normalized text parses.
    """
    original = code.source
    normalized = _normalize_text(original)
    before = _tree_fingerprint(original)
    after = _tree_fingerprint(normalized)
    if after is None and before is None:
        raise UnparsableSource(
            f"cell {code.cell_index} does not parse before or after normalization"
        )
    if after is None or (before is not None and before != after):
        return code
    if normalized == original:
        return code
    return replace(code, source=normalized)


def _int_literal(node: ast.expr) -> int | None:
    if isinstance(node, ast.Constant) and type(node.value) is int:
        return node.value
    if (
        isinstance(node, ast.UnaryOp)
        and isinstance(node.op, ast.USub)
        and isinstance(node.operand, ast.Constant)
        and type(node.operand.value) is int
    ):
        return -node.operand.value
    return None


def _clamp_component(value: int, limit: int) -> int:
    return min(max(value, 0), limit)


def _name_matches(name: str, needles: tuple[str, ...]) -> bool:
    lowered = name.lower()
    return any(n in lowered for n in needles)


def clamp_regions(
    code: GuestCode,
    image: ImageMeta,
    clamp_names: tuple[str, ...] = ("box", "coord"),
) -> tuple[GuestCode, ClampLog]:
    """Clamp 4-integer (x1, y1, x2, y2) literals to the image bounds.

    Only assignments to names containing one of ``clamp_names``
    (case-insensitive) are touched, and only when the value is a tuple or
    list of exactly four integer literals.  x components clamp to
    [0, width], y components to [0, height].  Everything else is
    byte-identical in the output.
    """
    source = code.source
    try:
        tree = ast.parse(source)
    except SyntaxError as exc:
        raise UnparsableSource(f"cell {code.cell_index}: {exc}") from exc

    starts = _line_byte_starts(source)
    data = bytearray(source.encode("utf-8"))

    entries: list[ClampEntry] = []
    skipped: list[tuple[str, str]] = []
    diagnostics: list[str] = []
    replacements: list[tuple[int, int, bytes]] = []  # (start, end, new bytes)

    for node in ast.walk(tree):
        if isinstance(node, ast.Assign):
            names = [t.id for t in node.targets if isinstance(t, ast.Name)]
            value = node.value
        elif isinstance(node, ast.AnnAssign) and node.value is not None:
            names = [node.target.id] if isinstance(node.target, ast.Name) else []
            value = node.value
        else:
            continue
        matching = [n for n in names if _name_matches(n, clamp_names)]
        if not matching:
            continue
        var_name = matching[0]

        if not isinstance(value, (ast.Tuple, ast.List)) or len(value.elts) != 4:
            skipped.append((var_name, "value is not a 4-element tuple/list literal"))
            continue
        raw = [_int_literal(e) for e in value.elts]
        if any(v is None for v in raw):
            skipped.append((var_name, "tuple has non-integer-literal components"))
            continue
        original = tuple(raw)  # type: ignore[arg-type]
        limits = (image.width, image.height, image.width, image.height)
        clamped = tuple(_clamp_component(v, lim) for v, lim in zip(original, limits))
        if clamped == original:
            continue  # no-op clamps are not logged

        tuple_start = starts[value.lineno - 1] + value.col_offset
        tuple_end = starts[value.end_lineno - 1] + value.end_col_offset
        for elt, new_val, old_val in zip(value.elts, clamped, original):
            if new_val == old_val:
                continue
            s = starts[elt.lineno - 1] + elt.col_offset
            e = starts[elt.end_lineno - 1] + elt.end_col_offset
            replacements.append((s, e, str(new_val).encode("utf-8")))
        entries.append(ClampEntry(var_name, original, clamped, (tuple_start, tuple_end)))
        if clamped[0] >= clamped[2] or clamped[1] >= clamped[3]:
            diagnostics.append(
                f"degenerate region after clamping {var_name!r}: {clamped}"
            )

    for s, e, rep in sorted(replacements, reverse=True):
        data[s:e] = rep

    log = ClampLog(tuple(entries), tuple(skipped), tuple(diagnostics))
    new_source = data.decode("utf-8")
    if new_source == source:
        return code, log
    return replace(code, source=new_source), log


def inject_prologue_epilogue(
    code: GuestCode,
    image: ImageMeta,
    session_hint: str = "",
    modules: tuple[str, ...] = DEFAULT_PROLOGUE_MODULES,
) -> GuestCode:
    """Wrap a cell with the preset-variable prologue and artifact epilogue.

    The prologue binds ``image_path`` and imports the configured helper
    modules; the epilogue prints one ARTIFACT_MARKER line per new or
    changed string binding whose name contains ``processed_path``.  The
    original cell sits verbatim between the sentinel comment lines and can
    be recovered byte-exactly with strip_injection.
    """
    prologue_lines = [PROLOGUE_BEGIN]
    if session_hint:
        prologue_lines.append(f"# session: {session_hint}")
    for mod in modules:
        prologue_lines.append(f"import {mod}")
    prologue_lines += [
        f"image_path = {image.path!r}",
        f"{SENTINEL_PREFIX}names_before = set(globals())",
        f"{SENTINEL_PREFIX}processed_before = {{",
        "    __n: __v for __n, __v in list(globals().items())",
        "    if 'processed_path' in __n and isinstance(__v, str)",
        "}",
        PROLOGUE_END,
    ]
    epilogue_lines = [
        EPILOGUE_BEGIN,
        f"for {SENTINEL_PREFIX}n, {SENTINEL_PREFIX}v in sorted(list(globals().items())):",
        f"    if 'processed_path' in {SENTINEL_PREFIX}n and isinstance({SENTINEL_PREFIX}v, str):",
        f"        if {SENTINEL_PREFIX}processed_before.get({SENTINEL_PREFIX}n) != {SENTINEL_PREFIX}v:",
        f"            print({ARTIFACT_MARKER!r} + {SENTINEL_PREFIX}v)",
        EPILOGUE_END,
    ]
    assembled = (
        "\n".join(prologue_lines)
        + "\n"
        + code.source
        + "\n"
        + "\n".join(epilogue_lines)
        + "\n"
    )
    return replace(code, source=assembled)


def strip_injection(code: GuestCode) -> GuestCode:
    """Recover the original cell from an injected one, byte-exactly."""
    source = code.source
    pro_end = source.find(PROLOGUE_END + "\n")
    epi_begin = source.find("\n" + EPILOGUE_BEGIN)
    if pro_end < 0 or epi_begin < 0:
        return code
    inner_start = pro_end + len(PROLOGUE_END) + 1
    original = source[inner_start:epi_begin]
    return replace(code, source=original)
