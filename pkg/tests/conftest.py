from __future__ import annotations

import struct
import zlib
from pathlib import Path

import pytest

from sandloop.code_guard import ImageMeta
from sandloop.sandbox_exec import SandboxConfig, SandboxSupervisor


def make_png(path: Path, width: int = 8, height: int = 6) -> Path:
    """Write a minimal valid grayscale PNG without any image library."""

    def chunk(tag: bytes, payload: bytes) -> bytes:
        return (
            struct.pack(">I", len(payload))
            + tag
            + payload
            + struct.pack(">I", zlib.crc32(tag + payload) & 0xFFFFFFFF)
        )

    ihdr = struct.pack(">IIBBBBB", width, height, 8, 0, 0, 0, 0)
    raw = b"".join(b"\x00" + b"\x7f" * width for _ in range(height))
    data = (
        b"\x89PNG\r\n\x1a\n"
        + chunk(b"IHDR", ihdr)
        + chunk(b"IDAT", zlib.compress(raw))
        + chunk(b"IEND", b"")
    )
    path.write_bytes(data)
    return path


@pytest.fixture
def image_file(tmp_path) -> Path:
    return make_png(tmp_path / "input.png", 1000, 800)


@pytest.fixture
def image_meta(image_file) -> ImageMeta:
    return ImageMeta(path=str(image_file), width=1000, height=800)


@pytest.fixture
def supervisor(tmp_path):
    sup = SandboxSupervisor(SandboxConfig(tmp_root=str(tmp_path / "work")))
    yield sup
    sup.close_all()
