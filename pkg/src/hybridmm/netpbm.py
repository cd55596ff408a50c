"""Binary NetPBM (P6) reading and writing."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .vision import Image


class NetPBMError(ValueError):
    def __init__(self, offset: int, msg: str):
        super().__init__(f"P6 parse error at byte {offset}: {msg}")
        self.offset = offset


def parse_p6(buf: bytes) -> Image:
    if buf[:2] != b"P6":
        raise NetPBMError(0, "missing P6 magic")
    pos = 2
    fields: list[int] = []
    while len(fields) < 3:
        # whitespace and comments between header fields
        while pos < len(buf) and (buf[pos : pos + 1].isspace() or buf[pos : pos + 1] == b"#"):
            if buf[pos : pos + 1] == b"#":
                end = buf.find(b"\n", pos)
                pos = len(buf) if end < 0 else end + 1
            else:
                pos += 1
        start = pos
        while pos < len(buf) and buf[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise NetPBMError(pos, "expected a decimal header field")
        fields.append(int(buf[start:pos]))
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise NetPBMError(pos, "expected a single whitespace byte after maxval")
    pos += 1
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise NetPBMError(pos, f"degenerate size {width}x{height}")
    if not 0 < maxval < 256:
        raise NetPBMError(pos, f"unsupported maxval {maxval}")
    need = width * height * 3
    if len(buf) - pos < need:
        raise NetPBMError(len(buf), f"raster truncated: need {need} bytes, have {len(buf) - pos}")
    px = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos).reshape(height, width, 3).copy()
    if maxval != 255:
        px = np.rint(px.astype(np.float64) * (255.0 / maxval)).astype(np.uint8)
    return Image(px)


def read_p6(path: str | os.PathLike) -> Image:
    return parse_p6(Path(path).read_bytes())


def encode_p6(img: Image) -> bytes:
    return f"P6\n{img.width} {img.height}\n255\n".encode() + np.ascontiguousarray(img.pixels).tobytes()


def write_p6(path: str | os.PathLike, img: Image) -> None:
    Path(path).write_bytes(encode_p6(img))


def read_frames(directory: str | os.PathLike) -> list[Path]:
    """P6 frame files of a video directory in lexicographic order."""
    paths = sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in (".ppm", ".pnm"))
    return paths
