"""Image file I/O.

PNG (RGB8) is the production format; dpi rides in the pHYs chunk when
present. Plain PGM (P2) and PPM (P3) are supported for test fixtures so
oracles can be hand-authored in text; they carry no resolution, so the
caller-supplied default applies. The default resolution when nothing is
known is 150 dpi.
"""

from __future__ import annotations

import io
import re
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DecodeError
from .imaging import GrayImage, RasterImage

DEFAULT_DPI = 150.0


def _snap_dpi(value: float) -> float:
    """Undo the pHYs meters round-trip: 150 dpi comes back as 150.0124."""
    nearest = round(value)
    if nearest > 0 and abs(value - nearest) < 0.05:
        return float(nearest)
    return float(value)


def read_image(path: str | Path, default_dpi: float = DEFAULT_DPI) -> RasterImage:
    """Read PNG/PPM/PGM into an RGB raster with its resolution."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix in (".ppm", ".pgm", ".pnm"):
        return _read_netpbm(path, default_dpi)
    try:
        with Image.open(path) as im:
            dpi_info = im.info.get("dpi")
            rgb = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except Exception as exc:
        raise DecodeError(f"cannot decode {path.name}: {exc}") from exc
    dpi = _snap_dpi(float(dpi_info[0])) if dpi_info and dpi_info[0] else default_dpi
    return RasterImage(rgb, dpi)


def write_png(img: RasterImage | GrayImage, path: str | Path) -> None:
    """Write a PNG carrying the image dpi in its pHYs chunk."""
    Image.fromarray(img.pixels).save(Path(path), format="PNG", dpi=(img.dpi, img.dpi))


def png_bytes(img: RasterImage | GrayImage) -> bytes:
    """Encode to PNG bytes (deterministic for identical pixels and dpi)."""
    buf = io.BytesIO()
    Image.fromarray(img.pixels).save(buf, format="PNG", dpi=(img.dpi, img.dpi))
    return buf.getvalue()


def decode_png(data: bytes, default_dpi: float = DEFAULT_DPI) -> RasterImage:
    try:
        with Image.open(io.BytesIO(data)) as im:
            dpi_info = im.info.get("dpi")
            rgb = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except Exception as exc:
        raise DecodeError(f"cannot decode PNG bytes: {exc}") from exc
    dpi = _snap_dpi(float(dpi_info[0])) if dpi_info and dpi_info[0] else default_dpi
    return RasterImage(rgb, dpi)


_TOKEN = re.compile(rb"\S+")


def _netpbm_tokens(data: bytes):
    """Yield whitespace-separated tokens, skipping # comments."""
    for line in data.split(b"\n"):
        body = line.split(b"#", 1)[0]
        for match in _TOKEN.finditer(body):
            yield match.group(0)


def _read_netpbm(path: Path, default_dpi: float) -> RasterImage:
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise DecodeError(f"cannot read {path.name}: {exc}") from exc
    tokens = _netpbm_tokens(data)
    try:
        magic = next(tokens).decode("ascii")
        if magic not in ("P2", "P3"):
            raise DecodeError(f"{path.name}: unsupported netpbm magic {magic!r}")
        width = int(next(tokens))
        height = int(next(tokens))
        maxval = int(next(tokens))
        if maxval != 255:
            raise DecodeError(f"{path.name}: only maxval 255 is supported")
        channels = 3 if magic == "P3" else 1
        values = [int(next(tokens)) for _ in range(width * height * channels)]
    except (StopIteration, ValueError) as exc:
        raise DecodeError(f"{path.name}: truncated or malformed netpbm file") from exc
    arr = np.array(values, dtype=np.uint8)
    if channels == 1:
        gray = arr.reshape(height, width)
        rgb = np.repeat(gray[:, :, None], 3, axis=2)
    else:
        rgb = arr.reshape(height, width, 3)
    return RasterImage(rgb, default_dpi)


def read_pgm(path: str | Path, default_dpi: float = DEFAULT_DPI) -> GrayImage:
    """Read a plain PGM (P2) as grayscale."""
    img = _read_netpbm(Path(path), default_dpi)
    return GrayImage(img.pixels[:, :, 0], img.dpi)


def write_pgm(img: GrayImage, path: str | Path) -> None:
    lines = [f"P2\n{img.width} {img.height}\n255\n"]
    for row in img.pixels:
        lines.append(" ".join(str(int(v)) for v in row) + "\n")
    Path(path).write_text("".join(lines), encoding="ascii")


def write_ppm(img: RasterImage, path: str | Path) -> None:
    lines = [f"P3\n{img.width} {img.height}\n255\n"]
    for row in img.pixels:
        lines.append(" ".join(str(int(v)) for v in row.ravel()) + "\n")
    Path(path).write_text("".join(lines), encoding="ascii")
