"""File formats shared by the pipeline stages.

Three formats live here, all self-describing (first line names the format
and its version):

* Plane files (``.planes``): raw planar float32 images for gradient-grade
  data that 8-bit quantization would corrupt. Layout is a text header ::

      labsplat-planes 1
      shape <C> <H> <W>
      end

  followed by C*H*W little-endian float32 values, plane-major, rows in
  scanline order.

* PNG previews: 8-bit renderings for humans, written through Pillow.
  Values are clipped to [0, 1] and rounded to uint8.

* Camera files: structured text, one block per view with intrinsics,
  world-to-camera extrinsics, and an optional per-view timestamp ::

      labsplat-cameras 1
      count <N>
      view <id>
      size <width> <height>
      intrinsics <fx> <fy> <cx> <cy>
      clip <near> <far>
      rotation <9 floats, row-major>
      translation <3 floats>
      time <t>

  The ``time`` line is present for every view or for none. Floats are
  written with ``repr`` so a read-back is bit-exact.
"""

from __future__ import annotations

import os

import numpy as np
from PIL import Image

from .scene import Camera

PLANES_MAGIC = "labsplat-planes 1"
CAMERAS_MAGIC = "labsplat-cameras 1"


def write_planes(path: str | os.PathLike, planes: np.ndarray) -> None:
    """Write a (C, H, W) float image as a raw planar float32 file."""
    arr = np.asarray(planes, dtype=np.float64)
    if arr.ndim != 3:
        raise ValueError(f"write_planes: expected a (C, H, W) array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("write_planes: values must be finite")
    c, h, w = arr.shape
    header = f"{PLANES_MAGIC}\nshape {c} {h} {w}\nend\n"
    data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(data)


def read_planes(path: str | os.PathLike) -> np.ndarray:
    """Read a plane file back as a (C, H, W) float64 array."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise ValueError(f"read_planes: cannot read {path}: {exc}") from exc

    lines = []
    offset = 0
    for _ in range(3):
        cut = blob.find(b"\n", offset)
        if cut < 0:
            raise ValueError(f"read_planes: {path}: truncated header")
        lines.append(blob[offset:cut].decode("ascii", errors="replace"))
        offset = cut + 1
    if lines[0] != PLANES_MAGIC:
        raise ValueError(f"read_planes: {path} is not a plane file (bad magic line)")
    parts = lines[1].split()
    if len(parts) != 4 or parts[0] != "shape":
        raise ValueError(f"read_planes: {path}: malformed shape line {lines[1]!r}")
    try:
        c, h, w = (int(p) for p in parts[1:])
    except ValueError as exc:
        raise ValueError(f"read_planes: {path}: malformed shape line {lines[1]!r}") from exc
    if min(c, h, w) < 1:
        raise ValueError(f"read_planes: {path}: non-positive dimensions in {lines[1]!r}")
    if lines[2] != "end":
        raise ValueError(f"read_planes: {path}: malformed header terminator {lines[2]!r}")

    body = blob[offset:]
    expected = c * h * w * 4
    if len(body) < expected:
        raise ValueError(f"read_planes: {path}: truncated data ({len(body)} of {expected} bytes)")
    if len(body) > expected:
        raise ValueError(f"read_planes: {path}: trailing bytes after image data")
    flat = np.frombuffer(body, dtype="<f4")
    return flat.reshape(c, h, w).astype(np.float64)


def _quantize(image: np.ndarray) -> np.ndarray:
    return np.clip(np.round(image * 255.0), 0.0, 255.0).astype(np.uint8)


def write_png(path: str | os.PathLike, image: np.ndarray) -> None:
    """Write a float image in [0, 1] as an 8-bit PNG.

    (H, W) arrays become grayscale files, (3, H, W) arrays RGB.
    """
    arr = np.asarray(image, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("write_png: values must be finite")
    if arr.ndim == 2:
        Image.fromarray(_quantize(arr), "L").save(os.fspath(path), format="PNG")
    elif arr.ndim == 3 and arr.shape[0] == 3:
        Image.fromarray(_quantize(np.moveaxis(arr, 0, 2)), "RGB").save(os.fspath(path), format="PNG")
    else:
        raise ValueError(f"write_png: expected (H, W) or (3, H, W), got shape {arr.shape}")


def read_png(path: str | os.PathLike) -> np.ndarray:
    """Read any PNG as a (3, H, W) float64 array in [0, 1]."""
    try:
        with Image.open(os.fspath(path)) as img:
            rgb = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    except OSError as exc:
        raise ValueError(f"read_png: cannot read {path}: {exc}") from exc
    return np.moveaxis(rgb, 2, 0)


def _fmt_floats(values) -> str:
    return " ".join(repr(float(v)) for v in np.asarray(values, dtype=np.float64).reshape(-1))


def write_cameras(
    path: str | os.PathLike,
    ids: "list[str] | tuple[str, ...]",
    cameras: "list[Camera] | tuple[Camera, ...]",
    times=None,
) -> None:
    """Write a camera list. `times` is None or one float per view."""
    if len(ids) != len(cameras):
        raise ValueError(f"write_cameras: {len(ids)} ids for {len(cameras)} cameras")
    if len(ids) == 0:
        raise ValueError("write_cameras: empty camera list")
    if times is not None and len(times) != len(cameras):
        raise ValueError(f"write_cameras: {len(times)} times for {len(cameras)} cameras")
    seen = set()
    for vid in ids:
        if not vid or any(ch.isspace() for ch in vid):
            raise ValueError(f"write_cameras: bad view id {vid!r}")
        if vid in seen:
            raise ValueError(f"write_cameras: duplicate view id {vid!r}")
        seen.add(vid)

    out = [CAMERAS_MAGIC, f"count {len(ids)}"]
    for i, (vid, cam) in enumerate(zip(ids, cameras)):
        out.append(f"view {vid}")
        out.append(f"size {cam.width} {cam.height}")
        out.append(f"intrinsics {_fmt_floats([cam.fx, cam.fy, cam.cx, cam.cy])}")
        out.append(f"clip {_fmt_floats([cam.near, cam.far])}")
        out.append(f"rotation {_fmt_floats(cam.rotation)}")
        out.append(f"translation {_fmt_floats(cam.translation)}")
        if times is not None:
            out.append(f"time {repr(float(times[i]))}")
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("\n".join(out) + "\n")


def _parse_floats(path, lineno: int, keyword: str, text: str, n: int) -> np.ndarray:
    parts = text.split()
    if len(parts) != n:
        raise ValueError(f"read_cameras: {path}:{lineno}: {keyword} needs {n} values, got {len(parts)}")
    try:
        vals = np.array([float(p) for p in parts], dtype=np.float64)
    except ValueError as exc:
        raise ValueError(f"read_cameras: {path}:{lineno}: non-numeric {keyword} value") from exc
    if not np.all(np.isfinite(vals)):
        raise ValueError(f"read_cameras: {path}:{lineno}: non-finite {keyword} value")
    return vals


def read_cameras(path: str | os.PathLike):
    """Read a camera file.

    Returns (ids, cameras, times) where times is None for a file without
    timestamps and a tuple of floats otherwise.
    """
    try:
        with open(path, "r", encoding="ascii") as fh:
            raw = fh.read()
    except OSError as exc:
        raise ValueError(f"read_cameras: cannot read {path}: {exc}") from exc

    lines = raw.splitlines()
    if not lines or lines[0] != CAMERAS_MAGIC:
        raise ValueError(f"read_cameras: {path} is not a camera file (bad magic line)")
    if len(lines) < 2 or not lines[1].startswith("count "):
        raise ValueError(f"read_cameras: {path}:2: expected a count line")
    try:
        count = int(lines[1].split()[1])
    except (IndexError, ValueError) as exc:
        raise ValueError(f"read_cameras: {path}:2: malformed count line") from exc
    if count < 1:
        raise ValueError(f"read_cameras: {path}:2: count must be >= 1")

    ids: list[str] = []
    cameras: list[Camera] = []
    times: list[float] = []
    pos = 2
    for _ in range(count):
        if pos >= len(lines) or not lines[pos].startswith("view "):
            raise ValueError(f"read_cameras: {path}:{pos + 1}: expected a view line")
        vid = lines[pos][len("view "):].strip()
        if not vid:
            raise ValueError(f"read_cameras: {path}:{pos + 1}: empty view id")
        if vid in ids:
            raise ValueError(f"read_cameras: {path}:{pos + 1}: duplicate view id {vid!r}")
        block: dict[str, tuple[int, str]] = {}
        pos += 1
        for keyword in ("size", "intrinsics", "clip", "rotation", "translation"):
            if pos >= len(lines) or not lines[pos].startswith(keyword + " "):
                raise ValueError(f"read_cameras: {path}:{pos + 1}: expected a {keyword} line for view {vid!r}")
            block[keyword] = (pos + 1, lines[pos][len(keyword) + 1:])
            pos += 1
        has_time = pos < len(lines) and lines[pos].startswith("time ")
        if has_time:
            if len(times) != len(ids):
                raise ValueError(f"read_cameras: {path}:{pos + 1}: time line on view {vid!r} but not on earlier views")
            tval = _parse_floats(path, pos + 1, "time", lines[pos][len("time "):], 1)
            times.append(float(tval[0]))
            pos += 1
        elif times:
            raise ValueError(f"read_cameras: {path}:{pos + 1}: view {vid!r} is missing its time line")

        size_line, size_text = block["size"]
        size_parts = size_text.split()
        if len(size_parts) != 2:
            raise ValueError(f"read_cameras: {path}:{size_line}: size needs 2 values")
        try:
            width, height = int(size_parts[0]), int(size_parts[1])
        except ValueError as exc:
            raise ValueError(f"read_cameras: {path}:{size_line}: non-integer size value") from exc
        intr = _parse_floats(path, block["intrinsics"][0], "intrinsics", block["intrinsics"][1], 4)
        clip = _parse_floats(path, block["clip"][0], "clip", block["clip"][1], 2)
        rot = _parse_floats(path, block["rotation"][0], "rotation", block["rotation"][1], 9)
        trans = _parse_floats(path, block["translation"][0], "translation", block["translation"][1], 3)
        try:
            cam = Camera(
                fx=float(intr[0]), fy=float(intr[1]), cx=float(intr[2]), cy=float(intr[3]),
                width=width, height=height,
                rotation=rot.reshape(3, 3), translation=trans,
                near=float(clip[0]), far=float(clip[1]),
            )
        except ValueError as exc:
            raise ValueError(f"read_cameras: {path}: view {vid!r}: {exc}") from exc
        ids.append(vid)
        cameras.append(cam)

    while pos < len(lines) and not lines[pos].strip():
        pos += 1
    if pos != len(lines):
        raise ValueError(f"read_cameras: {path}:{pos + 1}: trailing content after {count} views")
    return tuple(ids), tuple(cameras), (tuple(times) if times else None)
