"""Binary file formats: PFM, Middlebury ``.flo``, PPM/PGM and the MTN1
tensor container used for checkpoints."""
from __future__ import annotations

import json
import os
import re
import struct
from pathlib import Path

import numpy as np

MTN1_MAGIC = b"MTN1"
FLO_MAGIC = b"PIEH"


class FormatError(ValueError):
    pass


def _read(path) -> bytes:
    return Path(path).read_bytes()


# ----------------------------------------------------------------------- PFM

_PFM_HEADER = re.compile(rb"^(P[Ff])\s+(\d+)\s+(\d+)\s+([-+0-9.eE]+)\s")


def write_pfm(path, data) -> None:
    a = np.asarray(data, dtype=np.float32)
    if a.ndim == 2:
        tag = b"Pf"
    elif a.ndim == 3 and a.shape[2] == 3:
        tag = b"PF"
    else:
        raise ValueError(f"PFM holds [H, W] or [H, W, 3] data, got {a.shape}")
    H, W = a.shape[:2]
    header = tag + b"\n%d %d\n-1.0\n" % (W, H)
    Path(path).write_bytes(header + np.ascontiguousarray(a[::-1]).astype("<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    raw = _read(path)
    m = _PFM_HEADER.match(raw)
    if not m:
        raise FormatError(f"{path}: malformed PFM header")
    tag, W, H, scale = m.group(1), int(m.group(2)), int(m.group(3)), float(m.group(4))
    ch = 1 if tag == b"Pf" else 3
    if scale == 0:
        raise FormatError(f"{path}: zero scale")
    dtype = "<f4" if scale < 0 else ">f4"
    n = W * H * ch
    body = raw[m.end() :]
    if len(body) < 4 * n:
        raise FormatError(f"{path}: truncated PFM payload")
    a = np.frombuffer(body[: 4 * n], dtype=dtype).astype(np.float32)
    a = a.reshape((H, W) if ch == 1 else (H, W, 3))
    return a[::-1].copy()


# ----------------------------------------------------------------------- flo


def write_flo(path, flow) -> None:
    a = np.asarray(flow, dtype=np.float32)
    if a.ndim != 3 or a.shape[2] != 2:
        raise ValueError(f"flow must be [H, W, 2], got {a.shape}")
    H, W = a.shape[:2]
    Path(path).write_bytes(FLO_MAGIC + struct.pack("<ii", W, H) + a.astype("<f4").tobytes())


def read_flo(path) -> np.ndarray:
    raw = _read(path)
    if len(raw) < 12 or raw[:4] != FLO_MAGIC:
        raise FormatError(f"{path}: missing PIEH magic")
    W, H = struct.unpack("<ii", raw[4:12])
    if W <= 0 or H <= 0:
        raise FormatError(f"{path}: bad extents {W}x{H}")
    n = W * H * 2
    if len(raw) - 12 < 4 * n:
        raise FormatError(f"{path}: truncated flow payload")
    return np.frombuffer(raw[12 : 12 + 4 * n], dtype="<f4").astype(np.float32).reshape(H, W, 2)


# ------------------------------------------------------------------ PPM / PGM

_PNM_HEADER = re.compile(rb"^(P[56])\s+(?:#.*\s+)*(\d+)\s+(?:#.*\s+)*(\d+)\s+(?:#.*\s+)*(\d+)\s")


def write_pnm(path, image) -> None:
    """Write ``uint8`` ``[H, W, 3]`` as P6 or ``[H, W]`` as P5; floats in
    [0, 1] are scaled and rounded."""
    a = np.asarray(image)
    if a.dtype != np.uint8:
        a = np.clip(np.rint(np.asarray(a, dtype=np.float64) * 255), 0, 255).astype(np.uint8)
    if a.ndim == 2:
        tag = b"P5"
    elif a.ndim == 3 and a.shape[2] == 3:
        tag = b"P6"
    else:
        raise ValueError(f"PPM holds [H, W, 3] and PGM [H, W], got {a.shape}")
    H, W = a.shape[:2]
    Path(path).write_bytes(tag + b"\n%d %d\n255\n" % (W, H) + a.tobytes())


def read_pnm(path) -> np.ndarray:
    raw = _read(path)
    m = _PNM_HEADER.match(raw)
    if not m:
        raise FormatError(f"{path}: malformed PPM/PGM header")
    tag, W, H, maxval = m.group(1), int(m.group(2)), int(m.group(3)), int(m.group(4))
    if maxval != 255:
        raise FormatError(f"{path}: only maxval 255 is supported")
    ch = 3 if tag == b"P6" else 1
    n = W * H * ch
    body = raw[m.end() :]
    if len(body) < n:
        raise FormatError(f"{path}: truncated image payload")
    a = np.frombuffer(body[:n], dtype=np.uint8).reshape((H, W, 3) if ch == 3 else (H, W))
    return a.copy()


# ---------------------------------------------------------------------- MTN1


def mtn1_bytes(array) -> bytes:
    a = np.asarray(array, dtype="<f4")
    head = MTN1_MAGIC + struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return head + np.ascontiguousarray(a).tobytes()


def write_mtn1(path, array) -> None:
    Path(path).write_bytes(mtn1_bytes(array))


def read_mtn1(path) -> np.ndarray:
    raw = _read(path)
    if raw[:4] != MTN1_MAGIC:
        raise FormatError(f"{path}: missing MTN1 magic")
    if len(raw) < 8:
        raise FormatError(f"{path}: truncated header")
    (rank,) = struct.unpack("<I", raw[4:8])
    end = 8 + 4 * rank
    if len(raw) < end:
        raise FormatError(f"{path}: truncated extents")
    shape = struct.unpack(f"<{rank}I", raw[8:end])
    n = int(np.prod(shape, dtype=np.int64))
    if len(raw) - end < 4 * n:
        raise FormatError(f"{path}: truncated payload")
    return np.frombuffer(raw[end : end + 4 * n], dtype="<f4").astype(np.float32).reshape(shape)


def save_tensors(directory, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """One MTN1 file per tensor plus ``manifest.json`` listing names in order."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (name, arr) in enumerate(tensors.items()):
        fname = f"t{i:04d}.mtn"
        write_mtn1(d / fname, arr)
        entries.append({"name": name, "file": fname, "shape": list(np.shape(arr))})
    manifest = {"format": "MTN1", "tensors": entries, "meta": meta or {}}
    tmp = d / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    os.replace(tmp, d / "manifest.json")


def load_tensors(directory) -> tuple[dict[str, np.ndarray], dict]:
    d = Path(directory)
    try:
        manifest = json.loads((d / "manifest.json").read_text())
    except FileNotFoundError as exc:
        raise FormatError(f"{d}: no manifest.json") from exc
    out = {}
    for e in manifest["tensors"]:
        a = read_mtn1(d / e["file"])
        if list(a.shape) != e["shape"]:
            raise FormatError(f"{e['file']}: shape {a.shape} disagrees with manifest {e['shape']}")
        out[e["name"]] = a
    return out, manifest.get("meta", {})
