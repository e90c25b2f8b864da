"""
On-disk formats.

OWFR frame dump (little-endian): b"OWFR", u32 version = 1, u32 nx, u32 ny,
then ny * nx float64 pixel values in row-major order.

Ground truth is CSV with header
``frame_id,tx_id,legit,x_true_m,y_true_m,x_claimed_m,y_claimed_m,power_w``;
claimed columns are empty for eavesdroppers.
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .sensor import Scene

MAGIC = b"OWFR"
VERSION = 1
_HEADER = struct.Struct("<4sIII")

TRUTH_HEADER = [
    "frame_id", "tx_id", "legit", "x_true_m", "y_true_m", "x_claimed_m", "y_claimed_m", "power_w",
]


def frame_bytes(pixels: np.ndarray) -> bytes:
    ny, nx = pixels.shape
    return _HEADER.pack(MAGIC, VERSION, nx, ny) + np.ascontiguousarray(pixels, dtype="<f8").tobytes()


def write_frame(path, pixels: np.ndarray) -> None:
    try:
        Path(path).write_bytes(frame_bytes(pixels))
    except OSError as exc:
        raise OSError(f"cannot write frame to {path}: {exc}") from exc


def read_frame(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ValueError(f"{path}: truncated OWFR header")
    magic, version, nx, ny = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise ValueError(f"{path}: unsupported OWFR version {version}")
    body = data[_HEADER.size:]
    if len(body) != 8 * nx * ny:
        raise ValueError(f"{path}: expected {nx * ny} pixels, found {len(body) // 8}")
    return np.frombuffer(body, dtype="<f8").reshape(ny, nx).astype(float)


def truth_rows(frame_id: int, scene: Scene) -> list[list]:
    rows = []
    for k, t in enumerate(scene.transmitters):
        cx, cy = t.claimed_position if t.claimed_position is not None else ("", "")
        rows.append([
            frame_id, k, int(t.legitimate), repr(float(t.true_position[0])),
            repr(float(t.true_position[1])),
            repr(float(cx)) if cx != "" else "", repr(float(cy)) if cy != "" else "",
            repr(float(t.beam.tx_power_P)),
        ])
    return rows


def write_truth_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRUTH_HEADER)
        w.writerows(rows)


@dataclass
class TruthRecord:
    frame_id: int
    tx_id: int
    legit: bool
    true_position: tuple[float, float]
    claimed_position: tuple[float, float] | None
    power_w: float


def read_truth_csv(path) -> list[TruthRecord]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != TRUTH_HEADER:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        for row in reader:
            claimed = None
            if row["x_claimed_m"]:
                claimed = (float(row["x_claimed_m"]), float(row["y_claimed_m"]))
            out.append(TruthRecord(
                int(row["frame_id"]), int(row["tx_id"]), bool(int(row["legit"])),
                (float(row["x_true_m"]), float(row["y_true_m"])), claimed, float(row["power_w"]),
            ))
    return out
