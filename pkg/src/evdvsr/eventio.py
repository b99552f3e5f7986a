"""On-disk formats: event files, clip directories, exposure plans, manifests.

Binary event format (little-endian):
  - 16-byte ASCII header containing ``EVDV1\\n`` (null padded)
  - uint16 width, uint16 height, uint64 t_min
  - records: uint32 t offset from t_min, uint16 x, uint16 y, int8 polarity

A CSV fallback (``t,x,y,p`` per line) round-trips the event tuples losslessly;
geometry is supplied by the caller when reading CSV.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from evdvsr.errors import DataError
from evdvsr.events import EventStream, ExposureWindow

MAGIC = b"EVDV1\n"
_HEADER_PAD = 16 - len(MAGIC)
_GEOM = struct.Struct("<HHQ")
_RECORD_DTYPE = np.dtype([("t", "<u4"), ("x", "<u2"), ("y", "<u2"), ("p", "i1")])

EVENTS_FILE = "events.bin"
EVENTS_HR_FILE = "events_hr.bin"
EXPOSURES_FILE = "exposures.json"
BLUR_DIR = "blur_lr"
SHARP_DIR = "sharp_hr"
MANIFEST_FILE = "manifest.json"


def write_events_bin(stream: EventStream, path: str | Path) -> None:
    offsets = stream.t.astype(np.int64) - stream.t_min
    if len(offsets) and int(offsets.max()) > 0xFFFFFFFF:
        raise DataError("event span exceeds uint32 microsecond offsets")
    if stream.width > 0xFFFF or stream.height > 0xFFFF:
        raise DataError("sensor geometry exceeds uint16 range")
    rec = np.empty(len(stream), dtype=_RECORD_DTYPE)
    rec["t"] = offsets.astype(np.uint32)
    rec["x"] = stream.x.astype(np.uint16)
    rec["y"] = stream.y.astype(np.uint16)
    rec["p"] = stream.p
    with open(path, "wb") as f:
        f.write(MAGIC + b"\x00" * _HEADER_PAD)
        f.write(_GEOM.pack(stream.width, stream.height, stream.t_min))
        f.write(rec.tobytes())


def read_events_bin(path: str | Path) -> EventStream:
    raw = Path(path).read_bytes()
    if len(raw) < 16 + _GEOM.size or raw[:len(MAGIC)] != MAGIC:
        raise DataError(f"{path}: not an event file (bad header)")
    width, height, t_min = _GEOM.unpack_from(raw, 16)
    body = raw[16 + _GEOM.size:]
    if len(body) % _RECORD_DTYPE.itemsize:
        raise DataError(f"{path}: truncated event records")
    rec = np.frombuffer(body, dtype=_RECORD_DTYPE)
    t = rec["t"].astype(np.int64) + t_min
    t_max = int(t[-1]) if len(t) else int(t_min)
    return EventStream(t, rec["x"].astype(np.int32), rec["y"].astype(np.int32),
                       rec["p"].astype(np.int8), int(width), int(height),
                       int(t_min), t_max)


def write_events_csv(stream: EventStream, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for t, x, y, p in zip(stream.t, stream.x, stream.y, stream.p):
            f.write(f"{t},{x},{y},{p}\n")


def read_events_csv(path: str | Path, width: int, height: int) -> EventStream:
    rows = np.loadtxt(path, delimiter=",", dtype=np.int64, ndmin=2)
    if rows.size == 0:
        rows = np.empty((0, 4), dtype=np.int64)
    if rows.shape[1] != 4:
        raise DataError(f"{path}: expected t,x,y,p per line")
    t = rows[:, 0]
    t_min = int(t[0]) if len(t) else 0
    t_max = int(t[-1]) if len(t) else 0
    return EventStream(t, rows[:, 1], rows[:, 2], rows[:, 3],
                       width, height, t_min, t_max)


def save_png(path: str | Path, img: np.ndarray) -> None:
    """Write a (3, H, W) float image in [0, 1] as 8-bit sRGB PNG."""
    arr = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr.transpose(1, 2, 0)).save(path, format="PNG")


def load_png(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1)


def write_exposures(exposures: list[ExposureWindow], path: str | Path) -> None:
    data = [{"frame_index": w.frame_index, "t_start": w.t_start,
             "t_end": w.t_end} for w in exposures]
    Path(path).write_text(json.dumps(data, indent=1), encoding="utf-8")


def read_exposures(path: str | Path) -> list[ExposureWindow]:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return [ExposureWindow(int(d["t_start"]), int(d["t_end"]),
                               int(d["frame_index"])) for d in data]
    except (KeyError, ValueError, TypeError) as e:
        raise DataError(f"{path}: malformed exposure plan: {e}") from e


def write_clip_dir(clip_dir: str | Path, blurry_lr: np.ndarray,
                   sharp_hr: np.ndarray | None, events_lr: EventStream,
                   events_hr: EventStream | None,
                   exposures: list[ExposureWindow]) -> None:
    clip_dir = Path(clip_dir)
    (clip_dir / BLUR_DIR).mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(blurry_lr):
        save_png(clip_dir / BLUR_DIR / f"{i:06d}.png", frame)
    if sharp_hr is not None:
        (clip_dir / SHARP_DIR).mkdir(parents=True, exist_ok=True)
        for i, frame in enumerate(sharp_hr):
            save_png(clip_dir / SHARP_DIR / f"{i:06d}.png", frame)
    write_events_bin(events_lr, clip_dir / EVENTS_FILE)
    if events_hr is not None:
        write_events_bin(events_hr, clip_dir / EVENTS_HR_FILE)
    write_exposures(exposures, clip_dir / EXPOSURES_FILE)


class Clip:
    """Lazy view of one clip directory."""

    def __init__(self, clip_dir: str | Path):
        self.path = Path(clip_dir)
        self.name = self.path.name
        if not (self.path / BLUR_DIR).is_dir():
            raise DataError(f"{self.path}: missing {BLUR_DIR}/")
        if not (self.path / EVENTS_FILE).is_file():
            raise DataError(f"{self.path}: missing {EVENTS_FILE}")
        if not (self.path / EXPOSURES_FILE).is_file():
            raise DataError(f"{self.path}: missing {EXPOSURES_FILE}")
        self.exposures = read_exposures(self.path / EXPOSURES_FILE)
        self._blur_files = sorted((self.path / BLUR_DIR).glob("*.png"))
        self._sharp_files = sorted((self.path / SHARP_DIR).glob("*.png")) \
            if (self.path / SHARP_DIR).is_dir() else []
        if len(self._blur_files) != len(self.exposures):
            raise DataError(f"{self.path}: blur frame count does not match "
                            "the exposure plan")

    @property
    def num_frames(self) -> int:
        return len(self._blur_files)

    @property
    def has_gt(self) -> bool:
        return len(self._sharp_files) == self.num_frames

    def blurry_lr(self) -> np.ndarray:
        return np.stack([load_png(p) for p in self._blur_files])

    def sharp_hr(self) -> np.ndarray:
        if not self.has_gt:
            raise DataError(f"{self.path}: no ground-truth frames")
        return np.stack([load_png(p) for p in self._sharp_files])

    def events_lr(self) -> EventStream:
        return read_events_bin(self.path / EVENTS_FILE)

    def events_hr(self) -> EventStream:
        if not (self.path / EVENTS_HR_FILE).is_file():
            raise DataError(f"{self.path}: missing {EVENTS_HR_FILE} "
                            "(needed for edge masks)")
        return read_events_bin(self.path / EVENTS_HR_FILE)


def list_clips(root: str | Path) -> list[Clip]:
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} does not exist")
    clips = [Clip(p) for p in sorted(root.iterdir())
             if p.is_dir() and (p / EVENTS_FILE).is_file()]
    if not clips:
        raise DataError(f"no clips found under {root}")
    return clips


def write_manifest(root: str | Path, payload: dict) -> None:
    Path(root, MANIFEST_FILE).write_text(
        json.dumps(payload, indent=1, sort_keys=True), encoding="utf-8")


def read_manifest(root: str | Path) -> dict:
    path = Path(root, MANIFEST_FILE)
    if not path.is_file():
        raise DataError(f"{root}: missing {MANIFEST_FILE}")
    return json.loads(path.read_text(encoding="utf-8"))
