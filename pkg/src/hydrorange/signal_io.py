"""Multi-channel audio ingestion, one-second segmentation and range labeling.

Supported inputs are multi-channel RIFF WAV files (16/24/32-bit integer PCM
or 32-bit float) and a raw format used for synthetic data: ``<name>.f32``
holding channel-interleaved little-endian float32 samples next to a
``<name>.meta`` text sidecar with ``rate=``, ``channels=`` and ``array=``
lines.  Range labels come as a CSV with header ``minute,range_km``.
"""

from __future__ import annotations

import os
import struct
import wave
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

ARRAY_TAGS = ("VLA", "TLA", "HLA_N", "HLA_S", "SYNTH")


@dataclass(frozen=True)
class MultiChannelClip:
    """Synchronized multi-channel waveform, samples in [-1, 1] for PCM input."""

    samples: np.ndarray  # [channels, frames]
    sample_rate_hz: float
    array_tag: str = "SYNTH"

    def __post_init__(self):
        if self.samples.ndim != 2:
            raise DataError(f"clip samples must be 2-D, got shape {self.samples.shape}")
        if self.samples.shape[0] < 2:
            raise DataError(f"insufficient channels: got {self.samples.shape[0]}, need >= 2")
        if not self.sample_rate_hz > 0:
            raise DataError(f"sample rate must be positive, got {self.sample_rate_hz}")
        if self.array_tag not in ARRAY_TAGS:
            raise DataError(f"unknown array tag {self.array_tag!r}, expected one of {ARRAY_TAGS}")

    @property
    def channels(self) -> int:
        return self.samples.shape[0]

    @property
    def frames(self) -> int:
        return self.samples.shape[1]

    @property
    def duration_s(self) -> float:
        return self.frames / self.sample_rate_hz


@dataclass(frozen=True)
class LabelTable:
    """Per-minute ground-truth ranges; minutes strictly increasing."""

    minutes: np.ndarray   # int, strictly increasing
    ranges_km: np.ndarray  # positive float, same length

    def __post_init__(self):
        m = np.asarray(self.minutes)
        r = np.asarray(self.ranges_km, dtype=np.float64)
        if m.size == 0:
            raise DataError("label table is empty")
        if m.size != r.size:
            raise DataError("label table minute/range column length mismatch")
        if np.any(np.diff(m) <= 0):
            raise DataError("label table minutes must be strictly increasing")
        if np.any(r <= 0):
            raise DataError("label table ranges must be positive")
        object.__setattr__(self, "minutes", m.astype(np.int64))
        object.__setattr__(self, "ranges_km", r)

    def __len__(self) -> int:
        return len(self.minutes)

    def range_at_nearest_minute(self, t_seconds: float) -> float:
        """Range of the row whose minute mark is nearest to ``t_seconds``.

        A tie (exactly 30 s from two marks) resolves to the earlier minute.
        Times outside [first - 30 s, last + 30 s] are a coverage error.
        """
        times = self.minutes * 60.0
        if t_seconds < times[0] - 30.0 or t_seconds > times[-1] + 30.0:
            raise DataError(
                f"segment at t={t_seconds:.1f}s outside label coverage "
                f"[{times[0] - 30.0:.1f}, {times[-1] + 30.0:.1f}]"
            )
        dist = np.abs(times - t_seconds)
        # argmin returns the first (earlier) index on exact ties
        return float(self.ranges_km[int(np.argmin(dist))])


@dataclass(frozen=True)
class Segment:
    """One second of multi-channel audio, not yet labeled."""

    samples: np.ndarray  # [channels, fs]
    index: int
    sample_rate_hz: float

    @property
    def center_time_s(self) -> float:
        return self.index + 0.5


@dataclass(frozen=True)
class LabeledSegment:
    """One-second clip plus ground-truth range in km."""

    samples: np.ndarray  # [channels, fs]
    index: int
    range_km: float
    sample_rate_hz: float = field(default=1500.0)


def load_multichannel_audio(path: str, expected_rate: float | None = None) -> MultiChannelClip:
    """Load a WAV or raw float32 clip; integer PCM is scaled by the type max."""
    if not os.path.exists(path):
        raise DataError(f"file not found: {path}")
    if path.endswith(".f32"):
        clip = _read_raw_f32(path)
    else:
        clip = _read_wav(path)
    if expected_rate is not None and abs(clip.sample_rate_hz - expected_rate) > 1e-9:
        raise DataError(
            f"sample rate mismatch: file has {clip.sample_rate_hz} Hz, expected {expected_rate}"
        )
    return clip


def _read_wav(path: str) -> MultiChannelClip:
    try:
        with wave.open(path, "rb") as w:
            channels = w.getnchannels()
            rate = w.getframerate()
            width = w.getsampwidth()
            nframes = w.getnframes()
            raw = w.readframes(nframes)
    except (wave.Error, EOFError) as exc:
        # stdlib wave rejects format 3 (IEEE float); fall back to a raw parse
        data = _read_wav_float(path)
        if data is not None:
            return data
        raise DataError(f"unreadable WAV file {path}: {exc}") from exc
    if channels < 2:
        raise DataError(f"insufficient channels: {path} has {channels}, need >= 2")
    if width == 2:
        x = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    elif width == 3:
        b = np.frombuffer(raw, dtype=np.uint8).reshape(-1, 3)
        ints = (
            b[:, 0].astype(np.int32)
            | (b[:, 1].astype(np.int32) << 8)
            | (b[:, 2].astype(np.int32) << 16)
        )
        ints = np.where(ints >= 1 << 23, ints - (1 << 24), ints)
        x = ints.astype(np.float64) / float(1 << 23)
    elif width == 4:
        x = np.frombuffer(raw, dtype="<i4").astype(np.float64) / 2147483648.0
    else:
        raise DataError(f"unsupported WAV sample width {width * 8} bits in {path}")
    x = x.reshape(-1, channels).T  # de-interleave to [channels, frames]
    return MultiChannelClip(np.ascontiguousarray(x), float(rate))


def _read_wav_float(path: str) -> MultiChannelClip | None:
    """Minimal RIFF parser for 32-bit float WAV (format tag 3)."""
    with open(path, "rb") as fh:
        header = fh.read(12)
        if len(header) < 12 or header[:4] != b"RIFF" or header[8:12] != b"WAVE":
            return None
        fmt = None
        while True:
            chunk = fh.read(8)
            if len(chunk) < 8:
                return None
            cid, size = chunk[:4], struct.unpack("<I", chunk[4:])[0]
            if cid == b"fmt ":
                fmt = fh.read(size)
            elif cid == b"data":
                data = fh.read(size)
                break
            else:
                fh.seek(size + (size & 1), os.SEEK_CUR)
        if fmt is None:
            return None
        tag, channels, rate = struct.unpack("<HHI", fmt[:8])
        bits = struct.unpack("<H", fmt[14:16])[0]
        if tag != 3 or bits != 32:
            return None
        if channels < 2:
            raise DataError(f"insufficient channels: {path} has {channels}, need >= 2")
        x = np.frombuffer(data, dtype="<f4").astype(np.float64).reshape(-1, channels).T
        return MultiChannelClip(np.ascontiguousarray(x), float(rate))


def _read_raw_f32(path: str) -> MultiChannelClip:
    meta_path = path[: -len(".f32")] + ".meta"
    if not os.path.exists(meta_path):
        raise DataError(f"missing sidecar {meta_path} for raw clip {path}")
    meta = {}
    with open(meta_path) as fh:
        for line in fh:
            line = line.strip()
            if line and "=" in line:
                key, val = line.split("=", 1)
                meta[key.strip()] = val.strip()
    try:
        rate = float(meta["rate"])
        channels = int(meta["channels"])
    except (KeyError, ValueError) as exc:
        raise DataError(f"bad sidecar {meta_path}: needs rate= and channels= lines") from exc
    tag = meta.get("array", "SYNTH")
    x = np.fromfile(path, dtype="<f4")
    if x.size % channels != 0:
        raise DataError(f"{path}: {x.size} samples not divisible by {channels} channels")
    x = x.reshape(-1, channels).T
    if channels < 2:
        raise DataError(f"insufficient channels: {path} has {channels}, need >= 2")
    return MultiChannelClip(np.ascontiguousarray(x), rate, tag)


def write_raw_clip(clip: MultiChannelClip, base_path: str) -> tuple[str, str]:
    """Write ``<base>.f32`` + ``<base>.meta``; round-trips float32 bit-exactly."""
    f32_path = base_path + ".f32"
    meta_path = base_path + ".meta"
    interleaved = np.ascontiguousarray(clip.samples.T, dtype="<f4")
    interleaved.tofile(f32_path)
    with open(meta_path, "w") as fh:
        fh.write(f"rate={clip.sample_rate_hz:g}\n")
        fh.write(f"channels={clip.channels}\n")
        fh.write(f"array={clip.array_tag}\n")
    return f32_path, meta_path


def read_label_csv(path: str) -> LabelTable:
    if not os.path.exists(path):
        raise DataError(f"label file not found: {path}")
    minutes, ranges = [], []
    with open(path) as fh:
        header = fh.readline().strip()
        if header.replace(" ", "") != "minute,range_km":
            raise DataError(f"{path}: expected header 'minute,range_km', got {header!r}")
        for ln, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 2:
                raise DataError(f"{path}:{ln}: expected two columns")
            minutes.append(int(parts[0]))
            ranges.append(float(parts[1]))
    return LabelTable(np.asarray(minutes), np.asarray(ranges))


def write_label_csv(table: LabelTable, path: str) -> None:
    with open(path, "w") as fh:
        fh.write("minute,range_km\n")
        for m, r in zip(table.minutes, table.ranges_km):
            fh.write(f"{int(m)},{r:.6f}\n")


def segment_clip(clip: MultiChannelClip) -> list[Segment]:
    """Cut into non-overlapping one-second pieces; a trailing partial second
    is discarded, never padded."""
    fs = int(round(clip.sample_rate_hz))
    if clip.frames < fs:
        raise DataError(f"clip shorter than 1 s ({clip.frames} frames at {fs} Hz)")
    n = clip.frames // fs
    return [
        Segment(clip.samples[:, k * fs : (k + 1) * fs], k, clip.sample_rate_hz)
        for k in range(n)
    ]


def attach_labels(segments: list[Segment], table: LabelTable) -> list[LabeledSegment]:
    """Label each segment with the range of the nearest minute to its center time."""
    out = []
    for seg in segments:
        r = table.range_at_nearest_minute(seg.center_time_s)
        out.append(LabeledSegment(seg.samples, seg.index, r, seg.sample_rate_hz))
    return out
