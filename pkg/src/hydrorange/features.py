"""Branch-input feature extraction: log-mel spectrograms and whitened
cross-correlation (GCC-PHAT) lag maps.

Both features share the same framing (default: 40-sample Hann window, 50%
overlap), so a one-second segment at 1500 Hz yields T = 74 frames.  The
log-mel path uses an unpadded DFT (21 bins at the defaults); the
correlation path re-transforms the same windowed frames with a longer
zero-padded DFT so that the retained lag window (default 64 lags) is free
of circular aliasing.

Lag-sign convention: ``gcc_phat(spec_a, spec_b, L)[t, L//2 + d]`` peaks at
``d`` when channel b lags channel a by d samples.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .signal_io import LabeledSegment, LabelTable, MultiChannelClip, attach_labels, segment_clip

PHAT_EPS = 1e-12
CACHE_MAGIC = b"ACAF"
CACHE_VERSION = 1
_REC_HEADER = struct.Struct("<IfHHHHH")  # index, range_km, C, T, M, pairs, L


@dataclass(frozen=True)
class StftConfig:
    window_len: int = 40
    hop: int = 20

    def __post_init__(self):
        if not 0 < self.hop <= self.window_len:
            raise DataError(f"need 0 < hop <= window_len, got hop={self.hop} window={self.window_len}")

    def frame_count(self, n_samples: int) -> int:
        if n_samples < self.window_len:
            raise DataError(f"input of {n_samples} samples shorter than window {self.window_len}")
        return (n_samples - self.window_len) // self.hop + 1


@dataclass(frozen=True)
class MelConfig:
    n_mels: int = 64
    f_min: float = 0.0
    f_max: float | None = None  # None = fs/2
    log_floor: float = 1e-10

    def resolve_f_max(self, fs: float) -> float:
        f_max = fs / 2.0 if self.f_max is None else self.f_max
        if not self.f_min < f_max <= fs / 2.0:
            raise DataError(f"need f_min < f_max <= fs/2, got [{self.f_min}, {f_max}] at fs={fs}")
        return f_max


@dataclass(frozen=True)
class FeaturePair:
    """Per-segment branch inputs; both tensors share the frame axis."""

    logmel: np.ndarray  # [channels, T, n_mels]
    gcc: np.ndarray     # [pairs, T, L]

    def __post_init__(self):
        if self.logmel.shape[1] != self.gcc.shape[1]:
            raise DataError("log-mel and correlation maps disagree on frame count")
        if not (np.isfinite(self.logmel).all() and np.isfinite(self.gcc).all()):
            raise DataError("non-finite values in feature pair")

    @property
    def frames(self) -> int:
        return self.logmel.shape[1]


def hann_window(n: int) -> np.ndarray:
    """Periodic Hann window, the common STFT variant."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def frame_signal(x: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """Slice a 1-D signal into [T, window_len] frames (view, no copy)."""
    x = np.asarray(x)
    t = cfg.frame_count(x.shape[-1])
    view = np.lib.stride_tricks.sliding_window_view(x, cfg.window_len, axis=-1)
    return view[..., :: cfg.hop, :][..., :t, :]


def stft(x: np.ndarray, cfg: StftConfig, n_fft: int | None = None) -> np.ndarray:
    """Hann-windowed STFT of a 1-D signal -> complex [T, n_fft//2 + 1].

    With the default n_fft = window_len there is no zero padding
    (21 bins for a 40-sample window).
    """
    n_fft = cfg.window_len if n_fft is None else n_fft
    if n_fft < cfg.window_len:
        raise DataError(f"n_fft {n_fft} shorter than window {cfg.window_len}")
    frames = frame_signal(x, cfg) * hann_window(cfg.window_len)
    return np.fft.rfft(frames, n=n_fft, axis=-1)


def mel_scale(f_hz):
    return 2595.0 * np.log10(1.0 + np.asarray(f_hz, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(mel: MelConfig, n_bins: int, fs: float) -> np.ndarray:
    """Triangular peak-1 filterbank [n_mels, n_bins] on the HTK mel scale.

    With many mels over few DFT bins a triangle can fall between bin
    centers; such rows get a single unit weight at the nearest bin so that
    every row keeps positive sum.
    """
    f_max = mel.resolve_f_max(fs)
    bin_hz = np.arange(n_bins) * fs / (2.0 * (n_bins - 1))
    edges_hz = mel_to_hz(np.linspace(mel_scale(mel.f_min), mel_scale(f_max), mel.n_mels + 2))
    fb = np.zeros((mel.n_mels, n_bins))
    for i in range(mel.n_mels):
        lo, center, hi = edges_hz[i], edges_hz[i + 1], edges_hz[i + 2]
        rising = (bin_hz - lo) / max(center - lo, 1e-12)
        falling = (hi - bin_hz) / max(hi - center, 1e-12)
        fb[i] = np.clip(np.minimum(rising, falling), 0.0, None)
        if fb[i].sum() == 0.0:
            fb[i, int(np.argmin(np.abs(bin_hz - center)))] = 1.0
    return fb


def logmel(spec: np.ndarray, mel: MelConfig, fs: float, fb: np.ndarray | None = None) -> np.ndarray:
    """Project |spec|^2 through the mel filterbank, then natural log with floor."""
    if fb is None:
        fb = mel_filterbank(mel, spec.shape[-1], fs)
    elif fb.shape[1] != spec.shape[-1]:
        raise DataError(f"filterbank has {fb.shape[1]} bins, spectrogram {spec.shape[-1]}")
    power = (spec.real ** 2 + spec.imag ** 2) @ fb.T
    return np.log(np.maximum(power, mel.log_floor))


def gcc_fft_len(window_len: int, lags: int) -> int:
    """Smallest power of two holding window + lag span without circular wrap."""
    n = 1
    while n < window_len + lags:
        n *= 2
    return n


def gcc_phat(spec_a: np.ndarray, spec_b: np.ndarray, lags: int) -> np.ndarray:
    """Whitened cross-correlation per frame, center ``lags`` lags retained.

    Inputs are same-shape complex spectrograms [T, bins] from a DFT of
    length 2*(bins-1); that length must cover window + lags, which the
    ``stft(..., n_fft=gcc_fft_len(...))`` path guarantees.  Output lag axis
    runs -lags//2 .. lags - lags//2 - 1; a positive peak position means
    channel b lags channel a.
    """
    if spec_a.shape != spec_b.shape:
        raise DataError(f"spectrogram shape mismatch: {spec_a.shape} vs {spec_b.shape}")
    n_fft = 2 * (spec_a.shape[-1] - 1)
    if lags > n_fft:
        raise DataError(f"cannot retain {lags} lags from a {n_fft}-point transform")
    cross = np.conj(spec_a) * spec_b
    cross /= np.abs(cross) + PHAT_EPS
    corr = np.fft.irfft(cross, n=n_fft, axis=-1)
    half = lags // 2
    return np.concatenate([corr[..., n_fft - half:], corr[..., : lags - half]], axis=-1)


def channel_pairs(channels: int) -> list[tuple[int, int]]:
    """All unordered pairs (i < j) in lexicographic order."""
    return [(i, j) for i in range(channels) for j in range(i + 1, channels)]


def featurize_segment(
    seg,
    stft_cfg: StftConfig = StftConfig(),
    mel_cfg: MelConfig = MelConfig(),
    lags: int = 64,
    fb: np.ndarray | None = None,
) -> FeaturePair:
    """Compute the two branch inputs for one segment (Segment or LabeledSegment)."""
    x = np.asarray(seg.samples, dtype=np.float64)
    fs = seg.sample_rate_hz
    if x.ndim != 2 or x.shape[0] < 2:
        raise DataError("featurize needs a [channels >= 2, samples] segment")
    frames = frame_signal(x, stft_cfg) * hann_window(stft_cfg.window_len)
    spec = np.fft.rfft(frames, n=stft_cfg.window_len, axis=-1)  # [C, T, bins]
    if fb is None:
        fb = mel_filterbank(mel_cfg, spec.shape[-1], fs)
    lm = logmel(spec, mel_cfg, fs, fb=fb).astype(np.float32)

    n_fft = gcc_fft_len(stft_cfg.window_len, lags)
    spec_g = np.fft.rfft(frames, n=n_fft, axis=-1)  # [C, T, n_fft//2+1]
    pairs = channel_pairs(x.shape[0])
    gcc = np.empty((len(pairs), lm.shape[1], lags), dtype=np.float32)
    for p, (i, j) in enumerate(pairs):
        gcc[p] = gcc_phat(spec_g[i], spec_g[j], lags)
    return FeaturePair(lm, gcc)


class FeatureSet:
    """A dataset of featurized segments with labels, held as dense arrays."""

    def __init__(self, indices, ranges_km, logmel, gcc):
        self.indices = np.asarray(indices, dtype=np.int64)
        self.ranges_km = np.asarray(ranges_km, dtype=np.float32)
        self.logmel = logmel  # [N, C, T, M] float32
        self.gcc = gcc        # [N, pairs, T, L] float32
        self.agc_applied = False
        n = len(self.indices)
        if not (len(self.ranges_km) == self.logmel.shape[0] == self.gcc.shape[0] == n):
            raise DataError("feature set arrays disagree on segment count")

    def __len__(self) -> int:
        return len(self.indices)

    @property
    def shapes(self) -> tuple[tuple, tuple]:
        return self.logmel.shape[1:], self.gcc.shape[1:]

    def subset(self, sel) -> "FeatureSet":
        fs = FeatureSet(self.indices[sel], self.ranges_km[sel], self.logmel[sel], self.gcc[sel])
        fs.agc_applied = self.agc_applied
        return fs


def featurize_clip(
    clip: MultiChannelClip,
    table: LabelTable,
    stft_cfg: StftConfig = StftConfig(),
    mel_cfg: MelConfig = MelConfig(),
    lags: int = 64,
    waveform_gain=None,
) -> FeatureSet:
    """Segment, label and featurize a whole clip.

    ``waveform_gain`` optionally maps a segment's samples to rescaled
    samples before feature extraction (used when gain control is applied at
    the waveform instead of the feature tensors).
    """
    segments = attach_labels(segment_clip(clip), table)
    return featurize_segments(segments, stft_cfg, mel_cfg, lags, waveform_gain)


def featurize_segments(
    segments: list[LabeledSegment],
    stft_cfg: StftConfig = StftConfig(),
    mel_cfg: MelConfig = MelConfig(),
    lags: int = 64,
    waveform_gain=None,
) -> FeatureSet:
    if not segments:
        raise DataError("no segments to featurize")
    n_bins = stft_cfg.window_len // 2 + 1
    fb = mel_filterbank(mel_cfg, n_bins, segments[0].sample_rate_hz)
    n = len(segments)
    indices = np.empty(n, dtype=np.int64)
    ranges = np.empty(n, dtype=np.float32)
    lms = gccs = None
    for k, seg in enumerate(segments):
        if waveform_gain is not None:
            seg = LabeledSegment(
                waveform_gain(seg.samples), seg.index, seg.range_km, seg.sample_rate_hz
            )
        pair = featurize_segment(seg, stft_cfg, mel_cfg, lags, fb=fb)
        if lms is None:
            lms = np.empty((n,) + pair.logmel.shape, dtype=np.float32)
            gccs = np.empty((n,) + pair.gcc.shape, dtype=np.float32)
        indices[k] = seg.index
        ranges[k] = seg.range_km
        lms[k] = pair.logmel
        gccs[k] = pair.gcc
    return FeatureSet(indices, ranges, lms, gccs)


def write_cache(fs: FeatureSet, path: str) -> None:
    """Write the binary feature cache (magic ACAF, little-endian float32)."""
    n, c, t, m = fs.logmel.shape
    pairs, lag = fs.gcc.shape[1], fs.gcc.shape[3]
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(struct.pack("<I", CACHE_VERSION))
        for k in range(n):
            fh.write(_REC_HEADER.pack(int(fs.indices[k]), float(fs.ranges_km[k]), c, t, m, pairs, lag))
            fh.write(np.ascontiguousarray(fs.logmel[k], dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(fs.gcc[k], dtype="<f4").tobytes())


def read_cache(path: str) -> FeatureSet:
    if not os.path.exists(path):
        raise DataError(f"feature cache not found: {path}")
    file_size = os.path.getsize(path)
    with open(path, "rb") as fh:
        if fh.read(4) != CACHE_MAGIC:
            raise DataError(f"{path}: not a feature cache (bad magic)")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CACHE_VERSION:
            raise DataError(f"{path}: unsupported cache version {version}")
        head = fh.read(_REC_HEADER.size)
        if len(head) < _REC_HEADER.size:
            raise DataError(f"{path}: cache holds no segments")
        idx, rng, c, t, m, pairs, lag = _REC_HEADER.unpack(head)
        rec_size = _REC_HEADER.size + 4 * (c * t * m + pairs * t * lag)
        payload = file_size - 8
        if payload % rec_size != 0:
            raise DataError(f"{path}: truncated cache (size {file_size})")
        n = payload // rec_size
        indices = np.empty(n, dtype=np.int64)
        ranges = np.empty(n, dtype=np.float32)
        lms = np.empty((n, c, t, m), dtype=np.float32)
        gccs = np.empty((n, pairs, t, lag), dtype=np.float32)
        for k in range(n):
            if k > 0:
                head = fh.read(_REC_HEADER.size)
                rec = _REC_HEADER.unpack(head)
                idx, rng = rec[0], rec[1]
                if rec[2:] != (c, t, m, pairs, lag):
                    raise DataError(f"{path}: inconsistent record shapes")
            indices[k] = idx
            ranges[k] = rng
            lms[k] = np.fromfile(fh, dtype="<f4", count=c * t * m).reshape(c, t, m)
            gccs[k] = np.fromfile(fh, dtype="<f4", count=pairs * t * lag).reshape(pairs, t, lag)
    return FeatureSet(indices, ranges, lms, gccs)
