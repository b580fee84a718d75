"""
Audio front end: resample to 16 kHz, fix length to 5 s, 128-bin log-mel fbank.

Framing is pinned for reproducibility: 25 ms Hann window, 10 ms hop,
512-point FFT, 128 triangular mel filters over 20 Hz - 8 kHz, natural log
with a 1e-10 floor. A 5 s input gives 498 frames.

Feature cache: one `<sample_id>.pafb` per sample, little-endian
    magic "PAFB", u32 version=1, u32 T, u32 n_mels, then T*n_mels float32.
"""

import logging
import math
import os
import struct
import tempfile
import warnings
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import librosa
import numpy as np
import soundfile as sf
from scipy import signal

from .datamodel import SampleMeta
from .errors import DataError

logger = logging.getLogger("pafa.features")

TARGET_RATE_HZ = 16000
TARGET_SECONDS = 5.0
FRAME_LEN = 400   # 25 ms
FRAME_HOP = 160   # 10 ms
N_FFT = 512
N_MELS = 128
F_MIN_HZ = 20.0
F_MAX_HZ = 8000.0
LOG_FLOOR = 1e-10
KAISER_BETA = 5.0
STD_FLOOR = 1e-8

MIN_INPUT_RATE_HZ = 4000
MAX_INPUT_RATE_HZ = 48000

CACHE_MAGIC = b"PAFB"
CACHE_VERSION = 1
_CACHE_HEADER = struct.Struct("<4sIII")

# per_coefficient: mean/variance per mel bin over frames
# utterance: one mean/variance over the whole matrix
# none: raw log energies
NORMALIZATIONS = ("per_coefficient", "utterance", "none")


@dataclass(frozen=True)
class WaveBuffer:
    samples: np.ndarray
    rate_hz: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise DataError(f"WaveBuffer must be mono, got shape {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise DataError("WaveBuffer contains NaN or Inf")
        if self.rate_hz < 1:
            raise DataError(f"Sample rate must be positive, got {self.rate_hz}")
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.rate_hz


@dataclass(frozen=True)
class FbankMatrix:
    frames: np.ndarray  # T x n_mels

    @property
    def shape(self) -> Tuple[int, int]:
        return self.frames.shape


# =============================================================================
# SIGNAL OPERATIONS
# =============================================================================

def resample(w: WaveBuffer, target_hz: int = TARGET_RATE_HZ) -> WaveBuffer:
    """
    Band-limited resampling (polyphase windowed-sinc, Kaiser window).

    Output length is round(n_in * target / rate_in). Same-rate input is
    returned unchanged.
    """
    if len(w) == 0:
        raise DataError("Cannot resample an empty buffer")
    if w.rate_hz == target_hz:
        return w
    g = math.gcd(w.rate_hz, target_hz)
    up, down = target_hz // g, w.rate_hz // g
    y = signal.resample_poly(w.samples, up, down, window=("kaiser", KAISER_BETA))
    n_out = int(round(len(w) * target_hz / w.rate_hz))
    if len(y) < n_out:
        y = np.concatenate([y, np.zeros(n_out - len(y))])
    return WaveBuffer(y[:n_out], target_hz)


def fix_length(w: WaveBuffer, target_s: float = TARGET_SECONDS) -> WaveBuffer:
    """Pad by repetition or truncate (keeping the head) to exactly target_s."""
    if w.rate_hz != TARGET_RATE_HZ:
        raise DataError(f"fix_length expects {TARGET_RATE_HZ} Hz input, got {w.rate_hz}")
    if len(w) == 0:
        raise DataError("Cannot fix the length of an empty buffer")
    n_target = int(round(target_s * w.rate_hz))
    x = w.samples
    if len(x) == n_target:
        return w
    if len(x) > n_target:
        return WaveBuffer(x[:n_target], w.rate_hz)
    reps = -(-n_target // len(x))
    return WaveBuffer(np.tile(x, reps)[:n_target], w.rate_hz)


@lru_cache(maxsize=1)
def mel_filterbank() -> np.ndarray:
    """128 x 257 triangular (HTK-scale, unnormalized) mel filters."""
    with warnings.catch_warnings():
        # the lowest bands are narrower than one FFT bin
        warnings.simplefilter("ignore", UserWarning)
        fb = librosa.filters.mel(
            sr=TARGET_RATE_HZ, n_fft=N_FFT, n_mels=N_MELS,
            fmin=F_MIN_HZ, fmax=F_MAX_HZ, htk=True, norm=None, dtype=np.float64,
        )
    fb.setflags(write=False)
    return fb


@lru_cache(maxsize=1)
def _analysis_window() -> np.ndarray:
    window = signal.get_window("hann", FRAME_LEN, fftbins=True)
    window.setflags(write=False)
    return window


def _standardize(x: np.ndarray, axis) -> np.ndarray:
    """Zero mean, unit variance; near-constant slices map to exactly 0."""
    mean = x.mean(axis=axis, keepdims=True)
    std = x.std(axis=axis, keepdims=True)
    flat = std <= STD_FLOOR
    return np.where(flat, 0.0, (x - mean) / np.where(flat, 1.0, std))


def frame_count(n_samples: int) -> int:
    return (n_samples - FRAME_LEN) // FRAME_HOP + 1


def log_mel_fbank(w: WaveBuffer, normalization: str = "per_coefficient") -> FbankMatrix:
    """
    Log-mel filterbank of a 5 s, 16 kHz buffer: shape (498, 128).

    Silence maps to log(1e-10) everywhere before normalization and to
    zeros after it.
    """
    n_expected = int(round(TARGET_SECONDS * TARGET_RATE_HZ))
    if w.rate_hz != TARGET_RATE_HZ or len(w) != n_expected:
        raise DataError(
            f"log_mel_fbank expects {n_expected} samples at {TARGET_RATE_HZ} Hz, "
            f"got {len(w)} at {w.rate_hz} Hz"
        )
    if normalization not in NORMALIZATIONS:
        raise DataError(f"Unknown normalization {normalization!r}")

    frames = librosa.util.frame(w.samples, frame_length=FRAME_LEN, hop_length=FRAME_HOP, axis=0)
    spectrum = np.fft.rfft(frames * _analysis_window(), n=N_FFT, axis=1)
    power = spectrum.real ** 2 + spectrum.imag ** 2
    energies = power @ mel_filterbank().T
    logmel = np.log(energies + LOG_FLOOR)

    if normalization == "per_coefficient":
        logmel = _standardize(logmel, axis=0)
    elif normalization == "utterance":
        logmel = _standardize(logmel, axis=None)

    return FbankMatrix(np.ascontiguousarray(logmel))


# =============================================================================
# AUDIO LOADING
# =============================================================================

def load_cycle(meta: SampleMeta, base_dir: Union[str, Path]) -> WaveBuffer:
    """Read one respiratory cycle (mono) from its source recording."""
    path = Path(base_dir) / meta.source_path
    try:
        info = sf.info(str(path))
        start = int(round(meta.cycle_start_s * info.samplerate))
        stop = min(int(round(meta.cycle_end_s * info.samplerate)), info.frames)
        data, rate = sf.read(str(path), start=start, stop=stop, dtype="float64", always_2d=True)
    except (OSError, RuntimeError, sf.LibsndfileError) as e:
        raise DataError(f"Cannot read audio for {meta.sample_id} from {path}: {e}") from e
    if not (MIN_INPUT_RATE_HZ <= rate <= MAX_INPUT_RATE_HZ):
        logger.warning(f"{meta.sample_id}: sample rate {rate} Hz outside "
                       f"{MIN_INPUT_RATE_HZ}-{MAX_INPUT_RATE_HZ}")
    return WaveBuffer(data.mean(axis=1), int(rate))


def extract_sample(meta: SampleMeta, base_dir: Union[str, Path],
                   normalization: str = "per_coefficient") -> FbankMatrix:
    """Full front end for one manifest row."""
    wave = load_cycle(meta, base_dir)
    return log_mel_fbank(fix_length(resample(wave)), normalization)


# =============================================================================
# FEATURE CACHE
# =============================================================================

def encode_fbank(fbank: FbankMatrix) -> bytes:
    frames = np.asarray(fbank.frames, dtype="<f4")
    t, n_mels = frames.shape
    return _CACHE_HEADER.pack(CACHE_MAGIC, CACHE_VERSION, t, n_mels) + frames.tobytes(order="C")


def decode_fbank(data: bytes, source: str = "<bytes>") -> FbankMatrix:
    if len(data) < _CACHE_HEADER.size:
        raise DataError(f"{source}: truncated feature file")
    magic, version, t, n_mels = _CACHE_HEADER.unpack_from(data)
    if magic != CACHE_MAGIC:
        raise DataError(f"{source}: bad magic {magic!r}")
    if version != CACHE_VERSION:
        raise DataError(f"{source}: unsupported feature version {version}")
    expected = _CACHE_HEADER.size + 4 * t * n_mels
    if len(data) != expected:
        raise DataError(f"{source}: expected {expected} bytes, got {len(data)}")
    frames = np.frombuffer(data, dtype="<f4", offset=_CACHE_HEADER.size).reshape(t, n_mels)
    return FbankMatrix(frames.astype(np.float64))


def atomic_write_bytes(path: Path, payload: bytes) -> None:
    """Write to a temp file in the same directory, then rename over `path`."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class FeatureCache:
    """Per-sample fbank files under `<root>/<normalization>/`."""

    def __init__(self, root: Union[str, Path], normalization: str = "utterance"):
        if normalization not in NORMALIZATIONS:
            raise DataError(f"Unknown normalization {normalization!r}")
        self.root = Path(root)
        self.normalization = normalization
        self.directory = self.root / normalization

    def path_for(self, sample_id: str) -> Path:
        return self.directory / f"{sample_id}.pafb"

    def has(self, sample_id: str) -> bool:
        return self.path_for(sample_id).exists()

    def write(self, sample_id: str, fbank: FbankMatrix) -> Path:
        path = self.path_for(sample_id)
        atomic_write_bytes(path, encode_fbank(fbank))
        return path

    def read(self, sample_id: str) -> FbankMatrix:
        path = self.path_for(sample_id)
        try:
            data = path.read_bytes()
        except OSError as e:
            raise DataError(f"Missing features for {sample_id}: {e}") from e
        return decode_fbank(data, str(path))

    def missing(self, sample_ids: Sequence[str]) -> List[str]:
        return [s for s in sample_ids if not self.has(s)]


def cache_stats(cache: FeatureCache, sample_ids: Sequence[str]) -> Dict[str, int]:
    present = sum(1 for s in sample_ids if cache.has(s))
    return {"cached": present, "missing": len(sample_ids) - present}
