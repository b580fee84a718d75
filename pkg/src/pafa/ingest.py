"""
Build manifests from an ICBHI directory or from the synthetic generator.

ICBHI layout: a flat directory of `{patient}_{rec}_{loc}_{mode}_{equip}.wav`
files, each paired with a same-basename `.txt` annotation file holding one
respiratory cycle per line (start, end, crackle bit, wheeze bit).

The synthetic generator stands in for inter-patient variability: every
patient gets one fixed nuisance transform (gain, spectral tilt, resonance
shift) applied to all of its samples.
"""

import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import soundfile as sf

from .datamodel import ClassLabel4, Manifest, SampleMeta, label_from_bits, write_manifest
from .errors import DataError, ParseError, UsageError

logger = logging.getLogger("pafa.ingest")

SYNTH_RATE_HZ = 16000
SYNTH_TRAIN_FRACTION = 0.6

# Nuisance ranges at nuisance_strength=1
MAX_GAIN_DB = 6.0
MAX_TILT_DB_PER_OCT = 3.0
MAX_RESONANCE_SHIFT = 0.15

RESONANCE_CENTER_HZ = 800.0
RESONANCE_WIDTH_HZ = 150.0
RESONANCE_PEAK_DB = 8.0
TILT_REFERENCE_HZ = 500.0
NOISE_RMS = 0.05


# =============================================================================
# ICBHI
# =============================================================================

@dataclass(frozen=True)
class IcbhiRecording:
    patient: int
    recording_index: str
    chest_location: str
    acquisition_mode: str
    equipment: str
    wav_path: str = ""
    annotation_path: str = ""

    @property
    def basename(self) -> str:
        return "_".join([
            str(self.patient), self.recording_index, self.chest_location,
            self.acquisition_mode, self.equipment,
        ])


def parse_icbhi_filename(name: str, root: Optional[Union[str, Path]] = None) -> IcbhiRecording:
    """
    Parse `101_1b1_Al_sc_Meditron[.wav]` into recording fields.

    Tokens beyond the fifth are folded into the equipment field.
    """
    path = Path(name)
    suffix = path.suffix.lower()
    stem = path.stem if suffix in (".wav", ".txt") else path.name
    tokens = stem.split("_")
    if len(tokens) < 5:
        raise ParseError(
            f"ICBHI name needs 5 underscore-delimited tokens, got {len(tokens)} in {stem!r}",
            token=stem,
        )
    patient_token = tokens[0]
    if not patient_token.isdigit():
        raise ParseError(f"Patient token {patient_token!r} is not a non-negative integer",
                         token=patient_token)
    for position, token in enumerate(tokens[1:5], start=2):
        if not token:
            raise ParseError(f"Empty token at position {position} in {stem!r}", token=stem)

    wav_path = annotation_path = ""
    if root is not None:
        wav_path = str(Path(root) / (path.name if suffix == ".wav" else f"{stem}.wav"))
        annotation_path = str(Path(root) / f"{stem}.txt")

    return IcbhiRecording(
        patient=int(patient_token),
        recording_index=tokens[1],
        chest_location=tokens[2],
        acquisition_mode=tokens[3],
        equipment="_".join(tokens[4:]),
        wav_path=wav_path,
        annotation_path=annotation_path,
    )


def parse_annotation_file(path: Union[str, Path]) -> List[Tuple[float, float, int, int]]:
    """Read one (start_s, end_s, crackle, wheeze) tuple per cycle, in file order."""
    cycles = []
    text = Path(path).read_text(encoding="utf-8")
    for lineno, raw in enumerate(text.splitlines(), start=1):
        fields = raw.split()
        if not fields:
            continue
        if len(fields) != 4:
            raise ParseError(f"expected 4 columns, got {len(fields)}", line=lineno)
        try:
            start, end = float(fields[0]), float(fields[1])
        except ValueError:
            raise ParseError(f"non-numeric time in {raw.strip()!r}", line=lineno) from None
        if not (math.isfinite(start) and math.isfinite(end)):
            raise ParseError(f"non-finite time in {raw.strip()!r}", line=lineno)
        if start < 0 or end <= start:
            raise ParseError(f"need end > start >= 0, got start={start} end={end}", line=lineno)
        bits = []
        for token in fields[2:]:
            if token not in ("0", "1"):
                raise ParseError(f"event bit {token!r} not in {{0,1}}", line=lineno)
            bits.append(int(token))
        cycles.append((start, end, bits[0], bits[1]))
    return cycles


@dataclass(frozen=True)
class OfficialSplit:
    """Two-column `basename train|test` split file."""

    path: str


@dataclass(frozen=True)
class RandomSplit:
    """Subject-disjoint random split; `fraction` of patients go to train."""

    fraction: float = SYNTH_TRAIN_FRACTION
    seed: int = 0


SplitSource = Union[OfficialSplit, RandomSplit]


def read_official_split(path: Union[str, Path]) -> Dict[str, str]:
    assignment = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise DataError(f"Cannot read split file {path}: {e}") from e
    for lineno, raw in enumerate(text.splitlines(), start=1):
        fields = raw.split()
        if not fields:
            continue
        if len(fields) != 2 or fields[1] not in ("train", "test"):
            raise ParseError(f"expected `basename train|test`, got {raw.strip()!r}", line=lineno)
        assignment[Path(fields[0]).stem if fields[0].lower().endswith(".wav") else fields[0]] = fields[1]
    return assignment


def subject_disjoint_split(patients: Sequence[int], fraction: float, seed: int) -> Dict[int, str]:
    """Assign whole patients to train/test; at least one patient per side."""
    patients = sorted(set(patients))
    if not patients:
        return {}
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(patients))
    n_train = int(round(fraction * len(patients)))
    if len(patients) >= 2:
        n_train = min(max(n_train, 1), len(patients) - 1)
    train = {patients[i] for i in order[:n_train]}
    return {p: ("train" if p in train else "test") for p in patients}


@dataclass(frozen=True)
class SkippedItem:
    name: str
    reason: str


@dataclass(frozen=True)
class BuildResult:
    manifest: Manifest
    skipped: Tuple[SkippedItem, ...] = field(default_factory=tuple)


def build_manifest(
    root_dir: Union[str, Path],
    split_source: SplitSource,
    relative_to: Optional[Union[str, Path]] = None,
) -> BuildResult:
    """
    One SampleMeta per annotated cycle of every paired wav/txt recording.

    Files are visited in sorted order; unpaired or unparsable recordings
    are listed in `skipped` instead of failing the build. `source_path` is
    stored relative to `relative_to` (default: root_dir).
    """
    root = Path(root_dir)
    if not root.is_dir():
        raise DataError(f"Not a directory: {root}")
    base = Path(relative_to) if relative_to is not None else root

    wavs = sorted(p for p in root.iterdir() if p.suffix.lower() == ".wav")
    if not wavs:
        logger.warning(f"No .wav files under {root}; manifest is empty")
        return BuildResult(Manifest((), "icbhi"))

    official = read_official_split(split_source.path) if isinstance(split_source, OfficialSplit) else None

    skipped: List[SkippedItem] = []
    recordings: List[Tuple[IcbhiRecording, List[Tuple[float, float, int, int]]]] = []
    for wav in wavs:
        try:
            rec = parse_icbhi_filename(wav.name, root)
        except ParseError as e:
            skipped.append(SkippedItem(wav.name, str(e)))
            continue
        annotation = wav.with_suffix(".txt")
        if not annotation.exists():
            skipped.append(SkippedItem(wav.name, "missing annotation"))
            continue
        try:
            cycles = parse_annotation_file(annotation)
        except ParseError as e:
            skipped.append(SkippedItem(annotation.name, str(e)))
            continue
        if official is not None and rec.basename not in official:
            skipped.append(SkippedItem(wav.name, "not listed in split file"))
            continue
        recordings.append((rec, cycles))

    if official is None:
        by_patient = subject_disjoint_split(
            [rec.patient for rec, _ in recordings], split_source.fraction, split_source.seed)

    rows = []
    for rec, cycles in recordings:
        stem = rec.basename
        split = official[stem] if official is not None else by_patient[rec.patient]
        source = os.path.relpath(rec.wav_path, base).replace(os.sep, "/")
        for k, (start, end, crackle, wheeze) in enumerate(cycles):
            rows.append(SampleMeta(
                sample_id=f"{stem}_{k}",
                patient=rec.patient,
                label=label_from_bits(crackle, wheeze),
                split=split,
                source_path=source,
                cycle_start_s=start,
                cycle_end_s=end,
            ))

    for item in skipped:
        logger.warning(f"Skipped {item.name}: {item.reason}")

    return BuildResult(Manifest(tuple(rows), "icbhi"), tuple(skipped))


# =============================================================================
# SYNTHETIC PATIENTS
# =============================================================================

@dataclass(frozen=True)
class SynthConfig:
    n_patients: int = 20
    samples_per_patient: int = 20
    seed: int = 0
    class_mix: Tuple[float, float, float, float] = (0.4, 0.3, 0.15, 0.15)
    nuisance_strength: float = 1.0
    min_duration_s: float = 1.5
    max_duration_s: float = 3.5

    def __post_init__(self):
        if self.n_patients < 1 or self.samples_per_patient < 1:
            raise UsageError("n_patients and samples_per_patient must be >= 1")
        if len(self.class_mix) != 4 or any(p < 0 for p in self.class_mix):
            raise UsageError("class_mix needs 4 non-negative probabilities")
        if abs(sum(self.class_mix) - 1.0) > 1e-9:
            raise UsageError(f"class_mix must sum to 1, got {sum(self.class_mix)!r}")
        if self.nuisance_strength < 0:
            raise UsageError("nuisance_strength must be non-negative")
        if not (0 < self.min_duration_s <= self.max_duration_s):
            raise UsageError("need 0 < min_duration_s <= max_duration_s")


@dataclass(frozen=True)
class PatientNuisance:
    gain_db: float
    tilt_db_per_octave: float
    resonance_shift: float

    def response_db(self, freqs_hz: np.ndarray) -> np.ndarray:
        """Log-magnitude response of this patient's channel."""
        octaves = np.log2(np.maximum(freqs_hz, 50.0) / TILT_REFERENCE_HZ)
        center = RESONANCE_CENTER_HZ * (1.0 + self.resonance_shift)
        bump = RESONANCE_PEAK_DB * np.exp(-0.5 * ((freqs_hz - center) / RESONANCE_WIDTH_HZ) ** 2)
        return self.gain_db + self.tilt_db_per_octave * octaves + bump


@dataclass(frozen=True)
class SynthSample:
    meta: SampleMeta
    waveform: np.ndarray


def patient_nuisance(cfg: SynthConfig, patient: int) -> PatientNuisance:
    """Draw the fixed nuisance transform for one patient."""
    rng = np.random.default_rng([cfg.seed, patient, 0])
    u = rng.uniform(-1.0, 1.0, size=3)
    s = cfg.nuisance_strength
    return PatientNuisance(
        gain_db=float(MAX_GAIN_DB * s * u[0]),
        tilt_db_per_octave=float(MAX_TILT_DB_PER_OCT * s * u[1]),
        resonance_shift=float(MAX_RESONANCE_SHIFT * s * u[2]),
    )


def _class_quota(class_mix: Sequence[float], total: int) -> List[int]:
    """Largest-remainder apportionment of `total` samples over classes."""
    raw = [p * total for p in class_mix]
    counts = [int(math.floor(r)) for r in raw]
    remainder = total - sum(counts)
    order = sorted(range(len(raw)), key=lambda c: (-(raw[c] - counts[c]), c))
    for c in order[:remainder]:
        counts[c] += 1
    return counts


def _band_noise(rng: np.random.Generator, n: int, low_hz: float, high_hz: float) -> np.ndarray:
    spectrum = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, 1.0 / SYNTH_RATE_HZ)
    spectrum[(freqs < low_hz) | (freqs > high_hz)] = 0.0
    x = np.fft.irfft(spectrum, n)
    rms = np.sqrt(np.mean(x * x))
    return x * (NOISE_RMS / rms) if rms > 0 else x


def _crackles(rng: np.random.Generator, n: int) -> np.ndarray:
    """Short damped-sinusoid transients at random onsets."""
    out = np.zeros(n)
    duration_s = n / SYNTH_RATE_HZ
    n_bursts = int(rng.integers(3, 7) * max(duration_s, 1.0))
    for _ in range(n_bursts):
        length = int(rng.uniform(0.005, 0.015) * SYNTH_RATE_HZ)
        onset = int(rng.integers(0, max(n - length, 1)))
        t = np.arange(length) / SYNTH_RATE_HZ
        freq = rng.uniform(400.0, 1600.0)
        burst = np.sin(2 * np.pi * freq * t) * np.exp(-t / 0.003)
        out[onset:onset + length] += 4.0 * NOISE_RMS * burst[: n - onset]
    return out


def _wheeze(rng: np.random.Generator, n: int) -> np.ndarray:
    """A tonal sweep with fades, covering the middle of the cycle."""
    start = int(rng.uniform(0.1, 0.3) * n)
    stop = int(rng.uniform(0.7, 0.9) * n)
    length = max(stop - start, 2)
    f0 = rng.uniform(250.0, 450.0)
    f1 = f0 * rng.uniform(1.2, 1.6)
    freq = np.linspace(f0, f1, length)
    phase = 2 * np.pi * np.cumsum(freq) / SYNTH_RATE_HZ
    envelope = np.hanning(length)
    out = np.zeros(n)
    out[start:start + length] = 2.5 * NOISE_RMS * envelope * np.sin(phase)
    return out


def _apply_nuisance(x: np.ndarray, nuisance: PatientNuisance) -> np.ndarray:
    spectrum = np.fft.rfft(x)
    freqs = np.fft.rfftfreq(len(x), 1.0 / SYNTH_RATE_HZ)
    spectrum *= 10.0 ** (nuisance.response_db(freqs) / 20.0)
    return np.fft.irfft(spectrum, len(x))


_NOISE_BAND_HZ = {
    ClassLabel4.NORMAL: (100.0, 1200.0),
    ClassLabel4.CRACKLE: (100.0, 1500.0),
    ClassLabel4.WHEEZE: (100.0, 1000.0),
    ClassLabel4.BOTH: (100.0, 1500.0),
}


def synthesize_waveform(rng: np.random.Generator, label: ClassLabel4,
                        n: int, nuisance: PatientNuisance) -> np.ndarray:
    low, high = _NOISE_BAND_HZ[label]
    x = _band_noise(rng, n, low, high)
    if label in (ClassLabel4.CRACKLE, ClassLabel4.BOTH):
        x = x + _crackles(rng, n)
    if label in (ClassLabel4.WHEEZE, ClassLabel4.BOTH):
        x = x + _wheeze(rng, n)
    x = _apply_nuisance(x, nuisance)
    return np.clip(x, -1.0, 1.0)


def generate_synthetic(cfg: SynthConfig) -> Tuple[Manifest, List[SynthSample]]:
    """
    Generate a subject-disjoint (60/40 by patient) synthetic cohort.

    Bit-reproducible for a given config: every random stream is keyed
    on (seed, patient[, sample]).
    """
    if cfg.n_patients < 2:
        raise UsageError("Synthetic cohort needs n_patients >= 2 (patient losses are undefined otherwise)")

    patients = list(range(cfg.n_patients))
    splits = subject_disjoint_split(patients, SYNTH_TRAIN_FRACTION, cfg.seed)

    total = cfg.n_patients * cfg.samples_per_patient
    labels = np.repeat(np.arange(4), _class_quota(cfg.class_mix, total))
    labels = np.random.default_rng([cfg.seed, 0xC1A55]).permutation(labels)

    rows: List[SampleMeta] = []
    samples: List[SynthSample] = []
    for patient in patients:
        nuisance = patient_nuisance(cfg, patient)
        for k in range(cfg.samples_per_patient):
            rng = np.random.default_rng([cfg.seed, patient, k + 1])
            label = ClassLabel4(int(labels[patient * cfg.samples_per_patient + k]))
            duration = rng.uniform(cfg.min_duration_s, cfg.max_duration_s)
            n = int(round(duration * SYNTH_RATE_HZ))
            waveform = synthesize_waveform(rng, label, n, nuisance)
            sample_id = f"syn{patient:03d}_{k:03d}"
            meta = SampleMeta(
                sample_id=sample_id,
                patient=patient,
                label=label,
                split=splits[patient],
                source_path=f"wav/{sample_id}.wav",
                cycle_start_s=0.0,
                cycle_end_s=n / SYNTH_RATE_HZ,
            )
            rows.append(meta)
            samples.append(SynthSample(meta, waveform))

    return Manifest(tuple(rows), "synthetic"), samples


def write_synthetic(out_dir: Union[str, Path], manifest: Manifest,
                    samples: Sequence[SynthSample]) -> Path:
    """Write 16 kHz 16-bit PCM WAVs and `manifest.csv` under out_dir."""
    out = Path(out_dir)
    for sample in samples:
        path = out / sample.meta.source_path
        path.parent.mkdir(parents=True, exist_ok=True)
        sf.write(str(path), sample.waveform, SYNTH_RATE_HZ, subtype="PCM_16")
    return write_manifest(manifest, out / "manifest.csv")
