"""Audio frontend: 16 kHz mono WAV ingestion, MFCC feature extraction and the
deterministic hash-based dataset partitioner.

Features are 40 mel-frequency cepstral coefficients over 32 frames (2048
sample windows, 512 hop), matching the (1, 40, 32) network input.
"""

from __future__ import annotations

import hashlib
import json
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SAMPLE_RATE = 16000
CLIP_SAMPLES = 16000  # fixed one-second clips


class WavFormatError(ValueError):
    pass


@dataclass
class AudioClip:
    sample_rate: int
    samples: np.ndarray  # float32 in [-1, 1)


def load_wav(path: str | Path) -> AudioClip:
    """Read a 16 kHz mono 16-bit PCM WAV. Clips shorter than one second are
    zero-padded at the end; longer clips are rejected."""
    try:
        with wave.open(str(path), "rb") as fh:
            if fh.getcomptype() != "NONE":
                raise WavFormatError(f"{path}: compressed WAV not supported "
                                     f"({fh.getcomptype()})")
            if fh.getnchannels() != 1:
                raise WavFormatError(f"{path}: expected mono, "
                                     f"got {fh.getnchannels()} channels")
            if fh.getframerate() != SAMPLE_RATE:
                raise WavFormatError(f"{path}: expected {SAMPLE_RATE} Hz, "
                                     f"got {fh.getframerate()}")
            if fh.getsampwidth() != 2:
                raise WavFormatError(f"{path}: expected 16-bit samples, "
                                     f"got {8 * fh.getsampwidth()}-bit")
            n = fh.getnframes()
            raw = fh.readframes(n)
    except wave.Error as exc:
        raise WavFormatError(f"{path}: not a readable WAV: {exc}") from exc
    except EOFError as exc:
        raise WavFormatError(f"{path}: truncated WAV") from exc
    if len(raw) != 2 * n:
        raise WavFormatError(f"{path}: truncated WAV data "
                             f"({len(raw)} bytes for {n} frames)")
    if n > CLIP_SAMPLES:
        raise WavFormatError(f"{path}: clip too long ({n} samples, "
                             f"max {CLIP_SAMPLES})")
    pcm = np.frombuffer(raw, dtype="<i2").astype(np.float32) / 32768.0
    if n < CLIP_SAMPLES:
        pcm = np.pad(pcm, (0, CLIP_SAMPLES - n))
    return AudioClip(SAMPLE_RATE, pcm)


def write_wav(path: str | Path, samples: np.ndarray,
              sample_rate: int = SAMPLE_RATE) -> None:
    """Write float samples in [-1, 1] as 16-bit mono PCM."""
    pcm = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0)
    codes = np.clip(np.round(pcm * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(sample_rate)
        fh.writeframes(codes.tobytes())


# --- MFCC -------------------------------------------------------------------


@dataclass(frozen=True)
class MfccConfig:
    frame_len: int = 2048
    hop: int = 512
    mel_bands: int = 40
    num_coeffs: int = 40
    fmin: float = 0.0
    fmax: float = 8000.0
    log_floor: float = 1e-10


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_fft: int, sample_rate: int, bands: int, fmin: float,
                   fmax: float) -> np.ndarray:
    """Triangular filters with unit peak, evaluated at the FFT bin centers.
    Band edges are spaced uniformly on the mel scale."""
    edges_mel = np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), bands + 2)
    edges_hz = mel_to_hz(edges_mel)
    bin_hz = np.arange(n_fft // 2 + 1) * (sample_rate / n_fft)
    fb = np.zeros((bands, n_fft // 2 + 1))
    for b in range(bands):
        lo, mid, hi = edges_hz[b], edges_hz[b + 1], edges_hz[b + 2]
        up = (bin_hz - lo) / (mid - lo)
        down = (hi - bin_hz) / (hi - mid)
        fb[b] = np.maximum(0.0, np.minimum(up, down))
    return fb


def _dct_ortho(n: int, keep: int) -> np.ndarray:
    """Orthonormal DCT-II matrix (keep x n)."""
    k = np.arange(keep)[:, None]
    i = np.arange(n)[None, :]
    mat = np.cos(np.pi * (2 * i + 1) * k / (2 * n)) * np.sqrt(2.0 / n)
    mat[0] /= np.sqrt(2.0)
    return mat


def mfcc(clip: AudioClip, config: MfccConfig | None = None) -> np.ndarray:
    """Log-mel cepstrum of a one-second clip: (num_coeffs, frames) float32.
    The signal is reflect-padded by half a window on both sides, so one
    second at the default hop yields 32 frames."""
    cfg = config or MfccConfig()
    if clip.sample_rate != SAMPLE_RATE:
        raise WavFormatError(f"expected {SAMPLE_RATE} Hz audio, "
                             f"got {clip.sample_rate}")
    x = np.asarray(clip.samples, dtype=np.float64)
    pad = cfg.frame_len // 2
    xp = np.pad(x, (pad, pad), mode="reflect")
    n_frames = 1 + len(x) // cfg.hop
    window = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(cfg.frame_len)
                                / cfg.frame_len)  # periodic Hann
    frames = np.stack([xp[i * cfg.hop:i * cfg.hop + cfg.frame_len]
                       for i in range(n_frames)])
    spectrum = np.abs(np.fft.rfft(frames * window, axis=1)) ** 2
    fb = mel_filterbank(cfg.frame_len, clip.sample_rate, cfg.mel_bands,
                        cfg.fmin, cfg.fmax)
    logmel = np.log(np.maximum(spectrum @ fb.T, cfg.log_floor))
    coeffs = logmel @ _dct_ortho(cfg.mel_bands, cfg.num_coeffs).T
    return coeffs.T.astype(np.float32)  # (num_coeffs, frames)


def wav_to_features(path: str | Path,
                    config: MfccConfig | None = None) -> np.ndarray:
    """WAV file to the (1, 40, 32) network input tensor."""
    return mfcc(load_wav(path), config)[None, :, :]


# --- dataset import ---------------------------------------------------------


@dataclass
class SampleEntry:
    id: str
    path: str
    label: str
    partition: str

    def to_dict(self) -> dict:
        return {"id": self.id, "path": self.path, "label": self.label,
                "partition": self.partition}


@dataclass
class DatasetManifest:
    classes: list[str]
    entries: list[SampleEntry] = field(default_factory=list)

    def by_partition(self, partition: str) -> list[SampleEntry]:
        return [e for e in self.entries if e.partition == partition]

    def save(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for e in self.entries:
                fh.write(json.dumps(e.to_dict(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        entries = []
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if line:
                    entries.append(SampleEntry(**json.loads(line)))
        return cls(classes=sorted({e.label for e in entries}), entries=entries)


PARTITIONS = ("train", "val", "test")


def _partition_key(seed: int, sample_id: str) -> str:
    return hashlib.sha256(f"{seed}:{sample_id}".encode()).hexdigest()


def import_dataset(root: str | Path,
                   fractions: tuple[float, float, float] = (0.8, 0.1, 0.1),
                   seed: int = 0) -> DatasetManifest:
    """Scan ``root/<label>/*.wav`` into a train/val/test manifest. Each class
    is ordered by a seeded hash of the sample id and cut at the cumulative
    fractions, so splits are deterministic, label-stratified and exact to
    within one sample per class. Paths are stored relative to ``root``."""
    root = Path(root)
    if len(fractions) != 3:
        raise ValueError("need (train, val, test) fractions")
    if any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must be non-negative and sum to 1, "
                         f"got {fractions}")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise ValueError(f"{root}: no class directories found")
    manifest = DatasetManifest(classes=[d.name for d in class_dirs])
    for class_dir in class_dirs:
        wavs = sorted(class_dir.glob("*.wav"))
        if not wavs:
            raise ValueError(f"{class_dir}: class directory has no WAV files")
        ids = [f"{class_dir.name}/{p.name}" for p in wavs]
        order = sorted(range(len(ids)),
                       key=lambda i: _partition_key(seed, ids[i]))
        n = len(ids)
        cut1 = round(n * fractions[0])
        cut2 = round(n * (fractions[0] + fractions[1]))
        for rank, i in enumerate(order):
            partition = (PARTITIONS[0] if rank < cut1
                         else PARTITIONS[1] if rank < cut2
                         else PARTITIONS[2])
            manifest.entries.append(SampleEntry(
                id=ids[i], path=str(Path(class_dir.name) / wavs[i].name),
                label=class_dir.name, partition=partition))
    manifest.entries.sort(key=lambda e: e.id)
    return manifest
