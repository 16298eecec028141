"""Audio ingestion: JSONL manifests, WAV/FLAC loading, white noise and WAV output."""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
import soundfile as sf
from scipy.signal import resample_poly

from advbench.errors import ParseError, ValidationError

logger = logging.getLogger(__name__)

SAMPLE_RATE = 16000
MANIFEST_FORMAT_VERSION = 1
# int16 full scale; reading divides by this, writing multiplies by it.
PCM16_SCALE = 32768.0


@dataclass
class AudioExample:
    id: str
    waveform: np.ndarray
    reference_text: str
    language: str = "unknown"
    sample_rate: int = SAMPLE_RATE
    source_path: str = ""
    metadata: dict = field(default_factory=dict)

    @property
    def duration(self) -> float:
        return len(self.waveform) / self.sample_rate


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    audio: str
    text: str
    lang: str = "unknown"


@dataclass
class Manifest:
    entries: list[ManifestEntry]
    path: str = ""
    format_version: int = MANIFEST_FORMAT_VERSION

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def resolve(self, entry: ManifestEntry) -> Path:
        """Locate an entry's audio file.

        Relative paths are tried against the manifest's directory first, then
        against ``$ADVBENCH_DATA_DIR``.
        """
        p = Path(entry.audio)
        if p.is_absolute():
            return p
        candidates = []
        if self.path:
            candidates.append(Path(self.path).parent / p)
        data_dir = os.environ.get("ADVBENCH_DATA_DIR")
        if data_dir:
            candidates.append(Path(data_dir) / p)
        for c in candidates:
            if c.exists():
                return c
        return candidates[0] if candidates else p

    def check_paths(self):
        missing = [e.id for e in self.entries if not self.resolve(e).exists()]
        if missing:
            raise ValidationError(
                f"{len(missing)} manifest entries have no audio file, e.g. {missing[:3]}"
            )

    def subset(self, max_utterances=None, seed=0) -> "Manifest":
        """Deterministic seeded subsample that preserves file order."""
        if max_utterances is None or max_utterances >= len(self.entries):
            return self
        rng = np.random.default_rng(seed)
        keep = np.sort(rng.choice(len(self.entries), size=max_utterances, replace=False))
        return Manifest([self.entries[i] for i in keep], self.path, self.format_version)


def load_manifest(path) -> Manifest:
    """Read a manifest with one JSON object per line.

    Required keys are ``id``, ``audio`` and ``text``; ``lang`` defaults to
    ``"unknown"``. Unknown keys are ignored and blank lines are skipped.
    """
    path = Path(path)
    entries = []
    seen = set()
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(f"invalid JSON ({e.msg})", line=lineno) from None
            if not isinstance(rec, dict):
                raise ParseError("expected a JSON object", line=lineno)
            for key in ("id", "audio", "text"):
                if key not in rec:
                    raise ParseError(f"missing key {key!r}", line=lineno)
            uid = str(rec["id"])
            if uid in seen:
                raise ValidationError(f"duplicate id {uid!r} at line {lineno}")
            seen.add(uid)
            entries.append(
                ManifestEntry(uid, str(rec["audio"]), str(rec["text"]), str(rec.get("lang") or "unknown"))
            )
    return Manifest(entries, str(path))


def write_manifest(entries, path):
    with open(path, "w", encoding="utf-8") as f:
        for e in entries:
            f.write(json.dumps({"id": e.id, "audio": e.audio, "text": e.text, "lang": e.lang}) + "\n")


def load_audio(path, target_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Load a WAV or FLAC file as a mono float64 waveform at ``target_rate``."""
    try:
        data, rate = sf.read(str(path), dtype="float64", always_2d=True)
    except sf.LibsndfileError as e:
        raise OSError(f"cannot read audio {path}: {e}") from e
    if data.shape[0] == 0:
        raise ValidationError(f"zero-length audio: {path}")
    x = data.mean(axis=1) if data.shape[1] > 1 else data[:, 0]
    if rate != target_rate:
        ratio = Fraction(target_rate, rate)
        x = resample_poly(x, ratio.numerator, ratio.denominator)
    if not np.all(np.isfinite(x)):
        raise ValidationError(f"non-finite samples in {path}")
    return np.clip(x, -1.0, 1.0)


def load_example(manifest: Manifest, entry: ManifestEntry) -> AudioExample:
    path = manifest.resolve(entry)
    if not entry.text.strip():
        raise ValidationError(f"empty reference text for {entry.id}")
    return AudioExample(
        id=entry.id,
        waveform=load_audio(path),
        reference_text=entry.text,
        language=entry.lang,
        source_path=str(path),
    )


def add_white_noise(x, snr_db, rng=None) -> np.ndarray:
    """Add Gaussian noise rescaled to hit ``snr_db`` exactly.

    ``snr_db=math.inf`` returns an unmodified copy. ``rng`` may be a seed or a
    ``numpy.random.Generator``.
    """
    x = np.asarray(x, dtype=np.float64)
    if math.isinf(snr_db) and snr_db > 0:
        return x.copy()
    signal_norm = np.linalg.norm(x)
    if signal_norm == 0:
        raise ValidationError("cannot set an SNR against a silent signal")
    rng = np.random.default_rng(rng)
    noise = rng.standard_normal(x.shape)
    noise *= signal_norm * 10.0 ** (-snr_db / 20.0) / np.linalg.norm(noise)
    return x + noise


def quantize_pcm16(x) -> np.ndarray:
    """Map [-1, 1] floats to int16 codes (round to nearest, saturating)."""
    return np.clip(np.round(np.asarray(x, dtype=np.float64) * PCM16_SCALE), -32768, 32767).astype(np.int16)


def write_wav(x, path, sample_rate: int = SAMPLE_RATE):
    """Write a 16-bit PCM mono WAV; out-of-range samples are clipped with a warning."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValidationError(f"expected a mono waveform, got shape {x.shape}")
    n_clipped = int(np.sum(np.abs(x) > 1.0))
    if n_clipped:
        logger.warning("clipping %d samples outside [-1, 1] while writing %s", n_clipped, path)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    sf.write(str(path), quantize_pcm16(np.clip(x, -1.0, 1.0)), sample_rate, subtype="PCM_16")
