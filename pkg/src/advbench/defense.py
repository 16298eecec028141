"""Randomized-smoothing front end: Gaussian noise on the waveform before decoding."""

from __future__ import annotations

import dataclasses
from collections import Counter
from dataclasses import dataclass

import numpy as np

from advbench.errors import ValidationError
from advbench.metrics import normalize_text
from advbench.models.base import SpeechModel

AGGREGATIONS = ("single", "majority_exact")


@dataclass(frozen=True)
class SmoothingConfig:
    sigma: float = 0.02
    n_draws: int = 1
    aggregation: str = "single"
    seed: int = 0

    def __post_init__(self):
        if self.sigma < 0:
            raise ValidationError("sigma must be non-negative")
        if self.n_draws < 1:
            raise ValidationError("n_draws must be at least 1")
        if self.aggregation not in AGGREGATIONS:
            raise ValidationError(f"unknown aggregation {self.aggregation!r}")
        if self.aggregation == "single" and self.n_draws != 1:
            raise ValidationError("single aggregation takes exactly one draw")

    @classmethod
    def from_dict(cls, d: dict) -> "SmoothingConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown defense options: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def smooth_transcribe(model: SpeechModel, x, config: SmoothingConfig, seed=None) -> str:
    """Transcribe ``x`` under Gaussian input noise of std ``config.sigma``.

    ``seed`` overrides ``config.seed`` (the harness derives one per utterance).
    With ``majority_exact`` the most frequent normalized transcript wins; ties
    go to the candidate with the lowest mean per-token loss over the draws.
    """
    x = np.asarray(x, dtype=np.float64)
    if config.sigma == 0:
        return model.transcribe(x)
    rng = np.random.default_rng(config.seed if seed is None else seed)
    noisy = [np.clip(x + rng.normal(0.0, config.sigma, size=x.shape), -1.0, 1.0) for _ in range(config.n_draws)]
    hyps = [model.transcribe(z) for z in noisy]
    if config.aggregation == "single":
        return hyps[0]

    counts = Counter(normalize_text(h) for h in hyps)
    top = max(counts.values())
    tied = [h for h in dict.fromkeys(normalize_text(h) for h in hyps) if counts[h] == top]
    first_raw = {}
    for h in hyps:
        first_raw.setdefault(normalize_text(h), h)
    if len(tied) == 1:
        return first_raw[tied[0]]

    def mean_loss(text):
        if not text:
            return np.inf
        tokens = model.reference_tokens(x, text)
        return float(np.mean([model.teacher_forced_loss(z, tokens, with_grad=False).per_token.mean() for z in noisy]))

    return first_raw[min(tied, key=mean_loss)]
