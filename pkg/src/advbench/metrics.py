"""SNR, WER and targeted-attack success scoring."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np

from advbench.errors import ValidationError

# Everything that is not a word character, whitespace or an apostrophe.
_PUNCT = re.compile(r"[^\w\s']|_")
_SPACE = re.compile(r"\s+")


def _l2(a) -> float:
    return float(np.linalg.norm(np.asarray(a, dtype=np.float64).ravel()))


def snr_db(x, delta) -> float:
    """Signal-to-noise ratio 20*(log10||x|| - log10||delta||) in dB.

    An all-zero ``delta`` (a no-op attack) gives ``math.inf``. Unequal lengths
    are handled by zero-padding the shorter signal, which leaves its norm
    unchanged.
    """
    nx, nd = _l2(x), _l2(delta)
    if nx == 0:
        raise ValidationError("SNR undefined for a silent signal")
    if nd == 0:
        return math.inf
    return 20.0 * (math.log10(nx) - math.log10(nd))


def epsilon_for_snr(x, snr_target: float) -> float:
    """L2 radius whose perturbations sit exactly at ``snr_target`` dB against ``x``."""
    nx = _l2(x)
    if nx == 0:
        raise ValidationError("cannot derive an epsilon from a silent signal")
    return nx * 10.0 ** (-snr_target / 20.0)


def normalize_text(s: str) -> str:
    s = _PUNCT.sub("", s.lower())
    return _SPACE.sub(" ", s).strip()


@dataclass(frozen=True)
class ScoreReport:
    substitutions: int
    insertions: int
    deletions: int
    ref_len: int

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions

    @property
    def wer(self) -> float:
        return self.errors / self.ref_len


def align_words(ref: list, hyp: list) -> tuple[int, int, int]:
    """Minimum-cost word alignment; returns (substitutions, insertions, deletions).

    Unit costs. Among alignments with equal total cost the backtrace prefers
    matches/substitutions, then deletions, then insertions.
    """
    n, m = len(ref), len(hyp)
    prev = list(range(m + 1))
    rows = [prev]
    for i in range(1, n + 1):
        cur = [i] + [0] * m
        r = ref[i - 1]
        for j in range(1, m + 1):
            diag = prev[j - 1] + (r != hyp[j - 1])
            up = prev[j] + 1
            left = cur[j - 1] + 1
            cur[j] = min(diag, up, left)
        rows.append(cur)
        prev = cur

    s = ins = dels = 0
    i, j = n, m
    while i > 0 or j > 0:
        d = rows[i][j]
        if i > 0 and j > 0 and d == rows[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]):
            s += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and d == rows[i - 1][j] + 1:
            dels += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return s, ins, dels


def wer(reference: str, hypothesis: str) -> ScoreReport:
    """Word error rate of ``hypothesis`` against ``reference`` after normalization."""
    ref = normalize_text(reference).split()
    if not ref:
        raise ValidationError("reference is empty after normalization")
    hyp = normalize_text(hypothesis).split()
    s, i, d = align_words(ref, hyp)
    return ScoreReport(substitutions=s, insertions=i, deletions=d, ref_len=len(ref))


def corpus_wer(reports) -> float:
    """Pooled WER: total errors over total reference words."""
    reports = list(reports)
    words = sum(r.ref_len for r in reports)
    if words == 0:
        return math.nan
    return sum(r.errors for r in reports) / words


@dataclass(frozen=True)
class SuccessCriterion:
    min_snr_db: float = 30.0
    require_exact_target: bool = True

    def __post_init__(self):
        if not math.isfinite(self.min_snr_db):
            raise ValidationError("min_snr_db must be finite")


def targeted_success(hypothesis: str, target: str, achieved_snr: float, criterion: SuccessCriterion = SuccessCriterion()) -> bool:
    hyp, tgt = normalize_text(hypothesis), normalize_text(target)
    if criterion.require_exact_target:
        hit = hyp == tgt
    else:
        # target may be embedded in a longer transcript
        hit = bool(tgt) and f" {tgt} " in f" {hyp} "
    return hit and achieved_snr > criterion.min_snr_db
