"""Re-derive stored metrics from the files a campaign left on disk."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from advbench import metrics
from advbench.attacks import pad_to
from advbench.corpus import load_audio
from advbench.errors import ValidationError
from advbench.harness.config import CampaignConfig
from advbench.harness.runner import RESULTS_FILE, WAV_DIR, _transcribe, read_results
from advbench.models import load_model

SNR_TOLERANCE_DB = 1e-6


@dataclass
class VerificationReport:
    checked: int = 0
    max_snr_error_db: float = 0.0
    failures: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures


def _same_snr(stored, recomputed) -> tuple[bool, float]:
    if stored is None:
        return math.isinf(recomputed), 0.0
    err = abs(stored - recomputed)
    return err <= SNR_TOLERANCE_DB, err


def verify_artifacts(artifact_dir, model_factory=load_model) -> VerificationReport:
    """Recompute SNR from the clean source and the stored adversarial WAV,
    re-transcribe both (with the same smoothing seed when a defense is
    configured) and compare with ``results.jsonl``.
    """
    root = Path(artifact_dir)
    cfg_path = root / "config.json"
    if not cfg_path.exists() or not (root / RESULTS_FILE).exists():
        raise ValidationError(f"{root} is not a campaign output directory")
    with open(cfg_path, encoding="utf-8") as f:
        config = CampaignConfig.from_dict(json.load(f))
    records = [r for r in read_results(root / RESULTS_FILE).values() if r.get("status") == "ok"]
    report = VerificationReport()
    if not records:
        return report
    model = model_factory(config.model, beam_size=config.beam_size)

    for rec in records:
        uid = rec["id"]
        x = load_audio(rec["source_path"])[: model.window_samples]
        seed = rec["seed"]
        clean_text = _transcribe(model, x, config, seed)
        if clean_text != rec["clean_transcript"]:
            report.failures.append(f"{uid}: clean transcript {clean_text!r} != stored {rec['clean_transcript']!r}")
        if rec.get("adv_wav"):
            adv = load_audio(root / WAV_DIR / rec["adv_wav"])
            delta = adv - pad_to(x, len(adv))
            snr = metrics.snr_db(x, delta)
            same, err = _same_snr(rec.get("artifact_snr_db"), snr)
            report.max_snr_error_db = max(report.max_snr_error_db, err)
            if not same:
                report.failures.append(f"{uid}: SNR {snr!r} dB != stored {rec.get('artifact_snr_db')!r}")
            stored_delta = load_audio(root / WAV_DIR / rec["delta_wav"])
            if len(stored_delta) != len(delta) or np.max(np.abs(stored_delta - delta)) > 2.0 ** -15:
                report.failures.append(f"{uid}: delta WAV disagrees with adversarial minus clean")
            adv_text = _transcribe(model, adv, config, seed)
        else:
            adv_text = clean_text
        if adv_text != rec["adv_transcript"]:
            report.failures.append(f"{uid}: adversarial transcript {adv_text!r} != stored {rec['adv_transcript']!r}")
        report.checked += 1
    return report
