"""Campaign execution: per-utterance jobs, artifacts on disk, resumable summaries."""

from __future__ import annotations

import json
import logging
import math
import platform
import re
import threading
import zlib
from concurrent.futures import ThreadPoolExecutor, as_completed
from pathlib import Path

import numpy as np

from advbench import __version__, attacks, metrics
from advbench.attacks import CW_TARGET, apply_universal, pad_to
from advbench.corpus import (
    PCM16_SCALE,
    Manifest,
    add_white_noise,
    load_example,
    load_manifest,
    quantize_pcm16,
    write_wav,
)
from advbench.defense import smooth_transcribe
from advbench.errors import CampaignFailure, ValidationError
from advbench.harness.config import CampaignConfig
from advbench.models import load_model

logger = logging.getLogger(__name__)

SUMMARY_SCHEMA = 1
RESULTS_FILE = "results.jsonl"
SUMMARY_FILE = "summary.json"
WAV_DIR = "adv_wav"
UNIVERSAL_DIR = "universal"
MAX_ERROR_FRACTION = 0.5


def utterance_seed(seed: int, uid: str) -> int:
    return zlib.crc32(f"{seed}:{uid}".encode())


def _json_float(v):
    if v is None:
        return None
    v = float(v)
    return v if math.isfinite(v) else None


def _safe_name(uid: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]", "_", uid)


def persist_adversarial(adv_x, x, stem: Path, sidecar: dict) -> dict:
    """Write ``<stem>.wav`` (x+delta), ``<stem>.delta.wav`` and ``<stem>.json``.

    The SNR and transcript of record are computed from the 16-bit audio that
    actually lands on disk, so re-verification from files is exact.
    """
    adv_q = quantize_pcm16(adv_x).astype(np.float64) / PCM16_SCALE
    clean = pad_to(x, len(adv_q))
    delta_q = adv_q - clean
    write_wav(adv_q, stem.with_suffix(".wav"))
    write_wav(delta_q, stem.with_suffix(".delta.wav"))
    artifact_snr = metrics.snr_db(clean, delta_q)
    sidecar = dict(sidecar, artifact_snr_db=_json_float(artifact_snr))
    with open(stem.with_suffix(".json"), "w", encoding="utf-8") as f:
        json.dump(sidecar, f, indent=2, sort_keys=True)
    return {
        "adv_audio": adv_q,
        "artifact_snr_db": artifact_snr,
        "adv_wav": str(stem.with_suffix(".wav").name),
        "delta_wav": str(stem.with_suffix(".delta.wav").name),
    }


class _Handles:
    """One lazily-built model handle per worker thread."""

    def __init__(self, factory, model_id, beam_size):
        self._factory = factory
        self._model_id = model_id
        self._beam_size = beam_size
        self._local = threading.local()
        self.created = 0
        self._lock = threading.Lock()

    def get(self):
        m = getattr(self._local, "model", None)
        if m is None:
            m = self._factory(self._model_id, beam_size=self._beam_size)
            self._local.model = m
            with self._lock:
                self.created += 1
        return m


def _transcribe(model, x, config: CampaignConfig, seed):
    if config.defense is None:
        return model.transcribe(x)
    return smooth_transcribe(model, x, config.defense, seed=seed)


def process_utterance(model, manifest: Manifest, entry, config: CampaignConfig, out_dir: Path, universal=None) -> dict:
    """Run the configured attack on one manifest entry and persist its artifacts."""
    example = load_example(manifest, entry)
    record = {
        "id": entry.id, "reference_text": entry.text, "language": entry.lang,
        "source_path": str(Path(example.source_path).resolve()),
    }
    if len(example.waveform) > model.window_samples:
        record["trimmed_from_s"] = example.duration
        example.waveform = example.waveform[: model.window_samples]
    x = example.waveform
    cfg = config.attack
    seed_u = utterance_seed(config.seed, entry.id)
    record["seed"] = seed_u
    clean_hyp = model.transcribe(x)
    extra = {}
    target_text = None

    if cfg.algorithm == "none":
        adv_x, pert, res = None, None, None
    elif cfg.algorithm == "white_noise":
        adv_x = np.clip(add_white_noise(x, cfg.snr_target_db, rng=seed_u), -1.0, 1.0)
        pert, res = None, None
        record["achieved_snr_db"] = _json_float(cfg.snr_target_db)
    elif cfg.algorithm == "pgd":
        pert, res = attacks.pgd_untargeted(model, example, cfg, clean_transcript=clean_hyp)
        adv_x = np.clip(x + pert.delta, -1.0, 1.0)
    elif cfg.algorithm == "cw":
        target_text = cfg.target_text or CW_TARGET
        pert, res = attacks.cw_targeted(model, example, target_text, cfg, clean_transcript=clean_hyp)
        adv_x = np.clip(x + pert.delta, -1.0, 1.0)
        extra["attack_success"] = res.targeted_success
    elif cfg.algorithm == "lang_confusion":
        pert, res = attacks.language_confusion(model, example, cfg.target_language, cfg, clean_transcript=clean_hyp)
        adv_x = np.clip(x + pert.delta, -1.0, 1.0)
    elif cfg.algorithm == "universal_lang":
        res = attacks.evaluate_universal(model, example, universal, cfg, clean_transcript=clean_hyp)
        pert = None
        adv_x = apply_universal(x, universal.delta)
        record["achieved_snr_db"] = _json_float(res.achieved_snr_db)
    else:
        raise ValidationError(f"unsupported algorithm {cfg.algorithm!r}")

    if pert is not None:
        record.update(
            achieved_snr_db=_json_float(pert.achieved_snr_db),
            epsilon=pert.epsilon,
            norm=pert.norm,
            steps_run=pert.steps_run,
            within_bound=pert.within_bound(),
        )
    if res is not None:
        record["wall_time_s"] = res.wall_time_s
        record["adv_transcript_float"] = res.adv_transcript
        if res.clean_language is not None:
            record["clean_language"] = res.clean_language
            record["adv_language"] = res.adv_language

    clean_text = clean_hyp if config.defense is None else _transcribe(model, x, config, seed_u)
    if adv_x is None:
        adv_text = clean_text
        record["achieved_snr_db"] = None
        record["artifact_snr_db"] = None
    else:
        stem = out_dir / WAV_DIR / _safe_name(entry.id)
        sidecar = {
            "id": entry.id,
            "source_path": example.source_path,
            "config": config.attack.to_dict(),
            "defense": config.defense.to_dict() if config.defense else None,
            "seed": seed_u,
            "achieved_snr_db": record.get("achieved_snr_db"),
            "steps_run": record.get("steps_run"),
            "metadata": _jsonable(pert.metadata) if pert is not None else {},
        }
        saved = persist_adversarial(adv_x, x, stem, sidecar)
        adv_text = _transcribe(model, saved["adv_audio"], config, seed_u)
        if "adv_language" in record:
            record["adv_language"] = model.detect_language(saved["adv_audio"])
        record.update(
            artifact_snr_db=_json_float(saved["artifact_snr_db"]),
            adv_wav=saved["adv_wav"],
            delta_wav=saved["delta_wav"],
        )

    clean_score = metrics.wer(entry.text, clean_text)
    adv_score = metrics.wer(entry.text, adv_text)
    record.update(
        clean_transcript=clean_text,
        adv_transcript=adv_text,
        ref_len=clean_score.ref_len,
        clean_errors=clean_score.errors,
        adv_errors=adv_score.errors,
        clean_wer=clean_score.wer,
        adv_wer=adv_score.wer,
    )
    if target_text is not None:
        snr = record["artifact_snr_db"]
        record["target_text"] = target_text
        record["targeted_success"] = metrics.targeted_success(adv_text, target_text, math.inf if snr is None else snr)
    record.update(extra)
    record["status"] = "ok"
    return record


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return _json_float(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


def aggregate(records, algorithm: str, target_language=None) -> dict:
    """Campaign aggregates, recomputable from the per-utterance records alone.

    WERs are pooled (total errors / total reference words). ``mean_snr_db``
    averages the finite artifact SNRs, over successful examples only for
    targeted campaigns.
    """
    ok = [r for r in records if r.get("status") == "ok"]
    words = sum(r["ref_len"] for r in ok)
    agg = {
        "n_utterances": len(ok),
        "n_excluded": len(records) - len(ok),
        "clean_wer": sum(r["clean_errors"] for r in ok) / words if words else None,
        "adv_wer": sum(r["adv_errors"] for r in ok) / words if words else None,
        "mean_snr_db": None,
        "targeted_accuracy": None,
        "language_flip_rate": None,
    }
    snr_pool = ok
    if algorithm == "cw":
        agg["targeted_accuracy"] = sum(bool(r.get("targeted_success")) for r in ok) / len(ok) if ok else None
        snr_pool = [r for r in ok if r.get("targeted_success")]
    snrs = [r["artifact_snr_db"] for r in snr_pool if r.get("artifact_snr_db") is not None]
    if snrs:
        agg["mean_snr_db"] = float(np.mean(snrs))
    if algorithm in ("lang_confusion", "universal_lang") and ok:
        agg["language_flip_rate"] = sum(r.get("adv_language") == target_language for r in ok) / len(ok)
    return agg


def environment_snapshot(config: CampaignConfig) -> dict:
    import torch

    return {
        "advbench": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "torch": torch.__version__,
        "model_id": config.model,
        "seed": config.seed,
    }


def read_results(path: Path) -> dict[str, dict]:
    records = {}
    if path.exists():
        with open(path, encoding="utf-8") as f:
            for line in f:
                if line.strip():
                    rec = json.loads(line)
                    records[rec["id"]] = rec
    return records


# run-specific fields kept in results.jsonl but left out of summary.json so
# that identical campaigns produce identical summaries
VOLATILE_FIELDS = ("wall_time_s",)


def build_summary(config: CampaignConfig, ids: list[str], records: dict[str, dict]) -> dict:
    ordered = [records[i] for i in ids if i in records]
    stable = [{k: v for k, v in r.items() if k not in VOLATILE_FIELDS} for r in ordered]
    cfg = config.to_dict()
    cfg.pop("output_dir")
    source = config.source_language
    if source is None:
        langs = {r.get("language") for r in ordered}
        source = langs.pop() if len(langs) == 1 else None
    return {
        "schema": SUMMARY_SCHEMA,
        "model_id": config.model,
        "setting": config.setting,
        "algorithm": config.attack.algorithm,
        "source_language": source,
        "target_language": config.attack.target_language,
        "defense": config.defense.to_dict() if config.defense else None,
        "config": cfg,
        "aggregates": aggregate(ordered, config.attack.algorithm, config.attack.target_language),
        "environment": environment_snapshot(config),
        "utterance_ids": ids,
        "results": stable,
    }


def _load_entries(config: CampaignConfig):
    """(manifest, entry) pairs for the campaign, subsampled deterministically."""
    pairs = []
    for path in config.manifests:
        m = load_manifest(path)
        pairs.extend((m, e) for e in m.entries)
    ids = [e.id for _, e in pairs]
    if len(set(ids)) != len(ids):
        raise ValidationError("utterance ids collide across manifests")
    if config.max_utterances is not None and config.max_utterances < len(pairs):
        rng = np.random.default_rng(config.seed)
        keep = np.sort(rng.choice(len(pairs), size=config.max_utterances, replace=False))
        pairs = [pairs[i] for i in keep]
    for m, e in pairs:
        if not m.resolve(e).exists():
            raise ValidationError(f"audio for {e.id} not found: {m.resolve(e)}")
    return pairs


def fit_universal(config: CampaignConfig, handles: _Handles, out_dir: Path, test_ids) -> attacks.Perturbation:
    """Fit (or reload) the campaign's universal perturbation."""
    udir = out_dir / UNIVERSAL_DIR
    npy, meta_path = udir / "delta.npy", udir / "universal.json"
    if npy.exists() and meta_path.exists():
        with open(meta_path, encoding="utf-8") as f:
            meta = json.load(f)
        return attacks.Perturbation(
            np.load(npy), meta["norm"], meta["epsilon"], meta["achieved_snr_db"] or math.inf,
            meta["steps_run"], meta["seed"], meta["metadata"],
        )
    train = load_manifest(config.train_manifest).subset(config.max_train_utterances, config.seed)
    overlap = {e.id for e in train} & set(test_ids)
    if overlap:
        raise ValidationError(f"train and test utterances overlap: {sorted(overlap)[:3]}")
    train.check_paths()
    model = handles.get()
    examples = []
    for e in train:
        ex = load_example(train, e)
        ex.waveform = ex.waveform[: model.window_samples]
        examples.append(ex)
    pert = attacks.universal_language_attack(model, examples, config.attack.target_language, config.attack)
    udir.mkdir(parents=True, exist_ok=True)
    np.save(npy, pert.delta)
    write_wav(pert.delta, udir / "delta.wav")
    with open(meta_path, "w", encoding="utf-8") as f:
        json.dump({
            "norm": pert.norm, "epsilon": pert.epsilon, "achieved_snr_db": _json_float(pert.achieved_snr_db),
            "steps_run": pert.steps_run, "seed": pert.seed, "metadata": _jsonable(pert.metadata),
        }, f, indent=2, sort_keys=True)
    return pert


def run_campaign(config: CampaignConfig, model_factory=load_model) -> dict:
    """Execute (or resume) a campaign and return its summary.

    Completed utterances found in ``results.jsonl`` are skipped and the model
    is only built if work remains. Failed utterances are recorded and retried
    on the next run; the campaign raises ``CampaignFailure`` (after writing
    the summary) when more than half of them failed.
    """
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "config.json", "w", encoding="utf-8") as f:
        json.dump(config.to_dict(), f, indent=2, sort_keys=True)

    pairs = _load_entries(config)
    ids = [e.id for _, e in pairs]
    results_path = out / RESULTS_FILE
    done = {k: v for k, v in read_results(results_path).items() if v.get("status") == "ok"}
    todo = [(m, e) for m, e in pairs if e.id not in done]
    handles = _Handles(model_factory, config.model, config.beam_size)

    if todo:
        universal = None
        if config.attack.algorithm == "universal_lang":
            universal = fit_universal(config, handles, out, ids)

        def job(m, e):
            try:
                return process_utterance(handles.get(), m, e, config, out, universal)
            except Exception as exc:  # recorded and excluded, never fatal on its own
                logger.exception("utterance %s failed", e.id)
                return {"id": e.id, "status": "error", "error": f"{type(exc).__name__}: {exc}"}

        with open(results_path, "a", encoding="utf-8") as sink:
            if config.workers == 1:
                for m, e in todo:
                    sink.write(json.dumps(_jsonable(job(m, e)), sort_keys=True) + "\n")
                    sink.flush()
            else:
                with ThreadPoolExecutor(max_workers=config.workers) as pool:
                    futures = [pool.submit(job, m, e) for m, e in todo]
                    for fut in as_completed(futures):
                        sink.write(json.dumps(_jsonable(fut.result()), sort_keys=True) + "\n")
                        sink.flush()

    records = read_results(results_path)
    summary = build_summary(config, ids, records)
    summary["model_handles_created"] = handles.created
    with open(out / SUMMARY_FILE, "w", encoding="utf-8") as f:
        json.dump({k: v for k, v in summary.items() if k != "model_handles_created"}, f, indent=2, sort_keys=True)
    n_err = sum(1 for i in ids if records.get(i, {}).get("status") != "ok")
    if ids and n_err / len(ids) > MAX_ERROR_FRACTION:
        raise CampaignFailure(f"{n_err}/{len(ids)} utterances failed; see {results_path}")
    return summary
