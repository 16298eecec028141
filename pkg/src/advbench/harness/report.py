"""Table and figure CSV emission from campaign summaries."""

from __future__ import annotations

import csv
import io
import json
from importlib import resources
from pathlib import Path

from advbench.errors import ValidationError
from advbench.harness.runner import SUMMARY_SCHEMA

TABLE_COLUMNS = [
    "model",
    "setting",
    "n_utterances",
    "n_excluded",
    "clean_wer",
    "wn_wer",
    "adv_wer",
    "targeted_accuracy",
    "mean_snr_db",
]
FIGURE_COLUMNS = ["source_language", "training_hours", "target_language", "wer"]
_REQUIRED = ("schema", "model_id", "setting", "algorithm", "aggregates")


def load_summary(path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / "summary.json"
    with open(path, encoding="utf-8") as f:
        summary = json.load(f)
    _check_schema(summary, str(path))
    return summary


def load_training_hours() -> dict[str, float]:
    text = resources.files("advbench.data").joinpath("training_hours.json").read_text(encoding="utf-8")
    return json.loads(text)


def _check_schema(summary, where="summary"):
    if not isinstance(summary, dict):
        raise ValidationError(f"{where}: not a summary mapping")
    missing = [k for k in _REQUIRED if k not in summary]
    if missing:
        raise ValidationError(f"{where}: missing keys {missing}")
    if summary["schema"] != SUMMARY_SCHEMA:
        raise ValidationError(f"{where}: schema {summary['schema']} != {SUMMARY_SCHEMA}")


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_csv(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_cell(row.get(c)) for c in columns])
    return buf.getvalue()


def emit_table(summaries) -> str:
    """One CSV row per (model, setting).

    ``wn_wer`` is taken from the same model's white-noise campaign when one
    is among the inputs. Floats are written at full precision.
    """
    if isinstance(summaries, dict):
        summaries = [summaries]
    for i, s in enumerate(summaries):
        _check_schema(s, f"summary #{i}")
    wn = {}
    for s in summaries:
        if s["algorithm"] == "white_noise":
            wn.setdefault(s["model_id"], s["aggregates"]["adv_wer"])
    rows, seen = [], set()
    for s in summaries:
        key = (s["model_id"], s["setting"])
        if key in seen:
            raise ValidationError(f"duplicate table row for model {key[0]!r}, setting {key[1]!r}")
        seen.add(key)
        a = s["aggregates"]
        rows.append({
            "model": s["model_id"],
            "setting": s["setting"],
            "n_utterances": a["n_utterances"],
            "n_excluded": a["n_excluded"],
            "clean_wer": a["clean_wer"],
            "wn_wer": wn.get(s["model_id"]),
            "adv_wer": a["adv_wer"],
            "targeted_accuracy": a.get("targeted_accuracy"),
            "mean_snr_db": a.get("mean_snr_db"),
        })
    return _write_csv(TABLE_COLUMNS, rows)


def emit_language_figure_data(summaries, training_hours=None) -> str:
    """Rows of (source language, its training hours, attack target, WER).

    Rows are ordered by training hours, ascending. A universal campaign's
    target is labelled ``"<lang> (universal)"``.
    """
    if isinstance(summaries, dict):
        summaries = [summaries]
    hours = load_training_hours() if training_hours is None else training_hours
    rows = []
    for i, s in enumerate(summaries):
        _check_schema(s, f"summary #{i}")
        src = s.get("source_language")
        if not src:
            raise ValidationError(f"summary #{i} ({s['setting']}) has no source_language")
        if src not in hours:
            raise ValidationError(f"no training-hours entry for language {src!r}")
        target = s.get("target_language") or "none"
        if s["algorithm"] == "universal_lang":
            target = f"{target} (universal)"
        rows.append({
            "source_language": src,
            "training_hours": hours[src],
            "target_language": target,
            "wer": s["aggregates"]["adv_wer"],
        })
    rows.sort(key=lambda r: (r["training_hours"], r["source_language"], r["target_language"]))
    return _write_csv(FIGURE_COLUMNS, rows)
