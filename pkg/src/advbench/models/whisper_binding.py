"""Binding to the open-source Whisper checkpoints through the ``whisper`` package."""

from __future__ import annotations

import os
from functools import lru_cache
from pathlib import Path

import torch
import whisper
from whisper.audio import CHUNK_LENGTH, log_mel_spectrogram
from whisper.model import Whisper
from whisper.tokenizer import get_tokenizer

from advbench.models.base import SpeechModel

WHISPER_MODEL_IDS = (
    "tiny.en", "tiny", "base.en", "base", "small.en", "small",
    "medium.en", "medium", "large", "large-v1", "large-v2", "large-v3",
)


def model_dir() -> Path:
    return Path(os.environ.get("ADVBENCH_MODEL_DIR", Path.home() / ".cache" / "whisper"))


def checkpoint_path(model_id: str, directory=None) -> Path:
    return Path(directory or model_dir()) / f"{model_id}.pt"


class WhisperModel(SpeechModel):
    """Whisper checkpoint exposed through the differentiable model contract.

    Decoding uses the package's own decoder with beam size 5, no timestamps
    and fp32. The loss path recomputes the log-mel features with torch ops so
    gradients reach the raw waveform.
    """

    def __init__(self, model: Whisper, model_id: str = "custom", beam_size: int = 5):
        model = model.eval()
        self.model = model
        self._base_tokenizer = get_tokenizer(model.is_multilingual, num_languages=model.num_languages, task="transcribe")
        super().__init__(
            model_id,
            model.is_multilingual,
            self._base_tokenizer.all_language_codes,
            max_input_seconds=float(CHUNK_LENGTH),
            beam_size=beam_size,
        )
        self._lang_token_ids = torch.tensor(self._base_tokenizer.all_language_tokens)
        for p in model.parameters():
            p.requires_grad_(False)

    @classmethod
    def from_checkpoint(cls, model_id: str, directory=None, beam_size: int = 5) -> "WhisperModel":
        """Load ``<ADVBENCH_MODEL_DIR>/<model_id>.pt``; never downloads."""
        path = checkpoint_path(model_id, directory)
        if not path.exists():
            raise FileNotFoundError(
                f"Whisper checkpoint {path} not found; place {model_id}.pt under $ADVBENCH_MODEL_DIR"
            )
        return cls(whisper.load_model(str(path), device="cpu"), model_id=model_id, beam_size=beam_size)

    @property
    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.model.parameters())

    @property
    def eot(self) -> int:
        return self._base_tokenizer.eot

    @lru_cache(maxsize=None)
    def _tokenizer(self, language):
        return get_tokenizer(
            self.multilingual,
            num_languages=self.model.num_languages,
            language=language,
            task="transcribe" if self.multilingual else None,
        )

    def _encode_text(self, text):
        return self._base_tokenizer.encode(" " + text.strip())

    def _prefix(self, language):
        return list(self._tokenizer(language).sot_sequence_including_notimestamps)

    def _mel(self, audio):
        return log_mel_spectrogram(audio, self.model.dims.n_mels)

    def _decoder_logits(self, audio, tokens):
        features = self.model.embed_audio(self._mel(audio)[None])
        return self.model.logits(tokens[None], features)[0]

    def _language_logits(self, audio):
        features = self.model.embed_audio(self._mel(audio)[None])
        sot = torch.tensor([[self._base_tokenizer.sot]])
        return self.model.logits(sot, features)[0, 0, self._lang_token_ids]

    def _decode(self, audio, language, beam_size):
        if not self.multilingual:
            language = "en"
        options = whisper.DecodingOptions(
            task="transcribe",
            language=language,
            beam_size=beam_size if beam_size > 1 else None,
            without_timestamps=True,
            fp16=False,
        )
        result = whisper.decode(self.model, self._mel(audio), options)
        return result.text.strip()
