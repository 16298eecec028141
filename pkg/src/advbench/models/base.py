"""Differentiable subject-model contract shared by every binding.

Bindings supply four hooks (text encoding, decoder prefix, decoder logits for
a padded waveform, language logits) plus a decoder; the loss plumbing below
(teacher forcing, token weighting, gradients back to the waveform) is common.
"""

from __future__ import annotations

import abc
import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from advbench.errors import CapabilityError, NumericalError, ValidationError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TokenSequence:
    """Scored decoder targets plus the unscored prefix that conditions them.

    ``tokens`` holds the text tokens followed by end-of-text; ``prefix`` holds
    start-of-transcript, language and task tokens.
    """

    tokens: tuple[int, ...]
    text: str
    prefix: tuple[int, ...] = ()
    language: str | None = None

    @property
    def includes_task_prefix(self) -> bool:
        return bool(self.prefix)

    def __len__(self):
        return len(self.tokens)


@dataclass
class LossValue:
    total: float
    per_token: np.ndarray
    gradient_wrt_input: np.ndarray | None = None


def first_token_weights(length: int, lam: float = 1.0) -> list[float]:
    """Weights that boost the first text token: 1+lam, then 1 for the rest.

    With these, the weighted mean is ``((1+lam)*l_1 + sum_{i>=2} l_i) / (L+lam)``.
    """
    if length < 1:
        raise ValidationError("need at least one target token")
    return [1.0 + lam] + [1.0] * (length - 1)


def weighted_mean(per_token, weights=None):
    """sum(w_i * l_i) / sum(w_i); plain mean when ``weights`` is None.

    Works on tensors (keeps the graph) and on array-likes.
    """
    if not torch.is_tensor(per_token):
        per_token = torch.as_tensor(per_token, dtype=torch.float64)
    if weights is None:
        return per_token.mean()
    w = torch.as_tensor(weights, dtype=per_token.dtype, device=per_token.device)
    return (w * per_token).sum() / w.sum()


class SpeechModel(abc.ABC):
    """A single-owner handle on a differentiable sequence-to-sequence ASR model.

    Waveforms go in as 1-D float arrays at 16 kHz and at most
    ``max_input_seconds`` long; shorter inputs are zero-padded to the model
    window internally, and gradients are returned over the original span only.
    """

    sample_rate = 16000
    dtype = torch.float32

    def __init__(self, model_id: str, multilingual: bool, languages=(), max_input_seconds: float = 30.0, beam_size: int = 5):
        if beam_size < 1:
            raise ValidationError("beam_size must be positive")
        self.model_id = model_id
        self.multilingual = multilingual
        self.languages = tuple(languages) if multilingual else ("en",)
        self.max_input_seconds = max_input_seconds
        self.beam_size = beam_size

    def __repr__(self):
        return f"{type(self).__name__}({self.model_id!r}, multilingual={self.multilingual})"

    @property
    def window_samples(self) -> int:
        return int(round(self.max_input_seconds * self.sample_rate))

    @property
    @abc.abstractmethod
    def parameter_count(self) -> int: ...

    # -- binding hooks -----------------------------------------------------

    @abc.abstractmethod
    def _encode_text(self, text: str) -> list[int]: ...

    @abc.abstractmethod
    def _prefix(self, language: str | None) -> list[int]: ...

    @property
    @abc.abstractmethod
    def eot(self) -> int: ...

    @abc.abstractmethod
    def _decoder_logits(self, audio: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
        """Logits of shape (len(tokens), vocab) for a window-length waveform."""

    @abc.abstractmethod
    def _language_logits(self, audio: torch.Tensor) -> torch.Tensor:
        """Logits over ``self.languages`` for a window-length waveform."""

    @abc.abstractmethod
    def _decode(self, audio: torch.Tensor, language: str | None, beam_size: int) -> str: ...

    # -- input handling ----------------------------------------------------

    def _check_input(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 1:
            raise ValidationError(f"expected a mono waveform, got shape {x.shape}")
        if len(x) > self.window_samples:
            raise ValidationError(
                f"input is {len(x) / self.sample_rate:.2f}s, longer than the {self.max_input_seconds}s window"
            )
        if not np.all(np.isfinite(x)):
            raise ValidationError("waveform contains non-finite samples")
        return x

    def _audio(self, x, requires_grad=False):
        """Returns (leaf tensor over the input span, window-padded tensor)."""
        x = self._check_input(x)
        leaf = torch.tensor(x, dtype=self.dtype, requires_grad=requires_grad)
        return leaf, F.pad(leaf, (0, self.window_samples - len(x)))

    def _require_multilingual(self):
        if not self.multilingual:
            raise CapabilityError(f"{self.model_id} is English-only and has no language detector")

    def _check_language(self, language):
        if language not in self.languages:
            raise ValidationError(f"language {language!r} is not supported by {self.model_id}")

    # -- public contract ---------------------------------------------------

    def tokenize(self, text: str, language: str | None = None) -> TokenSequence:
        """Decoder targets for ``text``; multilingual models need a language."""
        if self.multilingual:
            if language is None:
                raise ValidationError("a language is required to build a multilingual decoder prefix")
            self._check_language(language)
        elif language not in (None, "en"):
            raise CapabilityError(f"{self.model_id} is English-only")
        text_tokens = self._encode_text(text)
        if not text_tokens:
            raise ValidationError(f"text {text!r} produced no tokens")
        return TokenSequence(
            tokens=tuple(text_tokens) + (self.eot,),
            text=text,
            prefix=tuple(self._prefix(language if self.multilingual else None)),
            language=language if self.multilingual else "en",
        )

    def transcribe(self, x, language: str | None = None, task: str = "transcribe", beam_size: int | None = None) -> str:
        if task != "transcribe":
            raise ValidationError(f"unsupported task {task!r}")
        if language is not None:
            if self.multilingual:
                self._check_language(language)
            elif language != "en":
                raise CapabilityError(f"{self.model_id} is English-only")
        _, audio = self._audio(x)
        try:
            with torch.no_grad():
                return self._decode(audio, language, beam_size or self.beam_size)
        except Exception:
            logger.exception("decoding failed on %s", self.model_id)
            return ""

    def teacher_forced_loss(self, x, target: TokenSequence, token_weights=None, with_grad: bool = True) -> LossValue:
        """Cross-entropy of ``target`` under teacher forcing, and its gradient w.r.t. ``x``.

        ``total`` is the ``token_weights``-weighted mean of the per-token
        losses (plain mean by default). Prefix tokens condition the decoder
        but are not scored.
        """
        L = len(target.tokens)
        if L == 0:
            raise ValidationError("empty target")
        if token_weights is not None:
            token_weights = [float(w) for w in token_weights]
            if len(token_weights) != L:
                raise ValidationError(f"got {len(token_weights)} token weights for {L} target tokens")
            if min(token_weights) <= 0:
                raise ValidationError("token weights must be positive")
        leaf, audio = self._audio(x, requires_grad=with_grad)
        full = list(target.prefix) + list(target.tokens)
        start = len(target.prefix) - 1
        if start < 0:
            raise ValidationError("target needs at least a start-of-transcript prefix token")
        with torch.set_grad_enabled(with_grad):
            logits = self._decoder_logits(audio, torch.tensor(full[:-1], dtype=torch.long))
            logp = torch.log_softmax(logits[start:].to(torch.float64), dim=-1)
            per_token = -logp.gather(1, torch.tensor(target.tokens, dtype=torch.long)[:, None])[:, 0]
            total = weighted_mean(per_token, token_weights)
        if not torch.isfinite(total):
            raise NumericalError(f"non-finite teacher-forced loss on {self.model_id}")
        grad = None
        if with_grad:
            (g,) = torch.autograd.grad(total, leaf)
            grad = g.detach().to(torch.float64).numpy()
            if not np.all(np.isfinite(grad)):
                raise NumericalError(f"non-finite input gradient on {self.model_id}")
        return LossValue(float(total.detach()), per_token.detach().numpy(), grad)

    def language_scores(self, x) -> dict[str, float]:
        self._require_multilingual()
        _, audio = self._audio(x)
        with torch.no_grad():
            p = torch.softmax(self._language_logits(audio).to(torch.float64), dim=-1).numpy()
        return dict(zip(self.languages, p.tolist()))

    def detect_language(self, x) -> str:
        scores = self.language_scores(x)
        return max(scores, key=scores.get)

    def language_target_loss(self, x, target_language: str, with_grad: bool = True) -> LossValue:
        """-log p(target_language | x) from the language detector."""
        self._require_multilingual()
        self._check_language(target_language)
        idx = self.languages.index(target_language)
        leaf, audio = self._audio(x, requires_grad=with_grad)
        with torch.set_grad_enabled(with_grad):
            logp = torch.log_softmax(self._language_logits(audio).to(torch.float64), dim=-1)
            total = -logp[idx]
        if not torch.isfinite(total):
            raise NumericalError(f"non-finite language loss on {self.model_id}")
        grad = None
        if with_grad:
            (g,) = torch.autograd.grad(total, leaf)
            grad = g.detach().to(torch.float64).numpy()
            if not np.all(np.isfinite(grad)):
                raise NumericalError(f"non-finite input gradient on {self.model_id}")
        value = float(total.detach())
        return LossValue(value, np.array([value]), grad)

    def reference_tokens(self, x, text: str, language: str | None = None) -> TokenSequence:
        """Tokenize ``text`` for ``x``, detecting the language when the model needs one."""
        if self.multilingual and (language is None or language not in self.languages):
            language = self.detect_language(x)
        return self.tokenize(text, language if self.multilingual else None)

