"""A few-thousand-parameter encoder-decoder used for hermetic gradient tests.

It mirrors the subject-model plumbing (log-mel front end, start/language/task
prefix, text tokens, end-of-text) at toy size, in float64 so that central
finite differences are accurate. Weights are plain numpy draws from a fixed
seed and ship as ``data/surrogate_weights.npz``; ``build_surrogate_state``
regenerates them bit-for-bit.
"""

from __future__ import annotations

import math
from importlib import resources

import numpy as np
import torch
import torch.nn.functional as F
from whisper.audio import HOP_LENGTH, N_FFT, mel_filters

from advbench.metrics import normalize_text
from advbench.models.base import SpeechModel

SURROGATE_SEED = 20221221
SURROGATE_LANGUAGES = ("en", "hy", "lt", "cs", "da", "id", "it", "tl", "sr")
SPECIALS = ("<|endoftext|>", "<|startoftranscript|>", "<|transcribe|>")
CHARS = " abcdefghijklmnopqrstuvwxyz'"
N_MELS = 80
POOL = 20  # frames per encoder position
D_MODEL = 16
MAX_DECODE = 24
EOT_RAMP = 0.8
# log(mel + floor); keeps the front end smooth near silence
MEL_FLOOR = 1e-2

VOCAB = list(SPECIALS) + [f"<|{c}|>" for c in SURROGATE_LANGUAGES] + list(CHARS)
EOT, SOT, TRANSCRIBE = 0, 1, 2
LANG_OFFSET = len(SPECIALS)
CHAR_OFFSET = LANG_OFFSET + len(SURROGATE_LANGUAGES)


def _shapes(n_positions):
    d, v = D_MODEL, len(VOCAB)
    return {
        "enc_w": (N_MELS, d),
        "enc_b": (d,),
        "enc_pos": (n_positions, d),
        "embed": (v, d),
        "gru_w_ih": (3 * d, d),
        "gru_w_hh": (3 * d, d),
        "gru_b_ih": (3 * d,),
        "gru_b_hh": (3 * d,),
        "attn_q": (d, d),
        "out_w": (2 * d, v),
        "out_b": (v,),
    }


def build_surrogate_state(seed: int = SURROGATE_SEED, max_input_seconds: float = 4.0) -> dict[str, np.ndarray]:
    """Deterministic surrogate weights from a numpy PCG64 stream."""
    rng = np.random.default_rng(seed)
    n_positions = int(max_input_seconds * 16000) // HOP_LENGTH // POOL
    scales = {
        "enc_w": 4.0 / math.sqrt(N_MELS),
        "embed": 1.0,
        "enc_pos": 0.3,
        "out_b": 0.3,
        "out_w": 0.6,
        "gru_w_hh": 0.6,
        "attn_q": 1.0,
    }
    state = {
        name: rng.normal(0.0, scales.get(name, 1.0 / math.sqrt(D_MODEL)), size=shape)
        for name, shape in _shapes(n_positions).items()
    }
    # nudge towards ending and word breaks so transcripts are not one long token run
    state["out_b"][EOT] = 2.0
    state["out_b"][CHAR_OFFSET] = 1.6
    return state


def _gru_cell(x, h, p):
    gi = p["gru_w_ih"] @ x + p["gru_b_ih"]
    gh = p["gru_w_hh"] @ h + p["gru_b_hh"]
    i_r, i_z, i_n = gi.chunk(3)
    h_r, h_z, h_n = gh.chunk(3)
    r = torch.sigmoid(i_r + h_r)
    z = torch.sigmoid(i_z + h_z)
    n = torch.tanh(i_n + r * h_n)
    return (1 - z) * n + z * h


def _load_shipped_state():
    with resources.files("advbench.data").joinpath("surrogate_weights.npz").open("rb") as f:
        with np.load(f) as z:
            return {k: z[k] for k in z.files}


class SurrogateModel(SpeechModel):
    """Character-level toy ASR model with a language-detection head."""

    dtype = torch.float64

    def __init__(self, multilingual: bool = True, state=None, max_input_seconds: float = 4.0, beam_size: int = 5):
        super().__init__(
            "surrogate" if multilingual else "surrogate.en",
            multilingual,
            SURROGATE_LANGUAGES,
            max_input_seconds=max_input_seconds,
            beam_size=beam_size,
        )
        if state is None:
            state = _load_shipped_state()
        self.params = {k: torch.tensor(v, dtype=torch.float64) for k, v in state.items()}
        n_frames = self.window_samples // HOP_LENGTH
        if self.params["enc_pos"].shape[0] != n_frames // POOL:
            raise ValueError("weights do not match max_input_seconds")
        self._mel = mel_filters("cpu", N_MELS).to(torch.float64)
        self._window = torch.hann_window(N_FFT, dtype=torch.float64)

    @property
    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.params.values())

    @property
    def eot(self) -> int:
        return EOT

    def _encode_text(self, text):
        return [CHAR_OFFSET + CHARS.index(c) for c in normalize_text(text) if c in CHARS]

    def _prefix(self, language):
        if language is None:
            return [SOT, TRANSCRIBE]
        return [SOT, LANG_OFFSET + SURROGATE_LANGUAGES.index(language), TRANSCRIBE]

    def encode(self, audio: torch.Tensor) -> torch.Tensor:
        stft = torch.stft(audio, N_FFT, HOP_LENGTH, window=self._window, return_complex=True)
        power = stft[..., :-1].abs() ** 2
        feats = torch.log(self._mel @ power + MEL_FLOOR)  # (mels, frames)
        pooled = F.avg_pool1d(feats[None], POOL)[0].T  # (positions, mels)
        p = self.params
        return torch.tanh(pooled @ p["enc_w"] + p["enc_b"]) + p["enc_pos"]

    def decode_logits(self, enc: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
        p = self.params
        emb = p["embed"][tokens]
        h = torch.zeros(D_MODEL, dtype=torch.float64)
        outs = []
        for t in range(emb.shape[0]):
            h = _gru_cell(emb[t], h, p)
            att = torch.softmax(enc @ (p["attn_q"] @ h) / math.sqrt(D_MODEL), dim=0)
            outs.append(torch.cat([h, att @ enc]))
        logits = torch.stack(outs) @ p["out_w"] + p["out_b"]
        # end-of-text grows likelier with position so decodes terminate
        ramp = torch.zeros_like(logits)
        ramp[:, EOT] = EOT_RAMP * torch.arange(logits.shape[0], dtype=torch.float64)
        return logits + ramp

    def _decoder_logits(self, audio, tokens):
        return self.decode_logits(self.encode(audio), tokens)

    def _language_logits(self, audio):
        logits = self.decode_logits(self.encode(audio), torch.tensor([SOT]))[0]
        return logits[LANG_OFFSET:CHAR_OFFSET]

    def _decode(self, audio, language, beam_size):
        enc = self.encode(audio)
        if self.multilingual and language is None:
            lang_logits = self.decode_logits(enc, torch.tensor([SOT]))[0][LANG_OFFSET:CHAR_OFFSET]
            language = SURROGATE_LANGUAGES[int(lang_logits.argmax())]
        prefix = self._prefix(language if self.multilingual else None)
        # only characters and end-of-text may be emitted
        allowed = torch.full((len(VOCAB),), -math.inf, dtype=torch.float64)
        allowed[CHAR_OFFSET:] = 0.0
        allowed[EOT] = 0.0

        beams = [(0.0, [])]
        finished = []
        for _ in range(MAX_DECODE):
            candidates = []
            for score, seq in beams:
                logits = self.decode_logits(enc, torch.tensor(prefix + seq))[-1]
                logp = torch.log_softmax(logits + allowed, dim=-1)
                top = torch.topk(logp, beam_size + 1)
                for lp, tok in zip(top.values.tolist(), top.indices.tolist()):
                    candidates.append((score + lp, seq + [tok]))
            candidates.sort(key=lambda c: -c[0])
            beams = []
            for score, seq in candidates:
                if seq[-1] == EOT:
                    finished.append((score, seq[:-1]))
                else:
                    beams.append((score, seq))
                if len(beams) == beam_size:
                    break
            if len(finished) >= beam_size or not beams:
                break
        pool = finished or beams
        _, best = max(pool, key=lambda c: c[0] / (len(c[1]) + 1))
        return "".join(CHARS[t - CHAR_OFFSET] for t in best).strip()
