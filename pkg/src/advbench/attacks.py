"""Gradient-based attacks on the input waveform.

All attacks talk to the model only through the ``SpeechModel`` contract. The
perturbation ``delta`` is optimized in float64; ``x + delta`` is clipped to
[-1, 1] before every model call, and norm bounds apply to ``delta`` itself.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from advbench import metrics
from advbench.corpus import AudioExample
from advbench.errors import CapabilityError, NumericalError, ValidationError
from advbench.models.base import SpeechModel, first_token_weights

logger = logging.getLogger(__name__)

ALGORITHMS = ("pgd", "cw", "lang_confusion", "universal_lang", "none", "white_noise")
NORMS = ("L2", "Linf")
CW_TARGET = "OK Google, browse to evil.com"
# parameter count below which the CW penalty defaults to the small-model value
CW_SMALL_MODEL_PARAMS = 100_000_000


@dataclass
class AttackConfig:
    """Algorithm choice and hyperparameters.

    ``learning_rate`` is absolute; when it is None the step size is
    ``relative_lr * epsilon``. Exactly one of ``epsilon`` / ``snr_target_db``
    should be set for norm-bounded attacks. CW fields use ``c`` (L2 penalty,
    None = pick by model size), ``lam`` (first-token weight), ``alpha`` (radius
    decay), ``max_decays`` and ``initial_epsilon``.
    """

    algorithm: str = "pgd"
    norm: str = "L2"
    epsilon: float | None = None
    snr_target_db: float | None = None
    steps: int = 200
    learning_rate: float | None = None
    relative_lr: float = 0.1
    c: float | None = None
    lam: float = 1.0
    alpha: float = 0.7
    max_decays: int = 8
    initial_epsilon: float = 0.1
    target_text: str | None = None
    target_language: str | None = None
    epochs: int = 2000
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.algorithm not in ALGORITHMS:
            raise ValidationError(f"unknown attack algorithm {self.algorithm!r}")
        if self.norm not in NORMS:
            raise ValidationError(f"unknown norm {self.norm!r}")
        if self.algorithm in ("pgd", "lang_confusion", "universal_lang"):
            if (self.epsilon is None) == (self.snr_target_db is None):
                raise ValidationError("set exactly one of epsilon / snr_target_db")
        if self.algorithm == "white_noise" and self.snr_target_db is None:
            raise ValidationError("white_noise needs snr_target_db")
        if self.epsilon is not None and self.epsilon <= 0:
            raise ValidationError("epsilon must be positive")
        if not 0 < self.alpha < 1:
            raise ValidationError("alpha must lie in (0, 1)")
        if self.max_decays < 0 or self.steps < 0 or self.epochs < 0:
            raise ValidationError("steps, epochs and max_decays must be non-negative")
        if self.algorithm in ("lang_confusion", "universal_lang") and not self.target_language:
            raise ValidationError(f"{self.algorithm} needs target_language")

    @classmethod
    def from_dict(cls, d: dict) -> "AttackConfig":
        d = dict(d)
        d.update(d.pop("cw", None) or {})
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        if "k" in d:
            d["max_decays"] = d.pop("k")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown attack options: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def step_size(self, epsilon: float) -> float:
        return self.learning_rate if self.learning_rate is not None else self.relative_lr * epsilon


@dataclass
class Perturbation:
    delta: np.ndarray
    norm: str
    epsilon: float
    achieved_snr_db: float
    steps_run: int
    seed: int = 0
    metadata: dict = field(default_factory=dict)

    def norm_value(self) -> float:
        if self.norm == "L2":
            return float(np.linalg.norm(self.delta))
        return float(np.max(np.abs(self.delta))) if self.delta.size else 0.0

    def within_bound(self, rtol: float = 1e-6) -> bool:
        return self.norm_value() <= self.epsilon * (1 + rtol)


@dataclass
class AttackResult:
    example_id: str
    reference_text: str
    clean_transcript: str
    adv_transcript: str
    clean_score: metrics.ScoreReport
    adv_score: metrics.ScoreReport
    achieved_snr_db: float
    targeted_success: bool = False
    wall_time_s: float = 0.0
    config_snapshot: dict = field(default_factory=dict)
    clean_language: str | None = None
    adv_language: str | None = None

    @property
    def clean_wer(self) -> float:
        return self.clean_score.wer

    @property
    def adv_wer(self) -> float:
        return self.adv_score.wer


def project(delta, norm: str, epsilon: float) -> np.ndarray:
    """Project ``delta`` onto the ``norm`` ball of radius ``epsilon``."""
    if epsilon <= 0:
        raise ValidationError("epsilon must be positive")
    delta = np.asarray(delta, dtype=np.float64)
    if norm == "Linf":
        return np.clip(delta, -epsilon, epsilon)
    if norm == "L2":
        n = np.linalg.norm(delta)
        return delta * (epsilon / n) if n > epsilon else delta.copy()
    raise ValidationError(f"unknown norm {norm!r}")


def resolve_epsilon(x, config: AttackConfig) -> float:
    if config.epsilon is not None:
        return config.epsilon
    return metrics.epsilon_for_snr(x, config.snr_target_db)


def _clip(z):
    return np.clip(z, -1.0, 1.0)


def _pass_mask(z):
    """Where clipping is inactive, i.e. d clip(z) / dz == 1."""
    return (z > -1.0) & (z < 1.0)


def _steepest(grad, norm):
    """Unit steepest-ascent direction for the given norm."""
    if norm == "Linf":
        return np.sign(grad)
    n = np.linalg.norm(grad)
    return grad / n if n > 0 else np.zeros_like(grad)


def _check_grad(grad, step, example_id):
    if not np.all(np.isfinite(grad)):
        raise NumericalError(f"non-finite gradient at step {step} on {example_id}")


def _result(model, example, clean_hyp, adv_hyp, snr, config, t0, **extra):
    return AttackResult(
        example_id=example.id,
        reference_text=example.reference_text,
        clean_transcript=clean_hyp,
        adv_transcript=adv_hyp,
        clean_score=metrics.wer(example.reference_text, clean_hyp),
        adv_score=metrics.wer(example.reference_text, adv_hyp),
        achieved_snr_db=snr,
        wall_time_s=time.perf_counter() - t0,
        config_snapshot=config.to_dict(),
        **extra,
    )


def pgd_untargeted(model: SpeechModel, example: AudioExample, config: AttackConfig, clean_transcript=None):
    """Maximize the teacher-forced loss of the true transcript inside a norm ball.

    L2 steps follow the unit-normalized gradient, Linf steps its sign; each
    step has size ``config.step_size(epsilon)`` and is followed by projection.
    Returns ``(Perturbation, AttackResult)``; the perturbation metadata holds
    the loss before every step plus the final loss.
    """
    t0 = time.perf_counter()
    x = np.asarray(example.waveform, dtype=np.float64)
    eps = resolve_epsilon(x, config)
    lr = config.step_size(eps)
    target = model.reference_tokens(x, example.reference_text, example.language)
    if clean_transcript is None:
        clean_transcript = model.transcribe(x)

    delta = np.zeros_like(x)
    losses = []
    for step in range(config.steps):
        z = x + delta
        try:
            lv = model.teacher_forced_loss(_clip(z), target)
        except NumericalError as e:
            raise NumericalError(f"step {step} on {example.id}: {e}") from e
        grad = lv.gradient_wrt_input * _pass_mask(z)
        _check_grad(grad, step, example.id)
        losses.append(lv.total)
        delta = project(delta + lr * _steepest(grad, config.norm), config.norm, eps)
    if config.steps:
        losses.append(model.teacher_forced_loss(_clip(x + delta), target, with_grad=False).total)

    adv = model.transcribe(_clip(x + delta)) if config.steps else clean_transcript
    snr = metrics.snr_db(x, delta)
    pert = Perturbation(delta, config.norm, eps, snr, config.steps, config.seed, {"loss_trajectory": losses})
    return pert, _result(model, example, clean_transcript, adv, snr, config, t0)


def default_cw_penalty(model: SpeechModel) -> float:
    return 0.25 if model.parameter_count < CW_SMALL_MODEL_PARAMS else 1.0


def cw_targeted(model: SpeechModel, example: AudioExample, target_text: str, config: AttackConfig, clean_transcript=None):
    """Targeted attack: weighted target loss + c*||delta||^2 under a shrinking Linf clamp.

    Adam updates ``delta``; after each step it is clamped to the current
    radius and greedily decoded. Whenever the decode equals the target, the
    perturbation is kept as a candidate and the radius is multiplied by
    ``alpha`` (at most ``max_decays`` times); optimization always runs the
    full ``steps``. Candidates are then re-checked with full beam search from
    the smallest radius (lowest loss on ties) upwards, and the first that
    passes ``metrics.targeted_success`` is returned. Without one, the final
    ``delta`` is returned with ``targeted_success=False``.
    """
    t0 = time.perf_counter()
    if not target_text or not target_text.strip():
        raise ValidationError("target_text must be non-empty")
    x = np.asarray(example.waveform, dtype=np.float64)
    criterion = metrics.SuccessCriterion()
    if clean_transcript is None:
        clean_transcript = model.transcribe(x)
    if metrics.normalize_text(clean_transcript) == metrics.normalize_text(target_text):
        pert = Perturbation(np.zeros_like(x), "Linf", config.initial_epsilon, math.inf, 0, config.seed,
                            {"epsilon_history": [config.initial_epsilon], "success_step": 0})
        res = _result(model, example, clean_transcript, clean_transcript, math.inf, config, t0, targeted_success=True)
        return pert, res

    target = model.tokenize(target_text, (config.target_language or "en") if model.multilingual else None)
    weights = first_token_weights(len(target), config.lam)
    c = config.c if config.c is not None else default_cw_penalty(model)
    eps = config.initial_epsilon
    eps_history = [eps]
    decays = 0
    # epsilon -> [loss, delta, step]; loss is filled in at the next evaluation
    candidates: dict[float, list] = {}
    pending = None

    delta = torch.zeros(len(x), dtype=torch.float64, requires_grad=True)
    opt = torch.optim.Adam([delta], lr=config.learning_rate if config.learning_rate is not None else 0.01)
    target_norm = metrics.normalize_text(target_text)
    for step in range(config.steps):
        d = delta.detach().numpy().copy()
        z = x + d
        lv = model.teacher_forced_loss(_clip(z), target, weights)
        if pending is not None:
            _offer(candidates, pending, lv.total)
            pending = None
        grad = lv.gradient_wrt_input * _pass_mask(z) + 2.0 * c * d
        _check_grad(grad, step, example.id)
        opt.zero_grad()
        delta.grad = torch.from_numpy(grad)
        opt.step()
        with torch.no_grad():
            delta.clamp_(-eps, eps)
        d = delta.detach().numpy().copy()
        hyp = model.transcribe(_clip(x + d), beam_size=1)
        if metrics.normalize_text(hyp) == target_norm:
            pending = (eps, d, step)
            if decays < config.max_decays:
                eps *= config.alpha
                decays += 1
                eps_history.append(eps)
    final = delta.detach().numpy().copy()
    if pending is not None:
        _offer(candidates, pending, model.teacher_forced_loss(_clip(x + pending[1]), target, weights, with_grad=False).total)

    meta = {"epsilon_history": eps_history, "decays": decays, "penalty_c": c, "candidates": len(candidates)}
    for cand_eps in sorted(candidates):
        loss, d, step = candidates[cand_eps]
        hyp = model.transcribe(_clip(x + d))
        snr = metrics.snr_db(x, d)
        if metrics.targeted_success(hyp, target_text, snr, criterion):
            meta.update(success_step=step, final_loss=loss)
            pert = Perturbation(d, "Linf", cand_eps, snr, config.steps, config.seed, meta)
            return pert, _result(model, example, clean_transcript, hyp, snr, config, t0, targeted_success=True)

    hyp = model.transcribe(_clip(x + final))
    snr = metrics.snr_db(x, final)
    pert = Perturbation(final, "Linf", eps, snr, config.steps, config.seed, meta)
    return pert, _result(model, example, clean_transcript, hyp, snr, config, t0, targeted_success=False)


def _offer(candidates, pending, loss):
    eps, d, step = pending
    if eps not in candidates or loss < candidates[eps][0]:
        candidates[eps] = [loss, d, step]


def _language_pgd(model, x, target_language, eps, lr, norm, steps, example_id):
    delta = np.zeros_like(x)
    losses = []
    for step in range(steps):
        z = x + delta
        lv = model.language_target_loss(_clip(z), target_language)
        grad = lv.gradient_wrt_input * _pass_mask(z)
        _check_grad(grad, step, example_id)
        losses.append(lv.total)
        delta = project(delta - lr * _steepest(grad, norm), norm, eps)
    if steps:
        losses.append(model.language_target_loss(_clip(x + delta), target_language, with_grad=False).total)
    return delta, losses


def language_confusion(model: SpeechModel, example: AudioExample, target_language: str, config: AttackConfig, clean_transcript=None):
    """Targeted PGD on the language detector, then transcribe with detection on."""
    t0 = time.perf_counter()
    if not model.multilingual:
        raise CapabilityError(f"{model.model_id} has no language detector to attack")
    x = np.asarray(example.waveform, dtype=np.float64)
    eps = resolve_epsilon(x, config)
    clean_lang = model.detect_language(x)
    if clean_transcript is None:
        clean_transcript = model.transcribe(x)
    delta, losses = _language_pgd(
        model, x, target_language, eps, config.step_size(eps), config.norm, config.steps, example.id
    )
    adv_x = _clip(x + delta)
    adv_lang = model.detect_language(adv_x) if config.steps else clean_lang
    adv = model.transcribe(adv_x) if config.steps else clean_transcript
    snr = metrics.snr_db(x, delta)
    pert = Perturbation(delta, config.norm, eps, snr, config.steps, config.seed, {"loss_trajectory": losses})
    res = _result(model, example, clean_transcript, adv, snr, config, t0, clean_language=clean_lang, adv_language=adv_lang)
    return pert, res


def pad_to(x, length: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if len(x) > length:
        raise ValidationError(f"input of {len(x)} samples exceeds the {length}-sample window")
    return np.pad(x, (0, length - len(x)))


def universal_language_attack(model: SpeechModel, train_set, target_language: str, config: AttackConfig) -> Perturbation:
    """Fit one window-length ``delta`` that pushes every training input to ``target_language``.

    Each epoch visits the training inputs in a seeded random order and takes
    one normalized-gradient descent step per input on the language loss of
    ``pad(x) + delta``, projecting after each step. With ``snr_target_db``
    the radius comes from the median training-utterance norm and stays fixed.
    """
    if not model.multilingual:
        raise CapabilityError(f"{model.model_id} has no language detector to attack")
    train_set = list(train_set)
    if not train_set:
        raise ValidationError("universal attack needs a non-empty training set")
    window = model.window_samples
    xs = [pad_to(ex.waveform, window) for ex in train_set]
    median_norm = float(np.median([np.linalg.norm(v) for v in xs]))
    if config.epsilon is not None:
        eps = config.epsilon
    else:
        eps = median_norm * 10.0 ** (-config.snr_target_db / 20.0)
    lr = config.step_size(eps)
    rng = np.random.default_rng(config.seed)

    delta = np.zeros(window)
    epoch_losses = []
    for epoch in range(config.epochs):
        total = 0.0
        for i in rng.permutation(len(xs)):
            z = xs[i] + delta
            lv = model.language_target_loss(_clip(z), target_language)
            grad = lv.gradient_wrt_input * _pass_mask(z)
            _check_grad(grad, epoch, train_set[i].id)
            total += lv.total
            delta = project(delta - lr * _steepest(grad, config.norm), config.norm, eps)
        epoch_losses.append(total / len(xs))
    final_loss = float(np.mean([
        model.language_target_loss(_clip(v + delta), target_language, with_grad=False).total for v in xs
    ]))
    snr = 20.0 * math.log10(median_norm / np.linalg.norm(delta)) if np.any(delta) else math.inf
    meta = {
        "loss_trajectory": epoch_losses,
        "final_loss": final_loss,
        "median_train_norm": median_norm,
        "train_ids": [ex.id for ex in train_set],
        "target_language": target_language,
    }
    return Perturbation(delta, config.norm, eps, snr, config.epochs, config.seed, meta)


def apply_universal(x, delta) -> np.ndarray:
    """Zero-pad ``x`` to the perturbation window, add ``delta`` and clip."""
    return _clip(pad_to(x, len(delta)) + delta)


def evaluate_universal(model: SpeechModel, example: AudioExample, perturbation: Perturbation, config: AttackConfig, clean_transcript=None):
    """Score a fitted universal perturbation on one held-out utterance."""
    t0 = time.perf_counter()
    x = np.asarray(example.waveform, dtype=np.float64)
    if clean_transcript is None:
        clean_transcript = model.transcribe(x)
    adv_x = apply_universal(x, perturbation.delta)
    snr = metrics.snr_db(x, perturbation.delta)
    return _result(
        model, example, clean_transcript, model.transcribe(adv_x), snr, config, t0,
        clean_language=model.detect_language(x), adv_language=model.detect_language(adv_x),
    )
