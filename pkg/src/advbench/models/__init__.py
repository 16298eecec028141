"""Subject-model contract, the Whisper binding and the test surrogate."""

from advbench.models.base import LossValue, SpeechModel, TokenSequence, first_token_weights, weighted_mean
from advbench.models.surrogate import SurrogateModel

# Reported sizes of the checkpoint family (informational only).
NOMINAL_PARAMETERS = {
    "tiny": 39_000_000,
    "base": 74_000_000,
    "small": 244_000_000,
    "medium": 769_000_000,
    "large": 1_550_000_000,
}


def load_model(model_id: str, beam_size: int = 5) -> SpeechModel:
    """Resolve a checkpoint id to a model handle.

    ``surrogate`` and ``surrogate.en`` give the in-repo toy model; anything
    else is treated as a Whisper checkpoint id under ``$ADVBENCH_MODEL_DIR``.
    """
    if model_id in ("surrogate", "surrogate.en"):
        return SurrogateModel(multilingual=model_id == "surrogate", beam_size=beam_size)
    from advbench.models.whisper_binding import WhisperModel

    return WhisperModel.from_checkpoint(model_id, beam_size=beam_size)


__all__ = [
    "LossValue",
    "NOMINAL_PARAMETERS",
    "SpeechModel",
    "SurrogateModel",
    "TokenSequence",
    "first_token_weights",
    "load_model",
    "weighted_mean",
]
