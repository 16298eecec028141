import numpy as np
import pytest

from advbench.defense import SmoothingConfig, smooth_transcribe
from advbench.errors import ValidationError

from conftest import MeanModel, tone


def test_config_invariants():
    with pytest.raises(ValidationError):
        SmoothingConfig(sigma=-0.1)
    with pytest.raises(ValidationError):
        SmoothingConfig(n_draws=0)
    with pytest.raises(ValidationError):
        SmoothingConfig(n_draws=3)  # single aggregation
    with pytest.raises(ValidationError):
        SmoothingConfig(aggregation="vote")
    with pytest.raises(ValidationError):
        SmoothingConfig.from_dict({"sigma": 0.02, "draws": 2})
    cfg = SmoothingConfig(0.03, 5, "majority_exact", 7)
    assert SmoothingConfig.from_dict(cfg.to_dict()) == cfg


def test_zero_sigma_is_plain_transcription(surrogate):
    x = tone(0.5)
    assert smooth_transcribe(surrogate, x, SmoothingConfig(sigma=0.0)) == surrogate.transcribe(x)


def test_seeded_draws_reproduce(surrogate):
    x = tone(0.5, seed=2)
    cfg = SmoothingConfig(sigma=0.03, seed=11)
    assert smooth_transcribe(surrogate, x, cfg) == smooth_transcribe(surrogate, x, cfg)
    assert smooth_transcribe(surrogate, x, cfg, seed=5) == smooth_transcribe(surrogate, x, cfg, seed=5)


def test_noise_is_applied_and_clipped():
    seen = []

    class Recorder(MeanModel):
        def transcribe(self, x, **kw):
            seen.append(np.array(x))
            return "a"

    x = np.full(200, 0.999)
    smooth_transcribe(Recorder(), x, SmoothingConfig(sigma=0.02, seed=0))
    (z,) = seen
    assert z.max() <= 1.0 and not np.array_equal(z, x)
    below = z[z < 1.0] - 0.999
    assert 0.005 < below.std() < 0.03


def test_majority_vote():
    class Scripted(MeanModel):
        def __init__(self, outputs):
            super().__init__()
            self.outputs = iter(outputs)

        def transcribe(self, x, **kw):
            return next(self.outputs)

    cfg = SmoothingConfig(sigma=0.01, n_draws=3, aggregation="majority_exact")
    assert smooth_transcribe(Scripted(["B", "a", "b!"]), np.zeros(200), cfg) == "B"


def test_majority_tie_goes_to_lower_loss():
    class Tied(MeanModel):
        def __init__(self):
            super().__init__()
            self.outputs = iter(["a", "b"])

        def transcribe(self, x, **kw):
            return next(self.outputs)

    x = np.full(200, 0.01)  # model strongly prefers "b"
    cfg = SmoothingConfig(sigma=0.001, n_draws=2, aggregation="majority_exact")
    assert smooth_transcribe(Tied(), x, cfg) == "b"
