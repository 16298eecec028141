import numpy as np
import pytest
import torch

from advbench.corpus import ManifestEntry, write_manifest, write_wav
from advbench.models import SurrogateModel
from advbench.models.base import SpeechModel


class MeanModel(SpeechModel):
    """Analytic stand-in whose outputs hinge on the waveform mean.

    Transcript is "b" when ``gain * mean(x) > 0`` and "a" otherwise; the
    language detector says "sr" under the same condition, "en" otherwise.
    Small and smooth, so targeted attacks succeed in a few steps.
    """

    dtype = torch.float64
    EOT, SOT, A, B, EN, SR = range(6)

    def __init__(self, multilingual=True, n_samples=200, gain=1000.0):
        super().__init__("mean-toy" if multilingual else "mean-toy.en", multilingual, ("en", "sr"),
                         max_input_seconds=n_samples / 16000, beam_size=5)
        self.gain = gain
        self.calls = 0

    @property
    def parameter_count(self):
        return 1

    @property
    def eot(self):
        return self.EOT

    def _encode_text(self, text):
        return [{"a": self.A, "b": self.B}[c] for c in text.lower() if c in "ab"]

    def _prefix(self, language):
        if not self.multilingual:
            return [self.SOT]
        return [self.SOT, self.EN if language == "en" else self.SR]

    def _score(self, audio):
        return self.gain * audio.mean()

    def _decoder_logits(self, audio, tokens):
        m = self._score(audio)
        first = len(self._prefix("en")) - 1
        rows = []
        for i in range(len(tokens)):
            row = torch.full((6,), -20.0, dtype=torch.float64)
            if i == first:
                row = torch.stack([torch.tensor(-5.0, dtype=torch.float64), row[1], -m, m, row[4], row[5]])
            else:
                row = torch.stack([torch.tensor(5.0, dtype=torch.float64), row[1], row[2], row[3], row[4], row[5]])
            rows.append(row)
        return torch.stack(rows)

    def _language_logits(self, audio):
        m = self._score(audio)
        return torch.stack([-m, m])

    def _decode(self, audio, language, beam_size):
        self.calls += 1
        m = float(self._score(audio))
        return "b" if m > 0 else "a"


@pytest.fixture(scope="session")
def surrogate():
    return SurrogateModel()


@pytest.fixture(scope="session")
def surrogate_en():
    return SurrogateModel(multilingual=False)


@pytest.fixture
def mean_model():
    return MeanModel()


def tone(seconds=1.0, freq=220.0, amp=0.3, seed=0, rate=16000):
    rng = np.random.default_rng(seed)
    t = np.arange(int(seconds * rate)) / rate
    return amp * np.sin(2 * np.pi * freq * t) * np.exp(-t) + 0.01 * rng.normal(size=t.size)


@pytest.fixture
def wav_corpus(tmp_path):
    """Three short synthetic utterances plus a JSONL manifest."""
    entries = []
    for i in range(3):
        write_wav(tone(1.0 + 0.25 * i, 180.0 + 60 * i, seed=i), tmp_path / f"utt{i}.wav")
        entries.append(ManifestEntry(f"utt{i}", f"utt{i}.wav", "hello world", "en"))
    write_manifest(entries, tmp_path / "manifest.jsonl")
    return tmp_path / "manifest.jsonl"


# -- acceptance reporting -------------------------------------------------------

_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when not in ("setup", "call"):
        return
    number, title = mark.args
    if rep.when == "setup" and rep.passed:
        return
    detail = dict(item.user_properties).get("detail", "")
    if rep.failed:
        msg = str(rep.longrepr.reprcrash.message) if hasattr(rep.longrepr, "reprcrash") else str(rep.longrepr)
        detail = msg.splitlines()[0][:160] if msg else detail
    if _criteria.get(number, ("PASS",))[0] == "FAIL":
        return  # several tests may share a criterion; any failure sticks
    _criteria[number] = ("PASS" if rep.passed else "FAIL", title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        status, title, detail = _criteria[number]
        terminalreporter.write_line(f"criterion {number:>2} {status}: {title}" + (f" ({detail})" if detail else ""))
