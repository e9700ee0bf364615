import numpy as np
import pytest

from astspoof.audio_io import AudioClip

FS = 16000

ACCEPTANCE_RESULTS = {}


def sine(freq, seconds=1.0, amp=0.5, fs=FS, phase=0.0):
    t = np.arange(int(round(seconds * fs))) / fs
    return AudioClip(amp * np.sin(2 * np.pi * freq * t + phase), fs, f"sine{freq}")


def rms(x):
    return float(np.sqrt(np.mean(np.square(x))))


def peak_freq(x, fs=FS):
    spec = np.abs(np.fft.rfft(x * np.hanning(x.size), n=8 * x.size))
    return np.argmax(spec) * fs / (8 * x.size)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[key]
        terminalreporter.write_line(f"{key}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """24 quarter-second clips: train 8+8, validation 4+4."""
    from astspoof import toy

    root = tmp_path_factory.mktemp("tiny")
    plan = {"train": {"human": 8, "toyspoof": 8}, "validation": {"human": 4, "toyspoof": 4}}
    records = toy.write_corpus(root, plan, seed=0, duration_s=0.25)
    return root, records
