import struct
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from astspoof import audio_io as A
from astspoof.audio_io import AudioClip, SampleRecord
from astspoof.features import SampleRateError, log_mel

from conftest import peak_freq


def wav_bytes(code, channels, rate, bits, payload):
    block = channels * bits // 8
    fmt = struct.pack("<HHIIHH", code, channels, rate, rate * block, block, bits)
    body = b"WAVE" + b"fmt " + struct.pack("<I", 16) + fmt
    body += b"data" + struct.pack("<I", len(payload)) + payload
    return b"RIFF" + struct.pack("<I", len(body)) + body


def test_silence_decodes_to_zeros():
    clip = A.decode_wav(wav_bytes(1, 1, 16000, 16, b"\x00\x00" * 16000))
    assert clip.sample_rate_hz == 16000
    assert clip.samples.size == 16000 and not clip.samples.any()


def test_hand_encoded_square_wave():
    # +32767 = 0xFF 0x7F, -32767 = 0x01 0x80 (little-endian two's complement)
    payload = bytes([0xFF, 0x7F, 0x01, 0x80] * 4)
    clip = A.decode_wav(wav_bytes(1, 1, 8000, 16, payload))
    expected = np.array([32767, -32767] * 4) / 32768.0
    np.testing.assert_array_equal(clip.samples, expected)


def test_stereo_symmetric_downmix_is_zero():
    frame = struct.pack("<ff", 0.5, -0.5)
    clip = A.decode_wav(wav_bytes(3, 2, 16000, 32, frame * 100))
    assert clip.samples.size == 100 and not clip.samples.any()


def test_float_overrange_is_flagged_and_clipped():
    clip = A.decode_wav(wav_bytes(3, 1, 16000, 32, struct.pack("<fff", 0.1, 1.5, -2.0)))
    assert clip.clipped
    np.testing.assert_allclose(clip.samples, [0.1, 1.0, -1.0], atol=1e-7)


@pytest.mark.parametrize("data,err", [
    (b"RIFX0000WAVE", A.WavFormatError),
    (b"RIFF", A.WavFormatError),
    (wav_bytes(1, 1, 16000, 24, b"\x00" * 6), A.UnsupportedCodecError),
    (wav_bytes(6, 1, 8000, 8, b"\x00" * 4), A.UnsupportedCodecError),
    (wav_bytes(1, 1, 16000, 16, b""), A.EmptyAudioError),
])
def test_decode_errors(data, err):
    with pytest.raises(err):
        A.decode_wav(data)


def test_missing_fmt_chunk():
    body = b"WAVE" + b"data" + struct.pack("<I", 2) + b"\x00\x00"
    with pytest.raises(A.WavFormatError):
        A.decode_wav(b"RIFF" + struct.pack("<I", len(body)) + body)


@pytest.mark.parametrize("encoding", ["pcm16", "float32"])
def test_wav_round_trip(tmp_path, encoding):
    x = np.random.default_rng(3).uniform(-0.9, 0.9, 1001)
    A.write_wav(tmp_path / "a.wav", AudioClip(x, 22050), encoding)
    back = A.load_wav(tmp_path / "a.wav")
    assert back.sample_rate_hz == 22050
    tol = 1 / 32768 if encoding == "pcm16" else 1e-7
    np.testing.assert_allclose(back.samples, x, atol=tol)


def test_resample_identity_is_bit_exact():
    x = np.random.default_rng(0).uniform(-1, 1, 3000)
    out = A.resample(AudioClip(x, 16000), 16000)
    assert np.array_equal(out.samples, x) and out.samples is not x


def test_resample_sine_48k_to_16k():
    t = np.arange(48000) / 48000
    out = A.resample(AudioClip(0.8 * np.sin(2 * np.pi * 1000 * t), 48000), 16000)
    assert out.samples.size == 16000
    spec = np.abs(np.fft.rfft(out.samples))
    # 1 s at 16 kHz gives 1 Hz bins, so the tone sits exactly in bin 1000
    assert np.argmax(spec) == 1000
    amp = 2 * spec[1000] / out.samples.size
    assert abs(amp - 0.8) / 0.8 < 0.01


def test_resample_length_8k_to_16k():
    out = A.resample(AudioClip(np.zeros(8000), 8000), 16000)
    assert abs(out.samples.size - 16000) <= 1


@settings(max_examples=30, deadline=None)
@given(n=st.integers(100, 5000), src=st.sampled_from([8000, 11025, 22050, 44100, 48000]),
       dst=st.sampled_from([8000, 16000, 24000]))
def test_resample_duration_within_one_sample(n, src, dst):
    out = A.resample(AudioClip(np.zeros(n), src), dst)
    assert abs(out.samples.size - n * dst / src) <= 1


def test_resample_rejects_low_target():
    with pytest.raises(ValueError):
        A.resample(AudioClip(np.zeros(10), 16000), 4000)


def test_resample_preserves_in_band_tone_frequency():
    t = np.arange(44100) / 44100
    out = A.resample(AudioClip(0.5 * np.sin(2 * np.pi * 440 * t), 44100), 16000)
    assert abs(peak_freq(out.samples) - 440) < 1.0


def test_duration_policy():
    A.check_duration(AudioClip(np.zeros(3200), 16000))
    with pytest.raises(A.AudioError):
        A.check_duration(AudioClip(np.zeros(3199), 16000))
    with pytest.raises(A.AudioError):
        A.check_duration(AudioClip(np.zeros(30 * 16000 + 1), 16000))


# -- manifests ---------------------------------------------------------------

def test_parse_single_record():
    (r,) = A.parse_manifest("a.wav\tbonafide\thuman\ttrain\n")
    assert r == SampleRecord("a.wav", "bonafide", "human", "train")


def test_spoof_cannot_be_human():
    with pytest.raises(A.ManifestValidationError):
        A.parse_manifest("b.wav\tspoof\thuman\ttest\n")


def test_bonafide_must_be_human():
    with pytest.raises(A.ManifestValidationError):
        A.parse_manifest("x.wav\tbonafide\televenlabs\ttest\n")


@pytest.mark.parametrize("text,lineno", [
    ("# header\na.wav\tbonafide\thuman\ttrain\nb.wav\tfake\tx\ttrain\n", 3),
    ("a.wav\tbonafide\thuman\tdev\n", 1),
    ("a.wav\tbonafide\thuman\n", 1),
    ("a.wav\tbonafide\thuman\ttrain\n\na.wav\tspoof\tminimax\ttest\n", 3),
])
def test_parse_errors_carry_line_number(text, lineno):
    with pytest.raises(A.ManifestParseError) as info:
        A.parse_manifest(text)
    assert info.value.lineno == lineno
    assert f"line {lineno}" in str(info.value)


def test_comments_and_paths_with_commas():
    text = "# corpus\n\nclips/a,b.wav\tspoof\tminimax\ttest\n"
    (r,) = A.parse_manifest(text)
    assert r.path == "clips/a,b.wav"


def test_protocol_counts_preserved():
    rows = [f"h{i}.wav\tbonafide\thuman\ttrain" for i in range(500)]
    rows += [f"e{i}.wav\tspoof\televenlabs\ttrain" for i in range(102)]
    rows += [f"t{i}.wav\tbonafide\thuman\ttest" for i in range(4500)]
    recs = A.parse_manifest("\n".join(rows) + "\n")
    counts = Counter((r.label, r.split) for r in recs)
    assert counts == {("bonafide", "train"): 500, ("spoof", "train"): 102,
                      ("bonafide", "test"): 4500}


_text = st.text(alphabet=st.characters(blacklist_categories=("Cc", "Cs", "Zl", "Zp"),
                                       blacklist_characters="\t#"), min_size=1, max_size=20)


@st.composite
def record_lists(draw):
    paths = draw(st.lists(_text.filter(lambda s: s.strip()), unique=True, max_size=15))
    out = []
    for p in paths:
        spoof = draw(st.booleans())
        tech = draw(_text.filter(lambda s: s != "human")) if spoof else "human"
        out.append(SampleRecord(p, "spoof" if spoof else "bonafide", tech,
                                draw(st.sampled_from(A.SPLITS))))
    return out


@settings(max_examples=200, deadline=None)
@given(record_lists())
def test_manifest_round_trip(records):
    text = A.serialize_manifest(records)
    assert "\r" not in text
    assert A.parse_manifest(text) == records


def test_manifest_file_round_trip(tmp_path):
    recs = [SampleRecord("a.wav", "bonafide", "human", "train"),
            SampleRecord("b.wav", "spoof", "minimax", "test")]
    A.write_manifest(tmp_path / "m.tsv", recs)
    assert (tmp_path / "m.tsv").read_bytes().count(b"\r") == 0
    assert A.read_manifest(tmp_path / "m.tsv") == recs


# -- splits ------------------------------------------------------------------

def _records(n):
    return [SampleRecord(f"clip{i}.wav", "bonafide", "human", "train") for i in range(n)]


PINNED_SPLITS = ["train"] * 7 + ["test", "train", "train", "validation", "train"]


def test_split_assignment_pinned():
    # literal pin: a change in hashing or float handling shows up on any platform
    got = [r.split for r in A.assign_splits(_records(12), seed=7, validation=0.25, test=0.25)]
    assert got == PINNED_SPLITS


def test_split_assignment_matches_hash_oracle():
    import hashlib
    for r in A.assign_splits(_records(300), seed=11, validation=0.2, test=0.3):
        key = "\x1f".join(["11", r.path, r.label, r.technology]).encode()
        u = int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little") / 2.0 ** 64
        assert r.split == ("test" if u < 0.3 else "validation" if u < 0.5 else "train")


def test_split_of_a_record_ignores_other_rows():
    full = {r.path: r.split for r in A.assign_splits(_records(200), seed=3)}
    part = {r.path: r.split for r in A.assign_splits(_records(200)[50:120], seed=3)}
    assert all(full[p] == s for p, s in part.items())


def test_split_fractions_roughly_honoured():
    c = Counter(r.split for r in A.assign_splits(_records(5000), seed=1, validation=0.1, test=0.2))
    assert abs(c["validation"] / 5000 - 0.1) < 0.015
    assert abs(c["test"] / 5000 - 0.2) < 0.02


@settings(max_examples=25, deadline=None)
@given(rate=st.integers(8000, 48000).filter(lambda r: r != 16000))
def test_feature_boundary_rejects_non_canonical_rate(rate):
    with pytest.raises(SampleRateError):
        log_mel(AudioClip(np.zeros(rate), rate))
