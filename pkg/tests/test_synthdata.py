import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctcd.ctc import min_frames
from ctcd.errors import ConfigError, FormatError, TruncatedError
from ctcd.synthdata import (
    Dataset,
    TaskSpec,
    Utterance,
    format_dataset,
    generate,
    make_dataset,
    parse_dataset,
    read_dataset,
    write_dataset,
)


def small_task(**kw):
    base = dict(alphabet_size=5, feature_dim=4, seed=3)
    base.update(kw)
    return TaskSpec(**base)


def test_noiseless_single_symbol_is_template_repeated():
    spec = small_task(sigma=0.0, d_min=3, d_max=3, min_symbols=1, max_symbols=1, silence_prob=0.0)
    (utt,) = generate(spec, 1)
    (lab,) = utt.labels
    np.testing.assert_array_equal(utt.features, np.tile(spec.templates[lab], (3, 1)))


def test_same_seed_bit_identical():
    a = generate(small_task(), 20)
    b = generate(small_task(), 20)
    assert a == b
    assert generate(small_task(seed=4), 20) != a


def test_streams_are_independent_splits():
    spec = small_task()
    assert generate(spec, 5, stream=0) != generate(spec, 5, stream=1)


def test_long_sample_mean_within_three_sigma():
    sigma = 0.1
    spec = small_task(sigma=sigma, d_min=400, d_max=400, min_symbols=1, max_symbols=1, silence_prob=0.0)
    (utt,) = generate(spec, 1)
    t_len = utt.num_frames
    err = np.abs(utt.features.mean(axis=0) - spec.templates[utt.labels[0]])
    assert np.all(err < 3 * sigma / math.sqrt(t_len))


def test_class_balance():
    spec = small_task(alphabet_size=6, min_symbols=5, max_symbols=10)
    counts = Counter(lab for u in generate(spec, 300) for lab in u.labels)
    total = sum(counts.values())
    assert total >= 1000
    for lab in range(6):
        assert abs(counts[lab] / total - 1 / 6) <= 0.2 / 6


@settings(max_examples=40, deadline=None)
@given(
    seed=st.integers(0, 2**32 - 1),
    alphabet=st.integers(1, 4),
    d_min=st.integers(1, 3),
    extra=st.integers(0, 2),
    silence=st.sampled_from([0.0, 0.3, 1.0]),
)
def test_every_utterance_expressible(seed, alphabet, d_min, extra, silence):
    spec = TaskSpec(alphabet, 2, d_min=d_min, d_max=d_min + extra, silence_prob=silence, seed=seed)
    for u in generate(spec, 10):
        assert u.num_frames >= min_frames(u.labels)
        assert spec.min_symbols <= len(u.labels) <= spec.max_symbols


def test_repeats_get_silence_between():
    spec = small_task(alphabet_size=1, sigma=0.0, silence_prob=0.0, d_min=1, d_max=1, min_symbols=3, max_symbols=3)
    (utt,) = generate(spec, 1)
    assert utt.labels == (0, 0, 0)
    assert utt.num_frames == 5
    np.testing.assert_array_equal(utt.features[1::2], 0.0)


@pytest.mark.parametrize(
    "kwargs",
    [dict(d_min=0), dict(d_min=3, d_max=2), dict(sigma=-1.0), dict(min_symbols=0), dict(silence_prob=1.5)],
)
def test_invalid_task_rejected(kwargs):
    with pytest.raises(ConfigError):
        small_task(**kwargs)


def test_duplicate_templates_rejected():
    with pytest.raises(ConfigError):
        TaskSpec(2, 2, templates=np.ones((2, 2)))
    with pytest.raises(ConfigError):
        TaskSpec(2, 2, templates=np.array([[1.0, 0.0], [0.0, 0.0]]))


# -- file format ------------------------------------------------------------------------


def test_round_trip(tmp_path):
    ds = make_dataset(small_task(sigma=0.37), 10)
    write_dataset(ds, tmp_path / "d.txt")
    back = read_dataset(tmp_path / "d.txt")
    assert (back.alphabet_size, back.feature_dim) == (5, 4)
    assert back.utterances == ds.utterances


def test_round_trip_awkward_floats():
    feats = np.array([[0.1, -0.0, 1e-310], [1 / 3, 2.0**60, -7.25e-12]])
    ds = Dataset(2, 3, [Utterance("odd", (0, 1), feats)])
    back = parse_dataset(format_dataset(ds))
    assert back.utterances[0].features.tobytes() == feats.tobytes()


def test_empty_dataset_is_header_only(tmp_path):
    write_dataset(Dataset(5, 4), tmp_path / "e.txt")
    assert (tmp_path / "e.txt").read_text() == "CTCD1 5 4\n"
    assert len(read_dataset(tmp_path / "e.txt")) == 0


def test_header_line_format():
    text = format_dataset(make_dataset(small_task(), 2))
    lines = text.split("\n")
    assert lines[0] == "CTCD1 5 4"
    assert lines[1] == "utt00000"


def test_truncated_file_names_record(tmp_path):
    ds = make_dataset(small_task(), 3)
    text = format_dataset(ds)
    cut = text[: text.index("utt00002") + 30]
    cut = cut[: cut.rindex("\n") + 1]
    with pytest.raises(TruncatedError, match="utt00002"):
        parse_dataset(cut)


def test_bad_header():
    with pytest.raises(FormatError, match="line 1"):
        parse_dataset("CTCD2 5 4\n")


def test_malformed_record_reports_line():
    text = "CTCD1 3 2\nu1\n2\n0 1\n2\n0.5 1.0\n0.5 oops\n\n"
    with pytest.raises(FormatError, match=r"line 7 \(record 'u1'\)"):
        parse_dataset(text)


def test_label_count_mismatch():
    with pytest.raises(FormatError, match="expected 2 labels"):
        parse_dataset("CTCD1 3 1\nu1\n2\n0\n1\n0.5\n\n")
