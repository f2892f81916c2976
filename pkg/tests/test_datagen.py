"""Contract tests for the synthetic data generator."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prunelab import datagen as dg


def same_triplet(a, b):
    return (np.array_equal(a.image_features, b.image_features)
            and a.prompt_tokens == b.prompt_tokens
            and a.response_tokens == b.response_tokens
            and a.task_tag == b.task_tag)


def test_generate_deterministic():
    spec = dg.DatasetSpec(seed=7, size=3)
    d1, d2 = dg.generate(spec), dg.generate(spec)
    assert all(same_triplet(a, b) for a, b in zip(d1, d2))


def test_mcq_count_example():
    """count=2 with canonical options 1..4 answers with letter B."""
    prompt, resp = dg._build_mcq((0, 0, 2), "count")
    assert resp[0] == dg.OPT_B
    assert prompt[:2] == [dg.BOS, dg.Q_COUNT]
    assert prompt[-1] == dg.ANS


def test_task_mix_all_yesno():
    spec = dg.DatasetSpec(seed=1, size=100, task_mix={"yesno": 1.0})
    data = dg.generate(spec)
    assert len(data) == 100
    assert all(t.task_tag == "yesno" for t in data)


def test_task_mix_must_sum_to_one():
    with pytest.raises(ValueError, match="task_mix"):
        dg.DatasetSpec(seed=0, size=4, task_mix={"mcq": 0.5, "yesno": 0.4})


def test_all_token_ids_in_vocab_and_responses_nonempty():
    data = dg.generate(dg.DatasetSpec(seed=3, size=200))
    for t in data:
        assert t.response_tokens
        assert all(0 <= tok < dg.VOCAB_SIZE
                   for tok in t.prompt_tokens + t.response_tokens)


def test_answerability_oracle_scores_100_percent():
    data = dg.generate(dg.DatasetSpec(seed=5, size=300))
    for t in data:
        assert dg.oracle_response(t) == t.response_tokens
    for suite in dg.make_benchmarks(seed=11, size=40):
        for t in suite.items:
            assert dg.oracle_response(t) == t.response_tokens
        for t in dg.text_view_suite(suite).items:
            assert dg.oracle_response(t) == t.response_tokens


def test_attribute_encoding_injective():
    rng = np.random.default_rng(0)
    seen = {}
    for shape in range(4):
        for color in range(4):
            for count in range(5):
                feats = dg.encode_image(shape, color, count, 4, 64, rng)
                got = dg.decode_attributes(feats, 4)
                assert got == (shape, color, count)
                seen[got] = True
    assert len(seen) == 80


def test_calibration_subset_nested_and_stratified():
    data = dg.generate(dg.DatasetSpec(seed=9, size=120))
    full = dg.calibration_subset(data, len(data), seed=4)
    tags = {t.task_tag for t in data}
    prev = None
    for n in (1, 2, 4, 8, 16):
        sub = dg.calibration_subset(data, n, seed=4)
        assert len(sub) == n
        if prev is not None:
            assert all(same_triplet(a, b) for a, b in zip(prev, sub))
        prev = sub
    # n == size is a permutation of the whole set
    assert len(full) == len(data)
    key = lambda t: (tuple(t.prompt_tokens), tuple(t.response_tokens),
                     t.image_features.tobytes())
    assert sorted(map(key, full)) == sorted(map(key, data))
    # stratification: first len(tags) picks cover every tag present
    head = dg.calibration_subset(data, len(tags), seed=4)
    assert {t.task_tag for t in head} == tags


def test_calibration_subset_bounds():
    data = dg.generate(dg.DatasetSpec(seed=2, size=10))
    with pytest.raises(ValueError):
        dg.calibration_subset(data, 0, seed=0)
    with pytest.raises(ValueError):
        dg.calibration_subset(data, 11, seed=0)
    one = dg.calibration_subset(data, 1, seed=0)
    again = dg.calibration_subset(data, 1, seed=0)
    assert same_triplet(one[0], again[0])


def test_fraction_subset_floor_and_nesting():
    data = dg.generate(dg.DatasetSpec(seed=13, size=695))
    assert len(dg.fraction_subset(data, 0.05, seed=1)) == 34
    assert len(dg.fraction_subset(data, 1.0, seed=1)) == 695
    f05 = dg.fraction_subset(data, 0.05, seed=1)
    f10 = dg.fraction_subset(data, 0.10, seed=1)
    f20 = dg.fraction_subset(data, 0.20, seed=1)
    assert all(same_triplet(a, b) for a, b in zip(f05, f10))
    assert all(same_triplet(a, b) for a, b in zip(f10, f20))
    with pytest.raises(ValueError):
        dg.fraction_subset(data, 0.0)
    with pytest.raises(ValueError):
        dg.fraction_subset(data, 1.2)


def test_text_only_view_idempotent_and_correct():
    data = dg.generate(dg.DatasetSpec(seed=21, size=50,
                                      task_mix={"mcq": 0.5, "yesno": 0.5}))
    for t in data:
        v1 = dg.text_only_view(t)
        v2 = dg.text_only_view(v1)
        assert same_triplet(v1, v2)
        assert v1.task_tag == "text_only"
        assert not v1.image_features.any()
        assert dg.CTX in v1.prompt_tokens
        # same correct answer, now derivable from the textual description
        assert dg.oracle_response(v1) == t.response_tokens


def test_jsonl_roundtrip_bit_exact(tmp_path):
    data = dg.generate(dg.DatasetSpec(seed=17, size=64))
    path = tmp_path / "data.jsonl"
    dg.dump_jsonl(path, data)
    back = dg.load_jsonl(path)
    assert len(back) == len(data)
    for a, b in zip(data, back):
        assert a.image_features.tobytes() == b.image_features.tobytes()
        assert same_triplet(a, b)


def test_benchmarks_shapes_and_formats():
    suites = dg.make_benchmarks(seed=23, size=32)
    assert [s.name for s in suites] == ["attr_mcq", "count_mcq", "yesno", "freeform"]
    assert [s.fmt for s in suites] == ["mcq", "mcq", "yesno", "freeform"]
    assert all(len(s.items) == 32 for s in suites)
    txt = dg.text_view_suite(suites[0])
    assert txt.name == "attr_mcq_txt" and txt.fmt == "mcq"
    assert all(t.task_tag == "text_only" for t in txt.items)


@given(seed=st.integers(0, 10_000), size=st.integers(1, 60),
       frac=st.floats(0.01, 1.0))
@settings(max_examples=30, deadline=None)
def test_fraction_subset_size_property(seed, size, frac):
    data = dg.generate(dg.DatasetSpec(seed=seed, size=size))
    sub = dg.fraction_subset(data, frac, seed=seed)
    assert len(sub) == int(np.floor(frac * size))


@given(seed=st.integers(0, 10_000))
@settings(max_examples=20, deadline=None)
def test_generate_responses_always_oracle_consistent(seed):
    data = dg.generate(dg.DatasetSpec(seed=seed, size=12))
    for t in data:
        assert dg.oracle_response(t) == t.response_tokens
