import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deepstack import numcore as nc
from deepstack.data import (
    BOS,
    EOS,
    IGNORE_INDEX,
    MASK,
    PAD,
    VOCAB_SIZE,
    copy_task_floor,
    corpus_windows,
    detokenize,
    eval_batches,
    make_copy_task,
    mask_for_mlm,
    stream_corpus,
    tokenize,
)
from deepstack.errors import ConfigError, DataError, UndefinedMeanError


def test_vocab_ids():
    assert (PAD, MASK, BOS, EOS, VOCAB_SIZE) == (256, 257, 258, 259, 260)


def test_tokenize_examples():
    assert tokenize(b"") == []
    assert tokenize(bytes([0x41, 0x42])) == [65, 66]
    blob = np.random.default_rng(0).integers(0, 256, 1024, dtype=np.uint8).tobytes()
    assert detokenize(tokenize(blob)) == blob


@settings(max_examples=100, deadline=None)
@given(st.binary(max_size=300))
def test_tokenize_round_trip(data):
    ids = tokenize(data)
    assert all(0 <= i < 256 for i in ids)
    assert detokenize(ids) == data


def test_copy_task_structure():
    b = make_copy_task(seed=3, B=5, S=12, V_effective=10)
    k = 12 // 2 - 1
    ids = b.input_ids
    assert (ids[:, 0] == BOS).all() and (ids[:, -1] == EOS).all()
    np.testing.assert_array_equal(ids[:, 1 : k + 1], ids[:, k + 1 : 2 * k + 1])
    assert ids[:, 1:-1].max() < 10
    np.testing.assert_array_equal(b.targets[:, :-1], ids[:, 1:])
    assert (b.targets[:, -1] == IGNORE_INDEX).all()


def test_copy_task_determinism_and_steps():
    a, b = make_copy_task(1, 4, 8, 16, step=2), make_copy_task(1, 4, 8, 16, step=2)
    assert a.input_ids.tobytes() == b.input_ids.tobytes()
    assert not np.array_equal(a.input_ids, make_copy_task(1, 4, 8, 16, step=3).input_ids)


def test_copy_task_odd_length():
    with pytest.raises(ConfigError):
        make_copy_task(0, 2, 7, 16)


def test_copy_task_floor_matches_cheating_oracle():
    S, V = 16, 16
    b = make_copy_task(0, 64, S, V)
    k = S // 2 - 1
    # predictor that reads the input: uniform over the payload alphabet while
    # the payload is unseen, a point mass on the known next token afterwards
    logits = np.full((64, S, VOCAB_SIZE), -1e9)
    logits[:, :k, :V] = 0.0
    for t in range(k, S - 1):
        logits[np.arange(64), t, b.targets[:, t]] = 0.0
    loss = float(nc.cross_entropy(nc.tensor(logits), b.targets))
    assert loss == pytest.approx(copy_task_floor(S, V), rel=1e-12)
    assert copy_task_floor(S, V) == pytest.approx(k * math.log(V) / (S - 1))
    assert 0.4 * math.log(V) < copy_task_floor(S, V) < 0.5 * math.log(V)


def test_mlm_statistics():
    ids = np.random.default_rng(0).integers(0, 256, size=(100, 1000))
    masked, targets = mask_for_mlm(ids, seed=7)
    sel = targets != IGNORE_INDEX
    assert abs(sel.mean() - 0.15) < 0.01
    assert abs((masked[sel] == MASK).mean() - 0.80) < 0.02
    changed = sel & (masked != MASK) & (masked != ids)
    assert abs(changed.sum() / sel.sum() - 0.1 * 255 / 256) < 0.02
    np.testing.assert_array_equal(targets[sel], ids[sel])
    np.testing.assert_array_equal(masked[~sel], ids[~sel])


def test_mlm_determinism_and_pad():
    ids = np.full((4, 50), PAD)
    ids[:, :25] = 65
    a = mask_for_mlm(ids, seed=1)
    b = mask_for_mlm(ids, seed=1)
    assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()
    assert (a[1][:, 25:] == IGNORE_INDEX).all()


def test_mlm_nothing_selected_is_undefined_mean():
    ids = np.arange(20)[None, :]
    masked, targets = mask_for_mlm(ids, seed=0, mask_rate=1e-12)
    assert (targets == IGNORE_INDEX).all()
    with pytest.raises(UndefinedMeanError):
        nc.cross_entropy(nc.tensor(np.zeros((20, VOCAB_SIZE))), targets[0])
    with pytest.raises(ConfigError):
        mask_for_mlm(ids, seed=0, mask_rate=0.0)


@pytest.fixture
def corpus(tmp_path):
    path = tmp_path / "corpus.bin"
    path.write_bytes(np.random.default_rng(0).integers(0, 256, 10240, dtype=np.uint8).tobytes())
    return path


def test_stream_batch_count(corpus):
    assert corpus_windows(corpus, 128).shape == (80, 128)
    batches = list(stream_corpus(corpus, 128, 4, seed=0))
    assert len(batches) == 20
    assert all(b.input_ids.shape == (4, 128) for b in batches)


def test_stream_is_seeded(corpus):
    a = [b.input_ids for b in stream_corpus(corpus, 64, 8, seed=5)]
    b = [b.input_ids for b in stream_corpus(corpus, 64, 8, seed=5)]
    c = [b.input_ids for b in stream_corpus(corpus, 64, 8, seed=6)]
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a, b))
    assert any(not np.array_equal(x, y) for x, y in zip(a, c))


def test_stream_causal_and_mlm_targets(corpus):
    raw = np.frombuffer(corpus.read_bytes(), dtype=np.uint8)
    b = next(stream_corpus(corpus, 32, 2, seed=0, shuffle=False))
    np.testing.assert_array_equal(b.input_ids[0], raw[:32])
    np.testing.assert_array_equal(b.targets[0, :-1], raw[1:32])
    m = next(stream_corpus(corpus, 32, 2, seed=0, task="mlm", shuffle=False))
    sel = m.targets != IGNORE_INDEX
    np.testing.assert_array_equal(m.targets[sel], raw[:64].reshape(2, 32)[sel])


def test_every_target_is_valid(corpus):
    for b in stream_corpus(corpus, 50, 3, seed=1, task="mlm"):
        t = b.targets
        assert ((t == IGNORE_INDEX) | ((t >= 0) & (t < VOCAB_SIZE))).all()


def test_stream_errors(tmp_path):
    empty = tmp_path / "empty"
    empty.write_bytes(b"")
    with pytest.raises(DataError):
        next(stream_corpus(empty, 8, 1, 0))
    short = tmp_path / "short"
    short.write_bytes(b"abc")
    with pytest.raises(DataError):
        next(stream_corpus(short, 8, 1, 0))


def test_eval_batches_cover_file_once(corpus):
    batches = list(eval_batches(corpus, 100, 7))
    assert sum(b.input_ids.shape[0] for b in batches) == 102
    assert batches[-1].input_ids.shape[0] == 102 % 7
