import inspect
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hintnart import autodiff as ad
from hintnart.autodiff import Tensor
from hintnart.nn import ModelConfig
from hintnart.student import Student, predict_tokens, soft_copy_logits, soft_copy_weights
from hintnart.teacher import DecoderTrace

CFG = ModelConfig(enc_layers=2, dec_layers=2, heads=2, d_model=16, d_ff=32, src_vocab=20,
                  tgt_vocab=20, max_len=16)


@pytest.fixture(scope="module")
def student():
    return Student(CFG, tau=0.3, seed=5)


def test_soft_copy_single_entry():
    np.testing.assert_array_equal(soft_copy_weights(1, 1, 0.3), [[1.0]])


def test_soft_copy_two_by_two():
    e = math.exp(-1 / 0.3)
    expected = [1 / (1 + e), e / (1 + e)]
    col = soft_copy_weights(2, 2, 0.3)[:, 0]
    np.testing.assert_allclose(col, expected, atol=1e-12)
    np.testing.assert_allclose(col, [0.9656, 0.0344], atol=1e-4)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 32), st.integers(1, 32), st.floats(0.05, 5.0))
def test_soft_copy_columns_are_distributions(t_x, t_y, tau):
    w = soft_copy_weights(t_x, t_y, tau)
    assert w.shape == (t_x, t_y)
    assert np.all(w >= 0)
    np.testing.assert_allclose(w.sum(axis=0), 1.0, atol=1e-9)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 24), st.integers(1, 24), st.floats(0.05, 5.0))
def test_soft_copy_kernel_peaks_at_aligned_position(t_x, t_y, tau):
    logits = soft_copy_logits(t_x, t_y, tau)
    for i in range(1, t_x + 1):
        centre = t_y / t_x * i
        j_best = int(np.argmax(logits[i - 1])) + 1
        dist = np.abs(np.arange(1, t_y + 1) - centre)
        assert abs(j_best - centre) == pytest.approx(dist.min())


def test_soft_copy_strictly_positive_in_range():
    assert np.all(soft_copy_weights(12, 14, 0.3) > 0)


def test_decoder_input_examples(student):
    table = student.params["enc.embed"].data
    saved = table.copy()
    try:
        z = student.build_decoder_input([7], [4]).data[0]
        np.testing.assert_allclose(z, np.repeat(table[[7]], 4, axis=0), atol=1e-12)
        z = Student(CFG, tau=1e-3, params=student.params).build_decoder_input([4, 5, 6], [3]).data[0]
        np.testing.assert_allclose(z, table[[4, 5, 6]], atol=1e-12)
        table[4] = 0.0
        table[5] = 0.0
        table[4, 0] = 1.0
        table[5, 1] = 1.0
        z = student.build_decoder_input([4, 5], [2]).data[0]
        np.testing.assert_allclose(z[0, :2], [0.9656, 0.0344], atol=1e-4)
    finally:
        table[...] = saved


def test_parallel_forward_purity_shapes_counter(student):
    student.decoder_steps = 0
    a = student.parallel_decode_forward([[4, 5, 6, 7]], [3])
    assert student.decoder_steps == 1
    b = student.parallel_decode_forward([[4, 5, 6, 7]], [3])
    assert np.array_equal(a.logits.data, b.logits.data)
    view = a.sentence(0)
    assert view["hidden"].shape == (2, 3, 16)
    assert view["attn"].shape == (2, 2, 3, 4)
    np.testing.assert_allclose(view["attn"].sum(-1), 1.0, atol=1e-6)


def test_no_target_access_path():
    params = inspect.signature(Student.parallel_decode_forward).parameters
    assert list(params) == ["self", "src", "lengths", "ctx"]


def test_batched_forward_matches_single(student):
    srcs = [[4, 5, 6], [7, 8, 9, 10, 11]]
    lengths = [5, 2]
    from hintnart.teacher import pad_batch
    with ad.no_grad():
        tr = student.parallel_decode_forward(pad_batch(srcs), lengths)
        for b, (s, n) in enumerate(zip(srcs, lengths)):
            single = student.parallel_decode_forward([s], [n]).logits.data[0]
            np.testing.assert_allclose(tr.logits.data[b, :n], single, atol=1e-9)


def _trace(logits):
    logits = np.asarray(logits, dtype=float)[None]
    mask = np.ones(logits.shape[:2], dtype=bool)
    return DecoderTrace([], [], Tensor(logits), mask, mask[:, :1])


def test_predict_tokens_examples():
    onehot = np.eye(10)[[5, 5, 7]]
    assert predict_tokens(_trace(onehot)) == [[5, 5, 7]]
    assert predict_tokens(_trace(onehot + np.array([[3.0], [-2.0], [10.0]]))) == [[5, 5, 7]]
    tie = np.zeros((2, 6))
    tie[0, [2, 4]] = 1.0
    tie[1, [5, 1]] = 2.0
    assert predict_tokens(_trace(tie)) == [[2, 1]]


def test_bad_lengths(student):
    with pytest.raises(ValueError):
        student.parallel_decode_forward([[4, 5]], [0])
    with pytest.raises(ValueError):
        student.parallel_decode_forward([[4, 5]], [17])
