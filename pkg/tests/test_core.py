import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from blockdraft.core import (
    Dist,
    DistError,
    RngStream,
    SupportError,
    Vocab,
    check_token_seq,
    kl_divergence,
    sample_categorical,
    softmax,
    tv_distance,
)

from conftest import random_dist


def test_vocab_special_ids_are_distinct_and_outside_ordinary_range():
    v = Vocab(4)
    specials = [v.eos_id, v.mask_id, v.sep_id, v.pad_id]
    assert len(set(specials)) == 4
    assert min(specials) >= v.size
    assert v.n_outcomes == 5


def test_vocab_rejects_tiny_size():
    with pytest.raises(ValueError):
        Vocab(1)


def test_token_seq_eos_only_at_end():
    v = Vocab(3)
    assert check_token_seq([0, 2, v.eos_id], v) == (0, 2, 3)
    with pytest.raises(ValueError):
        check_token_seq([0, v.eos_id, 1], v)
    with pytest.raises(ValueError):
        check_token_seq([0, v.mask_id], v)
    assert check_token_seq([0, v.mask_id], v, allow_special=True) == (0, v.mask_id)


@pytest.mark.parametrize(
    "probs",
    [[0.5, 0.6], [-0.1, 1.1], [float("nan"), 1.0], [], [[0.5, 0.5]]],
)
def test_dist_rejects_invalid_vectors(probs):
    with pytest.raises(DistError):
        Dist(probs)


def test_dist_is_read_only():
    d = Dist([0.25, 0.75])
    with pytest.raises(ValueError):
        d.probs[0] = 1.0


def test_sample_one_hot_returns_its_token():
    d = Dist.one_hot(6, 3)
    for s in range(20):
        assert sample_categorical(d, RngStream(s, s)) == 3


def test_sample_uniform_frequencies():
    n = 10**6
    draws = sample_categorical(Dist.uniform(4), RngStream(5, 0), size=n)
    freq = np.bincount(draws, minlength=4) / n
    # two-sided 99.99% binomial band at p = 1/4
    z = 3.8906
    band = z * math.sqrt(0.25 * 0.75 / n)
    assert np.all(np.abs(freq - 0.25) < band)
    assert np.all(np.abs(freq - 0.25) < 0.005)


def test_same_stream_same_token():
    d = Dist([0.1, 0.2, 0.3, 0.4])
    a = [sample_categorical(d, RngStream(9, 4)) for _ in range(1)]
    b = [sample_categorical(d, RngStream(9, 4)) for _ in range(1)]
    assert a == b


def test_streams_are_reproducible_and_disjoint():
    a = RngStream(1, 0).uniform(100)
    assert np.array_equal(a, RngStream(1, 0).uniform(100))
    assert not np.array_equal(a, RngStream(1, 1).uniform(100))
    assert not np.array_equal(a, RngStream(2, 0).uniform(100))


def test_scalar_and_batched_draws_share_one_sequence():
    r1, r2 = RngStream(3, 7), RngStream(3, 7)
    scalars = [r1.uniform() for _ in range(5000)]
    batched = np.concatenate([r2.uniform(3), [r2.uniform()], r2.uniform(4996)])
    assert np.array_equal(np.array(scalars), batched)


def test_inverse_cdf_uses_ascending_index_order():
    class Fixed(RngStream):
        def __init__(self, u):
            super().__init__(0)
            self.u = u

        def uniform(self, size=None):
            return self.u

    d = Dist([0.25, 0.0, 0.5, 0.25])
    assert sample_categorical(d, Fixed(0.0)) == 0
    assert sample_categorical(d, Fixed(0.2499)) == 0
    assert sample_categorical(d, Fixed(0.25)) == 2
    assert sample_categorical(d, Fixed(0.7499)) == 2
    assert sample_categorical(d, Fixed(0.75)) == 3


def test_sampling_never_returns_zero_mass_tail():
    # cdf rounding slack must not land on the trailing zero-mass outcome
    d = Dist([0.1] * 10 + [0.0], validate=True)
    draws = sample_categorical(d, RngStream(0), size=200000)
    assert draws.max() <= 9


def test_sample_rejects_invalid_dist():
    with pytest.raises(DistError):
        sample_categorical([0.5, 0.6], RngStream(0))


@settings(max_examples=8, deadline=None)
@given(v=st.integers(2, 16), seed=st.integers(0, 2**32 - 1))
def test_sampling_converges_in_tv(v, seed):
    n = 10**6
    g = np.random.default_rng(seed)
    d = random_dist(g, v, zeros=bool(seed % 2))
    freq = np.bincount(sample_categorical(d, RngStream(seed, 1), size=n), minlength=v) / n
    delta = 1e-4
    assert tv_distance(freq, d) <= math.sqrt(v * math.log(2 / delta) / (2 * n))


def test_tv_examples():
    a = Dist([0.7, 0.3])
    assert tv_distance(a, a) == 0.0
    assert tv_distance(Dist([1.0, 0.0]), Dist([0.0, 1.0])) == 1.0
    assert tv_distance(Dist([0.7, 0.3]), Dist([0.4, 0.6])) == pytest.approx(0.3, abs=1e-15)


def test_tv_on_sequence_maps():
    a = {(0,): 0.5, (1,): 0.5}
    b = {(0,): 0.5, (2,): 0.5}
    assert tv_distance(a, b) == 0.5
    with pytest.raises(TypeError):
        tv_distance(a, [0.5, 0.5])


def test_tv_mismatched_support_sizes():
    with pytest.raises(ValueError):
        tv_distance(Dist([1.0]), Dist([0.5, 0.5]))


def test_kl_examples():
    p = Dist([0.2, 0.3, 0.5])
    assert kl_divergence(p, p) == 0.0
    assert kl_divergence(Dist([1.0, 0.0]), Dist([0.5, 0.5])) == pytest.approx(math.log(2), abs=1e-15)
    with pytest.raises(SupportError):
        kl_divergence(Dist([0.5, 0.5]), Dist([1.0, 0.0]))


@settings(max_examples=200, deadline=None)
@given(n=st.integers(2, 10), seed=st.integers(0, 2**32 - 1))
def test_kl_nonnegative_and_zero_only_on_equality(n, seed):
    g = np.random.default_rng(seed)
    p, q = random_dist(g, n, zeros=True), random_dist(g, n)
    kl = kl_divergence(p, q)
    assert kl >= 0.0
    if np.allclose(p.probs, q.probs, atol=1e-6):
        assert kl < 1e-9
    else:
        assert kl > 0.0
    assert kl_divergence(q, q) == 0.0


def test_softmax_closed_form():
    d = softmax([math.log(2), 0, 0, 0, 0])
    assert np.allclose(d.probs, [2 / 6] + [1 / 6] * 4, atol=1e-15)
    assert np.allclose(softmax(np.zeros(5)).probs, 0.2, atol=1e-15)


def test_softmax_temperature_zero_is_argmax():
    assert softmax([0.1, 2.0, 2.0, -1.0], temperature=0).probs.tolist() == [0.0, 1.0, 0.0, 0.0]
    with pytest.raises(ValueError):
        softmax([0.0, 1.0], temperature=-1)
    with pytest.raises(DistError):
        softmax([0.0, float("inf")])


@settings(max_examples=100, deadline=None)
@given(
    logits=st.lists(st.floats(-50, 50), min_size=2, max_size=12),
    temperature=st.floats(0.05, 5.0),
)
def test_softmax_is_a_valid_dist(logits, temperature):
    d = softmax(logits, temperature)
    assert d.probs.min() >= 0.0
    assert abs(d.probs.sum() - 1.0) <= 1e-9
