import math

import numpy as np
import numpy.testing as npt
import pytest

from itt.data import (
    batch_count,
    byte_tokenize,
    epoch_batches,
    markov_corpus,
    repeated_phrase_corpus,
)
from itt.optim import AdamWState, adamw_step, clip_gradients, lr_at
from itt.tensor import Tensor


class TestData:
    def test_byte_identity(self):
        assert byte_tokenize(b"AB").tolist() == [65, 66]

    def test_targets_are_shifted_inputs(self):
        ids = np.arange(64)
        inputs, targets = next(epoch_batches(ids, seq_len=10, batch_size=2, seed=None))
        npt.assert_array_equal(targets, inputs + 1)
        npt.assert_array_equal(inputs[0], np.arange(10))
        npt.assert_array_equal(inputs[1], np.arange(10, 20))

    def test_batch_count_formula(self):
        for n, seq, bs in [(1000, 10, 3), (129, 128, 1), (4097, 64, 8)]:
            ids = np.zeros(n, dtype=np.int64)
            got = sum(1 for _ in epoch_batches(ids, seq, bs, seed=None))
            assert got == batch_count(n, seq, bs) == (n - 1) // seq // bs

    def test_corpus_too_small(self):
        with pytest.raises(ValueError, match="too small"):
            list(epoch_batches(np.zeros(5, dtype=np.int64), seq_len=10, batch_size=1))

    def test_shuffle_deterministic_given_seed(self):
        ids = np.arange(512) % 256
        a = [b[0].tolist() for b in epoch_batches(ids, 16, 4, seed=7)]
        b = [b[0].tolist() for b in epoch_batches(ids, 16, 4, seed=7)]
        c = [b[0].tolist() for b in epoch_batches(ids, 16, 4, seed=8)]
        assert a == b
        assert a != c

    def test_synthetic_corpora(self):
        rep = repeated_phrase_corpus(2048, seed=0)
        assert len(rep) == 2048
        mk = markov_corpus(4096, seed=1)
        assert len(mk) == 4096
        assert max(mk) < 128  # ascii only


class TestAdamW:
    def test_zero_grad_no_decay_leaves_params(self, f64):
        p = {"w": Tensor(np.ones(3), requires_grad=True)}
        p["w"].grad = np.zeros(3)
        state = AdamWState.init(p)
        adamw_step(p, state, lr=0.1, weight_decay=0.0)
        npt.assert_array_equal(p["w"].data, 1.0)

    def test_first_step_closed_form(self, f64):
        p = {"w": Tensor(np.array([0.7]), requires_grad=True)}
        p["w"].grad = np.array([1.0])
        state = AdamWState.init(p)
        adamw_step(p, state, lr=1e-3, weight_decay=0.0, eps=1e-8)
        npt.assert_allclose(p["w"].data, 0.7 - 1e-3 * (1.0 / (1.0 + 1e-8)), rtol=1e-14)

    def test_two_steps_match_scalar_reference(self, f64, rng):
        g1, g2 = rng.normal(size=2)
        p = {"w": Tensor(np.array([0.5]), requires_grad=True)}
        state = AdamWState.init(p)
        lr, b1, b2, eps, wd = 3e-3, 0.9, 0.999, 1e-8, 0.01
        for g in (g1, g2):
            p["w"].grad = np.array([g])
            adamw_step(p, state, lr=lr, betas=(b1, b2), eps=eps, weight_decay=wd)

        # independent scalar implementation
        w, m, v = 0.5, 0.0, 0.0
        for t, g in enumerate((g1, g2), start=1):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            mh = m / (1 - b1**t)
            vh = v / (1 - b2**t)
            w = w * (1 - lr * wd) - lr * mh / (math.sqrt(vh) + eps)
        npt.assert_allclose(p["w"].data, [w], atol=1e-12)

    def test_decay_is_decoupled(self, f64):
        # lr = 0: decay factor (1 - lr*wd) == 1, parameters untouched
        p = {"w": Tensor(np.array([2.0]), requires_grad=True)}
        p["w"].grad = np.array([1.0])
        state = AdamWState.init(p)
        adamw_step(p, state, lr=0.0, weight_decay=0.5)
        npt.assert_array_equal(p["w"].data, [2.0])

        # wd = 0: update scale independent of parameter magnitude
        updates = []
        for w0 in (1.0, 100.0):
            p = {"w": Tensor(np.array([w0]), requires_grad=True)}
            p["w"].grad = np.array([0.3])
            state = AdamWState.init(p)
            adamw_step(p, state, lr=1e-3, weight_decay=0.0)
            updates.append(p["w"].data[0] - w0)
        npt.assert_allclose(updates[0], updates[1], atol=1e-15)

    def test_clip_scales_to_max_norm(self, f64):
        p = {
            "a": Tensor(np.zeros(2), requires_grad=True),
            "b": Tensor(np.zeros(2), requires_grad=True),
        }
        p["a"].grad = np.array([3.0, 0.0])
        p["b"].grad = np.array([0.0, 4.0])
        norm = clip_gradients(p, 1.0)
        assert norm == pytest.approx(5.0)
        total = math.sqrt(
            float((p["a"].grad ** 2).sum() + (p["b"].grad ** 2).sum())
        )
        assert total == pytest.approx(1.0)


class TestLrSchedule:
    def test_warmup_then_cosine(self):
        base, warm, total = 3e-4, 100, 1000
        assert lr_at(0, base, warm, total) == pytest.approx(base / 100)
        assert lr_at(99, base, warm, total) == pytest.approx(base)
        assert lr_at(total, base, warm, total) == pytest.approx(0.0, abs=1e-18)
        mid = lr_at(warm + (total - warm) // 2, base, warm, total)
        assert 0.4 * base < mid < 0.6 * base
