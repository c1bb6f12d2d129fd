"""Backend agreement and semantics of the trajectory kernels."""

import math

import numpy as np
import pytest

from edetect._kernels import _fallback

try:
    from edetect._kernels import _core
    HAVE_COMPILED = True
except ImportError:
    _core = None
    HAVE_COMPILED = False

BACKENDS = [_fallback] + ([_core] if HAVE_COMPILED else [])


def _random_block(seed, steps=200, n=9):
    rng = np.random.default_rng(seed)
    return rng.normal(scale=0.7, size=(steps, n))


@pytest.mark.parametrize("impl", BACKENDS)
class TestSemantics:
    def test_sr_path_matches_scalar_recursion(self, impl):
        li = _random_block(1, steps=60, n=3)
        out = impl.sr_path_log(li)
        for j in range(3):
            state = -math.inf
            for i in range(60):
                state = li[i, j] + np.logaddexp(state, 0.0)
                assert out[i, j] == pytest.approx(state, rel=1e-12)

    def test_weighted_sr_uses_log_weights(self, impl):
        li = _random_block(2, steps=40, n=2)
        lw = np.log(1.0 / (np.arange(1, 41) * np.arange(2, 42)))
        out = impl.sr_path_log(li, lw)
        state = -math.inf
        for i in range(40):
            state = li[i, 0] + np.logaddexp(state, lw[i])
            assert out[i, 0] == pytest.approx(state, rel=1e-12)

    def test_cusum_path_matches_scalar_recursion(self, impl):
        li = _random_block(3, steps=50, n=2)
        out = impl.cusum_path_log(li)
        for j in range(2):
            state = -math.inf
            for i in range(50):
                state = li[i, j] + max(state, 0.0)
                assert out[i, j] == state

    def test_conformal_pvalues_match_direct_count(self, impl):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(30, 4))
        theta = rng.random(size=(30, 4))
        out = impl.conformal_pvalues(x, theta)
        for j in range(4):
            for i in range(30):
                mean = x[: i + 1, j].sum() / (i + 1)
                scores = x[: i + 1, j] - mean
                above = (scores > scores[i]).sum()
                ties = (scores == scores[i]).sum()
                expected = (above + theta[i, j] * ties) / (i + 1)
                assert out[i, j] == pytest.approx(expected, abs=1e-12)

    def test_conformal_pvalue_range(self, impl):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(100, 8))
        theta = rng.random(size=(100, 8))
        out = impl.conformal_pvalues(x, theta)
        assert np.all(out > 0) and np.all(out <= 1)

    def test_additive_sign_reflected_walk(self, impl):
        x = np.array([[1.0], [1.0], [-1.0], [-1.0], [-1.0], [1.0]])
        out = impl.additive_sign_sr_path(x, 1.0)
        # delays after each step (reflected at 0, new delay starts at 1):
        # t1 [2], t2 [3,2], t3 [2,1,0], t4 [1,0,0,0], t5 [0,...,0], t6 [1,..,1,2]
        assert out[:, 0].tolist() == [2.0, 5.0, 3.0, 1.0, 0.0, 7.0]
        out_max = impl.additive_sign_sr_path(x, 1.0, True)
        assert out_max[:, 0].tolist() == [2.0, 3.0, 2.0, 1.0, 0.0, 2.0]

    def test_zero_observation_leaves_sign_walks_unchanged(self, impl):
        x = np.zeros((5, 1))
        out = impl.additive_sign_sr_path(x, 1.0)
        assert out[:, 0].tolist() == [1.0, 2.0, 3.0, 4.0, 5.0]

    def test_rejects_non_2d(self, impl):
        with pytest.raises(ValueError):
            impl.sr_path_log(np.zeros(5))


@pytest.mark.skipif(not HAVE_COMPILED, reason="compiled kernels unavailable")
class TestBackendAgreement:
    def test_sr_and_cusum(self):
        li = _random_block(10, steps=300, n=11)
        np.testing.assert_allclose(
            _core.sr_path_log(li), _fallback.sr_path_log(li), rtol=1e-12)
        np.testing.assert_allclose(
            _core.cusum_path_log(li), _fallback.cusum_path_log(li), rtol=1e-12)

    def test_weighted_sr(self):
        li = _random_block(11, steps=120, n=5)
        lw = np.log(1.0 / (np.arange(1, 121) * np.arange(2, 122)))
        np.testing.assert_allclose(
            _core.sr_path_log(li, lw), _fallback.sr_path_log(li, lw), rtol=1e-12)

    def test_conformal(self):
        rng = np.random.default_rng(12)
        x = rng.normal(size=(150, 7))
        theta = rng.random(size=(150, 7))
        np.testing.assert_allclose(
            _core.conformal_pvalues(x, theta),
            _fallback.conformal_pvalues(x, theta), rtol=1e-12, atol=1e-15)

    def test_additive(self):
        rng = np.random.default_rng(13)
        x = rng.normal(size=(180, 6))
        for use_max in (False, True):
            np.testing.assert_allclose(
                _core.additive_sign_sr_path(x, 0.7, use_max),
                _fallback.additive_sign_sr_path(x, 0.7, use_max),
                rtol=1e-12, atol=1e-12)
