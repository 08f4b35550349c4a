import numpy as np
import pytest

from synthzsd import gradcheck
from synthzsd.gradcheck import CHECKS, TOLERANCE, CheckResult, run_gradient_suite


class TestGradientSuite:
    def test_small_run_passes(self):
        results = run_gradient_suite(points=5, seed=3)
        assert [r.name for r in results] == list(CHECKS)
        for r in results:
            assert r.points == 5 and r.ok, (r.name, r.worst)

    def test_deterministic(self):
        a = run_gradient_suite(points=2, seed=1, names=["lcs_loss", "diversity_loss"])
        b = run_gradient_suite(points=2, seed=1, names=["lcs_loss", "diversity_loss"])
        assert [r.worst for r in a] == [r.worst for r in b]

    def test_detects_wrong_gradient(self, monkeypatch):
        real = gradcheck.generator_backward

        def off_by_scale(g, cache, dF):
            return {k: 1.01 * v for k, v in real(g, cache, dF).items()}

        monkeypatch.setattr(gradcheck, "generator_backward", off_by_scale)
        (r,) = run_gradient_suite(points=2, names=["generator_forward"])
        assert not r.ok and r.worst > TOLERANCE

    def test_gives_up_when_every_point_is_a_kink(self):
        with pytest.raises(RuntimeError, match="kink-free"):
            run_gradient_suite(points=1, names=["critic_forward"], margin=np.inf, max_tries=3)

    def test_result_threshold(self):
        assert CheckResult("x", 1, 0.99e-4).ok
        assert not CheckResult("x", 1, 1e-4).ok
