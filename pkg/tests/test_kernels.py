import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from synthzsd import _kernels as K

from conftest import random_boxes
from oracles import iou_ref

PATHS = [pytest.param(True, id="numba"), pytest.param(False, id="numpy")]


@pytest.mark.parametrize("use_numba", PATHS)
class TestKernelPaths:
    def test_iou_matrix_reference(self, use_numba):
        rng = np.random.default_rng(0)
        a, b = random_boxes(rng, 15), random_boxes(rng, 9)
        M = K.iou_matrix(a, b, use_numba=use_numba)
        ref = np.array([[iou_ref(x, y) for y in b] for x in a])
        np.testing.assert_array_equal(M, ref)

    def test_iou_empty(self, use_numba):
        assert K.iou_matrix(np.zeros((0, 4)), np.ones((3, 4)), use_numba=use_numba).shape == (0, 3)

    def test_nms_example(self, use_numba):
        boxes = np.array([[0, 0, 10, 10], [1, 1, 11, 11], [20, 20, 30, 30]], float)
        np.testing.assert_array_equal(K.nms_sorted(boxes, 0.5, use_numba=use_numba), [True, False, True])

    def test_nms_empty(self, use_numba):
        assert K.nms_sorted(np.zeros((0, 4)), 0.5, use_numba=use_numba).shape == (0,)

    def test_match_single_match_rule(self, use_numba):
        gt = np.array([[0, 0, 10, 10]], float)
        tp, match = K.greedy_match(np.vstack([gt, gt]), gt, 0.5, use_numba=use_numba)
        np.testing.assert_array_equal(tp, [True, False])
        np.testing.assert_array_equal(match, [0, -1])

    def test_match_prefers_highest_iou(self, use_numba):
        gts = np.array([[0, 0, 10, 10], [1, 0, 11, 10]], float)
        tp, match = K.greedy_match(np.array([[1, 0, 11, 10]], float), gts, 0.5, use_numba=use_numba)
        assert tp[0] and match[0] == 1

    def test_match_no_gts(self, use_numba):
        tp, match = K.greedy_match(np.ones((2, 4)) * [0, 0, 1, 1], np.zeros((0, 4)), 0.5, use_numba=use_numba)
        assert not tp.any() and (match == -1).all()


class TestPathsAgree:
    @given(st.integers(0, 2**32), st.integers(0, 40), st.integers(0, 12), st.floats(0.05, 0.95))
    def test_bitwise_equal(self, seed, n, m, thr):
        rng = np.random.default_rng(seed)
        a, b = random_boxes(rng, n), random_boxes(rng, m)
        np.testing.assert_array_equal(K.iou_matrix(a, b, use_numba=True), K.iou_matrix(a, b, use_numba=False))
        np.testing.assert_array_equal(K.nms_sorted(a, thr, use_numba=True), K.nms_sorted(a, thr, use_numba=False))
        for x, y in zip(K.greedy_match(a, b, thr, use_numba=True), K.greedy_match(a, b, thr, use_numba=False)):
            np.testing.assert_array_equal(x, y)


@pytest.mark.parametrize("value, expected", [("0", False), ("off", False), ("1", True)])
def test_env_flag_selects_path(value, expected):
    env = dict(os.environ, SYNTHZSD_NUMBA=value)
    out = subprocess.run([sys.executable, "-c", "from synthzsd import _kernels as K; print(K.USE_NUMBA)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == str(expected and K.HAVE_NUMBA)
