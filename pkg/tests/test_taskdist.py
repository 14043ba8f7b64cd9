import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import chi2_contingency, chisquare

from flexdiff.rng import stream
from flexdiff.taskdist import (TaskSample, draw_group, render_svg, sample_task_single, sample_task_structured,
                               sample_task_uniform, size_histogram, task_sampler)


def straight_line_structured(N, K, rng):
    """Independent transcription of the group-drawing loop (reference oracle)."""
    X, Y = [], []
    while True:
        n = rng.integers(1, K + 1)
        top = (N - 1) / n
        s = math.exp(rng.uniform(0, math.log(top))) if top > 1 else top
        x = rng.uniform(0, N - (n - 1) * s)
        obs = rng.random() < 0.5
        G = []
        for i in range(n):
            j = math.floor(x + s * i)
            if j not in X and j not in Y and j not in G:
                G.append(j)
        if len(X) + len(Y) + len(G) > K:
            return len(X), len(Y)
        if len(X) == 0 or not obs:
            X += G
        else:
            Y += G


def test_structured_k1_single_latent():
    rng = stream(0)
    for _ in range(200):
        s = sample_task_structured(30, 1, rng)
        assert len(s.X) == 1 and len(s.Y) == 0


def test_structured_no_violations_many_draws():
    rng = stream(1)
    for _ in range(20000):
        assert not sample_task_structured(30, 10, rng).violations(10)


def test_structured_marginals_match_reference():
    n = 20000
    rng_a, rng_b = stream(2), np.random.default_rng(3)
    ours = size_histogram([sample_task_structured(30, 10, rng_a) for _ in range(n)], 10).ravel()
    ref = np.zeros(11 * 11, dtype=np.int64)
    for _ in range(n):
        nx, ny = straight_line_structured(30, 10, rng_b)
        ref[nx * 11 + ny] += 1
    keep = (ours + ref) >= 10
    table = np.stack([ours[keep], ref[keep]])
    if (~keep).any() and ours[~keep].sum() + ref[~keep].sum():
        table = np.concatenate([table, np.stack([ours[~keep].sum(), ref[~keep].sum()])[:, None]], axis=1)
    assert chi2_contingency(table)[1] > 0.01


def test_structured_terminates_when_video_shorter_than_k():
    rng = stream(4)
    for _ in range(500):
        s = sample_task_structured(5, 10, rng)
        assert not s.violations(10)
        assert len(s.X) + len(s.Y) <= 5


def test_uniform_properties():
    rng = stream(5)
    draws = [sample_task_uniform(30, 10, rng) for _ in range(20000)]
    assert all(not d.violations(10) for d in draws)
    totals = np.bincount([len(d.X) + len(d.Y) for d in draws], minlength=11)[1:]
    assert chisquare(totals)[1] > 0.01


def test_uniform_k1():
    rng = stream(6)
    for _ in range(100):
        s = sample_task_uniform(30, 1, rng)
        assert len(s.X) == 1 and len(s.Y) == 0


def test_uniform_literal_restricts_to_first_k():
    rng = stream(7)
    for _ in range(500):
        s = sample_task_uniform(30, 10, rng, literal=True)
        assert max(np.concatenate([s.X, s.Y])) < 10


def test_uniform_requires_n_at_least_k():
    with pytest.raises(ValueError):
        sample_task_uniform(5, 10, stream(0))


def test_single_task_shape():
    rng = stream(8)
    for _ in range(2000):
        s = sample_task_single(100, rng)
        assert len(s.X) == len(s.Y) == 10
        assert np.array_equal(np.diff(np.concatenate([s.Y, s.X])), np.ones(19))
        assert not s.violations(20)


def test_single_task_too_short():
    with pytest.raises(ValueError):
        sample_task_single(19, stream(0))


def test_task_sampler_unknown():
    with pytest.raises(ValueError):
        task_sampler("nope", 30, 10)


def test_violation_detection():
    s = TaskSample(np.array([1, 2]), np.array([2, 40]), 30)
    assert set(s.violations(3)) == {"exceeds K", "repeated index", "index out of range"}
    assert TaskSample(np.array([], int), np.array([1]), 30).violations(3) == ["empty X"]


def test_determinism():
    a = [sample_task_structured(30, 10, stream(9)).X.tolist() for _ in range(3)]
    assert a[0] == a[1] == a[2]


def test_render_svg_counts():
    rng = stream(10)
    samples = [sample_task_structured(30, 10, rng) for _ in range(5)]
    svg = render_svg(samples, 30)
    n_cells = sum(len(s.X) + len(s.Y) for s in samples)
    assert svg.count("<rect") == 1 + n_cells


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 200), st.integers(1, 25), st.integers(0, 2**32 - 1))
def test_property_all_distributions_valid(N, K, seed):
    rng = stream(seed)
    for _ in range(20):
        assert not sample_task_structured(N, K, rng).violations(K)
        if N >= K:
            assert not sample_task_uniform(N, K, rng).violations(K)
    if N >= K and K >= 2:
        assert not sample_task_single(N, rng, k=K).violations(K)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 300), st.integers(1, 25), st.integers(0, 2**32 - 1))
def test_property_group_spacing_in_support(N, K, seed):
    rng = stream(seed)
    for _ in range(10):
        n, s, idx, _ = draw_group(N, K, rng)
        top = (N - 1) / n
        if top > 1:
            assert 1 - 1e-12 <= s <= top + 1e-9
        else:
            assert s == top
        assert all(0 <= i < N for i in idx)
        if len(idx) > 1:
            gaps = np.diff(sorted(idx))
            assert gaps.max() - gaps.min() <= 1  # floors of a regular grid
