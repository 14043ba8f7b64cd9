import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import linear_sum_assignment
from scipy.stats import wasserstein_distance

from flexdiff import evalbench as eb


@pytest.fixture(scope="module")
def town():
    return eb.gen_town_drive(40, 100, rng=0)


def test_town_drive_shape_and_speed_limit(town):
    assert town.videos.shape == (40, 100, 2)
    step = np.linalg.norm(np.diff(town.videos.astype(np.float64), axis=1), axis=-1)
    assert step.max() <= 3.0 / eb.FPS + 1e-5


def test_town_drive_on_road_and_no_outliers(town):
    assert eb.on_road(town.videos, block=town.metadata["block"], tol=1e-3).all()
    assert eb.outlier_pct(eb.speed_stats(town.videos), 10) == 0.0


def test_town_drive_pauses_exist(town):
    assert (eb.speed_stats(town.videos) == 0).any()


def test_town_drive_needs_n20():
    with pytest.raises(ValueError):
        eb.gen_town_drive(1, 19, rng=0)


def test_colored_rooms_layout():
    d = eb.gen_colored_rooms(20, 120, n_rooms=4, palette_size=4, rng=0)
    assert d.frame_dim == 6
    assert np.all(d.videos[:, :, :4].sum(-1) == 1)
    assert all(eb.color_accuracy(v, 4, 24) == 1.0 for v in d.videos)


def test_colored_rooms_palettes_vary():
    """Two videos share a full palette with probability 4^-4 per pair; allow at most that rate plus slack."""
    d = eb.gen_colored_rooms(200, 30, n_rooms=4, palette_size=4, rng=1)
    pal = []
    for v in d.videos:
        rooms = np.argmax(v[:, :4], axis=1)
        pal.append(tuple(sorted({int(r): float(c) for r, c in zip(rooms, v[:, 4])}.items())))
    same = sum(pal[i] == pal[i + 1] for i in range(len(pal) - 1))
    assert same <= 10


def test_colored_rooms_palette_size():
    with pytest.raises(ValueError):
        eb.gen_colored_rooms(1, 10, palette_size=1)


def test_speed_examples():
    still = np.zeros((30, 2))
    np.testing.assert_array_equal(eb.estimate_speeds(still), 0.0)
    line = np.stack([np.arange(30) * 0.3, np.zeros(30)], axis=1)
    np.testing.assert_allclose(eb.estimate_speeds(line), 3.0)
    with pytest.raises(ValueError):
        eb.estimate_speeds(np.zeros((10, 2)), lag=10)


def test_teleport_affects_exactly_lag_windows():
    v = np.zeros((50, 2))
    v[25:, 0] = 20.0
    sp = eb.estimate_speeds(v, lag=10)
    # windows [i, i+10] straddle the jump for i in 15..24
    assert np.count_nonzero(sp >= 10) == 10
    assert np.flatnonzero(sp >= 10).tolist() == list(range(15, 25))


def test_outlier_pct():
    assert eb.outlier_pct([1, 2, 11], 10) == pytest.approx(100 / 3)
    assert eb.outlier_pct([1, 2], 10) == 0.0
    assert eb.outlier_pct([11, 12], 10) == 100.0
    with pytest.raises(ValueError):
        eb.outlier_pct([])


def test_wasserstein_examples():
    assert eb.wasserstein1d([0, 1], [2, 3]) == 2.0
    assert eb.wasserstein1d([1, 5, 2], [1, 5, 2]) == 0.0
    assert eb.wasserstein1d([3.0], [0, 1, 2]) == pytest.approx(2.0)
    assert eb.wasserstein1d([3.0 + 4], [0, 1, 2]) == pytest.approx(6.0)
    with pytest.raises(ValueError):
        eb.wasserstein1d([], [1])


def test_wasserstein_matches_assignment_oracle():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(1, 30))
        a, b = rng.standard_normal(n), rng.standard_normal(n) * 2 + 1
        cost = np.abs(a[:, None] - b[None, :])
        r, c = linear_sum_assignment(cost)
        assert abs(eb.wasserstein1d(a, b) - cost[r, c].mean()) <= 1e-9


def test_wasserstein_unequal_sizes_match_scipy():
    rng = np.random.default_rng(1)
    for _ in range(50):
        a, b = rng.random(int(rng.integers(1, 20))), rng.random(int(rng.integers(1, 20)))
        assert eb.wasserstein1d(a, b) == pytest.approx(wasserstein_distance(a, b), abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=1, max_size=15),
       st.lists(st.floats(-100, 100), min_size=1, max_size=15),
       st.lists(st.floats(-100, 100), min_size=1, max_size=15))
def test_property_wasserstein_metric(a, b, c):
    ab, ba = eb.wasserstein1d(a, b), eb.wasserstein1d(b, a)
    assert ab >= 0
    assert ab == pytest.approx(ba, abs=1e-9)
    assert eb.wasserstein1d(a, a) == 0
    assert ab <= eb.wasserstein1d(a, c) + eb.wasserstein1d(c, b) + 1e-9


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0, 50), min_size=1, max_size=30))
def test_property_filter_above_max_is_identity(d):
    d = np.array(d)
    kept = d[d <= d.max() + 1.0]
    assert eb.wasserstein1d(kept, d) == eb.wasserstein1d(d, d) == 0


def test_color_accuracy_flipped_second_visit():
    n_rooms, N = 3, 40
    v = np.zeros((N, n_rooms + 2))
    visits = [(0, 0, 10), (1, 10, 20), (0, 20, 30), (2, 30, 40)]
    colors = {0: 1.0, 1: 2.0, 2: 3.0}
    for room, a, b in visits:
        v[a:b, room] = 1
        v[a:b, n_rooms] = colors[room]
    assert eb.color_accuracy(v, n_rooms, n_obs=5) == 1.0
    bad = v.copy()
    bad[20:30, n_rooms] = 0.0
    assert eb.color_accuracy(bad, n_rooms, n_obs=5) == pytest.approx((N - 10) / N)


def test_color_accuracy_prefix_only_and_undecodable():
    v = eb.gen_colored_rooms(1, 30, rng=3).videos[0]
    assert eb.color_accuracy(v[:10], 4, n_obs=10) == 1.0
    with pytest.raises(ValueError):
        eb.color_accuracy(np.full((5, 6), np.nan), 4)


def test_frechet_examples():
    rng = np.random.default_rng(0)
    A = rng.standard_normal((50, 3))
    assert eb.frechet_gaussian(A, A) == pytest.approx(0.0, abs=1e-9)
    assert eb.frechet_from_stats(np.zeros(1), np.eye(1), np.ones(1), np.eye(1)) == pytest.approx(1.0, abs=1e-12)
    B = rng.standard_normal((40, 3)) + 0.5
    assert eb.frechet_gaussian(A, B) == pytest.approx(eb.frechet_gaussian(B, A), abs=1e-9)
    with pytest.raises(ValueError):
        eb.frechet_gaussian(A[:1], B)


def test_frechet_matches_scipy_sqrtm():
    from scipy.linalg import sqrtm

    rng = np.random.default_rng(2)
    A, B = rng.standard_normal((60, 4)), rng.standard_normal((70, 4)) @ rng.standard_normal((4, 4))
    m1, m2 = A.mean(0), B.mean(0)
    s1, s2 = np.cov(A, rowvar=False) + 1e-6 * np.eye(4), np.cov(B, rowvar=False) + 1e-6 * np.eye(4)
    oracle = np.sum((m1 - m2) ** 2) + np.trace(s1 + s2 - 2 * np.real(sqrtm(s1 @ s2)))
    assert eb.frechet_gaussian(A, B) == pytest.approx(oracle, rel=1e-7)


def test_speed_metrics_ground_truth_vs_itself(town):
    m = eb.speed_metrics(town.videos, town.videos)
    assert m == {"op": 0.0, "wd": 0.0}


def test_dataset_roundtrip(tmp_path, town):
    path = tmp_path / "t.fdmv"
    eb.save_dataset(path, town)
    back = eb.load_dataset(path)
    assert back.videos.tobytes() == town.videos.tobytes()
    assert back.metadata == town.metadata
    raw = path.read_bytes()
    assert raw[:4] == b"FDMV" and np.frombuffer(raw[4:20], "<u4").tolist() == [1, 40, 100, 2]


def test_dataset_rejects_bad_input(tmp_path):
    with pytest.raises(ValueError):
        eb.Dataset(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        eb.Dataset(np.full((1, 2, 2), np.inf))
    (tmp_path / "x").write_bytes(b"XXXX")
    with pytest.raises(ValueError):
        eb.load_dataset(tmp_path / "x")


def test_histogram_and_svg(town):
    sp = eb.speed_stats(town.videos)
    counts, edges = eb.speed_histogram(sp)
    assert len(counts) == 50 and edges[0] == 0 and edges[-1] == 10 and counts.sum() == len(sp)
    svg = eb.render_histogram_svg({"a": sp, "b": sp + 1})
    assert svg.count("<polyline") == 2
