import numpy as np
import pytest
from hypothesis import given, strategies as st

from porf import autodiff as ad
from porf import diffgeom
from porf.epipolar import (PairMatches, check_bounds, epipolar_loss, read_matches, sample_pairs,
                           split_inliers, total_loss, write_matches)
from porf.errors import InvalidArgument, ParseError
from porf.geometry import Intrinsics, Pose6, fundamental_matrix, project, rodrigues, sampson_distance
from porf.harness import OUTLIER_MIN_PX, look_at, orbit_trajectory, synth_correspondences, two_sphere_scene

K = Intrinsics.from_fov(64, 64, 45.0)


def leaf_provider(poses, tape):
    """Pose provider exposing every frame's (r, t) as tape leaves."""
    r = tape.leaf(np.array([p.r for p in poses]))
    t = tape.leaf(np.array([p.t for p in poses]))

    def provide(frames):
        return diffgeom.TrackedPoses(ad.take(r, frames), ad.take(t, frames))

    return provide, r, t


def two_views(rng, n=60, noise=0.0):
    pa = Pose6.from_matrix(look_at([0.3, 0.2, 2.5]), [0.3, 0.2, 2.5])
    pb = Pose6.from_matrix(look_at([1.2, 0.1, 2.2]), [1.2, 0.1, 2.2])
    X = rng.uniform(-0.5, 0.5, size=(n, 3))
    u1, _ = project(pa, K, X)
    u2, _ = project(pb, K, X)
    m = np.concatenate([u1, u2], axis=1) + rng.normal(0, noise, (n, 4)) if noise else np.concatenate([u1, u2], axis=1)
    return [pa, pb], PairMatches(0, 1, m)


def test_pair_validation():
    with pytest.raises(InvalidArgument):
        PairMatches(2, 2)
    with pytest.raises(InvalidArgument):
        PairMatches(3, 1)
    with pytest.raises(InvalidArgument):
        PairMatches(0, 1, [[0, 0, np.nan, 1]])
    p = PairMatches(0, 1, [[1, 2, 3, 4]])
    assert list(p)[0].u2 == 3 and len(PairMatches(0, 1)) == 0


def test_sample_pairs_examples():
    one = [PairMatches(0, 1, np.ones((3, 4)))]
    assert all(p is one[0] for p in sample_pairs(one, 20, np.random.default_rng(0)))
    db = [PairMatches(0, k, np.ones((2, 4))) for k in range(1, 5)] + [PairMatches(5, 6)]
    a = sample_pairs(db, 50, np.random.default_rng(9))
    b = sample_pairs(db, 50, np.random.default_rng(9))
    assert [(p.i, p.j) for p in a] == [(p.i, p.j) for p in b]
    assert all(len(p) for p in a)
    with pytest.raises(InvalidArgument):
        sample_pairs([], 3, np.random.default_rng(0))
    with pytest.raises(InvalidArgument):
        sample_pairs([PairMatches(0, 1)], 3, np.random.default_rng(0))


def test_sample_pairs_uniform_monte_carlo():
    db = [PairMatches(0, k, np.ones((2, 4))) for k in range(1, 5)]
    picks = sample_pairs(db, 100_000, np.random.default_rng(3))
    freq = np.bincount([p.j - 1 for p in picks], minlength=4) / 100_000
    np.testing.assert_allclose(freq, 0.25, atol=0.01)


def test_split_perfect_and_threshold(rng):
    poses, pair = two_views(rng)
    F = fundamental_matrix(*poses, K)
    idx, p = split_inliers(pair, F, 20.0)
    assert p == 1.0 and len(idx) == len(pair)
    # a match at exactly 25 px from its line (Sampson 625) is an outlier
    Fs = np.array([[0, 0, 0], [0, 0, -1], [0, 1, 0]], dtype=float)  # pure x-translation, rectified
    Fs /= np.linalg.norm(Fs)
    bad = PairMatches(0, 1, [[10.0, 10.0, 40.0, 10.0 + 25.0 * np.sqrt(2)]])
    assert sampson_distance(bad.x, bad.x_prime, Fs)[0] == pytest.approx(625.0, rel=1e-12)
    assert split_inliers(bad, Fs, 20.0) == (pytest.approx([]), 0.0)
    assert split_inliers(PairMatches(0, 1), F, 20.0)[1] == 0.0
    with pytest.raises(InvalidArgument):
        split_inliers(pair, F, 0.0)


def test_split_with_injected_outliers():
    K256 = Intrinsics.from_fov(256, 256, 45.0)
    traj = orbit_trajectory(8, 2.0, 20.0, K256)
    db, labels = synth_correspondences(two_sphere_scene(), traj, 200, 0.0, 0.1, 7, return_labels=True)
    assert db
    for pair, lab in zip(db, labels):
        F = fundamental_matrix(traj[pair.i], traj[pair.j], K256)
        idx, p = split_inliers(pair, F, 20.0)
        assert abs(len(idx) - 0.9 * len(pair)) <= 1
        assert not lab[idx].any()
        d = np.sqrt(sampson_distance(pair.x[lab], pair.x_prime[lab], F))
        assert d.min() >= OUTLIER_MIN_PX


def test_loss_examples(rng):
    poses, pair = two_views(rng)
    tape = ad.Tape()
    prov, _, _ = leaf_provider(poses, tape)
    L, batch = epipolar_loss([pair], prov, K, 20.0, tape)
    assert L.value == pytest.approx(0.0, abs=1e-16)
    assert batch.rates[0] == 1.0 and batch.weights[0] == 1.0

    # every other match pushed far off its line, the rest slightly off
    F = fundamental_matrix(*poses, K)
    m = pair.matches.copy()
    m[:, 3] += np.where(np.arange(len(m)) % 2, 300.0, 1.5)
    noisy = PairMatches(0, 1, m)
    L, batch = epipolar_loss([noisy], prov, K, 20.0, tape)
    inl = np.arange(0, len(m), 2)
    assert np.array_equal(batch.inliers[0], inl)
    assert batch.rates[0] == 0.5 and batch.weights[0] == 0.25
    oracle = sampson_distance(m[inl, :2], m[inl, 2:], F)
    np.testing.assert_allclose(batch.errors[0], oracle, rtol=1e-9)
    assert L.value == pytest.approx(0.25 * oracle.mean(), rel=1e-9)

    # the worked example: p = 0.5 and mean inlier error 2.0 give 0.5
    assert L.value / oracle.mean() * 2.0 == pytest.approx(0.5, rel=1e-9)

    # two pairs average their weighted terms
    L2, _ = epipolar_loss([noisy, pair], prov, K, 20.0, tape)
    assert L2.value == pytest.approx(0.5 * L.value, rel=1e-9)


def test_weight_law_zero_to_half_outliers(rng):
    poses, pair = two_views(rng, n=40)
    F = fundamental_matrix(*poses, K)
    m = pair.matches.copy()
    lines = np.c_[m[:, :2], np.ones(len(m))] @ F.T
    m[::2, 2:] += 200.0 * (lines[:, :2] / np.linalg.norm(lines[:, :2], axis=1, keepdims=True))[::2]
    tape = ad.Tape()
    prov, _, _ = leaf_provider(poses, tape)
    _, clean = epipolar_loss([pair], prov, K, 20.0, tape)
    _, half = epipolar_loss([PairMatches(0, 1, m)], prov, K, 20.0, tape)
    assert clean.weights[0] == 1.0 and half.weights[0] == 0.25
    assert np.all(half.weights == half.rates**2)
    assert split_inliers(PairMatches(0, 1, m), F, 20.0)[1] == 0.5


def test_total_loss():
    assert total_loss(0.3, 0.5, 1.0) == pytest.approx(0.8)
    assert total_loss(0.3, 0.5, 0.0) == 0.3
    with pytest.raises(InvalidArgument):
        total_loss(0.3, 0.5, -1.0)


def test_rotation_sweep_minimum_at_truth(rng):
    poses, pair = two_views(rng, n=100)
    angles = np.linspace(-2.0, 2.0, 801)
    losses = []
    for a in angles:
        R = rodrigues(np.array([0.0, np.radians(a), 0.0])) @ poses[1].R
        moved = [poses[0], Pose6.from_matrix(R, poses[1].t)]
        tape = ad.Tape()
        prov, _, _ = leaf_provider(moved, tape)
        losses.append(epipolar_loss([pair], prov, K, 20.0, tape)[0].value)
    assert abs(angles[int(np.argmin(losses))]) <= 0.05


def test_loss_gradient_matches_finite_differences(rng):
    poses, pair = two_views(rng, n=30, noise=0.5)
    poses = [Pose6(p.r + rng.normal(0, 0.01, 3), p.t + rng.normal(0, 0.02, 3)) for p in poses]
    x0 = np.concatenate([np.concatenate([p.r, p.t]) for p in poses])
    tape = ad.Tape()
    prov, _, _ = leaf_provider(poses, tape)
    _, batch = epipolar_loss([pair], prov, K, 20.0, tape)
    inl = PairMatches(0, 1, pair.matches[batch.inliers[0]])  # freeze the split for the oracle

    def loss(x, with_grad=False):
        tape = ad.Tape()
        ps = [Pose6(x[0:3], x[3:6]), Pose6(x[6:9], x[9:12])]
        prov, r, t = leaf_provider(ps, tape)
        L, _ = epipolar_loss([inl], prov, K, 1e6, tape)
        if not with_grad:
            return L.value
        tape.backward(L)
        g = np.concatenate([np.concatenate([a, b]) for a, b in zip(tape.grad(r), tape.grad(t))])
        return g

    g = loss(x0, True)
    num = ad.finite_diff_gradient(loss, x0)
    assert np.max(np.abs(g - num)) / np.max(np.abs(num)) < 1e-4


def test_zero_baseline_pair_is_skipped(rng):
    p = Pose6.from_matrix(look_at([0, 0, 2.5]), [0, 0, 2.5])
    tape = ad.Tape()
    prov, _, _ = leaf_provider([p, p], tape)
    L, batch = epipolar_loss([PairMatches(0, 1, rng.uniform(0, 64, (10, 4)))], prov, K, 20.0, tape)
    assert batch.skipped == 1 and L.value == 0.0


@given(st.floats(0.1, 100.0))
def test_loss_invariant_to_match_scale_of_f(s):
    # Sampson invariance carries over: scaling F leaves every error unchanged
    rng = np.random.default_rng(5)
    poses, pair = two_views(rng, n=20, noise=1.0)
    F = fundamental_matrix(*poses, K)
    np.testing.assert_allclose(sampson_distance(pair.x, pair.x_prime, s * F),
                               sampson_distance(pair.x, pair.x_prime, F), rtol=1e-10)


def test_loss_nonnegative(rng):
    for _ in range(20):
        poses, pair = two_views(rng, n=15, noise=3.0)
        poses = [Pose6(p.r + rng.normal(0, 0.05, 3), p.t) for p in poses]
        tape = ad.Tape()
        prov, _, _ = leaf_provider(poses, tape)
        assert epipolar_loss([pair], prov, K, 20.0, tape)[0].value >= 0.0


def test_match_file_round_trip(tmp_path, rng):
    db = [PairMatches(0, 3, rng.normal(30, 20, (7, 4))), PairMatches(1, 2), PairMatches(4, 9, rng.uniform(0, 64, (1, 4)))]
    path = tmp_path / "m.txt"
    write_matches(path, db)
    back = read_matches(path)
    assert [(p.i, p.j) for p in back] == [(0, 3), (1, 2), (4, 9)]
    for a, b in zip(db, back):
        assert a.matches.tobytes() == b.matches.tobytes()


@pytest.mark.parametrize("text, line", [
    ("PAIR 0 1\n", 1),
    ("PAIR 1 0 1\n1 2 3 4\n", 1),
    ("PAIR 0 1 2\n1 2 3 4\n", 2),
    ("PAIR 0 1 1\n1 2 x 4\n", 2),
    ("# c\nPAIR 0 1 1\n1 2 3\n", 3),
    ("PAIR 0 1 1\nnan 2 3 4\n", 2),
])
def test_match_file_errors(tmp_path, text, line):
    path = tmp_path / "bad.txt"
    path.write_text(text)
    with pytest.raises(ParseError) as exc:
        read_matches(path)
    assert exc.value.line == line


def test_out_of_bounds_warns(caplog):
    db = [PairMatches(0, 1, [[-1.0, 3.0, 5.0, 5.0], [1.0, 1.0, 2.0, 2.0]])]
    assert check_bounds(db, K) == 1
    assert "outside" in caplog.text
