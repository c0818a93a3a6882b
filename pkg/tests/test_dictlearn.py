"""Dictionary learning: assignment oracles, epoch updates, redundancy."""

import numpy as np
import pytest

from convclust import dictlearn as dl
from convclust.errors import InsufficientPatchesError, ShapeMismatchError
from convclust.synthetic import shifted_pattern_images


def make_dictionary(filters):
    filters = np.asarray(filters, dtype=np.float32)
    flat = filters.reshape(len(filters), -1)
    flat = flat / np.linalg.norm(flat, axis=1, keepdims=True)
    return dl.Dictionary(filters=flat.reshape(filters.shape))


def brute_assign_patch(dic, patch):
    flat = np.asarray(patch, np.float64).ravel()
    best = (0, 0.0, -1.0)
    for l in range(dic.k):
        score = float(dic.filters[l].astype(np.float64).ravel() @ flat)
        if abs(score) > best[2]:
            best = (l, score, abs(score))
    return best[0], best[1]

def brute_assign_window(dic, window):
    win = np.asarray(window, np.float64)
    s = dic.s
    best = (0, 0, 0, 0.0, -1.0)
    for l in range(dic.k):
        f = dic.filters[l].astype(np.float64).ravel()
        for x in range(win.shape[1] - s + 1):
            for y in range(win.shape[2] - s + 1):
                score = float(f @ win[:, x:x + s, y:y + s].ravel())
                if abs(score) > best[4]:
                    best = (l, x, y, score, abs(score))
    return best[:4]


class TestInitDictionary:
    def test_single_patch(self):
        p = np.arange(1, 10, dtype=np.float32).reshape(1, 1, 3, 3)
        d = dl.init_dictionary(p, 1, seed=0)
        np.testing.assert_allclose(
            d.filters[0], p[0] / np.linalg.norm(p), rtol=1e-6
        )

    def test_unit_norms(self):
        rng = np.random.default_rng(0)
        d = dl.init_dictionary(rng.random((50, 2, 4, 4), dtype=np.float32), 8, seed=1)
        norms = np.linalg.norm(d.filters.reshape(8, -1), axis=1)
        np.testing.assert_allclose(norms, 1.0, atol=1e-6)

    def test_reproducible(self):
        rng = np.random.default_rng(1)
        patches = rng.random((500, 3, 5, 5), dtype=np.float32)
        a = dl.init_dictionary(patches, 16, seed=42)
        b = dl.init_dictionary(patches, 16, seed=42)
        np.testing.assert_array_equal(a.filters, b.filters)

    def test_duplicates_redrawn(self):
        patches = np.stack([np.ones((1, 2, 2), np.float32)] * 5
                           + [np.eye(2, dtype=np.float32).reshape(1, 2, 2)])
        d = dl.init_dictionary(patches, 2, seed=0)
        assert np.linalg.norm(d.filters[0] - d.filters[1]) > 1e-6

    def test_insufficient(self):
        with pytest.raises(InsufficientPatchesError):
            dl.init_dictionary(np.ones((3, 1, 2, 2), np.float32), 4, seed=0)


class TestAssignPatch:
    def test_orthonormal_basis_positive(self):
        d = make_dictionary(
            [np.eye(4)[0].reshape(1, 2, 2), np.eye(4)[1].reshape(1, 2, 2)]
        )
        a = dl.assign_patch(d, 3.0 * np.eye(4)[0].reshape(1, 2, 2))
        assert a.index == 0 and a.code == pytest.approx(3.0)

    def test_argmax_of_abs_keeps_sign(self):
        d = make_dictionary(
            [np.eye(4)[0].reshape(1, 2, 2), np.eye(4)[1].reshape(1, 2, 2)]
        )
        a = dl.assign_patch(d, -2.0 * np.eye(4)[1].reshape(1, 2, 2))
        assert a.index == 1 and a.code == pytest.approx(-2.0)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(5)
        for _ in range(30):
            d = make_dictionary(rng.standard_normal((8, 2, 3, 3)))
            w = rng.standard_normal((2, 3, 3)).astype(np.float32)
            a = dl.assign_patch(d, w)
            j, code = brute_assign_patch(d, w)
            assert a.index == j
            assert a.code == pytest.approx(code, abs=1e-6)

    def test_shape_mismatch(self):
        d = make_dictionary(np.ones((1, 1, 3, 3)))
        with pytest.raises(ShapeMismatchError):
            dl.assign_patch(d, np.ones((1, 2, 2)))


class TestAssignWindow:
    def test_delta_filter_finds_offset(self):
        f = np.zeros((1, 1, 3, 3), np.float32)
        f[0, 0, 0, 0] = 1.0
        d = make_dictionary(f)
        win = np.zeros((1, 6, 6), np.float32)
        win[0, 2, 3] = 7.0
        a = dl.assign_window(d, win)
        assert (a.index, a.x, a.y) == (0, 2, 3)
        assert a.code == pytest.approx(7.0)

    def test_degenerate_window_equals_patch_assignment(self):
        rng = np.random.default_rng(6)
        d = make_dictionary(rng.standard_normal((4, 2, 4, 4)))
        w = rng.standard_normal((2, 4, 4)).astype(np.float32)
        aw = dl.assign_window(d, w)
        ap = dl.assign_patch(d, w)
        assert (aw.index, aw.x, aw.y) == (ap.index, 0, 0)
        assert aw.code == pytest.approx(ap.code, abs=1e-9)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            d = make_dictionary(rng.standard_normal((4, 1, 5, 5)))
            win = rng.standard_normal((1, 10, 10)).astype(np.float32)
            a = dl.assign_window(d, win)
            l, x, y, code = brute_assign_window(d, win)
            assert (a.index, a.x, a.y) == (l, x, y)
            assert a.code == pytest.approx(code, abs=1e-6)

    def test_offset_bound(self):
        rng = np.random.default_rng(8)
        d = make_dictionary(rng.standard_normal((3, 1, 4, 4)))
        for _ in range(50):
            win = rng.standard_normal((1, 8, 8)).astype(np.float32)
            a = dl.assign_window(d, win)
            assert 0 <= a.x <= 4 and 0 <= a.y <= 4


class TestKmeansEpoch:
    def test_empty_batch_unchanged(self):
        rng = np.random.default_rng(9)
        d = make_dictionary(rng.standard_normal((4, 1, 3, 3)))
        out, counts = dl.kmeans_epoch(d, np.zeros((0, 1, 3, 3), np.float32))
        np.testing.assert_array_equal(out.filters, d.filters)
        assert counts.sum() == 0

    def test_single_patch_hand_update(self):
        d = make_dictionary(
            [np.eye(4)[0].reshape(1, 2, 2), np.eye(4)[1].reshape(1, 2, 2)]
        )
        p = np.array([2.0, 0.5, 0.0, 0.0], np.float32).reshape(1, 1, 2, 2)
        out, counts = dl.kmeans_epoch(d, p)
        # assigned to column 0 with code 2.0
        expected0 = np.array([1.0, 0.0, 0.0, 0.0]) + 2.0 * p.ravel()
        expected0 /= np.linalg.norm(expected0)
        np.testing.assert_allclose(out.filters[0].ravel(), expected0, rtol=1e-5)
        np.testing.assert_array_equal(out.filters[1], d.filters[1])
        np.testing.assert_array_equal(counts, [1, 0])

    def test_unit_norms_after_epoch(self):
        rng = np.random.default_rng(10)
        d = make_dictionary(rng.standard_normal((8, 1, 4, 4)))
        patches = rng.standard_normal((2000, 1, 4, 4)).astype(np.float32)
        out, _ = dl.kmeans_epoch(d, patches)
        norms = np.linalg.norm(out.filters.reshape(8, -1), axis=1)
        assert np.abs(norms - 1.0).max() < 1e-6

    def test_identical_patches_k1_fixed_point(self):
        p = np.array([3.0, 1.0, -2.0, 0.5], np.float32).reshape(1, 1, 2, 2)
        unit = (p / np.linalg.norm(p)).astype(np.float32)
        d = dl.Dictionary(filters=unit.copy())
        batch = np.repeat(p, 100, axis=0)
        out, _ = dl.kmeans_epoch(d, batch)
        np.testing.assert_allclose(out.filters, unit, atol=1e-6)


class TestConvKmeansEpoch:
    def test_zero_windows_leave_dictionary(self):
        rng = np.random.default_rng(11)
        d = make_dictionary(rng.standard_normal((3, 1, 3, 3)))
        out, _ = dl.conv_kmeans_epoch(d, np.zeros((10, 1, 6, 6), np.float32))
        np.testing.assert_array_equal(out.filters, d.filters)

    def test_matches_assignment_oracle_plus_update(self):
        rng = np.random.default_rng(12)
        d = make_dictionary(rng.standard_normal((2, 1, 3, 3)))
        windows = rng.standard_normal((40, 1, 6, 6)).astype(np.float32)
        out, counts = dl.conv_kmeans_epoch(d, windows)

        acc = np.zeros((2, 9))
        oracle_counts = np.zeros(2, dtype=int)
        for w in windows:
            l, x, y, code = brute_assign_window(d, w)
            acc[l] += code * w[:, x:x + 3, y:y + 3].ravel()
            oracle_counts[l] += 1
        expected = d.filters.reshape(2, -1).astype(np.float64) + acc
        expected /= np.linalg.norm(expected, axis=1, keepdims=True)
        np.testing.assert_allclose(
            out.filters.reshape(2, -1), expected, atol=1e-4
        )
        np.testing.assert_array_equal(counts, oracle_counts)

    def test_one_epoch_snaps_to_planted_patch(self):
        rng = np.random.default_rng(13)
        p = rng.standard_normal((1, 4, 4)).astype(np.float32)
        unit = (p / np.linalg.norm(p)).astype(np.float32)
        windows = np.zeros((30, 1, 8, 8), np.float32)
        for i in range(30):
            x, y = rng.integers(0, 5, 2)
            windows[i, :, x:x + 4, y:y + 4] = p
        d = dl.Dictionary(filters=unit[None].copy())
        out, _ = dl.conv_kmeans_epoch(d, windows)
        np.testing.assert_allclose(out.filters[0], unit, atol=1e-5)


class TestReinitEmptyClusters:
    def test_no_dead_columns_noop(self):
        rng = np.random.default_rng(14)
        d = make_dictionary(rng.standard_normal((4, 1, 3, 3)))
        out = dl.reinit_empty_clusters(
            d, np.ones(4), rng.random((10, 1, 3, 3), dtype=np.float32), seed=0
        )
        np.testing.assert_array_equal(out.filters, d.filters)

    def test_only_dead_column_replaced(self):
        rng = np.random.default_rng(15)
        d = make_dictionary(rng.standard_normal((4, 1, 3, 3)))
        patches = rng.random((10, 1, 3, 3), dtype=np.float32)
        out = dl.reinit_empty_clusters(d, np.array([2, 0, 1, 5]), patches, seed=1)
        np.testing.assert_array_equal(out.filters[[0, 2, 3]], d.filters[[0, 2, 3]])
        assert np.linalg.norm(out.filters[1] - d.filters[1]) > 1e-6
        assert np.linalg.norm(out.filters[1].ravel()) == pytest.approx(1.0, abs=1e-6)

    def test_revived_cluster_wins_again(self):
        # a filter orthogonal to all data never wins; after reinit it should
        rng = np.random.default_rng(16)
        wins = 0
        for seed in range(20):
            rng_s = np.random.default_rng(seed)
            patches = np.zeros((200, 1, 2, 2), np.float32)
            patches[:, 0, 0, 0] = rng_s.standard_normal(200)
            patches[:, 0, 0, 1] = rng_s.standard_normal(200)
            dead = np.zeros((1, 2, 2), np.float32)
            dead[0, 1, 1] = 1.0
            alive = np.zeros((1, 2, 2), np.float32)
            alive[0, 0, 0] = 1.0
            d = make_dictionary([alive, dead])
            _, counts = dl.kmeans_epoch(d, patches)
            d2 = dl.reinit_empty_clusters(d, counts, patches, seed=seed)
            _, counts2 = dl.kmeans_epoch(d2, patches)
            if counts2[1] > 0:
                wins += 1
        assert wins >= 18


class TestTrainers:
    def test_train_kmeans_deterministic(self):
        images = shifted_pattern_images(n_images=100, seed=3)
        a = dl.train_kmeans(images, k=4, c=1, s=6, epochs=3,
                            patches_per_epoch=2000, seed=7)
        b = dl.train_kmeans(images, k=4, c=1, s=6, epochs=3,
                            patches_per_epoch=2000, seed=7)
        np.testing.assert_array_equal(a.filters, b.filters)

    def test_train_conv_kmeans_deterministic(self):
        images = shifted_pattern_images(n_images=100, seed=3)
        a = dl.train_conv_kmeans(images, k=4, c=1, s=6, epochs=3,
                                 windows_per_epoch=2000, seed=7)
        b = dl.train_conv_kmeans(images, k=4, c=1, s=6, epochs=3,
                                 windows_per_epoch=2000, seed=7)
        np.testing.assert_array_equal(a.filters, b.filters)

    def test_degenerate_window_scale_matches_patch_training(self):
        # same sampler stream, same whitening, single offset: the two
        # trainers compute the same math through different BLAS shapes
        images = shifted_pattern_images(n_images=150, seed=4)
        a = dl.train_kmeans(images, k=3, c=1, s=6, epochs=4,
                            patches_per_epoch=3000, seed=11)
        b = dl.train_conv_kmeans(images, k=3, c=1, s=6, epochs=4,
                                 windows_per_epoch=3000, seed=11, window_scale=1)
        np.testing.assert_allclose(a.filters, b.filters, atol=1e-6)

    def test_unit_norm_and_finite_every_epoch(self):
        images = shifted_pattern_images(n_images=300, seed=5)
        for epochs in (1, 3):
            d = dl.train_conv_kmeans(images, k=8, c=1, s=6, epochs=epochs,
                                     windows_per_epoch=4000, seed=2)
            norms = np.linalg.norm(d.filters.reshape(8, -1), axis=1)
            assert np.abs(norms - 1.0).max() < 1e-6
            assert np.isfinite(d.filters).all()

    def test_dominant_pattern_k1(self):
        # every image is +-pattern (sign-balanced so the patch mean is ~0
        # and ZCA keeps the pattern direction); the single centroid aligns
        # with the pattern's whitened direction
        from convclust.preprocess import apply_zca, gcn

        rng = np.random.default_rng(6)
        pattern = rng.standard_normal((5, 5)).astype(np.float32)
        signs = rng.choice([-1.0, 1.0], size=200).astype(np.float32)
        images = 0.01 * rng.standard_normal((200, 1, 5, 5)).astype(np.float32)
        images += signs[:, None, None, None] * pattern
        d = dl.train_kmeans(images, k=1, c=1, s=5, epochs=3,
                            patches_per_epoch=500, seed=1)
        target = apply_zca(d.whitening, gcn(pattern[None, None])).ravel()
        target /= np.linalg.norm(target)
        cosine = abs(float(d.filters.ravel() @ target))
        assert cosine > 0.99


class TestRedundancyMatrix:
    def test_identical_filters(self):
        f = np.random.default_rng(17).standard_normal((1, 2, 4, 4))
        d = make_dictionary(np.concatenate([f, f]))
        r = dl.redundancy_matrix(d)
        assert r[0, 1] == pytest.approx(1.0, abs=1e-5)

    def test_shifted_deltas_fully_redundant(self):
        a = np.zeros((1, 4, 4), np.float32); a[0, 0, 0] = 1.0
        b = np.zeros((1, 4, 4), np.float32); b[0, 2, 3] = 1.0
        r = dl.redundancy_matrix(make_dictionary([a, b]))
        assert r[0, 1] == pytest.approx(1.0, abs=1e-6)

    def test_disjoint_channel_support(self):
        a = np.zeros((2, 3, 3), np.float32); a[0] = 1.0
        b = np.zeros((2, 3, 3), np.float32); b[1] = 1.0
        r = dl.redundancy_matrix(make_dictionary([a, b]))
        assert r[0, 1] == pytest.approx(0.0, abs=1e-7)

    def test_matches_exhaustive_shift_scan(self):
        rng = np.random.default_rng(18)
        d = make_dictionary(rng.standard_normal((3, 2, 3, 3)))
        r = dl.redundancy_matrix(d)
        s = 3
        for i in range(3):
            for j in range(3):
                best = 0.0
                fi = d.filters[i].astype(np.float64)
                fj = d.filters[j].astype(np.float64)
                for dx in range(-s + 1, s):
                    for dy in range(-s + 1, s):
                        total = 0.0
                        for c in range(2):
                            for x in range(s):
                                for y in range(s):
                                    x2, y2 = x + dx, y + dy
                                    if 0 <= x2 < s and 0 <= y2 < s:
                                        total += fi[c, x, y] * fj[c, x2, y2]
                        best = max(best, abs(total))
                expected = 1.0 if i == j else best
                assert r[i, j] == pytest.approx(expected, abs=1e-6)

    def test_synthetic_shifted_patterns_show_redundancy_gap(self):
        images = shifted_pattern_images(seed=0)
        kw = dict(k=16, c=1, s=8, epochs=10, seed=0)
        dk = dl.train_kmeans(images, patches_per_epoch=20_000, **kw)
        dc = dl.train_conv_kmeans(images, windows_per_epoch=20_000, **kw)
        high_k = int((dl.redundancy_matrix(dk) > 0.9).sum()) - 16
        high_c = int((dl.redundancy_matrix(dc) > 0.9).sum()) - 16
        assert high_k >= 4
        assert high_c < high_k
