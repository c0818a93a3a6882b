"""Connection learning: schemes, the discard contract, group locality."""

import numpy as np
import pytest

from convclust import connect as cn
from convclust.errors import NotDivisibleError, SchemeMismatchError
from convclust.netcore import TrainConfig, evaluate, fit_network, train_mlp
from convclust.netcore import group_conv, maxpool, relu
from convclust.synthetic import scattered_channel_features


class TestGroupScheme:
    def test_96_by_4_gives_24_groups(self):
        scheme = cn.build_group_scheme(96, 4)
        assert scheme.n_groups == 24
        assert scheme.slices()[0] == (0, 4)
        assert scheme.slices()[-1] == (92, 96)

    def test_single_full_group(self):
        scheme = cn.build_group_scheme(8, 8)
        assert scheme.n_groups == 1
        assert scheme.slices() == [(0, 8)]

    def test_not_divisible(self):
        with pytest.raises(NotDivisibleError):
            cn.build_group_scheme(96, 5)


def quick_cfg(seed=0, epochs=8):
    return TrainConfig(lr=0.05, momentum=0.9, epochs=epochs, batch_size=32,
                       dropout=0.0, seed=seed)


class TestTrainConnections:
    def test_matrix_shape_and_discard_contract(self):
        feats, labels = scattered_channel_features(300, seed=0)
        scheme = cn.build_group_scheme(16, 4)
        conn = cn.train_connections(feats, labels, scheme, kg=4, s2=3,
                                    cfg=quick_cfg(), hidden=32)
        assert conn.matrix.shape == (16, 16)
        assert conn.bias.shape == (16,)
        # only the mixing parameters survive; no filters or classifier
        assert set(vars(conn).keys()) == {"matrix", "bias", "meta"}

    def test_loss_decreases_over_first_epochs(self):
        feats, labels = scattered_channel_features(400, seed=1)
        scheme = cn.build_group_scheme(16, 4)
        conn = cn.train_connections(feats, labels, scheme, kg=4, s2=3,
                                    cfg=quick_cfg(seed=1), hidden=32,
                                    patience=None)
        losses = conn.meta["loss_history"][:5]
        assert all(b < a for a, b in zip(losses, losses[1:]))

    def test_dimension_reducing_matrix(self):
        feats, labels = scattered_channel_features(200, n_maps=16, seed=2)
        scheme = cn.build_group_scheme(8, 4)
        conn = cn.train_connections(feats, labels, scheme, kg=4, s2=3,
                                    cfg=quick_cfg(seed=2), hidden=32,
                                    n_out=8)
        assert conn.matrix.shape == (8, 16)

    def test_scheme_mismatch(self):
        feats, labels = scattered_channel_features(50, seed=3)
        with pytest.raises(SchemeMismatchError):
            cn.train_connections(feats, labels, cn.build_group_scheme(8, 4),
                                 kg=4, s2=3, cfg=quick_cfg())

    def test_learned_beats_frozen_identity_on_scattered_task(self):
        # class evidence is a channel pair straddling group boundaries:
        # with the mix frozen to identity the grouped layer cannot see a
        # pair together, so learning the mix must help
        margins = []
        for seed in range(3):
            feats, labels = scattered_channel_features(
                900, n_maps=16, group_size=4, seed=seed
            )
            tr, te = slice(0, 600), slice(600, 900)
            scheme = cn.build_group_scheme(16, 4)
            accs = {}
            for variant in ("learned", "frozen"):
                net = cn.build_connection_network(
                    16, 16, scheme, kg=4, s2=3, pool_size=2, hidden=32,
                    classes=int(labels.max()) + 1, dropout=0.0,
                    feat_hw=feats.shape[2], seed=seed,
                    mix_trainable=(variant == "learned"),
                    init_matrix=None if variant == "learned" else np.eye(16),
                )
                fit_network(net, feats[tr], labels[tr], quick_cfg(seed, 15))
                pred = net.forward(feats[te], train=False).argmax(axis=1)
                accs[variant] = float((pred == labels[te]).mean())
            margins.append(accs["learned"] - accs["frozen"])
        assert np.mean(margins) > 0


class TestApplyConnections:
    def test_identity(self):
        rng = np.random.default_rng(4)
        maps = rng.random((5, 6, 4, 4)).astype(np.float32)
        out = cn.apply_connections(cn.identity_connections(6), maps)
        np.testing.assert_allclose(out, maps, atol=1e-7)

    def test_permutation(self):
        rng = np.random.default_rng(5)
        maps = rng.random((2, 6, 3, 3)).astype(np.float32)
        conn = cn.shuffled_connections(6, seed=9)
        out = cn.apply_connections(conn, maps)
        perm = conn.matrix.argmax(axis=1)
        np.testing.assert_allclose(out, maps[:, perm], atol=1e-7)

    def test_matches_per_pixel_oracle(self):
        rng = np.random.default_rng(6)
        maps = rng.standard_normal((1, 3, 2, 2)).astype(np.float32)
        conn = cn.ConnectionMatrix(
            matrix=rng.standard_normal((4, 3)).astype(np.float32),
            bias=rng.standard_normal(4).astype(np.float32),
        )
        out = cn.apply_connections(conn, maps)
        for i in range(2):
            for j in range(2):
                np.testing.assert_allclose(
                    out[0, :, i, j],
                    conn.matrix @ maps[0, :, i, j] + conn.bias,
                    rtol=1e-5,
                )


class TestLearnGroupFilters:
    def test_shapes_and_unit_norms(self):
        feats, _ = scattered_channel_features(200, n_maps=8, map_size=10, seed=7)
        scheme = cn.build_group_scheme(8, 4)
        dicts = cn.learn_group_filters(feats, scheme, k_per_group=4, s2=3,
                                       epochs=2, samples_per_epoch=2000, seed=0)
        assert len(dicts) == 2
        for d in dicts:
            assert d.filters.shape == (4, 4, 3, 3)
            norms = np.linalg.norm(d.filters.reshape(4, -1), axis=1)
            np.testing.assert_allclose(norms, 1.0, atol=1e-6)

    def test_group_locality(self):
        feats, _ = scattered_channel_features(150, n_maps=8, map_size=10, seed=8)
        scheme = cn.build_group_scheme(8, 4)
        base = cn.learn_group_filters(feats, scheme, 4, 3, epochs=2,
                                      samples_per_epoch=1500, seed=3)
        perturbed = feats.copy()
        perturbed[:, 4:] += np.random.default_rng(0).standard_normal(
            perturbed[:, 4:].shape
        ).astype(np.float32)
        redo = cn.learn_group_filters(perturbed, scheme, 4, 3, epochs=2,
                                      samples_per_epoch=1500, seed=3)
        np.testing.assert_array_equal(base[0].filters, redo[0].filters)
        assert np.abs(base[1].filters - redo[1].filters).max() > 1e-4

    def test_single_group_matches_direct_call(self):
        from convclust.dictlearn import train_conv_kmeans

        feats, _ = scattered_channel_features(100, n_maps=4, map_size=10, seed=9)
        scheme = cn.build_group_scheme(4, 4)
        dicts = cn.learn_group_filters(feats, scheme, 3, 3, epochs=2,
                                       samples_per_epoch=1000, seed=5)
        derived_seed = int(np.random.default_rng(5).integers(2**63, size=1)[0])
        direct = train_conv_kmeans(feats, k=3, c=4, s=3, epochs=2,
                                   windows_per_epoch=1000, seed=derived_seed)
        np.testing.assert_array_equal(dicts[0].filters, direct.filters)

    def test_output_channel_count(self):
        feats, _ = scattered_channel_features(100, n_maps=8, map_size=12, seed=10)
        scheme = cn.build_group_scheme(8, 4)
        dicts = cn.learn_group_filters(feats, scheme, 5, 3, epochs=1,
                                       samples_per_epoch=800, seed=1)
        filters = np.stack([d.filters for d in dicts])
        out = group_conv(feats[:4], scheme, filters)
        assert out.shape[1] == scheme.n_groups * 5


class TestBuildLayer3:
    def test_reduced_width_pieces(self):
        feats, labels = scattered_channel_features(250, n_maps=12, map_size=10,
                                                   seed=11)
        scheme3 = cn.build_group_scheme(8, 4)
        conn, dicts = cn.build_layer3(
            feats, labels, reduce_to=8, scheme3=scheme3, k3=4, s3=3,
            cfg=quick_cfg(seed=4, epochs=4), seed=6,
            dict_epochs=2, samples_per_epoch=1000, hidden=32,
        )
        assert conn.matrix.shape == (8, 12)
        assert len(dicts) == 2
        assert dicts[0].filters.shape == (4, 4, 3, 3)

    def test_square_matrix_allowed(self):
        feats, labels = scattered_channel_features(150, n_maps=8, map_size=10,
                                                   seed=12)
        scheme3 = cn.build_group_scheme(8, 4)
        conn, _ = cn.build_layer3(
            feats, labels, reduce_to=8, scheme3=scheme3, k3=2, s3=3,
            cfg=quick_cfg(seed=5, epochs=3), seed=7,
            dict_epochs=1, samples_per_epoch=500, hidden=16,
        )
        assert conn.matrix.shape == (8, 8)

    def test_group_arithmetic(self):
        assert cn.build_group_scheme(768, 4).n_groups == 192


class TestConcatMultidict:
    def test_two_vectors(self):
        out = cn.concat_multidict([np.arange(3.0), np.arange(5.0)])
        assert out.shape == (8,)
        np.testing.assert_array_equal(out[:3], [0, 1, 2])

    def test_single_branch_identity(self):
        x = np.arange(6.0)
        np.testing.assert_array_equal(cn.concat_multidict([x]), x)

    def test_batched_branches(self):
        a = np.ones((4, 2, 3, 3), np.float32)
        b = np.zeros((4, 5), np.float32)
        out = cn.concat_multidict([a, b])
        assert out.shape == (4, 23)
        np.testing.assert_array_equal(out[:, :18], 1.0)
        np.testing.assert_array_equal(out[:, 18:], 0.0)
