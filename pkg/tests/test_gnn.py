import numpy as np
import pytest

from hoplink import autodiff as ad
from hoplink.autodiff import ShapeError, Tensor
from hoplink.gnn import (
    GraphEncoder,
    GraphEncoderConfig,
    combine_adjacency,
    gat_head,
    gcn_layer,
    mean_neighbor_matrix,
    normalize_adjacency,
    sage_layer,
)
from hoplink.kg import NeighborhoodSubgraph


def make_subgraph(A):
    A = np.asarray(A, dtype=np.float64)
    return NeighborhoodSubgraph(nodes=list(range(len(A))), A=A,
                                hop_of=np.zeros(len(A), dtype=np.int64),
                                truncated=False)


def encoder(variant, dim=6, layers=2, heads=3, seed=0):
    cfg = GraphEncoderConfig(variant=variant, layers=layers, dim=dim, heads=heads)
    return GraphEncoder(cfg, np.random.default_rng(seed))


class TestNormalizeAdjacency:
    def test_single_isolated_node(self):
        np.testing.assert_array_equal(normalize_adjacency(np.zeros((1, 1))), [[1.0]])

    def test_two_nodes_single_edge(self):
        A = np.array([[0.0, 1.0], [0.0, 0.0]])
        np.testing.assert_allclose(normalize_adjacency(A),
                                   [[0.5, 0.5], [0.5, 0.5]])

    def test_symmetric_input_gives_symmetric_output(self):
        rng = np.random.default_rng(1)
        A = (rng.random((6, 6)) > 0.6).astype(float)
        A = np.maximum(A, A.T)
        np.fill_diagonal(A, 0)
        Ahat = normalize_adjacency(A)
        np.testing.assert_allclose(Ahat, Ahat.T)
        assert (Ahat >= 0).all()

    def test_non_square_rejected(self):
        with pytest.raises(ShapeError):
            normalize_adjacency(np.zeros((2, 3)))


class TestGcnLayer:
    def test_identity_adjacency_is_linear_map(self):
        rng = np.random.default_rng(2)
        X = Tensor(rng.normal(size=(3, 4)))
        W = Tensor(rng.normal(size=(4, 4)))
        out = gcn_layer(X, np.eye(3), W)
        np.testing.assert_allclose(out.values, X.values @ W.values)

    def test_two_node_hand_case(self):
        A_hat = normalize_adjacency(np.array([[0.0, 1.0], [0.0, 0.0]]))
        out = gcn_layer(Tensor(np.eye(2)), A_hat, Tensor(np.eye(2)))
        np.testing.assert_allclose(out.values, [[0.5, 0.5], [0.5, 0.5]])

    def test_gradient_through_two_stacked_layers(self):
        rng = np.random.default_rng(3)
        A_hat = normalize_adjacency(np.array([[0, 1, 0], [0, 0, 1], [0, 0, 0]], float))
        X = ad.parameter(rng.normal(size=(3, 4)))
        W0 = ad.parameter(rng.normal(size=(4, 4)))
        W1 = ad.parameter(rng.normal(size=(4, 4)))

        def loss(_):
            h = gcn_layer(X, A_hat, W0, ad.relu)
            return ad.sum_all(gcn_layer(h, A_hat, W1))

        assert ad.finite_diff_check(loss, X) < 1e-5
        assert ad.finite_diff_check(loss, W0) < 1e-5


def gat_reference(X, A, W, a_src, a_dst, alpha=0.2):
    n = len(X)
    H = X @ W
    scores = H @ a_src + (H @ a_dst).T
    scores = np.where(scores > 0, scores, alpha * scores)
    mask = (np.maximum(A, A.T) + np.eye(n)) > 0
    shifted = np.where(mask, scores, -np.inf)
    shifted = shifted - shifted.max(axis=1, keepdims=True)
    weights = np.exp(shifted) * mask
    att = weights / weights.sum(axis=1, keepdims=True)
    return att @ H, att


class TestGatHead:
    def test_single_node_attends_to_itself(self):
        rng = np.random.default_rng(4)
        X = Tensor(rng.normal(size=(1, 4)))
        W = Tensor(rng.normal(size=(4, 4)))
        out, att = gat_head(X, np.array([[True]]), W,
                            Tensor(rng.normal(size=(4, 1))),
                            Tensor(rng.normal(size=(4, 1))))
        np.testing.assert_allclose(att, [[1.0]])
        np.testing.assert_allclose(out.values, X.values @ W.values)

    def test_attention_rows_sum_to_one(self):
        rng = np.random.default_rng(5)
        A = np.array([[0, 1, 0], [0, 0, 1], [0, 0, 0]], float)
        mask = (np.maximum(A, A.T) + np.eye(3)) > 0
        _, att = gat_head(Tensor(rng.normal(size=(3, 4))), mask,
                          Tensor(rng.normal(size=(4, 4))),
                          Tensor(rng.normal(size=(4, 1))),
                          Tensor(rng.normal(size=(4, 1))))
        np.testing.assert_allclose(att.sum(axis=1), 1.0, atol=1e-9)
        np.testing.assert_array_equal(att[0, 2], 0.0)

    def test_matches_dense_reference_on_path_graph(self):
        rng = np.random.default_rng(6)
        A = np.array([[0, 1, 0], [0, 0, 1], [0, 0, 0]], float)
        X = rng.normal(size=(3, 5))
        W = rng.normal(size=(5, 5))
        a_src = rng.normal(size=(5, 1))
        a_dst = rng.normal(size=(5, 1))
        mask = (np.maximum(A, A.T) + np.eye(3)) > 0
        out, att = gat_head(Tensor(X), mask, Tensor(W), Tensor(a_src), Tensor(a_dst))
        ref_out, ref_att = gat_reference(X, A, W, a_src, a_dst)
        np.testing.assert_allclose(out.values, ref_out, atol=1e-9)
        np.testing.assert_allclose(att, ref_att, atol=1e-9)


class TestSageLayer:
    def test_isolated_node_mean_term_is_zero(self):
        rng = np.random.default_rng(7)
        X = Tensor(rng.normal(size=(1, 3)))
        W = Tensor(rng.normal(size=(6, 3)))
        out = sage_layer(X, mean_neighbor_matrix(np.zeros((1, 1))), W, ad.relu)
        expected = np.maximum(
            np.concatenate([X.values, np.zeros((1, 3))], axis=1) @ W.values, 0)
        np.testing.assert_allclose(out.values, expected)

    def test_two_node_identity_blocks(self):
        X = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
        W = Tensor(np.vstack([np.eye(2), np.eye(2)]))
        M = mean_neighbor_matrix(np.array([[0.0, 1.0], [0.0, 0.0]]))
        out = sage_layer(X, M, W)
        # self features plus the single neighbor's features
        np.testing.assert_allclose(out.values, [[4.0, 6.0], [4.0, 6.0]])

    def test_equal_neighbor_doubles(self):
        X = Tensor(np.array([[1.0, 1.0], [1.0, 1.0]]))
        W = Tensor(np.vstack([np.eye(2), np.eye(2)]))
        M = mean_neighbor_matrix(np.array([[0.0, 1.0], [1.0, 0.0]]))
        out = sage_layer(X, M, W)
        np.testing.assert_allclose(out.values, [[2.0, 2.0], [2.0, 2.0]])


def gcn_encode_reference(X, A, W0, W1):
    A_hat = normalize_adjacency(A)
    hidden = np.maximum(A_hat @ X @ W0, 0)
    return A_hat @ hidden @ W1 + X


class TestEncodeNeighborhood:
    PATH5 = np.array([[0, 1, 0, 0, 0],
                      [0, 0, 1, 0, 0],
                      [0, 0, 0, 1, 0],
                      [0, 0, 0, 0, 1],
                      [0, 0, 0, 0, 0]], dtype=float)

    def test_head_only_gcn_is_residual_plus_linear(self):
        enc = encoder("gcn", dim=4)
        X = Tensor(np.random.default_rng(8).normal(size=(1, 4)))
        out = enc.encode_neighborhood(make_subgraph(np.zeros((1, 1))), X)
        w0, w1 = enc.params["l0_w"].values, enc.params["l1_w"].values
        expected = np.maximum(X.values @ w0, 0) @ w1 + X.values
        np.testing.assert_allclose(out.values, expected[0])

    def test_gcn_matches_dense_reference(self):
        rng = np.random.default_rng(9)
        enc = encoder("gcn", dim=6)
        X = rng.normal(size=(5, 6))
        out = enc.encode_neighborhood(make_subgraph(self.PATH5), Tensor(X))
        ref = gcn_encode_reference(X, self.PATH5, enc.params["l0_w"].values,
                                   enc.params["l1_w"].values)
        np.testing.assert_allclose(out.values, ref[0], atol=1e-9)

    @pytest.mark.parametrize("variant", ["gcn", "gat", "sage"])
    def test_permutation_invariance(self, variant):
        rng = np.random.default_rng(10)
        enc = encoder(variant, dim=6)
        n = 6
        A = (rng.random((n, n)) > 0.6).astype(float)
        np.fill_diagonal(A, 0)
        X = rng.normal(size=(n, 6))
        base = enc.encode_neighborhood(make_subgraph(A), Tensor(X)).values

        perm = np.concatenate([[0], 1 + rng.permutation(n - 1)])
        out = enc.encode_neighborhood(make_subgraph(A[np.ix_(perm, perm)]),
                                      Tensor(X[perm])).values
        np.testing.assert_allclose(out, base, atol=1e-9)

    @pytest.mark.parametrize("variant", ["gcn", "gat", "sage"])
    def test_output_shapes_interchangeable(self, variant):
        enc = encoder(variant, dim=6)
        X = Tensor(np.random.default_rng(11).normal(size=(5, 6)))
        out = enc.encode_neighborhood(make_subgraph(self.PATH5), X)
        assert out.shape == (6,)

    @pytest.mark.parametrize("variant", ["gcn", "gat", "sage"])
    def test_gradient_check(self, variant):
        rng = np.random.default_rng(12)
        enc = encoder(variant, dim=6)
        sub = make_subgraph(self.PATH5)
        X = ad.parameter(rng.normal(size=(5, 6)))

        def loss(_):
            return ad.sum_all(enc.encode_neighborhood(sub, X))

        assert ad.finite_diff_check(loss, X) < 1e-5
        first_w = next(iter(enc.params.values()))
        assert ad.finite_diff_check(loss, first_w) < 1e-5

    def test_row_count_mismatch_rejected(self):
        enc = encoder("gcn", dim=4)
        with pytest.raises(ShapeError):
            enc.encode_neighborhood(make_subgraph(np.zeros((2, 2))),
                                    Tensor(np.zeros((3, 4))))

    @pytest.mark.parametrize("variant", ["gcn", "gat", "sage"])
    def test_block_diagonal_batch_equals_loop(self, variant):
        rng = np.random.default_rng(13)
        enc = encoder(variant, dim=6)
        subs = []
        feats = []
        for n in (3, 5, 4):
            A = (rng.random((n, n)) > 0.5).astype(float)
            np.fill_diagonal(A, 0)
            subs.append(A)
            feats.append(rng.normal(size=(n, 6)))
        combined, offsets = combine_adjacency(subs)
        batched = enc.encode(Tensor(np.vstack(feats)), combined, offsets).values
        for row, (A, X) in enumerate(zip(subs, feats)):
            single = enc.encode(Tensor(X), A, [0]).values
            np.testing.assert_allclose(batched[row], single[0],
                                       rtol=1e-12, atol=1e-12)

    def test_gat_attention_recorded_per_layer(self):
        enc = encoder("gat", dim=6, layers=2)
        X = Tensor(np.random.default_rng(14).normal(size=(5, 6)))
        enc.encode_neighborhood(make_subgraph(self.PATH5), X)
        assert len(enc.last_attention) == 2
        np.testing.assert_allclose(enc.last_attention[0].sum(axis=1), 1.0, atol=1e-9)


class TestConfigValidation:
    def test_bad_variant(self):
        with pytest.raises(ValueError, match="variant"):
            GraphEncoderConfig(variant="gnn")

    def test_gat_head_count_bounds(self):
        with pytest.raises(ValueError, match="head count"):
            GraphEncoderConfig(variant="gat", dim=4, heads=5)
        with pytest.raises(ValueError, match="head count"):
            GraphEncoderConfig(variant="gat", dim=4, heads=0)

    def test_gat_uneven_head_widths_concat_to_dim(self):
        # hidden layers concatenate, so widths absorb the remainder
        cfg = GraphEncoderConfig(variant="gat", dim=7, heads=3)
        assert cfg.head_widths(final=False) == [3, 2, 2]
        assert cfg.head_widths(final=True) == [7, 7, 7]
        enc = GraphEncoder(cfg, np.random.default_rng(0))
        A = np.zeros((4, 4))
        A[0, 1] = A[1, 2] = A[2, 3] = 1.0
        X = ad.constant(np.random.default_rng(1).normal(size=(4, 7)))
        out = enc.encode(X, A, [0, 2])
        assert out.shape == (2, 7)

    def test_zero_layers_rejected(self):
        with pytest.raises(ValueError, match="layer"):
            GraphEncoderConfig(layers=0)
