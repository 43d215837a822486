import numpy as np
import pytest

from hgdiff.encoder import (
    EncoderConfig,
    encode,
    encode_vjp,
    encode_views,
    propagate_relation,
    relation_adjacencies,
)
from hgdiff.hetgraph import GraphError, HeteroGraph, Relation, normalize
from hgdiff.numerics import Rng, ShapeError, grad_check


def line_graph(n, name="e"):
    return HeteroGraph({"n": n}, [Relation(name, "n", "n", [(i, i + 1) for i in range(n - 1)])], name)


def two_node():
    return normalize(HeteroGraph({"n": 2}, [Relation("e", "n", "n", [(0, 1)])], "e"), "e")


def random_graph(rng, n, n_edges, name="e"):
    edges = set()
    while len(edges) < n_edges:
        u, v = int(rng.integers(0, n)), int(rng.integers(0, n))
        if u != v:
            edges.add((u, v))
    return HeteroGraph({"n": n}, [Relation(name, "n", "n", sorted(edges))], name)


class TestPropagate:
    def test_zero_layers_identity(self):
        adj = two_node()
        e0 = np.array([[1.0, 2.0], [3.0, 4.0]])
        cfg = EncoderConfig(layers=0, dim=2)
        assert np.array_equal(propagate_relation(adj, e0, cfg), e0)

    def test_two_node_hand_computed(self):
        adj = two_node()
        e0 = np.eye(2)
        cfg = EncoderConfig(layers=1, dim=2, activation="identity")
        out = propagate_relation(adj, e0, cfg)
        assert np.allclose(out, np.ones((2, 2)))

    def test_isolated_node_keeps_initial_row(self):
        g = HeteroGraph({"n": 3}, [Relation("e", "n", "n", [(0, 1)])], "e")
        adj = normalize(g, "e")
        e0 = Rng(0).normal(3, 4)
        for L in (1, 2, 5):
            out = propagate_relation(adj, e0, EncoderConfig(layers=L, dim=4))
            assert np.array_equal(out[2], e0[2])

    def test_row_norm_invariant(self):
        rng = Rng(2)
        g = random_graph(rng, 12, 20)
        adj = normalize(g, "e")
        e0 = rng.normal(12, 8)
        _, layers = propagate_relation(adj, e0, EncoderConfig(layers=3, dim=8),
                                       collect_layers=True)
        for table in layers[1:]:
            norms = np.linalg.norm(table, axis=1)
            nz = norms > 0
            assert np.all(np.abs(norms[nz] - 1.0) < 1e-9)

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            propagate_relation(two_node(), np.ones((3, 2)), EncoderConfig(layers=1, dim=2))


class TestEncode:
    def make_two_relation(self, identical=False):
        e1 = [(0, 1), (1, 2)]
        e2 = e1 if identical else [(0, 3), (2, 3)]
        g = HeteroGraph({"n": 4},
                        [Relation("a", "n", "n", e1), Relation("b", "n", "n", e2)], "a")
        return relation_adjacencies(g)

    def test_single_relation_pooling_identity(self):
        adjs = {"a": two_node()}
        e0 = Rng(1).normal(2, 3)
        cfg = EncoderConfig(layers=2, dim=3)
        out = encode(adjs, e0, cfg)
        assert np.array_equal(out.pooled, out.per_relation["a"])

    def test_identical_relations_mean_equals_branch(self):
        adjs = self.make_two_relation(identical=True)
        e0 = Rng(3).normal(4, 3)
        out = encode(adjs, e0, EncoderConfig(layers=2, dim=3, pooling="mean"))
        assert np.allclose(out.pooled, out.per_relation["a"])

    def test_mean_of_branches(self):
        adjs = self.make_two_relation()
        e0 = Rng(4).normal(4, 3)
        cfg = EncoderConfig(layers=2, dim=3)
        out = encode(adjs, e0, cfg)
        branch_a = propagate_relation(adjs["a"], e0, cfg)
        branch_b = propagate_relation(adjs["b"], e0, cfg)
        assert np.allclose(out.pooled, (branch_a + branch_b) / 2)

    def test_sum_pooling(self):
        adjs = self.make_two_relation()
        e0 = Rng(4).normal(4, 3)
        cfg = EncoderConfig(layers=1, dim=3, pooling="sum")
        out = encode(adjs, e0, cfg)
        assert np.allclose(out.pooled,
                           out.per_relation["a"] + out.per_relation["b"])

    def test_empty_relation_set_rejected(self):
        with pytest.raises(GraphError):
            encode({}, np.ones((2, 2)), EncoderConfig(layers=1, dim=2))

    def test_per_relation_initial_tables(self):
        adjs = self.make_two_relation()
        rng = Rng(8)
        e0 = {"a": rng.normal(4, 3), "b": rng.normal(4, 3)}
        cfg = EncoderConfig(layers=1, dim=3, shared_initial=False)
        out, vjp = encode_vjp(adjs, e0, cfg)
        upstream = rng.normal(4, 3)
        grads = vjp(upstream)
        assert set(grads) == {"a", "b"}


class TestEncodeViews:
    def test_auxiliary_copy_matches_target(self):
        edges = [(0, 0), (1, 1), (2, 0)]
        g = HeteroGraph({"user": 3, "item": 2},
                        [Relation("buy", "user", "item", edges),
                         Relation("view", "user", "item", edges)], "buy")
        e0 = Rng(5).normal(5, 4)
        (tgt, _), (src, _) = encode_views(g, e0, EncoderConfig(layers=2, dim=4))
        assert np.array_equal(tgt.pooled, src.pooled)

    def test_empty_auxiliary_gives_initial(self):
        g = HeteroGraph({"user": 3, "item": 2},
                        [Relation("buy", "user", "item", [(0, 0), (1, 1)]),
                         Relation("view", "user", "item", np.empty((0, 2)))], "buy")
        e0 = Rng(6).normal(5, 4)
        (_, _), (src, _) = encode_views(g, e0, EncoderConfig(layers=3, dim=4))
        assert np.array_equal(src.pooled, e0)

    def test_compositional_three_relations(self):
        g = HeteroGraph({"user": 4, "item": 3},
                        [Relation("buy", "user", "item", [(0, 0), (1, 2), (3, 1)]),
                         Relation("view", "user", "item", [(0, 1), (2, 2)]),
                         Relation("cart", "user", "item", [(1, 0)])], "buy")
        e0 = Rng(7).normal(7, 4)
        cfg = EncoderConfig(layers=2, dim=4)
        (tgt, _), (src, _) = encode_views(g, e0, cfg)
        adjs = relation_adjacencies(g)
        expect_tgt = encode({"buy": adjs["buy"]}, e0, cfg)
        expect_src = encode({"view": adjs["view"], "cart": adjs["cart"]}, e0, cfg)
        assert np.array_equal(tgt.pooled, expect_tgt.pooled)
        assert np.array_equal(src.pooled, expect_src.pooled)


class TestStructuralProperties:
    def test_permutation_equivariance(self):
        rng = Rng(10)
        for trial in range(20):
            g = random_graph(rng.derive(f"g{trial}"), 10, 14)
            e0 = rng.derive(f"e{trial}").normal(10, 4)
            cfg = EncoderConfig(layers=2, dim=4)
            perm = rng.derive(f"p{trial}").permutation(10)
            edges = g.relations["e"].edges
            permuted = HeteroGraph(
                {"n": 10}, [Relation("e", "n", "n", perm[edges])], "e")
            out = encode(relation_adjacencies(g), e0, cfg).pooled
            out_p = encode(relation_adjacencies(permuted), e0[np.argsort(perm)], cfg).pooled
            assert np.max(np.abs(out_p - out[np.argsort(perm)])) < 1e-9

    def test_locality(self):
        # along a 9-node path, a node >L hops away cannot influence node 0
        for L in (1, 2, 3):
            g = line_graph(9)
            adj = normalize(g, "e")
            e0 = Rng(20 + L).normal(9, 4)
            cfg = EncoderConfig(layers=L, dim=4)
            base = propagate_relation(adj, e0, cfg)
            bumped = e0.copy()
            bumped[L + 1] += 10.0  # L+1 hops from node 0
            moved = propagate_relation(adj, bumped, cfg)
            assert np.array_equal(moved[0], base[0])
            assert np.any(moved[L + 1] != base[L + 1])


class TestGradients:
    def scalar_probe(self, adjs, cfg, shape, seed):
        rng = Rng(seed)
        probe = rng.normal(*shape)

        def f(e0):
            return float((encode(adjs, e0.reshape(shape), cfg).pooled * probe).sum())

        def analytic(e0):
            _, vjp = encode_vjp(adjs, e0.reshape(shape), cfg)
            return vjp(probe)

        return f, analytic

    def test_encode_gradient_certified(self):
        rng = Rng(30)
        g = random_graph(rng, 8, 12)
        g2 = random_graph(rng.derive("second"), 8, 10, name="f")
        adjs = {"e": normalize(g, "e"),
                "f": relation_adjacencies(g2)["f"]}
        cfg = EncoderConfig(layers=2, dim=3)
        f, analytic = self.scalar_probe(adjs, cfg, (8, 3), seed=31)
        for point_seed in range(5):
            e0 = Rng(100 + point_seed).normal(8, 3)
            err = grad_check(f, analytic(e0), e0, h=1e-6)
            assert err < 1e-4, f"encoder grad err {err} at point {point_seed}"

    def test_zero_layer_gradient_is_upstream(self):
        adjs = {"a": two_node()}
        cfg = EncoderConfig(layers=0, dim=2)
        _, vjp = encode_vjp(adjs, np.ones((2, 2)), cfg)
        up = np.array([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(vjp(up), up)
