import numpy as np
import pytest

from msedf import autodiff as ad
from msedf.autodiff import DimensionError, Tape, Tensor, backward, finite_difference_check
from msedf.layers import (
    DropoutSpec,
    EmbeddingLayer,
    GruCell,
    LinearLayer,
    apply_dropout,
    embedding_lookup,
    gru_sequence,
    gru_step,
)


def zero_cell(in_dim=3, hidden=4):
    cell = GruCell.create(in_dim, hidden, np.random.default_rng(0))
    for t in cell.parameters():
        t.values[...] = 0.0
    return cell


class TestLinear:
    def test_identity(self):
        layer = LinearLayer(Tensor(np.eye(2)), Tensor(np.zeros((1, 2))))
        np.testing.assert_array_equal(layer(Tensor([[3.0, 4.0]])).values, [[3, 4]])

    def test_bias_only(self, rng):
        layer = LinearLayer(Tensor(np.zeros((3, 2))), Tensor([[1.0, 2.0]]))
        np.testing.assert_array_equal(layer(Tensor(rng.normal(size=(1, 3)))).values, [[1, 2]])

    def test_gelu_matches_composition(self, rng):
        layer = LinearLayer.create(3, 5, rng, "gelu")
        layer.b.values[...] = rng.normal(size=(1, 5))
        x = Tensor(rng.normal(size=(2, 3)))
        composed = ad.activation("gelu", ad.add_row(ad.matmul(x, layer.W), layer.b))
        np.testing.assert_array_equal(layer(x).values, composed.values)

    def test_glorot_bounds(self, rng):
        layer = LinearLayer.create(30, 20, rng)
        assert np.abs(layer.W.values).max() <= np.sqrt(6 / 50)
        assert np.all(layer.b.values == 0)

    def test_width_check(self, rng):
        with pytest.raises(DimensionError):
            LinearLayer.create(3, 2, rng)(Tensor(np.ones((1, 4))))


class TestEmbedding:
    def test_lookup_row(self, rng):
        emb = EmbeddingLayer.create(6, 4, rng)
        np.testing.assert_array_equal(embedding_lookup(emb, 0).values, emb.table.values[:1])

    def test_sparse_gradient(self, rng):
        emb = EmbeddingLayer.create(6, 4, rng)
        with Tape() as tape:
            loss = ad.sum_all(embedding_lookup(emb, 3))
        backward(tape, loss)
        expected = np.zeros((6, 4))
        expected[3] = 1.0
        np.testing.assert_array_equal(emb.table.grad, expected)

    def test_repeated_lookup_accumulates(self, rng):
        emb = EmbeddingLayer.create(6, 4, rng)
        with Tape() as tape:
            loss = ad.sum_all(embedding_lookup(emb, 2)) + ad.sum_all(embedding_lookup(emb, 2))
        backward(tape, loss)
        np.testing.assert_array_equal(emb.table.grad[2], 2.0)
        f = lambda: ad.sum_all(embedding_lookup(emb, 2) * embedding_lookup(emb, 2))
        assert finite_difference_check(f, [emb.table]) < 1e-9

    def test_out_of_range(self, rng):
        with pytest.raises(IndexError):
            embedding_lookup(EmbeddingLayer.create(3, 2, rng), 3)


class TestGru:
    def test_zero_weights_halve_state(self, rng):
        h = Tensor(rng.normal(size=(1, 4)))
        out = gru_step(zero_cell(), Tensor(rng.normal(size=(1, 3))), h)
        np.testing.assert_allclose(out.values, 0.5 * h.values, atol=1e-15)

    def test_zero_input_zero_state(self, rng):
        cell = GruCell.create(3, 4, rng)
        out = gru_step(cell, Tensor(np.zeros((1, 3))), Tensor(np.zeros((1, 4))))
        np.testing.assert_array_equal(out.values, 0.0)

    def test_matches_reference_equations(self, rng):
        cell = GruCell.create(3, 4, rng)
        for k in ("bz", "br", "bh"):
            getattr(cell, k).values[...] = rng.normal(size=(1, 4))
        x, h = rng.normal(size=(2, 3)), rng.normal(size=(2, 4))
        v = {k: getattr(cell, k).values for k in GruCell.FIELDS}
        sig = lambda a: 1 / (1 + np.exp(-a))
        z = sig(x @ v["Wz"] + h @ v["Uz"] + v["bz"])
        r = sig(x @ v["Wr"] + h @ v["Ur"] + v["br"])
        cand = np.tanh(x @ v["Wh"] + (r * h) @ v["Uh"] + v["bh"])
        expected = (1 - z) * h + z * cand
        np.testing.assert_allclose(gru_step(cell, Tensor(x), Tensor(h)).values, expected, atol=1e-14)

    def test_gradients_all_nine(self, rng):
        cell = GruCell.create(3, 4, rng)
        for k in ("bz", "br", "bh"):
            getattr(cell, k).values[...] = rng.normal(size=(1, 4))
        x, h = Tensor(rng.normal(size=(2, 3))), Tensor(rng.normal(size=(2, 4)))
        f = lambda: ad.sum_all(gru_step(cell, x, h))
        assert finite_difference_check(f, {k: getattr(cell, k) for k in GruCell.FIELDS}) < 1e-4

    def test_shape_check(self, rng):
        with pytest.raises(DimensionError):
            gru_step(GruCell.create(3, 4, rng), Tensor(np.ones((1, 4))), Tensor(np.ones((1, 4))))


class TestGruSequence:
    def test_depth_one_is_fold(self, rng):
        cell = GruCell.create(3, 4, rng)
        xs = [Tensor(rng.normal(size=(1, 3))) for _ in range(5)]
        h0 = Tensor(np.zeros((1, 4)))
        out = gru_sequence([cell], xs, [h0])
        h = h0
        for t, x in enumerate(xs):
            h = gru_step(cell, x, h)
            np.testing.assert_allclose(out[0][t].values, h.values, atol=1e-15)

    def test_layer_wiring_eval(self, rng):
        cells = [GruCell.create(3, 4, rng)] + [GruCell.create(4, 4, rng) for _ in range(2)]
        xs = [Tensor(rng.normal(size=(1, 3))) for _ in range(4)]
        h0 = [Tensor(np.zeros((1, 4))) for _ in range(3)]
        out = gru_sequence(cells, xs, h0)
        below = gru_sequence(cells[1:2], out[0], h0[1:2])
        for t in range(4):
            np.testing.assert_array_equal(out[1][t].values, below[0][t].values)

    def test_train_mode_replay(self, rng):
        cells = [GruCell.create(3, 4, rng), GruCell.create(4, 4, rng)]
        xs = [Tensor(rng.normal(size=(1, 3))) for _ in range(4)]
        h0 = [Tensor(np.zeros((1, 4))) for _ in range(2)]
        run = lambda seed: gru_sequence(cells, xs, h0, DropoutSpec(0.5, "train", seed))
        a, b, c = run(7), run(7), run(8)
        np.testing.assert_array_equal(a[1][3].values, b[1][3].values)
        assert not np.array_equal(a[1][3].values, c[1][3].values)
        # the first layer never sees dropout
        np.testing.assert_array_equal(a[0][3].values, c[0][3].values)

    def test_empty(self, rng):
        with pytest.raises(ValueError):
            gru_sequence([GruCell.create(3, 4, rng)], [], [Tensor(np.zeros((1, 4)))])


class TestDropout:
    def test_eval_identity(self, rng):
        x = Tensor(rng.normal(size=(3, 3)))
        assert apply_dropout(DropoutSpec(0.5, "eval"), x) is x
        assert apply_dropout(DropoutSpec(0.0, "train"), x) is x

    def test_monte_carlo(self):
        x = Tensor(np.full((1, 100_000), 2.0))
        out = apply_dropout(DropoutSpec(0.5, "train", 3), x).values
        assert abs((out != 0).mean() - 0.5) < 0.01
        assert abs(out.mean() - 2.0) / 2.0 < 0.02

    def test_rate_validation(self):
        for bad in (-0.1, 1.0):
            with pytest.raises(ValueError):
                DropoutSpec(bad)
