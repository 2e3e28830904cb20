"""Neural core tests: forward contracts, gradient oracle, Adam, persistence."""

import numpy as np
import pytest

from blendrec import tensornet
from blendrec.errors import DataError, NumericError
from blendrec.tensornet import Adam, ParamTensor, Tower, TowerSpec


def make_tower(vocab=5, embed=6, hidden=(7,), out=8, seed=0, dtype=np.float64) -> Tower:
    spec = TowerSpec(vocab, embed_dim=embed, hidden_dims=hidden, out_dim=out)
    return Tower(spec, np.random.default_rng(seed), prefix="t", dtype=dtype)


def numeric_gradient(tower: Tower, ids, probe: np.ndarray, h: float = 1e-4):
    """Central finite differences of probe . forward(ids) w.r.t. every param.

    Independent of the analytic backward pass: only calls forward.
    """
    grads = []
    for p in tower.params:
        g = np.zeros_like(p.values)
        flat = p.values.reshape(-1)
        gflat = g.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            up, _ = tower.forward(ids)
            flat[k] = orig - h
            down, _ = tower.forward(ids)
            flat[k] = orig
            gflat[k] = float(np.sum((up - down) * probe) / (2 * h))
        grads.append(g)
    return grads


def max_rel_error(analytic, numeric) -> float:
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-6)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


class TestTowerForward:
    def test_output_is_unit_norm(self):
        tower = make_tower(dtype=np.float32)
        for uid in range(tower.spec.vocab_size):
            out, _ = tower.forward(uid)
            norm = np.linalg.norm(out)
            assert abs(norm - 1.0) < 1e-5

    def test_batched_matches_scalar(self):
        tower = make_tower()
        batch, _ = tower.forward(np.array([0, 3, 1, 3]))
        for row, uid in zip(batch, [0, 3, 1, 3]):
            single, _ = tower.forward(uid)
            assert np.allclose(row, single)

    def test_zero_output_layer_prenorm_is_bias(self):
        tower = make_tower()
        out_affine = tower.layers[-1][0]
        out_affine.weight.values[...] = 0.0
        out_affine.bias.values[...] = np.arange(tower.out_dim, dtype=np.float64)
        _, _, prenorm = tower.forward(2, with_prenorm=True)
        assert np.allclose(prenorm, np.arange(tower.out_dim))

    def test_zero_vector_passes_through(self):
        tower = make_tower()
        out_affine = tower.layers[-1][0]
        out_affine.weight.values[...] = 0.0
        out_affine.bias.values[...] = 0.0
        out, _ = tower.forward(1)
        assert np.allclose(out, 0.0)

    def test_hand_computed_affine_chain(self):
        # one-hot style check on a minimal tower: embed(2d) -> affine(2d), no hidden
        tower = make_tower(vocab=2, embed=2, hidden=(), out=2)
        tower.embedding.table.values[...] = np.array([[1.0, 2.0], [0.5, -1.0]])
        affine = tower.layers[0][0]
        affine.weight.values[...] = np.array([[1.0, -1.0], [0.5, 2.0]])
        affine.bias.values[...] = np.array([0.25, -0.5])
        # id 0: x = [1,2] @ W + b = [1*1+2*0.5+0.25, 1*-1+2*2-0.5] = [2.25, 2.5]
        expected = np.array([2.25, 2.5])
        expected = expected / np.linalg.norm(expected)
        out, _ = tower.forward(0)
        assert np.allclose(out, expected, atol=1e-12)

    def test_id_out_of_range(self):
        tower = make_tower()
        with pytest.raises(DataError, match="out of range"):
            tower.forward(99)


class TestTowerBackward:
    def test_gradient_matches_finite_differences(self):
        tower = make_tower(seed=12)
        rng = np.random.default_rng(0)
        ids = np.array([0, 2, 4])
        probe = rng.normal(size=(3, tower.out_dim))
        out, cache = tower.forward(ids)
        tower.backward(cache, probe)
        analytic = [p.grad.copy() for p in tower.params]
        numeric = numeric_gradient(tower, ids, probe)
        assert max_rel_error(analytic, numeric) < 1e-4

    def test_zero_upstream_gives_zero_grad(self):
        tower = make_tower()
        out, cache = tower.forward(1)
        tower.backward(cache, np.zeros(tower.out_dim))
        assert all(np.all(p.grad == 0) for p in tower.params)

    def test_backward_accumulates(self):
        tower = make_tower()
        out, cache = tower.forward(np.array([1, 2]))
        g = np.ones((2, tower.out_dim))
        tower.backward(cache, g)
        once = [p.grad.copy() for p in tower.params]
        tower.backward(cache, g)
        for p, first in zip(tower.params, once):
            assert np.allclose(p.grad, 2.0 * first)

    def test_mismatched_upstream_shape(self):
        tower = make_tower()
        out, cache = tower.forward(1)
        with pytest.raises(DataError, match="mismatch"):
            tower.backward(cache, np.zeros(tower.out_dim + 1))


class TestAdam:
    def test_first_step_is_signed_lr(self):
        p = ParamTensor("w", np.zeros(4, dtype=np.float64))
        opt = Adam([p], learning_rate=0.01)
        p.grad[...] = np.array([0.5, -2.0, 1e-3, -1e-3])
        opt.step()
        assert np.allclose(p.values, -0.01 * np.sign([0.5, -2.0, 1e-3, -1e-3]), atol=1e-6)
        assert np.all(p.grad == 0)

    def test_zero_gradient_keeps_parameters(self):
        p = ParamTensor("w", np.full(3, 7.0))
        opt = Adam([p])
        opt.step()
        assert np.allclose(p.values, 7.0)

    def test_quadratic_descent(self):
        # minimize f(x) = (x - 3)^2 from x = 0
        p = ParamTensor("x", np.array([0.0]))
        opt = Adam([p], learning_rate=0.5)
        def loss():
            return float((p.values[0] - 3.0) ** 2)
        start = loss()
        for _ in range(3):
            p.grad[...] = 2.0 * (p.values - 3.0)
            opt.step()
        assert loss() < start

    def test_nonfinite_gradient_names_tensor(self):
        p = ParamTensor("bad_tensor", np.zeros(2))
        opt = Adam([p])
        p.grad[...] = np.array([np.nan, 0.0])
        with pytest.raises(NumericError, match="bad_tensor"):
            opt.step()


class TestDeterminism:
    def test_same_seed_same_trajectory(self):
        def run():
            tower = make_tower(seed=5, dtype=np.float32)
            opt = Adam(tower.params, learning_rate=0.01)
            rng = np.random.default_rng(7)
            for _ in range(5):
                ids = rng.integers(0, tower.spec.vocab_size, size=4)
                out, cache = tower.forward(ids)
                tower.backward(cache, np.ones_like(out))
                opt.step()
            return [p.values.copy() for p in tower.params]
        a, b = run(), run()
        for x, y in zip(a, b):
            assert np.array_equal(x, y)


class TestPersistence:
    def test_roundtrip_exact(self, tmp_path):
        tower = make_tower(dtype=np.float32)
        prefix = str(tmp_path / "model")
        tensornet.save_tensors(prefix, tower.params, meta={"purpose": "test"})
        tensors, meta = tensornet.load_tensors(prefix)
        assert meta["purpose"] == "test"
        for orig, loaded in zip(tower.params, tensors):
            assert loaded.name == orig.name
            assert np.array_equal(loaded.values, orig.values)

    def test_format_tag_checked(self, tmp_path):
        prefix = str(tmp_path / "model")
        tensornet.save_tensors(prefix, [ParamTensor("a", np.zeros(2, dtype=np.float32))])
        manifest = (tmp_path / "model.json").read_text().replace(tensornet.TENSOR_FORMAT, "bogus/9")
        (tmp_path / "model.json").write_text(manifest)
        with pytest.raises(DataError, match="format"):
            tensornet.load_tensors(prefix)

    def test_attach_validates_shapes(self, tmp_path):
        tower = make_tower(dtype=np.float32)
        other = make_tower(vocab=9, dtype=np.float32)
        prefix = str(tmp_path / "m")
        tensornet.save_tensors(prefix, tower.params)
        tensors, _ = tensornet.load_tensors(prefix)
        with pytest.raises(DataError, match="shape"):
            tensornet.attach_tensors(other, tensors)
