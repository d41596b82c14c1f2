import math

import numpy as np
import pytest

from cassle.autograd import Tensor, backward, gradcheck
from cassle.distill import (
    METHOD_FAMILY,
    AblationFlags,
    cassle_total_loss,
    distill_contrastive,
    distill_cross_correlation,
    distill_loss,
    distill_mse,
    distill_prototype_ce,
    snapshot_frozen,
    ssl_loss,
)
from cassle.errors import ConfigError
from cassle.losses import LossConfig, barlow_twins_loss, infonce_loss
from cassle.nn import ArchSpec, Linear, PredictorState, PrototypeBank, encode, init_encoder, init_predictor
from cassle.optim import OptimizerConfig, OptimizerState, optimizer_step

DECORRELATED = np.array([[1.0, 1.0, 1.0], [1.0, -1.0, -1.0], [-1.0, 1.0, -1.0], [-1.0, -1.0, 1.0]])


def identity_predictor(d):
    w1 = Tensor(np.hstack([np.eye(d), -np.eye(d)]), requires_grad=True)
    w2 = Tensor(np.vstack([np.eye(d), -np.eye(d)]), requires_grad=True)
    return PredictorState([Linear(w1, Tensor(np.zeros(2 * d), True)),
                           Linear(w2, Tensor(np.zeros(d), True))])


def random_predictor(d, seed=0):
    g = init_predictor(d, 6, seed)
    rng = np.random.default_rng(seed + 100)
    for layer in g.layers:
        layer.bias.data[...] = rng.standard_normal(layer.bias.shape)
    return g


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


class TestSnapshot:
    def test_frozen_copy_matches_and_is_immutable(self):
        arch = ArchSpec(input_dim=6, backbone=[8, 5], projector=[4])
        enc = init_encoder(arch, 0)
        x = np.random.default_rng(0).standard_normal((16, 6))
        before = encode(enc, x)[1].data.copy()
        frozen = snapshot_frozen(enc)
        assert np.array_equal(encode(frozen.encoder, x)[1].data, before)
        params = enc.parameters()
        cfg, state = OptimizerConfig(kind="sgd", global_lr=0.05), OptimizerState()
        for _ in range(100):
            for p in params:
                p.grad = None
            _, za = encode(enc, x)
            _, zbar = encode(frozen.encoder, x + 0.1)
            backward(infonce_loss(za, zbar))
            for p in frozen.encoder.parameters():
                assert p.grad is None
            optimizer_step(params, cfg, state)
        from cassle.formats import params_digest

        assert params_digest(frozen.encoder.state_dict()) == frozen.digest
        assert not np.array_equal(encode(enc, x)[1].data, before)


class TestContrastive:
    def test_closed_form(self):
        z = Tensor([[1.0, 0.0]])
        cfg = LossConfig(temperature=1.0)
        loss = distill_contrastive(z, z, identity_predictor(2), cfg, negatives=Tensor([[0.0, 1.0]]))
        assert abs(loss.item() - math.log(1.0 + math.exp(-1.0))) < 1e-9

    def test_gradcheck_and_no_gradient_to_target(self):
        rng = np.random.default_rng(1)
        z, zbar = leaf(rng.standard_normal((5, 4))), leaf(rng.standard_normal((5, 4)))
        g = random_predictor(4)
        ok, worst = gradcheck(lambda: distill_contrastive(z, zbar, g), [z, *g.parameters()])
        assert ok, worst
        assert zbar not in backward(distill_contrastive(z, zbar, g))

    def test_batch_permutation_invariance(self):
        rng = np.random.default_rng(2)
        z, zbar = rng.standard_normal((6, 4)), rng.standard_normal((6, 4))
        g = random_predictor(4)
        perm = rng.permutation(6)
        a = distill_contrastive(Tensor(z), Tensor(zbar), g).item()
        b = distill_contrastive(Tensor(z[perm]), Tensor(zbar[perm]), g).item()
        assert a == pytest.approx(b, rel=1e-13)


class TestMse:
    def test_perfect_prediction(self):
        z = Tensor(np.random.default_rng(0).standard_normal((4, 3)))
        assert distill_mse(z, z, identity_predictor(3)).item() == pytest.approx(-1.0, abs=1e-12)

    def test_orthogonal_prediction(self):
        assert distill_mse(Tensor([[1.0, 0.0]]), Tensor([[0.0, 1.0]]), identity_predictor(2)).item() == 0.0

    def test_gradcheck_and_no_gradient_to_target(self):
        rng = np.random.default_rng(3)
        z, zbar = leaf(rng.standard_normal((5, 4))), leaf(rng.standard_normal((5, 4)))
        g = random_predictor(4)
        ok, worst = gradcheck(lambda: distill_mse(z, zbar, g), [z, *g.parameters()])
        assert ok, worst
        assert zbar not in backward(distill_mse(z, zbar, g))


class TestPrototypeCE:
    def bank(self, rng, k=5, d=3):
        return PrototypeBank(Tensor(rng.standard_normal((k, d)), requires_grad=True))

    def test_self_prediction_gives_entropy(self):
        rng = np.random.default_rng(4)
        bank = self.bank(rng)
        zbar = rng.standard_normal((3, 3))
        zn = zbar / np.linalg.norm(zbar, axis=1, keepdims=True)
        cn = bank.weights.data / np.linalg.norm(bank.weights.data, axis=1, keepdims=True)
        s = zn @ cn.T / 0.1
        p = np.exp(s - s.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        entropy = float(np.mean(-(p * np.log(p)).sum(axis=1)))
        loss = distill_prototype_ce(Tensor(zbar), Tensor(zbar), identity_predictor(3), bank)
        assert loss.item() == pytest.approx(entropy, abs=1e-12)

    def test_uniform_prediction(self):
        bank = PrototypeBank(Tensor(np.array([[1.0, 0, 0], [-1.0, 0, 0], [0, 1.0, 0], [0, -1.0, 0]])))
        zbar = Tensor([[1.0, 0.0, 0.0]])  # sharply assigned to prototype 0
        loss = distill_prototype_ce(Tensor([[0.0, 0.0, 1.0]]), zbar, identity_predictor(3), bank)
        assert abs(loss.item() - math.log(4.0)) < 1e-9

    def test_gradcheck_and_frozen_targets(self):
        rng = np.random.default_rng(5)
        bank = self.bank(rng, d=4)
        z, zbar = leaf(rng.standard_normal((5, 4))), leaf(rng.standard_normal((5, 4)))
        g = random_predictor(4)
        ok, worst = gradcheck(lambda: distill_prototype_ce(z, zbar, g, bank), [z, *g.parameters()])
        assert ok, worst
        grads = backward(distill_prototype_ce(z, zbar, g, bank))
        assert zbar not in grads and bank.weights not in grads

    def test_empty_bank(self):
        with pytest.raises(ConfigError):
            distill_prototype_ce(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))), None, None)


class TestCrossCorrelation:
    def test_identity(self):
        z = Tensor(DECORRELATED)
        assert abs(distill_cross_correlation(z, z, identity_predictor(3)).item()) < 1e-9

    def test_negated(self):
        loss = distill_cross_correlation(Tensor(-DECORRELATED), Tensor(DECORRELATED), identity_predictor(3))
        assert abs(loss.item() - 12.0) < 1e-9

    def test_gradcheck_and_no_gradient_to_target(self):
        rng = np.random.default_rng(6)
        z, zbar = leaf(rng.standard_normal((6, 4))), leaf(rng.standard_normal((6, 4)))
        g = random_predictor(4)
        ok, worst = gradcheck(lambda: distill_cross_correlation(z, zbar, g), [z, *g.parameters()])
        assert ok, worst
        assert zbar not in backward(distill_cross_correlation(z, zbar, g))


class TestTotalLoss:
    def setup_method(self):
        rng = np.random.default_rng(7)
        self.za, self.zb = leaf(rng.standard_normal((6, 4))), leaf(rng.standard_normal((6, 4)))
        self.zabar = Tensor(rng.standard_normal((6, 4)))
        self.zbbar = Tensor(rng.standard_normal((6, 4)))
        self.g = random_predictor(4)

    def test_first_task_is_ssl_only(self):
        terms = cassle_total_loss("simclr", self.za, self.zb, None, None, self.g)
        assert terms.distill is None
        assert terms.total.item() == ssl_loss("simclr", self.za, self.zb).item()

    def test_additive(self):
        for method in ("simclr", "barlow"):
            terms = cassle_total_loss(method, self.za, self.zb, self.zabar, self.zbbar, self.g)
            s = ssl_loss(method, self.za, self.zb).item()
            fam = METHOD_FAMILY[method]
            d = (distill_loss(fam, self.za, self.zabar, self.g).item()
                 + distill_loss(fam, self.zb, self.zbbar, self.g).item())
            assert terms.ssl.item() == s and terms.distill.item() == d
            assert terms.total.item() == s + d

    def test_swap_changes_asymmetric_inputs(self):
        plain = cassle_total_loss("simclr", self.za, self.zb, self.zabar, self.zbbar, self.g,
                                  AblationFlags()).total.item()
        swapped = cassle_total_loss("simclr", self.za, self.zb, self.zabar, self.zbbar, self.g,
                                    AblationFlags(swap_views=True)).total.item()
        assert plain != swapped
        fam = "contrastive"
        expected = (ssl_loss("simclr", self.za, self.zb).item()
                    + distill_loss(fam, self.za, self.zbbar, self.g).item()
                    + distill_loss(fam, self.zb, self.zabar, self.g).item())
        assert swapped == expected

    def test_without_predictor_uses_identity(self):
        terms = cassle_total_loss("barlow", self.za, self.zb, self.zabar, self.zbbar, None,
                                  AblationFlags(use_predictor=False))
        expected = (barlow_twins_loss(self.za, self.zabar).item()
                    + barlow_twins_loss(self.zb, self.zbbar).item())
        assert terms.distill.item() == expected

    def test_predictor_required(self):
        with pytest.raises(ConfigError):
            cassle_total_loss("simclr", self.za, self.zb, self.zabar, self.zbbar, None)

    def test_frozen_inputs_get_no_gradient(self):
        zabar = Tensor(self.zabar.data, requires_grad=True)
        grads = backward(cassle_total_loss("simclr", self.za, self.zb, zabar, self.zbbar, self.g).total)
        assert zabar not in grads
        assert all(p in grads for p in self.g.parameters())

    def test_byol_symmetrized(self):
        rng = np.random.default_rng(8)
        pa, pb, ta, tb = (Tensor(rng.standard_normal((6, 4))) for _ in range(4))
        from cassle.losses import negative_cosine_loss

        got = ssl_loss("byol", self.za, self.zb, pred_a=pa, pred_b=pb, target_a=ta, target_b=tb).item()
        assert got == negative_cosine_loss(pa, tb).item() + negative_cosine_loss(pb, ta).item()

    def test_unknown_method(self):
        with pytest.raises(ConfigError):
            ssl_loss("moco", self.za, self.zb)
