import numpy as np
import pytest

from dgnet_lab import model as M
from dgnet_lab import speckle, trainer
from dgnet_lab.rng import Rng
from dgnet_lab.tensor import Tensor

SMALL_MODEL = M.ModelConfig(input_size=32, channels=(4, 8, 8, 16), latent_dim=6)


def tiny_dataset(n=4, size=32, seed=0):
    cfg = speckle.SceneConfig(size=size, seed=seed)
    master = Rng(seed)
    out = []
    for i in range(n):
        s = speckle.synth_scene(cfg, rng=master.split(("scene", i)))
        scale = np.percentile(s.image, 99.9)
        out.append((np.clip(s.image / scale, 0, 1).astype(np.float32), s.mask))
    return out


class TestTrainConfig:
    def test_defaults(self):
        cfg = trainer.TrainConfig()
        assert cfg.epochs == 160
        assert cfg.batch_size == 1
        assert cfg.learning_rate == pytest.approx(1e-4)
        assert cfg.beta == pytest.approx(1.0)

    @pytest.mark.parametrize("kwargs", [
        dict(epochs=0),
        dict(batch_size=0),
        dict(learning_rate=0.0),
        dict(beta=-0.5),
        dict(family="laplace"),
    ])
    def test_validation(self, kwargs):
        with pytest.raises(ValueError):
            trainer.TrainConfig(**kwargs)


class TestAdam:
    def test_zero_gradients_leave_params_unchanged(self):
        p = Tensor(np.array([1.0, -2.0, 3.0], np.float32), requires_grad=True)
        p.grad = np.zeros(3, np.float32)
        opt = trainer.Adam({"p": p})
        before = p.data.copy()
        opt.step(0.1)
        np.testing.assert_array_equal(p.data, before)

    def test_first_step_magnitude_is_about_lr(self):
        # bias correction makes m_hat / sqrt(v_hat) ~ sign(g) on step one
        p = Tensor(np.array([0.0, 0.0], np.float32), requires_grad=True)
        p.grad = np.array([3.0, -0.004], np.float32)
        opt = trainer.Adam({"p": p})
        opt.step(0.01)
        np.testing.assert_allclose(np.abs(p.data), 0.01, rtol=1e-3)
        assert p.data[0] < 0 and p.data[1] > 0

    def test_converges_on_quadratic(self):
        p = Tensor(np.array([1.0], np.float32), requires_grad=True)
        opt = trainer.Adam({"p": p})
        for _ in range(100):
            p.grad = 2.0 * p.data
            opt.step(0.1)
        assert abs(float(p.data[0])) < 0.1

    def test_state_matches_reference_loop(self):
        # hand-rolled Adam with explicit m_hat / v_hat, against our folded form
        rng = Rng(21)
        x = rng.normal((5,)).astype(np.float32)
        p = Tensor(x.copy(), requires_grad=True)
        opt = trainer.Adam({"p": p})
        ref = x.astype(np.float64).copy()
        m = np.zeros(5)
        v = np.zeros(5)
        b1, b2, eps = 0.9, 0.999, 1e-8
        for t in range(1, 21):
            g = np.sin(ref) + 0.1 * ref
            p.grad = g.astype(np.float32)
            opt.step(0.01)
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            m_hat = m / (1 - b1 ** t)
            v_hat = v / (1 - b2 ** t)
            ref -= 0.01 * m_hat / (np.sqrt(v_hat) + eps)
            np.testing.assert_allclose(p.data, ref.astype(np.float32), atol=1e-5)


class TestTrain:
    def test_returns_one_record_per_epoch(self):
        data = tiny_dataset()
        model, recs = trainer.train(data, SMALL_MODEL,
                                    trainer.TrainConfig(epochs=3, seed=0))
        assert len(recs) == 3
        assert [r.epoch for r in recs] == [0, 1, 2]
        for r in recs:
            assert np.isfinite(r.loss) and r.kl >= 0.0

    def test_loss_is_nll_plus_beta_kl(self):
        data = tiny_dataset()
        beta = 0.25
        _, recs = trainer.train(data, SMALL_MODEL,
                                trainer.TrainConfig(epochs=2, seed=0, beta=beta))
        for r in recs:
            assert r.loss == pytest.approx(r.nll + beta * r.kl, rel=1e-5)

    def test_deterministic_given_seed(self):
        data = tiny_dataset()
        cfg = trainer.TrainConfig(epochs=2, seed=7)
        m1, r1 = trainer.train(data, SMALL_MODEL, cfg)
        m2, r2 = trainer.train(data, SMALL_MODEL, cfg)
        for (n1, p1), (n2, p2) in zip(m1.parameters().items(),
                                      m2.parameters().items()):
            assert n1 == n2
            np.testing.assert_array_equal(p1.data, p2.data)
        assert [(r.loss, r.kl, r.nll) for r in r1] == \
               [(r.loss, r.kl, r.nll) for r in r2]

    def test_alternating_mode_runs_and_differs_from_joint(self):
        data = tiny_dataset()
        _, joint = trainer.train(data, SMALL_MODEL,
                                 trainer.TrainConfig(epochs=2, seed=0))
        _, alt = trainer.train(data, SMALL_MODEL,
                               trainer.TrainConfig(epochs=2, seed=0,
                                                   alternating=True))
        assert np.isfinite(alt[-1].loss)
        assert alt[-1].loss != joint[-1].loss

    def test_loss_decreases_on_tiny_problem(self):
        data = tiny_dataset(n=8)
        _, recs = trainer.train(data, SMALL_MODEL,
                                trainer.TrainConfig(epochs=10, seed=0,
                                                    learning_rate=1e-3))
        assert recs[-1].loss < recs[0].loss

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError):
            trainer.train([], SMALL_MODEL, trainer.TrainConfig(epochs=1))


class TestSegment:
    def test_probabilities_in_unit_interval_and_mask_binary(self):
        data = tiny_dataset()
        model, _ = trainer.train(data, SMALL_MODEL,
                                 trainer.TrainConfig(epochs=1, seed=0))
        prob, mask = trainer.segment(model, data[0][0])
        assert prob.shape == (32, 32) and mask.shape == (32, 32)
        assert prob.min() >= 0.0 and prob.max() <= 1.0
        assert set(np.unique(mask)) <= {0, 1}

    def test_threshold_semantics(self):
        data = tiny_dataset()
        model, _ = trainer.train(data, SMALL_MODEL,
                                 trainer.TrainConfig(epochs=1, seed=0))
        prob, mask = trainer.segment(model, data[0][0], threshold=0.5)
        np.testing.assert_array_equal(mask, (prob >= 0.5).astype(np.uint8))
        _, all_oil = trainer.segment(model, data[0][0], threshold=0.0)
        assert all_oil.all()

    def test_deterministic(self):
        data = tiny_dataset()
        model, _ = trainer.train(data, SMALL_MODEL,
                                 trainer.TrainConfig(epochs=1, seed=0))
        p1, m1 = trainer.segment(model, data[0][0])
        p2, m2 = trainer.segment(model, data[0][0])
        np.testing.assert_array_equal(p1, p2)
        np.testing.assert_array_equal(m1, m2)


class TestCurveCsv:
    def test_format(self):
        recs = [trainer.EpochRecord(epoch=1, loss=2.5, kl=1.0, nll=1.5),
                trainer.EpochRecord(epoch=2, loss=2.0, kl=0.75, nll=1.25)]
        text = trainer.curve_csv_text(recs)
        lines = text.strip().split("\n")
        assert lines[0] == "epoch,loss,kl,nll"
        assert lines[1].startswith("1,2.5,1,1.5")
        assert len(lines) == 3
