import numpy as np
import pytest

from aimkit.channels import softmax
from aimkit.gd import (
    GdConfig,
    GdDivergenceError,
    adam_step,
    averaged_gd,
    estimator_matrix,
    loss_and_grad,
    train_adam,
)
from aimkit.model import estimation_error, generate_dataset, sample_teacher


def make_problem(d=40, rho=0.5, alpha=0.3, beta=1.0, seed=0):
    teacher = sample_teacher(d, rho, seed)
    data = generate_dataset(teacher, softmax(beta, 2), alpha, 2, seed + 1)
    return teacher, data


class TestLossAndGrad:
    def test_zero_at_teacher(self):
        teacher, data = make_problem()
        loss, grad = loss_and_grad(teacher.W, data, 1.0)
        assert loss == pytest.approx(0.0, abs=1e-18)
        assert np.allclose(grad, 0.0, atol=1e-12)

    def test_matches_finite_differences(self, rng):
        teacher, data = make_problem(d=24, alpha=0.5, seed=3)
        W = rng.standard_normal((24, teacher.r))
        _, grad = loss_and_grad(W, data, 1.0)
        eps = 1e-6
        worst = 0.0
        coords = [
            (int(i), int(j))
            for i, j in zip(rng.integers(0, 24, 20), rng.integers(0, teacher.r, 20))
        ]
        for i, j in coords:
            Wp, Wm = W.copy(), W.copy()
            Wp[i, j] += eps
            Wm[i, j] -= eps
            lp, _ = loss_and_grad(Wp, data, 1.0)
            lm, _ = loss_and_grad(Wm, data, 1.0)
            fd = (lp - lm) / (2 * eps)
            worst = max(worst, abs(fd - grad[i, j]) / max(1.0, abs(grad[i, j])))
        assert worst < 1e-5

    def test_orthogonal_invariance(self, rng):
        teacher, data = make_problem(d=24, seed=5)
        W = rng.standard_normal((24, teacher.r))
        Q, _ = np.linalg.qr(rng.standard_normal((teacher.r, teacher.r)))
        l0, g0 = loss_and_grad(W, data, 1.0)
        l1, g1 = loss_and_grad(W @ Q, data, 1.0)
        assert l1 == pytest.approx(l0, rel=1e-10)
        assert np.allclose(g1, g0 @ Q, atol=1e-8)

    def test_divergence_error_carries_state(self):
        teacher, data = make_problem(d=16, seed=7)
        W = np.full((16, teacher.r), 1e200)
        with pytest.raises(GdDivergenceError) as exc:
            loss_and_grad(W, data, 1.0)
        assert exc.value.last_iterate is not None


class TestAdam:
    def test_quadratic_smoke(self):
        # 1-D quadratic f(w) = (w - 3)^2 reaches its minimum to 1e-6
        w = np.array(0.0)
        m = v = np.zeros(())
        for t in range(1, 2001):
            grad = 2 * (w - 3.0)
            w, m, v = adam_step(w, grad, m, v, t, lr=0.1)
            if abs(w - 3.0) < 1e-6:
                break
        assert abs(w - 3.0) < 1e-6
        assert t < 2000

    def test_determinism(self):
        teacher, data = make_problem(d=24, seed=9)
        cfg = GdConfig(r_student=teacher.r, epochs=40, seed=11)
        W1, h1 = train_adam(cfg, data)
        W2, h2 = train_adam(cfg, data)
        assert np.array_equal(W1, W2)
        assert h1 == h2

    def test_loss_mostly_decreasing(self):
        teacher, data = make_problem(d=40, alpha=0.35, seed=13)
        cfg = GdConfig(r_student=teacher.r, epochs=300, seed=15)
        _, hist = train_adam(cfg, data)
        drops = sum(1 for a, b in zip(hist, hist[1:]) if b <= a + 1e-12)
        assert drops / (len(hist) - 1) >= 0.95

    def test_above_threshold_training_recovers(self):
        # d=100, alpha=0.4 > 0.1875: a single run should land near the teacher
        teacher, data = make_problem(d=100, alpha=0.4, seed=17)
        cfg = GdConfig(r_student=teacher.r, epochs=800, seed=19)
        W, _ = train_adam(cfg, data)
        err = estimation_error(estimator_matrix(W), teacher.S)
        assert err < 0.1


class TestAveragedGd:
    def test_single_run_reduction(self):
        teacher, data = make_problem(d=24, seed=21)
        cfg = GdConfig(r_student=teacher.r, epochs=60, m_runs=1, seed=23)
        S_avg, mats, _ = averaged_gd(cfg, data, return_runs=True)
        assert len(mats) == 1
        assert np.allclose(S_avg, mats[0])

    def test_average_beats_singles(self):
        teacher, data = make_problem(d=60, alpha=0.3, seed=25)
        cfg = GdConfig(r_student=teacher.r, epochs=500, m_runs=4, seed=27)
        S_avg, mats, _ = averaged_gd(cfg, data, return_runs=True)
        errs = [estimation_error(M, teacher.S) for M in mats]
        agd = estimation_error(S_avg, teacher.S)
        assert agd <= np.mean(errs) + 1e-9

    def test_rejects_zero_runs(self):
        teacher, data = make_problem(d=16)
        with pytest.raises(ValueError):
            GdConfig(r_student=teacher.r, m_runs=0)
