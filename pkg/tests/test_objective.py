"""Distillation objective: teacher target production, view-pair loss,
spread regularizer, head plumbing."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import smearssl.tensor as T
from oracles import finite_diff_grad, naive_sinkhorn, rel_err
from smearssl.errors import ParameterError
from smearssl.objective import (
    CenteringState,
    SslConfig,
    dino_loss,
    ema_targets,
    head_forward,
    init_head_params,
    koleo_loss,
    mean_assignment_entropy,
    renormalize_prototypes,
    sinkhorn_targets,
    teacher_targets_multiview,
    total_loss,
)

SMALL = SslConfig(head_hidden=16, bottleneck=8, num_prototypes=8)


class TestSinkhorn:
    def test_equal_logits_exactly_uniform(self):
        for iters in (1, 3, 10):
            q = sinkhorn_targets(np.full((4, 8), 3.7), temp=0.5, iters=iters)
            np.testing.assert_array_equal(q, np.full((4, 8), 1.0 / 8))

    def test_two_by_two_near_identity(self):
        logits = np.array([[10.0, 0.0], [0.0, 10.0]])
        q = sinkhorn_targets(logits, temp=1.0, iters=3)
        np.testing.assert_allclose(q, np.eye(2), atol=1e-4)
        np.testing.assert_allclose(q.sum(axis=0), [1.0, 1.0], atol=1e-9)

    def test_matches_naive_oracle(self, rng):
        logits = rng.normal(size=(6, 5))
        for iters in (1, 2, 3, 7):
            q = sinkhorn_targets(logits, temp=0.7, iters=iters)
            np.testing.assert_allclose(q, naive_sinkhorn(logits, 0.7, iters),
                                       atol=1e-12)

    def test_shift_invariance(self, rng):
        logits = rng.normal(size=(5, 6))
        a = sinkhorn_targets(logits, 0.3, 3)
        b = sinkhorn_targets(logits + 11.25, 0.3, 3)
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_rows_are_distributions(self, rng):
        q = sinkhorn_targets(rng.normal(size=(9, 13)) * 4.0, 0.1, 3)
        np.testing.assert_allclose(q.sum(axis=1), np.ones(9), atol=1e-6)
        assert np.all(q >= 0)

    def test_columns_converge_to_balanced(self, rng):
        b, k = 12, 6
        q = sinkhorn_targets(rng.normal(size=(b, k)), temp=1.0, iters=50)
        np.testing.assert_allclose(q.sum(axis=0), np.full(k, b / k), atol=1e-3)

    def test_large_logits_no_overflow(self):
        q = sinkhorn_targets(np.array([[900.0, -900.0], [880.0, -910.0]]), 1.0, 3)
        assert np.all(np.isfinite(q))

    def test_rejects_zero_iters(self):
        with pytest.raises(ParameterError):
            sinkhorn_targets(np.zeros((2, 2)), 1.0, 0)


class TestEmaCentering:
    def test_zero_center_equal_logits_uniform(self):
        p = ema_targets(np.full((3, 5), 2.0), np.zeros(5), temp=0.04)
        np.testing.assert_allclose(p, np.full((3, 5), 0.2), atol=1e-12)

    def test_two_prototype_example(self):
        p = ema_targets(np.array([[0.0, np.log(2.0)]]), np.zeros(2), temp=1.0)
        np.testing.assert_allclose(p[0], [1.0 / 3.0, 2.0 / 3.0], atol=1e-12)

    def test_center_update_is_convex(self):
        st8 = CenteringState.fresh(3, momentum=0.9)
        logits = np.array([[3.0, 0.0, -3.0], [1.0, 2.0, 3.0]])
        mu = logits.mean(axis=0)
        st8.update(logits)
        np.testing.assert_allclose(st8.center, 0.1 * mu, atol=1e-15)
        # second update stays between old center and the new batch mean
        old = st8.center.copy()
        logits2 = np.array([[5.0, 5.0, 5.0], [-1.0, 0.0, 1.0]])
        mu2 = logits2.mean(axis=0)
        st8.update(logits2)
        lo = np.minimum(old, mu2) - 1e-12
        hi = np.maximum(old, mu2) + 1e-12
        assert np.all(st8.center >= lo) and np.all(st8.center <= hi)

    def test_rows_are_distributions(self, rng):
        p = ema_targets(rng.normal(size=(7, 11)), rng.normal(size=11), 0.04)
        np.testing.assert_allclose(p.sum(axis=1), np.ones(7), atol=1e-9)
        assert np.all(p >= 0)

    def test_multiview_updates_center_once(self, rng):
        cfg = SslConfig(head_hidden=8, bottleneck=4, num_prototypes=4,
                        centering="ema")
        state = CenteringState.fresh(4, cfg.center_momentum)
        views = [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))]
        out = teacher_targets_multiview(views, cfg, state)
        assert len(out) == 2
        expected = 0.1 * np.concatenate(views).mean(axis=0)
        np.testing.assert_allclose(state.center, expected, atol=1e-12)
        # both views were produced with the pre-update (zero) center
        np.testing.assert_allclose(
            out[0], ema_targets(views[0], np.zeros(4), cfg.teacher_temp))

    def test_multiview_requires_state(self):
        cfg = SslConfig(head_hidden=8, bottleneck=4, num_prototypes=4,
                        centering="ema")
        with pytest.raises(ParameterError):
            teacher_targets_multiview([np.zeros((2, 4))], cfg, None)


class TestDinoLoss:
    def test_uniform_student_one_hot_teacher_ln4(self):
        b, k = 3, 4
        onehot = np.zeros((b, k))
        onehot[np.arange(b), [0, 2, 1]] = 1.0
        logits = [T.Tensor(np.zeros((b, k))), T.Tensor(np.zeros((b, k)))]
        loss = dino_loss(logits, [onehot, onehot], student_temp=0.1)
        np.testing.assert_allclose(loss.item(), np.log(4.0), atol=1e-9)

    def test_matched_distributions_give_entropy(self):
        p = np.array([[0.2, 0.3, 0.5]])
        temp = 0.1
        logits = T.Tensor(temp * np.log(p))
        loss = dino_loss([logits, logits], [p, p], student_temp=temp)
        entropy = -(p * np.log(p)).sum()
        np.testing.assert_allclose(loss.item(), entropy, atol=1e-9)

    def test_two_views_average_two_ordered_pairs(self, rng):
        b, k = 2, 5
        s = [T.Tensor(rng.normal(size=(b, k))), T.Tensor(rng.normal(size=(b, k)))]
        t = [sinkhorn_targets(rng.normal(size=(b, k)), 1.0, 3) for _ in range(2)]
        loss = dino_loss(s, t, student_temp=0.2)

        def ce(tgt, slog):
            lp = np.log(np.exp(slog / 0.2)
                        / np.exp(slog / 0.2).sum(axis=1, keepdims=True))
            return float(-(tgt * lp).sum(axis=1).mean())

        want = 0.5 * (ce(t[0], s[1].data) + ce(t[1], s[0].data))
        np.testing.assert_allclose(loss.item(), want, atol=1e-8)

    def test_single_view_rejected(self):
        with pytest.raises(ParameterError):
            dino_loss([T.Tensor(np.zeros((2, 3)))], [np.zeros((2, 3))], 0.1)

    def test_nonnegative(self, rng):
        for _ in range(10):
            s = [T.Tensor(rng.normal(size=(3, 6)) * 3) for _ in range(2)]
            t = [sinkhorn_targets(rng.normal(size=(3, 6)), 0.5, 3)
                 for _ in range(2)]
            assert dino_loss(s, t, 0.1).item() >= 0.0

    def test_gradient_against_finite_differences(self, rng):
        b, k = 3, 4
        t = [sinkhorn_targets(rng.normal(size=(b, k)), 1.0, 3) for _ in range(2)]
        s = [T.Tensor(rng.normal(size=(b, k)), requires_grad=True)
             for _ in range(2)]

        def fn(ts):
            return dino_loss(list(ts), t, student_temp=0.3)

        with T.Tape() as tape:
            tape.backward(fn(s))
        analytic = [x.grad.copy() for x in s]
        numeric = finite_diff_grad(fn, s)
        for a, n in zip(analytic, numeric):
            assert rel_err(a, n) < 1e-6


class TestKoleo:
    def test_antipodal_pair(self):
        z = T.Tensor(np.array([[1.0, 0.0], [-1.0, 0.0]]))
        loss = koleo_loss(z, eps=0.0)
        np.testing.assert_allclose(loss.item(), -np.log(2.0), atol=1e-6)

    def test_duplicate_points_finite_and_large(self):
        z = T.Tensor(np.array([[0.6, 0.8], [0.6, 0.8], [0.0, 1.0]]))
        loss = koleo_loss(z, eps=1e-8)
        assert np.isfinite(loss.item())
        assert loss.item() > 5.0

    def test_scale_invariance_power_of_two_bit_exact(self, rng):
        z = rng.normal(size=(6, 5))
        a = koleo_loss(T.Tensor(z), eps=1e-8).item()
        b = koleo_loss(T.Tensor(4.0 * z), eps=1e-8).item()
        assert a == b

    def test_scale_invariance_factor_five(self, rng):
        z = rng.normal(size=(6, 5))
        a = koleo_loss(T.Tensor(z), eps=1e-8).item()
        b = koleo_loss(T.Tensor(5.0 * z), eps=1e-8).item()
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_rotation_invariance(self, rng):
        z = rng.normal(size=(5, 4))
        q, _ = np.linalg.qr(rng.normal(size=(4, 4)))
        a = koleo_loss(T.Tensor(z), eps=1e-8).item()
        b = koleo_loss(T.Tensor(z @ q), eps=1e-8).item()
        np.testing.assert_allclose(a, b, atol=1e-9)

    def test_batch_of_one_rejected(self):
        with pytest.raises(ParameterError):
            koleo_loss(T.Tensor(np.ones((1, 3))))

    def test_gradient_spreads_points(self, rng):
        # two nearby points: the gradient should push them apart
        z = T.Tensor(np.array([[1.0, 0.01], [1.0, -0.01]]),
                     requires_grad=True)
        with T.Tape() as tape:
            tape.backward(koleo_loss(z, eps=1e-8))
        assert z.grad is not None
        # loss falls when the angular gap grows: grads on the second
        # coordinate have opposite signs
        assert z.grad[0, 1] * z.grad[1, 1] < 0


class TestTotalLoss:
    def _setup(self, rng, b=4, k=6):
        t = [sinkhorn_targets(rng.normal(size=(b, k)), 1.0, 3) for _ in range(2)]
        s = [T.Tensor(rng.normal(size=(b, k)), requires_grad=True)
             for _ in range(2)]
        z = [T.Tensor(rng.normal(size=(b, 5)), requires_grad=True)
             for _ in range(2)]
        return s, t, z

    def test_disabled_koleo_equals_dino_exactly(self, rng):
        s, t, z = self._setup(rng)
        cfg = SslConfig(head_hidden=8, bottleneck=4, num_prototypes=6,
                        koleo_enabled=False)
        total = total_loss(s, t, cfg, student_z=z)
        plain = dino_loss(s, t, cfg.student_temp)
        assert total.item() == plain.item()

    def test_zero_weight_matches_disabled(self, rng):
        s, t, z = self._setup(rng)
        off = SslConfig(head_hidden=8, bottleneck=4, num_prototypes=6,
                        koleo_enabled=False)
        on0 = SslConfig(head_hidden=8, bottleneck=4, num_prototypes=6,
                        koleo_enabled=True, koleo_weight=0.0)

        with T.Tape() as tape:
            tape.backward(total_loss(s, t, off, student_z=z))
        g_off = [x.grad.copy() for x in s]
        for x in s + z:
            x.grad = None

        with T.Tape() as tape:
            tape.backward(total_loss(s, t, on0, student_z=z))
        g_on = [x.grad.copy() for x in s]

        for a, b in zip(g_off, g_on):
            assert np.max(np.abs(a - b)) < 1e-7

    def test_enabled_koleo_changes_value(self, rng):
        s, t, z = self._setup(rng)
        off = SslConfig(head_hidden=8, bottleneck=4, num_prototypes=6)
        on = SslConfig(head_hidden=8, bottleneck=4, num_prototypes=6,
                       koleo_enabled=True, koleo_weight=0.1)
        a = total_loss(s, t, off, student_z=z).item()
        b = total_loss(s, t, on, student_z=z).item()
        assert a != b

    def test_enabled_without_bottlenecks_rejected(self, rng):
        s, t, _ = self._setup(rng)
        cfg = SslConfig(head_hidden=8, bottleneck=4, num_prototypes=6,
                        koleo_enabled=True)
        with pytest.raises(ParameterError):
            total_loss(s, t, cfg, student_z=None)

    def test_full_head_finite_difference(self, rng):
        # ten sampled parameters of a live head, 64-bit, teacher held fixed
        cfg = SslConfig(head_hidden=8, bottleneck=4, num_prototypes=6,
                        koleo_enabled=True, koleo_weight=0.1)
        params = {k: T.Tensor(v.data.astype(np.float64), requires_grad=True)
                  for k, v in init_head_params(cfg, 8, rng).items()}
        emb = [rng.normal(size=(3, 8)), rng.normal(size=(3, 8))]
        with np.errstate(all="ignore"):
            frozen_logits = [head_forward(params, T.Tensor(e))[0].data
                             for e in emb]
        targets = [sinkhorn_targets(lg, cfg.teacher_temp, cfg.sinkhorn_iters)
                   for lg in frozen_logits]

        def fn(ts):
            logits, zs = [], []
            for e in emb:
                lg, z = head_forward(params, T.Tensor(e))
                logits.append(lg)
                zs.append(z)
            return total_loss(logits, targets, cfg, student_z=zs)

        subset = [params["fc1.weight"], params["fc2.weight"],
                  params["fc3.weight"], params["prototypes"],
                  params["fc1.bias"]]
        with T.Tape() as tape:
            tape.backward(fn(subset))
        numeric = finite_diff_grad(fn, subset, max_coords=2, seed=5)
        worst = 0.0
        for p, n in zip(subset, numeric):
            flat_a = p.grad.reshape(-1)
            flat_n = n.reshape(-1)
            for i in np.nonzero(flat_n != 0.0)[0]:
                worst = max(worst,
                            abs(flat_a[i] - flat_n[i]) / max(1.0, abs(flat_n[i])))
        assert worst < 1e-3


class TestHead:
    def test_forward_shapes(self, rng):
        params = init_head_params(SMALL, 12, rng)
        logits, z = head_forward(params, T.Tensor(rng.normal(size=(5, 12))))
        assert logits.shape == (5, 8)
        assert z.shape == (5, 8)

    def test_prototype_rows_unit_norm_after_renorm(self, rng):
        params = init_head_params(SMALL, 12, rng)
        params["prototypes"].data += rng.normal(size=(8, 8)).astype(np.float32)
        renormalize_prototypes(params)
        norms = np.linalg.norm(params["prototypes"].data, axis=1)
        np.testing.assert_allclose(norms, np.ones(8), atol=1e-6)

    def test_logits_bounded_by_cauchy_schwarz(self, rng):
        # unit prototypes against unit bottleneck rows: |logit| <= 1
        params = init_head_params(SMALL, 12, rng)
        logits, _ = head_forward(params, T.Tensor(rng.normal(size=(9, 12)) * 10))
        assert np.max(np.abs(logits.data)) <= 1.0 + 1e-5


class TestConfigValidation:
    def test_bad_centering_mode(self):
        with pytest.raises(ParameterError):
            SslConfig(centering="adaptive")

    def test_nonpositive_temperature(self):
        with pytest.raises(ParameterError):
            SslConfig(teacher_temp=0.0)

    def test_momentum_range(self):
        with pytest.raises(ParameterError):
            SslConfig(center_momentum=1.0)

    def test_entropy_extremes(self):
        k = 16
        uniform = np.full((4, k), 1.0 / k)
        assert abs(mean_assignment_entropy(uniform) - np.log(k)) < 1e-12
        onehot = np.zeros((4, k))
        onehot[:, 3] = 1.0
        assert mean_assignment_entropy(onehot) == 0.0


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 10), st.integers(2, 12), st.integers(1, 8),
       st.integers(0, 2**31 - 1))
def test_sinkhorn_rows_always_distributions(b, k, iters, seed):
    g = np.random.Generator(np.random.PCG64(seed))
    q = sinkhorn_targets(g.normal(size=(b, k)) * 3.0, temp=0.5, iters=iters)
    assert np.all(q >= 0)
    np.testing.assert_allclose(q.sum(axis=1), np.ones(b), atol=1e-6)


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 8), st.integers(2, 10), st.integers(0, 2**31 - 1))
def test_ema_targets_valid_distributions(b, k, seed):
    g = np.random.Generator(np.random.PCG64(seed))
    p = ema_targets(g.normal(size=(b, k)) * 5, g.normal(size=k), temp=0.04)
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=1), np.ones(b), atol=1e-9)
