"""Coefficient fitting: Adam, the sharpness-aware step, objectives, logs."""

import hashlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mergelab.adaptive import (
    AdamState,
    SamConfig,
    TrainLog,
    TrainLogRecord,
    adam_step,
    adamerging_fit,
    entropy_loss,
    fit_coefficients,
    kd_loss,
    sam_ascent,
    samerging_fit,
    teacher_distributions,
)
from mergelab.nn import Batch, LayerSpec, ParamSet, forward, loss_and_grad, softmax
from mergelab.task_vectors import MergeCoefficients, grad_wrt_lambda, merge_params

from . import oracles


def random_params(rng, dims, scale=1.0):
    ws, bs, acts = oracles.random_net(rng, dims, scale=scale)
    specs = tuple(
        LayerSpec(dims[i], dims[i + 1], acts[i]) for i in range(len(dims) - 1)
    )
    return ParamSet(ws, bs), specs


def small_problem(seed=0, T=2, dims=(3, 4, 3), n=5):
    """theta_0, taus, specs, teachers, calibration batches for fit tests."""
    rng = np.random.default_rng(seed)
    theta_0, specs = random_params(rng, dims, scale=0.6)
    taus = [random_params(rng, dims, scale=0.3)[0] for _ in range(T)]
    teachers = [theta_0 + tau for tau in taus]
    batches = [Batch(rng.standard_normal((n, dims[0]))) for _ in range(T)]
    return theta_0, taus, specs, teachers, batches


class TestSamAscent:
    def test_hand_value(self):
        eps = sam_ascent(np.array([3.0, 4.0]), rho=0.07)
        np.testing.assert_allclose(eps, [0.042, 0.056], rtol=1e-15)

    def test_rho_zero_gives_zero(self):
        assert (sam_ascent(np.array([3.0, 4.0]), rho=0.0) == 0.0).all()

    def test_vanishing_gradient_guard(self):
        g = np.full(4, 1e-13)
        assert (sam_ascent(g, rho=0.1) == 0.0).all()

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            sam_ascent(np.array([np.nan]), rho=0.1)

    @settings(max_examples=100, deadline=None)
    @given(
        st.lists(st.floats(-100, 100), min_size=1, max_size=12),
        st.floats(1e-3, 1.0),
    )
    def test_norm_equals_rho_for_nonzero_gradients(self, vals, rho):
        g = np.array(vals)
        if np.sqrt(np.sum(g * g)) <= 1e-6:
            return
        eps = sam_ascent(g, rho)
        assert abs(np.linalg.norm(eps) - rho) < 1e-12
        # epsilon points along g.
        assert np.vdot(eps, g) >= 0


class TestAdamStep:
    @pytest.mark.parametrize("wd", [0.0, 0.01])
    def test_matches_scalar_recurrence(self, wd):
        rng = np.random.default_rng(0)
        g_seq = rng.standard_normal(30)
        want = oracles.adam_scalar_ref(g_seq, p0=0.5, lr=0.01, weight_decay=wd)
        p = np.array([0.5])
        state = AdamState.init_like(p, lr=0.01, weight_decay=wd)
        got = []
        for g in g_seq:
            p, state = adam_step(state, p, np.array([g]))
            got.append(p[0])
        np.testing.assert_allclose(got, want, rtol=1e-14, atol=0.0)
        assert state.step == 30

    def test_first_step_moves_by_lr_for_constant_gradient(self):
        # Bias correction makes m_hat = g and v_hat = g^2 at t=1, so the first
        # update is lr * g / (|g| + eps), about lr in magnitude.
        p = np.zeros(3)
        state = AdamState.init_like(p, lr=0.1)
        p, _ = adam_step(state, p, np.array([5.0, -5.0, 1e-4]))
        np.testing.assert_allclose(np.abs(p), 0.1, rtol=1e-3)
        assert p[0] < 0 < p[1]

    def test_list_form_matches_single_form(self):
        rng = np.random.default_rng(1)
        a0 = rng.standard_normal((2, 2))
        g = rng.standard_normal((2, 2))
        s1 = AdamState.init_like(a0)
        s2 = AdamState.init_like([a0.copy()])
        out1, _ = adam_step(s1, a0, g)
        out2, _ = adam_step(s2, [a0.copy()], [g])
        np.testing.assert_array_equal(out1, out2[0])

    def test_rejects_mismatched_shapes(self):
        p = np.zeros(2)
        state = AdamState.init_like(p)
        with pytest.raises(ValueError):
            adam_step(state, p, np.zeros(3))
        with pytest.raises(ValueError):
            adam_step(AdamState.init_like(np.zeros(3)), p, np.zeros(2))

    def test_decoupled_decay_applies_to_parameter_not_gradient(self):
        # With g = 0 throughout, decay shrinks p geometrically and the Adam
        # term stays 0.
        p = np.array([2.0])
        state = AdamState.init_like(p, lr=0.5, weight_decay=0.1)
        p, _ = adam_step(state, p, np.zeros(1))
        assert p[0] == pytest.approx(2.0 * (1 - 0.05), rel=1e-15)


class TestSamConfig:
    def test_defaults(self):
        cfg = SamConfig()
        assert cfg.rho == 0.07
        assert cfg.lr == 0.001
        assert cfg.weight_decay == 5e-4

    def test_rejects_negative_rho(self):
        with pytest.raises(ValueError):
            SamConfig(rho=-0.1)


class TestTrainLog:
    def rec(self, epoch, obj=1.0):
        return TrainLogRecord(epoch=epoch, objective=obj, lam_digest="d", grad_norm=0.5)

    def test_epochs_must_strictly_increase(self):
        log = TrainLog()
        log.append(self.rec(1))
        log.append(self.rec(2))
        with pytest.raises(ValueError):
            log.append(self.rec(2))

    def test_csv_layout_and_full_precision(self):
        log = TrainLog()
        log.append(TrainLogRecord(1, 1 / 3, "x", 0.1))
        text = log.to_csv()
        lines = text.splitlines()
        assert lines[0] == "schema_version,epoch,objective,grad_norm"
        assert lines[1] == f"trainlog-v1,1,{(1/3)!r},{0.1!r}"
        assert text.endswith("\n")

    def test_csv_path_writes_same_text(self, tmp_path):
        log = TrainLog()
        log.append(self.rec(1))
        path = tmp_path / "log.csv"
        text = log.to_csv(path)
        assert path.read_text(encoding="utf-8") == text

    def test_digest_tracks_content(self):
        a, b = TrainLog(), TrainLog()
        a.append(self.rec(1))
        b.append(self.rec(1))
        assert a.digest() == b.digest()
        b.append(self.rec(2, obj=2.0))
        assert a.digest() != b.digest()


class TestObjectives:
    def test_teacher_distributions_are_softmax_outputs(self):
        theta_0, taus, specs, teachers, batches = small_problem()
        probs = teacher_distributions(teachers, specs, batches)
        for t, (teacher, batch) in enumerate(zip(teachers, batches)):
            np.testing.assert_allclose(
                probs[t], softmax(forward(teacher, specs, batch.inputs)), rtol=1e-15
            )

    def test_teacher_batch_count_mismatch(self):
        theta_0, taus, specs, teachers, batches = small_problem()
        with pytest.raises(ValueError):
            teacher_distributions(teachers, specs, batches[:1])

    def test_kd_loss_matches_row_oracle(self):
        theta_0, taus, specs, teachers, batches = small_problem(seed=3)
        lam = MergeCoefficients.constant(0.2, len(taus), theta_0.n_groups)
        got = kd_loss(lam, theta_0, taus, specs, teachers, batches)

        student = merge_params(theta_0, taus, lam.values)
        want = 0.0
        for t, batch in enumerate(batches):
            p = softmax(forward(teachers[t], specs, batch.inputs))
            q = softmax(forward(student, specs, batch.inputs))
            rows = [oracles.kl_ref(p[i], q[i]) for i in range(len(batch))]
            want += np.mean(rows) / len(taus)
        assert got == pytest.approx(want, rel=1e-12)

    def test_entropy_loss_matches_row_oracle(self):
        theta_0, taus, specs, _, batches = small_problem(seed=4)
        lam = MergeCoefficients.constant(0.1, len(taus), theta_0.n_groups)
        got = entropy_loss(lam, theta_0, taus, specs, batches)
        student = merge_params(theta_0, taus, lam.values)
        want = 0.0
        for t, batch in enumerate(batches):
            q = softmax(forward(student, specs, batch.inputs))
            rows = [oracles.entropy_ref(q[i]) for i in range(len(batch))]
            want += np.mean(rows) / len(taus)
        assert got == pytest.approx(want, rel=1e-12)

    def test_alpha_weights_tasks(self):
        theta_0, taus, specs, teachers, batches = small_problem(seed=5)
        lam = MergeCoefficients.zeros(len(taus), theta_0.n_groups)
        only_first = kd_loss(
            lam, theta_0, taus, specs, teachers, batches, alpha=np.array([1.0, 0.0])
        )
        student = merge_params(theta_0, taus, lam.values)
        p = softmax(forward(teachers[0], specs, batches[0].inputs))
        q = softmax(forward(student, specs, batches[0].inputs))
        want = np.mean([oracles.kl_ref(p[i], q[i]) for i in range(len(batches[0]))])
        assert only_first == pytest.approx(want, rel=1e-12)

    def test_alpha_validation(self):
        theta_0, taus, specs, teachers, batches = small_problem()
        lam = MergeCoefficients.zeros(2, theta_0.n_groups)
        for bad in (np.array([0.5]), np.array([0.7, 0.7]), np.array([-0.2, 1.2])):
            with pytest.raises(ValueError):
                kd_loss(lam, theta_0, taus, specs, teachers, batches, alpha=bad)


def local_adam_fit(theta_0, taus, specs, batches, objective, teachers, lam_init,
                   epochs, lr=0.001, beta1=0.9, beta2=0.99, eps=1e-8):
    """Plain-Adam coefficient fit rebuilt from public pieces, no SAM branch."""
    T, L = len(taus), theta_0.n_groups
    alpha = np.full(T, 1.0 / T)
    probs = (
        teacher_distributions(teachers, specs, batches)
        if objective == "kl"
        else [None] * T
    )
    lam = np.full((T, L), float(lam_init))
    m = np.zeros_like(lam)
    v = np.zeros_like(lam)
    digests = []
    for step in range(1, epochs + 1):
        student = merge_params(theta_0, taus, lam)
        grad_theta = theta_0.zeros_like()
        for t, batch in enumerate(batches):
            _, grad_t = loss_and_grad(
                student, specs, batch, objective, teacher_probs=probs[t]
            )
            grad_theta = grad_theta + grad_t * alpha[t]
        g = grad_wrt_lambda(theta_0, taus, MergeCoefficients(lam), grad_theta)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        m_hat = m / (1.0 - beta1**step)
        v_hat = v / (1.0 - beta2**step)
        lam = lam * 1.0 - lr * m_hat / (np.sqrt(v_hat) + eps)
        digests.append(hashlib.sha256(np.ascontiguousarray(lam).tobytes()).hexdigest())
    return lam, digests


class TestFitCoefficients:
    def test_zero_epochs_returns_initialization(self):
        theta_0, taus, specs, teachers, batches = small_problem()
        coeffs, log = fit_coefficients(
            theta_0, taus, specs, batches, "kl", teachers=teachers, lam_init=0.3,
            epochs=0,
        )
        assert (coeffs.values == 0.3).all()
        assert log.records == []

    def test_rho_zero_equals_plain_adam_trajectory(self):
        # With rho = 0 the ascent step is exactly zero, so every iterate must
        # match a plain Adam loop bit for bit.
        theta_0, taus, specs, teachers, batches = small_problem(seed=7)
        coeffs, log = fit_coefficients(
            theta_0, taus, specs, batches, "kl", teachers=teachers, rho=0.0,
            lam_init=0.0, epochs=25,
        )
        want, digests = local_adam_fit(
            theta_0, taus, specs, batches, "kl", teachers, 0.0, 25
        )
        assert np.array_equal(coeffs.values, want)
        assert [r.lam_digest for r in log.records] == digests

    def test_rho_changes_the_trajectory(self):
        theta_0, taus, specs, teachers, batches = small_problem(seed=8)
        kw = dict(teachers=teachers, lam_init=0.0, epochs=10)
        flat, _ = fit_coefficients(theta_0, taus, specs, batches, "kl", rho=0.07, **kw)
        plain, _ = fit_coefficients(theta_0, taus, specs, batches, "kl", rho=0.0, **kw)
        assert not np.array_equal(flat.values, plain.values)

    def test_fit_is_deterministic(self):
        theta_0, taus, specs, teachers, batches = small_problem(seed=9)
        out1 = fit_coefficients(
            theta_0, taus, specs, batches, "kl", teachers=teachers, rho=0.07, epochs=8
        )
        out2 = fit_coefficients(
            theta_0, taus, specs, batches, "kl", teachers=teachers, rho=0.07, epochs=8
        )
        assert np.array_equal(out1[0].values, out2[0].values)
        assert out1[1].digest() == out2[1].digest()

    def test_objective_decreases_on_average(self):
        theta_0, taus, specs, teachers, batches = small_problem(seed=10)
        _, log = fit_coefficients(
            theta_0, taus, specs, batches, "kl", teachers=teachers, rho=0.07,
            epochs=60, weight_decay=5e-4,
        )
        first = np.mean([r.objective for r in log.records[:5]])
        last = np.mean([r.objective for r in log.records[-5:]])
        assert last < first

    def test_first_record_is_objective_at_init_with_penalty(self):
        theta_0, taus, specs, _, batches = small_problem(seed=11)
        T, L = len(taus), theta_0.n_groups
        omega = 0.5
        _, log = fit_coefficients(
            theta_0, taus, specs, batches, "entropy", lam_init=0.3, epochs=1,
            omega=omega,
        )
        base = entropy_loss(
            MergeCoefficients.constant(0.3, T, L), theta_0, taus, specs, batches
        )
        assert log.records[0].objective == pytest.approx(
            base + omega * T * L * 0.09, rel=1e-12
        )

    def test_omega_pulls_coefficients_toward_zero(self):
        theta_0, taus, specs, teachers, batches = small_problem(seed=12)
        kw = dict(teachers=teachers, lam_init=0.3, epochs=40)
        loose, _ = fit_coefficients(theta_0, taus, specs, batches, "kl", omega=0.0, **kw)
        tight, _ = fit_coefficients(theta_0, taus, specs, batches, "kl", omega=50.0, **kw)
        assert np.linalg.norm(tight.values) < np.linalg.norm(loose.values)

    def test_tie_groups_broadcasts_one_coefficient_per_task(self):
        theta_0, taus, specs, teachers, batches = small_problem(seed=13)
        coeffs, _ = fit_coefficients(
            theta_0, taus, specs, batches, "kl", teachers=teachers, epochs=12,
            tie_groups=True,
        )
        assert coeffs.values.shape == (len(taus), theta_0.n_groups)
        for row in coeffs.values:
            assert (row == row[0]).all()

    def test_tie_groups_rejects_varying_initialization(self):
        theta_0, taus, specs, teachers, batches = small_problem()
        init = np.zeros((2, theta_0.n_groups))
        init[0, 1] = 0.2
        with pytest.raises(ValueError):
            fit_coefficients(
                theta_0, taus, specs, batches, "kl", teachers=teachers,
                lam_init=init, epochs=1, tie_groups=True,
            )

    def test_matrix_initialization_is_used_verbatim(self):
        theta_0, taus, specs, teachers, batches = small_problem(seed=14)
        init = np.random.default_rng(0).uniform(0, 0.4, (2, theta_0.n_groups))
        coeffs, _ = fit_coefficients(
            theta_0, taus, specs, batches, "kl", teachers=teachers,
            lam_init=init, epochs=0,
        )
        np.testing.assert_array_equal(coeffs.values, init)

    def test_digest_matches_final_coefficients(self):
        theta_0, taus, specs, teachers, batches = small_problem(seed=15)
        coeffs, log = fit_coefficients(
            theta_0, taus, specs, batches, "kl", teachers=teachers, epochs=6
        )
        want = hashlib.sha256(
            np.ascontiguousarray(coeffs.values).tobytes()
        ).hexdigest()
        assert log.records[-1].lam_digest == want

    def test_input_validation(self):
        theta_0, taus, specs, teachers, batches = small_problem()
        with pytest.raises(ValueError):
            fit_coefficients(theta_0, taus, specs, batches, "hinge")
        with pytest.raises(ValueError):
            fit_coefficients(theta_0, taus, specs, batches, "kl")  # no teachers
        with pytest.raises(ValueError):
            fit_coefficients(
                theta_0, taus, specs, batches[:1], "kl", teachers=teachers
            )
        with pytest.raises(ValueError):
            fit_coefficients(
                theta_0, taus, specs, batches, "kl", teachers=teachers, epochs=-1
            )


class TestWrappers:
    def test_samerging_fit_wires_distillation_and_sam(self):
        theta_0, taus, specs, teachers, batches = small_problem(seed=16)
        got, _ = samerging_fit(theta_0, taus, specs, teachers, batches, epochs=10)
        want, _ = fit_coefficients(
            theta_0, taus, specs, batches, "kl", teachers=teachers, rho=0.07,
            lam_init=0.0, epochs=10, weight_decay=5e-4,
        )
        assert np.array_equal(got.values, want.values)

    def test_adamerging_fit_wires_entropy_and_plain_adam(self):
        theta_0, taus, specs, _, batches = small_problem(seed=17)
        got, _ = adamerging_fit(theta_0, taus, specs, batches, epochs=10)
        want, _ = fit_coefficients(
            theta_0, taus, specs, batches, "entropy", rho=0.0, lam_init=0.3,
            epochs=10, weight_decay=0.0,
        )
        assert np.array_equal(got.values, want.values)

    def test_wrapper_defaults_differ_in_initialization(self):
        theta_0, taus, specs, teachers, batches = small_problem(seed=18)
        sam, _ = samerging_fit(theta_0, taus, specs, teachers, batches, epochs=0)
        ada, _ = adamerging_fit(theta_0, taus, specs, batches, epochs=0)
        assert (sam.values == 0.0).all()
        assert (ada.values == 0.3).all()
