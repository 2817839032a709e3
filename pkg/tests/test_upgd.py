from dataclasses import replace

import numpy as np
import pytest

from metrics import effective_channel, sinr_from_effective
from sim_device import TWO_PI, build_propagation, cascade_tensor
from system_config import desk_config
from upgd import (FIXED_STEP, Backtracking, FixedStep, StepSchedule, TrainRun, flop_estimate,
                  gen_dataset, grad_theta, loss, loss_and_grad, make_context, mean_final_loss, pgd,
                  refresh_power, schedule_grad, solve_phases, solver_curves, split_dataset, train_schedule,
                  upgd_forward)

def active_sinr(ctx, theta):
    S = effective_channel(ctx.H, cascade_tensor(ctx.prop, np.exp(1j * theta)))
    gamma = sinr_from_effective(S, ctx.Z, ctx.p, ctx.sigma2)
    return np.sort(gamma[ctx.Z == 1])

def test_gradient_matches_central_differences(tiny_cfg, tiny_prop):
    h = 1e-5
    rng = np.random.default_rng(99)
    checked = 0
    for seed in range(200):
        if checked == 50:
            break
        ctx = make_context(tiny_cfg, seed, tiny_prop)
        theta = rng.uniform(0, TWO_PI, (tiny_cfg.L, tiny_cfg.M))
        ordered = active_sinr(ctx, theta)
        # Skip near-ties so the worst link cannot switch inside the stencil
        if ordered[0] <= 0 or ordered[1] - ordered[0] < 1e-3 * ordered[1]:
            continue
        analytic = grad_theta(ctx, theta)
        if not np.any(analytic):
            continue
        checked += 1

        numeric = np.zeros_like(theta)
        for l in range(tiny_cfg.L):
            for m in range(tiny_cfg.M):
                up, down = theta.copy(), theta.copy()
                up[l, m] += h
                down[l, m] -= h
                numeric[l, m] = (loss(ctx, up)[0] - loss(ctx, down)[0]) / (2 * h)
        scale = max(np.max(np.abs(analytic)), np.finfo(float).tiny)
        assert np.max(np.abs(analytic - numeric)) <= 1e-6 * scale
    assert checked == 50

def test_loss_is_the_negative_worst_active_sinr(tiny_contexts):
    for ctx in tiny_contexts:
        theta = ctx.zero_phases()
        value, (k, l, n) = loss(ctx, theta)
        i = l * ctx.N + n
        assert ctx.Z[k, i] == 1
        assert -value == pytest.approx(active_sinr(ctx, theta)[0], rel=1e-9)

def test_backtracking_descent_is_monotone_and_makes_progress():
    cfg = desk_config()
    prop = build_propagation(cfg)
    for seed in range(20):
        ctx = make_context(cfg, seed, prop)
        trajectory = pgd(ctx, None, 10, Backtracking())
        losses = [trajectory.start_loss] + trajectory.losses
        assert all(b <= a for a, b in zip(losses, losses[1:]))
        assert all(eta >= 0 for eta in trajectory.steps)
        assert trajectory.losses[-1] < trajectory.start_loss

def test_desk_contexts_give_the_optimizer_a_signal():
    cfg = desk_config()
    prop = build_propagation(cfg)
    for seed in range(3):
        ctx = make_context(cfg, seed, prop)
        assert np.all(ctx.p[ctx.Z == 1] > 0)
        value, _, grad = loss_and_grad(ctx, ctx.zero_phases())
        assert value < 0
        assert np.any(grad != 0)
        assert pgd(ctx, None, 30, Backtracking()).losses[-1] < value

def test_fixed_step_pgd_and_constant_schedule_agree_exactly(tiny_contexts):
    ctx = tiny_contexts[0]
    trajectory = pgd(ctx, None, 6, FixedStep(0.15))
    theta, losses = upgd_forward(ctx, None, StepSchedule.constant(6, 0.15))
    assert trajectory.losses == losses
    assert np.array_equal(trajectory.theta, theta)

def test_iterates_stay_in_the_phase_range(tiny_contexts):
    theta = solve_phases(tiny_contexts[1], iterations=5)
    assert theta.shape == tiny_contexts[1].shape
    assert np.all(theta >= 0) and np.all(theta < TWO_PI)

def test_zero_iterations_return_the_start(tiny_contexts):
    ctx = tiny_contexts[0]
    start = np.full(ctx.shape, 1.0)
    trajectory = pgd(ctx, start, 0, Backtracking())
    assert np.array_equal(trajectory.theta, start)
    assert trajectory.losses == []

def test_schedule_gradient_matches_full_recomputation(tiny_contexts):
    schedule = StepSchedule(np.array([0.2, 0.1, 0.3]))
    grad = schedule_grad(tiny_contexts, None, schedule, fd_step=1e-4)
    for t in range(schedule.T):
        up, down = schedule.steps.copy(), schedule.steps.copy()
        up[t] += 1e-4
        down[t] -= 1e-4
        expected = (mean_final_loss(tiny_contexts, None, StepSchedule(up))
                    - mean_final_loss(tiny_contexts, None, StepSchedule(down))) / 2e-4
        assert grad[t] == pytest.approx(expected, rel=1e-6, abs=1e-9)

def test_schedule_gradient_with_workers_matches_serial(tiny_contexts):
    schedule = StepSchedule.constant(3)
    serial = schedule_grad(tiny_contexts, None, schedule)
    threaded = schedule_grad(tiny_contexts, None, schedule, workers=2)
    assert np.allclose(serial, threaded)

def test_schedule_gradient_needs_a_batch():
    with pytest.raises(ValueError):
        schedule_grad([], None, StepSchedule.constant(2))

def test_schedule_steps_must_be_positive():
    with pytest.raises(ValueError):
        StepSchedule(np.array([0.1, 0.0]))

def test_schedule_file_roundtrip(tmp_path):
    schedule = StepSchedule(np.array([0.15, 0.3, 1e-3]))
    path = str(tmp_path / 'schedule.txt')
    schedule.save(path)
    assert np.array_equal(StepSchedule.load(path).steps, schedule.steps)

def test_training_is_deterministic_and_keeps_steps_positive(tiny_contexts):
    def train():
        hyper = TrainRun(epochs=2, batch_size=2, learning_rate=1e-2, T=3, seed=5)
        return train_schedule(tiny_contexts + tiny_contexts[:1], hyper)

    schedule, hyper = train()
    again, _ = train()
    assert schedule.T == 3
    assert np.all(schedule.steps > 0)
    assert np.array_equal(schedule.steps, again.steps)
    history = hyper.history()
    assert list(history.columns) == ['epoch', 'train_loss', 'val_loss']
    assert len(history) == 2

def test_training_needs_data():
    with pytest.raises(ValueError):
        train_schedule([], TrainRun(epochs=1))

def test_split_dataset():
    train, val = split_dataset(list(range(10)), 0.8)
    assert train == list(range(8))
    assert val == [8, 9]

def test_dataset_generation_is_reproducible(tiny_cfg, tiny_prop):
    first = gen_dataset(tiny_cfg, 3, seed=4, prop=tiny_prop)
    second = gen_dataset(tiny_cfg, 3, seed=4, prop=tiny_prop)
    assert len(first) == 3
    for a, b in zip(first, second):
        assert np.array_equal(a.H, b.H)
        assert np.array_equal(a.Z, b.Z)
    assert not np.array_equal(first[0].H, first[1].H)
    with pytest.raises(ValueError):
        gen_dataset(tiny_cfg, 0, seed=4)

def test_context_powers_meet_the_budget(tiny_cfg, tiny_contexts):
    for ctx in tiny_contexts:
        assert ctx.p.sum() == pytest.approx(tiny_cfg.Pt, rel=1e-9)
        assert np.all(ctx.p[ctx.Z == 0] == 0)
        refreshed = refresh_power(ctx, np.full(ctx.shape, 0.7))
        assert refreshed.p.sum() == pytest.approx(tiny_cfg.Pt, rel=1e-9)

def test_context_shapes_are_checked(tiny_contexts):
    ctx = tiny_contexts[0]
    with pytest.raises(ValueError, match="must be"):
        replace(ctx, Z=ctx.Z[:, :2])

def test_loss_and_grad_agree_with_loss(tiny_contexts):
    ctx = tiny_contexts[2]
    theta = np.full(ctx.shape, 2.0)
    value, triple, grad = loss_and_grad(ctx, theta)
    assert (value, triple) == loss(ctx, theta)
    assert grad.shape == ctx.shape

def test_solver_curves_lengths(tiny_contexts):
    curves = solver_curves(tiny_contexts[0], StepSchedule.constant(4), iterations=7)
    assert len(curves['upgd']) == 4
    assert len(curves['fixed']) == 7
    assert len(curves['backtracking']) == 7
    assert curves['fixed'][:4] == curves['upgd']

def test_flop_estimate_for_desk_scale():
    estimate = flop_estimate(desk_config())
    assert estimate.cascade == 3 * 16 ** 2
    assert estimate.sinr == 4 ** 2 * 16
    assert estimate.total == 16 * 30 * (estimate.cascade + estimate.sinr)

def test_empty_unroll_returns_the_start(tiny_contexts):
    ctx = tiny_contexts[0]
    start = np.full(ctx.shape, 1.0)
    schedule = StepSchedule(np.array([]))
    assert schedule.T == 0
    theta, losses = upgd_forward(ctx, start, schedule)
    assert np.array_equal(theta, start)
    assert losses == []

def test_zero_learning_rate_leaves_the_schedule_alone(tiny_contexts):
    hyper = TrainRun(epochs=2, batch_size=2, learning_rate=0.0, T=3, seed=1)
    schedule, hyper = train_schedule(tiny_contexts, hyper)
    assert np.array_equal(schedule.steps, np.full(3, FIXED_STEP))
    assert len(hyper.val_loss) == 2
    assert hyper.val_loss[-1] <= hyper.val_loss[0]

def test_dataset_rows_activate_v_tones_per_subblock(tiny_cfg, tiny_prop):
    for ctx in gen_dataset(tiny_cfg, 3, seed=8, prop=tiny_prop):
        per_block = ctx.Z.reshape(tiny_cfg.K, tiny_cfg.Lb, tiny_cfg.N).sum(axis=2)
        assert np.all(per_block == tiny_cfg.V)
