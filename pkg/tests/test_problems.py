import math

import numpy as np
import pytest
import torch as th

from simfree_soc.common.errors import RiccatiDivergenceError
from simfree_soc.common.utils import DTYPE
from simfree_soc.problems import (
    FunnelTarget,
    InitialLaw,
    LinearOuSpec,
    LqrSpec,
    SocProblem,
    finetune_problem,
    finetune_toy_problem,
    follmer_problem,
    funnel_log_density,
    funnel_potential,
    funnel_sample,
    funnel_score,
    funnel_score_vjp,
    gaussian_potential,
    linear_ou_optimal_control,
    linear_ou_problem,
    lqr_easy_spec,
    lqr_optimal_control,
    lqr_problem,
    shifted_gaussian_potential,
    solve_riccati,
)
from simfree_soc.problems.base import constant_volatility, zero_drift, zero_running_cost
from simfree_soc.problems.follmer import half_square_norm


def test_ou_control_without_drift():
    spec = LinearOuSpec.from_values(A=0.0, gamma=[1.0, -2.0, 0.5], sigma0=2.0, dim=3)
    for t in (0.0, 0.3, 1.0):
        u = linear_ou_optimal_control(spec, 1.0, t, th.zeros(3, dtype=DTYPE))
        assert th.allclose(u, -2.0 * spec.gamma, rtol=1e-14)


def test_ou_control_zero_gamma():
    spec = LinearOuSpec.from_values(A=-1.0, gamma=0.0, sigma0=1.0, dim=4)
    u = linear_ou_optimal_control(spec, 1.0, 0.2, th.ones(5, 4, dtype=DTYPE))
    assert u.shape == (5, 4)
    assert th.all(u == 0.0)


def test_ou_control_scalar():
    spec = LinearOuSpec.from_values(A=0.5, gamma=2.0, sigma0=1.0, dim=1)
    u = linear_ou_optimal_control(spec, 1.0, 0.0, th.zeros(1, dtype=DTYPE))
    assert float(u) == pytest.approx(-2.0 * math.exp(0.5), rel=1e-12)
    with pytest.raises(ValueError):
        linear_ou_optimal_control(spec, 1.0, 1.5, th.zeros(1, dtype=DTYPE))


def test_riccati_zero_costs():
    spec = LqrSpec.from_values(A=0.3, P=0.0, Q=0.0, sigma0=1.0, dim=3)
    riccati = solve_riccati(spec, 1.0, 64)
    assert th.all(riccati.F == 0.0)


@pytest.mark.parametrize("q", [0.5, 2.0])
def test_riccati_scalar_closed_form(q):
    spec = LqrSpec.from_values(A=0.0, P=0.0, Q=q, sigma0=1.0, dim=1)
    riccati = solve_riccati(spec, 1.0, 1024)
    for t in (0.0, 0.25, 0.5, 1.0):
        expected = q / (1.0 + 2.0 * q * (1.0 - t))
        assert float(riccati.at(t)) == pytest.approx(expected, rel=1e-9)
    assert float(riccati.at(0.0)) == pytest.approx(0.25 if q == 0.5 else 0.4, rel=1e-9)


def test_riccati_terminal_and_symmetry():
    spec = LqrSpec.from_values(
        A=[[0.1, 0.4], [-0.2, 0.3]],
        P=[[0.5, 0.1], [0.1, 0.2]],
        Q=[[0.3, -0.1], [-0.1, 0.6]],
        sigma0=[[1.0, 0.2], [0.0, 0.8]],
        dim=2,
    )
    riccati = solve_riccati(spec, 1.0, 256)
    assert th.equal(riccati.F[-1], spec.Q)
    assert th.allclose(riccati.F, riccati.F.transpose(1, 2), atol=1e-10)


def test_riccati_self_convergence():
    spec = lqr_easy_spec(20)
    coarse = solve_riccati(spec, 1.0, 256)
    fine = solve_riccati(spec, 1.0, 25600, record_every=100)
    assert coarse.times.shape == fine.times.shape
    scale = float(fine.F.abs().max())
    assert float((coarse.F - fine.F).abs().max()) <= 1e-8 * scale


def test_riccati_residual():
    spec = lqr_easy_spec(4)
    riccati = solve_riccati(spec, 1.0, 4096)
    A, P, S = spec.A, spec.P, spec.sigma0 @ spec.sigma0.T
    h = float(riccati.times[1] - riccati.times[0])
    for k in range(0, 4096, 256):
        F0, F1 = riccati.F[k], riccati.F[k + 1]
        mid = 0.5 * (F0 + F1)
        residual = (F1 - F0) / h + A.T @ mid + mid @ A - 2.0 * mid @ S @ mid + P
        assert float(residual.abs().max()) <= 1e-6


def test_riccati_errors():
    spec = lqr_easy_spec(2)
    with pytest.raises(ValueError):
        solve_riccati(spec, 1.0, 8)
    with pytest.raises(ValueError):
        solve_riccati(spec, 1.0, 100, record_every=7)
    # Negative quadratic gain: the solution blows up before t = 0
    blowing = LqrSpec(
        A=th.zeros(1, 1, dtype=DTYPE),
        P=th.zeros(1, 1, dtype=DTYPE),
        Q=th.zeros(1, 1, dtype=DTYPE),
        sigma0=th.eye(1, dtype=DTYPE),
    )
    object.__setattr__(blowing, "Q", th.full((1, 1), -2.0, dtype=DTYPE))
    with pytest.raises(RiccatiDivergenceError):
        solve_riccati(blowing, 5.0, 4096)


def test_lqr_spec_validation():
    with pytest.raises(ValueError):
        LqrSpec.from_values(A=0.0, P=[[1.0, 2.0], [0.0, 1.0]], Q=0.0, sigma0=1.0, dim=2)
    with pytest.raises(ValueError):
        LqrSpec.from_values(A=0.0, P=-1.0, Q=0.0, sigma0=1.0, dim=2)


def test_lqr_optimal_control():
    spec = LqrSpec.from_values(A=0.0, P=0.0, Q=0.5, sigma0=1.0, dim=1)
    riccati = solve_riccati(spec, 1.0, 1024)
    assert float(lqr_optimal_control(riccati, spec.sigma0, 0.0, th.ones(1, dtype=DTYPE))) == pytest.approx(-0.5, rel=1e-9)

    spec = lqr_easy_spec(3)
    riccati = solve_riccati(spec, 1.0, 64)
    x = th.tensor([[0.3, -1.0, 2.0], [0.0, 0.0, 0.0]], dtype=DTYPE)
    u = lqr_optimal_control(riccati, spec.sigma0, 1.0, x)
    assert th.allclose(u, -2.0 * x @ (spec.sigma0.T @ spec.Q).T, rtol=1e-14)
    assert th.all(u[1] == 0.0)


def test_linear_problems_costs():
    dim = 3
    problem = linear_ou_problem(LinearOuSpec.from_values(A=-1.0, gamma=[1.0, 2.0, 3.0], sigma0=1.0, dim=dim))
    assert problem.kind == "linear-ou"
    assert problem.optimal_control is not None
    x = th.tensor([[1.0, 1.0, 1.0]], dtype=DTYPE)
    assert float(problem.terminal_cost(x)) == 6.0
    assert th.equal(problem.drift_vjp(0.0, x, x), -x)

    problem = lqr_problem(lqr_easy_spec(dim), riccati_steps=64)
    assert float(problem.running_cost(0.0, x)) == pytest.approx(0.6)
    assert float(problem.terminal_cost(x)) == pytest.approx(0.3)
    assert th.allclose(problem.terminal_grad(x), 0.2 * x)


def test_problem_autograd_fallbacks():
    dim = 2

    def drift(t, x):
        return th.sin(x)

    def terminal(x):
        return (x**3).sum(dim=-1)

    problem = SocProblem(
        dim=dim,
        horizon=1.0,
        base_drift=drift,
        volatility=constant_volatility(th.eye(dim, dtype=DTYPE)),
        running_cost=zero_running_cost,
        terminal_cost=terminal,
        initial_law=InitialLaw.point_mass(0.0, dim),
    )
    x = th.tensor([[0.1, -0.7], [1.2, 0.4]], dtype=DTYPE)
    v = th.tensor([[1.0, 2.0], [-1.0, 0.5]], dtype=DTYPE)
    assert th.allclose(problem.drift_vjp(0.0, x, v), v * th.cos(x))
    assert th.allclose(problem.terminal_grad(x), 3 * x**2)
    assert th.all(problem.running_grad(0.0, x) == 0.0)


def test_problem_validation():
    common = dict(
        dim=2,
        horizon=1.0,
        base_drift=zero_drift,
        running_cost=zero_running_cost,
        terminal_cost=gaussian_potential,
        initial_law=InitialLaw.point_mass(0.0, 2),
    )
    with pytest.raises(ValueError, match="not invertible"):
        SocProblem(volatility=constant_volatility(th.zeros(2, 2, dtype=DTYPE)), **common)
    with pytest.raises(ValueError):
        SocProblem(volatility=constant_volatility(th.eye(3, dtype=DTYPE)), **common)
    with pytest.raises(ValueError):
        SocProblem(volatility=constant_volatility(th.eye(2, dtype=DTYPE)), **dict(common, horizon=0.0))


def test_funnel_density_at_origin():
    target = FunnelTarget(dim=10, sigma0_funnel=1.0)
    x = th.zeros(10, dtype=DTYPE)
    assert float(funnel_log_density(target, x)) == pytest.approx(-5.0 * math.log(2 * math.pi), rel=1e-14)
    score = funnel_score(target, x)
    assert float(score[0]) == pytest.approx(-4.5)
    assert th.all(score[1:] == 0.0)


def test_funnel_symmetry():
    target = FunnelTarget()
    x = th.as_tensor(np.random.RandomState(0).randn(20, 10), dtype=DTYPE)
    flipped = x.clone()
    flipped[:, 1:] *= -1
    assert th.allclose(funnel_log_density(target, x), funnel_log_density(target, flipped), rtol=1e-14)


@pytest.mark.parametrize("scale", [1.0, 3.0])
def test_funnel_derivatives(scale):
    target = FunnelTarget(sigma0_funnel=scale)
    x = th.as_tensor(np.random.RandomState(1).randn(100, 10), dtype=DTYPE)
    v = th.as_tensor(np.random.RandomState(2).randn(100, 10), dtype=DTYPE)

    x_grad = x.clone().requires_grad_(True)
    (score,) = th.autograd.grad(funnel_log_density(target, x_grad).sum(), x_grad, create_graph=True)
    assert th.allclose(funnel_score(target, x), score.detach(), rtol=1e-10, atol=1e-12)

    (hvp,) = th.autograd.grad((score * v).sum(), x_grad)
    assert th.allclose(funnel_score_vjp(target, x, v), hvp, rtol=1e-10, atol=1e-12)


def test_funnel_score_narrow_neck():
    target = FunnelTarget()
    x = th.zeros(10, dtype=DTYPE)
    x[0] = -15.0
    score = funnel_score(target, x)
    assert th.all(th.isfinite(score))
    assert th.all(score[1:] == 0.0)


def test_funnel_validation_and_samples():
    with pytest.raises(ValueError):
        FunnelTarget(dim=1)
    with pytest.raises(ValueError):
        FunnelTarget(sigma0_funnel=0.0)
    target = FunnelTarget(sigma0_funnel=2.0)
    with pytest.raises(ValueError):
        funnel_log_density(target, th.zeros(3, dtype=DTYPE))
    samples = funnel_sample(target, 20000, np.random.default_rng(0))
    assert samples.shape == (20000, 10)
    assert float(samples[:, 0].std()) == pytest.approx(2.0, rel=0.05)


def test_follmer_problem():
    problem = follmer_problem(gaussian_potential, dim=4)
    x = th.as_tensor(np.random.RandomState(0).randn(7, 4), dtype=DTYPE)
    assert th.all(problem.terminal_cost(x) == 0.0)
    assert problem.kind == "follmer"
    assert problem.horizon == 1.0
    assert problem.initial_law.is_point_mass

    def potential(x):
        return half_square_norm(x) + 1.0

    problem = follmer_problem(potential, dim=3)
    assert float(problem.terminal_cost(th.tensor([[2.0, 0.0, 0.0]], dtype=DTYPE))) == pytest.approx(1.0)

    target = FunnelTarget()
    problem = follmer_problem(funnel_potential(target), dim=10)
    zero = th.zeros(1, 10, dtype=DTYPE)
    assert th.equal(problem.terminal_cost(zero), funnel_potential(target)(zero))


def test_follmer_rejects_non_finite_potential():
    def bad_potential(x):
        return th.full((x.shape[0],), float("nan"), dtype=DTYPE)

    with pytest.raises(ValueError):
        follmer_problem(bad_potential, dim=2)


def test_finetune_problem():
    dim = 2
    sigma = th.eye(dim, dtype=DTYPE)
    potential = shifted_gaussian_potential([0.5, -1.0])

    def reward(x):
        return -potential(x) + half_square_norm(x)

    finetune = finetune_problem(zero_drift, sigma, 1.0, reward, dim)
    follmer = follmer_problem(potential, dim=dim)
    x = th.as_tensor(np.random.RandomState(3).randn(11, dim), dtype=DTYPE)
    assert th.allclose(finetune.terminal_cost(x), follmer.terminal_cost(x), rtol=1e-14, atol=1e-14)
    assert finetune.kind == "finetune"

    zero_reward = finetune_problem(zero_drift, sigma, 1.0, lambda x: th.zeros(x.shape[0], dtype=DTYPE), dim)
    assert th.all(zero_reward.terminal_cost(x) == 0.0)

    with pytest.raises(ValueError, match="point mass"):
        finetune_problem(zero_drift, sigma, 1.0, reward, dim, initial_law=InitialLaw.point_mass(1.0, dim))


def test_finetune_toy_problem():
    problem = finetune_toy_problem((1.0, -0.5))
    assert problem.dim == 2
    x = th.tensor([[2.0, 2.0]], dtype=DTYPE)
    assert float(problem.terminal_cost(x)) == pytest.approx(-1.0)
    assert th.equal(problem.terminal_grad(x), th.tensor([[-1.0, 0.5]], dtype=DTYPE))
