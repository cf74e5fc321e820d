import math

import numpy as np
import pytest
import torch as th

from simfree_soc.common.errors import CheckpointError
from simfree_soc.common.policies import FunctionPolicy, MlpPolicy, PisPolicy, init_policy
from simfree_soc.common.torch_layers import ParamLayout, fourier_encode
from simfree_soc.common.utils import DTYPE
from simfree_soc.problems import FunnelTarget, funnel_score, funnel_score_vjp

N_WALKERS = 7


def _batch(dim, seed=0, n=N_WALKERS):
    return th.as_tensor(np.random.RandomState(seed).randn(n, dim), dtype=DTYPE)


def _autograd_vjps(policy, t, x, v):
    x_grad = x.clone().requires_grad_(True)
    u = policy(t, x_grad)
    grad_theta, grad_x = th.autograd.grad((u * v).sum(), [policy.theta, x_grad])
    if isinstance(policy, PisPolicy):
        # The score enters the forward pass as a constant; add its state derivative
        _, gate, _ = policy.decompose(t, x)
        x_score = x.clone().requires_grad_(True)
        (score_term,) = th.autograd.grad((policy.score_fn(x_score) * gate * v).sum(), x_score)
        grad_x = grad_x + score_term
    return grad_theta, grad_x


def _funnel_pis(zero_last_layer=False, score_vjp=True, scalar_gate=False):
    target = FunnelTarget(dim=4)
    return PisPolicy(
        dim=4,
        score_fn=lambda x: funnel_score(target, x),
        score_vjp=(lambda x, v: funnel_score_vjp(target, x, v)) if score_vjp else None,
        t_arch=(8,),
        x_arch=(8, 8),
        head_arch=(8,),
        gate_arch=(8, 8),
        scalar_gate=scalar_gate,
        num_freqs=4,
        zero_last_layer=zero_last_layer,
        seed=3,
    )


POLICIES = {
    "mlp-default-embedding": lambda: MlpPolicy(3, net_arch=[16, 16], num_freqs=8, seed=1),
    "mlp-relu": lambda: MlpPolicy(3, net_arch=[32], activation="relu", seed=2),
    "mlp-raw-time": lambda: MlpPolicy(2, horizon=2.0, net_arch=[5, 7, 3], time_embedding="raw", seed=4),
    "mlp-linear": lambda: MlpPolicy(4, net_arch=[], time_embedding="none", bias=False, seed=5),
    "pis": lambda: _funnel_pis(),
    "pis-autograd-score": lambda: _funnel_pis(score_vjp=False),
    "pis-scalar-gate": lambda: _funnel_pis(scalar_gate=True),
}


@pytest.mark.parametrize("name", sorted(POLICIES))
@pytest.mark.parametrize("t", [0.0, 0.37, 1.0])
def test_vjps_match_autograd(name, t):
    policy = POLICIES[name]()
    x = _batch(policy.dim, seed=1)
    v = _batch(policy.dim, seed=2)
    grad_theta, grad_x = _autograd_vjps(policy, t, x, v)
    assert th.allclose(policy.vjp_params(t, x, v), grad_theta, rtol=1e-12, atol=1e-12)
    assert th.allclose(policy.vjp_input(t, x, v), grad_x, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("name", ["mlp-default-embedding", "pis"])
def test_per_walker_vjps_sum(name):
    policy = POLICIES[name]()
    x = _batch(policy.dim, seed=3)
    v = _batch(policy.dim, seed=4)
    per_walker = policy.vjp_params(0.5, x, v, per_walker=True)
    assert per_walker.shape == (N_WALKERS, policy.n_params)
    assert th.allclose(per_walker.sum(dim=0), policy.vjp_params(0.5, x, v), rtol=1e-12, atol=1e-12)
    # Walker i only depends on (x_i, v_i)
    single = policy.vjp_params(0.5, x[2], v[2])
    assert th.allclose(per_walker[2], single, rtol=1e-12, atol=1e-13)


def test_vjp_params_accumulates():
    policy = POLICIES["mlp-relu"]()
    x, v = _batch(3, seed=5), _batch(3, seed=6)
    out = policy.vjp_params(0.1, x, v)
    twice = policy.vjp_params(0.1, x, v, out=out.clone())
    assert th.allclose(twice, 2 * out, rtol=1e-14)


def test_backward_checks():
    policy = POLICIES["mlp-relu"]()
    x = _batch(3)
    _, tape = policy.evaluate(0.0, x, keep_tape=True)
    with pytest.raises(ValueError):
        policy.backward(None, x)
    with pytest.raises(ValueError):
        policy.backward(tape, x, out=th.zeros(policy.n_params + 1, dtype=DTYPE))
    _, no_tape = policy.evaluate(0.0, x)
    assert no_tape is None


def test_linear_policy():
    policy = MlpPolicy(2, net_arch=[], time_embedding="none", bias=False)
    assert policy.n_params == 4
    policy.load_from_vector(np.array([1.0, 2.0, 3.0, 4.0]))
    x = th.tensor([[1.0, 1.0], [0.5, -1.0]], dtype=DTYPE)
    assert th.equal(policy(0.3, x), th.tensor([[3.0, 7.0], [-1.5, -2.5]], dtype=DTYPE))
    v = th.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=DTYPE)
    # d u_i / d W_ij = x_j
    assert th.equal(policy.vjp_params(0.0, x, v), th.tensor([1.0, 1.0, 0.5, -1.0], dtype=DTYPE))
    assert th.equal(policy.vjp_input(0.0, x, v), th.tensor([[1.0, 2.0], [3.0, 4.0]], dtype=DTYPE))


def test_single_state_shapes():
    policy = POLICIES["mlp-default-embedding"]()
    x = _batch(3)[0]
    assert policy(0.2, x).shape == (3,)
    assert policy.vjp_input(0.2, x, th.ones(3, dtype=DTYPE)).shape == (3,)


def test_zero_last_layer():
    policy = MlpPolicy(5, net_arch=[16, 16], zero_last_layer=True)
    assert th.all(policy(0.4, _batch(5)) == 0.0)
    assert th.all(policy.layout.view(policy.theta.detach(), "net.2.weight") == 0.0)
    assert th.any(policy.layout.view(policy.theta.detach(), "net.1.weight") != 0.0)

    pis = _funnel_pis(zero_last_layer=True)
    assert th.all(pis(0.4, _batch(4)) == 0.0)


def test_pis_with_open_gate_is_score():
    pis = _funnel_pis(zero_last_layer=True)
    with th.no_grad():
        pis.layout.view(pis.theta.data, "gate_net.2.bias").fill_(1.0)
    x = _batch(4, seed=8)
    target = FunnelTarget(dim=4)
    assert th.allclose(pis(0.7, x), funnel_score(target, x), rtol=1e-14)
    nn1, gate, score = pis.decompose(0.7, x)
    assert th.all(nn1 == 0.0)
    assert th.all(gate == 1.0)
    assert th.equal(score, funnel_score(target, x))


def test_initialization_is_seeded():
    first = MlpPolicy(3, net_arch=[8], seed=11)
    second = MlpPolicy(3, net_arch=[8], seed=11)
    other = MlpPolicy(3, net_arch=[8], seed=12)
    assert np.array_equal(first.parameters_to_vector(), second.parameters_to_vector())
    assert not np.array_equal(first.parameters_to_vector(), other.parameters_to_vector())
    first.reset_parameters(12)
    assert np.array_equal(first.parameters_to_vector(), other.parameters_to_vector())


def test_initialization_variance():
    policy = MlpPolicy(4, net_arch=[128, 128], seed=0)
    weights = policy.layout.view(policy.theta.detach(), "net.1.weight")
    bound = math.sqrt(3.0 / 128)
    assert float(weights.abs().max()) <= bound
    assert float(weights.var()) == pytest.approx(1.0 / 128, rel=0.2)


def test_fourier_encode():
    features = fourier_encode(0.0, 3)
    assert features.tolist() == [0.0, 0.0, 0.0, 1.0, 1.0, 1.0]
    features = fourier_encode(0.25, 2)
    assert features.shape == (4,)
    assert features[0].item() == pytest.approx(1.0)
    assert features[3].item() == pytest.approx(-1.0)
    assert th.allclose(fourier_encode(0.5, 4, horizon=2.0), fourier_encode(0.25, 4))
    with pytest.raises(ValueError):
        fourier_encode(0.1, 0)


def test_layout():
    layout = ParamLayout()
    layout.register("a.weight", (2, 3))
    layout.register("a.bias", (2,))
    assert layout.size == 8
    flat = th.arange(8, dtype=DTYPE)
    assert layout.view(flat, "a.bias").tolist() == [6.0, 7.0]
    assert layout.view(flat.expand(3, 8), "a.weight").shape == (3, 2, 3)
    assert ParamLayout.from_list(layout.to_list()) == layout
    with pytest.raises(ValueError):
        layout.register("a.bias", (1,))

    other = ParamLayout()
    other.register("a.weight", (3, 2))
    differences = layout.diff(other)
    assert len(differences) == 2
    assert any("a.bias" in difference for difference in differences)


def test_policy_argument_checks():
    with pytest.raises(ValueError):
        MlpPolicy(0)
    with pytest.raises(ValueError):
        MlpPolicy(2, time_embedding="learned")
    with pytest.raises(ValueError):
        MlpPolicy(2, activation="sigmoid")
    with pytest.raises(ValueError):
        MlpPolicy(2, net_arch=[4, 0])
    with pytest.raises(ValueError):
        _funnel_pis().load_from_vector(np.zeros(3))


def test_function_policies():
    zero = FunctionPolicy.zero(3)
    x = _batch(3)
    assert zero.n_params == 0
    assert th.all(zero(0.5, x) == 0.0)
    constant = FunctionPolicy.constant([1.0, -2.0, 0.5], 3)
    assert th.equal(constant(0.5, x)[4], th.tensor([1.0, -2.0, 0.5], dtype=DTYPE))
    assert th.all(constant.vjp_input(0.1, x, x) == 0.0)

    quadratic = FunctionPolicy(lambda t, x: t * x**2, 3)
    assert th.allclose(quadratic.vjp_input(0.5, x, th.ones_like(x)), x, rtol=1e-14)


def test_architecture_round_trip(tmp_path):
    policy = MlpPolicy(3, net_arch=[6, 6], num_freqs=4, activation="relu", seed=9)
    rebuilt = init_policy(policy.get_architecture(), seed=9)
    assert isinstance(rebuilt, MlpPolicy)
    assert rebuilt.layout == policy.layout
    assert np.array_equal(rebuilt.parameters_to_vector(), policy.parameters_to_vector())

    path = str(tmp_path / "policy.bin")
    policy.save(path, meta={"iteration": 3})
    loaded = MlpPolicy.load(path)
    assert np.array_equal(loaded.parameters_to_vector(), policy.parameters_to_vector())

    pis = _funnel_pis()
    architecture = pis.get_architecture()
    assert architecture["policy"] == "pis"
    with pytest.raises(ValueError):
        init_policy(architecture)
    with pytest.raises(ValueError):
        init_policy({"policy": "lstm", "dim": 2})


def test_load_checkpoint_layout_mismatch(tmp_path):
    path = str(tmp_path / "policy.bin")
    MlpPolicy(3, net_arch=[6], num_freqs=4).save(path)
    with pytest.raises(CheckpointError, match="does not match"):
        MlpPolicy(3, net_arch=[7], num_freqs=4).load_checkpoint(path)
