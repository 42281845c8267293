import math

import pytest
import torch
from helpers import make_layer, quadrature_log_px, random_cif_1d, random_cif_stack, randomize
from torch import nn

from cifkit.bijections import Identity, ResidualBlock
from cifkit.cif import (
    CifLayer,
    CifStack,
    CondGaussianHead,
    Flow,
    default_index_dim,
    log_likelihood_is,
    make_cif_id_layer,
    make_cif_layer,
)
from cifkit.numcore import (
    SeededRng,
    as_tensor,
    backward,
    finite_diff_jacobian,
    gaussian_logpdf,
    lu_log_abs_det,
    param_store,
    seeded_torch,
)


class ConstantScaleShift(nn.Module):
    def __init__(self, s, t):
        super().__init__()
        self.s, self.t = as_tensor(s), as_tensor(t)

    def forward(self, u):
        return self.s.expand(u.shape[0], -1), self.t.expand(u.shape[0], -1)


def const_layer(f, s, t, d_u=1):
    d = f.dim
    return CifLayer(f, ConstantScaleShift(s, t), CondGaussianHead(d, d_u), CondGaussianHead(d, d_u), d_u)


def zeroed_stack(bases, d_u=1):
    layers = []
    for i, f in enumerate(bases):
        with seeded_torch(SeededRng(50, (i,))):
            layer = make_cif_layer(f, d_u)
        randomize(layer, SeededRng(51, (i,)))  # perturb everything, then zero the head outputs
        layer.zero_heads()
        layers.append(layer)
    return CifStack(layers, bases[0].dim).eval()


# -- heads -------------------------------------------------------------------------------------


def test_head_output_halves_and_rsample():
    with seeded_torch(SeededRng(0)):
        head = CondGaussianHead(3, 2)
    randomize(head, SeededRng(1))
    c = SeededRng(2).normal((1, 3)).repeat(200000, 1)
    with torch.no_grad():
        mean, log_scale = head(c)
        assert mean.shape == (200000, 2) and log_scale.shape == (200000, 2)
        u = head.rsample(SeededRng(3).normal((200000, 2)), c)
        assert torch.allclose(u.mean(0), mean[0], atol=0.02 * float(log_scale.exp().max()))
        assert torch.allclose(u.std(0), log_scale[0].exp(), rtol=0.01)
        assert torch.allclose(head.log_prob(u[:5], c[:5]), gaussian_logpdf(u[:5], mean[:5], log_scale[:5]))


def test_q_head_log_scale_is_clamped():
    layer = make_cif_layer(Identity(2), 1)
    with torch.no_grad():
        layer.q_head.net.output_layer.bias[1] = -50.0
        layer.p_head.net.output_layer.bias[1] = -50.0
        assert float(layer.q_head(torch.zeros(1, 2))[1]) == -7.0
        assert float(layer.p_head(torch.zeros(1, 2))[1]) == -50.0


# -- generate / normalize -------------------------------------------------------------------------


def test_generate_trivial_and_hand_examples():
    z = SeededRng(0).normal((4, 3))
    assert torch.equal(const_layer(Identity(3), [0.0] * 3, [0.0] * 3).generate(z, torch.zeros(4, 1)), z)
    layer = const_layer(Identity(1), [math.log(2.0)], [1.0])
    assert float(layer.generate(as_tensor([[4.0]]), torch.zeros(1, 1))) == 1.0


def test_normalize_hand_example():
    layer = const_layer(Identity(1), [math.log(2.0)], [1.0])
    z, logdet = layer.normalize(as_tensor([[1.0]]), torch.zeros(1, 1))
    assert float(z) == 4.0
    assert math.isclose(float(logdet), math.log(2.0), abs_tol=1e-15)


def test_normalize_reduces_to_f_when_s_t_zero():
    f = make_layer("coupling", 4, seed=1)
    layer = const_layer(f, [0.0] * 4, [0.0] * 4)
    x = SeededRng(1).normal((10, 4))
    with torch.no_grad():
        assert all(torch.equal(a, b) for a, b in zip(layer.normalize(x, torch.zeros(10, 1)), f.normalize(x)))


@pytest.mark.parametrize("base", ["coupling", "maf", "resflow"])
def test_round_trip_and_fd_logdet(base):
    stack = random_cif_stack(4, 1, 2, seed=3, base=base)
    layer = stack.layers[0]
    u = SeededRng(4).normal((20, 2))
    z = SeededRng(5).normal((20, 4))
    with torch.no_grad():
        z2, _ = layer.normalize(layer.generate(z, u), u)
        assert float((z2 - z).abs().max()) < 1e-8
        x = SeededRng(6).normal((1, 4))
        _, logdet = layer.normalize(x, u[:1])
    jac = finite_diff_jacobian(lambda v: layer.normalize(v[None], u[:1])[0][0], x[0])
    assert abs(float(logdet) - float(lu_log_abs_det(jac).value)) < 1e-4


# -- ELBO --------------------------------------------------------------------------------------------


@pytest.mark.parametrize("base", ["coupling", "maf", "resflow"])
def test_zeroed_heads_elbo_equals_flow_every_draw(base):
    bases = [make_layer(base, 2, seed=10 + i) for i in range(3)]
    stack = zeroed_stack(bases)
    flow = stack.base_flow()
    x = SeededRng(0).normal((200, 2))
    with torch.no_grad():
        exact = flow.log_prob(x)
        for draw in range(5):
            assert torch.equal(stack.elbo(x, SeededRng(draw)), exact)


def test_degenerate_index_makes_elbo_draw_invariant():
    f = make_layer("coupling", 2, seed=0)
    with seeded_torch(SeededRng(1)):
        index_map = make_cif_layer(f, 1).index_map
    randomize(index_map, SeededRng(2))
    p_head, q_head = CondGaussianHead(2, 1), CondGaussianHead(2, 1)
    with torch.no_grad():
        for head in (p_head, q_head):
            head.net.output_layer.bias.copy_(as_tensor([0.4, math.log(1e-12)]))
    stack = CifStack([CifLayer(f, index_map, p_head, q_head, 1)], 2).eval()
    x = SeededRng(3).normal((50, 2))
    with torch.no_grad():
        draws = torch.stack([stack.elbo(x, SeededRng(s)) for s in range(10)])
    assert float((draws - draws[0]).abs().max()) < 1e-9


@pytest.mark.parametrize("seed", range(4))
def test_elbo_and_is_against_quadrature(seed):
    stack = random_cif_1d(seed)
    x = float(SeededRng(seed, (2,)).normal((1,)))
    oracle = quadrature_log_px(stack.layers[0], x)
    with torch.no_grad():
        elbo = stack.elbo(torch.full((10**4, 1), x), SeededRng(seed, (4,)))
        est = float(log_likelihood_is(stack, torch.tensor([[x]]), 10**5, SeededRng(seed, (3,))))
    assert float(elbo.mean()) <= oracle + 3 * float(elbo.std()) / 100
    assert abs(est - oracle) < 0.01


def test_trajectory_logdets_add_up():
    stack = random_cif_stack(3, 3, 1, seed=7)
    x = SeededRng(0).normal((5, 3))
    traj = []
    with torch.no_grad():
        total = stack.elbo(x, SeededRng(1), trajectory=traj)
        assert len(traj) == 3
        delta = torch.zeros(5)
        z = x
        for (z_l, u, logdet), layer in zip(traj, reversed(stack.layers)):
            assert torch.equal(z_l, z)
            z, ld = layer.normalize(z_l, u)
            assert torch.equal(ld, logdet)
            delta = delta + layer.p_head.log_prob(u, z) - layer.q_head.log_prob(u, z_l) + ld
        recomputed = delta - 0.5 * (z**2).sum(1) - math.log(2 * math.pi) * 1.5
    assert torch.allclose(total, recomputed, atol=1e-10)


def test_elbo_gradient_matches_fd():
    stack = random_cif_stack(2, 2, 1, seed=8)
    x = SeededRng(0).normal((8, 2))
    params = param_store(stack)
    grads = backward(stack.elbo(x, SeededRng(1)).mean(), params)
    flat = [(name, idx) for name, p in params.items() for idx in range(p.numel())]
    pick = SeededRng(2).permutation(len(flat))[:40]
    for k in pick.tolist():
        name, idx = flat[k]
        p = params[name]
        h = 1e-5
        with torch.no_grad():
            base = p.view(-1)[idx].item()
            p.view(-1)[idx] = base + h
            up = float(stack.elbo(x, SeededRng(1)).mean())
            p.view(-1)[idx] = base - h
            down = float(stack.elbo(x, SeededRng(1)).mean())
            p.view(-1)[idx] = base
        fd = (up - down) / (2 * h)
        g = float(grads[name].view(-1)[idx])
        assert abs(g - fd) <= 1e-4 * max(1.0, abs(fd)), (name, idx, g, fd)


# -- importance sampling ---------------------------------------------------------------------------------


def test_is_single_draw_and_equal_values():
    stack = random_cif_stack(2, 2, 1, seed=9)
    x = SeededRng(0).normal((6, 2))
    with torch.no_grad():
        assert torch.equal(log_likelihood_is(stack, x, 1, SeededRng(1)), stack.elbo(x, SeededRng(1).child(0)))
        zeroed = zeroed_stack([make_layer("coupling", 2, seed=i) for i in range(2)])
        exact = zeroed.base_flow().log_prob(x)
        for m in (1, 7, 50):
            assert torch.allclose(log_likelihood_is(zeroed, x, m, SeededRng(m)), exact, atol=1e-12)
    with pytest.raises(ValueError):
        log_likelihood_is(stack, x, 0, SeededRng(0))


def test_is_chunking_is_consistent():
    stack = random_cif_stack(2, 1, 1, seed=10)
    x = SeededRng(0).normal((4, 2))
    with torch.no_grad():
        a = log_likelihood_is(stack, x, 30, SeededRng(1), max_rows=8)
        b = log_likelihood_is(stack, x, 30, SeededRng(2), max_rows=8)
    assert a.shape == (4,) and torch.isfinite(a).all() and not torch.equal(a, b)


def test_is_monotone_in_m():
    stack = random_cif_stack(2, 2, 1, seed=11)
    x = SeededRng(0).normal((1000, 2))
    with torch.no_grad():
        est = {m: log_likelihood_is(stack, x, m, SeededRng(m)) for m in (1, 10, 100)}
    for lo, hi in ((1, 10), (10, 100)):
        diff = est[hi] - est[lo]
        pooled = float(diff.std()) / math.sqrt(diff.numel())
        assert float(diff.mean()) >= -3 * pooled


# -- sampling -------------------------------------------------------------------------------------------------


def test_zeroed_identity_stack_samples_prior():
    layers = []
    for v in (2, 3):
        layer = make_cif_id_layer(2, 2, v)
        layer.zero_heads()
        layers.append(layer)
    stack = CifStack(layers, 2)
    with torch.no_grad():
        assert torch.equal(stack.sample(100, SeededRng(4)), SeededRng(4).normal((100, 2)))
        assert torch.equal(stack.sample(10, SeededRng(5)), stack.sample(10, SeededRng(5)))


def test_zeroed_resflow_sample_round_trip():
    with seeded_torch(SeededRng(0)):
        bases = [ResidualBlock(2, width=16, depth=2) for _ in range(3)]
    stack = zeroed_stack(bases)
    with torch.no_grad():
        x = stack.sample(200, SeededRng(1))
        z0 = SeededRng(1).normal((200, 2))
        z, _ = stack.base_flow().bijection.normalize(x)
    assert float((z - z0).abs().max()) < 1e-5


# -- CIF-Id ------------------------------------------------------------------------------------------------------


def test_cif_id_variant1():
    layer = make_cif_id_layer(2, 2, 1)
    z = SeededRng(0).normal((5, 2))
    assert torch.equal(layer.generate(z, torch.zeros(5, 2)), z)
    randomize(layer.p_head, SeededRng(1))
    eps = SeededRng(2).normal((5, 2))
    with torch.no_grad():
        mean, log_scale = layer.p_head(z)
        x = layer.generate(z, layer.p_head.rsample(eps, z))
    assert torch.allclose(x, z - mean - torch.exp(log_scale) * eps, atol=1e-14)


def test_cif_id_variant3_zeroed_is_identity_shift_free():
    layer = make_cif_id_layer(2, 2, 3)
    layer.index_map.zero_output()
    z, u = SeededRng(0).normal((5, 2)), SeededRng(1).normal((5, 2))
    assert torch.equal(layer.generate(z, u), z)


def test_cif_id_errors():
    with pytest.raises(ValueError):
        make_cif_id_layer(2, 1, 1)
    with pytest.raises(ValueError):
        make_cif_id_layer(2, 2, 4)


def test_stack_and_defaults():
    assert [default_index_dim(d) for d in (1, 2, 4, 5, 63)] == [1, 1, 1, 2, 16]
    with pytest.raises(ValueError):
        CifStack([make_cif_id_layer(2, 2, 1), make_cif_id_layer(3, 3, 1)], 2)
    flow = Flow([make_layer("coupling", 2, seed=0)], 2)
    x = SeededRng(0).normal((3, 2))
    with torch.no_grad():
        assert torch.equal(flow.log_likelihood(x, 1, SeededRng(0)), flow.log_likelihood(x, 99, SeededRng(1)))
