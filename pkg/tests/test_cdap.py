import numpy as np
import pytest
import torch
from scipy.special import erf

from reffil.cdap import CdapGenerator, flatten_prompt, unflatten_prompt


def gelu(x):
    return 0.5 * x * (1 + erf(x / np.sqrt(2)))


def oracle_prompt(P, tokens, task_id):
    """Straight-line evaluation of alpha * (CCDA(MLP(LN(I)^T)) + lam), transposed."""
    mu = tokens.mean(1, keepdims=True)
    var = ((tokens - mu) ** 2).mean(1, keepdims=True)
    ln = (tokens - mu) / np.sqrt(var + 1e-5) * P["ln.weight"] + P["ln.bias"]
    t = ln.T
    h = gelu(t @ P["mlp.0.weight"].T + P["mlp.0.bias"])
    m = h @ P["mlp.2.weight"].T + P["mlp.2.bias"]
    z = m @ P["ccda.weight"].T + P["ccda.bias"]
    v = P["task_keys.weight"][task_id - 1]
    film = P["film.weight"] @ v + P["film.bias"]
    d = tokens.shape[1]
    alpha, lam = film[:d], film[d:]
    return (alpha[:, None] * (z + lam[:, None])).T


def make(seed=0, n=4, d=8, p=2):
    torch.manual_seed(seed)
    gen = CdapGenerator(n_tokens=n, dim=d, prompt_len=p, max_tasks=3, key_dim=5).double()
    with torch.no_grad():
        for prm in gen.parameters():
            prm.normal_(0, 0.7)
    return gen


def params(gen):
    return {k: v.detach().numpy() for k, v in gen.state_dict().items()}


def test_matches_straight_line_oracle():
    gen = make()
    tokens = np.random.default_rng(0).standard_normal((5, 8))
    got = gen(torch.tensor(tokens), 2).detach().numpy()
    assert got.shape == (2, 8)
    np.testing.assert_allclose(got, oracle_prompt(params(gen), tokens, 2), atol=1e-10, rtol=0)


def test_identity_modulation():
    gen = make()
    with torch.no_grad():
        gen.film.weight.zero_()
        gen.film.bias.zero_()
        gen.film.bias[:8] = 1.0
    tokens = torch.randn(5, 8, dtype=torch.float64)
    expected = gen.base_prompt(tokens.unsqueeze(0))[0].T
    torch.testing.assert_close(gen(tokens, 1), expected)


def test_zero_scale_gives_zero_prompt():
    gen = make()
    with torch.no_grad():
        gen.film.weight[:8].zero_()
        gen.film.bias[:8].zero_()
    out = gen(torch.randn(3, 5, 8, dtype=torch.float64), torch.tensor([1, 2, 3]))
    assert torch.all(out == 0)


def test_instance_level_and_task_conditioned():
    gen = make(1)
    a, b = torch.randn(5, 8, dtype=torch.float64), torch.randn(5, 8, dtype=torch.float64)
    assert not torch.allclose(gen(a, 1), gen(b, 1))
    assert not torch.allclose(gen(a, 1), gen(a, 2))


def test_unknown_task_rejected():
    gen = make()
    with pytest.raises(KeyError):
        gen(torch.randn(5, 8, dtype=torch.float64), 4)
    with pytest.raises(KeyError):
        gen(torch.randn(5, 8, dtype=torch.float64), 0)


def test_default_key_is_mean_of_seen():
    gen = make()
    torch.testing.assert_close(gen.default_key([2, 1]), gen.task_keys.weight[:2].mean(0))
    with pytest.raises(ValueError):
        gen.default_key([])


def central_fd(f, tensor, h=1e-5):
    grad = torch.zeros_like(tensor)
    flat, g = tensor.data.view(-1), grad.view(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        g[i] = (up - down) / (2 * h)
    return grad


def test_generator_gradients_match_finite_differences():
    gen = make(2)
    tokens = torch.randn(3, 5, 8, dtype=torch.float64)
    tids = torch.tensor([1, 3, 2])
    weights = torch.randn(3, 2, 8, dtype=torch.float64)

    def f():
        with torch.no_grad():
            return float((gen(tokens, tids) * weights).sum())

    gen.zero_grad()
    (gen(tokens, tids) * weights).sum().backward()
    for name, prm in gen.named_parameters():
        fd = central_fd(f, prm)
        err = (prm.grad - fd).norm() / max(prm.grad.norm(), fd.norm(), 1e-12)
        assert err < 1e-4, name


def test_flatten_examples():
    p = torch.tensor([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
    assert flatten_prompt(p).tolist() == [1, 2, 3, 4, 5, 6]
    row = torch.tensor([[7.0, 8.0]])
    assert flatten_prompt(row).tolist() == [7.0, 8.0]
    rnd = torch.randn(4, 3, 5)
    assert torch.equal(unflatten_prompt(flatten_prompt(rnd), 3), rnd)
    arr = np.arange(12.0)
    np.testing.assert_array_equal(unflatten_prompt(arr, 3), arr.reshape(3, 4))
