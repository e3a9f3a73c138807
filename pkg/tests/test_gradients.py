import torch

from camodiff.bdlu import BDLU

from gradcheck import full_model_gradient_errors


def test_full_model_gradients(tiny_cfg):
    errors = full_model_gradient_errors(tiny_cfg, n_params=20, seed=1)
    worst = max(errors, key=lambda e: e[-1])
    assert worst[-1] < 1e-3, worst


def test_boundary_decoder_gradients():
    torch.manual_seed(0)
    m = BDLU(4, 4, 8, r=1).double()
    x0 = torch.randn(1, 4, 4, 4, dtype=torch.float64)
    target = (torch.rand(1, 1, 32, 32, dtype=torch.float64) > 0.8).double()

    def loss():
        _, xe = m.decode_boundary(x0, 32)
        return torch.nn.functional.binary_cross_entropy(xe, target)

    params = [m.embed.weight, m.edge_head[1].weight]
    ok = torch.autograd.gradcheck(lambda *_: loss(), params, eps=1e-6, atol=1e-8, rtol=1e-3)
    assert ok
