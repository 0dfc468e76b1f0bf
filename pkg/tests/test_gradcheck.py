import pytest
import torch

from poseattn.gradcheck import COMPONENTS, check_function, grad_check, relative_error


def test_detects_wrong_gradient():
    class Bad(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            ctx.save_for_backward(x)
            return (x ** 2).sum()

        @staticmethod
        def backward(ctx, g):
            (x,) = ctx.saved_tensors
            return g * 2.2 * x  # should be 2 x

    x = torch.randn(5, dtype=torch.float64, requires_grad=True)
    assert check_function(lambda: Bad.apply(x), [x]) > 0.05


def test_exact_gradient_passes():
    x = torch.randn(7, dtype=torch.float64, requires_grad=True)
    assert check_function(lambda: (x.sin() * x).sum(), [x]) < 1e-8


def test_relative_error_floor():
    assert relative_error(torch.zeros(3), torch.full((3,), 1e-12)) < 1e-5
    assert relative_error(torch.tensor([1.0]), torch.tensor([1.1])) == pytest.approx(0.1 / 1.1)


def test_unknown_component():
    with pytest.raises(ValueError, match="unknown component"):
        grad_check("flux_capacitor")


def test_bad_eps():
    with pytest.raises(ValueError):
        grad_check("adain", eps=0.0)


def test_covers_required_components():
    required = {"paan_block", "pagn_block", "adain", "d_appearance", "d_pose", "recon_l1", "semantic_consistency",
                "quartet_loss", "id_loss", "total_loss", "embed", "classify"}
    assert required <= set(COMPONENTS)
