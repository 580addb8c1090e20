import math

import numpy as np
import pytest
import torch
from _gradcheck import grad_rel_error

from hdrbracket.imaging import ExposureMeta
from hdrbracket.losses import (FeatureExtractor, LossConfig, bracket_objective, combined_loss,
                               hdr_representation_loss, perceptual_loss, reconstruction_loss, total_variation,
                               transformation_loss, tv_loss)
from hdrbracket.model import LatentExposure

torch.set_default_dtype(torch.float32)


def _rand(*shape, seed=0, lo=0.05, hi=0.95):
    g = torch.Generator().manual_seed(seed)
    return lo + (hi - lo) * torch.rand(*shape, generator=g, dtype=torch.float64)


def test_transformation_scalar_case():
    x1 = torch.full((1, 3, 2, 2), 0.1, dtype=torch.float64)
    x2 = torch.full((1, 3, 2, 2), 0.3, dtype=torch.float64)
    oracle = abs(math.log(0.2 + 1e-6) - math.log(0.3 + 1e-6))
    assert oracle == pytest.approx(0.4055, abs=1e-4)
    got = transformation_loss(x1, x2, 1.0, 2.0, 1e-6).item()
    assert got == pytest.approx(oracle, rel=1e-9)
    lh = hdr_representation_loss(x1, x2, 1.0, 2.0).item()
    reverse = abs(math.log(0.3 * 0.5 + 1e-6) - math.log(0.1 + 1e-6))
    assert lh == pytest.approx(oracle + reverse, rel=1e-9)
    assert lh == pytest.approx(0.8110, abs=1e-4)


def test_transformation_latent_objects():
    a = LatentExposure(torch.full((1, 3, 2, 2), 0.1, dtype=torch.float64), ExposureMeta.from_ev(0))
    b = LatentExposure(torch.full((1, 3, 2, 2), 0.3, dtype=torch.float64), ExposureMeta.from_ev(1))
    assert transformation_loss(a, b).item() == pytest.approx(0.405465, abs=1e-5)


def test_zero_at_ground_truth():
    x1 = _rand(2, 3, 4, 4)
    assert transformation_loss(x1, 4 * x1, 1.0, 4.0).item() == pytest.approx(0, abs=1e-12)
    assert hdr_representation_loss(x1, 0.5 * x1, 2.0, 1.0).item() == pytest.approx(0, abs=1e-12)
    assert reconstruction_loss(x1, x1, x1, x1).item() == 0
    assert perceptual_loss(FeatureExtractor.random_pyramid(0), x1, x1, x1, x1).item() == 0
    assert tv_loss(torch.full((1, 3, 4, 4), 0.3), torch.full((1, 3, 4, 4), 0.7)).item() == 0


def test_per_sample_ratios():
    x1 = _rand(2, 3, 4, 4)
    x2 = torch.cat([2 * x1[:1], 8 * x1[1:]])
    dt1, dt2 = torch.tensor([1.0, 1.0]), torch.tensor([2.0, 8.0])
    assert transformation_loss(x1, x2, dt1, dt2).item() == pytest.approx(0, abs=1e-12)


def test_reconstruction_examples():
    p, g = torch.full((1, 3, 4, 4), 0.5), torch.full((1, 3, 4, 4), 0.75)
    assert reconstruction_loss(p, g, p, g).item() == pytest.approx(0.5)
    a = torch.zeros(1, 3, 4, 5)
    b = a.clone()
    b[0, 1, 2, 3] = 1.0
    assert reconstruction_loss(b, a, a, a).item() == pytest.approx(1 / a.numel())
    with pytest.raises(ValueError):
        reconstruction_loss(a, a[..., :4], a, a)


def test_total_variation_examples():
    assert total_variation(np.array([[0.0, 1.0], [0.0, 1.0]])) == 2
    assert total_variation(np.array([[0.0, 1.0], [1.0, 0.0]])) == 4
    assert total_variation(np.full((5, 5, 3), 0.2)) == 0
    t = torch.tensor([[[[0.0, 1.0], [1.0, 0.0]]]])
    assert total_variation(t).item() == 4
    # normalized by N*H*W
    assert tv_loss(t, torch.zeros_like(t)).item() == pytest.approx(1.0)


def test_combined_loss():
    total, bd = combined_loss(LossConfig(), 0, 0, 0, 0)
    assert total == 0
    cfg = LossConfig(lambda_h=1, lambda_r=1, lambda_p=0, lambda_tv=0)
    total, bd = combined_loss(cfg, 0.8110, 0.5, 7.0, 9.0)
    assert total == pytest.approx(1.3110)
    assert bd.as_dict()["l_p"] == 7.0


def test_loss_config_defaults():
    cfg = LossConfig()
    assert (cfg.lambda_h, cfg.lambda_r, cfg.lambda_p, cfg.lambda_tv) == (1.0, 1.0, 0.05, 1e-4)
    with pytest.raises(ValueError):
        LossConfig(lambda_r=-1)


def test_feature_extractor_layers():
    fx = FeatureExtractor.random_pyramid(1)
    x = torch.rand(1, 3, 9, 9)
    shapes = [f.shape[-1] for f in fx(x)]
    assert shapes == [5, 3, 2]
    with pytest.raises(KeyError, match="pool1"):
        fx(x, ["pool5"])
    a, b = FeatureExtractor.random_pyramid(3), FeatureExtractor.random_pyramid(3)
    assert all(torch.equal(p, q) for p, q in zip(a.parameters(), b.parameters()))


def test_objective_skips_perceptual_when_unweighted():
    x = _rand(1, 3, 8, 8).float()
    _, bd = bracket_objective(LossConfig(lambda_p=0), None, x, 2 * x, 1.0, 2.0, x, x, x, x)
    assert bd.l_p == 0 and bd.total == pytest.approx(bd.l_tv * 1e-4)


# --- finite-difference gradients -------------------------------------------

FX = FeatureExtractor.random_pyramid(0).double()


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gradients(seed):
    other = _rand(1, 3, 4, 4, seed=seed + 100)
    cases = {
        "l_t": lambda x: transformation_loss(x, other, 1.0, 2.0),
        "l_h": lambda x: hdr_representation_loss(x, other, 1.0, 2.0),
        "l_r": lambda x: reconstruction_loss(x, other, other, x * 0.5),
        "l_p": lambda x: perceptual_loss(FX, x, other, other, other),
        "l_tv": lambda x: tv_loss(x, other),
    }
    x = _rand(1, 3, 4, 4, seed=seed)
    for name, fn in cases.items():
        assert grad_rel_error(fn, x) <= 1e-4, name
