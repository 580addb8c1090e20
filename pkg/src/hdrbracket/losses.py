"""Training objectives: HDR-representation, reconstruction, perceptual and
total-variation losses plus their weighted sum.

All tensors are NCHW. Pixel losses are means so that the default weights
do not depend on resolution.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .model import LatentExposure

STAGES = ("pool1", "pool2", "pool3")


@dataclass(frozen=True)
class LossConfig:
    lambda_h: float = 1.0
    lambda_r: float = 1.0
    lambda_p: float = 0.05
    lambda_tv: float = 1e-4
    epsilon: float = 1e-6
    vgg_layers: tuple = STAGES
    vgg_weights: str | None = None
    pyramid_seed: int = 0

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        for name in ("lambda_h", "lambda_r", "lambda_p", "lambda_tv"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        object.__setattr__(self, "vgg_layers", tuple(self.vgg_layers))


def _check_same(a, b, what):
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def _ratio(dt_num, dt_den, like):
    r = torch.as_tensor(dt_num, dtype=like.dtype) / torch.as_tensor(dt_den, dtype=like.dtype)
    return r.reshape(-1, *([1] * (like.ndim - 1))) if r.ndim else r


def transformation_loss(x1, x2, dt1=None, dt2=None, eps: float = 1e-6):
    """Mean ``|log(x1 * dt2/dt1 + eps) - log(x2 + eps)|``.

    ``x1``/``x2`` may be LatentExposure objects, in which case the exposure
    times come from their metadata.
    """
    if isinstance(x1, LatentExposure):
        dt1 = x1.meta.delta_t if dt1 is None else dt1
        x1 = x1.values
    if isinstance(x2, LatentExposure):
        dt2 = x2.meta.delta_t if dt2 is None else dt2
        x2 = x2.values
    _check_same(x1, x2, "transformation_loss")
    scaled = x1 * _ratio(dt2, dt1, x1)
    return (torch.log(scaled + eps) - torch.log(x2 + eps)).abs().mean()


def hdr_representation_loss(x1, x2, dt1=None, dt2=None, eps: float = 1e-6):
    if isinstance(x1, LatentExposure):
        dt1, x1 = x1.meta.delta_t, x1.values
    if isinstance(x2, LatentExposure):
        dt2, x2 = x2.meta.delta_t, x2.values
    return transformation_loss(x1, x2, dt1, dt2, eps) + transformation_loss(x2, x1, dt2, dt1, eps)


def reconstruction_loss(pred1, gt1, pred2, gt2):
    _check_same(pred1, gt1, "reconstruction_loss")
    _check_same(pred2, gt2, "reconstruction_loss")
    return (pred1 - gt1).abs().mean() + (pred2 - gt2).abs().mean()


def total_variation(y):
    """Anisotropic L1 total variation summed over pixels and channels.

    Accepts H x W, H x W x C arrays or NCHW tensors. A dimension of size 1
    simply contributes no differences.
    """
    if isinstance(y, torch.Tensor):
        if y.ndim < 2:
            raise ValueError("total_variation needs at least 2 dimensions")
        dv = (y[..., 1:, :] - y[..., :-1, :]).abs().sum()
        dh = (y[..., :, 1:] - y[..., :, :-1]).abs().sum()
        return dv + dh
    arr = np.asarray(y, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[..., None]
    return float(np.abs(np.diff(arr, axis=0)).sum() + np.abs(np.diff(arr, axis=1)).sum())


def tv_loss(pred1, pred2):
    """Total variation of both predictions, normalized by pixel count."""
    n_pixels = pred1.shape[0] * pred1.shape[-2] * pred1.shape[-1]
    return (total_variation(pred1) + total_variation(pred2)) / n_pixels


# ---------------------------------------------------------------------------
# perceptual features
# ---------------------------------------------------------------------------


_IMAGENET_MEAN = torch.tensor([0.485, 0.456, 0.406]).reshape(1, 3, 1, 1)
_IMAGENET_STD = torch.tensor([0.229, 0.224, 0.225]).reshape(1, 3, 1, 1)


class FeatureExtractor(nn.Module):
    """Frozen convolutional pyramid exposing pool1/pool2/pool3 features.

    Built either from VGG-19 weights (``from_vgg19``) or, by default, as a
    seeded random VGG-shaped pyramid so no download is needed.
    """

    def __init__(self, stages: nn.ModuleList, names=STAGES, normalize: bool = False,
                 source: str = "seeded-random-pyramid"):
        super().__init__()
        self.stages = stages
        self.names = tuple(names)
        self.normalize = normalize
        self.source = source
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    @classmethod
    def random_pyramid(cls, seed: int = 0, widths=(16, 32, 64)) -> "FeatureExtractor":
        rng = np.random.default_rng(seed)
        stages = nn.ModuleList()
        prev = 3
        for w in widths:
            convs = []
            for c_in in (prev, w):
                conv = nn.Conv2d(c_in, w, 3, padding=1)
                std = np.sqrt(2.0 / (c_in * 9))
                conv.weight.data = torch.from_numpy(rng.normal(0, std, conv.weight.shape).astype(np.float32))
                conv.bias.data = torch.from_numpy(rng.normal(0, 0.01, conv.bias.shape).astype(np.float32))
                convs += [conv, nn.ReLU()]
            stages.append(nn.Sequential(*convs, nn.MaxPool2d(2, ceil_mode=True)))
            prev = w
        return cls(stages, source=f"seeded-random-pyramid:{seed}")

    @classmethod
    def from_vgg19(cls, weights_path) -> "FeatureExtractor":
        """Load torchvision-layout VGG-19 weights (full model or ``features`` only)."""
        from torchvision.models import vgg19

        net = vgg19(weights=None)
        sd = torch.load(weights_path, map_location="cpu", weights_only=True)
        if not any(k.startswith("features.") for k in sd):
            sd = {f"features.{k}": v for k, v in sd.items()}
        sd = {k: v for k, v in sd.items() if k.startswith("features.")}
        net.load_state_dict(sd, strict=False)
        feats = net.features
        stages = nn.ModuleList([feats[0:5], feats[5:10], feats[10:19]])
        return cls(stages, normalize=True, source=f"pretrained-vgg19:{weights_path}")

    def forward(self, x, layers=None):
        layers = tuple(layers or self.names)
        unknown = [l for l in layers if l not in self.names]
        if unknown:
            raise KeyError(f"feature stages {unknown} unavailable; configured stages: {list(self.names)}")
        if self.normalize:
            x = (x - _IMAGENET_MEAN.to(x.dtype)) / _IMAGENET_STD.to(x.dtype)
        deepest = max(self.names.index(l) for l in layers)
        out = {}
        for name, stage in zip(self.names[:deepest + 1], self.stages):
            x = stage(x)
            out[name] = x
        return [out[l] for l in layers]


def make_feature_extractor(cfg: LossConfig) -> FeatureExtractor:
    if cfg.vgg_weights:
        return FeatureExtractor.from_vgg19(cfg.vgg_weights)
    return FeatureExtractor.random_pyramid(cfg.pyramid_seed)


def perceptual_loss(fx: FeatureExtractor, pred1, gt1, pred2, gt2, layers=None):
    total = 0.0
    for pred, gt in ((pred1, gt1), (pred2, gt2)):
        _check_same(pred, gt, "perceptual_loss")
        if fx.stages[0][0].weight.dtype != pred.dtype:
            fx = fx.to(pred.dtype)
        for fp, fg in zip(fx(pred, layers), fx(gt, layers)):
            total = total + (fp - fg).abs().mean()
    return total


# ---------------------------------------------------------------------------
# combination
# ---------------------------------------------------------------------------


@dataclass
class LossBreakdown:
    l_h: float
    l_r: float
    l_p: float
    l_tv: float
    total: float
    tensors: dict = field(default_factory=dict, repr=False)

    def as_dict(self):
        return {"l_h": self.l_h, "l_r": self.l_r, "l_p": self.l_p, "l_tv": self.l_tv, "total": self.total}


def combined_loss(cfg: LossConfig, l_h=0.0, l_r=0.0, l_p=0.0, l_tv=0.0):
    """Weighted sum; returns ``(total, breakdown)``."""
    total = cfg.lambda_h * l_h + cfg.lambda_r * l_r + cfg.lambda_p * l_p + cfg.lambda_tv * l_tv
    as_float = lambda v: float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
    bd = LossBreakdown(as_float(l_h), as_float(l_r), as_float(l_p), as_float(l_tv), as_float(total),
                       tensors={"l_h": l_h, "l_r": l_r, "l_p": l_p, "l_tv": l_tv})
    return total, bd


def bracket_objective(cfg: LossConfig, fx: FeatureExtractor | None, x1, x2, dt1, dt2,
                      pred1, gt1, pred2, gt2):
    """All four terms for one training batch.

    ``x1``/``x2`` are encoder latents of the short/long exposure, ``pred1`` the
    down-exposed reconstruction of ``gt1`` and ``pred2`` the up-exposed one.
    The perceptual term is skipped (reported as 0) when its weight is zero.
    """
    l_h = hdr_representation_loss(x1, x2, dt1, dt2, cfg.epsilon)
    l_r = reconstruction_loss(pred1, gt1, pred2, gt2)
    if cfg.lambda_p > 0 and fx is not None:
        l_p = perceptual_loss(fx, pred1, gt1, pred2, gt2, cfg.vgg_layers)
    else:
        l_p = torch.zeros((), dtype=pred1.dtype)
    l_t = tv_loss(pred1, pred2)
    return combined_loss(cfg, l_h, l_r, l_p, l_t)
