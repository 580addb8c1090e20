"""Exposure-pair sampling, augmentation and the optimization loop."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import cv2
import numpy as np
import torch

from .imaging import ExposureStack, LdrImage
from .losses import LossConfig, bracket_objective, make_feature_extractor
from .masking import MaskConfig, well_exposed_mask
from .model import DOWN, UP, BracketNet, NetConfig, build_model, load_checkpoint, save_checkpoint

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ("step", "l_h", "l_r", "l_p", "l_tv", "total", "lr")


@dataclass(frozen=True)
class AugmentConfig:
    enabled: bool = True
    rot90: bool = True
    max_rotation_deg: float = 10.0
    scale_range: tuple = (0.9, 1.1)
    max_shift: float = 0.1
    p_hflip: float = 0.5
    p_vflip: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "scale_range", tuple(self.scale_range))


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    learning_rate: float = 1e-4
    plateau_factor: float = 0.5
    plateau_patience: int = 2000
    plateau_smoothing: float = 0.9
    plateau_threshold: float = 1e-4
    crop_size: int = 256
    max_steps: int = 200_000
    seed: int = 0
    checkpoint_every: int = 0
    bn_freeze_steps: int = 0
    bn_recalibration_batches: int = 50
    loss: LossConfig = field(default_factory=LossConfig)
    net: NetConfig = field(default_factory=NetConfig)
    mask: MaskConfig = field(default_factory=MaskConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if self.bn_freeze_steps < 0 or self.bn_recalibration_batches < 0:
            raise ValueError("bn_freeze_steps and bn_recalibration_batches must be nonnegative")
        if self.batch_size <= 0 or self.crop_size <= 0 or self.max_steps < 0:
            raise ValueError("batch_size and crop_size must be positive, max_steps nonnegative")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be nonnegative")
        if not 0 < self.plateau_factor <= 1 or self.plateau_patience <= 0:
            raise ValueError("invalid plateau schedule")
        if self.crop_size % self.net.size_multiple:
            raise ValueError(f"crop_size {self.crop_size} must be divisible by {self.net.size_multiple}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        """Build from nested plain data, rejecting unknown keys."""
        sub = {"loss": LossConfig, "net": NetConfig, "mask": MaskConfig, "augment": AugmentConfig}
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown train config keys: {sorted(unknown)}")
        kw = {}
        for k, v in d.items():
            if k in sub:
                sk = {f.name for f in fields(sub[k])}
                bad = set(v) - sk
                if bad:
                    raise KeyError(f"unknown {k} config keys: {sorted(bad)}")
                kw[k] = sub[k](**v)
            else:
                kw[k] = v
        return cls(**kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss"]["vgg_layers"] = list(d["loss"]["vgg_layers"])
        d["augment"]["scale_range"] = list(d["augment"]["scale_range"])
        return d


@dataclass
class ExposurePair:
    """Two aligned exposures of one scene with ``dt2 > dt1``."""

    img1: np.ndarray
    dt1: float
    img2: np.ndarray
    dt2: float

    def __post_init__(self):
        if not self.dt2 > self.dt1:
            raise ValueError(f"pair must satisfy dt2 > dt1, got {self.dt1}, {self.dt2}")


def sample_pair(stack: ExposureStack, rng: np.random.Generator) -> ExposurePair:
    """Uniformly draw two distinct images of one stack, shorter exposure first."""
    if len(stack) < 2:
        raise ValueError(f"stack {stack.scene_id!r} needs at least 2 images to form a pair")
    i, j = sorted(rng.choice(len(stack), size=2, replace=False))
    a, b = stack[int(i)], stack[int(j)]
    return ExposurePair(a.pixels, a.meta.delta_t, b.pixels, b.meta.delta_t)


def pair_from_images(a: LdrImage, b: LdrImage) -> ExposurePair:
    if a.meta.delta_t > b.meta.delta_t:
        a, b = b, a
    return ExposurePair(a.pixels, a.meta.delta_t, b.pixels, b.meta.delta_t)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GeometricDraw:
    k90: int = 0
    angle: float = 0.0
    scale: float = 1.0
    shift: tuple = (0.0, 0.0)
    hflip: bool = False
    vflip: bool = False
    crop_yx: tuple = (0.0, 0.0)  # fractional crop origin in [0, 1]

    @property
    def is_affine_identity(self) -> bool:
        return self.angle == 0.0 and self.scale == 1.0 and self.shift == (0.0, 0.0)


def draw_geometry(cfg: AugmentConfig, rng: np.random.Generator) -> GeometricDraw:
    crop = (float(rng.random()), float(rng.random()))
    if not cfg.enabled:
        return GeometricDraw(crop_yx=crop)
    return GeometricDraw(
        k90=int(rng.integers(4)) if cfg.rot90 else 0,
        angle=float(rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg)),
        scale=float(rng.uniform(*cfg.scale_range)),
        shift=(float(rng.uniform(-cfg.max_shift, cfg.max_shift)),
               float(rng.uniform(-cfg.max_shift, cfg.max_shift))),
        hflip=bool(rng.random() < cfg.p_hflip),
        vflip=bool(rng.random() < cfg.p_vflip),
        crop_yx=crop,
    )


def apply_geometry(img: np.ndarray, g: GeometricDraw, crop_size: int) -> np.ndarray:
    out = np.rot90(img, g.k90) if g.k90 else img
    if g.hflip:
        out = out[:, ::-1]
    if g.vflip:
        out = out[::-1]
    h, w = out.shape[:2]
    if min(h, w) < crop_size:
        f = crop_size / min(h, w)
        out = cv2.resize(np.ascontiguousarray(out), (max(crop_size, round(w * f)), max(crop_size, round(h * f))),
                         interpolation=cv2.INTER_LINEAR)
        h, w = out.shape[:2]
    if not g.is_affine_identity:
        m = cv2.getRotationMatrix2D(((w - 1) / 2, (h - 1) / 2), g.angle, g.scale)
        m[0, 2] += g.shift[1] * w
        m[1, 2] += g.shift[0] * h
        out = cv2.warpAffine(np.ascontiguousarray(out), m, (w, h), flags=cv2.INTER_LINEAR,
                             borderMode=cv2.BORDER_REFLECT_101)
    y0 = int(round(g.crop_yx[0] * (h - crop_size)))
    x0 = int(round(g.crop_yx[1] * (w - crop_size)))
    return np.ascontiguousarray(out[y0:y0 + crop_size, x0:x0 + crop_size])


def augment(pair: ExposurePair, crop_size: int, rng: np.random.Generator,
            cfg: AugmentConfig = AugmentConfig()) -> ExposurePair:
    """Apply one random geometric transform identically to both images."""
    if pair.img1.shape != pair.img2.shape:
        raise ValueError("pair images differ in shape")
    if min(pair.img1.shape[:2]) < crop_size:
        logger.warning("image %s smaller than crop %d; upscaling before cropping",
                       pair.img1.shape[:2], crop_size)
    g = draw_geometry(cfg, rng)
    return ExposurePair(apply_geometry(pair.img1, g, crop_size), pair.dt1,
                        apply_geometry(pair.img2, g, crop_size), pair.dt2)


# ---------------------------------------------------------------------------
# state and schedule
# ---------------------------------------------------------------------------


@dataclass
class PlateauSchedule:
    """Multiply the learning rate by ``factor`` when the smoothed loss has
    not improved for ``patience`` consecutive steps."""

    lr: float
    factor: float = 0.5
    patience: int = 2000
    smoothing: float = 0.9
    threshold: float = 1e-4
    best: float = math.inf
    bad_steps: int = 0
    running: float | None = None
    events: int = 0

    def update(self, loss: float) -> bool:
        self.running = loss if self.running is None else (
            self.smoothing * self.running + (1 - self.smoothing) * loss)
        if self.running < self.best * (1 - self.threshold):
            self.best = self.running
            self.bad_steps = 0
            return False
        self.bad_steps += 1
        if self.bad_steps >= self.patience:
            self.lr *= self.factor
            self.bad_steps = 0
            self.events += 1
            return True
        return False

    def state(self) -> dict:
        return {k: (None if isinstance(v, float) and math.isinf(v) else v) for k, v in asdict(self).items()}

    @classmethod
    def from_state(cls, d: dict) -> "PlateauSchedule":
        d = dict(d)
        if d.get("best") is None:
            d["best"] = math.inf
        return cls(**d)


def _adam(model: BracketNet, lr: float):
    # a shared exposure net appears once in parameters(), so no duplicates here
    return torch.optim.Adam(model.parameters(), lr=lr)


@dataclass
class TrainState:
    config: TrainConfig
    model: BracketNet
    optimizer: torch.optim.Optimizer
    schedule: PlateauSchedule
    step: int = 0
    extractor: object = None

    @classmethod
    def initial(cls, config: TrainConfig) -> "TrainState":
        model = build_model(config.net, config.seed)
        sched = PlateauSchedule(config.learning_rate, config.plateau_factor, config.plateau_patience,
                                config.plateau_smoothing, config.plateau_threshold)
        return cls(config, model, _adam(model, config.learning_rate), sched, 0,
                   make_feature_extractor(config.loss))

    def save(self, path) -> None:
        save_checkpoint(path, self.model, self.step, self.optimizer,
                        {"train_config": self.config.to_dict(), "schedule": self.schedule.state()})

    @classmethod
    def load(cls, path) -> "TrainState":
        model, step, opt, state = load_checkpoint(path, lambda m: _adam(m, 0.0))
        cfg = TrainConfig.from_dict(state["train_config"])
        sched = PlateauSchedule.from_state(state["schedule"])
        return cls(cfg, model, opt, sched, step, make_feature_extractor(cfg.loss))


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    img1: np.ndarray  # B x H x W x 3
    img2: np.ndarray
    dt1: np.ndarray  # B
    dt2: np.ndarray

    def __len__(self):
        return len(self.dt1)


def stack_pairs(pairs: Sequence[ExposurePair]) -> Batch:
    if not pairs:
        raise ValueError("empty batch")
    return Batch(np.stack([p.img1 for p in pairs]), np.stack([p.img2 for p in pairs]),
                 np.array([p.dt1 for p in pairs], dtype=np.float64),
                 np.array([p.dt2 for p in pairs], dtype=np.float64))


def sample_rng(seed: int, step: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, step, index])


def make_batch(sources: Sequence, cfg: TrainConfig, step: int) -> Batch:
    """Deterministic batch for ``step``: each sample gets its own RNG seeded
    from (seed, step, index). ``sources`` holds ExposureStacks (a random pair
    is drawn) or fixed ExposurePairs."""
    pairs = []
    for idx in range(cfg.batch_size):
        rng = sample_rng(cfg.seed, step, idx)
        src = sources[int(rng.integers(len(sources)))]
        pair = sample_pair(src, rng) if isinstance(src, ExposureStack) else src
        pairs.append(augment(pair, cfg.crop_size, rng, cfg.augment))
    return stack_pairs(pairs)


def _nchw(a: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(a.transpose(0, 3, 1, 2), dtype=np.float32))


def masked_inputs(imgs: np.ndarray, mask_cfg: MaskConfig) -> np.ndarray:
    masks = np.stack([well_exposed_mask(im, mask_cfg) for im in imgs])
    return imgs * masks[..., None]


def forward_pair(model: BracketNet, batch: Batch, mask_cfg: MaskConfig):
    """Mask, encode both exposures, cross-scale, decode up and down."""
    i1, i2 = _nchw(batch.img1), _nchw(batch.img2)
    m1 = _nchw(masked_inputs(batch.img1, mask_cfg))
    m2 = _nchw(masked_inputs(batch.img2, mask_cfg))
    dt1 = torch.as_tensor(batch.dt1, dtype=torch.float32)
    dt2 = torch.as_tensor(batch.dt2, dtype=torch.float32)
    x = model.encode(torch.cat([m1, m2]))
    x1, x2 = x[: len(batch)], x[len(batch):]
    up_ratio = (dt2 / dt1).reshape(-1, 1, 1, 1)
    pred2 = model.expose(x1 * up_ratio, UP)
    pred1 = model.expose(x2 / up_ratio, DOWN)
    return dict(x1=x1, x2=x2, dt1=dt1, dt2=dt2, pred1=pred1, gt1=i1, pred2=pred2, gt2=i2)


def train_step(state: TrainState, batch: Batch):
    """One Adam update on ``batch``; returns the loss breakdown."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    cfg = state.config
    model = state.model
    model.train()
    if bn_frozen(cfg, state.step):
        for m in _batchnorms(model):
            m.eval()
    for g in state.optimizer.param_groups:
        g["lr"] = state.schedule.lr
    out = forward_pair(model, batch, cfg.mask)
    total, bd = bracket_objective(cfg.loss, state.extractor, out["x1"], out["x2"], out["dt1"], out["dt2"],
                                  out["pred1"], out["gt1"], out["pred2"], out["gt2"])
    if not torch.isfinite(total):
        bad = [i for i in range(len(batch))
               if not all(torch.isfinite(out[k][i]).all() for k in ("x1", "x2", "pred1", "pred2"))]
        raise FloatingPointError(f"non-finite loss at step {state.step}; offending batch indices: "
                                 f"{bad or list(range(len(batch)))}; breakdown {bd.as_dict()}")
    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    if state.schedule.lr > 0:
        state.optimizer.step()
    state.step += 1
    state.schedule.update(bd.total)
    return bd


def format_metrics(step: int, bd, lr: float) -> str:
    vals = [bd.l_h, bd.l_r, bd.l_p, bd.l_tv, bd.total, lr]
    return "\t".join([str(step)] + [f"{v:.9e}" for v in vals])


def fit(cfg: TrainConfig, sources: Sequence, state: TrainState | None = None, log_path=None,
        checkpoint_dir=None, callback: Callable | None = None) -> TrainState:
    """Run ``train_step`` until ``cfg.max_steps``.

    ``sources`` is a non-empty list of ExposureStacks or ExposurePairs. A
    tab-separated metrics line is appended to ``log_path`` per step.
    """
    if not sources:
        raise ValueError("no training data: the manifest references no stacks")
    state = state or TrainState.initial(cfg)
    log = None
    if log_path is not None:
        new = state.step == 0 or not Path(log_path).exists()
        log = open(log_path, "w" if state.step == 0 else "a")
        if new:
            log.write("\t".join(METRIC_COLUMNS) + "\n")
    try:
        while state.step < cfg.max_steps:
            if cfg.bn_freeze_steps and state.step == max(cfg.max_steps - cfg.bn_freeze_steps, 0):
                # small batches make running statistics unreliable: re-estimate
                # them, then finish training against the fixed statistics
                recalibrate_batchnorm(state, sources, cfg.bn_recalibration_batches)
            batch = make_batch(sources, cfg, state.step)
            lr = state.schedule.lr
            bd = train_step(state, batch)
            line = format_metrics(state.step, bd, lr)
            logger.debug(line)
            if log is not None:
                log.write(line + "\n")
            if callback is not None:
                callback(state, bd)
            if checkpoint_dir is not None and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
                state.save(Path(checkpoint_dir) / f"step{state.step:07d}.ckpt")
    finally:
        if log is not None:
            log.close()
    state.model.eval()
    return state


def _batchnorms(model):
    return [m for m in model.modules() if isinstance(m, torch.nn.modules.batchnorm._BatchNorm)]


def bn_frozen(cfg: TrainConfig, step: int) -> bool:
    """Whether ``step`` falls in the final frozen-normalization phase."""
    return cfg.bn_freeze_steps > 0 and step >= cfg.max_steps - cfg.bn_freeze_steps


@torch.no_grad()
def recalibrate_batchnorm(state: TrainState, sources: Sequence, n_batches: int) -> None:
    """Replace batch-norm running statistics by their plain average over
    ``n_batches`` fresh training batches (weights untouched)."""
    cfg = state.config
    bns = _batchnorms(state.model)
    saved = [m.momentum for m in bns]
    for m in bns:
        m.reset_running_stats()
        m.momentum = None  # cumulative average
    state.model.train()
    try:
        for i in range(n_batches):
            forward_pair(state.model, make_batch(sources, cfg, cfg.max_steps + i), cfg.mask)
    finally:
        for m, mom in zip(bns, saved):
            m.momentum = mom


def with_overrides(cfg: TrainConfig, **changes) -> TrainConfig:
    return replace(cfg, **changes)
