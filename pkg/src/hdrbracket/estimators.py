"""scikit-learn style wrappers so the pipeline composes with ``Pipeline``.

>>> pipe = Pipeline([("bracket", ExposureBracketGenerator(...)),
...                  ("merge", BracketMerger(inv_crf=crf)),
...                  ("tonemap", ReinhardToneMapper())])
>>> pipe.fit(train_stacks)
>>> displays = pipe.transform(test_images)
"""

from __future__ import annotations

from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .brackets import generate_exposure, generate_stack
from .hdr import MergeConfig, TonemapParams, merge, tonemap_reinhard
from .imaging import ExposureStack
from .losses import LossConfig
from .masking import MaskConfig
from .model import NetConfig, load_checkpoint, save_checkpoint
from .trainer import AugmentConfig, ExposurePair, TrainConfig, TrainState, fit
from .validation import check_ev_offsets, check_radiance, check_stacks, reference_image


class ExposureBracketGenerator(BaseEstimator, TransformerMixin):
    """Learns to re-expose a single LDR image from exposure pairs.

    ``fit`` takes a list of ExposureStacks (pairs are sampled within each
    stack) or of ExposurePairs; ``transform`` maps each input image to an
    ExposureStack at ``ev_offsets``.
    """

    def __init__(self, ev_offsets=(-2, -1, 0, 1, 2), levels=7, base_features_encoder=16,
                 base_features_exposure=32, max_features_encoder=256, max_features_exposure=512,
                 share_exposure_nets=False, batch_size=64, learning_rate=1e-4, crop_size=256,
                 max_steps=200_000, plateau_patience=2000, bn_freeze_steps=0, lambda_h=1.0, lambda_r=1.0,
                 lambda_p=0.05, lambda_tv=1e-4, mask_gamma=0.05, mask_variant="min-combination",
                 augment=True, vgg_weights=None, random_state=0, log_path=None):
        self.ev_offsets = ev_offsets
        self.levels = levels
        self.base_features_encoder = base_features_encoder
        self.base_features_exposure = base_features_exposure
        self.max_features_encoder = max_features_encoder
        self.max_features_exposure = max_features_exposure
        self.share_exposure_nets = share_exposure_nets
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.crop_size = crop_size
        self.max_steps = max_steps
        self.plateau_patience = plateau_patience
        self.bn_freeze_steps = bn_freeze_steps
        self.lambda_h = lambda_h
        self.lambda_r = lambda_r
        self.lambda_p = lambda_p
        self.lambda_tv = lambda_tv
        self.mask_gamma = mask_gamma
        self.mask_variant = mask_variant
        self.augment = augment
        self.vgg_weights = vgg_weights
        self.random_state = random_state
        self.log_path = log_path

    def _mask_config(self):
        return MaskConfig(self.mask_gamma, self.mask_variant)

    def train_config(self) -> TrainConfig:
        net = NetConfig(levels=self.levels, base_features_encoder=self.base_features_encoder,
                        base_features_exposure=self.base_features_exposure,
                        max_features_encoder=self.max_features_encoder,
                        max_features_exposure=self.max_features_exposure,
                        share_exposure_nets=self.share_exposure_nets)
        loss = LossConfig(lambda_h=self.lambda_h, lambda_r=self.lambda_r, lambda_p=self.lambda_p,
                          lambda_tv=self.lambda_tv, vgg_weights=self.vgg_weights)
        return TrainConfig(batch_size=self.batch_size, learning_rate=self.learning_rate,
                           plateau_patience=self.plateau_patience,
                           bn_freeze_steps=self.bn_freeze_steps, crop_size=self.crop_size,
                           max_steps=self.max_steps, seed=int(self.random_state or 0), loss=loss, net=net,
                           mask=self._mask_config(), augment=AugmentConfig(enabled=bool(self.augment)))

    def fit(self, X, y=None):
        X = list(X)
        if not X:
            raise ValueError("no training data")
        if not all(isinstance(x, ExposurePair) for x in X):
            X = check_stacks(X, min_len=2)
        check_ev_offsets(self.ev_offsets)
        history = []
        state = fit(self.train_config(), X, log_path=self.log_path,
                    callback=lambda st, bd: history.append(bd.as_dict()))
        self.model_ = state.model
        self.train_state_ = state
        self.loss_history_ = history
        self.n_steps_ = state.step
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        evs = check_ev_offsets(self.ev_offsets)
        out = []
        for i, item in enumerate(X):
            img = reference_image(item)
            scene = item.scene_id if isinstance(item, ExposureStack) else f"image{i}"
            out.append(generate_stack(self.model_, img, evs, self._mask_config(), scene))
        return out

    def predict(self, X):
        return self.transform(X)

    def generate(self, X, ev: float):
        """Re-expose each input to a single EV."""
        check_is_fitted(self, "model_")
        return [generate_exposure(self.model_, reference_image(item), ev, self._mask_config()) for item in X]

    def save(self, path):
        check_is_fitted(self, "model_")
        save_checkpoint(path, self.model_, getattr(self, "n_steps_", 0))

    @classmethod
    def from_checkpoint(cls, path, **params):
        model, step, _, _ = load_checkpoint(path)
        c = model.config
        est = cls(levels=c.levels, base_features_encoder=c.base_features_encoder,
                  base_features_exposure=c.base_features_exposure,
                  max_features_encoder=c.max_features_encoder, max_features_exposure=c.max_features_exposure,
                  share_exposure_nets=c.share_exposure_nets, **params)
        est.model_ = model
        est.n_steps_ = step
        return est

    @classmethod
    def from_train_state(cls, state: TrainState, **params):
        c = state.config
        obj = cls(levels=c.net.levels, base_features_encoder=c.net.base_features_encoder,
                  base_features_exposure=c.net.base_features_exposure,
                  max_features_encoder=c.net.max_features_encoder,
                  max_features_exposure=c.net.max_features_exposure,
                  share_exposure_nets=c.net.share_exposure_nets, mask_gamma=c.mask.gamma,
                  mask_variant=c.mask.variant, **params)
        obj.model_ = state.model
        obj.n_steps_ = state.step
        obj.train_state_ = state
        return obj


class BracketMerger(BaseEstimator, TransformerMixin):
    """Merge ExposureStacks into RadianceMaps with a known response."""

    def __init__(self, method="debevec-weighted", inv_crf=None, saturation_epsilon=0.0):
        self.method = method
        self.inv_crf = inv_crf
        self.saturation_epsilon = saturation_epsilon

    def fit(self, X=None, y=None):
        self.config_ = MergeConfig(self.method, self.saturation_epsilon)
        return self

    def transform(self, X):
        cfg = getattr(self, "config_", None) or MergeConfig(self.method, self.saturation_epsilon)
        return [merge(s, self.inv_crf, cfg) for s in check_stacks(X, min_len=2)]


class ReinhardToneMapper(BaseEstimator, TransformerMixin):
    def __init__(self, key_a=0.18, l_white=None):
        self.key_a = key_a
        self.l_white = l_white

    def fit(self, X=None, y=None):
        self.params_ = TonemapParams(self.key_a, self.l_white)
        return self

    def transform(self, X):
        p = TonemapParams(self.key_a, self.l_white)
        return [tonemap_reinhard(check_radiance(E, f"item {i}"), p) for i, E in enumerate(X)]
