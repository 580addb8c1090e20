"""Single-image exposure bracketing: learn to re-expose an LDR image, then
merge the generated bracket into an HDR radiance map."""

from .brackets import generate_exposure, generate_stack
from .estimators import BracketMerger, ExposureBracketGenerator, ReinhardToneMapper
from .hdr import MergeConfig, TonemapParams, merge, tonemap_reinhard
from .imaging import (Crf, ExposureMeta, ExposureStack, LdrImage, RadianceMap, apply_crf, invert_crf,
                      load_dorf, simulate_ldr, synth_dataset, synth_stack)
from .masking import MaskConfig, well_exposed_mask
from .model import NetConfig, build_model, load_checkpoint, save_checkpoint
from .quality import evaluate_hdr, evaluate_stacks, psnr, ssim
from .trainer import TrainConfig, TrainState, fit

__version__ = "0.1.0"

__all__ = [
    "BracketMerger", "Crf", "ExposureBracketGenerator", "ExposureMeta", "ExposureStack", "LdrImage",
    "MaskConfig", "MergeConfig", "NetConfig", "RadianceMap", "ReinhardToneMapper", "TonemapParams",
    "TrainConfig", "TrainState", "apply_crf", "build_model", "evaluate_hdr", "evaluate_stacks", "fit",
    "generate_exposure", "generate_stack", "invert_crf", "load_checkpoint", "load_dorf", "merge", "psnr",
    "save_checkpoint", "simulate_ldr", "ssim", "synth_dataset", "synth_stack", "tonemap_reinhard",
    "well_exposed_mask",
]
