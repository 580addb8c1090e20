"""The three U-Net subnetworks and the latent exposure scaling between them.

``BracketNet`` bundles the irradiance encoder (image -> latent sensor
exposure in [0, 1]) with the up- and down-exposure decoders (scaled latent ->
image in [0, 1]).
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .imaging import ExposureMeta

UP = "up"
DOWN = "down"

CHECKPOINT_MAGIC = b"HDRBKCK\x00"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NetConfig:
    levels: int = 7
    base_features_encoder: int = 16
    base_features_exposure: int = 32
    max_features_encoder: int = 256
    max_features_exposure: int = 512
    share_exposure_nets: bool = False
    leaky_slope: float = 0.2
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    icnr_init: bool = False

    def __post_init__(self):
        if self.levels < 2:
            raise ValueError(f"levels must be >= 2, got {self.levels}")
        for name in ("base_features_encoder", "base_features_exposure",
                     "max_features_encoder", "max_features_exposure"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.max_features_encoder < self.base_features_encoder:
            raise ValueError("max_features_encoder is below base_features_encoder")
        if self.max_features_exposure < self.base_features_exposure:
            raise ValueError("max_features_exposure is below base_features_exposure")
        if not 0 < self.bn_momentum <= 1 or self.bn_eps <= 0:
            raise ValueError("invalid batch-norm settings")

    @classmethod
    def toy(cls, **overrides) -> "NetConfig":
        """Small configuration used for desk-scale runs and tests."""
        base = dict(levels=4, base_features_encoder=8, base_features_exposure=16)
        base.update(overrides)
        return cls(**base)

    @property
    def size_multiple(self) -> int:
        return 2 ** (self.levels - 1)

    def widths(self, which: str) -> list[int]:
        if which == "encoder":
            base, cap = self.base_features_encoder, self.max_features_encoder
        else:
            base, cap = self.base_features_exposure, self.max_features_exposure
        return [min(base * 2**i, cap) for i in range(self.levels)]


def tanh_norm(x):
    return 0.5 * (torch.tanh(x) + 1.0)


def _icnr_(weight: torch.Tensor, scale: int = 2) -> None:
    out_ch, in_ch, kh, kw = weight.shape
    sub = torch.empty(out_ch // scale**2, in_ch, kh, kw)
    nn.init.kaiming_normal_(sub)
    with torch.no_grad():
        weight.copy_(sub.repeat_interleave(scale**2, dim=0))


class ConvBlock(nn.Sequential):
    """Two 3x3 convolutions, each followed by batch norm and an activation."""

    def __init__(self, in_ch, out_ch, cfg: NetConfig, leaky: bool):
        layers = []
        for c_in in (in_ch, out_ch):
            layers += [
                nn.Conv2d(c_in, out_ch, 3, stride=1, padding=1),
                nn.BatchNorm2d(out_ch, eps=cfg.bn_eps, momentum=cfg.bn_momentum),
                nn.LeakyReLU(cfg.leaky_slope) if leaky else nn.ReLU(),
            ]
        super().__init__(*layers)


class SubPixelUp(nn.Module):
    def __init__(self, in_ch, out_ch, cfg: NetConfig):
        super().__init__()
        self.expand = nn.Conv2d(in_ch, out_ch * 4, 3, padding=1)
        if cfg.icnr_init:
            _icnr_(self.expand.weight)
        self.shuffle = nn.PixelShuffle(2)
        self.conv = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.bn = nn.BatchNorm2d(out_ch, eps=cfg.bn_eps, momentum=cfg.bn_momentum)
        self.act = nn.LeakyReLU(cfg.leaky_slope)

    def forward(self, x):
        return self.act(self.bn(self.conv(self.shuffle(self.expand(x)))))


class UNet(nn.Module):
    """U-shaped encoder/decoder returning the raw 3-channel pre-activation."""

    def __init__(self, widths: list[int], cfg: NetConfig, in_ch: int = 3, out_ch: int = 3):
        super().__init__()
        self.down = nn.ModuleList()
        prev = in_ch
        for w in widths:
            self.down.append(ConvBlock(prev, w, cfg, leaky=False))
            prev = w
        self.up = nn.ModuleList()
        self.merge = nn.ModuleList()
        for i in range(len(widths) - 1, 0, -1):
            self.up.append(SubPixelUp(widths[i], widths[i - 1], cfg))
            self.merge.append(ConvBlock(2 * widths[i - 1], widths[i - 1], cfg, leaky=True))
        self.head = nn.Conv2d(widths[0], out_ch, 1)

    def forward(self, x):
        skips = []
        for i, block in enumerate(self.down):
            if i:
                x = F.max_pool2d(x, 2)
            x = block(x)
            skips.append(x)
        skips.pop()
        for up, merge in zip(self.up, self.merge):
            x = merge(torch.cat([up(x), skips.pop()], dim=1))
        return self.head(x)


def _pad_to_multiple(x: torch.Tensor, multiple: int):
    h, w = x.shape[-2:]
    ph, pw = (-h) % multiple, (-w) % multiple
    if not (ph or pw):
        return x, (h, w)
    mode = "reflect" if ph < h and pw < w else "replicate"
    return F.pad(x, (0, pw, 0, ph), mode=mode), (h, w)


class BracketNet(nn.Module):
    """Encoder N1 plus up/down exposure nets N2/N3 (optionally one shared net)."""

    def __init__(self, config: NetConfig):
        super().__init__()
        self.config = config
        self.encoder = UNet(config.widths("encoder"), config)
        self.up_net = UNet(config.widths("exposure"), config)
        self.down_net = self.up_net if config.share_exposure_nets else UNet(config.widths("exposure"), config)
        self.seed = None

    def _run(self, net: nn.Module, x: torch.Tensor) -> torch.Tensor:
        xp, (h, w) = _pad_to_multiple(x, self.config.size_multiple)
        return net(xp)[..., :h, :w]

    def encode(self, masked: torch.Tensor) -> torch.Tensor:
        """Latent sensor exposure ``(tanh(F) + I + 1) / 3`` in [0, 1]."""
        return (torch.tanh(self._run(self.encoder, masked)) + masked + 1.0) / 3.0

    def exposure_net(self, direction: str) -> nn.Module:
        if direction == UP:
            return self.up_net
        if direction == DOWN:
            return self.down_net
        raise ValueError(f"direction must be {UP!r} or {DOWN!r}, got {direction!r}")

    def expose(self, latent: torch.Tensor, direction: str) -> torch.Tensor:
        return tanh_norm(self._run(self.exposure_net(direction), latent))

    def forward(self, masked, ratio, direction):
        latent = self.encode(masked)
        return self.expose(latent * _as_ratio(ratio, latent), direction)

    def parameter_groups(self) -> dict[str, list[nn.Parameter]]:
        groups = {"encoder": list(self.encoder.parameters()), "up": list(self.up_net.parameters())}
        if not self.config.share_exposure_nets:
            groups["down"] = list(self.down_net.parameters())
        return groups


def _as_ratio(ratio, like: torch.Tensor) -> torch.Tensor:
    r = torch.as_tensor(ratio, dtype=like.dtype, device=like.device)
    return r.reshape(-1, 1, 1, 1) if r.ndim else r


# ModelWeights in the operation vocabulary is simply a BracketNet instance.
ModelWeights = BracketNet


def build_model(config: NetConfig | None = None, seed: int = 0) -> BracketNet:
    """Construct all subnetworks with deterministic initialization."""
    config = config or NetConfig()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = BracketNet(config)
    model.seed = seed
    return model


@dataclass
class LatentExposure:
    values: torch.Tensor
    meta: ExposureMeta


def encode_irradiance(model: BracketNet, masked, meta: ExposureMeta | None = None) -> LatentExposure:
    x = _to_tensor(masked)
    return LatentExposure(model.encode(x), meta or ExposureMeta.from_ev(0.0))


def scale_latent(x: LatentExposure, target: ExposureMeta) -> LatentExposure:
    if not target.delta_t > 0:
        raise ValueError(f"target delta_t must be positive, got {target.delta_t}")
    return LatentExposure(x.values * (target.delta_t / x.meta.delta_t), target)


def exposure_forward(model: BracketNet, x_scaled, direction: str) -> torch.Tensor:
    values = x_scaled.values if isinstance(x_scaled, LatentExposure) else _to_tensor(x_scaled)
    return model.expose(values, direction)


def _to_tensor(x) -> torch.Tensor:
    """HxWx3 / NxHxWx3 arrays become NCHW float32 tensors; tensors pass through."""
    if isinstance(x, torch.Tensor):
        return x
    arr = np.asarray(x, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


def to_image(t: torch.Tensor) -> np.ndarray:
    """Inverse of ``_to_tensor`` for a single image: NCHW -> HxWx3 float64."""
    return t.detach().cpu().double().numpy()[0].transpose(1, 2, 0)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_DTYPES = {torch.float32: "<f4", torch.float64: "<f8", torch.int64: "<i8"}


def save_checkpoint(path, model: BracketNet, step: int = 0, optimizer=None, state: dict | None = None):
    """Write a self-describing checkpoint.

    Layout: 8-byte magic, u32 version, u64 header length, UTF-8 JSON header,
    then raw little-endian tensor payloads at the offsets listed in the header.
    """
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()
               if not (model.config.share_exposure_nets and k.startswith("down_net."))}
    header = {
        "format": "hdrbracket-checkpoint",
        "config": asdict(model.config),
        "seed": model.seed,
        "step": int(step),
        "state": state or {},
        "optimizer": None,
    }
    if optimizer is not None:
        osd = optimizer.state_dict()
        for idx, st in osd["state"].items():
            for key, val in st.items():
                tensors[f"optim.{idx}.{key}"] = torch.as_tensor(val)
        header["optimizer"] = {"param_groups": osd["param_groups"],
                               "state_keys": {str(i): sorted(st) for i, st in osd["state"].items()}}
    index, blobs, offset = [], [], 0
    for name, t in tensors.items():
        t = t.detach().cpu().contiguous()
        arr = t.numpy().astype(_DTYPES[t.dtype], copy=False)
        raw = arr.tobytes()
        index.append({"name": name, "dtype": _DTYPES[t.dtype], "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header["tensors"] = index
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(hbytes)))
        fh.write(hbytes)
        for raw in blobs:
            fh.write(raw)


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<IQ", data, len(CHECKPOINT_MAGIC))
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    start = len(CHECKPOINT_MAGIC) + 12
    header = json.loads(data[start:start + hlen].decode("utf-8"))
    base = start + hlen
    arrays = {}
    for ent in header["tensors"]:
        lo = base + ent["offset"]
        if lo + ent["nbytes"] > len(data):
            raise ValueError(f"{path}: truncated tensor {ent['name']}")
        arr = np.frombuffer(data, dtype=ent["dtype"], count=int(np.prod(ent["shape"], dtype=np.int64)),
                            offset=lo)
        arrays[ent["name"]] = arr.reshape(ent["shape"])
    return header, arrays


def load_checkpoint(path, optimizer_factory=None):
    """Return ``(model, step, optimizer_or_None, state)``."""
    header, arrays = read_checkpoint(path)
    config = NetConfig(**header["config"])
    model = BracketNet(config)
    model.seed = header.get("seed")
    sd = {k[len("model."):]: torch.from_numpy(v.copy()) for k, v in arrays.items() if k.startswith("model.")}
    if config.share_exposure_nets:
        sd.update({"down_net." + k[len("up_net."):]: v for k, v in list(sd.items()) if k.startswith("up_net.")})
    model.load_state_dict(sd)
    optimizer = None
    if optimizer_factory is not None:
        optimizer = optimizer_factory(model)
        if header.get("optimizer"):
            opt = header["optimizer"]
            state = {}
            for idx, keys in opt["state_keys"].items():
                state[int(idx)] = {k: torch.from_numpy(arrays[f"optim.{idx}.{k}"].copy()) for k in keys}
            groups = opt["param_groups"]
            for g in groups:
                if "betas" in g:
                    g["betas"] = tuple(g["betas"])
            optimizer.load_state_dict({"state": state, "param_groups": groups})
    return model, header["step"], optimizer, header.get("state", {})

