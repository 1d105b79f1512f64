"""Frozen VGG16 encoder, variational bottleneck and upsampling VMS decoder."""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn
import torchvision

from .data import IMAGE_SIZE, VmsMap

log = logging.getLogger(__name__)

RECON_MODES = ("log-likelihood", "l1")
FORMAT_VERSION = 1
WEIGHTS_ENV = "VMSVAE_BACKBONE_WEIGHTS"
VGG16_CHECKPOINT = "vgg16-397923af.pth"
RANDOM_BACKBONE_SEED = 0

# torchvision's ImageNet normalisation for VGG16 weights
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

DECODER_BASE = 7
DECODER_WIDTHS = (128, 128, 64, 32, 16)


class ModelError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    def __init__(self, layer: str):
        super().__init__(f"non-finite activation in {layer}")
        self.layer = layer


@dataclass(frozen=True)
class ModelConfig:
    n: int = 128
    m: int = 32
    recon_mode: str = "log-likelihood"
    l2_coefficient: float = 0.02
    learning_rate: float = 1e-4
    batch_size: int = 32
    epochs: int = 250
    steps_per_epoch: int = 20
    seed: int = 0

    def __post_init__(self):
        if not self.n >= self.m >= 1:
            raise ValueError(f"need n >= m >= 1, got n={self.n}, m={self.m}")
        if self.recon_mode not in RECON_MODES:
            raise ValueError(f"recon_mode must be one of {RECON_MODES}, got {self.recon_mode!r}")
        if self.l2_coefficient <= 0 or self.learning_rate <= 0:
            raise ValueError("l2_coefficient and learning_rate must be positive")
        if self.batch_size < 1 or self.steps_per_epoch < 1 or self.epochs < 0:
            raise ValueError("batch_size and steps_per_epoch must be >= 1, epochs >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# ---------------------------------------------------------------- backbone


def tensor_digest(tensors: dict[str, torch.Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(tensors):
        t = tensors[name].detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


def module_digest(module: nn.Module) -> str:
    return tensor_digest(dict(module.state_dict()))


def _find_vgg_weights(weights: Optional[os.PathLike]) -> Optional[Path]:
    if weights:
        p = Path(weights)
        if not p.is_file():
            raise ModelError(f"backbone weights file {p} not found")
        return p
    env = os.environ.get(WEIGHTS_ENV)
    if env:
        return _find_vgg_weights(env)
    cached = Path(torch.hub.get_dir()) / "checkpoints" / VGG16_CHECKPOINT
    return cached if cached.is_file() else None


def load_backbone(weights: Optional[os.PathLike] = None) -> tuple[nn.Module, str]:
    """VGG16 convolutional stack (224x224x3 -> 512x7x7) and its source tag.

    Weights come from ``weights``, the ``VMSVAE_BACKBONE_WEIGHTS`` file or the
    torch hub cache. Without any of them a seeded random initialisation is
    used and the source is tagged ``random-init``.
    """
    path = _find_vgg_weights(weights)
    if path is None:
        log.warning("no pretrained VGG16 weights found; using seeded random initialisation")
        with torch.random.fork_rng():
            torch.manual_seed(RANDOM_BACKBONE_SEED)
            vgg = torchvision.models.vgg16(weights=None)
        source = "random-init"
    else:
        vgg = torchvision.models.vgg16(weights=None)
        try:
            state = torch.load(path, map_location="cpu", weights_only=True)
        except Exception as exc:
            raise ModelError(f"cannot read backbone weights {path}: {exc}") from exc
        if any(k.startswith("features.") for k in state):
            state = {k: v for k, v in state.items() if k.startswith("features.")}
            vgg.load_state_dict(state, strict=False)
        else:
            vgg.features.load_state_dict(state)
        source = str(path)
    return vgg.features, source


class Preprocess(nn.Module):
    """uint8 NHWC pixels -> normalised float NCHW."""

    def __init__(self, mean=IMAGENET_MEAN, std=IMAGENET_STD):
        super().__init__()
        self.register_buffer("mean", torch.tensor(mean).view(1, 3, 1, 1), persistent=False)
        self.register_buffer("std", torch.tensor(std).view(1, 3, 1, 1), persistent=False)

    def forward(self, pixels: torch.Tensor) -> torch.Tensor:
        x = pixels.permute(0, 3, 1, 2).to(self.mean.dtype) / 255.0
        return (x - self.mean) / self.std


# ---------------------------------------------------------------- trainable parts


class EncoderHead(nn.Module):
    def __init__(self, in_features: int, n: int, m: int):
        super().__init__()
        self.compress = nn.Linear(in_features, n)
        self.mu = nn.Linear(n, m)
        self.logvar = nn.Linear(n, m)

    def forward(self, feats: torch.Tensor):
        h = torch.relu(self.compress(feats.flatten(1)))
        _check("head.compress", h)
        mu, logvar = self.mu(h), self.logvar(h)
        _check("head.mu", mu)
        _check("head.logvar", logvar)
        return mu, logvar


class Decoder(nn.Module):
    """Dense projection to a base grid, then stride-2 transposed convolutions.

    Every stage doubles the spatial size; hidden stages are followed by
    batch normalisation and a rectifier, the last by a logistic squashing.
    """

    def __init__(self, m: int, base: int = DECODER_BASE, widths: Sequence[int] = DECODER_WIDTHS,
                 out_channels: int = 2):
        super().__init__()
        self.base = base
        self.widths = tuple(widths)
        self.project = nn.Linear(m, widths[0] * base * base)
        stages = []
        chans = list(widths) + [out_channels]
        for i in range(len(widths)):
            conv = nn.ConvTranspose2d(chans[i], chans[i + 1], kernel_size=4, stride=2, padding=1)
            last = i == len(widths) - 1
            stages.append(nn.Sequential(conv) if last else nn.Sequential(conv, nn.BatchNorm2d(chans[i + 1]), nn.ReLU()))
        self.stages = nn.ModuleList(stages)

    @property
    def output_size(self) -> int:
        return self.base * 2 ** len(self.stages)

    def conv_kernels(self) -> list[torch.Tensor]:
        return [stage[0].weight for stage in self.stages]

    def logits(self, z: torch.Tensor, trace: Optional[list] = None) -> torch.Tensor:
        h = torch.relu(self.project(z)).view(-1, self.widths[0], self.base, self.base)
        _check("decoder.project", h)
        for i, stage in enumerate(self.stages):
            h = stage(h)
            _check(f"decoder.stage{i + 1}", h)
            if trace is not None:
                trace.append(tuple(h.shape[-2:]))
        return h

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits(z))


def _check(layer: str, t: torch.Tensor) -> None:
    if not torch.isfinite(t).all():
        raise NonFiniteError(layer)


class VmsVae(nn.Module):
    """Model state: frozen backbone, trainable head and decoder, config."""

    def __init__(self, config: ModelConfig, backbone: nn.Module, backbone_source: str = "custom",
                 image_size: int = IMAGE_SIZE, decoder_base: int = DECODER_BASE,
                 decoder_widths: Sequence[int] = DECODER_WIDTHS):
        super().__init__()
        self.config = config
        self.image_size = image_size
        self.backbone_source = backbone_source
        self.preprocess = Preprocess()
        self.backbone = backbone
        for p in self.backbone.parameters():
            p.requires_grad_(False)
        self.backbone.eval()
        with torch.no_grad():
            dummy = torch.zeros(1, image_size, image_size, 3, dtype=torch.uint8)
            self.feature_shape = tuple(self.backbone(self.preprocess(dummy)).shape[1:])
        with torch.random.fork_rng():
            torch.manual_seed(config.seed)
            self.head = EncoderHead(int(np.prod(self.feature_shape)), config.n, config.m)
            self.decoder = Decoder(config.m, decoder_base, decoder_widths)

    def train(self, mode: bool = True):
        super().train(mode)
        self.backbone.eval()
        return self

    def trainable_parameters(self) -> list[nn.Parameter]:
        return list(self.head.parameters()) + list(self.decoder.parameters())

    def trainable_state(self) -> dict[str, torch.Tensor]:
        return {k: v for k, v in self.state_dict().items() if not k.startswith("backbone.")}

    def backbone_digest(self) -> str:
        return module_digest(self.backbone)

    def features(self, pixels: torch.Tensor) -> torch.Tensor:
        """Backbone activations for a uint8 NHWC batch (never tracked by autograd)."""
        with torch.no_grad():
            f = self.backbone(self.preprocess(pixels).to(self.head.compress.weight.dtype))
        _check("backbone", f)
        return f

    def encode_features(self, feats: torch.Tensor):
        return self.head(feats)

    def forward(self, pixels: torch.Tensor):
        return self.encode_features(self.features(pixels))


def build_model(config: ModelConfig, backbone: Optional[nn.Module] = None,
                backbone_weights: Optional[os.PathLike] = None, **kwargs) -> VmsVae:
    source = kwargs.pop("backbone_source", "custom")
    if backbone is None:
        backbone, source = load_backbone(backbone_weights)
    return VmsVae(config, backbone, source, **kwargs)


# ---------------------------------------------------------------- operations


def pixels_tensor(image) -> torch.Tensor:
    """uint8 tensor (B, H, W, 3) from an ImageSample, an HxWx3 or a BxHxWx3 array."""
    if isinstance(image, torch.Tensor):
        t = image
    else:
        t = torch.from_numpy(np.array(getattr(image, "pixels", image), dtype=np.uint8))
    return t.unsqueeze(0) if t.dim() == 3 else t


def encode(state: VmsVae, image) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and log-variance for one image (ImageSample or HxWx3 pixels)."""
    was_training = state.training
    state.eval()
    try:
        with torch.no_grad():
            mu, logvar = state(pixels_tensor(image))
    finally:
        state.train(was_training)
    return mu[0].double().numpy(), logvar[0].double().numpy()


def reparameterize(mu, logvar, noise):
    """z = mu + exp(logvar / 2) * noise. Works on numpy arrays and tensors."""
    if isinstance(mu, torch.Tensor):
        return mu + torch.exp(0.5 * logvar) * noise
    mu, logvar, noise = (np.asarray(a, dtype=np.float64) for a in (mu, logvar, noise))
    if not mu.shape == logvar.shape == noise.shape:
        raise ValueError("mu, logvar and noise must have the same shape")
    return mu + np.exp(0.5 * logvar) * noise


def decode_batch(state: VmsVae, z: torch.Tensor) -> torch.Tensor:
    was_training = state.training
    state.eval()
    try:
        with torch.no_grad():
            return state.decoder(z.to(state.decoder.project.weight.dtype))
    finally:
        state.train(was_training)


def decode(state: VmsVae, z) -> VmsMap:
    z = torch.as_tensor(np.asarray(z, dtype=np.float32)).reshape(1, -1)
    if z.shape[1] != state.config.m:
        raise ValueError(f"latent vector has length {z.shape[1]}, model expects {state.config.m}")
    return VmsMap.from_stack(decode_batch(state, z)[0].float().numpy())


def predict_batch(state: VmsVae, pixels: torch.Tensor) -> torch.Tensor:
    """(B, 2, H, W) maps decoded from the posterior means."""
    was_training = state.training
    state.eval()
    try:
        with torch.no_grad():
            mu, _ = state(pixels)
            return state.decoder(mu)
    finally:
        state.train(was_training)


def predict_vms(state: VmsVae, image) -> VmsMap:
    return VmsMap.from_stack(predict_batch(state, pixels_tensor(image))[0].float().numpy())


def predict_many(state: VmsVae, images: Sequence, batch_size: int = 16) -> list[VmsMap]:
    out = []
    for i in range(0, len(images), batch_size):
        px = torch.stack([pixels_tensor(im)[0] for im in images[i: i + batch_size]])
        out.extend(VmsMap.from_stack(a) for a in predict_batch(state, px).float().numpy())
    return out


# ---------------------------------------------------------------- checkpoints


def manifest_path(path: os.PathLike) -> Path:
    return Path(path).with_suffix(".json")


def save_model(state: VmsVae, path: os.PathLike) -> Path:
    """Write trainable weights to ``path`` and a JSON manifest beside it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(state.trainable_state(), path)
    cfg = state.config
    manifest = {
        "format_version": FORMAT_VERSION,
        "n": cfg.n,
        "m": cfg.m,
        "recon_mode": cfg.recon_mode,
        "seed": cfg.seed,
        "backbone_digest": state.backbone_digest(),
        "backbone_source": state.backbone_source,
        "config": cfg.to_dict(),
        "architecture": {
            "image_size": state.image_size,
            "decoder_base": state.decoder.base,
            "decoder_widths": list(state.decoder.widths),
        },
    }
    manifest_path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(path: os.PathLike) -> dict:
    mpath = manifest_path(path)
    try:
        manifest = json.loads(mpath.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ModelError(f"cannot read model manifest {mpath}: {exc}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ModelError(f"unsupported checkpoint format version {manifest.get('format_version')!r}")
    return manifest


def load_model(path: os.PathLike, backbone: Optional[nn.Module] = None,
               backbone_weights: Optional[os.PathLike] = None) -> VmsVae:
    path = Path(path)
    manifest = read_manifest(path)
    cfg = ModelConfig.from_dict(manifest["config"])
    if (cfg.n, cfg.m, cfg.recon_mode) != (manifest["n"], manifest["m"], manifest["recon_mode"]):
        raise ModelError("manifest fields disagree with its config block")
    try:
        weights = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise ModelError(f"corrupt checkpoint {path}: {exc}") from exc
    mu_w = weights.get("head.mu.weight")
    if mu_w is None or mu_w.shape[0] != manifest["m"]:
        got = None if mu_w is None else mu_w.shape[0]
        raise ModelError(f"checkpoint latent size {got} does not match manifest m={manifest['m']}")
    arch = manifest["architecture"]
    state = build_model(cfg, backbone=backbone, backbone_weights=backbone_weights,
                        image_size=arch["image_size"], decoder_base=arch["decoder_base"],
                        decoder_widths=tuple(arch["decoder_widths"]))
    if state.backbone_digest() != manifest["backbone_digest"]:
        raise ModelError(
            f"backbone digest mismatch: checkpoint was trained with {manifest['backbone_source']!r}"
        )
    try:
        state.load_state_dict(weights, strict=False)
        missing = set(state.trainable_state()) - set(weights)
        if missing:
            raise ModelError(f"checkpoint missing tensors: {sorted(missing)[:5]}")
    except RuntimeError as exc:
        raise ModelError(f"checkpoint does not fit the architecture: {exc}") from exc
    state.eval()
    return state
