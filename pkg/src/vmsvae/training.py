"""KL-regularised VMS reconstruction objective and the training loop."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .data import AugmentConfig, Dataset, VmsMap, augment_sample
from .model import ModelConfig, VmsVae, pixels_tensor, reparameterize

log = logging.getLogger(__name__)

EPS = 1e-7


class TrainingError(RuntimeError):
    pass


class NonFiniteLossError(TrainingError):
    def __init__(self, term: str, history: "TrainHistory"):
        super().__init__(f"non-finite {term} term")
        self.term = term
        self.history = history


# ---------------------------------------------------------------- loss terms


def kl_terms(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """KL(N(mu, exp(logvar)) || N(0, I)) summed over the last dimension."""
    return 0.5 * torch.sum(torch.exp(logvar) + mu * mu - 1.0 - logvar, dim=-1)


def recon_terms(pred: torch.Tensor, target: torch.Tensor, mode: str) -> torch.Tensor:
    """Per-example reconstruction, summed over every cell but the batch axis."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    dims = tuple(range(1, pred.dim()))
    if mode == "log-likelihood":
        p = pred.clamp(EPS, 1.0 - EPS)
        nll = -(target * torch.log(p) + (1.0 - target) * torch.log1p(-p))
        return nll.sum(dim=dims)
    if mode == "l1":
        return (pred - target).abs().sum(dim=dims)
    raise ValueError(f"unknown reconstruction mode {mode!r}")


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, VmsMap):
        x = x.stack()
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def kl_divergence(mu, logvar) -> float:
    mu, logvar = _as_tensor(mu), _as_tensor(logvar)
    if mu.shape != logvar.shape:
        raise ValueError("mu and logvar must have the same length")
    return float(kl_terms(mu, logvar))


def reconstruction_loss(pred, target, mode: str = "log-likelihood") -> float:
    p, t = _as_tensor(pred), _as_tensor(target)
    return float(recon_terms(p.unsqueeze(0), t.unsqueeze(0), mode)[0])


def l2_penalty(state: VmsVae) -> torch.Tensor:
    return state.config.l2_coefficient * sum(torch.sum(k * k) for k in state.decoder.conv_kernels())


@dataclass(frozen=True)
class LossBreakdown:
    reconstruction: float
    kl: float
    l2_penalty: float
    total: float

    def to_dict(self) -> dict:
        return asdict(self)


def loss_tensors(state: VmsVae, feats: torch.Tensor, targets: torch.Tensor, noise: torch.Tensor):
    """(total, recon, kl, l2) as tensors for one batch of backbone features."""
    mu, logvar = state.encode_features(feats)
    z = reparameterize(mu, logvar, noise)
    pred = state.decoder(z)
    recon = recon_terms(pred, targets.to(pred.dtype), state.config.recon_mode).mean()
    kl = kl_terms(mu, logvar).mean()
    l2 = l2_penalty(state)
    return recon + kl + l2, recon, kl, l2


def _check_terms(recon, kl, l2, history: "TrainHistory"):
    for name, t in (("reconstruction", recon), ("kl", kl), ("l2_penalty", l2)):
        if not torch.isfinite(t):
            raise NonFiniteLossError(name, history)


def _breakdown(recon, kl, l2) -> LossBreakdown:
    r, k, l = float(recon), float(kl), float(l2)
    return LossBreakdown(r, k, l, r + k + l)


def _stack_batch(batch):
    px = torch.cat([pixels_tensor(x) for x, _ in batch])
    ys = torch.stack([_as_tensor(y) for _, y in batch])
    return px, ys


def total_loss(state: VmsVae, batch: Sequence, generator: Optional[torch.Generator] = None,
               noise: Optional[torch.Tensor] = None) -> LossBreakdown:
    """Mean over the batch of reconstruction + KL, plus the decoder l2 penalty.

    ``batch`` is a sequence of (image, target VmsMap) pairs. One standard
    normal noise vector per example is drawn from ``generator`` unless
    ``noise`` is given.
    """
    if not batch:
        raise ValueError("empty batch")
    if any(y is None for _, y in batch):
        raise ValueError("every example needs a target map")
    px, ys = _stack_batch(batch)
    feats = state.features(px)
    if noise is None:
        noise = torch.randn(len(batch), state.config.m, generator=generator, dtype=feats.dtype)
    with torch.no_grad():
        _, recon, kl, l2 = loss_tensors(state, feats, ys, noise)
    _check_terms(recon, kl, l2, TrainHistory(state.config.to_dict()))
    return _breakdown(recon, kl, l2)


# ---------------------------------------------------------------- history


@dataclass
class TrainHistory:
    config: dict
    epochs: list[dict] = field(default_factory=list)
    step_totals: list[float] = field(default_factory=list)
    step_recon: list[float] = field(default_factory=list)
    validation: Optional[dict] = None
    failure: Optional[str] = None

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.epochs)

    def write(self, path) -> None:
        Path(path).write_text(self.to_jsonl())


# ---------------------------------------------------------------- loop


class _BatchStream:
    """Seeded reshuffling index stream; batches never exceed the dataset size."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        self.n, self.size, self.rng = n, min(batch_size, n), rng
        self.order: list[int] = []

    def next(self) -> list[int]:
        if len(self.order) < self.size:
            self.order = self.order + self.rng.permutation(self.n).tolist()
        out, self.order = self.order[: self.size], self.order[self.size:]
        return out


def _feature_bank(state: VmsVae, ds: Dataset, chunk: int = 16) -> torch.Tensor:
    parts = []
    for i in range(0, len(ds), chunk):
        px = torch.cat([pixels_tensor(s) for s in ds.samples[i: i + chunk]])
        parts.append(state.features(px))
    return torch.cat(parts)


def train(state: VmsVae, train_ds: Dataset, cfg: Optional[ModelConfig] = None,
          aug: Optional[AugmentConfig] = None, *, history_path=None,
          feature_bank: Optional[torch.Tensor] = None) -> tuple[VmsVae, TrainHistory]:
    """Run epochs x steps_per_epoch Adam updates of the head and decoder.

    With ``aug`` every batch is freshly augmented and pushed through the
    backbone. Without it, backbone features are computed once and reused,
    which is exact because the backbone is frozen and deterministic.
    """
    cfg = cfg or state.config
    if (cfg.n, cfg.m) != (state.config.n, state.config.m):
        raise TrainingError(f"config n={cfg.n}, m={cfg.m} does not match the model")
    state.config = cfg
    if not train_ds.labeled:
        raise TrainingError("training needs a labeled dataset")

    history = TrainHistory(cfg.to_dict())
    if cfg.epochs == 0:
        return state, history

    targets = torch.stack([torch.from_numpy(s.vms.stack()) for s in train_ds])
    if aug is None and feature_bank is None:
        feature_bank = _feature_bank(state, train_ds)
    rng = np.random.default_rng(cfg.seed)
    aug_rng = np.random.default_rng(aug.seed) if aug is not None else None
    noise_gen = torch.Generator().manual_seed(cfg.seed)
    stream = _BatchStream(len(train_ds), cfg.batch_size, rng)
    optimizer = torch.optim.Adam(state.trainable_parameters(), lr=cfg.learning_rate)
    dtype = state.head.compress.weight.dtype

    state.train()
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        sums = np.zeros(3)
        for _ in range(cfg.steps_per_epoch):
            idx = stream.next()
            if aug is None:
                feats, ys = feature_bank[idx], targets[idx]
            else:
                batch = [augment_sample(train_ds[i], aug, aug_rng) for i in idx]
                px = torch.cat([pixels_tensor(s) for s in batch])
                feats = state.features(px)
                ys = torch.stack([torch.from_numpy(s.vms.stack()) for s in batch])
            noise = torch.randn(len(idx), cfg.m, generator=noise_gen, dtype=dtype)
            try:
                total, recon, kl, l2 = loss_tensors(state, feats, ys, noise)
                _check_terms(recon, kl, l2, history)
            except NonFiniteLossError as exc:
                history.failure = str(exc)
                state.eval()
                raise
            except FloatingPointError as exc:
                history.failure = str(exc)
                state.eval()
                raise NonFiniteLossError(getattr(exc, "layer", "activation"), history) from exc
            optimizer.zero_grad(set_to_none=True)
            total.backward()
            optimizer.step()
            terms = np.array([recon.item(), kl.item(), l2.item()])
            sums += terms
            history.step_totals.append(float(terms.sum()))
            history.step_recon.append(float(terms[0]))
        means = sums / cfg.steps_per_epoch
        record = {"epoch": epoch + 1, "recon": means[0], "kl": means[1], "l2": means[2],
                  "total": float(means.sum()), "seconds": time.perf_counter() - t0}
        history.epochs.append(record)
        log.info("epoch %d/%d total=%.2f recon=%.2f kl=%.3f l2=%.4f", epoch + 1, cfg.epochs,
                 record["total"], record["recon"], record["kl"], record["l2"])
        if history_path is not None:
            history.write(history_path)
    state.eval()
    return state, history
