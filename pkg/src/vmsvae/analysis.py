"""Latent-space embedding, 2D projection and plot-ready report tables."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
import torch

from .data import LEAF_LABELS, LEAVES, CategoryPath, Dataset
from .metrics import SCORE_FIELDS, CategoryReport, MapScore, mean_scores, memorability_from_map
from .model import VmsVae, pixels_tensor, predict_batch

VARIANTS = ("m32", "m8", "m8_l1")
VARIANT_LABELS = {"m32": "32", "m8": "8", "m8_l1": "8 and L1 norm"}
ROWS = (("True", "true"), ("False", "false"), ("All", "all"))


class AnalysisError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class EmbeddingRecord:
    image_id: str
    mu: np.ndarray
    true_mem: float
    false_mem: float
    category: CategoryPath


def _minmax(values: np.ndarray) -> np.ndarray:
    lo, hi = values.min(), values.max()
    if hi == lo:
        return np.zeros_like(values)
    return (values - lo) / (hi - lo)


def embed_dataset(state: VmsVae, ds: Dataset, batch_size: int = 16) -> list[EmbeddingRecord]:
    """Posterior means plus min-max normalised map memorability for every image."""
    mus, mems = [], []
    for i in range(0, len(ds), batch_size):
        chunk = ds.samples[i: i + batch_size]
        px = torch.cat([pixels_tensor(s) for s in chunk])
        was_training = state.training
        state.eval()
        with torch.no_grad():
            mu, _ = state(px)
        state.train(was_training)
        maps = predict_batch(state, px).double().numpy()
        mus.extend(mu.double().numpy())
        mems.extend((m[0].mean(), m[1].mean()) for m in maps)
    mems = np.asarray(mems, dtype=np.float64).reshape(-1, 2)
    t, f = _minmax(mems[:, 0]), _minmax(mems[:, 1])
    return [EmbeddingRecord(s.image_id, mu, float(a), float(b), s.category)
            for s, mu, a, b in zip(ds, mus, t, f)]


@dataclass(frozen=True, eq=False)
class Projection2D:
    coords: dict[str, tuple[float, float]]
    basis: np.ndarray   # (2, m)
    offset: np.ndarray  # (m,)
    fallback: bool = False

    def project(self, mu) -> np.ndarray:
        return (np.asarray(mu, dtype=np.float64) - self.offset) @ self.basis.T

    @property
    def explained_variance(self) -> float:
        return float(np.var(np.array(list(self.coords.values())), axis=0).sum())


def project_2d(records: Sequence[EmbeddingRecord]) -> Projection2D:
    """Principal-component projection of the posterior means.

    Each basis vector is signed so its largest-magnitude entry is positive.
    With fewer than two non-zero variance directions the first two latent
    axes are used instead and ``fallback`` is set.
    """
    if len(records) < 2:
        raise AnalysisError("need at least two records")
    X = np.stack([np.asarray(r.mu, dtype=np.float64) for r in records])
    if X.shape[1] < 2:
        raise AnalysisError("latent dimension must be at least 2")
    offset = X.mean(axis=0)
    Xc = X - offset
    _, s, vt = np.linalg.svd(Xc, full_matrices=False)
    tol = s.max(initial=0.0) * max(X.shape) * np.finfo(np.float64).eps
    fallback = int(np.sum(s > tol)) < 2
    if fallback:
        basis = np.eye(X.shape[1])[:2]
    else:
        basis = vt[:2].copy()
        for row in basis:
            if row[np.argmax(np.abs(row))] < 0:
                row *= -1.0
    uv = Xc @ basis.T
    coords = {r.image_id: (float(u), float(v)) for r, (u, v) in zip(records, uv)}
    return Projection2D(coords, basis, offset, fallback)


def embedding_csv(records: Sequence[EmbeddingRecord], proj: Projection2D) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["image_id", "u", "v", "true_mem", "false_mem", "leaf"])
    for r in records:
        u, v = proj.coords[r.image_id]
        w.writerow([r.image_id, repr(u), repr(v), repr(r.true_mem), repr(r.false_mem), r.category.leaf])
    return buf.getvalue()


# ---------------------------------------------------------------- tables


def _variant_summary(result) -> dict[str, float]:
    if isinstance(result, Mapping):
        return {k: float(result[k]) for k in SCORE_FIELDS}
    return mean_scores(list(result))


def build_table1(results: Mapping[str, object], variants: Sequence[str] = VARIANTS) -> dict:
    """Reconstruction table: True/False/All rows of rho and MSE per variant.

    ``results`` maps variant name to either a list of MapScore or a dict
    of already-averaged fields. Returns ``{"json": str, "text": str, "table": dict}``.
    """
    missing = [v for v in variants if v not in results]
    if missing:
        raise AnalysisError(f"missing variants: {', '.join(missing)}")
    table = {}
    for v in variants:
        means = _variant_summary(results[v])
        table[v] = {label: {"rho_2d": means[f"rho_{key}"], "mse": means[f"mse_{key}"]} for label, key in ROWS}
    text_lines = [f"{'Variant':<16}{'VMS':<7}{'rho2D':>9}{'MSE':>11}"]
    for v in variants:
        for i, (label, _) in enumerate(ROWS):
            name = VARIANT_LABELS.get(v, v) if i == 0 else ""
            cell = table[v][label]
            text_lines.append(f"{name:<16}{label:<7}{cell['rho_2d']:>9.3f}{cell['mse']:>11.3f}")
    return {"table": table, "json": json.dumps(table, indent=2, sort_keys=True) + "\n",
            "text": "\n".join(text_lines) + "\n"}


def build_category_figure(report: Optional[CategoryReport], field_name: str = "rho_all") -> str:
    """CSV rows (leaf, mean, std, count) in taxonomy order; empty leaves get count 0."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["leaf", "label", f"mean_{field_name}", "std", "count"])
    for leaf in LEAVES:
        row = report.leaves.get(leaf) if report is not None else None
        if not row or not row.get("count") or row.get(field_name, {}).get("mean") is None:
            w.writerow([leaf, LEAF_LABELS[leaf], "", "", 0])
            continue
        stats = row[field_name]
        w.writerow([leaf, LEAF_LABELS[leaf], repr(stats["mean"]), repr(stats["std"]), row["count"]])
    return buf.getvalue()


def write_text(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path
