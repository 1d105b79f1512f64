"""Map correlation, 8-bit MSE, rank correlation and per-category aggregation."""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy import stats

from .data import LEAVES, CategoryPath, VmsMap

log = logging.getLogger(__name__)

SCORE_FIELDS = ("rho_true", "rho_false", "rho_all", "mse_true", "mse_false", "mse_all")
MEM_FIELDS = ("true_mem", "false_mem")


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class Correlation:
    rho: float
    degenerate: bool = False


def pearson2d(a, b) -> Correlation:
    """Pearson coefficient of two equal-shape grids, flattened.

    A grid with zero variance gives rho = 0 flagged degenerate.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch: {np.shape(a)} vs {np.shape(b)}")
    da = a - a.mean()
    db = b - b.mean()
    saa, sbb = np.dot(da, da), np.dot(db, db)
    if saa == 0.0 or sbb == 0.0:
        return Correlation(0.0, True)
    rho = np.dot(da, db) / math.sqrt(saa * sbb)
    return Correlation(float(min(1.0, max(-1.0, rho))))


@dataclass(frozen=True)
class MapScore:
    image_id: str
    rho_true: float
    rho_false: float
    rho_all: float
    mse_true: float
    mse_false: float
    mse_all: float
    degenerate: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["degenerate"] = list(self.degenerate)
        return d


def _mse255(p: np.ndarray, g: np.ndarray) -> float:
    d = (p.astype(np.float64) - g.astype(np.float64)) * 255.0
    return float(np.mean(d * d))


def score_map(pred: VmsMap, gt: VmsMap, image_id: str = "") -> MapScore:
    if pred.shape != gt.shape:
        raise MetricError(f"{image_id}: prediction {pred.shape} vs ground truth {gt.shape}")
    ct = pearson2d(pred.true_channel, gt.true_channel)
    cf = pearson2d(pred.false_channel, gt.false_channel)
    pa, ga = pred.stack(), gt.stack()
    ca = pearson2d(pa, ga)
    degenerate = tuple(name for name, c in (("true", ct), ("false", cf), ("all", ca)) if c.degenerate)
    return MapScore(
        image_id,
        ct.rho, cf.rho, ca.rho,
        _mse255(pred.true_channel, gt.true_channel),
        _mse255(pred.false_channel, gt.false_channel),
        _mse255(pa, ga),
        degenerate,
    )


@dataclass(frozen=True)
class MemorabilityPair:
    image_id: str
    true_mem: float
    false_mem: float

    def __post_init__(self):
        for v in (self.true_mem, self.false_mem):
            if not 0.0 <= v <= 1.0:
                raise MetricError(f"{self.image_id}: memorability {v} outside [0, 1]")


def memorability_from_map(v: VmsMap, image_id: str = "") -> MemorabilityPair:
    t = float(np.mean(v.true_channel, dtype=np.float64))
    f = float(np.mean(v.false_channel, dtype=np.float64))
    return MemorabilityPair(image_id, min(max(t, 0.0), 1.0), min(max(f, 0.0), 1.0))


# ---------------------------------------------------------------- rank correlation


@dataclass(frozen=True)
class RankCorrelation:
    rho: float
    p: float
    n: int
    degenerate: bool = False

    def __iter__(self):
        # unpacks as (rho, p)
        return iter((self.rho, self.p))

    def to_dict(self) -> dict:
        return {"rho": self.rho, "p": self.p, "n": self.n, "degenerate": self.degenerate}


def _t_pvalue(rho: float, n: int) -> float:
    if abs(rho) >= 1.0:
        return 0.0
    t = rho * math.sqrt((n - 2) / (1.0 - rho * rho))
    return float(2.0 * stats.t.sf(abs(t), n - 2))


def _exact_pvalue(rx: np.ndarray, ry: np.ndarray, rho: float) -> float:
    """Two-sided permutation p-value over all orderings of ry."""
    hits = total = 0
    for perm in itertools.permutations(ry):
        r = pearson2d(rx, np.array(perm)).rho
        hits += abs(r) >= abs(rho) - 1e-12
        total += 1
    return hits / total


def spearman(xs: Sequence[float], ys: Sequence[float], exact: bool = False) -> RankCorrelation:
    """Pearson correlation of average ranks.

    The p-value uses the t approximation with n - 2 degrees of freedom
    (two-sided), or full permutation when ``exact`` and n <= 8.
    """
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise MetricError(f"length mismatch: {x.shape} vs {y.shape}")
    n = len(x)
    if n < 3:
        raise MetricError(f"need at least 3 pairs, got {n}")
    rx, ry = stats.rankdata(x), stats.rankdata(y)
    c = pearson2d(rx, ry)
    if c.degenerate:
        return RankCorrelation(0.0, 1.0, n, True)
    if exact and n <= 8:
        p = _exact_pvalue(rx, ry, c.rho)
    else:
        p = _t_pvalue(c.rho, n)
    return RankCorrelation(c.rho, p, n)


# ---------------------------------------------------------------- aggregation


@dataclass
class CategoryReport:
    """Per-leaf and overall mean/std of every score and memorability field."""

    leaves: dict[str, dict]
    overall: dict

    def leaf_means(self, field_name: str) -> list[Optional[float]]:
        return [self.leaves[leaf][field_name]["mean"] if self.leaves[leaf]["count"] else None for leaf in LEAVES]

    def to_dict(self) -> dict:
        return {"leaves": self.leaves, "overall": self.overall}

    @classmethod
    def from_dict(cls, d: Mapping) -> "CategoryReport":
        return cls(dict(d["leaves"]), dict(d["overall"]))


def _summary(rows: list[dict], names: Sequence[str]) -> dict:
    out: dict = {"count": len(rows)}
    for name in names:
        vals = np.array([r[name] for r in rows if r.get(name) is not None], dtype=np.float64)
        if len(vals):
            out[name] = {"mean": float(vals.mean()), "std": float(vals.std())}
        else:
            out[name] = {"mean": None, "std": None}
    return out


def category_report(scores: Sequence[MapScore], mems: Sequence[MemorabilityPair],
                    cats: Mapping[str, CategoryPath]) -> CategoryReport:
    """Aggregate per leaf (fixed taxonomy order) and overall; std is the population std."""
    rows: dict[str, dict] = {}
    for s in scores:
        rows.setdefault(s.image_id, {}).update({k: getattr(s, k) for k in SCORE_FIELDS})
    for m in mems:
        rows.setdefault(m.image_id, {}).update({k: getattr(m, k) for k in MEM_FIELDS})
    missing = sorted(i for i in rows if i not in cats)
    if missing:
        raise MetricError(f"no category for image ids: {missing[:10]}")
    names = [f for f in SCORE_FIELDS + MEM_FIELDS if any(f in r for r in rows.values())]
    by_leaf: dict[str, list[dict]] = {leaf: [] for leaf in LEAVES}
    for image_id, row in rows.items():
        by_leaf[cats[image_id].leaf].append(row)
    leaves = {leaf: _summary(by_leaf[leaf], names) for leaf in LEAVES}
    overall = _summary(list(rows.values()), names)
    return CategoryReport(leaves, overall)


def compare_category_distributions(report_a: CategoryReport, report_b: CategoryReport,
                                   field_name: str = "true_mem") -> RankCorrelation:
    if set(report_a.leaves) != set(report_b.leaves):
        raise MetricError("reports use different category taxonomies")
    a, b = report_a.leaf_means(field_name), report_b.leaf_means(field_name)
    pairs = [(x, y) for x, y in zip(a, b) if x is not None and y is not None]
    if len(pairs) < len(a):
        log.warning("%d leaves without data skipped", len(a) - len(pairs))
    xs, ys = zip(*pairs) if pairs else ((), ())
    return spearman(xs, ys)


def correlate_with_scores(mems: Sequence[MemorabilityPair], scores: Mapping[str, float],
                          field_name: str = "true_mem") -> RankCorrelation:
    common = [m for m in mems if m.image_id in scores]
    if len(common) < 3:
        raise MetricError(f"only {len(common)} image ids in common with the score table (need 3)")
    return spearman([getattr(m, field_name) for m in common], [scores[m.image_id] for m in common])


@dataclass
class SaliencyCorrelation:
    true: Optional[float]
    false: Optional[float]
    all: Optional[float]
    n_images: int
    missing: int = 0
    degenerate: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def correlate_with_saliency(preds: Mapping[str, VmsMap], saliency: Mapping[str, np.ndarray]) -> SaliencyCorrelation:
    """Mean Pearson between each predicted channel and the saliency map.

    The combined figure correlates both channels against the saliency map
    repeated twice. Degenerate pairs are left out of the means.
    """
    acc = {"true": [], "false": [], "all": []}
    degenerate = {"true": 0, "false": 0, "all": 0}
    missing = 0
    for image_id, v in preds.items():
        sal = saliency.get(image_id)
        if sal is None:
            missing += 1
            continue
        sal = np.asarray(sal, dtype=np.float64)
        pairs = {
            "true": (v.true_channel, sal),
            "false": (v.false_channel, sal),
            "all": (v.stack(), np.stack([sal, sal])),
        }
        for k, (a, b) in pairs.items():
            c = pearson2d(a, b)
            if c.degenerate:
                degenerate[k] += 1
            else:
                acc[k].append(c.rho)
    if missing:
        log.warning("%d predictions had no saliency map", missing)

    def _mean(v):
        return float(np.mean(v)) if v else None

    return SaliencyCorrelation(_mean(acc["true"]), _mean(acc["false"]), _mean(acc["all"]),
                               len(preds) - missing, missing, degenerate)


def mean_scores(scores: Sequence[MapScore]) -> dict[str, float]:
    return {k: float(np.mean([getattr(s, k) for s in scores])) for k in SCORE_FIELDS} if scores else {}
