"""``vmsvae`` command line: train, predict, evaluate, embed, correlate, synth.

Exit codes: 0 success, 1 invalid input (config, data, ids), 2 runtime fault.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import analysis, data, metrics, model, training

log = logging.getLogger("vmsvae")

VALIDATION_EXIT = 1
RUNTIME_EXIT = 2


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    # model / optimisation
    n: int = 128
    m: int = 32
    recon_mode: str = "log-likelihood"
    l2_coefficient: float = 0.02
    learning_rate: float = 1e-4
    batch_size: int = 32
    epochs: int = 250
    steps_per_epoch: int = 20
    seed: int = 0
    # augmentation
    augment: bool = True
    shift_fraction: float = 0.1
    zoom_range: tuple = (0.9, 1.1)
    horizontal_flip: bool = True
    # run
    data_root: Optional[str] = None
    output_dir: str = "runs/default"
    variant_name: str = "m32"
    n_train: Optional[int] = None
    backbone_weights: Optional[str] = None

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        d = dict(d)
        if "zoom_range" in d:
            d["zoom_range"] = tuple(d["zoom_range"])
        cfg = cls(**d)
        try:
            cfg.model_config()
            cfg.augment_config()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(raw)

    def model_config(self) -> model.ModelConfig:
        return model.ModelConfig(self.n, self.m, self.recon_mode, self.l2_coefficient, self.learning_rate,
                                 self.batch_size, self.epochs, self.steps_per_epoch, self.seed)

    def augment_config(self) -> Optional[data.AugmentConfig]:
        if not self.augment:
            return None
        return data.AugmentConfig(self.shift_fraction, tuple(self.zoom_range), self.horizontal_flip, self.seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["zoom_range"] = list(self.zoom_range)
        return d


# ---------------------------------------------------------------- commands


def cmd_train(config_path, data_dir=None, out_dir=None) -> Path:
    cfg = RunConfig.load(config_path)
    root = data_dir or cfg.data_root
    if not root:
        raise ConfigError("no data_root in config and no --data given")
    out = Path(out_dir or cfg.output_dir)
    if cfg.backbone_weights and not Path(cfg.backbone_weights).is_file():
        raise ConfigError(f"backbone_weights {cfg.backbone_weights} not found")
    ds = data.load_dataset(root, with_vms=True)
    if cfg.n_train is not None:
        ds, test = data.split_train_test(ds, cfg.n_train, cfg.seed)
    else:
        test = None
    out.mkdir(parents=True, exist_ok=True)
    mcfg = cfg.model_config()
    state = model.build_model(mcfg, backbone_weights=cfg.backbone_weights)
    state, history = training.train(state, ds, mcfg, cfg.augment_config(), history_path=out / "history.jsonl")
    history.write(out / "history.jsonl")
    model.save_model(state, out / "model.pt")
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    splits = {"train": ds.ids, "test": test.ids if test is not None else []}
    (out / "split.json").write_text(json.dumps(splits, indent=1) + "\n")
    final = history.epochs[-1]["total"] if history.epochs else None
    print(json.dumps({"model": str(out / "model.pt"), "epochs": len(history.epochs), "final_total": final}))
    return out / "model.pt"


def _write_mem_csv(path: Path, mems: Sequence[metrics.MemorabilityPair]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["image_id", "true_mem", "false_mem"])
        for m in mems:
            w.writerow([m.image_id, repr(m.true_mem), repr(m.false_mem)])


def cmd_predict(model_path, images_dir, out_dir, backbone_weights=None, batch_size: int = 8) -> dict:
    state = model.load_model(model_path, backbone_weights=backbone_weights)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = list(data.iter_image_files(images_dir))
    images, ids, skipped = [], [], 0
    for path in files:
        try:
            images.append(data.read_image(path))
            ids.append(path.stem)
        except data.DatasetError as exc:
            log.warning("skipping %s", exc)
            skipped += 1
    if len(set(ids)) != len(ids):
        raise data.DatasetError("duplicate image ids in input directory")
    mems = []
    for image_id, vms in zip(ids, model.predict_many(state, images, batch_size)):
        data.write_vms(vms, out / f"{image_id}.png")
        mems.append(metrics.memorability_from_map(vms, image_id))
    _write_mem_csv(out / "memorability.csv", mems)
    summary = {"predicted": len(ids), "skipped": skipped, "out_dir": str(out)}
    print(json.dumps(summary))
    return summary


def cmd_evaluate(pred_dir, gt_root, out_path, saliency_dir=None) -> dict:
    pred_dir, gt_root = Path(pred_dir), Path(gt_root)
    preds = {p.stem: data.read_vms(p) for p in sorted(pred_dir.glob("*.png"))}
    if not preds:
        raise data.DatasetError(f"no predicted maps in {pred_dir}")
    gt = data.load_dataset(gt_root, with_vms=True)
    truth = {s.image_id: s for s in gt}
    unknown = sorted(set(preds) - set(truth))
    if unknown:
        raise metrics.MetricError(f"{len(unknown)} prediction ids not in ground truth: {unknown[:10]}")
    scores = [metrics.score_map(preds[i], truth[i].vms, i) for i in sorted(preds)]
    pred_mems = [metrics.memorability_from_map(preds[i], i) for i in sorted(preds)]
    gt_mems = [metrics.memorability_from_map(truth[i].vms, i) for i in sorted(preds)]
    cats = gt.categories()
    report = {
        "n_images": len(scores),
        "overall": metrics.mean_scores(scores),
        "per_image": [s.to_dict() for s in scores],
        "categories": metrics.category_report(scores, pred_mems, cats).to_dict(),
        "ground_truth_categories": metrics.category_report([], gt_mems, cats).to_dict(),
    }
    if saliency_dir is not None:
        sal = {p.stem: data.read_grayscale(p) for p in sorted(Path(saliency_dir).glob("*.png"))}
        report["saliency"] = metrics.correlate_with_saliency(preds, sal).to_dict()
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    print(json.dumps({"n_images": len(scores), **report["overall"]}))
    return report


def cmd_embed(model_path, data_root, out_csv, backbone_weights=None) -> Path:
    state = model.load_model(model_path, backbone_weights=backbone_weights)
    ds = data.load_dataset(data_root, with_vms=False)
    records = analysis.embed_dataset(state, ds)
    proj = analysis.project_2d(records)
    if proj.fallback:
        log.warning("latent covariance is rank-deficient; using the first two latent axes")
    return analysis.write_text(out_csv, analysis.embedding_csv(records, proj))


def read_score_csv(path, field_name: Optional[str] = None) -> dict[str, float]:
    """image_id -> value from a CSV; takes ``field_name``, else ``score``, else the second column."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise metrics.MetricError(f"{path} has no rows")
    header = list(rows[0])
    if "image_id" not in header:
        raise metrics.MetricError(f"{path} lacks an image_id column")
    col = field_name or ("score" if "score" in header else [h for h in header if h != "image_id"][0])
    if col not in header:
        raise metrics.MetricError(f"{path} has no column {col!r}")
    try:
        return {r["image_id"]: float(r[col]) for r in rows}
    except ValueError as exc:
        raise metrics.MetricError(f"{path}: non-numeric value in column {col!r}") from exc


def cmd_correlate(a_csv, b_csv, field_name: Optional[str] = None) -> dict:
    a, b = read_score_csv(a_csv, field_name), read_score_csv(b_csv, field_name)
    common = sorted(set(a) & set(b))
    if len(common) < 3:
        raise metrics.MetricError(f"only {len(common)} ids in common (need 3)")
    res = metrics.spearman([a[i] for i in common], [b[i] for i in common])
    out = {"rho": res.rho, "p": res.p, "n": res.n}
    print(json.dumps(out))
    return out


def cmd_synth(n: int, seed: int, out_dir) -> Path:
    return data.write_dataset(data.make_synthetic_dataset(n, seed), out_dir)


# ---------------------------------------------------------------- entry point


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vmsvae", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a JSON run config")
    t.add_argument("--config", required=True)
    t.add_argument("--data", help="dataset root (overrides data_root)")
    t.add_argument("--out", help="output directory (overrides output_dir)")

    pr = sub.add_parser("predict", help="write predicted VMS PNGs and memorability.csv")
    pr.add_argument("--model", required=True)
    pr.add_argument("--data", required=True, help="directory of images (searched recursively)")
    pr.add_argument("--out", required=True)
    pr.add_argument("--backbone-weights")

    e = sub.add_parser("evaluate", help="score predicted maps against ground truth")
    e.add_argument("--pred", required=True)
    e.add_argument("--data", required=True, help="labeled dataset root")
    e.add_argument("--out", required=True, help="report JSON path")
    e.add_argument("--saliency", help="directory of grayscale saliency PNGs")

    em = sub.add_parser("embed", help="export the 2D latent embedding CSV")
    em.add_argument("--model", required=True)
    em.add_argument("--data", required=True)
    em.add_argument("--out", required=True)
    em.add_argument("--backbone-weights")

    c = sub.add_parser("correlate", help="Spearman correlation of two image_id,value CSVs")
    c.add_argument("a")
    c.add_argument("b")
    c.add_argument("--field")

    s = sub.add_parser("synth", help="write a synthetic labeled dataset")
    s.add_argument("--n", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "train":
            cmd_train(args.config, args.data, args.out)
        elif args.command == "predict":
            cmd_predict(args.model, args.data, args.out, args.backbone_weights)
        elif args.command == "evaluate":
            cmd_evaluate(args.pred, args.data, args.out, args.saliency)
        elif args.command == "embed":
            cmd_embed(args.model, args.data, args.out, args.backbone_weights)
        elif args.command == "correlate":
            cmd_correlate(args.a, args.b, args.field)
        elif args.command == "synth":
            cmd_synth(args.n, args.seed, args.out)
    except (ConfigError, data.DatasetError, metrics.MetricError, model.ModelError,
            analysis.AnalysisError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return VALIDATION_EXIT
    except (training.TrainingError, FloatingPointError, RuntimeError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return RUNTIME_EXIT
    return 0


if __name__ == "__main__":
    sys.exit(main())
