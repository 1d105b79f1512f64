#!/usr/bin/env python3
"""Train the three model variants, evaluate on the held-out split and build the report tables.

Real data:
    python scripts/run_variants.py --data /path/to/vischema --out runs/vischema

Synthetic stand-in (generated on the fly, short schedule):
    python scripts/run_variants.py --synthetic 640 --epochs 25 --steps 16 --lr 1e-3 --no-augment --out runs/synth

Writes per-variant run directories plus table1.{json,txt}, category_<variant>.csv
and embedding_<variant>.csv under --out.
"""

import argparse
import json
import logging
from pathlib import Path

from vmsvae import cli
from vmsvae.analysis import VARIANTS, build_category_figure, build_table1, write_text
from vmsvae.data import Dataset, load_dataset, make_synthetic_dataset, write_dataset
from vmsvae.metrics import CategoryReport

CONFIG_DIR = Path(__file__).resolve().parents[1] / "configs"


def parse_args(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--data", type=Path, help="dataset root with category folders and vms/")
    src.add_argument("--synthetic", type=int, metavar="N", help="generate N synthetic pairs instead")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--variants", nargs="+", default=list(VARIANTS), choices=VARIANTS)
    p.add_argument("--n-train", type=int, help="training split size (default: config value, 80%% for synthetic)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--steps", type=int, help="steps per epoch")
    p.add_argument("--lr", type=float)
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    return p.parse_args(argv)


def variant_config(name, args, n_total):
    cfg = json.loads((CONFIG_DIR / f"{name}.json").read_text())
    cfg.pop("output_dir", None)
    cfg["seed"] = args.seed
    if args.n_train is not None:
        cfg["n_train"] = args.n_train
    elif args.synthetic is not None:
        cfg["n_train"] = int(0.8 * n_total)
    for key, value in (("epochs", args.epochs), ("steps_per_epoch", args.steps), ("learning_rate", args.lr)):
        if value is not None:
            cfg[key] = value
    if args.no_augment:
        cfg["augment"] = False
    return cfg


def main(argv=None):
    args = parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    if args.synthetic is not None:
        data_root = out / "data"
        if not data_root.exists():
            write_dataset(make_synthetic_dataset(args.synthetic, seed=args.seed), data_root)
    else:
        data_root = args.data
    full = load_dataset(data_root, with_vms=True)

    results = {}
    for name in args.variants:
        run = out / name
        run.mkdir(parents=True, exist_ok=True)
        (run / "run_config.json").write_text(json.dumps(variant_config(name, args, len(full)), indent=2))
        model_path = cli.cmd_train(run / "run_config.json", data_root, run)
        held = set(json.loads((run / "split.json").read_text())["test"])
        if not held:
            raise SystemExit(f"{name}: no held-out images; set n_train")
        test_root = run / "test_data"
        write_dataset(Dataset(tuple(s for s in full if s.image_id in held), "held-out"), test_root)
        cli.cmd_predict(model_path, test_root, run / "pred")
        report = cli.cmd_evaluate(run / "pred", test_root, run / "report.json")
        cli.cmd_embed(model_path, test_root, out / f"embedding_{name}.csv")
        results[name] = report["overall"]
        write_text(out / f"category_{name}.csv",
                   build_category_figure(CategoryReport.from_dict(report["categories"])))

    if set(VARIANTS) <= set(results):
        table = build_table1(results)
        write_text(out / "table1.json", table["json"])
        write_text(out / "table1.txt", table["text"])
        print(table["text"])
    else:
        print(json.dumps(results, indent=2))


if __name__ == "__main__":
    main()
