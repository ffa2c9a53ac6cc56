"""Shared setup for the experiment scripts: the synthetic testbed, cached on disk."""

import argparse
import dataclasses
import logging
from pathlib import Path

from sattack import data_io
from sattack.experiments import Testbed, TestbedConfig, build_testbed
from sattack.predictors import PoolLiteParams


def parser(description: str) -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(description=description)
    ap.add_argument("--out", default="results", help="output directory (default: results)")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--quick", action="store_true", help="small corpora for a smoke run")
    ap.add_argument("--jobs", type=int, default=1)
    return ap


def testbed(args) -> Testbed:
    """Build the testbed once per output directory and reuse the checkpoint and scenes."""
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = TestbedConfig(seed=args.seed)
    if args.quick:
        cfg = dataclasses.replace(cfg, train_count=120, test_count=40, heldout_count=30, epochs=15)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tag = f"seed{cfg.seed}{'-quick' if args.quick else ''}"
    ckpt = out / f"pool_lite_{tag}.npz"
    files = {k: out / f"{k}_{tag}.jsonl" for k in ("train", "test", "heldout")}
    if ckpt.exists() and all(f.exists() for f in files.values()):
        return Testbed(PoolLiteParams.load(ckpt), *(data_io.read_scenes(files[k])
                                                    for k in ("train", "test", "heldout")), [])
    tb = build_testbed(cfg)
    tb.params.save(ckpt)
    for k in files:
        data_io.write_scenes(getattr(tb, k), files[k])
    data_io.write_curve_csv([{"epoch": i + 1, "loss": repr(v)} for i, v in enumerate(tb.loss_curve)],
                            out / f"loss_{tag}.csv")
    return tb
