"""Adversarial fine-tuning at epsilon 0.03, with the random-noise control."""

import dataclasses
import json
from pathlib import Path

from common import parser, testbed
from sattack.core import AttackConfig
from sattack.experiments import FinetuneConfig, adversarial_finetune, finetune_table


def main():
    ap = parser(__doc__)
    ap.add_argument("--epochs", type=int, default=FinetuneConfig.epochs)
    args = ap.parse_args()
    tb = testbed(args)
    out = Path(args.out)
    attack = AttackConfig(epsilon=0.03)
    rows = {}
    for aug in ("sattack", "random"):
        ft = FinetuneConfig(epochs=args.epochs, augmentation=aug, seed=args.seed)
        params, metrics = adversarial_finetune(tb.params, tb.train, attack, ft, eval_scenes=tb.heldout,
                                               eval_seed=args.seed, jobs=args.jobs)
        params.save(out / f"pool_lite_ft_{aug}.npz")
        rows.setdefault("pool-lite", metrics["before"])
        rows[f"pool-lite w/ {aug}"] = metrics["after"]
        with open(out / f"finetune_{aug}.json", "w") as fh:
            json.dump({"config": dataclasses.asdict(ft), **metrics}, fh, sort_keys=True, indent=1)
    table = finetune_table(rows)
    (out / "finetune.txt").write_text(table)
    print(table, end="")


if __name__ == "__main__":
    main()
