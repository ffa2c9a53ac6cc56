"""Transfer the soft-attack archive from pool-lite to constant velocity and social forces."""

import json
from pathlib import Path

from common import parser, testbed
from sattack import data_io
from sattack.attack import attack_dataset
from sattack.core import AttackConfig
from sattack.experiments import transfer_eval
from sattack.predictors import ConstantVelocity, PoolLite, SocialForces


def main():
    args = parser(__doc__).parse_args()
    tb = testbed(args)
    out = Path(args.out)
    path = out / "archive_soft.jsonl"
    if path.exists():
        archive = data_io.read_archive(path)
    else:
        cfg = AttackConfig()
        reports, _ = attack_dataset(tb.test, PoolLite(tb.params), cfg, seed=args.seed, jobs=args.jobs)
        archive = [data_io.archive_record(r, cfg.digest(), r.agent_id) for r in reports]
        data_io.write_archive(archive, path)
    rows = {}
    for name, target in (("pool-lite", PoolLite(tb.params)), ("cv", ConstantVelocity()),
                         ("social-forces", SocialForces())):
        rows[name], _ = transfer_eval(archive, target, tb.test)
    with open(out / "transfer.jsonl", "w") as fh:
        for name, cr in rows.items():
            fh.write(json.dumps({"source": "pool-lite", "target": name, "cr": cr}) + "\n")
    table = f"{'source -> target':<28}{'CR [%]':>8}\n" + "".join(
        f"{'pool-lite -> ' + k:<28}{v:>8.1f}\n" for k, v in rows.items())
    (out / "transfer.txt").write_text(table)
    print(table, end="")


if __name__ == "__main__":
    main()
