"""Collision rate of the four attack modes on the test scenes."""

from pathlib import Path

from common import parser, testbed
from sattack import data_io
from sattack.attack import attack_dataset
from sattack.core import AttackConfig
from sattack.predictors import PoolLite


def main():
    args = parser(__doc__).parse_args()
    tb = testbed(args)
    model = PoolLite(tb.params)
    out = Path(args.out)
    rows = []
    for mode in ("random", "none", "hard", "soft"):
        cfg = AttackConfig(mode=mode)
        reports, summary = attack_dataset(tb.test, model, cfg, seed=args.seed, jobs=args.jobs)
        data_io.emit_report(reports, summary, out / f"attack_{mode}.jsonl")
        data_io.write_archive([data_io.archive_record(r, cfg.digest(), r.agent_id) for r in reports],
                              out / f"archive_{mode}.jsonl")
        rows.append((mode, summary))
    lines = [f"{'mode':<10}{'CR [%]':>10}{'P-avg [m]':>12}"]
    for mode, s in rows:
        p = s["p_avg_collided"]
        lines.append(f"{mode:<10}{s['cr']:>10.1f}{(p if p is not None else float('nan')):>12.3f}")
    lines.append(f"{'original':<10}{rows[0][1]['cr_original']:>10.1f}")
    table = "\n".join(lines) + "\n"
    (out / "attack_modes.txt").write_text(table)
    print(table, end="")


if __name__ == "__main__":
    main()
