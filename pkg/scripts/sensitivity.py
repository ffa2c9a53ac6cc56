"""Per-timestep sensitivity of pool-lite and constant velocity, plus mean |r_t| of soft attacks."""

from pathlib import Path

from common import parser, testbed
from sattack import data_io
from sattack.experiments import timestep_sensitivity
from sattack.predictors import ConstantVelocity, PoolLite


def main():
    args = parser(__doc__).parse_args()
    tb = testbed(args)
    out = Path(args.out)
    archive_path = out / "archive_soft.jsonl"
    archive = data_io.read_archive(archive_path) if archive_path.exists() else None
    pl = timestep_sensitivity(PoolLite(tb.params), tb.test, 0.2, 20, args.seed, archive)
    cv = timestep_sensitivity(ConstantVelocity(), tb.test, 0.2, 20, args.seed)
    rows = []
    for k, t in enumerate(pl["timestep"]):
        row = {"timestep": t, "pool_lite": repr(pl["sensitivity"][k]), "cv": repr(cv["sensitivity"][k])}
        if "perturbation_norm" in pl:
            row["soft_perturbation_norm"] = repr(pl["perturbation_norm"][k])
        rows.append(row)
    data_io.write_curve_csv(rows, out / "sensitivity.csv")
    _plot(rows, out / "sensitivity.svg")
    for r in rows:
        print(", ".join(f"{k}={v}" for k, v in r.items()))


def _plot(rows, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    t = [r["timestep"] for r in rows]
    with matplotlib.rc_context({"svg.hashsalt": "sattack"}):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.plot(t, [float(r["pool_lite"]) for r in rows], "-o", label="pool-lite sensitivity [m]")
        ax.plot(t, [float(r["cv"]) for r in rows], "-s", label="constant velocity sensitivity [m]")
        if "soft_perturbation_norm" in rows[0]:
            ax.plot(t, [float(r["soft_perturbation_norm"]) for r in rows], "-^", color="tab:green",
                    label="mean |r_t| of soft attack [m]")
        ax.set_xlabel("observation timestep")
        ax.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)


if __name__ == "__main__":
    main()
