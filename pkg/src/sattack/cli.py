"""Command-line entry point: ``sattack <subcommand> ...``.

Exit codes: 0 success, 2 usage or configuration error, 3 data error,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import data_io
from .attack import attack_dataset
from .core import (AttackConfig, ConfigError, NonFiniteError, NotDifferentiableError, SAttackError,
                   ShapeError, metric_ade_fde, metric_cr)
from .experiments import (ArchiveMismatchError, FinetuneConfig, adversarial_finetune, evaluate_model,
                          finetune_table, predict_instances, timestep_sensitivity, transfer_eval)
from .predictors import PoolLite, PoolLiteParams, TrainConfig, load_model, train_pool_lite

SEED_ENV = "SATTACK_SEED"

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("sattack")


def _default_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(f"{self.prog}: error: {message}")


def _seed(p, seed):
    p.add_argument("--seed", type=int, default=seed,
                   help=f"random seed (repo default 0; override with ${SEED_ENV}; now {seed})")


def _jobs(p):
    p.add_argument("--jobs", type=int, default=os.cpu_count() or 1,
                   help="worker processes; output does not depend on it (repo default: all cores)")


def build_parser(seed: int = 0) -> argparse.ArgumentParser:
    ap = _Parser(prog="sattack", description="Socially-attended adversarial attacks on trajectory predictors.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="generate a synthetic scene dataset")
    p.add_argument("--template", required=True, choices=list(data_io.TEMPLATES) + ["mixed"])
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--noise", type=float, default=0.01, help="observation noise sigma in m (repo default 0.01)")
    p.add_argument("--turn-rate", type=float, default=0.06,
                   help="max heading drift in rad per frame (repo default 0.06)")
    _seed(p, seed)
    p.add_argument("--out", required=True)

    p = sub.add_parser("ingest", help="cut frame-format data into scenes")
    p.add_argument("--frames", required=True, help="frame_id agent_id x y, whitespace or comma separated")
    p.add_argument("--t-obs", type=int, default=9, help="observation length (default 9)")
    p.add_argument("--t-pred", type=int, default=12, help="prediction length (default 12)")
    p.add_argument("--stride", type=int, default=1, help="window stride in frames (repo default 1)")
    p.add_argument("--min-neighbors", type=int, default=0, help="drop scenes with fewer neighbors (repo default 0)")
    p.add_argument("--lenient", action="store_true", help="skip malformed lines instead of failing")
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train a pool-lite checkpoint")
    p.add_argument("--scenes", required=True)
    p.add_argument("--epochs", type=int, default=100, help="(repo default 100)")
    p.add_argument("--lr", type=float, default=3e-3, help="Adam learning rate (repo default 3e-3)")
    p.add_argument("--batch-size", type=int, default=64, help="(repo default 64)")
    p.add_argument("--hidden", type=int, default=32, help="hidden width (repo default 32)")
    _seed(p, seed)
    p.add_argument("--out", required=True, help="checkpoint path (.npz); loss curve goes to <out>.loss.csv")

    p = sub.add_parser("attack", help="attack every (scene, candidate) instance")
    p.add_argument("--scenes", required=True)
    p.add_argument("--model", required=True, help="cv or pool-lite:<checkpoint>")
    p.add_argument("--mode", default="soft", choices=["none", "hard", "soft", "random"], help="(default soft)")
    p.add_argument("--epsilon", type=float, default=0.2, help="per-timestep perturbation cap in m (default 0.2)")
    p.add_argument("--gamma", type=float, default=0.2, help="collision threshold in m (default 0.2)")
    p.add_argument("--lambda-r", type=float, default=0.1, help="perturbation norm weight (default 0.1)")
    p.add_argument("--lambda-w", type=float, default=0.5, help="attention norm weight (default 0.5)")
    p.add_argument("--max-iters", type=int, default=100, help="(default 100)")
    p.add_argument("--step-size-r", type=float, default=AttackConfig.step_size_r,
                   help=f"perturbation step in m (repo default {AttackConfig.step_size_r})")
    p.add_argument("--step-size-w", type=float, default=AttackConfig.step_size_w,
                   help=f"attention step (repo default {AttackConfig.step_size_w})")
    p.add_argument("--freeze-neighbors", action="store_true", help="hold neighbor predictions fixed in the loss")
    _seed(p, seed)
    _jobs(p)
    p.add_argument("--out", required=True, help="report JSONL")
    p.add_argument("--archive", help="perturbation archive JSONL")
    p.add_argument("--plot-dir", help="write one SVG per collided instance")

    p = sub.add_parser("eval", help="ADE/FDE/CR of a model, optionally under archived perturbations")
    p.add_argument("--scenes", required=True)
    p.add_argument("--model", required=True, help="cv, sf or pool-lite:<checkpoint>")
    p.add_argument("--perturbations", help="perturbation archive JSONL")
    p.add_argument("--gamma", type=float, default=0.2, help="collision threshold in m (default 0.2)")
    p.add_argument("--out", help="also write the table here")

    p = sub.add_parser("transfer", help="collision rate of a target model on archived perturbations")
    p.add_argument("--archive", required=True)
    p.add_argument("--target", required=True, help="cv, sf or pool-lite:<checkpoint>")
    p.add_argument("--scenes", required=True)
    p.add_argument("--gamma", type=float, default=0.2, help="collision threshold in m (default 0.2)")
    p.add_argument("--out", help="per-instance JSONL")

    p = sub.add_parser("sensitivity", help="per-observation-timestep sensitivity curve")
    p.add_argument("--scenes", required=True)
    p.add_argument("--model", required=True, help="cv, sf or pool-lite:<checkpoint>")
    p.add_argument("--magnitude", type=float, default=0.2, help="offset norm in m (default 0.2)")
    p.add_argument("--trials", type=int, default=20, help="random directions per timestep (repo default 20)")
    p.add_argument("--archive", help="soft-attack archive for the mean perturbation-norm curve")
    _seed(p, seed)
    p.add_argument("--out", required=True, help="curve CSV")

    p = sub.add_parser("finetune", help="adversarial fine-tuning with before/after table")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--scenes", required=True, help="fine-tuning scenes")
    p.add_argument("--eval-scenes", help="held-out scenes for the before/after table")
    p.add_argument("--epsilon", type=float, default=0.03, help="attack budget in m (default 0.03)")
    p.add_argument("--epochs", type=int, default=FinetuneConfig.epochs,
                   help=f"(repo default {FinetuneConfig.epochs})")
    p.add_argument("--lr", type=float, default=FinetuneConfig.lr, help=f"(repo default {FinetuneConfig.lr})")
    p.add_argument("--attack-iters", type=int, default=FinetuneConfig.attack_iters,
                   help=f"attack iterations per batch (repo default {FinetuneConfig.attack_iters})")
    p.add_argument("--augmentation", choices=["sattack", "random"], default="sattack",
                   help="attacked or random-noise copies (repo default sattack)")
    _seed(p, seed)
    _jobs(p)
    p.add_argument("--out", required=True, help="new checkpoint; metrics go to <out>.metrics.json and .txt")
    return ap


# subcommands ----------------------------------------------------------------------

def _gen(a):
    scenes = data_io.generate_synthetic(a.template, a.noise, a.count, a.seed, turn_rate=a.turn_rate)
    data_io.write_scenes(scenes, a.out)
    print(f"wrote {len(scenes)} scenes to {a.out}")


def _ingest(a):
    cfg = data_io.SceneWindowConfig(a.t_obs, a.t_pred, a.stride, a.min_neighbors)
    records = data_io.parse_frames(a.frames, strict=not a.lenient)
    scenes = data_io.build_scenes(records, cfg, prefix=Path(a.frames).stem)
    data_io.write_scenes(scenes, a.out)
    print(f"wrote {len(scenes)} scenes to {a.out}")


def _train(a):
    scenes = data_io.read_scenes(a.scenes)
    cfg = TrainConfig(epochs=a.epochs, lr=a.lr, batch_size=a.batch_size, seed=a.seed)
    params, curve = train_pool_lite(scenes, cfg, hidden=a.hidden)
    params.save(a.out)
    data_io.write_curve_csv([{"epoch": i + 1, "loss": repr(v)} for i, v in enumerate(curve)] or
                            [{"epoch": 0, "loss": ""}], str(a.out) + ".loss.csv")
    print(f"saved {a.out} (final loss {curve[-1] if curve else float('nan'):.5f})")


def _attack(a):
    cfg = AttackConfig(epsilon=a.epsilon, gamma=a.gamma, lambda_r=a.lambda_r, lambda_w=a.lambda_w,
                       max_iters=a.max_iters, step_size_r=a.step_size_r, step_size_w=a.step_size_w,
                       mode=a.mode, freeze_neighbors=a.freeze_neighbors)
    scenes = data_io.read_scenes(a.scenes)
    model = load_model(a.model, scenes[0].t_pred if scenes else 12)
    reports, summary = attack_dataset(scenes, model, cfg, a.seed, a.jobs)
    data_io.emit_report(reports, summary, a.out)
    if a.archive:
        digest = cfg.digest()
        data_io.write_archive((data_io.archive_record(r, digest, r.agent_id) for r in reports), a.archive)
    if a.plot_dir:
        by_id = {s.scene_id: s for s in scenes}
        Path(a.plot_dir).mkdir(parents=True, exist_ok=True)
        for r in reports:
            if r.collided:
                name = f"{r.scene_id}_{r.candidate_index}.svg".replace(":", "_").replace("/", "_")
                data_io.emit_plot(by_id[r.scene_id], r, Path(a.plot_dir) / name)
    print(data_io.summary_text({"instances": len(reports), **summary}), end="")


def _eval(a):
    scenes = data_io.read_scenes(a.scenes)
    model = load_model(a.model, scenes[0].t_pred if scenes else 12)
    if a.perturbations:
        archive = data_io.read_archive(a.perturbations)
        index = {s.scene_id: i for i, s in enumerate(scenes)}
        missing = [r["scene_id"] for r in archive if r["scene_id"] not in index]
        if missing:
            raise ArchiveMismatchError(f"archive scene {missing[0]!r} not in dataset")
        instances = [(index[r["scene_id"]], int(r["candidate_index"])) for r in archive]
        preds = predict_instances(scenes, instances, model, [r["R"] for r in archive])
        err = np.array([metric_ade_fde(p, scenes[si]) for p, (si, _) in zip(preds, instances)])
        cr = metric_cr([(p, c) for p, (_, c) in zip(preds, instances)], a.gamma)
        row = {"ade": float(err[:, 0].mean()), "fde": float(err[:, 1].mean()), "cr": cr}
        label = "perturbed"
    else:
        m = evaluate_model(model, scenes, gamma=a.gamma)
        row = {"ade": m["ade"], "fde": m["fde"], "cr": m.get("cr_original", 0.0)}
        label = "original"
    table = f"{'input':<12}{'ADE/FDE [m]':>16}{'CR [%]':>10}\n" \
            f"{label:<12}{row['ade']:>8.2f}/{row['fde']:<7.2f}{row['cr']:>10.2f}\n"
    print(table, end="")
    if a.out:
        Path(a.out).write_text(table)


def _transfer(a):
    scenes = data_io.read_scenes(a.scenes)
    archive = data_io.read_archive(a.archive)
    target = load_model(a.target, scenes[0].t_pred if scenes else 12)
    cr, flags = transfer_eval(archive, target, scenes, a.gamma)
    if a.out:
        rows = [{"scene_id": r["scene_id"], "candidate_index": int(r["candidate_index"]),
                 "source_collided": bool(r.get("collided", False)), "target_collided": f}
                for r, f in zip(archive, flags)]
        rows.append({"summary": {"cr": cr, "instances": len(flags), "target": a.target}})
        with open(a.out, "w") as fh:
            for row in rows:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
    print(f"transfer CR on {a.target}: {cr:.2f}% over {len(flags)} instances")


def _sensitivity(a):
    scenes = data_io.read_scenes(a.scenes)
    model = load_model(a.model, scenes[0].t_pred if scenes else 12)
    archive = data_io.read_archive(a.archive) if a.archive else None
    res = timestep_sensitivity(model, scenes, a.magnitude, a.trials, a.seed, archive)
    rows = []
    for k, t in enumerate(res["timestep"]):
        row = {"timestep": t, "sensitivity": repr(res["sensitivity"][k])}
        if "perturbation_norm" in res:
            row["perturbation_norm"] = repr(res["perturbation_norm"][k])
        rows.append(row)
    data_io.write_curve_csv(rows, a.out)
    print(f"wrote {a.out}; max sensitivity at timestep {int(np.argmax(res['sensitivity'])) + 1}")


def _finetune(a):
    params = PoolLiteParams.load(a.ckpt)
    scenes = data_io.read_scenes(a.scenes)
    held = data_io.read_scenes(a.eval_scenes) if a.eval_scenes else None
    ft = FinetuneConfig(epochs=a.epochs, lr=a.lr, attack_iters=a.attack_iters,
                        augmentation=a.augmentation, seed=a.seed)
    new, metrics = adversarial_finetune(params, scenes, AttackConfig(epsilon=a.epsilon), ft,
                                        eval_scenes=held, eval_seed=a.seed, jobs=a.jobs)
    new.save(a.out)
    Path(str(a.out) + ".metrics.json").write_text(json.dumps(metrics, sort_keys=True, indent=1) + "\n")
    if held is not None:
        table = finetune_table({"before": metrics["before"], f"after ({a.augmentation})": metrics["after"]})
        Path(str(a.out) + ".metrics.txt").write_text(table)
        print(table, end="")
    print(f"saved {a.out}")


COMMANDS = {"gen": _gen, "ingest": _ingest, "train": _train, "attack": _attack, "eval": _eval,
            "transfer": _transfer, "sensitivity": _sensitivity, "finetune": _finetune}


def main(argv=None) -> int:
    try:
        seed = _default_seed()
        args = build_parser(seed).parse_args(argv)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"sattack: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except (ConfigError, NotDifferentiableError) as exc:
        print(f"sattack: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteError as exc:
        print(f"sattack: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (SAttackError, ShapeError, OSError, json.JSONDecodeError, KeyError) as exc:
        print(f"sattack: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        # bad model spec or template name reaching the library
        print(f"sattack: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
