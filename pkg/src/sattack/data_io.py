"""Frame-file ingestion, scene windows, synthetic corpora and report files."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .core import (AttackReport, ConfigError, SAttackError, Agent, Scene, metric_cr)
from .predictors.social_forces import SocialForcesParams, repulsion

log = logging.getLogger(__name__)

FRAME_RATE = 2.5  # fps, ETH/UCY convention; metadata only
TEMPLATES = ("head_on", "crossing_90deg", "parallel", "overtake")


class ParseError(SAttackError):
    def __init__(self, errors: list[tuple[int, str]], path=None):
        self.errors = errors
        where = f"{path}: " if path else ""
        lines = "; ".join(f"line {n}: {msg}" for n, msg in errors[:10])
        super().__init__(f"{where}{len(errors)} malformed line(s): {lines}")


@dataclass(frozen=True)
class FrameRecord:
    frame_id: int
    agent_id: str
    x: float
    y: float


@dataclass(frozen=True)
class SceneWindowConfig:
    t_obs: int = 9
    t_pred: int = 12
    stride: int = 1
    min_neighbors: int = 0

    def __post_init__(self):
        if self.t_obs < 2 or self.t_pred < 1 or self.stride < 1 or self.min_neighbors < 0:
            raise ConfigError("need t_obs >= 2, t_pred >= 1, stride >= 1, min_neighbors >= 0")


# frame files ----------------------------------------------------------------

def _split(line: str) -> list[str]:
    if "\t" in line:
        return [p.strip() for p in line.split("\t")]
    if "," in line:
        return [p.strip() for p in line.split(",")]
    return line.split()


def parse_frames(path, strict: bool = True) -> list[FrameRecord]:
    """Parse ``frame_id, agent_id, x, y`` rows (tab, comma or whitespace separated).

    Blank lines and lines starting with ``#`` are skipped. In strict mode any
    malformed line raises :class:`ParseError` listing every offending line;
    otherwise those lines are logged and dropped.
    """
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise SAttackError(f"cannot read {path}: {exc}") from exc
    records, errors, seen = [], [], set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = _split(line)
        if len(parts) != 4:
            errors.append((lineno, f"expected 4 fields, got {len(parts)}"))
            continue
        try:
            frame = float(parts[0])
            if frame != int(frame):
                raise ValueError("frame id is not an integer")
            x, y = float(parts[2]), float(parts[3])
            if not (np.isfinite(x) and np.isfinite(y)):
                raise ValueError("non-finite coordinate")
        except ValueError as exc:
            errors.append((lineno, str(exc)))
            continue
        agent = parts[1]
        if agent.endswith(".0") and agent[:-2].lstrip("-").isdigit():
            agent = agent[:-2]
        key = (int(frame), agent)
        if key in seen:
            errors.append((lineno, f"duplicate (frame, agent) {key}"))
            continue
        seen.add(key)
        records.append(FrameRecord(int(frame), agent, x, y))
    if errors:
        if strict:
            raise ParseError(errors, path)
        for n, msg in errors:
            log.warning("%s line %d: %s", path, n, msg)
    return records


def write_frames(records: Iterable[FrameRecord], path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(f"{r.frame_id}\t{r.agent_id}\t{r.x!r}\t{r.y!r}\n")


def build_scenes(records: Sequence[FrameRecord], cfg: SceneWindowConfig = SceneWindowConfig(),
                 prefix: str = "scene") -> list[Scene]:
    """Slide a window of ``t_obs + t_pred`` consecutive frames over the records.

    Frames are consecutive integer ids in sorted order of the distinct ids
    present. An agent joins a window only if it appears in every frame.
    """
    frames = sorted({r.frame_id for r in records})
    table: dict[tuple[int, str], tuple[float, float]] = {(r.frame_id, r.agent_id): (r.x, r.y) for r in records}
    by_frame: dict[int, set[str]] = {}
    for r in records:
        by_frame.setdefault(r.frame_id, set()).add(r.agent_id)
    length = cfg.t_obs + cfg.t_pred
    scenes = []
    for start in range(0, len(frames) - length + 1, cfg.stride):
        window = frames[start:start + length]
        present = set.intersection(*(by_frame[f] for f in window))
        if len(present) < 1 + cfg.min_neighbors:
            continue
        agents = []
        for aid in sorted(present, key=_agent_sort_key):
            pts = np.array([table[(f, aid)] for f in window])
            agents.append(Agent(aid, pts[:cfg.t_obs], pts[cfg.t_obs:]))
        scenes.append(Scene(f"{prefix}:{window[0]}", tuple(agents)))
    return scenes


def _agent_sort_key(aid: str):
    try:
        return (0, float(aid), aid)
    except ValueError:
        return (1, 0.0, aid)


# scene JSONL ----------------------------------------------------------------

def scene_to_dict(scene: Scene) -> dict:
    d = {
        "scene_id": scene.scene_id,
        "agents": [
            {"id": a.agent_id, "obs": a.observation.tolist(),
             "future": None if a.future is None else a.future.tolist()}
            for a in scene.agents
        ],
    }
    if scene.candidate_index:
        d["candidate_index"] = scene.candidate_index
    return d


def scene_from_dict(d: dict) -> Scene:
    agents = tuple(Agent(a["id"], a["obs"], a.get("future")) for a in d["agents"])
    return Scene(d["scene_id"], agents, int(d.get("candidate_index", 0)))


def write_scenes(scenes: Iterable[Scene], path) -> None:
    with open(path, "w") as fh:
        for s in scenes:
            fh.write(json.dumps(scene_to_dict(s)) + "\n")


def read_scenes(path) -> list[Scene]:
    scenes = []
    try:
        fh = open(path)
    except OSError as exc:
        raise SAttackError(f"cannot read {path}: {exc}") from exc
    with fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                scenes.append(scene_from_dict(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise ParseError([(lineno, str(exc))], path) from exc
    return scenes


# synthetic scenes -----------------------------------------------------------

# ground-truth dynamics of the synthetic corpora: gentle mutual avoidance
GROUND_TRUTH_FORCES = SocialForcesParams(tau=0.8, a=1.5, b=0.25, radius=0.6, dt=1.0 / FRAME_RATE,
                                         max_speed_factor=1.4)


def _rot(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def _layout(template: str, rng: np.random.Generator, total: int, t_obs: int,
            gap: Optional[float]) -> tuple[np.ndarray, np.ndarray, list[int]]:
    """Start positions, velocities (m, m/s) and walking-group ids, local frame heading +x."""
    dt = 1.0 / FRAME_RATE
    speed = rng.uniform(0.9, 1.1)
    # frame at which paths meet, so encounters fall inside the prediction window
    meet = rng.uniform(t_obs - 1, total - 3) * dt
    if template == "parallel":
        k = int(rng.integers(2, 5))
        g = gap if gap is not None else rng.uniform(0.8, 1.6)
        y = np.arange(k) * g
        pos = np.stack([np.zeros(k) + rng.uniform(-0.3, 0.3, k) * (gap is None), y], axis=1)
        vel = np.tile([speed, 0.0], (k, 1))
    elif template == "head_on":
        k = int(rng.integers(1, 4))
        off = gap if gap is not None else rng.uniform(0.25, 1.6) * rng.choice([-1, 1])
        other = rng.uniform(0.9, 1.1)
        meet_x = speed * meet
        ego = np.array([[0.0, 0.0]])
        lanes = off + np.sign(off or 1.0) * np.arange(k) * rng.uniform(0.9, 1.4)
        opp = np.stack([np.full(k, meet_x + other * meet), lanes], axis=1)
        pos = np.concatenate([ego, opp])
        vel = np.concatenate([[[speed, 0.0]], np.tile([-other, 0.0], (k, 1))])
    elif template == "crossing_90deg":
        k = int(rng.integers(1, 3))
        lag = gap if gap is not None else rng.uniform(-1.2, 1.2)
        other = rng.uniform(0.9, 1.1)
        cross = np.array([speed * meet, 0.0])
        pos = [[0.0, 0.0]]
        vel = [[speed, 0.0]]
        for i in range(k):
            d = other * meet + lag + i * rng.uniform(1.0, 1.5)
            pos.append([cross[0], -d])
            vel.append([0.0, other])
        pos, vel = np.array(pos), np.array(vel)
    elif template == "overtake":
        k = int(rng.integers(1, 3))
        fast = rng.uniform(1.3, 1.6)
        slow = rng.uniform(0.6, 0.85)
        off = gap if gap is not None else rng.uniform(0.2, 1.2) * rng.choice([-1, 1])
        ahead = (fast - slow) * meet
        pos = [[0.0, 0.0]]
        vel = [[fast, 0.0]]
        for i in range(k):
            pos.append([ahead, off + i * np.sign(off) * 0.9])
            vel.append([slow, 0.0])
        pos, vel = np.array(pos), np.array(vel)
    else:
        raise ConfigError(f"unknown template {template!r}; expected one of {TEMPLATES}")
    groups = [0] * pos.shape[0] if template == "parallel" else [0] + [1] * (pos.shape[0] - 1)
    return np.asarray(pos, dtype=np.float64), np.asarray(vel, dtype=np.float64), groups


def _group_schedule(rng: np.random.Generator, total: int, turn_rate: float,
                    speed_jitter: float) -> tuple[np.ndarray, np.ndarray]:
    """Heading offset (rad) and speed factor per frame for one walking group.

    The turn rate switches once at a random frame so that recent motion
    predicts the future better than the early part of the observation.
    """
    switch = int(rng.integers(1, total))
    rates = np.where(np.arange(total) < switch, rng.uniform(-turn_rate, turn_rate),
                     rng.uniform(-turn_rate, turn_rate))
    heading = np.cumsum(rates) - rates[0]
    ramp = np.linspace(0.0, 1.0, total)
    speed = 1.0 + rng.uniform(-speed_jitter, speed_jitter) * ramp
    return heading, speed


def _rollout(pos, vel, groups, total: int, rng: np.random.Generator, interact: bool,
             turn_rate: float, speed_jitter: float) -> np.ndarray:
    """Relax towards a drifting preferred velocity under mutual repulsion."""
    params = GROUND_TRUTH_FORCES
    dt = params.dt
    base_speed = np.sqrt(np.sum(vel * vel, axis=-1))
    base_dir = vel / base_speed[:, None]
    schedules = {g: _group_schedule(rng, total, turn_rate, speed_jitter) for g in sorted(set(groups))}
    heading = np.stack([schedules[g][0] for g in groups])      # (n, total)
    factor = np.stack([schedules[g][1] for g in groups])
    out = [pos.copy()]
    pos, vel = pos.copy(), vel.copy()
    for k in range(1, total):
        c, s_ = np.cos(heading[:, k]), np.sin(heading[:, k])
        d = np.stack([c * base_dir[:, 0] - s_ * base_dir[:, 1], s_ * base_dir[:, 0] + c * base_dir[:, 1]], 1)
        pref = (base_speed * factor[:, k])[:, None] * d
        force = (pref - vel) / params.tau
        if interact:
            force = force + repulsion(pos, params)
        vel = vel + dt * force
        sp = np.sqrt(np.sum(vel * vel, axis=-1))
        vmax = params.max_speed_factor * base_speed
        vel = vel * np.where(sp > vmax, vmax / np.maximum(sp, 1e-12), 1.0)[:, None]
        pos = pos + dt * vel
        out.append(pos.copy())
    return np.stack(out, axis=1)


def generate_synthetic(template: str, noise_sigma: float, count: int, seed: int, *,
                       t_obs: int = 9, t_pred: int = 12, gap: Optional[float] = None,
                       interact: bool = True, turn_rate: float = 0.06, speed_jitter: float = 0.25,
                       prefix: Optional[str] = None) -> list[Scene]:
    """Scenes of 2-4 pedestrians walking at about 1 m/s in a named geometry.

    Each walking group follows a slowly drifting preferred heading and speed
    (``turn_rate`` rad/frame, ``speed_jitter`` relative); agents of one group
    share the drift, so formations keep their spacing. Mutual avoidance uses
    social-force repulsion (off with ``interact=False``). Scenes are then
    randomly rotated and translated, and i.i.d. Gaussian noise of std
    ``noise_sigma`` is added to every point. ``template="mixed"`` draws a
    template per scene. ``gap`` fixes the lateral spacing (parallel,
    head_on, overtake) or the arrival lag (crossing) instead of sampling it.
    """
    if count < 1:
        raise ConfigError("count must be >= 1")
    if template != "mixed" and template not in TEMPLATES:
        raise ConfigError(f"unknown template {template!r}; expected one of {TEMPLATES} or 'mixed'")
    rng = np.random.default_rng(seed)
    total = t_obs + t_pred
    prefix = prefix or template
    scenes = []
    for i in range(count):
        tpl = template if template != "mixed" else TEMPLATES[int(rng.integers(len(TEMPLATES)))]
        pos, vel, groups = _layout(tpl, rng, total, t_obs, gap)
        traj = _rollout(pos, vel, groups, total, rng, interact, turn_rate, speed_jitter)
        rot = _rot(rng.uniform(0, 2 * np.pi))
        shift = rng.uniform(-5, 5, size=2)
        traj = traj @ rot.T + shift
        if noise_sigma > 0:
            traj = traj + rng.normal(0.0, noise_sigma, size=traj.shape)
        agents = tuple(Agent(str(a), traj[a, :t_obs], traj[a, t_obs:]) for a in range(traj.shape[0]))
        scenes.append(Scene(f"{prefix}-{seed}-{i}", agents))
    return scenes


# reports --------------------------------------------------------------------

def report_to_dict(r: AttackReport) -> dict:
    return {
        "scene_id": r.scene_id,
        "agent_id": r.agent_id,
        "candidate_index": r.candidate_index,
        "mode": r.mode,
        "collided": bool(r.collided),
        "collided_before": bool(r.collided_before),
        "collision_cell": None if r.collision_cell is None else list(r.collision_cell),
        "iterations_used": int(r.iterations_used),
        "p_avg": float(r.p_avg),
        "perturbation": r.perturbation.tolist(),
        "predictions_before": r.predictions_before.tolist(),
        "predictions_after": r.predictions_after.tolist(),
    }


def report_from_dict(d: dict) -> AttackReport:
    cell = d.get("collision_cell")
    return AttackReport(
        scene_id=d["scene_id"], candidate_index=int(d["candidate_index"]),
        collided=bool(d["collided"]), collision_cell=None if cell is None else (int(cell[0]), int(cell[1])),
        iterations_used=int(d["iterations_used"]), p_avg=float(d["p_avg"]),
        perturbation=np.array(d["perturbation"], dtype=np.float64),
        predictions_before=np.array(d["predictions_before"], dtype=np.float64),
        predictions_after=np.array(d["predictions_after"], dtype=np.float64),
        agent_id=d.get("agent_id", ""), mode=d.get("mode", ""),
        collided_before=bool(d.get("collided_before", False)),
    )


def summary_text(summary: dict) -> str:
    lines = [f"instances: {summary.get('instances', 0)}"]
    for k, v in summary.items():
        if k == "instances":
            continue
        lines.append(f"{k}: {v:.4f}" if isinstance(v, float) else f"{k}: {v}")
    return "\n".join(lines) + "\n"


def emit_report(reports: Sequence[AttackReport], summary: dict, path) -> None:
    """One JSON record per attack instance, then a ``{"summary": ...}`` line.

    A plain-text copy of the summary goes next to it as ``<path>.summary.txt``.
    """
    path = Path(path)
    summary = dict(summary)
    summary["instances"] = len(reports)
    try:
        with open(path, "w") as fh:
            for r in reports:
                fh.write(json.dumps(report_to_dict(r)) + "\n")
            fh.write(json.dumps({"summary": summary}, sort_keys=True) + "\n")
        Path(str(path) + ".summary.txt").write_text(summary_text(summary))
    except OSError as exc:
        raise SAttackError(f"cannot write report {path}: {exc}") from exc


def read_report(path) -> tuple[list[AttackReport], dict]:
    reports, summary = [], {}
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            d = json.loads(line)
            if "summary" in d:
                summary = d["summary"]
            else:
                reports.append(report_from_dict(d))
    return reports, summary


def summary_cr_matches(reports: Sequence[AttackReport], summary: dict) -> bool:
    return not reports or abs(metric_cr(reports) - summary["cr"]) < 1e-12


def emit_plot(scene: Scene, report: AttackReport, path) -> None:
    """Vector-graphics panel: observations, perturbed observation, predictions before/after."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    obs = scene.observations()
    c = report.candidate_index
    before, after = report.predictions_before, report.predictions_after
    with matplotlib.rc_context({"svg.hashsalt": "sattack", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(6, 5))
        for i in range(scene.n):
            color = "tab:green" if i == c else "tab:blue"
            ax.plot(obs[i, :, 0], obs[i, :, 1], "-o", ms=2, color=color, lw=1)
            ax.plot(after[i, :, 0], after[i, :, 1], "--", color=color, lw=1)
        pert = obs[c] + report.perturbation
        ax.plot(pert[:, 0], pert[:, 1], "-o", ms=2, color="tab:red", lw=1, label="perturbed obs")
        ax.plot(before[c, :, 0], before[c, :, 1], ":", color="tab:green", lw=1, label="pred before")
        ax.plot(after[c, :, 0], after[c, :, 1], "--", color="tab:red", lw=1, label="pred after")
        if report.collided and report.collision_cell is not None:
            j, t = report.collision_cell
            mid = 0.5 * (after[c, t] + after[j, t])
            ax.plot([mid[0]], [mid[1]], "X", color="orange", ms=12, gid="collision-marker",
                    label=f"collision t={t + 1}")
        ax.set_aspect("equal", adjustable="datalim")
        ax.set_title(f"{scene.scene_id} cand={scene.agents[c].agent_id} P-avg={report.p_avg:.3f} m")
        ax.legend(fontsize=7, loc="best")
        try:
            fig.savefig(path, format="svg", metadata={"Date": None})
        except OSError as exc:
            raise SAttackError(f"cannot write plot {path}: {exc}") from exc
        finally:
            plt.close(fig)


# perturbation archive -------------------------------------------------------

def archive_record(r: AttackReport, cfg_hash: str, agent_id: str) -> dict:
    return {
        "scene_id": r.scene_id, "agent_id": agent_id, "candidate_index": r.candidate_index,
        "mode": r.mode, "cfg_hash": cfg_hash, "R": r.perturbation.tolist(),
        "collided": bool(r.collided),
        "collision_cell": None if r.collision_cell is None else list(r.collision_cell),
        "p_avg": float(r.p_avg),
    }


def write_archive(records: Iterable[dict], path) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def read_archive(path) -> list[dict]:
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                rec["R"] = np.array(rec["R"], dtype=np.float64)
                out.append(rec)
    return out


def write_curve_csv(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        w.writeheader()
        for row in rows:
            w.writerow(row)
