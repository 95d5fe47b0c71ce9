"""Motion statistics, per-act normalization, and act-separation reports."""

from __future__ import annotations

import csv
import warnings
from dataclasses import astuple, dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .bvh import JointTrajectory


STAT_NAMES = ("amplitude", "velocity", "jerk", "energy", "range")


@dataclass(frozen=True)
class MotionStats:
    amplitude: float  # units / frame
    velocity: float  # units / s
    jerk: float  # units / s^3, RMS
    energy: float  # units^2 / s^2
    range: float  # units

    def as_array(self) -> np.ndarray:
        return np.array(astuple(self))


def compute_stats(traj, fps: float | None = None, range_mode: str = "mean") -> MotionStats:
    """Five gesture statistics from a (frames, joints, 3) trajectory.

    Displacement uses first differences, speed uses ``np.gradient`` (central
    inside, one-sided at the ends), and jerk uses the four-point third
    difference so only complete stencils contribute.
    """
    if isinstance(traj, JointTrajectory):
        fps = traj.fps if fps is None else fps
        traj = traj.positions
    if fps is None or not fps > 0:
        raise ValueError("fps must be a positive number")
    p = np.asarray(traj, dtype=np.float64)
    if p.ndim == 2:
        p = p[:, :, None]
    if p.shape[0] < 4:
        raise ValueError("at least 4 frames are needed for jerk")
    if range_mode not in ("mean", "max"):
        raise ValueError("range_mode must be 'mean' or 'max'")

    disp = np.linalg.norm(np.diff(p, axis=0), axis=-1)
    amplitude = float(disp.mean())
    velocity = amplitude * fps
    v = np.gradient(p, 1.0 / fps, axis=0)
    energy = float(np.mean(np.sum(v * v, axis=-1)))
    j = np.diff(p, n=3, axis=0) * fps ** 3
    jerk = float(np.sqrt(np.mean(np.sum(j * j, axis=-1))))
    diag = np.linalg.norm(p.max(axis=0) - p.min(axis=0), axis=-1)
    rng = float(diag.mean() if range_mode == "mean" else diag.max())
    return MotionStats(amplitude, velocity, jerk, energy, rng)


@dataclass(frozen=True)
class NormalizedStatsTable:
    acts: tuple[str, ...]
    values: np.ndarray  # (acts, 5)
    normalizer: tuple[str | None, ...]  # act holding each column max

    def row(self, act: str) -> np.ndarray:
        return self.values[self.acts.index(act)]

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(("act",) + STAT_NAMES)
            for act, row in zip(self.acts, self.values):
                w.writerow([act] + [f"{x:.6f}" for x in row])


def normalize_table(stats: Mapping[str, MotionStats | Sequence[float]]) -> NormalizedStatsTable:
    """Divide each column by its maximum over acts."""
    if not stats:
        raise ValueError("need at least one act")
    acts = tuple(stats)
    raw = np.array([s.as_array() if isinstance(s, MotionStats) else np.asarray(s, float)
                    for s in stats.values()])
    cmax = raw.max(axis=0)
    out = np.zeros_like(raw)
    normalizer = []
    for k, name in enumerate(STAT_NAMES):
        if cmax[k] > 0:
            out[:, k] = raw[:, k] / cmax[k]
            normalizer.append(acts[int(np.argmax(raw[:, k]))])
        else:
            warnings.warn(f"column {name!r} is all zero; left unnormalized", RuntimeWarning)
            normalizer.append(None)
    return NormalizedStatsTable(acts, out, tuple(normalizer))


@dataclass(frozen=True)
class DistanceMatrix:
    acts: tuple[str, ...]
    D: np.ndarray

    def separation(self) -> float:
        """Mean off-diagonal distance; 0 for fewer than two acts."""
        n = len(self.acts)
        if n < 2:
            return 0.0
        return float(self.D[~np.eye(n, dtype=bool)].mean())

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(("act",) + self.acts)
            for act, row in zip(self.acts, self.D):
                w.writerow([act] + [f"{x:.6f}" for x in row])


def pairwise_distances(table: NormalizedStatsTable) -> DistanceMatrix:
    X = table.values
    diff = X[:, None, :] - X[None, :, :]
    D = np.sqrt(np.sum(diff * diff, axis=-1))
    D = 0.5 * (D + D.T)
    np.fill_diagonal(D, 0.0)
    return DistanceMatrix(table.acts, D)


def act_stats(clips: Mapping[str, Sequence], fps: float) -> dict[str, MotionStats]:
    """Average each statistic over all clips of an act.

    ``clips`` maps act label to a list of trajectories (arrays or JointTrajectory).
    """
    out = {}
    for act in sorted(clips):
        rows = [compute_stats(c, fps).as_array() for c in clips[act]]
        if rows:
            out[act] = MotionStats(*np.mean(rows, axis=0))
    return out


@dataclass
class AblationReport:
    acts: tuple[str, ...]
    baseline_table: NormalizedStatsTable | None
    conditioned_table: NormalizedStatsTable | None
    baseline_distances: DistanceMatrix | None
    conditioned_distances: DistanceMatrix | None
    baseline_separation: float
    conditioned_separation: float
    notes: list

    @property
    def separation_delta(self) -> float:
        return self.conditioned_separation - self.baseline_separation


def ablation_report(baseline_clips: Mapping[str, Sequence], conditioned_clips: Mapping[str, Sequence],
                    acts: Sequence[str] | None = None, fps: float = 30.0,
                    out_dir=None) -> AblationReport:
    """Compare act separation between an unconditioned and a conditioned corpus."""
    acts = tuple(acts) if acts is not None else tuple(sorted(set(baseline_clips) | set(conditioned_clips)))
    notes = []
    for name, corpus in (("baseline", baseline_clips), ("conditioned", conditioned_clips)):
        missing = [a for a in acts if not corpus.get(a)]
        if missing:
            notes.append(f"{name} corpus has no clips for: {', '.join(missing)}")
    shared = tuple(a for a in acts if baseline_clips.get(a) and conditioned_clips.get(a))

    def side(corpus):
        if not shared:
            return None, None, 0.0
        stats = act_stats({a: corpus[a] for a in shared}, fps)
        table = normalize_table({a: stats[a] for a in shared})
        dist = pairwise_distances(table)
        return table, dist, dist.separation()

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        bt, bd, bs = side(baseline_clips)
        ct, cd, cs = side(conditioned_clips)
    report = AblationReport(shared, bt, ct, bd, cd, bs, cs, notes)
    if out_dir is not None:
        write_ablation_report(report, out_dir)
    return report


def write_ablation_report(report: AblationReport, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, table, dist in (("baseline", report.baseline_table, report.baseline_distances),
                              ("conditioned", report.conditioned_table, report.conditioned_distances)):
        if table is None:
            continue
        table.to_csv(out / f"{name}_stats.csv")
        dist.to_csv(out / f"{name}_distances.csv")
        written += [out / f"{name}_stats.csv", out / f"{name}_distances.csv"]
    with open(out / "separation.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("model", "separation"))
        w.writerow(("baseline", f"{report.baseline_separation:.6f}"))
        w.writerow(("conditioned", f"{report.conditioned_separation:.6f}"))
    written.append(out / "separation.csv")
    if report.notes:
        (out / "notes.txt").write_text("\n".join(report.notes) + "\n")
        written.append(out / "notes.txt")
    if report.baseline_distances is not None:
        written.append(render_heatmaps(report, out / "distances.png"))
    return written


def render_heatmaps(mats, path) -> Path:
    """Side-by-side distance heatmaps; ``mats`` is a report or ``[(title, DistanceMatrix)]``."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if isinstance(mats, AblationReport):
        mats = [("baseline", mats.baseline_distances), ("conditioned", mats.conditioned_distances)]
    mats = list(mats)
    vmax = max(float(m.D.max()) for _, m in mats) or 1.0
    fig, axes = plt.subplots(1, len(mats), figsize=(4.5 * len(mats), 4), squeeze=False)
    axes = axes[0]
    for ax, (title, m) in zip(axes, mats):
        im = ax.imshow(m.D, vmin=0, vmax=vmax, cmap="viridis")
        ax.set_xticks(range(len(m.acts)), m.acts, rotation=45, ha="right")
        ax.set_yticks(range(len(m.acts)), m.acts)
        ax.set_title(f"{title} (sep {m.separation():.3f})")
    fig.colorbar(im, ax=list(axes), shrink=0.8)
    # fixed metadata keeps the PNG bytes reproducible
    fig.savefig(path, dpi=80, metadata={"Software": None})
    plt.close(fig)
    return Path(path)

