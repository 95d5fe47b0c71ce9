"""End-to-end orchestration: synthetic data, training stages, run, analysis, ablation.

Seeding: every stage draws from ``stage_seed(root, name)``, a 32-bit value
from ``numpy.random.SeedSequence([root, crc32(name)])``.  Stage names are
``synth/affect``, ``synth/motion``, ``experts/<modality>``,
``diffusion/train``, ``diffusion/baseline`` and ``sample/<clip id>/<window>``.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import os
import shlex
import zlib
from contextlib import contextmanager
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Mapping

import numpy as np

from . import bvh, container
from .analysis import (ablation_report, act_stats, compute_stats, normalize_table,
                       pairwise_distances, render_heatmaps)
from .diffusion import (DenoiserConfig, SeedPrefix, TrainConfig, load_checkpoint,
                        sample, save_checkpoint, train)
from .fusion import (Calibration, GateParams, calibrate, degrade_modality, fuse_batch,
                     gate_confidence, gate_forward, train_gate)
from .gbdt import MODALITIES, BoostConfig, ExpertBank, fit_experts
from .policy import ACTS, ActPolicy, PolicyThresholds, constant_schedule, encode_schedule
from .retarget import RobotProfile, retarget, write_outputs
from .synth import (AffectSynthSpec, MotionSynthSpec, affect_arrays, motion_dataset,
                    synth_affect, synth_motion)

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


class ConfigError(ValueError):
    exit_code = 2


class DataError(RuntimeError):
    exit_code = 3


class MissingModelError(DataError):
    pass


def stage_seed(root: int, name: str) -> int:
    ss = np.random.SeedSequence([int(root), zlib.crc32(name.encode())])
    return int(ss.generate_state(1)[0])


# ---------------------------------------------------------------------------
# configuration

DEFAULTS = {
    "seed": 0,
    "paths": {"data": "data", "models": "models", "output": "out"},
    "synth": {"affect": {}, "motion": {}},
    "experts": {"boost": {}, "seeds": None, "deltas": {}},
    "gate": {"lam_ent": 0.01, "steps": 2000, "lr": 0.05, "momentum": 0.9, "degrade_prob": 0.3},
    "policy": {"thresholds": {}, "external_command": None, "confidence_override": None,
               "confidence_source": "entropy"},
    "diffusion": {"model": {}, "train": {}, "infer_steps": 50, "seed_frames": 8,
                  "angle_scale": 30.0, "bone_length": 10.0},
    "retarget": {"profile": None},
    "run": {"split": "test", "max_clips": None},
    "ablate": {"clips_per_act": 8, "segments": 4, "train_if_missing": False},
}


def _merge(base: dict, over: Mapping, where: str) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise ConfigError(f"unknown config key {where}{k!r}")
        if isinstance(base[k], dict) and base[k] and isinstance(v, Mapping):
            out[k] = _merge(base[k], v, f"{where}{k}.")
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class PipelineConfig:
    raw: dict

    @classmethod
    def from_dict(cls, d: Mapping | None = None, **overrides) -> "PipelineConfig":
        cfg = _merge(DEFAULTS, d or {}, "")
        for k, v in overrides.items():
            if v is None:
                continue
            if k == "seed":
                cfg["seed"] = int(v)
            elif k in cfg["paths"]:
                cfg["paths"][k] = str(v)
            else:
                raise ConfigError(f"unknown override {k!r}")
        cfg = cls(cfg)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path, **overrides) -> "PipelineConfig":
        try:
            with open(path) as f:
                d = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        return cls.from_dict(d, **overrides)

    def validate(self):
        """Build every typed sub-config once so bad keys fail before any work."""
        try:
            self.boost_config()
            self.thresholds()
            self.denoiser_config()
            self.train_config()
            AffectSynthSpec.from_dict(self.raw["synth"]["affect"])
            MotionSynthSpec.from_dict(self.raw["synth"]["motion"])
            if self.raw["policy"]["confidence_source"] not in CONFIDENCE_SOURCES:
                raise ValueError(f"policy.confidence_source must be one of {CONFIDENCE_SOURCES}")
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from None

    def __getitem__(self, k):
        return self.raw[k]

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    def path(self, which: str) -> Path:
        return Path(self.raw["paths"][which])

    def boost_config(self) -> BoostConfig:
        return BoostConfig(**self.raw["experts"]["boost"])

    def thresholds(self) -> PolicyThresholds:
        return PolicyThresholds.from_dict(self.raw["policy"]["thresholds"])

    def denoiser_config(self, baseline=False) -> DenoiserConfig:
        c = DenoiserConfig.from_dict(self.raw["diffusion"]["model"])
        return replace(c, lambda_c=0.0, lambda_f=0.0) if baseline else c

    def train_config(self, stage="diffusion/train") -> TrainConfig:
        d = dict(self.raw["diffusion"]["train"])
        d.setdefault("seed", stage_seed(self.seed, stage))
        return TrainConfig.from_dict(d)

    def dump(self, path):
        with open(path, "w") as f:
            json.dump(self.raw, f, indent=2, sort_keys=True)
            f.write("\n")


# ---------------------------------------------------------------------------
# file locations and model envelopes


def affect_path(cfg):
    return cfg.path("data") / "affect.tmc"


def motion_path(cfg):
    return cfg.path("data") / "motion.tmc"


def experts_path(cfg):
    return cfg.path("models") / "experts.json"


def gate_path(cfg):
    return cfg.path("models") / "gate.json"


def diffusion_path(cfg, baseline=False):
    return cfg.path("models") / ("diffusion_baseline.ckpt" if baseline else "diffusion.ckpt")


def _write_json(obj, path):
    with open(path, "w") as f:
        json.dump(obj, f, indent=1, sort_keys=True)
        f.write("\n")


def _envelope(kind: str, body: dict) -> dict:
    return {"format": f"tutormotion.{kind}", "version": FORMAT_VERSION, **body}


def _open_envelope(path, kind: str, mode: str) -> dict:
    if not Path(path).exists():
        raise MissingModelError(f"{path} not found; run `{mode}` first")
    with open(path) as f:
        d = json.load(f)
    if d.get("format") != f"tutormotion.{kind}" or d.get("version") != FORMAT_VERSION:
        raise DataError(f"{path} is not a version-{FORMAT_VERSION} {kind} file")
    return d


def load_experts(cfg) -> ExpertBank:
    return ExpertBank.from_dict(_open_envelope(experts_path(cfg), "experts", "train-experts"))


def load_gate(cfg) -> tuple[GateParams, Calibration]:
    d = _open_envelope(gate_path(cfg), "gate", "train-gate")
    return GateParams.from_dict(d["gate"]), Calibration.from_dict(d["calibration"])


def load_diffusion(cfg, baseline=False):
    p = diffusion_path(cfg, baseline)
    if not p.exists():
        flag = " --baseline" if baseline else ""
        raise MissingModelError(f"{p} not found; run `train-diffusion{flag}` first")
    return load_checkpoint(p)


def _read_container(path, kind):
    if not Path(path).exists():
        raise DataError(f"{path} not found; run `synth-data` first")
    try:
        c = container.read(path)
    except container.ContainerError as e:
        raise DataError(f"{path}: {e}") from None
    if c.meta.get("kind") != kind:
        raise DataError(f"{path} is not a {kind} container")
    if len(c) == 0:
        raise DataError(f"{path} contains no clips")
    return c


# ---------------------------------------------------------------------------
# stages


def synth_data(cfg: PipelineConfig) -> list[Path]:
    try:
        aspec = AffectSynthSpec.from_dict({"seed": stage_seed(cfg.seed, "synth/affect"),
                                           **cfg["synth"]["affect"]})
        mspec = MotionSynthSpec.from_dict({"seed": stage_seed(cfg.seed, "synth/motion"),
                                           **cfg["synth"]["motion"]})
    except ValueError as e:
        raise ConfigError(str(e)) from None
    out = cfg.path("data")
    out.mkdir(parents=True, exist_ok=True)
    paths = [container.write(synth_affect(aspec), affect_path(cfg)),
             container.write(synth_motion(mspec), motion_path(cfg))]
    log.info("wrote %s", ", ".join(map(str, paths)))
    return paths


def _split_arrays(c, split):
    clips = c.select(split=split)
    if not clips:
        raise DataError(f"no clips in split {split!r}")
    return affect_arrays(clips)


def expert_seeds(cfg) -> dict[str, int]:
    given = cfg["experts"]["seeds"]
    if given is not None:
        return dict(zip(MODALITIES, (int(s) for s in given)))
    seeds = {m: stage_seed(cfg.seed, f"experts/{m}") for m in MODALITIES}
    if len(set(seeds.values())) < len(seeds):
        raise ConfigError("derived expert seeds collide; set experts.seeds explicitly")
    return seeds


def train_experts(cfg: PipelineConfig) -> Path:
    c = _read_container(affect_path(cfg), "affect")
    Xtr, _, Ytr = _split_arrays(c, "train")
    Xdv, _, Ydv = _split_arrays(c, "dev")
    bank = fit_experts(Xtr, Ytr, Xdv, Ydv, seeds=expert_seeds(cfg), config=cfg.boost_config(),
                       deltas=cfg["experts"]["deltas"])
    cfg.path("models").mkdir(parents=True, exist_ok=True)
    _write_json(_envelope("experts", bank.to_dict()), experts_path(cfg))
    for (m, t), model in sorted(bank.models.items()):
        log.info("expert %s/%s: %d trees, val loss %.5f", m, t, model.best_round,
                 min(model.val_loss))
    return experts_path(cfg)


def _degraded_copy(feats, G, rng):
    """Each row gets one randomly chosen modality masked."""
    pick = rng.integers(0, 3, size=G.shape[0])
    out_f = {m: x.copy() for m, x in feats.items()}
    out_G = G.copy()
    for k, m in enumerate(("visual", "acoustic", "text")):
        rows = pick == k
        f_k, G_k = degrade_modality({m: feats[m][rows]}, G[rows], m)
        out_f[m][rows] = f_k[m]
        out_G[rows] = G_k
    return out_f, out_G


def _gate_splits(c):
    """Dev conversations split in two: the gate fits on the first half, the
    second half selects the gate step and fits the calibration.  Expert
    predictions on their own training rows are overfit and carry no
    reliability signal, so the gate only ever sees held-out predictions."""
    dev = sorted(c.select(split="dev"), key=lambda k: k.id)
    if not dev:
        raise DataError("no clips in split 'dev'")
    if len(dev) < 2:
        return dev, dev
    half = len(dev) // 2
    return dev[:half], dev[half:]


def train_gate_stage(cfg: PipelineConfig) -> Path:
    c = _read_container(affect_path(cfg), "affect")
    bank = load_experts(cfg)
    fit_clips, sel_clips = _gate_splits(c)
    Xtr, Gtr, Ytr = affect_arrays(fit_clips)
    Xdv, Gdv, Ydv = affect_arrays(sel_clips)
    if Ydv.shape[0] < 10:
        raise DataError(f"only {Ydv.shape[0]} dev sentences for gate selection and calibration "
                        "(need 10); raise synth.affect.n_conversations")
    g = cfg["gate"]
    rng = np.random.default_rng(stage_seed(cfg.seed, "gate/degrade"))
    P = bank.predict_all(Xtr)
    if g["degrade_prob"] > 0:
        rows = rng.random(Gtr.shape[0]) < g["degrade_prob"]
        Xd, Gd = _degraded_copy({m: x[rows] for m, x in Xtr.items()}, Gtr[rows], rng)
        P = np.concatenate([P, bank.predict_all(Xd)])
        Gtr = np.concatenate([Gtr, Gd])
        Ytr = np.concatenate([Ytr, Ytr[rows]])
    Pdv = bank.predict_all(Xdv)
    res = train_gate(P, Gtr, Ytr, lam_ent=g["lam_ent"], steps=g["steps"], lr=g["lr"],
                     momentum=g["momentum"], val=(Pdv, Gdv, Ydv))
    fused_dev = fuse_batch(Pdv, gate_forward(Gdv, res.params))
    cal = calibrate(fused_dev, Ydv)
    _write_json(_envelope("gate", {"gate": res.params.to_dict(), "calibration": cal.to_dict(),
                                   "lam_ent": g["lam_ent"], "best_step": res.best_step}),
                gate_path(cfg))
    return gate_path(cfg)


def train_diffusion_stage(cfg: PipelineConfig, baseline=False) -> Path:
    c = _read_container(motion_path(cfg), "motion")
    ds = motion_dataset(c)
    model_cfg = cfg.denoiser_config(baseline)
    if ds.motion.shape[2] != model_cfg.motion_dim or ds.cond.shape[2] != model_cfg.cond_dim:
        raise ConfigError(
            f"diffusion.model dims (motion {model_cfg.motion_dim}, cond {model_cfg.cond_dim}) "
            f"do not match the data (motion {ds.motion.shape[2]}, cond {ds.cond.shape[2]})")
    tcfg = cfg.train_config("diffusion/baseline" if baseline else "diffusion/train")
    trained = train(ds, model_cfg, tcfg)
    cfg.path("models").mkdir(parents=True, exist_ok=True)
    return save_checkpoint(trained, diffusion_path(cfg, baseline))


# ---------------------------------------------------------------------------
# generation helpers


def generate_motion(trained, cond, u, u_frames, window: int, seed_frames: int, infer_steps: int,
                    rng_seed: int) -> np.ndarray:
    """Generate an arbitrarily long clip window by window.

    Every window after the first is seeded with the last ``seed_frames``
    frames generated so far.
    """
    T_total = cond.shape[0]
    if T_total <= window:
        from .diffusion import fit_window

        out = sample(trained, fit_window(cond, window), u, fit_window(u_frames, window),
                     infer_steps=infer_steps, rng_seed=rng_seed)
        return out[:T_total]
    from .diffusion import fit_window

    seed_frames = min(seed_frames, window - 1)
    out = sample(trained, cond[:window], u, u_frames[:window], infer_steps=infer_steps,
                 rng_seed=rng_seed)
    k = 1
    while out.shape[0] < T_total:
        start = out.shape[0] - seed_frames
        seed = SeedPrefix(out[start:])
        c_w = fit_window(cond[start:], window)
        f_w = fit_window(u_frames[start:], window)
        new = sample(trained, c_w, u, f_w, seed=seed, infer_steps=infer_steps,
                     rng_seed=rng_seed + k)
        out = np.concatenate([out, new[seed_frames:]])
        k += 1
    return out[:T_total]


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out: Path) -> Path:
    entries = {}
    for p in sorted(out.rglob("*")):
        if p.is_file() and p.name not in (".lock", "manifest.json"):
            entries[p.relative_to(out).as_posix()] = _sha256(p)
    path = out / "manifest.json"
    _write_json(entries, path)
    return path


@contextmanager
def output_lock(out: Path):
    out.mkdir(parents=True, exist_ok=True)
    lock = out / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise DataError(f"{out} is locked by another run (remove {lock} if stale)") from None
    os.write(fd, str(os.getpid()).encode())
    os.close(fd)
    try:
        yield out
    finally:
        lock.unlink(missing_ok=True)


def _profile(cfg) -> RobotProfile:
    p = cfg["retarget"]["profile"]
    try:
        return RobotProfile.load(p) if p else RobotProfile.default()
    except (OSError, ValueError, TypeError, KeyError) as e:
        raise ConfigError(f"bad robot profile: {e}") from None


# ---------------------------------------------------------------------------
# run

CONFIDENCE_SOURCES = ("entropy", "reliability")


def sentence_confidence(w, G, source="entropy") -> np.ndarray:
    """``entropy``: 1 - H(w)/log 3.  ``reliability``: gate-weighted reliability sum(w * g)."""
    if source == "entropy":
        return gate_confidence(w)
    if source == "reliability":
        return np.clip(np.sum(w * G, axis=-1), 0.0, 1.0)
    raise ValueError(f"unknown confidence source {source!r}")


def run_pipeline(cfg: PipelineConfig) -> dict:
    """features -> V/A -> acts -> motion -> BVH -> stats -> robot track, per conversation."""
    c = _read_container(affect_path(cfg), "affect")
    clips = c.select(split=cfg["run"]["split"])
    if cfg["run"]["max_clips"]:
        clips = clips[: int(cfg["run"]["max_clips"])]
    if not clips:
        raise DataError(f"no conversations in split {cfg['run']['split']!r}")
    bank = load_experts(cfg)
    gate, cal = load_gate(cfg)
    trained = load_diffusion(cfg)
    profile = _profile(cfg)
    th = cfg.thresholds()
    d = cfg["diffusion"]
    mcfg = trained.config
    cond_dim = clips[0].streams["audio"].shape[1] + clips[0].streams["text_cond"].shape[1]
    if cond_dim != mcfg.cond_dim:
        raise ConfigError(f"conversation conditioning has {cond_dim} dims, model expects {mcfg.cond_dim}")
    window = int(cfg.train_config().window_frames)
    override = cfg["policy"]["confidence_override"]
    src = cfg["policy"]["confidence_source"]
    ext = cfg["policy"]["external_command"]
    if isinstance(ext, str):
        ext = shlex.split(ext)
    fps = float(c.meta.get("fps", 30.0))

    out = cfg.path("output")
    with output_lock(out):
        cfg.dump(out / "config.resolved.json")
        log.info("resolved config: %s", json.dumps(cfg.raw, sort_keys=True))
        stats_rows = []
        for clip in sorted(clips, key=lambda k: k.id):
            cdir = out / clip.id
            cdir.mkdir(exist_ok=True)
            feats = {m: clip.streams[m].astype(np.float64) for m in MODALITIES}
            G = clip.streams["reliability"].astype(np.float64)
            P = bank.predict_all(feats)
            w = gate_forward(G, gate)
            raw = fuse_batch(P, w)
            va = cal.apply(raw)
            conf = sentence_confidence(w, G, src) if override is None else np.full(len(G), float(override))
            with open(cdir / "va.jsonl", "w") as f:
                for i in range(len(G)):
                    f.write(json.dumps({
                        "sentence_id": i, "v": float(va[i, 0]), "a": float(va[i, 1]),
                        "v_raw": float(raw[i, 0]), "a_raw": float(raw[i, 1]),
                        "weights": [float(x) for x in w[i]],
                        "experts": P[i].tolist(), "confidence": float(conf[i]),
                    }, sort_keys=True) + "\n")
            policy = ActPolicy(th, ext)
            records = [{"v": va[i, 0], "a": va[i, 1], "confidence": conf[i], "sentence_id": i}
                       for i in range(len(G))]
            acts_log = list(policy.run_stream(records))
            with open(cdir / "acts.jsonl", "w") as f:
                for rec in acts_log:
                    f.write(json.dumps(rec, sort_keys=True) + "\n")

            nf = clip.streams["frames"][:, 0].astype(int)
            ends = np.cumsum(nf)
            spans = list(zip((ends - nf).tolist(), ends.tolist()))
            T_total = int(ends[-1])
            acts = [r["act"] for r in acts_log]
            sched = encode_schedule(acts, spans, T_total)
            with open(cdir / "schedule.json", "w") as f:
                json.dump({"sentence_acts": acts, "spans": spans, "clip_act": sched.clip_act.label,
                           "frame_acts": [ACTS[i] for i in sched.frame_indices]}, f)
                f.write("\n")
            cond = np.concatenate([clip.streams["audio"], clip.streams["text_cond"]], axis=1)
            motion = generate_motion(trained, cond.astype(np.float64), sched.clip_level,
                                     sched.per_frame, window, int(d["seed_frames"]),
                                     int(d["infer_steps"]), stage_seed(cfg.seed, f"sample/{clip.id}"))
            doc = bvh.frames_to_document(motion, fps, float(d["angle_scale"]), float(d["bone_length"]))
            bvh.save(doc, cdir / "motion.bvh")
            traj = bvh.forward_kinematics(doc)
            if traj.positions.shape[0] >= 4:
                st = compute_stats(traj)
                stats_rows.append([clip.id, sched.clip_act.label] + [f"{x:.6f}" for x in st.as_array()])
            track, report = retarget(doc, profile)
            write_outputs(track, report, cdir / "robot_track")
        with open(out / "stats.csv", "w", newline="") as f:
            wr = csv.writer(f, lineterminator="\n")
            wr.writerow(["clip", "act", "amplitude", "velocity", "jerk", "energy", "range"])
            wr.writerows(stats_rows)
        manifest = write_manifest(out)
    return json.loads(manifest.read_text())


# ---------------------------------------------------------------------------
# analyze


def analyze(cfg: PipelineConfig, input_dir=None) -> dict:
    """Per-act normalized statistics and distances over a run's BVH outputs."""
    src = Path(input_dir) if input_dir else cfg.path("output")
    clips: dict[str, list] = {}
    fps = None
    for sidecar in sorted(src.glob("*/schedule.json")):
        motion_file = sidecar.parent / "motion.bvh"
        if not motion_file.exists():
            continue
        act = json.loads(sidecar.read_text())["clip_act"]
        doc = bvh.load(motion_file)
        fps = doc.fps
        traj = bvh.forward_kinematics(doc)
        if traj.positions.shape[0] >= 4:
            clips.setdefault(act, []).append(traj)
    if not clips:
        raise DataError(f"no BVH clips with schedule sidecars under {src}")
    stats = act_stats(clips, fps)
    table = normalize_table(stats)
    out = cfg.path("output") / "analysis"
    out.mkdir(parents=True, exist_ok=True)
    table.to_csv(out / "stats_table.csv")
    result = {"acts": list(table.acts), "table": table.values.tolist()}
    if len(table.acts) >= 2:
        dist = pairwise_distances(table)
        dist.to_csv(out / "distances.csv")
        render_heatmaps([("run", dist)], out / "distances.png")
        result["separation"] = dist.separation()
    return result


# ---------------------------------------------------------------------------
# ablation


def _ensure_checkpoints(cfg):
    out = []
    for baseline in (False, True):
        p = diffusion_path(cfg, baseline)
        if not p.exists():
            if not cfg["ablate"]["train_if_missing"]:
                flag = " --baseline" if baseline else ""
                raise MissingModelError(f"{p} not found; run `train-diffusion{flag}` first")
            train_diffusion_stage(cfg, baseline)
        out.append(load_checkpoint(p))
    return out


def renderer(fps, angle_scale=30.0, bone_length=10.0):
    """Motion frames -> FK joint trajectory through the chain skeleton."""
    def render(frames):
        doc = bvh.frames_to_document(frames, fps, angle_scale, bone_length)
        return bvh.forward_kinematics(doc)
    return render


def separation_experiment(conditioned, baseline, conds, acts, window, render, infer_steps=50,
                          root_seed=0, fps=30.0, out_dir=None):
    """Sample every act on the same conditioning windows with both models and
    compare inter-act separation of normalized motion statistics."""
    corpora = {"baseline": {}, "conditioned": {}}
    for act in acts:
        for k, cond in enumerate(conds):
            T = min(window, cond.shape[0])
            sch = constant_schedule(act, T)
            rs = stage_seed(root_seed, f"ablate/{act}/{k}")
            for name, model in (("baseline", baseline), ("conditioned", conditioned)):
                x = sample(model, cond[:T], sch.clip_level, sch.per_frame,
                           infer_steps=infer_steps, rng_seed=rs)
                corpora[name].setdefault(act, []).append(render(x))
    return ablation_report(corpora["baseline"], corpora["conditioned"], acts, fps, out_dir=out_dir)


def motion_conds(clips) -> list[np.ndarray]:
    return [np.concatenate([cl.streams["audio"], cl.streams["text"]], axis=1).astype(np.float64)
            for cl in clips]


def ablate(cfg: PipelineConfig) -> dict:
    conditioned, baseline = _ensure_checkpoints(cfg)
    c = _read_container(motion_path(cfg), "motion")
    acts = list(c.meta["spec"]["acts"])
    d = cfg["diffusion"]
    a = cfg["ablate"]
    window = cfg.train_config().window_frames
    fps = float(c.meta.get("fps", 30.0))
    conds = motion_conds(c.clips[: int(a["clips_per_act"])])
    render = renderer(fps, float(d["angle_scale"]), float(d["bone_length"]))
    out = cfg.path("output") / "ablation"
    report = separation_experiment(conditioned, baseline, conds, acts, window, render,
                                   int(d["infer_steps"]), cfg.seed, fps, out_dir=out)
    sched = schedule_ablation(conditioned, conds, acts, int(a["segments"]), window, fps,
                              int(d["infer_steps"]), cfg.seed, render)
    with open(out / "schedule_ablation.csv", "w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(["schedule", "within_clip_segment_variance"])
        wr.writerow(["per_sentence", f"{sched['per_sentence']:.6f}"])
        wr.writerow(["constant", f"{sched['constant']:.6f}"])
    return {
        "baseline_separation": report.baseline_separation,
        "conditioned_separation": report.conditioned_separation,
        "separation_delta": report.separation_delta,
        "schedule": sched,
        "notes": report.notes,
    }


def segment_variance(traj, spans, fps) -> float:
    """Variance across segments of the per-segment mean displacement."""
    amps = [compute_stats(traj.positions[s:e], fps).amplitude for s, e in spans if e - s >= 4]
    return float(np.var(amps)) if len(amps) > 1 else 0.0


def schedule_ablation(trained, conds, acts, segments, window, fps, infer_steps, root_seed,
                      render) -> dict:
    """Alternating per-sentence act schedules vs one constant act per clip."""
    if len(acts) < 2:
        return {"per_sentence": 0.0, "constant": 0.0}
    per_sentence, constant = [], []
    for k, cond in enumerate(conds):
        T = min(window, cond.shape[0])
        edges = np.linspace(0, T, segments + 1).round().astype(int)
        spans = list(zip(edges[:-1].tolist(), edges[1:].tolist()))
        seq = [acts[(i + k) % 2] for i in range(len(spans))]
        sched = encode_schedule(seq, spans, T)
        const = constant_schedule(sched.clip_act, T)
        rs = stage_seed(root_seed, f"schedule/{k}")
        for sch, sink in ((sched, per_sentence), (const, constant)):
            x = sample(trained, cond[:T], sch.clip_level, sch.per_frame,
                       infer_steps=infer_steps, rng_seed=rs)
            sink.append(segment_variance(render(x), spans, fps))
    return {"per_sentence": float(np.mean(per_sentence)), "constant": float(np.mean(constant))}


def describe(cfg: PipelineConfig) -> dict:
    return {"seed": cfg.seed, "denoiser": asdict(cfg.denoiser_config())}
