"""Teaching-act-conditioned motion diffusion.

The denoiser predicts the injected noise.  Motion frames become latent
tokens, clip- and frame-level act embeddings are added to them, and each
block runs windowed self-attention over motion tokens followed by windowed
cross-attention to the speech-conditioning tokens.  Both attentions only
see tokens within ``window`` frames, so an L-block model's noise estimate
at frame t depends on conditioning frames in [t - L*W, t + L*W] only.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

log = logging.getLogger(__name__)


class DiffusionTrainingError(RuntimeError):
    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


# ---------------------------------------------------------------------------
# noise schedule


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.betas, dtype=np.float64)
        if b.ndim != 1 or b.size < 1 or np.any(b <= 0) or np.any(b >= 1):
            raise ValueError("betas must be a non-empty vector in (0, 1)")
        object.__setattr__(self, "betas", b)

    @classmethod
    def linear(cls, steps: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02):
        return cls(np.linspace(beta_start, beta_end, steps))

    @property
    def steps(self) -> int:
        return self.betas.size

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bar(self) -> np.ndarray:
        return np.cumprod(self.alphas)

    def infer_steps(self, n: int) -> np.ndarray:
        """Evenly strided subset of training steps, ascending, always containing 0."""
        if not 1 <= n <= self.steps:
            raise ValueError(f"inference steps must be in [1, {self.steps}]")
        return np.unique(np.round(np.linspace(0, self.steps - 1, n)).astype(np.int64))


def forward_diffuse(x0, s: int, noise, schedule: NoiseSchedule) -> np.ndarray:
    """x_s = sqrt(abar_s) x0 + sqrt(1 - abar_s) eps."""
    if not 0 <= s < schedule.steps:
        raise ValueError(f"step {s} outside [0, {schedule.steps})")
    x0 = np.asarray(x0, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if x0.shape != noise.shape:
        raise ValueError("noise shape must match the clip")
    ab = schedule.alpha_bar[s]
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * noise


# ---------------------------------------------------------------------------
# denoiser


@dataclass(frozen=True)
class DenoiserConfig:
    motion_dim: int = 8
    audio_dim: int = 4
    text_dim: int = 4
    n_acts: int = 8
    d_model: int = 64
    n_blocks: int = 2
    n_heads: int = 4
    window: int = 8
    ff_mult: int = 2
    lambda_c: float = 1.0
    lambda_f: float = 0.5
    lambda_act: float = 0.1
    seed_weight: float = 0.1

    def __post_init__(self):
        dims = (self.motion_dim, self.audio_dim, self.text_dim, self.n_acts, self.d_model,
                self.n_blocks, self.n_heads, self.ff_mult)
        if min(dims) < 1 or self.window < 0:
            raise ValueError("denoiser sizes must be positive and window >= 0")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")

    @property
    def cond_dim(self) -> int:
        return self.audio_dim + self.text_dim

    @classmethod
    def full(cls, **kw) -> "DenoiserConfig":
        base = dict(motion_dim=684, audio_dim=1133, text_dim=301, d_model=256)
        base.update(kw)
        return cls(**base)

    @classmethod
    def from_dict(cls, d: Mapping) -> "DenoiserConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown denoiser keys: {sorted(unknown)}")
        return cls(**d)


def sinusoidal(x: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=x.dtype) / max(half, 1))
    ang = x[..., None].to(freqs.dtype) * freqs
    emb = torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def band_mask(T_q: int, T_k: int, window: int) -> torch.Tensor:
    """True where |i - j| <= window."""
    i = torch.arange(T_q)[:, None]
    j = torch.arange(T_k)[None, :]
    return (i - j).abs() <= window


class LocalAttention(nn.Module):
    def __init__(self, d: int, n_heads: int):
        super().__init__()
        if d % n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        self.h = n_heads
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.o = nn.Linear(d, d)

    def forward(self, x, ctx, mask):
        B, T, d = x.shape
        dh = d // self.h
        q = self.q(x).view(B, T, self.h, dh).transpose(1, 2)
        k = self.k(ctx).view(B, ctx.shape[1], self.h, dh).transpose(1, 2)
        v = self.v(ctx).view(B, ctx.shape[1], self.h, dh).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(dh)
        scores = scores.masked_fill(~mask, float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(B, T, d)
        return self.o(out)


class Block(nn.Module):
    """Self-attention, then cross-attention, then feed-forward (pre-norm)."""

    def __init__(self, d: int, n_heads: int, ff_mult: int):
        super().__init__()
        self.n1 = nn.LayerNorm(d)
        self.self_attn = LocalAttention(d, n_heads)
        self.n2 = nn.LayerNorm(d)
        self.cross_attn = LocalAttention(d, n_heads)
        self.n3 = nn.LayerNorm(d)
        self.ff = nn.Sequential(nn.Linear(d, ff_mult * d), nn.GELU(), nn.Linear(ff_mult * d, d))

    def forward(self, h, ctx, mask):
        y = self.n1(h)
        h = h + self.self_attn(y, y, mask)
        h = h + self.cross_attn(self.n2(h), ctx, mask)
        return h + self.ff(self.n3(h))


class Denoiser(nn.Module):
    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = c = config
        d = c.d_model
        self.motion_in = nn.Linear(c.motion_dim, d)
        self.cond_in = nn.Linear(c.cond_dim, d)
        self.seed_in = nn.Linear(c.motion_dim + 1, d)
        self.act_clip = nn.Linear(c.n_acts, d, bias=False)
        self.act_frame = nn.Linear(c.n_acts, d, bias=False)
        self.time_mlp = nn.Sequential(nn.Linear(d, d), nn.GELU(), nn.Linear(d, d))
        self.blocks = nn.ModuleList(Block(d, c.n_heads, c.ff_mult) for _ in range(c.n_blocks))
        self.out_norm = nn.LayerNorm(d)
        self.out = nn.Linear(d, c.motion_dim)
        self.act_head = nn.Linear(d, c.n_acts)

    def forward(self, x_s, s, cond, u, u_frames, seed=None, seed_mask=None):
        """Return (eps_hat (B, T, D_m), act logits (B, K)).

        ``s`` is a (B,) tensor of step indices; ``seed`` is (B, T, D_m) with
        ``seed_mask`` (B, T) marking the prefix frames it fills.
        """
        c = self.config
        B, T, _ = x_s.shape
        pos = sinusoidal(torch.arange(T, dtype=x_s.dtype), c.d_model)
        h = self.motion_in(x_s)
        h = h + c.lambda_c * self.act_clip(u)[:, None, :] + c.lambda_f * self.act_frame(u_frames)
        if seed is None:
            seed = torch.zeros_like(x_s)
            seed_mask = torch.zeros((B, T), dtype=torch.bool)
        m = seed_mask.to(x_s.dtype)[..., None]
        h = h + self.seed_in(torch.cat([seed * m, m], dim=-1))
        h = h + self.time_mlp(sinusoidal(s.to(x_s.dtype), c.d_model))[:, None, :] + pos
        ctx = self.cond_in(cond) + pos
        mask = band_mask(T, T, c.window)
        for blk in self.blocks:
            h = blk(h, ctx, mask)
        logits = self.act_head(h.mean(dim=1))
        return self.out(self.out_norm(h)), logits


# ---------------------------------------------------------------------------
# loss


@dataclass
class Batch:
    x0: torch.Tensor  # (B, T, D_m)
    cond: torch.Tensor  # (B, T, D_c)
    u: torch.Tensor  # (B, K) one-hot
    u_frames: torch.Tensor  # (B, T, K) one-hot
    seed_mask: torch.Tensor | None = None  # (B, T) bool

    @property
    def labels(self) -> torch.Tensor:
        return self.u.argmax(dim=-1)


def frame_weights(seed_mask, shape, seed_weight, dtype):
    w = torch.ones(shape[:2], dtype=dtype)
    if seed_mask is not None:
        w = torch.where(seed_mask, torch.as_tensor(seed_weight, dtype=dtype), w)
    return w


def diffusion_losses(eps, eps_hat, logits, labels, seed_mask=None, seed_weight=0.1,
                     lambda_act=0.1):
    """(L_total, L_diff, L_act) for given predictions."""
    w = frame_weights(seed_mask, eps.shape, seed_weight, eps.dtype)
    se = ((eps - eps_hat) ** 2).sum(dim=-1)
    l_diff = (w * se).sum() / (w.sum() * eps.shape[-1])
    l_act = F.cross_entropy(logits, labels)
    return l_diff + lambda_act * l_act, l_diff, l_act


def loss(model: Denoiser, batch: Batch, schedule: NoiseSchedule, s, noise):
    """Noise the batch at steps ``s`` with ``noise`` and score the denoiser."""
    ab = torch.as_tensor(schedule.alpha_bar, dtype=batch.x0.dtype)[s][:, None, None]
    x_s = ab.sqrt() * batch.x0 + (1 - ab).sqrt() * noise
    seed = batch.x0 if batch.seed_mask is not None else None
    eps_hat, logits = model(x_s, s, batch.cond, batch.u, batch.u_frames, seed, batch.seed_mask)
    c = model.config
    return diffusion_losses(noise, eps_hat, logits, batch.labels, batch.seed_mask,
                            c.seed_weight, c.lambda_act)


# ---------------------------------------------------------------------------
# data windows


@dataclass
class MotionDataset:
    """Aligned windows: motion (N, T, D_m), cond (N, T, D_c), frame acts (N, T) ints."""

    motion: np.ndarray
    cond: np.ndarray
    frame_acts: np.ndarray
    fps: float = 30.0

    def __post_init__(self):
        if len(self.motion) == 0:
            raise ValueError("empty motion dataset")
        if not (len(self.motion) == len(self.cond) == len(self.frame_acts)):
            raise ValueError("motion, cond and acts must have the same number of clips")

    def __len__(self):
        return len(self.motion)

    @property
    def clip_acts(self) -> np.ndarray:
        from .policy import modal_act

        return np.array([modal_act(a) for a in self.frame_acts])


def fit_window(arr: np.ndarray, T: int, start: int = 0) -> np.ndarray:
    """Crop ``arr`` to T frames from ``start``, or pad by repeating the last frame."""
    arr = np.asarray(arr)
    if arr.shape[0] >= T:
        return arr[start:start + T]
    pad = [(0, T - arr.shape[0])] + [(0, 0)] * (arr.ndim - 1)
    return np.pad(arr, pad, mode="edge")


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    window_frames: int = 32
    steps: int = 2000
    batch_size: int = 32
    lr: float = 0.05
    momentum: float = 0.9
    grad_clip: float = 1.0
    seed_prob: float = 0.3
    max_seed_frac: float = 0.25
    diffusion_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    seed: int = 0
    log_every: int = 200

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown training keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainedModel:
    model: Denoiser
    schedule: NoiseSchedule
    fps: float = 30.0
    history: list = field(default_factory=list)

    @property
    def config(self) -> DenoiserConfig:
        return self.model.config


def _make_batch(ds: MotionDataset, idx, T, rng, train_cfg, K, dtype):
    xs, cs, fa = [], [], []
    for i in idx:
        n = ds.motion[i].shape[0]
        start = int(rng.integers(0, n - T + 1)) if n > T else 0
        xs.append(fit_window(ds.motion[i], T, start))
        cs.append(fit_window(ds.cond[i], T, start))
        fa.append(fit_window(ds.frame_acts[i], T, start))
    fa = np.stack(fa).astype(np.int64)
    from .policy import modal_act

    clip = np.array([modal_act(a) for a in fa])
    eye = np.eye(K)
    seed_mask = None
    if train_cfg is not None and train_cfg.seed_prob > 0:
        use = rng.random(len(idx)) < train_cfg.seed_prob
        t0 = rng.integers(1, max(2, int(train_cfg.max_seed_frac * T) + 1), size=len(idx))
        seed_mask = torch.as_tensor((np.arange(T)[None, :] < t0[:, None]) & use[:, None])
    return Batch(
        torch.as_tensor(np.stack(xs), dtype=dtype),
        torch.as_tensor(np.stack(cs), dtype=dtype),
        torch.as_tensor(eye[clip], dtype=dtype),
        torch.as_tensor(eye[fa], dtype=dtype),
        seed_mask,
    )


def train(ds: MotionDataset, config: DenoiserConfig = DenoiserConfig(),
          train_cfg: TrainConfig = TrainConfig(), dtype=torch.float32) -> TrainedModel:
    """SGD with momentum and cosine decay on L_diff + lambda_act * L_act."""
    torch.manual_seed(train_cfg.seed)
    rng = np.random.default_rng(train_cfg.seed)
    model = Denoiser(config).to(dtype)
    schedule = NoiseSchedule.linear(train_cfg.diffusion_steps, train_cfg.beta_start, train_cfg.beta_end)
    opt = torch.optim.SGD(model.parameters(), lr=train_cfg.lr, momentum=train_cfg.momentum)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(1, train_cfg.steps))
    gen = torch.Generator().manual_seed(train_cfg.seed)
    T = train_cfg.window_frames
    history = []
    last_good = {k: v.clone() for k, v in model.state_dict().items()}
    for step in range(train_cfg.steps):
        idx = rng.integers(0, len(ds), size=train_cfg.batch_size)
        batch = _make_batch(ds, idx, T, rng, train_cfg, config.n_acts, dtype)
        s = torch.randint(0, schedule.steps, (len(idx),), generator=gen)
        noise = torch.randn(batch.x0.shape, generator=gen, dtype=dtype)
        total, l_diff, l_act = loss(model, batch, schedule, s, noise)
        if not torch.isfinite(total):
            model.load_state_dict(last_good)
            raise DiffusionTrainingError(f"non-finite loss at step {step}",
                                         TrainedModel(model, schedule, ds.fps, history))
        opt.zero_grad()
        total.backward()
        if train_cfg.grad_clip:
            nn.utils.clip_grad_norm_(model.parameters(), train_cfg.grad_clip)
        opt.step()
        sched.step()
        history.append((total.item(), l_diff.item(), l_act.item()))
        if train_cfg.log_every and step % train_cfg.log_every == 0:
            log.info("step %d loss %.4f diff %.4f act %.4f", step, *history[-1])
            last_good = {k: v.clone() for k, v in model.state_dict().items()}
    model.eval()
    return TrainedModel(model, schedule, ds.fps, history)


def act_accuracy(trained: TrainedModel, ds: MotionDataset, seed: int = 0, window=None,
                 blind: bool = False) -> float:
    """Held-out accuracy of the auxiliary act head on noised windows.

    The latents the head reads carry the act embeddings.  ``blind`` zeroes
    the act inputs so the head has to infer the act from noised motion and
    speech alone.
    """
    model, schedule = trained.model, trained.schedule
    dtype = next(model.parameters()).dtype
    T = window or ds.motion.shape[1]
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    batch = _make_batch(ds, np.arange(len(ds)), T, rng, None, model.config.n_acts, dtype)
    s = torch.randint(0, schedule.steps, (len(ds),), generator=gen)
    ab = torch.as_tensor(schedule.alpha_bar, dtype=dtype)[s][:, None, None]
    noise = torch.randn(batch.x0.shape, generator=gen, dtype=dtype)
    x_s = ab.sqrt() * batch.x0 + (1 - ab).sqrt() * noise
    u, u_frames = batch.u, batch.u_frames
    if blind:
        u, u_frames = torch.zeros_like(u), torch.zeros_like(u_frames)
    with torch.no_grad():
        _, logits = model(x_s, s, batch.cond, u, u_frames)
    return float((logits.argmax(-1) == batch.labels).double().mean())


# ---------------------------------------------------------------------------
# sampling


@dataclass(frozen=True)
class SeedPrefix:
    frames: np.ndarray  # (T0, D_m)

    @property
    def length(self) -> int:
        return self.frames.shape[0]

    def mask(self, T: int) -> np.ndarray:
        if not self.length < T:
            raise ValueError("seed prefix must be shorter than the clip")
        return np.arange(T) < self.length


def sample(trained: TrainedModel, cond, u, u_frames, seed: SeedPrefix | None = None,
           infer_steps: int = 50, rng_seed: int = 0) -> np.ndarray:
    """Strided ancestral sampling; returns a (T, D_m) clip.

    Seed-prefix frames are overwritten at every step with the prefix noised
    to the current level, and with the clean prefix at the end.
    """
    model, schedule = trained.model, trained.schedule
    c = model.config
    dtype = next(model.parameters()).dtype
    cond = torch.as_tensor(np.asarray(cond), dtype=dtype)[None]
    u = torch.as_tensor(np.asarray(u), dtype=dtype)[None]
    u_frames = torch.as_tensor(np.asarray(u_frames), dtype=dtype)[None]
    T = cond.shape[1]
    if u_frames.shape[1] != T:
        raise ValueError("act schedule length must match the conditioning length")
    gen = torch.Generator().manual_seed(rng_seed)
    ab_all = schedule.alpha_bar
    taus = schedule.infer_steps(infer_steps)[::-1]

    seed_t = seed_mask = None
    if seed is not None:
        m = seed.mask(T)
        seed_mask = torch.as_tensor(m)[None]
        full = np.zeros((T, c.motion_dim))
        full[: seed.length] = seed.frames
        seed_t = torch.as_tensor(full, dtype=dtype)[None]

    def inpaint(x, ab):
        if seed_t is None:
            return x
        z = torch.randn(x.shape, generator=gen, dtype=dtype)
        noised = math.sqrt(ab) * seed_t + math.sqrt(1 - ab) * z
        return torch.where(seed_mask[..., None], noised, x)

    x = torch.randn((1, T, c.motion_dim), generator=gen, dtype=dtype)
    x = inpaint(x, ab_all[taus[0]])
    with torch.no_grad():
        for i, tau in enumerate(taus):
            ab = ab_all[tau]
            ab_prev = ab_all[taus[i + 1]] if i + 1 < len(taus) else 1.0
            s = torch.full((1,), int(tau), dtype=torch.long)
            eps, _ = model(x, s, cond, u, u_frames, seed_t, seed_mask)
            x0_hat = (x - math.sqrt(1 - ab) * eps) / math.sqrt(ab)
            if i + 1 == len(taus):
                x = x0_hat
                break
            a_step = ab / ab_prev
            beta = 1 - a_step
            mean = (x - beta / math.sqrt(1 - ab) * eps) / math.sqrt(a_step)
            var = beta * (1 - ab_prev) / (1 - ab)
            x = mean + math.sqrt(var) * torch.randn(x.shape, generator=gen, dtype=dtype)
            x = inpaint(x, ab_prev)
    if seed_t is not None:
        x = torch.where(seed_mask[..., None], seed_t, x)
    return x[0].double().numpy()


# ---------------------------------------------------------------------------
# checkpoints: magic, u64 header length, JSON header, raw little-endian tensors

MAGIC = b"TMDIFF01"
CHECKPOINT_VERSION = 1


def save_checkpoint(trained: TrainedModel, path) -> Path:
    sched = trained.schedule
    state = trained.model.state_dict()
    tensors, blobs, offset = [], [], 0
    for name, t in state.items():
        arr = t.detach().cpu().numpy()
        dt = "<f8" if arr.dtype == np.float64 else "<f4"
        raw = np.ascontiguousarray(arr, dtype=dt).tobytes()
        tensors.append({"name": name, "shape": list(arr.shape), "dtype": dt,
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "format": "tutormotion.diffusion",
        "version": CHECKPOINT_VERSION,
        "config": asdict(trained.config),
        "schedule": {"betas": sched.betas.tolist()},
        "fps": trained.fps,
        "tensors": tensors,
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(hb)))
        f.write(hb)
        for b in blobs:
            f.write(b)
    return path


def load_checkpoint(path) -> TrainedModel:
    with open(path, "rb") as f:
        data = f.read()
    if data[:8] != MAGIC:
        raise ValueError(f"{path} is not a diffusion checkpoint")
    (n,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16:16 + n])
    if header.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header.get('version')}")
    body = memoryview(data)[16 + n:]
    state = {}
    dtype = torch.float32
    for t in header["tensors"]:
        arr = np.frombuffer(body[t["offset"]:t["offset"] + t["nbytes"]], dtype=t["dtype"])
        arr = arr.reshape(t["shape"]).astype(np.float64 if t["dtype"] == "<f8" else np.float32)
        state[t["name"]] = torch.from_numpy(arr.copy())
        dtype = state[t["name"]].dtype
    model = Denoiser(DenoiserConfig(**header["config"])).to(dtype)
    model.load_state_dict(state)
    model.eval()
    return TrainedModel(model, NoiseSchedule(np.array(header["schedule"]["betas"])), header["fps"])


def with_gains(trained: TrainedModel, **gains) -> TrainedModel:
    """Same weights with different conditioning gains."""
    model = Denoiser(replace(trained.config, **gains)).to(next(trained.model.parameters()).dtype)
    model.load_state_dict(trained.model.state_dict())
    model.eval()
    return TrainedModel(model, trained.schedule, trained.fps, trained.history)
