"""Student-teacher training loop.

One owner mutates TrainState. Per-iteration randomness comes from fresh
generators keyed by (seed, iteration, stream), which makes batch order a pure
function of the seed and lets a resumed run replay the exact tail of a
straight run.
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .augment import CropSpec, multicrop
from .checkpoint import read_checkpoint, write_checkpoint
from .errors import DimensionError, InputError, ParameterError
from .objective import (CenteringState, SslConfig, head_forward,
                        init_head_params, renormalize_prototypes,
                        teacher_targets_multiview, total_loss)
from .vit import VitConfig, VitEncoder, init_vit_params, vit_param_names

log = logging.getLogger("smearssl.trainer")

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

_STREAM_BATCH = 1
_STREAM_AUG = 2


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 300
    batch_size: int = 32
    base_lr: float = 1e-3  # desk default, tuned for batch 32; scale linearly
    final_lr: float = 1e-5
    warmup_frac: float = 0.1
    weight_decay: float = 0.04
    teacher_momentum_start: float = 0.992
    teacher_momentum_end: float = 1.0
    seed: int = 0
    deterministic: bool = True

    def __post_init__(self):
        if self.iterations < 0:
            raise ParameterError("iterations must be >= 0")
        if self.batch_size < 2:
            raise ParameterError("batch_size must be >= 2")
        if self.base_lr <= 0 or self.final_lr < 0:
            raise ParameterError("base_lr must be > 0 and final_lr >= 0")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ParameterError("warmup_frac must lie in [0, 1)")
        for name in ("teacher_momentum_start", "teacher_momentum_end"):
            m = getattr(self, name)
            if not 0.0 <= m <= 1.0:
                raise ParameterError(f"{name} must lie in [0, 1]")

    @property
    def warmup_iters(self) -> int:
        return int(self.warmup_frac * self.iterations)


def schedule(iteration: int, cfg: TrainConfig) -> dict[str, float]:
    """Linear warmup to base_lr then cosine to final_lr; cosine teacher
    momentum across the whole run."""
    if not 0 <= iteration < cfg.iterations:
        raise ParameterError(
            f"iteration {iteration} outside [0, {cfg.iterations})")
    warm = cfg.warmup_iters
    if warm > 0 and iteration < warm:
        lr = cfg.base_lr * iteration / warm
    else:
        span = cfg.iterations - 1 - warm
        t = (iteration - warm) / span if span > 0 else 1.0
        lr = cfg.final_lr + 0.5 * (cfg.base_lr - cfg.final_lr) * (1 + math.cos(math.pi * t))
    tspan = cfg.iterations - 1
    tt = iteration / tspan if tspan > 0 else 1.0
    m_start, m_end = cfg.teacher_momentum_start, cfg.teacher_momentum_end
    m_t = m_end + 0.5 * (m_start - m_end) * (1 + math.cos(math.pi * tt))
    return {"lr": lr, "m_t": m_t}


def ema_update(teacher: dict[str, T.Tensor], student: dict[str, T.Tensor],
               m_t: float) -> None:
    """In-place t' = m_t * t + (1 - m_t) * s per scalar. The endpoints are
    special-cased so m_t of exactly 0 or 1 is bit-exact."""
    if teacher.keys() != student.keys():
        raise DimensionError("teacher/student parameter names differ")
    for name, t in teacher.items():
        s = student[name]
        if t.data.shape != s.data.shape:
            raise DimensionError(f"shape mismatch for {name}: "
                                 f"{t.data.shape} vs {s.data.shape}")
        if m_t == 1.0:
            continue
        if m_t == 0.0:
            t.data = s.data.copy()
        else:
            t.data = (m_t * t.data.astype(np.float64)
                      + (1.0 - m_t) * s.data.astype(np.float64)).astype(t.data.dtype)


@dataclass
class TrainState:
    vit_cfg: VitConfig
    ssl_cfg: SslConfig
    train_cfg: TrainConfig
    student_enc: VitEncoder
    student_head: dict[str, T.Tensor]
    teacher_enc: VitEncoder
    teacher_head: dict[str, T.Tensor]
    moments_m: dict[str, np.ndarray]
    moments_v: dict[str, np.ndarray]
    centering: CenteringState
    iteration: int = 0
    loss_history: list[float] = field(default_factory=list)

    def student_params(self) -> dict[str, T.Tensor]:
        out = {f"encoder.{k}": v for k, v in self.student_enc.params.items()}
        out.update({f"head.{k}": v for k, v in self.student_head.items()})
        return out

    def teacher_params(self) -> dict[str, T.Tensor]:
        out = {f"encoder.{k}": v for k, v in self.teacher_enc.params.items()}
        out.update({f"head.{k}": v for k, v in self.teacher_head.items()})
        return out


def init_train_state(vit_cfg: VitConfig, ssl_cfg: SslConfig,
                     train_cfg: TrainConfig) -> TrainState:
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(
        [train_cfg.seed, 0])))
    student_params = init_vit_params(vit_cfg, rng)
    student_head = init_head_params(ssl_cfg, vit_cfg.embed_dim, rng)
    teacher_params = {k: T.Tensor(v.data.copy(), requires_grad=True)
                      for k, v in student_params.items()}
    teacher_head = {k: T.Tensor(v.data.copy(), requires_grad=True)
                    for k, v in student_head.items()}
    state = TrainState(
        vit_cfg=vit_cfg, ssl_cfg=ssl_cfg, train_cfg=train_cfg,
        student_enc=VitEncoder(vit_cfg, params=student_params),
        student_head=student_head,
        teacher_enc=VitEncoder(vit_cfg, params=teacher_params),
        teacher_head=teacher_head,
        moments_m={}, moments_v={},
        centering=CenteringState.fresh(ssl_cfg.num_prototypes,
                                       ssl_cfg.center_momentum),
    )
    for name, p in state.student_params().items():
        state.moments_m[name] = np.zeros_like(p.data)
        state.moments_v[name] = np.zeros_like(p.data)
    return state


def _iteration_rng(seed: int, iteration: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(
        np.random.SeedSequence([seed, iteration, stream])))


def sample_batch(images: list[np.ndarray], crop: CropSpec, train_cfg: TrainConfig,
                 iteration: int) -> list[np.ndarray]:
    """Draw batch_size images and produce the stacked global views:
    a list of [B, S, S, 3] float32 arrays, one per crop slot."""
    if not images:
        raise InputError("empty training set")
    brng = _iteration_rng(train_cfg.seed, iteration, _STREAM_BATCH)
    n = len(images)
    replace = n < train_cfg.batch_size
    idx = brng.choice(n, size=train_cfg.batch_size, replace=replace)
    arng = _iteration_rng(train_cfg.seed, iteration, _STREAM_AUG)
    per_image = [multicrop(images[int(i)], crop, arng) for i in idx]
    n_views = crop.global_crops
    return [np.stack([views[v] for views in per_image]) for v in range(n_views)]


def _adamw_step(state: TrainState, lr: float) -> None:
    cfg = state.train_cfg
    t = state.iteration + 1
    bc1 = 1.0 - ADAM_BETA1**t
    bc2 = 1.0 - ADAM_BETA2**t
    for name, p in state.student_params().items():
        if p.grad is None:
            continue
        g = p.grad.astype(np.float32)
        m = state.moments_m[name]
        v = state.moments_v[name]
        m[:] = ADAM_BETA1 * m + (1 - ADAM_BETA1) * g
        v[:] = ADAM_BETA2 * v + (1 - ADAM_BETA2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
        if cfg.weight_decay > 0 and p.data.ndim >= 2:
            update = update + cfg.weight_decay * p.data
        p.data = p.data - np.float32(lr) * update


def train_step(state: TrainState, views: list[np.ndarray]) -> float:
    """One optimization step on prepared views. Teacher targets come from
    global views only; the student learns from every view against each
    teacher view but its own index."""
    if views[0].shape[0] < 2:
        raise ParameterError("batch_size must be >= 2 for batch-level terms")
    sched = schedule(state.iteration, state.train_cfg)
    n_global = min(len(views), 2)

    # teacher pass: values only, no tape
    teacher_logits = []
    for v in views[:n_global]:
        cls = state.teacher_enc.forward(v)
        logits, _ = head_forward(state.teacher_head, cls)
        teacher_logits.append(logits.data.copy())
    targets = teacher_targets_multiview(teacher_logits, state.ssl_cfg,
                                        state.centering)

    with T.Tape() as tape:
        student_logits, student_z = [], []
        for v in views:
            cls = state.student_enc.forward(v)
            logits, z = head_forward(state.student_head, cls)
            student_logits.append(logits)
            student_z.append(z)
        loss = total_loss(student_logits[:n_global], targets, state.ssl_cfg,
                          student_z[:n_global])
        loss.check_finite("total loss")
        tape.backward(loss)

    _adamw_step(state, sched["lr"])
    renormalize_prototypes(state.student_head)
    for p in state.student_params().values():
        p.grad = None
    ema_update(state.teacher_params(), state.student_params(), sched["m_t"])

    value = float(loss.item())
    state.loss_history.append(value)
    state.iteration += 1
    return value


# ---------------------------------------------------------------------------
# persistence

_STATE_META = "meta.counters"


def save_train_state(path: str, state: TrainState) -> None:
    blobs: dict[str, np.ndarray] = {}
    for name, p in state.student_params().items():
        blobs[f"student.{name}"] = p.data
    for name, p in state.teacher_params().items():
        blobs[f"teacher.{name}"] = p.data
    for name, m in state.moments_m.items():
        blobs[f"adam.m.{name}"] = m
    for name, v in state.moments_v.items():
        blobs[f"adam.v.{name}"] = v
    blobs["center"] = state.centering.center.astype(np.float32)
    blobs[_STATE_META] = np.array([state.iteration], dtype=np.float32)
    write_checkpoint(path, state.vit_cfg, blobs)


def load_train_state(path: str, ssl_cfg: SslConfig,
                     train_cfg: TrainConfig) -> TrainState:
    vit_cfg, blobs = read_checkpoint(path)
    state = init_train_state(vit_cfg, ssl_cfg, train_cfg)
    for name, p in state.student_params().items():
        p.data = blobs[f"student.{name}"].copy()
    for name, p in state.teacher_params().items():
        p.data = blobs[f"teacher.{name}"].copy()
    for name in state.moments_m:
        state.moments_m[name] = blobs[f"adam.m.{name}"].copy()
        state.moments_v[name] = blobs[f"adam.v.{name}"].copy()
    state.centering.center = blobs["center"].astype(np.float64)
    state.iteration = int(blobs[_STATE_META][0])
    return state


def export_teacher(path: str, state: TrainState) -> None:
    """The evaluation artifact: teacher encoder weights only."""
    write_checkpoint(path, state.vit_cfg,
                     {k: p.data for k, p in state.teacher_enc.params.items()})


def load_encoder(path: str) -> VitEncoder:
    cfg, blobs = read_checkpoint(path)
    params = {k: T.Tensor(v.copy()) for k, v in blobs.items()}
    if set(params) != set(vit_param_names(cfg)):
        raise InputError(f"{path}: not an encoder checkpoint "
                         f"(unexpected parameter names)")
    return VitEncoder(cfg, params=params)


def _format_float(x: float) -> str:
    return repr(float(x))


def train(images: list[np.ndarray], vit_cfg: VitConfig, ssl_cfg: SslConfig,
          train_cfg: TrainConfig, crop: CropSpec, out_dir: str,
          resume: bool = False) -> TrainState:
    """Full run: optimize, then write `checkpoint.rdck` (teacher encoder),
    `state.rdck` (resumable full state), and `loss_log.csv`."""
    os.makedirs(out_dir, exist_ok=True)
    state_path = os.path.join(out_dir, "state.rdck")
    log_path = os.path.join(out_dir, "loss_log.csv")

    if resume:
        if not os.path.exists(state_path):
            raise InputError(f"cannot resume: {state_path} not found")
        state = load_train_state(state_path, ssl_cfg, train_cfg)
        log.info("resuming at iteration %d", state.iteration)
        log_mode = "a"
    else:
        state = init_train_state(vit_cfg, ssl_cfg, train_cfg)
        log_mode = "w"

    if state.iteration > train_cfg.iterations:
        raise ParameterError(
            f"saved state is at iteration {state.iteration}, past the "
            f"requested {train_cfg.iterations}")

    with open(log_path, log_mode) as fh:
        if log_mode == "w":
            fh.write("iter,loss,lr,teacher_momentum\n")
        while state.iteration < train_cfg.iterations:
            it = state.iteration
            sched = schedule(it, train_cfg)
            views = sample_batch(images, crop, train_cfg, it)
            value = train_step(state, views)
            fh.write(f"{it},{_format_float(value)},{_format_float(sched['lr'])},"
                     f"{_format_float(sched['m_t'])}\n")
            if (it + 1) % 50 == 0 or it == 0:
                log.info("iter %d loss %.4f lr %.2e", it, value, sched["lr"])

    save_train_state(state_path, state)
    export_teacher(os.path.join(out_dir, "checkpoint.rdck"), state)
    return state
