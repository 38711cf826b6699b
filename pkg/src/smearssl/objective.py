"""Self-distillation objective: projection head, teacher target production,
view-pair cross-entropy, and the optional nearest-neighbor spread regularizer.

The teacher side is plain numpy (no gradients ever flow through it); the
student side builds on the tape primitives. Three centering modes are
supported for the teacher targets:

* ``ema``      classic moving-average center subtracted before the softmax
* ``sinkhorn`` balanced-assignment normalization of exp(logits / temp)
* ``none``     bare softmax, kept for the collapse ablation
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ParameterError
from .vit import truncated_normal

CENTERING_MODES = ("ema", "sinkhorn", "none")


@dataclass(frozen=True)
class SslConfig:
    head_hidden: int = 2048
    bottleneck: int = 256
    num_prototypes: int = 256
    student_temp: float = 0.1
    teacher_temp: float = 0.04
    centering: str = "sinkhorn"
    center_momentum: float = 0.9
    sinkhorn_iters: int = 3
    koleo_enabled: bool = False
    koleo_weight: float = 0.1
    koleo_eps: float = 1e-8

    def __post_init__(self):
        if self.student_temp <= 0 or self.teacher_temp <= 0:
            raise ParameterError("temperatures must be positive")
        if self.centering not in CENTERING_MODES:
            raise ParameterError(
                f"centering must be one of {CENTERING_MODES}, got {self.centering!r}")
        if self.sinkhorn_iters < 1:
            raise ParameterError("sinkhorn_iters must be >= 1")
        if self.num_prototypes < 2:
            raise ParameterError("need at least 2 prototypes")
        if not 0.0 <= self.center_momentum < 1.0:
            raise ParameterError("center_momentum must lie in [0, 1)")


def init_head_params(cfg: SslConfig, embed_dim: int, rng: np.random.Generator,
                     dtype=np.float32) -> dict[str, T.Tensor]:
    """Three linear layers with GELU between, a normalized bottleneck, and a
    unit-row prototype matrix."""
    w: dict[str, np.ndarray] = {}
    w["fc1.weight"] = truncated_normal(rng, (embed_dim, cfg.head_hidden))
    w["fc1.bias"] = np.zeros(cfg.head_hidden, dtype=np.float32)
    w["fc2.weight"] = truncated_normal(rng, (cfg.head_hidden, cfg.head_hidden))
    w["fc2.bias"] = np.zeros(cfg.head_hidden, dtype=np.float32)
    w["fc3.weight"] = truncated_normal(rng, (cfg.head_hidden, cfg.bottleneck))
    w["fc3.bias"] = np.zeros(cfg.bottleneck, dtype=np.float32)
    protos = truncated_normal(rng, (cfg.num_prototypes, cfg.bottleneck)).astype(np.float64)
    norms = np.linalg.norm(protos, axis=1, keepdims=True)
    w["prototypes"] = (protos / np.maximum(norms, 1e-12)).astype(np.float32)
    return {k: T.Tensor(v.astype(dtype), requires_grad=True) for k, v in w.items()}


def head_forward(params: dict[str, T.Tensor], x: T.Tensor) -> tuple[T.Tensor, T.Tensor]:
    """Embedding [B,D] -> (prototype logits [B,K], bottleneck z [B,bottleneck])."""
    h = T.gelu(T.matmul(x, params["fc1.weight"]) + params["fc1.bias"])
    h = T.gelu(T.matmul(h, params["fc2.weight"]) + params["fc2.bias"])
    z = T.matmul(h, params["fc3.weight"]) + params["fc3.bias"]
    zn = T.l2_normalize(z, axis=-1)
    logits = T.matmul(zn, T.transpose(params["prototypes"], (1, 0)))
    return logits, z


def renormalize_prototypes(params: dict[str, T.Tensor]) -> None:
    """Project prototype rows back onto the unit sphere (run after each
    optimizer step)."""
    p = params["prototypes"].data
    norms = np.linalg.norm(p.astype(np.float64), axis=1, keepdims=True)
    params["prototypes"].data = (p / np.maximum(norms, 1e-12)).astype(p.dtype)


@dataclass
class CenteringState:
    """Moving-average center for the ``ema`` mode."""
    center: np.ndarray
    momentum: float = 0.9

    @classmethod
    def fresh(cls, num_prototypes: int, momentum: float = 0.9) -> "CenteringState":
        return cls(np.zeros(num_prototypes, dtype=np.float64), momentum)

    def update(self, teacher_logits: np.ndarray) -> None:
        batch_mean = teacher_logits.astype(np.float64).mean(axis=0)
        self.center = self.momentum * self.center + (1.0 - self.momentum) * batch_mean


def softmax_np(x: np.ndarray, temp: float = 1.0, axis: int = -1) -> np.ndarray:
    z = x.astype(np.float64) / temp
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def sinkhorn_targets(logits: np.ndarray, temp: float, iters: int) -> np.ndarray:
    """Balanced soft assignments: rows sum to 1, columns pulled toward B/K.

    Alternates prototype-marginal and sample-marginal normalization, ending
    on the sample side so every returned row is a distribution.
    """
    if iters < 1:
        raise ParameterError("sinkhorn iters must be >= 1")
    b, k = logits.shape
    z = logits.astype(np.float64) / temp
    q = np.exp(z - z.max())
    for _ in range(iters):
        col = q.sum(axis=0, keepdims=True)
        q = q / np.maximum(col, 1e-300) * (b / k)
        row = q.sum(axis=1, keepdims=True)
        q = q / np.maximum(row, 1e-300)
    return q


def ema_targets(logits: np.ndarray, center: np.ndarray, temp: float) -> np.ndarray:
    return softmax_np(logits.astype(np.float64) - center[None, :], temp)


def teacher_targets(logits: np.ndarray, cfg: SslConfig,
                    state: CenteringState | None = None) -> np.ndarray:
    """Dispatch on the configured centering mode. For ``ema`` the targets use
    the current center and the center is then updated from this batch."""
    if cfg.centering == "sinkhorn":
        return sinkhorn_targets(logits, cfg.teacher_temp, cfg.sinkhorn_iters)
    if cfg.centering == "ema":
        if state is None:
            raise ParameterError("ema centering requires a CenteringState")
        out = ema_targets(logits, state.center, cfg.teacher_temp)
        state.update(logits)
        return out
    return softmax_np(logits, cfg.teacher_temp)


def teacher_targets_multiview(logits_list: list[np.ndarray], cfg: SslConfig,
                              state: CenteringState | None = None) -> list[np.ndarray]:
    """Per-view targets. Sinkhorn balances each view's batch separately; the
    ema center is read once for all views and then updated once from their
    concatenation, matching the one-update-per-step convention."""
    if cfg.centering == "sinkhorn":
        return [sinkhorn_targets(lg, cfg.teacher_temp, cfg.sinkhorn_iters)
                for lg in logits_list]
    if cfg.centering == "ema":
        if state is None:
            raise ParameterError("ema centering requires a CenteringState")
        out = [ema_targets(lg, state.center, cfg.teacher_temp) for lg in logits_list]
        state.update(np.concatenate(logits_list, axis=0))
        return out
    return [softmax_np(lg, cfg.teacher_temp) for lg in logits_list]


def dino_loss(student_logits: list[T.Tensor], targets: list[np.ndarray],
              student_temp: float) -> T.Tensor:
    """Cross-entropy averaged over ordered (teacher view, student view) pairs
    with distinct indices. Two global views give two such pairs."""
    if len(student_logits) != len(targets):
        raise ParameterError("student view count must match teacher view count")
    if len(student_logits) < 2:
        raise ParameterError("need at least two views")
    inv_temp = 1.0 / student_temp
    pair_losses: list[T.Tensor] = []
    for ti, tgt in enumerate(targets):
        for sj, slog in enumerate(student_logits):
            if ti == sj:
                continue
            logp = T.log_softmax(slog * inv_temp, axis=-1)
            p = T.Tensor(tgt.astype(slog.dtype, copy=False))
            ce = T.neg(T.mean(T.tensor_sum(p * logp, axis=-1)))
            pair_losses.append(ce)
    total = pair_losses[0]
    for extra in pair_losses[1:]:
        total = total + extra
    return total * (1.0 / len(pair_losses))


def koleo_loss(z: T.Tensor, eps: float = 1e-8) -> T.Tensor:
    """Differential-entropy style spread term: mean of -log(nearest-neighbor
    distance) over l2-normalized rows. Minimized by pushing each point away
    from its closest sibling."""
    b = z.shape[0]
    if b < 2:
        raise ParameterError("spread regularizer needs a batch of at least 2")
    zn = T.l2_normalize(z, axis=-1)
    # Neighbor choice is a discrete decision; make it on values, then let the
    # gradient flow through the chosen pair only.
    g = zn.data @ zn.data.T
    sq = np.clip(2.0 - 2.0 * g, 0.0, None)
    np.fill_diagonal(sq, np.inf)
    nn = np.argmin(sq, axis=1).astype(np.int64)
    zj = T.gather_rows(zn, nn)
    diff = zn - zj
    dist = T.sqrt(T.tensor_sum(diff * diff, axis=-1) + 1e-20)
    return T.neg(T.mean(T.log(dist + eps)))


def total_loss(student_logits: list[T.Tensor], targets: list[np.ndarray],
               cfg: SslConfig, student_z: list[T.Tensor] | None = None) -> T.Tensor:
    loss = dino_loss(student_logits, targets, cfg.student_temp)
    if cfg.koleo_enabled:
        if not student_z:
            raise ParameterError("koleo enabled but no student bottlenecks given")
        reg = koleo_loss(student_z[0], cfg.koleo_eps)
        for z in student_z[1:]:
            reg = reg + koleo_loss(z, cfg.koleo_eps)
        loss = loss + (cfg.koleo_weight / len(student_z)) * reg
    return loss


def mean_assignment_entropy(targets: np.ndarray) -> float:
    """Entropy of the batch-averaged assignment distribution. ln(K) means the
    prototypes are used uniformly; near 0 means collapse onto a few."""
    p = targets.astype(np.float64).mean(axis=0)
    p = p / p.sum()
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())
