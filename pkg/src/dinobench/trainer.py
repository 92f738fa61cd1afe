"""Self-distillation training: student/teacher over multi-crop views.

The teacher sees only the global views, its logits are centred and sharpened
with a low temperature; the student sees every view. The loss is the mean
cross entropy over all (teacher global view, different student view) pairs.
Only the student receives gradients. The teacher follows the student as an
exponential moving average, and the centre is an EMA of teacher logits.
"""

from __future__ import annotations

import json
import logging
import math
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .augment import AugmentPolicy, ViewSet, multi_crop
from .backbone import (
    BackboneConfig,
    as_leaves,
    check_structure,
    forward_backbone,
    init_params,
    projection_head,
)
from .data_io import Checkpoint, extract_group, load_checkpoint, save_checkpoint
from .errors import ConfigError, DataError, NumericError
from .optim import OptimizerState, clip_grad_norm, optimizer_step
from .tensor import Tensor

log = logging.getLogger(__name__)

LOG_EPS = 1e-12


@dataclass(frozen=True)
class TrainerConfig:
    """Distillation hyper-parameters. Defaults are engineering choices."""

    teacher_temp: float = 0.04
    student_temp: float = 0.1
    ema_start: float = 0.996
    ema_end: float = 1.0
    center_momentum: float = 0.9
    batch_size: int = 32
    steps: int = 1000
    optimizer: str = "sgd"
    lr: float = 0.03
    momentum: float = 0.9
    weight_decay: float = 1e-4
    clip_grad: float | None = 3.0
    checkpoint_every: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if not 0 < self.teacher_temp < self.student_temp:
            raise ConfigError(
                f"need 0 < teacher_temp < student_temp, got {self.teacher_temp}, {self.student_temp}"
            )
        if not 0.0 <= self.ema_start <= self.ema_end <= 1.0:
            raise ConfigError(f"EMA schedule must satisfy 0 <= start <= end <= 1, got {self.ema_start}, {self.ema_end}")
        if not 0.0 <= self.center_momentum <= 1.0:
            raise ConfigError(f"center_momentum must be in [0, 1], got {self.center_momentum}")
        if self.batch_size < 1 or self.steps < 0:
            raise ConfigError("batch_size must be >= 1 and steps >= 0")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype}")


def ema_momentum(step: int, cfg: TrainerConfig) -> float:
    """Cosine ramp from ``ema_start`` (step 0) to ``ema_end`` (last step)."""
    if cfg.steps <= 1:
        return cfg.ema_start
    frac = min(step, cfg.steps - 1) / (cfg.steps - 1)
    return cfg.ema_end - (cfg.ema_end - cfg.ema_start) * (math.cos(math.pi * frac) + 1.0) / 2.0


def stream(seed: int, name: str, *keys: int) -> np.random.Generator:
    """Independent generator for a named purpose derived from the root seed."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode()), *map(int, keys)])


@dataclass
class ViewOutputs:
    """Student probabilities for every view and teacher probabilities for the global views.

    ``student`` lists ``(batch, K)`` tensors with global views first, in the same
    order as ``teacher``.
    """

    student: list[Tensor]
    teacher: list[np.ndarray]


@dataclass
class TrainerState:
    student: dict[str, np.ndarray]
    teacher: dict[str, np.ndarray]
    center: np.ndarray
    opt: OptimizerState
    step: int = 0
    loss_history: list[float] = field(default_factory=list)


def view_pairs(n_global: int, n_views: int) -> list[tuple[int, int]]:
    """Every (teacher view, student view) pair with distinct indices."""
    return [(g, v) for g in range(n_global) for v in range(n_views) if v != g]


def cross_entropy(p_teacher: np.ndarray, p_student: Tensor) -> Tensor:
    """Batch mean of ``-sum_k p_t[k] log p_s[k]``; the teacher side is a constant."""
    logp = T.log(p_student, eps=LOG_EPS)
    batch = p_student.shape[0] if p_student.ndim > 1 else 1
    return -(Tensor(p_teacher.astype(logp.dtype, copy=False)) * logp).sum() / float(batch)


def dino_loss(outs: ViewOutputs) -> Tensor:
    pairs = view_pairs(len(outs.teacher), len(outs.student))
    if not pairs:
        raise ConfigError("need at least two views to form a teacher/student pair")
    total = None
    for g, v in pairs:
        ce = cross_entropy(outs.teacher[g], outs.student[v])
        total = ce if total is None else total + ce
    return total / float(len(pairs))


def ema_update(teacher: dict, student: dict, lam: float) -> dict:
    """In place: ``teacher[p] <- lam * teacher[p] + (1 - lam) * student[p]``."""
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"EMA momentum must be in [0, 1], got {lam}")
    check_structure(student, teacher)
    for name, t in teacher.items():
        t[...] = lam * t + (1.0 - lam) * student[name]
    return teacher


def center_update(center: np.ndarray, teacher_logits: np.ndarray, momentum: float) -> np.ndarray:
    """``c <- m c + (1 - m) mean_batch(logits)``."""
    logits = np.asarray(teacher_logits)
    if logits.ndim != 2 or logits.shape[1] != center.shape[0]:
        raise ConfigError(f"teacher logits {logits.shape} incompatible with centre {center.shape}")
    return momentum * center + (1.0 - momentum) * logits.mean(axis=0)


def teacher_probs(logits: np.ndarray, center: np.ndarray, temp: float) -> np.ndarray:
    with T.no_grad():
        return T.softmax_t(Tensor(logits - center), temp).data


def entropy(probs: np.ndarray) -> float:
    p = np.asarray(probs, dtype=np.float64)
    return float(np.mean(-(p * np.log(p + LOG_EPS)).sum(axis=-1)))


# -- state -----------------------------------------------------------------------

def init_state(bcfg: BackboneConfig, tcfg: TrainerConfig, seed: int) -> TrainerState:
    dtype = np.dtype(tcfg.dtype)
    student = init_params(bcfg, stream(seed, "init"), dtype=dtype)
    teacher = {k: v.copy() for k, v in student.items()}
    opt = OptimizerState(mode=tcfg.optimizer, lr=tcfg.lr, momentum=tcfg.momentum,
                         weight_decay=tcfg.weight_decay)
    return TrainerState(student, teacher, np.zeros(bcfg.out_dim, dtype=dtype), opt)


def _stack(views: Sequence[np.ndarray], dtype) -> np.ndarray:
    return np.stack(views).astype(dtype, copy=False)


def _network_logits(images: np.ndarray, P, bcfg: BackboneConfig) -> Tensor:
    return projection_head(forward_backbone(images, P, bcfg), P, bcfg)


def train_step(batch: Sequence[ViewSet], state: TrainerState, cfg: TrainerConfig,
               bcfg: BackboneConfig) -> dict:
    """One optimisation step; mutates ``state`` and returns step metrics."""
    if not batch:
        raise DataError("empty batch")
    dtype = np.dtype(cfg.dtype)
    n_global = len(batch[0].global_views)
    n_local = len(batch[0].local_views)
    b = len(batch)
    lam = ema_momentum(state.step, cfg)

    # view-major stacking: rows [v * b, (v + 1) * b) hold view v of every image
    globals_ = _stack([vs.global_views[i] for i in range(n_global) for vs in batch], dtype)
    locals_ = _stack([vs.local_views[i] for i in range(n_local) for vs in batch], dtype) if n_local else None

    with T.no_grad():
        t_logits = _network_logits(globals_, as_leaves(state.teacher), bcfg).data
    p_t_all = teacher_probs(t_logits, state.center, cfg.teacher_temp)
    p_t = [p_t_all[i * b:(i + 1) * b] for i in range(n_global)]

    S = as_leaves(state.student, requires_grad=True)
    s_logits = [_network_logits(globals_, S, bcfg)]
    if locals_ is not None:
        s_logits.append(_network_logits(locals_, S, bcfg))
    p_s = []
    for block in s_logits:
        probs = T.softmax_t(block, cfg.student_temp)
        p_s.extend(probs[i * b:(i + 1) * b] for i in range(block.shape[0] // b))

    loss = dino_loss(ViewOutputs(p_s, p_t))
    if not np.isfinite(loss.item()):
        raise NumericError(f"non-finite loss at step {state.step}")
    loss.backward()
    grads = {k: (S[k].grad if S[k].grad is not None else np.zeros_like(v)) for k, v in state.student.items()}
    grad_norm = clip_grad_norm(grads, cfg.clip_grad)
    optimizer_step(state.opt, state.student, grads)
    ema_update(state.teacher, state.student, lam)
    state.center = center_update(state.center, t_logits, cfg.center_momentum).astype(dtype)

    state.step += 1
    value = loss.item()
    state.loss_history.append(value)
    return {"step": state.step, "loss": value, "grad_norm": grad_norm, "lambda": lam,
            "entropy": entropy(p_t_all)}


# -- checkpoints -------------------------------------------------------------------

def state_to_checkpoint(state: TrainerState, config: dict, seed: int) -> Checkpoint:
    tensors: dict[str, np.ndarray] = {}
    for k, v in state.student.items():
        tensors[f"student/{k}"] = v
    for k, v in state.teacher.items():
        tensors[f"teacher/{k}"] = v
    tensors["center"] = state.center
    for kind, bufs in sorted(state.opt.buffers.items()):
        for k, v in bufs.items():
            tensors[f"opt/{kind}/{k}"] = v
    meta = {"opt_step": state.opt.step, "opt_mode": state.opt.mode}
    return Checkpoint(config=config, seed=seed, step=state.step, tensors=tensors, meta=meta)


def state_from_checkpoint(ckpt: Checkpoint, bcfg: BackboneConfig, tcfg: TrainerConfig) -> TrainerState:
    reference = init_params(bcfg, np.random.default_rng(0))
    student = extract_group(ckpt.tensors, "student/")
    teacher = extract_group(ckpt.tensors, "teacher/")
    check_structure(student, reference)
    check_structure(teacher, reference)
    dtype = np.dtype(tcfg.dtype)
    opt = OptimizerState(mode=tcfg.optimizer, lr=tcfg.lr, momentum=tcfg.momentum,
                         weight_decay=tcfg.weight_decay, step=int(ckpt.meta.get("opt_step", 0)))
    for name, arr in ckpt.tensors.items():
        if name.startswith("opt/"):
            _, kind, pname = name.split("/", 2)
            opt.buffers.setdefault(kind, {})[pname] = arr.astype(dtype)
    cast = lambda d: {k: np.array(v, dtype=dtype) for k, v in d.items()}
    center = np.array(ckpt.tensors["center"], dtype=dtype)
    if center.shape != (bcfg.out_dim,):
        raise ConfigError(f"centre has shape {center.shape}, expected ({bcfg.out_dim},)")
    return TrainerState(cast(student), cast(teacher), center, opt, step=ckpt.step)


def teacher_params(ckpt: Checkpoint) -> dict[str, np.ndarray]:
    params = extract_group(ckpt.tensors, "teacher/")
    if not params:
        raise ConfigError("checkpoint carries no teacher parameters")
    return params


# -- loop ----------------------------------------------------------------------------

def batch_indices(step: int, n: int, batch_size: int, seed: int) -> np.ndarray:
    """Indices for ``step`` in an endless stream of per-epoch shuffles."""
    start = step * batch_size
    out = []
    while len(out) < batch_size:
        epoch, offset = divmod(start + len(out), n)
        perm = stream(seed, "shuffle", epoch).permutation(n)
        take = min(batch_size - len(out), n - offset)
        out.extend(perm[offset:offset + take].tolist())
    return np.asarray(out)


def make_batch(images: np.ndarray, step: int, cfg: TrainerConfig, policy: AugmentPolicy, seed: int) -> list[ViewSet]:
    idx = batch_indices(step, len(images), cfg.batch_size, seed)
    rng = stream(seed, "augment", step)
    return [multi_crop(images[i], policy, rng) for i in idx]


def pretrain(
    images: np.ndarray,
    bcfg: BackboneConfig,
    tcfg: TrainerConfig,
    policy: AugmentPolicy,
    seed: int,
    out_dir=None,
    resume: Checkpoint | None = None,
    config_echo: dict | None = None,
    progress: Callable[[dict], None] | None = None,
) -> tuple[TrainerState, Checkpoint]:
    """Run ``tcfg.steps`` distillation steps over ``images`` (resuming if given).

    Writes ``checkpoint.ckpt`` (and periodic ``ckpt_XXXXXX.ckpt``) plus a
    ``metrics.jsonl`` log into ``out_dir`` when provided.
    """
    if len(images) == 0:
        raise DataError("pretraining dataset is empty")
    echo = config_echo if config_echo is not None else {
        "backbone": bcfg.to_dict(), "trainer": asdict(tcfg), "augment": asdict(policy)}
    state = state_from_checkpoint(resume, bcfg, tcfg) if resume is not None else init_state(bcfg, tcfg, seed)
    out = Path(out_dir) if out_dir is not None else None
    metrics_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_fh = (out / "metrics.jsonl").open("a" if resume is not None else "w")
    try:
        while state.step < tcfg.steps:
            batch = make_batch(images, state.step, tcfg, policy, seed)
            try:
                metrics = train_step(batch, state, tcfg, bcfg)
            except NumericError:
                if out is not None:
                    diag = out / f"diagnostic_step{state.step:06d}.ckpt"
                    save_checkpoint(diag, state_to_checkpoint(state, echo, seed))
                    log.error("numeric failure; diagnostic checkpoint written to %s", diag)
                raise
            if metrics_fh is not None:
                metrics_fh.write(json.dumps(metrics, sort_keys=True) + "\n")
            if progress is not None:
                progress(metrics)
            if out is not None and tcfg.checkpoint_every and state.step % tcfg.checkpoint_every == 0:
                save_checkpoint(out / f"ckpt_{state.step:06d}.ckpt", state_to_checkpoint(state, echo, seed))
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
    ckpt = state_to_checkpoint(state, echo, seed)
    if out is not None:
        save_checkpoint(out / "checkpoint.ckpt", ckpt)
    return state, ckpt
