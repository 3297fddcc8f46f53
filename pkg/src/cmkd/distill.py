"""Knowledge-distillation losses and teacher handling.

The student objective is

    total = lam * Loss_g(psi(Z_s), y) + (1 - lam) * Loss_d(psi(Z_s), psi(Z_t / tau))

with ``psi`` = softmax (single-label) or sigmoid (multi-label), cross-entropy
or BCE for ``Loss_g`` and KL(teacher || student) for ``Loss_d``. The
temperature only divides the teacher logits and the distillation term is not
rescaled by ``tau**2``.

All losses are batch means. They accept any floating dtype; the property
tests run them in float64.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .features import MULTI_LABEL, SINGLE_LABEL, TASKS

TEACHER_MODES = ("single", "multi_loss", "ensemble")


@dataclass
class KDSpec:
    lam: float = 0.5
    temperature: float = 1.0
    teachers: list = field(default_factory=list)
    teacher_mode: str = "single"
    consistent: bool = True
    separate_head: bool = False
    task: str = MULTI_LABEL

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.temperature <= 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if self.teacher_mode not in TEACHER_MODES:
            raise ValueError(f"teacher_mode must be one of {TEACHER_MODES}")
        if self.teacher_mode == "single" and len(self.teachers) > 1:
            raise ValueError("teacher_mode 'single' accepts at most one teacher")
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}")

    @property
    def n_teachers(self) -> int:
        return len(self.teachers)

    def teacher_weights(self) -> list[float]:
        """Coefficient applied to each reported distillation term."""
        n = self.n_teachers
        if self.teacher_mode == "multi_loss":
            return [(1.0 - self.lam) / n] * n
        return [1.0 - self.lam] if n else []


@dataclass
class LossBreakdown:
    total: torch.Tensor
    ground_truth: torch.Tensor
    distill: torch.Tensor
    per_teacher: list[torch.Tensor]
    weights: list[float]

    def as_row(self) -> list[float]:
        vals = [self.total, self.ground_truth, *self.per_teacher]
        return [float(v.detach()) if torch.is_tensor(v) else float(v) for v in vals]


def _check_finite(z, name):
    if not torch.isfinite(z).all():
        raise ValueError(f"non-finite values in {name}")


def activation(z: torch.Tensor, task: str) -> torch.Tensor:
    if task == SINGLE_LABEL:
        return torch.softmax(z, dim=-1)
    if task == MULTI_LABEL:
        return torch.sigmoid(z)
    raise ValueError(f"unknown task {task!r}")


def ground_truth_loss(z_s: torch.Tensor, y: torch.Tensor, task: str) -> torch.Tensor:
    """Cross-entropy against (possibly soft) single-label targets, or mean BCE."""
    _check_finite(z_s, "student logits")
    y = torch.as_tensor(y, dtype=z_s.dtype)
    if z_s.shape != y.shape:
        raise ValueError(f"logits {tuple(z_s.shape)} and targets {tuple(y.shape)} differ")
    if task == SINGLE_LABEL:
        return -(y * F.log_softmax(z_s, dim=-1)).sum(-1).mean()
    if task == MULTI_LABEL:
        return F.binary_cross_entropy_with_logits(z_s, y)
    raise ValueError(f"unknown task {task!r}")


def kl_to_student(p_t: torch.Tensor, z_s: torch.Tensor, task: str, log_p_t=None) -> torch.Tensor:
    """KL(p_t || psi(z_s)) for a target distribution given in probability space.

    ``log_p_t`` (log p_t, plus log(1 - p_t) for multi-label as a pair) may be
    passed when the target comes from logits; computing it with the same
    log-activation as the student makes KL(psi(z) || psi(z)) exactly zero.
    """
    if task == SINGLE_LABEL:
        log_q = F.log_softmax(z_s, dim=-1)
        if log_p_t is None:
            return (torch.xlogy(p_t, p_t) - p_t * log_q).sum(-1).mean()
        return (p_t * (log_p_t - log_q)).sum(-1).mean()
    if task == MULTI_LABEL:
        log_q, log_1mq = F.logsigmoid(z_s), F.logsigmoid(-z_s)
        if log_p_t is None:
            kl = (torch.xlogy(p_t, p_t) - p_t * log_q
                  + torch.xlogy(1 - p_t, 1 - p_t) - (1 - p_t) * log_1mq)
        else:
            log_p, log_1mp = log_p_t
            kl = p_t * (log_p - log_q) + (1 - p_t) * (log_1mp - log_1mq)
        return kl.mean()
    raise ValueError(f"unknown task {task!r}")


def teacher_log_probs(z_t: torch.Tensor, tau: float, task: str):
    z = z_t / tau
    if task == SINGLE_LABEL:
        return F.log_softmax(z, dim=-1)
    if task == MULTI_LABEL:
        return F.logsigmoid(z), F.logsigmoid(-z)
    raise ValueError(f"unknown task {task!r}")


def teacher_probs(z_t: torch.Tensor, tau: float, task: str) -> torch.Tensor:
    if tau <= 0:
        raise ValueError(f"temperature must be > 0, got {tau}")
    return activation(z_t / tau, task)


def distillation_loss(z_s: torch.Tensor, z_t: torch.Tensor, tau: float, task: str) -> torch.Tensor:
    """KL(psi(z_t / tau) || psi(z_s)); categorical or mean per-class Bernoulli."""
    if tau <= 0:
        raise ValueError(f"temperature must be > 0, got {tau}")
    _check_finite(z_s, "student logits")
    _check_finite(z_t, "teacher logits")
    z_t = torch.as_tensor(z_t, dtype=z_s.dtype)
    if z_s.shape != z_t.shape:
        raise ValueError(f"student {tuple(z_s.shape)} and teacher {tuple(z_t.shape)} logits differ")
    z_t = z_t.detach()
    return kl_to_student(teacher_probs(z_t, tau, task), z_s, task, teacher_log_probs(z_t, tau, task))


def kd_total_loss(z_s: torch.Tensor, y, kd: KDSpec, teacher_logits=(),
                  z_dis: torch.Tensor | None = None) -> LossBreakdown:
    """Combine ground-truth and distillation terms according to ``kd``.

    ``z_dis`` are the distillation-head logits of a separate-head student;
    when given, the distillation terms use them instead of ``z_s``.
    """
    teacher_logits = list(teacher_logits)
    g = ground_truth_loss(z_s, y, kd.task)
    if kd.lam == 1.0:
        return LossBreakdown(g, g, g.new_zeros(()), [], [])
    if not teacher_logits:
        raise ValueError("lambda < 1 requires at least one teacher")
    if len(teacher_logits) != kd.n_teachers:
        raise ValueError(f"got {len(teacher_logits)} teacher outputs for {kd.n_teachers} teachers")

    z_d = z_dis if (kd.separate_head and z_dis is not None) else z_s
    tau, task = kd.temperature, kd.task
    if kd.teacher_mode == "ensemble":
        _check_finite(z_d, "student logits")
        probs = [teacher_probs(torch.as_tensor(z, dtype=z_d.dtype).detach(), tau, task)
                 for z in teacher_logits]
        for z in teacher_logits:
            _check_finite(torch.as_tensor(z), "teacher logits")
        per_teacher = [kl_to_student(torch.stack(probs).mean(0), z_d, task)]
    else:
        per_teacher = [distillation_loss(z_d, z, tau, task) for z in teacher_logits]

    weights = kd.teacher_weights()
    distill = sum(w * d for w, d in zip(weights, per_teacher))
    total = kd.lam * g + distill
    return LossBreakdown(total, g, distill, per_teacher, weights)


def kd_loss_grad(z_s: np.ndarray, y: np.ndarray, kd: KDSpec, teacher_logits=()) -> np.ndarray:
    """Closed-form gradient of the (shared-head) KD total loss w.r.t. student logits.

    Single-label: lam * (q - y) + sum_i w_i * (q - p_i), with q = softmax(z_s)
    (targets sum to one). Multi-label: the same expression with q = sigmoid(z_s),
    divided by the class count because both terms are class means. Divided by
    the batch size in both cases.
    """
    z_s = np.asarray(z_s, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    batch = z_s.shape[0] if z_s.ndim > 1 else 1

    def act(z):
        if kd.task == SINGLE_LABEL:
            e = np.exp(z - z.max(-1, keepdims=True))
            return e / e.sum(-1, keepdims=True)
        return 1.0 / (1.0 + np.exp(-z))

    q = act(z_s)
    grad = kd.lam * (q - y)
    if kd.lam < 1.0 and len(teacher_logits):
        probs = [act(np.asarray(z, dtype=np.float64) / kd.temperature) for z in teacher_logits]
        if kd.teacher_mode == "ensemble":
            probs = [np.mean(probs, axis=0)]
        for w, p in zip(kd.teacher_weights(), probs):
            grad = grad + w * (q - p)
    if kd.task == MULTI_LABEL:
        grad = grad / z_s.shape[-1]
    return grad / batch


# ------------------------------------------------------------- teachers

def freeze(model):
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def parameter_checksum(model) -> str:
    h = hashlib.sha256()
    for name, t in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def inference_logits(out, policy: str = "average", task: str = MULTI_LABEL) -> torch.Tensor:
    """Logits used at inference; separate-head models average both heads' activations."""
    if out.dis_logits is None or policy == "primary":
        return out.logits
    if policy == "distill":
        return out.dis_logits
    if policy != "average":
        raise ValueError(f"unknown separate-head inference policy {policy!r}")
    p = 0.5 * (activation(out.logits, task) + activation(out.dis_logits, task))
    if task == SINGLE_LABEL:
        return torch.log(p.clamp_min(torch.finfo(p.dtype).tiny))
    return torch.logit(p, eps=1e-7)


def teacher_predict(teacher, clean_spec, augmented_spec, consistent: bool = True,
                    task: str = MULTI_LABEL) -> torch.Tensor:
    """Frozen-teacher logits on the augmented input (consistent) or the clean one."""
    x = augmented_spec if consistent else clean_spec
    x = torch.as_tensor(x, dtype=torch.float32)
    was_training = teacher.training
    teacher.eval()
    with torch.no_grad():
        out = teacher(x)
    teacher.train(was_training)
    return inference_logits(out, "average", task)


def run_distillation(student_spec, kd: KDSpec, data, train_cfg, run_dir=None, teachers=None):
    """Build a student from ``student_spec`` and train it against ``kd.teachers``.

    ``teachers`` defaults to ``kd.teachers`` (already-built models). Students
    produced here can be fed back as teachers of a later call.
    """
    from .models import build_model
    from .train import train

    teachers = list(kd.teachers if teachers is None else teachers)
    for t in teachers:
        if t.spec.num_classes != student_spec.num_classes:
            raise ValueError(f"teacher has {t.spec.num_classes} classes, "
                             f"student has {student_spec.num_classes}")
    student = build_model(student_spec, seed=train_cfg.seed)
    return train(student, data, train_cfg, kd=kd, teachers=teachers, run_dir=run_dir)
