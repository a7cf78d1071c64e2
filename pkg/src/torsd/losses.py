"""Loss terms and their weighted composition.

Every distillation term treats the deepest depth as a fixed teacher: its
values enter as constants (``detach``). Callers that need to evaluate the
same objective at perturbed parameters (finite differences) may pass the
teacher values explicitly through :class:`Teachers`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Mapping, Sequence

import torch
import torch.nn.functional as F

from .backbone import TappedFeatures, forward_tapped
from .config import TorsdConfig
from .errors import ConfigValidationError, InvalidTripletError, ShapeError, StateError
from .relation import RelationBundle, TorsdModel, aux_logits, forward_relations, logit_relation

COMPONENTS = ("task", "triplet", "rd", "pat", "pld", "nat", "nld", "logit_cal", "handcrafted_rd")

# which toggle gates which component
GATES = {
    "triplet": "enable_rn",
    "rd": "enable_rn",
    "pat": "enable_ac",
    "pld": "enable_ac",
    "nat": "enable_ac",
    "nld": "enable_ac",
    "logit_cal": "enable_ld",
    "handcrafted_rd": "enable_handcrafted_rd",
}


@dataclass
class LossBreakdown:
    task: torch.Tensor
    triplet: torch.Tensor
    rd: torch.Tensor
    pat: torch.Tensor
    pld: torch.Tensor
    nat: torch.Tensor
    nld: torch.Tensor
    logit_cal: torch.Tensor
    handcrafted_rd: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {f.name: float(getattr(self, f.name).detach()) for f in fields(self)}

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in self.as_floats().values())

    def __str__(self):
        return ", ".join(f"{k}={v:.6g}" for k, v in self.as_floats().items())


@dataclass
class Teachers:
    """Deepest-depth values used as constant targets."""

    r_p: torch.Tensor | None = None
    r_n: torch.Tensor | None = None
    pos_logits: torch.Tensor | None = None
    neg_logits: torch.Tensor | None = None
    hand_p: torch.Tensor | None = None
    hand_n: torch.Tensor | None = None


def _require_depths(k: int, name: str) -> None:
    if k < 2:
        raise ConfigValidationError("depth", f"{name} needs at least two depths, got {k}")


# ---------------------------------------------------------------------------
# elementary pieces
# ---------------------------------------------------------------------------


def make_soft_label(y_o, y_n, num_classes: int) -> torch.Tensor:
    """Half-half mixture of the anchor's and the negative's one-hot labels."""
    y_o = torch.as_tensor(y_o)
    y_n = torch.as_tensor(y_n)
    if torch.any(y_o == y_n):
        raise InvalidTripletError("negative label must differ from the anchor label")
    if torch.any(y_o >= num_classes) or torch.any(y_n >= num_classes) or torch.any(y_o < 0) or torch.any(y_n < 0):
        raise InvalidTripletError(f"labels must lie in [0, {num_classes})")
    return 0.5 * F.one_hot(y_o, num_classes).double() + 0.5 * F.one_hot(y_n, num_classes).double()


def cross_entropy_soft(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """-sum_c t_c log softmax(logits)_c, averaged over leading batch dims."""
    if logits.shape[-1] != target.shape[-1]:
        raise ShapeError("logit/target width", expected=target.shape[-1], actual=logits.shape[-1])
    target = target.to(logits.dtype)
    per_sample = -(target * F.log_softmax(logits, dim=-1)).sum(dim=-1)
    return per_sample.mean()


def kl_divergence(student_logits: torch.Tensor, teacher_logits: torch.Tensor, temperature: float = 1.0) -> torch.Tensor:
    """KL(p_teacher || q_student) at temperature T; the teacher is detached."""
    if student_logits.shape[-1] != teacher_logits.shape[-1]:
        raise ShapeError("student/teacher width", expected=teacher_logits.shape[-1], actual=student_logits.shape[-1])
    log_p = F.log_softmax(teacher_logits.detach() / temperature, dim=-1)
    log_q = F.log_softmax(student_logits / temperature, dim=-1)
    per_sample = (log_p.exp() * (log_p - log_q)).sum(dim=-1)
    return per_sample.mean()


def task_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean hard-label cross entropy over every image of the batch."""
    if logits.dim() != 2 or logits.shape[0] != labels.shape[0]:
        raise ShapeError("logits vs labels", expected=(labels.shape[0], "C"), actual=tuple(logits.shape))
    return F.cross_entropy(logits, labels)


# ---------------------------------------------------------------------------
# relation terms
# ---------------------------------------------------------------------------


def triplet_loss(bundle: RelationBundle, alpha: float, margin: float) -> torch.Tensor:
    if not bundle.r_p:
        raise StateError("relation bundle is empty; was enable_rn set without relation networks?")
    total = 0.0
    for r_p, r_n in zip(bundle.r_p, bundle.r_n):
        total = total + torch.clamp(r_p - r_n + margin, min=0).mean()
    return alpha * total


def _distill_sq(values_p, values_n, teacher_p, teacher_n):
    total = 0.0
    for r_p, r_n in zip(values_p[:-1], values_n[:-1]):
        total = total + ((r_p - teacher_p) ** 2 + (r_n - teacher_n) ** 2).mean()
    return total


def relation_distill_loss(bundle: RelationBundle, beta: float, teachers: Teachers | None = None) -> torch.Tensor:
    """Squared gap between each shallow relation and the (constant) deepest one."""
    _require_depths(bundle.depth, "relation distillation")
    t_p = bundle.r_p[-1].detach() if teachers is None or teachers.r_p is None else teachers.r_p
    t_n = bundle.r_n[-1].detach() if teachers is None or teachers.r_n is None else teachers.r_n
    return beta * _distill_sq(bundle.r_p, bundle.r_n, t_p, t_n)


# ---------------------------------------------------------------------------
# auxiliary classifier terms
# ---------------------------------------------------------------------------


def _aux_outputs(z: Sequence[torch.Tensor], heads: Sequence) -> list[torch.Tensor]:
    if not z:
        raise ConfigValidationError("enable_ac", "auxiliary losses need projected features (enable_rn=true)")
    if len(z) != len(heads):
        raise ConfigValidationError("depth", f"{len(z)} embeddings but {len(heads)} heads")
    return [aux_logits(h, zi) for h, zi in zip(heads, z)]


def _aux_task(outputs, target) -> torch.Tensor:
    total = 0.0
    for out in outputs:
        total = total + cross_entropy_soft(out, target)
    return total


def _aux_distill(outputs, teacher, temperature) -> torch.Tensor:
    total = 0.0
    for out in outputs[:-1]:
        total = total + kl_divergence(out, teacher, temperature)
    return total


def pat_loss(z_p, pos_heads, y_p, gamma_p: float, lambda_mix: float) -> torch.Tensor:
    outputs = _aux_outputs(z_p, pos_heads)
    target = F.one_hot(torch.as_tensor(y_p), outputs[0].shape[-1])
    return gamma_p * (1.0 - lambda_mix) * _aux_task(outputs, target)


def pld_loss(z_p, pos_heads, gamma_p: float, lambda_mix: float, temperature: float = 1.0,
             teacher: torch.Tensor | None = None) -> torch.Tensor:
    outputs = _aux_outputs(z_p, pos_heads)
    _require_depths(len(outputs), "positive logit distillation")
    teacher = outputs[-1].detach() if teacher is None else teacher
    return gamma_p * lambda_mix * _aux_distill(outputs, teacher, temperature)


def nat_loss(z_n, neg_heads, y_o, y_n, gamma_n: float, lambda_mix: float) -> torch.Tensor:
    outputs = _aux_outputs(z_n, neg_heads)
    target = make_soft_label(y_o, y_n, outputs[0].shape[-1])
    return gamma_n * (1.0 - lambda_mix) * _aux_task(outputs, target)


def nld_loss(z_n, neg_heads, gamma_n: float, lambda_mix: float, temperature: float = 1.0,
             teacher: torch.Tensor | None = None) -> torch.Tensor:
    outputs = _aux_outputs(z_n, neg_heads)
    _require_depths(len(outputs), "negative logit distillation")
    teacher = outputs[-1].detach() if teacher is None else teacher
    return gamma_n * lambda_mix * _aux_distill(outputs, teacher, temperature)


# ---------------------------------------------------------------------------
# logit calibration and the handcrafted ablation
# ---------------------------------------------------------------------------


def logit_calibration_loss(logits_o, logits_p, logits_n, lrib, sigma: float, bounded: bool = False) -> torch.Tensor:
    """sigma * mean(rel(o, p) - rel(o, n)).

    The raw form is unbounded below. With ``bounded`` each relation passes
    through tanh first, which keeps the sign structure but caps the term at
    2 * sigma in magnitude.
    """
    r_p = logit_relation(lrib, logits_o, logits_p)
    r_n = logit_relation(lrib, logits_o, logits_n)
    return _calibrate(r_p, r_n, sigma, bounded)


def _calibrate(r_p, r_n, sigma, bounded):
    if bounded:
        r_p, r_n = torch.tanh(r_p), torch.tanh(r_n)
    return sigma * (r_p - r_n).mean()


def pooled_distance(f_a: torch.Tensor, f_b: torch.Tensor) -> torch.Tensor:
    """Euclidean distance between globally average-pooled maps, per pair."""
    return torch.linalg.vector_norm(f_a.mean(dim=(-2, -1)) - f_b.mean(dim=(-2, -1)), dim=-1)


def handcrafted_relations(features: TappedFeatures) -> tuple[list[torch.Tensor], list[torch.Tensor]]:
    r_p = [pooled_distance(o, p) for o, p in zip(features.f_o, features.f_p)]
    r_n = [pooled_distance(o, n) for o, n in zip(features.f_o, features.f_n)]
    return r_p, r_n


def handcrafted_rd_loss(features: TappedFeatures, beta: float, teachers: Teachers | None = None) -> torch.Tensor:
    _require_depths(features.depth, "handcrafted relation distillation")
    r_p, r_n = handcrafted_relations(features)
    t_p = r_p[-1].detach() if teachers is None or teachers.hand_p is None else teachers.hand_p
    t_n = r_n[-1].detach() if teachers is None or teachers.hand_n is None else teachers.hand_n
    return beta * _distill_sq(r_p, r_n, t_p, t_n)


# ---------------------------------------------------------------------------
# composition
# ---------------------------------------------------------------------------


def total_loss(components: Mapping[str, torch.Tensor | float], cfg: TorsdConfig) -> LossBreakdown:
    """Sum the task loss and every enabled term; disabled terms are exactly 0."""
    task = components["task"]
    task = task if torch.is_tensor(task) else torch.tensor(float(task), dtype=torch.float64)
    zero = torch.zeros((), dtype=task.dtype)
    values = {"task": task}
    total = task
    for name in COMPONENTS[1:]:
        if getattr(cfg, GATES[name]) and name in components:
            value = torch.as_tensor(components[name], dtype=task.dtype)
            values[name] = value
            total = total + value
        else:
            values[name] = zero
    return LossBreakdown(total=total, **values)


def compute_losses(
    model: TorsdModel,
    batch,
    cfg: TorsdConfig,
    teachers: Teachers | None = None,
) -> tuple[LossBreakdown, Teachers]:
    """Forward one triplet batch through the whole bundle and score it.

    Returns the breakdown and the teacher values actually used, so a caller
    can replay the identical objective with ``teachers`` pinned.
    """
    features = forward_tapped(model.backbone, batch)
    relations = forward_relations(features, model)
    used = Teachers()
    comps: dict[str, torch.Tensor] = {"task": task_loss(features.logits, batch.labels)}
    given = teachers or Teachers()

    if cfg.enable_rn:
        comps["triplet"] = triplet_loss(relations, cfg.alpha, cfg.margin)
        used.r_p = relations.r_p[-1].detach() if given.r_p is None else given.r_p
        used.r_n = relations.r_n[-1].detach() if given.r_n is None else given.r_n
        comps["rd"] = relation_distill_loss(relations, cfg.beta, used)

    if cfg.enable_ac:
        pos = _aux_outputs(relations.z_p, model.pos_heads)
        neg = _aux_outputs(relations.z_n, model.neg_heads)
        used.pos_logits = pos[-1].detach() if given.pos_logits is None else given.pos_logits
        used.neg_logits = neg[-1].detach() if given.neg_logits is None else given.neg_logits
        _require_depths(len(pos), "auxiliary logit distillation")
        num_classes = pos[0].shape[-1]
        hard = F.one_hot(batch.y_p, num_classes)
        soft = make_soft_label(batch.y_o, batch.y_n, num_classes)
        comps["pat"] = cfg.gamma_p * (1.0 - cfg.lambda_mix) * _aux_task(pos, hard)
        comps["pld"] = cfg.gamma_p * cfg.lambda_mix * _aux_distill(pos, used.pos_logits, cfg.kl_temperature)
        comps["nat"] = cfg.gamma_n * (1.0 - cfg.lambda_mix) * _aux_task(neg, soft)
        comps["nld"] = cfg.gamma_n * cfg.lambda_mix * _aux_distill(neg, used.neg_logits, cfg.kl_temperature)

    if cfg.enable_ld:
        comps["logit_cal"] = _calibrate(relations.logit_r_p, relations.logit_r_n, cfg.sigma, cfg.bounded_logit_cal)

    if cfg.enable_handcrafted_rd:
        r_p, r_n = handcrafted_relations(features)
        used.hand_p = r_p[-1].detach() if given.hand_p is None else given.hand_p
        used.hand_n = r_n[-1].detach() if given.hand_n is None else given.hand_n
        comps["handcrafted_rd"] = handcrafted_rd_loss(features, cfg.beta, used)

    return total_loss(comps, cfg), used
