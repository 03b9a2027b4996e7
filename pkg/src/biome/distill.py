"""Layer-wise knowledge distillation of a frozen teacher into a BioME student."""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
import torch
from torch import Tensor, nn
from torch.nn import functional as F

from . import dsp
from .encoder import BioMEEncoder, EncoderConfig, normalize_mel, patchify_tensor

DISTILL_LAYERS = (3, 6, 9, 12)
COS_EPS = 1e-8


class NonFiniteLossError(RuntimeError):
    pass


# ---------------------------------------------------------------- teacher


@dataclass
class TeacherAdapter:
    """Frozen teacher; ``forward`` maps patches [..., n, 256] to 12 layer activations."""

    forward: Callable[[Tensor], list[Tensor]]
    d_teacher: int
    n_layers: int = 12
    module: Optional[nn.Module] = None

    def __post_init__(self):
        if self.n_layers != 12:
            raise ValueError("teacher must have 12 layers")

    def __call__(self, patches: Tensor) -> list[Tensor]:
        with torch.no_grad():
            return [a.detach() for a in self.forward(patches)]

    def weights_digest(self) -> str:
        h = hashlib.sha256()
        if self.module is not None:
            for name, p in sorted(self.module.state_dict().items()):
                h.update(name.encode())
                h.update(p.detach().cpu().numpy().tobytes())
        return h.hexdigest()


def teacher_config(d_teacher: int) -> EncoderConfig:
    n_heads = next(h for h in (d_teacher // 16, d_teacher // 8, d_teacher // 2, 1)
                   if h >= 1 and d_teacher % h == 0 and (d_teacher // h) % 2 == 0)
    return EncoderConfig(n_layers=12, d_model=d_teacher, n_heads=n_heads, n_kv_heads=n_heads,
                         mlp_hidden=2 * d_teacher, film=False)


def make_toy_teacher(seed: int, d_teacher: int = 64, dtype=torch.float32) -> TeacherAdapter:
    """Randomly initialized 12-layer encoder without FiLM, frozen and in eval mode."""
    if d_teacher <= 0:
        raise ValueError("d_teacher must be positive")
    cfg = teacher_config(d_teacher)
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    model = BioMEEncoder(cfg).to(dtype).eval()
    torch.random.set_rng_state(gen_state)
    for p in model.parameters():
        p.requires_grad_(False)
    return TeacherAdapter(forward=lambda patches: model(patches, None), d_teacher=d_teacher, module=model)


# ---------------------------------------------------------------- heads / loss


class ProjectionHeads(nn.Module):
    """One affine student-to-teacher map per distilled layer (identity init when widths match)."""

    def __init__(self, d_student: int, d_teacher: int, layers: Sequence[int] = DISTILL_LAYERS):
        super().__init__()
        self.layers = tuple(layers)
        self.heads = nn.ModuleDict({str(k): nn.Linear(d_student, d_teacher) for k in self.layers})
        if d_student == d_teacher:
            for head in self.heads.values():
                nn.init.eye_(head.weight)
                nn.init.zeros_(head.bias)

    def forward(self, k: int, x: Tensor) -> Tensor:
        return self.heads[str(k)](x)


@dataclass
class LossBreakdown:
    total: Tensor
    l1_term: float
    cos_term: float
    per_layer: dict = field(default_factory=dict)  # k -> (l1, cos)
    mean_cos: dict = field(default_factory=dict)  # k -> mean cosine similarity

    def row(self) -> dict:
        out = {"total": self.total.item(), "l1_term": self.l1_term, "cos_term": self.cos_term}
        for k, (l1, c) in sorted(self.per_layer.items()):
            out[f"l1_k{k}"] = l1
            out[f"cos_k{k}"] = c
        return out


def align_layers(student: Sequence[Tensor], teacher: Sequence[Tensor], layers: Iterable[int] = DISTILL_LAYERS):
    """Pair student and teacher activations at the 1-based layer indices ``layers``."""
    if len(student) != 12 or len(teacher) != 12:
        raise ValueError(f"expected 12 layers on both sides, got {len(student)} and {len(teacher)}")
    pairs = []
    for k in layers:
        if not 1 <= k <= 12:
            raise ValueError(f"layer index {k} outside 1..12")
        s, t = student[k - 1], teacher[k - 1]
        if s.shape[:-1] != t.shape[:-1]:
            raise ValueError(f"layer {k}: token shapes differ ({tuple(s.shape)} vs {tuple(t.shape)})")
        pairs.append((k, s, t))
    return pairs


def cosine(a: Tensor, b: Tensor, eps: float = COS_EPS) -> Tensor:
    return (a * b).sum(-1) / ((a.norm(dim=-1) + eps) * (b.norm(dim=-1) + eps))


def distill_loss(pairs, heads: Optional[ProjectionHeads] = None) -> LossBreakdown:
    """Mean over layers and tokens of |z_hat - z|_1 / D - log sigmoid(cos(z_hat, z)).

    ``heads=None`` compares student activations directly (identity projection).
    """
    if not pairs:
        raise ValueError("no layer pairs to distill")
    l1s, coss, per_layer, mean_cos = [], [], {}, {}
    for k, s, t in pairs:
        z_hat = heads(k, s) if heads is not None else s
        if z_hat.shape != t.shape:
            raise ValueError(f"layer {k}: projected width {z_hat.shape[-1]} != teacher width {t.shape[-1]}")
        c = cosine(z_hat, t)
        l1 = (z_hat - t).abs().mean(dim=-1).mean()
        ct = F.softplus(-c).mean()  # -log sigmoid(c)
        l1s.append(l1)
        coss.append(ct)
        per_layer[k] = (l1.item(), ct.item())
        mean_cos[k] = c.mean().item()
    l1_term = torch.stack(l1s).mean()
    cos_term = torch.stack(coss).mean()
    return LossBreakdown(l1_term + cos_term, l1_term.item(), cos_term.item(), per_layer, mean_cos)


# ---------------------------------------------------------------- schedule


@dataclass(frozen=True)
class TrainSchedule:
    peak_lr: float = 1e-4
    floor_lr: float = 1e-5
    warmup_steps: int = 25_000
    total_steps: int = 100_000
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.98
    batch_size: int = 128
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ValueError("need 0 <= warmup_steps < total_steps")
        if not self.peak_lr > self.floor_lr >= 0:
            raise ValueError("need peak_lr > floor_lr >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


def desk_schedule(**overrides) -> TrainSchedule:
    kw = dict(peak_lr=1e-4, floor_lr=1e-5, warmup_steps=50, total_steps=500, batch_size=8)
    kw.update(overrides)
    return TrainSchedule(**kw)


def overfit_schedule(**overrides) -> TrainSchedule:
    """200 steps on one fixed batch; a higher peak rate than the full recipe so it converges in that budget."""
    kw = dict(peak_lr=1e-3, floor_lr=1e-4, warmup_steps=20, total_steps=200, batch_size=8)
    kw.update(overrides)
    return TrainSchedule(**kw)


def lr_at(step: int, sched: TrainSchedule) -> float:
    """Linear warm-up floor -> peak, then cosine decay peak -> 0."""
    if not 0 <= step <= sched.total_steps:
        raise ValueError(f"step {step} outside [0, {sched.total_steps}]")
    w = sched.warmup_steps
    if step < w:
        return sched.floor_lr + (sched.peak_lr - sched.floor_lr) * step / w
    if step == sched.total_steps:
        return 0.0
    progress = (step - w) / (sched.total_steps - w)
    return 0.5 * sched.peak_lr * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------- batches / training


@dataclass
class DistillBatch:
    clips: list
    mel: Tensor  # [B, n_mels, n_frames]
    patches: Tensor  # [B, n_tokens, 256]
    msab: Tensor  # [B, msab_dim]


def make_batch(clips, seconds: float = 2.0, msab_nfft: int = dsp.MSAB_NFFT, dtype=torch.float32) -> DistillBatch:
    """Crop/pad each clip to ``seconds`` and derive mel patches and MSAB vectors."""
    fixed = [dsp.fix_length(c, seconds) for c in clips]
    mel = torch.as_tensor(np.stack([dsp.mel_spectrogram(c).values for c in fixed]), dtype=dtype)
    h = torch.as_tensor(np.stack([dsp.msab_features(c, msab_nfft).values for c in fixed]), dtype=dtype)
    return DistillBatch(fixed, mel, patchify_tensor(normalize_mel(mel)), h)


def make_optimizer(params, sched: TrainSchedule) -> torch.optim.AdamW:
    return torch.optim.AdamW(params, lr=lr_at(0, sched), betas=(sched.beta1, sched.beta2),
                             weight_decay=sched.weight_decay)


def train_step(student: BioMEEncoder, heads: ProjectionHeads, optimizer: torch.optim.Optimizer,
               batch: DistillBatch, teacher: TeacherAdapter, sched: TrainSchedule, step: int,
               layers: Sequence[int] = DISTILL_LAYERS) -> LossBreakdown:
    """One AdamW update of student + heads at ``lr_at(step)``; returns the pre-update loss."""
    lr = lr_at(step, sched)
    for g in optimizer.param_groups:
        g["lr"] = lr
    target = teacher(batch.patches)
    loss = distill_loss(align_layers(student(batch.patches, batch.msab), target, layers), heads)
    if not torch.isfinite(loss.total):
        raise NonFiniteLossError(f"non-finite loss at step {step}: l1={loss.l1_term} cos={loss.cos_term}")
    optimizer.zero_grad(set_to_none=True)
    loss.total.backward()
    optimizer.step()
    return loss


def student_config(d_model: int = 32, msab_dim: int = 2 * dsp.MSAB_NFFT) -> EncoderConfig:
    n_heads = 4 if d_model % 4 == 0 and (d_model // 4) % 2 == 0 else 1
    n_kv = 2 if n_heads % 2 == 0 else 1
    return EncoderConfig(n_layers=12, d_model=d_model, n_heads=n_heads, n_kv_heads=n_kv,
                         mlp_hidden=2 * d_model, msab_dim=msab_dim)


@dataclass
class Distiller:
    """Student, heads, frozen teacher and optimizer bundled for a training run."""

    student: BioMEEncoder
    heads: ProjectionHeads
    teacher: TeacherAdapter
    sched: TrainSchedule
    layers: tuple = DISTILL_LAYERS
    optimizer: Optional[torch.optim.Optimizer] = None

    def __post_init__(self):
        if self.optimizer is None:
            self.optimizer = make_optimizer(list(self.student.parameters()) + list(self.heads.parameters()),
                                            self.sched)

    @classmethod
    def create(cls, student_cfg: EncoderConfig, sched: TrainSchedule, d_teacher: int = 64,
               layers: Sequence[int] = DISTILL_LAYERS, teacher_seed: Optional[int] = None) -> "Distiller":
        torch.manual_seed(sched.seed)
        student = BioMEEncoder(student_cfg)
        heads = ProjectionHeads(student_cfg.d_model, d_teacher, layers)
        teacher = make_toy_teacher(sched.seed + 1 if teacher_seed is None else teacher_seed, d_teacher)
        return cls(student, heads, teacher, sched, tuple(layers))

    def step(self, batch: DistillBatch, step: int) -> LossBreakdown:
        return train_step(self.student, self.heads, self.optimizer, batch, self.teacher, self.sched, step,
                          self.layers)

    def evaluate(self, batch: DistillBatch) -> LossBreakdown:
        with torch.no_grad():
            target = self.teacher(batch.patches)
            return distill_loss(align_layers(self.student(batch.patches, batch.msab), target, self.layers),
                                self.heads)
