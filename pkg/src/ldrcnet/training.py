"""Optimisation: the cosine schedule, Adam, and the training loops."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np

from . import ops
from .arch import LDRCNet, parse_key_values
from .checkpoint import Checkpoint, Phase
from .data import PairedDataset, PatchSampler
from .nn import Parameter
from .tensor import Tensor, no_grad

StepLogger = Callable[[int, float, float], None]
# called after each step; returning True ends training early
StopRule = Callable[[int], bool]


class ProtocolError(RuntimeError):
    """Training was asked to run out of order (e.g. derain before constraint)."""


class MissingGradError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr_init: float = 3e-4
    lr_final: float = 1e-6
    schedule: str = "cosine"
    total_steps: int = 2000
    batch_size: int = 1
    patch_size: int = 64
    lambda1: float = 1.0
    lambda2: float = 1.0
    seed: int = 0
    mode: str = "two_phase"

    def __post_init__(self):
        if self.lr_final > self.lr_init:
            raise ValueError("lr_final must not exceed lr_init")
        if self.schedule != "cosine":
            raise ValueError(f"unsupported schedule {self.schedule!r}")
        if self.total_steps < 1 or self.batch_size < 1:
            raise ValueError("total_steps and batch_size must be positive")
        if self.patch_size % 8:
            raise ValueError(f"patch_size {self.patch_size} must be divisible by 8")
        if self.mode not in ("two_phase", "joint"):
            raise ValueError(f"mode must be two_phase or joint, got {self.mode!r}")

    @classmethod
    def from_mapping(cls, kv: Dict[str, str]) -> "TrainConfig":
        types = {f.name: f.type for f in fields(cls)}
        unknown = set(kv) - set(types)
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        cast = {"float": float, "int": int, "str": str}
        return cls(**{k: cast[types[k]](v) for k, v in kv.items()})

    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        return cls.from_mapping(parse_key_values(text))


def cosine_lr(step: int, cfg: TrainConfig) -> float:
    """Cosine annealing from ``lr_init`` at step 0 to ``lr_final`` at ``total_steps``."""
    if not 0 <= step <= cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    cos = math.cos(math.pi * step / cfg.total_steps)
    return cfg.lr_final + 0.5 * (cfg.lr_init - cfg.lr_final) * (1.0 + cos)


class Adam:
    """Bias-corrected Adam over a named parameter set.

    Moments are kept in float32 so they round-trip through checkpoints
    bit-exactly; the update itself is evaluated in float64.
    """

    def __init__(self, params: Dict[str, Parameter], betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = dict(params)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float) -> None:
        missing = [k for k, p in self.params.items() if p.grad is None]
        if missing:
            raise MissingGradError(f"no gradient for {len(missing)} parameter(s), e.g. {missing[0]}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr1 = 1.0 - b1**self.t
        corr2 = 1.0 - b2**self.t
        for k, p in self.params.items():
            g = p.grad.astype(np.float64)
            m = b1 * self.m[k].astype(np.float64) + (1.0 - b1) * g
            v = b2 * self.v[k].astype(np.float64) + (1.0 - b2) * g * g
            self.m[k] = m.astype(np.float32)
            self.v[k] = v.astype(np.float32)
            update = lr * (m / corr1) / (np.sqrt(v / corr2) + self.eps)
            p.data = (p.data.astype(np.float64) - update).astype(np.float32)

    def state(self) -> Dict[str, np.ndarray]:
        out = {f"m.{k}": v for k, v in self.m.items()}
        out.update({f"v.{k}": v for k, v in self.v.items()})
        return out

    def load_state(self, moments: Dict[str, np.ndarray], t: int) -> None:
        for k in self.params:
            self.m[k] = moments[f"m.{k}"].astype(np.float32)
            self.v[k] = moments[f"v.{k}"].astype(np.float32)
        self.t = t


def _as_pairs(data) -> Sequence[Tuple[np.ndarray, np.ndarray]]:
    if isinstance(data, PairedDataset):
        return data.arrays()
    return list(data)


def _trainable(model: LDRCNet, prefixes: Sequence[str]) -> Dict[str, Parameter]:
    return {k: p for k, p in model.named_parameters() if k.startswith(tuple(prefixes))}


def constraint_loss(model: LDRCNet, rainy: Tensor, clean: Tensor) -> Tensor:
    deg = model.encode(rainy)
    return ops.mse_loss(model.reconstruct_rainy(clean, deg), rainy)


def derain_loss(model: LDRCNet, rainy: Tensor, clean: Tensor, freeze_encoder: bool = True) -> Tensor:
    if freeze_encoder:
        with no_grad():
            deg = model.encode(rainy)
    else:
        deg = model.encode(rainy)
    return ops.mse_loss(model.restore(rainy, deg), clean)


def joint_loss(model: LDRCNet, rainy: Tensor, clean: Tensor, lambda1: float, lambda2: float):
    """Weighted sum of derain and constraint losses sharing one encoder pass.

    Returns (total, derain part, constraint part); the constraint part is
    None for ablations without a constraint framework.
    """
    deg = model.encode(rainy)
    l_d = ops.mse_loss(model.restore(rainy, deg), clean)
    total = ops.mul_scalar(l_d, lambda1)
    l_c = None
    if model.has_constraint:
        l_c = ops.mse_loss(model.reconstruct_rainy(clean, deg), rainy)
        total = ops.add(total, ops.mul_scalar(l_c, lambda2))
    return total, l_d, l_c


def _run(model, optimizer, loss_fn, data, cfg, phase, start_step, log, stop=None) -> Checkpoint:
    sampler = PatchSampler(_as_pairs(data), cfg.patch_size, cfg.batch_size, cfg.seed)
    done = start_step
    for step in range(start_step, cfg.total_steps):
        lr = cosine_lr(step, cfg)
        rainy, clean = sampler.sample(step)
        optimizer.zero_grad()
        loss = loss_fn(Tensor(rainy), Tensor(clean))
        loss.backward()
        optimizer.step(lr)
        if log is not None:
            log(step, loss.item(), lr)
        done = step + 1
        if stop is not None and stop(step):
            break
    meta = {"adam_t": str(optimizer.t), "seed": str(cfg.seed), "total_steps": str(cfg.total_steps)}
    return Checkpoint(model.state_dict(), optimizer.state(), done, phase, model.config, meta)


def _resume_optimizer(optimizer: Adam, resume: Optional[Checkpoint], phase: Phase) -> int:
    if resume is None or resume.phase != phase:
        return 0
    optimizer.load_state(resume.moments, int(resume.meta.get("adam_t", resume.step)))
    return resume.step


def train_phase1(model: LDRCNet, data, cfg: TrainConfig, log: Optional[StepLogger] = None,
                 resume: Optional[Checkpoint] = None, stop: Optional[StopRule] = None) -> Checkpoint:
    """Constraint pretraining: fit E and C so that C(B, E(R)) reproduces R."""
    if not (model.has_encoder and model.has_constraint):
        raise ProtocolError(f"ablation {model.config.ablation} has no encoder/constraint pair to pretrain")
    if resume is not None and resume.phase == Phase.CONSTRAINT:
        model.load_state_dict(resume.params)
    optimizer = Adam(_trainable(model, ["encoder.", "constraint."]))
    start = _resume_optimizer(optimizer, resume, Phase.CONSTRAINT)
    return _run(model, optimizer, lambda r, b: constraint_loss(model, r, b), data, cfg, Phase.CONSTRAINT, start, log, stop)


def prepare_phase2(model: LDRCNet, pretrained: Optional[Checkpoint]) -> None:
    """Load and freeze the encoder before deraining training.

    S2 has no encoder and S3 deliberately keeps its random initialisation;
    every other configuration needs a constraint-phase checkpoint.
    """
    ab = model.config.ablation
    if model.has_encoder:
        if pretrained is None:
            if ab != "s3":
                raise ProtocolError(
                    "derain training needs a constraint-phase checkpoint: the encoder is pretrained "
                    "with the constraint loss, then frozen while the deraining network trains "
                    "(use ablation s3 to train with a random frozen encoder)"
                )
        elif pretrained.phase == Phase.CONSTRAINT:
            enc = {k[len("encoder."):]: v for k, v in pretrained.params.items() if k.startswith("encoder.")}
            model.encoder.load_state_dict(enc)
        elif pretrained.phase == Phase.DERAIN:
            model.load_state_dict(pretrained.params, strict=False)
        else:
            raise ProtocolError(f"cannot start derain training from a {pretrained.phase.label} checkpoint")
        model.encoder.set_trainable(False)


def train_phase2(model: LDRCNet, data, cfg: TrainConfig, pretrained: Optional[Checkpoint] = None,
                 log: Optional[StepLogger] = None, stop: Optional[StopRule] = None) -> Checkpoint:
    """Derain training with the encoder frozen; only D (or the S1 head) learns."""
    prepare_phase2(model, pretrained)
    optimizer = Adam(_trainable(model, ["derain.", "residual_head."]))
    start = _resume_optimizer(optimizer, pretrained, Phase.DERAIN)
    return _run(model, optimizer, lambda r, b: derain_loss(model, r, b), data, cfg, Phase.DERAIN, start, log, stop)


def train_joint(model: LDRCNet, data, cfg: TrainConfig, log: Optional[StepLogger] = None,
                resume: Optional[Checkpoint] = None, stop: Optional[StopRule] = None) -> Checkpoint:
    """Single loop on lambda1 * L_D + lambda2 * L_C over every parameter."""
    if resume is not None and resume.phase == Phase.JOINT:
        model.load_state_dict(resume.params)
    model.set_trainable(True)
    optimizer = Adam(dict(model.named_parameters()))
    start = _resume_optimizer(optimizer, resume, Phase.JOINT)

    def loss_fn(r, b):
        return joint_loss(model, r, b, cfg.lambda1, cfg.lambda2)[0]

    return _run(model, optimizer, loss_fn, data, cfg, Phase.JOINT, start, log, stop)


def predict(model: LDRCNet, rainy: np.ndarray) -> np.ndarray:
    """Forward pass without recording a graph; input and output are NCHW arrays."""
    with no_grad():
        x = Tensor(rainy)
        return model.restore(x, model.encode(x)).data


def parameter_digest(model_or_state) -> str:
    """SHA-256 over parameter names and raw bytes (used for freeze audits)."""
    import hashlib

    state = model_or_state.state_dict() if hasattr(model_or_state, "state_dict") else model_or_state
    h = hashlib.sha256()
    for k in sorted(state):
        h.update(k.encode())
        h.update(np.ascontiguousarray(state[k], dtype=np.float32).tobytes())
    return h.hexdigest()
