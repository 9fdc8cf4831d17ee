"""Central finite-difference checks for every differentiable op.

Each registered op builds a small random problem. The output is projected
onto a random direction ``r`` to give the scalar ``<out, r>``, whose
analytic gradient (from ``backward``) is compared with central differences.
Inputs are perturbed in float32 and the difference quotient divides by the
step actually realised after rounding. Error metric per coordinate:
``|analytic - numeric| / max(1, |numeric|)``.

Inputs that feed relu or bilinear sampling directly are generated away from
the kinks. Inside composed blocks the branch pattern of every relu and
bilinear cell is recorded for both probes; a coordinate whose probes
disagree is retried with a smaller step and otherwise skipped (and counted).
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np

from . import ops
from .arch import ChannelAttention, LDRCNet, ModelConfig, MSIBlock, MultiPathBlock, ResidualBlock, ResidualDenseBlock
from .deform import bilinear_sample, bilinear_sample_grad, deform_conv2d
from .nn import DeformConv2d, Module
from .tensor import DTYPE, Tensor, no_grad, record_branches

GROUPS = ("tensor", "deform", "arch")
# f32 rounding noise in the difference quotient is ~5e-4 at 1e-3 but ~5e-5
# here; truncation error stays far below the tolerance for the smooth ops.
STEP = 1e-2
TOL = 1e-3
# composed blocks stack many f32 roundings and kinks; they are held to the
# same looser bound as the end-to-end network check
E2E_TOL = 1e-2
SEEDS = (0, 1, 2, 3, 4)
MAX_COORDS = 48

# build(rng) -> (forward, [tensors to check])
Problem = Tuple[Callable[[], Tensor], List[Tensor]]


@dataclass(frozen=True)
class GradOp:
    name: str
    group: str
    build: Callable[[np.random.Generator], Problem]
    tol: float = TOL
    coords: int = MAX_COORDS
    shrinks: int = 1  # how many tenfold step reductions to try at a kink


@dataclass
class OpResult:
    name: str
    group: str
    worst: float
    tol: float
    seeds: int
    seconds: float
    checked: int = 0
    skipped: int = 0

    @property
    def passed(self) -> bool:
        return self.worst < self.tol and self.checked > 0 and 4 * self.skipped <= self.checked + self.skipped

    def line(self) -> str:
        status = "ok" if self.passed else "FAIL"
        return (
            f"{self.name}\t{self.group}\tworst={self.worst:.3e}\ttol={self.tol:g}\tseeds={self.seeds}"
            f"\tchecked={self.checked}\tskipped={self.skipped}\t{status}"
        )


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(1.0, abs(numeric))


def _leaf(a) -> Tensor:
    return Tensor(np.ascontiguousarray(a, dtype=DTYPE), requires_grad=True)


def _away_from_zero(rng, shape, low=0.05, high=1.0) -> np.ndarray:
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(low, high, size=shape)


def _fractional_offsets(rng, shape, reach=2) -> np.ndarray:
    """Offsets whose fractional part stays in [0.1, 0.9]."""
    return rng.integers(-reach, reach + 1, size=shape) + rng.uniform(0.1, 0.9, size=shape)


@dataclass
class CheckStats:
    worst: float = 0.0
    checked: int = 0
    skipped: int = 0

    def merge(self, other: "CheckStats") -> None:
        self.worst = max(self.worst, other.worst)
        self.checked += other.checked
        self.skipped += other.skipped


def _same_branches(a: List[np.ndarray], b: List[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def check_problem(
    problem: Problem, rng: np.random.Generator, coords: int = MAX_COORDS, h: float = STEP, shrinks: int = 1
) -> CheckStats:
    """Compare analytic and central-difference gradients on (a sample of) every coordinate.

    When the two probes land on different branches of a relu or a bilinear
    cell, the step is shrunk tenfold up to ``shrinks`` times (smaller steps
    trade kink avoidance for f32 rounding noise); coordinates that still straddle a
    kink are skipped and counted.
    """
    forward, leaves = problem
    for t in leaves:
        t.grad = None
    out = forward()
    r = rng.standard_normal(out.shape)
    ops.weighted_sum(out, r).backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.astype(np.float64) for t in leaves]

    def probe():
        with record_branches() as log:
            value = float(np.sum(forward().data.astype(np.float64) * r))
        return value, log

    stats = CheckStats()
    with no_grad():
        for t, ga in zip(leaves, analytic):
            flat = t.data.reshape(-1)
            idx = np.arange(flat.size)
            if flat.size > coords:
                idx = rng.choice(flat.size, size=coords, replace=False)
            ga = ga.reshape(-1)
            for i in idx:
                orig = flat[i]
                numeric = None
                for step in [h / 10**k for k in range(shrinks + 1)]:
                    hi = DTYPE(orig + step)
                    lo = DTYPE(orig - step)
                    flat[i] = hi
                    f_hi, b_hi = probe()
                    flat[i] = lo
                    f_lo, b_lo = probe()
                    flat[i] = orig
                    if _same_branches(b_hi, b_lo):
                        numeric = (f_hi - f_lo) / (float(hi) - float(lo))
                        break
                if numeric is None:
                    stats.skipped += 1
                    continue
                stats.checked += 1
                stats.worst = max(stats.worst, relative_error(float(ga[i]), numeric))
    return stats


def _randomize(module: Module, rng, gain: float = 1.0) -> None:
    """Give zero-initialised parameters random values so every path is exercised.

    Weights get std ``gain / sqrt(fan_in)``; biases get std ``0.1 * gain``.
    """
    for p in module.parameters():
        if not np.any(p.data):
            shape = p.data.shape
            std = gain / np.sqrt(np.prod(shape[1:])) if len(shape) > 1 else 0.1 * gain
            p.data = (std * rng.standard_normal(shape)).astype(DTYPE)


# ---- tensor group -------------------------------------------------------


def _conv(stride=1, padding=1, dilation=1, kernel=3):
    def build(rng):
        x = _leaf(rng.standard_normal((2, 3, 8, 8)))
        w = _leaf(rng.standard_normal((4, 3, kernel, kernel)) * 0.5)
        b = _leaf(rng.standard_normal(4))
        return (lambda: ops.conv2d(x, w, b, stride, padding, dilation)), [x, w, b]

    return build


def _unary(fn, make_input):
    def build(rng):
        x = _leaf(make_input(rng))
        return (lambda: fn(x)), [x]

    return build


def _binary(fn):
    def build(rng):
        a = _leaf(rng.standard_normal((2, 3, 4, 4)))
        b = _leaf(rng.standard_normal((2, 3, 4, 4)))
        return (lambda: fn(a, b)), [a, b]

    return build


def _build_scale_channels(rng):
    x = _leaf(rng.standard_normal((2, 4, 4, 4)))
    s = _leaf(rng.standard_normal((2, 4, 1, 1)))
    return (lambda: ops.scale_channels(x, s)), [x, s]


def _build_concat(rng):
    a = _leaf(rng.standard_normal((2, 2, 4, 4)))
    b = _leaf(rng.standard_normal((2, 3, 4, 4)))
    return (lambda: ops.concat_channels([a, b, a])), [a, b]


def _build_weighted_sum(rng):
    x = _leaf(rng.standard_normal((2, 3, 4, 4)))
    w = rng.standard_normal((2, 3, 4, 4))
    return (lambda: ops.weighted_sum(x, w)), [x]


def _randn(*shape):
    return lambda rng: rng.standard_normal(shape)


# ---- deform group -------------------------------------------------------


def _deform(which: str, stride=1, dilation=1):
    def build(rng):
        x = _leaf(rng.standard_normal((2, 3, 7, 7)))
        w = _leaf(rng.standard_normal((4, 3, 3, 3)) * 0.5)
        b = _leaf(rng.standard_normal(4))
        pad = dilation
        ho = (7 + 2 * pad - dilation * 2 - 1) // stride + 1
        off = _leaf(_fractional_offsets(rng, (2, 18, ho, ho)))
        picked = {"input": [x], "weight": [w], "offsets": [off], "bias": [b]}[which]
        return (lambda: deform_conv2d(x, off, w, b, stride, pad, dilation)), picked

    return build


def _build_deform_layer(rng):
    layer = DeformConv2d(3, 4, rng)
    # small random predictor weights give fractional offsets around zero
    layer.offset_predictor.weight.data = (0.05 * rng.standard_normal(layer.offset_predictor.weight.shape)).astype(DTYPE)
    layer.offset_predictor.bias.data = _fractional_offsets(rng, (18,), reach=1).astype(DTYPE)
    x = _leaf(rng.standard_normal((1, 3, 6, 6)))
    return (lambda: layer(x)), [x, layer.offset_predictor.weight, layer.weight]


# ---- arch group ---------------------------------------------------------


def _module_problem(make_module, in_shapes):
    def build(rng):
        module = make_module(rng)
        _randomize(module, rng)
        xs = [_leaf(rng.standard_normal(s)) for s in in_shapes]
        params = module.parameters()
        picked = [params[i] for i in rng.choice(len(params), size=min(4, len(params)), replace=False)]
        return (lambda: module(*xs)), xs + picked

    return build


_SMALL = ModelConfig(base_channels=4, mpb_dilations=[2], msib_rb_depths=[1, 2], ca_reduction=2)


def _build_end_to_end(rng):
    """mse(D(R, E(R)), B) against 20 sampled scalar parameters of E and D."""
    model = LDRCNet(ModelConfig(base_channels=4, ca_reduction=2), seed=int(rng.integers(1 << 30)))
    _randomize(model, rng, gain=0.5)
    rainy = Tensor(rng.uniform(0, 1, (1, 3, 16, 16)))
    clean = Tensor(rng.uniform(0, 1, (1, 3, 16, 16)))
    named = [p for k, p in model.named_parameters() if k.startswith(("encoder.", "derain."))]
    # one scalar from each of 20 distinct tensors, wrapped as 1-element views
    chosen = rng.choice(len(named), size=20, replace=False)
    probes = []
    for i in chosen:
        p = named[i]
        flat = p.data.reshape(-1)
        probes.append((p, int(rng.integers(flat.size))))

    def forward():
        return ops.mse_loss(model.restore(rainy, model.encode(rainy)), clean)

    return forward, [_ScalarProbe(p, j) for p, j in probes]


class _ScalarProbe:
    """Duck-typed leaf exposing one element of a parameter to :func:`check_problem`."""

    def __init__(self, param: Tensor, index: int):
        self.param = param
        self.index = index

    @property
    def data(self) -> np.ndarray:
        return self.param.data.reshape(-1)[self.index : self.index + 1]

    @property
    def grad(self):
        g = self.param.grad
        return None if g is None else g.reshape(-1)[self.index : self.index + 1]

    @grad.setter
    def grad(self, value):
        self.param.grad = value


def check_bilinear_sample(rng: np.random.Generator, h: float = STEP) -> CheckStats:
    """Scalar sampler: analytic derivatives vs central differences (float64)."""
    x = rng.standard_normal((1, 2, 5, 6))
    stats = CheckStats()
    for _ in range(8):
        py = float(rng.integers(-1, 5) + rng.uniform(0.1, 0.9))
        px = float(rng.integers(-1, 6) + rng.uniform(0.1, 0.9))
        c = int(rng.integers(2))
        d_x, d_py, d_px = bilinear_sample_grad(x, 0, c, py, px)
        num_py = (bilinear_sample(x, 0, c, py + h, px) - bilinear_sample(x, 0, c, py - h, px)) / (2 * h)
        num_px = (bilinear_sample(x, 0, c, py, px + h) - bilinear_sample(x, 0, c, py, px - h)) / (2 * h)
        stats.worst = max(stats.worst, relative_error(d_py, num_py), relative_error(d_px, num_px))
        stats.checked += 2
        for yy, xx in np.ndindex(*d_x.shape):
            orig = x[0, c, yy, xx]
            x[0, c, yy, xx] = orig + h
            f_hi = bilinear_sample(x, 0, c, py, px)
            x[0, c, yy, xx] = orig - h
            f_lo = bilinear_sample(x, 0, c, py, px)
            x[0, c, yy, xx] = orig
            stats.worst = max(stats.worst, relative_error(d_x[yy, xx], (f_hi - f_lo) / (2 * h)))
            stats.checked += 1
    return stats


def _registry() -> List[GradOp]:
    t, d, a = GROUPS
    positive = lambda rng: _away_from_zero(rng, (2, 3, 4, 4))  # noqa: E731
    return [
        GradOp("conv2d", t, _conv()),
        GradOp("conv2d.stride2", t, _conv(stride=2)),
        GradOp("conv2d.dilation2", t, _conv(padding=2, dilation=2)),
        GradOp("conv2d.1x1", t, _conv(padding=0, kernel=1)),
        GradOp("avgpool2d", t, _unary(lambda x: ops.avgpool2d(x, 3, 1, 1), _randn(2, 3, 6, 6))),
        GradOp("avgpool2d.stride2", t, _unary(lambda x: ops.avgpool2d(x, 2), _randn(2, 3, 6, 6))),
        GradOp("global_avgpool", t, _unary(ops.global_avgpool, _randn(2, 3, 4, 5))),
        GradOp("upsample2x.nearest", t, _unary(lambda x: ops.upsample2x(x, "nearest"), _randn(2, 3, 4, 4))),
        GradOp("upsample2x.bilinear", t, _unary(lambda x: ops.upsample2x(x, "bilinear"), _randn(2, 3, 4, 5))),
        GradOp("relu", t, _unary(ops.relu, positive)),
        GradOp("sigmoid", t, _unary(ops.sigmoid, _randn(2, 3, 4, 4))),
        GradOp("add", t, _binary(ops.add)),
        GradOp("sub", t, _binary(ops.sub)),
        GradOp("mul", t, _binary(ops.mul)),
        GradOp("add_scalar", t, _unary(lambda x: ops.add_scalar(x, 0.7), _randn(2, 3, 4, 4))),
        GradOp("mul_scalar", t, _unary(lambda x: ops.mul_scalar(x, -1.3), _randn(2, 3, 4, 4))),
        GradOp("scale_channels", t, _build_scale_channels),
        GradOp("concat_channels", t, _build_concat),
        GradOp("mse_loss", t, _binary(ops.mse_loss)),
        GradOp("sum_all", t, _unary(ops.sum_all, _randn(2, 3, 4, 4))),
        GradOp("weighted_sum", t, _build_weighted_sum),
        GradOp("bilinear_sample", d, None),
        GradOp("deform_conv2d.input", d, _deform("input")),
        GradOp("deform_conv2d.weight", d, _deform("weight")),
        GradOp("deform_conv2d.offsets", d, _deform("offsets")),
        GradOp("deform_conv2d.bias", d, _deform("bias")),
        GradOp("deform_conv2d.offsets.stride2", d, _deform("offsets", stride=2)),
        GradOp("deform_conv2d.offsets.dilation2", d, _deform("offsets", dilation=2)),
        GradOp("deform_layer", d, _build_deform_layer),
        GradOp("channel_attention", a, _module_problem(lambda rng: ChannelAttention(8, 2, rng), [(2, 8, 4, 4)])),
        GradOp("multipath_block", a, _module_problem(lambda rng: MultiPathBlock(4, 4, _SMALL, rng), [(1, 4, 8, 8)]), tol=E2E_TOL),
        GradOp("residual_dense_block", a, _module_problem(lambda rng: ResidualDenseBlock(4, 2, rng), [(1, 4, 6, 6)]), tol=E2E_TOL),
        GradOp("residual_block", a, _module_problem(lambda rng: ResidualBlock(4, rng), [(1, 4, 6, 6)]), tol=E2E_TOL),
        GradOp("msi_block", a, _module_problem(lambda rng: MSIBlock(4, 4, _SMALL, rng), [(1, 4, 6, 6), (1, 4, 6, 6)]), tol=E2E_TOL),
        GradOp("end_to_end", a, _build_end_to_end, tol=E2E_TOL, shrinks=2),
    ]


REGISTRY: Dict[str, GradOp] = {op.name: op for op in _registry()}


def run_op(op: GradOp, seeds: Sequence[int] = SEEDS) -> OpResult:
    start = time.perf_counter()
    total = CheckStats()
    for seed in seeds:
        rng = np.random.default_rng([seed, len(op.name)])
        if op.build is None:
            total.merge(check_bilinear_sample(rng))
        else:
            total.merge(check_problem(op.build(rng), rng, op.coords, shrinks=op.shrinks))
    elapsed = time.perf_counter() - start
    return OpResult(op.name, op.group, total.worst, op.tol, len(seeds), elapsed, total.checked, total.skipped)


def run_suite(group: str = "all", seeds: Sequence[int] = SEEDS, report: Callable[[str], None] = None) -> List[OpResult]:
    if group != "all" and group not in GROUPS:
        raise ValueError(f"unknown group {group!r}; choose all or one of {GROUPS}")
    results = []
    for op in REGISTRY.values():
        if group in ("all", op.group):
            res = run_op(op, seeds)
            results.append(res)
            if report is not None:
                report(res.line())
    return results
