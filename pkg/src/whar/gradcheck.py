"""Central finite-difference checks for every differentiable op and composite block.

Each registered check draws a random tiny problem (extents <= 5). The analytic
gradient of <out, R> for a fixed random R is computed twice, once with float32
inputs and once with float64 inputs; both are compared against a float64 central
difference of the same function. The error measure is

    ||g_analytic - g_numeric|| / max(||g_analytic||, ||g_numeric||, 1e-6)

over all checked coordinates of all leaves.
"""

from __future__ import annotations

import copy
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .attention import CrossSensorAttention
from .cfb import CascadedFusion
from .config import (
    AttentionConfig,
    CcfConfig,
    CfbConfig,
    GtaConfig,
    LtfeConfig,
    MfeConfig,
    ModelConfig,
)
from .gta import MambaBlock, SelectiveSSM, gap_forward
from .local_temporal import CrossChannelFusion, LocalTemporal
from .metrics import Classifier
from .mfe import ModalityEmbedding
from .model import WharNet
from .mom import morph, sample_moments
from .nn import Module
from .tensor import Tensor

TOL32 = 1e-2
TOL64 = 1e-4
STEP = 1e-6
MAX_COORDS = 48  # per leaf; larger leaves are checked on a random subset of coordinates


@dataclass
class Case:
    """``forward`` recomputes the output from the current ``leaves``; FD perturbs leaf data in place."""

    forward: Callable[[], Tensor]
    leaves: list[Tensor]


Maker = Callable[[np.dtype], Case]
Builder = Callable[[np.random.Generator], Maker]


@dataclass
class Check:
    name: str
    kind: str  # "op" | "block"
    build: Builder
    # optional oracle function; defaults to the case itself (used by the MoM surrogate)
    numeric: Optional[Builder] = None


REGISTRY: dict[str, Check] = {}


def register(name: str, kind: str = "op"):
    def wrap(fn: Builder) -> Builder:
        REGISTRY[name] = Check(name, kind, fn)
        return fn

    return wrap


# -- helpers -----------------------------------------------------------------------

def _arr(rng: np.random.Generator, shape, lo: float = -1.0, hi: float = 1.0) -> np.ndarray:
    # rounded through float32 so both precisions start from identical values
    return rng.uniform(lo, hi, size=shape).astype(np.float32).astype(np.float64)


def _away(rng: np.random.Generator, shape, lo: float = 0.3, hi: float = 1.5) -> np.ndarray:
    return _arr(rng, shape, lo, hi) * rng.choice([-1.0, 1.0], size=shape)


def _dims(rng: np.random.Generator, k: int, lo: int = 1, hi: int = 5) -> tuple[int, ...]:
    return tuple(int(v) for v in rng.integers(lo, hi + 1, size=k))


def _leaves(arrays: Sequence[np.ndarray], dtype) -> list[Tensor]:
    return [Tensor(a, requires_grad=True, dtype=dtype) for a in arrays]


def _op(fn: Callable[..., Tensor], *arrays: np.ndarray) -> Maker:
    def make(dtype) -> Case:
        leaves = _leaves(arrays, dtype)
        return Case(lambda: fn(*leaves), leaves)

    return make


def _module(module: Module, fn: Callable[[Module, Tensor], Tensor], x: np.ndarray) -> Maker:
    def make(dtype) -> Case:
        m = copy.deepcopy(module).astype(dtype)
        (xt,) = _leaves([x], dtype)
        return Case(lambda: fn(m, xt), [xt] + m.parameters())

    return make


# -- elementwise and reductions --------------------------------------------------------

def _broadcast_pair(rng):
    shape = _dims(rng, int(rng.integers(1, 4)))
    other = tuple(1 if rng.random() < 0.3 else d for d in shape)
    if rng.random() < 0.3:
        other = other[int(rng.integers(0, len(other))):]
    return (shape, other) if rng.random() < 0.5 else (other, shape)


@register("add")
def _add(rng):
    sa, sb = _broadcast_pair(rng)
    return _op(T.add, _arr(rng, sa), _arr(rng, sb))


@register("sub")
def _sub(rng):
    sa, sb = _broadcast_pair(rng)
    return _op(T.sub, _arr(rng, sa), _arr(rng, sb))


@register("mul")
def _mul(rng):
    sa, sb = _broadcast_pair(rng)
    return _op(T.mul, _arr(rng, sa), _arr(rng, sb))


@register("div")
def _div(rng):
    sa, sb = _broadcast_pair(rng)
    return _op(T.div, _arr(rng, sa), _away(rng, sb))


@register("power")
def _power(rng):
    e = float(rng.choice([2.0, 3.0, 0.5, -1.5]))
    return _op(lambda x: T.power(x, e), _arr(rng, _dims(rng, 2), 0.5, 2.0))


def _unary(name: str, sampler=_arr):
    # looked up on the module per call so a patched op is what gets checked
    register(name)(lambda rng: _op(lambda x: getattr(T, name)(x), sampler(rng, _dims(rng, int(rng.integers(1, 4))))))


_unary("exp")
_unary("log", lambda rng, s: _arr(rng, s, 0.2, 3.0))
_unary("sqrt", lambda rng, s: _arr(rng, s, 0.2, 3.0))
_unary("reciprocal", _away)
_unary("gelu", lambda rng, s: _arr(rng, s, -3.0, 3.0))
_unary("sigmoid", lambda rng, s: _arr(rng, s, -4.0, 4.0))
_unary("silu", lambda rng, s: _arr(rng, s, -3.0, 3.0))
_unary("softplus", lambda rng, s: _arr(rng, s, -4.0, 4.0))
_unary("relu", lambda rng, s: _away(rng, s, 0.05, 2.0))


def _axis_choice(rng, ndim: int):
    r = rng.random()
    if r < 0.2:
        return None
    if r < 0.4 and ndim > 1:
        return tuple(sorted(rng.choice(ndim, size=2, replace=False).tolist()))
    return int(rng.integers(-ndim, ndim))


@register("sum")
def _sum(rng):
    shape = _dims(rng, int(rng.integers(1, 4)))
    axis, keep = _axis_choice(rng, len(shape)), bool(rng.random() < 0.5)
    return _op(lambda x: T.tsum(x, axis, keep), _arr(rng, shape))


@register("mean")
def _mean(rng):
    shape = _dims(rng, int(rng.integers(1, 4)))
    axis, keep = _axis_choice(rng, len(shape)), bool(rng.random() < 0.5)
    return _op(lambda x: T.tmean(x, axis, keep), _arr(rng, shape))


@register("mean_var")
def _mean_var(rng):
    shape = _dims(rng, int(rng.integers(1, 4)), lo=2)
    axis = _axis_choice(rng, len(shape))
    if axis is None:
        axis = -1

    def fn(x):
        mu, var = T.mean_var(x, axis)
        return T.concat([mu, var], axis=0)

    return _op(fn, _arr(rng, shape))


# -- shape ops ------------------------------------------------------------------------

@register("reshape")
def _reshape(rng):
    shape = _dims(rng, 3)
    return _op(lambda x: T.reshape(x, (shape[2], -1)), _arr(rng, shape))


@register("transpose")
def _transpose(rng):
    shape = _dims(rng, 3)
    perm = tuple(rng.permutation(3).tolist())
    return _op(lambda x: T.transpose(x, perm), _arr(rng, shape))


@register("getitem")
def _getitem(rng):
    shape = _dims(rng, 2, lo=2)
    if rng.random() < 0.5:
        index = (slice(None), slice(0, int(rng.integers(1, shape[1] + 1))))
    else:
        index = rng.integers(0, shape[0], size=int(rng.integers(1, 6)))  # repeats exercise accumulation
    return _op(lambda x: T.getitem(x, index), _arr(rng, shape))


@register("concat")
def _concat(rng):
    shape = list(_dims(rng, 3))
    axis = int(rng.integers(0, 3))
    arrays = []
    for _ in range(int(rng.integers(2, 4))):
        s = list(shape)
        s[axis] = int(rng.integers(1, 4))
        arrays.append(_arr(rng, s))
    return _op(lambda *xs: T.concat(xs, axis), *arrays)


@register("matmul")
def _matmul(rng):
    n, k, m, b = _dims(rng, 4)
    form = int(rng.integers(0, 3))
    if form == 0:
        return _op(T.matmul, _arr(rng, (n, k)), _arr(rng, (k, m)))
    if form == 1:
        return _op(T.matmul, _arr(rng, (b, n, k)), _arr(rng, (k, m)))
    return _op(T.matmul, _arr(rng, (b, n, k)), _arr(rng, (b, k, m)))


@register("softmax")
def _softmax(rng):
    shape = _dims(rng, int(rng.integers(1, 4)), lo=2)
    axis = int(rng.integers(-len(shape), len(shape)))
    return _op(lambda x: T.softmax(x, axis), _arr(rng, shape, -3.0, 3.0))


@register("cross_entropy")
def _cross_entropy(rng):
    b, c = _dims(rng, 2, lo=2)
    labels = rng.integers(0, c, size=b)
    return _op(lambda x: T.cross_entropy(x, labels), _arr(rng, (b, c), -3.0, 3.0))


# -- convolutions and normalization ------------------------------------------------------

@register("conv1d")
def _conv1d(rng):
    b = int(rng.integers(1, 4))
    groups = int(rng.integers(1, 4))
    if rng.random() < 0.4:
        cg, og = 1, int(rng.integers(1, 3))  # depthwise-style path
    else:
        cg, og = _dims(rng, 2, hi=3)
    kernel, stride = int(rng.integers(1, 5)), int(rng.integers(1, 4))
    padding = int(rng.integers(0, 3)) if rng.random() < 0.5 else (int(rng.integers(0, 4)), 0)
    length = kernel + int(rng.integers(0, 6))
    x = _arr(rng, (b, groups * cg, length))
    w = _arr(rng, (groups * og, cg, kernel))
    if rng.random() < 0.5:
        return _op(lambda x, w, bias: T.conv1d(x, w, bias, stride, padding, groups), x, w, _arr(rng, groups * og))
    return _op(lambda x, w: T.conv1d(x, w, None, stride, padding, groups), x, w)


@register("pointwise_conv")
def _pointwise(rng):
    b, groups = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    cg, og = _dims(rng, 2, hi=3)
    spatial = _dims(rng, int(rng.integers(1, 3)))
    x = _arr(rng, (b, groups * cg) + spatial)
    w = _arr(rng, (groups * og, cg))
    if rng.random() < 0.5:
        return _op(lambda x, w, bias: T.pointwise_conv(x, w, bias, groups), x, w, _arr(rng, groups * og))
    return _op(lambda x, w: T.pointwise_conv(x, w, None, groups), x, w)


@register("depthwise_conv2d")
def _depthwise(rng):
    b, c, h, w_ = _dims(rng, 4)
    kh, kw = (int(k) for k in rng.choice([1, 3, 5], size=2))
    x, w = _arr(rng, (b, c, h, w_)), _arr(rng, (c, kh, kw))
    return _op(T.depthwise_conv2d, x, w, _arr(rng, c))


@register("batchnorm")
def _batchnorm(rng):
    training = bool(rng.random() < 0.7)
    shape = (int(rng.integers(2, 5)), int(rng.integers(1, 4))) + _dims(rng, int(rng.integers(1, 3)))
    c = shape[1]
    mean0, var0 = _arr(rng, c), _arr(rng, c, 0.5, 2.0)

    def fn(x, gamma, beta):
        # fresh buffers each call so repeated evaluation is a pure function
        return T.batchnorm(x, gamma, beta, mean0.astype(x.dtype), var0.astype(x.dtype), training)

    return _op(fn, _arr(rng, shape), _arr(rng, c, 0.5, 1.5), _arr(rng, c))


@register("selective_scan")
def _scan(rng):
    b, e, s, t = _dims(rng, 4)
    return _op(
        T.selective_scan,
        _arr(rng, (b, e, t)),
        _arr(rng, (b, e, t), 0.05, 1.0),
        -_arr(rng, (e, s), 0.2, 2.0),
        _arr(rng, (b, s, t)),
        _arr(rng, (b, s, t)),
        _arr(rng, e),
    )


# -- composite blocks ----------------------------------------------------------------

def _seed(rng) -> np.random.Generator:
    return np.random.default_rng(int(rng.integers(0, 2**31)))


def _call(m, x):
    return m(x)


@register("mfe", "block")
def _mfe(rng):
    n, m, d = _dims(rng, 3, hi=3)
    kernel, stride = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    length = kernel + int(rng.integers(0, 5))
    block = ModalityEmbedding(n, m, length, MfeConfig(kernel, stride, d, bool(rng.random() < 0.3)), _seed(rng))
    return _module(block, _call, _arr(rng, (int(rng.integers(1, 3)), n, m, length)))


@register("ltfe", "block")
def _ltfe(rng):
    c, t = _dims(rng, 2)
    act = str(rng.choice(["gelu", "relu", "silu", "none"]))
    block = LocalTemporal(c, LtfeConfig(int(rng.choice([1, 3, 5])), act), _seed(rng))
    x = _arr(rng, (int(rng.integers(1, 3)), c, t))
    if act == "relu":
        x = _away(rng, x.shape, 0.05, 1.0)
    return _module(block, _call, x)


@register("ccf", "block")
def _ccf(rng):
    n, m, d = _dims(rng, 3, hi=3)
    cfg = CcfConfig("gelu", str(rng.choice(["sensor_variable", "variable"])), bool(rng.random() < 0.7))
    block = CrossChannelFusion(n, m, d, cfg, _seed(rng))
    return _module(block, _call, _arr(rng, (int(rng.integers(1, 3)), n * m * d, int(rng.integers(1, 5)))))


@register("cfb", "block")
def _cfb(rng):
    r = int(rng.integers(1, 3))
    c = r * int(rng.integers(1, 3))
    cfg = CfbConfig(r, int(rng.integers(1, 3)), tuple(int(k) for k in rng.choice([1, 3], size=2)))
    block = CascadedFusion(c, cfg, _seed(rng))
    shape = (int(rng.integers(2, 4)), c) + _dims(rng, 2, hi=4)
    return _module(block, _call, _arr(rng, shape))


@register("gap", "block")
def _gap(rng):
    b, n, d, m, t = _dims(rng, 5, hi=3)
    return _op(lambda x: gap_forward(x, m), _arr(rng, (b, n, d * m, t)))


@register("selective_ssm", "block")
def _ssm(rng):
    e, s, t = _dims(rng, 3, hi=4)
    block = SelectiveSSM(e, s, _seed(rng))
    return _module(block, _call, _arr(rng, (int(rng.integers(1, 3)), e, t)))


@register("mamba", "block")
def _mamba(rng):
    e, t = _dims(rng, 2, hi=4)
    cfg = GtaConfig(int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.integers(1, 3)))
    block = MambaBlock(e, cfg, _seed(rng))
    return _module(block, _call, _arr(rng, (int(rng.integers(1, 3)), e, t)))


@register("csi_attention", "block")
def _csi(rng):
    n, f, dk = _dims(rng, 3)
    block = CrossSensorAttention(f, AttentionConfig(dk, bool(rng.random() < 0.5)), _seed(rng))
    return _module(block, _call, _arr(rng, (int(rng.integers(1, 3)), n, f)))


@register("head_loss", "block")
def _head(rng):
    b, f, c = int(rng.integers(1, 4)), int(rng.integers(1, 6)), int(rng.integers(2, 5))
    labels = rng.integers(0, c, size=b)
    block = Classifier(f, c, _seed(rng))
    return _module(block, lambda m, x: T.cross_entropy(m(x), labels), _arr(rng, (b, 1, f)))


@register("network", "block")
def _network(rng):
    cfg = ModelConfig(n_sensors=int(rng.integers(1, 3)), n_variables=int(rng.integers(1, 3)), seq_len=8, n_classes=3)
    cfg.mfe = MfeConfig(kernel=2, stride=2, channels=2 * int(rng.integers(1, 3)), shared=False)
    cfg.cfb = CfbConfig(r=2, k=int(rng.integers(1, 3)))
    cfg.ltfe = LtfeConfig(kernel=3)
    cfg.gta = GtaConfig(state_size=2, conv_width=2, expand=1)
    cfg.attention = AttentionConfig(d_k=3)
    cfg.fusion.variable = str(rng.choice(["cfb", "none"]))
    cfg.fusion.sensor = str(rng.choice(["cfb", "attention"]))
    cfg.mom.enabled_pre_ltfe = cfg.mom.enabled_pre_gta = False  # MoM has its own surrogate check
    block = WharNet(cfg, seed=int(rng.integers(0, 2**31)))
    return _module(block, _call, _arr(rng, (2, cfg.n_sensors, cfg.n_variables, cfg.seq_len)))


def _mom_case(rng, surrogate: bool) -> Maker:
    b, c, t = int(rng.integers(2, 5)), int(rng.integers(1, 4)), int(rng.integers(2, 6))
    x = _arr(rng, (b, c, t))
    lam = float(rng.uniform(0.0, 1.0))
    perm = rng.permutation(b)
    axis = int(rng.choice([1, 2]))
    mu, sigma = sample_moments(x, axis, 1e-6)

    def make(dtype) -> Case:
        (xt,) = _leaves([x], dtype)
        if not surrogate:
            return Case(lambda: morph(xt, lam, perm, axis), [xt])
        # moments frozen at the base point: the function whose gradient morph claims to return
        mu_mix = lam * mu + (1 - lam) * mu[perm]
        sigma_mix = lam * sigma + (1 - lam) * sigma[perm]
        return Case(lambda: (xt - Tensor(mu, dtype=dtype)) * Tensor(sigma_mix / sigma, dtype=dtype) + Tensor(mu_mix, dtype=dtype), [xt])

    return make


REGISTRY["mom"] = Check("mom", "block", lambda rng: _mom_case(rng, False), lambda rng: _mom_case(rng, True))


# -- runner ------------------------------------------------------------------------

def _project(case: Case, weights: np.ndarray) -> float:
    return float(np.sum(case.forward().data.astype(np.float64) * weights))


def _analytic(case: Case, weights: np.ndarray) -> list[np.ndarray]:
    for leaf in case.leaves:
        leaf.grad = None
    out = case.forward()
    out.backward(weights.astype(out.dtype))
    return [np.zeros(l.shape) if l.grad is None else l.grad.astype(np.float64) for l in case.leaves]


def _numeric(case: Case, weights: np.ndarray, coords: list[np.ndarray]) -> list[np.ndarray]:
    grads = []
    for leaf, idx in zip(case.leaves, coords):
        flat = leaf.data.reshape(-1)
        g = np.zeros(idx.size)
        for j, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + STEP
            up = _project(case, weights)
            flat[i] = old - STEP
            down = _project(case, weights)
            flat[i] = old
            g[j] = (up - down) / (2 * STEP)
        grads.append(g)
    return grads


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-6)
    return float(np.linalg.norm(analytic - numeric) / scale)


@dataclass
class CheckResult:
    name: str
    kind: str
    trials: int
    max_err32: float
    max_err64: float
    error: Optional[str] = None

    @property
    def passed(self) -> bool:
        return self.error is None and self.max_err32 <= TOL32 and self.max_err64 <= TOL64


@dataclass
class GradcheckReport:
    results: list[CheckResult] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def failures(self) -> list[CheckResult]:
        return [r for r in self.results if not r.passed]

    def format(self, timing: bool = True) -> str:
        lines = [f"{'check':<18} {'kind':<6} {'trials':>6} {'max_err_f32':>12} {'max_err_f64':>12}  status"]
        for r in self.results:
            status = "ok" if r.passed else "FAIL"
            if r.error:
                status += f" ({r.error})"
            lines.append(f"{r.name:<18} {r.kind:<6} {r.trials:>6} {r.max_err32:>12.3e} {r.max_err64:>12.3e}  {status}")
        summary = f"{len(self.results) - len(self.failures)}/{len(self.results)} checks passed"
        summary += f" (tolerance f32 {TOL32:g}, f64 {TOL64:g})"
        if timing:
            summary += f" in {self.seconds:.1f}s"
        lines.append(summary)
        return "\n".join(lines)


def run_check(check: Check, trials: int = 20, seed: int = 0) -> CheckResult:
    err32 = err64 = 0.0
    root = np.random.SeedSequence([seed, sum(map(ord, check.name))])
    for child in root.spawn(trials):
        problem, projection = child.spawn(2)
        rng = np.random.default_rng(projection)
        try:
            # analytic case and oracle are drawn from the same stream, hence the same problem
            make = check.build(np.random.default_rng(problem))
            oracle = (check.numeric or check.build)(np.random.default_rng(problem))
        except Exception as exc:  # a broken builder is a failed check, not a crashed suite
            return CheckResult(check.name, check.kind, trials, np.inf, np.inf, f"{type(exc).__name__}: {exc}")
        try:
            base = oracle(np.float64)
            out_shape = base.forward().shape
            weights = rng.standard_normal(out_shape)
            coords = [
                np.sort(rng.choice(l.size, size=min(l.size, MAX_COORDS), replace=False)) for l in base.leaves
            ]
            numeric = np.concatenate(_numeric(base, weights, coords))
            for dtype in (np.float32, np.float64):
                grads = _analytic(make(dtype), weights)
                analytic = np.concatenate([g.reshape(-1)[c] for g, c in zip(grads, coords)])
                err = relative_error(analytic, numeric)
                if not np.isfinite(err):
                    err = np.inf
                if dtype is np.float32:
                    err32 = max(err32, err)
                else:
                    err64 = max(err64, err)
        except Exception as exc:
            return CheckResult(check.name, check.kind, trials, np.inf, np.inf, f"{type(exc).__name__}: {exc}")
    return CheckResult(check.name, check.kind, trials, err32, err64)


def run_gradcheck(names: Optional[Sequence[str]] = None, trials: int = 20, seed: int = 0) -> GradcheckReport:
    if trials < 1:
        raise ValueError("trials must be >= 1")
    selected = list(REGISTRY) if names is None else list(names)
    unknown = [n for n in selected if n not in REGISTRY]
    if unknown:
        raise KeyError(f"unknown gradient checks: {', '.join(unknown)}")
    t0 = time.perf_counter()
    report = GradcheckReport([run_check(REGISTRY[n], trials, seed) for n in selected])
    report.seconds = time.perf_counter() - t0
    return report
