"""Central finite-difference checks of the analytic gradients.

Everything runs in float64. The reported error for one case is
``max|analytic - numeric| / max(max|analytic|, max|numeric|)`` over all
checked elements, i.e. the worst deviation relative to the gradient scale.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import functional as F
from .blocks import SPPM, UAFM, AttentionKind, SegHead, channel_attention, spatial_attention
from .losses import OhemConfig, ohem_cross_entropy
from .nn import Conv2d, Module
from .tensor import Tensor, no_grad

STEP = 1e-3
MIN_STEP = 1e-7
TOLERANCE = 1e-3


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    checked: int
    seconds: float
    tolerance: float = TOLERANCE
    refined: int = 0  # elements whose stencil had to shrink to avoid a kink
    skipped: int = 0  # elements sitting on a kink at every step

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error) and self.max_rel_error < self.tolerance)


def numerical_gradient(f: Callable[[], float], arr: np.ndarray, h: float = STEP, stats: Optional[dict] = None) -> np.ndarray:
    """Central differences of scalar ``f()`` with respect to ``arr`` (perturbed in place).

    Piecewise kernels log their branch pattern while ``f`` runs. When the
    pattern at ``x +/- h`` differs from the one at ``x`` the stencil straddles
    a kink, so the step is divided by 10 until it fits inside one smooth
    piece (down to ``MIN_STEP``). Elements that never fit are left at NaN.
    """
    def evaluate():
        with F.record_branches() as log:
            value = f()
        return value, log

    _, base = evaluate()
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        step = h
        gflat[i] = np.nan
        while step >= MIN_STEP:
            flat[i] = orig + step
            fp, bp = evaluate()
            flat[i] = orig - step
            fm, bm = evaluate()
            flat[i] = orig
            if bp == base and bm == base:
                gflat[i] = (fp - fm) / (2 * step)
                break
            step /= 10
        if stats is not None and step != h:
            stats["refined" if step >= MIN_STEP else "skipped"] += 1
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    keep = np.isfinite(numeric)
    analytic, numeric = analytic[keep], numeric[keep]
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    if scale == 0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)


def check_gradients(
    name: str,
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    module: Optional[Module] = None,
    seed: int = 0,
    h: float = STEP,
    tolerance: float = TOLERANCE,
) -> GradCheckResult:
    """Compare backprop against finite differences for ``fn(*inputs)``.

    Non-scalar outputs are reduced with a fixed random projection. If
    ``module`` is given its parameters are cast to float64 and checked too.
    """
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    if module is not None:
        module.astype(np.float64)
    tensors = [Tensor(np.array(a, dtype=np.float64), requires_grad=True, dtype=np.float64) for a in inputs]
    params = module.parameters() if module is not None else []

    out = fn(*tensors)
    proj = rng.standard_normal(out.shape)

    def loss_value() -> float:
        with no_grad():
            return float((fn(*tensors).data * proj).sum())

    for t in tensors + params:
        t.grad = None
    F.sum(F.mul(out, Tensor(proj, dtype=np.float64))).backward()

    worst, count = 0.0, 0
    stats = {"refined": 0, "skipped": 0}
    for t in tensors + params:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = numerical_gradient(loss_value, t.data, h, stats)
        worst = max(worst, relative_error(analytic, numeric))
        count += t.size
    return GradCheckResult(name, worst, count, time.perf_counter() - start, tolerance,
                           stats["refined"], stats["skipped"])


# ---------------------------------------------------------------------------
# the suite
# ---------------------------------------------------------------------------

def _u(rng, *shape):
    return rng.uniform(-2, 2, size=shape)


def _away_from_zero(x, margin=0.05):
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin * 2, x)


def _cases(rng: np.random.Generator) -> Dict[str, Callable[[], GradCheckResult]]:
    c: Dict[str, Callable[[], GradCheckResult]] = {}

    def case(name, fn, inputs, module=None):
        c[name] = lambda seed=len(c): check_gradients(name, fn, inputs, module, seed=seed)

    x = _u(rng, 2, 4, 6, 6)
    case("add", lambda a, b: F.add(a, b), [x, _u(rng, 2, 1, 6, 6)])
    case("sub", lambda a, b: F.sub(a, b), [x, _u(rng, 2, 4, 1, 1)])
    case("mul/spatial-broadcast", lambda a, b: F.mul(a, b), [x, _u(rng, 2, 1, 6, 6)])
    case("mul/channel-broadcast", lambda a, b: F.mul(a, b), [x, _u(rng, 2, 4, 1, 1)])
    case("mul/scalar", lambda a: F.mul(a, 0.75), [x])
    case("sum", lambda a: F.sum(a), [x])
    case("mean", lambda a: F.mean(a), [x])
    case("concat", lambda a, b, d: F.concat([a, b, d], axis=1),
         [_u(rng, 2, 1, 4, 4), _u(rng, 2, 2, 4, 4), _u(rng, 2, 1, 4, 4)])
    case("relu", F.relu, [_away_from_zero(x)])
    case("sigmoid", F.sigmoid, [x])
    case("conv2d/3x3-pad1", lambda a, w: F.conv2d(a, w, None, 1, 1), [_u(rng, 2, 3, 6, 6), _u(rng, 4, 3, 3, 3)])
    case("conv2d/3x3-stride2-bias", lambda a, w, b: F.conv2d(a, w, b, 2, 1),
         [_u(rng, 2, 3, 8, 8), _u(rng, 4, 3, 3, 3), _u(rng, 4)])
    case("conv2d/1x1", lambda a, w: F.conv2d(a, w), [_u(rng, 2, 4, 5, 5), _u(rng, 3, 4, 1, 1)])

    def bn(training):
        def f(a, g, b):
            rm, rv = np.zeros(4), np.full(4, 1.5)
            return F.batch_norm(a, g, b, rm, rv, training)
        return f

    case("batch_norm/train", bn(True), [x, _u(rng, 4), _u(rng, 4)])
    case("batch_norm/eval", bn(False), [x, _u(rng, 4), _u(rng, 4)])
    case("bilinear_upsample/x2", lambda a: F.bilinear_upsample(a, 8, 8), [_u(rng, 2, 4, 4, 4)])
    case("bilinear_upsample/odd", lambda a: F.bilinear_upsample(a, 8, 7), [_u(rng, 2, 3, 3, 5)])
    case("adaptive_avg_pool/2x2", lambda a: F.adaptive_avg_pool(a, 2, 2), [x])
    case("adaptive_avg_pool/4x4-uneven", lambda a: F.adaptive_avg_pool(a, 4, 4), [x])
    case("channel_mean", F.channel_mean, [x])
    case("channel_max", F.channel_max, [x])
    case("spatial_avg", F.spatial_avg, [x])
    case("spatial_max", F.spatial_max, [x])
    case("blend/spatial-alpha", lambda a, b, al: F.blend(a, b, al),
         [x, _u(rng, 2, 4, 6, 6), rng.uniform(0, 1, (2, 1, 6, 6))])

    # composite blocks
    f_up, f_low = _u(rng, 2, 4, 8, 8), _u(rng, 2, 4, 8, 8)
    sconv = Conv2d(4, 1, 3, padding=1, bias=True, rng=rng)
    case("spatial_attention", lambda a, b: spatial_attention(a, b, sconv), [f_up, f_low], sconv)
    nconv = Conv2d(2, 1, 3, padding=1, bias=True, rng=rng)
    case("spatial_attention/no-max", lambda a, b: spatial_attention(a, b, nconv, use_max=False),
         [f_up, f_low], nconv)
    cconv = Conv2d(16, 4, 1, padding=0, bias=True, rng=rng)
    case("channel_attention", lambda a, b: channel_attention(a, b, cconv), [f_up, f_low], cconv)

    for kind in (AttentionKind.SPATIAL, AttentionKind.CHANNEL, AttentionKind.NONE):
        block = UAFM(4, 4, 4, kind, rng=rng)
        case(f"uafm_fuse/{kind.value}", block, [_u(rng, 2, 4, 4, 4), _u(rng, 2, 4, 8, 8)], block)
    proj = UAFM(4, 3, 2, AttentionKind.SPATIAL, rng=rng)
    case("uafm_fuse/projected", proj, [_u(rng, 2, 4, 4, 4), _u(rng, 1, 3, 8, 8).repeat(2, 0) + _u(rng, 2, 3, 8, 8)],
         proj)

    sppm = SPPM(4, 3, 3, rng=rng)
    case("sppm_forward", sppm, [_u(rng, 2, 4, 8, 8)], sppm)
    head = SegHead(4, 4, 3, rng=rng)
    case("seg_head", lambda a: head(a, 16, 16), [_u(rng, 2, 4, 8, 8)], head)

    labels = rng.integers(0, 5, size=(2, 8, 8))
    labels[0, :2] = 255
    case("ohem_cross_entropy/mining", lambda z: ohem_cross_entropy(z, labels, OhemConfig(0.7, 16)),
         [rng.normal(0, 1.5, (2, 5, 8, 8))])
    case("ohem_cross_entropy/min-kept", lambda z: ohem_cross_entropy(z, labels, OhemConfig(0.05, 40)),
         [rng.normal(0, 1.5, (2, 5, 8, 8))])
    return c


def run_suite(seed: int = 0, names: Optional[Sequence[str]] = None) -> List[GradCheckResult]:
    cases = _cases(np.random.default_rng(seed))
    selected = names if names is not None else list(cases)
    return [cases[n]() for n in selected]


def case_names() -> List[str]:
    return list(_cases(np.random.default_rng(0)))
