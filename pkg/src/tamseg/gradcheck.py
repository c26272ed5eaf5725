"""Finite-difference verification of the autodiff engine.

Every differentiable operation is checked by comparing its reverse-mode
gradients against central differences on a float64 copy of the computation.
The check suites here back both the test suite and the ``gradcheck`` CLI
command; keep them cheap enough to run on every change.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor, backward

STEP = 1e-5
TOLERANCE = 1e-4


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def relative_error(analytic: np.ndarray, numeric: np.ndarray,
                   abs_floor: float = 0.0) -> float:
    """Max elementwise |a - n| / (|a| + |n| + 1e-8).

    Coordinates where both values sit below ``abs_floor`` count as exact
    agreement: a mathematically zero derivative leaves only rounding residue
    on both routes, and a relative comparison of two noise values is
    meaningless. A wrong analytic zero still fails, because the numeric side
    would show the true magnitude.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if not a.size:
        return 0.0
    err = np.abs(a - n) / (np.abs(a) + np.abs(n) + 1e-8)
    if abs_floor > 0.0:
        err = np.where((np.abs(a) < abs_floor) & (np.abs(n) < abs_floor),
                       0.0, err)
    return float(np.max(err))


def check_gradients(build_loss, tensors: dict[str, Tensor], *, step: float = STEP,
                    reset=None, sample: int | None = None,
                    rng: np.random.Generator | None = None,
                    abs_floor: float = 0.0) -> float:
    """Compare reverse-mode grads of the scalar ``build_loss()`` to central differences.

    ``build_loss`` must recompute the loss from the tensors' current ``data``
    and be free of randomness; ``reset`` (if given) runs before every
    evaluation to restore any state the forward pass mutates, e.g. batch-norm
    running statistics. ``sample`` limits the check to that many randomly
    chosen coordinates per tensor. Returns the worst relative error.
    """
    for t in tensors.values():
        t.grad = None
    if reset is not None:
        reset()
    backward(build_loss())

    def evaluate() -> float:
        if reset is not None:
            reset()
        return build_loss().item()

    worst = 0.0
    for name, t in tensors.items():
        if t.dtype != np.float64:
            raise ValueError(f"gradcheck requires float64 inputs; {name} is {t.dtype}")
        analytic = (t.grad.data if t.grad is not None
                    else np.zeros(t.shape, dtype=np.float64))
        flat = t.data.reshape(-1)
        if sample is not None and sample < flat.size:
            if rng is None:
                raise ValueError("sampled gradcheck needs an rng")
            coords = rng.choice(flat.size, size=sample, replace=False)
        else:
            coords = np.arange(flat.size)
        numeric = np.empty(coords.size, dtype=np.float64)
        for out_idx, i in enumerate(coords):
            saved = flat[i]
            flat[i] = saved + step
            plus = evaluate()
            flat[i] = saved - step
            minus = evaluate()
            flat[i] = saved
            numeric[out_idx] = (plus - minus) / (2.0 * step)
        worst = max(worst, relative_error(analytic.reshape(-1)[coords], numeric,
                                          abs_floor=abs_floor))
    return worst


def _rand(rng, shape, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


def _away_from(rng, shape, points, margin=0.05, lo=-1.0, hi=1.0):
    """Uniform sample avoiding ``margin`` neighborhoods of kink ``points``."""
    data = rng.uniform(lo, hi, size=shape)
    for p in points:
        near = np.abs(data - p) < margin
        data = np.where(near, data + 2 * margin * np.sign(data - p + 1e-12), data)
    return Tensor(data, requires_grad=True)


def _op_cases(rng: np.random.Generator):
    """Yield (name, tensors, build_loss) triples covering every differentiable op.

    Each case's loss is a fixed random projection of the op output, drawn
    once at case-construction time so repeated evaluations see the same
    function (central differences require that).
    """
    cases = []
    w_rng = np.random.default_rng(rng.integers(2 ** 31))

    def case(name, tensors, fn):
        cases.append((name, tensors, fn))

    def proj(shape):
        w = Tensor(w_rng.uniform(-1.0, 1.0, size=shape))
        return lambda out: T.tsum(out * w)

    a = _rand(rng, (3, 4))
    b = _rand(rng, (3, 4))
    p34 = proj((3, 4))
    case("add", {"a": a, "b": b}, lambda: p34(a + b))
    case("sub", {"a": a, "b": b}, lambda: p34(a - b))
    case("mul", {"a": a, "b": b}, lambda: p34(a * b))
    bd = _away_from(rng, (3, 4), [0.0], margin=0.3)
    case("div", {"a": a, "b": bd}, lambda: p34(a / bd))
    case("recip", {"b": bd}, lambda: p34(T.recip(bd)))
    case("neg", {"a": a}, lambda: p34(T.neg(a)))
    case("scale", {"a": a}, lambda: p34(T.scale(a, -1.7)))
    case("shift", {"a": a}, lambda: p34(T.shift(a, 0.4)))
    case("add_scalar", {"a": a}, lambda: p34(a + 2.5))
    case("rsub_scalar", {"a": a}, lambda: p34(1.0 - a))

    p45 = proj((4, 5))
    r = _away_from(rng, (4, 5), [0.0])
    case("relu", {"x": r}, lambda: p45(T.relu(r)))
    s = _rand(rng, (4, 5), -3.0, 3.0)
    case("sigmoid", {"x": s}, lambda: p45(T.sigmoid(s)))
    p = _rand(rng, (4, 5), 0.2, 3.0)
    case("log", {"x": p}, lambda: p45(T.log(p)))
    c = _away_from(rng, (4, 5), [-0.5, 0.5], margin=0.05)
    case("clip", {"x": c}, lambda: p45(T.clip(c, -0.5, 0.5)))

    m = _rand(rng, (2, 3, 4))
    p24 = proj((2, 4))
    p3 = proj((3, 4))
    case("sum_all", {"x": m}, lambda: T.tsum(m))
    case("sum_axis", {"x": m}, lambda: p24(T.tsum(m, axis=1)))
    case("mean_all", {"x": m}, lambda: T.mean(m))
    case("mean_axis", {"x": m}, lambda: p3(T.mean(m, axis=0)))

    p64 = proj((6, 4))
    p423 = proj((4, 2, 3))
    case("reshape", {"x": m}, lambda: p64(T.reshape(m, (6, 4))))
    case("transpose", {"x": m}, lambda: p423(T.transpose(m, (2, 0, 1))))
    c1 = _rand(rng, (2, 3))
    c2 = _rand(rng, (4, 3))
    p63 = proj((6, 3))
    case("concat", {"a": c1, "b": c2}, lambda: p63(T.concat([c1, c2], axis=0)))
    p224 = proj((2, 2, 4))
    case("slice", {"x": m}, lambda: p224(T.slice_axis(m, 1, 1, 3)))

    ma = _rand(rng, (3, 5))
    mb = _rand(rng, (5, 2))
    p32 = proj((3, 2))
    case("matmul", {"a": ma, "b": mb}, lambda: p32(T.matmul(ma, mb)))
    sm = _rand(rng, (4, 6), -2.0, 2.0)
    p46 = proj((4, 6))
    case("softmax", {"x": sm}, lambda: p46(T.softmax(sm, axis=1)))

    x2 = _rand(rng, (2, 6, 6))
    k2 = _rand(rng, (3, 2, 3, 3), -0.5, 0.5)
    kb = _rand(rng, (3,), -0.5, 0.5)
    ps = proj((3, 6, 6))
    pv = proj((3, 4, 4))
    pst = proj((3, 3, 3))
    case("conv2d_same", {"x": x2, "k": k2, "b": kb},
         lambda: ps(T.conv_nd(x2, k2, kb, padding="same")))
    case("conv2d_valid", {"x": x2, "k": k2},
         lambda: pv(T.conv_nd(x2, k2, padding="valid")))
    case("conv2d_stride2", {"x": x2, "k": k2},
         lambda: pst(T.conv_nd(x2, k2, stride=2, padding="same")))
    x3 = _rand(rng, (2, 4, 4, 4))
    k3 = _rand(rng, (2, 2, 3, 3, 3), -0.3, 0.3)
    p3d = proj((2, 4, 4, 4))
    case("conv3d_same", {"x": x3, "k": k3},
         lambda: p3d(T.conv_nd(x3, k3, padding="same")))

    mp = Tensor(rng.permutation(np.linspace(-1.0, 1.0, 32)).reshape(2, 4, 4),
                requires_grad=True)
    pp2 = proj((2, 2, 2))
    case("max_pool2d", {"x": mp}, lambda: pp2(T.max_pool(mp, 2)))
    mp3 = Tensor(rng.permutation(np.linspace(-1.0, 1.0, 128)).reshape(2, 4, 4, 4),
                 requires_grad=True)
    pp3 = proj((2, 2, 2, 2))
    case("max_pool3d", {"x": mp3}, lambda: pp3(T.max_pool(mp3, 2)))
    pu2 = proj((2, 8, 8))
    pu3 = proj((2, 8, 8, 8))
    case("upsample2d", {"x": mp}, lambda: pu2(T.upsample_nearest(mp, 2)))
    case("upsample3d", {"x": mp3}, lambda: pu3(T.upsample_nearest(mp3, 2)))

    bx = _rand(rng, (3, 4, 4))
    gamma = _rand(rng, (3,), 0.5, 1.5)
    beta = _rand(rng, (3,), -0.5, 0.5)
    pbn = proj((3, 4, 4))

    def bn_train():
        state = T.BatchNormState(3, dtype=np.float64)
        return pbn(T.batch_norm(bx, gamma, beta, state, training=True))

    case("batch_norm_train", {"x": bx, "gamma": gamma, "beta": beta}, bn_train)

    eval_state = T.BatchNormState(3, dtype=np.float64)
    eval_state.running_mean = rng.uniform(-0.5, 0.5, size=3)
    eval_state.running_var = rng.uniform(0.5, 1.5, size=3)
    case("batch_norm_eval", {"x": bx, "gamma": gamma, "beta": beta},
         lambda: pbn(T.batch_norm(bx, gamma, beta, eval_state, training=False)))
    return cases


def run_op_suite(seeds=range(20), step: float = STEP,
                 tolerance: float = TOLERANCE) -> list[GradCheckResult]:
    """Check every engine op against central differences across ``seeds``."""
    worst: dict[str, float] = {}
    for seed in seeds:
        rng = np.random.default_rng(seed)
        for name, tensors, fn in _op_cases(rng):
            err = check_gradients(fn, tensors, step=step)
            worst[name] = max(worst.get(name, 0.0), err)
    return [GradCheckResult(name, err, tolerance) for name, err in worst.items()]


def run_tam_suite(seeds=range(3), step: float = STEP,
                  tolerance: float = TOLERANCE) -> list[GradCheckResult]:
    """Full-coordinate check of the attention module end to end.

    A T=2 stack of 4x4 frames with 8 channels keeps the Jacobian small
    enough to probe every parameter and input coordinate.
    """
    from .attention import FeatureStack, TamConfig, TamParams, tam_forward

    results = []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        cfg = TamConfig(channels=8, d_embed=8, heads=2, spatial_rank=2)
        params = TamParams.initialize(cfg, rng, dtype=np.float64)
        frames = [_rand(rng, (8, 4, 4)) for _ in range(2)]
        weights = [Tensor(rng.uniform(-1.0, 1.0, size=(8, 4, 4))) for _ in range(2)]
        saved_state = params.bn_state.copy()

        def reset():
            params.bn_state.running_mean[:] = saved_state.running_mean
            params.bn_state.running_var[:] = saved_state.running_var

        def build_loss():
            out = tam_forward(FeatureStack(frames=list(frames)), params,
                              training=True)
            total = None
            for f, w in zip(out.frames, weights):
                term = T.tsum(f * w)
                total = term if total is None else total + term
            return total

        tensors = {f"frame_{i}": f for i, f in enumerate(frames)}
        tensors.update(params.named_tensors())
        # the key bias shifts all logits of a query row equally, and softmax
        # cancels per-row shifts, so its true gradient is identically zero;
        # the floor keeps that exact zero from failing a relative comparison
        err = check_gradients(build_loss, tensors, step=step, reset=reset,
                              abs_floor=1e-7)
        results.append(GradCheckResult(f"tam_seed{seed}", err, tolerance))
    return results


def run_end2end_suite(seeds=range(2), step: float = STEP,
                      tolerance: float = TOLERANCE,
                      sample: int = 4) -> list[GradCheckResult]:
    """Sampled-coordinate check through a small backbone plus loss."""
    from .losses import dice_ce_loss, one_hot
    from .unet import BackboneConfig, UNetBackbone

    results = []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        cfg = BackboneConfig(spatial_rank=2, levels=3, channels=(4, 8, 16),
                             classes=3, in_channels=1,
                             insertion_set=frozenset({"E3"}), heads=2)
        model = UNetBackbone(cfg, rng, dtype=np.float64)
        frames = [_rand(rng, (1, 8, 8), -0.5, 0.5) for _ in range(2)]
        labels = rng.integers(0, 3, size=(8, 8))
        truth = one_hot(labels, 3, dtype=np.float64)
        saved = model.state_arrays()

        def reset():
            model.load_state_arrays(saved)

        def build_loss():
            probs = model.forward(frames, training=True)
            return dice_ce_loss(probs[0], truth)

        tensors = dict(model.named_parameters())
        tensors.update({f"frame_{i}": f for i, f in enumerate(frames)})
        coord_rng = np.random.default_rng(seed + 1000)
        err = check_gradients(build_loss, tensors, step=step, reset=reset,
                              sample=sample, rng=coord_rng, abs_floor=1e-7)
        results.append(GradCheckResult(f"end2end_seed{seed}", err, tolerance))
    return results


SUITES = {"ops": run_op_suite, "tam": run_tam_suite, "end2end": run_end2end_suite}


def run_suite(scope: str, **kwargs) -> list[GradCheckResult]:
    if scope not in SUITES:
        raise ValueError(f"unknown gradcheck scope {scope!r}; "
                         f"choose from {sorted(SUITES)}")
    return SUITES[scope](**kwargs)
