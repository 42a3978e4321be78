"""Central finite-difference checks of the analytic gradients, in float64,
on reduced-size instances of every module."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .. import ndcore as nd
from ..backbone import Backbone, BackboneConfig
from ..hfc import HFC, ResidualSE
from ..lgch import LGCH
from ..model import CGTrack, ModelConfig
from ..ndcore import NDArray
from ..objective import make_targets, stack_targets, total_loss

STEP = 1e-5
TOLERANCE = 1e-5
ROUNDOFF_ULPS = 100  # accumulated float64 error of one loss evaluation, in units of eps * |loss|
SCOPES = ("ndcore", "backbone", "hfc", "lgch", "objective")

# reduced backbone: 64/128 inputs, token grids 4/8
TINY_BACKBONE = BackboneConfig(stage_dims=(16, 24, 32), stage_depths=(1, 1, 1), stage_heads=(2, 2, 2),
                               template_size=64, search_size=128)


@dataclass(frozen=True)
class GradResult:
    scope: str
    name: str
    max_rel_err: float
    checked: int
    skipped: int = 0  # probes whose +-step interval crossed a breakpoint

    @property
    def passed(self) -> bool:
        return self.checked > 0 and self.max_rel_err < TOLERANCE


def _candidates(grad: np.ndarray, rng: np.random.Generator) -> list[int]:
    """Flat indices in probing order: the largest-gradient entry, then the
    entries whose gradient is not negligible relative to it, shuffled."""
    flat = np.abs(grad.reshape(-1))
    top = int(np.argmax(flat))
    pool = np.flatnonzero(flat >= 1e-3 * flat[top]) if flat[top] > 0 else np.arange(flat.size)
    return list(dict.fromkeys([top, *map(int, rng.permutation(pool))]))


def _same_pieces(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def _evaluate(loss_fn) -> tuple[float, list]:
    with nd.no_grad(), nd.record_pieces() as pieces:
        value = loss_fn().item()
    return value, pieces


def rel_error(exact: float, numeric: float, floor: float) -> float:
    """|exact - numeric| relative to the larger magnitude, which is floored
    at ``floor`` so that gradients below the finite-difference resolution
    are compared in absolute terms."""
    return abs(exact - numeric) / max(abs(exact), abs(numeric), floor)


def check_arrays(scope: str, loss_fn: Callable[[], NDArray], arrays: list[tuple[str, NDArray]],
                 rng: np.random.Generator, samples: int = 3, step: float = STEP,
                 max_probes: int = 24) -> list[GradResult]:
    """Compare backward() of ``loss_fn`` against central differences for
    ``samples`` entries of every array in ``arrays``.

    A central difference is only an oracle where the loss is smooth on
    [x - step, x + step]; entries whose perturbation moves any relu/clip/...
    input onto another linear piece are skipped and replaced."""
    for _, a in arrays:
        if a.dtype != np.float64:
            raise TypeError(f"gradient checks run in float64; {a.dtype} found")
        a.requires_grad = True
        a.grad = None
    nd.backward(loss_fn())
    base, base_pieces = _evaluate(loss_fn)
    # round-off bound of the difference quotient, expressed as a relative-error floor
    floor = ROUNDOFF_ULPS * np.finfo(np.float64).eps * max(abs(base), 1.0) / step / TOLERANCE
    results = []
    for name, a in arrays:
        analytic = a.grad if a.grad is not None else np.zeros_like(a.data)
        worst, checked, skipped = 0.0, 0, 0
        flat = a.data.reshape(-1)
        for i in _candidates(analytic, rng)[:max_probes]:
            if checked == samples:
                break
            orig = flat[i]
            flat[i] = orig + step
            up, up_pieces = _evaluate(loss_fn)
            flat[i] = orig - step
            down, down_pieces = _evaluate(loss_fn)
            flat[i] = orig
            if not (_same_pieces(up_pieces, base_pieces) and _same_pieces(down_pieces, base_pieces)):
                skipped += 1
                continue
            numeric = (up - down) / (2 * step)
            worst = max(worst, rel_error(float(analytic.reshape(-1)[i]), numeric, floor))
            checked += 1
        results.append(GradResult(scope, name, worst, checked, skipped))
    return results


def _probe(rng, out: NDArray) -> NDArray:
    return NDArray(rng.standard_normal(out.shape))


def _weighted_sum(outputs, probes) -> NDArray:
    total = None
    for o, p in zip(outputs, probes):
        term = (o * p).sum()
        total = term if total is None else total + term
    return total


def _condition(module, rng) -> None:
    """Redraw every parameter at a variance-preserving random point.

    Used for the backbone only: at the training init its width-changing
    attention stages scale their input down by ~1e-2 each, so deep gradients
    sit at round-off level and a relative-error check on them measures noise,
    not the derivative code. The other modules are checked at their init,
    where few relu6/hardswish inputs sit near a kink."""
    for name, p in module.named_parameters():
        if p.ndim >= 2:
            p.data[...] = rng.standard_normal(p.shape) / np.sqrt(np.prod(p.shape[1:]))
        elif name.endswith("weight"):  # normalization scale
            p.data[...] = 1 + 0.1 * rng.standard_normal(p.shape)
        else:
            p.data[...] = 0.1 * rng.standard_normal(p.shape)


def _module_check(scope, module, run, rng, samples):
    """Probe-weighted sum of ``run()`` outputs against all module params."""
    module.to(np.float64)
    outs = run()
    outs = outs if isinstance(outs, (tuple, list)) else (outs,)
    probes = [_probe(rng, o) for o in outs]

    def loss():
        o = run()
        return _weighted_sum(o if isinstance(o, (tuple, list)) else (o,), probes)

    return check_arrays(scope, loss, list(module.named_parameters()), rng, samples)


# ---------------------------------------------------------------------------
# scopes


def _ndcore(rng, samples):
    r = lambda *s: NDArray(rng.standard_normal(s))  # noqa: E731
    results = []

    def case(name, fn, **arrays):
        probe = _probe(rng, fn(**arrays))
        results.extend(check_arrays("ndcore", lambda: (fn(**arrays) * probe).sum(),
                                    [(f"{name}.{k}", v) for k, v in arrays.items()], rng, samples))

    case("linear", lambda x, w, b: nd.linear(x, w, b), x=r(4, 5), w=r(3, 5), b=r(3))
    case("matmul", nd.matmul, a=r(2, 3, 4), b=r(2, 4, 5))
    case("conv2d", lambda x, w, b: nd.conv2d(x, w, b, stride=2, padding=1), x=r(2, 3, 7, 7), w=r(4, 3, 3, 3), b=r(4))
    case("conv2d_1x1", lambda x, w, b: nd.conv2d(x, w, b), x=r(2, 3, 5, 5), w=r(4, 3, 1, 1), b=r(4))
    case("conv2d_grouped", lambda x, w: nd.conv2d(x, w, padding=1, groups=2), x=r(2, 4, 6, 6), w=r(6, 2, 3, 3))
    case("depthwise", lambda x, w, b: nd.depthwise_conv2d(x, w, b, padding=3), x=r(2, 3, 9, 9), w=r(3, 1, 7, 7),
         b=r(3))
    for training in (True, False):
        rm, rv = rng.standard_normal(4), rng.uniform(0.5, 2.0, 4)
        case(f"batch_norm_{'train' if training else 'eval'}",
             lambda x, g, b, t=training, rm=rm, rv=rv: nd.batch_norm(x, g, b, rm.copy(), rv.copy(), t),
             x=r(3, 4, 5, 5), g=r(4), b=r(4))
    case("hadamard", nd.hadamard, a=r(2, 3, 4, 4), b=r(2, 3, 4, 4))
    case("hadamard_channel", nd.hadamard, a=r(2, 3, 4, 4), b=r(2, 3))
    case("softmax", lambda x: nd.softmax(x, axis=-1), x=r(3, 6))
    for kind in ("relu", "relu6", "hardswish", "sigmoid"):
        case(kind, lambda x, k=kind: nd.activation(x, k), x=NDArray(rng.uniform(-8, 8, (4, 7))))
    case("global_avg_pool", nd.global_avg_pool, x=r(2, 3, 4, 5))
    case("upsample_nearest2x", nd.upsample_nearest2x, x=r(2, 3, 3, 3))
    case("concat_channels", nd.concat_channels, a=r(2, 3, 4, 4), b=r(2, 2, 4, 4))
    case("getitem", lambda x: x[np.array([0, 1, 1]), :, np.array([2, 0, 2])], x=r(2, 3, 4))
    case("transpose_reshape", lambda x: nd.reshape(nd.transpose(x, (1, 0, 2)), (3, 8)), x=r(2, 3, 4))
    case("mean", lambda x: nd.mean(x, axis=1, keepdims=True), x=r(3, 4))
    case("exp_log", lambda x: nd.log(nd.exp(x) + 1.0), x=r(3, 4))
    case("div_power", lambda a, b: nd.power(nd.div(a, b), 3.0), a=r(3, 4), b=NDArray(rng.uniform(1, 2, (3, 4))))
    case("min_max_clip_abs",
         lambda a, b: nd.abs(nd.clip(nd.maximum(a, b) - nd.minimum(a, b) * 0.5, -1.5, 1.5)), a=r(3, 4), b=r(3, 4))
    return results


def _tiny_inputs(rng, cfg: BackboneConfig, n: int = 2):
    z = NDArray(rng.standard_normal((n, 3, cfg.template_size, cfg.template_size)))
    x = NDArray(rng.standard_normal((n, 3, cfg.search_size, cfg.search_size)))
    return z, x


def _backbone(rng, samples):
    bb = Backbone(TINY_BACKBONE, rng=rng)
    _condition(bb, rng)
    z, x = _tiny_inputs(rng, TINY_BACKBONE)
    return _module_check("backbone", bb, lambda: bb(z, x).maps(), rng, samples)


def _hfc(rng, samples):
    dims = TINY_BACKBONE.stage_dims
    hfc = HFC(dims, reduction=8, rng=rng)
    from ..backbone import CorrelationPyramid
    pyr = CorrelationPyramid(NDArray(rng.standard_normal((2, dims[0], 8, 8))),
                             NDArray(rng.standard_normal((2, dims[1], 4, 4))),
                             NDArray(rng.standard_normal((2, dims[2], 2, 2))))
    results = _module_check("hfc", hfc, lambda: hfc(pyr), rng, samples)
    se = ResidualSE(16, reduction=4, rng=rng)
    x = NDArray(rng.standard_normal((2, 16, 3, 3)))
    return results + [replace(r, name=f"residual_se.{r.name}")
                      for r in _module_check("hfc", se, lambda: se(x), rng, samples)]


def _lgch(rng, samples):
    head = LGCH(24, width=8, ratio=2, blocks=4, rng=rng)
    fused = NDArray(rng.standard_normal((2, 24, 8, 8)))
    return _module_check("lgch", head, lambda: (lambda o: (o.score, o.offset, o.size))(head(fused)), rng, samples)


def _objective(rng, samples):
    cfg = ModelConfig(TINY_BACKBONE, se_reduction=8, head_width=8, eg_ratio=2, eg_blocks=2)
    model = CGTrack(cfg, seed=int(rng.integers(2 ** 31))).to(np.float64)
    _condition(model.backbone, rng)
    z, x = _tiny_inputs(rng, TINY_BACKBONE)
    grid = TINY_BACKBONE.search_grid
    targets = stack_targets([make_targets((0.43, 0.58, 0.3, 0.22), grid), make_targets((0.61, 0.37, 0.2, 0.35), grid)])
    return check_arrays("objective", lambda: total_loss(model(z, x), targets)[0],
                        list(model.named_parameters()), rng, samples)


_RUNNERS = {"ndcore": _ndcore, "backbone": _backbone, "hfc": _hfc, "lgch": _lgch, "objective": _objective}


def run_scope(scope: str, seed: int = 0, samples: int = 3) -> list[GradResult]:
    if scope not in _RUNNERS:
        raise ValueError(f"unknown gradcheck scope {scope!r}; expected one of {', '.join(SCOPES)} or all")
    return _RUNNERS[scope](np.random.default_rng(seed), samples)


def run(scope: str = "all", seed: int = 0, samples: int = 3) -> list[GradResult]:
    scopes = SCOPES if scope == "all" else (scope,)
    return [r for s in scopes for r in run_scope(s, seed, samples)]
