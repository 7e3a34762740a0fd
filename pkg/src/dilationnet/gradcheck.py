"""Central finite-difference verification of every backward pass.

Each target builds a small randomized instance of one op, a whole
multi-dilation block, or a full net, in float64 so the difference quotients
are clean, then compares the recorded analytic gradients entry by entry.
Error is |analytic - numeric| / max(|analytic|, |numeric|, 1e-6), worst case
over the checked entries.

Entries that disagree at the first step size are re-probed at smaller ones.
In a deep relu graph a random instance occasionally parks some pre-activation
within eps of its kink, and the central difference then straddles two linear
pieces; shrinking eps moves the probe off the kink, while a genuinely wrong
backward pass stays wrong at every step size. Only the latter should fail the
check.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import ops
from .networks import MultiDilationBlockSpec, build_dilation_net, multi_dilation_block_forward
from .tensor import ComputationRecord, Tensor, backward, record_op
from .training import bce_l2_loss

FloatArray = np.ndarray

# builder(rng) -> (tensors to differentiate, closure re-running the forward)
CaseBuilder = Callable[[np.random.Generator], tuple[list[Tensor], Callable[[], Tensor]]]


@dataclass(frozen=True)
class CheckResult:
    target: str
    scope: str
    seeds: int
    worst: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.worst < self.tolerance


def _project(t: Tensor, proj: FloatArray) -> Tensor:
    """Fixed random scalarization so one backward covers every output entry."""
    out = Tensor(np.array([np.sum(t.data * proj)]), dtype=t.data.dtype)
    record_op("project", [t], out,
              lambda g: [g.reshape(-1)[0] * proj.astype(t.data.dtype)])
    return out


def grad_check(case: CaseBuilder, seed: int = 0, eps: float = 1e-5,
               max_entries: int | None = None) -> float:
    """Worst relative error between recorded and central-difference gradients."""
    rng = np.random.default_rng(np.random.SeedSequence([0x6FD, seed]))
    tensors, forward = case(rng)
    with ComputationRecord() as rec:
        out = forward()
        proj = rng.normal(size=out.shape)
        loss = _project(out, proj)
    grads = backward(loss, rec, targets=tensors)

    def rerun() -> float:
        return float(np.sum(forward().data * proj))

    def probe(flat: FloatArray, i: int, step: float) -> float:
        keep = flat[i]
        flat[i] = keep + step
        hi = rerun()
        flat[i] = keep - step
        lo = rerun()
        flat[i] = keep
        return (hi - lo) / (2.0 * step)

    def rel_err(a: float, n: float) -> float:
        return abs(a - n) / max(abs(a), abs(n), 1e-6)

    worst = 0.0
    for t in tensors:
        analytic = grads[t].reshape(-1)
        flat = t.data.reshape(-1)
        if max_entries is not None and flat.size > max_entries:
            picks = rng.choice(flat.size, size=max_entries, replace=False)
        else:
            picks = np.arange(flat.size)
        for i in picks:
            err = rel_err(analytic[i], probe(flat, i, eps))
            if err > 1e-5:
                # kink suspect: honest disagreement survives smaller steps
                for shrink in (16.0, 256.0):
                    err = min(err, rel_err(analytic[i],
                                           probe(flat, i, eps / shrink)))
                    if err <= 1e-5:
                        break
            worst = max(worst, err)
    return worst


# -- case builders ------------------------------------------------------------

def _t(rng: np.random.Generator, *shape: int) -> Tensor:
    return Tensor(rng.normal(size=shape), dtype=np.float64)


def _t_off_zero(rng: np.random.Generator, *shape: int, margin: float = 0.05) -> Tensor:
    """Samples nudged away from zero, keeping finite differences off the
    relu kink."""
    a = rng.normal(size=shape)
    a = np.where(np.abs(a) < margin, a + np.sign(a + 1e-12) * 2 * margin, a)
    return Tensor(a, dtype=np.float64)


def _dense_case(rng):
    x, w, b = _t(rng, 3, 5), _t(rng, 5, 4), _t(rng, 4)
    return [x, w, b], lambda: ops.dense(x, w, b)


def _conv_case(spec: ops.ConvSpec, h: int, w: int):
    def build(rng):
        x = _t(rng, 2, h, w, spec.in_channels)
        weight = Tensor(rng.normal(size=spec.weight_shape) * 0.5,
                        dtype=np.float64)
        bias = _t(rng, spec.out_channels)
        return [x, weight, bias], lambda: ops.conv2d(x, weight, bias, spec)
    return build


def _relu_case(rng):
    x = _t_off_zero(rng, 2, 4, 4, 3)
    return [x], lambda: ops.relu(x)


def _sigmoid_case(rng):
    x = _t(rng, 6, 3)
    return [x], lambda: ops.sigmoid(x)


def _add_n_case(rng):
    xs = [_t(rng, 2, 5, 5, 3) for _ in range(4)]
    return list(xs), lambda: ops.add_n(xs)


def _pool_case(rng):
    x = _t(rng, 3, 6, 6, 4)
    return [x], lambda: ops.global_avg_pool(x)


def _concat_case(rng):
    xs = [_t(rng, 3, k) for k in (2, 5, 3)]
    return list(xs), lambda: ops.concat(xs, axis=1)


def _bn_case(training: bool):
    def build(rng):
        c = 4
        x = _t(rng, 3, 5, 5, c)
        gamma = Tensor(rng.uniform(0.5, 1.5, c), dtype=np.float64)
        beta = _t(rng, c)
        state = ops.BatchNormState(c)
        state.running_mean = rng.normal(size=c).astype(np.float32)
        state.running_var = rng.uniform(0.5, 2.0, c).astype(np.float32)
        return ([x, gamma, beta],
                lambda: ops.batch_norm(x, gamma, beta, state, training))
    return build


def _loss_case(rng):
    pred = Tensor(rng.uniform(0.05, 0.95, (6, 1)), dtype=np.float64)
    label = rng.integers(0, 2, 6).astype(np.float64)
    weights = [_t(rng, 4, 3), _t(rng, 7)]
    return ([pred, *weights],
            lambda: bce_l2_loss(pred, label, weights, lam=0.37))


def _block_case(max_dilation: int):
    def build(rng):
        block = MultiDilationBlockSpec("blk", 4, 8, max_dilation)
        x = _t_off_zero(rng, 2, 16, 16, 4)
        params: dict[str, Tensor] = {}
        states: dict[str, ops.BatchNormState] = {}
        for unit in block.units():
            spec = unit.spec
            params[f"{unit.name}.weight"] = Tensor(
                rng.normal(size=spec.weight_shape) * 0.3, dtype=np.float64)
            params[f"{unit.name}.bias"] = _t(rng, spec.out_channels)
            params[f"{unit.name}.gamma"] = Tensor(
                rng.uniform(0.5, 1.5, spec.out_channels), dtype=np.float64)
            params[f"{unit.name}.beta"] = _t(rng, spec.out_channels)
            states[unit.name] = ops.BatchNormState(spec.out_channels)

        class Host:
            def _conv_unit_forward(self, unit, t, training):
                t = ops.conv2d(t, params[f"{unit.name}.weight"],
                               params[f"{unit.name}.bias"], unit.spec)
                t = ops.relu(t)
                return ops.batch_norm(t, params[f"{unit.name}.gamma"],
                                      params[f"{unit.name}.beta"],
                                      states[unit.name], training)

        host = Host()
        tensors = [x, *params.values()]
        return tensors, lambda: multi_dilation_block_forward(x, block, host, True)
    return build


def _net_case(rng):
    net = build_dilation_net(32, seed=int(rng.integers(1 << 31)))
    for name, t in net.params.items():
        net.params[name] = Tensor(t.data.astype(np.float64), dtype=np.float64)
    x = Tensor(rng.uniform(0.0, 1.0, (2, 32, 32, 3)), dtype=np.float64)
    tensors = [x, *net.params.values()]
    return tensors, lambda: net.forward(x, training=True)


@dataclass(frozen=True)
class CheckTarget:
    name: str
    tolerance: float
    case: CaseBuilder
    max_entries: int | None = None


SCOPES: dict[str, tuple[CheckTarget, ...]] = {
    "ops": (
        CheckTarget("dense", 1e-4, _dense_case),
        CheckTarget("conv2d", 1e-2,
                    _conv_case(ops.ConvSpec(3, 3, 4, padding=1), 8, 8)),
        CheckTarget("conv2d-dilated", 1e-2,
                    _conv_case(ops.ConvSpec(3, 2, 3, dilation=2, padding=2), 9, 9)),
        CheckTarget("conv2d-strided", 1e-2,
                    _conv_case(ops.ConvSpec(5, 2, 2, stride=2, dilation=2,
                                            padding=4), 10, 10)),
        CheckTarget("relu", 1e-3, _relu_case),
        CheckTarget("sigmoid", 1e-3, _sigmoid_case),
        CheckTarget("add_n", 1e-4, _add_n_case),
        CheckTarget("global_avg_pool", 1e-4, _pool_case),
        CheckTarget("concat", 1e-4, _concat_case),
        CheckTarget("batch_norm-train", 1e-2, _bn_case(True)),
        CheckTarget("batch_norm-infer", 1e-4, _bn_case(False)),
        CheckTarget("bce-l2", 1e-3, _loss_case),
    ),
    "block": (
        CheckTarget("block-m2", 1e-2, _block_case(2), max_entries=16),
        CheckTarget("block-m3", 1e-2, _block_case(3), max_entries=16),
    ),
    "net": (
        CheckTarget("net-32", 1e-2, _net_case, max_entries=3),
    ),
}

DEFAULT_SEEDS = {"ops": 20, "block": 20, "net": 3}


def run_scope(scope: str, seeds: int | None = None,
              eps: float = 1e-5) -> list[CheckResult]:
    """Check every target in the scope over the given number of seeds."""
    if scope not in SCOPES:
        raise ValueError(f"scope must be one of {sorted(SCOPES)}, got {scope!r}")
    count = DEFAULT_SEEDS[scope] if seeds is None else seeds
    if count < 1:
        raise ValueError(f"seeds must be >= 1, got {count}")
    results = []
    for target in SCOPES[scope]:
        worst = max(grad_check(target.case, seed=seed, eps=eps,
                               max_entries=target.max_entries)
                    for seed in range(count))
        results.append(CheckResult(target=target.name, scope=scope,
                                   seeds=count, worst=worst,
                                   tolerance=target.tolerance))
    return results
