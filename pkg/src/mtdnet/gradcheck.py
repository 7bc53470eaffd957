"""Central finite-difference verification of every backward kernel and of a full network.

Each registered operator is checked on its own: a random upstream gradient
``G`` is drawn, the analytic input gradients come from the op's backward
kernel, and the numeric ones from central differences of ``sum(G * f(x))``.
One extra row differentiates a two-module network end to end through the tape.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import ops
from .autodiff import Tape, mse_loss
from .network import build_network, make_network_spec
from .tensor import concat_channels, make_rng

EPS = 1e-5
TOLERANCE = 1e-4
# Below this magnitude a gradient is compared in absolute terms.
FLOOR = 1e-4


@dataclass
class CheckRow:
    name: str
    coords: int
    max_rel_error: float
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def relative_error(analytic: float, numeric: float, floor: float = FLOOR) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def _sample_coords(arrays, n, rng):
    """``n`` distinct (array index, flat index) pairs, spread over all inputs."""
    sizes = [a.size for a in arrays]
    total = sum(sizes)
    flat = rng.choice(total, size=min(n, total), replace=False)
    offsets = np.cumsum([0] + sizes)
    out = []
    for f in np.sort(flat):
        i = int(np.searchsorted(offsets, f, side="right") - 1)
        out.append((i, int(f - offsets[i])))
    return out


def check_gradients(f: Callable[[list], float], inputs: list, analytic: list, coords,
                    eps: float = EPS) -> float:
    """Worst relative error of ``analytic`` against central differences of ``f``."""
    worst = 0.0
    for i, j in coords:
        x = inputs[i].reshape(-1)
        saved = x[j]
        x[j] = saved + eps
        up = f(inputs)
        x[j] = saved - eps
        down = f(inputs)
        x[j] = saved
        numeric = (up - down) / (2 * eps)
        worst = max(worst, relative_error(float(analytic[i].reshape(-1)[j]), numeric))
    return worst


# -- per-op cases ------------------------------------------------------------------
# Each case returns (inputs, forward(inputs) -> array, backward(inputs, G) -> grads).

def _conv_case(rng):
    x = rng.standard_normal((2, 3, 6, 5, 5))
    w = rng.standard_normal((4, 3, 3, 3, 3)) * 0.3
    b = rng.standard_normal(4)
    stride, pad = (1, 2, 1), (1, 1, 0)

    def fwd(a):
        return ops.conv3d_forward(a[0], ops.Conv3dParams(a[1], a[2], stride, pad))

    def bwd(a, g):
        return ops.conv3d_backward(g, a[0], ops.Conv3dParams(a[1], a[2], stride, pad))

    return [x, w, b], fwd, bwd


def _relu_case(rng):
    x = rng.standard_normal((2, 2, 4, 4, 4))
    # keep finite differences away from the kink
    x = np.where(np.abs(x) < 1e-3, 0.5, x)
    return [x], lambda a: ops.relu(a[0]), lambda a, g: [ops.relu_backward(g, a[0])]


def _pool_case(rng):
    x = rng.standard_normal((2, 3, 6, 7, 7))
    k, s, p = (3, 3, 3), (1, 2, 2), (1, 1, 1)
    return ([x], lambda a: ops.avg_pool3d(a[0], k, s, p),
            lambda a, g: [ops.avg_pool3d_backward(g, a[0].shape, k, s, p)])


def _concat_case(rng):
    parts = [rng.standard_normal((2, c, 3, 4, 4)) for c in (1, 2, 3)]
    return (parts, lambda a: concat_channels(a),
            lambda a, g: ops.concat_backward(g, [p.shape[1] for p in a]))


def _linear_case(rng):
    x = rng.standard_normal((5, 12))
    w = rng.standard_normal((7, 12))
    b = rng.standard_normal(7)
    return ([x, w, b], lambda a: ops.linear(*a),
            lambda a, g: list(ops.linear_backward(g, a[0], a[1])))


def _mse_case(rng):
    pred = rng.normal(5.0, 3.0, size=150)
    target = rng.uniform(0, 15, size=150)

    def bwd(a, g):
        gp = ops.mse_loss_backward(a[0], a[1], float(g))
        return [gp, -gp]

    return [pred, target], lambda a: np.array(ops.mse_loss(a[0], a[1])), bwd


def _fold_case(rng):
    x = rng.standard_normal((2, 3, 5, 4, 4))
    return ([x], lambda a: a[0].reshape(2, 15, 1, 4, 4),
            lambda a, g: [g.reshape(a[0].shape)])


OP_CASES: dict[str, Callable] = {
    "conv3d": _conv_case,
    "relu": _relu_case,
    "avg_pool3d": _pool_case,
    "concat_channels": _concat_case,
    "linear": _linear_case,
    "mse_loss": _mse_case,
    "reshape": _fold_case,
}


def check_op(name: str, seed: int = 0, n_coords: int = 100, eps: float = EPS) -> CheckRow:
    rng = make_rng(seed)
    inputs, fwd, bwd = OP_CASES[name](rng)
    upstream = rng.standard_normal(np.shape(fwd(inputs)))
    analytic = [np.asarray(g) for g in bwd(inputs, upstream)]
    coords = _sample_coords(inputs, n_coords, rng)
    err = check_gradients(lambda a: float(np.sum(upstream * fwd(a))), inputs, analytic, coords, eps)
    return CheckRow(name, len(coords), err)


def tiny_network_spec(**kwargs):
    kwargs = {"module_count": 2, "branch_depths": (1, 3, 5), "branch_channels": (2, 2, 3),
              "fixed_channels": 3, "input_temporal_depth": 8, "input_spatial": (6, 6),
              "fc_hidden": 6, **kwargs}
    return make_network_spec(**kwargs)


def check_network(seed: int = 0, n_coords: int = 100, eps: float = EPS, spec=None) -> CheckRow:
    """Loss gradient of a full MTD network w.r.t. randomly sampled parameters."""
    spec = tiny_network_spec() if spec is None else spec
    rng = make_rng(seed)
    net = build_network(spec, rng)
    params = net.parameters()
    x = rng.uniform(0, 1, size=(3,) + spec.input_shape)
    y = rng.uniform(0, 15, size=3)

    def loss_value(values):
        return float(mse_loss(net.forward(Tape(enabled=False).constant(x)), y).value)

    tape = Tape()
    grads = tape.backward(mse_loss(net.forward(tape.constant(x)), y), params)
    values = [p.value for p in params]
    coords = _sample_coords(values, n_coords, rng)
    err = check_gradients(loss_value, values, [grads[p.name] for p in params], coords, eps)
    return CheckRow("network_end_to_end", len(coords), err)


def run_gradcheck(seed: int = 0, n_coords: int = 100) -> list[CheckRow]:
    rows = [check_op(name, seed, n_coords) for name in OP_CASES]
    rows.append(check_network(seed, n_coords))
    return rows


def format_table(rows: list[CheckRow]) -> str:
    lines = [f"{'check':<22}{'coords':>8}{'max_rel_err':>14}  result"]
    for r in rows:
        lines.append(f"{r.name:<22}{r.coords:>8}{r.max_rel_error:>14.3e}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
