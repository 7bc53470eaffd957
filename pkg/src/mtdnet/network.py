"""Multi-temporal-depth (MTD) 3D convolutional regression network.

A module applies a fixed-depth 3D convolution, a ReLU, ``N`` parallel 3D
convolutions whose temporal depths differ, concatenates their outputs along
channels and average-pools the result. The network stacks ``M`` modules and
finishes with two fully connected layers (hidden ReLU layer, scalar head).

Layer accounting treats the parallel branches of a module as a single layer,
so a network has ``3 * M + 2`` layers.
"""
from __future__ import annotations

import configparser
import io
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tape, Var
from .errors import ConfigurationError, ShapeError
from .ops import Triple, out_extent
from .tensor import as_tensor5, make_rng, randn

TEMPORAL_MODES = ("same", "fold")


@dataclass
class MtdModuleSpec:
    branch_depths: tuple[int, ...] = (1, 3, 5)
    branch_channels: tuple[int, ...] = (2, 6, 10)
    fixed_channels: int = 8
    fixed_depth: int = 3
    spatial_kernel: tuple[int, int] = (3, 3)
    pool_kernel: Triple = (3, 3, 3)
    pool_stride: Triple = (1, 1, 1)
    pool_padding: Triple = (1, 1, 1)

    def __post_init__(self):
        self.branch_depths = tuple(int(d) for d in self.branch_depths)
        self.branch_channels = tuple(int(c) for c in self.branch_channels)
        self.spatial_kernel = tuple(int(k) for k in self.spatial_kernel)
        self.pool_kernel = tuple(int(k) for k in self.pool_kernel)
        self.pool_stride = tuple(int(k) for k in self.pool_stride)
        self.pool_padding = tuple(int(k) for k in self.pool_padding)

    @property
    def n_branches(self) -> int:
        return len(self.branch_depths)

    def validate(self, name: str = "module") -> None:
        if self.n_branches < 1:
            raise ConfigurationError(f"{name}: needs at least one branch")
        if len(self.branch_channels) != self.n_branches:
            raise ConfigurationError(
                f"{name}: {self.n_branches} branch depths but "
                f"{len(self.branch_channels)} branch channel counts")
        if min(self.branch_depths) < 1 or min(self.branch_channels) < 1:
            raise ConfigurationError(f"{name}: branch depths and channels must be >= 1")
        if self.fixed_channels < 1 or self.fixed_depth < 1:
            raise ConfigurationError(f"{name}: fixed conv extents must be >= 1")
        if len(self.spatial_kernel) != 2 or min(self.spatial_kernel) < 1:
            raise ConfigurationError(f"{name}: bad spatial kernel {self.spatial_kernel}")
        # same padding needs odd kernels
        for k in (self.fixed_depth, *self.branch_depths, *self.spatial_kernel):
            if k % 2 == 0:
                raise ConfigurationError(f"{name}: kernel extent {k} is even; same padding needs odd")
        for label, t in (("pool_kernel", self.pool_kernel), ("pool_stride", self.pool_stride)):
            if len(t) != 3 or min(t) < 1:
                raise ConfigurationError(f"{name}: bad {label} {t}")
        if len(self.pool_padding) != 3 or min(self.pool_padding) < 0:
            raise ConfigurationError(f"{name}: bad pool_padding {self.pool_padding}")


@dataclass
class NetworkSpec:
    modules: list[MtdModuleSpec] = field(default_factory=lambda: [MtdModuleSpec()])
    input_temporal_depth: int = 32
    input_spatial: tuple[int, int] = (16, 16)
    input_channels: int = 1
    fc_hidden: int = 128
    output_dim: int = 1
    init_seed: int = 0
    # "same": every branch keeps the temporal extent (zero-padded).
    # "fold": branches use valid temporal convolution and fold time into channels.
    temporal_mode: str = "same"

    def __post_init__(self):
        self.input_spatial = tuple(int(s) for s in self.input_spatial)

    @property
    def module_count(self) -> int:
        return len(self.modules)

    @property
    def layer_count(self) -> int:
        return layer_count(self)

    @property
    def input_shape(self) -> tuple[int, int, int, int]:
        """(channels, time, height, width) of one clip."""
        return (self.input_channels, self.input_temporal_depth) + self.input_spatial


def layer_count(spec: NetworkSpec) -> int:
    """Fixed conv + parallel-branch layer + pooling per module, plus two FC layers."""
    return 3 * spec.module_count + 2


def proportional_channels(depths: Sequence[int], width: int) -> tuple[int, ...]:
    """Split ``width`` channels across branches in proportion to temporal depth."""
    total = sum(depths)
    return tuple(max(1, round(width * d / total)) for d in depths)


def downsample_positions(module_count: int) -> set[int]:
    """1-based module positions whose pooling halves height and width."""
    step = math.ceil(module_count / 4)
    return {step * k for k in (1, 2, 3) if step * k <= module_count}


def make_network_spec(
    module_count: int = 2,
    branch_depths: Sequence[int] = (1, 3, 5),
    branch_channels: Sequence[int] | None = None,
    module_width: int = 18,
    fixed_channels: int = 8,
    fixed_depth: int = 3,
    spatial_kernel: tuple[int, int] = (3, 3),
    pool_kernel: Triple = (3, 3, 3),
    pool_padding: Triple = (1, 1, 1),
    downsample_stride: Triple = (1, 2, 2),
    **network_kwargs,
) -> NetworkSpec:
    """Uniform stack of modules with the default spatial reduction schedule."""
    if branch_channels is None:
        branch_channels = proportional_channels(branch_depths, module_width)
    reduce_at = downsample_positions(module_count)
    modules = [
        MtdModuleSpec(
            branch_depths=tuple(branch_depths),
            branch_channels=tuple(branch_channels),
            fixed_channels=fixed_channels,
            fixed_depth=fixed_depth,
            spatial_kernel=spatial_kernel,
            pool_kernel=pool_kernel,
            pool_stride=tuple(downsample_stride) if i + 1 in reduce_at else (1, 1, 1),
            pool_padding=pool_padding,
        )
        for i in range(module_count)
    ]
    return NetworkSpec(modules=modules, **network_kwargs)


def desk_spec(**kwargs) -> NetworkSpec:
    """Two modules, three branches of depths 1/3/5, 16x16 input, 32-frame clips."""
    return make_network_spec(**kwargs)


def reference_spec(**kwargs) -> NetworkSpec:
    """17 modules with 3 parallel branches each (53 layers)."""
    kwargs.setdefault("module_count", 17)
    kwargs.setdefault("input_spatial", (64, 64))
    return make_network_spec(**kwargs)


# -- shape bookkeeping -----------------------------------------------------------

def _same(k: int) -> int:
    return (k - 1) // 2


def branch_padding(spec: NetworkSpec, m: MtdModuleSpec, depth: int) -> Triple:
    kh, kw = m.spatial_kernel
    pt = _same(depth) if spec.temporal_mode == "same" else 0
    return (pt, _same(kh), _same(kw))


def fixed_padding(m: MtdModuleSpec) -> Triple:
    return (_same(m.fixed_depth),) + tuple(_same(k) for k in m.spatial_kernel)


def trace_shapes(spec: NetworkSpec) -> list[tuple[int, int, int, int]]:
    """Per-module output shapes (C, T, H, W); raises on extent collapse."""
    if spec.temporal_mode not in TEMPORAL_MODES:
        raise ConfigurationError(f"temporal_mode must be one of {TEMPORAL_MODES}")
    if spec.module_count < 1:
        raise ConfigurationError("network needs at least one module")
    if spec.fc_hidden < 1 or spec.output_dim != 1:
        raise ConfigurationError("fc_hidden must be >= 1 and output_dim must be 1")
    if min(spec.input_shape) < 1:
        raise ConfigurationError(f"bad input shape {spec.input_shape}")
    c, t, h, w = spec.input_shape
    shapes = []
    for i, m in enumerate(spec.modules):
        name = f"module {i + 1}"
        m.validate(name)
        kh, kw = m.spatial_kernel
        if spec.temporal_mode == "same":
            c = sum(m.branch_channels)
        else:
            widths = [t - d + 1 for d in m.branch_depths]
            if min(widths) < 1:
                raise ConfigurationError(
                    f"{name}: temporal extent {t} is shorter than branch depth "
                    f"{max(m.branch_depths)} under valid temporal convolution")
            c = sum(cn * tn for cn, tn in zip(m.branch_channels, widths))
            t = 1
        dims = []
        for axis, n, k, s, p in zip("thw", (t, h, w), m.pool_kernel, m.pool_stride, m.pool_padding):
            n_out = out_extent(n, k, s, p) if n + 2 * p >= k else 0
            if n_out < 1:
                raise ConfigurationError(
                    f"{name}: pooling collapses the {axis} extent ({n} -> {n_out})")
            dims.append(n_out)
        t, h, w = dims
        shapes.append((c, t, h, w))
    return shapes


def feature_count(spec: NetworkSpec) -> int:
    return int(np.prod(trace_shapes(spec)[-1]))


# -- the network ---------------------------------------------------------------

class MtdNetwork:
    def __init__(self, spec: NetworkSpec, params: dict[str, Parameter]):
        self.spec = spec
        self.params = params

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    @property
    def parameter_count(self) -> int:
        return sum(p.value.size for p in self.params.values())

    @property
    def layer_count(self) -> int:
        return layer_count(self.spec)

    def _p(self, tape: Tape, name: str) -> Var:
        return tape.watch(self.params[name])

    def module_forward(self, x: Var, index: int, return_branches: bool = False):
        """Apply module ``index`` (0-based) to ``x``.

        With ``return_branches`` the pre-concatenation branch outputs are
        returned too, as ``(output, [branch_1, ..., branch_N])``.
        """
        tape, spec, m = x.tape, self.spec, self.spec.modules[index]
        pre = f"m{index + 1}"
        h = ad.conv3d(x, self._p(tape, f"{pre}.fixed.w"), self._p(tape, f"{pre}.fixed.b"),
                      padding=fixed_padding(m))
        h = ad.relu(h)
        branches = [
            ad.conv3d(h, self._p(tape, f"{pre}.branch{n + 1}.w"),
                      self._p(tape, f"{pre}.branch{n + 1}.b"),
                      padding=branch_padding(spec, m, d))
            for n, d in enumerate(m.branch_depths)
        ]
        joined = branches if spec.temporal_mode == "same" else [ad.fold_time(b) for b in branches]
        out = ad.avg_pool3d(ad.concat_channels(joined), m.pool_kernel, m.pool_stride, m.pool_padding)
        return (out, branches) if return_branches else out

    def head(self, features: Var) -> Var:
        tape = features.tape
        h = ad.flatten(features)
        h = ad.relu(ad.linear(h, self._p(tape, "fc1.w"), self._p(tape, "fc1.b")))
        y = ad.linear(h, self._p(tape, "fc2.w"), self._p(tape, "fc2.b"))
        return ad.reshape(y, (y.shape[0],))

    def forward(self, x: Var) -> Var:
        """(B, C, T, H, W) clips -> (B,) intensity predictions."""
        expected = self.spec.input_shape
        if tuple(x.shape[1:]) != expected:
            raise ShapeError(f"clip shape {tuple(x.shape[1:])} != expected {expected}")
        for i in range(self.spec.module_count):
            x = self.module_forward(x, i)
        return self.head(x)

    def predict(self, clips: np.ndarray, batch_size: int = 64) -> np.ndarray:
        clips = as_tensor5(clips)
        out = []
        for s in range(0, clips.shape[0], batch_size):
            tape = Tape(enabled=False)
            out.append(self.forward(tape.constant(clips[s:s + batch_size])).value)
        return np.concatenate(out)


def _declare(spec: NetworkSpec) -> list[tuple[str, tuple[int, ...], int]]:
    """(name, shape, fan_in) for every parameter in declaration order; fan_in 0 = bias."""
    shapes = trace_shapes(spec)
    decl = []
    c = spec.input_channels
    for i, m in enumerate(spec.modules):
        pre = f"m{i + 1}"
        kh, kw = m.spatial_kernel
        decl.append((f"{pre}.fixed.w", (m.fixed_channels, c, m.fixed_depth, kh, kw),
                     c * m.fixed_depth * kh * kw))
        decl.append((f"{pre}.fixed.b", (m.fixed_channels,), 0))
        for n, (d, cn) in enumerate(zip(m.branch_depths, m.branch_channels)):
            decl.append((f"{pre}.branch{n + 1}.w", (cn, m.fixed_channels, d, kh, kw),
                         m.fixed_channels * d * kh * kw))
            decl.append((f"{pre}.branch{n + 1}.b", (cn,), 0))
        c = shapes[i][0]
    feats = int(np.prod(shapes[-1]))
    decl += [
        ("fc1.w", (spec.fc_hidden, feats), feats),
        ("fc1.b", (spec.fc_hidden,), 0),
        ("fc2.w", (spec.output_dim, spec.fc_hidden), spec.fc_hidden),
        ("fc2.b", (spec.output_dim,), 0),
    ]
    return decl


def build_network(spec: NetworkSpec, rng: np.random.Generator | None = None) -> MtdNetwork:
    """Allocate parameters: He-normal weights (std sqrt(2 / fan_in)), zero biases."""
    if rng is None:
        rng = make_rng(spec.init_seed)
    params = {}
    for name, shape, fan_in in _declare(spec):
        if fan_in == 0:
            value = np.zeros(shape)
        else:
            std = math.sqrt(2.0 / fan_in)
            padded = (1,) * (5 - len(shape)) + shape
            value = randn(padded, rng, std).reshape(shape)
        params[name] = Parameter(name, value)
    return MtdNetwork(spec, params)


# -- plain-text spec format ------------------------------------------------------

def _fmt(v) -> str:
    return ", ".join(str(a) for a in v) if isinstance(v, tuple) else str(v)


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(a) for a in s.replace(",", " ").split())


def spec_to_text(spec: NetworkSpec) -> str:
    cp = configparser.ConfigParser(interpolation=None)
    cp["network"] = {
        "module_count": str(spec.module_count),
        "input_temporal_depth": str(spec.input_temporal_depth),
        "input_spatial": _fmt(spec.input_spatial),
        "input_channels": str(spec.input_channels),
        "fc_hidden": str(spec.fc_hidden),
        "output_dim": str(spec.output_dim),
        "init_seed": str(spec.init_seed),
        "temporal_mode": spec.temporal_mode,
    }
    for i, m in enumerate(spec.modules):
        cp[f"module.{i + 1}"] = {
            "branch_depths": _fmt(m.branch_depths),
            "branch_channels": _fmt(m.branch_channels),
            "fixed_channels": str(m.fixed_channels),
            "fixed_depth": str(m.fixed_depth),
            "spatial_kernel": _fmt(m.spatial_kernel),
            "pool_kernel": _fmt(m.pool_kernel),
            "pool_stride": _fmt(m.pool_stride),
            "pool_padding": _fmt(m.pool_padding),
        }
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def spec_from_text(text: str) -> NetworkSpec:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
        net = cp["network"]
        count = net.getint("module_count")
        modules = []
        for i in range(count):
            s = cp[f"module.{i + 1}"]
            modules.append(MtdModuleSpec(
                branch_depths=_ints(s["branch_depths"]),
                branch_channels=_ints(s["branch_channels"]),
                fixed_channels=s.getint("fixed_channels"),
                fixed_depth=s.getint("fixed_depth"),
                spatial_kernel=_ints(s["spatial_kernel"]),
                pool_kernel=_ints(s["pool_kernel"]),
                pool_stride=_ints(s["pool_stride"]),
                pool_padding=_ints(s["pool_padding"]),
            ))
        return NetworkSpec(
            modules=modules,
            input_temporal_depth=net.getint("input_temporal_depth"),
            input_spatial=_ints(net["input_spatial"]),
            input_channels=net.getint("input_channels"),
            fc_hidden=net.getint("fc_hidden"),
            output_dim=net.getint("output_dim"),
            init_seed=net.getint("init_seed"),
            temporal_mode=net.get("temporal_mode", "same"),
        )
    except (configparser.Error, KeyError, ValueError) as exc:
        raise ConfigurationError(f"cannot parse network spec: {exc}") from exc


def with_seed(spec: NetworkSpec, seed: int) -> NetworkSpec:
    return replace(spec, init_seed=int(seed))
