import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mtdnet import ops
from mtdnet.autodiff import Tape
from mtdnet.errors import ConfigurationError, ShapeError
from mtdnet.network import (
    MtdModuleSpec, NetworkSpec, build_network, desk_spec, downsample_positions, feature_count,
    layer_count, make_network_spec, proportional_channels, reference_spec, spec_from_text,
    spec_to_text, trace_shapes,
)


def small_spec(**kw):
    kw = {"module_count": 2, "branch_channels": (2, 3, 4), "fixed_channels": 3,
          "input_temporal_depth": 12, "input_spatial": (6, 6), "fc_hidden": 5, **kw}
    return make_network_spec(**kw)


def run(net, x):
    return net.forward(Tape(enabled=False).constant(x)).value


# -- layer accounting -----------------------------------------------------------

def test_reference_has_53_layers():
    assert layer_count(reference_spec()) == 53


def test_single_module_single_branch_has_5_layers():
    assert layer_count(make_network_spec(module_count=1, branch_depths=(3,), branch_channels=(4,))) == 5


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 40), st.lists(st.sampled_from([1, 3, 5, 7]), min_size=1, max_size=5))
def test_layer_count_formula(m, depths):
    spec = make_network_spec(module_count=m, branch_depths=depths, branch_channels=[1] * len(depths))
    assert layer_count(spec) == spec.layer_count == 3 * m + 2


def test_reference_downsampling_schedule():
    assert downsample_positions(17) == {5, 10, 15}
    assert downsample_positions(2) == {1, 2}
    shapes = trace_shapes(reference_spec())
    assert shapes[-1][2:] == (8, 8)


def test_proportional_channels():
    assert proportional_channels((1, 3, 5), 18) == (2, 6, 10)
    assert proportional_channels((3, 3, 3), 18) == (6, 6, 6)


# -- parameters -----------------------------------------------------------------

def test_desk_parameter_count_closed_form():
    spec = desk_spec()
    net = build_network(spec)
    m = spec.modules[0]
    F, (kh, kw) = m.fixed_channels, m.spatial_kernel
    per_module = []
    c_in = 1
    for mod in spec.modules:
        n = F * c_in * mod.fixed_depth * kh * kw + F
        n += sum(c * F * d * kh * kw + c for c, d in zip(mod.branch_channels, mod.branch_depths))
        per_module.append(n)
        c_in = sum(mod.branch_channels)
    # two stride-(1,2,2) pools: 16 -> 8 -> 4
    feats = c_in * 32 * 4 * 4
    assert feature_count(spec) == feats
    expected = sum(per_module) + feats * spec.fc_hidden + spec.fc_hidden + spec.fc_hidden + 1
    assert net.parameter_count == expected


def test_he_initialisation_statistics():
    net = build_network(desk_spec())
    w = net.params["fc1.w"].value
    assert abs(w.mean()) < 1e-3
    assert abs(w.std() / np.sqrt(2 / w.shape[1]) - 1) < 0.01
    assert not net.params["fc1.b"].value.any()
    assert not net.params["m1.branch2.b"].value.any()


def test_build_is_deterministic():
    a, b = build_network(small_spec()), build_network(small_spec())
    for p, q in zip(a.parameters(), b.parameters()):
        assert p.name == q.name and p.value.tobytes() == q.value.tobytes()


# -- module ---------------------------------------------------------------------

def test_identity_module_is_relu(rng):
    m = MtdModuleSpec(branch_depths=(1,), branch_channels=(1,), fixed_channels=1, fixed_depth=1,
                      spatial_kernel=(1, 1), pool_kernel=(1, 1, 1), pool_padding=(0, 0, 0))
    spec = NetworkSpec(modules=[m], input_temporal_depth=4, input_spatial=(3, 3), fc_hidden=1)
    net = build_network(spec)
    for name in ("m1.fixed.w", "m1.branch1.w"):
        net.params[name].value[...] = 1.0
    x = rng.standard_normal((2, 1, 4, 3, 3))
    y = net.module_forward(Tape(enabled=False).constant(x), 0).value
    np.testing.assert_array_equal(y, ops.relu(x))


def test_module_channel_extent(rng):
    spec = small_spec(branch_channels=(4, 6, 8), module_count=1)
    net = build_network(spec)
    x = rng.standard_normal((1,) + spec.input_shape)
    y = net.module_forward(Tape(enabled=False).constant(x), 0).value
    assert y.shape == (1, 18, 12, 3, 3)
    assert trace_shapes(spec)[0] == (18, 12, 3, 3)


def test_module_matches_manual_composition(rng):
    spec = small_spec(branch_depths=(1, 5), branch_channels=(3, 2), module_count=1)
    net = build_network(spec, np.random.default_rng(9))
    P = {k: p.value for k, p in net.params.items()}
    x = rng.standard_normal((2,) + spec.input_shape)
    h = ops.relu(ops.conv3d_forward(x, ops.Conv3dParams(P["m1.fixed.w"], P["m1.fixed.b"], 1, (1, 1, 1))))
    parts = [ops.conv3d_forward(h, ops.Conv3dParams(P[f"m1.branch{n}.w"], P[f"m1.branch{n}.b"], 1, (d // 2, 1, 1)))
             for n, d in ((1, 1), (2, 5))]
    m = spec.modules[0]
    want = ops.avg_pool3d(np.concatenate(parts, axis=1), m.pool_kernel, m.pool_stride, m.pool_padding)
    got = net.module_forward(Tape(enabled=False).constant(x), 0).value
    np.testing.assert_array_equal(got, want)


def test_network_is_modules_then_head(rng):
    spec = small_spec()
    net = build_network(spec)
    x = rng.standard_normal((3,) + spec.input_shape)
    tape = Tape(enabled=False)
    h = tape.constant(x)
    for i in range(spec.module_count):
        h = net.module_forward(h, i)
    np.testing.assert_array_equal(net.head(h).value, run(net, x))


# -- forward --------------------------------------------------------------------

def test_desk_forward_finite_scalar_per_clip(rng):
    spec = desk_spec()
    net = build_network(spec)
    y = run(net, rng.uniform(size=(2,) + spec.input_shape))
    assert y.shape == (2,) and np.all(np.isfinite(y))


def test_zero_head_predicts_zero(rng):
    net = build_network(small_spec())
    net.params["fc2.w"].value[...] = 0.0
    assert not run(net, rng.standard_normal((3,) + net.spec.input_shape)).any()


def test_prediction_deterministic(rng):
    x = rng.standard_normal((2,) + small_spec().input_shape)
    assert run(build_network(small_spec()), x).tobytes() == run(build_network(small_spec()), x).tobytes()


def test_wrong_clip_shape():
    net = build_network(small_spec())
    with pytest.raises(ShapeError):
        run(net, np.zeros((1, 1, 11, 6, 6)))


def test_extent_collapse_names_module():
    spec = make_network_spec(module_count=4, input_spatial=(4, 4), pool_padding=(0, 0, 0),
                             input_temporal_depth=8)
    with pytest.raises(ConfigurationError, match="module"):
        build_network(spec)


@pytest.mark.parametrize("bad", [
    {"branch_depths": (2, 4), "branch_channels": (1, 1)},
    {"branch_depths": (1, 3), "branch_channels": (1,)},
    {"branch_depths": (), "branch_channels": ()},
])
def test_invalid_module_specs(bad):
    with pytest.raises(ConfigurationError):
        build_network(make_network_spec(module_count=1, **bad))


# -- properties -----------------------------------------------------------------

@pytest.mark.parametrize("branch", [0, 1, 2])
def test_receptive_field_locality(rng, branch):
    spec = small_spec(input_temporal_depth=16)
    net = build_network(spec)
    m = spec.modules[0]
    d = m.branch_depths[branch]
    reach = (m.fixed_depth - 1) // 2 + (d - 1) // 2
    x = rng.standard_normal((1,) + spec.input_shape)
    frame = 8
    x2 = x.copy()
    x2[:, :, frame] += rng.standard_normal(x2[:, :, frame].shape)

    def branch_out(v):
        return net.module_forward(Tape(enabled=False).constant(v), 0, return_branches=True)[1][branch].value

    a, b = branch_out(x), branch_out(x2)
    changed = np.any(a != b, axis=(0, 1, 3, 4))
    inside = np.abs(np.arange(16) - frame) <= reach
    assert not changed[~inside].any()
    assert changed[inside].all()


def test_branch_permutation_consistency(rng):
    order = [2, 0, 1]
    spec = small_spec()
    net = build_network(spec)
    pspec = small_spec(branch_depths=tuple(np.array((1, 3, 5))[order]),
                       branch_channels=tuple(np.array((2, 3, 4))[order]))
    pnet = build_network(pspec)
    bands = np.split(np.arange(9), np.cumsum((2, 3, 4))[:-1])
    perm = np.concatenate([bands[i] for i in order])
    for mod in ("m1", "m2"):
        for new, old in enumerate(order):
            for s in ("w", "b"):
                pnet.params[f"{mod}.branch{new + 1}.{s}"].value = net.params[f"{mod}.branch{old + 1}.{s}"].value
        pnet.params[f"{mod}.fixed.b"].value = net.params[f"{mod}.fixed.b"].value
    pnet.params["m1.fixed.w"].value = net.params["m1.fixed.w"].value
    pnet.params["m2.fixed.w"].value = net.params["m2.fixed.w"].value[:, perm]
    C, T, H, W = trace_shapes(spec)[-1]
    fc1 = net.params["fc1.w"].value.reshape(-1, C, T, H, W)
    pnet.params["fc1.w"].value = fc1[:, perm].reshape(fc1.shape[0], -1)
    for s in ("fc1.b", "fc2.w", "fc2.b"):
        pnet.params[s].value = net.params[s].value
    x = rng.standard_normal((2,) + spec.input_shape)
    np.testing.assert_allclose(run(pnet, x), run(net, x), rtol=1e-12, atol=1e-12)


# -- fold mode ------------------------------------------------------------------

def test_fold_mode_channels_depend_on_depth(rng):
    spec = small_spec(temporal_mode="fold", module_count=1, branch_channels=(1, 1, 1),
                      input_temporal_depth=8)
    assert trace_shapes(spec)[0][:2] == (8 + 6 + 4, 1)
    net = build_network(spec)
    _, branches = net.module_forward(Tape(enabled=False).constant(rng.standard_normal((1,) + spec.input_shape)),
                                     0, return_branches=True)
    assert [b.shape[2] for b in branches] == [8, 6, 4]
    assert np.isfinite(run(net, rng.standard_normal((2,) + spec.input_shape))).all()


def test_fold_mode_rejects_short_clips():
    with pytest.raises(ConfigurationError):
        trace_shapes(small_spec(temporal_mode="fold", input_temporal_depth=4))


# -- spec text ------------------------------------------------------------------

def test_spec_text_round_trip():
    spec = reference_spec(temporal_mode="fold", input_temporal_depth=40)
    assert spec_to_text(spec_from_text(spec_to_text(spec))) == spec_to_text(spec)
    assert spec_from_text(spec_to_text(spec)) == spec


def test_spec_text_errors():
    with pytest.raises(ConfigurationError):
        spec_from_text("[network]\nmodule_count = 2\n")
