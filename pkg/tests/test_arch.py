import dataclasses

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles as O
from bcastnet.arch import (
    VARIANT_ORDER,
    ArchError,
    ArchSpec,
    Model,
    VariantId,
    _check_channels,
    _TensorRun,
    _walk,
    block_input,
    block_input_channels,
    build_arch,
    conv_census,
    count_stored,
    forward,
    growth_sequence,
    init_params,
    param_count,
    shape_trace,
)
from bcastnet.tensor import Tensor, no_grad, precision

V = VariantId


def test_growth_sequence_examples():
    assert growth_sequence(4, 32, 32) == [32, 160, 288, 416, 544]
    assert growth_sequence(1) == [32, 160]
    assert growth_sequence(3) == [32, 160, 288, 416]


def test_build_proposed_and_blocks5():
    arch = build_arch(V.Proposed, 10)
    assert arch.num_blocks == 4 and arch.initializer == "lecun_normal"
    census = conv_census(arch)
    assert (census["total"], census["3x3"], census["1x1"]) == (22, 5, 17)
    base, five = build_arch(V.BaselineBBNN), build_arch(V.Blocks5)
    assert five.num_blocks == 5
    assert all(b.kind == "bbnn_inception" for b in five.blocks)
    assert [len(b.branches) for b in five.blocks] == [len(base.blocks[0].branches)] * 5
    with pytest.raises(ValueError):
        build_arch("Resnet50")
    with pytest.raises(ArchError):
        build_arch(V.Proposed, 1)


def test_block_input_channels():
    shallow = Tensor(np.zeros((1, 32, 4, 4)))
    assert block_input(shallow, []).shape[1] == 32
    assert block_input_channels(build_arch(V.Proposed))[2] == 32 + 128 + 128
    assert block_input_channels(build_arch(V.Blocks5))[4] == 544
    with pytest.raises(Exception):
        block_input(shallow, [Tensor(np.zeros((1, 128, 4, 5)))])


@pytest.mark.parametrize("variant", VARIANT_ORDER)
def test_channel_invariant_and_stored_count(variant):
    arch = build_arch(variant)
    widths = growth_sequence(arch.num_blocks, arch.f, arch.growth_anchor)
    assert block_input_channels(arch) == widths[:-1]
    params, _ = init_params(arch, 0)
    assert param_count(arch).total == count_stored(params)


def test_channel_violation_is_construction_error():
    arch = build_arch(V.Proposed)
    with pytest.raises(ArchError, match="growth rule"):
        _check_channels(dataclasses.replace(arch, f=16))


def test_parameter_budgets():
    base, rm = param_count(build_arch(V.BaselineBBNN)).total, param_count(build_arch(V.Remove3x3)).total
    assert base - rm == 27744
    proposed = param_count(build_arch(V.Proposed)).total
    xcp = param_count(build_arch(V.Xception)).total
    assert 160_000 <= proposed <= 200_000
    assert 127_000 <= xcp <= 155_000 and base - xcp >= 30_000
    # frozen totals for regression
    assert (proposed, base, rm, xcp) == (166_698, 185_578, 157_834, 145_194)


def test_shape_trace_examples():
    trace = dict(shape_trace(build_arch(V.Proposed), (1, 1, 128, 646)))
    assert trace["module.output"] == (1, 544, 64, 323)
    assert trace["transition.2.conv"][1] == 32
    assert trace["decision.1.dense"] == (1, 10)


def test_arch_json_round_trip():
    arch = build_arch(V.Lstm, 8, num_blocks=2)
    back = ArchSpec.from_json(arch.to_json())
    assert back == arch


def test_init_deterministic_and_statistics():
    arch = build_arch(V.Proposed)
    a, _ = init_params(arch, 3)
    b, _ = init_params(arch, 3)
    assert all(a[k].data.tobytes() == b[k].data.tobytes() for k in a)
    gammas = [v.data for k, v in a.items() if k.endswith("gamma")]
    assert gammas and all((g == 1).all() for g in gammas)
    w = a["transition.2.conv.w"].data  # 32 x 544 kernel, 17,408 values
    assert w.size >= 10_000
    assert abs(w.std() / np.sqrt(1 / 544) - 1) < 0.05
    g, _ = init_params(build_arch(V.BaselineBBNN), 0)
    w = g["transition.2.conv.w"].data
    assert np.abs(w).max() <= np.sqrt(6 / (416 + 32))


def test_forward_probabilities_and_identical_rows():
    model = Model.create(build_arch(V.Proposed, 4), 0)
    x = np.random.default_rng(0).normal(size=(3, 1, 16, 12)).astype(np.float32)
    x[2] = x[0]
    with no_grad():
        p = forward(model, x, "eval").data
    assert p.shape == (3, 4)
    assert np.allclose(p.sum(axis=1), 1, atol=1e-5)
    assert np.array_equal(p[0], p[2])
    twin = Model.create(build_arch(V.Proposed, 4), 0)
    assert np.array_equal(twin.predict_proba(x).argmax(1), model.predict_proba(x).argmax(1))


@pytest.mark.parametrize("variant", VARIANT_ORDER)
def test_every_variant_forwards(variant):
    model = Model.create(build_arch(variant, 3), 0)
    x = np.random.default_rng(1).normal(size=(2, 1, 16, 16)).astype(np.float32)
    with no_grad():
        p = forward(model, x, "train", np.random.default_rng(0)).data
    assert p.shape == (2, 3) and np.isfinite(p).all()


def _randomize(model, seed):
    r = np.random.default_rng(seed)
    for t in model.params.values():
        t.data = r.normal(0, 0.5, size=t.shape)
    for k in model.buffers:
        model.buffers[k] = (r.uniform(0.5, 2.0, size=model.buffers[k].shape) if k.endswith("var")
                            else r.normal(0, 0.3, size=model.buffers[k].shape))


def _oracle_logits(p, b, x, num_blocks):
    def bn(name, v):
        return O.bn_eval(v, p[name + ".gamma"], p[name + ".beta"], b[name + ".running_mean"],
                         b[name + ".running_var"])

    def conv(name, v):
        return O.conv(v, p[name + ".w"], p[name + ".b"])

    h = O.conv(x, p["shallow.0.conv.w"], p["shallow.0.conv.b"])
    h = O.maxpool(O.relu(bn("shallow.1.batch_norm", h)), 2, 2, "valid")
    feats = [h]
    for l in range(1, num_blocks + 1):
        inp = np.concatenate(feats, axis=1)
        pre = lambda br, i, v: O.relu(bn(f"block{l}.br{br}.{i}.batch_norm", v))
        a = conv(f"block{l}.br0.2.conv", pre(0, 0, inp))
        bb = conv(f"block{l}.br1.2.conv", pre(1, 0, inp))
        c = conv(f"block{l}.br2.2.conv", pre(2, 0, inp))
        c = pre(2, 3, c)
        fc = f"block{l}.br2.5.fconv3"
        c = O.conv(O.conv(c, p[fc + ".w1"], p[fc + ".b1"]), p[fc + ".w2"], p[fc + ".b2"])
        d = conv(f"block{l}.br3.3.conv", pre(3, 1, O.maxpool(inp, 3, 1, "same")))
        feats.append(np.concatenate([a, bb, c, d], axis=1))
    h = np.concatenate(feats, axis=1)
    h = conv("transition.2.conv", O.relu(bn("transition.0.batch_norm", h)))
    h = O.avgpool(h, 2).mean(axis=(2, 3))
    return h @ p["decision.1.dense.w"] + p["decision.1.dense.b"]


def test_micro_arch_matches_hand_unrolled(f64):
    arch = build_arch(V.Proposed, 3, num_blocks=2, f=2, k0=4, transition_width=4)
    model = Model.create(arch, 0)
    _randomize(model, 11)
    x = np.random.default_rng(2).normal(size=(2, 1, 8, 8))
    got = model.logits(x, "eval").data
    want = _oracle_logits({k: t.data for k, t in model.params.items()}, model.buffers, x, 2)
    assert np.allclose(got, want, rtol=1e-10, atol=1e-12)


class _Recorder(_TensorRun):
    def __init__(self, *a):
        super().__init__(*a)
        self.concats = {}

    def concat(self, name, parts):
        out = super().concat(name, parts)
        self.concats[name] = out.data.copy()
        return out


@given(st.integers(0, 2**31), st.integers(1, 2))
def test_zeroing_a_block_only_touches_its_channels(seed, j):
    arch = build_arch(V.Proposed, 2, num_blocks=3, f=2, k0=4, transition_width=4)
    with precision("float64"):
        model = Model.create(arch, seed % 1000)
        x = Tensor(np.random.default_rng(seed).normal(size=(1, 1, 8, 8)))

        def run(hook):
            rec = _Recorder(model.params, model.buffers, False)
            with no_grad():
                _walk(arch, rec, x, hook)
            return rec.concats

        base = run(None)
        masked = run(lambda l, out: out * 0.0 if l == j else out)
    k0, g = 4, 8
    nxt = masked[f"block{j + 1}.input"]
    lo, hi = k0 + (j - 1) * g, k0 + j * g
    assert np.array_equal(nxt[:, :lo], base[f"block{j + 1}.input"][:, :lo])
    assert not nxt[:, lo:hi].any()
    assert np.array_equal(masked["module.output"][:, :lo], base["module.output"][:, :lo])
