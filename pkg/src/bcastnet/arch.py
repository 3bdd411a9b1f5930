"""Broadcast-network family: declarative specs, shape tracing, parameters, forward pass.

A network is shallow layers, ``L`` multi-branch blocks, a transition and a
decision head.  Block ``l`` receives the channel concatenation of the shallow
features and every earlier block output; the module output concatenates all
of them, so widths grow as ``k_l = k_{l-1} + 4 f``.

The structure is walked by a single function (:func:`_walk`) driven either by
a shape-only runner (tracing, parameter shapes, census) or by a tensor runner
(forward pass), so the two can never disagree.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional, Sequence

import numpy as np

from . import layers as L
from .tensor import Tensor, concat_channels, get_dtype, no_grad

DEFAULT_INPUT_SHAPE = (1, 1, 128, 646)


class ArchError(ValueError):
    """Inconsistent architecture (bad variant, channel bookkeeping, overrides)."""


class VariantId(str, Enum):
    BaselineBBNN = "BaselineBBNN"
    Proposed = "Proposed"
    Remove3x3 = "Remove3x3"
    Replace5x5 = "Replace5x5"
    GlobalMaxPool = "GlobalMaxPool"
    Dropout = "Dropout"
    Blocks1 = "Blocks1"
    Blocks2 = "Blocks2"
    Blocks5 = "Blocks5"
    Selu = "Selu"
    GroupNorm = "GroupNorm"
    LabelSmoothing = "LabelSmoothing"
    SqueezeExcite = "SqueezeExcite"
    Lstm = "Lstm"
    InceptionResnetV1 = "InceptionResnetV1"
    Xception = "Xception"

    @classmethod
    def parse(cls, value) -> "VariantId":
        if isinstance(value, cls):
            return value
        for v in cls:
            if v.value.lower() == str(value).lower():
                return v
        raise ArchError(f"unknown variant {value!r}; known: {', '.join(v.value for v in cls)}")


# declaration order doubles as the reporting order (baseline, ours, then the variant table)
VARIANT_ORDER = list(VariantId)


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str = ""
    out: Optional[int] = None
    kernel: tuple = (1, 1)
    stride: int = 1
    padding: str = "same"
    arg: Optional[float] = None  # keep prob / group size / SE reduction


@dataclass(frozen=True)
class BlockSpec:
    name: str
    kind: str
    f: int
    branches: tuple
    merge: tuple = ()
    residual_scale: Optional[float] = None
    post: tuple = ()


@dataclass
class ArchSpec:
    variant: VariantId
    num_classes: int
    f: int
    num_blocks: int
    k0: int
    transition_width: int
    initializer: str
    activation: str
    norm: str
    label_smoothing: float
    shallow: tuple
    blocks: tuple
    transition: tuple
    decision: tuple
    overrides: dict = field(default_factory=dict)

    @property
    def growth_anchor(self) -> int:
        """Channel width of the shallow/stem output feeding the first block."""
        return 2 * self.k0 if self.variant is VariantId.InceptionResnetV1 else self.k0

    def to_dict(self) -> dict:
        return {"variant": self.variant.value, "num_classes": self.num_classes,
                "overrides": dict(sorted(self.overrides.items()))}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def describe(self) -> dict:
        d = dataclasses.asdict(self)
        d["variant"] = self.variant.value
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> "ArchSpec":
        return build_arch(doc["variant"], doc.get("num_classes", 10), **doc.get("overrides", {}))

    @classmethod
    def from_json(cls, text: str) -> "ArchSpec":
        return cls.from_dict(json.loads(text))


def growth_sequence(num_blocks: int, f: int = 32, k0: int = 32) -> list[int]:
    """Accumulated channel widths ``[k0, k0 + 4f, ...]`` for ``num_blocks`` blocks."""
    if num_blocks < 1:
        raise ArchError("need at least one block")
    return [k0 + 4 * f * l for l in range(num_blocks + 1)]


# ------------------------------------------------------------ spec builders


def _conv(out, k=1, stride=1, padding="same"):
    kernel = (k, k) if isinstance(k, int) else tuple(k)
    return LayerSpec("conv", out=out, kernel=kernel, stride=stride, padding=padding)


def _pre(norm: str, act: str, group: int = 16) -> tuple:
    return (LayerSpec(norm, arg=group if norm == "group_norm" else None), LayerSpec(act))


def _named(prefix: str, specs) -> tuple:
    return tuple(dataclasses.replace(s, name=f"{prefix}.{i}.{s.kind}") for i, s in enumerate(specs))


def _block(name, kind, f, branches, **kw) -> BlockSpec:
    branches = tuple(_named(f"{name}.br{b}", br) for b, br in enumerate(branches))
    kw = {k: _named(f"{name}.{k}", v) if k in ("merge", "post") else v for k, v in kw.items()}
    return BlockSpec(name=name, kind=kind, f=f, branches=branches, **kw)


def _proposed_block(name, f, norm, act) -> BlockSpec:
    pre = _pre(norm, act)
    return _block(name, "proposed_inception", f, (
        (*pre, _conv(f)),
        (*pre, _conv(f)),
        (*pre, _conv(f), *pre, LayerSpec("fconv3", out=f)),
        (LayerSpec("maxpool", kernel=(3, 3), stride=1, padding="same"), *pre, _conv(f)),
    ))


def _bbnn_block(name, f, norm, act, *, keep_3x3=True, wide_kernel=5, se=False,
                lstm=False) -> BlockSpec:
    pre = _pre(norm, act)
    if lstm:
        second = (*pre, _conv(f), LayerSpec("time_lstm", out=f))
    elif keep_3x3:
        second = (*pre, _conv(f), *pre, _conv(f, 3))
    else:
        # only the 3x3 conv itself is dropped; its bottleneck and pre-activation stay
        second = (*pre, _conv(f), *pre)
    branches = (
        (*pre, _conv(f)),
        second,
        (*pre, _conv(f), *pre, _conv(f, wide_kernel)),
        (LayerSpec("maxpool", kernel=(3, 3), stride=1, padding="same"), *pre, _conv(f)),
    )
    kind = "with_lstm" if lstm else "with_se" if se else "bbnn_inception"
    post = (LayerSpec("se", arg=4),) if se else ()
    return _block(name, kind, f, branches, post=post)


def _resnet_block(name, f, width_in, norm, act) -> BlockSpec:
    pre = _pre(norm, act)
    return _block(name, "inception_resnet_v1", f, (
        (*pre, _conv(f)),
        (*pre, _conv(f), *pre, _conv(f, 3)),
        (*pre, _conv(f), *pre, _conv(f, 3), *pre, _conv(f, 3)),
    ), merge=(_conv(width_in),), residual_scale=0.1, post=(_conv(4 * f),))


def _xception_block(name, f, norm, act) -> BlockSpec:
    return _block(name, "xception_sep", f, (
        (*_pre(norm, act), LayerSpec("sepconv", out=4 * f, kernel=(3, 3))),
    ))


_VARIANT_BLOCKS = {
    VariantId.Blocks1: 1, VariantId.Blocks2: 2, VariantId.Blocks5: 5,
    VariantId.Proposed: 4, VariantId.Xception: 4,
}


def build_arch(variant, num_classes: int = 10, *, num_blocks: Optional[int] = None,
               f: Optional[int] = None, k0: Optional[int] = None,
               transition_width: Optional[int] = None) -> ArchSpec:
    """Canonical spec for ``variant``; keyword overrides shrink or grow the network."""
    variant = VariantId.parse(variant)
    if num_classes < 2:
        raise ArchError("num_classes must be >= 2")
    overrides = {k: v for k, v in dict(num_blocks=num_blocks, f=f, k0=k0,
                                       transition_width=transition_width).items() if v is not None}
    n_blocks = num_blocks or _VARIANT_BLOCKS.get(variant, 3)
    f = f or 32
    k0 = k0 or 32
    tw = transition_width or 32
    V = VariantId
    act = "selu" if variant is V.Selu else "relu"
    norm = "group_norm" if variant is V.GroupNorm else "batch_norm"
    init = "lecun_normal" if variant in (V.Proposed, V.Selu) else "glorot_uniform"
    pre = _pre(norm, act)

    if variant is V.InceptionResnetV1:
        shallow = _named("stem", (
            _conv(k0, 3, stride=2), *pre, _conv(k0, 3), *pre, _conv(2 * k0, 3), *pre,
            LayerSpec("maxpool", kernel=(3, 3), stride=2, padding="same"),
        ))
    else:
        shallow = _named("shallow", (
            _conv(k0, 3), *pre, LayerSpec("maxpool", kernel=(2, 2), stride=2, padding="valid"),
        ))
    anchor = 2 * k0 if variant is V.InceptionResnetV1 else k0
    widths = growth_sequence(n_blocks, f, anchor)

    blocks = []
    for l in range(1, n_blocks + 1):
        name = f"block{l}"
        if variant is V.Proposed:
            blk = _proposed_block(name, f, norm, act)
        elif variant is V.Xception:
            blk = _xception_block(name, f, norm, act)
        elif variant is V.InceptionResnetV1:
            blk = _resnet_block(name, f, widths[l - 1], norm, act)
        else:
            blk = _bbnn_block(name, f, norm, act,
                              keep_3x3=variant is not V.Remove3x3,
                              wide_kernel=3 if variant is V.Replace5x5 else 5,
                              se=variant is V.SqueezeExcite, lstm=variant is V.Lstm)
        blocks.append(blk)

    transition = _named("transition", (
        *pre, _conv(tw), LayerSpec("avgpool", kernel=(2, 2), stride=2),
    ))
    head = [LayerSpec("gmp" if variant is V.GlobalMaxPool else "gap")]
    if variant is V.Dropout:
        head.append(LayerSpec("dropout", arg=0.6))
    head += [LayerSpec("dense", out=num_classes), LayerSpec("softmax")]
    decision = _named("decision", head)

    arch = ArchSpec(
        variant=variant, num_classes=num_classes, f=f, num_blocks=n_blocks, k0=k0,
        transition_width=tw, initializer=init, activation=act, norm=norm,
        label_smoothing=0.1 if variant is V.LabelSmoothing else 0.0,
        shallow=shallow, blocks=tuple(blocks), transition=transition, decision=decision,
        overrides=overrides,
    )
    _check_channels(arch)
    return arch


def _check_channels(arch: ArchSpec) -> None:
    run = _ShapeRun()
    _walk(arch, run, (1, 1, 64, 64))
    names = [n for n, _ in run.params_order]
    if len(names) != len(set(names)):
        raise ArchError("duplicate parameter names")
    expected = growth_sequence(arch.num_blocks, arch.f, arch.growth_anchor)
    for l in range(1, arch.num_blocks + 1):
        got = run.marks[f"block{l}.input"][1]
        if got != expected[l - 1]:
            raise ArchError(f"block{l} input has {got} channels, growth rule says {expected[l - 1]}")
    got = run.marks["module.output"][1]
    if got != expected[-1]:
        raise ArchError(f"module output has {got} channels, growth rule says {expected[-1]}")


# ---------------------------------------------------------------- walkers


def _walk(arch: ArchSpec, run, x, block_hook=None):
    for spec in arch.shallow:
        x = run.layer(spec, x)
    feats = [x]
    for l, block in enumerate(arch.blocks, 1):
        inp = run.concat(f"block{l}.input", feats)
        outs = []
        for branch in block.branches:
            h = inp
            for spec in branch:
                h = run.layer(spec, h)
            outs.append(h)
        out = run.concat(f"{block.name}.concat", outs)
        if block.merge:
            for spec in block.merge:
                out = run.layer(spec, out)
            out = run.residual(f"{block.name}.residual", inp, out, block.residual_scale)
        for spec in block.post:
            out = run.layer(spec, out)
        if block_hook is not None:
            out = block_hook(l, out)
        run.mark(f"{block.name}.output", out)
        feats.append(out)
    x = run.concat("module.output", feats)
    for spec in arch.transition:
        x = run.layer(spec, x)
    for spec in arch.decision:
        x = run.layer(spec, x)
    return x


def _param_shapes(spec: LayerSpec, c: int) -> tuple[dict, dict, int]:
    """(trainable shapes, buffer shapes, output channels) for a layer with ``c`` inputs."""
    k, o = spec.kind, spec.out
    if k == "conv":
        kh, kw = spec.kernel
        return {"w": (o, c, kh, kw), "b": (o,)}, {}, o
    if k == "fconv3":
        return {"w1": (o, c, 3, 1), "b1": (o,), "w2": (o, o, 1, 3), "b2": (o,)}, {}, o
    if k == "sepconv":
        kh, kw = spec.kernel
        return {"dw": (c, 1, kh, kw), "db": (c,), "pw": (o, c, 1, 1), "pb": (o,)}, {}, o
    if k == "batch_norm":
        return {"gamma": (c,), "beta": (c,)}, {"running_mean": (c,), "running_var": (c,)}, c
    if k == "group_norm":
        if c % int(spec.arg):
            raise ArchError(f"{spec.name}: {c} channels not divisible into groups of {int(spec.arg)}")
        return {"gamma": (c,), "beta": (c,)}, {}, c
    if k == "dense":
        return {"w": (c, o), "b": (o,)}, {}, o
    if k == "se":
        r = int(spec.arg)
        if c % r:
            raise ArchError(f"{spec.name}: {c} channels not divisible by reduction {r}")
        return {"w1": (c, c // r), "b1": (c // r,), "w2": (c // r, c), "b2": (c,)}, {}, c
    if k == "time_lstm":
        return {"wx": (c, 4 * o), "wh": (o, 4 * o), "b": (4 * o,)}, {}, o
    return {}, {}, c


_CONV_KINDS = ("conv", "fconv3", "sepconv")


class _ShapeRun:
    def __init__(self):
        self.trace: list[tuple[str, str, tuple]] = []
        self.params_order: list[tuple[str, tuple]] = []
        self.buffers_order: list[tuple[str, tuple]] = []
        self.layer_params: list[tuple[str, str, int]] = []
        self.convs: list[LayerSpec] = []
        self.marks: dict[str, tuple] = {}

    def layer(self, spec: LayerSpec, shape):
        n, c = shape[:2]
        ps, bs, c_out = _param_shapes(spec, c)
        for p, s in ps.items():
            self.params_order.append((f"{spec.name}.{p}", s))
        for p, s in bs.items():
            self.buffers_order.append((f"{spec.name}.{p}", s))
        k = spec.kind
        if k in _CONV_KINDS:
            self.convs.append(spec)
        if k in ("conv", "sepconv"):
            h, w = L.conv_output_hw(shape[2], shape[3], spec.kernel, spec.stride, spec.padding)
            out = (n, c_out, h, w)
        elif k == "fconv3":
            out = (n, c_out) + tuple(shape[2:])
        elif k == "maxpool":
            h, w = L.conv_output_hw(shape[2], shape[3], spec.kernel, spec.stride, spec.padding)
            out = (n, c, h, w)
        elif k == "avgpool":
            h, w = L.conv_output_hw(shape[2], shape[3], spec.kernel, spec.stride, "valid")
            out = (n, c, h, w)
        elif k in ("gap", "gmp"):
            out = (n, c)
        elif k == "dense":
            out = (n, c_out)
        elif k == "time_lstm":
            out = (n, c_out) + tuple(shape[2:])
        else:
            out = tuple(shape)
        self.layer_params.append((spec.name, k, int(sum(np.prod(s) for s in ps.values()))))
        self.trace.append((spec.name, k, out))
        return out

    def concat(self, name, shapes):
        ref = shapes[0]
        for s in shapes[1:]:
            if s[0] != ref[0] or s[2:] != ref[2:]:
                raise ArchError(f"{name}: cannot concatenate {ref} with {s}")
        out = (ref[0], sum(s[1] for s in shapes)) + tuple(ref[2:])
        self.mark(name, out)
        return out

    def residual(self, name, x, y, scale):
        if tuple(x) != tuple(y):
            raise ArchError(f"{name}: residual shapes {x} and {y} differ")
        self.mark(name, x)
        return x

    def mark(self, name, shape):
        self.marks[name] = tuple(shape)
        self.trace.append((name, "marker", tuple(shape)))


class _TensorRun:
    def __init__(self, params: dict, buffers: dict, training: bool, rng=None):
        self.p = params
        self.buffers = buffers
        self.training = training
        self.rng = rng

    def layer(self, spec: LayerSpec, x: Tensor) -> Tensor:
        k, p, n = spec.kind, self.p, spec.name
        if k == "conv":
            return L.conv2d(x, p[n + ".w"], p[n + ".b"], spec.stride, spec.padding)
        if k == "fconv3":
            return L.factorized_conv3x3(x, p[n + ".w1"], p[n + ".b1"], p[n + ".w2"], p[n + ".b2"])
        if k == "sepconv":
            return L.separable_conv2d(x, p[n + ".dw"], p[n + ".db"], p[n + ".pw"], p[n + ".pb"])
        if k == "batch_norm":
            return L.batch_norm(x, p[n + ".gamma"], p[n + ".beta"],
                                self.buffers[n + ".running_mean"], self.buffers[n + ".running_var"],
                                training=self.training)
        if k == "group_norm":
            return L.group_norm(x, p[n + ".gamma"], p[n + ".beta"], int(spec.arg))
        if k in ("relu", "selu"):
            return L.activation(x, k)
        if k == "maxpool":
            return L.max_pool(x, spec.kernel[0], spec.stride, spec.padding)
        if k == "avgpool":
            return L.avg_pool(x, spec.kernel[0], spec.stride)
        if k == "gap":
            return L.global_avg_pool(x)
        if k == "gmp":
            return L.global_max_pool(x)
        if k == "dropout":
            return L.dropout(x, spec.arg, self.training, self.rng)
        if k == "dense":
            return L.dense(x, p[n + ".w"], p[n + ".b"])
        if k == "se":
            return L.se_block(x, p[n + ".w1"], p[n + ".b1"], p[n + ".w2"], p[n + ".b2"])
        if k == "time_lstm":
            return L.time_lstm(x, p[n + ".wx"], p[n + ".wh"], p[n + ".b"])
        if k == "softmax":
            return x  # the logits path stops here; probabilities are formed by the caller
        raise ArchError(f"unknown layer kind {k!r}")

    def concat(self, name, parts):
        return concat_channels(parts)

    def residual(self, name, x, y, scale):
        return x + y * scale

    def mark(self, name, x):
        pass


# ------------------------------------------------------- tracing/accounting


@dataclass
class ParamTable:
    rows: list  # (layer name, kind, trainable count)
    total: int

    def render(self) -> str:
        width = max(len(r[0]) for r in self.rows) if self.rows else 5
        lines = [f"{'layer':<{width}}  {'kind':<11} {'params':>9}"]
        lines += [f"{n:<{width}}  {k:<11} {c:>9,}" for n, k, c in self.rows]
        lines.append(f"{'total trainable':<{width}}  {'':<11} {self.total:>9,}")
        return "\n".join(lines)

    def to_csv(self) -> str:
        out = ["layer,kind,params"] + [f"{n},{k},{c}" for n, k, c in self.rows]
        out.append(f"total,,{self.total}")
        return "\n".join(out) + "\n"


def _shape_run(arch: ArchSpec, input_shape=DEFAULT_INPUT_SHAPE) -> _ShapeRun:
    if len(input_shape) != 4:
        raise ArchError(f"input shape must be 4-D (N, C, mels, frames), got {input_shape}")
    run = _ShapeRun()
    _walk(arch, run, tuple(input_shape))
    return run


def param_count(arch: ArchSpec) -> ParamTable:
    run = _shape_run(arch)
    rows = [r for r in run.layer_params if r[2] > 0]
    return ParamTable(rows, sum(r[2] for r in rows))


def shape_trace(arch: ArchSpec, input_shape=DEFAULT_INPUT_SHAPE) -> list[tuple[str, tuple]]:
    """Every layer (and concat/residual marker) with its output shape, in execution order."""
    run = _shape_run(arch, input_shape)
    return [(name, shape) for name, _, shape in run.trace]


def conv_census(arch: ArchSpec) -> dict:
    """Count convolution-class layers; a factorized 3x1+1x3 pair counts as one 3x3."""
    counts = {"total": 0, "1x1": 0, "3x3": 0, "5x5": 0, "separable": 0}
    for spec in _shape_run(arch).convs:
        counts["total"] += 1
        if spec.kind == "fconv3":
            counts["3x3"] += 1
        elif spec.kind == "sepconv":
            counts["separable"] += 1
        else:
            key = f"{spec.kernel[0]}x{spec.kernel[1]}"
            counts[key] = counts.get(key, 0) + 1
    return counts


def block_input_channels(arch: ArchSpec) -> list[int]:
    run = _shape_run(arch)
    return [run.marks[f"block{l}.input"][1] for l in range(1, arch.num_blocks + 1)]


# ---------------------------------------------------------- initialization


def _fans(name: str, shape: tuple) -> tuple[int, int]:
    if len(shape) == 4:
        receptive = shape[2] * shape[3]
        if name.endswith(".dw"):
            return receptive, receptive
        return shape[1] * receptive, shape[0] * receptive
    return shape[0], shape[1]


def init_params(arch: ArchSpec, seed: int = 0) -> tuple[dict, dict]:
    """Deterministic parameters and buffers.

    Kernels get lecun-normal (std ``sqrt(1/fan_in)``) or glorot-uniform per
    ``arch.initializer``; biases and betas 0, gammas 1, running variance 1.
    """
    run = _shape_run(arch)
    rng = np.random.default_rng(seed)
    dtype = get_dtype()
    params = {}
    for name, shape in run.params_order:
        leaf = name.rsplit(".", 1)[1]
        if leaf == "gamma":
            data = np.ones(shape)
        elif leaf in ("beta", "b", "b1", "b2", "db", "pb"):
            data = np.zeros(shape)
        else:
            fan_in, fan_out = _fans(name, shape)
            if arch.initializer == "lecun_normal":
                data = rng.normal(0.0, np.sqrt(1.0 / fan_in), size=shape)
            elif arch.initializer == "glorot_uniform":
                limit = np.sqrt(6.0 / (fan_in + fan_out))
                data = rng.uniform(-limit, limit, size=shape)
            else:
                raise ArchError(f"unknown initializer {arch.initializer!r}")
        params[name] = Tensor(data.astype(dtype), requires_grad=True)
    buffers = {}
    for name, shape in run.buffers_order:
        fill = 1.0 if name.endswith("running_var") else 0.0
        buffers[name] = np.full(shape, fill, dtype=np.float64)
    return params, buffers


def count_stored(params: dict) -> int:
    """Sum of stored trainable values, independent of the layer table."""
    return int(sum(t.data.size for t in params.values()))


# ------------------------------------------------------------------ model


class Model:
    def __init__(self, arch: ArchSpec, params: dict, buffers: dict):
        self.arch = arch
        self.params = params
        self.buffers = buffers

    @classmethod
    def create(cls, arch: ArchSpec, seed: int = 0) -> "Model":
        return cls(arch, *init_params(arch, seed))

    def logits(self, x, mode: str = "eval", rng: Optional[np.random.Generator] = None,
               block_hook: Optional[Callable[[int, Tensor], Tensor]] = None) -> Tensor:
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        if not isinstance(x, Tensor):
            x = Tensor(x)
        run = _TensorRun(self.params, self.buffers, mode == "train", rng)
        return _walk(self.arch, run, x, block_hook)

    def predict_proba(self, x) -> np.ndarray:
        with no_grad():
            return L.softmax(self.logits(x, "eval").data)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def state_arrays(self) -> tuple[dict, dict]:
        return ({k: t.data.copy() for k, t in self.params.items()},
                {k: v.copy() for k, v in self.buffers.items()})

    def load_arrays(self, params: dict, buffers: dict) -> None:
        if set(params) != set(self.params) or set(buffers) != set(self.buffers):
            raise ArchError("parameter names do not match this architecture")
        for k, v in params.items():
            if v.shape != self.params[k].shape:
                raise ArchError(f"{k}: shape {v.shape} != {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=self.params[k].dtype)
        for k, v in buffers.items():
            self.buffers[k] = np.array(v, dtype=np.float64)


def forward(model: Model, x, mode: str = "eval", rng=None) -> Tensor:
    """Class probabilities, one row per sample."""
    z = model.logits(x, mode, rng)
    shifted = z - z.data.max(axis=1, keepdims=True)
    e = shifted.exp()
    return e / e.sum(axis=1, keepdims=True)


def block_input(shallow: Tensor, prior_outputs: Sequence[Tensor]) -> Tensor:
    """Input of the next block: shallow features then earlier block outputs, by channel."""
    return concat_channels([shallow, *prior_outputs])
