"""Network builders and the forward/backward drivers.

Three families are supported:

* ``mlp``: ``depth - 1`` hidden blocks ``linear -> norm -> relu`` and a plain
  linear classifier.  Normalizer slot *k* sits after hidden linear *k*.
* ``cnn``: ``depth - 1`` blocks ``conv3x3 -> norm -> relu`` with stride-2
  downsampling stages, global average pooling and a linear classifier.
* ``residual``: a conv stem followed by bottleneck blocks
  ``conv1x1 -> N1 -> relu -> conv3x3 -> N2 -> relu -> conv1x1 -> N3 (+skip) -> relu``
  in which a block variant may swap exactly one of N1/N2/N3 for a
  batch-free normalizer.

Every normalizer gets a 1-based slot index in forward order.  BN layers are
addressed by that slot index throughout the analysis code.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterator, Optional

import numpy as np

from . import layers as L
from .errors import CacheConsumedError, ConfigError, ShapeError
from .normalization import (
    DEFAULT_EPS,
    BatchNormState,
    NormSpec,
    bn_backward,
    bn_forward_infer,
    bn_forward_train,
    bn_update_running,
    norm_backward,
    norm_forward,
)
from .tensor import RngState, Tensor

Hook = Callable[[int, Tensor], None]


# -- specs ----------------------------------------------------------------

@dataclass(frozen=True)
class BlockVariant:
    """Which bottleneck slot (if any) holds a batch-free normalizer."""

    kind: str = "baseline"  # baseline | p1 | p2 | p3
    bfn: Optional[str] = None  # normalizer token, e.g. "gn:4" or "in"

    def __post_init__(self):
        if self.kind not in ("baseline", "p1", "p2", "p3"):
            raise ConfigError(f"unknown block variant {self.kind!r}")
        if self.kind != "baseline":
            if self.bfn is None:
                raise ConfigError(f"variant {self.kind} needs a batch-free normalizer")
            if NormSpec.parse(self.bfn).kind not in ("gn", "in", "ln"):
                raise ConfigError(f"{self.bfn!r} is not a batch-free normalizer")

    @classmethod
    def parse(cls, token: str) -> "BlockVariant":
        t = token.strip().lower()
        if t == "baseline":
            return cls()
        kind, _, bfn = t.partition(":")
        return cls(kind, bfn or "gn")

    def token(self) -> str:
        return "baseline" if self.kind == "baseline" else f"{self.kind}:{self.bfn}"

    def slot_norms(self) -> list[str]:
        norms = ["bn", "bn", "bn"]
        if self.kind != "baseline":
            norms[int(self.kind[1]) - 1] = self.bfn
        return norms


def assign_substitution(block_count: int, pattern: str) -> list[bool]:
    """Which 1-based blocks get the XBN variant: ALL, or every 2nd/4th/8th block."""
    if block_count < 1:
        raise ConfigError("block_count must be >= 1")
    p = pattern.strip().upper()
    if p == "ALL":
        return [True] * block_count
    if p == "NONE":
        return [False] * block_count
    if p in ("D2", "D4", "D8"):
        step = int(p[1])
        return [(i % step) == 0 for i in range(1, block_count + 1)]
    raise ConfigError(f"unknown substitution pattern {pattern!r}")


def gnbn_pattern(hidden: int, groups: int = 4) -> list[str]:
    """GN on odd hidden layers, BN on even ones (1-based)."""
    return [f"gn:{groups}" if k % 2 == 1 else "bn" for k in range(1, hidden + 1)]


def _parse_or_config_error(parse, token):
    try:
        return parse(token)
    except ValueError as e:
        raise ConfigError(str(e)) from None


@dataclass
class NetworkSpec:
    arch: str = "mlp"
    depth: int = 20
    width: int = 128
    norm_pattern: list = field(default_factory=list)
    block_count: int = 4
    variants: list = field(default_factory=list)
    expansion: int = 4
    downsample: int = 2
    input_shape: tuple = (784,)
    num_classes: int = 10
    seed: int = 0
    affine: bool = False
    eps: float = DEFAULT_EPS
    alpha: float = 0.9
    # Multipliers on the He std for the hidden MLP/CNN layers and for the classifier.
    init_gain: float = 1.0
    head_gain: float = 1.0

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        self.norm_pattern = [str(t) for t in self.norm_pattern]
        self.variants = [v if isinstance(v, str) else BlockVariant(**v).token() for v in self.variants]
        if self.arch not in ("mlp", "cnn", "residual"):
            raise ConfigError(f"unknown architecture {self.arch!r}")
        if self.arch in ("mlp", "cnn"):
            if self.depth < 2:
                raise ConfigError("depth must be >= 2")
            if not self.norm_pattern:
                self.norm_pattern = ["bn"] * (self.depth - 1)
            if len(self.norm_pattern) != self.depth - 1:
                raise ConfigError(f"norm pattern has {len(self.norm_pattern)} entries, "
                                  f"expected {self.depth - 1} hidden layers")
            for t in self.norm_pattern:
                _parse_or_config_error(NormSpec.parse, t)
        else:
            if self.block_count < 1:
                raise ConfigError("block_count must be >= 1")
            if not self.variants:
                self.variants = ["baseline"] * self.block_count
            if len(self.variants) != self.block_count:
                raise ConfigError("variant assignment length must equal block_count")
            for v in self.variants:
                _parse_or_config_error(BlockVariant.parse, v)
        if self.width < 1 or self.num_classes < 2:
            raise ConfigError("width must be positive and num_classes >= 2")
        if not (self.init_gain > 0 and self.head_gain > 0):
            raise ConfigError("init gains must be positive")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown network fields: {sorted(unknown)}")
        return cls(**d)


# -- modules --------------------------------------------------------------

class Module:
    """A layer with its own forward cache and parameter gradients."""

    def __init__(self):
        self.grads: dict[str, Tensor] = {}

    def params(self) -> list[tuple[str, Tensor]]:
        return []

    def children(self) -> list["Module"]:
        return []

    def forward(self, x: Tensor, train: bool, hook: Optional[Hook] = None) -> Tensor:
        raise NotImplementedError

    def backward(self, dy: Tensor) -> Tensor:
        raise NotImplementedError

    def walk(self) -> Iterator["Module"]:
        yield self
        for c in self.children():
            yield from c.walk()


class Linear(Module):
    def __init__(self, p: L.LinearParams):
        super().__init__()
        self.p = p
        self.cache = None

    def params(self):
        out = [("weight", self.p.weight)]
        if self.p.bias is not None:
            out.append(("bias", self.p.bias))
        return out

    def forward(self, x, train, hook=None):
        y, cache = L.linear_forward(self.p, x)
        self.cache = cache if train else None
        return y

    def backward(self, dy):
        dx, dw, db = L.linear_backward(self.cache, dy)
        self.grads = {"weight": dw}
        if db is not None:
            self.grads["bias"] = db
        return dx


class Conv2d(Module):
    def __init__(self, p: L.Conv2dParams):
        super().__init__()
        self.p = p
        self.cache = None

    def params(self):
        out = [("weight", self.p.kernels)]
        if self.p.bias is not None:
            out.append(("bias", self.p.bias))
        return out

    def forward(self, x, train, hook=None):
        y, cache = L.conv2d_forward(self.p, x)
        self.cache = cache if train else None
        return y

    def backward(self, dy):
        dx, dk, db = L.conv2d_backward(self.cache, dy)
        self.grads = {"weight": dk}
        if db is not None:
            self.grads["bias"] = db
        return dx


class ReLU(Module):
    def forward(self, x, train, hook=None):
        y, cache = L.relu_forward(x)
        self.cache = cache if train else None
        return y

    def backward(self, dy):
        return L.relu_backward(self.cache, dy)


class Flatten(Module):
    def forward(self, x, train, hook=None):
        self.shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy):
        return dy.reshape(self.shape)


class GlobalAvgPool(Module):
    def forward(self, x, train, hook=None):
        y, cache = L.global_avg_pool_forward(x)
        self.cache = cache if train else None
        return y

    def backward(self, dy):
        return L.global_avg_pool_backward(self.cache, dy)


class Norm(Module):
    """One normalizer slot.  BN keeps a :class:`BatchNormState`."""

    def __init__(self, spec: NormSpec, features: int, slot: int, affine: bool,
                 eps: float = DEFAULT_EPS, alpha: float = 0.9):
        super().__init__()
        self.spec = spec
        self.slot = slot
        self.features = features
        self.eps = eps
        self.cache = None
        self.pending_stats = None
        self.bn: Optional[BatchNormState] = None
        self.gamma = self.beta = None
        if spec.kind == "bn":
            self.bn = BatchNormState.fresh(features, alpha, eps, affine)
        elif spec.kind != "none":
            if spec.kind == "gn" and features % spec.groups:
                raise ConfigError(f"GN group count {spec.groups} does not divide "
                                  f"{features} channels (slot {slot})")
            if affine:
                self.gamma, self.beta = np.ones(features), np.zeros(features)

    @property
    def is_bn(self) -> bool:
        return self.bn is not None

    def params(self):
        g, b = (self.bn.gamma, self.bn.beta) if self.is_bn else (self.gamma, self.beta)
        return [] if g is None else [("gamma", g), ("beta", b)]

    def buffers(self):
        return [("running_mean", self.bn.running_mean), ("running_var", self.bn.running_var)] \
            if self.is_bn else []

    def forward(self, x, train, hook=None):
        if self.spec.kind == "none":
            return x
        if self.is_bn:
            if hook is not None:
                hook(self.slot, x)
            self.bn.mode = "train" if train else "infer"
            if not train:
                self.cache = None
                return bn_forward_infer(self.bn, x)
            y, self.cache, self.pending_stats = bn_forward_train(self.bn, x)
            return y
        y, cache, _, _ = norm_forward(x, self.spec.scheme(x.ndim), self.eps, self.gamma, self.beta)
        self.cache = cache if train else None
        return y

    def backward(self, dy):
        if self.spec.kind == "none":
            return dy
        dx, dg, db = (bn_backward if self.is_bn else norm_backward)(self.cache, dy)
        self.grads = {} if dg is None else {"gamma": dg, "beta": db}
        return dx

    def commit_stats(self):
        if self.is_bn and self.pending_stats is not None:
            self.bn = bn_update_running(self.bn, self.pending_stats)
            self.pending_stats = None


class Sequential(Module):
    def __init__(self, mods: list[Module]):
        super().__init__()
        self.mods = mods

    def children(self):
        return self.mods

    def forward(self, x, train, hook=None):
        for m in self.mods:
            x = m.forward(x, train, hook)
        return x

    def backward(self, dy):
        for m in reversed(self.mods):
            dy = m.backward(dy)
        return dy


class Bottleneck(Module):
    def __init__(self, main: Sequential, shortcut: Optional[Sequential]):
        super().__init__()
        self.main = main
        self.shortcut = shortcut
        self.relu = ReLU()

    def children(self):
        return [self.main] + ([self.shortcut] if self.shortcut is not None else [])

    @property
    def norms(self) -> list[Norm]:
        return [m for m in self.main.mods if isinstance(m, Norm)]

    def forward(self, x, train, hook=None):
        h = self.main.forward(x, train, hook)
        s = self.shortcut.forward(x, train, hook) if self.shortcut is not None else x
        return self.relu.forward(h + s, train)

    def backward(self, dy):
        d = self.relu.backward(dy)
        dx = self.main.backward(d)
        return dx + (self.shortcut.backward(d) if self.shortcut is not None else d)


# -- network --------------------------------------------------------------

class Network:
    def __init__(self, spec: NetworkSpec, body: Sequential, blocks: Optional[list] = None):
        self.spec = spec
        self.body = body
        self.blocks: list[Bottleneck] = blocks or []
        self.norms: list[Norm] = [m for m in body.walk() if isinstance(m, Norm)]
        self._live = False

    @property
    def bn_layers(self) -> list[Norm]:
        return [n for n in self.norms if n.is_bn]

    def bn_layer(self, slot: int) -> Norm:
        for n in self.norms:
            if n.slot == slot and n.is_bn:
                return n
        raise IndexError(f"no BN layer at slot {slot}")

    def modules(self) -> Iterator[Module]:
        return self.body.walk()

    def param_items(self) -> Iterator[tuple[Module, str, Tensor]]:
        for m in self.body.walk():
            for name, t in m.params():
                yield m, name, t

    def state_arrays(self) -> list[Tensor]:
        """Parameters then BN running statistics, per module in declaration order."""
        out = []
        for m in self.body.walk():
            out.extend(t for _, t in m.params())
            if isinstance(m, Norm):
                out.extend(t for _, t in m.buffers())
        return out

    def load_state_arrays(self, arrays: list[Tensor]):
        targets = self.state_arrays()
        if len(arrays) != len(targets):
            raise ShapeError(f"expected {len(targets)} arrays, got {len(arrays)}")
        for dst, src in zip(targets, arrays):
            if dst.size != src.size:
                raise ShapeError(f"array size mismatch: {dst.size} vs {src.size}")
            dst[...] = src.reshape(dst.shape)

    def forward(self, x: Tensor, mode: str = "infer", hook: Optional[Hook] = None) -> Tensor:
        if mode not in ("train", "infer"):
            raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
        want = self.spec.input_shape
        if x.ndim != len(want) + 1 or tuple(x.shape[1:]) != want:
            if x.ndim >= 2 and int(np.prod(x.shape[1:])) == int(np.prod(want)):
                x = x.reshape((x.shape[0],) + want)
            else:
                raise ShapeError(f"network expects inputs of shape [m, {want}], got {x.shape}")
        train = mode == "train"
        out = self.body.forward(x, train, hook)
        self._live = train
        return out

    def backward(self, dlogits: Tensor) -> Tensor:
        if not self._live:
            raise CacheConsumedError("network (no live train-mode forward)")
        self._live = False
        return self.body.backward(dlogits)

    def commit_bn_stats(self):
        for n in self.bn_layers:
            n.commit_stats()

    def release(self):
        """Drop forward caches and uncommitted batch statistics (after an evaluation pass)."""
        for m in self.modules():
            if hasattr(m, "cache"):
                m.cache = None
            if isinstance(m, Norm):
                m.pending_stats = None
            if isinstance(m, Bottleneck):
                m.relu.cache = None
        self._live = False


def forward(net: Network, batch: Tensor, mode: str = "infer", capture: bool = False):
    """Run the network; with ``capture`` also return every BN layer's input in order."""
    captures: list[Tensor] = []
    hook = (lambda slot, x: captures.append(x.copy())) if capture else None
    logits = net.forward(batch, mode, hook)
    return logits, captures


@dataclass
class SGD:
    """Plain / momentum SGD; full-batch GD is ``SGD(lr)`` on the whole set."""

    lr: float
    momentum: float = 0.0
    weight_decay: float = 0.0
    velocity: dict = field(default_factory=dict)

    def step(self, net: Network):
        for m, name, p in net.param_items():
            g = m.grads.get(name)
            if g is None:
                continue
            if self.weight_decay and name == "weight":
                g = g + self.weight_decay * p
            if self.momentum:
                key = id(p)
                v = self.velocity.get(key)
                v = g.copy() if v is None else self.momentum * v + g
                self.velocity[key] = v
                g = v
            p -= self.lr * g


def backward_and_update(net: Network, dlogits: Tensor, optimizer: SGD) -> Network:
    """Backpropagate, apply one optimizer step, commit this step's BN statistics."""
    net.backward(dlogits)
    optimizer.step(net)
    net.commit_bn_stats()
    for m in net.modules():
        m.grads = {}
    return net


# -- builders -------------------------------------------------------------

def _rng(spec: NetworkSpec) -> RngState:
    return RngState(spec.seed).split(0)


def build_mlp(spec: NetworkSpec) -> Network:
    if spec.arch != "mlp":
        raise ConfigError("build_mlp needs an mlp spec")
    rng = _rng(spec)
    n_in = int(np.prod(spec.input_shape))
    mods: list[Module] = [Flatten()] if len(spec.input_shape) > 1 else []
    for k, token in enumerate(spec.norm_pattern, start=1):
        # BN's mean subtraction cancels a preceding bias exactly, so BN layers get none.
        mods.append(Linear(L.init_linear(rng, n_in if k == 1 else spec.width, spec.width,
                                         bias=NormSpec.parse(token).kind != "bn",
                                         gain=spec.init_gain)))
        mods.append(Norm(NormSpec.parse(token), spec.width, k, spec.affine, spec.eps, spec.alpha))
        mods.append(ReLU())
    mods.append(Linear(L.init_linear(rng, spec.width, spec.num_classes, gain=spec.head_gain)))
    return Network(spec, Sequential(mods))


def cnn_strides(depth: int, downsample: int) -> list[int]:
    """Stride per conv layer: stage boundaries spread evenly over the stack."""
    n = depth - 1
    if downsample < 0 or downsample >= n + 1:
        raise ConfigError("invalid number of downsampling stages")
    at = {(s * n) // (downsample + 1) + 1 for s in range(1, downsample + 1)}
    return [2 if i in at else 1 for i in range(1, n + 1)]


def build_cnn(spec: NetworkSpec) -> Network:
    if spec.arch != "cnn":
        raise ConfigError("build_cnn needs a cnn spec")
    if len(spec.input_shape) != 3:
        raise ConfigError("cnn input_shape must be (channels, H, W)")
    rng = _rng(spec)
    c_in, h, w = spec.input_shape
    mods: list[Module] = []
    for k, (token, stride) in enumerate(zip(spec.norm_pattern, cnn_strides(spec.depth, spec.downsample)), 1):
        if stride == 2 and min(h, w) < 2:
            raise ConfigError(f"spatial size underflow at conv layer {k} ({h}x{w})")
        mods.append(Conv2d(L.init_conv2d(rng, c_in if k == 1 else spec.width, spec.width, 3, stride,
                                         bias=NormSpec.parse(token).kind == "none",
                                         gain=spec.init_gain)))
        h, w = L.conv_output_hw(h, w, 3, stride, 1)
        mods.append(Norm(NormSpec.parse(token), spec.width, k, spec.affine, spec.eps, spec.alpha))
        mods.append(ReLU())
    mods += [GlobalAvgPool(), Linear(L.init_linear(rng, spec.width, spec.num_classes,
                                                   gain=spec.head_gain))]
    net = Network(spec, Sequential(mods))
    net.feature_hw = (h, w)
    return net


def build_bottleneck(variant: BlockVariant, in_ch: int, mid_ch: int, out_ch: Optional[int] = None,
                     stride: int = 1, rng: Optional[RngState] = None, first_slot: int = 1,
                     affine: bool = True, eps: float = DEFAULT_EPS, alpha: float = 0.9) -> Bottleneck:
    if min(in_ch, mid_ch) < 1:
        raise ConfigError("channel counts must be positive")
    out_ch = out_ch or mid_ch * 4
    rng = rng or RngState(0)
    widths = [mid_ch, mid_ch, out_ch]
    # A bare "gn" token means min(64, channels) groups.
    norms = [NormSpec("gn", min(64, w)) if t == "gn" else NormSpec.parse(t)
             for t, w in zip(variant.slot_norms(), widths)]
    slot = first_slot
    mods: list[Module] = []
    convs = [(in_ch, mid_ch, 1, 1), (mid_ch, mid_ch, 3, stride), (mid_ch, out_ch, 1, 1)]
    for i, ((ci, co, k, s), ns, width) in enumerate(zip(convs, norms, widths)):
        mods.append(Conv2d(L.init_conv2d(rng, ci, co, k, s)))
        mods.append(Norm(ns, width, slot, affine, eps, alpha))
        slot += 1
        if i < 2:
            mods.append(ReLU())
    shortcut = None
    if stride != 1 or in_ch != out_ch:
        shortcut = Sequential([Conv2d(L.init_conv2d(rng, in_ch, out_ch, 1, stride)),
                               Norm(NormSpec("bn"), out_ch, slot, affine, eps, alpha)])
    return Bottleneck(Sequential(mods), shortcut)


def build_residual(spec: NetworkSpec) -> Network:
    """Conv stem (stride 2) then ``block_count`` bottlenecks in two stages."""
    if spec.arch != "residual":
        raise ConfigError("build_residual needs a residual spec")
    if len(spec.input_shape) != 3:
        raise ConfigError("residual input_shape must be (channels, H, W)")
    rng = _rng(spec)
    c_in = spec.input_shape[0]
    out_ch = spec.width * spec.expansion
    stem = [Conv2d(L.init_conv2d(rng, c_in, out_ch, 3, 2)),
            Norm(NormSpec("bn"), out_ch, 1, spec.affine, spec.eps, spec.alpha), ReLU()]
    slot = 2
    blocks = []
    second_stage = spec.block_count // 2 + 1 if spec.block_count >= 2 else None
    for b, token in enumerate(spec.variants, start=1):
        stride = 2 if b == second_stage else 1
        block = build_bottleneck(BlockVariant.parse(token), out_ch, spec.width, out_ch, stride, rng,
                                 slot, spec.affine, spec.eps, spec.alpha)
        slot += 3 + (block.shortcut is not None)
        blocks.append(block)
    head = Linear(L.init_linear(rng, out_ch, spec.num_classes, gain=spec.head_gain))
    mods = stem + blocks + [GlobalAvgPool(), head]
    return Network(spec, Sequential(mods), blocks)


def build(spec: NetworkSpec) -> Network:
    return {"mlp": build_mlp, "cnn": build_cnn, "residual": build_residual}[spec.arch](spec)


def residual_variants(block_count: int, xbn: str, pattern: str = "ALL") -> list[str]:
    """Variant tokens for a network: ``xbn`` (e.g. ``"p2:gn:4"``) where the pattern hits."""
    hits = assign_substitution(block_count, pattern)
    return [xbn if hit else "baseline" for hit in hits]
