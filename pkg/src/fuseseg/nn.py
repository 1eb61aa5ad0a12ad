"""Model assembly: residual blocks, global attention blocks, and the full
encoder-decoder segmentation network.

The network is a 3D-DenseUNet variant: a stem conv, three encoder stages
(pre-activated residual block + stride-2 downsampling conv), a bottleneck
attention block, and three decoder stages that upsample through an attention
block whose query transform is a stride-2 deconvolution, sum with the matching
encoder skip, and run another residual block. Skips are summations, never
concatenations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .tensor import Tensor, ShapeError


@dataclass
class ModelConfig:
    """Architecture hyperparameters. ``base_channels`` 8 is the desk-scale
    default; 32 approximates the published full-scale configuration."""

    base_channels: int = 8
    enc_blocks: int = 3
    dec_blocks: int = 3
    heads: int = 2
    c_k: int | None = None  # default: channels at the attention site
    c_v: int | None = None
    dropout_p: float = 0.1
    num_classes: int = 4  # background, CSF, GM, WM
    in_channels: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.enc_blocks != self.dec_blocks:
            raise ValueError(
                f"enc_blocks ({self.enc_blocks}) must equal dec_blocks ({self.dec_blocks}) for skip pairing"
            )
        for site in range(self.enc_blocks + 1):
            ck = self.site_c_k(site)
            cv = self.site_c_v(site)
            if ck % self.heads or cv % self.heads:
                raise ValueError(
                    f"attention site {site}: c_k={ck}, c_v={cv} must be divisible by heads={self.heads}"
                )

    def stage_channels(self, i):
        """Channels of encoder stage i (1-based); stage 0 is the stem output."""
        return self.base_channels * (2 ** i)

    @property
    def bottleneck_channels(self):
        return self.base_channels * (2 ** self.enc_blocks)

    def site_channels(self, site):
        """Output channels at attention site: 0 = bottleneck, 1..dec_blocks = decoder stages."""
        if site == 0:
            return self.bottleneck_channels
        return self.bottleneck_channels // (2 ** site)

    def site_c_k(self, site):
        return self.c_k if self.c_k is not None else self.site_channels(site)

    def site_c_v(self, site):
        return self.c_v if self.c_v is not None else self.site_channels(site)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class NamedWeights(dict):
    """Ordered map parameter name -> Tensor; the unit of checkpointing and fusion."""

    def add(self, name, data, requires_grad=True):
        if name in self:
            raise ValueError(f"duplicate parameter name {name!r}")
        self[name] = Tensor(data, requires_grad=requires_grad)
        return self[name]

    def check_compatible(self, other):
        """Two weight sets are fusion-compatible iff names, order, and shapes match."""
        a, b = list(self.keys()), list(other.keys())
        if a != b:
            for x, y in zip(a, b):
                if x != y:
                    raise ShapeError(f"weight sets differ at name {x!r} vs {y!r}")
            raise ShapeError(f"weight sets differ in length: {len(a)} vs {len(b)}")
        for name in a:
            if self[name].shape != other[name].shape:
                raise ShapeError(
                    f"parameter {name!r} shape mismatch: {self[name].shape} vs {other[name].shape}"
                )

    def copy(self):
        out = NamedWeights()
        for name, t in self.items():
            out[name] = Tensor(t.data.copy(), requires_grad=t.requires_grad)
        return out

    def trainable(self):
        return ((n, t) for n, t in self.items() if t.requires_grad)

    def zero_grads(self):
        for t in self.values():
            t.grad = None


RUNNING_STAT_SUFFIXES = (".running_mean", ".running_var")


def is_running_stat(name):
    return name.endswith(RUNNING_STAT_SUFFIXES)


@dataclass
class AttentionInternals:
    """Raw arrays captured inside an attention block for verification."""

    q: np.ndarray  # [N, Sq, c_k]
    k: np.ndarray  # [N, Sk, c_k]
    v: np.ndarray  # [N, Sk, c_v]
    a: np.ndarray  # [N, heads, Sq, Sk] (pre-dropout)
    o: np.ndarray  # [N, Sq, c_v]
    y: np.ndarray  # [N, Dq, Hq, Wq, c_o]


# ---------------------------------------------------------------------------
# Weight construction
# ---------------------------------------------------------------------------


def _init_conv(w, name, shape, rng, dtype, gain=2.0):
    # gain 2 (He) only for convs that consume a ReLU6 output; convs on linear
    # inputs (stem, downsampling, attention projections, head) use gain 1 so
    # activation variance stays bounded stage over stage. The attention query
    # and key projections use a much smaller gain still: their dot products
    # are summed over c_k/heads dimensions, and an O(1) starting scale keeps
    # the softmax away from its saturated (one-hot, zero-gradient) regime.
    fan_in = int(np.prod(shape[:3])) * shape[3]
    w.add(name, rng.normal(0.0, math.sqrt(gain / fan_in), size=shape).astype(dtype))


QK_GAIN = 0.1


def _init_bias(w, name, c, dtype):
    w.add(name, np.zeros(c, dtype=dtype))


def _init_bn(w, prefix, c, dtype):
    w.add(f"{prefix}.gamma", np.ones(c, dtype=dtype))
    w.add(f"{prefix}.beta", np.zeros(c, dtype=dtype))
    w.add(f"{prefix}.running_mean", np.zeros(c, dtype=dtype), requires_grad=False)
    w.add(f"{prefix}.running_var", np.ones(c, dtype=dtype), requires_grad=False)


def _init_res_block(w, prefix, c, rng, dtype):
    for j in range(3):
        _init_bn(w, f"{prefix}.u{j}.bn", c, dtype)
        _init_conv(w, f"{prefix}.u{j}.conv.kernel", (3, 3, 3, c, c), rng, dtype)
        _init_bias(w, f"{prefix}.u{j}.conv.bias", c, dtype)


def _init_attention(w, prefix, cin, ck, cv, co, q_transform, rng, dtype):
    if q_transform == "conv1x1":
        _init_conv(w, f"{prefix}.q.kernel", (1, 1, 1, cin, ck), rng, dtype, gain=QK_GAIN)
        _init_bias(w, f"{prefix}.q.bias", ck, dtype)
    elif q_transform == "deconv3x3s2":
        # deconv kernel layout is (3, 3, 3, Cout, Cin); no bias
        _init_conv(w, f"{prefix}.q.kernel", (3, 3, 3, ck, cin), rng, dtype, gain=QK_GAIN)
    else:
        raise ValueError(f"unknown q_transform {q_transform!r}")
    _init_conv(w, f"{prefix}.k.kernel", (1, 1, 1, cin, ck), rng, dtype, gain=QK_GAIN)
    _init_bias(w, f"{prefix}.k.bias", ck, dtype)
    _init_conv(w, f"{prefix}.v.kernel", (1, 1, 1, cin, cv), rng, dtype, gain=1.0)
    _init_bias(w, f"{prefix}.v.bias", cv, dtype)
    _init_conv(w, f"{prefix}.out.kernel", (1, 1, 1, cv, co), rng, dtype, gain=1.0)
    _init_bias(w, f"{prefix}.out.bias", co, dtype)


def build_model(config: ModelConfig, rng, dtype=np.float32) -> NamedWeights:
    """Create the full weight set. Conv kernels are fan-in-scaled Gaussian
    (variance 2/fan_in), biases zero, batch-norm gamma=1 beta=0."""
    config.validate()
    w = NamedWeights()
    ch0 = config.base_channels

    _init_conv(w, "stem.in.conv.kernel", (3, 3, 3, config.in_channels, ch0), rng, dtype, gain=1.0)
    _init_bias(w, "stem.in.conv.bias", ch0, dtype)

    c = ch0
    for i in range(1, config.enc_blocks + 1):
        _init_res_block(w, f"enc{i}.res", c, rng, dtype)
        _init_conv(w, f"enc{i}.down.conv.kernel", (3, 3, 3, c, 2 * c), rng, dtype, gain=1.0)
        _init_bias(w, f"enc{i}.down.conv.bias", 2 * c, dtype)
        c *= 2

    cb = config.bottleneck_channels
    _init_attention(
        w, "mid.attn", cb, config.site_c_k(0), config.site_c_v(0), cb, "conv1x1", rng, dtype
    )

    cin = cb
    for i in range(1, config.dec_blocks + 1):
        cout = cin // 2
        _init_attention(
            w,
            f"dec{i}.attn",
            cin,
            config.site_c_k(i),
            config.site_c_v(i),
            cout,
            "deconv3x3s2",
            rng,
            dtype,
        )
        _init_res_block(w, f"dec{i}.res", cout, rng, dtype)
        cin = cout

    # Residual summations roughly double activation variance at every block,
    # so a unit-gain head would emit large logits; a near-zero head starts the
    # loss at ln(num_classes) without limiting what training can reach.
    _init_conv(w, "head.out.conv.kernel", (1, 1, 1, ch0, config.num_classes), rng, dtype, gain=1e-4)
    _init_bias(w, "head.out.conv.bias", config.num_classes, dtype)
    return w


# ---------------------------------------------------------------------------
# Layer compositions
# ---------------------------------------------------------------------------


def residual_block(x, weights, prefix, mode="train"):
    """Three pre-activated units (BN -> ReLU6 -> 3^3 conv) summed with the
    identity path. A 1x1x1 projection is applied on the identity path only
    when `<prefix>.proj` weights exist (differing channel counts)."""
    h = x
    for j in range(3):
        p = f"{prefix}.u{j}"
        h = T.batchnorm3d(
            h,
            weights[f"{p}.bn.gamma"],
            weights[f"{p}.bn.beta"],
            weights[f"{p}.bn.running_mean"],
            weights[f"{p}.bn.running_var"],
            mode,
        )
        h = T.relu6(h)
        h = T.conv3d(h, weights[f"{p}.conv.kernel"], weights[f"{p}.conv.bias"], stride=1, padding=1)
    identity = x
    if f"{prefix}.proj.conv.kernel" in weights:
        identity = T.conv3d(
            identity,
            weights[f"{prefix}.proj.conv.kernel"],
            weights.get(f"{prefix}.proj.conv.bias"),
            stride=1,
            padding=0,
        )
    return identity + h


def downsample(x, weights, prefix):
    """Stride-2 3^3 conv halving each spatial extent and doubling channels."""
    _, d, h, w, _ = x.shape
    if d % 2 or h % 2 or w % 2:
        raise ShapeError(f"downsample requires even spatial extents, got {(d, h, w)}")
    return T.conv3d(
        x, weights[f"{prefix}.conv.kernel"], weights[f"{prefix}.conv.bias"], stride=2, padding=1
    )


def attention_block(
    x,
    weights,
    prefix,
    q_transform,
    heads,
    dropout_p=0.0,
    mode="train",
    rng=None,
    return_internals=False,
):
    """Global multi-head scaled dot-product attention over unfolded voxels.

    Queries come from ``q_transform`` (1x1x1 conv on the same grid, or a
    stride-2 3^3 deconv doubling the grid); keys/values are 1x1x1 convs of the
    input, so attention always attends over the input (coarse) grid. Dropout
    is applied to the attention map in train mode. The output grid equals the
    query grid.
    """
    if q_transform == "conv1x1":
        q = T.conv3d(x, weights[f"{prefix}.q.kernel"], weights[f"{prefix}.q.bias"])
    elif q_transform == "deconv3x3s2":
        q = T.deconv3d(x, weights[f"{prefix}.q.kernel"], stride=2)
    else:
        raise ValueError(f"unknown q_transform {q_transform!r}")
    k = T.conv3d(x, weights[f"{prefix}.k.kernel"], weights[f"{prefix}.k.bias"])
    v = T.conv3d(x, weights[f"{prefix}.v.kernel"], weights[f"{prefix}.v.bias"])

    n, dq, hq, wq, ck = q.shape
    _, d, h, w, _ = x.shape
    cv = v.shape[-1]
    if ck % heads or cv % heads:
        raise ShapeError(f"c_k={ck}, c_v={cv} must be divisible by heads={heads}")
    dk, dv = ck // heads, cv // heads
    sq, sk = dq * hq * wq, d * h * w
    scale = 1.0 / math.sqrt(dk)

    qs, ks, vs = T.unfold(q), T.unfold(k), T.unfold(v)

    def _split_heads(t, s, per_head):
        # [N, S, C] -> [N*heads, S, C/heads]
        t = T.reshape(t, (n, s, heads, per_head))
        t = T.permute(t, (0, 2, 1, 3))
        return T.reshape(t, (n * heads, s, per_head))

    qb = _split_heads(qs, sq, dk)
    kb = _split_heads(ks, sk, dk)
    vb = _split_heads(vs, sk, dv)
    a = T.softmax(T.mul(T.bmm(qb, T.permute(kb, (0, 2, 1))), scale), axis=2)
    a_maps = a.data.reshape(n, heads, sq, sk).copy() if return_internals else None
    a = T.dropout(a, dropout_p, mode, rng)
    ob = T.bmm(a, vb)  # [N*heads, Sq, dv]
    o = T.reshape(T.permute(T.reshape(ob, (n, heads, sq, dv)), (0, 2, 1, 3)), (n, sq, cv))
    y = T.conv3d(
        T.fold(o, (dq, hq, wq)), weights[f"{prefix}.out.kernel"], weights[f"{prefix}.out.bias"]
    )
    if return_internals:
        internals = AttentionInternals(q=qs.data, k=ks.data, v=vs.data, a=a_maps, o=o.data, y=y.data)
        return y, internals
    return y


def forward(config: ModelConfig, weights: NamedWeights, x, mode="train", rng=None):
    """Run the full network on a patch; logits share the input's spatial extents."""
    if not isinstance(x, Tensor):
        x = Tensor(x)
    if x.data.ndim != 5:
        raise ShapeError(f"expected N x D x H x W x C input, got {x.shape}")
    n, d, h, w, c = x.shape
    if c != config.in_channels:
        raise ShapeError(f"input has {c} channels, model expects {config.in_channels}")
    div = 2 ** config.enc_blocks
    if d % div or h % div or w % div:
        raise ShapeError(f"spatial extents {(d, h, w)} must be divisible by {div}")

    x = T.conv3d(x, weights["stem.in.conv.kernel"], weights["stem.in.conv.bias"], stride=1, padding=1)

    skips = []
    for i in range(1, config.enc_blocks + 1):
        x = residual_block(x, weights, f"enc{i}.res", mode)
        skips.append(x)
        x = downsample(x, weights, f"enc{i}.down")

    x = x + attention_block(
        x, weights, "mid.attn", "conv1x1", config.heads, config.dropout_p, mode, rng
    )

    for i in range(1, config.dec_blocks + 1):
        y = attention_block(
            x, weights, f"dec{i}.attn", "deconv3x3s2", config.heads, config.dropout_p, mode, rng
        )
        x = y + skips[config.enc_blocks - i]
        x = residual_block(x, weights, f"dec{i}.res", mode)

    return T.conv3d(x, weights["head.out.conv.kernel"], weights["head.out.conv.bias"])


def predict(config: ModelConfig, weights: NamedWeights, patch):
    """Per-voxel class ids; ties break toward the lowest class index."""
    with T.no_grad():
        logits = forward(config, weights, patch, mode="eval")
    return np.argmax(logits.data, axis=-1)


def parameter_count(weights: NamedWeights):
    """(per-stage counts, total) over learnable parameters; running stats excluded."""
    stages: dict[str, int] = {}
    total = 0
    for name, t in weights.trainable():
        stage = name.split(".", 1)[0]
        stages[stage] = stages.get(stage, 0) + t.size
        total += t.size
    return stages, total
