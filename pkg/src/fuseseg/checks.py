"""Central finite-difference gradient verification for every differentiable
operation and for the full model, in 64-bit mode."""

from __future__ import annotations

import numpy as np

from . import fusion, nn
from . import tensor as T
from .nn import ModelConfig, NamedWeights
from .tensor import Tape, Tensor

FD_H = 1e-4
OP_TOL = 1e-4
END_TO_END_TOL = 1e-3


def _rel_err(analytic, numeric):
    diff = abs(analytic - numeric)
    if diff < 1e-9:  # FD noise floor at h=1e-4 in 64-bit
        return 0.0
    return diff / (abs(analytic) + 1e-8)


def _flat_coords(shape, count, rng):
    size = int(np.prod(shape))
    picks = rng.choice(size, size=min(count, size), replace=False)
    return [np.unravel_index(int(i), shape) for i in picks]


def check_gradients(loss_fn, params, coords_per_param=20, h=FD_H, rng=None):
    """Max relative error between tape gradients and central differences.

    ``loss_fn`` must rebuild the scalar loss from the params' current data on
    every call (and be deterministic).
    """
    if rng is None:
        rng = np.random.default_rng(0)
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = loss_fn()
        T.backward(loss)
    tape.clear()
    worst = 0.0
    for p in params:
        grad = p.grad if p.grad is not None else np.zeros_like(p.data)
        for coord in _flat_coords(p.data.shape, coords_per_param, rng):
            saved = p.data[coord]
            p.data[coord] = saved + h
            lp = loss_fn().item()
            p.data[coord] = saved - h
            lm = loss_fn().item()
            p.data[coord] = saved
            numeric = (lp - lm) / (2.0 * h)
            worst = max(worst, _rel_err(float(grad[coord]), numeric))
    return worst


def _proj_loss(out, proj):
    return T.sum_(T.mul(out, Tensor(proj)))


def run_op_checks(seed=0):
    """Gradient-check each differentiable op on small 64-bit inputs.

    Returns a list of {name, max_err, tol, ok} dicts.
    """
    rng = np.random.default_rng(seed)
    results = []

    def rand(*shape):
        return Tensor(rng.standard_normal(shape), requires_grad=True, dtype=np.float64)

    def run(name, loss_fn, params, tol=OP_TOL, coords=20):
        err = check_gradients(loss_fn, params, coords_per_param=coords, rng=np.random.default_rng(seed + 1))
        results.append({"name": name, "max_err": err, "tol": tol, "ok": err < tol})

    # conv3d, stride 1 and stride 2
    x = rand(1, 4, 4, 4, 2)
    k = rand(3, 3, 3, 2, 3)
    b = rand(3)
    proj = rng.standard_normal((1, 4, 4, 4, 3))
    run("conv3d_s1p1", lambda: _proj_loss(T.conv3d(x, k, b, stride=1, padding=1), proj), [x, k, b])
    proj2 = rng.standard_normal((1, 2, 2, 2, 3))
    run("conv3d_s2p1", lambda: _proj_loss(T.conv3d(x, k, b, stride=2, padding=1), proj2), [x, k, b])

    # deconv3d
    xd = rand(1, 2, 2, 2, 3)
    kd = rand(3, 3, 3, 2, 3)
    projd = rng.standard_normal((1, 4, 4, 4, 2))
    run("deconv3d", lambda: _proj_loss(T.deconv3d(xd, kd), projd), [xd, kd])

    # batchnorm3d in train mode (batch statistics path)
    xb = rand(2, 3, 3, 3, 2)
    gamma = Tensor(1.0 + 0.1 * rng.standard_normal(2), requires_grad=True, dtype=np.float64)
    beta = rand(2)
    rm = Tensor(np.zeros(2, dtype=np.float64))
    rv = Tensor(np.ones(2, dtype=np.float64))
    projb = rng.standard_normal((2, 3, 3, 3, 2))
    run(
        "batchnorm3d_train",
        lambda: _proj_loss(T.batchnorm3d(xb, gamma, beta, rm, rv, "train"), projb),
        [xb, gamma, beta],
    )

    # relu6: keep samples away from the kinks at 0 and 6
    xr = Tensor(rng.uniform(-3, 9, size=(4, 5)), requires_grad=True, dtype=np.float64)
    xr.data[np.abs(xr.data) < 0.05] += 0.1
    xr.data[np.abs(xr.data - 6.0) < 0.05] += 0.1
    projr = rng.standard_normal((4, 5))
    run("relu6", lambda: _proj_loss(T.relu6(xr), projr), [xr])

    # matmul
    ma = rand(5, 7)
    mb = rand(7, 3)
    projm = rng.standard_normal((5, 3))
    run("matmul", lambda: _proj_loss(T.matmul(ma, mb), projm), [ma, mb])

    # softmax / log_softmax
    xs = rand(4, 6)
    projs = rng.standard_normal((4, 6))
    run("softmax", lambda: _proj_loss(T.softmax(xs, axis=1), projs), [xs])
    run("log_softmax", lambda: _proj_loss(T.log_softmax(xs, axis=1), projs), [xs])

    # dropout with a fixed mask (fresh identically seeded rng every call)
    xdr = rand(6, 6)
    projdr = rng.standard_normal((6, 6))
    run(
        "dropout_train",
        lambda: _proj_loss(T.dropout(xdr, 0.4, "train", np.random.default_rng(99)), projdr),
        [xdr],
    )

    # unfold/fold roundtrip inside an op chain
    xu = rand(1, 2, 3, 2, 2)
    proju = rng.standard_normal((1, 2, 3, 2, 2))
    run(
        "unfold_fold",
        lambda: _proj_loss(T.fold(T.mul(T.unfold(xu), 2.0), (2, 3, 2)), proju),
        [xu],
    )

    # attention block (both query transforms)
    aw = NamedWeights()
    arng = np.random.default_rng(seed + 7)
    nn._init_attention(aw, "attn", 4, 4, 4, 4, "conv1x1", arng, np.float64)
    xa = rand(1, 2, 2, 2, 4)
    proja = rng.standard_normal((1, 2, 2, 2, 4))
    attn_params = [xa, aw["attn.q.kernel"], aw["attn.k.kernel"], aw["attn.v.kernel"], aw["attn.out.kernel"]]
    run(
        "attention_conv1x1",
        lambda: _proj_loss(
            nn.attention_block(xa, aw, "attn", "conv1x1", heads=2, dropout_p=0.0, mode="eval"), proja
        ),
        attn_params,
        coords=8,
    )
    aw2 = NamedWeights()
    nn._init_attention(aw2, "attn", 4, 4, 4, 4, "deconv3x3s2", arng, np.float64)
    proja2 = rng.standard_normal((1, 4, 4, 4, 4))
    run(
        "attention_deconv",
        lambda: _proj_loss(
            nn.attention_block(xa, aw2, "attn", "deconv3x3s2", heads=2, dropout_p=0.0, mode="eval"),
            proja2,
        ),
        [xa, aw2["attn.q.kernel"], aw2["attn.out.kernel"]],
        coords=8,
    )

    # cross entropy
    xl = rand(2, 3, 3, 3, 4)
    yl = np.random.default_rng(seed + 3).integers(0, 4, size=(2, 3, 3, 3))
    run("cross_entropy", lambda: fusion.cross_entropy(xl, yl), [xl])

    return results


def run_end_to_end_check(seed=0, n_params=10, tol=END_TO_END_TOL):
    """Finite-difference check of the full model on an 8^3 single-channel
    input with a 2-class head; samples ``n_params`` parameters."""
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(base_channels=4, heads=2, dropout_p=0.0, num_classes=2)
    weights = nn.build_model(cfg, rng, dtype=np.float64)
    x = rng.standard_normal((1, 8, 8, 8, 1))
    labels = rng.integers(0, 2, size=(1, 8, 8, 8))

    def loss_fn():
        logits = nn.forward(cfg, weights, Tensor(x, dtype=np.float64), mode="train")
        return fusion.cross_entropy(logits, labels)

    names = [n for n, t in weights.trainable()]
    picked = [names[int(i)] for i in rng.choice(len(names), size=n_params, replace=False)]
    params = [weights[n] for n in picked]
    err = check_gradients(loss_fn, params, coords_per_param=2, rng=rng)
    return {"name": "end_to_end_8cubed", "max_err": err, "tol": tol, "ok": err < tol}


def run_all(seed=0):
    results = run_op_checks(seed)
    results.append(run_end_to_end_check(seed))
    return results
