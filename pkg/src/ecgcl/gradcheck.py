"""Finite-difference checks for every differentiable operator.

Each case draws a random small instance, reduces the operator output to a
scalar through a fixed random projection and compares the analytic gradient
of every input against central differences.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import contrastive as cl
from .encoder import EncoderConfig, build_encoder, classify, encode

TOLERANCE = 1e-4


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin + x, x)


def _check_inputs(build, inputs, rng):
    """Max relative error of ``build(*tensors)`` w.r.t. each input array."""
    probe = np.random.default_rng(rng.integers(1 << 31))
    weights = {}

    def scalar(out):
        if out.ndim == 0:
            return out
        if out.shape not in weights:
            weights[out.shape] = probe.standard_normal(out.shape)
        return (out * weights[out.shape]).sum()

    worst = 0.0
    for i in range(len(inputs)):
        def f(x, i=i):
            args = [ad.Tensor(a) for a in inputs]
            args[i] = x
            return scalar(build(*args))
        worst = max(worst, ad.finite_difference_check(f, inputs[i]))
    return worst


def case_conv1d(rng):
    x = rng.standard_normal((2, 2, 10))
    w = rng.standard_normal((3, 2, 3))
    b = rng.standard_normal(3)
    return _check_inputs(lambda x, w, b: ad.conv1d(x, w, b, stride=2), [x, w, b], rng)


def case_batchnorm_train(rng):
    x = rng.standard_normal((3, 2, 5))
    g = rng.uniform(0.5, 1.5, 2)
    b = rng.standard_normal(2)

    def build(x, g, b):
        return ad.batchnorm1d(x, g, b, np.zeros(2), np.ones(2), training=True)
    return _check_inputs(build, [x, g, b], rng)


def case_batchnorm_eval(rng):
    x = rng.standard_normal((3, 2, 5))
    g = rng.uniform(0.5, 1.5, 2)
    b = rng.standard_normal(2)
    mean, var = rng.standard_normal(2), rng.uniform(0.5, 2.0, 2)

    def build(x, g, b):
        return ad.batchnorm1d(x, g, b, mean.copy(), var.copy(), training=False)
    return _check_inputs(build, [x, g, b], rng)


def case_relu(rng):
    return _check_inputs(ad.relu, [_away_from_zero(rng, (3, 7))], rng)


def case_maxpool(rng):
    x = rng.standard_normal((2, 3, 9))
    # separate pooled pairs so no tie sits within eps of flipping
    x[..., 1:8:2] = x[..., 0:8:2] + np.where(rng.random((2, 3, 4)) < 0.5, -1, 1) * rng.uniform(0.1, 1, (2, 3, 4))
    return _check_inputs(lambda x: ad.maxpool1d(x, 2, 2), [x], rng)


def case_dropout_eval(rng):
    return _check_inputs(lambda x: ad.dropout(x, 0.1, training=False), [rng.standard_normal((3, 4))], rng)


def case_dropout_train(rng):
    seed = int(rng.integers(1 << 31))
    return _check_inputs(lambda x: ad.dropout(x, 0.3, True, np.random.default_rng(seed)),
                         [rng.standard_normal((3, 4))], rng)


def case_linear(rng):
    return _check_inputs(ad.linear, [rng.standard_normal((3, 4)), rng.standard_normal((4, 5)),
                                     rng.standard_normal(5)], rng)


def case_cosine(rng):
    return _check_inputs(ad.cosine_similarity_matrix,
                         [rng.standard_normal((3, 5)), rng.standard_normal((4, 5))], rng)


def case_log_sum_exp(rng):
    return _check_inputs(lambda x: ad.log_sum_exp(x, axis=1), [rng.standard_normal((3, 6))], rng)


def case_softmax_ce(rng):
    targets = rng.integers(0, 4, size=5)
    return _check_inputs(lambda z: ad.softmax_cross_entropy(z, targets), [rng.standard_normal((5, 4))], rng)


def case_sigmoid_bce(rng):
    targets = (rng.random((5, 3)) < 0.5).astype(float)
    return _check_inputs(lambda z: ad.sigmoid_bce(z, targets), [rng.standard_normal((5, 3))], rng)


def case_mse(rng):
    return _check_inputs(ad.mse, [rng.standard_normal((4, 3)), rng.standard_normal((4, 3))], rng)


def case_clocs_loss(rng):
    ids = list(rng.integers(0, 3, size=4))
    ha, hb = rng.standard_normal((4, 6)), rng.standard_normal((4, 6))
    return _check_inputs(lambda a, b: cl.clocs_total_loss([a, b], ids, tau=0.5), [ha, hb], rng)


KINK_MARGIN = 1e-4


def kink_margin(trace):
    """Smallest distance of any ReLU input from 0 or live max-pool pair from a tie."""
    margin = np.inf
    for kind, arr in trace:
        if kind == "relu":
            margin = min(margin, np.abs(arr).min())
        else:
            n = arr.shape[-1] // 2 * 2
            a, b = arr[..., 0:n:2], arr[..., 1:n:2]
            # two dead units tie harmlessly; the ReLU margin already covers them
            live = (a > 0) | (b > 0)
            if live.any():
                margin = min(margin, np.abs(a - b)[live].min())
    return margin


def _encoder_case(rng, loss_builder, names, max_draws=50):
    """Gradient of an encoder-based scalar w.r.t. the input and selected parameters.

    Instances whose activations sit within KINK_MARGIN of a ReLU kink or a
    max-pool tie are redrawn.
    """
    for _ in range(max_draws):
        cfg = EncoderConfig(E=6, S=400, num_classes=3, dropout_p=0.1, seed=int(rng.integers(1 << 31)))
        params = build_encoder(cfg)
        for k in ("bn1.gamma", "bn2.gamma", "bn3.gamma"):
            params.tensors[k].data[:] = rng.uniform(0.5, 1.5, params.tensors[k].shape)
        x = rng.standard_normal((3, 1, 400))
        drop_seed = int(rng.integers(1 << 31))
        buffers = {k: v.copy() for k, v in params.buffers.items()}
        trace = []
        params.buffers = {k: v.copy() for k, v in buffers.items()}
        loss_builder(params, ad.Tensor(x), np.random.default_rng(drop_seed), trace)
        if kink_margin(trace) > KINK_MARGIN:
            break
    else:
        raise RuntimeError("could not draw an instance away from kinks")

    def run(x_tensor, overrides):
        params.buffers = {k: v.copy() for k, v in buffers.items()}
        saved = {k: params.tensors[k] for k in overrides}
        params.tensors.update(overrides)
        try:
            return loss_builder(params, x_tensor, np.random.default_rng(drop_seed))
        finally:
            params.tensors.update(saved)

    worst = ad.finite_difference_check(lambda t: run(t, {}), x)
    for name in names:
        point = params.tensors[name].data.copy()
        worst = max(worst, ad.finite_difference_check(lambda t, n=name: run(ad.Tensor(x), {n: t}), point))
    return worst


def case_encode_ce(rng):
    targets = rng.integers(0, 3, size=3)

    def loss(params, x, drop_rng, trace=None):
        reps = encode(params, x, True, drop_rng, trace)
        return ad.softmax_cross_entropy(classify(params, reps), targets)
    # conv biases feeding train-mode batch norm have identically zero gradient; not probed here
    return _encoder_case(rng, loss, ["conv1.w", "bn1.beta", "bn3.gamma", "fc4.w", "head.w"])


def case_encode_clocs(rng):
    ids = ["a", "b", "a"]

    def loss(params, x, drop_rng, trace=None):
        h1 = encode(params, x, True, drop_rng, trace)
        h2 = encode(params, x * -0.5 + 0.3, True, drop_rng, trace)
        return cl.clocs_total_loss([h1, h2], ids, tau=0.5)
    return _encoder_case(rng, loss, ["conv2.w", "bn2.gamma", "fc4.b"])


CASES = {
    "conv1d": case_conv1d,
    "batchnorm1d_train": case_batchnorm_train,
    "batchnorm1d_eval": case_batchnorm_eval,
    "relu": case_relu,
    "maxpool1d": case_maxpool,
    "dropout_eval": case_dropout_eval,
    "dropout_train": case_dropout_train,
    "linear": case_linear,
    "cosine_similarity_matrix": case_cosine,
    "log_sum_exp": case_log_sum_exp,
    "softmax_cross_entropy": case_softmax_ce,
    "sigmoid_bce": case_sigmoid_bce,
    "mse": case_mse,
    "clocs_total_loss": case_clocs_loss,
    "encode_classify_ce": case_encode_ce,
    "encode_clocs_loss": case_encode_clocs,
}


def run_case(name, instances=5, seed=0):
    """Worst relative error of ``name`` across ``instances`` random draws."""
    rng = np.random.default_rng([seed, sorted(CASES).index(name)])
    return max(CASES[name](rng) for _ in range(instances))


def run_all(instances=5, seed=0, names=None):
    return {name: run_case(name, instances, seed) for name in (names or CASES)}
