"""Three-block 1-D CNN encoder, embedding layer, linear head and BYOL predictor."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CONV_SPECS = (("conv1", 1, 4), ("conv2", 4, 16), ("conv3", 16, 32))
KERNEL = 7
STRIDE = 3
POOL = 2


@dataclass
class EncoderConfig:
    E: int = 128
    S: int = 2500
    num_classes: int = 0
    dropout_p: float = 0.1
    seed: int = 0
    with_predictor: bool = False
    embed_pre_relu: bool = False
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        if self.E < 1:
            raise ValueError("E must be >= 1")


def flatten_width(S):
    """Width of the flattened feature map for input length ``S``."""
    length = S
    for _, _, c_out in CONV_SPECS:
        if length < KERNEL:
            raise ad.ShapeError(f"input length S={S} too short for the conv stack")
        length = ad.conv1d_output_length(length, KERNEL, STRIDE) // POOL
    if length < 1:
        raise ad.ShapeError(f"input length S={S} too short for the conv stack")
    return length * CONV_SPECS[-1][2]


class EncoderParams:
    """Learnable tensors plus batch-norm running statistics."""

    def __init__(self, config, tensors, buffers):
        self.config = config
        self.tensors = tensors
        self.buffers = buffers

    def encoder_names(self):
        return [k for k in self.tensors if not k.startswith(("head.", "pred."))]

    def trainable(self, names=None):
        names = self.tensors.keys() if names is None else names
        return {k: self.tensors[k] for k in names}

    def state(self, include_head=True, include_predictor=True):
        out = {}
        for k, t in self.tensors.items():
            if (k.startswith("head.") and not include_head) or (k.startswith("pred.") and not include_predictor):
                continue
            out[k] = t.data
        out.update(self.buffers)
        out["meta.S"] = np.array(float(self.config.S))
        return out

    def copy(self):
        tensors = {k: Tensor(t.data.copy(), requires_grad=t.requires_grad, name=k)
                   for k, t in self.tensors.items()}
        buffers = {k: v.copy() for k, v in self.buffers.items()}
        return EncoderParams(dataclasses.replace(self.config), tensors, buffers)

    def count(self, prefix):
        return sum(t.size for k, t in self.tensors.items() if k.startswith(prefix + "."))


def _uniform(rng, shape, fan_in):
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def build_encoder(config):
    """Allocate parameters with fan-in scaled uniform initialization."""
    width = flatten_width(config.S)
    if config.S == 2500 and width != 320:
        raise AssertionError(f"flatten width {width} != 320 for S=2500")
    rng = np.random.default_rng(config.seed)
    tensors, buffers = {}, {}

    def add(name, data):
        tensors[name] = Tensor(data, requires_grad=True, name=name)

    for i, (name, c_in, c_out) in enumerate(CONV_SPECS, start=1):
        fan_in = c_in * KERNEL
        add(f"{name}.w", _uniform(rng, (c_out, c_in, KERNEL), fan_in))
        add(f"{name}.b", _uniform(rng, (c_out,), fan_in))
        add(f"bn{i}.gamma", np.ones(c_out))
        add(f"bn{i}.beta", np.zeros(c_out))
        buffers[f"bn{i}.running_mean"] = np.zeros(c_out)
        buffers[f"bn{i}.running_var"] = np.ones(c_out)
    add("fc4.w", _uniform(rng, (width, config.E), width))
    add("fc4.b", _uniform(rng, (config.E,), width))
    if config.num_classes:
        add("head.w", _uniform(rng, (config.E, config.num_classes), config.E))
        add("head.b", _uniform(rng, (config.num_classes,), config.E))
    if config.with_predictor:
        add("pred.w", _uniform(rng, (config.E, config.E), config.E))
        add("pred.b", _uniform(rng, (config.E,), config.E))
    return EncoderParams(config, tensors, buffers)


def add_head(params, num_classes, seed=0):
    rng = np.random.default_rng(seed)
    E = params.config.E
    params.tensors["head.w"] = Tensor(_uniform(rng, (E, num_classes), E), requires_grad=True, name="head.w")
    params.tensors["head.b"] = Tensor(_uniform(rng, (num_classes,), E), requires_grad=True, name="head.b")
    params.config.num_classes = num_classes


def encode(params, x, training=False, rng=None, trace=None):
    """Map a [K, 1, S] batch to [K, E] representations.

    ``trace``, when a list, collects ``(kind, array)`` for every ReLU input
    and max-pool input; used to keep gradient checks away from kinks.
    """
    cfg = params.config
    x = ad.as_tensor(x)
    if x.ndim != 3 or x.shape[1] != 1 or x.shape[2] != cfg.S:
        raise ad.ShapeError(f"encoder expects input [K, 1, {cfg.S}], got {x.shape}")
    t = params.tensors
    h = x
    for i, (name, _, _) in enumerate(CONV_SPECS, start=1):
        h = ad.conv1d(h, t[f"{name}.w"], t[f"{name}.b"], stride=STRIDE)
        h = ad.batchnorm1d(h, t[f"bn{i}.gamma"], t[f"bn{i}.beta"],
                           params.buffers[f"bn{i}.running_mean"], params.buffers[f"bn{i}.running_var"],
                           training=training, momentum=cfg.bn_momentum, eps=cfg.bn_eps)
        if trace is not None:
            trace.append(("relu", h.data))
        h = ad.relu(h)
        if trace is not None:
            trace.append(("pool", h.data))
        h = ad.maxpool1d(h, POOL, POOL)
        h = ad.dropout(h, cfg.dropout_p, training, rng)
    h = ad.flatten(h)
    h = ad.linear(h, t["fc4.w"], t["fc4.b"])
    if trace is not None and not cfg.embed_pre_relu:
        trace.append(("relu", h.data))
    return h if cfg.embed_pre_relu else ad.relu(h)


def classify(params, reps):
    """Layer 5: affine map from representations to class logits."""
    return ad.linear(ad.as_tensor(reps), params.tensors["head.w"], params.tensors["head.b"])


def byol_predict(params, reps):
    """Online-only predictor head (a second copy of Layer 4's Linear + ReLU)."""
    return ad.relu(ad.linear(ad.as_tensor(reps), params.tensors["pred.w"], params.tensors["pred.b"]))


def params_from_state(config, state):
    """Rebuild :class:`EncoderParams` from a checkpoint parameter dictionary."""
    tensors, buffers = {}, {}
    for k, v in state.items():
        if k.startswith("meta."):
            continue
        if "running_" in k:
            buffers[k] = np.array(v, dtype=np.float64)
        else:
            tensors[k] = Tensor(np.array(v, dtype=np.float64), requires_grad=True, name=k)
    if "head.w" in tensors:
        config.num_classes = tensors["head.w"].shape[1]
    config.with_predictor = "pred.w" in tensors
    return EncoderParams(config, tensors, buffers)


def config_from_state(state, **overrides):
    """Recover E from the fc4 block and S from the ``meta.S`` block."""
    E = np.asarray(state["fc4.w"]).shape[1]
    S = int(np.asarray(state["meta.S"]))
    return EncoderConfig(E=E, S=S, **overrides)
