"""Pretraining, linear evaluation, fine-tuning and representation analysis."""

from __future__ import annotations

import dataclasses
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import contrastive as cl
from . import perturb
from .encoder import (EncoderConfig, add_head, build_encoder, classify, config_from_state, encode,
                      params_from_state)
from .metrics import MetricsLog, distance_split, macro_auc
from .signals import normalize_minmax, split_by_patient, subsample_fraction

log = logging.getLogger(__name__)

METHODS = ("cmsc", "cmlc", "cmsmlc", "simclr", "byol", "random", "supervised")
DEFAULT_INSTANCE_CHAIN = "gaussian(sigma=0.05r)>sa(axis=t,w=0.2,R=1)"


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    method: str = "cmsc"
    E: int = 128
    tau: float = 0.1
    tau_d: float = 0.9
    lr: float = 1e-4
    batch_size: int = 256
    epochs: int = 50
    F: float = 1.0
    seed: int = 0
    split_seed: int = 0
    split_ratios: tuple = (0.6, 0.2, 0.2)
    strategy: str = ""
    chains: str = ""
    chain_a: str = DEFAULT_INSTANCE_CHAIN
    chain_b: str = DEFAULT_INSTANCE_CHAIN
    leads: tuple = ()
    dropout_p: float = 0.1
    embed_pre_relu: bool = False
    exclude_same_patient_denominator: bool = False
    group_by_patient: bool = False
    fraction_by_patient: bool = False
    normalize: bool | None = None
    threads: int = 0

    def __post_init__(self):
        bad = []
        if self.method not in METHODS:
            bad.append(f"method={self.method!r} (expected one of {', '.join(METHODS)})")
        if not self.lr > 0:
            bad.append("lr must be > 0")
        if self.epochs < 0:
            bad.append("epochs must be >= 0")
        if self.batch_size < 1:
            bad.append("batch_size must be >= 1")
        if not 0 < self.F <= 1:
            bad.append("F must lie in (0, 1]")
        if not self.tau > 0:
            bad.append("tau must be > 0")
        if not 0 <= self.tau_d <= 1:
            bad.append("tau_d must lie in [0, 1]")
        if bad:
            raise ValueError("invalid config: " + "; ".join(bad))
        self.split_ratios = tuple(self.split_ratios)
        self.leads = tuple(self.leads)

    def resolved_strategy(self):
        if self.strategy:
            return cl.parse_strategy(self.strategy)
        if self.method == "cmsc":
            return cl.CMSC(2)
        if self.method == "cmlc":
            return cl.CMLC(self.leads) if self.leads else cl.CMLC()
        if self.method == "cmsmlc":
            return cl.CMSMLC(2, self.leads) if self.leads else cl.CMSMLC()
        if self.method in ("simclr", "byol"):
            return cl.Instance(tuple(perturb.parse_chain(self.chain_a)),
                               tuple(perturb.parse_chain(self.chain_b)))
        return None

    def to_dict(self):
        return dataclasses.asdict(self)


def worker_count(config):
    if config.threads:
        return config.threads
    try:
        return max(1, int(os.environ.get("CLOCS_THREADS", "1")))
    except ValueError:
        return 1


# data

def load_split_frames(manifest, config, split):
    """Frames of one patient split (``train``/``val``/``test``) with optional lead filter."""
    assignment = split_by_patient(manifest, config.split_ratios, config.split_seed)
    patients = getattr(assignment, split)
    frames = manifest.load_frames(patients)
    if config.leads:
        frames = [f for f in frames if f.lead in config.leads]
    normalize = manifest.normalize if config.normalize is None else config.normalize
    if normalize:
        frames = [normalize_minmax(f) for f in frames]
    return frames


def _targets(frames, num_classes, multilabel):
    if multilabel:
        y = np.zeros((len(frames), num_classes))
        for i, f in enumerate(frames):
            y[i, list(f.labels)] = 1.0
        return y
    return np.array([min(f.labels) for f in frames], dtype=np.int64)


def _stack(frames):
    return np.stack([np.asarray(f.samples, dtype=np.float64) for f in frames])[:, None, :]


def _loss_fn(multilabel):
    return ad.sigmoid_bce if multilabel else ad.softmax_cross_entropy


def _scores(logits, multilabel):
    z = logits.data if isinstance(logits, ad.Tensor) else logits
    if multilabel:
        return z
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _epoch_order(n, seed, epoch):
    return np.random.default_rng([seed, epoch, 0]).permutation(n)


def _batch_rng(seed, epoch, index):
    return np.random.default_rng([seed, epoch, index, 1])


def _grouped_order(items, seed, epoch):
    rng = np.random.default_rng([seed, epoch, 0])
    by_patient = {}
    for i, it in enumerate(items):
        by_patient.setdefault(it.patient, []).append(i)
    order = []
    for p in rng.permutation(sorted(by_patient)):
        order.extend(rng.permutation(by_patient[p]).tolist())
    return np.array(order)


def encode_frames(params, frames, batch_size=256):
    """Eval-mode representations for a list of frames."""
    out = []
    for start in range(0, len(frames), batch_size):
        out.append(encode(params, _stack(frames[start:start + batch_size]), training=False).data)
    return np.concatenate(out) if out else np.zeros((0, params.config.E))


# pretraining

def pretrain(manifest, config, on_epoch=None):
    """Self-supervised (or supervised) pretraining on the train split.

    Returns ``(params, optimizer_state, metrics)``; ``params`` excludes the
    classification head. ``on_epoch(epoch, params, optimizer_state)`` is
    called after every contrastive epoch (used to retain checkpoints).
    """
    method = config.method
    enc_cfg = EncoderConfig(E=config.E, S=manifest.S, dropout_p=config.dropout_p, seed=config.seed,
                            with_predictor=(method == "byol"), embed_pre_relu=config.embed_pre_relu)
    params = build_encoder(enc_cfg)
    metrics = MetricsLog()
    if method == "random":
        opt = ad.Adam(params.trainable(), lr=config.lr)
        metrics.summary.update(method=method, epochs_run=0)
        return params, opt.state_dict(), metrics
    if method == "supervised":
        sup = dataclasses.replace(config, F=1.0)
        add_head(params, manifest.num_classes, seed=config.seed + 1)
        frames = load_split_frames(manifest, sup, "train")
        opt, sub = _supervised_loop(params, frames, manifest, sup, metrics, phase="pretrain",
                                    encoder_trainable=True)
        del params.tensors["head.w"], params.tensors["head.b"]
        params.config.num_classes = 0
        return params, opt.state_dict(), metrics

    strategy = config.resolved_strategy()
    frames = load_split_frames(manifest, config, "train")
    items, skipped = cl.build_view_pairs(frames, strategy)
    log.info("pretrain %s: %d view items, %d patients skipped", method, len(items), skipped)
    chains = perturb.parse_chain(config.chains)
    target = None
    if method == "byol":
        target = params.copy()
        for k in ("pred.w", "pred.b"):
            target.tensors.pop(k)
        target.config.with_predictor = False
    opt = ad.Adam(params.trainable(), lr=config.lr)
    n_batches = math.ceil(len(items) / config.batch_size)

    def make_batch(epoch, b, order):
        idx = order[b * config.batch_size:(b + 1) * config.batch_size]
        rng = _batch_rng(config.seed, epoch, b)
        return cl.assemble_batch([items[i] for i in idx], strategy, rng, chains), rng

    with ThreadPoolExecutor(max_workers=worker_count(config)) as pool:
        for epoch in range(1, config.epochs + 1):
            order = (_grouped_order(items, config.seed, epoch) if config.group_by_patient
                     else _epoch_order(len(items), config.seed, epoch))
            losses = []
            batches = pool.map(lambda b: make_batch(epoch, b, order), range(n_batches))
            for b, (batch, rng) in enumerate(batches):
                if len(batch.patient_ids) < 2:
                    continue
                opt.zero_grad()
                if method == "byol":
                    loss = cl.byol_step_loss(params, target, batch.x_A, batch.x_B, True, rng)
                else:
                    ids = batch.patient_ids
                    if method == "simclr":
                        ids = list(range(len(ids)))
                    reps = [encode(params, x, training=True, rng=rng) for x in batch.views]
                    loss = cl.clocs_total_loss(reps, ids, config.tau, batch.pairs,
                                               config.exclude_same_patient_denominator)
                value = loss.item()
                if not np.isfinite(value):
                    raise TrainingError(f"non-finite loss {value} at epoch {epoch}, batch {b}")
                loss.backward()
                opt.step()
                if target is not None:
                    cl.ema_update(target, params, config.tau_d)
                losses.append(value)
            metrics.log(epoch, "train", "pretrain_loss", float(np.mean(losses)))
            if on_epoch is not None:
                on_epoch(epoch, params, opt.state_dict())
    metrics.summary.update(method=method, epochs_run=config.epochs, view_items=len(items),
                           patients_skipped=skipped)
    return params, opt.state_dict(), metrics


def checkpoint_state(params):
    """Parameter blocks written to a pretraining checkpoint (no head, no predictor)."""
    return params.state(include_head=False, include_predictor=False)


def load_params(checkpoint, dropout_p=0.1, embed_pre_relu=False):
    if not isinstance(checkpoint, (str, os.PathLike)):
        return checkpoint.copy()
    state, _ = ad.load_checkpoint(checkpoint)
    cfg = config_from_state(state, dropout_p=dropout_p, embed_pre_relu=embed_pre_relu)
    return params_from_state(cfg, state)


# downstream

def _check_compatible(params, manifest, config):
    if params.config.S != manifest.S:
        raise ValueError(f"checkpoint input length S={params.config.S} differs from manifest S={manifest.S}")
    if params.config.E != config.E:
        raise ValueError(f"checkpoint embedding E={params.config.E} differs from config E={config.E}")
    if "head.w" in params.tensors and params.config.num_classes != manifest.num_classes:
        raise ValueError(f"checkpoint head has {params.config.num_classes} classes, "
                         f"manifest has {manifest.num_classes}")


def _supervised_loop(params, train_frames, manifest, config, metrics, phase, encoder_trainable,
                     val_frames=None):
    multilabel = manifest.multilabel
    loss_fn = _loss_fn(multilabel)
    names = list(params.tensors) if encoder_trainable else ["head.w", "head.b"]
    names = [n for n in names if not n.startswith("pred.")]
    opt = ad.Adam(params.trainable(names), lr=config.lr)
    y_train = _targets(train_frames, manifest.num_classes, multilabel)
    frozen_reps = None
    if not encoder_trainable:
        frozen_reps = encode_frames(params, train_frames)
    x_train = None if frozen_reps is not None else _stack(train_frames)
    val_reps = y_val = None
    if val_frames:
        y_val = _targets(val_frames, manifest.num_classes, multilabel)
        if not encoder_trainable:
            val_reps = encode_frames(params, val_frames)
    n = len(train_frames)
    for epoch in range(1, config.epochs + 1):
        order = _epoch_order(n, config.seed, epoch)
        losses = []
        for b in range(math.ceil(n / config.batch_size)):
            idx = order[b * config.batch_size:(b + 1) * config.batch_size]
            rng = _batch_rng(config.seed, epoch, b)
            opt.zero_grad()
            if frozen_reps is not None:
                reps = ad.Tensor(frozen_reps[idx])
            else:
                if len(idx) < 2:
                    continue
                reps = encode(params, x_train[idx], training=True, rng=rng)
            loss = loss_fn(classify(params, reps), y_train[idx])
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingError(f"non-finite loss {value} at epoch {epoch}, batch {b}")
            loss.backward()
            opt.step()
            losses.append(value)
        metrics.log(epoch, "train", f"{phase}_loss", float(np.mean(losses)) if losses else float("nan"))
        if val_frames:
            reps = val_reps if val_reps is not None else encode_frames(params, val_frames)
            logits = classify(params, reps)
            metrics.log(epoch, "val", f"{phase}_loss", loss_fn(logits, y_val).item())
            metrics.log(epoch, "val", "auc", _safe_auc(_scores(logits, multilabel), y_val))
    return opt, metrics


def _safe_auc(scores, labels):
    try:
        return macro_auc(scores, labels)
    except ValueError:
        return float("nan")


def _downstream(checkpoint, manifest, config, encoder_trainable):
    params = load_params(checkpoint, config.dropout_p, config.embed_pre_relu)
    _check_compatible(params, manifest, config)
    if "head.w" not in params.tensors:
        add_head(params, manifest.num_classes, seed=config.seed + 1)
    train = load_split_frames(manifest, config, "train")
    train = subsample_fraction(train, config.F, config.seed, by_patient=config.fraction_by_patient)
    val = load_split_frames(manifest, config, "val")
    test = load_split_frames(manifest, config, "test")
    metrics = MetricsLog()
    phase = "finetune" if encoder_trainable else "lineval"
    opt, _ = _supervised_loop(params, train, manifest, config, metrics, phase, encoder_trainable, val)
    multilabel = manifest.multilabel
    logits = classify(params, encode_frames(params, test))
    y_test = _targets(test, manifest.num_classes, multilabel)
    test_auc = macro_auc(_scores(logits, multilabel), y_test)
    metrics.log(config.epochs, "test", "auc", test_auc)
    metrics.summary.update(test_auc=test_auc, train_frames=len(train), F=config.F,
                           multilabel=multilabel)
    return params, opt.state_dict(), metrics


def linear_eval(checkpoint, manifest, config):
    """Train only the linear head on frozen, eval-mode representations."""
    return _downstream(checkpoint, manifest, config, encoder_trainable=False)


def finetune(checkpoint, manifest, config):
    """Train encoder and head together starting from ``checkpoint``."""
    return _downstream(checkpoint, manifest, config, encoder_trainable=True)


def patient_distances(checkpoint, manifest, config=None, split="val", bins=30):
    """Intra- vs inter-patient Euclidean distances of eval-mode representations."""
    config = config or TrainConfig()
    params = load_params(checkpoint, config.dropout_p, config.embed_pre_relu)
    frames = load_split_frames(manifest, config, split)
    if len(frames) < 2:
        raise ValueError("need at least two frames to compute distances")
    reps = encode_frames(params, frames)
    return distance_split(reps, [f.patient for f in frames], bins=bins)
