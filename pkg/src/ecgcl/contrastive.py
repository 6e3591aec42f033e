"""View construction and contrastive objectives with patient-level positives.

Rows of a similarity matrix belong to patients; every column from the same
patient counts as a positive for that row. The diagonal is always positive.
"""

from __future__ import annotations

import itertools
import re
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import perturb
from .encoder import byol_predict, encode


class StrategyError(ValueError):
    pass


@dataclass(frozen=True)
class CMSC:
    """V consecutive segments of one lead are views of each other."""

    V: int = 2

    def __post_init__(self):
        if self.V < 2:
            raise ValueError("CMSC needs V >= 2 segments")


@dataclass(frozen=True)
class CMLC:
    """Temporally aligned leads are views of each other."""

    leads: tuple = ("II", "V2", "aVL", "aVR")

    def __post_init__(self):
        if len(self.leads) < 2:
            raise ValueError("CMLC needs at least two leads")


@dataclass(frozen=True)
class CMSMLC:
    """Views span both consecutive segments and leads."""

    V: int = 2
    leads: tuple = ("II", "V2", "aVL", "aVR")

    def __post_init__(self):
        if self.V < 2 or len(self.leads) < 1:
            raise ValueError("CMSMLC needs V >= 2 and at least one lead")


@dataclass(frozen=True)
class Instance:
    """Two perturbation chains applied to the same frame (SimCLR/BYOL views)."""

    chain_a: tuple = ()
    chain_b: tuple = ()


@dataclass
class ViewItem:
    """One row of a contrastive batch: a patient and its views (frames)."""

    patient: str
    views: list
    tags: list
    pairs: list


@dataclass
class ViewPairBatch:
    views: list  # each [K, 1, S]
    patient_ids: list
    view_tags: list
    pairs: list = field(default_factory=list)

    @property
    def x_A(self):
        return self.views[0]

    @property
    def x_B(self):
        return self.views[1]


def all_pairs(n):
    return list(itertools.combinations(range(n), 2))


def build_view_pairs(frames, strategy):
    """Group frames by patient and emit :class:`ViewItem` rows for ``strategy``.

    Returns ``(items, skipped)`` where ``skipped`` counts patients that lack
    the segments or leads the strategy requires.
    """
    by_patient = defaultdict(dict)
    for f in frames:
        by_patient[f.patient][(f.lead, f.segment_index)] = f
    items, skipped = [], 0
    for patient in sorted(by_patient):
        grid = by_patient[patient]
        found = _items_for_patient(patient, grid, strategy)
        if found:
            items.extend(found)
        else:
            skipped += 1
    if not items:
        raise StrategyError(f"strategy {format_strategy(strategy)} cannot be satisfied by any patient")
    return items, skipped


def _items_for_patient(patient, grid, strategy):
    out = []
    leads = sorted({lead for lead, _ in grid})
    if isinstance(strategy, Instance):
        for key in sorted(grid, key=lambda k: (k[1], k[0])):
            f = grid[key]
            out.append(ViewItem(patient, [f, f], [key, key], [(0, 1)]))
        return out
    if isinstance(strategy, CMSC):
        for lead in leads:
            segs = sorted(t for l, t in grid if l == lead)
            for start in _blocks(segs, strategy.V):
                keys = [(lead, start + v) for v in range(strategy.V)]
                out.append(ViewItem(patient, [grid[k] for k in keys], keys, all_pairs(strategy.V)))
        return out
    if isinstance(strategy, CMLC):
        times = sorted({t for _, t in grid})
        for t in times:
            keys = [(lead, t) for lead in strategy.leads]
            if all(k in grid for k in keys):
                out.append(ViewItem(patient, [grid[k] for k in keys], keys, all_pairs(len(keys))))
        return out
    if isinstance(strategy, CMSMLC):
        times = sorted({t for _, t in grid})
        n_leads = len(strategy.leads)
        for start in _blocks(times, strategy.V):
            keys = [(lead, start + v) for v in range(strategy.V) for lead in strategy.leads]
            if all(k in grid for k in keys):
                # pair views only across different segments
                pairs = [(a, b) for a, b in all_pairs(len(keys)) if a // n_leads != b // n_leads]
                out.append(ViewItem(patient, [grid[k] for k in keys], keys, pairs))
        return out
    raise TypeError(f"unknown strategy {strategy!r}")


def _blocks(segments, V):
    """Starts of disjoint runs of V consecutive segment indices."""
    present = set(segments)
    starts, t = [], min(segments) if segments else 0
    last = max(segments) if segments else -1
    while t + V - 1 <= last:
        if all(t + v in present for v in range(V)):
            starts.append(t)
            t += V
        else:
            t += 1
    return starts


def view_chains(strategy, chains=()):
    """Per-view perturbation chains: the instance chains, else ``chains`` for every view."""
    if isinstance(strategy, Instance):
        return [list(strategy.chain_a), list(strategy.chain_b)]
    return None if not chains else list(chains)


def assemble_batch(items, strategy, rng=None, chains=()):
    """Stack a list of :class:`ViewItem` into a :class:`ViewPairBatch`."""
    n_views = len(items[0].views)
    per_view = view_chains(strategy, chains)
    views = []
    for v in range(n_views):
        chain = [] if per_view is None else per_view[v if len(per_view) == n_views else 0]
        rows = []
        for item in items:
            x = np.asarray(item.views[v].samples, dtype=np.float64)
            if chain:
                x = perturb.apply_chain(x, chain, rng)
            rows.append(x)
        views.append(np.stack(rows)[:, None, :])
    return ViewPairBatch(views, [it.patient for it in items], [it.tags for it in items], items[0].pairs)


# losses

def positive_mask(patient_ids):
    ids = np.asarray(patient_ids, dtype=object)
    return ids[:, None] == ids[None, :]


NORM_FLOOR = 1e-8


def scaled_similarity(h_a, h_b, tau):
    """Cosine similarities over tau; zero rows (dead embeddings) score 0 instead of raising."""
    if not tau > 0:
        raise ValueError(f"temperature must be > 0, got {tau}")
    return ad.cosine_similarity_matrix(h_a, h_b, eps=NORM_FLOOR) * (1.0 / tau)


def _log_probs(sim, mask, exclude_same_patient_denominator):
    """[K, K] matrix of log softmax terms for every (row, column) numerator."""
    if not exclude_same_patient_denominator:
        return ad.log_softmax(sim, axis=1)
    k = sim.shape[0]
    # per (i, c): denominator over column c plus columns of other patients
    allowed = ~mask[:, None, :] | np.eye(k, dtype=bool)[None, :, :]
    penalty = np.where(allowed, 0.0, -1e9)
    lsm = ad.log_softmax(ad.reshape(sim, (k, 1, k)) + penalty, axis=2)
    return (lsm * np.eye(k)[None, :, :]).sum(axis=2)


def loss_diag(sim, mask=None, exclude_same_patient_denominator=False):
    """Mean over rows of -log softmax(row)[i] (same-index positives)."""
    sim = ad.as_tensor(sim)
    k = sim.shape[0]
    if mask is None:
        mask = np.eye(k, dtype=bool)
    lp = _log_probs(sim, mask, exclude_same_patient_denominator)
    return -(lp * np.eye(k)).sum() * (1.0 / k)


def loss_offdiag(sim, mask, exclude_same_patient_denominator=False):
    """Mean over off-diagonal same-patient entries of -log softmax(row)[k].

    Zero when the batch holds no repeated patient.
    """
    sim = ad.as_tensor(sim)
    mask = np.asarray(mask, dtype=bool)
    off = mask & ~np.eye(sim.shape[0], dtype=bool)
    n = int(off.sum())
    if n == 0:
        return ad.Tensor(0.0)
    lp = _log_probs(sim, mask, exclude_same_patient_denominator)
    return -(lp * off).sum() * (1.0 / n)


def clocs_total_loss(reps_per_view, patient_ids, tau=0.1, pairs=None,
                     exclude_same_patient_denominator=False):
    """Average over view pairs of the four diagonal/off-diagonal terms in both directions."""
    if len(reps_per_view) < 2:
        raise ValueError("need at least two views")
    mask = positive_mask(patient_ids)
    pairs = all_pairs(len(reps_per_view)) if pairs is None else pairs
    flag = exclude_same_patient_denominator
    total = None
    for a, b in pairs:
        s_ab = scaled_similarity(reps_per_view[a], reps_per_view[b], tau)
        s_ba = scaled_similarity(reps_per_view[b], reps_per_view[a], tau)
        term = (loss_diag(s_ab, mask, flag) + loss_diag(s_ba, mask, flag)
                + loss_offdiag(s_ab, mask, flag) + loss_offdiag(s_ba, mask, flag))
        total = term if total is None else total + term
    return total * (1.0 / len(pairs))


def byol_step_loss(online, target, x_a, x_b, training=True, rng=None):
    """Symmetrized MSE between online predictions and stop-gradient target representations."""
    p_a = byol_predict(online, encode(online, x_a, training, rng))
    p_b = byol_predict(online, encode(online, x_b, training, rng))
    t_a = ad.stop_gradient(encode(target, x_a, training, rng))
    t_b = ad.stop_gradient(encode(target, x_b, training, rng))
    return ad.mse(p_a, t_b) + ad.mse(p_b, t_a)


def ema_update(target, online, tau_d=0.9):
    """target <- tau_d * target + (1 - tau_d) * online for shared tensors."""
    for name, t in target.tensors.items():
        if name in online.tensors and not name.startswith("pred."):
            t.data *= tau_d
            t.data += (1.0 - tau_d) * online.tensors[name].data


# config string grammar

def _args(body):
    """Split ``k=v`` pairs on top-level commas; bare tokens extend the previous value."""
    tokens, depth, cur = [], 0, ""
    for ch in body or "":
        if ch == "," and depth == 0:
            tokens.append(cur)
            cur = ""
            continue
        depth += (ch == "(") - (ch == ")")
        cur += ch
    tokens.append(cur)
    out, last = {}, None
    for tok in (t.strip() for t in tokens):
        if not tok:
            continue
        key, eq, value = tok.partition("=")
        if eq and "(" not in key:
            last = key.strip().lower()
            out[last] = value.strip()
        elif last is not None:
            out[last] += "," + tok
        else:
            raise ValueError(f"malformed strategy argument {tok!r}")
    return out


def parse_strategy(text):
    """Parse ``cmsc(v=2)``, ``cmlc(leads=II,V2)``, ``cmsmlc(v=2,leads=...)``,
    ``instance(a=<chain>,b=<chain>)``."""
    m = re.match(r"^\s*(\w+)\s*(?:\((.*)\))?\s*$", text)
    if not m:
        raise ValueError(f"cannot parse strategy {text!r}")
    name, args = m.group(1).lower(), _args(m.group(2))
    leads = tuple(s.strip() for s in args["leads"].split(",")) if "leads" in args else None
    if name == "cmsc":
        return CMSC(int(args.get("v", 2)))
    if name == "cmlc":
        return CMLC(leads) if leads else CMLC()
    if name == "cmsmlc":
        return CMSMLC(int(args.get("v", 2)), leads) if leads else CMSMLC(int(args.get("v", 2)))
    if name == "instance":
        return Instance(tuple(perturb.parse_chain(args.get("a", ""))),
                        tuple(perturb.parse_chain(args.get("b", ""))))
    raise ValueError(f"unknown strategy {name!r}")


def format_strategy(strategy):
    if isinstance(strategy, CMSC):
        return f"cmsc(v={strategy.V})"
    if isinstance(strategy, CMLC):
        return f"cmlc(leads={','.join(strategy.leads)})"
    if isinstance(strategy, CMSMLC):
        return f"cmsmlc(v={strategy.V},leads={','.join(strategy.leads)})"
    if isinstance(strategy, Instance):
        return (f"instance(a={perturb.format_chain(strategy.chain_a)},"
                f"b={perturb.format_chain(strategy.chain_b)})")
    raise TypeError(f"unknown strategy {strategy!r}")
