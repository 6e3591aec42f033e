"""Stochastic single-lead perturbations and their composition.

Perturbations act on 1-D sample arrays (or :class:`~ecgcl.signals.Frame`
objects, whose samples are replaced) and never change the frame length.
"""

from __future__ import annotations

import math
import re
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import signal as sps

DEFAULT_WINDOW = 256


class MaskWarning(UserWarning):
    pass


@dataclass(frozen=True)
class Gaussian:
    sigma: float = 0.05
    relative: bool = True

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("gaussian sigma must be > 0")


@dataclass(frozen=True)
class FlipY:
    pass


@dataclass(frozen=True)
class FlipX:
    pass


@dataclass(frozen=True)
class SpecAugment:
    axis: str = "t"
    w: float = 0.2
    R: int = 1

    def __post_init__(self):
        if self.axis not in ("t", "f"):
            raise ValueError("SpecAugment axis must be 't' (temporal) or 'f' (spectral)")
        if not 0 < self.w < 1:
            raise ValueError("SpecAugment w must lie in (0, 1)")
        if self.R < 1:
            raise ValueError("SpecAugment R must be >= 1")


@dataclass
class Spectrogram:
    values: np.ndarray  # complex, [N_f, N_t]
    window_len: int
    hop: int
    length: int

    @property
    def n_freq(self):
        return self.values.shape[0]

    @property
    def n_time(self):
        return self.values.shape[1]


def _samples(frame):
    return np.asarray(getattr(frame, "samples", frame), dtype=np.float64)


def _rewrap(frame, out):
    if hasattr(frame, "with_samples"):
        return frame.with_samples(out)
    return out


def gaussian(frame, sigma, rng, relative=False):
    """Add i.i.d. N(0, sigma) noise; ``relative`` scales sigma by the frame's range."""
    x = _samples(frame)
    if relative:
        sigma = sigma * float(x.max() - x.min())
        if sigma == 0:
            return _rewrap(frame, x.copy())
    elif not sigma > 0:
        raise ValueError("gaussian sigma must be > 0")
    return _rewrap(frame, x + rng.normal(0.0, sigma, size=x.shape))


def flip_y(frame):
    """Reverse time."""
    return _rewrap(frame, _samples(frame)[::-1].copy())


def flip_x(frame):
    """Negate amplitude."""
    return _rewrap(frame, -_samples(frame))


def stft(frame, window_len=DEFAULT_WINDOW, hop=None):
    """Hann-windowed STFT with 50% overlap (hop defaults to window_len / 2)."""
    x = _samples(frame)
    if window_len > len(x):
        raise ValueError(f"window_len={window_len} exceeds frame length {len(x)}")
    if window_len < 2 or window_len % 2:
        raise ValueError("window_len must be an even integer >= 2")
    hop = window_len // 2 if hop is None else hop
    _, _, z = sps.stft(x, window="hann", nperseg=window_len, noverlap=window_len - hop)
    return Spectrogram(z, window_len, hop, len(x))


def istft(spec):
    _, x = sps.istft(spec.values, window="hann", nperseg=spec.window_len,
                     noverlap=spec.window_len - spec.hop)
    return x[:spec.length]


def mask_spectrogram(spec, axis, w, R, rng):
    """Zero ``R`` contiguous runs of floor(w * N_axis) bins along ``axis``.

    Returns the masked spectrogram and the list of masked start indices.
    """
    values = spec.values.copy()
    n_axis = values.shape[0] if axis == "f" else values.shape[1]
    n_mask = math.floor(w * n_axis)
    starts = []
    if n_mask == 0:
        warnings.warn(f"w={w} masks no bins out of {n_axis}; spectrogram left unchanged",
                      MaskWarning, stacklevel=2)
        return Spectrogram(values, spec.window_len, spec.hop, spec.length), starts
    for _ in range(R):
        start = int(rng.integers(0, n_axis - n_mask + 1))
        starts.append(start)
        if axis == "f":
            values[start:start + n_mask, :] = 0
        else:
            values[:, start:start + n_mask] = 0
    return Spectrogram(values, spec.window_len, spec.hop, spec.length), starts


def spec_augment(frame, axis="t", w=0.2, R=1, rng=None, window_len=DEFAULT_WINDOW):
    """Mask spectral (``axis='f'``) or temporal (``axis='t'``) STFT bins and invert."""
    SpecAugment(axis, w, R)
    if rng is None:
        raise ValueError("spec_augment needs a random generator")
    x = _samples(frame)
    masked, _ = mask_spectrogram(stft(x, min(window_len, len(x) - len(x) % 2)), axis, w, R, rng)
    return _rewrap(frame, istft(masked))


def apply(frame, spec, rng):
    if isinstance(spec, Gaussian):
        return gaussian(frame, spec.sigma, rng, relative=spec.relative)
    if isinstance(spec, FlipY):
        return flip_y(frame)
    if isinstance(spec, FlipX):
        return flip_x(frame)
    if isinstance(spec, SpecAugment):
        return spec_augment(frame, spec.axis, spec.w, spec.R, rng)
    raise TypeError(f"unknown perturbation {spec!r}")


def apply_chain(frame, specs, rng):
    """Apply perturbations left to right."""
    for spec in specs:
        frame = apply(frame, spec, rng)
    return frame


# config string grammar:  gaussian(sigma=0.05r)>sa(axis=t,w=0.2,R=1)>flipy

_ITEM = re.compile(r"^\s*(\w+)\s*(?:\((.*)\))?\s*$")


def _kwargs(body):
    out = {}
    if body and body.strip():
        for part in body.split(","):
            key, _, value = part.partition("=")
            if not _:
                raise ValueError(f"malformed argument {part!r}")
            out[key.strip()] = value.strip()
    return out


def parse_spec(text):
    m = _ITEM.match(text)
    if not m:
        raise ValueError(f"cannot parse perturbation {text!r}")
    name, args = m.group(1).lower(), _kwargs(m.group(2))
    if name == "gaussian":
        raw = args.pop("sigma", "0.05r")
        relative = raw.endswith("r")
        spec = Gaussian(float(raw.rstrip("r")), relative)
    elif name in ("flipy", "flipx"):
        spec = FlipY() if name == "flipy" else FlipX()
    elif name == "sa":
        spec = SpecAugment(args.pop("axis", "t"), float(args.pop("w", 0.2)), int(args.pop("R", 1)))
    else:
        raise ValueError(f"unknown perturbation {name!r}")
    if args:
        raise ValueError(f"unexpected arguments for {name}: {', '.join(sorted(args))}")
    return spec


def parse_chain(text):
    if text is None or not text.strip():
        return []
    return [parse_spec(part) for part in text.split(">")]


def format_spec(spec):
    if isinstance(spec, Gaussian):
        return f"gaussian(sigma={spec.sigma:g}{'r' if spec.relative else ''})"
    if isinstance(spec, FlipY):
        return "flipy"
    if isinstance(spec, FlipX):
        return "flipx"
    if isinstance(spec, SpecAugment):
        return f"sa(axis={spec.axis},w={spec.w:g},R={spec.R})"
    raise TypeError(f"unknown perturbation {spec!r}")


def format_chain(specs):
    return ">".join(format_spec(s) for s in specs)
