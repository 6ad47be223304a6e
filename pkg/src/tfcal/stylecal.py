"""Amplitude-space style calibration and augmentation.

Features are split into amplitude (style) and phase (content). Training
accumulates source amplitudes into a :class:`PrototypeBank`; the mean map is
the source prototype. Calibration pulls a sample's amplitude toward that
prototype, and AAF mixes amplitudes between random pairs in the batch. The
phase always passes through untouched.

Nothing here takes a domain identifier.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import spectral
from .optim import decay_epoch
from .tensor import Node, lerp, take_batch


class UncalibratedModelError(RuntimeError):
    """Calibrated inference was requested but no source prototype exists."""


@dataclass
class CalibrationConfig:
    eta: float = 0.5
    tau: float = 0.5
    p_cal: float = 0.5
    stage_fraction: float = 0.7
    train: bool = True
    test: bool = True
    exclusive: bool = False
    bank_before_aaf: bool = True
    random_prototype: bool = False

    def __post_init__(self):
        for name in ("eta", "tau", "p_cal", "stage_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")


@dataclass
class AafConfig:
    alpha: float = 0.2
    p_aaf: float = 0.5
    mode: str = "mix"
    enabled: bool = True

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")
        if not 0.0 <= self.p_aaf <= 1.0:
            raise ValueError(f"p_aaf must lie in [0, 1], got {self.p_aaf}")
        if self.mode not in ("mix", "swap"):
            raise ValueError(f"mode must be 'mix' or 'swap', got {self.mode!r}")


@dataclass
class PrototypeBank:
    """Running sum of amplitude maps; ``finalize`` turns it into the prototype.

    The finalized prototype stays available (``prototype``/``epoch_tag``)
    while the next epoch accumulates into a fresh sum.
    """
    running_sum: Optional[np.ndarray] = None
    count: int = 0
    prototype: Optional[np.ndarray] = None
    epoch_tag: Optional[int] = None
    dtype: Optional[np.dtype] = None

    @property
    def bin_shape(self):
        if self.running_sum is not None:
            return self.running_sum.shape[1:]
        if self.prototype is not None:
            return self.prototype.shape[1:]
        return None

    def update(self, amps: np.ndarray) -> None:
        amps = np.asarray(amps)
        if amps.ndim != 4:
            raise ValueError(f"bank expects (N, C, H, W) amplitude maps, got shape {amps.shape}")
        expected = self.bin_shape
        if expected is not None and amps.shape[1:] != expected:
            raise ValueError(f"amplitude bins {amps.shape[1:]} do not match bank bins {expected}")
        batch_sum = amps.sum(axis=0, keepdims=True, dtype=np.float64)
        self.running_sum = batch_sum if self.running_sum is None else self.running_sum + batch_sum
        self.count += amps.shape[0]
        self.dtype = amps.dtype

    def finalize(self, epoch: int) -> np.ndarray:
        if self.count == 0:
            raise ValueError("cannot finalize an empty prototype bank: no source amplitudes were recorded")
        self.prototype = (self.running_sum / self.count).astype(self.dtype)
        self.epoch_tag = epoch
        self.running_sum = None
        self.count = 0
        return self.prototype


def bank_update(bank: PrototypeBank, amps: np.ndarray) -> PrototypeBank:
    bank.update(amps)
    return bank


def bank_finalize(bank: PrototypeBank, epoch: int) -> np.ndarray:
    return bank.finalize(epoch)


def calibrate(amp, proto: np.ndarray, strength: float):
    """``strength * proto + (1 - strength) * amp``, the prototype broadcast over the batch.

    The prototype is a constant buffer; only ``amp`` receives gradient.
    """
    if not 0.0 <= strength <= 1.0:
        raise ValueError(f"calibration strength must lie in [0, 1], got {strength}")
    proto = np.asarray(proto)
    shape = amp.shape
    if proto.ndim != 4 or proto.shape[0] != 1 or proto.shape[1:] != shape[1:]:
        raise ValueError(f"prototype shape {proto.shape} incompatible with amplitude shape {shape}")
    if isinstance(amp, Node):
        return lerp(amp, proto.astype(amp.dtype, copy=False), strength)
    return strength * proto + (1 - strength) * np.asarray(amp)


def aaf(amp_a, amp_b, delta: float):
    """Amplitude mixing ``delta * a + (1 - delta) * b``; delta = 0 swaps in ``b``."""
    if amp_a.shape != amp_b.shape:
        raise ValueError(f"aaf operands differ in shape: {amp_a.shape} vs {amp_b.shape}")
    if not 0.0 <= delta <= 1.0:
        raise ValueError(f"delta must lie in [0, 1], got {delta}")
    if isinstance(amp_a, Node) or isinstance(amp_b, Node):
        a = amp_a if isinstance(amp_a, Node) else Node(amp_a)
        return lerp(amp_b, a, delta) if isinstance(amp_b, Node) else lerp(a, amp_b, 1 - delta)
    return delta * np.asarray(amp_a) + (1 - delta) * np.asarray(amp_b)


def sample_delta(rng: np.random.Generator, alpha: float) -> float:
    """Beta(alpha, alpha) as a ratio of two Gamma(alpha) draws."""
    x, y = rng.gamma(alpha), rng.gamma(alpha)
    if x + y == 0.0:
        # both underflowed; only reachable for tiny alpha
        return float(rng.random() < 0.5)
    return float(x / (x + y))


def mirror_bins(x: np.ndarray) -> np.ndarray:
    """Map bin (m, n) to ((H - m) % H, (W - n) % W) over the last two axes."""
    return np.roll(np.flip(x, axis=(-2, -1)), shift=1, axis=(-2, -1))


def random_prototype(proto: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Gaussian control prototype matching ``proto``'s global mean/std.

    Draws are mirrored so the map keeps the conjugate symmetry of a real
    feature's amplitude, then clamped at zero.
    """
    h, w = proto.shape[-2:]
    draw = rng.normal(proto.mean(), proto.std(), size=proto.shape)
    lin = np.arange(h * w).reshape(h, w)
    keep = lin <= mirror_bins(lin)
    draw = np.where(keep, draw, mirror_bins(draw))
    return np.maximum(draw, 0.0).astype(proto.dtype)


@dataclass
class StyleCoins:
    """Random decisions for one mini-batch."""
    aaf: bool = False
    delta: float = 1.0
    perm: Optional[np.ndarray] = None
    cal: bool = False


@dataclass
class StyleContext:
    """Everything the style layer needs besides the features themselves."""
    cal: CalibrationConfig = field(default_factory=CalibrationConfig)
    aug: AafConfig = field(default_factory=AafConfig)
    bank: PrototypeBank = field(default_factory=PrototypeBank)
    aaf_rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    cal_rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(1))
    epoch: int = 0
    total_epochs: int = 1
    tau: Optional[float] = None
    coins: Optional[StyleCoins] = None
    record: bool = True
    last_coins: Optional[StyleCoins] = None
    last_residual: float = 0.0

    def stage_epoch(self) -> int:
        return decay_epoch(self.cal.stage_fraction, self.total_epochs)

    def cal_eligible(self) -> bool:
        return self.cal.train and self.epoch >= self.stage_epoch() and self.bank.prototype is not None

    def draw_coins(self, batch: int) -> StyleCoins:
        coins = StyleCoins()
        if self.aug.enabled and self.aaf_rng.random() < self.aug.p_aaf:
            coins.aaf = True
            coins.delta = 0.0 if self.aug.mode == "swap" else sample_delta(self.aaf_rng, self.aug.alpha)
            coins.perm = self.aaf_rng.permutation(batch)
        # no calibration coin is drawn before the stage epoch
        if self.cal_eligible():
            coins.cal = bool(self.cal_rng.random() < self.cal.p_cal)
            if self.cal.exclusive and coins.aaf:
                coins.cal = False
        return coins


def style_layer(z, mode: str, ctx: StyleContext):
    """Decompose, augment/calibrate the amplitude, and recombine with the original phase.

    train: record amplitudes into the bank, AAF with probability p_aaf,
    calibration (strength eta) with probability p_cal once past the stage
    epoch. test: calibration with strength tau on every sample.
    """
    if mode not in ("train", "test"):
        raise ValueError(f"mode must be 'train' or 'test', got {mode!r}")
    zshape = z.shape
    bins = ctx.bank.bin_shape
    if bins is not None and tuple(zshape[1:]) != tuple(bins):
        raise ValueError(f"style layer input bins {tuple(zshape[1:])} do not match prototype bank {bins}")
    amp, ph = spectral.decompose(spectral.dft2d(z))
    raw = amp.value if isinstance(amp, Node) else amp

    if mode == "train":
        coins = ctx.coins if ctx.coins is not None else ctx.draw_coins(zshape[0])
        if ctx.record and ctx.cal.bank_before_aaf:
            ctx.bank.update(raw)
        if coins.aaf:
            partner = take_batch(amp, coins.perm) if isinstance(amp, Node) else amp[coins.perm]
            amp = aaf(amp, partner, coins.delta)
        if ctx.record and not ctx.cal.bank_before_aaf:
            ctx.bank.update(amp.value if isinstance(amp, Node) else amp)
        if coins.cal:
            if ctx.bank.prototype is None:
                raise UncalibratedModelError("calibration coin fired before any prototype was finalized")
            amp = calibrate(amp, ctx.bank.prototype, ctx.cal.eta)
        ctx.last_coins = coins
    else:
        tau = ctx.cal.tau if ctx.tau is None else ctx.tau
        if tau > 0:
            if ctx.bank.prototype is None:
                raise UncalibratedModelError(
                    "uncalibrated model: test-time calibration needs a persisted source prototype "
                    "(use tau=0 for pass-through)")
            amp = calibrate(amp, ctx.bank.prototype, tau)

    out, ctx.last_residual = spectral.reconstruct(amp, ph, return_residual=True)
    return out
