"""Channel-wise 2D DFT of feature maps and amplitude/phase decomposition.

Conventions: the forward transform is unnormalized,
``X(m, n) = sum_{h,w} z(h, w) exp(-2j*pi*(m*h/H + n*w/W))``, and the inverse
carries the ``1/(H*W)`` factor. Bins stay in DC-corner layout (no shift).

Every public function accepts plain arrays or :class:`~tfcal.tensor.Node`
values; with nodes the result records a backward rule so the whole
decompose/recombine pipeline can sit inside a trained network.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .tensor import Node

_AMP_EPS = 1e-12
RESIDUAL_TOL = {np.dtype("float32"): 1e-3, np.dtype("float64"): 1e-8}


class NumericalIntegrityError(ArithmeticError):
    """Reconstruction left a non-negligible imaginary part."""


@dataclass
class Spectrum:
    re: np.ndarray | Node
    im: np.ndarray | Node

    @property
    def shape(self):
        return self.re.shape

    def to_complex(self) -> np.ndarray:
        re = self.re.value if isinstance(self.re, Node) else self.re
        im = self.im.value if isinstance(self.im, Node) else self.im
        return re + 1j * im


def is_power_of_two(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


@lru_cache(maxsize=None)
def _bit_reverse(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


@lru_cache(maxsize=None)
def _twiddles(size: int) -> np.ndarray:
    return np.exp(-2j * np.pi * np.arange(size // 2) / size)


@lru_cache(maxsize=None)
def _dft_matrix(n: int) -> np.ndarray:
    k = np.outer(np.arange(n), np.arange(n)) % n
    return np.exp(-2j * np.pi * k / n)


def _fft_rows(x: np.ndarray) -> np.ndarray:
    """Iterative radix-2 Cooley-Tukey over axis 0 of an (n, B) array, n = 2^k.

    Keeping the batch on the contiguous axis makes each butterfly stage a
    handful of long vector operations.
    """
    n, b = x.shape
    x = x[_bit_reverse(n)]
    size = 2
    while size <= n:
        half = size // 2
        x = x.reshape(n // size, size, b)
        even, odd = x[:, :half], x[:, half:]
        if half > 1:
            odd = odd * _twiddles(size)[None, :, None]
        x = np.concatenate([even + odd, even - odd], axis=1).reshape(n, b)
        size *= 2
    return x


def _transform_axis(x: np.ndarray, axis: int, fast: bool) -> np.ndarray:
    n = x.shape[axis]
    if not fast:
        m = _dft_matrix(n)
        return x @ m if axis in (-1, x.ndim - 1) else m @ x
    moved = np.moveaxis(x, axis, 0)
    y = _fft_rows(moved.reshape(n, -1)).reshape(moved.shape)
    return np.moveaxis(y, 0, axis)


def _use_fast(n: int, method: str) -> bool:
    if method == "auto":
        return is_power_of_two(n)
    if method == "fast":
        if not is_power_of_two(n):
            raise ValueError(f"fast transform needs power-of-two sizes, got {n}")
        return True
    if method == "direct":
        return False
    raise ValueError(f"unknown method {method!r}")


def fft2(z: np.ndarray, method: str = "auto") -> np.ndarray:
    """Complex128 forward transform over the last two axes."""
    x = np.asarray(z, dtype=np.complex128)
    x = _transform_axis(x, -1, _use_fast(x.shape[-1], method))
    return _transform_axis(x, -2, _use_fast(x.shape[-2], method))


def ifft2(x: np.ndarray, method: str = "auto") -> np.ndarray:
    """Complex128 inverse transform over the last two axes, with 1/(H*W)."""
    x = np.asarray(x, dtype=np.complex128)
    h, w = x.shape[-2:]
    return np.conj(fft2(np.conj(x), method)) / (h * w)


def dft2d(z, method: str = "auto") -> Spectrum:
    """Per-channel spectrum of an (N, C, H, W) tensor."""
    node = z if isinstance(z, Node) else None
    zv = node.value if node is not None else np.asarray(z)
    if zv.ndim != 4:
        raise ValueError(f"dft2d expects an (N, C, H, W) tensor, got shape {zv.shape}")
    dtype = zv.dtype if zv.dtype in RESIDUAL_TOL else np.dtype("float64")
    x = fft2(zv, method)
    re, im = x.real.astype(dtype), x.imag.astype(dtype)
    if node is None:
        return Spectrum(re, im)
    # adjoints of Re(F z) and Im(F z): Re(F g) and Im(F g) respectively
    re_node = Node(re, (node,), lambda g: (fft2(g, method).real.astype(dtype),))
    im_node = Node(im, (node,), lambda g: (fft2(g, method).imag.astype(dtype),))
    return Spectrum(re_node, im_node)


def _phase(re: np.ndarray, im: np.ndarray, amp: np.ndarray) -> np.ndarray:
    ph = np.arctan2(im, re)
    ph = np.where(ph <= -np.pi, np.pi, ph)
    return np.where(amp == 0, 0, ph).astype(re.dtype)


def decompose(s: Spectrum):
    """Return (amplitude, phase); phase lies in (-pi, pi] and is 0 where amplitude is 0."""
    if not isinstance(s.re, Node) and not isinstance(s.im, Node):
        re, im = np.asarray(s.re), np.asarray(s.im)
        amp = np.hypot(re, im)
        return amp, _phase(re, im, amp)
    re_n = s.re if isinstance(s.re, Node) else Node(s.re)
    im_n = s.im if isinstance(s.im, Node) else Node(s.im)
    re, im = re_n.value, im_n.value
    amp = np.hypot(re, im)
    sq = re * re + im * im + _AMP_EPS
    guarded = np.sqrt(sq)
    amp_node = Node(amp, (re_n, im_n), lambda g: (g * re / guarded, g * im / guarded))
    phase_node = Node(_phase(re, im, amp), (re_n, im_n), lambda g: (-g * im / sq, g * re / sq))
    return amp_node, phase_node


def reconstruct(amp, phase, tol: float | None = None, return_residual: bool = False, method: str = "auto"):
    """Inverse transform of ``amp * exp(1j * phase)``; the real part is returned.

    A batch-1 amplitude broadcasts across the phase batch. Raises
    :class:`NumericalIntegrityError` when the discarded imaginary part
    exceeds ``tol`` (defaults: 1e-3 single, 1e-8 double).
    """
    a_node = amp if isinstance(amp, Node) else None
    p_node = phase if isinstance(phase, Node) else None
    a = a_node.value if a_node is not None else np.asarray(amp)
    p = p_node.value if p_node is not None else np.asarray(phase)
    if a.shape[1:] != p.shape[1:] or a.shape[0] not in (1, p.shape[0]):
        raise ValueError(f"amplitude shape {a.shape} does not match phase shape {p.shape}")
    dtype = np.result_type(a.dtype, p.dtype)
    if dtype not in RESIDUAL_TOL:
        dtype = np.dtype("float64")
    cos, sin = np.cos(p.astype(np.float64)), np.sin(p.astype(np.float64))
    y = ifft2(a * cos + 1j * (a * sin), method)
    residual = float(np.max(np.abs(y.imag))) if y.size else 0.0
    limit = RESIDUAL_TOL[np.dtype(dtype)] if tol is None else tol
    if residual > limit:
        raise NumericalIntegrityError(f"imaginary residual {residual:.3e} exceeds tolerance {limit:.1e}")
    out = y.real.astype(dtype)

    if a_node is not None or p_node is not None:
        hw = p.shape[-1] * p.shape[-2]
        broadcast = a.shape[0] != p.shape[0]

        def bw(g):
            gy = fft2(g, method) / hw
            gr, gi = gy.real, gy.imag
            ga = gr * cos + gi * sin
            if broadcast:
                ga = ga.sum(axis=0, keepdims=True)
            gp = a * (gi * cos - gr * sin)
            return ga.astype(dtype), gp.astype(dtype)

        parents = (a_node if a_node is not None else Node(a), p_node if p_node is not None else Node(p))
        out = Node(out, parents, bw)
    return (out, residual) if return_residual else out


def amplitude(z) -> np.ndarray:
    """Amplitude spectrum of a plain (N, C, H, W) array."""
    return decompose(dft2d(z))[0]


def phase(z) -> np.ndarray:
    return decompose(dft2d(z))[1]
