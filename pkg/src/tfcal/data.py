"""Synthetic multi-domain shape classification with controllable style shift.

Each image is ``clamp(gain * mask(class) * texture(domain) + background(domain) + noise)``.
The class mask carries the content (and is identical across domains for the
same sample index); gain, texture and background are per-domain and never
depend on the class.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import tfc

MANIFEST_VERSION = 1
SHAPES = ("hbar", "vbar", "disc", "ring", "cross", "diagonal", "square", "triangle")


@dataclass
class DomainStyle:
    name: str = "neutral"
    gain: float = 1.0
    # additive low-frequency background: level * (0.5 + 0.5 cos(2pi (fy*y + fx*x)/S + phase))
    background: float = 0.0
    background_freq: tuple = (1, 0)
    background_phase: float = 0.0
    # multiplicative texture: 1 + depth * cos(2pi f x/S) cos(2pi f y/S)
    texture_freq: int = 0
    texture_depth: float = 0.0
    noise_std: float = 0.0
    # circular content shift (phase-only change); used by the adversarial control
    shift: tuple = (0, 0)


def default_domains() -> list:
    """Four domains whose differences are intensity/texture/background only."""
    return [
        DomainStyle("bright", gain=1.0, background=0.0, texture_freq=0, texture_depth=0.0, noise_std=0.03),
        DomainStyle("textured", gain=0.8, background=0.1, background_freq=(1, 0), texture_freq=4,
                    texture_depth=0.3, noise_std=0.03),
        DomainStyle("hazy", gain=0.6, background=0.25, background_freq=(0, 1), texture_freq=2,
                    texture_depth=0.2, noise_std=0.03),
        DomainStyle("dim", gain=0.4, background=0.4, background_freq=(1, 1), texture_freq=8,
                    texture_depth=0.4, noise_std=0.03),
    ]


def phase_shift_domains() -> list:
    """Negative control: domains differ by translating the content, not by style."""
    return [DomainStyle(f"shift{d}", gain=0.8, noise_std=0.03, shift=(3 * d, -2 * d)) for d in range(4)]


@dataclass
class SyntheticSpec:
    num_classes: int = 4
    num_domains: int = 4
    n_per_cell: int = 25
    image_size: int = 32
    channels: int = 1
    jitter: int = 2
    clamp: bool = True
    seed: int = 0
    domains: list = field(default_factory=default_domains)

    def __post_init__(self):
        self.domains = [d if isinstance(d, DomainStyle) else DomainStyle(**d) for d in self.domains]
        if self.num_classes < 2 or self.num_domains < 2 or self.n_per_cell < 1:
            raise ValueError("need num_classes >= 2, num_domains >= 2 and n_per_cell >= 1")
        if self.num_classes > len(SHAPES):
            raise ValueError(f"at most {len(SHAPES)} classes are available")
        if len(self.domains) != self.num_domains:
            raise ValueError(f"{self.num_domains} domains requested but {len(self.domains)} styles given")
        if any(d.gain <= 0 for d in self.domains):
            raise ValueError("domain gains must be > 0")
        if self.image_size < 8 or self.channels < 1:
            raise ValueError("image_size must be >= 8 and channels >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        d = dict(d)
        d["domains"] = [DomainStyle(**{**s, "background_freq": tuple(s.get("background_freq", (1, 0))),
                                        "shift": tuple(s.get("shift", (0, 0)))})
                        for s in d.get("domains", [])] or default_domains()
        return cls(**d)


@dataclass
class DomainDataset:
    images: np.ndarray          # (N, C, H, W) float32 in [0, 1]
    labels: np.ndarray          # (N,) int64
    domains: np.ndarray         # (N,) int64, evaluation metadata only
    class_names: list
    domain_names: list

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, index) -> "DomainDataset":
        index = np.asarray(index, dtype=np.int64)
        return DomainDataset(self.images[index], self.labels[index], self.domains[index],
                             list(self.class_names), list(self.domain_names))

    def cell_counts(self) -> np.ndarray:
        counts = np.zeros((len(self.class_names), len(self.domain_names)), dtype=np.int64)
        np.add.at(counts, (self.labels, self.domains), 1)
        return counts


# ---------------------------------------------------------------------------
# rendering

def shape_mask(kind: str, size: int, dy: int = 0, dx: int = 0) -> np.ndarray:
    """Binary mask of a centred geometric shape, offset by (dy, dx) pixels."""
    y, x = np.mgrid[0:size, 0:size].astype(np.float64)
    c = (size - 1) / 2
    y, x = y - c - dy, x - c - dx
    r = np.hypot(y, x)
    s = size / 32.0
    if kind == "hbar":
        m = (np.abs(y) <= 3 * s) & (np.abs(x) <= 11 * s)
    elif kind == "vbar":
        m = (np.abs(x) <= 3 * s) & (np.abs(y) <= 11 * s)
    elif kind == "disc":
        m = r <= 8 * s
    elif kind == "ring":
        m = (r >= 7 * s) & (r <= 11 * s)
    elif kind == "cross":
        m = ((np.abs(y) <= 2 * s) | (np.abs(x) <= 2 * s)) & (np.abs(y) <= 10 * s) & (np.abs(x) <= 10 * s)
    elif kind == "diagonal":
        m = (np.abs(y - x) <= 3 * s) & (r <= 12 * s)
    elif kind == "square":
        m = (np.maximum(np.abs(y), np.abs(x)) <= 10 * s) & (np.maximum(np.abs(y), np.abs(x)) >= 7 * s)
    elif kind == "triangle":
        m = (y <= 8 * s) & (y >= -8 * s) & (np.abs(x) <= (y + 8 * s) / 2 + 0.5)
    else:
        raise ValueError(f"unknown shape {kind!r}")
    return m.astype(np.float64)


def _style_fields(style: DomainStyle, size: int):
    y, x = np.mgrid[0:size, 0:size].astype(np.float64)
    texture = np.ones((size, size))
    if style.texture_depth:
        f = style.texture_freq
        texture = 1 + style.texture_depth * np.cos(2 * np.pi * f * x / size) * np.cos(2 * np.pi * f * y / size)
    background = np.zeros((size, size))
    if style.background:
        fy, fx = style.background_freq
        background = style.background * (0.5 + 0.5 * np.cos(2 * np.pi * (fy * y + fx * x) / size
                                                              + style.background_phase))
    return texture, background


def render(spec: SyntheticSpec, cls: int, domain: int, index: int, clamp: Optional[bool] = None) -> np.ndarray:
    """One (C, H, W) image as float64; content depends only on (seed, cls, index)."""
    size = spec.image_size
    content_rng = np.random.default_rng([spec.seed, cls, index, 0])
    dy, dx = content_rng.integers(-spec.jitter, spec.jitter + 1, size=2)
    style = spec.domains[domain]
    mask = shape_mask(SHAPES[cls], size, dy, dx)
    if style.shift != (0, 0):
        mask = np.roll(mask, tuple(style.shift), axis=(0, 1))
    texture, background = _style_fields(style, size)
    img = np.repeat((style.gain * mask * texture + background)[None], spec.channels, axis=0)
    if style.noise_std:
        noise_rng = np.random.default_rng([spec.seed, cls, index, domain + 1])
        img = img + noise_rng.normal(0.0, style.noise_std, size=img.shape)
    if spec.clamp if clamp is None else clamp:
        img = np.clip(img, 0.0, 1.0)
    return img


def generate(spec: SyntheticSpec) -> DomainDataset:
    """Deterministic dataset of K * D * n samples ordered by (domain, class, index)."""
    images, labels, domains = [], [], []
    for d in range(spec.num_domains):
        for c in range(spec.num_classes):
            for j in range(spec.n_per_cell):
                images.append(render(spec, c, d, j))
                labels.append(c)
                domains.append(d)
    return DomainDataset(np.stack(images).astype(np.float32), np.asarray(labels, dtype=np.int64),
                         np.asarray(domains, dtype=np.int64), list(SHAPES[:spec.num_classes]),
                         [s.name for s in spec.domains])


# ---------------------------------------------------------------------------
# leave-one-domain-out

def _stratified_counts(class_sizes: np.ndarray, fraction: float) -> np.ndarray:
    """Per-class validation counts summing to round(fraction * total), largest remainder."""
    target = int(round(fraction * class_sizes.sum()))
    exact = fraction * class_sizes
    counts = np.floor(exact).astype(np.int64)
    order = np.argsort(-(exact - counts), kind="stable")
    for i in order[:target - counts.sum()]:
        counts[i] += 1
    return np.minimum(counts, class_sizes)


def split_ldo(ds: DomainDataset, target_domain: int, val_fraction: float = 0.1, seed: int = 0):
    """(train, val, test): test is the whole target domain, val is class-stratified."""
    if not 0 <= target_domain < len(ds.domain_names):
        raise ValueError(f"unknown target domain {target_domain}; have {len(ds.domain_names)} domains")
    if not 0 <= val_fraction < 1:
        raise ValueError(f"val_fraction must lie in [0, 1), got {val_fraction}")
    test_idx = np.flatnonzero(ds.domains == target_domain)
    source_idx = np.flatnonzero(ds.domains != target_domain)
    classes = np.arange(len(ds.class_names))
    per_class = [source_idx[ds.labels[source_idx] == c] for c in classes]
    counts = _stratified_counts(np.array([len(p) for p in per_class]), val_fraction)
    rng = np.random.default_rng([seed, target_domain])
    val_idx = []
    for idx, k in zip(per_class, counts):
        val_idx.extend(rng.permutation(idx)[:k].tolist())
    val_idx = np.sort(np.asarray(val_idx, dtype=np.int64))
    train_idx = np.setdiff1d(source_idx, val_idx)
    return ds.subset(train_idx), ds.subset(val_idx), ds.subset(test_idx)


# ---------------------------------------------------------------------------
# persistence

class DatasetFormatError(ValueError):
    pass


def save(ds: DomainDataset, directory, layout: str = "packed") -> None:
    """Write ``manifest.json`` plus TFC1 image files (one per domain, or one per sample)."""
    os.makedirs(directory, exist_ok=True)
    samples = []
    if layout == "packed":
        for d in range(len(ds.domain_names)):
            idx = np.flatnonzero(ds.domains == d)
            if idx.size:
                tfc.write_tensor(os.path.join(directory, f"domain_{d}.tfc"), ds.images[idx])
        names = [f"domain_{d}.tfc" for d in ds.domains]
    elif layout == "per-sample":
        names = []
        for i, img in enumerate(ds.images):
            names.append(f"sample_{i:06d}.tfc")
            tfc.write_tensor(os.path.join(directory, names[-1]), img[None])
    else:
        raise ValueError(f"unknown layout {layout!r}")
    for name, c, d in zip(names, ds.labels, ds.domains):
        samples.append({"file": name, "class": int(c), "domain": int(d)})
    manifest = {"version": MANIFEST_VERSION, "classes": list(ds.class_names),
                "domains": list(ds.domain_names), "samples": samples}
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1)


def load(directory) -> DomainDataset:
    path = os.path.join(directory, "manifest.json")
    if not os.path.exists(path):
        raise FileNotFoundError(f"dataset manifest not found: {path}")
    with open(path) as fh:
        manifest = json.load(fh)
    if manifest.get("version") != MANIFEST_VERSION:
        raise DatasetFormatError(f"{path}: unsupported manifest version {manifest.get('version')!r}")
    for key in ("classes", "domains", "samples"):
        if key not in manifest:
            raise DatasetFormatError(f"{path}: missing field {key!r}")
    samples = manifest["samples"]
    by_file: dict = {}
    for i, s in enumerate(samples):
        by_file.setdefault(s["file"], []).append(i)
    images = [None] * len(samples)
    for name, rows in by_file.items():
        fpath = os.path.join(directory, name)
        if not os.path.exists(fpath):
            raise FileNotFoundError(f"dataset tensor file missing: {name} (referenced by {path})")
        arr = tfc.read_tensor(fpath)
        if arr.shape[0] != len(rows):
            raise DatasetFormatError(f"{fpath}: holds {arr.shape[0]} samples but manifest lists {len(rows)}")
        for row, img in zip(rows, arr):
            images[row] = img
    labels = np.array([s["class"] for s in samples], dtype=np.int64)
    domains = np.array([s["domain"] for s in samples], dtype=np.int64)
    if len(samples) and (labels.max() >= len(manifest["classes"]) or domains.max() >= len(manifest["domains"])):
        raise DatasetFormatError(f"{path}: sample references an unknown class or domain")
    stacked = np.stack(images) if images else np.zeros((0, 1, 1, 1), dtype=np.float32)
    return DomainDataset(stacked, labels, domains, list(manifest["classes"]), list(manifest["domains"]))
