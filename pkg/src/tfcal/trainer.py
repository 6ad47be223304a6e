"""Two-stage training, leave-one-domain-out evaluation, ablations and sweeps."""
from __future__ import annotations

import csv
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import data as data_mod
from .config import TrainConfig
from .model import DTYPES, ModelCheckpoint, build, default_spec
from .optim import SgdState, decay_epoch, sgd_step
from .stylecal import StyleContext, PrototypeBank, UncalibratedModelError, random_prototype
from .tensor import backward, cross_entropy

log = logging.getLogger(__name__)

STRENGTH_GRID = (0.1, 0.3, 0.5, 0.75, 1.0)
SEEDS = (0, 1, 2)


class DivergenceError(FloatingPointError):
    pass


@dataclass
class RunReport:
    config: dict
    epochs: list = field(default_factory=list)
    target_acc_uncal: float = 0.0
    target_acc_cal: Optional[float] = None
    target_acc: float = 0.0
    per_domain: dict = field(default_factory=dict)
    prototype_epoch: Optional[int] = None
    wall_time: float = 0.0

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)


# ---------------------------------------------------------------------------
# evaluation

def predict(ckpt: ModelCheckpoint, images: np.ndarray, calibrated: bool = False, tau: float = 0.5,
            batch_size: int = 128) -> np.ndarray:
    """Arg-max labels for raw [0, 1] images."""
    style = None
    if calibrated:
        if ckpt.prototype is None and tau > 0:
            raise UncalibratedModelError("uncalibrated model: checkpoint has no source prototype file")
        style = ckpt.style_context(tau)
    x = ckpt.normalize(images)
    preds = []
    for i in range(0, len(x), batch_size):
        logits = ckpt.model.forward(x[i:i + batch_size], "test", style)
        preds.append(np.argmax(logits.value, axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def evaluate(ckpt: ModelCheckpoint, split: data_mod.DomainDataset, calibrated: bool = False,
             tau: float = 0.5) -> dict:
    """Accuracy overall and per domain (domain ids are read for reporting only)."""
    preds = predict(ckpt, split.images, calibrated, tau)
    correct = preds == split.labels
    per_domain = {}
    for d in np.unique(split.domains):
        sel = split.domains == d
        per_domain[split.domain_names[d]] = float(correct[sel].mean())
    return {"accuracy": float(correct.mean()) if len(correct) else 0.0, "per_domain": per_domain,
            "n": int(len(correct)), "predictions": preds.tolist()}


# ---------------------------------------------------------------------------
# training

def _streams(seed: int):
    ss = np.random.SeedSequence(seed)
    return [np.random.default_rng(s) for s in ss.spawn(4)]


def prepare_splits(cfg: TrainConfig, dataset: Optional[data_mod.DomainDataset] = None):
    ds = dataset if dataset is not None else data_mod.load(cfg.dataset)
    return data_mod.split_ldo(ds, cfg.target_domain, cfg.val_fraction, cfg.seed)


def train(cfg: TrainConfig, dataset: Optional[data_mod.DomainDataset] = None):
    """Train one model and return ``(checkpoint, report)``.

    Calibration coins start at epoch ceil(stage_fraction * epochs) and use the
    prototype finalized at the end of the previous epoch.
    """
    start = time.perf_counter()
    dtype = DTYPES[cfg.precision]
    train_ds, val_ds, test_ds = prepare_splits(cfg, dataset)
    mean = float(train_ds.images.mean(dtype=np.float64))
    std = float(train_ds.images.std(dtype=np.float64)) or 1.0
    spec = default_spec(len(train_ds.class_names), train_ds.images.shape[1:], cfg.model.channels,
                        cfg.model.insertion_block)
    model = build(spec, cfg.seed, dtype)
    ckpt = ModelCheckpoint(model, config=cfg.to_dict(), seed=cfg.seed, input_mean=mean, input_std=std)
    shuffle_rng, aaf_rng, cal_rng, proto_rng = _streams(cfg.seed)
    optim = SgdState({"extractor": cfg.optim.lr_extractor, "head": cfg.optim.lr_head},
                     cfg.optim.weight_decay, cfg.optim.decay_factor, cfg.optim.decay_epoch_fraction)
    ctx = None
    if cfg.uses_style_layer:
        ctx = StyleContext(cal=cfg.calibration, aug=cfg.aaf, bank=PrototypeBank(), aaf_rng=aaf_rng,
                           cal_rng=cal_rng, total_epochs=cfg.epochs)

    x_all = ckpt.normalize(train_ds.images)
    y_all = train_ds.labels
    report = RunReport(config=cfg.to_dict())
    groups = model.param_groups()
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(len(y_all))
        losses, sizes, cal_batches, aaf_batches = [], [], 0, 0
        if ctx is not None:
            ctx.epoch = epoch
        for step, i in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[i:i + cfg.batch_size]
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    loss = cross_entropy(model.forward(x_all[idx], "train", ctx), y_all[idx])
            except ArithmeticError as exc:
                raise DivergenceError(f"training diverged at epoch {epoch}, step {step}: {exc}") from exc
            if not np.isfinite(loss.value):
                raise DivergenceError(f"training diverged at epoch {epoch}, step {step}: loss {loss.value}")
            model.zero_grad()
            backward(loss)
            sgd_step(groups, optim, epoch, cfg.epochs)
            losses.append(float(loss.value))
            sizes.append(len(idx))
            if ctx is not None:
                cal_batches += ctx.last_coins.cal
                aaf_batches += ctx.last_coins.aaf
        if ctx is not None and ctx.bank.count:
            proto = ctx.bank.finalize(epoch)
            if cfg.calibration.random_prototype:
                ctx.bank.prototype = random_prototype(proto, proto_rng)
        ckpt.prototype = None if ctx is None else ctx.bank.prototype
        ckpt.prototype_epoch = None if ctx is None else ctx.bank.epoch_tag
        val_acc = evaluate(ckpt, val_ds)["accuracy"] if len(val_ds) else None
        report.epochs.append({
            "epoch": epoch,
            "train_loss": float(np.average(losses, weights=sizes)),
            "val_acc": val_acc,
            "lr_extractor": optim.effective_lr("extractor", epoch, cfg.epochs),
            "cal_batches": cal_batches,
            "aaf_batches": aaf_batches,
        })
        log.debug("epoch %d loss %.4f val %s", epoch, report.epochs[-1]["train_loss"], val_acc)

    uncal = evaluate(ckpt, test_ds)
    report.target_acc_uncal = uncal["accuracy"]
    report.per_domain = {"uncalibrated": uncal["per_domain"]}
    if ckpt.prototype is not None and cfg.calibration.test:
        cal = evaluate(ckpt, test_ds, calibrated=True, tau=cfg.calibration.tau)
        report.target_acc_cal = cal["accuracy"]
        report.per_domain["calibrated"] = cal["per_domain"]
    report.target_acc = report.target_acc_cal if report.target_acc_cal is not None else report.target_acc_uncal
    report.prototype_epoch = ckpt.prototype_epoch
    report.wall_time = time.perf_counter() - start
    return ckpt, report


def stage_epochs(cfg: TrainConfig) -> dict:
    return {"tfcal_from": decay_epoch(cfg.calibration.stage_fraction, cfg.epochs),
            "lr_decay_from": decay_epoch(cfg.optim.decay_epoch_fraction, cfg.epochs)}


# ---------------------------------------------------------------------------
# grids

# name, AAF, TF-Cal (train), TF-Cal (test), random prototype
ABLATION_ROWS = (
    ("erm", False, False, False, False),
    ("aaf", True, False, False, False),
    ("tfcal_train", False, True, False, False),
    ("aaf_tfcal_train", True, True, False, False),
    ("tfcal", False, True, True, False),
    ("taf_cal", True, True, True, False),
    ("random_prototype", False, True, True, True),
)


def ablation_config(base: TrainConfig, row: str, seed: int) -> TrainConfig:
    _, aaf_on, train_on, test_on, rand = next(r for r in ABLATION_ROWS if r[0] == row)
    return base.replace(**{"seed": seed, "aaf.enabled": aaf_on, "calibration.train": train_on,
                           "calibration.test": test_on, "calibration.random_prototype": rand})


def _run_cell(args):
    cell, cfg_dict, dataset = args
    _, report = train(TrainConfig.from_dict(cfg_dict), dataset)
    return cell, report.to_dict()


def run_grid(jobs_list, dataset=None, jobs: int = 1) -> list:
    """Train every ``(cell, TrainConfig)``; results come back in input order."""
    tasks = [(cell, cfg.to_dict(), dataset) for cell, cfg in jobs_list]
    if jobs <= 1:
        return [_run_cell(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_cell, tasks))


def summarize(results, cells) -> list:
    out = []
    for cell in cells:
        accs = [r["target_acc"] for c, r in results if c[0] == cell]
        seeds = [c[1] for c, _ in results if c[0] == cell]
        out.append({"cell": cell, "seeds": seeds, "target_acc": accs,
                    "mean": float(np.mean(accs)), "std": float(np.std(accs))})
    return out


@dataclass
class GridReport:
    kind: str
    base_config: dict
    cells: list
    runs: list

    def to_dict(self) -> dict:
        return {"kind": self.kind, "base_config": self.base_config, "cells": self.cells,
                "runs": [{"cell": c[0], "seed": c[1], **{k: v for k, v in r.items() if k != "config"}}
                         for c, r in self.runs]}

    def cell(self, name) -> dict:
        return next(c for c in self.cells if c["cell"] == name)

    def accuracy(self, name, seed) -> float:
        return next(r["target_acc"] for c, r in self.runs if c == (name, seed))

    def save(self, directory) -> None:
        os.makedirs(directory, exist_ok=True)
        with open(os.path.join(directory, f"{self.kind}.json"), "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)
        with open(os.path.join(directory, f"{self.kind}.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["cell", "seed", "target_acc", "target_acc_uncal", "target_acc_cal", "wall_time"])
            for (cell, seed), r in self.runs:
                w.writerow([cell, seed, r["target_acc"], r["target_acc_uncal"], r["target_acc_cal"],
                            round(r["wall_time"], 3)])


def ablate(base: TrainConfig, dataset=None, seeds=SEEDS, jobs: int = 1, rows=None) -> GridReport:
    """Component grid: AAF x TF-Cal(train) x TF-Cal(test) rows plus the random-prototype control."""
    names = [r[0] for r in ABLATION_ROWS] if rows is None else list(rows)
    cells = [((name, s), ablation_config(base, name, s)) for name in names for s in seeds]
    results = run_grid(cells, dataset, jobs)
    return GridReport("ablation", base.to_dict(), summarize(results, names), results)


def sweep_points(base: TrainConfig, axis: str, input_shape=(1, 32, 32), num_classes: int = 4) -> list:
    if axis == "strength":
        return list(STRENGTH_GRID)
    if axis == "layer":
        spec = default_spec(num_classes, tuple(input_shape), base.model.channels, base.model.insertion_block)
        return spec.legal_insertions()
    raise ValueError(f"unknown sweep axis {axis!r}; expected 'strength' or 'layer'")


def sweep_cells(base: TrainConfig, axis: str, points, seeds=SEEDS) -> list:
    """((point, seed), config) pairs for a sweep; every cell is the full method."""
    full = ablation_config(base, "taf_cal", base.seed)
    cells = []
    for p in points:
        for s in seeds:
            if axis == "strength":
                cfg = full.replace(**{"seed": s, "calibration.eta": p, "calibration.tau": p})
            elif axis == "layer":
                cfg = full.replace(**{"seed": s, "model.insertion_block": p})
            else:
                raise ValueError(f"unknown sweep axis {axis!r}; expected 'strength' or 'layer'")
            cells.append(((p, s), cfg))
    return cells


def sweep(base: TrainConfig, axis: str, dataset=None, seeds=SEEDS, jobs: int = 1) -> GridReport:
    """Full-method runs over eta = tau in the strength grid, or over insertion blocks."""
    if dataset is None:
        dataset = data_mod.load(base.dataset)
    points = sweep_points(base, axis, dataset.images.shape[1:], len(dataset.class_names))
    results = run_grid(sweep_cells(base, axis, points, seeds), dataset, jobs)
    return GridReport(f"sweep_{axis}", base.to_dict(), summarize(results, points), results)


# ---------------------------------------------------------------------------
# embeddings

def export_embeddings(ckpt: ModelCheckpoint, dataset: data_mod.DomainDataset, stage: str = "pre-style",
                      tau: Optional[float] = None, path=None, batch_size: int = 128):
    """Flattened insertion-layer features, one row per sample, plus labels and domains.

    ``pre-style`` is taken before the style layer; ``post-style`` after test-time
    calibration with ``tau`` (default: the checkpoint's configured tau).
    """
    if stage not in ("pre-style", "post-style"):
        raise ValueError(f"stage must be 'pre-style' or 'post-style', got {stage!r}")
    if tau is None:
        tau = ckpt.config.get("calibration", {}).get("tau", 0.5)
    style = None
    if stage == "post-style":
        if ckpt.prototype is None and tau > 0:
            raise UncalibratedModelError("uncalibrated model: checkpoint has no source prototype file")
        style = ckpt.style_context(tau)
    x = ckpt.normalize(dataset.images)
    feats = []
    for i in range(0, len(x), batch_size):
        cap = {}
        ckpt.model.forward(x[i:i + batch_size], "test", style, capture=cap)
        feats.append(cap["pre" if stage == "pre-style" else "post"])
    fmap = np.concatenate(feats)
    matrix = fmap.reshape(len(fmap), -1)
    if path is not None:
        c, h, w = fmap.shape[1:]
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["class", "domain"] + [f"f{ci}_{hi}_{wi}" for ci in range(c)
                                               for hi in range(h) for wi in range(w)])
            for row, label, dom in zip(matrix, dataset.labels, dataset.domains):
                wr.writerow([int(label), int(dom)] + [repr(float(v)) for v in row])
    return matrix, dataset.labels.copy(), dataset.domains.copy()
