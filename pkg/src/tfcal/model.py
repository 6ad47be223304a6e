"""Small convolutional classifier with a pluggable style layer.

The default topology is four ``conv3x3 -> relu -> avgpool2`` blocks followed
by a ``flatten -> dense`` head. The style layer can be inserted after any
convolutional block.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import stylecal, tfc
from .tensor import AvgPool2, Conv2d, Dense, Flatten, Node, ReLU, init_layer, layer_forward

_LAYER_TYPES = {"conv2d": Conv2d, "relu": ReLU, "avgpool2": AvgPool2, "flatten": Flatten, "dense": Dense}
_LAYER_NAMES = {v: k for k, v in _LAYER_TYPES.items()}
DTYPES = {"single": np.dtype("float32"), "double": np.dtype("float64")}


@dataclass
class NetworkSpec:
    blocks: list
    insertion_after_block: int = 2
    num_classes: int = 4
    input_shape: tuple = (1, 32, 32)

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        shapes = self.block_output_shapes()
        if not 1 <= self.insertion_after_block <= len(self.blocks):
            raise ValueError(f"insertion_after_block {self.insertion_after_block} out of range 1..{len(self.blocks)}")
        if len(shapes[self.insertion_after_block - 1]) != 3:
            raise ValueError(f"block {self.insertion_after_block} output is not a feature map; cannot insert style layer")
        if shapes[-1] != (self.num_classes,):
            raise ValueError(f"network emits {shapes[-1]}, expected ({self.num_classes},)")

    def block_output_shapes(self) -> list:
        shape, out = self.input_shape, []
        for block in self.blocks:
            for layer in block:
                shape = layer.output_shape(shape)
            out.append(tuple(shape))
        return out

    def legal_insertions(self) -> list:
        return [i + 1 for i, s in enumerate(self.block_output_shapes()) if len(s) == 3]

    def to_dict(self) -> dict:
        def layer_dict(layer):
            d = {"type": _LAYER_NAMES[type(layer)]}
            if isinstance(layer, Conv2d):
                d.update(in_channels=layer.in_channels, out_channels=layer.out_channels,
                         kernel=layer.kernel, stride=layer.stride, padding=layer.padding)
            elif isinstance(layer, Dense):
                d.update(in_features=layer.in_features, out_features=layer.out_features)
            return d
        return {"blocks": [[layer_dict(l) for l in b] for b in self.blocks],
                "insertion_after_block": self.insertion_after_block,
                "num_classes": self.num_classes, "input_shape": list(self.input_shape)}

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        blocks = [[_LAYER_TYPES[l["type"]](**{k: v for k, v in l.items() if k != "type"}) for l in b]
                  for b in d["blocks"]]
        return cls(blocks, d["insertion_after_block"], d["num_classes"], tuple(d["input_shape"]))


def default_spec(num_classes: int = 4, input_shape=(1, 32, 32), channels=(16, 32, 32, 64),
                 insertion_after_block: int = 2) -> NetworkSpec:
    c, h, w = input_shape
    blocks = []
    for width in channels:
        blocks.append([Conv2d(c, width, 3, 1, 1), ReLU(), AvgPool2()])
        c, h, w = width, h // 2, w // 2
    blocks.append([Flatten(), Dense(c * h * w, num_classes)])
    return NetworkSpec(blocks, insertion_after_block, num_classes, tuple(input_shape))


class Model:
    def __init__(self, spec: NetworkSpec, dtype=np.float32):
        self.spec = spec
        self.dtype = np.dtype(dtype)

    @property
    def blocks(self):
        return self.spec.blocks

    def named_parameters(self) -> list:
        out = []
        for b, block in enumerate(self.blocks, start=1):
            for i, layer in enumerate(block):
                if isinstance(layer, (Conv2d, Dense)):
                    out.append((f"block{b}.{i}.weight", layer.weight))
                    out.append((f"block{b}.{i}.bias", layer.bias))
        return out

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def param_groups(self) -> dict:
        head = set(id(p) for layer in self.blocks[-1] if isinstance(layer, Dense)
                   for p in (layer.weight, layer.bias))
        groups = {"extractor": [], "head": []}
        for p in self.parameters():
            groups["head" if id(p) in head else "extractor"].append(p)
        return groups

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def num_parameters(self) -> int:
        return sum(p.value.size for p in self.parameters())

    def run_blocks(self, x: Node, start: int, stop: int) -> Node:
        """Apply blocks ``start..stop`` (1-based, inclusive)."""
        for block in self.blocks[start - 1:stop]:
            for layer in block:
                x = layer_forward(x, layer)
        return x

    def forward(self, x, mode: str = "test", style: Optional[stylecal.StyleContext] = None,
                capture: Optional[dict] = None) -> Node:
        """Logits for a batch. Without a style context this is the plain ERM network."""
        xv = x.value if isinstance(x, Node) else np.asarray(x)
        if tuple(xv.shape[1:]) != self.spec.input_shape:
            raise ValueError(f"input shape {xv.shape[1:]} does not match network input {self.spec.input_shape}")
        h = x if isinstance(x, Node) else Node(xv.astype(self.dtype, copy=False))
        k = self.spec.insertion_after_block
        h = self.run_blocks(h, 1, k)
        if capture is not None:
            capture["pre"] = h.value
        if style is not None:
            h = stylecal.style_layer(h, mode, style)
        if capture is not None:
            capture["post"] = h.value
        return self.run_blocks(h, k + 1, len(self.blocks))


def build(spec: NetworkSpec, seed: int = 0, dtype=np.float32) -> Model:
    """Fresh model with layers initialized in order from one seeded generator."""
    # each build gets its own layer descriptors so models never share parameters
    spec = NetworkSpec.from_dict(spec.to_dict())
    rng = np.random.default_rng(seed)
    for block in spec.blocks:
        for layer in block:
            init_layer(layer, rng, dtype)
    return Model(spec, dtype)


def forward(model: Model, x, mode: str = "test", style=None) -> Node:
    return model.forward(x, mode, style)


# ---------------------------------------------------------------------------
# checkpoints

def config_digest(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


@dataclass
class ModelCheckpoint:
    model: Model
    prototype: Optional[np.ndarray] = None
    prototype_epoch: Optional[int] = None
    config: dict = field(default_factory=dict)
    seed: int = 0
    input_mean: float = 0.0
    input_std: float = 1.0

    @property
    def digest(self) -> str:
        return config_digest(self.config)

    def normalize(self, images: np.ndarray) -> np.ndarray:
        return ((images - self.input_mean) / self.input_std).astype(self.model.dtype)

    def style_context(self, tau: float) -> stylecal.StyleContext:
        """Test-time context backed by the persisted prototype."""
        bank = stylecal.PrototypeBank(prototype=self.prototype, epoch_tag=self.prototype_epoch)
        return stylecal.StyleContext(bank=bank, tau=tau, record=False)


MANIFEST = "manifest.txt"
PROTOTYPE_FILE = "prototype.tfc"


def save_checkpoint(ckpt: ModelCheckpoint, directory) -> None:
    os.makedirs(os.path.join(directory, "params"), exist_ok=True)
    files = []
    for name, p in ckpt.model.named_parameters():
        rel = f"params/{name}.tfc"
        tfc.write_tensor(os.path.join(directory, rel), p.value)
        files.append([name, rel, list(p.shape)])
    proto_path = os.path.join(directory, PROTOTYPE_FILE)
    if ckpt.prototype is not None:
        tfc.write_tensor(proto_path, ckpt.prototype)
    elif os.path.exists(proto_path):
        os.remove(proto_path)
    lines = {
        "format": "tfcal-checkpoint 1",
        "precision": "double" if ckpt.model.dtype == np.float64 else "single",
        "seed": str(ckpt.seed),
        "config_digest": ckpt.digest,
        "input_mean": repr(float(ckpt.input_mean)),
        "input_std": repr(float(ckpt.input_std)),
        "prototype_file": PROTOTYPE_FILE if ckpt.prototype is not None else "none",
        "prototype_epoch": "none" if ckpt.prototype_epoch is None else str(ckpt.prototype_epoch),
        "spec": json.dumps(ckpt.model.spec.to_dict(), sort_keys=True),
        "params": json.dumps(files),
        "config": json.dumps(ckpt.config, sort_keys=True),
    }
    with open(os.path.join(directory, MANIFEST), "w") as fh:
        for k, v in lines.items():
            fh.write(f"{k}: {v}\n")


def read_manifest(directory) -> dict:
    path = os.path.join(directory, MANIFEST)
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint manifest not found: {path}")
    out = {}
    with open(path) as fh:
        for line in fh:
            if line.strip():
                key, _, value = line.rstrip("\n").partition(": ")
                out[key] = value
    return out


def load_checkpoint(directory) -> ModelCheckpoint:
    """Load a checkpoint; a missing prototype file leaves ``prototype`` as None."""
    m = read_manifest(directory)
    dtype = DTYPES[m["precision"]]
    spec = NetworkSpec.from_dict(json.loads(m["spec"]))
    model = Model(spec, dtype)
    by_name = {}
    for b, block in enumerate(spec.blocks, start=1):
        for i, layer in enumerate(block):
            if isinstance(layer, (Conv2d, Dense)):
                by_name[f"block{b}.{i}"] = layer
    for name, rel, shape in json.loads(m["params"]):
        arr = tfc.read_tensor(os.path.join(directory, rel)).reshape(shape)
        layer_key, _, attr = name.rpartition(".")
        setattr(by_name[layer_key], attr, Node(arr, requires_grad=True))
    prototype = None
    proto_path = os.path.join(directory, PROTOTYPE_FILE)
    if m["prototype_file"] != "none" and os.path.exists(proto_path):
        prototype = tfc.read_tensor(proto_path)
    epoch = None if m["prototype_epoch"] == "none" else int(m["prototype_epoch"])
    ckpt = ModelCheckpoint(model, prototype, epoch, json.loads(m["config"]), int(m["seed"]),
                           float(m["input_mean"]), float(m["input_std"]))
    if ckpt.digest != m["config_digest"]:
        raise ValueError(f"{directory}: config digest mismatch")
    return ckpt
