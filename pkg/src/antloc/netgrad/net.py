"""The small 3D encoder-decoder localizer and its checkpoint format."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import tensor as T

CHECKPOINT_FORMAT = "antloc-checkpoint/1"


def localizer_layers(width: int = 8, depth: int = 2, head_kernel: int = 1) -> list[dict]:
    """Layer list of the encoder-decoder.

    ``width=8, depth=2`` gives conv(1->8) pool conv(8->16) pool conv(16->16)
    up conv(16->8) up conv1x1(8->1), with ReLU after every 3x3x3 conv.
    ``head_kernel=3`` makes the output conv 3x3x3, so the field is no longer
    constant over the 2x2x2 blocks left by the last upsampling.
    """
    if depth < 1 or width < 1:
        raise ValueError("depth and width must be >= 1")
    if head_kernel not in (1, 3):
        raise ValueError("head_kernel must be 1 or 3")
    enc = [width * 2 ** i for i in range(depth)]
    layers, c = [], 1
    for ch in enc:
        layers.append({"type": "conv", "in": c, "out": ch, "k": 3, "relu": True})
        layers.append({"type": "avgpool2"})
        c = ch
    layers.append({"type": "conv", "in": c, "out": c, "k": 3, "relu": True})
    for i in reversed(range(depth)):
        layers.append({"type": "upsample2"})
        if i > 0:
            layers.append({"type": "conv", "in": c, "out": enc[i - 1], "k": 3, "relu": True})
            c = enc[i - 1]
    layers.append({"type": "conv", "in": c, "out": 1, "k": head_kernel, "relu": False})
    return layers


class LocalizerNet:
    """Fully convolutional net mapping (B, X, Y, Z, 1) to a same-shape field."""

    def __init__(self, layers=None, seed: int = 0, dtype=np.float32):
        self.layers = [dict(layer) for layer in (layers or localizer_layers())]
        self.dtype = np.dtype(dtype)
        self.params: dict[str, T.Tensor] = {}
        rng = np.random.default_rng(seed)
        for i, layer in enumerate(self.layers):
            if layer["type"] != "conv":
                continue
            k, c_in, c_out = layer["k"], layer["in"], layer["out"]
            std = np.sqrt(2.0 / (c_in * k ** 3)) if layer["relu"] else np.sqrt(1.0 / (c_in * k ** 3))
            w = rng.normal(0.0, std, size=(c_in, k, k, k, c_out))
            self.params[f"conv{i}.w"] = T.Tensor(w.astype(self.dtype), requires_grad=True, name=f"conv{i}.w")
            self.params[f"conv{i}.b"] = T.Tensor(np.zeros(c_out, self.dtype), requires_grad=True, name=f"conv{i}.b")

    @property
    def n_parameters(self) -> int:
        return int(sum(p.value.size for p in self.params.values()))

    def astype(self, dtype) -> "LocalizerNet":
        """Copy of the net with parameters cast to ``dtype``."""
        net = LocalizerNet.__new__(LocalizerNet)
        net.layers = [dict(layer) for layer in self.layers]
        net.dtype = np.dtype(dtype)
        net.params = {k: T.Tensor(p.value.astype(dtype), requires_grad=True, name=k) for k, p in self.params.items()}
        return net

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def __call__(self, x) -> T.Tensor:
        x = T.as_tensor(x)
        if x.value.ndim != 5 or x.shape[-1] != 1:
            raise ValueError(f"expected input of shape (B, X, Y, Z, 1), got {x.shape}")
        sizes = []
        h = x
        for i, layer in enumerate(self.layers):
            kind = layer["type"]
            if kind == "conv":
                h = T.conv3d(h, self.params[f"conv{i}.w"], self.params[f"conv{i}.b"])
                if layer["relu"]:
                    h = T.relu(h)
            elif kind == "avgpool2":
                sizes.append(h.shape[1:4])
                h = T.avgpool2(h)
            elif kind == "upsample2":
                h = T.upsample_nearest2(h, sizes.pop())
            else:
                raise ValueError(f"unknown layer type {kind!r}")
        return h

    def predict(self, volumes: np.ndarray) -> np.ndarray:
        """Forward pass without graph construction; ``volumes`` is (B, X, Y, Z)."""
        x = np.asarray(volumes, dtype=self.dtype)[..., None]
        with T.no_grad():
            return self(x).value[..., 0]

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: p.value for k, p in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]):
        for k, p in self.params.items():
            if arrays[k].shape != p.value.shape:
                raise ValueError(f"tensor {k}: shape {arrays[k].shape} != {p.value.shape}")
            p.value = np.asarray(arrays[k], dtype=self.dtype).copy()

    def save(self, directory, **meta) -> Path:
        """Write ``manifest.json`` plus one raw little-endian f32 blob per tensor."""
        directory = Path(directory)
        (directory / "tensors").mkdir(parents=True, exist_ok=True)
        tensors = []
        for name, p in self.params.items():
            fname = f"tensors/{name}.f32"
            (directory / fname).write_bytes(np.ascontiguousarray(p.value, dtype="<f4").tobytes())
            tensors.append({"name": name, "shape": list(p.value.shape), "file": fname,
                            "layout": "C_in,kx,ky,kz,C_out" if name.endswith(".w") else "C_out"})
        manifest = {"format": CHECKPOINT_FORMAT, "architecture": self.layers, "tensors": tensors,
                    "n_parameters": self.n_parameters}
        manifest.update(meta)
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return directory

    @classmethod
    def load(cls, directory) -> tuple["LocalizerNet", dict]:
        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text())
        if manifest.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{directory}: not an antloc checkpoint")
        net = cls(manifest["architecture"])
        arrays = {}
        for entry in manifest["tensors"]:
            raw = np.frombuffer((directory / entry["file"]).read_bytes(), dtype="<f4")
            arrays[entry["name"]] = raw.reshape(entry["shape"])
        net.load_arrays(arrays)
        return net, manifest
