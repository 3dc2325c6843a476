"""MLP classifiers and binary checkpoint serialization.

One architecture serves the per-domain experts, the deployed target model,
and the domain-weighting network: ReLU hidden layers, identity output, so
the forward pass yields raw logits and losses apply softmax themselves.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

CHECKPOINT_MAGIC = b"LFMECKPT"
CHECKPOINT_VERSION = 1

ROLE_CODES = {"target": 0, "expert": 1, "weighting": 2}
ROLE_NAMES = {v: k for k, v in ROLE_CODES.items()}


class CheckpointError(Exception):
    """Malformed or unreadable checkpoint file."""


@dataclass
class MlpModel:
    layer_dims: list[int]
    weights: list[ad.Tensor]
    biases: list[ad.Tensor]

    def parameters(self) -> list[ad.Tensor]:
        params = []
        for w, b in zip(self.weights, self.biases):
            params.append(w)
            params.append(b)
        return params

    def param_arrays(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self.parameters()]

    def load_param_arrays(self, arrays):
        params = self.parameters()
        if len(arrays) != len(params):
            raise ValueError(f"expected {len(params)} arrays, got {len(arrays)}")
        for p, a in zip(params, arrays):
            if p.data.shape != a.shape:
                raise ValueError(f"parameter shape {p.data.shape} != {a.shape}")
            p.data = np.array(a, dtype=np.float64)


def init_mlp(layer_dims, seed) -> MlpModel:
    """Uniform(-sqrt(6/fan_in), +sqrt(6/fan_in)) weights, zero biases."""
    layer_dims = [int(d) for d in layer_dims]
    if len(layer_dims) < 2:
        raise ValueError(f"need at least input and output dims, got {layer_dims}")
    if any(d <= 0 for d in layer_dims):
        raise ValueError(f"layer dims must be positive: {layer_dims}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
        bound = np.sqrt(6.0 / fan_in)
        weights.append(ad.parameter(rng.uniform(-bound, bound, size=(fan_in, fan_out))))
        biases.append(ad.parameter(np.zeros(fan_out)))
    return MlpModel(layer_dims, weights, biases)


def forward(model: MlpModel, x: ad.Tensor) -> ad.Tensor:
    """Logits for a batch of feature rows; ReLU hidden, identity output."""
    if x.data.ndim != 2 or x.data.shape[1] != model.layer_dims[0]:
        raise ad.ShapeError(
            f"input shape {x.data.shape} does not match feature width {model.layer_dims[0]}"
        )
    h = x
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        h = ad.add_bias(ad.matmul(h, w), b)
        if i < last:
            h = ad.relu(h)
    return h


def forward_array(model: MlpModel, x: np.ndarray) -> np.ndarray:
    """Graph-free forward pass on a plain array (evaluation path)."""
    return forward(model, ad.tensor(x)).data


@dataclass
class Checkpoint:
    version: int
    role: str
    index: int
    step: int
    seed: int
    layer_dims: list[int]
    arrays: list[np.ndarray] = field(repr=False)

    def to_model(self) -> MlpModel:
        model = init_mlp(self.layer_dims, 0)
        model.load_param_arrays(self.arrays)
        return model


def save_checkpoint(model: MlpModel, path, *, role="target", index=0, step=0, seed=0):
    """Little-endian binary: magic, version, role, index, step, seed, dims, params."""
    if role not in ROLE_CODES:
        raise ValueError(f"unknown role {role!r}")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<IBIQQ", CHECKPOINT_VERSION, ROLE_CODES[role],
                            int(index), int(step), int(seed)))
        f.write(struct.pack("<I", len(model.layer_dims)))
        f.write(struct.pack(f"<{len(model.layer_dims)}I", *model.layer_dims))
        for w, b in zip(model.weights, model.biases):
            f.write(np.ascontiguousarray(w.data, dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(b.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic bytes in {path}")
    off = 8
    try:
        version, role_code, index, step, seed = struct.unpack_from("<IBIQQ", blob, off)
        off += struct.calcsize("<IBIQQ")
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        if role_code not in ROLE_NAMES:
            raise CheckpointError(f"unknown role code {role_code}")
        (ndims,) = struct.unpack_from("<I", blob, off)
        off += 4
        dims = list(struct.unpack_from(f"<{ndims}I", blob, off))
        off += 4 * ndims
    except struct.error as e:
        raise CheckpointError(f"truncated checkpoint header in {path}: {e}") from e
    if len(dims) < 2 or any(d <= 0 for d in dims):
        raise CheckpointError(f"invalid layer dims {dims}")
    arrays = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        for shape in ((fan_in, fan_out), (fan_out,)):
            count = int(np.prod(shape))
            nbytes = 8 * count
            if off + nbytes > len(blob):
                raise CheckpointError(f"checkpoint payload shorter than dims imply in {path}")
            arrays.append(np.frombuffer(blob, dtype="<f8", count=count, offset=off)
                          .astype(np.float64).reshape(shape))
            off += nbytes
    if off != len(blob):
        raise CheckpointError(f"{len(blob) - off} trailing bytes in {path}")
    return Checkpoint(version, ROLE_NAMES[role_code], index, step, seed, dims, arrays)
