"""Encoder, block-partitioned identity classifier, and domain discriminator."""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np

from .diffcore import Tape, Var, affine_forward, as_matrix, relu_forward, softmax
from .errors import ConfigError, DimensionError

__all__ = [
    "init_mlp",
    "mlp_forward",
    "mlp_on_tape",
    "init_encoder",
    "encode",
    "normalize_features",
    "ClassifierHead",
    "classify_identity",
    "init_head",
    "adaptive_init",
    "random_head",
    "init_discriminator",
    "discriminate",
    "save_checkpoint",
    "load_checkpoint",
    "params_digest",
]


def init_mlp(rng: np.random.Generator, widths, prefix: str) -> dict:
    """Uniform fan-in init, ``U(-sqrt(6/fan_in), sqrt(6/fan_in))``, zero biases."""
    params = {}
    for k, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        bound = np.sqrt(6.0 / fan_in)
        params[f"{prefix}.W{k}"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        params[f"{prefix}.b{k}"] = np.zeros((1, fan_out))
    return params


def _n_layers(params: dict, prefix: str) -> int:
    return sum(1 for k in params if k.startswith(prefix + ".W"))


def mlp_forward(params: dict, prefix: str, x) -> np.ndarray:
    h = as_matrix(x)
    n = _n_layers(params, prefix)
    for k in range(n):
        h = affine_forward(h, params[f"{prefix}.W{k}"], params[f"{prefix}.b{k}"])
        if k < n - 1:
            h = relu_forward(h)
    return h


def mlp_on_tape(tape: Tape, params: dict, prefix: str, x: Var, trainable: bool) -> Var:
    """Replay the MLP on ``tape``; frozen weights enter as constants."""
    leaf = tape.param if trainable else (lambda _name, v: tape.const(v))
    n = _n_layers(params, prefix)
    h = x
    for k in range(n):
        W = leaf(f"{prefix}.W{k}", params[f"{prefix}.W{k}"])
        b = leaf(f"{prefix}.b{k}", params[f"{prefix}.b{k}"])
        h = tape.affine(h, W, b)
        if k < n - 1:
            h = tape.relu(h)
    return h


def init_encoder(rng, d_in: int = 16, hidden: int = 64, d_feat: int = 32) -> dict:
    return init_mlp(rng, [d_in, hidden, hidden, d_feat], "enc")


def encode(params: dict, x) -> np.ndarray:
    x = as_matrix(x)
    if x.shape[1] != params["enc.W0"].shape[0]:
        raise DimensionError(f"encoder expects {params['enc.W0'].shape[0]} inputs, got {x.shape[1]}")
    return mlp_forward(params, "enc", x)


def normalize_features(f) -> np.ndarray:
    f = as_matrix(f)
    norms = np.linalg.norm(f, axis=1, keepdims=True)
    return np.divide(f, norms, out=np.zeros_like(f), where=norms > 0)


@dataclass
class ClassifierHead:
    """``W = (W1 | W2)`` with zero bias.

    ``W1`` holds one column per synthetic identity and keeps its width for the
    whole run; ``W2`` is rebuilt every epoch with one column per kept cluster.
    """

    W1: np.ndarray
    W2: np.ndarray

    @property
    def n_synthetic(self) -> int:
        return self.W1.shape[1]

    @property
    def n_pseudo(self) -> int:
        return self.W2.shape[1]

    @property
    def n_classes(self) -> int:
        return self.n_synthetic + self.n_pseudo

    @property
    def W(self) -> np.ndarray:
        return np.hstack([self.W1, self.W2])

    def as_params(self) -> dict:
        return {"head.W1": self.W1, "head.W2": self.W2}


def classify_identity(head: ClassifierHead, f) -> np.ndarray:
    f = as_matrix(f)
    if f.shape[1] != head.W1.shape[0]:
        raise DimensionError(f"head expects {head.W1.shape[0]}-d features, got {f.shape[1]}")
    return f @ head.W


def _class_means(features: np.ndarray, labels: np.ndarray, n: int) -> np.ndarray:
    """Columns are per-class means of L2-normalized features."""
    f = normalize_features(features)
    d = f.shape[1]
    out = np.zeros((d, n))
    for c in range(n):
        rows = f[labels == c]
        if rows.shape[0] == 0:
            raise ValueError(f"class {c} has no features to average")
        out[:, c] = rows.mean(axis=0)
    return out


def init_head(features_A, labels_A, n_synthetic: int, d_feat: int) -> ClassifierHead:
    """Epoch-0 head: synthetic columns are class-mean normalized features."""
    return ClassifierHead(_class_means(features_A, labels_A, n_synthetic), np.zeros((d_feat, 0)))


def adaptive_init(head_prev: ClassifierHead, features_by_cluster) -> ClassifierHead:
    """Carry the synthetic block over and set each pseudo column to its cluster mean.

    ``features_by_cluster`` is a sequence with one ``(K_i, d)`` array per kept
    cluster; rows are L2-normalized before averaging.
    """
    d = head_prev.W1.shape[0]
    cols = []
    for i, f in enumerate(features_by_cluster):
        f = as_matrix(f)
        if f.shape[0] == 0:
            raise ValueError(f"cluster {i} is empty")
        cols.append(normalize_features(f).mean(axis=0))
    W2 = np.column_stack(cols) if cols else np.zeros((d, 0))
    return ClassifierHead(head_prev.W1, W2)


def random_head(rng, n_synthetic: int, n_pseudo: int, d_feat: int) -> ClassifierHead:
    """Fresh uniform fan-in init for both blocks (the no-ACI ablation)."""
    bound = np.sqrt(6.0 / d_feat)
    W = rng.uniform(-bound, bound, size=(d_feat, n_synthetic + n_pseudo))
    return ClassifierHead(W[:, :n_synthetic].copy(), W[:, n_synthetic:].copy())


def init_discriminator(rng, d_feat: int = 32, hidden: int = 32, n_domains: int = 2) -> dict:
    """Domain MLP whose output layer starts at zero, i.e. uniform predictions.

    A random output layer on unnormalized features is confidently wrong from
    the first step, and that noise is what the balance loss then has to fight.
    """
    params = init_mlp(rng, [d_feat, hidden, hidden, n_domains], "disc")
    params["disc.W2"] = np.zeros_like(params["disc.W2"])
    return params


def discriminate(params: dict, f) -> np.ndarray:
    return softmax(mlp_forward(params, "disc", f))


def params_digest(params: dict) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        a = np.ascontiguousarray(params[name], dtype=np.float64)
        h.update(name.encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


# checkpoints: 8-byte LE header length, JSON header, float64 LE payload

_MAGIC = b"DMXCKPT1"


def save_checkpoint(path, params: dict, *, epoch: int = 0, config_hash: str = "", extra: dict | None = None):
    names = sorted(params)
    header = {
        "epoch": int(epoch),
        "config_hash": config_hash,
        "slots": [{"name": n, "shape": list(params[n].shape)} for n in names],
    }
    if extra:
        header["extra"] = extra
    blob = json.dumps(header, sort_keys=True).encode()
    payload = b"".join(np.ascontiguousarray(params[n], dtype="<f8").tobytes() for n in names)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(payload)


def load_checkpoint(path, expected_shapes: dict | None = None):
    """Returns ``(params, header)``; rejects files whose slot shapes disagree."""
    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise ConfigError(f"{path} is not a checkpoint")
        (n,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(n))
        payload = fh.read()
    params = {}
    offset = 0
    for slot in header["slots"]:
        shape = tuple(slot["shape"])
        size = int(np.prod(shape)) * 8
        if offset + size > len(payload):
            raise ConfigError(f"{path}: payload truncated at slot {slot['name']!r}")
        params[slot["name"]] = np.frombuffer(payload[offset : offset + size], dtype="<f8").reshape(shape).astype(np.float64)
        offset += size
    if offset != len(payload):
        raise ConfigError(f"{path}: {len(payload) - offset} trailing payload bytes")
    if expected_shapes is not None:
        for name, shape in expected_shapes.items():
            got = params.get(name)
            if got is None or got.shape != tuple(shape):
                raise DimensionError(
                    f"checkpoint slot {name!r} has shape {None if got is None else got.shape}, expected {tuple(shape)}"
                )
    return params, header
