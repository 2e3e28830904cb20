"""Minimal dense network core: tensors, layers, towers, and Adam.

Everything is plain numpy with hand-written backward passes. Parameters
default to float32; towers can be built in float64 when gradient checks
need the extra precision. Reductions that feed reported losses are done
in float64 by the callers.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, NumericError

TENSOR_FORMAT = "blendrec-tensors/1"
NORM_EPS = 1e-12


class ParamTensor:
    """A named parameter array with a same-shape gradient accumulator."""

    __slots__ = ("name", "values", "grad")

    def __init__(self, name: str, values: np.ndarray) -> None:
        self.name = name
        self.values = values
        self.grad = np.zeros_like(values)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


@dataclass
class TowerSpec:
    """Architecture of one embedding tower."""

    vocab_size: int
    embed_dim: int = 64
    hidden_dims: tuple[int, ...] = (64, 64)
    out_dim: int = 64
    activation: str = "relu"

    def __post_init__(self) -> None:
        if self.vocab_size < 1:
            raise DataError("vocab_size must be positive")
        if self.activation != "relu":
            raise DataError(f"unsupported activation {self.activation!r}")


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)


class Embedding:
    """ID -> dense row lookup."""

    def __init__(self, table: ParamTensor) -> None:
        self.table = table

    def forward(self, ids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return self.table.values[ids], ids

    def backward(self, cache: np.ndarray, grad_out: np.ndarray) -> None:
        np.add.at(self.table.grad, cache, grad_out)


class Affine:
    """y = x W + b with W of shape (in, out)."""

    def __init__(self, weight: ParamTensor, bias: ParamTensor) -> None:
        self.weight = weight
        self.bias = bias

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return x @ self.weight.values + self.bias.values, x

    def backward(self, cache: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
        self.weight.grad += cache.T @ grad_out
        self.bias.grad += grad_out.sum(axis=0)
        return grad_out @ self.weight.values.T


class Relu:
    def forward(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return np.maximum(x, 0.0), x

    def backward(self, cache: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
        return np.where(cache > 0.0, grad_out, 0.0)


class L2Normalize:
    """Row-wise x / (||x|| + eps); exact zero rows pass through unchanged."""

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, tuple]:
        norm = np.linalg.norm(x, axis=-1, keepdims=True)
        denom = norm + NORM_EPS
        out = np.where(norm > 0.0, x / denom, x)
        return out, (x, norm)

    def backward(self, cache: tuple, grad_out: np.ndarray) -> np.ndarray:
        x, norm = cache
        denom = norm + NORM_EPS
        dot = np.sum(x * grad_out, axis=-1, keepdims=True)
        safe_norm = np.where(norm > 0.0, norm, 1.0)
        grad = grad_out / denom - x * dot / (safe_norm * denom * denom)
        return np.where(norm > 0.0, grad, grad_out)


class Tower:
    """Embedding -> hidden affine+ReLU stack -> output affine -> L2 norm.

    ``forward`` accepts an int or an index array and caches every
    intermediate needed by ``backward``. Gradients accumulate with ``+=``
    so repeated backward calls sum up until the optimizer clears them.
    """

    def __init__(self, spec: TowerSpec, rng: np.random.Generator, prefix: str = "tower",
                 dtype=np.float32) -> None:
        self.spec = spec
        self.dtype = np.dtype(dtype)
        embed = rng.uniform(-0.05, 0.05, size=(spec.vocab_size, spec.embed_dim)).astype(self.dtype)
        self.params: list[ParamTensor] = [ParamTensor(f"{prefix}.embed", embed)]
        self.embedding = Embedding(self.params[0])
        self.layers: list[tuple[Affine, Relu | None]] = []
        dims = [spec.embed_dim, *spec.hidden_dims, spec.out_dim]
        for k in range(len(dims) - 1):
            weight = ParamTensor(f"{prefix}.w{k}", glorot_uniform(rng, dims[k], dims[k + 1], self.dtype))
            bias = ParamTensor(f"{prefix}.b{k}", np.zeros(dims[k + 1], dtype=self.dtype))
            self.params += [weight, bias]
            is_hidden = k < len(dims) - 2
            self.layers.append((Affine(weight, bias), Relu() if is_hidden else None))
        self.normalize = L2Normalize()

    @property
    def out_dim(self) -> int:
        return self.spec.out_dim

    def forward(self, ids, with_prenorm: bool = False):
        """Return (output, cache); output is L2-normalized rows.

        ``with_prenorm`` additionally returns the pre-normalization
        activations (used for output regularization).
        """
        ids = np.asarray(ids)
        scalar = ids.ndim == 0
        ids = np.atleast_1d(ids)
        if ids.min() < 0 or ids.max() >= self.spec.vocab_size:
            raise DataError(f"id out of range [0, {self.spec.vocab_size})")
        x, embed_cache = self.embedding.forward(ids)
        layer_caches = []
        for affine, relu in self.layers:
            x, acache = affine.forward(x)
            rcache = None
            if relu is not None:
                x, rcache = relu.forward(x)
            layer_caches.append((acache, rcache))
        prenorm = x
        out, ncache = self.normalize.forward(x)
        cache = (embed_cache, layer_caches, ncache, scalar)
        if scalar:
            out = out[0]
        if with_prenorm:
            return out, cache, (prenorm[0] if scalar else prenorm)
        return out, cache

    def backward(self, cache, grad_out: np.ndarray, grad_prenorm: np.ndarray | None = None) -> None:
        """Accumulate parameter gradients for a prior forward call.

        ``grad_prenorm`` lets callers add a gradient that bypasses the
        normalization (e.g. a penalty on pre-normalization magnitude).
        """
        embed_cache, layer_caches, ncache, scalar = cache
        grad_out = np.atleast_2d(grad_out)
        if grad_out.shape[-1] != self.spec.out_dim:
            raise DataError("upstream gradient dimension mismatch")
        g = self.normalize.backward(ncache, grad_out)
        if grad_prenorm is not None:
            g = g + np.atleast_2d(grad_prenorm)
        for (affine, relu), (acache, rcache) in zip(reversed(self.layers), reversed(layer_caches)):
            if relu is not None:
                g = relu.backward(rcache, g)
            g = affine.backward(acache, g)
        self.embedding.backward(embed_cache, g)


class Adam:
    """Adam with bias correction; ``step`` applies updates and clears grads."""

    def __init__(self, params: list[ParamTensor], learning_rate: float = 0.00017,
                 beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8) -> None:
        self.params = params
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.step_count = 0
        self.first_moment = [np.zeros_like(p.values) for p in params]
        self.second_moment = [np.zeros_like(p.values) for p in params]

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        for k, p in enumerate(self.params):
            g = p.grad
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient in tensor {p.name!r}")
            m = self.first_moment[k]
            v = self.second_moment[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            m_hat = m / (1.0 - self.beta1 ** t)
            v_hat = v / (1.0 - self.beta2 ** t)
            p.values -= (self.learning_rate * m_hat / (np.sqrt(v_hat) + self.epsilon)).astype(p.values.dtype)
            p.zero_grad()


def save_tensors(prefix: str, tensors: list[ParamTensor], meta: dict | None = None) -> None:
    """Write tensors as a JSON manifest plus a little-endian float32 blob."""
    manifest = {"format": TENSOR_FORMAT, "tensors": [], "meta": meta or {}}
    offset = 0
    with open(f"{prefix}.bin", "wb") as blob:
        for t in tensors:
            data = np.ascontiguousarray(t.values, dtype="<f4").tobytes()
            manifest["tensors"].append({"name": t.name, "shape": list(t.shape), "offset": offset})
            blob.write(data)
            offset += len(data)
    with open(f"{prefix}.json", "w", encoding="utf-8") as out:
        json.dump(manifest, out, indent=1, sort_keys=True)


def load_tensors(prefix: str) -> tuple[list[ParamTensor], dict]:
    """Read back a tensor container written by :func:`save_tensors`."""
    with open(f"{prefix}.json", "r", encoding="utf-8") as handle:
        manifest = json.load(handle)
    if manifest.get("format") != TENSOR_FORMAT:
        raise DataError(f"unknown tensor container format {manifest.get('format')!r}")
    blob = np.fromfile(f"{prefix}.bin", dtype="<f4")
    tensors = []
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        start = entry["offset"] // 4
        count = int(np.prod(shape)) if shape else 1
        values = blob[start: start + count].reshape(shape).astype(np.float32)
        tensors.append(ParamTensor(entry["name"], values))
    return tensors, manifest.get("meta", {})


def attach_tensors(tower: Tower, tensors: list[ParamTensor]) -> None:
    """Replace a tower's parameter values with loaded ones, matched by name."""
    by_name = {t.name: t for t in tensors}
    for p in tower.params:
        if p.name not in by_name:
            raise DataError(f"missing tensor {p.name!r} in container")
        loaded = by_name[p.name].values
        if loaded.shape != p.values.shape:
            raise DataError(f"tensor {p.name!r} shape {loaded.shape} != expected {p.values.shape}")
        p.values[...] = loaded.astype(p.values.dtype)
