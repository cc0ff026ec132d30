"""GCN encoder, growable linear classifier, Adam, and weight checkpoints.

Everything is float64 and deterministic: weight initialization is driven by
an explicit seed and the forward passes contain no stochastic ops.
"""

from __future__ import annotations

import io
from typing import Iterable

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .autodiff import Tensor

CHECKPOINT_VERSION = 1


def normalize_adjacency(adjacency: sp.spmatrix) -> sp.csr_matrix:
    """Symmetric GCN normalization with self-loops: D^{-1/2} (A + I) D^{-1/2}.

    Expects a symmetric adjacency without stored self-loops. An isolated
    node reduces to the self-loop term 1/(0+1) = 1, so no division by zero
    can occur.
    """
    a = adjacency.tocsr().astype(np.float64)
    if a.shape[0] != a.shape[1]:
        raise ValueError("adjacency must be square")
    if a.diagonal().any():
        raise ValueError("adjacency must not contain self-loops")
    if (a != a.T).nnz != 0:
        raise ValueError("adjacency must be symmetric")
    a_hat = a + sp.identity(a.shape[0], format="csr")
    degrees = np.asarray(a_hat.sum(axis=1)).ravel()
    inv_sqrt = 1.0 / np.sqrt(degrees)
    d = sp.diags(inv_sqrt)
    return (d @ a_hat @ d).tocsr()


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class GCNEncoder:
    """Two-layer GCN: A·ReLU(A·X·W1)·W2 with optional row L2 normalization.

    The hidden width defaults to 128; smaller widths are only meant for
    numerical tests.
    """

    def __init__(self, feature_dim: int, hidden_dim: int = 128,
                 l2_normalize_output: bool = True, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.feature_dim = feature_dim
        self.hidden_dim = hidden_dim
        self.l2_normalize_output = l2_normalize_output
        self.W1 = Tensor(glorot(rng, feature_dim, hidden_dim), requires_grad=True)
        self.W2 = Tensor(glorot(rng, hidden_dim, hidden_dim), requires_grad=True)

    def encode(self, adj_norm: sp.spmatrix, features: np.ndarray) -> Tensor:
        x = ad.as_tensor(features)
        h = ad.relu(ad.spmm(adj_norm, ad.matmul(x, self.W1)))
        out = ad.matmul(ad.spmm(adj_norm, h), self.W2)
        if self.l2_normalize_output:
            out = ad.l2_normalize_rows(out)
        return out

    def embed(self, adj_norm: sp.spmatrix, features: np.ndarray) -> np.ndarray:
        """Forward pass returning a plain array (no gradient tracking)."""
        return self.encode(adj_norm, features).data

    def parameters(self) -> list[Tensor]:
        return [self.W1, self.W2]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {"W1": self.W1.data.copy(), "W2": self.W2.data.copy()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.W1 = Tensor(np.array(state["W1"], dtype=np.float64), requires_grad=True)
        self.W2 = Tensor(np.array(state["W2"], dtype=np.float64), requires_grad=True)
        self.feature_dim, self.hidden_dim = self.W1.data.shape

    def copy(self) -> "GCNEncoder":
        clone = GCNEncoder(self.feature_dim, self.hidden_dim,
                           self.l2_normalize_output, seed=0)
        clone.load_state_dict(self.state_dict())
        return clone


class LinearClassifier:
    """Linear head whose column count grows as new classes arrive.

    Columns are kept in ascending class-id order; existing columns are
    preserved bit-for-bit when the classifier is extended.
    """

    def __init__(self, in_dim: int, use_bias: bool = True, seed: int = 0):
        self.in_dim = in_dim
        self.use_bias = use_bias
        self.seed = seed
        self.classes: list[int] = []
        self.W = Tensor(np.zeros((in_dim, 0)), requires_grad=True)
        self.bias = Tensor(np.zeros(0), requires_grad=True) if use_bias else None

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def extend(self, new_classes: Iterable[int]) -> None:
        new = sorted(new_classes)
        overlap = set(new) & set(self.classes)
        if overlap:
            raise ValueError(f"classes already present: {sorted(overlap)}")
        if self.classes and new[0] <= self.classes[-1]:
            raise ValueError("classes must arrive in ascending order")
        rng = np.random.default_rng((self.seed, len(self.classes)))
        fresh = glorot(rng, self.in_dim, len(new))
        self.W = Tensor(np.concatenate([self.W.data, fresh], axis=1),
                        requires_grad=True)
        if self.bias is not None:
            self.bias = Tensor(np.concatenate([self.bias.data, np.zeros(len(new))]),
                               requires_grad=True)
        self.classes.extend(new)

    def logits(self, embeddings: Tensor) -> Tensor:
        out = ad.matmul(embeddings, self.W)
        if self.bias is not None:
            out = ad.add(out, self.bias)
        return out

    def column_of(self, class_id: int) -> int:
        return self.classes.index(class_id)

    def predict(self, embeddings: np.ndarray) -> np.ndarray:
        """Argmax class ids; ties resolve to the lowest class id."""
        scores = embeddings @ self.W.data
        if self.bias is not None:
            scores = scores + self.bias.data
        return np.asarray(self.classes)[np.argmax(scores, axis=1)]

    def parameters(self) -> list[Tensor]:
        params = [self.W]
        if self.bias is not None:
            params.append(self.bias)
        return params

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {"W": self.W.data.copy(),
                 "classes": np.asarray(self.classes, dtype=np.int64)}
        if self.bias is not None:
            state["bias"] = self.bias.data.copy()
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.W = Tensor(np.array(state["W"], dtype=np.float64), requires_grad=True)
        self.classes = [int(c) for c in state["classes"]]
        self.in_dim = self.W.data.shape[0]
        if "bias" in state:
            self.bias = Tensor(np.array(state["bias"], dtype=np.float64),
                               requires_grad=True)
            self.use_bias = True
        else:
            self.bias = None
            self.use_bias = False


class Adam:
    """Standard Adam (beta1=0.9, beta2=0.999, eps=1e-8), fully deterministic."""

    def __init__(self, params: list[Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for i, p in enumerate(self.params):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * (g * g)
            m_hat = self.m[i] / b1t
            v_hat = self.v[i] / b2t
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def save_weights(path, named_arrays: dict[str, np.ndarray]) -> None:
    """Dump named float arrays to an uncompressed npz with a version stamp.

    Round-trips bitwise: float64 payloads are stored raw.
    """
    payload = {f"arr_{name}": np.asarray(v) for name, v in named_arrays.items()}
    payload["format_version"] = np.asarray(CHECKPOINT_VERSION, dtype=np.int64)
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def weights_to_bytes(named_arrays: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    payload = {f"arr_{name}": np.asarray(v) for name, v in sorted(named_arrays.items())}
    payload["format_version"] = np.asarray(CHECKPOINT_VERSION, dtype=np.int64)
    np.savez(buf, **payload)
    return buf.getvalue()


def load_weights(path) -> dict[str, np.ndarray]:
    with np.load(path) as data:
        version = int(data["format_version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        return {name[len("arr_"):]: data[name] for name in data.files
                if name.startswith("arr_")}
