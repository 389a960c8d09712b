"""Tiny differentiable classifiers over flat parameter vectors, with hand-written gradients."""
from __future__ import annotations

import numpy as np


def _softplus(z):
    return np.logaddexp(0.0, z)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


class LogisticModel:
    """Binary logistic regression; W = [weights..., bias], labels in {0, 1}."""

    arch = "logistic"

    def __init__(self, n_features: int):
        self.n_features = n_features

    @property
    def n_params(self) -> int:
        return self.n_features + 1

    def init_params(self, rng=None) -> np.ndarray:
        return np.zeros(self.n_params)

    def _logits(self, W, X):
        return X @ W[:-1] + W[-1]

    def loss(self, W, X, y) -> float:
        z = self._logits(W, X)
        return float(np.mean(_softplus(z) - y * z))

    def gradient(self, W, X, y) -> np.ndarray:
        r = _sigmoid(self._logits(W, X)) - y
        return np.concatenate([X.T @ r, [r.sum()]]) / len(y)

    def predict(self, W, X) -> np.ndarray:
        return (self._logits(W, X) > 0).astype(np.int64)


class MLPModel:
    """One tanh hidden layer and a softmax output, trained with cross-entropy."""

    arch = "mlp"

    def __init__(self, n_in: int, hidden: int = 100, n_out: int = 10):
        self.n_in, self.hidden, self.n_out = n_in, hidden, n_out

    @property
    def n_params(self) -> int:
        return self.hidden * (self.n_in + 1) + self.n_out * (self.hidden + 1)

    def unpack(self, W):
        h, i, o = self.hidden, self.n_in, self.n_out
        a = h * i
        W1 = W[:a].reshape(h, i)
        b1 = W[a : a + h]
        W2 = W[a + h : a + h + o * h].reshape(o, h)
        b2 = W[a + h + o * h :]
        return W1, b1, W2, b2

    def init_params(self, rng) -> np.ndarray:
        W = np.zeros(self.n_params)
        W1, _, W2, _ = self.unpack(W)
        W1[:] = rng.normal(0.0, 1.0 / np.sqrt(self.n_in), W1.shape)
        W2[:] = rng.normal(0.0, 1.0 / np.sqrt(self.hidden), W2.shape)
        return W

    def _forward(self, W, X):
        W1, b1, W2, b2 = self.unpack(W)
        H = np.tanh(X @ W1.T + b1)
        Z = H @ W2.T + b2
        Z = Z - Z.max(axis=1, keepdims=True)
        logp = Z - np.log(np.exp(Z).sum(axis=1, keepdims=True))
        return H, logp

    def loss(self, W, X, y) -> float:
        _, logp = self._forward(W, X)
        return float(-np.mean(logp[np.arange(len(y)), y]))

    def gradient(self, W, X, y) -> np.ndarray:
        W1, _, W2, _ = self.unpack(W)
        m = len(y)
        H, logp = self._forward(W, X)
        dZ = np.exp(logp)
        dZ[np.arange(m), y] -= 1.0
        dZ /= m
        gW2 = dZ.T @ H
        gb2 = dZ.sum(axis=0)
        dA = (dZ @ W2) * (1.0 - H**2)
        gW1 = dA.T @ X
        gb1 = dA.sum(axis=0)
        return np.concatenate([gW1.ravel(), gb1, gW2.ravel(), gb2])

    def predict(self, W, X) -> np.ndarray:
        _, logp = self._forward(W, X)
        return logp.argmax(axis=1)


def make_model(arch: str, n_features: int):
    if arch == "logistic":
        return LogisticModel(n_features)
    if arch == "mlp":
        return MLPModel(n_features, hidden=100, n_out=10)
    raise ValueError(f"unknown architecture {arch!r}")


def separable_task(n_train: int, n_test: int, n_features: int, rng, margin: float = 0.25):
    """Two Gaussian-feature classes split by a random hyperplane, with a margin band removed."""
    w = rng.normal(size=n_features)
    w /= np.linalg.norm(w)

    def draw(count):
        X = np.empty((0, n_features))
        while len(X) < count:
            cand = rng.normal(size=(2 * count, n_features))
            cand = cand[np.abs(cand @ w) >= margin]
            X = np.vstack([X, cand])
        X = X[:count]
        return X, (X @ w > 0).astype(np.int64)

    Xtr, ytr = draw(n_train)
    Xte, yte = draw(n_test)
    return Xtr, ytr, Xte, yte
