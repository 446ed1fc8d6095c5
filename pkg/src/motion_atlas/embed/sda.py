"""Stacked denoising autoencoder in plain numpy.

Each layer is pretrained greedily as a denoising autoencoder: inputs are
corrupted by masking (every unit zeroed with probability ``corruption``),
encoded with sigmoid units and decoded under a squared-error loss, through
a linear output for the (real-valued) input layer and through sigmoids for
hidden layers. The stack is then fine-tuned end to end on clean inputs with
the decoders mirrored, so only the final output is linear. Training is
plain minibatch SGD.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .base import Embedding, rms_mm, standardize
from .pca import EmbeddingError

# hidden widths relative to the input length
WIDTH_RATIOS = (2000 / 2550, 1000 / 2550, 500 / 2550)


class DivergenceError(EmbeddingError):
    pass


def default_widths(L, d):
    return [L] + [int(math.ceil(r * L)) for r in WIDTH_RATIOS] + [d]


@dataclass(frozen=True)
class SdaConfig:
    """Layer widths include the input (first) and the code (last)."""

    widths: tuple = ()
    learning_rate: float = 0.001
    corruption: float = 0.5
    pretrain_epochs: int = 500
    finetune_epochs: int = 500
    batch_size: int = 32
    seed: int = 0
    activation: str = "sigmoid"

    def check(self):
        w = list(self.widths)
        if len(w) < 2:
            raise EmbeddingError("need at least an input and a code width")
        if any(b >= a for a, b in zip(w, w[1:])):
            raise EmbeddingError(f"layer widths must strictly decrease: {w}")
        if not 0 <= self.corruption < 1:
            raise EmbeddingError("corruption must lie in [0, 1)")
        if self.learning_rate <= 0 or self.batch_size < 1:
            raise EmbeddingError("learning rate and batch size must be positive")
        if self.activation not in ("sigmoid", "linear"):
            raise EmbeddingError(f"unknown activation {self.activation!r}")
        return self

    def with_code(self, L, d):
        """Config with ``widths`` filled in from the input length when empty."""
        w = list(self.widths) if self.widths else default_widths(L, d)
        w[0], w[-1] = L, d
        from dataclasses import replace
        return replace(self, widths=tuple(w))


def _sigmoid(z):
    return 0.5 * (1 + np.tanh(0.5 * z))


def _act(z, kind):
    return _sigmoid(z) if kind == "sigmoid" else z


def _dact(a, kind):
    """Derivative expressed through the activation value."""
    return a * (1 - a) if kind == "sigmoid" else np.ones_like(a)


def _glorot(rng, n_in, n_out, gain=1.0):
    # gain 4 is the usual range for sigmoid units
    lim = gain * math.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-lim, lim, (n_in, n_out))


@dataclass
class Autoencoder:
    """Encoder weights ``enc[l] = (W, b)`` with W (in, out); decoder weights
    ``dec[l] = (V, c)`` with V (out, in), listed in encoder order."""

    enc: list = field(default_factory=list)
    dec: list = field(default_factory=list)
    activation: str = "sigmoid"
    linear_output: bool = True

    def encode(self, X):
        H = X
        for W, b in self.enc:
            H = _act(H @ W + b, self.activation)
        return H

    def forward(self, X):
        """Activations of every layer, input first and reconstruction last."""
        acts = [X]
        H = X
        for W, b in self.enc:
            H = _act(H @ W + b, self.activation)
            acts.append(H)
        n = len(self.dec)
        for k, (V, c) in enumerate(reversed(self.dec)):
            Z = H @ V + c
            H = Z if k == n - 1 and self.linear_output else _act(Z, self.activation)
            acts.append(H)
        return acts

    def reconstruct(self, X):
        return self.forward(X)[-1]

    def loss(self, X, target=None):
        target = X if target is None else target
        R = self.reconstruct(X)
        return 0.5 * float(((R - target) ** 2).sum()) / len(X)

    def gradients(self, X, target=None):
        """Gradients of the mean (over rows) half squared error."""
        target = X if target is None else target
        acts = self.forward(X)
        n = len(X)
        K = len(self.enc)
        delta = (acts[-1] - target) / n
        if not self.linear_output:
            delta = delta * _dact(acts[-1], self.activation)
        g_dec = [None] * K
        g_enc = [None] * K
        # decoder layers, last applied first
        for k in range(K):
            # dec[k] writes acts[2K - k] from acts[2K - k - 1]
            V, _ = self.dec[k]
            H_in = acts[2 * K - k - 1]
            g_dec[k] = (H_in.T @ delta, delta.sum(0))
            # every decoder input is a hidden activation (the code included)
            delta = (delta @ V.T) * _dact(H_in, self.activation)
        for layer in reversed(range(K)):
            W, _ = self.enc[layer]
            H_in = acts[layer]
            g_enc[layer] = (H_in.T @ delta, delta.sum(0))
            if layer:
                delta = (delta @ W.T) * _dact(H_in, self.activation)
        return g_enc, g_dec

    def params(self):
        return [p for pair in self.enc + self.dec for p in pair]


def _sgd(model, X, epochs, lr, batch, rng, corruption=0.0, label=""):
    n = len(X)
    history = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        for s in range(0, n, batch):
            xb = X[order[s:s + batch]]
            inp = xb * (rng.random(xb.shape) >= corruption) if corruption > 0 else xb
            g_enc, g_dec = model.gradients(inp, xb)
            for (W, b), (gW, gb) in zip(model.enc + model.dec, g_enc + g_dec):
                W -= lr * gW
                b -= lr * gb
        loss = model.loss(X)
        if not np.isfinite(loss):
            raise DivergenceError(f"{label}loss became non-finite at epoch {epoch}")
        history.append(loss)
    return history


def pretrain_layer(H, n_out, config, rng, linear_output=True):
    """One denoising autoencoder on inputs H; returns (enc, dec, history).

    The first layer rebuilds real-valued inputs through a linear output;
    deeper layers rebuild hidden activations through the hidden activation.
    """
    n_in = H.shape[1]
    g = 4.0 if config.activation == "sigmoid" else 1.0
    layer = Autoencoder([(_glorot(rng, n_in, n_out, g), np.zeros(n_out))],
                        [(_glorot(rng, n_out, n_in, g), np.zeros(n_in))], config.activation,
                        linear_output)
    hist = _sgd(layer, H, config.pretrain_epochs, config.learning_rate, config.batch_size,
                rng, config.corruption, f"layer {n_in}->{n_out}: ")
    return layer.enc[0], layer.dec[0], hist


def pretrain_stack(Zt, config, prefix=None):
    """Greedy pretraining. ``prefix`` reuses already trained leading layers.

    Layer ``k`` draws from its own generator seeded by ``(seed, k)``, so a
    reused prefix gives the same result as training from scratch.
    """
    enc, dec = (list(prefix[0]), list(prefix[1])) if prefix else ([], [])
    H = Autoencoder(enc, dec, config.activation).encode(Zt) if enc else Zt
    hist = []
    for k in range(len(enc), len(config.widths) - 1):
        n_out = config.widths[k + 1]
        rng = np.random.default_rng([config.seed, k])
        e, d, h = pretrain_layer(H, n_out, config, rng, linear_output=(k == 0))
        enc.append(e)
        dec.append(d)
        hist.append(h)
        H = _act(H @ e[0] + e[1], config.activation)
    return enc, dec, hist


def _copy(layers):
    return [(W.copy(), b.copy()) for W, b in layers]


def sda_fit(X, config=None, d=None, standardize_rows=True, _prefix=None):
    """SDA descriptors of an L x N feature matrix.

    Parameters
    ----------
    X : L x N array or FeatureMatrix
    config : SdaConfig; empty ``widths`` are derived from L
    d : code width, overriding the last entry of ``config.widths``

    Returns
    -------
    Embedding
        ``D`` holds the code-layer activations; ``epsilon`` is the RMS
        reconstruction error of the fine-tuned network in the units of X.
    """
    Z, _, scale, ids = standardize(X, standardize_rows)
    L, N = Z.shape
    config = config or SdaConfig()
    if d is None:
        if not config.widths:
            raise EmbeddingError("code width d not given")
        d = config.widths[-1]
    config = config.with_code(L, d).check()
    Zt = Z.T.copy()
    enc, dec, hist = pretrain_stack(Zt, config, _prefix)
    rng = np.random.default_rng([config.seed, len(config.widths)])
    model = Autoencoder(_copy(enc), _copy(dec), config.activation)
    ft = _sgd(model, Zt, config.finetune_epochs, config.learning_rate, config.batch_size,
              rng, 0.0, "fine-tuning: ")
    D = model.encode(Zt).T
    eps = rms_mm(Zt.T - model.reconstruct(Zt).T, scale)
    hp = {"widths": list(config.widths), "learning_rate": config.learning_rate,
          "corruption": config.corruption, "pretrain_epochs": config.pretrain_epochs,
          "finetune_epochs": config.finetune_epochs, "batch_size": config.batch_size,
          "seed": config.seed, "activation": config.activation, "standardized": standardize_rows,
          "final_loss": ft[-1] if ft else model.loss(Zt)}
    emb = Embedding(D, "sda", eps, hp, subject_ids=ids)
    emb.model = model
    return emb


def gradient_check(widths=(6, 4, 3, 2), n=5, seed=0, h=1e-4, activation="sigmoid",
                   linear_output=True):
    """Largest relative error between analytic and central-difference gradients.

    Smaller steps lose digits to cancellation on near-zero gradient entries.
    """
    rng = np.random.default_rng(seed)
    enc = [(_glorot(rng, a, b), rng.normal(0, 0.1, b)) for a, b in zip(widths[:-1], widths[1:])]
    dec = [(_glorot(rng, b, a), rng.normal(0, 0.1, a)) for a, b in zip(widths[:-1], widths[1:])]
    model = Autoencoder(enc, dec, activation, linear_output)
    X = rng.normal(size=(n, widths[0]))
    g_enc, g_dec = model.gradients(X)
    analytic = [g for pair in g_enc + g_dec for g in pair]
    worst = 0.0
    for p, g in zip(model.params(), analytic):
        num = np.zeros_like(p)
        flat, gflat = p.reshape(-1), num.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = model.loss(X)
            flat[i] = old - h
            down = model.loss(X)
            flat[i] = old
            gflat[i] = (up - down) / (2 * h)
        denom = np.maximum(np.abs(num) + np.abs(g), 1e-8)
        worst = max(worst, float((np.abs(num - g) / denom).max()))
    return worst
