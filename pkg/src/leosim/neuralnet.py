"""Dense feed-forward substrate for the learning policies and the recurrent
predictor: ReLU MLPs with exact reverse-mode gradients, SGD/Adam, target-network
soft updates, and a flat-text checkpoint format. No external ML dependency, so
finite-difference oracles stay meaningful."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .seeding import TAG_NN_INIT, rng_for

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = "mlp-checkpoint-v1"


class StaleCacheError(RuntimeError):
    """backward() called without a cached forward pass."""


@dataclass
class Gradients:
    d_weights: list[np.ndarray]
    d_biases: list[np.ndarray]
    d_input: np.ndarray

    def flat(self) -> list[np.ndarray]:
        out = []
        for dw, db in zip(self.d_weights, self.d_biases):
            out.append(dw)
            out.append(db)
        return out

    def all_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.flat())


class Mlp:
    """Affine chain with ReLU on hidden layers, linear output."""

    def __init__(self, dims: list[int], seed: int = 0, name: str = "mlp"):
        if len(dims) < 2 or any(d < 1 for d in dims):
            raise ValueError(f"bad layer dims {dims}")
        self.dims = [int(d) for d in dims]
        self.name = name
        rng = rng_for(seed, TAG_NN_INIT, _name_tag(name))
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for fan_in, fan_out in zip(self.dims[:-1], self.dims[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            self.weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
            self.biases.append(rng.uniform(-bound, bound, size=fan_out))
        self._cache: tuple[np.ndarray, list[np.ndarray]] | None = None

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Single input or batch (rows = samples). Caches for backward()."""
        x = np.asarray(x, dtype=float)
        squeeze = x.ndim == 1
        h = x.reshape(1, -1) if squeeze else x
        if h.shape[1] != self.dims[0]:
            raise ValueError(f"input width {h.shape[1]} != {self.dims[0]}")
        acts = [h]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w.T + b
            h = z if i == self.n_layers - 1 else np.maximum(z, 0.0)
            acts.append(h)
        self._cache = (x, acts)
        return acts[-1][0] if squeeze else acts[-1]

    def backward(self, upstream: np.ndarray) -> Gradients:
        """Exact gradients of sum(upstream * output) w.r.t. parameters and input.
        Batched upstream rows are accumulated (summed) into parameter grads."""
        if self._cache is None:
            raise StaleCacheError("no cached forward pass")
        x, acts = self._cache
        g = np.asarray(upstream, dtype=float)
        squeeze = g.ndim == 1
        g = g.reshape(1, -1) if squeeze else g.copy()
        if g.shape != acts[-1].shape:
            raise ValueError(f"upstream shape {g.shape} != output shape {acts[-1].shape}")
        d_w = [np.zeros_like(w) for w in self.weights]
        d_b = [np.zeros_like(b) for b in self.biases]
        for i in range(self.n_layers - 1, -1, -1):
            if i < self.n_layers - 1:
                g = g * (acts[i + 1] > 0.0)  # ReLU mask
            d_w[i] = g.T @ acts[i]
            d_b[i] = g.sum(axis=0)
            g = g @ self.weights[i]
        d_in = g[0] if squeeze and x.ndim == 1 else g
        return Gradients(d_w, d_b, d_in)

    # -- parameter plumbing ---------------------------------------------------

    def parameters(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def copy_from(self, other: "Mlp") -> None:
        for mine, theirs in zip(self.parameters(), other.parameters()):
            mine[...] = theirs

    def clone(self) -> "Mlp":
        c = Mlp(self.dims, seed=0, name=self.name)
        c.copy_from(self)
        return c


def _name_tag(name: str) -> int:
    return sum(ord(ch) for ch in name) % 100000


def soft_update(target: Mlp, online: Mlp, tau: float) -> None:
    """Elementwise target <- tau*online + (1-tau)*target."""
    if not (0.0 < tau <= 1.0):
        raise ValueError("tau must be in (0, 1]")
    for t, o in zip(target.parameters(), online.parameters()):
        if t.shape != o.shape:
            raise ValueError(f"shape mismatch {t.shape} vs {o.shape}")
        t *= 1.0 - tau
        t += tau * o


@dataclass
class Optimizer:
    kind: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    _m: dict[int, list[np.ndarray]] = field(default_factory=dict)
    _v: dict[int, list[np.ndarray]] = field(default_factory=dict)
    _t: dict[int, int] = field(default_factory=dict)
    skipped_steps: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")

    def step(self, net: Mlp, grads: Gradients) -> bool:
        """Apply one update. Non-finite gradients skip the step (logged)."""
        if not grads.all_finite():
            self.skipped_steps += 1
            log.warning("non-finite gradient for %s: step skipped", net.name)
            return False
        params = net.parameters()
        gs = grads.flat()
        if self.kind == "sgd":
            for p, g in zip(params, gs):
                p -= self.lr * g
            return True
        key = id(net)
        if key not in self._m:
            self._m[key] = [np.zeros_like(p) for p in params]
            self._v[key] = [np.zeros_like(p) for p in params]
            self._t[key] = 0
        self._t[key] += 1
        t = self._t[key]
        for p, g, m, v in zip(params, gs, self._m[key], self._v[key]):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            m_hat = m / (1.0 - self.beta1**t)
            v_hat = v / (1.0 - self.beta2**t)
            p -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return True


# -- checkpointing ----------------------------------------------------------------


def save_checkpoint(nets: dict[str, Mlp], path: str | Path, meta: dict | None = None) -> None:
    """Flat text: header, optional meta lines, then one array per line as
    name,layer_index,kind,row-major values."""
    lines = [CHECKPOINT_MAGIC]
    for k, v in sorted((meta or {}).items()):
        lines.append(f"#meta {k}={v}")
    for name in sorted(nets):
        net = nets[name]
        lines.append(f"#net {name} dims={','.join(str(d) for d in net.dims)}")
        for i, (w, b) in enumerate(zip(net.weights, net.biases)):
            wv = ",".join(repr(float(x)) for x in w.ravel())
            bv = ",".join(repr(float(x)) for x in b.ravel())
            lines.append(f"{name},{i},W,{wv}")
            lines.append(f"{name},{i},b,{bv}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_checkpoint(path: str | Path) -> tuple[dict[str, Mlp], dict[str, str]]:
    text = Path(path).read_text().splitlines()
    if not text or text[0] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a recognized checkpoint file")
    meta: dict[str, str] = {}
    dims: dict[str, list[int]] = {}
    arrays: dict[str, dict[tuple[int, str], np.ndarray]] = {}
    for line in text[1:]:
        if not line.strip():
            continue
        if line.startswith("#meta "):
            k, _, v = line[len("#meta "):].partition("=")
            meta[k] = v
            continue
        if line.startswith("#net "):
            body = line[len("#net "):]
            name, _, d = body.partition(" dims=")
            dims[name] = [int(x) for x in d.split(",")]
            continue
        name, idx, kind, values = line.split(",", 3)
        arrays.setdefault(name, {})[(int(idx), kind)] = np.array(
            [float(x) for x in values.split(",")]
        )
    nets: dict[str, Mlp] = {}
    for name, d in dims.items():
        net = Mlp(d, seed=0, name=name)
        for i in range(net.n_layers):
            net.weights[i][...] = arrays[name][(i, "W")].reshape(net.weights[i].shape)
            net.biases[i][...] = arrays[name][(i, "b")]
        nets[name] = net
    return nets, meta
