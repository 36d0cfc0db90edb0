"""Step 3: small feedforward flux maps trained in-house.

The networks are tiny (at most tens of weights), so forward, backprop and
Adam are implemented directly on float64 arrays; this keeps gradients
checkable against finite differences and makes training bit-reproducible.
Inputs and outputs are z-scored with statistics from the training split;
dropout uses inverted scaling with per-epoch seeded masks and is disabled
at inference.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, HybridIdError

LEAKY_RELU_ALPHA = 0.01
STD_FLOOR = 1e-12
ACTIVATIONS = ("tanh", "linear", "leaky-relu")


@dataclass(frozen=True)
class MlpSpec:
    layer_sizes: Tuple[int, ...]
    activations: Tuple[str, ...]
    dropout_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if len(self.activations) != len(self.layer_sizes) - 1:
            raise ConfigError("need one activation per non-input layer")
        if any(s < 1 for s in self.layer_sizes):
            raise ConfigError("layer sizes must be >= 1")
        for a in self.activations:
            if a not in ACTIVATIONS:
                raise ConfigError(f"unknown activation {a!r}")
        if not (0.0 <= self.dropout_rate < 1.0):
            raise ConfigError("dropout_rate must lie in [0, 1)")
        object.__setattr__(self, "layer_sizes", tuple(int(s) for s in self.layer_sizes))
        object.__setattr__(self, "activations", tuple(self.activations))


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(z)
    if name == "leaky-relu":
        return np.where(z > 0, z, LEAKY_RELU_ALPHA * z)
    return z


def _act_deriv(name: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return 1.0 - a**2
    if name == "leaky-relu":
        return np.where(z > 0, 1.0, LEAKY_RELU_ALPHA)
    return np.ones_like(z)


@dataclass(frozen=True)
class Mlp:
    """Trained network with its input/output standardization."""

    spec: MlpSpec
    weights: Tuple[np.ndarray, ...]  # W_l of shape (n_out, n_in)
    biases: Tuple[np.ndarray, ...]
    input_mean: np.ndarray
    input_std: np.ndarray
    output_mean: np.ndarray
    output_std: np.ndarray

    @property
    def n_in(self) -> int:
        return self.spec.layer_sizes[0]

    @property
    def n_out(self) -> int:
        return self.spec.layer_sizes[-1]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return mlp_forward(self, x)


def init_mlp(spec: MlpSpec, input_stats=None, output_stats=None) -> Mlp:
    """Glorot-uniform initialization, seeded from the spec."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed]))
    ws, bs = [], []
    for n_in, n_out in zip(spec.layer_sizes[:-1], spec.layer_sizes[1:]):
        lim = np.sqrt(6.0 / (n_in + n_out))
        ws.append(rng.uniform(-lim, lim, size=(n_out, n_in)))
        bs.append(np.zeros(n_out))
    im, istd = input_stats or (np.zeros(spec.layer_sizes[0]), np.ones(spec.layer_sizes[0]))
    om, ostd = output_stats or (np.zeros(spec.layer_sizes[-1]), np.ones(spec.layer_sizes[-1]))
    return Mlp(spec, tuple(ws), tuple(bs), np.asarray(im, float),
               np.asarray(istd, float), np.asarray(om, float), np.asarray(ostd, float))


def mlp_forward(net: Mlp, x: np.ndarray) -> np.ndarray:
    """Deterministic inference (dropout is a no-op); broadcasts over leading
    axes of x."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != net.n_in:
        raise ConfigError(f"input dim {x.shape[-1]} != {net.n_in}")
    a = (x - net.input_mean) / net.input_std
    for w, b, act in zip(net.weights, net.biases, net.spec.activations):
        a = _act(act, a @ w.T + b)
    return a * net.output_std + net.output_mean


def _forward_pass(net: Mlp, xs: np.ndarray, masks: Optional[List[np.ndarray]]):
    """Standardized-space forward keeping intermediates for backprop."""
    pre, post = [], [xs]
    a = xs
    n_layers = len(net.weights)
    for li, (w, b, act) in enumerate(zip(net.weights, net.biases, net.spec.activations)):
        z = a @ w.T + b
        a = _act(act, z)
        if masks is not None and li < n_layers - 1:
            a = a * masks[li]
        pre.append(z)
        post.append(a)
    return pre, post


def mlp_gradient(net: Mlp, x: np.ndarray, y: np.ndarray,
                 masks: Optional[List[np.ndarray]] = None):
    """Gradients of the standardized-space MSE over the batch.

    Returns (loss, dW list, db list). x, y are raw (unstandardized) values.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.atleast_2d(np.asarray(y, dtype=float))
    if x.shape[0] == 0:
        raise HybridIdError("empty batch")
    xs = (x - net.input_mean) / net.input_std
    ys = (y - net.output_mean) / net.output_std
    pre, post = _forward_pass(net, xs, masks)
    n = x.shape[0]
    err = post[-1] - ys
    loss = float(np.mean(err**2))
    # d loss / d output = 2 * err / (n * n_out)
    delta = (2.0 / (n * err.shape[1])) * err  # dL/d(layer output)
    dws: List[np.ndarray] = [np.empty(0)] * len(net.weights)
    dbs: List[np.ndarray] = [np.empty(0)] * len(net.weights)
    n_layers = len(net.weights)
    for li in range(n_layers - 1, -1, -1):
        act = net.spec.activations[li]
        if masks is not None and li < n_layers - 1:
            a_raw = _act(act, pre[li])  # pre-mask activation
            d = delta * masks[li] * _act_deriv(act, pre[li], a_raw)
        else:
            d = delta * _act_deriv(act, pre[li], post[li + 1])
        dws[li] = d.T @ post[li]
        dbs[li] = d.sum(axis=0)
        if li > 0:
            delta = d @ net.weights[li]
    return loss, dws, dbs


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 2000
    batch_size: Optional[int] = None  # None -> full batch
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    validation_fraction: float = 0.2
    input_jitter: float = 0.0  # training-only input noise, in standardized units
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not (0.0 <= self.validation_fraction < 1.0):
            raise ConfigError("validation_fraction must lie in [0, 1)")
        if self.input_jitter < 0.0:
            raise ConfigError("input_jitter must be >= 0")


@dataclass
class TrainingReport:
    train_loss: List[float]  # standardized-space MSE per epoch
    val_loss: List[float]
    final_train_mse: float  # raw-unit MSE on the training split
    final_val_mse: float


def _standardize_stats(a: np.ndarray):
    mean = a.mean(axis=0)
    std = np.maximum(a.std(axis=0), STD_FLOOR)
    return mean, std


def _raw_mse(net: Mlp, x: np.ndarray, y: np.ndarray) -> float:
    if x.shape[0] == 0:
        return float("nan")
    return float(np.mean((mlp_forward(net, x) - y) ** 2))


def train_mlp(x: np.ndarray, y: np.ndarray, spec: MlpSpec,
              cfg: TrainConfig = TrainConfig()):
    """Train on raw-unit rows (x, y) with Adam; returns (Mlp, TrainingReport).

    The validation split is the trailing fraction of rows in their given
    (provenance) order; standardization statistics come from the training
    split only. Full-batch by default, which makes training invariant to
    row order.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.asarray(y, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    if x.shape[0] < 10:
        raise HybridIdError(f"need at least 10 training rows, got {x.shape[0]}")
    n = x.shape[0]
    n_val = int(round(n * cfg.validation_fraction))
    n_train = n - n_val
    xt, yt = x[:n_train], y[:n_train]
    xv, yv = x[n_train:], y[n_train:]

    net = init_mlp(
        spec,
        input_stats=_standardize_stats(xt),
        output_stats=_standardize_stats(yt),
    )
    ws = [w.copy() for w in net.weights]
    bs = [b.copy() for b in net.biases]
    m_w = [np.zeros_like(w) for w in ws]
    v_w = [np.zeros_like(w) for w in ws]
    m_b = [np.zeros_like(b) for b in bs]
    v_b = [np.zeros_like(b) for b in bs]

    drop_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, spec.seed]))
    xvs = (xv - net.input_mean) / net.input_std if n_val else None
    yvs = (yv - net.output_mean) / net.output_std if n_val else None

    train_hist: List[float] = []
    val_hist: List[float] = []
    step = 0
    batch = n_train if cfg.batch_size is None else min(cfg.batch_size, n_train)
    for epoch in range(cfg.epochs):
        xe = xt
        if cfg.input_jitter > 0.0:
            # Gaussian input noise decorrelates collinear inputs during
            # training, spreading attribution across them (ridge-like
            # penalty on the input gradient). Inference is unaffected.
            xe = xt + cfg.input_jitter * net.input_std * drop_rng.standard_normal(xt.shape)
        masks = None
        if spec.dropout_rate > 0.0:
            keep = 1.0 - spec.dropout_rate
            masks = [
                (drop_rng.random((batch, h)) < keep) / keep
                for h in spec.layer_sizes[1:-1]
            ]
        if batch == n_train:
            slices = [(0, n_train)]
        else:
            slices = [(s, min(s + batch, n_train)) for s in range(0, n_train, batch)]
        epoch_loss = 0.0
        for lo, hi in slices:
            cur = net if step == 0 else Mlp(
                spec, tuple(ws), tuple(bs), net.input_mean, net.input_std,
                net.output_mean, net.output_std,
            )
            mk = masks
            if masks is not None and hi - lo != batch:
                mk = [m[: hi - lo] for m in masks]
            loss, dws, dbs = mlp_gradient(cur, xe[lo:hi], yt[lo:hi], masks=mk)
            epoch_loss += loss * (hi - lo)
            step += 1
            b1c = 1.0 - cfg.beta1**step
            b2c = 1.0 - cfg.beta2**step
            for li in range(len(ws)):
                for m_, v_, g, p in (
                    (m_w[li], v_w[li], dws[li], ws[li]),
                    (m_b[li], v_b[li], dbs[li], bs[li]),
                ):
                    m_ *= cfg.beta1
                    m_ += (1 - cfg.beta1) * g
                    v_ *= cfg.beta2
                    v_ += (1 - cfg.beta2) * g**2
                    p -= cfg.learning_rate * (m_ / b1c) / (np.sqrt(v_ / b2c) + cfg.eps)
        net = Mlp(spec, tuple(w.copy() for w in ws), tuple(b.copy() for b in bs),
                  net.input_mean, net.input_std, net.output_mean, net.output_std)
        train_hist.append(epoch_loss / n_train)
        if n_val:
            _, post = _forward_pass(net, xvs, None)
            val_hist.append(float(np.mean((post[-1] - yvs) ** 2)))
    report = TrainingReport(
        train_loss=train_hist,
        val_loss=val_hist,
        final_train_mse=_raw_mse(net, xt, yt),
        final_val_mse=_raw_mse(net, xv, yv) if n_val else float("nan"),
    )
    return net, report


# ---------------------------------------------------------------------------
# serialization


def mlp_to_dict(net: Mlp) -> Dict:
    """Full-precision document representation (row-major weight matrices)."""
    return {
        "layer_sizes": list(net.spec.layer_sizes),
        "activations": list(net.spec.activations),
        "dropout_rate": net.spec.dropout_rate,
        "seed": net.spec.seed,
        "weights": [[list(row) for row in w] for w in net.weights],
        "biases": [list(b) for b in net.biases],
        "input_mean": list(net.input_mean),
        "input_std": list(net.input_std),
        "output_mean": list(net.output_mean),
        "output_std": list(net.output_std),
    }


def mlp_from_dict(doc: Dict) -> Mlp:
    spec = MlpSpec(
        layer_sizes=tuple(doc["layer_sizes"]),
        activations=tuple(doc["activations"]),
        dropout_rate=doc.get("dropout_rate", 0.0),
        seed=doc.get("seed", 0),
    )
    return Mlp(
        spec=spec,
        weights=tuple(np.array(w, dtype=float) for w in doc["weights"]),
        biases=tuple(np.array(b, dtype=float) for b in doc["biases"]),
        input_mean=np.array(doc["input_mean"], dtype=float),
        input_std=np.array(doc["input_std"], dtype=float),
        output_mean=np.array(doc["output_mean"], dtype=float),
        output_std=np.array(doc["output_std"], dtype=float),
    )


def train_flux_mlp(table, flux_name: str, inputs: Sequence[str],
                   spec: MlpSpec, cfg: TrainConfig = TrainConfig()):
    """Train one flux map from a flux table (Step 3 entry point).

    table must expose column(name); rows stay in provenance order so the
    validation split is the trailing fraction of the last experiments.
    """
    if not inputs:
        raise ConfigError(
            f"no inputs selected for {flux_name!r}; bind a constant instead"
        )
    x = np.column_stack([table.column(nm) for nm in inputs])
    y = np.asarray(table.column(flux_name), dtype=float)
    if x.shape[0] < 10:
        raise ConfigError(f"{x.shape[0]} rows is too few to train {flux_name!r}")
    return train_mlp(x, y, spec, cfg)
