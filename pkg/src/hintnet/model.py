"""Per-level predictor: graph convolution over a w x w window, an LSTM over the
7-day input sequence and fully connected fusion layers.

Everything is plain numpy in float64 with hand-written reverse-mode gradients.
Batched arrays use the layout

    st        [B, n_days, P, n_st]   spatio-temporal window, P = w * w
    temporal  [B, n_days, n_t]
    spatial   [B, P, n_s]
    adjacency [B, P, P]
    target    [B]
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, fields
from typing import NamedTuple

import numpy as np

log = logging.getLogger(__name__)

PARAM_NAMES = (
    "gc_st_1",
    "gc_st_2",
    "gc_sp",
    "fc_in_w",
    "fc_in_b",
    "lstm_w",
    "lstm_u",
    "lstm_b",
    "fc_sp_w",
    "fc_sp_b",
    "fc_out_w",
    "fc_out_b",
)

DIVERGENCE_LOSS = 1e6


class NonFiniteError(FloatingPointError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, report: "TrainReport"):
        super().__init__(message)
        self.report = report


@dataclass
class HyperParams:
    w: int = 5
    h: int = 16
    h_l: int = 32
    s_d: int = 16
    lstm_input: int = 32
    alpha: float = 1e-3
    epochs: int = 100
    batch_size: int = 64
    patience: int = 10
    seed: int = 0
    momentum: float = 0.0
    activation: str = "relu"
    max_train_samples: int | None = None
    max_val_samples: int | None = None
    trainable: tuple[str, ...] | None = None

    def __post_init__(self):
        for name in ("w", "h", "h_l", "s_d", "lstm_input", "epochs", "batch_size", "patience"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.w % 2 == 0:
            raise ValueError(f"window size w must be odd, got {self.w}")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.trainable is not None:
            unknown = set(self.trainable) - set(PARAM_NAMES)
            if unknown:
                raise ValueError(f"unknown trainable parameters {sorted(unknown)}")
            self.trainable = tuple(self.trainable)

    def replace(self, **changes) -> "HyperParams":
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values.update(changes)
        return HyperParams(**values)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        if d["trainable"] is not None:
            d["trainable"] = list(d["trainable"])
        return d


class Batch(NamedTuple):
    st: np.ndarray
    temporal: np.ndarray
    spatial: np.ndarray
    adjacency: np.ndarray
    target: np.ndarray

    @property
    def size(self) -> int:
        return self.target.shape[0]


# ---------------------------------------------------------------------------
# activations


def _relu(z):
    return np.maximum(z, 0.0)


def _relu_grad(z):
    return (z > 0).astype(z.dtype)


def _identity(z):
    return z


def _identity_grad(z):
    return np.ones_like(z)


ACTIVATIONS = {
    "relu": (_relu, _relu_grad),
    "identity": (_identity, _identity_grad),
}


def sigmoid(x):
    # split by sign so large |x| never overflows exp
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _check_finite(name, arr):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {name}")


# ---------------------------------------------------------------------------
# layers


def gc_forward(H_prev, A, W, activation="relu", return_preactivation=False):
    """Graph convolution ``sigma(A @ H_prev @ W)``.

    Works on a single window (``H_prev`` of shape [P, d_in], ``A`` [P, P]) or on
    any stack of them, as long as the leading dimensions broadcast.
    """
    H_prev = np.asarray(H_prev, dtype=np.float64)
    A = np.asarray(A, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    if H_prev.shape[-1] != W.shape[0]:
        raise ValueError(f"feature width {H_prev.shape[-1]} does not match W rows {W.shape[0]}")
    if A.shape[-1] != A.shape[-2] or A.shape[-1] != H_prev.shape[-2]:
        raise ValueError(f"adjacency {A.shape} incompatible with node features {H_prev.shape}")
    act, _ = ACTIVATIONS[activation]
    Z = A @ (H_prev @ W)
    out = act(Z)
    if return_preactivation:
        return out, Z
    return out


def gc_backward(d_out, H_prev, A, W, Z, activation="relu"):
    """Gradients of a graph convolution given the upstream gradient.

    Returns ``(dH_prev, dW)``; ``dW`` is summed over all leading dimensions.
    """
    _, act_grad = ACTIVATIONS[activation]
    dZ = d_out * act_grad(Z)
    dHW = np.swapaxes(A, -1, -2) @ dZ
    dW = H_prev.reshape(-1, H_prev.shape[-1]).T @ dHW.reshape(-1, dHW.shape[-1])
    dH_prev = dHW @ W.T
    return dH_prev, dW


def dense_forward(x, W, b, activation="identity"):
    act, _ = ACTIVATIONS[activation]
    z = x @ W + b
    return act(z), z


def dense_backward(d_out, x, W, z, activation="identity"):
    _, act_grad = ACTIVATIONS[activation]
    dz = d_out * act_grad(z)
    dW = x.reshape(-1, x.shape[-1]).T @ dz.reshape(-1, dz.shape[-1])
    db = dz.reshape(-1, dz.shape[-1]).sum(axis=0)
    dx = dz @ W.T
    return dx, dW, db


def lstm_step(x, h_prev, c_prev, W, U, b):
    """One LSTM step with gates stacked as [input, forget, output, candidate].

    ``W`` is [m, 4 h_l], ``U`` is [h_l, 4 h_l], ``b`` is [4 h_l]. Returns
    ``(h, c, cache)``.
    """
    n = h_prev.shape[-1]
    a = x @ W + h_prev @ U + b
    i = sigmoid(a[..., :n])
    f = sigmoid(a[..., n : 2 * n])
    o = sigmoid(a[..., 2 * n : 3 * n])
    g = np.tanh(a[..., 3 * n :])
    c = f * c_prev + i * g
    tc = np.tanh(c)
    h = o * tc
    return h, c, (x, h_prev, c_prev, i, f, o, g, tc)


def lstm_step_backward(dh, dc, cache, W, U):
    """Backward through one LSTM step.

    Returns ``(dx, dh_prev, dc_prev, dW, dU, db)``.
    """
    x, h_prev, c_prev, i, f, o, g, tc = cache
    do = dh * tc
    dc = dc + dh * o * (1.0 - tc**2)
    di = dc * g
    df = dc * c_prev
    dg = dc * i
    dc_prev = dc * f
    da = np.concatenate(
        [di * i * (1.0 - i), df * f * (1.0 - f), do * o * (1.0 - o), dg * (1.0 - g**2)],
        axis=-1,
    )
    dW = x.reshape(-1, x.shape[-1]).T @ da.reshape(-1, da.shape[-1])
    dU = h_prev.reshape(-1, h_prev.shape[-1]).T @ da.reshape(-1, da.shape[-1])
    db = da.reshape(-1, da.shape[-1]).sum(axis=0)
    dx = da @ W.T
    dh_prev = da @ U.T
    return dx, dh_prev, dc_prev, dW, dU, db


def loss_mse(predictions, targets) -> float:
    predictions = np.asarray(predictions, dtype=np.float64).ravel()
    targets = np.asarray(targets, dtype=np.float64).ravel()
    if predictions.size == 0 or predictions.size != targets.size:
        raise ValueError("predictions and targets must be non-empty and of equal length")
    return float(np.mean((targets - predictions) ** 2))


# ---------------------------------------------------------------------------
# parameters


@dataclass
class ModelParams:
    """Named parameter arrays of one level model."""

    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name):
        return self.arrays[name]

    def __setitem__(self, name, value):
        self.arrays[name] = value

    def __iter__(self):
        return iter(PARAM_NAMES)

    def items(self):
        return ((k, self.arrays[k]) for k in PARAM_NAMES)

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.arrays.items()})

    @property
    def count(self) -> int:
        return int(sum(v.size for v in self.arrays.values()))

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: tuple(v.shape) for k, v in self.items()}

    def equal(self, other: "ModelParams") -> bool:
        """Bitwise equality of every array."""
        return all(
            self[k].shape == other[k].shape and self[k].tobytes() == other[k].tobytes()
            for k in PARAM_NAMES
        )

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.arrays.values())

    def to_dict(self) -> dict:
        return {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in self.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelParams":
        arrays = {}
        for k in PARAM_NAMES:
            arrays[k] = np.asarray(d[k]["data"], dtype=np.float64).reshape(d[k]["shape"])
        return cls(arrays)


@dataclass(frozen=True)
class InputDims:
    n_st: int
    n_t: int
    n_s: int
    n_days: int = 7


def _glorot(rng, fan_in, fan_out, shape):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_params(dims: InputDims, hyper: HyperParams, rng: np.random.Generator) -> ModelParams:
    P = hyper.w * hyper.w
    h, hl, sd, m = hyper.h, hyper.h_l, hyper.s_d, hyper.lstm_input
    d_in = P * h + dims.n_t
    lstm_w = np.concatenate([_glorot(rng, m, hl, (m, hl)) for _ in range(4)], axis=1)
    lstm_u = np.concatenate([_glorot(rng, hl, hl, (hl, hl)) for _ in range(4)], axis=1)
    lstm_b = np.zeros(4 * hl)
    lstm_b[hl : 2 * hl] = 1.0  # forget gate
    arrays = {
        "gc_st_1": _glorot(rng, dims.n_st, h, (dims.n_st, h)),
        "gc_st_2": _glorot(rng, h, h, (h, h)),
        "gc_sp": _glorot(rng, dims.n_s, h, (dims.n_s, h)),
        "fc_in_w": _glorot(rng, d_in, m, (d_in, m)),
        "fc_in_b": np.zeros(m),
        "lstm_w": lstm_w,
        "lstm_u": lstm_u,
        "lstm_b": lstm_b,
        "fc_sp_w": _glorot(rng, P * h, sd, (P * h, sd)),
        "fc_sp_b": np.zeros(sd),
        "fc_out_w": _glorot(rng, hl + sd, 1, (hl + sd,)),
        "fc_out_b": np.zeros(1),
    }
    return ModelParams(arrays)


def zeros_like(params: ModelParams) -> ModelParams:
    return ModelParams({k: np.zeros_like(v) for k, v in params.items()})


# ---------------------------------------------------------------------------
# network


def _as_batch(sample_or_batch) -> Batch:
    if isinstance(sample_or_batch, Batch):
        return sample_or_batch
    s = sample_or_batch
    return Batch(
        st=np.asarray(s.st_window, dtype=np.float64).reshape(1, s.st_window.shape[0], -1, s.st_window.shape[-1]),
        temporal=np.asarray(s.temporal, dtype=np.float64)[None],
        spatial=np.asarray(s.spatial_window, dtype=np.float64).reshape(1, -1, s.spatial_window.shape[-1]),
        adjacency=np.asarray(s.adjacency, dtype=np.float64)[None],
        target=np.asarray([s.target], dtype=np.float64),
    )


def _check_shapes(batch: Batch, params: ModelParams):
    B, T, P, n_st = batch.st.shape
    if params["gc_st_1"].shape[0] != n_st:
        raise ValueError(f"sample has {n_st} ST channels, model expects {params['gc_st_1'].shape[0]}")
    if params["gc_sp"].shape[0] != batch.spatial.shape[-1]:
        raise ValueError("spatial channel count does not match the model")
    if batch.adjacency.shape[1:] != (P, P):
        raise ValueError(f"adjacency shape {batch.adjacency.shape[1:]} does not match window size {P}")
    h = params["gc_st_2"].shape[1]
    if params["fc_in_w"].shape[0] != P * h + batch.temporal.shape[-1]:
        raise ValueError("window size or temporal width does not match the model")


def forward_batch(batch: Batch, params: ModelParams, activation: str = "relu"):
    """Predictions for a batch plus the cache needed by :func:`backward_batch`."""
    _check_shapes(batch, params)
    act, _ = ACTIVATIONS[activation]
    st, tf, sp, A = batch.st, batch.temporal, batch.spatial, batch.adjacency
    B, T, P, _ = st.shape
    A4 = A[:, None]

    H1, Z1 = gc_forward(st, A4, params["gc_st_1"], activation, return_preactivation=True)
    _check_finite("gc_st_1", H1)
    H2, Z2 = gc_forward(H1, A4, params["gc_st_2"], activation, return_preactivation=True)
    _check_finite("gc_st_2", H2)
    u = np.concatenate([H2.reshape(B, T, -1), tf], axis=-1)
    g, zin = dense_forward(u, params["fc_in_w"], params["fc_in_b"], activation)
    _check_finite("fc_in", g)

    hl = params["lstm_u"].shape[0]
    h = np.zeros((B, hl))
    c = np.zeros((B, hl))
    steps = []
    for t in range(T):
        h, c, cache = lstm_step(g[:, t], h, c, params["lstm_w"], params["lstm_u"], params["lstm_b"])
        steps.append(cache)
    _check_finite("lstm", h)

    S1, Zs = gc_forward(sp, A, params["gc_sp"], activation, return_preactivation=True)
    sflat = S1.reshape(B, -1)
    s, zs = dense_forward(sflat, params["fc_sp_w"], params["fc_sp_b"], activation)
    _check_finite("fc_sp", s)

    q = np.concatenate([h, s], axis=-1)
    y = q @ params["fc_out_w"] + params["fc_out_b"][0]
    _check_finite("fc_out", y)
    cache = dict(Z1=Z1, H1=H1, Z2=Z2, u=u, zin=zin, g=g, steps=steps, Zs=Zs, sflat=sflat, zs=zs, q=q)
    return y, cache


def backward_batch(dy, batch: Batch, params: ModelParams, cache, activation: str = "relu") -> ModelParams:
    """Reverse pass: gradient of ``sum(dy * y)`` for every parameter."""
    st, sp, A = batch.st, batch.spatial, batch.adjacency
    B, T, P, _ = st.shape
    hl = params["lstm_u"].shape[0]
    grads = {}

    q = cache["q"]
    grads["fc_out_w"] = q.T @ dy
    grads["fc_out_b"] = np.array([dy.sum()])
    dq = dy[:, None] * params["fc_out_w"][None, :]
    dh = dq[:, :hl]
    ds = dq[:, hl:]

    dsflat, grads["fc_sp_w"], grads["fc_sp_b"] = dense_backward(
        ds, cache["sflat"], params["fc_sp_w"], cache["zs"], activation
    )
    _, grads["gc_sp"] = gc_backward(
        dsflat.reshape(B, P, -1), sp, A, params["gc_sp"], cache["Zs"], activation
    )

    dW = np.zeros_like(params["lstm_w"])
    dU = np.zeros_like(params["lstm_u"])
    db = np.zeros_like(params["lstm_b"])
    dg = np.empty_like(cache["g"])
    dc = np.zeros((B, hl))
    for t in reversed(range(T)):
        dx, dh, dc, dWt, dUt, dbt = lstm_step_backward(
            dh, dc, cache["steps"][t], params["lstm_w"], params["lstm_u"]
        )
        dg[:, t] = dx
        dW += dWt
        dU += dUt
        db += dbt
    grads["lstm_w"], grads["lstm_u"], grads["lstm_b"] = dW, dU, db

    du, grads["fc_in_w"], grads["fc_in_b"] = dense_backward(
        dg, cache["u"], params["fc_in_w"], cache["zin"], activation
    )
    h_width = params["gc_st_2"].shape[1]
    dH2 = du[..., : P * h_width].reshape(B, T, P, h_width)
    A4 = A[:, None]
    dH1, grads["gc_st_2"] = gc_backward(dH2, cache["H1"], A4, params["gc_st_2"], cache["Z2"], activation)
    _, grads["gc_st_1"] = gc_backward(dH1, st, A4, params["gc_st_1"], cache["Z1"], activation)
    return ModelParams(grads)


def forward(sample, params: ModelParams, activation: str = "relu"):
    """Prediction for one :class:`SubregionSample` (or a :class:`Batch`)."""
    batch = _as_batch(sample)
    y, cache = forward_batch(batch, params, activation)
    if batch.size == 1:
        return float(y[0]), cache
    return y, cache


def predict(batch: Batch, params: ModelParams, activation: str = "relu") -> np.ndarray:
    return forward_batch(batch, params, activation)[0]


def loss_and_gradients(batch, params: ModelParams, activation: str = "relu"):
    batch = _as_batch(batch)
    if batch.size == 0:
        raise ValueError("empty batch")
    y, cache = forward_batch(batch, params, activation)
    resid = y - batch.target
    loss = float(np.mean(resid**2))
    dy = 2.0 * resid / batch.size
    grads = backward_batch(dy, batch, params, cache, activation)
    for name, arr in grads.items():
        _check_finite(f"gradient of {name}", arr)
    return loss, grads


def gradients(batch, params: ModelParams, activation: str = "relu") -> ModelParams:
    """Exact gradient of the batch MSE with respect to every parameter."""
    return loss_and_gradients(batch, params, activation)[1]


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    epochs_run: int = 0
    best_val_loss: float = float("inf")
    best_epoch: int = 0
    wall_time: float = 0.0
    diverged: bool = False

    def epochs_to_target(self, target: float) -> int | None:
        """First (1-based) epoch whose validation loss is <= target."""
        for i, v in enumerate(self.val_loss):
            if v <= target:
                return i + 1
        return None

    def summary(self) -> dict:
        return {
            "epochs_run": self.epochs_run,
            "best_epoch": self.best_epoch,
            "best_val_loss": self.best_val_loss,
            "final_train_loss": self.train_loss[-1] if self.train_loss else None,
            "train_loss": list(self.train_loss),
            "val_loss": list(self.val_loss),
        }


def _subsample(n, cap, rng):
    if cap is None or n <= cap:
        return np.arange(n)
    return np.sort(rng.choice(n, size=cap, replace=False))


def _get_batch(samples, idx) -> Batch:
    if hasattr(samples, "batch"):
        return samples.batch(idx)
    from .samples import stack_samples

    return stack_samples([samples[i] for i in idx])


def evaluate_loss(samples, params: ModelParams, idx=None, batch_size=512, activation="relu") -> float:
    n = len(samples)
    idx = np.arange(n) if idx is None else idx
    total = 0.0
    for start in range(0, len(idx), batch_size):
        b = _get_batch(samples, idx[start : start + batch_size])
        y = predict(b, params, activation)
        total += float(np.sum((y - b.target) ** 2))
    return total / len(idx)


def train_level(samples, params_init: ModelParams, hyper: HyperParams, val_samples=None):
    """Mini-batch gradient descent with early stopping on validation MSE.

    Returns the parameters from the best validation epoch and a
    :class:`TrainReport`. Without ``val_samples`` the training loss drives early
    stopping.
    """
    n = len(samples)
    if n == 0:
        raise ValueError("no training samples")
    t0 = time.perf_counter()
    rng = np.random.default_rng(hyper.seed)
    train_idx = _subsample(n, hyper.max_train_samples, rng)
    val_idx = None
    if val_samples is not None and len(val_samples) > 0:
        val_idx = _subsample(len(val_samples), hyper.max_val_samples, rng)

    params = params_init.copy()
    names = hyper.trainable or PARAM_NAMES
    velocity = {k: np.zeros_like(params[k]) for k in names}
    report = TrainReport()
    best = params.copy()
    since_best = 0

    for epoch in range(hyper.epochs):
        order = train_idx[rng.permutation(len(train_idx))]
        batch_losses = []
        weights = []
        for start in range(0, len(order), hyper.batch_size):
            b = _get_batch(samples, order[start : start + hyper.batch_size])
            loss, grads = loss_and_gradients(b, params, hyper.activation)
            if not np.isfinite(loss) or loss > DIVERGENCE_LOSS:
                report.diverged = True
                report.epochs_run = epoch + 1
                report.wall_time = time.perf_counter() - t0
                raise TrainingDiverged(f"training diverged at epoch {epoch + 1} (loss {loss:g})", report)
            batch_losses.append(loss)
            weights.append(b.size)
            for k in names:
                if hyper.momentum:
                    velocity[k] = hyper.momentum * velocity[k] - hyper.alpha * grads[k]
                    params[k] = params[k] + velocity[k]
                else:
                    params[k] = params[k] - hyper.alpha * grads[k]
        report.train_loss.append(float(np.average(batch_losses, weights=weights)))
        if val_idx is not None:
            val = evaluate_loss(val_samples, params, val_idx, activation=hyper.activation)
        else:
            val = evaluate_loss(samples, params, train_idx, activation=hyper.activation)
        report.val_loss.append(val)
        report.epochs_run = epoch + 1
        if val < report.best_val_loss:
            report.best_val_loss = val
            report.best_epoch = epoch + 1
            best = params.copy()
            since_best = 0
        else:
            since_best += 1
            if since_best >= hyper.patience:
                break
        log.debug("epoch %d train %.5f val %.5f", epoch + 1, report.train_loss[-1], val)

    report.wall_time = time.perf_counter() - t0
    return best, report
