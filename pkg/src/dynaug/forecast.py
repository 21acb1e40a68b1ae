"""LSTM forecasters with hand-derived backpropagation through time.

Two augmentation engines share one cell:

* :class:`StatelessForecaster` emits a whole block of ``horizon`` future
  points from the final hidden state in one pass;
* :class:`RecursiveForecaster` emits one point, appends it to the window
  (dropping the oldest point), and repeats.

Hidden state is zeroed for every window; overlapping windows must never leak
state into each other. Gate order in all stacked tensors is [i, f, g, o].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tsaf
from .numerics import AdamOptimizer, RngStream, init_uniform, require_finite, sigmoid

__all__ = [
    "ForecasterCheckpoint",
    "LstmCache",
    "LstmGrads",
    "LstmParams",
    "RecursiveForecaster",
    "StatelessForecaster",
    "TrainConfig",
    "TrainingDivergedError",
    "forecast_recursive",
    "forecast_stateless",
    "load_checkpoint",
    "lstm_backward",
    "lstm_forward",
    "lstm_step",
    "save_checkpoint",
    "train_forecaster",
]


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite during training."""

    def __init__(self, epoch: int, message: str):
        super().__init__(f"epoch {epoch}: {message}")
        self.epoch = epoch


@dataclass
class LstmParams:
    """Single-layer LSTM weights; rows of w_x/w_h stack gates as [i, f, g, o]."""

    w_x: np.ndarray  # (4H x C)
    w_h: np.ndarray  # (4H x H)
    b: np.ndarray    # (4H,)

    def __post_init__(self):
        h4, c = self.w_x.shape
        if h4 % 4 != 0 or self.w_h.shape != (h4, h4 // 4) or self.b.shape != (h4,):
            raise ValueError(
                f"inconsistent LSTM shapes: w_x {self.w_x.shape}, "
                f"w_h {self.w_h.shape}, b {self.b.shape}")

    @property
    def hidden_size(self) -> int:
        return self.w_h.shape[1]

    @property
    def input_size(self) -> int:
        return self.w_x.shape[1]

    @classmethod
    def init(cls, input_size: int, hidden_size: int, rng: RngStream) -> "LstmParams":
        gen = rng.generator()
        return cls(
            w_x=init_uniform(4 * hidden_size, input_size, gen),
            w_h=init_uniform(4 * hidden_size, hidden_size, gen),
            b=np.zeros(4 * hidden_size),
        )

    @classmethod
    def zeros(cls, input_size: int, hidden_size: int) -> "LstmParams":
        return cls(np.zeros((4 * hidden_size, input_size)),
                   np.zeros((4 * hidden_size, hidden_size)),
                   np.zeros(4 * hidden_size))


def lstm_step(cell: LstmParams, x_t, h_prev, c_prev):
    """One recurrence step: returns (h_t, c_t).

    Accepts single vectors (C,)/(H,) or batches (B, C)/(B, H).
    """
    x_t = np.asarray(x_t, dtype=np.float64)
    h_prev = np.asarray(h_prev, dtype=np.float64)
    c_prev = np.asarray(c_prev, dtype=np.float64)
    h = cell.hidden_size
    a = x_t @ cell.w_x.T + h_prev @ cell.w_h.T + cell.b
    i = sigmoid(a[..., 0:h])
    f = sigmoid(a[..., h:2 * h])
    g = np.tanh(a[..., 2 * h:3 * h])
    o = sigmoid(a[..., 3 * h:4 * h])
    c_t = f * c_prev + i * g
    h_t = o * np.tanh(c_t)
    if not np.all(np.isfinite(h_t)):
        raise ValueError("lstm_step produced a non-finite state")
    return h_t, c_t


@dataclass
class LstmCache:
    """Forward-pass activations retained for backpropagation through time."""

    cell: LstmParams
    x: np.ndarray        # (B, L, C)
    h_states: np.ndarray  # (B, L+1, H), h_states[:, 0] = h0
    c_states: np.ndarray  # (B, L+1, H)
    gates: np.ndarray    # (B, L, 4H), post-activation [i, f, g, o]
    tanh_c: np.ndarray   # (B, L, H)
    squeeze: bool        # input was a single (L, C) sequence


def lstm_forward(cell: LstmParams, sequence, h0=None, c0=None,
                 want_cache: bool = False):
    """Run the cell over a sequence; returns (hidden_states, cache).

    ``sequence`` is (L, C) or batched (B, L, C); hidden states match
    ((L, H) or (B, L, H)). Initial state defaults to zero per window.
    """
    x = np.asarray(sequence, dtype=np.float64)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    if x.ndim != 3:
        raise ValueError(f"sequence must be (L, C) or (B, L, C), got shape {x.shape}")
    b, l, c = x.shape
    if l < 1:
        raise ValueError("sequence must have at least one time step")
    if c != cell.input_size:
        raise ValueError(f"sequence has {c} channels, cell expects {cell.input_size}")
    h = cell.hidden_size

    h_states = np.zeros((b, l + 1, h))
    c_states = np.zeros((b, l + 1, h))
    if h0 is not None:
        h_states[:, 0] = h0
    if c0 is not None:
        c_states[:, 0] = c0
    gates = np.empty((b, l, 4 * h))
    tanh_c = np.empty((b, l, h))

    # input contribution for all steps in one dgemm
    xw = x.reshape(b * l, c) @ cell.w_x.T
    xw = xw.reshape(b, l, 4 * h) + cell.b
    h_t = h_states[:, 0]
    c_t = c_states[:, 0]
    for t in range(l):
        a = xw[:, t] + h_t @ cell.w_h.T
        i = sigmoid(a[:, 0:h])
        f = sigmoid(a[:, h:2 * h])
        g = np.tanh(a[:, 2 * h:3 * h])
        o = sigmoid(a[:, 3 * h:4 * h])
        c_t = f * c_t + i * g
        tc = np.tanh(c_t)
        h_t = o * tc
        gates[:, t, 0:h] = i
        gates[:, t, h:2 * h] = f
        gates[:, t, 2 * h:3 * h] = g
        gates[:, t, 3 * h:4 * h] = o
        tanh_c[:, t] = tc
        h_states[:, t + 1] = h_t
        c_states[:, t + 1] = c_t
    if not np.all(np.isfinite(h_states)):
        raise ValueError("lstm_forward produced non-finite hidden states")

    hidden = h_states[:, 1:]
    cache = LstmCache(cell, x, h_states, c_states, gates, tanh_c, squeeze) if want_cache else None
    out = hidden[0] if squeeze else hidden
    return out, cache


@dataclass
class LstmGrads:
    w_x: np.ndarray
    w_h: np.ndarray
    b: np.ndarray
    inputs: np.ndarray  # same shape as the forward input


def lstm_backward(cache: LstmCache, d_hidden=None, d_h_last=None) -> LstmGrads:
    """Exact BPTT through a cached forward pass.

    Upstream gradients arrive on hidden states: ``d_hidden`` covers all steps
    ((L, H) or (B, L, H)); ``d_h_last`` targets only the final step. Both may
    be given and are summed.
    """
    cell = cache.cell
    b, l, c = cache.x.shape
    h = cell.hidden_size
    if d_hidden is None and d_h_last is None:
        raise ValueError("lstm_backward needs d_hidden and/or d_h_last")

    d_up = np.zeros((b, l, h))
    if d_hidden is not None:
        dh_arr = np.asarray(d_hidden, dtype=np.float64)
        if cache.squeeze and dh_arr.ndim == 2:
            dh_arr = dh_arr[None]
        if dh_arr.shape != (b, l, h):
            raise ValueError(f"d_hidden shape {dh_arr.shape} does not match cache ({b},{l},{h})")
        d_up += dh_arr
    if d_h_last is not None:
        dl_arr = np.asarray(d_h_last, dtype=np.float64)
        if cache.squeeze and dl_arr.ndim == 1:
            dl_arr = dl_arr[None]
        if dl_arr.shape != (b, h):
            raise ValueError(f"d_h_last shape {dl_arr.shape} does not match cache ({b},{h})")
        d_up[:, -1] += dl_arr

    d_act = np.empty((b, l, 4 * h))  # gradients on gate pre-activations
    dh_next = np.zeros((b, h))
    dc_next = np.zeros((b, h))
    for t in range(l - 1, -1, -1):
        i = cache.gates[:, t, 0:h]
        f = cache.gates[:, t, h:2 * h]
        g = cache.gates[:, t, 2 * h:3 * h]
        o = cache.gates[:, t, 3 * h:4 * h]
        tc = cache.tanh_c[:, t]
        dh = d_up[:, t] + dh_next
        dc = dc_next + dh * o * (1.0 - tc * tc)
        d_act[:, t, 3 * h:4 * h] = dh * tc * o * (1.0 - o)
        d_act[:, t, 0:h] = dc * g * i * (1.0 - i)
        d_act[:, t, h:2 * h] = dc * cache.c_states[:, t] * f * (1.0 - f)
        d_act[:, t, 2 * h:3 * h] = dc * i * (1.0 - g * g)
        da = d_act[:, t]
        dh_next = da @ cell.w_h
        dc_next = dc * f

    da_flat = d_act.reshape(b * l, 4 * h)
    d_w_x = da_flat.T @ cache.x.reshape(b * l, c)
    d_w_h = da_flat.T @ cache.h_states[:, :l].reshape(b * l, h)
    d_b = da_flat.sum(axis=0)
    d_inputs = (da_flat @ cell.w_x).reshape(b, l, c)
    if cache.squeeze:
        d_inputs = d_inputs[0]
    return LstmGrads(d_w_x, d_w_h, d_b, d_inputs)


@dataclass
class StatelessForecaster:
    """Forecasts a whole (horizon x C) block from the final hidden state."""

    cell: LstmParams
    w_out: np.ndarray  # (horizon*C x H)
    b_out: np.ndarray  # (horizon*C,)
    horizon: int

    def __post_init__(self):
        expect = self.horizon * self.cell.input_size
        if self.w_out.shape != (expect, self.cell.hidden_size) or self.b_out.shape != (expect,):
            raise ValueError(
                f"head shapes {self.w_out.shape}/{self.b_out.shape} do not match "
                f"horizon {self.horizon} x channels {self.cell.input_size}")

    @property
    def channels(self) -> int:
        return self.cell.input_size

    @classmethod
    def init(cls, channels: int, hidden_size: int, horizon: int, rng: RngStream) -> "StatelessForecaster":
        cell = LstmParams.init(channels, hidden_size, rng.derive("cell"))
        w_out = init_uniform(horizon * channels, hidden_size, rng.derive("head"))
        return cls(cell, w_out, np.zeros(horizon * channels), horizon)

    def params(self) -> dict[str, np.ndarray]:
        return {"cell.w_x": self.cell.w_x, "cell.w_h": self.cell.w_h,
                "cell.b": self.cell.b, "head.w": self.w_out, "head.b": self.b_out}

    def forecast_batch(self, windows: np.ndarray) -> np.ndarray:
        hidden, _ = lstm_forward(self.cell, windows)
        flat = hidden[:, -1] @ self.w_out.T + self.b_out
        return flat.reshape(windows.shape[0], self.horizon, self.channels)

    def forecast(self, window) -> np.ndarray:
        window = np.asarray(window, dtype=np.float64)
        if window.ndim != 2:
            raise ValueError(f"window must be 2-D (L_in x C), got shape {window.shape}")
        return self.forecast_batch(window[None])[0]


@dataclass
class RecursiveForecaster:
    """Forecasts one time point per pass, feeding predictions back (T[1:] rule)."""

    cell: LstmParams
    w_out: np.ndarray  # (C x H)
    b_out: np.ndarray  # (C,)

    def __post_init__(self):
        c = self.cell.input_size
        if self.w_out.shape != (c, self.cell.hidden_size) or self.b_out.shape != (c,):
            raise ValueError(
                f"head shapes {self.w_out.shape}/{self.b_out.shape} do not match channels {c}")

    @property
    def channels(self) -> int:
        return self.cell.input_size

    @classmethod
    def init(cls, channels: int, hidden_size: int, rng: RngStream) -> "RecursiveForecaster":
        cell = LstmParams.init(channels, hidden_size, rng.derive("cell"))
        w_out = init_uniform(channels, hidden_size, rng.derive("head"))
        return cls(cell, w_out, np.zeros(channels))

    def params(self) -> dict[str, np.ndarray]:
        return {"cell.w_x": self.cell.w_x, "cell.w_h": self.cell.w_h,
                "cell.b": self.cell.b, "head.w": self.w_out, "head.b": self.b_out}

    def forecast_batch(self, windows: np.ndarray, steps: int) -> np.ndarray:
        if steps < 1:
            raise ValueError(f"steps must be >= 1, got {steps}")
        window = np.asarray(windows, dtype=np.float64)
        out = np.empty((window.shape[0], steps, self.channels))
        for k in range(steps):
            hidden, _ = lstm_forward(self.cell, window)
            y = hidden[:, -1] @ self.w_out.T + self.b_out
            out[:, k] = y
            window = np.concatenate([window[:, 1:], y[:, None, :]], axis=1)
        return out

    def forecast(self, window, steps: int) -> np.ndarray:
        window = np.asarray(window, dtype=np.float64)
        if window.ndim != 2:
            raise ValueError(f"window must be 2-D (L_in x C), got shape {window.shape}")
        return self.forecast_batch(window[None], steps)[0]


def forecast_stateless(model: StatelessForecaster, window) -> np.ndarray:
    """Run the stateless forecaster on one (L_in x C) window -> (horizon x C)."""
    return model.forecast(window)


def forecast_recursive(model: RecursiveForecaster, window, steps: int) -> np.ndarray:
    """Iterate one-step forecasts n times on one window -> (steps x C)."""
    return model.forecast(window, steps)


# --- training loss/gradients -------------------------------------------------


def stateless_loss_grads(model: StatelessForecaster, x: np.ndarray, y: np.ndarray,
                         want_grads: bool = True):
    """MSE of the block forecast against targets; exact gradients for all tensors."""
    b = x.shape[0]
    hidden, cache = lstm_forward(model.cell, x, want_cache=want_grads)
    h_last = hidden[:, -1]
    flat = h_last @ model.w_out.T + model.b_out
    diff = flat.reshape(y.shape) - y
    loss = float(np.mean(diff * diff))
    if not want_grads:
        return loss, None
    d_flat = (2.0 / diff.size) * diff.reshape(b, -1)
    g_w_out = d_flat.T @ h_last
    g_b_out = d_flat.sum(axis=0)
    cg = lstm_backward(cache, d_h_last=d_flat @ model.w_out)
    grads = {"cell.w_x": cg.w_x, "cell.w_h": cg.w_h, "cell.b": cg.b,
             "head.w": g_w_out, "head.b": g_b_out}
    return loss, grads


def recursive_loss_grads(model: RecursiveForecaster, x: np.ndarray, y: np.ndarray,
                         want_grads: bool = True):
    """Rollout loss: mean over steps of per-step MSE, own predictions fed back.

    Gradients flow through the feedback path: a prediction appended at pass k
    re-enters later passes as input, so its gradient accumulates both from its
    own MSE term and from BPTT input gradients of every later pass.
    """
    b, l_in, c = x.shape
    steps = y.shape[1]
    window = x
    caches = []
    h_lasts = []
    yhats = []
    for _ in range(steps):
        hidden, cache = lstm_forward(model.cell, window, want_cache=want_grads)
        h_last = hidden[:, -1]
        yhat = h_last @ model.w_out.T + model.b_out
        caches.append(cache)
        h_lasts.append(h_last)
        yhats.append(yhat)
        window = np.concatenate([window[:, 1:], yhat[:, None, :]], axis=1)
    diffs = [yhats[k] - y[:, k] for k in range(steps)]
    per_elem = steps * b * c
    loss = float(sum(np.sum(d * d) for d in diffs) / per_elem)
    if not want_grads:
        return loss, None

    d_yhat = [(2.0 / per_elem) * d for d in diffs]
    g_w_x = np.zeros_like(model.cell.w_x)
    g_w_h = np.zeros_like(model.cell.w_h)
    g_b = np.zeros_like(model.cell.b)
    g_w_out = np.zeros_like(model.w_out)
    g_b_out = np.zeros_like(model.b_out)
    for k in range(steps - 1, -1, -1):
        dy = d_yhat[k]
        g_w_out += dy.T @ h_lasts[k]
        g_b_out += dy.sum(axis=0)
        cg = lstm_backward(caches[k], d_h_last=dy @ model.w_out)
        g_w_x += cg.w_x
        g_w_h += cg.w_h
        g_b += cg.b
        # pass k consumed rows [k:l_in] of x followed by yhat_0..yhat_{k-1};
        # route input gradients back to the predictions that produced them
        for m in range(k):
            pos = l_in - k + m
            if pos >= 0:
                d_yhat[m] = d_yhat[m] + cg.inputs[:, pos]
    grads = {"cell.w_x": g_w_x, "cell.w_h": g_w_h, "cell.b": g_b,
             "head.w": g_w_out, "head.b": g_b_out}
    return loss, grads


# --- training loop and checkpoints --------------------------------------------


@dataclass
class TrainConfig:
    """Forecaster training hyperparameters (defaults follow the experiment setup)."""

    epochs: int = 500
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0
    hidden_size: int = 50
    normalize: bool = True  # provenance: windows came from z-scored series


@dataclass
class ForecasterCheckpoint:
    """Saved forecaster: mode, tensors, and full training provenance."""

    mode: str
    tensors: dict[str, np.ndarray]
    config: dict

    def build_model(self):
        c = int(self.config["channels"])
        h = int(self.config["hidden_size"])
        t = self.tensors
        cell = LstmParams(
            w_x=t["cell.w_x"].reshape(4 * h, c),
            w_h=t["cell.w_h"].reshape(4 * h, h),
            b=t["cell.b"].reshape(4 * h),
        )
        if self.mode == "stateless":
            horizon = int(self.config["horizon"])
            return StatelessForecaster(cell, t["head.w"].reshape(horizon * c, h),
                                       t["head.b"].reshape(horizon * c), horizon)
        if self.mode == "recursive":
            return RecursiveForecaster(cell, t["head.w"].reshape(c, h),
                                       t["head.b"].reshape(c))
        raise ValueError(f"checkpoint mode {self.mode!r} is not a forecaster")


def stack_windows(windows):
    """Stack WindowSamples into (X, Y, subject_ids) arrays."""
    if not windows:
        raise ValueError("empty window set")
    x = np.stack([w.input_block for w in windows])
    y = np.stack([w.target_block for w in windows])
    sids = [w.subject_id for w in windows]
    return x, y, sids


def _eval_mse(loss_fn, x: np.ndarray, y: np.ndarray, chunk: int = 4096) -> float:
    total = 0.0
    for start in range(0, x.shape[0], chunk):
        sl = slice(start, start + chunk)
        loss, _ = loss_fn(x[sl], y[sl], False)
        total += loss * (min(start + chunk, x.shape[0]) - start)
    return total / x.shape[0]


def train_forecaster(mode: str, train_windows, test_windows, config: TrainConfig):
    """Train a forecaster on window samples; returns (checkpoint, loss_log).

    ``loss_log`` is one (epoch, train_mse, test_mse) row per epoch. Train MSE
    is the epoch's average over batches; test MSE is a full forward pass.
    Train/test windows must come from disjoint subject sets (caller's split).
    """
    if mode not in ("stateless", "recursive"):
        raise ValueError(f"unknown forecaster mode {mode!r}")
    x_train, y_train, train_sids = stack_windows(train_windows)
    x_test, y_test, test_sids = stack_windows(test_windows)
    overlap = set(train_sids) & set(test_sids)
    if overlap:
        raise ValueError(f"train/test windows share subjects: {sorted(overlap)[:5]}")
    n, l_in, c = x_train.shape
    l_out = y_train.shape[1]

    rng = RngStream(config.seed, f"forecaster/{mode}")
    if mode == "stateless":
        model = StatelessForecaster.init(c, config.hidden_size, l_out, rng.derive("init"))
        loss_fn = lambda xb, yb, g=True: stateless_loss_grads(model, xb, yb, g)
    else:
        model = RecursiveForecaster.init(c, config.hidden_size, rng.derive("init"))
        loss_fn = lambda xb, yb, g=True: recursive_loss_grads(model, xb, yb, g)

    opt = AdamOptimizer(model.params(), lr=config.lr)
    shuffle = rng.derive("shuffle").generator()
    log = []
    for epoch in range(1, config.epochs + 1):
        perm = shuffle.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = perm[start:start + config.batch_size]
            loss, grads = loss_fn(x_train[idx], y_train[idx])
            if not np.isfinite(loss):
                raise TrainingDivergedError(epoch, f"training loss is {loss}")
            opt.step(grads)
            total += loss * idx.size
        train_mse = total / n
        test_mse = _eval_mse(loss_fn, x_test, y_test)
        if not np.isfinite(test_mse):
            raise TrainingDivergedError(epoch, f"test loss is {test_mse}")
        log.append((epoch, train_mse, test_mse))

    cfg = {
        "mode": mode,
        "channels": c,
        "hidden_size": config.hidden_size,
        "input_len": l_in,
        "horizon": l_out if mode == "stateless" else 1,
        "rollout": l_out,
        "epochs": config.epochs,
        "batch_size": config.batch_size,
        "lr": config.lr,
        "seed": config.seed,
        "normalize": config.normalize,
        "final_train_mse": log[-1][1] if log else None,
        "final_test_mse": log[-1][2] if log else None,
        "train_subjects": sorted(set(train_sids)),
        "test_subjects": sorted(set(test_sids)),
    }
    tensors = {name: arr.copy() for name, arr in model.params().items()}
    return ForecasterCheckpoint(mode, tensors, cfg), log


def save_checkpoint(ckpt: ForecasterCheckpoint, path) -> None:
    tsaf.save_tsaf(path, ckpt.mode, ckpt.config, ckpt.tensors)


def load_checkpoint(path) -> ForecasterCheckpoint:
    mode, config, tensors = tsaf.load_tsaf(path)
    if mode not in ("stateless", "recursive"):
        raise ValueError(f"{path}: checkpoint mode {mode!r} is not a forecaster")
    return ForecasterCheckpoint(mode, tensors, config)
