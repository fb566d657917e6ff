"""Tiny per-cell MLP trained on sparse static/dynamic pseudo-labels.

Every linear layer carries a learnable Lipschitz bound ``softplus(c)``: rows
of the raw weight whose absolute sum exceeds the bound are rescaled onto it
before use. Hidden units are ReLU, the single output is a sigmoid, and all
arithmetic runs in float64.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .errors import NoSupervisionError
from .io import write_tensor

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
# initial Lipschitz bound relative to the largest initial row norm; leaves the
# clip inactive early on so the short schedule can move the output layer
INIT_HEADROOM = 10.0


def softplus(x):
    return np.logaddexp(0.0, x)


def _inv_softplus(y: float) -> float:
    return float(y + np.log(-np.expm1(-y)))


@dataclass
class Layer:
    W: np.ndarray  # (out, in)
    b: np.ndarray  # (out,)
    c: np.ndarray  # scalar, Lipschitz bound is softplus(c)

    def arrays(self) -> list[np.ndarray]:
        return [self.W, self.b, self.c]


@dataclass
class MlpParams:
    """Layers plus a fixed per-channel input standardisation (not trained)."""

    layers: list[Layer]
    input_mean: np.ndarray | None = None
    input_scale: np.ndarray | None = None

    @property
    def n_inputs(self) -> int:
        return self.layers[0].W.shape[1]

    def arrays(self) -> list[np.ndarray]:
        return [a for layer in self.layers for a in layer.arrays()]

    @classmethod
    def from_arrays(cls, arrays, input_mean=None, input_scale=None) -> "MlpParams":
        arrays = list(arrays)
        return cls([Layer(*arrays[i:i + 3]) for i in range(0, len(arrays), 3)],
                   input_mean, input_scale)

    def copy(self) -> "MlpParams":
        return MlpParams.from_arrays([a.copy() for a in self.arrays()],
                                     self.input_mean, self.input_scale)

    def standardise(self, x: np.ndarray) -> np.ndarray:
        if self.input_mean is None:
            return x
        return (x - self.input_mean) / self.input_scale

    def fit_input_scaling(self, features) -> None:
        """Per-channel mean and standard deviation over every cell given."""
        flat = np.concatenate([np.asarray(f, dtype=np.float64).reshape(-1, self.n_inputs)
                               for f in features])
        std = flat.std(axis=0)
        self.input_mean = flat.mean(axis=0)
        self.input_scale = np.where(std > 1e-12, std, 1.0)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def with_vector(self, vec: np.ndarray) -> "MlpParams":
        out, pos = [], 0
        for a in self.arrays():
            out.append(np.asarray(vec[pos:pos + a.size], dtype=np.float64).reshape(a.shape))
            pos += a.size
        return MlpParams.from_arrays(out, self.input_mean, self.input_scale)

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())


def init_params(n_inputs: int, hidden=(8,), seed=0) -> MlpParams:
    """Uniform fan-in initialisation; bounds start above each layer's own norm."""
    rng = np.random.default_rng(seed)
    sizes = [n_inputs, *hidden, 1]
    layers = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        W = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        b = rng.uniform(-bound, bound, size=fan_out)
        c = np.array(_inv_softplus(INIT_HEADROOM * np.abs(W).sum(axis=1).max()))
        layers.append(Layer(W, b, c))
    return MlpParams(layers)


def effective_weight(layer: Layer) -> np.ndarray:
    """Weight with each row's absolute sum clipped to ``softplus(c)``."""
    row = np.abs(layer.W).sum(axis=1)
    bound = softplus(layer.c)
    with np.errstate(divide="ignore"):
        scale = np.minimum(1.0, bound / row)
    return layer.W * scale[:, None]


def lipschitz_bound(params: MlpParams) -> float:
    return float(np.prod([softplus(layer.c) for layer in params.layers]))


def lipschitz_reg(params: MlpParams, weight: float = 1e-6) -> float:
    return weight * lipschitz_bound(params)


def _flatten_features(params: MlpParams, feat) -> tuple[np.ndarray, tuple]:
    feat = np.asarray(feat, dtype=np.float64)
    if feat.shape[-1] != params.n_inputs:
        raise ValueError(f"feature map has {feat.shape[-1]} channels, network expects {params.n_inputs}")
    return feat.reshape(-1, feat.shape[-1]), feat.shape[:-1]


def forward(params: MlpParams, feat) -> np.ndarray:
    """Per-cell probability of being dynamic, same leading shape as ``feat``."""
    x, lead = _flatten_features(params, feat)
    x = params.standardise(x)
    for i, layer in enumerate(params.layers):
        x = x @ effective_weight(layer).T + layer.b
        if i < len(params.layers) - 1:
            x = np.maximum(x, 0.0)
    return expit(x[:, 0]).reshape(lead)


# ---------------------------------------------------------------- loss

def gm_kernel(e, tau2: float = 0.01):
    """Geman-McClure ``e^2 / (e^2 + tau2)``: zero at 0, increasing, below 1."""
    e = np.asarray(e, dtype=np.float64)
    return e * e / (e * e + tau2)


def gm_kernel_grad(e, tau2: float = 0.01):
    e = np.asarray(e, dtype=np.float64)
    return 2.0 * e * tau2 / (e * e + tau2) ** 2


def _hinge_terms(pred, dynamic, static):
    e_dyn = np.maximum(dynamic - pred, 0.0)
    e_stat = np.maximum(pred - (1.0 - static), 0.0)
    return e_dyn, e_stat


def sup_loss(pred, dynamic, static, tau2: float = 0.01) -> tuple[float, bool]:
    """Robust hinge over labelled cells; returns ``(loss, supervised)``.

    ``dynamic`` and ``static`` are boolean masks on the same grid as ``pred``.
    The loss is the mean over dynamic-labelled cells and the mean over
    static-labelled cells, averaged over the classes present, so the usually
    much larger static set cannot swamp the dynamic one. Unlabelled cells
    contribute nothing.
    """
    pred = np.asarray(pred, dtype=np.float64)
    dynamic = np.asarray(dynamic, dtype=bool)
    static = np.asarray(static, dtype=bool)
    active = dynamic | static
    if not active.any():
        return 0.0, False
    dyn, stat = dynamic[active], static[active]
    e_dyn, e_stat = _hinge_terms(pred[active], dyn.astype(float), stat.astype(float))
    terms = gm_kernel(e_dyn, tau2) + gm_kernel(e_stat, tau2)
    return float(np.sum(_cell_weights(dyn, stat) * terms)), True


def _cell_weights(dynamic: np.ndarray, static: np.ndarray) -> np.ndarray:
    """Each label class present gets equal total weight, split evenly over its cells."""
    w = np.zeros(len(dynamic))
    classes = [c for c in (dynamic, static) if c.any()]
    for c in classes:
        w[c] = 1.0 / (len(classes) * c.sum())
    return w


@dataclass
class TrainingBatch:
    """Labelled cells of a set of frames, flattened with per-cell weights."""

    x: np.ndarray
    dynamic: np.ndarray
    static: np.ndarray
    weight: np.ndarray
    n_frames: int


def make_batch(features, static_cells, dynamic_cells) -> TrainingBatch:
    """Stack labelled cells, weighted so each frame contributes its ``sup_loss`` over ``T``."""
    if not features:
        raise NoSupervisionError("no frames to train on")
    T = len(features)
    xs, dyn, stat, w = [], [], [], []
    for feat, L, U in zip(features, static_cells, dynamic_cells):
        L = np.asarray(L, dtype=bool)
        U = np.asarray(U, dtype=bool)
        active = (L | U).reshape(-1)
        n = int(active.sum())
        if n == 0:
            continue
        f = np.asarray(feat, dtype=np.float64).reshape(-1, np.shape(feat)[-1])
        xs.append(f[active])
        dyn.append(U.reshape(-1)[active].astype(np.float64))
        stat.append(L.reshape(-1)[active].astype(np.float64))
        w.append(_cell_weights(U.reshape(-1)[active], L.reshape(-1)[active]) / T)
    if not xs:
        raise NoSupervisionError("no labelled cells in any training frame")
    return TrainingBatch(np.concatenate(xs), np.concatenate(dyn), np.concatenate(stat),
                         np.concatenate(w), T)


def loss_and_grad(params: MlpParams, batch: TrainingBatch, tau2: float = 0.01,
                  reg_weight: float = 1e-6) -> tuple[float, list[np.ndarray]]:
    """Total loss and its exact gradient, ordered like ``params.arrays()``."""
    layers = params.layers
    eff = [effective_weight(layer) for layer in layers]
    x = params.standardise(batch.x)
    acts, pre = [x], []
    h = x
    for i, (layer, W) in enumerate(zip(layers, eff)):
        z = h @ W.T + layer.b
        pre.append(z)
        h = np.maximum(z, 0.0) if i < len(layers) - 1 else z
        acts.append(h)
    p = expit(pre[-1][:, 0])
    e_dyn, e_stat = _hinge_terms(p, batch.dynamic, batch.static)
    loss = float(np.sum(batch.weight * (gm_kernel(e_dyn, tau2) + gm_kernel(e_stat, tau2))))
    bounds = np.array([softplus(layer.c) for layer in layers])
    loss += reg_weight * float(np.prod(bounds))

    dp = batch.weight * (-gm_kernel_grad(e_dyn, tau2) * (e_dyn > 0)
                         + gm_kernel_grad(e_stat, tau2) * (e_stat > 0))
    dz = (dp * p * (1.0 - p))[:, None]
    grads: list[list[np.ndarray]] = [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        layer, W = layers[i], eff[i]
        gW_eff = dz.T @ acts[i]
        gb = dz.sum(axis=0)
        if i > 0:
            dz = (dz @ W) * (pre[i - 1] > 0)
        # back through the row clipping W_eff = W * min(1, bound / rowsum)
        row = np.abs(layer.W).sum(axis=1)
        bound = bounds[i]
        clipped = bound < row
        scale = np.where(clipped, bound / np.where(row > 0, row, 1.0), 1.0)
        gW = gW_eff * scale[:, None]
        inner = np.sum(gW_eff * layer.W, axis=1)
        if clipped.any():
            gW[clipped] -= (inner[clipped] * bound / row[clipped] ** 2)[:, None] * np.sign(layer.W[clipped])
        sig_c = expit(layer.c)
        gc = np.sum(np.where(clipped, inner / np.where(row > 0, row, 1.0), 0.0)) * sig_c
        others = np.prod(np.delete(bounds, i))
        gc = gc + reg_weight * others * sig_c
        grads[i] = [gW, gb, np.asarray(gc, dtype=np.float64)]
    return loss, [g for layer_grads in grads for g in layer_grads]


# ---------------------------------------------------------------- training

@dataclass
class TrainState:
    params: MlpParams
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    seed: int = 0
    history: list[float] = field(default_factory=list)

    @classmethod
    def fresh(cls, params: MlpParams, seed: int = 0) -> "TrainState":
        zeros = [np.zeros_like(a) for a in params.arrays()]
        return cls(params, zeros, [z.copy() for z in zeros], 0, seed)

    def with_reset_moments(self) -> "TrainState":
        """Same parameters, zeroed Adam moments, for fine-tuning on new labels."""
        state = TrainState.fresh(self.params.copy(), self.seed)
        return state

    def copy(self) -> "TrainState":
        return TrainState(self.params.copy(), [a.copy() for a in self.m],
                          [a.copy() for a in self.v], self.step, self.seed, list(self.history))


def init_state(n_inputs: int, hidden=(8,), seed: int = 0) -> TrainState:
    return TrainState.fresh(init_params(n_inputs, hidden, seed), seed)


def adam_step(state: TrainState, grads, lr: float) -> None:
    b1, b2 = ADAM_BETAS
    state.step += 1
    t = state.step
    arrays = state.params.arrays()
    for a, g, m, v in zip(arrays, grads, state.m, state.v):
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        a -= lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


def _grid_labels(labels, grid_shape):
    """``(static, dynamic)`` boolean grids from pixel- or grid-level labels."""
    static, dynamic = (labels.static, labels.dynamic) if hasattr(labels, "static") else labels
    static = np.asarray(static, dtype=bool)
    dynamic = np.asarray(dynamic, dtype=bool)
    if static.shape != tuple(grid_shape):
        static, dynamic = labels_to_grid(static, dynamic, grid_shape)
    return static, dynamic


def train(state: TrainState, features, labels, cfg=None, *, epochs: int = 25,
          lr: float = 0.02, tau2: float = 0.01, reg_weight: float = 1e-6) -> TrainState:
    """Adam over the sequence: each epoch takes one step per labelled frame.

    ``features[t]`` is a ``(Hf, Wf, C)`` map. ``labels[t]`` is either an
    object with ``static``/``dynamic`` masks at frame resolution (reduced to
    the feature grid by majority vote) or a ``(static, dynamic)`` pair already
    on the grid. Values from ``cfg`` override the keyword defaults.

    Frames are visited in the given order and each step minimises that
    frame's ``sup_loss`` plus the Lipschitz term, so an epoch covers the mean
    objective over frames. Input standardisation is fitted on the first call
    and then kept, so fine-tuning sees the same input scaling. The state is
    updated in place; the loss before each step is appended to ``history``.
    """
    if cfg is not None:
        epochs, lr, tau2, reg_weight = cfg.epochs, cfg.lr, cfg.tau2, cfg.lipschitz_weight
    if len(features) != len(labels):
        raise ValueError(f"{len(features)} feature maps but {len(labels)} label sets")
    if not features:
        raise NoSupervisionError("no frames to train on")
    batches = []
    for f, lab in zip(features, labels):
        static, dynamic = _grid_labels(lab, np.shape(f)[:2])
        if (static | dynamic).any():
            batches.append(make_batch([f], [static], [dynamic]))
    if not batches:
        raise NoSupervisionError("no labelled cells in any training frame")
    if state.params.input_mean is None:
        state.params.fit_input_scaling(features)
    for _ in range(epochs):
        for batch in batches:
            loss, grads = loss_and_grad(state.params, batch, tau2, reg_weight)
            state.history.append(loss)
            adam_step(state, grads, lr)
            if not state.params.is_finite():
                raise FloatingPointError(f"non-finite parameters after step {state.step}")
    return state


def save_params(params: MlpParams, directory, stem: str = "mlp") -> None:
    """Dump each layer as ``{stem}_w{i}.npy`` and ``{stem}_b{i}.npy`` (bias with
    the Lipschitz scale appended) for inspection."""
    directory = Path(directory)
    for i, layer in enumerate(params.layers):
        write_tensor(effective_weight(layer).astype(np.float32), directory / f"{stem}_w{i}.npy")
        tail = np.append(layer.b, layer.c)[None, :].astype(np.float32)
        write_tensor(tail, directory / f"{stem}_b{i}.npy")


# ---------------------------------------------------------------- grids and masks

def cell_index(frame_size, grid_shape) -> np.ndarray:
    """Flat feature-cell index for every pixel (nearest-neighbour mapping)."""
    H, W = frame_size
    Hf, Wf = grid_shape
    rows = np.arange(H) * Hf // H
    cols = np.arange(W) * Wf // W
    return rows[:, None] * Wf + cols[None, :]


def labels_to_grid(static: np.ndarray, dynamic: np.ndarray, grid_shape):
    """Majority vote of static vs dynamic pixels per cell; ties stay unlabelled."""
    idx = cell_index(static.shape, grid_shape).ravel()
    n = grid_shape[0] * grid_shape[1]
    n_static = np.bincount(idx, weights=static.ravel().astype(float), minlength=n)
    n_dynamic = np.bincount(idx, weights=dynamic.ravel().astype(float), minlength=n)
    return ((n_static > n_dynamic).reshape(grid_shape),
            (n_dynamic > n_static).reshape(grid_shape))


def upsample_nearest(grid: np.ndarray, frame_size) -> np.ndarray:
    return np.asarray(grid).reshape(-1)[cell_index(frame_size, grid.shape[:2])]


def threshold_mask(prob: np.ndarray, frame_size) -> np.ndarray:
    """Dynamic where probability is strictly above 0.5, at frame resolution."""
    return upsample_nearest(np.asarray(prob) > 0.5, frame_size)


def predict_mask(params: MlpParams, feat, frame_size) -> np.ndarray:
    return threshold_mask(forward(params, feat), frame_size)
