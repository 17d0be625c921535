"""Dual-input recurrent localizer: BiLSTM encoder, rectified second LSTM,
configuration embedding, and linear/softmax heads, trained with hand-written
backpropagation through time.

Everything is 64-bit numpy.  The forward pass precomputes the input
projections of a whole sequence in one matmul and keeps per-step gate caches,
so the recurrent loop touches only the hidden-to-hidden product; the backward
pass accumulates weight gradients over all steps with two stacked matmuls.
Gradients are exact (finite-difference checked in tests), and training is
bit-deterministic for a fixed seed and shard count.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from scipy.special import expit

from .errors import DataFormatError, NumericalError, ValidationError

CHECKPOINT_VERSION = 1
HIDDEN = 50       # BiLSTM units per direction, and second-layer units
EMBED_DIM = 20
PROB_FLOOR = 1e-12

# spawn-key namespaces for the training random streams
_KEY_INIT = (10, 0)
_KEY_SHUFFLE = (11, 0)


# ---------------------------------------------------------------------------
# parameters

@dataclass
class LSTMCellParams:
    """One cell's weights; the 4H axis stacks gates in i, f, g, o order."""

    wx: np.ndarray  # (d_in, 4H) input weights
    wh: np.ndarray  # (H, 4H) recurrent weights
    b: np.ndarray   # (4H,)

    @property
    def hidden(self):
        return self.wh.shape[0]


@dataclass
class ModelParams:
    bilstm_fw: LSTMCellParams
    bilstm_bw: LSTMCellParams
    lstm2: LSTMCellParams
    embed: np.ndarray         # (K, E)
    head_coord_w: np.ndarray  # (H2 + E, 2)
    head_coord_b: np.ndarray  # (2,)
    head_class_w: np.ndarray  # (H2 + E, K)
    head_class_b: np.ndarray  # (K,)

    @property
    def n_classes(self):
        return self.embed.shape[0]


@dataclass
class LossSpec:
    """Hybrid-loss settings: L2 coefficient and class count."""

    alpha: float
    n_classes: int

    def __post_init__(self):
        if self.alpha < 0:
            raise ValidationError(f"alpha must be >= 0, got {self.alpha}")


@dataclass
class LossBreakdown:
    coord: float
    xent: float
    reg: float

    @property
    def total(self):
        return self.coord + self.xent + self.reg


def _cell_entries(prefix, cell):
    return [(f"{prefix}.wx", cell.wx), (f"{prefix}.wh", cell.wh), (f"{prefix}.b", cell.b)]


def param_entries(theta: ModelParams):
    """(name, array) pairs in the canonical checkpoint order."""
    entries = []
    entries += _cell_entries("bilstm_fw", theta.bilstm_fw)
    entries += _cell_entries("bilstm_bw", theta.bilstm_bw)
    entries += _cell_entries("lstm2", theta.lstm2)
    entries += [
        ("embed", theta.embed),
        ("head_coord.w", theta.head_coord_w),
        ("head_coord.b", theta.head_coord_b),
        ("head_class.w", theta.head_class_w),
        ("head_class.b", theta.head_class_b),
    ]
    return entries


def param_arrays(theta: ModelParams):
    return [a for _, a in param_entries(theta)]


def clone_params(theta: ModelParams):
    def cc(cell):
        return LSTMCellParams(wx=cell.wx.copy(), wh=cell.wh.copy(), b=cell.b.copy())

    return ModelParams(
        bilstm_fw=cc(theta.bilstm_fw),
        bilstm_bw=cc(theta.bilstm_bw),
        lstm2=cc(theta.lstm2),
        embed=theta.embed.copy(),
        head_coord_w=theta.head_coord_w.copy(),
        head_coord_b=theta.head_coord_b.copy(),
        head_class_w=theta.head_class_w.copy(),
        head_class_b=theta.head_class_b.copy(),
    )


def zeros_like_params(theta: ModelParams):
    def zc(cell):
        return LSTMCellParams(
            wx=np.zeros_like(cell.wx), wh=np.zeros_like(cell.wh), b=np.zeros_like(cell.b)
        )

    return ModelParams(
        bilstm_fw=zc(theta.bilstm_fw),
        bilstm_bw=zc(theta.bilstm_bw),
        lstm2=zc(theta.lstm2),
        embed=np.zeros_like(theta.embed),
        head_coord_w=np.zeros_like(theta.head_coord_w),
        head_coord_b=np.zeros_like(theta.head_coord_b),
        head_class_w=np.zeros_like(theta.head_class_w),
        head_class_b=np.zeros_like(theta.head_class_b),
    )


def _init_cell(rng, d_in, h):
    sx = 1.0 / np.sqrt(d_in)
    sh = 1.0 / np.sqrt(h)
    b = np.zeros(4 * h)
    b[h : 2 * h] = 1.0  # forget-gate bias keeps early gradients alive
    return LSTMCellParams(
        wx=rng.uniform(-sx, sx, (d_in, 4 * h)),
        wh=rng.uniform(-sh, sh, (h, 4 * h)),
        b=b,
    )


def init_params(rng, d_in, n_classes, hidden=HIDDEN, hidden2=HIDDEN, embed_dim=EMBED_DIM):
    """Uniform(-1/sqrt(fan_in)) weights, zero biases, forget bias 1."""
    concat = hidden2 + embed_dim
    se = 1.0 / np.sqrt(embed_dim)
    sc = 1.0 / np.sqrt(concat)
    return ModelParams(
        bilstm_fw=_init_cell(rng, d_in, hidden),
        bilstm_bw=_init_cell(rng, d_in, hidden),
        lstm2=_init_cell(rng, 2 * hidden, hidden2),
        embed=rng.uniform(-se, se, (n_classes, embed_dim)),
        head_coord_w=rng.uniform(-sc, sc, (concat, 2)),
        head_coord_b=np.zeros(2),
        head_class_w=rng.uniform(-sc, sc, (concat, n_classes)),
        head_class_b=np.zeros(n_classes),
    )


# ---------------------------------------------------------------------------
# cells and layers

def _act(name, z):
    if name == "tanh":
        return np.tanh(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    raise ValidationError(f"unknown activation {name!r}")


def lstm_cell(x_t, h_prev, c_prev, weights: LSTMCellParams, activation="tanh"):
    """One step: gates i,f,o sigmoid; candidate and cell output use `activation`."""
    h = weights.hidden
    x_t = np.asarray(x_t, dtype=np.float64)
    if x_t.shape[-1] != weights.wx.shape[0]:
        raise ValidationError(
            f"input width {x_t.shape[-1]} != cell input size {weights.wx.shape[0]}"
        )
    z = x_t @ weights.wx + h_prev @ weights.wh + weights.b
    i = expit(z[..., :h])
    f = expit(z[..., h : 2 * h])
    g = _act(activation, z[..., 2 * h : 3 * h])
    o = expit(z[..., 3 * h :])
    c_t = f * c_prev + i * g
    h_t = o * _act(activation, c_t)
    return h_t, c_t


@dataclass
class _LayerCache:
    x: np.ndarray
    i: np.ndarray
    f: np.ndarray
    g: np.ndarray
    o: np.ndarray
    c: np.ndarray
    cact: np.ndarray
    h_prev: np.ndarray
    c_prev: np.ndarray
    h: np.ndarray
    activation: str


def _layer_forward(x, cell: LSTMCellParams, activation):
    """Full-sequence pass; input projection batched, loop only over h @ wh."""
    x = np.ascontiguousarray(x)
    B, F, d_in = x.shape
    H = cell.hidden
    z_in = (x.reshape(B * F, d_in) @ cell.wx).reshape(B, F, 4 * H) + cell.b
    gates = [np.empty((B, F, H)) for _ in range(6)]
    I, Fg, G, O, C, CACT = gates
    HPREV = np.empty((B, F, H))
    CPREV = np.empty((B, F, H))
    HS = np.empty((B, F, H))
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    for t in range(F):
        z = z_in[:, t] + h @ cell.wh
        i = expit(z[:, :H])
        f = expit(z[:, H : 2 * H])
        g = _act(activation, z[:, 2 * H : 3 * H])
        o = expit(z[:, 3 * H :])
        HPREV[:, t] = h
        CPREV[:, t] = c
        c = f * c + i * g
        cact = _act(activation, c)
        h = o * cact
        I[:, t], Fg[:, t], G[:, t], O[:, t] = i, f, g, o
        C[:, t], CACT[:, t], HS[:, t] = c, cact, h
    return _LayerCache(
        x=x, i=I, f=Fg, g=G, o=O, c=C, cact=CACT, h_prev=HPREV, c_prev=CPREV, h=HS,
        activation=activation,
    )


def _layer_backward(cell: LSTMCellParams, cache: _LayerCache, d_steps=None, d_final=None,
                    need_dx=True):
    """Exact BPTT for one layer; returns (dwx, dwh, db, dx)."""
    B, F, d_in = cache.x.shape
    H = cell.hidden
    tanh_act = cache.activation == "tanh"
    dh = np.zeros((B, H))
    dc = np.zeros((B, H))
    dz_all = np.empty((B, F, 4 * H))
    for t in range(F - 1, -1, -1):
        if d_steps is not None:
            dh = dh + d_steps[:, t]
        if d_final is not None and t == F - 1:
            dh = dh + d_final
        i, f, g, o = cache.i[:, t], cache.f[:, t], cache.g[:, t], cache.o[:, t]
        cact = cache.cact[:, t]
        do = dh * cact
        if tanh_act:
            dc = dc + dh * o * (1.0 - cact * cact)
        else:
            dc = dc + dh * o * (cache.c[:, t] > 0.0)
        di = dc * g
        df = dc * cache.c_prev[:, t]
        dg = dc * i
        dz = dz_all[:, t]
        dz[:, :H] = di * i * (1.0 - i)
        dz[:, H : 2 * H] = df * f * (1.0 - f)
        dz[:, 2 * H : 3 * H] = dg * (1.0 - g * g) if tanh_act else dg * (g > 0.0)
        dz[:, 3 * H :] = do * o * (1.0 - o)
        dh = dz @ cell.wh.T
        dc = dc * f
    flat = dz_all.reshape(B * F, 4 * H)
    dwx = cache.x.reshape(B * F, d_in).T @ flat
    dwh = cache.h_prev.reshape(B * F, H).T @ flat
    db = flat.sum(axis=0)
    dx = (flat @ cell.wx.T).reshape(B, F, d_in) if need_dx else None
    return dwx, dwh, db, dx


def bilstm_forward(seq, theta: ModelParams):
    """Per-step [h_fw; h_bw] states, shape (F, 2H) (or (B, F, 2H) batched)."""
    seq = np.asarray(seq, dtype=np.float64)
    single = seq.ndim == 2
    x = seq[None] if single else seq
    fw = _layer_forward(x, theta.bilstm_fw, "tanh")
    bw = _layer_forward(x[:, ::-1], theta.bilstm_bw, "tanh")
    out = np.concatenate([fw.h, bw.h[:, ::-1]], axis=2)
    return out[0] if single else out


def softmax(logits):
    z = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class _ForwardCache:
    fw: _LayerCache
    bw: _LayerCache
    l2: _LayerCache
    k_idx: np.ndarray
    cat: np.ndarray
    u_hat: np.ndarray
    probs: np.ndarray


def _forward_batch(x, k_idx, theta: ModelParams):
    B = x.shape[0]
    K = theta.n_classes
    if np.any(k_idx < 0) or np.any(k_idx >= K):
        raise ValidationError("configuration index out of range for the embedding table")
    fw = _layer_forward(x, theta.bilstm_fw, "tanh")
    bw = _layer_forward(x[:, ::-1], theta.bilstm_bw, "tanh")
    hcat = np.concatenate([fw.h, bw.h[:, ::-1]], axis=2)
    l2 = _layer_forward(hcat, theta.lstm2, "relu")
    h2 = l2.h[:, -1]
    cat = np.concatenate([h2, theta.embed[k_idx]], axis=1)
    u_hat = cat @ theta.head_coord_w + theta.head_coord_b
    probs = softmax(cat @ theta.head_class_w + theta.head_class_b)
    return _ForwardCache(fw=fw, bw=bw, l2=l2, k_idx=k_idx, cat=cat, u_hat=u_hat, probs=probs)


def model_forward(seq, k_index, theta: ModelParams):
    """Single-record forward: (u_hat (2,), class probabilities (K,))."""
    x = np.asarray(seq, dtype=np.float64)[None]
    cache = _forward_batch(x, np.array([k_index]), theta)
    return cache.u_hat[0], cache.probs[0]


# ---------------------------------------------------------------------------
# loss and gradients

def hybrid_loss(u_hat, probs, u_true, y_onehot, theta: ModelParams, spec: LossSpec):
    """Mean squared coordinate error + mean cross entropy + alpha * ||theta||^2."""
    u_hat = np.atleast_2d(u_hat)
    probs = np.atleast_2d(probs)
    u_true = np.atleast_2d(u_true)
    y_onehot = np.atleast_2d(y_onehot)
    n = u_hat.shape[0]
    if n == 0:
        raise ValidationError("empty batch")
    if probs.shape[1] != spec.n_classes:
        raise ValidationError(f"got {probs.shape[1]} classes, spec says {spec.n_classes}")
    coord = float(np.sum((u_true - u_hat) ** 2) / n)
    xent = float(-np.sum(y_onehot * np.log(np.maximum(probs, PROB_FLOOR))) / n)
    reg = float(spec.alpha * sum(np.sum(a * a) for a in param_arrays(theta)))
    return LossBreakdown(coord=coord, xent=xent, reg=reg)


def _backward_sums(x, k_idx, u_true, y_onehot, theta: ModelParams):
    """Gradients of the *summed* (not averaged) data terms, plus the cache."""
    cache = _forward_batch(x, k_idx, theta)
    B = x.shape[0]
    grads = zeros_like_params(theta)

    du = 2.0 * (cache.u_hat - u_true)                       # (B, 2)
    p = cache.probs
    gp = np.where(p > PROB_FLOOR, -y_onehot / np.maximum(p, PROB_FLOOR), 0.0)
    dlogits = p * (gp - np.sum(gp * p, axis=1, keepdims=True))

    grads.head_coord_w += cache.cat.T @ du
    grads.head_coord_b += du.sum(axis=0)
    grads.head_class_w += cache.cat.T @ dlogits
    grads.head_class_b += dlogits.sum(axis=0)

    dcat = du @ theta.head_coord_w.T + dlogits @ theta.head_class_w.T
    h2 = theta.lstm2.hidden
    np.add.at(grads.embed, k_idx, dcat[:, h2:])

    dwx, dwh, db, dhcat = _layer_backward(theta.lstm2, cache.l2, d_final=dcat[:, :h2])
    grads.lstm2.wx += dwx
    grads.lstm2.wh += dwh
    grads.lstm2.b += db

    H = theta.bilstm_fw.hidden
    dwx, dwh, db, _ = _layer_backward(
        theta.bilstm_fw, cache.fw, d_steps=dhcat[:, :, :H], need_dx=False
    )
    grads.bilstm_fw.wx += dwx
    grads.bilstm_fw.wh += dwh
    grads.bilstm_fw.b += db
    dwx, dwh, db, _ = _layer_backward(
        theta.bilstm_bw, cache.bw, d_steps=dhcat[:, ::-1, H:], need_dx=False
    )
    grads.bilstm_bw.wx += dwx
    grads.bilstm_bw.wh += dwh
    grads.bilstm_bw.b += db
    return grads, cache


def backward(x, k_idx, u_true, y_onehot, theta: ModelParams, spec: LossSpec,
             n_shards=1, pool=None):
    """Loss and exact gradients for one batch.

    n_shards > 1 splits the batch into contiguous shards whose gradients are
    reduced in shard order; the result depends only on n_shards, never on
    whether shards ran concurrently (pass a thread pool to overlap them).
    """
    B = x.shape[0]
    if B == 0:
        raise ValidationError("empty batch")
    n_shards = max(1, min(n_shards, B))
    bounds = [(s * B) // n_shards for s in range(n_shards + 1)]

    def run(s):
        lo, hi = bounds[s], bounds[s + 1]
        return _backward_sums(x[lo:hi], k_idx[lo:hi], u_true[lo:hi], y_onehot[lo:hi], theta)

    if pool is not None and n_shards > 1:
        results = list(pool.map(run, range(n_shards)))
    else:
        results = [run(s) for s in range(n_shards)]

    total = zeros_like_params(theta)
    u_hat = np.concatenate([c.u_hat for _, c in results], axis=0)
    probs = np.concatenate([c.probs for _, c in results], axis=0)
    for g, _ in results:
        for acc, part in zip(param_arrays(total), param_arrays(g)):
            acc += part
    inv_n = 1.0 / B
    for acc, th in zip(param_arrays(total), param_arrays(theta)):
        acc *= inv_n
        acc += (2.0 * spec.alpha) * th
    loss = hybrid_loss(u_hat, probs, u_true, y_onehot, theta, spec)
    return loss, total


# ---------------------------------------------------------------------------
# optimization

@dataclass
class OptimizerState:
    """Adam accumulators; one slot per parameter array, checkpoint order."""

    m: list
    v: list
    step: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, theta, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        arrays = param_arrays(theta) if isinstance(theta, ModelParams) else list(theta)
        return cls(
            m=[np.zeros_like(a) for a in arrays],
            v=[np.zeros_like(a) for a in arrays],
            lr=lr, beta1=beta1, beta2=beta2, eps=eps,
        )


def adam_arrays(arrays, grad_arrays, state: OptimizerState):
    """Bias-corrected Adam on a flat list of arrays; returns the new list."""
    for name_i, g in enumerate(grad_arrays):
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient in parameter group {name_i}")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new_arrays = []
    new_m = []
    new_v = []
    for a, g, m, v in zip(arrays, grad_arrays, state.m, state.v):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        step = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_arrays.append(a - step)
        new_m.append(m)
        new_v.append(v)
    new_state = OptimizerState(
        m=new_m, v=new_v, step=t, lr=state.lr, beta1=state.beta1, beta2=state.beta2,
        eps=state.eps,
    )
    return new_arrays, new_state


def _params_from_arrays(template: ModelParams, arrays):
    it = iter(arrays)

    def cell(c):
        return LSTMCellParams(wx=next(it), wh=next(it), b=next(it))

    return ModelParams(
        bilstm_fw=cell(template.bilstm_fw),
        bilstm_bw=cell(template.bilstm_bw),
        lstm2=cell(template.lstm2),
        embed=next(it),
        head_coord_w=next(it),
        head_coord_b=next(it),
        head_class_w=next(it),
        head_class_b=next(it),
    )


def adam_step(theta: ModelParams, grads: ModelParams, state: OptimizerState):
    """One Adam update on a full parameter set; pure (returns new objects)."""
    new_arrays, new_state = adam_arrays(param_arrays(theta), param_arrays(grads), state)
    return _params_from_arrays(theta, new_arrays), new_state


def clip_gradients(grad_arrays, max_norm):
    """Global-norm clip in place; returns the pre-clip norm."""
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grad_arrays))
    if max_norm is not None and total > max_norm and total > 0.0:
        scale = max_norm / total
        for g in grad_arrays:
            g *= scale
    return total


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 32
    lr: float = 1e-4
    alpha: float = 1e-4
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 5.0   # None disables clipping
    n_shards: int = 1
    hidden: int = HIDDEN
    hidden2: int = HIDDEN
    embed_dim: int = EMBED_DIM


@dataclass
class TrainResult:
    params: ModelParams       # best-validation snapshot
    val_loss: float
    best_epoch: int
    history: list             # (epoch, mean train loss, val loss) per epoch
    final_params: ModelParams


def _eval_loss(x, k_idx, u, y, theta, spec, chunk=256):
    """Dataset loss: data terms averaged over all rows, reg counted once."""
    n = x.shape[0]
    coord_sum = 0.0
    xent_sum = 0.0
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        cache = _forward_batch(x[lo:hi], k_idx[lo:hi], theta)
        coord_sum += float(np.sum((u[lo:hi] - cache.u_hat) ** 2))
        xent_sum += float(-np.sum(y[lo:hi] * np.log(np.maximum(cache.probs, PROB_FLOOR))))
    reg = float(spec.alpha * sum(np.sum(a * a) for a in param_arrays(theta)))
    return LossBreakdown(coord=coord_sum / n, xent=xent_sum / n, reg=reg)


def train(train_data, val_data, cfg: TrainConfig, theta0=None, workers=1):
    """Adam over shuffled minibatches; keeps the best-validation snapshot.

    train_data/val_data are (X, k_idx, U, Y) tuples as built by
    dataset.feature_tensor.  The checkpoint updates only on strict validation
    improvement, so ties keep the earlier epoch.
    """
    x_tr, k_tr, u_tr, y_tr = train_data
    x_va, k_va, u_va, y_va = val_data
    n = x_tr.shape[0]
    if n == 0 or x_va.shape[0] == 0:
        raise ValidationError("training and validation splits must be nonempty")
    d_in = x_tr.shape[2]
    n_classes = y_tr.shape[1]
    spec = LossSpec(alpha=cfg.alpha, n_classes=n_classes)

    if theta0 is None:
        init_rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=_KEY_INIT))
        theta0 = init_params(
            init_rng, d_in, n_classes,
            hidden=cfg.hidden, hidden2=cfg.hidden2, embed_dim=cfg.embed_dim,
        )
    theta = theta0
    state = OptimizerState.for_params(
        theta, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps
    )
    shuffle_rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=_KEY_SHUFFLE))

    best_val = _eval_loss(x_va, k_va, u_va, y_va, theta, spec).total
    best = clone_params(theta)
    best_epoch = 0
    history = []
    pool = ThreadPoolExecutor(max_workers=workers) if (workers > 1 and cfg.n_shards > 1) else None
    try:
        for epoch in range(1, cfg.epochs + 1):
            perm = shuffle_rng.permutation(n)
            batch_losses = []
            for lo in range(0, n, cfg.batch_size):
                sel = perm[lo : lo + cfg.batch_size]
                loss, grads = backward(
                    x_tr[sel], k_tr[sel], u_tr[sel], y_tr[sel], theta, spec,
                    n_shards=cfg.n_shards, pool=pool,
                )
                if not np.isfinite(loss.total):
                    raise NumericalError(
                        f"non-finite training loss at epoch {epoch}, batch {lo // cfg.batch_size}"
                    )
                clip_gradients(param_arrays(grads), cfg.clip_norm)
                theta, state = adam_step(theta, grads, state)
                batch_losses.append(loss.total)
            val_loss = _eval_loss(x_va, k_va, u_va, y_va, theta, spec).total
            if not np.isfinite(val_loss):
                raise NumericalError(f"non-finite validation loss after epoch {epoch}")
            history.append((epoch, float(np.mean(batch_losses)), val_loss))
            if val_loss < best_val:
                best_val = val_loss
                best = clone_params(theta)
                best_epoch = epoch
    finally:
        if pool is not None:
            pool.shutdown()
    return TrainResult(
        params=best, val_loss=best_val, best_epoch=best_epoch, history=history,
        final_params=theta,
    )


def grid_search(grid, train_data, val_data, base_cfg: TrainConfig, epochs=None, workers=1):
    """Train one model per override dict; rank by best validation loss.

    Ties keep the earlier grid point.  Returns (best overrides, best result,
    table of (overrides, val loss) rows).
    """
    if not grid:
        raise ValidationError("empty hyperparameter grid")
    table = []
    best = None
    for point in grid:
        cfg_kwargs = {**base_cfg.__dict__, **point}
        if epochs is not None:
            cfg_kwargs["epochs"] = epochs
        result = train(train_data, val_data, TrainConfig(**cfg_kwargs), workers=workers)
        table.append((dict(point), result.val_loss))
        if best is None or result.val_loss < best[2].val_loss:
            best = (dict(point), TrainConfig(**cfg_kwargs), result)
    return best[0], best[2], table


# ---------------------------------------------------------------------------
# checkpoints

def save_params(path, named_arrays, meta):
    """JSON header line + little-endian float64 parameter block."""
    header = dict(meta)
    header["version"] = CHECKPOINT_VERSION
    header["shapes"] = [[name, list(a.shape)] for name, a in named_arrays]
    blob = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in named_arrays)
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8"))
        fh.write(b"\n")
        fh.write(blob)


def load_params(path):
    """Inverse of save_params: (header dict, {name: array})."""
    with open(path, "rb") as fh:
        data = fh.read()
    nl = data.find(b"\n")
    if nl < 0:
        raise DataFormatError(1, "checkpoint has no header line")
    try:
        header = json.loads(data[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataFormatError(1, f"bad checkpoint header: {exc}") from None
    if header.get("version") != CHECKPOINT_VERSION:
        raise ValidationError(f"unsupported checkpoint version {header.get('version')!r}")
    blob = data[nl + 1 :]
    arrays = {}
    offset = 0
    for name, shape in header["shapes"]:
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(blob):
            raise DataFormatError(2, f"checkpoint truncated in parameter {name!r}")
        arrays[name] = np.frombuffer(blob[offset:end], dtype="<f8").reshape(shape).copy()
        offset = end
    if offset != len(blob):
        raise DataFormatError(2, f"checkpoint has {len(blob) - offset} trailing bytes")
    return header, arrays


def save_checkpoint(path, theta: ModelParams, meta):
    save_params(path, param_entries(theta), {**meta, "arch": "bilstm-dual"})


def load_checkpoint(path):
    header, arrays = load_params(path)
    if header.get("arch") != "bilstm-dual":
        raise ValidationError(f"not a recurrent-model checkpoint: arch={header.get('arch')!r}")

    def cell(prefix):
        return LSTMCellParams(
            wx=arrays[f"{prefix}.wx"], wh=arrays[f"{prefix}.wh"], b=arrays[f"{prefix}.b"]
        )

    theta = ModelParams(
        bilstm_fw=cell("bilstm_fw"),
        bilstm_bw=cell("bilstm_bw"),
        lstm2=cell("lstm2"),
        embed=arrays["embed"],
        head_coord_w=arrays["head_coord.w"],
        head_coord_b=arrays["head_coord.b"],
        head_class_w=arrays["head_class.w"],
        head_class_b=arrays["head_class.b"],
    )
    return theta, header
