"""Localization metrics, the random-configuration baseline, and reporting.

The baseline is a small feedforward coordinate regressor trained on the same
splits and flattened features as the recurrent model, but with whatever
random configuration each record happened to carry -- no codebook, no
configuration input.  evaluate() replays every test instance down both
paths (random config vs codebook-optimized) and reduces the two
squared-error series into a summary row.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .codebook import Codebook, cell_center, estimate_so
from .dataset import DatasetRecord, NormStats, featurize, one_hot
from .errors import NumericalError, ValidationError
from .neural import (
    LossBreakdown,
    OptimizerState,
    _forward_batch,
    adam_arrays,
    clip_gradients,
    load_params,
    save_params,
)
from .scene import RISConfig, SceneTemplate
from .simulate import EnclosureSolver

# spawn-key namespaces for the baseline's random streams
_KEY_INIT = (20, 0)
_KEY_SHUFFLE = (21, 0)


def mse(predicted, true):
    """Mean squared localization error: (1/N) sum (dx^2 + dy^2)."""
    predicted = np.atleast_2d(np.asarray(predicted, dtype=np.float64))
    true = np.atleast_2d(np.asarray(true, dtype=np.float64))
    if predicted.shape != true.shape:
        raise ValidationError(f"length mismatch: {predicted.shape} vs {true.shape}")
    if predicted.shape[0] < 1:
        raise ValidationError("need at least one (prediction, truth) pair")
    return float(np.mean(np.sum((predicted - true) ** 2, axis=1)))


@dataclass
class ReportRow:
    n_ris: int
    k: int
    baseline_mse: float
    optimized_mse: float
    sigma: float
    pct_error_reduction: float

    def __post_init__(self):
        vals = (self.baseline_mse, self.optimized_mse, self.sigma, self.pct_error_reduction)
        if not all(np.isfinite(v) for v in vals):
            raise ValidationError("report row contains non-finite values")


def make_report_row(n_ris, k, se_random, se_optimized):
    se_random = np.asarray(se_random, dtype=np.float64)
    se_optimized = np.asarray(se_optimized, dtype=np.float64)
    baseline = float(np.mean(se_random))
    optimized = float(np.mean(se_optimized))
    pct = 100.0 * (baseline - optimized) / baseline if baseline > 0 else 0.0
    return ReportRow(
        n_ris=n_ris,
        k=k,
        baseline_mse=baseline,
        optimized_mse=optimized,
        sigma=float(np.std(se_optimized)),
        pct_error_reduction=pct,
    )


# ---------------------------------------------------------------------------
# random-configuration baseline: flat features -> 64 -> 64 -> coordinates

BASELINE_HIDDEN = 64


@dataclass
class BaselineParams:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray


def baseline_entries(theta: BaselineParams):
    return [
        ("w1", theta.w1), ("b1", theta.b1),
        ("w2", theta.w2), ("b2", theta.b2),
        ("w3", theta.w3), ("b3", theta.b3),
    ]


def _baseline_arrays(theta):
    return [a for _, a in baseline_entries(theta)]


def init_baseline(rng, d_in, hidden=BASELINE_HIDDEN):
    s1 = 1.0 / np.sqrt(d_in)
    s2 = 1.0 / np.sqrt(hidden)
    return BaselineParams(
        w1=rng.uniform(-s1, s1, (d_in, hidden)),
        b1=np.zeros(hidden),
        w2=rng.uniform(-s2, s2, (hidden, hidden)),
        b2=np.zeros(hidden),
        w3=rng.uniform(-s2, s2, (hidden, 2)),
        b3=np.zeros(2),
    )


def baseline_forward(x_flat, theta: BaselineParams):
    """Coordinates from flattened features; x_flat is (B, F*D) or (F*D,)."""
    x = np.atleast_2d(np.asarray(x_flat, dtype=np.float64))
    a1 = np.maximum(x @ theta.w1 + theta.b1, 0.0)
    a2 = np.maximum(a1 @ theta.w2 + theta.b2, 0.0)
    u = a2 @ theta.w3 + theta.b3
    return u if np.asarray(x_flat).ndim == 2 else u[0]


def _baseline_backward(x, u_true, theta: BaselineParams, alpha):
    n = x.shape[0]
    a1 = np.maximum(x @ theta.w1 + theta.b1, 0.0)
    a2 = np.maximum(a1 @ theta.w2 + theta.b2, 0.0)
    u_hat = a2 @ theta.w3 + theta.b3
    coord = float(np.sum((u_true - u_hat) ** 2) / n)
    reg = float(alpha * sum(np.sum(a * a) for a in _baseline_arrays(theta)))

    du = 2.0 * (u_hat - u_true) / n
    dw3 = a2.T @ du
    da2 = (du @ theta.w3.T) * (a2 > 0.0)
    dw2 = a1.T @ da2
    da1 = (da2 @ theta.w2.T) * (a1 > 0.0)
    dw1 = x.T @ da1
    grads = BaselineParams(
        w1=dw1 + 2.0 * alpha * theta.w1,
        b1=da1.sum(axis=0) + 2.0 * alpha * theta.b1,
        w2=dw2 + 2.0 * alpha * theta.w2,
        b2=da2.sum(axis=0) + 2.0 * alpha * theta.b2,
        w3=dw3 + 2.0 * alpha * theta.w3,
        b3=du.sum(axis=0) + 2.0 * alpha * theta.b3,
    )
    return LossBreakdown(coord=coord, xent=0.0, reg=reg), grads


def _baseline_val_loss(x, u, theta, alpha, chunk=1024):
    coord_sum = 0.0
    for lo in range(0, x.shape[0], chunk):
        u_hat = baseline_forward(x[lo : lo + chunk], theta)
        coord_sum += float(np.sum((u[lo : lo + chunk] - u_hat) ** 2))
    reg = float(alpha * sum(np.sum(a * a) for a in _baseline_arrays(theta)))
    return coord_sum / x.shape[0] + reg


@dataclass
class BaselineResult:
    params: BaselineParams
    val_loss: float
    best_epoch: int
    history: list
    final_params: BaselineParams


def train_baseline(train_data, val_data, cfg):
    """Same Adam recipe and strict-improvement checkpointing as the main model.

    train_data/val_data are (x_flat, u) tuples; cfg is a neural.TrainConfig.
    """
    x_tr, u_tr = train_data
    x_va, u_va = val_data
    n = x_tr.shape[0]
    if n == 0 or x_va.shape[0] == 0:
        raise ValidationError("training and validation splits must be nonempty")
    init_rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=_KEY_INIT))
    theta = init_baseline(init_rng, x_tr.shape[1])
    state = OptimizerState.for_params(
        _baseline_arrays(theta), lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps
    )
    shuffle_rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=_KEY_SHUFFLE))

    def snapshot(t):
        return BaselineParams(**{k: v.copy() for k, v in zip(
            ("w1", "b1", "w2", "b2", "w3", "b3"), _baseline_arrays(t))})

    best_val = _baseline_val_loss(x_va, u_va, theta, cfg.alpha)
    best = snapshot(theta)
    best_epoch = 0
    history = []
    for epoch in range(1, cfg.epochs + 1):
        perm = shuffle_rng.permutation(n)
        batch_losses = []
        for lo in range(0, n, cfg.batch_size):
            sel = perm[lo : lo + cfg.batch_size]
            loss, grads = _baseline_backward(x_tr[sel], u_tr[sel], theta, cfg.alpha)
            if not np.isfinite(loss.total):
                raise NumericalError(
                    f"non-finite baseline loss at epoch {epoch}, batch {lo // cfg.batch_size}"
                )
            garrays = _baseline_arrays(grads)
            clip_gradients(garrays, cfg.clip_norm)
            new_arrays, state = adam_arrays(_baseline_arrays(theta), garrays, state)
            theta = BaselineParams(*new_arrays)
            batch_losses.append(loss.total)
        val_loss = _baseline_val_loss(x_va, u_va, theta, cfg.alpha)
        history.append((epoch, float(np.mean(batch_losses)), val_loss))
        if val_loss < best_val:
            best_val = val_loss
            best = snapshot(theta)
            best_epoch = epoch
    return BaselineResult(
        params=best, val_loss=best_val, best_epoch=best_epoch, history=history,
        final_params=theta,
    )


def save_baseline(path, theta: BaselineParams, meta):
    save_params(path, baseline_entries(theta), {**meta, "arch": "mlp-baseline"})


def load_baseline(path):
    header, arrays = load_params(path)
    if header.get("arch") != "mlp-baseline":
        raise ValidationError(f"not a baseline checkpoint: arch={header.get('arch')!r}")
    theta = BaselineParams(**{name: arrays[name] for name in
                              ("w1", "b1", "w2", "b2", "w3", "b3")})
    return theta, header


# ---------------------------------------------------------------------------
# two-path evaluation

@dataclass
class EvalResult:
    se_random: np.ndarray
    se_optimized: np.ndarray
    row: ReportRow


def evaluate(test_records, theta, stats: NormStats, cb: Codebook, baseline: BaselineParams,
             tpl: SceneTemplate, solver=None):
    """Per-instance squared errors down the random and optimized paths.

    The random path localizes each record as measured (its own random
    configuration) with the baseline net.  The optimized path replays the
    closed loop statelessly: estimate the bucket from a UE-less sensing probe
    under the all-zeros configuration, apply the bucket's stored
    configuration, re-simulate the record's hidden (state, site) under it,
    and localize with the recurrent model's coordinate head.
    """
    if not test_records:
        raise ValidationError("empty test split")
    if solver is None:
        solver = EnclosureSolver(tpl)
    probe = RISConfig((0,) * tpl.n_ris)
    sites = tpl.ue_sites
    n_classes = theta.n_classes

    se_random = np.empty(len(test_records))
    se_optimized = np.empty(len(test_records))
    for idx, rec in enumerate(test_records):
        x_flat = featurize(rec, stats).ravel()
        u_base = baseline_forward(x_flat, baseline)
        se_random[idx] = float(np.sum((u_base - rec.u) ** 2))

        sensed = solver.sense_channels_cached(probe, rec.p)
        key, _dist = estimate_so(sensed, cb)
        entry = cb.entries[key]
        chosen = RISConfig(entry.bits)
        h_ue_all, h_sense_all = solver.record_channels(chosen, rec.p)
        site = int(np.argmin(np.sum((sites - rec.u) ** 2, axis=1)))
        opt_rec = DatasetRecord(
            h_ue=h_ue_all[site],
            h_sense=h_sense_all[site],
            p=cell_center(key, cb.resolution),
            k_index=entry.k_index,
            k_onehot=one_hot(entry.k_index, n_classes),
            u=rec.u,
        )
        x_opt = featurize(opt_rec, stats)
        u_opt = _forward_batch(x_opt[None], np.array([entry.k_index]), theta).u_hat[0]
        se_optimized[idx] = float(np.sum((u_opt - rec.u) ** 2))

    row = make_report_row(tpl.n_ris, n_classes, se_random, se_optimized)
    return EvalResult(se_random=se_random, se_optimized=se_optimized, row=row)


# ---------------------------------------------------------------------------
# reporting

SERIES_HEADER = ["test_index", "se_random", "se_optimized"]
SUMMARY_HEADER = ["n_ris", "k", "baseline_mse", "optimized_mse", "sigma", "pct_error_reduction"]


def report_csv(se_random, se_optimized, row: ReportRow, series_path, summary_path):
    """Per-index squared-error series plus the one-row aggregate summary."""
    if len(se_random) != len(se_optimized):
        raise ValidationError("squared-error series are not aligned")
    with open(series_path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SERIES_HEADER)
        for i, (a, b) in enumerate(zip(se_random, se_optimized)):
            w.writerow([i, repr(float(a)), repr(float(b))])
    with open(summary_path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_HEADER)
        w.writerow(summary_values(row))


def summary_values(row: ReportRow):
    return [
        row.n_ris,
        row.k,
        repr(row.baseline_mse),
        repr(row.optimized_mse),
        repr(row.sigma),
        repr(row.pct_error_reduction),
    ]


def load_summary(path):
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != SUMMARY_HEADER:
            raise ValidationError(f"{path}: unexpected summary header {header}")
        vals = next(reader, None)
        if vals is None:
            raise ValidationError(f"{path}: summary has no data row")
    return ReportRow(
        n_ris=int(vals[0]),
        k=int(vals[1]),
        baseline_mse=float(vals[2]),
        optimized_mse=float(vals[3]),
        sigma=float(vals[4]),
        pct_error_reduction=float(vals[5]),
    )


def render_table(rows):
    """Text table with one line per (N_RIS, K) setting."""
    headers = ["N_RIS", "K", "baseline MSE", "optimized MSE", "sigma", "% reduction"]
    cells = [
        [
            str(r.n_ris),
            str(r.k),
            f"{r.baseline_mse:.4f}",
            f"{r.optimized_mse:.4f}",
            f"{r.sigma:.4f}",
            f"{r.pct_error_reduction:.2f}",
        ]
        for r in rows
    ]
    widths = [max(len(h), *(len(c[i]) for c in cells)) if cells else len(h)
              for i, h in enumerate(headers)]
    out = io.StringIO()
    out.write("  ".join(h.rjust(w) for h, w in zip(headers, widths)) + "\n")
    out.write("  ".join("-" * w for w in widths) + "\n")
    for c in cells:
        out.write("  ".join(v.rjust(w) for v, w in zip(c, widths)) + "\n")
    return out.getvalue()
