"""Offline-calibrated map from quantized object states to RIS configurations.

Calibration sweeps every bucket of the quantized state lattice: the bucket's
cell-center state is simulated under every candidate configuration, the
trained coordinate head localizes all evaluation UE sites, and the
configuration with the lowest localization MSE wins the bucket.  Each bucket
also stores a sensing fingerprint -- the UE-less BS->sensing response at the
cell center under the chosen configuration -- which the runtime matches by
nearest neighbor to estimate the current bucket from live measurements.

The closed loop then reads: sense under the previously applied configuration
(all-zeros initially) -> match fingerprints -> apply the bucket's stored
configuration -> localize with the recurrent model.
"""

from __future__ import annotations

import itertools
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .dataset import DatasetRecord, NormStats, featurize, one_hot
from .errors import DataFormatError, NumericalError, SolverError, ValidationError
from .neural import ModelParams, _forward_batch, model_forward
from .provenance import canonical_json, sha256_text
from .scene import RISConfig, SceneTemplate, SOState, write_scene
from .simulate import EnclosureSolver

CODEBOOK_VERSION = 1
DEFAULT_RESOLUTION = 8


@dataclass(frozen=True)
class CodebookEntry:
    k_index: int
    bits: tuple
    expected_mse: float


@dataclass
class Codebook:
    resolution: int
    n_ris: int
    scene_hash: str
    checkpoint_hash: str
    entries: dict          # bucket key (tuple) -> CodebookEntry
    fingerprints: list     # (bucket key, cell-center p, flat [Re, Im] signature)
    manifest_hash: str = ""

    def __post_init__(self):
        for key, entry in self.entries.items():
            if len(entry.bits) != self.n_ris:
                raise ValidationError(f"bucket {key}: config length != N_RIS={self.n_ris}")


def quantize_so(p: SOState, resolution):
    """Bucket key: per-object floor(t * resolution), clamped to the lattice."""
    if resolution < 1:
        raise ValidationError(f"resolution must be >= 1, got {resolution}")
    return tuple(min(int(t * resolution), resolution - 1) for t in p.t)


def cell_center(key, resolution):
    """The state at the middle of a bucket cell."""
    return SOState(tuple((k + 0.5) / resolution for k in key))


def bucket_lattice(n_obj, resolution):
    """All bucket keys in ascending (lexicographic) order."""
    return list(itertools.product(range(resolution), repeat=n_obj))


def _signature(h_sense):
    """Stacked [Re, Im] feature vector used for fingerprint matching."""
    h = np.asarray(h_sense)
    return np.concatenate([h.real.ravel(), h.imag.ravel()])


def _coord_mse(theta, stats, h_ue, h_sense, p_feat, k_index, sites):
    """Coordinate-head MSE over all eval sites for one simulated sweep."""
    n_classes = theta.n_classes
    records = [
        DatasetRecord(
            h_ue=h_ue[s],
            h_sense=h_sense[s],
            p=p_feat,
            k_index=k_index,
            k_onehot=one_hot(k_index, n_classes),
            u=sites[s],
        )
        for s in range(len(sites))
    ]
    x = np.stack([featurize(r, stats) for r in records])
    k_idx = np.full(len(sites), k_index, dtype=np.int64)
    u_hat = _forward_batch(x, k_idx, theta).u_hat
    return float(np.mean(np.sum((u_hat - sites) ** 2, axis=1)))


def calibrate(theta: ModelParams, stats: NormStats, tpl: SceneTemplate, configs,
              resolution, eval_sites=None, seed=0, solver=None, workers=1):
    """Pick the MSE-minimizing candidate configuration for every bucket.

    configs is the ordered candidate list (position = k_index).  Ties keep
    the lowest k_index; a solver failure at any bucket is a calibration gap
    and aborts with the full gap list.  seed is recorded by the caller's
    manifest; calibration itself draws no randomness.
    """
    if not configs:
        raise ValidationError("need at least one candidate configuration")
    if solver is None:
        solver = EnclosureSolver(tpl)
    sites = tpl.ue_sites
    if eval_sites is not None:
        sites = sites[np.asarray(eval_sites, dtype=np.int64)]
    keys = bucket_lattice(tpl.n_obj, resolution)

    def run_bucket(key):
        p_c = cell_center(key, resolution)
        prep = solver.prepare(p_c)
        best = None
        for k_index, config in enumerate(configs):
            h_ue, h_sense = solver.site_channels(config, p_c, prep)
            if eval_sites is not None:
                sel = np.asarray(eval_sites, dtype=np.int64)
                h_ue, h_sense = h_ue[sel], h_sense[sel]
            err = _coord_mse(theta, stats, h_ue, h_sense, p_c, k_index, sites)
            if best is None or err < best.expected_mse:
                best = CodebookEntry(k_index=k_index, bits=config.bits, expected_mse=err)
        sig = _signature(solver.sense_channels(RISConfig(best.bits), p_c, prep))
        return best, (key, p_c.t, sig)

    entries = {}
    fingerprints = []
    gaps = []
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda k: _try_bucket(run_bucket, k), keys))
    else:
        results = [_try_bucket(run_bucket, k) for k in keys]
    for key, outcome in zip(keys, results):
        if isinstance(outcome, SolverError):
            gaps.append((key, str(outcome)))
            continue
        entry, fp = outcome
        entries[key] = entry
        fingerprints.append(fp)
    if gaps:
        raise NumericalError(f"calibration gaps at buckets {[k for k, _ in gaps]}: {gaps[0][1]}")
    return Codebook(
        resolution=resolution,
        n_ris=tpl.n_ris,
        scene_hash=sha256_text(write_scene(tpl)),
        checkpoint_hash="",
        entries=entries,
        fingerprints=fingerprints,
    )


def _try_bucket(fn, key):
    try:
        return fn(key)
    except SolverError as exc:
        return exc


def estimate_so(h_sense, cb: Codebook):
    """Nearest fingerprint in stacked [Re, Im] Euclidean distance.

    Returns (bucket key, distance).  Fingerprints are stored in ascending
    bucket-key order, so exact ties resolve to the lowest key.
    """
    if not cb.fingerprints:
        raise ValidationError("codebook has no fingerprints")
    sig = _signature(h_sense)
    mat = np.stack([fp[2] for fp in cb.fingerprints])
    if sig.shape[0] != mat.shape[1]:
        raise ValidationError(
            f"sensed signature length {sig.shape[0]} != fingerprint length {mat.shape[1]}"
        )
    d = np.sqrt(np.sum((mat - sig) ** 2, axis=1))
    best = int(np.argmin(d))
    return cb.fingerprints[best][0], float(d[best])


def runtime_step(p: SOState, ue_site, cb: Codebook, theta: ModelParams, stats: NormStats,
                 tpl: SceneTemplate, solver=None, prev_config=None):
    """One closed-loop iteration against a hidden (object state, UE site).

    Sense (UE-less) under the previously applied configuration -- all-zeros
    on the first step -- estimate the bucket, apply its stored configuration,
    then localize from the channels measured under it.  Sensing under a
    bucket's own stored configuration at its cell center reproduces the
    fingerprint exactly.  Returns (chosen config, u_hat, diagnostics).
    """
    if solver is None:
        solver = EnclosureSolver(tpl)
    if prev_config is None:
        prev_config = RISConfig((0,) * tpl.n_ris)
    sensed = solver.sense_channels_cached(prev_config, p)
    key, dist = estimate_so(sensed, cb)
    entry = cb.entries.get(key)
    if entry is None:
        raise ValidationError(f"no codebook entry for bucket {key}")
    chosen = RISConfig(entry.bits)

    h_ue_all, h_sense_all = solver.record_channels(chosen, p)
    p_est = cell_center(key, cb.resolution)
    record = DatasetRecord(
        h_ue=h_ue_all[ue_site],
        h_sense=h_sense_all[ue_site],
        p=p_est,
        k_index=entry.k_index,
        k_onehot=one_hot(entry.k_index, theta.n_classes),
        u=tpl.ue_sites[ue_site],
    )
    u_hat, probs = model_forward(featurize(record, stats), entry.k_index, theta)
    diagnostics = {
        "bucket": key,
        "distance": dist,
        "k_index": entry.k_index,
        "probe": prev_config.to_string(),
        "class_prob": float(probs[entry.k_index]),
    }
    return chosen, u_hat, diagnostics


# ---------------------------------------------------------------------------
# serialization

def save_codebook(cb: Codebook, path):
    obj = {
        "version": CODEBOOK_VERSION,
        "resolution": cb.resolution,
        "n_ris": cb.n_ris,
        "scene_hash": cb.scene_hash,
        "checkpoint_hash": cb.checkpoint_hash,
        "manifest_hash": cb.manifest_hash,
        "entries": {
            ",".join(map(str, key)): {
                "k_index": e.k_index,
                "bits": "".join(map(str, e.bits)),
                "expected_mse": e.expected_mse,
            }
            for key, e in sorted(cb.entries.items())
        },
        "fingerprints": [
            {"key": list(key), "p": list(p), "sig": sig.tolist()}
            for key, p, sig in cb.fingerprints
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(canonical_json(obj) + "\n")


def load_codebook(path):
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DataFormatError(1, f"bad codebook file: {exc}") from None
    if obj.get("version") != CODEBOOK_VERSION:
        raise ValidationError(f"unsupported codebook version {obj.get('version')!r}")
    entries = {}
    for key_s, e in obj["entries"].items():
        key = tuple(int(t) for t in key_s.split(","))
        entries[key] = CodebookEntry(
            k_index=int(e["k_index"]),
            bits=tuple(int(c) for c in e["bits"]),
            expected_mse=float(e["expected_mse"]),
        )
    fingerprints = [
        (tuple(fp["key"]), tuple(fp["p"]), np.array(fp["sig"], dtype=np.float64))
        for fp in obj["fingerprints"]
    ]
    return Codebook(
        resolution=int(obj["resolution"]),
        n_ris=int(obj["n_ris"]),
        scene_hash=obj["scene_hash"],
        checkpoint_hash=obj["checkpoint_hash"],
        entries=entries,
        fingerprints=fingerprints,
        manifest_hash=obj.get("manifest_hash", ""),
    )
