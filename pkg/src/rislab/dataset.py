"""Supervised localization dataset: generation, splits, features, files.

A record pairs the BS->UE and BS->sensing channels of one (configuration,
object state, UE site) triple with its labels: the true UE coordinates and
the configuration class.  Generation is deterministic given the seed; every
random draw comes from a stream derived from (seed, purpose, index), so the
output never depends on scheduling.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .errors import DataFormatError, ValidationError
from .provenance import sha256_text
from .scene import RISConfig, SceneTemplate, SOState, sample_so_state, write_scene
from .simulate import EnclosureSolver

DATASET_VERSION = 1
STD_FLOOR = 1e-8

# spawn-key namespaces for the per-purpose random streams
_KEY_CONFIGS = (0, 0)
_KEY_SO = 0      # (_KEY_SO, 1 + group index)
_KEY_NOISE = 2   # (_KEY_NOISE, record index)


@dataclass
class DatasetRecord:
    h_ue: np.ndarray      # (F,) complex
    h_sense: np.ndarray   # (S_RIS, F) complex
    p: SOState
    k_index: int
    k_onehot: np.ndarray  # (K,) ints
    u: np.ndarray         # (2,) true UE coordinates

    def __post_init__(self):
        self.h_ue = np.asarray(self.h_ue, dtype=np.complex128)
        self.h_sense = np.asarray(self.h_sense, dtype=np.complex128)
        self.k_onehot = np.asarray(self.k_onehot, dtype=np.int64)
        self.u = np.asarray(self.u, dtype=np.float64)
        if not (np.all(np.isfinite(self.h_ue)) and np.all(np.isfinite(self.h_sense))):
            raise ValidationError("record contains non-finite channel values")
        nz = np.flatnonzero(self.k_onehot)
        if nz.size != 1 or nz[0] != self.k_index or self.k_onehot[nz[0]] != 1:
            raise ValidationError("k_onehot must be one-hot at k_index")


@dataclass
class Dataset:
    records: list
    configs: tuple        # K RISConfig words, index = k_index
    scene_hash: str
    seed: int
    n_points: int
    s_ris: int
    n_ris: int
    n_obj: int
    manifest_hash: str = ""
    scene_text: str = ""  # canonical scene serialization; sha256 = scene_hash

    @property
    def n_configs(self):
        return len(self.configs)


def one_hot(k_index, n_classes):
    if not 0 <= k_index < n_classes:
        raise ValidationError(f"class index {k_index} out of range [0, {n_classes})")
    v = np.zeros(n_classes, dtype=np.int64)
    v[k_index] = 1
    return v


def arg_of_onehot(v):
    v = np.asarray(v)
    nz = np.flatnonzero(v)
    if nz.size != 1 or v[nz[0]] != 1:
        raise ValidationError("not a one-hot vector")
    return int(nz[0])


def draw_configs(n_ris, n_configs, rng):
    """n_configs distinct random words; duplicates are rejection-sampled away."""
    if not 1 <= n_configs <= 2 ** n_ris:
        raise ValidationError(
            f"cannot draw {n_configs} distinct configurations from {2 ** n_ris} words"
        )
    seen = set()
    order = []
    while len(order) < n_configs:
        word = tuple(int(b) for b in rng.integers(0, 2, n_ris))
        if word not in seen:
            seen.add(word)
            order.append(RISConfig(word))
    return tuple(order)


def generate(tpl: SceneTemplate, n_configs, n_so_samples, seed, workers=1):
    """All (config, object state, UE site) triples as one deterministic set.

    Record order is config-major, then state, then site:
    index = (k_i * n_so_samples + so_i) * n_sites + site_i.
    """
    if n_so_samples < 1:
        raise ValidationError(f"n_so_samples must be >= 1, got {n_so_samples}")
    cfg_rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=_KEY_CONFIGS))
    configs = draw_configs(tpl.n_ris, n_configs, cfg_rng)

    solver = EnclosureSolver(tpl)
    sites = tpl.ue_sites
    n_sites = len(sites)
    n_groups = n_configs * n_so_samples
    records = [None] * (n_groups * n_sites)

    def run_group(gi):
        k_i, so_i = divmod(gi, n_so_samples)
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(_KEY_SO, 1 + gi)))
        p = sample_so_state(rng, tpl)
        h_ue, h_sense = solver.site_channels(configs[k_i], p)
        base = gi * n_sites
        for site_i in range(n_sites):
            records[base + site_i] = DatasetRecord(
                h_ue=h_ue[site_i],
                h_sense=h_sense[site_i],
                p=p,
                k_index=k_i,
                k_onehot=one_hot(k_i, n_configs),
                u=sites[site_i],
            )

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run_group, range(n_groups)))
    else:
        for gi in range(n_groups):
            run_group(gi)

    scene_text = write_scene(tpl)
    return Dataset(
        records=records,
        configs=configs,
        scene_hash=sha256_text(scene_text),
        seed=seed,
        n_points=tpl.grid.n_points,
        s_ris=tpl.s_ris,
        n_ris=tpl.n_ris,
        n_obj=tpl.n_obj,
        scene_text=scene_text,
    )


def split(ds: Dataset, seed):
    """Seeded shuffle, then test = 20% and the rest 80/20 into train/val.

    Sizes: test = floor(L/5); train = floor(0.8 * (L - test)); val = rest.
    (The two floors reproduce (64, 16, 20) at L=100 and (6, 2, 2) at L=10.)
    """
    L = len(ds.records)
    if L < 5:
        raise ValidationError(f"dataset too small to split: {L} records")
    perm = np.random.default_rng(seed).permutation(L)
    n_test = L // 5
    rem = L - n_test
    n_train = (4 * rem) // 5
    train = [ds.records[i] for i in perm[:n_train]]
    val = [ds.records[i] for i in perm[n_train:rem]]
    test = [ds.records[i] for i in perm[rem:]]
    return train, val, test


# ---------------------------------------------------------------------------
# features

@dataclass
class NormStats:
    """Per-feature standardization constants, fitted on the training split."""

    mean: np.ndarray
    std: np.ndarray

    def to_jsonable(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_jsonable(cls, obj):
        return cls(mean=np.array(obj["mean"]), std=np.array(obj["std"]))


def feature_width(s_ris, n_obj):
    return 2 + 2 * s_ris + n_obj


def raw_features(record: DatasetRecord):
    """Per-step features: [Re h_ue, Im h_ue, Re h_sense.., Im h_sense.., p..]."""
    F = record.h_ue.shape[0]
    cols = [record.h_ue.real, record.h_ue.imag]
    cols.extend(record.h_sense.real)
    cols.extend(record.h_sense.imag)
    steps = np.column_stack(cols)
    p = np.broadcast_to(np.array(record.p.t), (F, len(record.p.t)))
    return np.hstack([steps, p])


def fit_norm(train_records):
    """Mean/std over every step of every training record (std floored)."""
    if not train_records:
        raise ValidationError("cannot fit normalization on an empty split")
    stacked = np.concatenate([raw_features(r) for r in train_records], axis=0)
    mean = stacked.mean(axis=0)
    std = np.maximum(stacked.std(axis=0), STD_FLOOR)
    return NormStats(mean=mean, std=std)


def featurize(record: DatasetRecord, stats: NormStats):
    raw = raw_features(record)
    if raw.shape[1] != stats.mean.shape[0]:
        raise ValidationError(
            f"record width {raw.shape[1]} != normalization width {stats.mean.shape[0]}"
        )
    return (raw - stats.mean) / stats.std


def feature_tensor(records, stats: NormStats):
    """Stacked model inputs: (X, k_index, U, Y) arrays over a record list."""
    X = np.stack([featurize(r, stats) for r in records])
    k_idx = np.array([r.k_index for r in records], dtype=np.int64)
    U = np.stack([r.u for r in records])
    Y = np.stack([r.k_onehot for r in records]).astype(np.float64)
    return X, k_idx, U, Y


# ---------------------------------------------------------------------------
# noise

def add_noise(record: DatasetRecord, snr_db, rng):
    """Circular complex Gaussian noise at the requested per-record SNR."""
    if not (math.isfinite(snr_db) or snr_db == math.inf):
        raise ValidationError(f"snr_db must be finite or +inf, got {snr_db!r}")
    if snr_db == math.inf:
        return record
    n_samples = record.h_ue.size + record.h_sense.size
    sig_power = (
        np.sum(np.abs(record.h_ue) ** 2) + np.sum(np.abs(record.h_sense) ** 2)
    ) / n_samples
    sigma = math.sqrt(sig_power * 10.0 ** (-snr_db / 10.0) / 2.0)
    noise_ue = rng.standard_normal((record.h_ue.size, 2)) * sigma
    noise_se = rng.standard_normal(record.h_sense.shape + (2,)) * sigma
    return replace(
        record,
        h_ue=record.h_ue + noise_ue[:, 0] + 1j * noise_ue[:, 1],
        h_sense=record.h_sense + noise_se[..., 0] + 1j * noise_se[..., 1],
    )


def apply_noise(ds: Dataset, snr_db):
    """Noisy copy of every record, each under its own (seed, index) stream."""
    out = []
    for r_i, rec in enumerate(ds.records):
        rng = np.random.default_rng(np.random.SeedSequence(ds.seed, spawn_key=(_KEY_NOISE, r_i)))
        out.append(add_noise(rec, snr_db, rng))
    return replace(ds, records=out)


# ---------------------------------------------------------------------------
# serialization

def _complex_pairs(a):
    """Complex array -> nested [re, im] lists along the last axis."""
    stacked = np.stack([a.real, a.imag], axis=-1)
    return stacked.tolist()


def _pairs_complex(obj, shape, line_no, name):
    a = np.asarray(obj, dtype=np.float64)
    if a.shape != shape + (2,):
        raise DataFormatError(line_no, f"{name} has shape {a.shape}, expected {shape + (2,)}")
    return a[..., 0] + 1j * a[..., 1]


def save(ds: Dataset, path):
    header = {
        "version": DATASET_VERSION,
        "F": ds.n_points,
        "S_RIS": ds.s_ris,
        "N_RIS": ds.n_ris,
        "K": ds.n_configs,
        "n_obj": ds.n_obj,
        "seed": ds.seed,
        "scene_hash": ds.scene_hash,
        "configs": [k.to_string() for k in ds.configs],
        "manifest_hash": ds.manifest_hash,
        "scene": ds.scene_text,
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n")
        for rec in ds.records:
            line = {
                "h_ue": _complex_pairs(rec.h_ue),
                "h_sense": _complex_pairs(rec.h_sense),
                "p": list(rec.p.t),
                "k_index": rec.k_index,
                "k_onehot": rec.k_onehot.tolist(),
                "u": rec.u.tolist(),
            }
            fh.write(json.dumps(line, sort_keys=True, separators=(",", ":")) + "\n")


def load(path):
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DataFormatError(1, "empty dataset file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DataFormatError(1, f"bad header: {exc}") from None
    required = ("version", "F", "S_RIS", "N_RIS", "K", "n_obj", "seed", "scene_hash", "configs")
    missing = [k for k in required if k not in header]
    if missing:
        raise DataFormatError(1, f"header missing keys {missing}")
    if header["version"] != DATASET_VERSION:
        raise ValidationError(
            f"unsupported dataset version {header['version']} (expected {DATASET_VERSION})"
        )
    F, S, K = header["F"], header["S_RIS"], header["K"]
    configs = tuple(RISConfig.from_string(s) for s in header["configs"])
    if len(configs) != K:
        raise DataFormatError(1, f"header lists {len(configs)} configs, K={K}")
    if any(k.n_ris != header["N_RIS"] for k in configs):
        raise DataFormatError(1, "config word length != N_RIS")
    scene_text = header.get("scene", "")
    if scene_text and sha256_text(scene_text) != header["scene_hash"]:
        raise DataFormatError(1, "embedded scene does not match scene_hash")

    records = []
    for line_no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            raise DataFormatError(line_no, "blank record line")
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataFormatError(line_no, f"bad record: {exc}") from None
        try:
            h_ue = _pairs_complex(obj["h_ue"], (F,), line_no, "h_ue")
            h_sense = _pairs_complex(obj["h_sense"], (S, F), line_no, "h_sense")
            rec = DatasetRecord(
                h_ue=h_ue,
                h_sense=h_sense,
                p=SOState(tuple(obj["p"])),
                k_index=int(obj["k_index"]),
                k_onehot=np.array(obj["k_onehot"], dtype=np.int64),
                u=np.array(obj["u"], dtype=np.float64),
            )
        except KeyError as exc:
            raise DataFormatError(line_no, f"record missing field {exc}") from None
        except ValidationError as exc:
            raise DataFormatError(line_no, str(exc)) from None
        if rec.p.t and len(rec.p.t) != header["n_obj"]:
            raise DataFormatError(line_no, f"p has {len(rec.p.t)} entries, n_obj={header['n_obj']}")
        if rec.k_onehot.shape[0] != K:
            raise DataFormatError(line_no, f"k_onehot has {rec.k_onehot.shape[0]} entries, K={K}")
        records.append(rec)

    return Dataset(
        records=records,
        configs=configs,
        scene_hash=header["scene_hash"],
        seed=header["seed"],
        n_points=F,
        s_ris=S,
        n_ris=header["N_RIS"],
        n_obj=header["n_obj"],
        manifest_hash=header.get("manifest_hash", ""),
        scene_text=scene_text,
    )
