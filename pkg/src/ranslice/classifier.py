"""Slice classification from per-UE KPI windows.

A window stacks ``T`` consecutive 17-KPI records of one UE. Windows in which
no application traffic moves are labelled ``ctrl``. A small convolutional
network (kernels along time, shared across features, then one hidden layer)
predicts the class; Idle Traffic Removal (ITR) drops all-idle windows before
they reach the model.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .agents import Adam
from .env import KPI_COLUMNS, EnvConfig, Gnb, emit_kpi_records, read_kpi_csv, write_kpi_csv
from .mdp import RbAllocation
from .traffic import SLICES, ArrivalArrays, TraceLibrary

log = logging.getLogger(__name__)

CLASSES = SLICES + ("ctrl",)
CTRL = CLASSES.index("ctrl")
N_FEATURES = len(KPI_COLUMNS)
WINDOW_SIZES = (4, 8, 16, 32, 64)
# traffic-volume features inspected by the idle rule and ITR
VOLUME_FEATURES = tuple(KPI_COLUMNS.index(c) for c in (
    "dl_n_samples", "tx_brate_downlink_Mbps", "tx_pkts_downlink",
    "ul_n_samples", "rx_brate_uplink_Mbps", "rx_pkts_uplink"))
_IDLE_FEATURES = tuple(KPI_COLUMNS.index(c) for c in (
    "dl_n_samples", "ul_n_samples", "tx_brate_downlink_Mbps", "rx_brate_uplink_Mbps"))


class ClassifierError(ValueError):
    pass


class Window(NamedTuple):
    x: np.ndarray      # (T, 17)
    label: int         # training label: source slice, or CTRL when idle
    source: int        # class that generated the stream
    trial: int = 0
    start: int = 0


def records_matrix(records: Sequence) -> np.ndarray:
    """``(N, 17)`` float64 KPI matrix from :class:`KpiRecord` rows (time order kept)."""
    return np.array([[getattr(r, c) for c in KPI_COLUMNS] for r in records], dtype=np.float64).reshape(-1, N_FEATURES)


def idle_periods(kpis: np.ndarray) -> np.ndarray:
    return np.all(kpis[:, list(_IDLE_FEATURES)] == 0, axis=1)


def build_windows(kpis: np.ndarray | Sequence, T: int, source: int, trial: int = 0) -> list[Window]:
    """Stride-1 sliding windows; ``N - T + 1`` of them, none when ``N < T``."""
    if T < 1:
        raise ClassifierError("T must be >= 1")
    if not isinstance(kpis, np.ndarray):
        kpis = records_matrix(kpis)
    n = kpis.shape[0]
    if n < T:
        return []
    views = sliding_window_view(kpis, T, axis=0).transpose(0, 2, 1)
    idle = sliding_window_view(idle_periods(kpis), T).all(axis=1)
    return [Window(views[i], CTRL if idle[i] else source, source, trial, i) for i in range(n - T + 1)]


def itr_filter(windows: Sequence[Window], idle_threshold: float = 0.0) -> list[Window]:
    """Drop windows whose traffic-volume features stay at or below the threshold throughout."""
    if idle_threshold < 0:
        raise ClassifierError("idle_threshold must be >= 0")
    cols = list(VOLUME_FEATURES)
    return [w for w in windows if not np.all(w.x[:, cols] <= idle_threshold)]


# --------------------------------------------------------------------------- normalization

@dataclass(frozen=True)
class NormStats:
    lo: np.ndarray
    hi: np.ndarray

    def apply(self, x: np.ndarray) -> np.ndarray:
        span = self.hi - self.lo
        safe = np.where(span > 0, span, 1.0)
        out = np.clip((x - self.lo) / safe, 0.0, 1.0)
        return np.where(span > 0, out, 0.0)


def fit_normalizer(windows: Sequence[Window] | np.ndarray) -> NormStats:
    X = stack(windows)[0] if not isinstance(windows, np.ndarray) else windows
    if X.size == 0:
        raise ClassifierError("cannot fit a normalizer on an empty set")
    flat = X.reshape(-1, X.shape[-1])
    return NormStats(flat.min(axis=0), flat.max(axis=0))


def apply_normalizer(stats: NormStats, window: Window) -> Window:
    return window._replace(x=stats.apply(window.x))


def stack(windows: Sequence[Window]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if not windows:
        return np.zeros((0, 0, N_FEATURES)), np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    return (np.stack([w.x for w in windows]).astype(np.float64),
            np.array([w.label for w in windows], dtype=np.int64),
            np.array([w.source for w in windows], dtype=np.int64))


# --------------------------------------------------------------------------- model

def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=1, keepdims=True))


class CnnModel:
    """Conv (``kernels`` x ``kernel_len`` x 1, ReLU) -> dense ``hidden`` (ReLU) -> log-softmax."""

    def __init__(self, T: int, kernels: int = 20, kernel_len: int = 4, hidden: int = 512,
                 n_classes: int = len(CLASSES), n_features: int = N_FEATURES, seed: int = 0,
                 dtype: str = "float64"):
        if T < kernel_len:
            raise ClassifierError(f"T={T} is shorter than the kernel ({kernel_len})")
        self.T, self.kernels, self.kernel_len = T, kernels, kernel_len
        self.hidden, self.n_classes, self.n_features = hidden, n_classes, n_features
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        n_flat = kernels * (T - kernel_len + 1) * n_features
        self.params = {
            "Wc": rng.normal(0.0, math.sqrt(2.0 / kernel_len), (kernels, kernel_len)),
            "bc": np.zeros(kernels),
            "W1": rng.normal(0.0, math.sqrt(2.0 / n_flat), (n_flat, hidden)),
            "b1": np.zeros(hidden),
            "W2": rng.normal(0.0, math.sqrt(1.0 / hidden), (hidden, n_classes)),
            "b2": np.zeros(n_classes),
        }
        self.params = {k: v.astype(self.dtype) for k, v in self.params.items()}
        self.norm: NormStats | None = None
        self.history: list[dict] = []
        self.lr: float | None = None
        self.optimizer: Adam | None = None

    def _check(self, X: np.ndarray) -> np.ndarray:
        if X.ndim == 2:
            X = X[None]
        if X.shape[1:] != (self.T, self.n_features):
            raise ClassifierError(f"expected windows of shape ({self.T}, {self.n_features}), got {X.shape[1:]}")
        return X.astype(self.dtype, copy=False)

    def forward(self, X: np.ndarray):
        X = self._check(X)
        p = self.params
        P = sliding_window_view(X, self.kernel_len, axis=1)            # (B, T', F, k)
        Z = np.einsum("btfk,ck->bctf", P, p["Wc"]) + p["bc"][None, :, None, None]
        A = np.maximum(Z, 0.0)
        flat = A.reshape(X.shape[0], -1)
        z1 = flat @ p["W1"] + p["b1"]
        h = np.maximum(z1, 0.0)
        logp = _log_softmax(h @ p["W2"] + p["b2"])
        return logp, (P, Z, flat, z1, h)

    def loss_and_grad(self, X: np.ndarray, y: np.ndarray) -> tuple[float, dict]:
        """Mean negative log-likelihood and its gradient."""
        logp, (P, Z, flat, z1, h) = self.forward(X)
        B = logp.shape[0]
        rows = np.arange(B)
        loss = float(-logp[rows, y].mean())
        d = np.exp(logp)
        y = np.asarray(y)
        d[rows, y] -= 1.0
        d /= B
        p = self.params
        dh = (d @ p["W2"].T) * (z1 > 0)
        dZ = (dh @ p["W1"].T).reshape(Z.shape) * (Z > 0)
        grads = {
            "W2": h.T @ d, "b2": d.sum(0),
            "W1": flat.T @ dh, "b1": dh.sum(0),
            "Wc": np.einsum("bctf,btfk->ck", dZ, P), "bc": dZ.sum(axis=(0, 2, 3)),
        }
        return loss, grads

    def log_proba(self, X: np.ndarray, batch: int = 512) -> np.ndarray:
        X = self._check(X)
        return np.concatenate([self.forward(X[i:i + batch])[0] for i in range(0, X.shape[0], batch)]) \
            if X.shape[0] else np.zeros((0, self.n_classes))

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.argmax(self.log_proba(X), axis=1)


def classify(model: CnnModel, window: Window | np.ndarray) -> tuple[str, np.ndarray, float]:
    """``(class name, log-probabilities, inference seconds)`` for one normalized window."""
    x = window.x if isinstance(window, Window) else window
    t0 = time.perf_counter()
    logp = model.forward(np.asarray(x, dtype=np.float64))[0][0]
    dt = time.perf_counter() - t0
    return CLASSES[int(np.argmax(logp))], logp, dt


# --------------------------------------------------------------------------- training

@dataclass
class CnnHyperparams:
    kernels: int = 20
    kernel_len: int = 4
    hidden: int = 512
    lr: float = 1e-3
    min_lr: float = 1e-5
    lr_factor: float = 0.1
    plateau_patience: int = 10
    plateau_delta: float = 1e-4
    early_stop_patience: int = 25
    max_epochs: int = 350
    batch_size: int = 64
    val_fraction: float = 0.1
    dtype: str = "float32"

    @classmethod
    def from_config(cls, cfg) -> "CnnHyperparams":
        return cls(**{k: getattr(cfg, k) for k in cls.__dataclass_fields__})


def train_cnn(windows: Sequence[Window], hp: CnnHyperparams | None = None, seed: int = 0,
              val_windows: Sequence[Window] | None = None) -> CnnModel:
    """Adam with reduce-on-plateau and early stopping; returns the best-validation weights.

    Windows must already be normalized. Without ``val_windows`` a
    ``val_fraction`` slice of the training windows is held back.
    """
    hp = hp or CnnHyperparams()
    X, y, _ = stack(windows)
    if len(set(y.tolist())) < 2:
        raise ClassifierError("training data must contain at least two classes")
    rng = np.random.default_rng(seed)
    if val_windows is not None:
        Xv, yv, _ = stack(val_windows)
    elif hp.val_fraction > 0 and X.shape[0] >= 10:
        perm = rng.permutation(X.shape[0])
        n_val = max(1, int(round(hp.val_fraction * X.shape[0])))
        Xv, yv = X[perm[:n_val]], y[perm[:n_val]]
        X, y = X[perm[n_val:]], y[perm[n_val:]]
    else:
        Xv, yv = X, y
    model = CnnModel(X.shape[1], hp.kernels, hp.kernel_len, hp.hidden, seed=int(rng.integers(2**31)),
                     dtype=hp.dtype)
    opt = Adam(model.params, hp.lr)
    best_loss, best_params = math.inf, {k: v.copy() for k, v in model.params.items()}
    plateau_best, since_plateau, since_best = math.inf, 0, 0
    for epoch in range(1, hp.max_epochs + 1):
        perm = rng.permutation(X.shape[0])
        total = 0.0
        for i in range(0, X.shape[0], hp.batch_size):
            b = perm[i:i + hp.batch_size]
            loss, grads = model.loss_and_grad(X[b], y[b])
            if not math.isfinite(loss):
                raise ClassifierError(f"non-finite training loss at epoch {epoch}")
            opt.step(model.params, grads)
            total += loss * b.size
        val_loss = _nll(model, Xv, yv)
        model.history.append({"epoch": epoch, "train_loss": total / X.shape[0], "val_loss": val_loss,
                              "lr": opt.lr})
        if val_loss < best_loss:
            best_loss, since_best = val_loss, 0
            best_params = {k: v.copy() for k, v in model.params.items()}
        else:
            since_best += 1
        if val_loss < plateau_best - hp.plateau_delta:
            plateau_best, since_plateau = val_loss, 0
        else:
            since_plateau += 1
            if since_plateau >= hp.plateau_patience and opt.lr > hp.min_lr:
                opt.lr = max(hp.min_lr, opt.lr * hp.lr_factor)
                since_plateau = 0
                log.debug("epoch %d: lr -> %g", epoch, opt.lr)
        if since_best >= hp.early_stop_patience:
            break
    model.params.update(best_params)
    model.lr, model.optimizer = opt.lr, opt
    return model


def _nll(model: CnnModel, X: np.ndarray, y: np.ndarray) -> float:
    logp = model.log_proba(X)
    return float(-logp[np.arange(len(y)), y].mean())


# --------------------------------------------------------------------------- evaluation

def evaluate(model: CnnModel, windows: Sequence[Window], with_itr: bool = False, idle_threshold: float = 0.0,
             truth: str = "source") -> dict:
    """Accuracy, per-class accuracy and confusion matrix (rows truth, columns prediction).

    ``truth="source"`` scores against the class that generated each stream;
    ``truth="label"`` against the idle-aware training label.
    """
    if with_itr:
        windows = itr_filter(windows, idle_threshold)
    if not windows:
        raise ClassifierError("no windows to evaluate")
    X, labels, sources = stack(windows)
    if model.norm is not None:
        X = model.norm.apply(X)
    y = sources if truth == "source" else labels
    pred = model.predict(X)
    return metrics(y, pred)


def metrics(y: np.ndarray, pred: np.ndarray, n_classes: int = len(CLASSES)) -> dict:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y), np.asarray(pred)), 1)
    per_class = {CLASSES[c]: (float(cm[c, c] / cm[c].sum()) if cm[c].sum() else None) for c in range(n_classes)}
    return {"accuracy": float(np.trace(cm) / cm.sum()), "per_class": per_class,
            "confusion": cm.tolist(), "n_windows": int(cm.sum())}


# --------------------------------------------------------------------------- model files

def save_model(model: CnnModel, path: str | Path) -> None:
    meta = {"T": model.T, "dtype": model.dtype.name, "kernels": model.kernels, "kernel_len": model.kernel_len,
            "hidden": model.hidden, "n_classes": model.n_classes, "n_features": model.n_features, "lr": model.lr,
            "history": model.history, "classes": list(CLASSES)}
    arrays = dict(model.params)
    if model.norm is not None:
        arrays["norm_lo"], arrays["norm_hi"] = model.norm.lo, model.norm.hi
    if model.optimizer is not None:
        arrays.update(model.optimizer.state_arrays())
        meta["adam_t"] = model.optimizer.t
    buf = io.BytesIO()
    np.savez(buf, meta=np.array(json.dumps(meta)), **arrays)
    Path(path).write_bytes(buf.getvalue())


def load_model(path: str | Path) -> CnnModel:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        m = CnnModel(meta["T"], meta["kernels"], meta["kernel_len"], meta["hidden"], meta["n_classes"],
                     meta["n_features"], dtype=meta["dtype"])
        m.params = {k: z[k].copy() for k in m.params}
        if "norm_lo" in z:
            m.norm = NormStats(z["norm_lo"].copy(), z["norm_hi"].copy())
        m.history, m.lr = meta["history"], meta["lr"]
        if "adam_t" in meta:
            opt = Adam(m.params, meta["lr"])
            opt.t = meta["adam_t"]
            opt.m = {k: z[f"adam_m_{k}"].copy() for k in m.params}
            opt.v = {k: z[f"adam_v_{k}"].copy() for k in m.params}
            m.optimizer = opt
    return m


# --------------------------------------------------------------------------- datasets

def simulate_ue_kpis(cls: int, seed: int, library: TraceLibrary, env: EnvConfig, rbs: Sequence[int],
                     n_periods: int) -> list:
    """KPI rows of a single UE of class ``cls`` (a zero-traffic UE for ``ctrl``)."""
    rng = np.random.default_rng(seed)
    if cls == CTRL:
        slice_idx = int(rng.integers(len(SLICES)))
        arrivals = ArrivalArrays.idle(n_periods)
    else:
        slice_idx = cls
        arrivals = library.draw(SLICES[cls], rng)
    ues = tuple([arrivals] if i == slice_idx else [] for i in range(len(SLICES)))
    ue_map = tuple([0] if i == slice_idx else [] for i in range(len(SLICES)))
    gnb = Gnb(ues, env)
    alloc = RbAllocation(*rbs).validate()
    rows = []
    for t in range(n_periods):
        rows.extend(emit_kpi_records(gnb.step(alloc, t), ue_map, env, rng))
    return rows


@dataclass
class Dataset:
    streams: list = field(default_factory=list)   # (name, class index, (N, 17) array)


def generate_dataset(trials_per_class: int, seed: int, library: TraceLibrary, env: EnvConfig,
                     rbs: Sequence[int] = (5, 6), n_periods: int = 480,
                     out_dir: str | Path | None = None) -> Dataset:
    """Simulated 2-minute single-UE trials per class; optionally written as a CSV manifest."""
    ds = Dataset()
    ss = np.random.SeedSequence(seed)
    for cls, child in enumerate(ss.spawn(len(CLASSES))):
        for i, s in enumerate(child.generate_state(trials_per_class)):
            rows = simulate_ue_kpis(cls, int(s), library, env, rbs, n_periods)
            name = f"{CLASSES[cls]}_{i:03d}.csv"
            ds.streams.append((name, cls, records_matrix(rows)))
            if out_dir is not None:
                Path(out_dir).mkdir(parents=True, exist_ok=True)
                write_kpi_csv(rows, Path(out_dir) / name)
    if out_dir is not None:
        with open(Path(out_dir) / "labels.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("file", "label"))
            w.writerows((name, CLASSES[cls]) for name, cls, _ in ds.streams)
    return ds


def load_dataset(directory: str | Path) -> Dataset:
    """Read a manifest directory: KPI CSVs plus ``labels.csv`` mapping file -> class.

    Files holding several UEs are split into one stream per ``ue_id``.
    """
    d = Path(directory)
    labels = d / "labels.csv"
    if not labels.exists():
        raise ClassifierError(f"{labels} not found")
    ds = Dataset()
    with open(labels, newline="") as fh:
        for row in csv.DictReader(fh):
            if row["label"] not in CLASSES:
                raise ClassifierError(f"{labels}: unknown label {row['label']!r}")
            recs = read_kpi_csv(d / row["file"])
            by_ue: dict[float, list] = {}
            for r in recs:
                by_ue.setdefault(r.ue_id, []).append(r)
            for ue, rs in sorted(by_ue.items()):
                rs.sort(key=lambda r: r.timestamp_ms)
                name = row["file"] if len(by_ue) == 1 else f"{row['file']}#ue{int(ue)}"
                ds.streams.append((name, CLASSES.index(row["label"]), records_matrix(rs)))
    return ds


def split_streams(ds: Dataset, test_fraction: float, seed: int) -> tuple[list, list]:
    """Per-class split at stream level so no window straddles train and test."""
    rng = np.random.default_rng(seed)
    train, test = [], []
    for cls in range(len(CLASSES)):
        idx = [i for i, s in enumerate(ds.streams) if s[1] == cls]
        if not idx:
            continue
        perm = rng.permutation(len(idx))
        n_test = min(len(idx) - 1, max(1, int(round(test_fraction * len(idx))))) if len(idx) > 1 else 0
        test += [ds.streams[idx[i]] for i in sorted(perm[:n_test])]
        train += [ds.streams[idx[i]] for i in sorted(perm[n_test:])]
    return train, test


def windows_of(streams: Sequence, T: int) -> list[Window]:
    out = []
    for trial, (_, cls, X) in enumerate(streams):
        out += build_windows(X, T, cls, trial)
    return out


def balance(windows: Sequence[Window], cap: int, seed: int) -> list[Window]:
    """Downsample every label to the smallest label count (and at most ``cap``)."""
    rng = np.random.default_rng(seed)
    by: dict[int, list[int]] = {}
    for i, w in enumerate(windows):
        by.setdefault(w.label, []).append(i)
    n = min(cap, min(len(v) for v in by.values()))
    keep = sorted(i for lab in sorted(by) for i in rng.choice(by[lab], size=n, replace=False).tolist())
    return [windows[i] for i in keep]


def train_for_window(train_streams: Sequence, T: int, hp: CnnHyperparams, cap: int, seed: int) -> CnnModel:
    """Windows -> balance -> fit normalizer -> train; the normalizer travels with the model."""
    ws = balance(windows_of(train_streams, T), cap, seed)
    norm = fit_normalizer(ws)
    model = train_cnn([apply_normalizer(norm, w) for w in ws], hp, seed)
    model.norm = norm
    return model


def inference_latency(model: CnnModel, windows: Sequence[Window], n: int = 50) -> dict:
    """Per-window :func:`classify` wall time over the first ``n`` windows, in milliseconds."""
    times = []
    for w in windows[:n]:
        x = model.norm.apply(w.x) if model.norm is not None else w.x
        times.append(classify(model, x)[2] * 1e3)
    return {"mean_ms": float(np.mean(times)), "max_ms": float(np.max(times)), "n": len(times)}


def evaluate_model(model: CnnModel, test_streams: Sequence, idle_threshold: float = 0.0) -> dict:
    """Test-split metrics without and with ITR, plus inference latency."""
    ws = windows_of(test_streams, model.T)
    return {"T": model.T, "no_itr": evaluate(model, ws), "itr": evaluate(model, ws, True, idle_threshold),
            "latency": inference_latency(model, ws), "epochs": len(model.history)}
