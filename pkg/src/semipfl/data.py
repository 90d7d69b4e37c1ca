"""Dataset preparation: windowing, normalization, balancing, per-user splits,
CSV ingestion and a synthetic heterogeneous-user generator."""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ParameterError, ParseError, SchemaError


@dataclass
class LabeledSeries:
    """One recording: ``values`` is (S, N), ``labels`` holds one class per timestep."""

    user: int
    trial: int
    values: np.ndarray
    labels: np.ndarray | None = None
    timestamps: np.ndarray | None = None

    @property
    def n_sensors(self) -> int:
        return self.values.shape[0]

    def __len__(self) -> int:
        return self.values.shape[1]


@dataclass
class WindowedDataset:
    windows: np.ndarray  # (n, S, W)
    labels: np.ndarray | None = None

    def __post_init__(self):
        if self.windows.ndim != 3:
            raise ParameterError(f"windows must be (n, S, W), got {self.windows.shape}")
        if self.labels is not None and len(self.labels) != len(self.windows):
            raise ParameterError("label count differs from window count")

    def __len__(self) -> int:
        return self.windows.shape[0]

    @property
    def n_sensors(self) -> int:
        return self.windows.shape[1]

    @property
    def width(self) -> int:
        return self.windows.shape[2]

    def flat(self) -> np.ndarray:
        """(n, S*W) rows, channel-major."""
        return self.windows.reshape(len(self), self.n_sensors * self.width)

    def subset(self, idx) -> "WindowedDataset":
        idx = np.asarray(idx, dtype=np.int64)
        labels = None if self.labels is None else self.labels[idx]
        return WindowedDataset(self.windows[idx], labels)

    def unlabeled(self) -> "WindowedDataset":
        return WindowedDataset(self.windows, None)

    @classmethod
    def empty(cls, n_sensors: int, width: int, labeled: bool = True, dtype=np.float32):
        labels = np.zeros(0, dtype=np.int64) if labeled else None
        return cls(np.zeros((0, n_sensors, width), dtype=dtype), labels)

    @classmethod
    def concat(cls, parts: list["WindowedDataset"]) -> "WindowedDataset":
        windows = np.concatenate([p.windows for p in parts])
        if all(p.labels is not None for p in parts):
            return cls(windows, np.concatenate([p.labels for p in parts]))
        return cls(windows, None)


def window(values: np.ndarray, width: int, stride: int | None = None,
           labels: np.ndarray | None = None) -> WindowedDataset:
    """Cut an (S, N) series into (S, width) windows.

    A window's label is the majority of its per-timestep labels, ties going to the
    lowest class index.
    """
    stride = stride or width
    if width < 1 or stride < 1:
        raise ParameterError("window width and stride must be positive")
    n = values.shape[1]
    if n < width:
        raise ParameterError(f"series of length {n} is shorter than the window width {width}")
    starts = np.arange(0, n - width + 1, stride)
    idx = starts[:, None] + np.arange(width)[None, :]
    windows = np.ascontiguousarray(values[:, idx].transpose(1, 0, 2))
    win_labels = None
    if labels is not None:
        labels = np.asarray(labels, dtype=np.int64)
        n_classes = int(labels.max()) + 1
        win_labels = np.array([np.bincount(labels[i], minlength=n_classes).argmax() for i in idx],
                              dtype=np.int64)
    return WindowedDataset(windows, win_labels)


@dataclass
class NormStats:
    mean: np.ndarray  # (S,)
    std: np.ndarray  # (S,)
    clamped: np.ndarray  # (S,) bool, channels whose zero std was replaced by 1


def fit_normalizer(ds: WindowedDataset) -> NormStats:
    if len(ds) < 2:
        raise ParameterError("need at least two samples to estimate normalization statistics")
    x = ds.windows.astype(np.float64)
    mean = x.mean(axis=(0, 2))
    std = x.std(axis=(0, 2))
    clamped = std <= 1e-12
    std = np.where(clamped, 1.0, std)
    return NormStats(mean, std, clamped)


def apply_normalizer(ds: WindowedDataset, stats: NormStats) -> WindowedDataset:
    x = (ds.windows - stats.mean[None, :, None]) / stats.std[None, :, None]
    # constant channels are left as they are
    x = np.where(stats.clamped[None, :, None], ds.windows, x)
    return WindowedDataset(x.astype(ds.windows.dtype), ds.labels)


def normalize(ds: WindowedDataset, stats: NormStats | None = None):
    """Per-channel z-score. Pass ``stats`` fitted on training data to transform held-out data."""
    if stats is None:
        stats = fit_normalizer(ds)
    return apply_normalizer(ds, stats), stats


def balance(ds: WindowedDataset, rng: np.random.Generator,
            n_classes: int | None = None) -> WindowedDataset:
    """Randomly undersample every class to the minority count."""
    if ds.labels is None:
        raise ParameterError("balancing needs labels")
    n_classes = n_classes or (int(ds.labels.max()) + 1 if len(ds) else 0)
    counts = np.bincount(ds.labels, minlength=n_classes)
    if n_classes == 0 or (counts == 0).any():
        missing = [c for c in range(n_classes) if counts[c] == 0]
        raise ParameterError(f"classes with no samples: {missing}")
    target = counts.min()
    keep = []
    for c in range(n_classes):
        idx = np.flatnonzero(ds.labels == c)
        keep.append(rng.choice(idx, size=target, replace=False) if len(idx) > target else idx)
    return ds.subset(np.sort(np.concatenate(keep)))


@dataclass
class UserSplit:
    labeled: WindowedDataset  # D_j
    unlabeled: WindowedDataset  # U_j, labels stripped
    evaluation: WindowedDataset  # E_j


def split(ds: WindowedDataset, rng: np.random.Generator, per_class: int,
          eval_frac: float = 0.30, labeled_frac: float = 0.20,
          n_classes: int | None = None) -> UserSplit:
    """Stratified evaluation split, then ``per_class`` labeled samples per class drawn
    from the labeled pool (``labeled_frac`` of the remainder). Everything else that is
    not evaluation data becomes unlabeled."""
    if ds.labels is None:
        raise ParameterError("splitting needs labels")
    if per_class < 0:
        raise ParameterError("labeled count per class must be non-negative")
    n_classes = n_classes or int(ds.labels.max()) + 1
    eval_idx, labeled_idx, unlabeled_idx = [], [], []
    for c in range(n_classes):
        idx = rng.permutation(np.flatnonzero(ds.labels == c))
        n_eval = int(round(eval_frac * len(idx)))
        rest = idx[n_eval:]
        pool = int(round(labeled_frac * len(rest)))
        if per_class > pool:
            raise ParameterError(
                f"class {c}: labeled pool holds {pool} samples, {per_class} requested")
        eval_idx.append(idx[:n_eval])
        labeled_idx.append(rest[:per_class])
        unlabeled_idx.append(rest[per_class:])
    cat = lambda parts: np.sort(np.concatenate(parts)).astype(np.int64)
    return UserSplit(ds.subset(cat(labeled_idx)), ds.subset(cat(unlabeled_idx)).unlabeled(),
                     ds.subset(cat(eval_idx)))


# --- synthetic generator ------------------------------------------------------------

@dataclass
class SyntheticSpec:
    """Desk-scale stand-in for the real HAR corpora.

    Class ``c`` is the base movement pattern seen at orientation ``2*pi*c/C`` in each
    sensor-channel pair. Users belong to ``n_groups`` orientation groups spaced
    ``rotation`` radians apart; a user's own angle adds uniform ``jitter``. With
    ``rotation = 2*pi/C`` the same raw window means different classes in different
    groups, which a single global model cannot resolve.

    Rotations keep every group inside the same signal subspace, so an autoencoder
    could not tell groups apart. Each group therefore also carries a ``signature``:
    ``signature_rank`` random S x W patterns mixed in with per-window N(0, signature^2)
    coefficients. Server distribution ``m`` shares the signature of group ``m % g``.
    """

    n_users: int = 10
    n_classes: int = 4
    n_sensors: int = 6
    window: int = 30
    n_server: int = 3
    n_groups: int | None = None
    rotation: float = math.pi / 2
    jitter: float = 0.1
    shift: float = 0.0
    separation: float = 1.0
    noise: float = 0.2
    signature: float = 0.4
    signature_rank: int = 2
    samples_per_user: int = 1200
    samples_per_server: int = 400

    def validate(self) -> list[str]:
        errors = []
        if self.n_classes < 2:
            errors.append("n_classes: must be at least 2")
        if self.separation <= 0:
            errors.append("separation: must be positive")
        if self.noise < 0:
            errors.append("noise: must be non-negative")
        if self.signature < 0:
            errors.append("signature: must be non-negative")
        for name in ("n_users", "signature_rank", "n_sensors", "window", "n_server", "samples_per_user",
                     "samples_per_server"):
            if getattr(self, name) < 1:
                errors.append(f"{name}: must be at least 1")
        if self.n_groups is not None and self.n_groups < 1:
            errors.append("n_groups: must be at least 1")
        return errors

    @property
    def groups(self) -> int:
        return self.n_groups or self.n_server


@dataclass
class SyntheticData:
    users: list[LabeledSeries]
    server: list[LabeledSeries]
    user_angles: np.ndarray
    server_angles: np.ndarray
    prototypes: np.ndarray  # (C, S, W), before any user transform
    user_shifts: np.ndarray = field(default=None)
    server_shifts: np.ndarray = field(default=None)
    signatures: np.ndarray = field(default=None)  # (groups, rank, S, W)


def rotate_channels(x: np.ndarray, angle: float) -> np.ndarray:
    """Rotate consecutive channel pairs (0,1), (2,3), ... of an (..., S, W) array."""
    out = np.array(x, dtype=np.float64, copy=True)
    c, s = math.cos(angle), math.sin(angle)
    for a in range(0, x.shape[-2] - 1, 2):
        u, v = x[..., a, :], x[..., a + 1, :]
        out[..., a, :] = c * u - s * v
        out[..., a + 1, :] = s * u + c * v
    return out


def class_prototypes(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    base = rng.normal(0.0, 1.0, (spec.n_sensors, spec.window))
    base *= spec.separation / np.sqrt(np.mean(base ** 2))
    return np.stack([rotate_channels(base, 2 * math.pi * c / spec.n_classes)
                     for c in range(spec.n_classes)])


def _entity_series(spec, prototypes, angle, shift, signature, n_samples, rng, user, trial=0):
    labels = np.resize(np.arange(spec.n_classes), n_samples)
    rng.shuffle(labels)
    clean = prototypes[labels]
    noisy = clean + rng.normal(0.0, spec.noise, clean.shape) if spec.noise > 0 else clean
    windows = rotate_channels(noisy, angle) + shift[None, :, None]
    if spec.signature > 0:
        coef = rng.normal(0.0, spec.signature, (n_samples, len(signature)))
        windows += np.einsum("nr,rsw->nsw", coef, signature)
    values = windows.transpose(1, 0, 2).reshape(spec.n_sensors, -1).astype(np.float32)
    return LabeledSeries(user, trial, values, np.repeat(labels, spec.window).astype(np.int64))


def generate_synthetic(spec: SyntheticSpec, rng: np.random.Generator) -> SyntheticData:
    errors = spec.validate()
    if errors:
        raise ParameterError("; ".join(errors))
    prototypes = class_prototypes(spec, rng)
    g = spec.groups
    signatures = rng.normal(0.0, 1.0, (g, spec.signature_rank, spec.n_sensors, spec.window))
    signatures /= np.sqrt(np.mean(signatures ** 2, axis=(2, 3), keepdims=True))
    user_angles = np.array([(u % g) * spec.rotation for u in range(spec.n_users)], dtype=np.float64)
    user_angles += rng.uniform(-spec.jitter, spec.jitter, spec.n_users) if spec.jitter > 0 else 0.0
    server_angles = np.array([(m % g) * spec.rotation for m in range(spec.n_server)], dtype=np.float64)
    if spec.jitter > 0:
        server_angles += rng.uniform(-spec.jitter, spec.jitter, spec.n_server)
    else:
        # keep server transforms distinct from every user transform
        server_angles += spec.rotation / (2 * g) if spec.rotation else 1e-3
    user_shifts = spec.shift * rng.normal(0.0, 1.0, (spec.n_users, spec.n_sensors))
    server_shifts = spec.shift * rng.normal(0.0, 1.0, (spec.n_server, spec.n_sensors))
    users = [_entity_series(spec, prototypes, user_angles[u], user_shifts[u], signatures[u % g],
                            spec.samples_per_user, rng, user=u)
             for u in range(spec.n_users)]
    server = [_entity_series(spec, prototypes, server_angles[m], server_shifts[m],
                             signatures[m % g], spec.samples_per_server, rng,
                             user=spec.n_users + m)
              for m in range(spec.n_server)]
    return SyntheticData(users, server, user_angles, server_angles, prototypes,
                         user_shifts, server_shifts, signatures)


# --- CSV ingestion ------------------------------------------------------------------

@dataclass
class CsvSchema:
    n_sensors: int | None = None
    users: set[int] | None = None
    n_classes: int | None = None


def _header(n_sensors: int) -> list[str]:
    return ["user", "trial", "timestamp", "label"] + [f"ch{i}" for i in range(n_sensors)]


def write_csv(series: list[LabeledSeries], path) -> None:
    if not series:
        raise ParameterError("nothing to write")
    n_sensors = series[0].n_sensors
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(_header(n_sensors))
        for s in series:
            stamps = s.timestamps if s.timestamps is not None else np.arange(len(s))
            for t in range(len(s)):
                label = "" if s.labels is None else int(s.labels[t])
                writer.writerow([s.user, s.trial, repr(float(stamps[t])), label]
                                + [repr(float(v)) for v in s.values[:, t]])


def load_csv(paths, schema: CsvSchema | None = None) -> list[LabeledSeries]:
    """Read ``user,trial,timestamp,label,ch0..`` files into one series per (user, trial)."""
    schema = schema or CsvSchema()
    if isinstance(paths, (str, Path)):
        paths = [paths]
    rows = defaultdict(list)
    order = []
    for path in paths:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise ParseError(f"{path}: missing header", line=1) from None
            n_sensors = len(header) - 4
            if n_sensors < 1 or header != _header(n_sensors):
                raise ParseError(f"{path}: header must be user,trial,timestamp,label,ch0..", line=1)
            if schema.n_sensors is not None and n_sensors != schema.n_sensors:
                raise SchemaError(f"{path}: {n_sensors} channels, schema expects {schema.n_sensors}")
            last_stamp = {}
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) != len(header):
                    raise ParseError(f"{path}: expected {len(header)} fields, got {len(row)}", lineno)
                try:
                    user, trial = int(row[0]), int(row[1])
                    stamp = float(row[2])
                    label = int(row[3]) if row[3] != "" else None
                    values = [float(v) for v in row[4:]]
                except ValueError as exc:
                    raise ParseError(f"{path}: {exc}", lineno) from None
                if schema.users is not None and user not in schema.users:
                    raise SchemaError(f"{path} line {lineno}: unknown user id {user}")
                if label is not None and (label < 0 or (schema.n_classes is not None
                                                        and label >= schema.n_classes)):
                    raise SchemaError(f"{path} line {lineno}: unknown class id {label}")
                key = (user, trial)
                if key in last_stamp and stamp < last_stamp[key]:
                    raise ParseError(f"{path}: timestamps not monotone for user {user} trial {trial}",
                                     lineno)
                last_stamp[key] = stamp
                if key not in rows:
                    order.append(key)
                rows[key].append((stamp, label, values))
    out = []
    for key in order:
        recs = rows[key]
        labels = [r[1] for r in recs]
        has_labels = all(lab is not None for lab in labels)
        out.append(LabeledSeries(
            user=key[0], trial=key[1],
            values=np.array([r[2] for r in recs], dtype=np.float32).T.copy(),
            labels=np.array(labels, dtype=np.int64) if has_labels else None,
            timestamps=np.array([r[0] for r in recs])))
    return out


# --- per-user preparation -----------------------------------------------------------

def windows_from_series(series: list[LabeledSeries], width: int,
                        stride: int | None = None) -> WindowedDataset:
    parts = [window(s.values, width, stride, s.labels) for s in series if len(s) >= width]
    if not parts:
        raise ParameterError(f"no series reaches the window width {width}")
    return WindowedDataset.concat(parts)


@dataclass
class PreparedUser:
    split: UserSplit
    stats: NormStats


def prepare_user(series: list[LabeledSeries], rng: np.random.Generator, per_class: int,
                 n_classes: int, width: int, stride: int | None = None,
                 eval_frac: float = 0.30, labeled_frac: float = 0.20) -> PreparedUser:
    """Window, balance, split, and normalize one user's recordings.

    Normalization statistics come from the user's training portion (labeled plus
    unlabeled) and are reused on the evaluation set.
    """
    ds = balance(windows_from_series(series, width, stride), rng, n_classes)
    parts = split(ds, rng, per_class, eval_frac, labeled_frac, n_classes)
    train = WindowedDataset.concat([parts.labeled.unlabeled(), parts.unlabeled])
    stats = fit_normalizer(train)
    normed = UserSplit(apply_normalizer(parts.labeled, stats),
                       apply_normalizer(parts.unlabeled, stats),
                       apply_normalizer(parts.evaluation, stats))
    return PreparedUser(normed, stats)


def prepare_server(series: list[LabeledSeries], rng: np.random.Generator, n_classes: int,
                   width: int, stride: int | None = None) -> WindowedDataset:
    ds = balance(windows_from_series(series, width, stride), rng, n_classes)
    return normalize(ds)[0]
