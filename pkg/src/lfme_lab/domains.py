"""Synthetic multi-domain data with invariant and spurious structure.

Each suite holds M source domains plus one extra domain whose spurious
feature mapping is a fresh rotation. Invariant dims are class-conditional
Gaussians shared by every domain; spurious dims follow a domain-private
rotation of the class means and correlate with the label at a controllable
strength, so they help in-domain and mislead on the extra domain.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

VAL_FRACTION = 0.2
# Spurious class means are the domain-private rotation of the invariant
# class means, so both blocks are equally separable within a source domain.
SPURIOUS_MEAN_SCALE = 1.0
MIN_ROTATION_DISTANCE = 0.1


class DataError(Exception):
    """Invalid suite specification or unreadable external data."""


@dataclass(frozen=True)
class SuiteSpec:
    n_domains: int = 3          # M source domains; generation adds one held-out style
    n_classes: int = 5
    n_per_domain: int = 1000
    d_inv: int = 6
    d_spu: int = 6
    spurious_strength: float = 0.9
    noise: float = 0.75
    seed: int = 0

    def validate(self):
        if self.n_domains < 2:
            raise DataError("need at least 2 source domains")
        if self.n_classes < 2:
            raise DataError("need at least 2 classes")
        if self.n_per_domain < 10:
            raise DataError("need at least 10 samples per domain")
        if self.d_inv < self.n_classes - 1:
            raise DataError("d_inv must be at least n_classes-1 to hold the class simplex")
        if self.d_spu < 0 or (self.d_spu > self.d_inv and self.d_spu > 0):
            raise DataError("d_spu must be in [0, d_inv] for orthonormal rotations")
        if not 0.0 <= self.spurious_strength <= 1.0:
            raise DataError(f"spurious_strength must be in [0,1], got {self.spurious_strength}")
        if self.noise <= 0.0:
            raise DataError(f"noise must be positive, got {self.noise}")


@dataclass
class DomainDataset:
    domain_id: int
    name: str
    features: np.ndarray        # N x d
    labels: np.ndarray          # N ints in [0, K)
    train_idx: np.ndarray
    val_idx: np.ndarray
    n_classes: int
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]


def _class_means(k: int, d: int) -> np.ndarray:
    """Vertices of a regular (k-1)-simplex embedded in d dims, norm 2 each."""
    centered = np.eye(k) - 1.0 / k
    u, s, _ = np.linalg.svd(centered, full_matrices=False)
    coords = u[:, : k - 1] * s[: k - 1]
    coords *= 2.0 / np.linalg.norm(coords[0])
    means = np.zeros((k, d))
    means[:, : k - 1] = coords
    return means


def _random_rotation(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((cols, cols)))
    q *= np.sign(np.diag(r))
    return q[:rows]


def _stratified_split(labels: np.ndarray, rng: np.random.Generator):
    train, val = [], []
    for k in np.unique(labels):
        idx = np.flatnonzero(labels == k)
        idx = rng.permutation(idx)
        n_val = int(round(VAL_FRACTION * len(idx)))
        val.extend(idx[:n_val])
        train.extend(idx[n_val:])
    return np.sort(np.asarray(train, dtype=np.int64)), np.sort(np.asarray(val, dtype=np.int64))


def generate_suite(spec: SuiteSpec) -> list[DomainDataset]:
    """M source domains plus one domain with a fresh spurious rotation."""
    spec.validate()
    root = np.random.SeedSequence(spec.seed)
    mean_rng = np.random.default_rng(root.spawn(1)[0])
    means = _class_means(spec.n_classes, spec.d_inv)

    rotations = []
    rot_rng = np.random.default_rng(root.spawn(1)[0])
    for _ in range(spec.n_domains):
        rotations.append(_random_rotation(rot_rng, spec.d_spu, spec.d_inv))
    # Held-out rotation must be far from every source rotation.
    while True:
        held = _random_rotation(rot_rng, spec.d_spu, spec.d_inv)
        if spec.d_spu == 0 or all(np.linalg.norm(held - r) > MIN_ROTATION_DISTANCE
                                  for r in rotations):
            rotations.append(held)
            break

    datasets = []
    for m in range(spec.n_domains + 1):
        rng = np.random.default_rng([spec.seed, 7919, m])
        labels = rng.integers(spec.n_classes, size=spec.n_per_domain)
        x_inv = means[labels] + spec.noise * rng.standard_normal((spec.n_per_domain, spec.d_inv))
        if spec.d_spu > 0:
            aligned = rng.random(spec.n_per_domain) < spec.spurious_strength
            spur_class = np.where(aligned, labels, rng.integers(spec.n_classes, size=spec.n_per_domain))
            spur_means = SPURIOUS_MEAN_SCALE * (means @ rotations[m].T)
            x_spu = spur_means[spur_class] + spec.noise * rng.standard_normal(
                (spec.n_per_domain, spec.d_spu))
            features = np.concatenate([x_inv, x_spu], axis=1)
        else:
            spur_class = labels.copy()
            features = x_inv
        train_idx, val_idx = _stratified_split(labels, rng)
        datasets.append(DomainDataset(
            domain_id=m,
            name=f"domain{m}" if m < spec.n_domains else "heldout",
            features=features,
            labels=labels.astype(np.int64),
            train_idx=train_idx,
            val_idx=val_idx,
            n_classes=spec.n_classes,
            meta={
                "spec": spec,
                "rotation": rotations[m],
                "spurious_class": spur_class.astype(np.int64),
                "class_means": means,
                "held_out_style": m == spec.n_domains,
            },
        ))
    return datasets


def spurious_label_correlation(ds: DomainDataset) -> float:
    """Chance-corrected agreement between the nearest spurious mean and the label.

    Assigns each sample to the closest spurious class mean of its own domain
    and rescales the match rate so independence maps to 0 and a perfectly
    label-aligned spurious block maps to 1.
    """
    spec: SuiteSpec = ds.meta["spec"]
    if spec.d_spu == 0:
        return 0.0
    spur_means = SPURIOUS_MEAN_SCALE * (ds.meta["class_means"] @ ds.meta["rotation"].T)
    x_spu = ds.features[:, spec.d_inv:]
    d2 = ((x_spu[:, None, :] - spur_means[None, :, :]) ** 2).sum(axis=2)
    nearest = d2.argmin(axis=1)
    match = float(np.mean(nearest == ds.labels))
    k = spec.n_classes
    return (match - 1.0 / k) / (1.0 - 1.0 / k)


def load_csv_suite(path, domain_column, label_column, standardize=True) -> list[DomainDataset]:
    """One DomainDataset per distinct domain value of a numeric-feature CSV.

    Features are standardized to zero mean and unit variance over the pooled
    rows unless ``standardize`` is off (used by round-trip checks).
    """
    with open(path, newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        missing = [c for c in (domain_column, label_column) if c not in header]
        if missing:
            raise DataError(f"{path}: missing columns {missing}")
        dom_i = header.index(domain_column)
        lab_i = header.index(label_column)
        feat_cols = [i for i in range(len(header)) if i not in (dom_i, lab_i)]
        if not feat_cols:
            raise DataError(f"{path}: no feature columns")
        feats, domains_col, labels = [], [], []
        for r, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise DataError(f"{path}: row {r} has {len(row)} cells, expected {len(header)}")
            vals = []
            for i in feat_cols:
                try:
                    vals.append(float(row[i]))
                except ValueError:
                    raise DataError(
                        f"{path}: non-numeric feature cell at row {r}, column {header[i]!r}"
                    ) from None
            try:
                lab = int(row[lab_i])
            except ValueError:
                raise DataError(f"{path}: non-integer label at row {r}") from None
            feats.append(vals)
            labels.append(lab)
            domains_col.append(row[dom_i])

    if not feats:
        raise DataError(f"{path}: no data rows")
    features = np.asarray(feats, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    distinct_labels = np.unique(labels)
    k = len(distinct_labels)
    if labels.min() < 0 or not np.array_equal(distinct_labels, np.arange(k)):
        raise DataError(
            f"{path}: labels must cover 0..K-1 contiguously, got {distinct_labels.tolist()}")
    distinct_domains = sorted(set(domains_col), key=lambda v: (len(v), v))
    if len(distinct_domains) < 2:
        raise DataError(f"{path}: need at least 2 distinct domains, got {distinct_domains}")

    if standardize:
        mean = features.mean(axis=0)
        std = features.std(axis=0)
        std[std == 0.0] = 1.0
        features = (features - mean) / std

    datasets = []
    dom_arr = np.asarray(domains_col)
    for m, dom in enumerate(distinct_domains):
        idx = np.flatnonzero(dom_arr == dom)
        ds_labels = labels[idx]
        rng = np.random.default_rng([0xC5F, m, len(idx)])
        train_idx, val_idx = _stratified_split(ds_labels, rng)
        datasets.append(DomainDataset(
            domain_id=m,
            name=str(dom),
            features=features[idx],
            labels=ds_labels,
            train_idx=train_idx,
            val_idx=val_idx,
            n_classes=k,
            meta={"source": str(path), "domain_value": dom},
        ))
    return datasets


@dataclass
class Batch:
    xs: list[np.ndarray]        # per source domain, batch_per_domain x d
    ys: list[np.ndarray]
    x_all: np.ndarray           # concatenation in domain order
    y_all: np.ndarray
    domain_ids: np.ndarray


def _epoch_perm(ds: DomainDataset, seed: int, epoch: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 104729, ds.domain_id, epoch])
    return rng.permutation(ds.train_idx)


def make_batches(sources: list[DomainDataset], batch_per_domain: int, seed: int, step: int) -> Batch:
    """Aligned per-domain minibatches for one step, plus their concatenation.

    Deterministic in (seed, step). Each domain walks a per-epoch shuffle of
    its train split; exhaustion wraps into the next epoch's shuffle.
    """
    b = int(batch_per_domain)
    if b <= 0:
        raise DataError("batch_per_domain must be positive")
    for ds in sources:
        if b > len(ds.train_idx):
            raise DataError(
                f"batch_per_domain {b} exceeds train size {len(ds.train_idx)} of {ds.name}")
    xs, ys, ids = [], [], []
    for ds in sources:
        n = len(ds.train_idx)
        pos = step * b
        epoch, off = divmod(pos, n)
        perm = _epoch_perm(ds, seed, epoch)
        take = perm[off:off + b]
        while len(take) < b:
            epoch += 1
            perm = _epoch_perm(ds, seed, epoch)
            take = np.concatenate([take, perm[: b - len(take)]])
        xs.append(ds.features[take])
        ys.append(ds.labels[take])
        ids.append(np.full(b, ds.domain_id, dtype=np.int64))
    return Batch(xs, ys, np.concatenate(xs), np.concatenate(ys), np.concatenate(ids))


def one_hot(labels: np.ndarray, k: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise DataError(f"label out of range [0,{k}): {labels.min()}..{labels.max()}")
    out = np.zeros((len(labels), k))
    out[np.arange(len(labels)), labels] = 1.0
    return out
