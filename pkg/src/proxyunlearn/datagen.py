"""Synthetic class-conditional Gaussian data, forgetting scenarios, sketches.

The generator keeps its ground truth (:class:`GroundTruth`) next to the
samples, so the exact posteriors of the full and the retain distributions are
available in closed form when evaluating an unlearning method.
"""

from __future__ import annotations

import hashlib
import os
import tempfile
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np
from scipy.special import logsumexp
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .numkit import log_softmax

__all__ = [
    "GaussianComponent",
    "GaussianMixtureSpec",
    "GroundTruth",
    "LabeledDataset",
    "ForgetSplit",
    "ClassScenario",
    "SubclassScenario",
    "RandomScenario",
    "NothingToForgetError",
    "make_mixture_spec",
    "generate",
    "build_scenario",
    "parse_scenario",
    "SketchOperator",
    "make_sketch",
    "apply_sketch",
    "SemiOrthogonalSketch",
    "save_dataset",
    "load_dataset",
]


class NothingToForgetError(ValueError):
    pass


@dataclass(frozen=True)
class GaussianComponent:
    label: int
    subclass: int
    mean: np.ndarray
    cov: np.ndarray
    weight: float  # within-class weight

    def log_pdf(self, X):
        d = self.mean.shape[0]
        L = np.linalg.cholesky(self.cov)
        diff = np.atleast_2d(X) - self.mean
        z = np.linalg.solve(L, diff.T)
        maha = np.sum(z * z, axis=0)
        logdet = 2.0 * np.sum(np.log(np.diag(L)))
        return -0.5 * (d * np.log(2 * np.pi) + logdet + maha)


@dataclass
class GaussianMixtureSpec:
    """Per (class, subclass) Gaussians; within-class weights sum to one."""

    components: list
    dim: int
    seed: int = 0

    @property
    def n_classes(self) -> int:
        return 1 + max(c.label for c in self.components)

    def subclasses(self, label):
        return [c for c in self.components if c.label == label]

    def validate(self):
        seen = set()
        for c in self.components:
            key = (c.label, c.subclass)
            if key in seen:
                raise ValueError(f"duplicate component {key}")
            seen.add(key)
            if c.mean.shape != (self.dim,) or c.cov.shape != (self.dim, self.dim):
                raise ValueError(f"component {key} has wrong dimensions")
            if not np.all(np.isfinite(c.mean)):
                raise ValueError(f"component {key} has a non-finite mean")
            try:
                np.linalg.cholesky(c.cov)
            except np.linalg.LinAlgError:
                raise ValueError(f"covariance of component {key} is not SPD") from None
            if not np.allclose(c.cov, c.cov.T, atol=1e-12):
                raise ValueError(f"covariance of component {key} is not symmetric")
        for y in range(self.n_classes):
            comps = self.subclasses(y)
            if not comps:
                raise ValueError(f"class {y} has no component")
            total = sum(c.weight for c in comps)
            if abs(total - 1.0) > 1e-9 or any(c.weight < 0 for c in comps):
                raise ValueError(f"weights of class {y} do not form a distribution")
        return self


def make_mixture_spec(
    n_classes=2,
    n_subclasses=2,
    dim=2,
    class_sep=4.0,
    subclass_sep=2.5,
    noise=1.0,
    heteroscedastic=True,
    seed=0,
) -> GaussianMixtureSpec:
    """Random but seeded mixture with ``n_subclasses`` equal-weight blobs per class.

    Class centres are random directions scaled by ``class_sep``; each
    subclass is offset from its class centre by ``subclass_sep`` along a
    random direction. With ``heteroscedastic=False`` every component shares
    one covariance, which is the setting where LDA is Bayes optimal.
    """
    rng = np.random.default_rng(seed)

    def direction():
        v = rng.standard_normal(dim)
        return v / np.linalg.norm(v)

    def random_cov():
        Q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
        scales = rng.uniform(0.4, 1.6, size=dim)
        cov = (Q * scales) @ Q.T * noise**2
        return 0.5 * (cov + cov.T)

    shared = random_cov()
    components = []
    for y in range(n_classes):
        centre = class_sep * direction()
        for s in range(n_subclasses):
            offset = subclass_sep * direction() if n_subclasses > 1 else np.zeros(dim)
            cov = random_cov() if heteroscedastic else shared
            components.append(
                GaussianComponent(y, s, centre + offset, cov, 1.0 / n_subclasses)
            )
    return GaussianMixtureSpec(components, dim, seed).validate()


@dataclass
class GroundTruth:
    """Exact joint law of a generated dataset.

    ``counts`` maps ``(label, subclass)`` to the number of generated samples;
    the joint weight of a component is its share of the total, which is the
    law the samples were actually drawn from.
    """

    spec: GaussianMixtureSpec
    counts: dict

    @property
    def n_classes(self):
        return self.spec.n_classes

    def _active(self):
        return [c for c in self.spec.components if self.counts.get((c.label, c.subclass), 0) > 0]

    def log_joint(self, X):
        """log P(x, y) for every class; -inf for classes with no mass."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        total = sum(self.counts.values())
        out = np.full((X.shape[0], self.n_classes), -np.inf)
        for c in self._active():
            lw = np.log(self.counts[(c.label, c.subclass)] / total)
            out[:, c.label] = np.logaddexp(out[:, c.label], lw + c.log_pdf(X))
        return out

    def log_posterior(self, X):
        return log_softmax(self.log_joint(X))

    def posterior(self, X):
        return np.exp(self.log_posterior(X))

    def log_class_density(self, X):
        """log P(x | y); -inf columns for empty classes."""
        lj = self.log_joint(X)
        lp = self.log_priors()
        with np.errstate(invalid="ignore"):
            out = lj - lp
        out[:, np.isneginf(lp)] = -np.inf
        return out

    def log_priors(self):
        total = sum(self.counts.values())
        pri = np.zeros(self.n_classes)
        for (y, _), k in self.counts.items():
            pri[y] += k / total
        with np.errstate(divide="ignore"):
            return np.log(pri)

    def without(self, dropped) -> "GroundTruth":
        """Law of the data once the given components are removed."""
        dropped = set(dropped)
        counts = {k: v for k, v in self.counts.items() if k not in dropped}
        return GroundTruth(self.spec, counts)

    def sample_log_density(self, X):
        """log of the marginal density of x (mixture over every component)."""
        return logsumexp(self.log_joint(X), axis=1)


@dataclass
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    sample_id: np.ndarray
    n_classes: int
    subclass: Optional[np.ndarray] = None
    truth: Optional[GroundTruth] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.sample_id = np.asarray(self.sample_id, dtype=np.int64)
        if self.subclass is not None:
            self.subclass = np.asarray(self.subclass, dtype=np.int64)
        n = self.features.shape[0]
        if self.labels.shape != (n,) or self.sample_id.shape != (n,):
            raise ValueError("features, labels and sample_id disagree on n")
        if self.subclass is not None and self.subclass.shape != (n,):
            raise ValueError("subclass length differs from n")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError("label out of range")
        if len(np.unique(self.sample_id)) != n:
            raise ValueError("sample_id must be unique")

    def __len__(self):
        return self.features.shape[0]

    @property
    def dim(self):
        return self.features.shape[1]

    def validate(self):
        """Full-dataset invariants: n >= C and every class present."""
        if len(self) < self.n_classes:
            raise ValueError("fewer samples than classes")
        missing = set(range(self.n_classes)) - set(np.unique(self.labels).tolist())
        if missing:
            raise ValueError(f"classes {sorted(missing)} are absent")
        return self

    def class_counts(self):
        return np.bincount(self.labels, minlength=self.n_classes)

    def mask(self, ids):
        return np.isin(self.sample_id, np.asarray(list(ids), dtype=np.int64))

    def subset(self, ids) -> "LabeledDataset":
        m = self.mask(ids)
        return self.take(m)

    def take(self, mask) -> "LabeledDataset":
        return LabeledDataset(
            self.features[mask],
            self.labels[mask],
            self.sample_id[mask],
            self.n_classes,
            None if self.subclass is None else self.subclass[mask],
            self.truth,
        )

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for a in (self.features, self.labels, self.sample_id):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()[:16]


def generate(spec: GaussianMixtureSpec, n_per_subclass: int, seed=None, id_offset: int = 0) -> LabeledDataset:
    """Draw ``round(n_per_subclass * n_sub(y) * w)`` points per component.

    With equal weights every subclass receives exactly ``n_per_subclass``
    points. ``seed`` defaults to ``spec.seed``; a different seed gives an
    independent sample of the same law (e.g. a test set), and ``id_offset``
    keeps its sample ids disjoint from the training ids.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    feats, labels, subs, counts = [], [], [], {}
    for c in spec.components:
        n_sub = len(spec.subclasses(c.label))
        k = int(round(n_per_subclass * n_sub * c.weight))
        L = np.linalg.cholesky(c.cov)
        z = rng.standard_normal((k, spec.dim))
        feats.append(c.mean + z @ L.T)
        labels.append(np.full(k, c.label))
        subs.append(np.full(k, c.subclass))
        counts[(c.label, c.subclass)] = k
    features = np.concatenate(feats)
    ds = LabeledDataset(
        features,
        np.concatenate(labels),
        np.arange(features.shape[0]) + int(id_offset),
        spec.n_classes,
        np.concatenate(subs),
        GroundTruth(spec, counts),
    )
    return ds.validate()


@dataclass(frozen=True)
class ClassScenario:
    label: int

    def tag(self):
        return f"class:{self.label}"


@dataclass(frozen=True)
class SubclassScenario:
    label: int
    subclass: int

    def tag(self):
        return f"subclass:{self.label}:{self.subclass}"


@dataclass(frozen=True)
class RandomScenario:
    n_forget: int
    seed: int = 0

    def tag(self):
        return f"random:{self.n_forget}:{self.seed}"


Scenario = Union[ClassScenario, SubclassScenario, RandomScenario]


def parse_scenario(text: str) -> Scenario:
    """``class:Y``, ``subclass:Y:S`` or ``random:N[:SEED]``."""
    parts = text.strip().lower().split(":")
    try:
        if parts[0] == "class" and len(parts) == 2:
            return ClassScenario(int(parts[1]))
        if parts[0] == "subclass" and len(parts) == 3:
            return SubclassScenario(int(parts[1]), int(parts[2]))
        if parts[0] == "random" and len(parts) in (2, 3):
            return RandomScenario(int(parts[1]), int(parts[2]) if len(parts) == 3 else 0)
    except ValueError:
        pass
    raise ValueError(f"cannot parse scenario {text!r}")


@dataclass
class ForgetSplit:
    retain_ids: np.ndarray
    forget_ids: np.ndarray
    pi_f_per_class: dict
    pi_f_global: float
    scenario: Optional[Scenario] = None

    @classmethod
    def empty(cls, ds: LabeledDataset) -> "ForgetSplit":
        """Split that forgets nothing."""
        return cls(np.sort(ds.sample_id), np.array([], dtype=np.int64),
                   {y: 0.0 for y in range(ds.n_classes)}, 0.0, None)

    def forget_mask(self, ds: LabeledDataset):
        return np.isin(ds.sample_id, self.forget_ids)

    def retain_mask(self, ds: LabeledDataset):
        return np.isin(ds.sample_id, self.retain_ids)

    def retain_truth(self, truth: GroundTruth) -> GroundTruth:
        """Ground-truth law of the retain set implied by the scenario."""
        sc = self.scenario
        if isinstance(sc, ClassScenario):
            return truth.without(k for k in truth.counts if k[0] == sc.label)
        if isinstance(sc, SubclassScenario):
            return truth.without([(sc.label, sc.subclass)])
        return truth


def _split_from_mask(ds, forget, scenario):
    if not forget.any():
        raise NothingToForgetError("nothing to forget")
    counts = ds.class_counts()
    f_counts = np.bincount(ds.labels[forget], minlength=ds.n_classes)
    pi = {
        int(y): (float(f_counts[y] / counts[y]) if counts[y] else 0.0)
        for y in range(ds.n_classes)
    }
    return ForgetSplit(
        np.sort(ds.sample_id[~forget]),
        np.sort(ds.sample_id[forget]),
        pi,
        float(forget.sum() / len(ds)),
        scenario,
    )


def build_scenario(ds: LabeledDataset, scenario: Scenario) -> ForgetSplit:
    if isinstance(scenario, ClassScenario):
        if not 0 <= scenario.label < ds.n_classes:
            raise ValueError(f"unknown class {scenario.label}")
        forget = ds.labels == scenario.label
    elif isinstance(scenario, SubclassScenario):
        if ds.subclass is None:
            raise ValueError("dataset carries no subclass tags")
        in_class = ds.labels == scenario.label
        if not in_class.any():
            raise ValueError(f"unknown class {scenario.label}")
        if not np.any(ds.subclass[in_class] == scenario.subclass):
            raise ValueError(f"class {scenario.label} has no subclass {scenario.subclass}")
        forget = in_class & (ds.subclass == scenario.subclass)
    elif isinstance(scenario, RandomScenario):
        if scenario.n_forget > len(ds):
            raise ValueError("n_forget exceeds dataset size")
        rng = np.random.default_rng(scenario.seed)
        chosen = rng.choice(len(ds), size=scenario.n_forget, replace=False)
        forget = np.zeros(len(ds), dtype=bool)
        forget[chosen] = True
    else:
        raise TypeError(f"unsupported scenario {scenario!r}")
    return _split_from_mask(ds, forget, scenario)


# -- feature sketch ---------------------------------------------------------


@dataclass(frozen=True)
class SketchOperator:
    omega: np.ndarray  # (k, d), orthonormal rows
    seed: int


def make_sketch(d: int, k: int, seed: int = 0) -> SketchOperator:
    """Orthogonal factor of a seeded Gaussian matrix, as a ``k x d`` map."""
    if k > d:
        raise ValueError(f"sketch dimension k={k} exceeds input dimension d={d}")
    if k < 1:
        raise ValueError("sketch dimension must be positive")
    rng = np.random.default_rng(seed)
    Q, R = np.linalg.qr(rng.standard_normal((d, k)))
    # fix the sign ambiguity of QR so the operator depends on the seed only
    Q = Q * np.sign(np.diag(R))
    return SketchOperator(np.ascontiguousarray(Q.T), seed)


def apply_sketch(op: SketchOperator, features):
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if features.shape[1] != op.omega.shape[1]:
        raise ValueError("feature dimension does not match the sketch")
    return features @ op.omega.T


class SemiOrthogonalSketch(TransformerMixin, BaseEstimator):
    """Estimator wrapper around :func:`make_sketch` for use in pipelines."""

    def __init__(self, n_components=32, random_state=0):
        self.n_components = n_components
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_array(X)
        self.n_features_in_ = X.shape[1]
        self.operator_ = make_sketch(X.shape[1], self.n_components, self.random_state)
        return self

    def transform(self, X):
        check_is_fitted(self, "operator_")
        return apply_sketch(self.operator_, check_array(X))


# -- text persistence -------------------------------------------------------


def _atomic_write(path, text):
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_dataset(ds: LabeledDataset, path):
    """Header ``n d C`` then ``id label subclass f_1 ... f_d`` per line.

    Floats are written with ``repr`` so a round trip is exact; a missing
    subclass is written as ``-1``.
    """
    lines = [f"{len(ds)} {ds.dim} {ds.n_classes}"]
    sub = ds.subclass if ds.subclass is not None else np.full(len(ds), -1)
    for i in range(len(ds)):
        feats = " ".join(repr(float(v)) for v in ds.features[i])
        lines.append(f"{ds.sample_id[i]} {ds.labels[i]} {sub[i]} {feats}")
    _atomic_write(path, "\n".join(lines) + "\n")


def load_dataset(path) -> LabeledDataset:
    with open(path) as fh:
        header = fh.readline().split()
        if len(header) != 3:
            raise ValueError(f"{path}: bad header")
        n, d, C = (int(v) for v in header)
        rows = [line.split() for line in fh if line.strip()]
    if len(rows) != n:
        raise ValueError(f"{path}: expected {n} rows, found {len(rows)}")
    if any(len(r) != d + 3 for r in rows):
        raise ValueError(f"{path}: expected {d + 3} fields per row")
    ids = np.array([int(r[0]) for r in rows])
    labels = np.array([int(r[1]) for r in rows])
    sub = np.array([int(r[2]) for r in rows])
    feats = np.array([[float(v) for v in r[3:]] for r in rows]).reshape(n, d)
    return LabeledDataset(feats, labels, ids, C, None if np.all(sub < 0) else sub)
