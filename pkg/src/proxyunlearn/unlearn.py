"""Unlearned models, the safe-scale line search and bound diagnostics.

The unlearned model adds ``eta * delta_m`` to a base classifier's logits.
The mean log-normalizer shift ``h(eta)`` is convex with ``h(0) = 0``; its
first positive zero ``eta_max`` bounds the range of scales for which the
shift provably moves the classifier toward the retain distribution.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Union

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from . import proxies as _proxies
from .datagen import ForgetSplit, LabeledDataset, _atomic_write
from .numkit import SupportError, encode_nonfinite, lse, shift_logits, softmax, stable_mean
from .proxies import ProxyPair

__all__ = [
    "UnlearnedModel",
    "EtaSearchResult",
    "AdmissibilityResult",
    "BoundReport",
    "HFunction",
    "h_empirical",
    "search_eta_max",
    "find_eta_max",
    "check_admissibility",
    "unlearned_probits",
    "bound_report",
    "h_curve",
    "write_h_curve_csv",
    "ProxyUnlearner",
]

LogitSource = Union[np.ndarray, Callable]


def _evaluate_base(base, X, sample_ids=None):
    """Logits from an array aligned with ``X`` or from a model/callable."""
    if isinstance(base, np.ndarray):
        return np.atleast_2d(base).astype(np.float64, copy=False)
    for attr in ("logits", "decision_function"):
        fn = getattr(base, attr, None)
        if fn is not None:
            return np.atleast_2d(np.asarray(fn(X), dtype=np.float64))
    return np.atleast_2d(np.asarray(base(X), dtype=np.float64))


def _kl_rows(p, q):
    """Row-wise KL(p || q) that returns ``inf`` on support violations."""
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    pos = p > 0
    bad = (pos & (q <= 0)).any(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(pos, p * (np.log(np.where(pos, p, 1.0)) - np.log(np.where(pos, q, 1.0))), 0.0)
    out = np.maximum(terms.sum(axis=1), 0.0)
    out[bad] = np.inf
    return out


def _mean(values):
    values = np.asarray(values, dtype=np.float64)
    if np.isposinf(values).any():
        return math.inf
    return stable_mean(values)


# -- the unlearned family ---------------------------------------------------


@dataclass
class UnlearnedModel:
    """``softmax(base(x) + eta * delta_m(x))`` for ``0 <= eta <= 1``."""

    base_logits: LogitSource
    pair: ProxyPair
    eta: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError(f"eta must lie in [0, 1], got {self.eta}")

    def logits(self, X, sample_ids=None):
        base = _evaluate_base(self.base_logits, X, sample_ids)
        if self.eta == 0:
            return base.copy()
        dm = self.pair.delta_m(X, sample_ids, base_logits=base)
        return shift_logits(base, dm, self.eta)

    def predict_proba(self, X, sample_ids=None):
        base = _evaluate_base(self.base_logits, X, sample_ids)
        return self.pair.target_probits(base, X, sample_ids, self.eta)

    def predict(self, X, sample_ids=None):
        return np.argmax(self.predict_proba(X, sample_ids), axis=1)


def unlearned_probits(model: UnlearnedModel, X, sample_ids=None):
    """Probits of ``model``; Dirac kinds use their exact closed forms."""
    return model.predict_proba(X, sample_ids)


# -- h(eta) and its zero ----------------------------------------------------


class HFunction:
    """``h(eta) = mean_x [lse(f(x) + eta dM(x)) - lse(f(x))]`` on a fixed set.

    Logits and the shift are computed once; each call costs one pass.
    """

    def __init__(self, base_logits, delta):
        self.base = np.atleast_2d(np.asarray(base_logits, dtype=np.float64))
        self.delta = np.atleast_2d(np.asarray(delta, dtype=np.float64))
        if self.base.shape != self.delta.shape:
            raise ValueError("logits and shift disagree in shape")
        if self.base.shape[0] == 0:
            raise ValueError("mean over an empty dataset")
        self.base_lse = lse(self.base)
        self.n_evals = 0

    def __call__(self, eta):
        if eta < 0:
            raise ValueError("eta must be non-negative")
        self.n_evals += 1
        if eta == 0:
            return 0.0
        shifted = lse(shift_logits(self.base, self.delta, eta))
        return stable_mean(shifted - self.base_lse)

    def derivative_at_zero(self):
        """Analytic slope ``mean_x <softmax(f(x)), dM(x)>`` (may be -inf)."""
        p = softmax(self.base)
        with np.errstate(invalid="ignore"):
            terms = np.where(p > 0, p * self.delta, 0.0)
        return float(np.sum(terms) / self.base.shape[0])


def _h_function(base_logits, pair, dataset):
    X = dataset.features
    base = _evaluate_base(base_logits, X, dataset.sample_id)
    if base.shape[0] != len(dataset):
        raise ValueError("base logits do not match the dataset")
    delta = pair.delta_m(X, dataset.sample_id, base_logits=base)
    return HFunction(base, delta)


def h_empirical(base_logits, pair: ProxyPair, dataset: LabeledDataset, eta: float) -> float:
    """Mean log-normalizer shift at scale ``eta`` over ``dataset``."""
    return _h_function(base_logits, pair, dataset)(eta)


@dataclass
class EtaSearchResult:
    eta_max: float
    admissible: bool
    h_samples: list
    zero_bracket: object  # (lo, hi), "capped-at-1" or "none"
    slope_at_zero: float
    n_evals: int = 0

    @property
    def capped(self):
        return self.zero_bracket == "capped-at-1"

    def to_dict(self):
        d = asdict(self)
        d["h_samples"] = [list(s) for s in self.h_samples]
        if isinstance(self.zero_bracket, tuple):
            d["zero_bracket"] = list(self.zero_bracket)
        return d


def search_eta_max(h: Callable[[float], float], tol: float = 1e-4, slope_step: float = 1e-4,
                   max_iter: int = 200) -> EtaSearchResult:
    """Locate the positive zero of a convex ``h`` with ``h(0) = 0`` on ``(0, 1]``.

    The slope at zero is estimated as ``h(step) / step``. A non-negative
    slope means no safe scale exists and ``eta_max = 0``. Otherwise the
    zero is bracketed by doubling from ``tol`` and bisected. The returned
    scale always satisfies ``h(eta_max) <= 0``, is within ``tol`` of the
    zero and has ``|h(eta_max)| <= tol``. If ``h`` stays non-positive up to
    1 the search stops at ``eta_max = 1`` flagged ``"capped-at-1"``.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    samples = []

    def evaluate(eta):
        v = float(h(eta))
        if math.isnan(v):
            raise FloatingPointError(f"h({eta}) is NaN")
        samples.append((float(eta), v))
        return v

    evaluate(0.0)
    slope = evaluate(slope_step) / slope_step
    if not slope < 0:
        return EtaSearchResult(0.0, False, samples, "none", slope, len(samples))

    lo, hi = 0.0, None
    eta = tol
    while True:
        v = evaluate(eta)
        if v > 0:
            hi = eta
            break
        lo, h_lo = eta, v
        if eta >= 1.0:
            return EtaSearchResult(1.0, True, samples, "capped-at-1", slope, len(samples))
        eta = min(2.0 * eta, 1.0)

    h_lo = 0.0 if lo == 0.0 else h_lo
    for _ in range(max_iter):
        if lo > 0.0 and hi - lo <= tol and -h_lo <= tol:
            break
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        v = evaluate(mid)
        if v > 0:
            hi = mid
        else:
            lo, h_lo = mid, v
    return EtaSearchResult(lo, True, samples, (lo, hi), slope, len(samples))


def find_eta_max(base_logits, pair: ProxyPair, dataset: LabeledDataset, tol: float = 1e-4) -> EtaSearchResult:
    """Largest safe scale of ``pair``'s shift for the given base logits."""
    return search_eta_max(_h_function(base_logits, pair, dataset), tol=tol)


def h_curve(base_logits, pair, dataset, grid=None):
    """``[(eta, h(eta))]`` on ``grid`` (default: 0, 0.05, ..., 1)."""
    if grid is None:
        grid = np.linspace(0.0, 1.0, 21)
    hf = _h_function(base_logits, pair, dataset)
    return [(float(e), hf(float(e))) for e in grid]


def write_h_curve_csv(path, samples):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["eta", "h"])
    for eta, value in sorted(samples):
        writer.writerow([repr(float(eta)), repr(float(value))])
    _atomic_write(path, buf.getvalue())


# -- admissibility ----------------------------------------------------------


@dataclass
class AdmissibilityResult:
    gap: float
    holds: bool
    kl_to_initial_proxy: float
    kl_to_retain_proxy: float
    violations: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)


def check_admissibility(base_probits, pair: ProxyPair, dataset: LabeledDataset) -> AdmissibilityResult:
    """Compare how well each proxy explains the given probits on ``dataset``.

    ``gap = mean KL(p || P_r) - mean KL(p || P)``; the pair is admissible
    when ``gap >= 0``. Samples where a proxy excludes a label the probits
    support make that proxy's mean infinite and are listed by sample id
    under ``violations``. If both means are infinite the gap is undefined
    and :class:`SupportError` is raised.
    """
    if pair.is_dirac:
        raise ValueError(f"admissibility is undefined for empirical proxies ({pair.kind})")
    p = np.atleast_2d(np.asarray(base_probits, dtype=np.float64))
    if p.shape[0] != len(dataset):
        raise ValueError("probits do not match the dataset")
    P, Pr = pair.posteriors(dataset.features, dataset.sample_id)
    kl_p = _kl_rows(p, P)
    kl_pr = _kl_rows(p, Pr)
    violations = {}
    for name, rows in (("initial_proxy", kl_p), ("retain_proxy", kl_pr)):
        bad = np.isinf(rows)
        if bad.any():
            violations[name] = dataset.sample_id[bad].tolist()
    m_p, m_pr = _mean(kl_p), _mean(kl_pr)
    if math.isinf(m_p) and math.isinf(m_pr):
        raise SupportError(
            "absolute-continuity violated by both proxies",
            rows=np.nonzero(np.isinf(kl_p) & np.isinf(kl_pr))[0],
        )
    gap = m_pr - m_p
    return AdmissibilityResult(float(gap), bool(gap >= 0), m_p, m_pr, violations)


# -- bound report -----------------------------------------------------------


@dataclass
class BoundReport:
    eta: float
    kl_ref_to_unlearned: float
    kl_ref_to_initial: float
    posterior_bound_terms: dict
    posterior_bound: float
    posterior_bound_residual: float
    density_bound_terms: Optional[dict]
    decomposition: dict
    reference_admissible: bool

    @property
    def decrease(self):
        return self.kl_ref_to_initial - self.kl_ref_to_unlearned

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(encode_nonfinite(self.to_dict()), indent=1, sort_keys=True, allow_nan=False)


def _reference(reference, X):
    if callable(reference):
        return np.atleast_2d(np.asarray(reference(X), dtype=np.float64))
    return np.atleast_2d(np.asarray(reference, dtype=np.float64))


def bound_report(reference_posteriors, model: UnlearnedModel, dataset: LabeledDataset,
                 eta: Optional[float] = None, truth=None, retain_truth=None,
                 split: Optional[ForgetSplit] = None) -> BoundReport:
    """Every computable term of the KL error decomposition at scale ``eta``.

    ``reference_posteriors`` is an ``(n, C)`` array aligned with ``dataset``
    or a callable on features (e.g. the true retain posterior). The base
    probits stand in for the true initial posterior. The Y|X bound's
    remainder is only available as ``posterior_bound_residual = LHS - RHS``.

    With ``truth`` / ``retain_truth`` (ground-truth models exposing
    ``log_class_density``) and ``split``, the X|Y divergences of the
    coarser bound are estimated by sample averages over D and D_r.
    """
    pair = model.pair
    if pair.is_dirac:
        raise ValueError(f"bound terms are undefined for empirical proxies ({pair.kind})")
    eta = model.eta if eta is None else float(eta)
    X, ids = dataset.features, dataset.sample_id
    base = _evaluate_base(model.base_logits, X, ids)
    p_theta = softmax(base)
    ref = _reference(reference_posteriors, X)
    delta = pair.delta_m(X, ids, base_logits=base)
    p_tilde = softmax(shift_logits(base, delta, eta))
    P, Pr = pair.posteriors(X, ids)

    lhs = _mean(_kl_rows(ref, p_tilde))
    k0 = _mean(_kl_rows(ref, p_theta))
    kl_ref_pr = _mean(_kl_rows(ref, Pr))
    kl_ref_p = _mean(_kl_rows(ref, P))
    kl_theta_p = _mean(_kl_rows(p_theta, P))
    dgamma = HFunction(base, delta)(eta)

    shift = kl_ref_pr - kl_theta_p
    rhs = (1.0 - eta) * k0 + eta * shift
    with np.errstate(invalid="ignore"):
        exact = k0 + dgamma + eta * (kl_ref_pr - kl_ref_p)
    density_terms = None
    if truth is not None and retain_truth is not None and split is not None and pair.feature_map is None:
        y = dataset.labels
        rows = np.arange(len(dataset))
        dens_p, dens_pr = pair.log_class_densities(X)
        retain = split.retain_mask(dataset)
        true_full = truth.log_class_density(X)[rows, y]
        true_retain = retain_truth.log_class_density(X[retain])[np.arange(retain.sum()), y[retain]]
        density_terms = {
            "kl_xy_r": _mean(true_retain - dens_pr[retain, y[retain]]),
            "kl_xy_init": _mean(true_full - dens_p[rows, y]),
        }
    return BoundReport(
        eta=eta,
        kl_ref_to_unlearned=lhs,
        kl_ref_to_initial=k0,
        posterior_bound_terms={"initial_divergence": k0, "modeling_shift": shift},
        posterior_bound=rhs,
        posterior_bound_residual=lhs - rhs,
        density_bound_terms=density_terms,
        decomposition={
            "delta_gamma_mean": dgamma,
            "admissible_gap": kl_ref_p - kl_ref_pr,
            "kl_ref_to_retain_proxy": kl_ref_pr,
            "kl_ref_to_initial_proxy": kl_ref_p,
            "kl_initial_to_initial_proxy": kl_theta_p,
            "identity_residual": lhs - exact,
        },
        reference_admissible=bool(kl_ref_p - kl_ref_pr >= 0),
    )


# -- estimator wrapper ------------------------------------------------------


class ProxyUnlearner(ClassifierMixin, BaseEstimator):
    """Fit a proxy pair, search the safe scale and expose the unlearned model.

    Parameters
    ----------
    kind : str
        Proxy family, one of ``proxies.KINDS``.
    eta : float or None
        Fixed scale; ``None`` uses the searched ``eta_max``. Empirical kinds
        ignore the scale (their targets do not depend on it) and use 1.
    tol : float
        Line-search tolerance in ``eta``.
    """

    def __init__(self, kind="LDA-2C", eta=None, tol=1e-4, ridge=1e-6,
                 shared_sigma_from_full=True, qda_full_cov=False):
        self.kind = kind
        self.eta = eta
        self.tol = tol
        self.ridge = ridge
        self.shared_sigma_from_full = shared_sigma_from_full
        self.qda_full_cov = qda_full_cov

    def fit(self, base_model, dataset: LabeledDataset, split: ForgetSplit):
        self.pair_ = _proxies.fit(
            self.kind, dataset, split, ridge=self.ridge,
            shared_sigma_from_full=self.shared_sigma_from_full, qda_full_cov=self.qda_full_cov,
        )
        self.base_model_ = base_model
        self.search_ = find_eta_max(base_model, self.pair_, dataset, tol=self.tol)
        if self.eta is not None:
            self.eta_ = float(self.eta)
        elif self.pair_.is_dirac:
            self.eta_ = 1.0
        else:
            self.eta_ = self.search_.eta_max
        self.model_ = UnlearnedModel(base_model, self.pair_, self.eta_)
        self.classes_ = np.arange(dataset.n_classes)
        return self

    def predict_proba(self, X, sample_ids=None):
        return self.model_.predict_proba(X, sample_ids)

    def predict_log_proba(self, X, sample_ids=None):
        with np.errstate(divide="ignore"):
            return np.log(self.predict_proba(X, sample_ids))

    def predict(self, X, sample_ids=None):
        return np.argmax(self.predict_proba(X, sample_ids), axis=1)
