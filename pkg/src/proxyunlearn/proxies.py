"""Proxy models of the data distribution and the logit shift they induce.

A proxy pair ``(P, P_r)`` models the training data before and after
forgetting. Each side yields posteriors through Bayes' rule; the difference
of their log-posteriors, ``delta_m = log P_r(.|x) - log P(.|x)``, is the
unlearning signal added to a classifier's logits.

Gaussian kinds (LDA, QDA and their mixture / doubled-label refinements) are
fitted from data in closed form. Empirical kinds (DIR, DIR-2C) only store the
membership of each training sample and act through closed-form probit
targets.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import solve_triangular
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .datagen import ForgetSplit, LabeledDataset, SketchOperator, apply_sketch
from .numkit import log_softmax, softmax

__all__ = [
    "KINDS",
    "GAUSSIAN_KINDS",
    "DIRAC_KINDS",
    "InsufficientDataError",
    "GaussianClassConditional",
    "ConditionalMixture",
    "DoubledLabelPosterior",
    "ProxyPair",
    "normalize_kind",
    "fit",
    "oracle_pair",
    "dirac_target",
    "dirac_target_2c",
    "gaussian_kl_same_mean",
    "gaussian_kl",
    "homoscedastic_cost",
    "pair_to_dict",
    "pair_from_dict",
    "save_pair",
    "load_pair",
]

KINDS = ("LDA", "QDA", "LDA-Mix", "QDA-Mix", "LDA-2C", "DIR", "DIR-2C")
GAUSSIAN_KINDS = KINDS[:5]
DIRAC_KINDS = KINDS[5:]
FORMAT = "proxyunlearn-proxy/1"

_LOG_2PI = np.log(2.0 * np.pi)


class InsufficientDataError(ValueError):
    pass


def normalize_kind(kind: str) -> str:
    lookup = {k.lower(): k for k in KINDS}
    try:
        return lookup[kind.strip().lower()]
    except KeyError:
        raise ValueError(f"unknown proxy kind {kind!r}; expected one of {KINDS}") from None


# -- Gaussian class-conditional model ---------------------------------------


def _ridge(cov, ridge, diagonal):
    if diagonal:
        return cov + ridge * np.mean(cov)
    d = cov.shape[-1]
    return cov + ridge * np.trace(cov) / d * np.eye(d)


class GaussianClassConditional(ClassifierMixin, BaseEstimator):
    """Gaussian model of ``X | y`` with empirical label priors.

    Parameters
    ----------
    covariance : {"shared", "per_label"}
        One pooled within-label covariance (divisor ``n - K``) or one
        covariance per label (divisor ``n_k - 1``).
    diagonal : bool
        Keep only the diagonal of every covariance.
    ridge : float
        Relative ridge: ``ridge * tr(S) / d`` is added to each diagonal.
    n_labels : int or None
        Size of the label table. Labels in ``range(n_labels)`` with no
        sample get prior zero and a ``-inf`` log-joint.

    Labels are integers ``0 .. n_labels - 1``; ``classes_`` is that range.
    """

    def __init__(self, covariance="shared", diagonal=False, ridge=1e-6, n_labels=None):
        self.covariance = covariance
        self.diagonal = diagonal
        self.ridge = ridge
        self.n_labels = n_labels

    def fit(self, X, y, fixed_covariance=None):
        """Estimate means, priors and (unless given) covariances.

        ``fixed_covariance`` reuses a covariance payload fitted elsewhere,
        e.g. the pooled covariance of the full data for the retain proxy.
        """
        if self.covariance not in ("shared", "per_label"):
            raise ValueError(f"covariance must be 'shared' or 'per_label', got {self.covariance!r}")
        if not self.ridge > 0:
            raise ValueError("ridge must be positive")
        X = check_array(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        if y.shape != (X.shape[0],):
            raise ValueError("X and y disagree on the number of samples")
        K = int(self.n_labels if self.n_labels is not None else y.max() + 1)
        if y.size and (y.min() < 0 or y.max() >= K):
            raise ValueError("label out of range")
        d = X.shape[1]
        counts = np.bincount(y, minlength=K)
        active = counts > 0
        if not active.any():
            raise InsufficientDataError("insufficient data for proxy: no samples")
        thin = np.nonzero(active & (counts < 2))[0]
        if thin.size:
            raise InsufficientDataError(
                f"insufficient data for proxy: labels {thin.tolist()} have fewer than 2 samples"
            )
        means = np.zeros((K, d))
        for k in np.nonzero(active)[0]:
            means[k] = X[y == k].mean(axis=0)

        if fixed_covariance is not None:
            cov = np.array(fixed_covariance, dtype=np.float64)
        elif self.covariance == "shared":
            resid = X - means[y]
            dof = X.shape[0] - int(active.sum())
            if dof < 1:
                raise InsufficientDataError("insufficient data for proxy: no degrees of freedom")
            scatter = resid.T @ resid / dof
            cov = np.diag(scatter).copy() if self.diagonal else scatter
            cov = _ridge(cov, self.ridge, self.diagonal)
        else:
            shape = (K, d) if self.diagonal else (K, d, d)
            cov = np.zeros(shape)
            for k in range(K):
                if active[k]:
                    resid = X[y == k] - means[k]
                    s = resid.T @ resid / (counts[k] - 1)
                    s = np.diag(s).copy() if self.diagonal else s
                    cov[k] = _ridge(s, self.ridge, self.diagonal)
                else:
                    cov[k] = 1.0 if self.diagonal else np.eye(d)

        self.means_ = means
        self.covariance_ = cov
        self.priors_ = counts / counts.sum()
        self.counts_ = counts
        self.active_ = active
        self.classes_ = np.arange(K)
        self.n_features_in_ = d
        self._prepare()
        return self

    @classmethod
    def from_params(cls, means, covariance, priors, diagonal=False, ridge=1e-6):
        """Build a model from explicit parameters (no ridge is added)."""
        means = np.atleast_2d(np.asarray(means, dtype=np.float64))
        cov = np.asarray(covariance, dtype=np.float64)
        priors = np.asarray(priors, dtype=np.float64)
        K, d = means.shape
        if abs(priors.sum() - 1.0) > 1e-9 or np.any(priors < 0):
            raise ValueError("priors must form a distribution")
        shared = cov.ndim == (1 if diagonal else 2)
        self = cls("shared" if shared else "per_label", diagonal, ridge, K)
        self.means_ = means
        self.covariance_ = cov
        self.priors_ = priors
        self.counts_ = None
        self.active_ = priors > 0
        self.classes_ = np.arange(K)
        self.n_features_in_ = d
        self._prepare()
        return self

    def _prepare(self):
        """Factor covariances once; raises if any is not SPD."""
        cov = self.covariance_
        shared = cov.ndim == (1 if self.diagonal else 2)
        covs = [cov] if shared else [cov[k] for k in range(cov.shape[0])]
        factors = []
        for k, c in enumerate(covs):
            if not shared and not self.active_[k]:
                factors.append(None)
                continue
            if self.diagonal:
                if np.any(c <= 0) or not np.all(np.isfinite(c)):
                    raise np.linalg.LinAlgError("singular covariance after ridge")
                factors.append(np.sqrt(c))
            else:
                try:
                    factors.append(np.linalg.cholesky(c))
                except np.linalg.LinAlgError:
                    raise np.linalg.LinAlgError("singular covariance after ridge") from None
        self._shared = shared
        self._factors = factors

    def _log_density_one(self, X, k):
        L = self._factors[0] if self._shared else self._factors[k]
        diff = X - self.means_[k]
        d = X.shape[1]
        if self.diagonal:
            z = diff / L
            logdet = 2.0 * np.sum(np.log(L))
        else:
            z = solve_triangular(L, diff.T, lower=True).T
            logdet = 2.0 * np.sum(np.log(np.diag(L)))
        return -0.5 * (d * _LOG_2PI + logdet + np.sum(z * z, axis=1))

    def log_class_density(self, X):
        """``log P(x | k)`` for every label; ``-inf`` for empty labels."""
        check_is_fitted(self, "means_")
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        out = np.full((X.shape[0], self.means_.shape[0]), -np.inf)
        for k in np.nonzero(self.active_)[0]:
            out[:, k] = self._log_density_one(X, k)
        return out

    def log_joint(self, X):
        dens = self.log_class_density(X)
        with np.errstate(divide="ignore"):
            log_pri = np.log(self.priors_)
        out = dens + log_pri
        out[:, ~self.active_] = -np.inf
        return out

    def predict_log_proba(self, X):
        return log_softmax(self.log_joint(X))

    def predict_proba(self, X):
        return softmax(self.log_joint(X))

    def predict(self, X):
        return np.argmax(self.log_joint(X), axis=1)

    # the posterior-model protocol used by ProxyPair
    def log_posterior(self, X, sample_ids=None):
        return self.predict_log_proba(X)

    def to_dict(self):
        check_is_fitted(self, "means_")
        return {
            "type": "gaussian",
            "covariance": self.covariance,
            "diagonal": bool(self.diagonal),
            "ridge": float(self.ridge),
            "means": self.means_.tolist(),
            "covariance_payload": self.covariance_.tolist(),
            "priors": self.priors_.tolist(),
        }

    @classmethod
    def from_dict(cls, blob):
        m = cls.from_params(
            blob["means"], blob["covariance_payload"], blob["priors"],
            diagonal=blob["diagonal"], ridge=blob["ridge"],
        )
        m.covariance = blob["covariance"]
        return m


class ConditionalMixture:
    """``P(x|y) = (1 - pi_f(y)) P_r(x|y) + pi_f(y) P_f(x|y)`` with priors."""

    def __init__(self, retain, forget, pi_f, priors):
        self.retain = retain
        self.forget = forget
        self.pi_f = np.asarray(pi_f, dtype=np.float64)
        self.priors = np.asarray(priors, dtype=np.float64)

    def log_class_density(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        C = self.pi_f.shape[0]
        with np.errstate(divide="ignore"):
            log_wr = np.log1p(-self.pi_f)
            log_wf = np.log(self.pi_f)
        r = self.retain.log_class_density(X) if self.retain is not None else np.full((X.shape[0], C), -np.inf)
        f = self.forget.log_class_density(X) if self.forget is not None else np.full((X.shape[0], C), -np.inf)
        # a zero weight removes its component even where it is undefined
        r = np.where(np.isneginf(log_wr), -np.inf, r + log_wr)
        f = np.where(np.isneginf(log_wf), -np.inf, f + log_wf)
        return np.logaddexp(r, f)

    def log_joint(self, X):
        with np.errstate(divide="ignore"):
            return self.log_class_density(X) + np.log(self.priors)

    def log_posterior(self, X, sample_ids=None):
        return log_softmax(self.log_joint(X))

    def to_dict(self):
        return {
            "type": "mixture",
            "retain": None if self.retain is None else self.retain.to_dict(),
            "forget": None if self.forget is None else self.forget.to_dict(),
            "pi_f": self.pi_f.tolist(),
            "priors": self.priors.tolist(),
        }


class DoubledLabelPosterior:
    """Posterior over ``C`` classes from a model over ``2C`` labels ``(y, s)``.

    Label ``2*y`` is the retain state of class ``y``, ``2*y + 1`` its forget
    state. ``mode="marginal"`` sums the two states; ``mode="retain"``
    conditions on the retain state.
    """

    def __init__(self, model, mode):
        if mode not in ("marginal", "retain"):
            raise ValueError(mode)
        self.model = model
        self.mode = mode

    def log_posterior(self, X, sample_ids=None):
        lj = self.model.log_joint(X)
        if self.mode == "retain":
            return log_softmax(lj[:, 0::2])
        return log_softmax(np.logaddexp(lj[:, 0::2], lj[:, 1::2]))

    def log_class_density(self, X):
        """``log P(x | y)`` (marginal) or ``log P(x | y, r)`` (retain)."""
        if self.mode == "retain":
            return self.model.log_class_density(X)[:, 0::2]
        lj = self.model.log_joint(X)
        pri = self.model.priors_
        class_pri = pri[0::2] + pri[1::2]
        with np.errstate(divide="ignore"):
            return np.logaddexp(lj[:, 0::2], lj[:, 1::2]) - np.log(class_pri)

    def to_dict(self):
        return {"type": "doubled", "mode": self.mode, "model": self.model.to_dict()}


class FixedPosterior:
    """Wraps a callable ``X -> posterior probabilities`` (oracle proxies)."""

    def __init__(self, fn, log=False):
        self.fn = fn
        self.log = log

    def log_posterior(self, X, sample_ids=None):
        out = np.asarray(self.fn(X), dtype=np.float64)
        if self.log:
            return out
        with np.errstate(divide="ignore"):
            return np.log(out)


def _posterior_from_dict(blob):
    t = blob["type"]
    if t == "gaussian":
        return GaussianClassConditional.from_dict(blob)
    if t == "mixture":
        return ConditionalMixture(
            None if blob["retain"] is None else GaussianClassConditional.from_dict(blob["retain"]),
            None if blob["forget"] is None else GaussianClassConditional.from_dict(blob["forget"]),
            blob["pi_f"], blob["priors"],
        )
    if t == "doubled":
        return DoubledLabelPosterior(GaussianClassConditional.from_dict(blob["model"]), blob["mode"])
    raise ValueError(f"unknown posterior payload {t!r}")


# -- Dirac closed forms -----------------------------------------------------


def dirac_target(p_base, y):
    """Remove the mass of label ``y`` and renormalize the rest.

    Vectorized: ``p_base`` may be ``(n, C)`` with ``y`` of shape ``(n,)``.
    """
    p = np.array(p_base, dtype=np.float64)
    single = p.ndim == 1
    p = np.atleast_2d(p)
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    rows = np.arange(p.shape[0])
    p_y = p[rows, y]
    if np.any(p_y >= 1.0):
        raise ValueError("undefined renormalization: all mass sits on the forgotten label")
    out = p / (1.0 - p_y)[:, None]
    out[rows, y] = 0.0
    return out[0] if single else out


def dirac_target_2c(p_base, y, n_retain, n_forget):
    """Count-weighted mix of the untouched probits and :func:`dirac_target`.

    ``n_retain`` / ``n_forget`` are ``|D_r(y)|`` and ``|D_f(y)|`` (scalars or
    per-row arrays).
    """
    p = np.asarray(p_base, dtype=np.float64)
    n_r = np.asarray(n_retain, dtype=np.float64)
    n_f = np.asarray(n_forget, dtype=np.float64)
    total = n_r + n_f
    if np.any(total <= 0):
        raise ValueError("class has no training samples")
    w_r = n_r / total
    w_f = n_f / total
    if p.ndim == 2:
        w_r = np.broadcast_to(w_r, (p.shape[0],))[:, None]
        w_f = np.broadcast_to(w_f, (p.shape[0],))[:, None]
    if np.all(w_f == 0):
        return p.copy()
    return w_r * p + w_f * dirac_target(p, y)


class _Membership:
    """Training-set membership keyed by sample id."""

    def __init__(self, ids, labels, forget_ids, n_classes):
        ids = np.asarray(ids, dtype=np.int64)
        order = np.argsort(ids)
        self.ids = ids[order]
        self.labels = np.asarray(labels, dtype=np.int64)[order]
        self.forget = np.isin(self.ids, np.asarray(forget_ids, dtype=np.int64))
        self.n_classes = n_classes
        self.n_class = np.bincount(self.labels, minlength=n_classes)
        self.n_forget_class = np.bincount(self.labels[self.forget], minlength=n_classes)

    def lookup(self, sample_ids):
        """Row-wise (known, is_forget, label) for the queried ids."""
        q = np.asarray(sample_ids, dtype=np.int64)
        pos = np.clip(np.searchsorted(self.ids, q), 0, max(len(self.ids) - 1, 0))
        known = (self.ids.size > 0) & (self.ids[pos] == q)
        return known, known & self.forget[pos], np.where(known, self.labels[pos], -1)

    def to_dict(self):
        return {
            "ids": self.ids.tolist(),
            "labels": self.labels.tolist(),
            "forget_ids": self.ids[self.forget].tolist(),
            "n_classes": self.n_classes,
        }


# -- proxy pair -------------------------------------------------------------


@dataclass
class ProxyPair:
    """Ordered pair of posterior models and the logit shift between them."""

    kind: str
    p_model: object
    pr_model: object
    n_classes: int
    fitted_on: str = ""
    membership: Optional[_Membership] = None
    n_forget: int = 0
    feature_map: Optional[SketchOperator] = None
    options: dict = field(default_factory=dict)

    @property
    def is_dirac(self):
        return self.kind in DIRAC_KINDS

    def _features(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if self.feature_map is not None:
            X = apply_sketch(self.feature_map, X)
        return X

    def log_posteriors(self, X=None, sample_ids=None):
        """``(M, M_r)``: log-posteriors of both proxies, shape ``(n, C)``."""
        if self.is_dirac:
            known, forget, label = self.membership.lookup(sample_ids)
            n = label.shape[0]
            M = np.full((n, self.n_classes), -np.inf)
            Mr = np.full((n, self.n_classes), -np.inf)
            rows = np.nonzero(known)[0]
            M[rows, label[rows]] = 0.0
            keep = np.nonzero(known & ~forget)[0]
            Mr[keep, label[keep]] = 0.0
            return M, Mr
        Z = self._features(X)
        return self.p_model.log_posterior(Z), self.pr_model.log_posterior(Z)

    def log_class_densities(self, X):
        """``(log P(x|y), log P_r(x|y))`` for Gaussian kinds, shape ``(n, C)``."""
        if self.is_dirac or self.kind == "oracle":
            raise ValueError(f"{self.kind} proxies have no class-conditional density")
        Z = self._features(X)
        return self.p_model.log_class_density(Z), self.pr_model.log_class_density(Z)

    def posteriors(self, X=None, sample_ids=None):
        M, Mr = self.log_posteriors(X, sample_ids)
        return np.exp(M), np.exp(Mr)

    def delta_m(self, X=None, sample_ids=None, base_logits=None):
        """``log P_r(.|x) - log P(.|x)`` row-wise.

        Empirical kinds need ``sample_ids``; ids outside the training set
        get a zero shift. DIR-2C also needs ``base_logits``: its shift is
        the one that moves the base probits onto the count-weighted target.
        """
        if self.is_dirac:
            if sample_ids is None:
                raise ValueError(f"{self.kind} needs sample ids")
            known, forget, label = self.membership.lookup(sample_ids)
            out = np.zeros((label.shape[0], self.n_classes))
            rows = np.nonzero(forget)[0]
            if self.kind == "DIR":
                out[rows, label[rows]] = -np.inf
                return out
            if base_logits is None:
                raise ValueError("DIR-2C needs the base logits")
            if rows.size:
                base = np.atleast_2d(np.asarray(base_logits, dtype=np.float64))[rows]
                y = label[rows]
                p = softmax(base)
                target = dirac_target_2c(
                    p, y,
                    self.membership.n_class[y] - self.membership.n_forget_class[y],
                    self.membership.n_forget_class[y],
                )
                with np.errstate(divide="ignore"):
                    out[rows] = np.log(target) - log_softmax(base)
            return out
        if self.n_forget == 0:
            n = self._features(X).shape[0]
            return np.zeros((n, self.n_classes))
        M, Mr = self.log_posteriors(X)
        both_dead = np.isneginf(M) & np.isneginf(Mr)
        with np.errstate(invalid="ignore"):
            out = Mr - M
        out[both_dead] = 0.0
        if np.isposinf(out).any():
            raise ValueError("retain proxy supports a label the initial proxy excludes")
        return out

    def target_probits(self, base_logits, X=None, sample_ids=None, eta=1.0):
        """Probits of the unlearned model ``softmax(base + eta * delta_m)``.

        Empirical kinds use their closed forms on forget rows, which do not
        depend on ``eta > 0``; other rows keep the base probits bit for bit.
        """
        from .numkit import shift_logits

        base = np.atleast_2d(np.asarray(base_logits, dtype=np.float64))
        if eta == 0:
            return softmax(base)
        if self.is_dirac:
            out = softmax(base)
            known, forget, label = self.membership.lookup(sample_ids)
            rows = np.nonzero(forget)[0]
            if rows.size:
                y = label[rows]
                p = out[rows]
                if self.kind == "DIR":
                    out[rows] = dirac_target(p, y)
                else:
                    out[rows] = dirac_target_2c(
                        p, y,
                        self.membership.n_class[y] - self.membership.n_forget_class[y],
                        self.membership.n_forget_class[y],
                    )
            return out
        return softmax(shift_logits(base, self.delta_m(X, sample_ids), eta))


def _fit_gcc(X, y, K, covariance, diagonal, ridge, fixed=None):
    return GaussianClassConditional(covariance, diagonal, ridge, K).fit(X, y, fixed_covariance=fixed)


def fit(
    kind: str,
    ds: LabeledDataset,
    split: ForgetSplit,
    ridge: float = 1e-6,
    shared_sigma_from_full: bool = True,
    qda_full_cov: bool = False,
    feature_map: Optional[SketchOperator] = None,
) -> ProxyPair:
    """Fit the proxy pair of the given kind on ``ds`` and its forget split.

    ``shared_sigma_from_full`` makes the retain proxy of LDA / QDA reuse the
    covariance estimated on the full data; otherwise it is refitted on the
    retain set. ``feature_map`` composes every Gaussian proxy with a sketch.
    """
    kind = normalize_kind(kind)
    C = ds.n_classes
    forget = split.forget_mask(ds)
    options = {
        "ridge": ridge,
        "shared_sigma_from_full": shared_sigma_from_full,
        "qda_full_cov": qda_full_cov,
    }
    common = dict(
        kind=kind, n_classes=C, fitted_on=ds.fingerprint(),
        n_forget=int(forget.sum()), options=options,
    )

    if kind in DIRAC_KINDS:
        membership = _Membership(ds.sample_id, ds.labels, ds.sample_id[forget], C)
        return ProxyPair(p_model=None, pr_model=None, membership=membership, **common)

    X = ds.features if feature_map is None else apply_sketch(feature_map, ds.features)
    y = ds.labels
    Xr, yr = X[~forget], y[~forget]
    Xf, yf = X[forget], y[forget]

    if kind == "LDA":
        P = _fit_gcc(X, y, C, "shared", False, ridge)
        fixed = P.covariance_ if shared_sigma_from_full else None
        Pr = _fit_gcc(Xr, yr, C, "shared", False, ridge, fixed)
    elif kind == "QDA":
        diag = not qda_full_cov
        P = _fit_gcc(X, y, C, "per_label", diag, ridge)
        fixed = P.covariance_ if shared_sigma_from_full else None
        Pr = _fit_gcc(Xr, yr, C, "per_label", diag, ridge, fixed)
    elif kind in ("LDA-Mix", "QDA-Mix"):
        cov, diag = ("shared", False) if kind == "LDA-Mix" else ("per_label", not qda_full_cov)
        Pr = _fit_gcc(Xr, yr, C, cov, diag, ridge)
        Pf = _fit_gcc(Xf, yf, C, cov, diag, ridge) if forget.any() else None
        counts = ds.class_counts()
        pi_f = np.bincount(yf, minlength=C) / np.maximum(counts, 1)
        P = ConditionalMixture(Pr, Pf, pi_f, counts / counts.sum())
    elif kind == "LDA-2C":
        doubled = 2 * y + forget.astype(np.int64)
        P2 = _fit_gcc(X, doubled, 2 * C, "shared", False, ridge)
        P = DoubledLabelPosterior(P2, "marginal")
        Pr = DoubledLabelPosterior(P2, "retain")
    else:  # pragma: no cover - normalize_kind guards this
        raise AssertionError(kind)
    return ProxyPair(p_model=P, pr_model=Pr, feature_map=feature_map, **common)


def oracle_pair(p_fn, pr_fn, n_classes, log=False) -> ProxyPair:
    """Proxy pair from explicit posterior functions (e.g. the true laws)."""
    return ProxyPair(
        "oracle", FixedPosterior(p_fn, log), FixedPosterior(pr_fn, log), n_classes,
        n_forget=-1,
    )


# -- Gaussian divergences ---------------------------------------------------


def gaussian_kl(mu_p, cov_p, mu_q, cov_q):
    """KL(N(mu_p, cov_p) || N(mu_q, cov_q)) in nats."""
    mu_p, mu_q = np.atleast_1d(mu_p).astype(float), np.atleast_1d(mu_q).astype(float)
    cov_p, cov_q = np.atleast_2d(cov_p).astype(float), np.atleast_2d(cov_q).astype(float)
    if cov_p.shape != cov_q.shape or mu_p.shape != mu_q.shape or cov_p.shape[0] != mu_p.shape[0]:
        raise ValueError("dimension mismatch")
    d = mu_p.shape[0]
    Lq = np.linalg.cholesky(cov_q)
    Lp = np.linalg.cholesky(cov_p)
    A = solve_triangular(Lq, Lp, lower=True)
    trace = np.sum(A * A)
    z = solve_triangular(Lq, mu_q - mu_p, lower=True)
    logdet = 2.0 * (np.sum(np.log(np.diag(Lq))) - np.sum(np.log(np.diag(Lp))))
    return 0.5 * (logdet + trace + z @ z - d)


def gaussian_kl_same_mean(cov_k, cov):
    """``0.5 (log|S|/|S_k| + tr(S^-1 S_k) - d)`` for two same-mean Gaussians."""
    cov_k = np.atleast_2d(cov_k).astype(float)
    d = cov_k.shape[0]
    return gaussian_kl(np.zeros(d), cov_k, np.zeros(d), cov)


def _full_covs(model):
    cov = model.covariance_
    K = model.means_.shape[0]
    if model.diagonal:
        cov = np.array([np.diag(c) for c in np.broadcast_to(cov, (K, cov.shape[-1]))])
    elif cov.ndim == 2:
        cov = np.broadcast_to(cov, (K,) + cov.shape)
    return cov


def homoscedastic_cost(qda, lda, class_priors=None):
    """Prior-weighted same-mean Gaussian KL from per-class to shared covariance.

    ``qda`` / ``lda`` are fitted :class:`GaussianClassConditional` models
    (or raw arrays: per-class covariances ``(K, d, d)`` and one ``(d, d)``).
    Each per-class term is non-negative; returns ``(total, per_class)``.
    """
    cov_k = _full_covs(qda) if isinstance(qda, GaussianClassConditional) else np.asarray(qda, float)
    if isinstance(lda, GaussianClassConditional):
        shared = _full_covs(lda)[0]
    else:
        shared = np.asarray(lda, float)
    cov_k = np.atleast_3d(cov_k) if cov_k.ndim == 2 and cov_k.shape[-1] == 1 else cov_k
    if cov_k.ndim != 3 or cov_k.shape[1:] != np.atleast_2d(shared).shape:
        raise ValueError("dimension mismatch between per-class and shared covariances")
    K = cov_k.shape[0]
    if class_priors is None:
        class_priors = qda.priors_ if isinstance(qda, GaussianClassConditional) else np.full(K, 1.0 / K)
    class_priors = np.asarray(class_priors, float)
    terms = np.array([gaussian_kl_same_mean(cov_k[k], shared) for k in range(K)])
    return float(np.sum(class_priors * terms)), terms


# -- persistence ------------------------------------------------------------


def pair_to_dict(pair: ProxyPair) -> dict:
    blob = {
        "format": FORMAT,
        "kind": pair.kind,
        "n_classes": pair.n_classes,
        "fitted_on": pair.fitted_on,
        "n_forget": pair.n_forget,
        "options": pair.options,
        "feature_map": None if pair.feature_map is None else {
            "omega": pair.feature_map.omega.tolist(), "seed": pair.feature_map.seed,
        },
    }
    if pair.is_dirac:
        blob["membership"] = pair.membership.to_dict()
    elif pair.kind == "oracle":
        raise ValueError("oracle pairs wrap Python callables and cannot be serialized")
    else:
        blob["p_model"] = pair.p_model.to_dict()
        blob["pr_model"] = pair.pr_model.to_dict()
    return blob


def pair_from_dict(blob: dict) -> ProxyPair:
    if blob.get("format") != FORMAT:
        raise ValueError(f"unsupported proxy format {blob.get('format')!r}")
    fm = blob.get("feature_map")
    feature_map = None if fm is None else SketchOperator(np.array(fm["omega"]), fm["seed"])
    common = dict(
        kind=blob["kind"], n_classes=blob["n_classes"], fitted_on=blob["fitted_on"],
        n_forget=blob["n_forget"], options=blob.get("options", {}), feature_map=feature_map,
    )
    if blob["kind"] in DIRAC_KINDS:
        m = blob["membership"]
        membership = _Membership(m["ids"], m["labels"], m["forget_ids"], m["n_classes"])
        return ProxyPair(p_model=None, pr_model=None, membership=membership, **common)
    P = _posterior_from_dict(blob["p_model"])
    Pr = _posterior_from_dict(blob["pr_model"])
    if isinstance(P, DoubledLabelPosterior) and isinstance(Pr, DoubledLabelPosterior):
        Pr.model = P.model
    if isinstance(P, ConditionalMixture) and isinstance(Pr, GaussianClassConditional):
        P.retain = Pr
    return ProxyPair(p_model=P, pr_model=Pr, **common)


def save_pair(pair: ProxyPair, path):
    from .datagen import _atomic_write

    _atomic_write(path, json.dumps(pair_to_dict(pair), indent=1) + "\n")


def load_pair(path) -> ProxyPair:
    with open(path) as fh:
        return pair_from_dict(json.load(fh))
