"""Metrics, the attacker query bound, the benchmark runner and its results tree.

Results are stored as nested JSON mirroring
``results/{dataset}/{arch_kind}/{scenario}_{arch}_raw.json``. Each file is
keyed by architecture; class and random files map ``sub_key`` to a list of
seed entries, subclass files wrap the same map as ``{"meta", "results"}``.
A seed entry holds the reference rows ``initial`` and ``retrained`` and one
block per method.
"""

from __future__ import annotations

import configparser
import csv
import io
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Dict, List, Optional

import numpy as np

from . import nets
from . import proxies as _proxies
from .datagen import (
    ClassScenario,
    SubclassScenario,
    _atomic_write,
    build_scenario,
    generate,
    make_mixture_spec,
    parse_scenario,
)
from .numkit import SupportError, encode_nonfinite, softmax, stable_mean
from .unlearn import UnlearnedModel, check_admissibility, find_eta_max

__all__ = [
    "UNBOUNDED",
    "mean_kl",
    "kl_to_reference",
    "stein_queries",
    "MetricsReport",
    "ResultsTree",
    "canonical_json",
    "BenchmarkPlan",
    "DatasetConfig",
    "load_plan",
    "parse_plan",
    "run_benchmark",
    "report",
    "VOLATILE_KEYS",
]

UNBOUNDED = "unbounded"
VOLATILE_KEYS = frozenset({"seconds", "rte", "rte_normalized", "rte_retrain"})


# -- metrics ----------------------------------------------------------------


def mean_kl(reference_probits, candidate_probits) -> float:
    """Mean of per-sample KL(reference || candidate), exact-sum accumulation.

    Raises :class:`SupportError` listing every offending row.
    """
    from .unlearn import _kl_rows

    ref = np.atleast_2d(np.asarray(reference_probits, dtype=np.float64))
    cand = np.atleast_2d(np.asarray(candidate_probits, dtype=np.float64))
    if ref.shape != cand.shape:
        raise ValueError(f"shape mismatch: {ref.shape} vs {cand.shape}")
    rows = _kl_rows(ref, cand)
    bad = np.nonzero(np.isinf(rows))[0]
    if bad.size:
        raise SupportError("absolute-continuity violated", rows=bad)
    return stable_mean(rows)


def _probits(model, X, sample_ids=None):
    if isinstance(model, np.ndarray):
        return model
    if isinstance(model, UnlearnedModel):
        return model.predict_proba(X, sample_ids)
    if hasattr(model, "predict_proba"):
        return model.predict_proba(X)
    return softmax(model(X))


def kl_to_reference(reference_model, candidate_model, X, sample_ids=None) -> float:
    """Mean KL from the reference model's probits to the candidate's on ``X``."""
    return mean_kl(_probits(reference_model, X, sample_ids), _probits(candidate_model, X, sample_ids))


def stein_queries(alpha: float, kl: float):
    """Queries an attacker needs at false-positive rate ``alpha``.

    ``ceil((1 - 2 alpha) log((1 - alpha) / alpha) / kl)``, at least 1.
    ``kl == 0`` means the models are indistinguishable and returns
    :data:`UNBOUNDED`.
    """
    if not 0.0 < alpha < 0.5:
        raise ValueError("alpha must lie in (0, 0.5)")
    if kl < 0 or math.isnan(kl):
        raise ValueError("kl must be non-negative")
    if kl == 0:
        return UNBOUNDED
    if math.isinf(kl):
        return 1
    bound = (1.0 - 2.0 * alpha) * math.log((1.0 - alpha) / alpha) / kl
    return max(1, math.ceil(bound))


@dataclass
class MetricsReport:
    kl_t: Optional[float] = None
    kl_f: Optional[float] = None
    kl_last: Optional[float] = None
    acc_t: Optional[float] = None
    acc_f: Optional[float] = None
    rte: Optional[float] = None
    rte_normalized: Optional[float] = None
    n_alpha: Dict[str, dict] = field(default_factory=dict)

    def __post_init__(self):
        for name in ("acc_t", "acc_f"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        for name in ("kl_t", "kl_f", "kl_last"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ValueError(f"{name} must be non-negative")

    def with_queries(self, alphas):
        for a in alphas:
            self.n_alpha[repr(float(a))] = {
                "t": None if self.kl_t is None else stein_queries(a, self.kl_t),
                "f": None if self.kl_f is None else stein_queries(a, self.kl_f),
            }
        return self

    def to_dict(self):
        return asdict(self)


# -- results tree -----------------------------------------------------------


def _strip(obj, keys):
    if isinstance(obj, dict):
        return {k: _strip(v, keys) for k, v in obj.items() if k not in keys}
    if isinstance(obj, list):
        return [_strip(v, keys) for v in obj]
    return obj


def canonical_json(obj, strip_volatile=True) -> str:
    """Sorted-key strict JSON with wall-clock fields removed.

    Non-finite floats are written as the strings ``"inf"``, ``"-inf"`` and
    ``"nan"``.
    """
    if strip_volatile:
        obj = _strip(obj, VOLATILE_KEYS)
    return json.dumps(encode_nonfinite(obj), sort_keys=True, indent=1, allow_nan=False) + "\n"


class ResultsTree:
    """``{dataset: {arch_kind: {"{scenario}_{arch}_raw": file_payload}}}``."""

    def __init__(self, data=None):
        self.data = {} if data is None else data

    def __eq__(self, other):
        return isinstance(other, ResultsTree) and self.serialize(False) == other.serialize(False)

    def files(self):
        for dataset, kinds in sorted(self.data.items()):
            for arch_kind, stems in sorted(kinds.items()):
                for stem, payload in sorted(stems.items()):
                    yield os.path.join(dataset, arch_kind, f"{stem}.json"), payload

    def add(self, dataset, arch_kind, scenario_type, arch, sub_key, seed_entry, meta=None):
        stems = self.data.setdefault(dataset, {}).setdefault(arch_kind, {})
        stem = f"{scenario_type}_{arch}_raw"
        per_arch = stems.setdefault(stem, {}).setdefault(arch, {})
        if scenario_type == "subclass":
            per_arch.setdefault("meta", meta or {})
            per_arch = per_arch.setdefault("results", {})
        per_arch.setdefault(str(sub_key), []).append(seed_entry)

    def serialize(self, strip_volatile=False) -> str:
        return canonical_json(self.data, strip_volatile)

    @classmethod
    def parse(cls, text) -> "ResultsTree":
        return cls(json.loads(text))

    def canonical(self) -> str:
        return self.serialize(strip_volatile=True)

    def write(self, root):
        for rel, payload in self.files():
            _atomic_write(os.path.join(root, rel), canonical_json(payload, strip_volatile=False))

    @classmethod
    def read(cls, root) -> "ResultsTree":
        data = {}
        for dirpath, _, filenames in os.walk(root):
            for fn in sorted(filenames):
                if not fn.endswith("_raw.json"):
                    continue
                rel = os.path.relpath(os.path.join(dirpath, fn), root).split(os.sep)
                if len(rel) != 3:
                    continue
                with open(os.path.join(dirpath, fn)) as fh:
                    data.setdefault(rel[0], {}).setdefault(rel[1], {})[fn[:-5]] = json.load(fh)
        return cls(data)

    def cells(self):
        """Yield ``(dataset, arch_kind, stem, arch, sub_key, seed_entries)``."""
        for dataset, kinds in sorted(self.data.items()):
            for arch_kind, stems in sorted(kinds.items()):
                for stem, by_arch in sorted(stems.items()):
                    for arch, payload in sorted(by_arch.items()):
                        inner = payload.get("results", payload) if "meta" in payload else payload
                        for sub_key, entries in sorted(inner.items()):
                            yield dataset, arch_kind, stem, arch, sub_key, entries


# -- benchmark plan ---------------------------------------------------------


@dataclass
class DatasetConfig:
    n_classes: int = 2
    n_subclasses: int = 2
    dim: int = 2
    class_sep: float = 4.0
    subclass_sep: float = 2.5
    noise: float = 1.0
    heteroscedastic: bool = True
    n_per_subclass: int = 100
    n_test_per_subclass: int = 100
    seed: int = 0


@dataclass
class BenchmarkPlan:
    name: str = "demo"
    datasets: Dict[str, DatasetConfig] = field(default_factory=lambda: {"synthetic": DatasetConfig()})
    scenarios: List[str] = field(default_factory=lambda: ["subclass:0:1"])
    methods: List[str] = field(default_factory=lambda: ["FT", "LDA-2C"])
    seeds: List[int] = field(default_factory=lambda: [0])
    archs: List[str] = field(default_factory=lambda: ["mlp1"])
    arch_kind: str = "gaussian"
    hidden: int = 32
    train: nets.TrainConfig = field(default_factory=lambda: nets.TrainConfig(epochs=30))
    unlearn: nets.TrainConfig = field(default_factory=lambda: nets.TrainConfig(epochs=20, lr_decay=0.95))
    ga_lr_scale: float = 0.1
    ga_epoch_cap: int = 5
    ridge: float = 1e-6
    shared_sigma_from_full: bool = True
    qda_full_cov: bool = False
    tol: float = 1e-4
    alphas: List[float] = field(default_factory=lambda: [0.001])

    def validate(self):
        for m in self.methods:
            if m not in nets.BASELINES and m not in _proxies.KINDS:
                raise ValueError(f"unknown method {m!r}")
        if "Retrain" in self.methods:
            raise ValueError("Retrain is the reference row; do not list it as a method")
        for a in self.archs:
            if a not in nets.ARCHS:
                raise ValueError(f"unknown architecture {a!r}")
        for s in self.scenarios:
            parse_scenario(s)
        if not self.seeds:
            raise ValueError("plan needs at least one seed")
        if not self.datasets:
            raise ValueError("plan needs at least one dataset")
        if not self.tol > 0 or not self.ridge > 0:
            raise ValueError("tol and ridge must be positive")
        return self


def _split_list(text, cast=str):
    return [cast(v.strip()) for v in text.replace("\n", ",").split(",") if v.strip()]


def _coerce(value: str, default):
    if isinstance(default, bool):
        low = value.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    return value.strip()


def _section_to(cls, section, base=None, name=""):
    base = cls() if base is None else base
    known = {f.name: f for f in fields(cls)}
    updates = {}
    for key, value in section.items():
        if key not in known:
            raise ValueError(f"unknown key {key!r} in section [{name}]")
        updates[key] = _coerce(value, getattr(base, key))
    return replace(base, **updates)


_PLAN_LISTS = {"scenarios": str, "methods": str, "seeds": int, "archs": str, "alphas": float}
_PLAN_SCALARS = ("name", "arch_kind", "hidden", "ga_lr_scale", "ga_epoch_cap", "ridge",
                 "shared_sigma_from_full", "qda_full_cov", "tol")


def parse_plan(text: str) -> BenchmarkPlan:
    """Read an INI plan. Sections: ``[benchmark]``, ``[train]``, ``[unlearn]``
    and one ``[dataset:NAME]`` per dataset. Unknown sections or keys fail."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp.read_string(text)
    plan = BenchmarkPlan()
    datasets = {}
    for sec in cp.sections():
        body = dict(cp[sec])
        if sec == "benchmark":
            updates = {}
            for key, value in body.items():
                if key in _PLAN_LISTS:
                    updates[key] = _split_list(value, _PLAN_LISTS[key])
                elif key in _PLAN_SCALARS:
                    updates[key] = _coerce(value, getattr(plan, key))
                else:
                    raise ValueError(f"unknown key {key!r} in section [benchmark]")
            plan = replace(plan, **updates)
        elif sec in ("train", "unlearn"):
            plan = replace(plan, **{sec: _section_to(nets.TrainConfig, body, getattr(plan, sec), sec)})
        elif sec.startswith("dataset:"):
            datasets[sec.split(":", 1)[1].strip()] = _section_to(DatasetConfig, body, None, sec)
        else:
            raise ValueError(f"unknown section [{sec}]")
    if datasets:
        plan = replace(plan, datasets=datasets)
    return plan.validate()


def load_plan(path) -> BenchmarkPlan:
    with open(path) as fh:
        return parse_plan(fh.read())


# -- benchmark cells --------------------------------------------------------


def _scenario_key(scenario):
    if isinstance(scenario, ClassScenario):
        return "class", str(scenario.label)
    if isinstance(scenario, SubclassScenario):
        return "subclass", f"{scenario.label}:{scenario.subclass}"
    return "random", str(scenario.n_forget)


def _make_data(cfg: DatasetConfig):
    spec = make_mixture_spec(
        cfg.n_classes, cfg.n_subclasses, cfg.dim, cfg.class_sep, cfg.subclass_sep,
        cfg.noise, cfg.heteroscedastic, cfg.seed,
    )
    train = generate(spec, cfg.n_per_subclass, seed=cfg.seed)
    test = generate(spec, cfg.n_test_per_subclass, seed=cfg.seed + 1, id_offset=len(train))
    return train, test


def _reference_row(model, monitor, seconds=None):
    m = monitor.evaluate(model)
    row = {k: m.get(k) for k in ("kl_t", "kl_f", "acc_t", "acc_f")}
    if seconds is not None:
        row["seconds"] = seconds
    return row


def _method_block(trace, seed, rte_retrain, alphas, extra=None):
    best = nets.select_best_epoch(trace)
    rec = trace.records[best]
    rte = trace.seconds
    metrics = MetricsReport(
        kl_t=rec.kl_t, kl_f=rec.kl_f, kl_last=trace.records[-1].kl_t,
        acc_t=rec.acc_t, acc_f=rec.acc_f, rte=rte,
        rte_normalized=rte / rte_retrain if rte_retrain else None,
    ).with_queries(alphas)
    block = {
        "seed": seed,
        "best": {"epoch": best, **metrics.to_dict()},
        "epochs": [asdict(r) for r in trace.records],
    }
    if extra:
        block.update(extra)
    return block


def _safe_kl(ref, cand):
    try:
        return mean_kl(ref, cand)
    except SupportError:
        return math.inf


def _proxy_method(kind, plan, train, test, split, initial, monitor, seed, rte_retrain, retrained):
    start = time.perf_counter()
    pair = _proxies.fit(
        kind, train, split, ridge=plan.ridge,
        shared_sigma_from_full=plan.shared_sigma_from_full, qda_full_cov=plan.qda_full_cov,
    )
    base_train = initial.logits(train.features)
    search = find_eta_max(base_train, pair, train, tol=plan.tol)
    eta = 1.0 if pair.is_dirac else search.eta_max
    target_model = UnlearnedModel(initial, pair, eta)
    target = target_model.predict_proba(train.features, train.sample_id)
    forget = split.forget_mask(train)
    p_initial = softmax(base_train)
    if pair.is_dirac:
        admissibility = None
    else:
        admissibility = check_admissibility(p_initial, pair, train).to_dict()
    analytic_seconds = time.perf_counter() - start

    student = initial.copy()
    trace = nets.distill(student, target, train, replace(plan.unlearn, seed=seed), monitor)
    trace.records = [replace(r, seconds=r.seconds + analytic_seconds) for r in trace.records]

    Xf, idf = train.features[forget], train.sample_id[forget]
    target_block = {
        "eta_max": search.eta_max,
        "eta_used": eta,
        "admissible": search.admissible,
        "zero_bracket": list(search.zero_bracket) if isinstance(search.zero_bracket, tuple) else search.zero_bracket,
        "admissibility": admissibility,
        "kl_t": _safe_kl(retrained.predict_proba(test.features), target_model.predict_proba(test.features, test.sample_id)),
        "kl_f": _safe_kl(retrained.predict_proba(Xf), target_model.predict_proba(Xf, idf)),
        "kl_net_to_proxy_before": _safe_kl(target, p_initial),
        "kl_net_to_proxy_after": _safe_kl(target, student.predict_proba(train.features)),
        "seconds": analytic_seconds,
    }
    return _method_block(trace, seed, rte_retrain, plan.alphas, {"target": target_block})


def _run_cell(args):
    plan, dataset_name, arch, scenario_text, seed = args
    scenario = parse_scenario(scenario_text)
    scenario_type, sub_key = _scenario_key(scenario)
    entry = {"seed": seed}
    try:
        train, test = _make_data(plan.datasets[dataset_name])
        split = build_scenario(train, scenario)
        C, d = train.n_classes, train.dim
        initial = nets.make_arch(arch, d, C, plan.hidden, seed=seed)
        nets.train_ce(initial, train, replace(plan.train, seed=seed))
        t0 = time.perf_counter()
        retrained, _ = nets.baseline("Retrain", initial, train, split, replace(plan.train, seed=seed))
        rte_retrain = time.perf_counter() - t0
        forget = split.forget_mask(train)
        monitor = nets.Monitor(
            test=(test.features, test.labels),
            forget=(train.features[forget], train.labels[forget]),
            reference=retrained,
        )
        entry["initial"] = _reference_row(initial, monitor)
        entry["retrained"] = _reference_row(retrained, monitor, rte_retrain)
        entry["rte_retrain"] = rte_retrain
        for method in plan.methods:
            try:
                if method in nets.BASELINES:
                    _, trace = nets.baseline(
                        method, initial, train, split, replace(plan.unlearn, seed=seed), monitor,
                        ga_lr_scale=plan.ga_lr_scale, ga_epoch_cap=plan.ga_epoch_cap,
                    )
                    entry[method] = _method_block(trace, seed, rte_retrain, plan.alphas)
                else:
                    entry[method] = _proxy_method(
                        method, plan, train, test, split, initial, monitor, seed, rte_retrain, retrained,
                    )
            except Exception as exc:  # recorded, the run continues
                entry[method] = {"seed": seed, "error": {"type": type(exc).__name__, "message": str(exc)}}
    except Exception as exc:
        entry["error"] = {"type": type(exc).__name__, "message": str(exc)}
    meta = {"scenario": scenario_type, "dataset": dataset_name, "arch": arch}
    return dataset_name, scenario_type, arch, sub_key, entry, meta


def run_benchmark(plan: BenchmarkPlan, jobs: int = 1) -> ResultsTree:
    """Run every (dataset, arch, scenario, seed) cell of the plan.

    Cells are independent and may run in ``jobs`` worker processes; results
    are merged in plan order so the tree does not depend on scheduling.
    """
    plan.validate()
    cells = [
        (plan, ds, arch, sc, seed)
        for ds in plan.datasets
        for arch in plan.archs
        for sc in plan.scenarios
        for seed in plan.seeds
    ]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outputs = list(pool.map(_run_cell, cells))
    else:
        outputs = [_run_cell(c) for c in cells]
    tree = ResultsTree()
    for dataset_name, scenario_type, arch, sub_key, entry, meta in outputs:
        tree.add(dataset_name, plan.arch_kind, scenario_type, arch, sub_key, entry, meta)
    return tree


# -- reporting --------------------------------------------------------------

_REPORT_COLUMNS = (
    ("KL_t", "kl_t"),
    ("KL_last", "kl_last"),
    ("KL_f", "kl_f"),
    ("Acc_t", "acc_t"),
    ("Acc_f", "acc_f"),
    ("RTE", "rte_normalized"),
)
_REFERENCE_ROWS = ("initial", "retrained")


def _aggregate(entries, method):
    out = {}
    for label, key in _REPORT_COLUMNS:
        vals = []
        for e in entries:
            block = e.get(method)
            if not isinstance(block, dict) or "error" in block:
                continue
            src = block.get("best", block)
            v = src.get(key)
            if v is not None:
                vals.append(float(v))
        if vals:
            arr = np.asarray(vals)
            out[label] = (float(arr.mean()), float(arr.std()), len(vals))
        else:
            out[label] = None
    return out


def _methods_in(entries, include_reference):
    seen = []
    for e in entries:
        for k, v in e.items():
            if k in ("seed", "error", "rte_retrain") or not isinstance(v, dict):
                continue
            if k in _REFERENCE_ROWS and not include_reference:
                continue
            if k not in seen:
                seen.append(k)
    return seen


def report(tree: ResultsTree, style: str = "table", precision: int = 2, include_reference: bool = False) -> str:
    """Per-method ``mean +- std`` over seeds for every cell of the tree."""
    if style not in ("table", "csv"):
        raise ValueError("style must be 'table' or 'csv'")
    cell_cols = ["dataset", "arch_kind", "file", "arch", "sub_key", "method"]
    metric_cols = [label for label, _ in _REPORT_COLUMNS]
    rows = []
    for dataset, arch_kind, stem, arch, sub_key, entries in tree.cells():
        for method in _methods_in(entries, include_reference):
            rows.append(([dataset, arch_kind, stem, arch, sub_key, method], _aggregate(entries, method)))

    if style == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        header = cell_cols + [f"{m}_{s}" for m in metric_cols for s in ("mean", "std")] + ["n_seeds"]
        w.writerow(header)
        for cell, agg in rows:
            vals, n = [], 0
            for m in metric_cols:
                a = agg[m]
                vals += ["", ""] if a is None else [repr(a[0]), repr(a[1])]
                n = max(n, 0 if a is None else a[2])
            w.writerow(cell + vals + [n])
        return buf.getvalue()

    def fmt(a):
        if a is None:
            return "-"
        return f"{a[0]:.{precision}f} ± {a[1]:.{precision}f}"

    header = cell_cols + metric_cols
    table = [header] + [cell + [fmt(agg[m]) for m in metric_cols] for cell, agg in rows]
    widths = [max(len(r[i]) for r in table) for i in range(len(header))]
    lines = ["  ".join(c.ljust(widths[i]) for i, c in enumerate(r)).rstrip() for r in table]
    return "\n".join(lines) + "\n"
