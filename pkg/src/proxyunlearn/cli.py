"""Command-line interface.

Exit codes: 0 on success, 1 for user errors (bad flags, missing or invalid
files), 2 for numerical failures. Errors are reported on stderr as one line
``error: <origin>: <type>: <message>``. Relative output paths are resolved
against ``$PROXYUNLEARN_OUTPUT_DIR`` when it is set.
"""

from __future__ import annotations

import argparse
import hashlib
import io
import json
import os
import sys
from dataclasses import replace

import numpy as np

from . import datagen, evaluation, nets, proxies, unlearn
from .numkit import DegenerateLogitsError, SupportError, encode_nonfinite, softmax

OUTPUT_ENV = "PROXYUNLEARN_OUTPUT_DIR"
EXIT_OK, EXIT_USER, EXIT_NUMERIC = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _out_path(path):
    base = os.environ.get(OUTPUT_ENV)
    if base and not os.path.isabs(path):
        return os.path.join(base, path)
    return path


def _require(path):
    if not os.path.exists(path):
        raise UsageError(f"no such file: {path}")
    return path


def _emit(obj):
    print(json.dumps(encode_nonfinite(obj), indent=1, sort_keys=True, allow_nan=False))


# -- artifact helpers -------------------------------------------------------


def _load_data(path):
    return datagen.load_dataset(_require(path))


def _split(ds, text):
    if text.strip().lower() == "none":
        return datagen.ForgetSplit.empty(ds)
    return datagen.build_scenario(ds, datagen.parse_scenario(text))


def _write_probits(path, ids, probits):
    buf = io.StringIO()
    buf.write(f"{probits.shape[0]} {probits.shape[1]}\n")
    for i, row in zip(ids, probits):
        buf.write(f"{int(i)} " + " ".join(repr(float(v)) for v in row) + "\n")
    datagen._atomic_write(path, buf.getvalue())


def _read_probits(path):
    with open(_require(path)) as fh:
        n, C = (int(v) for v in fh.readline().split())
        rows = [line.split() for line in fh if line.strip()]
    if len(rows) != n or any(len(r) != C + 1 for r in rows):
        raise UsageError(f"malformed probit file {path}")
    ids = np.array([int(r[0]) for r in rows])
    return ids, np.array([[float(v) for v in r[1:]] for r in rows])


def _train_config(args, **overrides):
    cfg = nets.TrainConfig(
        learning_rate=args.lr, epochs=args.epochs, batch_size=args.batch_size, seed=args.seed,
        optimizer=args.optimizer, lr_decay=args.lr_decay,
    )
    return replace(cfg, **overrides)


def _add_train_flags(p, epochs=20, lr=1e-3, decay=1.0):
    p.add_argument("--epochs", type=int, default=epochs, help="training epochs")
    p.add_argument("--lr", type=float, default=lr, help="learning rate")
    p.add_argument("--batch-size", type=int, default=64, help="mini-batch size")
    p.add_argument("--optimizer", choices=nets.OPTIMIZERS, default="adam", help="optimizer")
    p.add_argument("--lr-decay", type=float, default=decay, help="multiplicative decay per epoch")


# -- subcommands ------------------------------------------------------------


def cmd_gen_data(args):
    spec = datagen.make_mixture_spec(
        args.n_classes, args.n_subclasses, args.dim, args.class_sep, args.subclass_sep,
        args.noise, not args.homoscedastic, args.seed,
    )
    ds = datagen.generate(spec, args.n_per_subclass, seed=args.seed)
    datagen.save_dataset(ds, _out_path(args.out))
    info = {"path": _out_path(args.out), "n": len(ds), "fingerprint": ds.fingerprint()}
    if args.test_out:
        test = datagen.generate(spec, args.n_test_per_subclass, seed=args.seed + 1, id_offset=len(ds))
        datagen.save_dataset(test, _out_path(args.test_out))
        info["test_path"] = _out_path(args.test_out)
    _emit(info)


def cmd_train(args):
    ds = _load_data(args.data)
    if args.scenario:
        ds = ds.take(_split(ds, args.scenario).retain_mask(ds))
    model = nets.make_arch(args.arch, ds.dim, ds.n_classes, args.hidden, seed=args.seed)
    trace = nets.train_ce(model, ds, _train_config(args))
    nets.save_model(model, _out_path(args.out))
    if args.trace:
        datagen._atomic_write(_out_path(args.trace), trace.to_json() + "\n")
    _emit({"path": _out_path(args.out), "final_loss": trace.records[-1].loss if len(trace) else trace.initial_loss})


def cmd_fit_proxy(args):
    ds = _load_data(args.data)
    split = _split(ds, args.scenario)
    pair = proxies.fit(
        args.kind, ds, split, ridge=args.ridge,
        shared_sigma_from_full=args.shared_sigma_from_full, qda_full_cov=args.qda_full_cov,
    )
    proxies.save_pair(pair, _out_path(args.out))
    _emit({"path": _out_path(args.out), "kind": pair.kind, "n_forget": pair.n_forget})


def _check_fit(pair, ds):
    if pair.fitted_on != ds.fingerprint():
        raise UsageError("proxy was fitted on a different dataset")


def cmd_eta_search(args):
    ds = _load_data(args.data)
    model = nets.load_model(_require(args.model))
    pair = proxies.load_pair(_require(args.proxy))
    _check_fit(pair, ds)
    result = unlearn.find_eta_max(model, pair, ds, tol=args.tol)
    if args.curve:
        samples = unlearn.h_curve(model, pair, ds) + [tuple(s) for s in result.h_samples]
        unlearn.write_h_curve_csv(_out_path(args.curve), sorted(set(samples)))
    out = {"eta_max": result.eta_max, "admissible": result.admissible,
           "zero_bracket": result.to_dict()["zero_bracket"]}
    print(f"eta_max = {result.eta_max}")
    print(f"admissible = {str(result.admissible).lower()}")
    _emit(out)


def cmd_unlearn(args):
    ds = _load_data(args.data)
    model = nets.load_model(_require(args.model))
    pair = proxies.load_pair(_require(args.proxy))
    _check_fit(pair, ds)
    if args.eta is not None:
        eta = args.eta
    elif pair.is_dirac:
        eta = 1.0
    else:
        eta = unlearn.find_eta_max(model, pair, ds, tol=args.tol).eta_max
    um = unlearn.UnlearnedModel(model, pair, eta)
    probits = um.predict_proba(ds.features, ds.sample_id)
    _write_probits(_out_path(args.out), ds.sample_id, probits)
    report = {"path": _out_path(args.out), "eta": eta}
    if not pair.is_dirac:
        report["admissibility"] = unlearn.check_admissibility(softmax(model.logits(ds.features)), pair, ds).to_dict()
    _emit(report)


def cmd_distill(args):
    ds = _load_data(args.data)
    model = nets.load_model(_require(args.model))
    ids, targets = _read_probits(args.targets)
    if not np.array_equal(ids, ds.sample_id):
        raise UsageError("target ids do not match the dataset")
    trace = nets.distill(model, targets, ds, _train_config(args))
    nets.save_model(model, _out_path(args.out))
    if args.trace:
        datagen._atomic_write(_out_path(args.trace), trace.to_json() + "\n")
    _emit({"path": _out_path(args.out), "final_loss": trace.records[-1].loss if len(trace) else trace.initial_loss})


def cmd_baseline(args):
    ds = _load_data(args.data)
    model = nets.load_model(_require(args.model))
    split = _split(ds, args.scenario)
    out, trace = nets.baseline(args.kind, model, ds, split, _train_config(args),
                               ga_lr_scale=args.ga_lr_scale, ga_epoch_cap=args.ga_epoch_cap)
    nets.save_model(out, _out_path(args.out))
    if args.trace:
        datagen._atomic_write(_out_path(args.trace), trace.to_json() + "\n")
    _emit({"path": _out_path(args.out), "kind": args.kind, "epochs": len(trace)})


def cmd_benchmark(args):
    plan = evaluation.load_plan(_require(args.config))
    if args.seed is not None:
        plan = replace(plan, seeds=[args.seed])
    tree = evaluation.run_benchmark(plan, jobs=args.jobs)
    root = _out_path(args.out) if args.out else os.environ.get(OUTPUT_ENV, "results")
    tree.write(root)
    _emit({"root": root, "files": [rel for rel, _ in tree.files()],
           "canonical_sha256": hashlib.sha256(tree.canonical().encode()).hexdigest()})


def cmd_report(args):
    root = _require(args.results)
    tree = evaluation.ResultsTree.read(root)
    if not tree.data:
        raise UsageError(f"no results found under {root}")
    text = evaluation.report(tree, args.style, args.precision, args.include_reference)
    if args.out:
        datagen._atomic_write(_out_path(args.out), text)
    else:
        sys.stdout.write(text)


def cmd_stein(args):
    print(evaluation.stein_queries(args.alpha, args.kl))


# -- parser -----------------------------------------------------------------


def build_parser():
    parser = _Parser(prog="proxyunlearn", description="Proxy-based unlearning of small classifiers.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--seed", type=int, default=0, help="random seed")
        p.set_defaults(func=fn)
        return p

    p = add("gen-data", cmd_gen_data, "Generate a synthetic Gaussian-mixture dataset.")
    p.add_argument("--out", required=True, help="dataset file to write")
    p.add_argument("--test-out", help="optional held-out dataset from the same law")
    p.add_argument("--n-classes", type=int, default=2, help="number of classes")
    p.add_argument("--n-subclasses", type=int, default=2, help="Gaussian components per class")
    p.add_argument("--dim", type=int, default=2, help="feature dimension")
    p.add_argument("--class-sep", type=float, default=4.0, help="spread of class centers")
    p.add_argument("--subclass-sep", type=float, default=2.5, help="spread of components around their class center")
    p.add_argument("--noise", type=float, default=1.0, help="component standard deviation")
    p.add_argument("--homoscedastic", action="store_true", help="one covariance for every component")
    p.add_argument("--n-per-subclass", type=int, default=100, help="training samples per component")
    p.add_argument("--n-test-per-subclass", type=int, default=100, help="held-out samples per component")

    p = add("train", cmd_train, "Train a classifier from scratch by cross-entropy.")
    p.add_argument("--data", required=True, help="training dataset file")
    p.add_argument("--out", required=True, help="checkpoint to write")
    p.add_argument("--arch", choices=nets.ARCHS, default="mlp1", help="network shape")
    p.add_argument("--hidden", type=int, default=64, help="hidden layer width")
    p.add_argument("--scenario", help="train on the retain set of this scenario only")
    p.add_argument("--trace", help="write the epoch trace as JSON")
    _add_train_flags(p, epochs=30)

    def proxy_flags(p):
        p.add_argument("--ridge", type=float, default=1e-6, help="relative covariance ridge")
        p.add_argument("--shared-sigma-from-full", dest="shared_sigma_from_full",
                       action=argparse.BooleanOptionalAction, default=True,
                       help="reuse the full-data covariance for the retain proxy")
        p.add_argument("--qda-full-cov", action="store_true", help="full instead of diagonal QDA covariances")

    p = add("fit-proxy", cmd_fit_proxy, "Fit a proxy pair for a forgetting scenario.")
    p.add_argument("--data", required=True, help="training dataset file")
    p.add_argument("--scenario", required=True, help="class:Y, subclass:Y:S, random:N[:SEED] or none")
    p.add_argument("--kind", required=True, choices=proxies.KINDS, help="proxy family")
    p.add_argument("--out", required=True, help="file to write")
    proxy_flags(p)

    p = add("eta-search", cmd_eta_search, "Search the largest safe scale of the unlearning shift.")
    p.add_argument("--data", required=True, help="training dataset file")
    p.add_argument("--model", required=True, help="classifier checkpoint")
    p.add_argument("--proxy", required=True, help="proxy pair file from fit-proxy")
    p.add_argument("--tol", type=float, default=1e-4, help="line-search tolerance in eta")
    p.add_argument("--curve", help="write the h(eta) samples as CSV")

    p = add("unlearn", cmd_unlearn, "Write the unlearned target probits on the training set.")
    p.add_argument("--data", required=True, help="training dataset file")
    p.add_argument("--model", required=True, help="classifier checkpoint")
    p.add_argument("--proxy", required=True, help="proxy pair file from fit-proxy")
    p.add_argument("--out", required=True, help="file to write")
    p.add_argument("--eta", type=float, help="fixed scale (default: searched eta_max)")
    p.add_argument("--tol", type=float, default=1e-4, help="line-search tolerance in eta")

    p = add("distill", cmd_distill, "Fine-tune a classifier onto target probits.")
    p.add_argument("--data", required=True, help="training dataset file")
    p.add_argument("--model", required=True, help="classifier checkpoint")
    p.add_argument("--targets", required=True, help="probit file from unlearn")
    p.add_argument("--out", required=True, help="file to write")
    p.add_argument("--trace", help="write the epoch trace as JSON")
    _add_train_flags(p, decay=0.95)

    p = add("baseline", cmd_baseline, "Run a reference unlearning method.")
    p.add_argument("--kind", required=True, choices=nets.BASELINES, help="method")
    p.add_argument("--data", required=True, help="training dataset file")
    p.add_argument("--model", required=True, help="classifier checkpoint")
    p.add_argument("--scenario", required=True, help="class:Y, subclass:Y:S or random:N[:SEED]")
    p.add_argument("--out", required=True, help="file to write")
    p.add_argument("--trace", help="write the epoch trace as JSON")
    p.add_argument("--ga-lr-scale", type=float, default=0.1, help="ascent learning-rate factor")
    p.add_argument("--ga-epoch-cap", type=int, default=5, help="maximum ascent epochs")
    _add_train_flags(p, decay=0.95)

    p = add("benchmark", cmd_benchmark, "Run a benchmark plan and write the results tree.")
    p.set_defaults(seed=None)
    p.add_argument("--config", required=True, help="INI plan file")
    p.add_argument("--out", help="results root (default: $%s or ./results)" % OUTPUT_ENV)
    p.add_argument("--jobs", type=int, default=1, help="parallel cells")

    p = add("report", cmd_report, "Summarize a results tree.")
    p.add_argument("--results", required=True, help="results root")
    p.add_argument("--style", choices=("table", "csv"), default="table", help="aligned table or CSV")
    p.add_argument("--precision", type=int, default=2, help="decimals in the table")
    p.add_argument("--include-reference", action="store_true", help="also list initial and retrained rows")
    p.add_argument("--out", help="write to a file instead of stdout")

    p = add("stein", cmd_stein, "Queries an attacker needs to tell two models apart.")
    p.add_argument("--alpha", type=float, required=True, help="false-positive rate in (0, 0.5)")
    p.add_argument("--kl", type=float, required=True, help="expected KL between the two models")
    return parser


_NUMERIC = (FloatingPointError, np.linalg.LinAlgError, SupportError, DegenerateLogitsError)


def _origin(exc):
    """Innermost package module on the traceback."""
    origin, tb = "cli", exc.__traceback__
    while tb is not None:
        name = tb.tb_frame.f_globals.get("__name__", "")
        if name.startswith("proxyunlearn."):
            origin = name.rsplit(".", 1)[-1]
        tb = tb.tb_next
    return origin


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args.func(args)
        return EXIT_OK
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"error: cli: UsageError: {exc}", file=sys.stderr)
        return EXIT_USER
    except _NUMERIC as exc:
        print(f"error: {_origin(exc)}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError, OSError) as exc:
        print(f"error: {_origin(exc)}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_USER


if __name__ == "__main__":
    sys.exit(main())
