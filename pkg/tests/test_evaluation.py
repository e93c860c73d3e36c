import json
import math
import time

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from proxyunlearn import evaluation
from proxyunlearn.evaluation import (
    UNBOUNDED,
    MetricsReport,
    ResultsTree,
    canonical_json,
    mean_kl,
    parse_plan,
    report,
    stein_queries,
)
from proxyunlearn.numkit import SupportError


def _raw_stein(alpha, kl):
    return (1 - 2 * alpha) * math.log((1 - alpha) / alpha) / kl


class TestStein:
    def test_worked_values(self):
        assert _raw_stein(0.001, 0.05) == pytest.approx(137.8588, abs=1e-3)
        assert stein_queries(0.001, 0.05) == 138
        assert _raw_stein(0.001, 0.1) == pytest.approx(68.929, abs=1e-3)
        assert stein_queries(0.001, 0.1) == 69

    def test_limits(self):
        assert stein_queries(0.01, 0.0) == UNBOUNDED
        assert stein_queries(0.01, math.inf) == 1
        assert stein_queries(0.49, 100.0) == 1

    @pytest.mark.parametrize("alpha", [0.0, 0.5, -0.1, 0.7])
    def test_alpha_range(self, alpha):
        with pytest.raises(ValueError):
            stein_queries(alpha, 0.1)

    def test_negative_kl(self):
        with pytest.raises(ValueError):
            stein_queries(0.01, -1e-3)

    @given(st.floats(1e-6, 0.49), st.floats(1e-6, 10), st.floats(1e-6, 10))
    def test_monotone_in_kl(self, alpha, a, b):
        lo, hi = sorted((a, b))
        assert stein_queries(alpha, lo) >= stein_queries(alpha, hi) >= 1


class TestMeanKl:
    def test_value(self):
        assert mean_kl([[1.0, 0.0], [0.5, 0.5], [0.9, 0.1]], [[0.5, 0.5]] * 3) == pytest.approx(
            0.35373712924281414, abs=1e-15
        )

    def test_support(self):
        with pytest.raises(SupportError) as info:
            mean_kl([[0.5, 0.5], [0.2, 0.8]], [[0.5, 0.5], [1.0, 0.0]])
        assert info.value.rows == [1]

    def test_shape(self):
        with pytest.raises(ValueError):
            mean_kl([[0.5, 0.5]], [[0.5, 0.5], [0.5, 0.5]])


class TestMetricsReport:
    def test_queries(self):
        r = MetricsReport(kl_t=0.05, kl_f=0.0).with_queries([0.001])
        assert r.n_alpha["0.001"] == {"t": 138, "f": UNBOUNDED}

    def test_validation(self):
        with pytest.raises(ValueError):
            MetricsReport(acc_t=1.5)
        with pytest.raises(ValueError):
            MetricsReport(kl_f=-0.1)


class TestCanonicalJson:
    def test_strips_timings_and_sorts(self):
        text = canonical_json({"b": 1, "a": {"seconds": 3.0, "kl_t": 0.1, "rte": 2}})
        assert json.loads(text) == {"a": {"kl_t": 0.1}, "b": 1}
        assert text.index('"a"') < text.index('"b"')

    def test_non_finite(self):
        out = json.loads(canonical_json({"x": math.inf, "y": [-math.inf, math.nan]}))
        assert out == {"x": "inf", "y": ["-inf", "nan"]}


def _entry(seed, kl):
    return {
        "seed": seed,
        "rte_retrain": 0.1,
        "FT": {"seed": seed, "best": {"epoch": 0, "kl_t": kl, "kl_f": 2 * kl, "acc_t": 0.9, "rte_normalized": 0.5}},
        "initial": {"kl_t": 1.0},
    }


class TestResultsTree:
    def _tree(self):
        tree = ResultsTree()
        tree.add("ds", "gaussian", "subclass", "mlp1", "0:1", _entry(0, 0.1), meta={"n": 4})
        tree.add("ds", "gaussian", "subclass", "mlp1", "0:1", _entry(1, 0.3), meta={"n": 4})
        tree.add("ds", "gaussian", "class", "mlp1", "0", _entry(0, 0.2))
        return tree

    def test_layout(self):
        tree = self._tree()
        assert [rel for rel, _ in tree.files()] == [
            "ds/gaussian/class_mlp1_raw.json", "ds/gaussian/subclass_mlp1_raw.json",
        ]
        sub = tree.data["ds"]["gaussian"]["subclass_mlp1_raw"]["mlp1"]
        assert sub["meta"] == {"n": 4} and len(sub["results"]["0:1"]) == 2
        assert list(tree.data["ds"]["gaussian"]["class_mlp1_raw"]["mlp1"]) == ["0"]

    def test_disk_round_trip(self, tmp_path):
        tree = self._tree()
        tree.write(tmp_path)
        assert (tmp_path / "ds" / "gaussian" / "class_mlp1_raw.json").exists()
        assert ResultsTree.read(tmp_path) == tree
        assert ResultsTree.parse(tree.serialize()) == tree

    def test_report_table(self):
        text = report(self._tree())
        lines = text.splitlines()
        assert lines[0].split()[:6] == ["dataset", "arch_kind", "file", "arch", "sub_key", "method"]
        sub = [l for l in lines if "subclass" in l][0]
        # population std of {0.1, 0.3}
        assert "0.20 ± 0.10" in sub
        assert "initial" not in text
        assert "initial" in report(self._tree(), include_reference=True)

    def test_report_csv(self):
        import csv
        import io

        rows = list(csv.DictReader(io.StringIO(report(self._tree(), style="csv"))))
        sub = [r for r in rows if r["file"] == "subclass_mlp1_raw"][0]
        assert float(sub["KL_t_mean"]) == pytest.approx(0.2)
        assert float(sub["KL_t_std"]) == pytest.approx(0.1)
        assert sub["n_seeds"] == "2"
        assert sub["KL_last_mean"] == ""

    def test_report_style(self):
        with pytest.raises(ValueError):
            report(self._tree(), style="html")


class TestPlan:
    def test_parse(self):
        plan = parse_plan(
            "[benchmark]\nscenarios = class:0, random:5\nmethods = FT, LDA\nseeds = 3, 4\n"
            "[train]\nepochs = 2\nlearning_rate = 0.01\n"
            "[dataset:tiny]\nn_per_subclass = 10\nheteroscedastic = no\n"
        )
        assert plan.scenarios == ["class:0", "random:5"]
        assert plan.seeds == [3, 4]
        assert plan.train.epochs == 2 and plan.train.learning_rate == 0.01
        assert plan.datasets["tiny"].n_per_subclass == 10
        assert plan.datasets["tiny"].heteroscedastic is False

    @pytest.mark.parametrize("text", [
        "[benchmark]\nbogus = 1\n",
        "[elsewhere]\nx = 1\n",
        "[train]\nwarmup = 3\n",
        "[benchmark]\nmethods = SCRUB\n",
        "[benchmark]\nmethods = Retrain\n",
        "[benchmark]\narchs = resnet\n",
        "[benchmark]\nscenarios = all\n",
    ])
    def test_rejects(self, text):
        with pytest.raises(ValueError):
            parse_plan(text)

    def test_demo_plan_file(self):
        from pathlib import Path

        plan = evaluation.load_plan(Path(__file__).parents[1] / "configs" / "demo.cfg")
        assert plan.name == "demo" and len(plan.methods) == 11


class TestBenchmark:
    PLAN = (
        "[benchmark]\nscenarios = subclass:0:1\nmethods = FT, LDA-2C, DIR\nseeds = 0\nhidden = 8\n"
        "[train]\nepochs = 3\n[unlearn]\nepochs = 2\n"
        "[dataset:tiny]\nn_per_subclass = 20\nn_test_per_subclass = 10\n"
    )

    def test_entry_fields(self):
        tree = evaluation.run_benchmark(parse_plan(self.PLAN))
        (_, _, stem, arch, key, entries), = list(tree.cells())
        assert (stem, arch, key) == ("subclass_mlp1_raw", "mlp1", "0:1")
        e = entries[0]
        assert {"seed", "initial", "retrained", "rte_retrain", "FT", "LDA-2C", "DIR"} <= set(e)
        assert set(e["LDA-2C"]) == {"seed", "best", "epochs", "target"}
        assert "target" not in e["FT"]
        assert e["DIR"]["target"]["admissibility"] is None
        assert 0 <= e["FT"]["best"]["epoch"] < 2

    def test_parallel_matches_serial(self):
        plan = parse_plan(self.PLAN.replace("seeds = 0", "seeds = 0, 1"))
        assert evaluation.run_benchmark(plan, jobs=2).canonical() == evaluation.run_benchmark(plan).canonical()

    def test_timing_is_not_canonical(self):
        plan = parse_plan(self.PLAN)
        a = evaluation.run_benchmark(plan)
        time.sleep(0.01)
        b = evaluation.run_benchmark(plan)
        assert a.canonical() == b.canonical()

    def test_failed_cell_is_recorded(self):
        plan = parse_plan(self.PLAN.replace("subclass:0:1", "subclass:0:7"))
        tree = evaluation.run_benchmark(plan)
        (*_, entries), = list(tree.cells())
        assert "error" in entries[0]


class TestWorkedExamples:
    def test_kl_to_self(self, rng):
        from proxyunlearn import nets

        m = nets.make_arch("mlp1", 3, 4, seed=0)
        assert evaluation.kl_to_reference(m, m, rng.standard_normal((20, 3))) == 0.0

    def test_one_hot_against_uniform(self):
        ref = np.eye(4)[[0, 1, 2, 3, 1]]
        assert mean_kl(ref, np.full((5, 4), 0.25)) == pytest.approx(math.log(4), abs=1e-15)

    def test_order_independence(self, rng):
        p = rng.dirichlet(np.ones(5), size=300)
        q = rng.dirichlet(np.ones(5), size=300)
        total = 0.0
        for i in reversed(range(300)):
            total += float(np.sum(p[i] * np.log(p[i] / q[i])))
        assert abs(mean_kl(p, q) - total / 300) < 1e-9

    @given(st.floats(1e-4, 0.1), st.floats(1e-6, 0.4), st.floats(1e-6, 0.4))
    def test_more_queries_as_alpha_shrinks(self, kl, a, b):
        lo, hi = sorted((a, b))
        assert stein_queries(lo, kl) >= stein_queries(hi, kl)

    def test_single_ft_cell(self):
        plan = parse_plan(
            "[benchmark]\nscenarios = random:5\nmethods = FT\nseeds = 0\nhidden = 4\n"
            "[train]\nepochs = 1\n[unlearn]\nepochs = 1\n[dataset:d]\nn_per_subclass = 10\nn_test_per_subclass = 5\n"
        )
        (*_, entries), = list(evaluation.run_benchmark(plan).cells())
        assert len(entries) == 1
        methods = {k for k, v in entries[0].items() if isinstance(v, dict)}
        assert methods == {"initial", "retrained", "FT"}
        assert entries[0]["FT"]["seed"] == 0

    def test_five_seed_aggregation(self):
        import csv
        import io

        plan = parse_plan(
            "[benchmark]\nscenarios = subclass:0:1\nmethods = LDA-2C, DIR-2C\nseeds = 0, 1, 2, 3, 4\nhidden = 8\n"
            "[train]\nepochs = 3\n[unlearn]\nepochs = 2\n[dataset:d]\nn_per_subclass = 20\nn_test_per_subclass = 10\n"
        )
        tree = evaluation.run_benchmark(plan)
        rows = list(csv.DictReader(io.StringIO(report(tree, style="csv"))))
        (*_, entries), = list(tree.cells())
        assert [e["seed"] for e in entries] == [0, 1, 2, 3, 4]
        for method in ("LDA-2C", "DIR-2C"):
            row = [r for r in rows if r["method"] == method][0]
            for col, key in (("KL_t", "kl_t"), ("KL_f", "kl_f"), ("Acc_t", "acc_t")):
                vals = [e[method]["best"][key] for e in entries]
                mean = sum(vals) / 5
                std = math.sqrt(sum((v - mean) ** 2 for v in vals) / 5)
                assert float(row[f"{col}_mean"]) == pytest.approx(mean, rel=1e-12)
                assert float(row[f"{col}_std"]) == pytest.approx(std, rel=1e-9, abs=1e-15)
            assert row["n_seeds"] == "5"

    def test_single_seed_std(self):
        tree = ResultsTree()
        tree.add("ds", "gaussian", "class", "mlp1", "0", _entry(0, 0.1))
        assert "0.10 ± 0.00" in report(tree)

    def test_header_only(self):
        tree = ResultsTree()
        tree.add("ds", "gaussian", "class", "mlp1", "0", {"seed": 0, "initial": {"kl_t": 1.0}})
        for style in ("table", "csv"):
            assert len(report(tree, style=style).splitlines()) == 1

    def test_csv_row_count(self):
        tree = ResultsTree()
        for sub in ("0", "1"):
            entry = _entry(0, 0.1)
            entry["GA"] = entry["FT"]
            tree.add("ds", "gaussian", "class", "mlp1", sub, entry)
        tree.add("ds", "gaussian", "random", "mlp1", "5", _entry(0, 0.1))
        # 2 methods x 2 cells + 1 method x 1 cell + header
        assert len(report(tree, style="csv").splitlines()) == 6
