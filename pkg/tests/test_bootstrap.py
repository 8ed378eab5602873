"""Double parametric bootstrap: determinism, pipelines, ratio tables."""

import numpy as np
import pytest

from asterenv.bootstrap import (
    BootstrapConfig,
    _run_pipeline,
    mle_reference_bootstrap,
    ratio_table,
    run_double_bootstrap,
    run_first_level,
    write_report,
)
from asterenv.envelope import select_structure
from asterenv.errors import BootstrapError
from asterenv.fitness import FitnessQuery
from asterenv.model import fit_mle
from asterenv.scenario import ScenarioSpec, generate_scenario


def small_setup(seed=3, n=300):
    sc = generate_scenario(
        ScenarioSpec(n_individuals=n, graph_kind="chain", quadratic=True,
                     true_subspace=(1, 2)),
        seed=seed,
    )
    model = sc.model()
    fit = fit_mle(model)
    sel = select_structure(model, fit, "subspace", "bic")
    idx = [0, 5, 17]
    query = FitnessQuery.from_rows(
        model.M[idx], offset=model.offset[idx], labels=("a", "b", "c")
    )
    return model, fit, sel, query


@pytest.fixture(scope="module")
def setup():
    return small_setup()


class TestConfig:
    def test_minimum_counts(self, setup):
        _, _, _, query = setup
        with pytest.raises(ValueError):
            BootstrapConfig(B=1, K=2, seed=0, query=query)
        with pytest.raises(ValueError):
            BootstrapConfig(B=2, K=1, seed=0, query=query)

    def test_seed_mandatory(self, setup):
        _, _, _, query = setup
        with pytest.raises(ValueError):
            BootstrapConfig(B=2, K=2, seed=None, query=query)


class TestDeterminism:
    def test_bit_identical_reruns(self, setup):
        model, fit, sel, query = setup
        cfg = BootstrapConfig(B=3, K=2, seed=11, query=query)
        r1 = run_double_bootstrap(model, fit, sel, cfg)
        r2 = run_double_bootstrap(model, fit, sel, cfg)
        np.testing.assert_array_equal(r1.envelope.first_g, r2.envelope.first_g)
        np.testing.assert_array_equal(r1.envelope.second_g, r2.envelope.second_g)
        np.testing.assert_array_equal(r1.se_env, r2.se_env)
        np.testing.assert_array_equal(r1.se_mle, r2.se_mle)

    def test_worker_count_invariance(self, setup, tmp_path):
        model, fit, sel, query = setup
        outputs = []
        for jobs in (1, 2):
            cfg = BootstrapConfig(B=4, K=2, seed=11, query=query, n_jobs=jobs)
            rep = run_double_bootstrap(model, fit, sel, cfg)
            d = tmp_path / f"jobs{jobs}"
            write_report(rep, d)
            outputs.append(d)
        for name in ("report.csv", "replicates.csv", "meta.json"):
            assert (outputs[0] / name).read_bytes() == (outputs[1] / name).read_bytes()

    def test_seed_changes_results(self, setup):
        model, fit, sel, query = setup
        r1 = run_double_bootstrap(
            model, fit, sel, BootstrapConfig(B=3, K=2, seed=1, query=query)
        )
        r2 = run_double_bootstrap(
            model, fit, sel, BootstrapConfig(B=3, K=2, seed=2, query=query)
        )
        assert not np.array_equal(r1.envelope.first_g, r2.envelope.first_g)


class TestPipelines:
    def test_smoke_positive_ses(self, setup):
        model, fit, sel, query = setup
        rep = run_double_bootstrap(
            model, fit, sel, BootstrapConfig(B=2, K=2, seed=5, query=query)
        )
        assert (rep.se_env > 0).all()
        assert (rep.se_mle > 0).all()
        # the smoothed estimate is exactly the mean of first-level values
        np.testing.assert_array_equal(
            rep.g_env_hat, rep.envelope.first_g.mean(axis=0)
        )

    def test_forced_full_equals_reference(self, setup):
        model, fit, sel, query = setup
        k = model.interest_dim
        cfg = BootstrapConfig(
            B=3, K=2, seed=9, query=query,
            fixed_structure=tuple(range(1, k + 1)),
        )
        env = _run_pipeline(model, cfg, fit.beta_hat, "envelope",
                            warm_fisher=fit.Sigma_hat)
        ref = mle_reference_bootstrap(model, fit, cfg)
        np.testing.assert_array_equal(env.first_g, ref.first_g)
        np.testing.assert_array_equal(env.second_g, ref.second_g)
        np.testing.assert_array_equal(env.se, ref.se)

    def test_selection_varies_across_replicates(self):
        # a noisier scenario: the per-replicate selected structure is
        # itself random, and the log records it
        model, fit, sel, query = small_setup(seed=8, n=120)
        cfg = BootstrapConfig(B=24, K=2, seed=13, query=query)
        first = run_first_level(model, cfg, sel.beta_env, sel.solutions)
        labels = {first[b]["label"] for b in range(cfg.B)}
        assert len(labels) >= 2

    def test_replicates_satisfy_observed_equals_expected(self, setup):
        # every refit audits M_env^T mu = M_env^T Y in its own model
        model, fit, sel, query = setup
        rep = run_double_bootstrap(
            model, fit, sel, BootstrapConfig(B=3, K=2, seed=21, query=query)
        )
        assert rep.envelope.max_oee < 1e-6
        assert rep.reference.max_oee < 1e-6

    def test_ratio_table_shape_and_order(self, setup):
        model, fit, sel, query = setup
        rep = run_double_bootstrap(
            model, fit, sel, BootstrapConfig(B=3, K=2, seed=5, query=query)
        )
        rows = ratio_table(rep, top_n=2)
        assert [r["profile"] for r in rows] == sorted(
            [r["profile"] for r in rows],
            key=lambda p: -rep.g_env_hat[list(query.labels).index(p)],
        )
        assert sum(r["top"] for r in rows) == 2
        for r in rows:
            assert r["ratio"] == pytest.approx(r["se_mle"] / r["se_env"], rel=1e-12)

    def test_se_scales_down_with_B(self):
        # dispersion of the SE estimate shrinks as B grows
        model, fit, sel, query = small_setup(seed=4, n=250)
        ses_small, ses_big = [], []
        for seed in range(4):
            r_small = run_double_bootstrap(
                model, fit, sel,
                BootstrapConfig(B=4, K=2, seed=100 + seed, query=query),
            )
            r_big = run_double_bootstrap(
                model, fit, sel,
                BootstrapConfig(B=16, K=2, seed=200 + seed, query=query),
            )
            ses_small.append(r_small.se_env[0])
            ses_big.append(r_big.se_env[0])
        assert np.std(ses_big) < np.std(ses_small) * 1.5


class TestFailureHandling:
    def test_redraw_cap_aborts(self, setup, monkeypatch):
        # degenerate refits are redrawn from fresh streams; more than the
        # capped fraction aborts with a diagnostic
        model, fit, sel, query = setup
        import asterenv.bootstrap as bs
        from asterenv.errors import NumericalError

        real_fit = bs.fit_mle
        calls = {"n": 0}

        def flaky_fit(*args, **kwargs):
            calls["n"] += 1
            if calls["n"] % 3 == 0:  # a third of refits degenerate
                raise NumericalError("synthetic boundary refit")
            return real_fit(*args, **kwargs)

        monkeypatch.setattr(bs, "fit_mle", flaky_fit)
        cfg = BootstrapConfig(B=12, K=2, seed=3, query=query)
        with pytest.raises(BootstrapError, match="redraw"):
            bs.run_first_level(model, cfg, sel.beta_env, sel.solutions)

    def test_redraws_within_cap_complete(self, setup, monkeypatch):
        model, fit, sel, query = setup
        import asterenv.bootstrap as bs
        from asterenv.errors import NumericalError

        real_fit = bs.fit_mle
        failed = {"done": False}

        def once_flaky(*args, **kwargs):
            if not failed["done"]:
                failed["done"] = True
                raise NumericalError("synthetic boundary refit")
            return real_fit(*args, **kwargs)

        monkeypatch.setattr(bs, "fit_mle", once_flaky)
        cfg = BootstrapConfig(B=12, K=2, seed=3, query=query)
        first = bs.run_first_level(model, cfg, sel.beta_env, sel.solutions)
        assert sum(first[b]["redraws"] for b in range(cfg.B)) == 1

    def test_write_report_files(self, setup, tmp_path):
        model, fit, sel, query = setup
        rep = run_double_bootstrap(
            model, fit, sel, BootstrapConfig(B=2, K=2, seed=5, query=query)
        )
        write_report(rep, tmp_path)
        assert (tmp_path / "report.csv").exists()
        assert (tmp_path / "replicates.csv").exists()
        meta = (tmp_path / "meta.json").read_text()
        assert "sd-over-b-of-second-level-means" in meta
        lines = (tmp_path / "replicates.csv").read_text().splitlines()
        # header + (B first-level + B*K second-level) rows per pipeline
        assert len(lines) == 1 + 2 * (2 + 2 * 2)
