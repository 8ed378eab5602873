"""Scenario generation, file formats, and the command-line interface."""

import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from asterenv.cli import main
from asterenv.dataio import ModelConfig, build_design, expand_covariates, load_data, save_data
from asterenv.envelope import eigen_decompose, select_structure
from asterenv.errors import AsterError
from asterenv.graph import load_graph, simulate, survival_fecundity_chain
from asterenv.model import fit_mle
from asterenv.scenario import ScenarioSpec, generate_scenario


class TestModelConfig:
    def test_round_trip(self, tmp_path):
        cfg = ModelConfig(
            covariates=("z1", "z2"),
            quadratic=True,
            intercept_layers=("surv", "repr", "off"),
            extra_columns=(("late", ("surv6", "surv7")),),
        )
        p = tmp_path / "model.json"
        cfg.save(p)
        assert ModelConfig.load(p) == cfg
        # byte-exact second save
        p2 = tmp_path / "model2.json"
        ModelConfig.load(p).save(p2)
        assert p.read_bytes() == p2.read_bytes()

    def test_quadratic_expansion_names(self):
        assert expand_covariates(("z1", "z2"), True) == (
            "z1", "z2", "z1^2", "z2^2", "z1*z2",
        )
        assert expand_covariates(("a",), False) == ("a",)

    def test_interest_must_be_trailing(self, tmp_path):
        d = {
            "covariates": ["z1"],
            "quadratic": False,
            "interest": ["bogus"],
        }
        p = tmp_path / "bad.json"
        p.write_text(json.dumps(d))
        with pytest.raises(AsterError, match="trailing"):
            ModelConfig.load(p)


class TestDesign:
    def test_layer_intercepts_and_covariate_placement(self):
        g = survival_fecundity_chain()
        cfg = ModelConfig(
            covariates=("z1",), quadratic=False,
            intercept_layers=("surv", "count"),
        )
        z = np.array([0.5, -1.0])
        M, offset, names, k = build_design(g, cfg, {"z1": z})
        assert names == ("surv_int", "count_int", "z1")
        assert k == 1
        np.testing.assert_array_equal(M[:, 0, 0], [1, 1])
        np.testing.assert_array_equal(M[:, 1, 1], [1, 1])
        # covariate on the fitness node only
        np.testing.assert_array_equal(M[:, 1, 2], z)
        np.testing.assert_array_equal(M[:, 0, 2], [0, 0])

    def test_unknown_layer_rejected(self):
        g = survival_fecundity_chain()
        cfg = ModelConfig(covariates=("z1",), intercept_layers=("nope",))
        with pytest.raises(AsterError, match="layer"):
            build_design(g, cfg, {"z1": np.zeros(3)})


class TestDataFiles:
    def test_round_trip(self, tmp_path):
        g = survival_fecundity_chain()
        ga = g.compile()
        rng = np.random.default_rng(90)
        Y = simulate(ga, np.full((20, 2), 0.4), rng)
        cov = {"z1": rng.uniform(-1, 1, 20)}
        p = tmp_path / "data.csv"
        save_data(p, g, Y, cov)
        Y2, cov2, ids = load_data(p, g)
        np.testing.assert_array_equal(Y, Y2)
        np.testing.assert_array_equal(cov["z1"], cov2["z1"])
        # byte-exact re-save
        p2 = tmp_path / "data2.csv"
        save_data(p2, g, Y2, cov2, ids=[int(i) for i in ids])
        assert p.read_bytes() == p2.read_bytes()

    def test_structural_violation_with_row_number(self, tmp_path):
        g = survival_fecundity_chain()
        p = tmp_path / "bad.csv"
        p.write_text(
            "id,node,value,z1\n"
            "1,surv,1,0.0\n"
            "1,count,3,0.0\n"
            "2,surv,0,0.5\n"
            "2,count,4,0.5\n"  # row 5: count positive under dead parent
        )
        with pytest.raises(AsterError, match="bad.csv:5"):
            load_data(p, g)

    def test_missing_node_rejected(self, tmp_path):
        g = survival_fecundity_chain()
        p = tmp_path / "bad.csv"
        p.write_text("id,node,value\n1,surv,1\n")
        with pytest.raises(AsterError, match="missing node"):
            load_data(p, g)

    def test_non_integer_rejected(self, tmp_path):
        g = survival_fecundity_chain()
        p = tmp_path / "bad.csv"
        p.write_text("id,node,value\n1,surv,1.5\n1,count,2\n")
        with pytest.raises(AsterError, match="integer"):
            load_data(p, g)


class TestScenario:
    def test_plant_is_exact(self):
        sc = generate_scenario(
            ScenarioSpec(n_individuals=400, true_subspace=(1, 4)), seed=6
        )
        assert sc.subspace_residual < 1e-10
        nuis = len(sc.beta_true) - sc.interest_dim
        basis = eigen_decompose(sc.Sigma_true[nuis:, nuis:])
        coords = basis.eigenvectors.T @ sc.tau_true[nuis:]
        np.testing.assert_allclose(coords[[1, 2, 4]], 0.0, atol=1e-8 * abs(coords[0]))
        assert abs(coords[0]) > 0 and abs(coords[3]) > 0
        # the planted spectrum is well separated
        gaps = (basis.eigenvalues[:-1] - basis.eigenvalues[1:]) / basis.eigenvalues[:-1]
        assert gaps.min() > 0.2

    def test_deterministic_per_seed(self):
        a = generate_scenario(ScenarioSpec(n_individuals=50), seed=7)
        b = generate_scenario(ScenarioSpec(n_individuals=50), seed=7)
        np.testing.assert_array_equal(a.Y, b.Y)
        np.testing.assert_array_equal(a.M, b.M)

    def test_files_load_back(self, tmp_path):
        sc = generate_scenario(
            ScenarioSpec(n_individuals=30, true_subspace=(1, 4)), seed=8,
            outdir=tmp_path,
        )
        g = load_graph(tmp_path / "graph.json")
        cfg = ModelConfig.load(tmp_path / "model.json")
        Y, cov, _ = load_data(tmp_path / "data.csv", g)
        np.testing.assert_array_equal(Y, sc.Y)
        M, offset, names, k = build_design(g, cfg, cov)
        np.testing.assert_allclose(M, sc.M, atol=1e-12)
        truth = json.loads((tmp_path / "truth.json").read_text())
        assert truth["true_subspace"] == [1, 4]

    def test_single_individual_files_valid(self, tmp_path):
        generate_scenario(ScenarioSpec(n_individuals=1), seed=9, outdir=tmp_path)
        g = load_graph(tmp_path / "graph.json")
        Y, cov, _ = load_data(tmp_path / "data.csv", g)
        assert Y.shape == (1, 30)

    def test_generator_moments_match_truth(self):
        # simulated node means against the mean recursion at the true theta
        sc = generate_scenario(ScenarioSpec(n_individuals=30000), seed=10)
        from asterenv.graph import compute_mu, covariance_blocks, phi_to_theta

        ga = sc.graph.compile()
        phi = sc.offset + np.einsum("njp,p->nj", sc.M, sc.beta_true)
        theta = phi_to_theta(ga, phi)
        mu = compute_mu(ga, theta)
        err = sc.Y.mean(axis=0) - mu.mean(axis=0)
        # 4 MC standard errors of the mean, node by node
        W = covariance_blocks(ga, theta)
        se = np.sqrt(W[:, np.arange(30), np.arange(30)].mean(axis=0) / len(sc.Y))
        assert (np.abs(err) < 4 * se + 1e-12).all()

    def test_large_n_consistency_of_plant(self):
        # fitted interest block stays close to the planted span at large n
        sc = generate_scenario(
            ScenarioSpec(n_individuals=100_000, true_subspace=(1, 4)), seed=11
        )
        model = sc.model(check=False)
        fit = fit_mle(model)
        basis = eigen_decompose(fit.Sigma_vv_hat)
        ups = fit.tau_hat[4:]
        G = basis.eigenvectors[:, [0, 3]]
        angle = np.linalg.norm(ups - G @ (G.T @ ups)) / np.linalg.norm(ups)
        assert angle < 0.05


def run_cli(*argv):
    return main(list(argv))


class TestCli:
    @pytest.fixture(scope="class")
    def scenario_dir(self, tmp_path_factory):
        d = tmp_path_factory.mktemp("scen")
        run_cli(
            "simulate", "--out", str(d), "--n", "250", "--seed", "5",
            "--graph-kind", "chain",
        )
        return d

    def test_validate_ok(self, scenario_dir):
        assert run_cli("validate", "--graph", str(scenario_dir / "graph.json")) == 0

    def test_validate_bad_graph(self, tmp_path):
        bad = {
            "nodes": [
                {"id": "a", "predecessor": "a", "family": "bernoulli"},
            ],
            "fitness_nodes": ["a"],
        }
        p = tmp_path / "bad.json"
        p.write_text(json.dumps(bad))
        assert run_cli("validate", "--graph", str(p)) == 2

    def test_fit_and_envelope(self, scenario_dir, tmp_path):
        out = tmp_path / "fit"
        rc = run_cli(
            "fit",
            "--data", str(scenario_dir / "data.csv"),
            "--graph", str(scenario_dir / "graph.json"),
            "--model", str(scenario_dir / "model.json"),
            "--out", str(out),
        )
        assert rc == 0
        assert (out / "coefficients.csv").exists()
        assert (out / "fisher.csv").exists()
        assert json.loads((out / "summary.json").read_text())["converged"]

        env_out = tmp_path / "env"
        rc = run_cli(
            "envelope",
            "--data", str(scenario_dir / "data.csv"),
            "--graph", str(scenario_dir / "graph.json"),
            "--model", str(scenario_dir / "model.json"),
            "--method", "subspace", "--criterion", "bic",
            "--out", str(env_out),
        )
        assert rc == 0
        lines = (env_out / "selection.csv").read_text().splitlines()
        assert len(lines) == 1 + 31  # header + 2^5-1 candidates

    def test_landscape(self, scenario_dir, tmp_path):
        out = tmp_path / "land"
        rc = run_cli(
            "landscape",
            "--data", str(scenario_dir / "data.csv"),
            "--graph", str(scenario_dir / "graph.json"),
            "--model", str(scenario_dir / "model.json"),
            "--out", str(out), "--grid", "6",
        )
        assert rc == 0
        lines = (out / "landscape.csv").read_text().splitlines()
        assert len(lines) == 1 + 36

    def test_bootstrap_deterministic_outputs(self, scenario_dir, tmp_path):
        outs = []
        for tag in ("a", "b"):
            out = tmp_path / tag
            rc = run_cli(
                "bootstrap",
                "--data", str(scenario_dir / "data.csv"),
                "--graph", str(scenario_dir / "graph.json"),
                "--model", str(scenario_dir / "model.json"),
                "--out", str(out),
                "--B", "2", "--K", "2", "--seed", "7", "--top", "3",
            )
            assert rc == 0
            outs.append(out)
        for name in ("report.csv", "replicates.csv", "meta.json"):
            assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()

    def test_report_renders(self, scenario_dir, tmp_path, capsys):
        out = tmp_path / "boot"
        run_cli(
            "bootstrap",
            "--data", str(scenario_dir / "data.csv"),
            "--graph", str(scenario_dir / "graph.json"),
            "--model", str(scenario_dir / "model.json"),
            "--out", str(out),
            "--B", "2", "--K", "2", "--seed", "7", "--top", "3",
        )
        capsys.readouterr()
        rc = run_cli("report", "--dir", str(out))
        assert rc == 0
        text = capsys.readouterr().out
        assert "ratio" in text and "g_env" in text

    def test_missing_file_exit_code(self, tmp_path):
        assert run_cli("validate", "--graph", str(tmp_path / "nope.json")) == 2

    def test_unknown_flag_exit_code(self):
        proc = subprocess.run(
            [sys.executable, "-m", "asterenv.cli", "validate", "--bogus", "x"],
            capture_output=True,
        )
        assert proc.returncode == 2

    def test_error_is_structured_line(self, tmp_path, capsys):
        run_cli("validate", "--graph", str(tmp_path / "nope.json"))
        err = capsys.readouterr().err.strip().splitlines()[-1]
        parsed = json.loads(err)
        assert parsed["error"] == "validation"
