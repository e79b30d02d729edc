import numpy as np
import pytest

from nprl import model as M
from nprl import numgrad as ng
from nprl import pipeline as P
from nprl import theory as TH
from nprl import train as T
from nprl.errors import ConfigError, DegenerateError, InputError

SCHEMA = M.FeatureSchema(("a", "b", "c"), ())
NORM_CONFIG = M.ModelConfig(
    gru_hidden=4, trunk_widths=(), head_classes=2, normalize_representation=True
)


def toy_instances(n=24, seed=0):
    rng = np.random.default_rng(seed)
    return [
        P.NightInstance(
            patient_id=f"p{i}",
            day_index=3,
            instance_index=i,
            temporal=rng.uniform(0.0, 1.0, size=(9, 3)),
            statics=np.empty(0),
            label=int(i < 4),
        )
        for i in range(n)
    ]


class TestCorollaryConstant:
    def test_exact_value(self):
        assert abs(TH.corollary_constant() - (np.sqrt(2.0) / 4.0 + 1.0 / 64.0)) < 1e-12

    def test_below_printed_bound(self):
        assert TH.corollary_constant() <= TH.COROLLARY_PRINTED_BOUND
        assert abs(TH.corollary_constant() - 0.3692) < 1e-4


class TestEstimateLipschitz:
    def test_linear_single_parameter_model(self):
        # representation = w * x with x = 2: the shift per unit of parameter
        # perturbation is exactly |x|
        class LinearRep:
            def __init__(self):
                self.x = 2.0

        # emulate via the real model machinery: a 1-unit GRU degenerates; use
        # a direct probe of the ratio definition instead with a stub config
        params = {"w": ng.Tensor(np.array([[1.0]]), requires_grad=True), "head.W": ng.Tensor(np.zeros((1, 2))), "head.b": ng.Tensor(np.zeros(2))}

        import nprl.theory as theory_mod

        original = theory_mod._reps

        def fake_reps(instances, p, config):
            return np.array([[p["w"].data[0, 0] * 2.0]])

        theory_mod._reps = fake_reps
        try:
            estimate = TH.estimate_lipschitz(params, [object()], n_probes=3, delta=1e-3, seed=0, config=NORM_CONFIG)
        finally:
            theory_mod._reps = original
        assert abs(estimate.l_hat - 2.0) < 1e-9

    def test_degenerate_rep_flagged(self):
        params = {"w": ng.Tensor(np.array([[1.0]]), requires_grad=True), "head.W": ng.Tensor(np.zeros((1, 2))), "head.b": ng.Tensor(np.zeros(2))}
        import nprl.theory as theory_mod

        original = theory_mod._reps
        theory_mod._reps = lambda instances, p, config: np.array([[5.0]])
        try:
            with pytest.raises(DegenerateError):
                TH.estimate_lipschitz(params, [object()], n_probes=2, delta=1e-3, seed=0, config=NORM_CONFIG)
        finally:
            theory_mod._reps = original

    def test_monotone_in_instances_and_probes(self):
        instances = toy_instances(n=20, seed=1)
        params = M.init_params(NORM_CONFIG, SCHEMA, seed=0)
        small = TH.estimate_lipschitz(params, instances[:8], n_probes=4, delta=1e-3, seed=5, config=NORM_CONFIG)
        large = TH.estimate_lipschitz(params, instances, n_probes=4, delta=1e-3, seed=5, config=NORM_CONFIG)
        assert large.l_hat >= small.l_hat
        fewer = TH.estimate_lipschitz(params, instances, n_probes=2, delta=1e-3, seed=5, config=NORM_CONFIG)
        assert large.l_hat >= fewer.l_hat
        again = TH.estimate_lipschitz(params, instances, n_probes=4, delta=1e-3, seed=5, config=NORM_CONFIG)
        assert again.l_hat == large.l_hat

    def test_validates_inputs(self):
        params = M.init_params(NORM_CONFIG, SCHEMA, seed=0)
        with pytest.raises(InputError):
            TH.estimate_lipschitz(params, [], n_probes=2, delta=1e-3, seed=0, config=NORM_CONFIG)
        with pytest.raises(InputError):
            TH.estimate_lipschitz(params, toy_instances(4), n_probes=2, delta=0.0, seed=0, config=NORM_CONFIG)


class TestCheckTheorem1:
    def test_identical_parameters_never_violate(self):
        instances = toy_instances(n=16, seed=2)
        params = M.init_params(NORM_CONFIG, SCHEMA, seed=1)
        pairs, violations, worst = TH.check_theorem1(params, params, instances, NORM_CONFIG, n_pairs=None)
        assert violations == 0
        assert pairs == 16 * 15 // 2
        assert worst > 0.0  # slack terms keep the margin strictly positive

    def test_margin_formula_for_equal_params(self):
        instances = toy_instances(n=10, seed=3)
        params = M.init_params(NORM_CONFIG, SCHEMA, seed=2)
        temporal, statics = T.to_arrays(instances)
        reps = M.compute_representations(temporal, statics, params, NORM_CONFIG)
        _, _, worst = TH.check_theorem1(params, params, instances, NORM_CONFIG, n_pairs=None)
        d0 = [
            np.linalg.norm(reps[i] - reps[j])
            for i in range(len(instances))
            for j in range(i + 1, len(instances))
        ]
        expected = min(d / 2.0 + 1.0 / 32.0 for d in d0)
        assert abs(worst - expected) < 1e-12

    def test_pair_sampling_counts(self):
        instances = toy_instances(n=30, seed=4)
        params = M.init_params(NORM_CONFIG, SCHEMA, seed=3)
        pairs, _, _ = TH.check_theorem1(params, params, instances, NORM_CONFIG, n_pairs=100)
        assert pairs == 100

    def test_detects_planted_violation(self):
        # scaling all representations toward zero shrinks pairwise distances
        # below what the slack absorbs when the originals are far apart
        instances = toy_instances(n=12, seed=5)
        theta0 = M.init_params(
            M.ModelConfig(gru_hidden=4, trunk_widths=(), head_classes=2), SCHEMA, seed=4
        )
        config = M.ModelConfig(gru_hidden=4, trunk_widths=(), head_classes=2)
        # theta*: all GRU weights zeroed, collapsing every representation to 0
        theta_star = {
            name: ng.Tensor(np.zeros(p.dims), requires_grad=True) if not M.is_head(name) else p
            for name, p in theta0.items()
        }
        temporal, statics = T.to_arrays(instances)
        reps0 = M.compute_representations(temporal, statics, theta0, config)
        d0_max = max(
            np.linalg.norm(reps0[i] - reps0[j]) for i in range(12) for j in range(i + 1, 12)
        )
        _, violations, worst = TH.check_theorem1(theta0, theta_star, instances, config, n_pairs=None)
        if d0_max**2 - d0_max / 2.0 - 1.0 / 32.0 > 0:
            assert violations > 0
            assert worst < 0


class TestCheckCorollary1:
    def test_identical_parameters_satisfy(self):
        instances = toy_instances(n=14, seed=6)
        params = M.init_params(NORM_CONFIG, SCHEMA, seed=5)
        m0, m_star, ok = TH.check_corollary1(params, params, instances, NORM_CONFIG)
        assert m0 == m_star
        assert ok

    def test_requires_normalization(self):
        config = M.ModelConfig(gru_hidden=4, trunk_widths=(), head_classes=2)
        instances = toy_instances(n=8, seed=7)
        params = M.init_params(config, SCHEMA, seed=6)
        with pytest.raises(ConfigError):
            TH.check_corollary1(params, params, instances, config)

    def test_budget_uses_measured_m0(self):
        instances = toy_instances(n=10, seed=8)
        params = M.init_params(NORM_CONFIG, SCHEMA, seed=7)
        m0, m_star, ok = TH.check_corollary1(params, params, instances, NORM_CONFIG, tol=0.0)
        # m_star == m0 <= 0.37 + |m0| always holds for unit vectors
        assert ok


class TestTheoryProtocol:
    def test_end_to_end_small(self):
        instances = toy_instances(n=40, seed=9)
        config = TH.TheoryConfig(
            model=NORM_CONFIG,
            pretrain=T.PretrainConfig(epochs=3, seed=1),
            finetune=T.FinetuneConfig(mode="projected", gamma=1.0, epochs=2, seed=2),
            n_probes=3,
            n_pairs=500,
            safety=2.0,
        )
        report = TH.theory_protocol(instances, SCHEMA, config, seed=11)
        assert report.gamma == 1.0 / (16.0 * report.l_hat)
        assert report.pairs_checked == 500
        assert report.violations == 0
        assert report.pretrain_accuracy is not None
        assert report.bound_constant == TH.corollary_constant()
        assert "parameter space" in report.note

    def test_rejects_unnormalized_model(self):
        with pytest.raises(ConfigError):
            TH.TheoryConfig(model=M.ModelConfig(gru_hidden=4, trunk_widths=(), head_classes=2))

    def test_report_round_trip(self, tmp_path):
        instances = toy_instances(n=30, seed=10)
        config = TH.TheoryConfig(
            model=NORM_CONFIG,
            pretrain=T.PretrainConfig(epochs=2, seed=1),
            finetune=T.FinetuneConfig(mode="projected", gamma=1.0, epochs=1, seed=2),
            n_probes=2,
            n_pairs=200,
        )
        report = TH.theory_protocol(instances, SCHEMA, config, seed=12)
        path = tmp_path / "theory_report.txt"
        TH.write_theory_report(report, path, header_comment="config_hash=zz seed=12")
        parsed = TH.read_theory_report(path)
        assert float(parsed["l_hat"]) == report.l_hat
        assert float(parsed["gamma"]) == report.gamma
        assert int(parsed["violations"]) == report.violations
        assert parsed["bound_ok"] == str(int(report.bound_ok))
        assert (tmp_path / "theory_report.txt").read_text().startswith("# config_hash=zz")
