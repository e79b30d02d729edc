import numpy as np
import pytest

from nprl import model as M
from nprl import numgrad as ng
from nprl import pipeline as P
from nprl import train as T
from nprl.errors import InputError

SCHEMA = M.FeatureSchema(("a", "b", "c"), ())
CONFIG = M.ModelConfig(gru_hidden=4, trunk_widths=(8,), head_classes=2)


def toy_instances(n_pos=6, n_neg=18, seed=0, separable=True):
    """Tiny labeled set; positives get a mean shift so learning is feasible."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_pos + n_neg):
        label = 1 if i < n_pos else 0
        temporal = rng.uniform(0.1, 0.9, size=(9, 3))
        if separable and label:
            temporal = np.clip(temporal + 0.35, 0.0, 1.5)
        out.append(
            P.NightInstance(
                patient_id=f"p{i}",
                day_index=3,
                instance_index=i,
                temporal=temporal,
                statics=np.empty(0),
                label=label,
            )
        )
    return out


class TestErmLoss:
    def test_class_decomposition_identity(self):
        # mean cross-entropy equals the count-weighted sum of class means
        rng = np.random.default_rng(1)
        instances = toy_instances(5, 11, seed=2)
        params = M.init_params(CONFIG, SCHEMA, seed=0)
        temporal, statics = T.to_arrays(instances)
        labels = T.labels_of(instances)
        total, _ = T.erm_loss((temporal, statics, labels), params, CONFIG)
        by_class = 0.0
        for c in (0, 1):
            mask = labels == c
            class_loss, _ = T.erm_loss((temporal[mask], statics[mask], labels[mask]), params, CONFIG)
            by_class += mask.sum() / len(labels) * class_loss
        assert abs(total - by_class) < 1e-10

    def test_single_instance_uniform_logits(self):
        instances = toy_instances(1, 0)
        params = M.init_params(CONFIG, SCHEMA, seed=0)
        zeroed = {
            name: ng.Tensor(np.zeros(p.dims), requires_grad=True) if M.is_head(name) else p
            for name, p in params.items()
        }
        temporal, statics = T.to_arrays(instances)
        loss, _ = T.erm_loss((temporal, statics, np.array([1])), zeroed, CONFIG)
        assert abs(loss - np.log(2)) < 1e-12

    def test_unit_weights_match_unweighted(self):
        instances = toy_instances(4, 6, seed=3)
        params = M.init_params(CONFIG, SCHEMA, seed=1)
        batch = (*T.to_arrays(instances), T.labels_of(instances))
        plain, grads_plain = T.erm_loss(batch, params, CONFIG)
        weighted, grads_weighted = T.erm_loss(batch, params, CONFIG, class_weights=np.ones(2))
        assert plain == weighted
        for name in grads_plain:
            np.testing.assert_array_equal(grads_plain[name], grads_weighted[name])


class TestClassBalancedWeights:
    def test_paper_counts_inverse_frequency(self):
        stats = P.ClassStats(n=25952, n_pos=471, n_neg=25481)
        w = T.class_balanced_weights(stats, "inverse_frequency")
        assert abs(w[1] - 27.550) < 1e-3
        assert abs(w[0] - 0.5092) < 1e-4

    def test_balanced_classes_unit_weights(self):
        stats = P.ClassStats(n=200, n_pos=100, n_neg=100)
        np.testing.assert_allclose(T.class_balanced_weights(stats, "inverse_frequency"), 1.0)

    def test_effective_number_beta_zero_limit(self):
        stats = P.ClassStats(n=120, n_pos=20, n_neg=100)
        w = T.class_balanced_weights(stats, "effective_number", beta=1e-12)
        np.testing.assert_allclose(w, 1.0, atol=1e-9)

    def test_effective_number_normalization(self):
        stats = P.ClassStats(n=1100, n_pos=100, n_neg=1000)
        w = T.class_balanced_weights(stats, "effective_number", beta=0.999)
        counts = np.array([stats.n_neg, stats.n_pos])
        assert abs(float(w @ counts) - stats.n) < 1e-9

    def test_bad_beta(self):
        stats = P.ClassStats(n=10, n_pos=5, n_neg=5)
        with pytest.raises(InputError):
            T.class_balanced_weights(stats, "effective_number", beta=1.0)

    def test_empty_class_rejected(self):
        with pytest.raises(InputError):
            T.class_balanced_weights(P.ClassStats(n=10, n_pos=0, n_neg=10))


class TestPretrain:
    def test_tiny_set_reaches_full_identification(self):
        instances = toy_instances(0, 40, seed=5, separable=False)
        profiles = T.strip_labels(instances)
        params, log = T.nprl_pretrain(
            profiles, CONFIG, SCHEMA, T.PretrainConfig(epochs=200, learning_rate=3e-3, seed=1)
        )
        assert log.final_accuracy == 1.0
        assert params["head.W"].dims[1] == 40

    def test_epoch_zero_accuracy_near_chance(self):
        instances = toy_instances(0, 50, seed=6, separable=False)
        profiles = T.strip_labels(instances)
        _, log = T.nprl_pretrain(profiles, CONFIG, SCHEMA, T.PretrainConfig(epochs=1, seed=2))
        assert log.epochs[0].epoch == 0
        assert log.epochs[0].accuracy <= 5.0 / 50.0

    def test_cosine_stats_reported(self):
        instances = toy_instances(0, 30, seed=7, separable=False)
        profiles = T.strip_labels(instances)
        _, log = T.nprl_pretrain(profiles, CONFIG, SCHEMA, T.PretrainConfig(epochs=2, seed=3))
        assert log.final_mean_cosine is not None
        assert log.final_mean_abs_cosine is not None
        assert -1.0 <= log.final_mean_cosine <= 1.0

    def test_duplicate_indices_rejected(self):
        instances = toy_instances(0, 5, separable=False)
        profiles = T.strip_labels(instances)
        profiles[1] = T.ProfileInstance(profiles[0].instance_index, profiles[1].temporal, profiles[1].statics)
        with pytest.raises(InputError):
            T.nprl_pretrain(profiles, CONFIG, SCHEMA, T.PretrainConfig(epochs=1))

    def test_profiles_carry_no_labels(self):
        profiles = T.strip_labels(toy_instances(2, 2))
        assert not hasattr(profiles[0], "label")


class TestFinetune:
    def _pretrained(self, instances, seed=0):
        profiles = T.strip_labels(instances)
        theta0, _ = T.nprl_pretrain(profiles, CONFIG, SCHEMA, T.PretrainConfig(epochs=2, seed=seed))
        return M.replace_head(theta0, 2, seed=seed)

    def test_step_zero_distance_is_zero(self):
        instances = toy_instances(6, 10, seed=8)
        theta0 = self._pretrained(instances)
        assert M.frobenius_distance(theta0, theta0, exclude_head=True) == 0.0

    def test_huge_penalty_pins_parameters(self):
        instances = toy_instances(6, 10, seed=9)
        theta0 = self._pretrained(instances)
        config = T.FinetuneConfig(mode="regularized", lam=1e6, learning_rate=1e-8, epochs=1, seed=1)
        params, _ = T.finetune(instances, theta0, config, CONFIG, SCHEMA)
        assert M.frobenius_distance(params, theta0, exclude_head=True) < 1e-6

    def test_projected_mode_respects_radius(self):
        instances = toy_instances(6, 10, seed=10)
        theta0 = self._pretrained(instances)
        gamma = 0.05
        config = T.FinetuneConfig(mode="projected", gamma=gamma, learning_rate=1e-2, epochs=3, seed=2)
        params, log = T.finetune(instances, theta0, config, CONFIG, SCHEMA)
        assert M.frobenius_distance(params, theta0, exclude_head=True) <= gamma + 1e-9
        assert log.epochs[-1].frob_dist <= gamma + 1e-9

    def test_projected_mode_needs_positive_gamma(self):
        instances = toy_instances(6, 10)
        theta0 = self._pretrained(instances)
        with pytest.raises(InputError):
            T.finetune(
                instances, theta0, T.FinetuneConfig(mode="projected", gamma=0.0), CONFIG, SCHEMA
            )

    def test_lambda_zero_matches_baseline_trajectory(self):
        instances = toy_instances(6, 10, seed=11)
        theta0 = self._pretrained(instances, seed=4)
        seed = 123
        ft_config = T.FinetuneConfig(mode="regularized", lam=0.0, learning_rate=1e-3, epochs=3, seed=seed)
        ft_params, ft_log = T.finetune(instances, theta0, ft_config, CONFIG, SCHEMA)
        bl_config = T.BaselineConfig(epochs=3, batch_size=64, learning_rate=1e-3, seed=seed)
        bl_params, bl_log = T.train_baseline(instances, CONFIG, SCHEMA, bl_config, initial_params=theta0)
        for name in ft_params:
            np.testing.assert_array_equal(ft_params[name].data, bl_params[name].data)
        assert [(e.loss, e.accuracy, e.frob_dist) for e in ft_log.epochs] == [
            (e.loss, e.accuracy, e.frob_dist) for e in bl_log.epochs
        ]

    def test_head_mismatch_rejected(self):
        instances = toy_instances(6, 10)
        profiles = T.strip_labels(instances)
        theta0, _ = T.nprl_pretrain(profiles, CONFIG, SCHEMA, T.PretrainConfig(epochs=1))
        with pytest.raises(InputError):
            T.finetune(instances, theta0, T.FinetuneConfig(), CONFIG, SCHEMA)

    def test_regularized_gradient_matches_finite_differences_of_summed_objective(self):
        instances = toy_instances(4, 8, seed=12)
        theta0 = self._pretrained(instances, seed=5)
        lam = 0.3
        # move away from theta0 so the penalty gradient is non-trivial
        rng = np.random.default_rng(6)
        params = {
            name: ng.Tensor(p.data + 0.05 * rng.standard_normal(p.dims), requires_grad=True)
            for name, p in theta0.items()
        }
        temporal, statics = T.to_arrays(instances)
        labels = T.labels_of(instances)

        def objective(p):
            loss, _ = ng.softmax_xent(
                M.forward_batch(temporal, statics, p, CONFIG)[0].data, labels
            )
            for name, tensor in p.items():
                if not M.is_head(name):
                    diff = tensor.data - theta0[name].data
                    loss += 0.5 * lam * float(np.sum(diff * diff))
            return loss

        # production gradient: autodiff loss grads plus the analytic pull-back
        _, grads = T.erm_loss((temporal, statics, labels), params, CONFIG)
        for name, p in params.items():
            if not M.is_head(name):
                grads[name] = grads[name] + lam * (p.data - theta0[name].data)

        step = 1e-4
        worst = 0.0
        for name, p in params.items():
            flat = p.data.reshape(-1)
            for idx in rng.choice(flat.size, size=min(4, flat.size), replace=False):
                values = []
                for sign in (+1.0, -1.0):
                    bumped = flat.copy()
                    bumped[idx] += sign * step
                    probe = dict(params)
                    probe[name] = ng.Tensor(bumped.reshape(p.dims), requires_grad=True)
                    values.append(objective(probe))
                numeric = (values[0] - values[1]) / (2 * step)
                analytic = float(grads[name].reshape(-1)[idx])
                worst = max(worst, abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8))
        assert worst < 1e-4


class TestBaseline:
    def test_deterministic_per_seed(self):
        instances = toy_instances(6, 14, seed=13)
        config = T.BaselineConfig(epochs=2, seed=9)
        a, log_a = T.train_baseline(instances, CONFIG, SCHEMA, config)
        b, log_b = T.train_baseline(instances, CONFIG, SCHEMA, config)
        for name in a:
            np.testing.assert_array_equal(a[name].data, b[name].data)
        assert [e.loss for e in log_a.epochs] == [e.loss for e in log_b.epochs]

    def test_loss_decreases_on_separable_data(self):
        instances = toy_instances(20, 20, seed=14)
        config = T.BaselineConfig(epochs=5, learning_rate=3e-3, seed=3)
        _, log = T.train_baseline(instances, CONFIG, SCHEMA, config)
        losses = [e.loss for e in log.epochs]
        assert all(b < a for a, b in zip(losses, losses[1:]))

    def test_all_negative_data_collapses_to_always_negative(self):
        instances = toy_instances(0, 30, seed=15, separable=False)
        config = T.BaselineConfig(epochs=5, learning_rate=3e-3, seed=4)
        params, _ = T.train_baseline(instances, CONFIG, SCHEMA, config)
        temporal, statics = T.to_arrays(instances)
        probs = M.predict_proba(temporal, statics, params, CONFIG)
        assert (probs[:, 0] > 0.5).all()

    def test_log_to_csv_round_trip(self, tmp_path):
        instances = toy_instances(5, 9, seed=16)
        _, log = T.train_baseline(instances, CONFIG, SCHEMA, T.BaselineConfig(epochs=2, seed=1))
        path = tmp_path / "log.csv"
        log.to_csv(path, header_comment="config_hash=x seed=1")
        lines = path.read_text().splitlines()
        assert lines[0].startswith("#")
        assert lines[1] == "epoch,loss,acc,frob_dist"
        assert len(lines) == 2 + len(log.epochs)
