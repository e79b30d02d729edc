from datetime import datetime, timedelta

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nprl import cohort as C
from nprl import pipeline as P
from nprl.errors import InputError

HOUR = timedelta(hours=1)


def make_record(
    patient_id="p1",
    admit=datetime(2024, 3, 1, 0, 0),
    los_days=10,
    culture=None,
    sofa_pre=4,
    sofa_post=None,
    missing=None,
):
    """Hand-built record with constant vitals; ``missing`` maps a field name to
    a predicate on the hour offset."""
    los_hours = 24 * los_days
    missing = missing or {}
    hourly = []
    for k in range(los_hours):
        values = dict(
            heart_rate=80.0 + 0.01 * k,
            sbp=120.0,
            dbp=60.0,
            resp_rate=16.0,
            temperature=36.8,
            fio2=0.3,
            iv_bolus_cum=0.1 * k,
            rbc_units_cum=0.0,
            vent_days_cum=k / 24.0,
            surgeries_cum=0.0,
            surgery_duration_cum=0.0,
        )
        for name, predicate in missing.items():
            if predicate(k):
                values[name] = None
        hourly.append(C.HourlyObservation(ts=admit + k * HOUR, **values))
    sofa = []
    for k in range(0, los_hours, 6):
        ts = admit + k * HOUR
        score = sofa_pre
        if culture is not None and sofa_post is not None and ts > culture:
            score = sofa_post
        sofa.append((ts, score))
    cultures = [(culture, True)] if culture is not None else []
    return C.PatientRecord(
        patient_id=patient_id,
        admit_ts=admit,
        los_hours=los_hours,
        hourly=hourly,
        statics=[float(i) for i in range(15)],
        sofa=sofa,
        cultures=cultures,
    )


class TestDeriveMap:
    def test_paper_formula(self):
        assert abs(P.derive_map(80.0, 120.0) - 93.33333333) < 1e-6

    def test_equal_inputs(self):
        assert P.derive_map(100.0, 100.0) == 100.0

    def test_direct_arithmetic(self):
        assert P.derive_map(60.0, 90.0) == 70.0

    def test_missing_propagates(self):
        assert P.derive_map(None, 120.0) is None
        assert P.derive_map(80.0, None) is None

    def test_nonpositive_rejected(self):
        with pytest.raises(InputError):
            P.derive_map(-1.0, 120.0)


class TestLocf:
    def test_forward_fill(self):
        assert P.locf_impute([36.5, None, None, 37.0, None]) == [36.5, 36.5, 36.5, 37.0, 37.0]

    def test_leading_gap_preserved(self):
        assert P.locf_impute([None, 5.0]) == [None, 5.0]

    def test_identity_when_complete(self):
        assert P.locf_impute([1.0, 2.0, 3.0]) == [1.0, 2.0, 3.0]

    @given(st.lists(st.one_of(st.none(), st.floats(allow_nan=False, allow_infinity=False)), max_size=30))
    @settings(max_examples=200, deadline=None)
    def test_properties(self, series):
        out = P.locf_impute(series)
        assert len(out) == len(series)
        seen = False
        for raw, filled in zip(series, out):
            if raw is not None:
                seen = True
                assert filled == raw
            elif not seen:
                assert filled is None
            else:
                assert filled is not None


class TestSepsisLabels:
    def test_qualifying_rise(self):
        culture = datetime(2024, 3, 5, 12, 0)
        record = make_record(culture=culture, sofa_pre=4, sofa_post=7)
        assert P.derive_sepsis_labels(record) == culture

    def test_insufficient_rise(self):
        record = make_record(culture=datetime(2024, 3, 5, 12, 0), sofa_pre=4, sofa_post=5)
        assert P.derive_sepsis_labels(record) is None

    def test_culture_on_day_two_ignored(self):
        record = make_record(culture=datetime(2024, 3, 2, 12, 0), sofa_pre=4, sofa_post=9)
        assert P.derive_sepsis_labels(record) is None

    def test_negative_culture_ignored(self):
        record = make_record()
        record.cultures.append((datetime(2024, 3, 5, 12, 0), False))
        record.sofa = [(ts, 2 if ts <= record.cultures[0][0] else 9) for ts, _ in record.sofa]
        assert P.derive_sepsis_labels(record) is None

    def test_empty_sofa_rejected(self):
        record = make_record()
        record.sofa = []
        with pytest.raises(InputError):
            P.derive_sepsis_labels(record)


class TestWindowExtraction:
    def test_septic_patient_counts_and_labels(self):
        onset = datetime(2024, 3, 7, 15, 0)  # day 7 at 15:00
        record = make_record(los_days=20, culture=onset, sofa_pre=4, sofa_post=7)
        instances = P.extract_instances([record])
        assert [i.day_index for i in instances] == [3, 4, 5, 6, 7]
        assert [i.label for i in instances] == [0, 0, 0, 0, 1]

    def test_nonseptic_full_range(self):
        record = make_record(los_days=10)
        instances = P.extract_instances([record])
        assert [i.day_index for i in instances] == [3, 4, 5, 6, 7, 8, 9, 10]
        assert all(i.label == 0 for i in instances)

    def test_leading_gap_excludes_day_three(self):
        record = make_record(
            los_days=6,
            missing={"temperature": lambda k: k <= 54},  # through 06:00 of day 3
        )
        instances = P.extract_instances([record])
        days = [i.day_index for i in instances]
        assert 3 not in days
        assert days == [4, 5, 6]

    def test_window_shape_and_last_hour(self):
        record = make_record(los_days=7)
        instances = P.extract_instances([record])
        for inst in instances:
            assert inst.temporal.shape == (9, 11)
        # hour 8 of the day-3 window is 06:00 day 3; heart rate encodes hour offset
        day3 = instances[0]
        hours_since_admit = (
            datetime(2024, 3, 3, 6, 0) - datetime(2024, 3, 1, 0, 0)
        ) / HOUR
        assert abs(day3.temporal[8, 0] - (80.0 + 0.01 * hours_since_admit)) < 1e-9

    def test_onset_exactly_at_six_am_boundary(self):
        # onset at 06:00 of day 8 belongs to day 7's prediction window
        onset = datetime(2024, 3, 8, 6, 0)
        record = make_record(los_days=20, culture=onset, sofa_pre=4, sofa_post=8)
        instances = P.extract_instances([record])
        assert [i.day_index for i in instances] == [3, 4, 5, 6, 7]
        assert instances[-1].label == 1

    def test_instance_indices_unique_and_sequential(self):
        records = [make_record(patient_id=f"p{i}", los_days=6) for i in range(3)]
        instances = P.extract_instances(records)
        assert [i.instance_index for i in instances] == list(range(len(instances)))

    def test_mid_stay_gap_excludes_only_that_window(self):
        # temperature gap with no prior observation cannot happen mid-stay after
        # forward filling, so blank a full window of another patient instead
        record = make_record(los_days=8, missing={"heart_rate": lambda k: k < 100})
        instances = P.extract_instances([record])
        days = [i.day_index for i in instances]
        # heart rate observed from hour 100 (day 5, 04:00); by LOCF day-6 windows on are complete
        assert days and days[0] >= 5


class TestSelectFeatures:
    def setup_method(self):
        record = make_record(los_days=6)
        self.instances = P.extract_instances([record])
        self.schema = P.full_schema()

    def test_subset1_only(self):
        out, schema = P.select_features(self.instances, self.schema, {1})
        assert schema.n_temporal == 6
        assert schema.n_static == 0
        assert out[0].temporal.shape == (9, 6)
        assert out[0].statics.size == 0

    def test_subsets_1_3(self):
        out, schema = P.select_features(self.instances, self.schema, {1, 3})
        assert schema.n_temporal == 11
        assert schema.n_static == 0

    def test_all_subsets(self):
        out, schema = P.select_features(self.instances, self.schema, {1, 2, 3})
        assert schema.n_temporal == 11
        assert schema.n_static == 15

    def test_subset1_required(self):
        with pytest.raises(InputError):
            P.select_features(self.instances, self.schema, {2, 3})


class TestMinMax:
    def test_midpoint(self):
        params = P.ScalingParams(
            temporal_min=np.array([40.0]),
            temporal_max=np.array([140.0]),
            static_min=np.empty(0),
            static_max=np.empty(0),
        )
        inst = P.NightInstance("p", 3, 0, np.full((9, 1), 90.0), np.empty(0), 0)
        out = P.apply_minmax([inst], params)[0]
        np.testing.assert_allclose(out.temporal, 0.5)

    def test_constant_feature_maps_to_zero(self):
        insts = [
            P.NightInstance("p", 3, i, np.full((9, 1), 7.0), np.empty(0), 0) for i in range(3)
        ]
        params = P.fit_minmax(insts)
        out = P.apply_minmax(insts, params)
        assert all((o.temporal == 0.0).all() for o in out)

    def test_out_of_range_clamped(self):
        params = P.ScalingParams(
            temporal_min=np.array([0.0]),
            temporal_max=np.array([1.0]),
            static_min=np.empty(0),
            static_max=np.empty(0),
        )
        inst = P.NightInstance("p", 3, 0, np.full((9, 1), -10.0), np.empty(0), 0)
        out = P.apply_minmax([inst], params)[0]
        np.testing.assert_allclose(out.temporal, -0.5)
        inst2 = P.NightInstance("p", 3, 0, np.full((9, 1), 0.4), np.empty(0), 0)
        below = P.apply_minmax([P.NightInstance("p", 3, 0, np.full((9, 1), -0.1), np.empty(0), 0)], params)[0]
        assert (below.temporal < 0).all()

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_train_values_in_unit_interval(self, seed):
        rng = np.random.default_rng(seed)
        insts = [
            P.NightInstance("p", 3, i, rng.normal(size=(9, 2)) * 10, rng.normal(size=3), 0)
            for i in range(4)
        ]
        out = P.apply_minmax(insts, P.fit_minmax(insts))
        for o in out:
            assert o.temporal.min() >= 0.0 and o.temporal.max() <= 1.0
            assert o.statics.min() >= 0.0 and o.statics.max() <= 1.0


def synthetic_instances(n_pos, n_neg, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_pos + n_neg):
        out.append(
            P.NightInstance(
                patient_id=f"p{i}",
                day_index=3,
                instance_index=i,
                temporal=rng.normal(size=(9, 1)),
                statics=np.empty(0),
                label=1 if i < n_pos else 0,
            )
        )
    return out


class TestStratifiedKfold:
    def test_paper_scale_fold_sizes(self):
        instances = synthetic_instances(471, 25481)
        split = P.stratified_kfold(instances, k=5, seed=1)
        sizes = [sum(1 for f in split.fold_of.values() if f == fold) for fold in range(5)]
        assert sum(sizes) == 25952
        # both class remainders land on the earliest folds, so totals spread by 2
        assert all(abs(s - 5190.4) < 2.0 for s in sizes)
        for label in (0, 1):
            per_fold = [0] * 5
            for inst in instances:
                if inst.label == label:
                    per_fold[split.fold_of[inst.instance_index]] += 1
            assert max(per_fold) - min(per_fold) <= 1

    def test_per_fold_positive_counts(self):
        instances = synthetic_instances(471, 25481)
        split = P.stratified_kfold(instances, k=5, seed=1)
        pos_per_fold = [0] * 5
        for inst in instances:
            if inst.label == 1:
                pos_per_fold[split.fold_of[inst.instance_index]] += 1
        assert sorted(pos_per_fold) == [94, 94, 94, 94, 95]

    def test_partition(self):
        instances = synthetic_instances(10, 90)
        split = P.stratified_kfold(instances, k=5, seed=2)
        assert set(split.fold_of) == {i.instance_index for i in instances}

    def test_too_few_positives(self):
        with pytest.raises(InputError):
            P.stratified_kfold(synthetic_instances(3, 50), k=5, seed=0)


class TestResampling:
    def test_paper_counts(self):
        instances = synthetic_instances(471, 25481)
        out = P.resample_training(instances, target_per_class=2600, seed=3)
        labels = [i.label for i in out]
        assert sum(labels) == 2600
        assert len(labels) - sum(labels) == 2600

    def test_balanced_input_is_permutation(self):
        instances = synthetic_instances(50, 50)
        out = P.resample_training(instances, target_per_class=50, seed=4)
        assert sorted(i.instance_index for i in out) == sorted(i.instance_index for i in instances)

    def test_positives_are_members(self):
        instances = synthetic_instances(7, 100)
        out = P.resample_training(instances, target_per_class=30, seed=5)
        pos_ids = {i.instance_index for i in instances if i.label == 1}
        assert all(i.instance_index in pos_ids for i in out if i.label == 1)

    def test_undersample_leaves_positives(self):
        instances = synthetic_instances(9, 500)
        out = P.undersample_negatives(instances, target=100, seed=6)
        assert sum(1 for i in out if i.label == 1) == 9
        assert sum(1 for i in out if i.label == 0) == 100

    def test_needs_both_classes(self):
        with pytest.raises(InputError):
            P.resample_training(synthetic_instances(0, 10), seed=0)


class TestInstancesRoundTrip:
    def test_round_trip(self, tmp_path):
        records = [make_record(patient_id=f"p{i}", los_days=6) for i in range(2)]
        instances = P.extract_instances(records)
        schema = P.full_schema()
        P.write_instances(instances, schema, tmp_path / "i.csv", tmp_path / "i.schema.txt")
        loaded, loaded_schema = P.read_instances(tmp_path / "i.csv", tmp_path / "i.schema.txt")
        assert loaded_schema == schema
        assert len(loaded) == len(instances)
        for a, b in zip(instances, loaded):
            assert a.patient_id == b.patient_id
            assert a.day_index == b.day_index
            assert a.label == b.label
            np.testing.assert_array_equal(a.temporal, b.temporal)
            np.testing.assert_array_equal(a.statics, b.statics)

    def test_sidecar_subset_membership(self, tmp_path):
        records = [make_record(los_days=6)]
        instances = P.extract_instances(records)
        P.write_instances(instances, P.full_schema(), tmp_path / "i.csv", tmp_path / "i.schema.txt")
        text = (tmp_path / "i.schema.txt").read_text()
        assert "subset.heart_rate=1" in text
        assert "subset.iv_bolus_cum=3" in text
        assert "subset.age=2" in text
