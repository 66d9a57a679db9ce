import numpy as np
import pytest

from earlysepsis.data.cohort import build_cohort, derive_labels
from earlysepsis.data.synthetic import GeneratorSpec, encounter_ids, generate_synthetic, separable_encounters
from earlysepsis.errors import ConfigError
from earlysepsis.rng import substream

SMALL = GeneratorSpec(n_encounters=300, n_channels=6, n_signal_channels=2, case_fraction=0.06)


@pytest.fixture(scope="module")
def small_raw():
    return generate_synthetic(SMALL, 5)


def test_infeasible_specs_rejected():
    with pytest.raises(ConfigError, match="infeasible"):
        GeneratorSpec(case_fraction=0.5).validate()
    with pytest.raises(ConfigError):
        GeneratorSpec(n_encounters=0).validate()
    with pytest.raises(ConfigError, match="unknown"):
        GeneratorSpec.from_dict({"n_encounters": 10, "prevalance": 0.1})


def test_spec_dict_roundtrip():
    spec = GeneratorSpec(n_encounters=17, signal_strength=0.5)
    assert GeneratorSpec.from_dict(spec.to_dict()) == spec


def test_ids_are_sortable():
    ids = encounter_ids(12)
    assert ids == sorted(ids) and len(set(ids)) == 12


def test_same_seed_identical_raw(small_raw):
    again = generate_synthetic(SMALL, 5)
    for a, b in zip(small_raw, again):
        assert a.id == b.id and a.stay_hours == b.stay_hours
        for f in ("times", "channels", "values", "antibiotics", "cultures", "organ_times", "organ_values"):
            assert np.array_equal(getattr(a, f), getattr(b, f))
    other = generate_synthetic(SMALL, 6)
    assert any(not np.array_equal(a.values, b.values) for a, b in zip(small_raw, other))


def test_events_are_valid(small_raw):
    for r in small_raw:
        for f in ("times", "antibiotics", "cultures", "organ_times"):
            arr = getattr(r, f)
            assert np.all(np.isfinite(arr)) and np.all(arr >= 0)
        assert r.times.size == 0 or r.times.max() <= r.stay_hours
        assert np.all((r.channels >= 0) & (r.channels < SMALL.n_channels))


def test_labeler_recovers_planted_onsets(small_raw):
    labels = derive_labels(small_raw)
    planted = [r for r in small_raw if r.planted_onset is not None]
    assert planted
    hits = sum(1 for r in planted if labels[r.id][0] == 1 and abs(labels[r.id][1] - r.planted_onset) <= 1.0)
    assert hits / len(planted) >= 0.95
    false_pos = sum(1 for r in small_raw if r.planted_onset is None and labels[r.id][0] == 1)
    assert false_pos <= 0.01 * len(small_raw)


def test_labels_independent_of_event_order(small_raw):
    rng = np.random.default_rng(0)
    shuffled = []
    for r in small_raw[:60]:
        p = rng.permutation(r.organ_times.size)
        q = rng.permutation(r.antibiotics.size)
        s = rng.permutation(r.cultures.size)
        shuffled.append(type(r)(r.id, r.stay_hours, r.times, r.channels, r.values, r.antibiotics[q],
                                r.cultures[s], r.organ_times[p], r.organs[p], r.organ_values[p]))
    assert derive_labels(shuffled) == derive_labels(small_raw[:60])


def test_cohort_prevalence_near_matching_ratio(small_raw):
    labels = derive_labels(small_raw)
    cohort = build_cohort(small_raw, labels, substream(5, "matching"))
    assert 0.05 < cohort.prevalence < 0.12
    for case, ctl in cohort.matching.items():
        onset = cohort.by_id()[case].onset_hour
        assert all(cohort.by_id()[c].onset_hour == onset for c in ctl)


def test_zero_signal_keeps_vitals_independent_of_label():
    base = GeneratorSpec(n_encounters=200, n_channels=4, n_signal_channels=4, signal_strength=0.0)
    strong = GeneratorSpec(n_encounters=200, n_channels=4, n_signal_channels=4, signal_strength=3.0)
    a, b = generate_synthetic(base, 1), generate_synthetic(strong, 1)
    for ra, rb in zip(a, b):
        assert ra.planted_onset == rb.planted_onset
        if ra.planted_onset is None:
            assert np.array_equal(ra.values, rb.values)
    assert any(not np.array_equal(ra.values, rb.values) for ra, rb in zip(a, b) if ra.planted_onset is not None)


def test_separable_encounters_shape():
    encs = separable_encounters(20, seed=3)
    labels = {e.label for e in encs}
    assert labels == {0, 1}
    assert all(e.n_obs >= 12 and e.onset_hour is not None for e in encs)
    for e in encs:
        late = e.values[(e.channels == 0) & (e.times >= e.onset_hour - 3)]
        assert (late.min() > 1.5) if e.label else (late.max() < 1.5)
