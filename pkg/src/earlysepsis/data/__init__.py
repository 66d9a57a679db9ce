"""Synthetic cohorts, event labeling and cohort assembly."""

from .cohort import (LabeledCohort, bin_and_impute, build_cohort, derive_labels, filter_and_mask,
                     match_controls, truncate_to_horizon, zscore_fit, zscore_fit_apply)
from .labeling import detect_si, hourly_sofa, label_events, sepsis_onset
from .synthetic import GeneratorSpec, RawEncounter, generate_synthetic, separable_encounters
