"""Cohort assembly: case-control matching, exclusion/masking, horizon truncation,
hourly binning with carry-forward imputation, and per-channel z-scoring."""

import logging
from dataclasses import dataclass, field

import numpy as np

from ..errors import CohortError, ConfigError, ContractError
from ..mgp import Encounter, MaskableEncounter, make_grid
from .labeling import ScoreInputs, detect_si, label_events

log = logging.getLogger(__name__)

CONTROLS_PER_CASE = 10
MIN_ONSET_H = 7.0
MIN_OBSERVATIONS = 10
MAX_OBSERVATIONS = 10_000
MAX_HORIZON_H = 7.0


@dataclass
class LabeledCohort:
    encounters: list
    matching: dict = field(default_factory=dict)

    @property
    def prevalence(self):
        if not self.encounters:
            return 0.0
        return sum(e.label for e in self.encounters) / len(self.encounters)

    @property
    def ids(self):
        return [e.id for e in self.encounters]

    def by_id(self):
        return {e.id: e for e in self.encounters}

    def subset(self, ids):
        lookup = self.by_id()
        keep = [lookup[i] for i in ids if i in lookup]
        kept = {e.id for e in keep}
        matching = {c: [k for k in ctl if k in kept] for c, ctl in self.matching.items() if c in kept}
        return LabeledCohort(keep, matching)


def match_controls(cases, controls, rng, ratio=CONTROLS_PER_CASE):
    """Assign each case ``ratio`` distinct, still-unassigned controls.

    Parameters
    ----------
    cases : dict
        case id -> onset hour.
    controls : dict
        control id -> stay length in hours. A control is eligible for a case
        only if its stay reaches the case onset; ineligible draws are
        resampled.
    rng : numpy.random.Generator

    Returns
    -------
    dict
        case id -> list of control ids (each control used at most once).
    """
    if len(controls) < ratio * len(cases):
        raise CohortError(f"need {ratio * len(cases)} controls for {len(cases)} cases, "
                          f"have {len(controls)}")
    pool = sorted(controls)
    assigned = set()
    matching = {}
    # latest onsets first: they have the fewest eligible controls
    for case_id in sorted(cases, key=lambda c: (-cases[c], c)):
        onset = cases[case_id]
        order = rng.permutation(len(pool))
        chosen = []
        for i in order:
            cid = pool[i]
            if cid in assigned or controls[cid] < onset:
                continue
            chosen.append(cid)
            if len(chosen) == ratio:
                break
        if len(chosen) < ratio:
            raise CohortError(f"case {case_id} (onset {onset:g} h): only {len(chosen)} "
                              f"unassigned controls with a long enough stay")
        assigned.update(chosen)
        matching[case_id] = chosen
    return {c: matching[c] for c in sorted(matching)}


def truncate_to_horizon(enc, h):
    """Keep observations with time <= onset - h.

    Raises :class:`~earlysepsis.mgp.MaskableEncounter` if nothing survives.
    """
    if not 0 <= h <= MAX_HORIZON_H:
        raise ContractError(f"horizon must lie in [0, {MAX_HORIZON_H:g}], got {h}")
    if enc.onset_hour is None:
        raise ContractError(f"encounter {enc.id} has no onset hour to truncate at")
    keep = enc.times <= enc.onset_hour - h
    if not keep.any():
        raise MaskableEncounter(f"encounter {enc.id}: no observations {h:g} h before onset")
    if keep.all():
        return enc
    return enc.replace(enc.times[keep], enc.channels[keep], enc.values[keep])


def filter_and_mask(cohort, min_obs=MIN_OBSERVATIONS, horizon=0.0, min_onset=MIN_ONSET_H,
                    max_obs=MAX_OBSERVATIONS):
    """Exclusion rules applied after matching.

    * cases with onset < ``min_onset`` are dropped together with their
      matched controls;
    * encounters with more than ``max_obs`` observations are dropped;
    * encounters with fewer than ``min_obs`` observations up to
      ``onset - horizon`` are masked.
    """
    early = {e.id for e in cohort.encounters if e.label == 1 and e.onset_hour < min_onset}
    dropped = set(early)
    for case_id in early:
        dropped.update(cohort.matching.get(case_id, ()))
    kept = []
    for enc in cohort.encounters:
        if enc.id in dropped or enc.n_obs > max_obs:
            continue
        if count_at_horizon(enc, horizon) < min_obs:
            continue
        kept.append(enc)
    log.debug("filter_and_mask: %d -> %d encounters (%d early cases)",
              len(cohort.encounters), len(kept), len(early))
    kept_ids = {e.id for e in kept}
    matching = {c: [k for k in ctl if k in kept_ids]
                for c, ctl in cohort.matching.items() if c in kept_ids}
    return LabeledCohort(kept, matching)


def count_at_horizon(enc, h):
    return int(np.count_nonzero(enc.times <= enc.onset_hour - h))


def mask_at_horizon(encounters, h, min_obs=MIN_OBSERVATIONS):
    """Truncate every encounter at ``h`` and drop those left with fewer than ``min_obs``."""
    out = []
    for enc in encounters:
        if count_at_horizon(enc, h) >= min_obs:
            out.append(truncate_to_horizon(enc, h))
    return out


def bin_and_impute(enc, n_channels, until=None):
    """Hourly ``(D, H)`` grid: bin means, carry-forward, zeros before the first value.

    ``H`` matches the MGP query grid of the (optionally truncated) encounter.
    Passing ``until`` ignores observations after that time, which is
    equivalent to truncating first.
    """
    t, c, v = enc.times, enc.channels, enc.values
    if until is not None:
        keep = t <= until
        if not keep.any():
            raise MaskableEncounter(f"encounter {enc.id}: no observations up to {until:g} h")
        t, c, v = t[keep], c[keep], v[keep]
    if c.max() >= n_channels:
        raise ContractError(f"encounter {enc.id}: channel {c.max()} >= D={n_channels}")
    H = int(np.floor(t[-1])) + 2
    b = np.floor(t).astype(np.int64)
    sums = np.zeros((n_channels, H))
    counts = np.zeros((n_channels, H))
    np.add.at(sums, (c, b), v)
    np.add.at(counts, (c, b), 1.0)
    observed = counts > 0
    means = np.divide(sums, counts, out=np.zeros_like(sums), where=observed)
    # index of the last observed bin at or before each hour
    idx = np.where(observed, np.arange(H), -1)
    np.maximum.accumulate(idx, axis=1, out=idx)
    out = np.take_along_axis(means, np.maximum(idx, 0), axis=1)
    out[idx < 0] = 0.0
    return out


@dataclass
class ZScore:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, enc):
        c = enc.channels
        if c.max() >= self.mean.size:
            raise ContractError(f"encounter {enc.id}: channel {c.max()} outside fitted statistics")
        return enc.replace(enc.times, c, (enc.values - self.mean[c]) / self.std[c])


def zscore_fit(encounters, n_channels):
    """Per-channel mean and population std over all observations of ``encounters``.

    Zero-variance channels keep std 1, i.e. they are centred but not scaled.
    """
    if not encounters:
        raise ConfigError("cannot fit z-score statistics on an empty split")
    c = np.concatenate([e.channels for e in encounters])
    v = np.concatenate([e.values for e in encounters])
    counts = np.bincount(c, minlength=n_channels)[:n_channels]
    if np.any(counts == 0):
        missing = np.flatnonzero(counts == 0).tolist()
        raise ConfigError(f"channels {missing} have no training observations")
    mean = np.bincount(c, weights=v, minlength=n_channels) / counts
    var = np.bincount(c, weights=(v - mean[c]) ** 2, minlength=n_channels) / counts
    std = np.sqrt(var)
    std[std <= 1e-12 * np.maximum(1.0, np.abs(mean))] = 1.0
    return ZScore(mean, std)


def zscore_fit_apply(train, others, n_channels):
    """Fit on ``train`` only and apply to ``train`` and each list in ``others``."""
    stats = zscore_fit(train, n_channels)
    return [stats.apply(e) for e in train], [[stats.apply(e) for e in split] for split in others], stats


def grid_length(enc):
    return make_grid(enc).count


def derive_labels(raw):
    """``{id: (label, onset_hour, si_time)}`` from raw event streams."""
    out = {}
    for r in raw:
        score_inputs = ScoreInputs(r.organ_times, r.organs, r.organ_values)
        label, onset = label_events(r.antibiotics, r.cultures, score_inputs, r.stay_hours)
        out[r.id] = (label, onset, detect_si(r.antibiotics, r.cultures))
    return out


def build_cohort(raw, labels, rng, min_obs=MIN_OBSERVATIONS, ratio=CONTROLS_PER_CASE):
    """Matched, filtered :class:`LabeledCohort` from raw streams and derived labels.

    Cases keep their derived onset; each matched control receives its case's
    onset. Unmatched controls are not part of the cohort.
    """
    stays = {r.id: r.stay_hours for r in raw}
    cases = {i: lab[1] for i, lab in labels.items() if lab[0] == 1}
    controls = {i: stays[i] for i, lab in labels.items() if lab[0] == 0}
    matching = match_controls(cases, controls, rng, ratio)
    onset_of = dict(cases)
    for case_id, ctl in matching.items():
        for cid in ctl:
            onset_of[cid] = cases[case_id]
    encounters = []
    for r in raw:
        if r.id not in onset_of or r.times.size == 0:
            continue
        encounters.append(Encounter(r.id, r.times, r.channels, r.values,
                                    labels[r.id][0], onset_of[r.id]))
    present = {e.id for e in encounters}
    matching = {c: [k for k in ctl if k in present] for c, ctl in matching.items() if c in present}
    return filter_and_mask(LabeledCohort(encounters, matching), min_obs=min_obs)
