"""Hourly Sepsis-3-style event labels from infection and organ-dysfunction events.

Suspicion of infection (SI) needs an antibiotic and a body-fluid culture
close in time: a culture followed by an antibiotic within 72 h, or an
antibiotic followed by a culture within 24 h. Around the first SI time,
an hourly severity score is evaluated from 48 h before to 24 h after; the
onset is the first hour at which the score sits 2 or more points above its
running minimum inside that window.

The severity score is a synthetic stand-in for SOFA: ``N_ORGANS`` organ
channels, each mapped to 0-4 points by fixed thresholds on the worst
(largest) value seen in the trailing 24 hours.
"""

import math

import numpy as np

CULTURE_FIRST_WINDOW_H = 72.0
ANTIBIOTIC_FIRST_WINDOW_H = 24.0
WINDOW_BEFORE_H = 48.0
WINDOW_AFTER_H = 24.0
SCORE_LOOKBACK_H = 24.0
ONSET_INCREASE = 2

N_ORGANS = 5
# standard-normal quantiles 0.90, 0.95, 0.99, 0.999 -> 1..4 points
ORGAN_THRESHOLDS = np.array([1.2816, 1.6449, 2.3263, 3.0902])


def detect_si(antibiotics, cultures):
    """First suspicion-of-infection time, or ``None``.

    The SI time of a qualifying pair is the earlier of its two events.
    """
    abx = np.sort(np.asarray(antibiotics, dtype=np.float64))
    cul = np.sort(np.asarray(cultures, dtype=np.float64))
    best = None
    for c in cul:
        for a in abx:
            gap = a - c
            ok = gap <= CULTURE_FIRST_WINDOW_H if gap >= 0 else -gap <= ANTIBIOTIC_FIRST_WINDOW_H
            if ok:
                t = min(a, c)
                if best is None or t < best:
                    best = t
    return None if best is None else float(best)


def organ_points(values):
    """Points (0-4) for organ severity values."""
    return np.searchsorted(ORGAN_THRESHOLDS, np.asarray(values, dtype=np.float64), side="right")


class ScoreInputs:
    """Organ measurements ``(time, organ, value)`` for one encounter."""

    def __init__(self, times, organs, values):
        t = np.asarray(times, dtype=np.float64)
        o = np.asarray(organs, dtype=np.int64)
        v = np.asarray(values, dtype=np.float64)
        order = np.lexsort((v, o, t))
        self.times, self.organs, self.values = t[order], o[order], v[order]


def hourly_sofa(inputs, hour):
    """Score at ``hour`` from the worst value per organ in ``(hour - 24, hour]``."""
    sel = (inputs.times > hour - SCORE_LOOKBACK_H) & (inputs.times <= hour)
    total = 0
    for organ in range(N_ORGANS):
        vals = inputs.values[sel & (inputs.organs == organ)]
        if vals.size:
            total += int(organ_points(vals.max()))
    return total


def hourly_sofa_series(inputs, last_hour):
    """Scores at hours ``0..last_hour`` inclusive."""
    return np.array([hourly_sofa(inputs, h) for h in range(int(last_hour) + 1)], dtype=np.int64)


def sepsis_onset(si_time, scores, stay_end=None):
    """First hour in the SI window where the score is >= 2 above its running minimum.

    ``scores[h]`` is the score at integer hour ``h``. The window
    ``[si - 48, si + 24]`` is clipped to ``[0, stay_end]`` and to the hours
    available in ``scores``.
    """
    if si_time is None:
        return None
    start = max(0, math.ceil(si_time - WINDOW_BEFORE_H))
    end = math.floor(si_time + WINDOW_AFTER_H)
    if stay_end is not None:
        end = min(end, math.floor(stay_end))
    end = min(end, len(scores) - 1)
    running_min = None
    for h in range(start, end + 1):
        s = scores[h]
        running_min = s if running_min is None else min(running_min, s)
        if s - running_min >= ONSET_INCREASE:
            return float(h)
    return None


def label_events(antibiotics, cultures, score_inputs, stay_end):
    """``(label, onset_hour)`` for one encounter's raw events."""
    si = detect_si(antibiotics, cultures)
    if si is None:
        return 0, None
    last = math.floor(min(si + WINDOW_AFTER_H, stay_end))
    if last < 0:
        return 0, None
    onset = sepsis_onset(si, hourly_sofa_series(score_inputs, last), stay_end)
    return (1, onset) if onset is not None else (0, None)
