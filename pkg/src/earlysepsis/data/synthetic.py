"""Seeded synthetic ICU cohort.

Vitals are latent Ornstein-Uhlenbeck trajectories (a few shared factors plus
one idiosyncratic process per channel) observed at Poisson times with
Gaussian noise. Cases get a ramp drift on a subset of channels that starts
``signal_lead_hours`` before the planted onset, and carry antibiotic,
culture and organ-score events arranged so that the labeler recovers the
planted onset. Controls carry decoy events that never satisfy both
criteria at once.
"""

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from ..errors import ConfigError
from ..mgp import Encounter
from ..rng import substream
from .labeling import N_ORGANS, ORGAN_THRESHOLDS

TIME_DECIMALS = 3
VALUE_DECIMALS = 4


@dataclass(frozen=True)
class GeneratorSpec:
    n_encounters: int = 2000
    n_channels: int = 44
    case_fraction: float = 0.085
    signal_strength: float = 3.0
    n_signal_channels: int = 6
    signal_lead_hours: float = 10.0
    obs_rate: float = 0.2  # expected observations per channel-hour
    noise_sd: float = 0.5
    ou_length_scale: float = 6.0
    n_factors: int = 3
    stay_median_h: float = 48.0
    stay_sigma: float = 0.5
    onset_median_h: float = 14.0
    onset_sigma: float = 0.6
    max_stay_h: float = 240.0

    def validate(self):
        if self.n_encounters <= 0:
            raise ConfigError(f"n_encounters must be positive, got {self.n_encounters}")
        if self.n_channels < 1:
            raise ConfigError(f"n_channels must be >= 1, got {self.n_channels}")
        if not 0 < self.case_fraction < 1:
            raise ConfigError(f"case_fraction must lie in (0, 1), got {self.case_fraction}")
        if self.case_fraction * 11 > 1:
            raise ConfigError(f"case_fraction {self.case_fraction} leaves fewer than 10 controls "
                              f"per case; 1:10 matching is infeasible")
        if not 0 <= self.n_signal_channels <= self.n_channels:
            raise ConfigError("n_signal_channels must lie in [0, n_channels]")
        if self.signal_strength < 0:
            raise ConfigError("signal_strength must be >= 0")
        for name in ("signal_lead_hours", "obs_rate", "ou_length_scale", "stay_median_h",
                     "onset_median_h", "max_stay_h"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("noise_sd", "stay_sigma", "onset_sigma"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.n_factors < 0:
            raise ConfigError("n_factors must be >= 0")
        return self

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown generator keys: {unknown}")
        return cls(**d).validate()

    def to_dict(self):
        return asdict(self)


@dataclass(eq=False)
class RawEncounter:
    """All raw events of one stay. Times are hours since admission."""

    id: str
    stay_hours: float
    times: np.ndarray
    channels: np.ndarray
    values: np.ndarray
    antibiotics: np.ndarray
    cultures: np.ndarray
    organ_times: np.ndarray
    organs: np.ndarray
    organ_values: np.ndarray
    planted_onset: float | None = None
    meta: dict = field(default_factory=dict)


def encounter_ids(n):
    width = max(5, len(str(n - 1)))
    return [f"enc{i:0{width}d}" for i in range(n)]


def _ou_paths(times, n_paths, length_scale, rng):
    """Stationary unit-variance OU paths sampled exactly at sorted ``times``; shape (n_paths, len(times))."""
    out = np.empty((n_paths, times.size))
    if times.size == 0 or n_paths == 0:
        return out
    eps = rng.standard_normal((n_paths, times.size))
    rho = np.exp(-np.diff(times) / length_scale)
    step = np.sqrt(1.0 - rho ** 2)
    out[:, 0] = eps[:, 0]
    for k in range(1, times.size):
        out[:, k] = rho[k - 1] * out[:, k - 1] + step[k - 1] * eps[:, k]
    return out


def _cohort_physiology(spec, rng):
    D = spec.n_channels
    loc = rng.normal(0.0, 5.0, D)
    scale = rng.uniform(0.5, 2.0, D)
    loadings = rng.normal(0.0, 0.6, (D, spec.n_factors)) / max(1.0, math.sqrt(spec.n_factors))
    signal = rng.choice(D, size=spec.n_signal_channels, replace=False) if spec.n_signal_channels else np.zeros(0, int)
    sign = rng.choice([-1.0, 1.0], size=signal.size)
    return dict(loc=loc, scale=scale, loadings=loadings, signal=np.sort(signal), sign=sign)


def _vitals(spec, phys, stay, onset, rng):
    D = spec.n_channels
    counts = rng.poisson(spec.obs_rate * stay, D)
    ch = np.repeat(np.arange(D), counts)
    t = np.round(rng.uniform(0.0, stay, ch.size), TIME_DECIMALS)
    uniq, inv = np.unique(t, return_inverse=True)
    factors = _ou_paths(uniq, spec.n_factors, spec.ou_length_scale, rng)
    own = _ou_paths(uniq, D, spec.ou_length_scale, rng)
    latent = own[ch, inv] + np.einsum("nf,fn->n", phys["loadings"][ch], factors[:, inv]) if spec.n_factors \
        else own[ch, inv]
    if onset is not None and spec.signal_strength > 0 and phys["signal"].size:
        lead = spec.signal_lead_hours
        ramp = np.clip((t - (onset - lead)) / lead, 0.0, 1.0)
        drift = np.zeros(D)
        drift[phys["signal"]] = phys["sign"] * spec.signal_strength
        latent = latent + ramp * drift[ch]
    noise = spec.noise_sd * rng.standard_normal(ch.size)
    v = phys["loc"][ch] + phys["scale"][ch] * (latent + noise)
    return t, ch, np.round(v, VALUE_DECIMALS)


def _organ_baseline(rng):
    """Per-organ baseline severity values; at most one organ sits in the 1-point band."""
    base = rng.uniform(-1.0, 1.0, N_ORGANS)
    if rng.random() < 0.4:
        base[rng.integers(N_ORGANS)] = rng.uniform(ORGAN_THRESHOLDS[0] + 0.05, ORGAN_THRESHOLDS[1] - 0.05)
    return base


def _organ_series(baseline, stay, rng, jump=None):
    """Organ measurements every 4-8 h around a stable baseline.

    ``jump = (time, organ, level)`` adds a measurement of ``level`` at
    ``time`` for ``organ`` and keeps that organ at ``level`` afterwards.
    """
    times, organs, vals = [], [], []
    for o in range(N_ORGANS):
        t = rng.uniform(0.0, 4.0)
        while t <= stay:
            level = baseline[o]
            if jump is not None and o == jump[1] and t >= jump[0]:
                level = jump[2]
            times.append(t)
            organs.append(o)
            vals.append(level + rng.uniform(-0.02, 0.02))
            t += rng.uniform(4.0, 8.0)
    if jump is not None:
        times.append(jump[0])
        organs.append(jump[1])
        vals.append(jump[2])
    t = np.round(np.array(times), TIME_DECIMALS)
    v = np.round(np.array(vals), VALUE_DECIMALS)
    return t, np.array(organs, dtype=np.int64), v


def _severe_level(rng):
    """A value worth 2 or 3 points."""
    return rng.uniform(ORGAN_THRESHOLDS[1] + 0.05, ORGAN_THRESHOLDS[3] - 0.05)


def _case_events(onset, stay, rng):
    si = max(0.0, onset + rng.uniform(-20.0, 20.0))
    if rng.random() < 0.5:
        cultures = [si]
        antibiotics = [si + rng.uniform(0.0, 72.0)]
    else:
        antibiotics = [si]
        cultures = [si + rng.uniform(0.0, 24.0)]
    baseline = _organ_baseline(rng)
    quiet = np.flatnonzero(baseline < ORGAN_THRESHOLDS[0])
    organ = int(rng.choice(quiet))
    organ_t, organ_o, organ_v = _organ_series(baseline, stay, rng, jump=(onset, organ, _severe_level(rng)))
    return np.round(antibiotics, TIME_DECIMALS), np.round(cultures, TIME_DECIMALS), organ_t, organ_o, organ_v


def _control_events(stay, rng):
    """Decoy events: SI without deterioration, deterioration without SI, or unpaired events."""
    kind = rng.integers(4)
    baseline = _organ_baseline(rng)
    quiet = np.flatnonzero(baseline < ORGAN_THRESHOLDS[0])
    antibiotics, cultures, jump = [], [], None
    if kind == 0:  # no infection workup, may still deteriorate
        if rng.random() < 0.5:
            jump = (rng.uniform(0.0, stay), int(rng.choice(quiet)), _severe_level(rng))
    elif kind == 1:  # SI with flat scores
        si = rng.uniform(0.0, stay)
        cultures, antibiotics = [si], [si + rng.uniform(0.0, 72.0)]
    elif kind == 2:  # antibiotic followed by a culture too late to count
        a = rng.uniform(0.0, stay)
        antibiotics, cultures = [a], [a + rng.uniform(24.5, 60.0)]
    else:  # SI, deterioration well after the window closes
        si = rng.uniform(0.0, stay / 2)
        antibiotics, cultures = [si], [si + rng.uniform(0.0, 24.0)]
        late = si + 24.0 + 1.5 + rng.uniform(0.0, 24.0)
        if late < stay:
            jump = (late, int(rng.choice(quiet)), _severe_level(rng))
    organ_t, organ_o, organ_v = _organ_series(baseline, stay, rng, jump=jump)
    return (np.round(np.array(antibiotics, float), TIME_DECIMALS),
            np.round(np.array(cultures, float), TIME_DECIMALS), organ_t, organ_o, organ_v)


def generate_synthetic(spec, seed):
    """List of :class:`RawEncounter` for ``spec``; identical for identical ``(spec, seed)``."""
    spec.validate()
    rng = substream(seed, "generator")
    phys = _cohort_physiology(spec, rng)
    ids = encounter_ids(spec.n_encounters)
    is_case = rng.random(spec.n_encounters) < spec.case_fraction
    out = []
    for i, eid in enumerate(ids):
        r = substream(seed, "generator", eid)
        if is_case[i]:
            onset = float(np.round(min(r.lognormal(math.log(spec.onset_median_h), spec.onset_sigma),
                                       spec.max_stay_h - 24.0), TIME_DECIMALS))
            onset = max(onset, 0.5)
            stay = float(np.round(onset + r.uniform(6.0, 48.0), TIME_DECIMALS))
            t, c, v = _vitals(spec, phys, stay, onset, r)
            abx, cul, ot, oo, ov = _case_events(onset, stay, r)
        else:
            onset = None
            stay = float(np.round(min(r.lognormal(math.log(spec.stay_median_h), spec.stay_sigma),
                                      spec.max_stay_h), TIME_DECIMALS))
            stay = max(stay, 2.0)
            t, c, v = _vitals(spec, phys, stay, None, r)
            abx, cul, ot, oo, ov = _control_events(stay, r)
        out.append(RawEncounter(eid, stay, t, c, v, abx, cul, ot, oo, ov, onset))
    return out


def separable_encounters(n, n_channels=2, prevalence=0.3, seed=0, obs_per_hour=1.0):
    """Labelled encounters where channel 0 jumps to +3 in the 3 h before onset for cases only.

    Already matched: every encounter carries an onset hour, so a model
    trained at horizon 0 can read the separating signal.
    """
    rng = substream(seed, "separable")
    out = []
    for i, eid in enumerate(encounter_ids(n)):
        label = int(rng.random() < prevalence) if i > 1 else i  # both classes always present
        onset = float(np.round(rng.uniform(8.0, 16.0), TIME_DECIMALS))
        m = max(12, rng.poisson(obs_per_hour * n_channels * onset))
        t = np.round(rng.uniform(0.0, onset, m), TIME_DECIMALS)
        c = rng.integers(0, n_channels, m)
        c[:n_channels] = np.arange(n_channels)
        t[0] = onset  # channel 0 always observed at onset
        v = rng.normal(0.0, 0.3, m)
        if label:
            v[(c == 0) & (t >= onset - 3.0)] += 3.0
        out.append(Encounter(eid, t, c, np.round(v, VALUE_DECIMALS), label, onset))
    return out
