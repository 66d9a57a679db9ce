"""Multi-task Gaussian process over sparse (time, channel) observations.

The prior covariance between the latent value of channel ``d`` at time ``t``
and channel ``d'`` at ``t'`` is ``K^D[d, d'] * exp(-|t - t'| / l)``; each
observation adds channel-specific Gaussian noise. Only the ``m`` observed
(time, channel) pairs enter the observed covariance, never the full
``D * T`` grid.

Latent grid vectors use channel-major layout: entry ``d * X + x`` holds
channel ``d`` at grid time ``x``.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import lapack

from . import diffcore as dc
from .errors import ConditioningError, ContractError, FactorizationError, ParameterError

JITTER = 1e-6
MAX_JITTER = 1e-2


class MaskableEncounter(ContractError):
    """Raised when an operation (e.g. horizon truncation) leaves no observations."""


@dataclass(eq=False)
class Encounter:
    """One ICU stay: irregular ``(time, channel, value)`` observations plus its label.

    Observations are stored sorted by time, then channel, then value, so
    that any permutation of the same observations gives identical arrays.
    """

    id: str
    times: np.ndarray
    channels: np.ndarray
    values: np.ndarray
    label: int = 0
    onset_hour: float | None = None

    def __post_init__(self):
        t = np.asarray(self.times, dtype=np.float64).ravel()
        c = np.asarray(self.channels, dtype=np.int64).ravel()
        v = np.asarray(self.values, dtype=np.float64).ravel()
        if not (t.shape == c.shape == v.shape):
            raise ContractError(f"encounter {self.id}: times/channels/values lengths differ")
        if t.size == 0:
            raise MaskableEncounter(f"encounter {self.id} has no observations")
        if not np.all(np.isfinite(t)) or np.any(t < 0):
            raise ContractError(f"encounter {self.id}: observation times must be finite and >= 0")
        if not np.all(np.isfinite(v)):
            raise ContractError(f"encounter {self.id}: non-finite observation value")
        if np.any(c < 0):
            raise ContractError(f"encounter {self.id}: negative channel index")
        order = np.lexsort((v, c, t))
        self.times, self.channels, self.values = t[order], c[order], v[order]
        self.label = int(self.label)
        if self.label not in (0, 1):
            raise ContractError(f"encounter {self.id}: label must be 0 or 1")

    @classmethod
    def from_observations(cls, id, observations, label=0, onset_hour=None):
        obs = list(observations)
        if not obs:
            raise MaskableEncounter(f"encounter {id} has no observations")
        t, c, v = zip(*obs)
        return cls(id, np.array(t), np.array(c), np.array(v), label, onset_hour)

    @property
    def n_obs(self):
        return int(self.times.size)

    @property
    def observations(self):
        return list(zip(self.times.tolist(), self.channels.tolist(), self.values.tolist()))

    def replace(self, times=None, channels=None, values=None, **changes):
        fields = dict(id=self.id, times=self.times, channels=self.channels,
                      values=self.values, label=self.label, onset_hour=self.onset_hour)
        if times is not None:
            fields.update(times=times, channels=channels, values=values)
        fields.update(changes)
        return Encounter(**fields)


@dataclass
class Grid:
    times: np.ndarray

    @property
    def count(self):
        return int(self.times.size)


def make_grid(enc):
    """Hourly query grid ``0, 1, ...`` up to the next full hour strictly after the last observation."""
    last = int(np.floor(enc.times[-1])) + 1
    return Grid(np.arange(last + 1, dtype=np.float64))


def _inv_softplus(y):
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


@dataclass
class MGPParams:
    """Shared MGP hyperparameters.

    ``task_factor_raw`` is unconstrained: its strictly-lower entries are the
    off-diagonal of the task-kernel Cholesky factor, its diagonal passes
    through softplus, and the upper triangle is ignored.
    """

    task_factor_raw: np.ndarray
    log_noise: np.ndarray
    log_length_scale: float

    def __post_init__(self):
        self.task_factor_raw = np.array(self.task_factor_raw, dtype=np.float64)
        self.log_noise = np.array(self.log_noise, dtype=np.float64).ravel()
        self.log_length_scale = float(self.log_length_scale)
        D = self.log_noise.size
        if self.task_factor_raw.shape != (D, D):
            raise ParameterError(f"task factor must be {D}x{D}, got {self.task_factor_raw.shape}")

    @classmethod
    def init(cls, n_channels, noise_var=0.1, length_scale=2.0):
        raw = np.diag(np.full(n_channels, _inv_softplus(1.0)))
        return cls(raw, np.full(n_channels, np.log(noise_var)), np.log(length_scale))

    @classmethod
    def from_natural(cls, task_factor, noise_var, length_scale):
        L = np.tril(np.asarray(task_factor, dtype=np.float64))
        if np.any(np.diag(L) <= 0):
            raise ParameterError("task factor diagonal must be strictly positive")
        if length_scale <= 0:
            raise ParameterError(f"length scale must be positive, got {length_scale}")
        raw = np.tril(L, -1) + np.diag(_inv_softplus(np.diag(L)))
        noise_var = np.broadcast_to(np.asarray(noise_var, dtype=np.float64), (L.shape[0],))
        with np.errstate(divide="ignore"):
            log_noise = np.log(noise_var)
        return cls(raw, log_noise, np.log(length_scale))

    @property
    def n_channels(self):
        return self.log_noise.size

    @property
    def task_factor(self):
        raw = self.task_factor_raw
        d = np.diag(raw)
        return np.tril(raw, -1) + np.diag(np.maximum(d, 0) + np.log1p(np.exp(-np.abs(d))))

    @property
    def task_kernel(self):
        L = self.task_factor
        return L @ L.T

    @property
    def noise_var(self):
        return np.exp(self.log_noise)

    @property
    def length_scale(self):
        return float(np.exp(self.log_length_scale))

    def n_free_parameters(self):
        D = self.n_channels
        return D * (D + 1) // 2 + D + 1

    def leaves(self, requires_grad=True):
        """Graph leaves for the three parameter groups, keyed by field name."""
        make = dc.leaf if requires_grad else (lambda v, name: dc.constant(v, name=name))
        return {
            "task_factor_raw": make(self.task_factor_raw, name="mgp.task_factor_raw"),
            "log_noise": make(self.log_noise, name="mgp.log_noise"),
            "log_length_scale": make(self.log_length_scale, name="mgp.log_length_scale"),
        }

    def arrays(self):
        return {"task_factor_raw": self.task_factor_raw.copy(),
                "log_noise": self.log_noise.copy(),
                "log_length_scale": np.array(self.log_length_scale)}

    @classmethod
    def from_arrays(cls, arrays):
        return cls(arrays["task_factor_raw"], arrays["log_noise"], float(arrays["log_length_scale"]))


def ou_kernel(t, t2, length_scale):
    """Ornstein-Uhlenbeck correlation ``exp(-|t - t2| / length_scale)``; broadcasts."""
    if not length_scale > 0:
        raise ParameterError(f"length_scale must be positive, got {length_scale}")
    return np.exp(-np.abs(np.subtract(t, t2)) / length_scale)


@dataclass
class Posterior:
    mean: np.ndarray
    cov: np.ndarray
    n_channels: int
    n_times: int
    jitter: float = field(default=JITTER)

    @property
    def mean_grid(self):
        return self.mean.reshape(self.n_channels, self.n_times)


@dataclass
class ObservedCovariance:
    matrix: np.ndarray
    factor: np.ndarray
    jitter: float


def _check_channels(enc, D):
    if enc.channels.max() >= D:
        raise ContractError(f"encounter {enc.id}: channel {enc.channels.max()} >= D={D}")


def _factor_with_jitter(build, jitter, what):
    """Try ``cholesky(build(j))`` for j = jitter, 10*jitter, ... up to MAX_JITTER."""
    j = jitter
    while True:
        try:
            return dc.cholesky(build(j)), j
        except FactorizationError as exc:
            last = exc
        if j >= MAX_JITTER:
            raise ConditioningError(f"{what}: not factorizable with jitter up to {MAX_JITTER:g} "
                                    f"(pivot {last.pivot})")
        j = min(j * 10 if j > 0 else JITTER, MAX_JITTER)


def _task_factor_node(p):
    raw = p["task_factor_raw"]
    D = raw.shape[0]
    strict = np.tril(np.ones((D, D)), -1)
    return raw * strict + np.eye(D) * dc.softplus(raw)


def posterior_nodes(enc, grid, p, jitter=JITTER):
    """Differentiable posterior mean and covariance at ``grid`` for one encounter.

    ``p`` maps the :class:`MGPParams` field names to graph nodes (see
    :meth:`MGPParams.leaves`). Returns ``(mean, cov, observed_factor,
    jitter_used)``.
    """
    D = p["log_noise"].shape[0]
    _check_channels(enc, D)
    t, ch, y = enc.times, enc.channels, enc.values
    m = t.size
    x = grid.times
    X = x.size

    L_task = _task_factor_node(p)
    KD = L_task @ L_task.T
    inv_l = dc.exp(-p["log_length_scale"])

    K_t = dc.exp(-np.abs(t[:, None] - t[None, :]) * inv_l)
    noise = dc.exp(p["log_noise"])[ch]
    sigma = KD[ch[:, None], ch[None, :]] * K_t + np.eye(m) * noise
    eye_m = np.eye(m)
    chol, used = _factor_with_jitter(lambda j: sigma + eye_m * j if j else sigma, jitter,
                                     f"observed covariance of encounter {enc.id}")
    alpha = dc.triangular_solve(chol, dc.triangular_solve(chol, y), trans=True)

    # scatter alpha onto the (channel, unique observed time) lattice, then apply K^D ⊗ K^{XT}
    uniq, inverse = np.unique(t, return_inverse=True)
    U = uniq.size
    scatter = np.zeros((D * U, m))
    scatter[ch * U + inverse, np.arange(m)] = 1.0
    K_xu = dc.exp(-np.abs(x[:, None] - uniq[None, :]) * inv_l)
    mean = dc.kron_structured_matvec(KD, K_xu, scatter @ alpha)

    K_xt = dc.exp(-np.abs(x[:, None] - t[None, :]) * inv_l)
    cross = (KD[:, ch].reshape(D, 1, m) * K_xt.reshape(1, X, m)).reshape(D * X, m)
    V = dc.triangular_solve(chol, cross.T)
    K_x = dc.exp(-np.abs(x[:, None] - x[None, :]) * inv_l)
    prior = (KD.reshape(D, 1, D, 1) * K_x.reshape(1, X, 1, X)).reshape(D * X, D * X)
    cov = prior - V.T @ V
    return mean, cov, chol, used


def _const_params(params):
    return params.leaves(requires_grad=False)


def observed_covariance(enc, params, jitter=JITTER):
    """Observed-pair covariance ``Σ_i`` (without jitter) and the Cholesky factor of ``Σ_i + jitter·I``."""
    D = params.n_channels
    _check_channels(enc, D)
    t, ch = enc.times, enc.channels
    KD = params.task_kernel
    sigma = KD[ch[:, None], ch[None, :]] * ou_kernel(t[:, None], t[None, :], params.length_scale)
    sigma[np.diag_indices_from(sigma)] += params.noise_var[ch]
    j = jitter
    while True:
        factor, info = lapack.dpotrf(sigma + j * np.eye(t.size), lower=1, clean=1)
        if info == 0:
            return ObservedCovariance(sigma, factor, j)
        if j >= MAX_JITTER:
            raise ConditioningError(
                f"observed covariance of encounter {enc.id} not factorizable "
                f"with jitter up to {MAX_JITTER:g}", encounter_id=enc.id)
        j = min(j * 10 if j > 0 else JITTER, MAX_JITTER)


def posterior(enc, grid, params, jitter=JITTER):
    try:
        mean, cov, _, used = posterior_nodes(enc, grid, _const_params(params), jitter)
    except ConditioningError as exc:
        exc.encounter_id = enc.id
        raise
    return Posterior(mean.value, cov.value, params.n_channels, grid.count, used)


def sample_nodes(mean, cov, xi, n_channels, jitter=JITTER):
    """Reparameterised samples ``mean + R xi`` with ``R Rᵀ = cov + jitter·I``.

    ``xi`` is ``(D*X, S)`` standard normal noise; returns a node of shape
    ``(S, D, X)``.
    """
    n = mean.shape[0]
    eye = np.eye(n)
    R, _ = _factor_with_jitter(lambda j: cov + eye * j if j else cov, jitter, "posterior covariance")
    z = mean.reshape(n, 1) + R @ xi
    S = xi.shape[1]
    return dc.transpose(z).reshape(S, n_channels, n // n_channels)


def _psd_factor(cov, jitter):
    if jitter == 0:
        factor, info = lapack.dpotrf(cov, lower=1, clean=1)
        if info == 0:
            return factor
        w, V = np.linalg.eigh(0.5 * (cov + cov.T))
        return V * np.sqrt(np.clip(w, 0, None))
    j = jitter
    n = cov.shape[0]
    while True:
        factor, info = lapack.dpotrf(cov + j * np.eye(n), lower=1, clean=1)
        if info == 0:
            return factor
        if j >= MAX_JITTER:
            raise ConditioningError(f"posterior covariance not factorizable with jitter up to {MAX_JITTER:g}")
        j = min(j * 10, MAX_JITTER)


def draw_samples(post, count, seed, jitter=JITTER):
    """``count`` samples of the latent grid, shape ``(count, D, X)``.

    ``seed`` may be an int or a ``numpy.random.Generator``. With
    ``jitter=0`` a singular covariance falls back to an eigen-factor, so a
    zero covariance returns the mean exactly.
    """
    if count < 1:
        raise ContractError(f"sample count must be >= 1, got {count}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n = post.mean.size
    xi = rng.standard_normal((n, count))
    R = _psd_factor(post.cov, jitter)
    z = post.mean[:, None] + R @ xi
    return z.T.reshape(count, post.n_channels, post.n_times)
