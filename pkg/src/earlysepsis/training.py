"""End-to-end training of the MGP-TCN and the carry-forward Raw-TCN baseline.

The MGP-TCN loss for one encounter is the mean binary cross-entropy over
``S`` reparameterised posterior samples; gradients reach both the TCN
weights and the MGP hyperparameters. Raw-TCN reads the hourly imputed grid
directly and owns no MGP parameters.

Randomness is keyed by ``(seed, stream, epoch, encounter id)`` so a batch
loss does not depend on the order of encounters inside the batch.
"""

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import container
from . import diffcore as dc
from . import tcn
from .data.cohort import bin_and_impute
from .errors import ConfigError, ContractError, DataError, NumericalError, ParameterError
from .evaluation import auc, auprc
from .mgp import JITTER, MGPParams, draw_samples, make_grid, posterior, posterior_nodes, sample_nodes
from .rng import substream

log = logging.getLogger(__name__)

MODEL_KINDS = ("mgp-tcn", "raw-tcn")
CHECKPOINT_KIND = "checkpoint"


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 20
    mc_samples: int = 10
    max_epochs: int = 50
    patience: int = 5
    seed: int = 0
    model_kind: str = "mgp-tcn"

    def __post_init__(self):
        if not 5e-4 <= self.learning_rate <= 5e-3 and self.learning_rate != 0:
            raise ParameterError(f"learning_rate={self.learning_rate} outside [5e-4, 5e-3]")
        if not 10 <= self.batch_size <= 40:
            raise ParameterError(f"batch_size={self.batch_size} outside [10, 40]")
        if self.mc_samples < 1:
            raise ParameterError("mc_samples must be >= 1")
        if self.max_epochs < 0 or self.patience < 1:
            raise ParameterError("max_epochs must be >= 0 and patience >= 1")
        if self.model_kind not in MODEL_KINDS:
            raise ParameterError(f"model_kind must be one of {MODEL_KINDS}, got {self.model_kind!r}")

    @classmethod
    def for_kind(cls, model_kind, **kw):
        """Default epoch budget: 50 for MGP-TCN, 100 for Raw-TCN."""
        kw.setdefault("max_epochs", 50 if model_kind == "mgp-tcn" else 100)
        return cls(model_kind=model_kind, **kw)


# ------------------------------------------------------------------ model state

@dataclass
class Model:
    kind: str
    tcn_config: tcn.TCNConfig
    weights: tcn.TCNWeights
    mgp: MGPParams | None = None

    @property
    def n_channels(self):
        return self.weights.in_channels

    @classmethod
    def init(cls, kind, tcn_config, n_channels, seed):
        w = tcn.TCNWeights.init(tcn_config, n_channels, substream(seed, "init", "tcn"))
        mgp = MGPParams.init(n_channels) if kind == "mgp-tcn" else None
        return cls(kind, tcn_config, w, mgp)

    def arrays(self):
        out = {f"tcn.{k}": v for k, v in self.weights.arrays.items()}
        if self.mgp is not None:
            out.update({f"mgp.{k}": v for k, v in self.mgp.arrays().items()})
        return out

    def with_arrays(self, arrays):
        w = tcn.TCNWeights(self.tcn_config, self.n_channels,
                           {k[4:]: v for k, v in arrays.items() if k.startswith("tcn.")})
        mgp = None
        if self.kind == "mgp-tcn":
            mgp = MGPParams.from_arrays({k[4:]: v for k, v in arrays.items() if k.startswith("mgp.")})
        return Model(self.kind, self.tcn_config, w, mgp)

    def copy(self):
        return self.with_arrays({k: np.array(v, copy=True) for k, v in self.arrays().items()})


@dataclass
class Checkpoint:
    epoch: int
    model: Model
    val_auprc: float
    val_auc: float
    rng_digest: str
    train_config: TrainConfig
    timed_out: bool = False

    def meta(self):
        return {"kind": CHECKPOINT_KIND, "model_kind": self.model.kind, "epoch": self.epoch,
                "val_auprc": self.val_auprc, "val_auc": self.val_auc, "rng_digest": self.rng_digest,
                "tcn_config": asdict(self.model.tcn_config), "in_channels": self.model.n_channels,
                "train_config": asdict(self.train_config), "timed_out": self.timed_out}

    def digest(self):
        return container.digest(self.meta(), self.model.arrays())

    def save(self, path):
        return container.save(path, self.meta(), self.model.arrays())

    @classmethod
    def load(cls, path):
        meta, arrays = container.load(path)
        if meta.get("kind") != CHECKPOINT_KIND:
            raise DataError(f"{path} is not a training checkpoint")
        cfg = tcn.TCNConfig(**meta["tcn_config"])
        shell = Model(meta["model_kind"], cfg, tcn.TCNWeights.zeros(cfg, meta["in_channels"]),
                      MGPParams.init(meta["in_channels"]) if meta["model_kind"] == "mgp-tcn" else None)
        return cls(meta["epoch"], shell.with_arrays(arrays), meta["val_auprc"], meta["val_auc"],
                   meta["rng_digest"], TrainConfig(**meta["train_config"]), meta.get("timed_out", False))


# ------------------------------------------------------------------ losses

def sample_noise(seed, epoch, enc_id, n, S, stream="sampling"):
    """Standard-normal ``(n, S)`` reparameterisation noise for one encounter and epoch."""
    return substream(seed, stream, epoch, enc_id).standard_normal((n, S))


def l2_term(tcn_leaves, weights, l2):
    total = None
    for name in weights.penalized():
        w = tcn_leaves[name]
        sq = dc.sum(w * w)
        total = sq if total is None else total + sq
    return total * l2


def _encounter_logits_mgp(enc, mgp_leaves, tcn_leaves, cfg, xi, train_mode, drop_rng, shared_dropout):
    D = mgp_leaves["log_noise"].shape[0]
    grid = make_grid(enc)
    mean, cov, _, _ = posterior_nodes(enc, grid, mgp_leaves)
    z = sample_nodes(mean, cov, xi, D)
    return tcn.forward_nodes(z, tcn_leaves, cfg, train_mode, drop_rng, shared_dropout)


def _encounter_logits_raw(grid, tcn_leaves, cfg, train_mode, drop_rng):
    return tcn.forward_nodes(dc.constant(grid[None]), tcn_leaves, cfg, train_mode, drop_rng)


def mc_loss(batch, model, mgp_leaves, tcn_leaves, S, seed, epoch=0, train_mode=True,
            noise=None, shared_dropout=False, grids=None):
    """Scalar loss node: mean over encounters of the per-encounter mean BCE, plus the L2 term.

    ``noise`` optionally maps encounter id to a fixed ``(D*X, S)`` array,
    overriding the seeded draw. ``grids`` maps encounter id to the imputed
    grid for Raw-TCN.
    """
    if not batch:
        raise ContractError("mc_loss on an empty batch")
    cfg = model.tcn_config
    terms = []
    # fixed reduction order, so the loss does not depend on batch order
    for enc in sorted(batch, key=lambda e: e.id):
        drop_rng = substream(seed, "dropout", epoch, enc.id) if train_mode and cfg.dropout > 0 else None
        if model.kind == "mgp-tcn":
            if enc.n_obs < S:
                raise ContractError(f"encounter {enc.id} has {enc.n_obs} observations, fewer than "
                                    f"S={S}; it should have been masked")
            n = model.n_channels * make_grid(enc).count
            xi = noise[enc.id] if noise is not None else sample_noise(seed, epoch, enc.id, n, S)
            logits = _encounter_logits_mgp(enc, mgp_leaves, tcn_leaves, cfg, xi, train_mode,
                                           drop_rng, shared_dropout)
        else:
            grid = grids[enc.id] if grids is not None else bin_and_impute(enc, model.n_channels)
            logits = _encounter_logits_raw(grid, tcn_leaves, cfg, train_mode, drop_rng)
        terms.append(dc.mean(dc.bce_with_logits(logits, float(enc.label))))
    data = terms[0]
    for t in terms[1:]:
        data = data + t
    return data * (1.0 / len(terms)) + l2_term(tcn_leaves, model.weights, cfg.l2_penalty)


# ------------------------------------------------------------------ optimizer

class Adam:
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m, self.v, self.t = {}, {}, 0

    def step(self, params, grads):
        """Update the arrays in ``params`` in place."""
        self.t += 1
        if self.lr == 0:
            return
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for k, g in grads.items():
            m = self.m.get(k)
            if m is None:
                m = self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            v = self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            params[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ------------------------------------------------------------------ scoring

def predict_proba(model, encounters, S=10, seed=0, grids=None):
    """Mean predicted probability per encounter (MC average over posterior samples for MGP-TCN)."""
    out = np.empty(len(encounters))
    w = model.weights
    for i, enc in enumerate(encounters):
        if model.kind == "mgp-tcn":
            post = posterior(enc, make_grid(enc), model.mgp)
            z = draw_samples(post, S, substream(seed, "eval-sampling", enc.id), JITTER)
            logits = tcn.tcn_forward(z, model.tcn_config, w)
        else:
            grid = grids[enc.id] if grids is not None else bin_and_impute(enc, model.n_channels)
            logits = np.atleast_1d(tcn.tcn_forward(grid, model.tcn_config, w))
        out[i] = np.mean(1.0 / (1.0 + np.exp(-np.clip(logits, -500, 500))))
    return out


def _metrics(model, encounters, S, seed, grids=None):
    y = np.array([e.label for e in encounters])
    p = predict_proba(model, encounters, S, seed, grids)
    return auprc(y, p, "validation"), auc(y, p, "validation")


# ------------------------------------------------------------------ training loop

@dataclass
class TrainResult:
    best: Checkpoint
    history: list = field(default_factory=list)
    stopped: str = "max_epochs"


def _norms(arrays):
    return {k: float(np.linalg.norm(v)) for k, v in arrays.items()}


def rng_digest(seed, epoch):
    """Digest of the generator states that produced ``epoch`` (shuffle order)."""
    state = substream(seed, "shuffle", epoch).bit_generator.state
    return hashlib.sha256(json.dumps(state, sort_keys=True, default=str).encode()).hexdigest()


def train(train_encs, val_encs, config, tcn_config, n_channels, log_path=None, max_seconds=None,
          model=None):
    """Mini-batch Adam with early stopping on validation AUPRC.

    Encounters must already be truncated and z-scored. Epoch 0 is the
    initial model; the returned checkpoint is the best epoch seen.
    """
    if not train_encs:
        raise ConfigError("training split is empty")
    if not val_encs:
        raise ConfigError("validation split is empty")
    ids = [e.id for e in train_encs] + [e.id for e in val_encs]
    if len(set(ids)) != len(ids):
        raise ConfigError("train/validation splits overlap or repeat encounter ids")
    S = config.mc_samples
    seed = config.seed
    model = model.copy() if model is not None else Model.init(config.model_kind, tcn_config, n_channels, seed)
    grids = None
    if model.kind == "raw-tcn":
        grids = {e.id: bin_and_impute(e, n_channels) for e in list(train_encs) + list(val_encs)}

    start = time.perf_counter()
    logf = open(log_path, "w", encoding="utf-8") if log_path else None

    def emit(rec):
        log.info("epoch %(epoch)d loss %(train_loss).5f val_auprc %(val_auprc).4f", rec)
        if logf:
            logf.write(json.dumps(rec, sort_keys=True) + "\n")
            logf.flush()

    try:
        ap, roc = _metrics(model, val_encs, S, seed, grids)
        best = Checkpoint(0, model.copy(), ap, roc, rng_digest(seed, 0), config)
        history = [{"epoch": 0, "train_loss": float("nan"), "val_auprc": ap, "val_auc": roc,
                    "seconds": time.perf_counter() - start}]
        emit(history[-1])
        params = model.arrays()
        opt = Adam(config.learning_rate)
        stale = 0
        stopped = "max_epochs"
        timed_out = False
        for epoch in range(1, config.max_epochs + 1):
            order = substream(seed, "shuffle", epoch).permutation(len(train_encs))
            losses = []
            for b, lo in enumerate(range(0, len(order), config.batch_size)):
                batch = [train_encs[i] for i in order[lo:lo + config.batch_size]]
                cur = model.with_arrays(params)
                mgp_leaves = cur.mgp.leaves() if cur.mgp is not None else None
                tcn_leaves = cur.weights.leaves()
                loss = mc_loss(batch, cur, mgp_leaves, tcn_leaves, S, seed, epoch, True, grids=grids)
                value = float(loss.value)
                if not math.isfinite(value):
                    raise NumericalError(f"non-finite loss {value} at epoch {epoch}, batch {b}; "
                                         f"parameter norms {_norms(params)}")
                dc.backward(loss)
                grads = {f"tcn.{k}": n.grad for k, n in tcn_leaves.items()}
                if mgp_leaves is not None:
                    grads.update({f"mgp.{k}": np.asarray(n.grad).reshape(np.shape(params[f'mgp.{k}']))
                                  for k, n in mgp_leaves.items()})
                for k, g in grads.items():
                    if not np.all(np.isfinite(g)):
                        raise NumericalError(f"non-finite gradient for {k} at epoch {epoch}, batch {b}; "
                                             f"parameter norms {_norms(params)}")
                opt.step(params, grads)
                losses.append(value)
                if max_seconds is not None and time.perf_counter() - start > max_seconds:
                    timed_out = True
                    break
            if timed_out:
                stopped = "timeout"
                break
            model = model.with_arrays(params)
            ap, roc = _metrics(model, val_encs, S, seed, grids)
            history.append({"epoch": epoch, "train_loss": float(np.mean(losses)), "val_auprc": ap,
                            "val_auc": roc, "seconds": time.perf_counter() - start})
            emit(history[-1])
            if ap > best.val_auprc:
                best = Checkpoint(epoch, model.copy(), ap, roc, rng_digest(seed, epoch), config)
                stale = 0
            else:
                stale += 1
                if stale >= config.patience:
                    stopped = "early_stop"
                    break
        if timed_out:
            best = replace(best, timed_out=True)
    finally:
        if logf:
            logf.close()
    return TrainResult(best, history, stopped)


# ------------------------------------------------------------------ random search

SEARCH_SPACE = {
    "learning_rate": ("log", 5e-4, 5e-3),
    "batch_size": ("int", 10, 40),
    "num_blocks": ("int", 4, 9),
    "filters_per_layer": ("int", 15, 90),
    "filter_width": ("int", 2, 5),
    "dropout": ("uniform", 0.0, 0.1),
    "l2_penalty": ("log", 0.01, 100.0),
}


def sample_point(space, rng):
    out = {}
    for name, (kind, lo, hi) in space.items():
        if kind == "log":
            out[name] = float(np.exp(rng.uniform(np.log(lo), np.log(hi))))
        elif kind == "int":
            out[name] = int(rng.integers(lo, hi + 1))
        elif kind == "uniform":
            out[name] = float(rng.uniform(lo, hi))
        else:
            raise ConfigError(f"unknown search dimension kind {kind!r} for {name}")
    return out


def split_point(point, base_train=None):
    """``(TrainConfig, TCNConfig)`` from a sampled point; unsampled fields keep defaults."""
    base_train = base_train or TrainConfig()
    tkeys = {k: v for k, v in point.items() if k in TrainConfig.__dataclass_fields__}
    nkeys = {k: v for k, v in point.items() if k in tcn.TCNConfig.__dataclass_fields__}
    return replace(base_train, **tkeys), tcn.TCNConfig(**nkeys)


def random_search(space, n_calls, seed, objective):
    """Seeded random search; ``objective(point) -> validation AUPRC``. Ties keep the first point.

    Returns ``(best_point, best_value, trials)``.
    """
    if n_calls < 1:
        raise ConfigError(f"n_calls must be >= 1, got {n_calls}")
    rng = substream(seed, "search")
    best, best_value, trials = None, -math.inf, []
    for _ in range(n_calls):
        point = sample_point(space, rng)
        value = float(objective(point))
        trials.append((point, value))
        if value > best_value:
            best, best_value = point, value
    return best, best_value, trials
