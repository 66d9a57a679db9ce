"""Glue shared by the CLI and end-to-end experiments: splits, normalisation,
per-method training and horizon tables."""

import logging
from dataclasses import dataclass

import numpy as np

from . import dtwknn, training
from .data.cohort import bin_and_impute, mask_at_horizon, zscore_fit
from .errors import ConfigError
from .evaluation import horizon_eval, stratified_split

log = logging.getLogger(__name__)

METHODS = ("mgp-tcn", "raw-tcn", "dtw-knn")


@dataclass
class PreparedSplit:
    seed: int
    train: list  # z-scored, truncated at onset
    val: list
    test: list  # z-scored, untruncated (horizon_eval truncates)
    stats: object


def prepare_split(cohort, n_channels, seed, min_obs=10):
    """Stratified 80/10/10 split, z-scored with statistics of the truncated training data."""
    ids, labels = cohort.ids, [e.label for e in cohort.encounters]
    tr_ids, va_ids, te_ids = stratified_split(ids, labels, seed)
    by_id = cohort.by_id()
    train = mask_at_horizon([by_id[i] for i in tr_ids], 0, min_obs)
    val = mask_at_horizon([by_id[i] for i in va_ids], 0, min_obs)
    stats = zscore_fit(train, n_channels)
    return PreparedSplit(seed, [stats.apply(e) for e in train], [stats.apply(e) for e in val],
                         [stats.apply(by_id[i]) for i in te_ids], stats)


def grids_of(encounters, n_channels):
    return [bin_and_impute(e, n_channels) for e in encounters]


def fit_method(method, split, n_channels, train_config=None, tcn_config=None, workers=None,
               max_seconds=None, log_path=None, cache_path=None, force=False):
    """Train one method on a prepared split. Returns ``(artifact, score_fn)``.

    For gradient models the artifact is a :class:`training.TrainResult`; for
    DTW-KNN it is ``(model, distance_set, k, k_auprc)``.
    """
    if method == "dtw-knn":
        tr_grids = grids_of(split.train, n_channels)
        labels = np.array([e.label for e in split.train])
        dist = dtwknn.build_distance_matrices([e.id for e in split.train], tr_grids, cache_path, force,
                                              workers)
        model = dtwknn.DTWKNNModel(tr_grids, labels)
        k, results = dtwknn.select_k(model, grids_of(split.val, n_channels),
                                     [e.label for e in split.val], workers=workers)
        model.k = k

        def score(encs):
            return model.predict(grids_of(encs, n_channels), workers)
        return (model, dist, k, results), score

    cfg = train_config or training.TrainConfig.for_kind(method)
    if cfg.model_kind != method:
        raise ConfigError(f"train config is for {cfg.model_kind}, not {method}")
    result = training.train(split.train, split.val, cfg, tcn_config or training.tcn.TCNConfig(),
                            n_channels, log_path=log_path, max_seconds=max_seconds)
    model = result.best.model

    def score(encs):
        return training.predict_proba(model, encs, cfg.mc_samples, cfg.seed)
    return result, score


def horizon_table(method, score_fn, split, horizons, min_obs=10):
    return horizon_eval(score_fn, split.test, horizons, min_obs, method=method, split=f"seed{split.seed}")
