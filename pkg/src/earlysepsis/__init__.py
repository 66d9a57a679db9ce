"""Early sepsis classification on irregularly sampled ICU time series.

Multi-task Gaussian process adapter with a temporal convolutional network
(MGP-TCN), a per-channel DTW k-NN ensemble, a carry-forward Raw-TCN
baseline, an hourly event labeler and horizon evaluation.
"""

__version__ = "0.1.0"
