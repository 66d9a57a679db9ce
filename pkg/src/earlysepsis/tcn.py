"""Causal dilated temporal convolutional network with residual blocks.

Each block applies ``[conv -> relu -> layer_norm -> dropout]`` twice with
dilation ``2**block`` and adds the (projected) block input. Layer norm runs
over the feature axis at each time step, so no statistic mixes time steps.
A linear head reads the last time step and returns one logit.
"""

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import container
from . import diffcore as dc
from .errors import DataError, ParameterError, ShapeError

CHECKPOINT_KIND = "tcn-weights"


@dataclass(frozen=True)
class TCNConfig:
    num_blocks: int = 4
    filters_per_layer: int = 32
    filter_width: int = 2
    dropout: float = 0.0
    l2_penalty: float = 0.01

    def __post_init__(self):
        checks = [
            ("num_blocks", self.num_blocks, 4, 9),
            ("filters_per_layer", self.filters_per_layer, 15, 90),
            ("filter_width", self.filter_width, 2, 5),
            ("dropout", self.dropout, 0.0, 0.1),
            ("l2_penalty", self.l2_penalty, 0.01, 100.0),
        ]
        for name, value, lo, hi in checks:
            if not lo <= value <= hi:
                raise ParameterError(f"TCNConfig.{name}={value} outside [{lo}, {hi}]")

    @property
    def receptive_field(self):
        return receptive_field(self.num_blocks, self.filter_width)


def receptive_field(num_blocks, filter_width):
    """Number of input steps that can reach the final output (two convs per block)."""
    return 1 + 2 * (filter_width - 1) * (2 ** num_blocks - 1)


def _block_names(n, has_proj):
    names = []
    for conv in (1, 2):
        names += [f"block{n}.conv{conv}.kernel", f"block{n}.conv{conv}.bias",
                  f"block{n}.norm{conv}.gain", f"block{n}.norm{conv}.bias"]
    if has_proj:
        names.append(f"block{n}.proj.kernel")
    return names


class TCNWeights:
    """Named weight arrays for a :class:`TCNConfig` with ``in_channels`` inputs."""

    def __init__(self, config, in_channels, arrays):
        self.config = config
        self.in_channels = int(in_channels)
        self.arrays = dict(arrays)
        self._validate()

    def expected_shapes(self):
        c = self.config
        F, W = c.filters_per_layer, c.filter_width
        shapes = {}
        for n in range(c.num_blocks):
            cin = self.in_channels if n == 0 else F
            shapes[f"block{n}.conv1.kernel"] = (F, cin, W)
            shapes[f"block{n}.conv2.kernel"] = (F, F, W)
            for conv in (1, 2):
                shapes[f"block{n}.conv{conv}.bias"] = (F,)
                shapes[f"block{n}.norm{conv}.gain"] = (F,)
                shapes[f"block{n}.norm{conv}.bias"] = (F,)
            if cin != F:
                shapes[f"block{n}.proj.kernel"] = (F, cin, 1)
        shapes["head.weight"] = (F,)
        shapes["head.bias"] = ()
        return shapes

    def _validate(self):
        expected = self.expected_shapes()
        if set(expected) != set(self.arrays):
            missing = sorted(set(expected) - set(self.arrays))
            extra = sorted(set(self.arrays) - set(expected))
            raise ShapeError(f"TCN weights mismatch config: missing {missing}, unexpected {extra}")
        for name, shape in expected.items():
            arr = np.asarray(self.arrays[name], dtype=np.float64)
            if arr.shape != shape:
                raise ShapeError(f"TCN weight {name}: shape {arr.shape} != declared {shape}")
            self.arrays[name] = arr
        # canonical order
        self.arrays = {name: self.arrays[name] for name in expected}

    @classmethod
    def init(cls, config, in_channels, rng):
        arrays = {}
        probe = cls.__new__(cls)
        probe.config, probe.in_channels = config, in_channels
        for name, shape in probe.expected_shapes().items():
            if name.endswith(".kernel") or name == "head.weight":
                fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else shape[0]
                bound = 1.0 / np.sqrt(fan_in)
                arrays[name] = rng.uniform(-bound, bound, size=shape)
            elif name.endswith(".gain"):
                arrays[name] = np.ones(shape)
            else:
                arrays[name] = np.zeros(shape)
        return cls(config, in_channels, arrays)

    @classmethod
    def zeros(cls, config, in_channels):
        probe = cls.__new__(cls)
        probe.config, probe.in_channels = config, in_channels
        return cls(config, in_channels, {k: np.zeros(s) for k, s in probe.expected_shapes().items()})

    def copy(self):
        return TCNWeights(self.config, self.in_channels, {k: v.copy() for k, v in self.arrays.items()})

    def penalized(self):
        """Names entering the L2 penalty: convolution kernels and the head weight."""
        return [k for k in self.arrays if k.endswith(".kernel") or k == "head.weight"]

    def leaves(self, requires_grad=True):
        if requires_grad:
            return {k: dc.leaf(v, name=k) for k, v in self.arrays.items()}
        return {k: dc.constant(v, name=k) for k, v in self.arrays.items()}

    def n_parameters(self):
        return int(sum(v.size for v in self.arrays.values()))

    def meta(self):
        return {"kind": CHECKPOINT_KIND, "config": asdict(self.config), "in_channels": self.in_channels}

    def digest(self):
        return container.digest(self.meta(), self.arrays)

    def save(self, path):
        return container.save(path, self.meta(), self.arrays)

    @classmethod
    def load(cls, path):
        meta, arrays = container.load(path)
        return cls.from_container(meta, arrays)

    @classmethod
    def from_container(cls, meta, arrays):
        if meta.get("kind") != CHECKPOINT_KIND:
            raise DataError(f"not a TCN checkpoint (kind={meta.get('kind')!r})")
        config = TCNConfig(**meta["config"])
        return cls(config, meta["in_channels"], arrays)

    def __repr__(self):
        return f"TCNWeights({json.dumps(asdict(self.config))}, in_channels={self.in_channels})"


def _dropout(h, p, rng, shared):
    if p <= 0 or rng is None:
        return h
    shape = (1,) + h.shape[1:] if shared else h.shape
    keep = (rng.random(shape) >= p) / (1.0 - p)
    return h * keep


def block_nodes(x, w, n, dilation, config, train_mode=False, rng=None, shared_dropout=False):
    """One residual temporal block on a ``(S, C, T)`` node."""
    drop = config.dropout if train_mode else 0.0
    h = x
    for conv in (1, 2):
        pre = f"block{n}.conv{conv}"
        h = dc.causal_dilated_conv(h, w[pre + ".kernel"], dilation)
        h = h + w[pre + ".bias"].reshape(-1, 1)
        h = dc.relu(h)
        h = dc.layer_norm(h, w[f"block{n}.norm{conv}.gain"], w[f"block{n}.norm{conv}.bias"], axis=-2)
        h = _dropout(h, drop, rng, shared_dropout)
    proj = f"block{n}.proj.kernel"
    res = dc.causal_dilated_conv(x, w[proj], 1) if proj in w else x
    return res + h


def forward_nodes(z, w, config, train_mode=False, rng=None, shared_dropout=False):
    """Logits of shape ``(S,)`` for a ``(S, D, T)`` input node.

    ``shared_dropout`` reuses one dropout mask across the ``S`` leading rows
    (e.g. Monte-Carlo samples of one encounter); by default each row draws
    its own mask.
    """
    h = z
    for n in range(config.num_blocks):
        h = block_nodes(h, w, n, 2 ** n, config, train_mode, rng, shared_dropout)
    last = h[:, :, -1]
    return last @ w["head.weight"] + w["head.bias"]


def _as_batch(z):
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 2:
        return z[None], True
    if z.ndim == 3:
        return z, False
    raise ShapeError(f"TCN input must be (D, T) or (S, D, T), got {z.shape}")


def causal_dilated_conv(x, kernel, dilation=1):
    """Numpy convenience wrapper; accepts 1-d series with a 1-d filter too."""
    x = np.asarray(x, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    if x.ndim == 1 and kernel.ndim == 1:
        return dc.causal_dilated_conv(x[None], kernel[None, None], dilation).value[0]
    return dc.causal_dilated_conv(x, kernel, dilation).value


def temporal_block(x, weights, n, train_mode=False, rng=None):
    """Apply block ``n`` of ``weights`` (dilation ``2**n``) to a ``(C, T)`` or ``(S, C, T)`` array."""
    xb, squeeze = _as_batch(x)
    out = block_nodes(dc.constant(xb), weights.leaves(False), n, 2 ** n, weights.config,
                      train_mode, rng).value
    return out[0] if squeeze else out


def tcn_forward(z, config, weights, train_mode=False, rng=None):
    """Logit(s) for a ``(D, T)`` grid (scalar) or a ``(S, D, T)`` stack (vector)."""
    if z.shape[-2] != weights.in_channels:
        raise ShapeError(f"TCN expects {weights.in_channels} input channels, got {z.shape[-2]}")
    zb, squeeze = _as_batch(z)
    out = forward_nodes(dc.constant(zb), weights.leaves(False), config, train_mode, rng).value
    return float(out[0]) if squeeze else out
