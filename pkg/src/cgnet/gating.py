"""Channel gating blocks: inference path, gate variants, channel grouping.

A gated layer splits its input channels into G groups. For output group i
the base path convolves input group i (an ordinary grouped convolution);
the remaining channels form the conditional path, which is computed only
at output positions where the gate fires. The gate thresholds the
normalized base-path partial sum against a learnable per-output-channel
threshold; at inference the normalizer folds into the threshold (the
merged gate), so the whole mechanism costs one comparison per activation
plus one per channel when the channel-wise gate is enabled.

Weight layout:
  * w_p is (c_out, c_in/G, k, k): the grouped-conv base weights, so output
    group i's rows read input group i;
  * w_r is (c_out, c_in - c_in/G, k, k): per output channel, the weights
    for the complement input channels in ascending group order with the
    base group removed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import (ACTIVATION_KINDS, BatchNormState, ConfigurationError, ConvSpec,
                 StateError, _as_batch, activation, conv2d)

GATE_KINDS = ("single_sided", "two_sided")
TWO_SIDED_ACTIVATIONS = ("tanh", "sigmoid", "binary_sign")


def default_gate_kind(activation_kind):
    """Saturating activations get the two-sided gate, ReLU-likes one-sided."""
    return "two_sided" if activation_kind in TWO_SIDED_ACTIVATIONS else "single_sided"


@dataclass
class CgLayerConfig:
    """Static hyperparameters of one gated layer.

    ``conv`` describes the dense shape of the layer (its groups field must
    be 1); ``groups`` is the gating group count G, i.e. the base path sees
    the fraction eta = 1/G of the input channels.
    """

    conv: ConvSpec
    groups: int = 4
    activation: str = "relu"
    gate: str = ""
    target_threshold: float = 2.0
    tau_c: float = 0.0
    epsilon: float = 4.0
    shuffle: bool = False
    band_init: float = 2.0

    def __post_init__(self):
        if self.conv.groups != 1:
            raise ConfigurationError("CgLayerConfig.conv must describe the dense layer (groups=1)")
        if self.groups < 1:
            raise ConfigurationError("CgLayerConfig.groups must be >= 1")
        if self.conv.in_channels % self.groups or self.conv.out_channels % self.groups:
            raise ConfigurationError(
                f"channels ({self.conv.in_channels} in, {self.conv.out_channels} out) "
                f"not divisible by gating groups={self.groups}")
        if self.activation not in ACTIVATION_KINDS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")
        if not self.gate:
            self.gate = default_gate_kind(self.activation)
        if self.gate not in GATE_KINDS:
            raise ConfigurationError(f"unknown gate kind {self.gate!r}")
        if not 0.0 <= self.tau_c <= 1.0:
            raise ConfigurationError("tau_c must be in [0,1]")
        if self.epsilon <= 0.0:
            raise ConfigurationError("epsilon must be positive")

    @property
    def eta(self):
        return 1.0 / self.groups


@dataclass
class GateState:
    """Learnable thresholds plus gate-input normalization statistics."""

    delta: np.ndarray
    bn: BatchNormState                    # affine-free normalizer of partial sums
    delta_high: np.ndarray | None = None  # two-sided only
    delta_low: np.ndarray | None = None
    frozen: bool = False

    @classmethod
    def create(cls, cfg: CgLayerConfig):
        c = cfg.conv.out_channels
        st = cls(np.zeros(c), BatchNormState.create(c))
        if cfg.gate == "two_sided":
            st.delta_high = np.full(c, cfg.band_init)
            st.delta_low = np.full(c, -cfg.band_init)
        return st

    def clamp_band(self):
        """Enforce delta_high >= delta_low after a training step."""
        if self.delta_high is not None:
            mid = 0.5 * (self.delta_high + self.delta_low)
            np.maximum(self.delta_high, mid, out=self.delta_high)
            np.minimum(self.delta_low, mid, out=self.delta_low)


@dataclass
class DecisionMap:
    """Binary decisions d over (channel, y, x), plus the channel-wise mask."""

    d: np.ndarray             # (n|,c,h,w) in {0,1}
    channel_mask: np.ndarray  # (n|,c) in {0,1}

    def effective(self):
        return self.d * self.channel_mask[..., None, None]


@dataclass
class CgLayerCost:
    """Raw per-layer counters, accumulated over the samples of one pass."""

    base_macs: int = 0
    cond_macs_executed: int = 0
    cond_macs_total: int = 0
    dense_macs: int = 0
    comparisons: int = 0
    thresholds: int = 0
    weight_values_accessed: int = 0
    weight_values_total: int = 0
    n_samples: int = 0


@dataclass
class CgBlockParams:
    """Weights, dual batch norm and gate state of one gating block.

    bn1 (base path) and bn2 (combined path) keep separate running
    statistics but reference the same gamma/beta arrays.
    """

    w_p: np.ndarray
    w_r: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    bn1: BatchNormState
    bn2: BatchNormState
    gate: GateState

    @classmethod
    def init(cls, cfg: CgLayerConfig, rng):
        spec = cfg.conv
        G = cfg.groups
        c_in, c_out, k = spec.in_channels, spec.out_channels, spec.kernel_size
        fan_in = c_in * k * k
        std = np.sqrt(2.0 / fan_in)
        w_p = rng.normal(0.0, std, (c_out, c_in // G, k, k))
        w_r = rng.normal(0.0, std, (c_out, c_in - c_in // G, k, k))
        gamma = np.ones(c_out)
        beta = np.zeros(c_out)
        bn1 = BatchNormState(gamma, beta, np.zeros(c_out), np.ones(c_out))
        bn2 = BatchNormState(gamma, beta, np.zeros(c_out), np.ones(c_out))
        return cls(w_p, w_r, gamma, beta, bn1, bn2, GateState.create(cfg))


# ---------------------------------------------------------------------------
# Grouping helpers
# ---------------------------------------------------------------------------

def base_indices(c_in, G, i):
    per = c_in // G
    return np.arange(i * per, (i + 1) * per)


def complement_indices(c_in, G, i):
    """Input channels of the conditional path for output group i:
    all groups except i, in ascending group order."""
    per = c_in // G
    idx = [np.arange(j * per, (j + 1) * per) for j in range(G) if j != i]
    return np.concatenate(idx) if idx else np.empty(0, dtype=int)


def split_grouped(x, G):
    """Per-output-group views (x_p^i, x_r^i) of the input channels."""
    xb, batched = _as_batch(x)
    c_in = xb.shape[1]
    if c_in % G:
        raise ConfigurationError(f"{c_in} input channels not divisible by G={G}")
    out = []
    for i in range(G):
        xp = xb[:, base_indices(c_in, G, i)]
        xr = xb[:, complement_indices(c_in, G, i)]
        if not batched:
            xp, xr = xp[0], xr[0]
        out.append((xp, xr))
    return out


def shuffle_permutation(c, G):
    """Interleaving permutation: output channel (group g, offset j) moves to
    position j*G + g (transpose of the group x offset grid)."""
    if c % G:
        raise ConfigurationError(f"{c} channels not divisible by G={G}")
    per = c // G
    perm = np.empty(c, dtype=int)
    for g in range(G):
        for j in range(per):
            perm[j * G + g] = g * per + j
    return perm


def channel_shuffle(x, G):
    xb, batched = _as_batch(x)
    y = xb[:, shuffle_permutation(xb.shape[1], G)]
    return y if batched else y[0]


# ---------------------------------------------------------------------------
# Dense <-> partitioned weight conversion
# ---------------------------------------------------------------------------

def assemble_dense_weight(w_p, w_r, G):
    """Reassemble the dense kernel W from the (W_p, W_r) partition."""
    c_out, cpg_in = w_p.shape[0], w_p.shape[1]
    c_in = cpg_in * G
    k = w_p.shape[2]
    w = np.zeros((c_out, c_in, k, k))
    cpg_out = c_out // G
    for i in range(G):
        rows = slice(i * cpg_out, (i + 1) * cpg_out)
        w[rows][:, base_indices(c_in, G, i)] = w_p[rows]
        if w_r.shape[1]:
            w[rows][:, complement_indices(c_in, G, i)] = w_r[rows]
    return w


def split_dense_weight(w, G):
    """Partition a dense kernel into (W_p, W_r) for G groups."""
    c_out, c_in = w.shape[0], w.shape[1]
    if c_out % G or c_in % G:
        raise ConfigurationError(f"kernel {w.shape} not divisible into {G} groups")
    k = w.shape[2]
    cpg_in = c_in // G
    cpg_out = c_out // G
    w_p = np.zeros((c_out, cpg_in, k, k))
    w_r = np.zeros((c_out, c_in - cpg_in, k, k))
    for i in range(G):
        rows = slice(i * cpg_out, (i + 1) * cpg_out)
        w_p[rows] = w[rows][:, base_indices(c_in, G, i)]
        if c_in - cpg_in:
            w_r[rows] = w[rows][:, complement_indices(c_in, G, i)]
    return w_p, w_r


def conditional_weight_scatter(w_r, G, c_in):
    """Embed W_r into a dense (c_out, c_in, k, k) kernel with zero blocks at
    each output group's base columns; conv with it computes the whole
    conditional path in one call."""
    c_out, _, k, _ = w_r.shape
    w = np.zeros((c_out, c_in, k, k))
    cpg_out = c_out // G
    for i in range(G):
        rows = slice(i * cpg_out, (i + 1) * cpg_out)
        w[rows][:, complement_indices(c_in, G, i)] = w_r[rows]
    return w


def conditional_grad_gather(dw_dense, G):
    """Inverse of conditional_weight_scatter for gradients."""
    c_out, c_in = dw_dense.shape[0], dw_dense.shape[1]
    cpg_out = c_out // G
    k = dw_dense.shape[2]
    dw_r = np.zeros((c_out, c_in - c_in // G, k, k))
    for i in range(G):
        rows = slice(i * cpg_out, (i + 1) * cpg_out)
        dw_r[rows] = dw_dense[rows][:, complement_indices(c_in, G, i)]
    return dw_r


# ---------------------------------------------------------------------------
# Gate functions
# ---------------------------------------------------------------------------

def heaviside(x):
    """theta(x): 1 where x >= 0, else 0 (boundary inclusive)."""
    return (np.asarray(x, dtype=np.float64) >= 0.0).astype(np.float64)


def _per_c(v):
    return np.asarray(v)[:, None, None]


def _threshold_decisions(xhat, gate: GateState, cfg: CgLayerConfig):
    if cfg.gate == "single_sided":
        return heaviside(xhat - _per_c(gate.delta))
    return (heaviside(_per_c(gate.delta_high) - xhat)
            * heaviside(xhat - _per_c(gate.delta_low)))


def gate_forward(partial_sum, gate: GateState, cfg: CgLayerConfig,
                 training=True, update_running=True):
    """Binary decisions from the base-path partial sum.

    Training mode normalizes with the affine-free gate BN (batch
    statistics) and thresholds; inference mode uses the merged gate.
    """
    if not training:
        return merged_gate(partial_sum, gate, cfg)
    from .nn import bn_forward
    xb, batched = _as_batch(partial_sum)
    xhat, _ = bn_forward(xb, gate.bn, training=True, affine=False,
                         update_running=update_running)
    d = _threshold_decisions(xhat, gate, cfg)
    return d if batched else d[0]


def merged_gate(partial_sum, gate: GateState, cfg: CgLayerConfig = None):
    """Inference gate with the normalizer folded into the thresholds:
    d = theta(x - delta*sqrt(Var+eps) - E), per output channel."""
    xb, batched = _as_batch(partial_sum)
    sigma = np.sqrt(gate.bn.running_var + gate.bn.eps)
    mean = gate.bn.running_mean
    two_sided = gate.delta_high is not None and (cfg is None or cfg.gate == "two_sided")
    if two_sided:
        hi = _per_c(gate.delta_high * sigma + mean)
        lo = _per_c(gate.delta_low * sigma + mean)
        d = heaviside(hi - xb) * heaviside(xb - lo)
    else:
        thr = _per_c(gate.delta * sigma + mean)
        d = heaviside(xb - thr)
    return d if batched else d[0]


def channel_gate(d, tau_c):
    """Per-channel mask: channel survives iff its taking fraction of
    activations is >= tau_c (boundary inclusive via theta)."""
    d = np.asarray(d, dtype=np.float64)
    if d.ndim not in (3, 4):
        raise ConfigurationError(f"decision tensor must be rank 3 or 4, got {d.shape}")
    hw = d.shape[-1] * d.shape[-2]
    taken = d.sum(axis=(-1, -2))
    return heaviside(taken - tau_c * hw)


def pruning_ratio(dm: DecisionMap):
    """Fraction of output activations whose conditional path is skipped."""
    return float(1.0 - dm.effective().mean())


# ---------------------------------------------------------------------------
# Block forward (inference)
# ---------------------------------------------------------------------------

def _count_cost(cfg: CgLayerConfig, dm: DecisionMap, n, ho, wo):
    spec = cfg.conv
    G = cfg.groups
    k2 = spec.kernel_size ** 2
    c_in, c_out = spec.in_channels, spec.out_channels
    base_per_pos = (c_in // G) * k2
    cond_per_pos = (c_in - c_in // G) * k2
    pos = ho * wo
    cost = CgLayerCost(n_samples=n)
    cost.base_macs = n * c_out * pos * base_per_pos
    cost.cond_macs_total = n * c_out * pos * cond_per_pos
    cost.dense_macs = n * c_out * pos * c_in * k2
    cost.cond_macs_executed = int(round(dm.effective().sum())) * cond_per_pos
    gate_cmp = pos * c_out
    if cfg.gate == "two_sided":
        gate_cmp *= 2
    cost.comparisons = n * gate_cmp
    cost.thresholds = c_out * (2 if cfg.gate == "two_sided" else 1)
    if cfg.tau_c > 0.0:
        cost.comparisons += n * c_out
        cost.thresholds += 1
    w_p_vals = c_out * (c_in // G) * k2
    w_r_per_channel = (c_in - c_in // G) * k2
    cost.weight_values_total = n * c_out * c_in * k2
    cost.weight_values_accessed = (n * w_p_vals
                                   + int(round(dm.channel_mask.sum())) * w_r_per_channel)
    return cost


def cg_block_forward_inference(x, params: CgBlockParams, cfg: CgLayerConfig,
                               require_frozen=True):
    """Gated inference forward pass.

    Returns (y, DecisionMap, CgLayerCost). Where the effective decision is
    0 the output is f(BN1(base partial sum)); where it is 1 the conditional
    path is added and BN2 applies. The channel-wise gate zeroes whole
    channels' conditional work and their W_r accesses. Decision maps and
    counters refer to pre-shuffle channel order.
    """
    if require_frozen and not params.gate.frozen:
        raise StateError("inference requires frozen gate/BN statistics "
                         "(train first or load a finalized checkpoint)")
    xb, batched = _as_batch(x)
    spec = cfg.conv
    G = cfg.groups
    n = xb.shape[0]
    base_spec = ConvSpec(spec.in_channels, spec.out_channels, spec.kernel_size,
                         spec.stride, spec.padding, groups=G)
    p = conv2d(xb, params.w_p, base_spec)
    ho, wo = p.shape[2], p.shape[3]

    d = merged_gate(p, params.gate, cfg)
    mask = channel_gate(d, cfg.tau_c) if cfg.tau_c > 0.0 else np.ones(d.shape[:2])
    dm = DecisionMap(d, mask)
    d_eff = dm.effective()

    # canonical order (x - mean) * scale + shift, mirrored by the scalar oracle
    y_base = (p - _per_c(params.bn1.running_mean)[None]) * _per_c(
        params.gamma / np.sqrt(params.bn1.running_var + params.bn1.eps))[None] \
        + _per_c(params.beta)[None]

    if spec.in_channels - spec.in_channels // G > 0:
        w_cond = conditional_weight_scatter(params.w_r, G, spec.in_channels)
        dense_spec = ConvSpec(spec.in_channels, spec.out_channels, spec.kernel_size,
                              spec.stride, spec.padding, groups=1)
        r = conv2d(xb, w_cond, dense_spec)
    else:
        r = np.zeros_like(p)
    y_full = ((p + r) - _per_c(params.bn2.running_mean)[None]) * _per_c(
        params.gamma / np.sqrt(params.bn2.running_var + params.bn2.eps))[None] \
        + _per_c(params.beta)[None]

    pre = np.where(d_eff == 1.0, y_full, y_base)
    y = activation(pre, cfg.activation)
    if cfg.shuffle:
        y = channel_shuffle(y, G)
    cost = _count_cost(cfg, dm, n, ho, wo)
    if not batched:
        y = y[0]
        dm = DecisionMap(dm.d[0], dm.channel_mask[0])
    return y, dm, cost
