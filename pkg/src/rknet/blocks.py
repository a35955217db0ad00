"""Network building blocks: one time-step realized as a dense block (erk),
a clique block (irk), or a time-channel Euler step, plus transitions.

A step block maps the state y_n to y_{n+1} = y_n + sum of per-stage increment
groups; the groups are produced by convolutional subnetworks wired exactly as
the stage structure of the corresponding Runge-Kutta family dictates.  With
``linear_test_mode`` every growth unit collapses to a single bias-free 1x1
convolution so the whole step becomes an affine map that can be compared
against a classical integrator.
"""

from dataclasses import dataclass

import numpy as np

from . import ops
from .tensor import DTYPES, Parameter, ShapeError, Tensor, op_scope


class ParamStore:
    """Ordered registry of named parameters and persistent buffers."""

    def __init__(self, dtype="float32"):
        self.dtype = dtype
        self.params = {}
        self.buffers = {}

    def add_param(self, name, array):
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        p = Parameter(Tensor(np.asarray(array, dtype=DTYPES[self.dtype])), name)
        self.params[name] = p
        return p

    def add_buffer(self, name, array):
        if name in self.buffers:
            raise ValueError(f"duplicate buffer name {name!r}")
        self.buffers[name] = array
        return array

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def total_size(self):
        return sum(p.value.size for p in self.params.values())


def he_normal(rng, shape):
    """Kaiming-normal init for conv kernels (fan_in from input channels * k * k)."""
    fan_in = int(np.prod(shape[1:]))
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def xavier_uniform(rng, shape):
    """Glorot-uniform init for fully connected weights (in, out)."""
    limit = np.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-limit, limit, size=shape)


@dataclass
class SubnetConfig:
    """How each growth unit is realized (shared by all block kinds)."""

    bottleneck: bool = False
    bottleneck_width: int = 0
    linear_test_mode: bool = False

    def __post_init__(self):
        if self.bottleneck and self.bottleneck_width < 1:
            raise ValueError("bottleneck requires a positive bottleneck_width")


class BatchNorm:
    def __init__(self, store, prefix, channels):
        self.gamma = store.add_param(f"{prefix}.gamma", np.ones(channels))
        self.beta = store.add_param(f"{prefix}.beta", np.zeros(channels))
        self.state = ops.BatchNormState(channels, dtype=store.dtype)
        store.add_buffer(f"{prefix}.running_mean", self.state.mean)
        store.add_buffer(f"{prefix}.running_var", self.state.var)

    def __call__(self, x, mode):
        return ops.batchnorm2d(x, self.gamma.value, self.beta.value, self.state, mode)


class GrowthUnit:
    """BN -> ReLU -> 3x3 conv producing k new channels.

    With a bottleneck, a 1x1 conv (then BN -> ReLU) precedes the 3x3 conv.
    A raw time plane, when given, is concatenated after BN/ReLU so that
    normalization never touches it.  Dropout follows each convolution.
    """

    def __init__(self, store, prefix, in_ch, k, subnet, time_plane=False, rng=None):
        self.in_ch = in_ch
        self.k = k
        self.subnet = subnet
        self.time_plane = time_plane
        self.calls = 0
        conv_in = in_ch + (1 if time_plane else 0)
        if subnet.linear_test_mode:
            self.w = store.add_param(f"{prefix}.conv.w", np.zeros((k, conv_in, 1, 1)))
            return
        self.bn = BatchNorm(store, f"{prefix}.bn", in_ch)
        if subnet.bottleneck:
            bw = subnet.bottleneck_width
            self.w1 = store.add_param(f"{prefix}.conv1x1.w", he_normal(rng, (bw, conv_in, 1, 1)))
            self.bn2 = BatchNorm(store, f"{prefix}.bn2", bw)
            self.w = store.add_param(f"{prefix}.conv.w", he_normal(rng, (k, bw, 3, 3)))
        else:
            self.w = store.add_param(f"{prefix}.conv.w", he_normal(rng, (k, conv_in, 3, 3)))

    def forward(self, x, time=None, mode="train", dropout_p=0.0, rng=None):
        if x.shape[1] != self.in_ch:
            raise ShapeError(f"growth unit expects {self.in_ch} input channels, "
                             f"got {x.shape[1]} (input shape {x.shape})")
        self.calls += 1
        if self.subnet.linear_test_mode:
            h = ops.concat_channels([x, time]) if time is not None else x
            return ops.conv2d(h, self.w.value, stride=1, pad=0)
        h = ops.relu(self.bn(x, mode))
        if time is not None:
            h = ops.concat_channels([h, time])
        if self.subnet.bottleneck:
            h = ops.conv2d(h, self.w1.value, stride=1, pad=0)
            h = ops.dropout(h, dropout_p, mode, rng)
            h = ops.relu(self.bn2(h, mode))
        h = ops.conv2d(h, self.w.value, stride=1, pad=1)
        return ops.dropout(h, dropout_p, mode, rng)


class ErkStepBlock:
    """One explicit time-step: a dense block of s stage subnetworks plus the
    summation layer.  Stage i consumes concat(y_n, group_1..group_{i-1}) and
    emits an mk-channel group; y_{n+1} = y_n + sum of groups.
    """

    kind = "erk"

    def __init__(self, store, prefix, s, m, k, subnet=None, rng=None):
        self.s, self.m, self.k = s, m, k
        self.channels = m * k
        self.subnet = subnet or SubnetConfig()
        self.stages = []
        t = 0
        for i in range(s):
            units = []
            for j in range(m):
                units.append(GrowthUnit(store, f"{prefix}.stage{i}.growth{j}",
                                        self.channels + t * k, k, self.subnet, rng=rng))
                t += 1
            self.stages.append(units)

    def forward(self, y, mode="train", dropout_p=0.0, rng=None):
        if y.shape[1] != self.channels:
            raise ShapeError(f"erk step expects {self.channels} channels (m*k), got {y.shape[1]}")
        feats = [y]
        groups = []
        for i, units in enumerate(self.stages):
            with op_scope(f"stage{i}"):
                outs = []
                for u in units:
                    x = feats[0] if len(feats) == 1 else ops.concat_channels(feats)
                    g = u.forward(x, mode=mode, dropout_p=dropout_p, rng=rng)
                    feats.append(g)
                    outs.append(g)
                groups.append(outs[0] if len(outs) == 1 else ops.concat_channels(outs))
        y_next = y
        for g in groups:
            y_next = ops.add(y_next, g)
        return y_next, groups


class IrkStepBlock:
    """One implicit time-step: a clique block plus the summation layer.

    Stage-I initializers run densely (v_j from y_n and v_1..v_{j-1}); Stage-II
    updates each increment exactly once from the other stages' current values
    -- updated groups before it, initial groups after it, y_n excluded.
    """

    kind = "irk"

    def __init__(self, store, prefix, s, k, subnet=None, rng=None):
        if s <= 1:
            raise ValueError(f"irk step needs s > 1 for alternate updating, got s={s}")
        self.s, self.k = s, k
        self.channels = k
        self.subnet = subnet or SubnetConfig()
        self.initializers = [
            GrowthUnit(store, f"{prefix}.init{j}", (j + 1) * k, k, self.subnet, rng=rng)
            for j in range(s)]
        self.updaters = [
            GrowthUnit(store, f"{prefix}.update{i}", (s - 1) * k, k, self.subnet, rng=rng)
            for i in range(s)]

    def forward(self, y, mode="train", dropout_p=0.0, rng=None):
        if y.shape[1] != self.channels:
            raise ShapeError(f"irk step expects {self.channels} channels (k), got {y.shape[1]}")
        initials = []
        for j, unit in enumerate(self.initializers):
            with op_scope(f"init{j}"):
                x = y if not initials else ops.concat_channels([y] + initials)
                initials.append(unit.forward(x, mode=mode, dropout_p=dropout_p, rng=rng))
        updated = []
        for i, unit in enumerate(self.updaters):
            with op_scope(f"update{i}"):
                parts = updated[:i] + initials[i + 1:]
                x = parts[0] if len(parts) == 1 else ops.concat_channels(parts)
                updated.append(unit.forward(x, mode=mode, dropout_p=dropout_p, rng=rng))
        y_next = y
        for g in updated:
            y_next = ops.add(y_next, g)
        return y_next, initials, updated


class TimeChannelStepBlock:
    """One Euler time-step with an explicit trainable step-size ratio.

    The subnetwork sees the state plus a constant plane holding accumulated
    scaled time T/u; its output is multiplied by ratio_n = sign * exp(theta_n)
    to form the increment, and T/u advances by ratio_n.  BN and ReLU never
    touch the time plane.
    """

    kind = "time_channel"

    def __init__(self, store, prefix, m, k, subnet=None, sign=1.0, rng=None, units=None):
        if sign == 0:
            raise ValueError("time-channel sign must be nonzero")
        self.m, self.k = m, k
        self.channels = m * k
        self.sign = 1.0 if sign > 0 else -1.0
        self.subnet = subnet or SubnetConfig()
        # units may be shared across a period's steps; the step-size scalar never is
        self.units = units if units is not None else [
            GrowthUnit(store, f"{prefix}.growth{j}", self.channels + j * k, k,
                       self.subnet, time_plane=True, rng=rng)
            for j in range(m)]
        self.theta = store.add_param(f"{prefix}.log_step_ratio", np.zeros(()))

    def step_ratio(self):
        """Current trained value of h_n/u."""
        return self.sign * float(np.exp(self.theta.value.data))

    def forward(self, y, t_over_u, mode="train", dropout_p=0.0, rng=None):
        if y.shape[1] != self.channels:
            raise ShapeError(f"time-channel step expects {self.channels} channels, got {y.shape[1]}")
        n, _, h, w = y.shape
        if not isinstance(t_over_u, Tensor):
            t_over_u = Tensor(np.asarray(t_over_u, dtype=y.data.dtype).reshape(()))
        plane = ops.broadcast_plane(t_over_u, n, 1, h, w)
        feats = [y]
        outs = []
        for j, u in enumerate(self.units):
            with op_scope(f"growth{j}"):
                x = feats[0] if len(feats) == 1 else ops.concat_channels(feats)
                g = u.forward(x, time=plane, mode=mode, dropout_p=dropout_p, rng=rng)
                feats.append(g)
                outs.append(g)
        q = outs[0] if len(outs) == 1 else ops.concat_channels(outs)
        ratio = ops.exp(self.theta.value)
        if self.sign < 0:
            ratio = ops.scale(ratio, -1.0)
        y_next = ops.add(y, ops.mul_scalar(q, ratio))
        return y_next, ops.add(t_over_u, ratio)


class AttentionalGate:
    """Channelwise attention: pool -> FC(C -> C/2) + ReLU -> FC(C/2 -> C) +
    sigmoid, multiplied filter-wise onto the input."""

    def __init__(self, store, prefix, channels, rng=None):
        if channels < 2:
            raise ValueError(f"attentional gate needs at least 2 channels, got {channels}")
        hidden = channels // 2
        self.channels = channels
        self.w1 = store.add_param(f"{prefix}.fc1.w", xavier_uniform(rng, (channels, hidden)))
        self.b1 = store.add_param(f"{prefix}.fc1.b", np.zeros(hidden))
        self.w2 = store.add_param(f"{prefix}.fc2.w", xavier_uniform(rng, (hidden, channels)))
        self.b2 = store.add_param(f"{prefix}.fc2.b", np.zeros(channels))

    def forward(self, x):
        if x.shape[1] != self.channels:
            raise ShapeError(f"attentional gate expects {self.channels} channels, got {x.shape[1]}")
        g = ops.global_avg_pool(x)
        g = ops.relu(ops.fully_connected(g, self.w1.value, self.b1.value))
        g = ops.sigmoid(ops.fully_connected(g, self.w2.value, self.b2.value))
        return ops.mul_channelwise(x, g)


class TransitionLayer:
    """BN -> ReLU -> 1x1 conv to the next period's width, optional attentional
    gating, then 2x2 average pooling with stride 2."""

    def __init__(self, store, prefix, in_ch, out_ch, attentional=False, rng=None):
        self.in_ch, self.out_ch = in_ch, out_ch
        self.bn = BatchNorm(store, f"{prefix}.bn", in_ch)
        self.w = store.add_param(f"{prefix}.conv.w", he_normal(rng, (out_ch, in_ch, 1, 1)))
        self.gate = AttentionalGate(store, f"{prefix}.gate", out_ch, rng) if attentional else None

    def forward(self, y, mode="train", dropout_p=0.0, rng=None):
        if y.shape[2] % 2 or y.shape[3] % 2:
            raise ShapeError(f"transition needs even spatial dims to halve, got {y.shape}")
        h = ops.relu(self.bn(y, mode))
        h = ops.conv2d(h, self.w.value, stride=1, pad=0)
        h = ops.dropout(h, dropout_p, mode, rng)
        if self.gate is not None:
            h = self.gate.forward(h)
        return ops.avgpool2d(h, 2, 2)
