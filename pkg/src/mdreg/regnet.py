"""Coarse-to-fine velocity estimation: U-Net sub-networks or free velocity parameters.

Level ``l`` of ``L`` (1 = coarsest) predicts an incremental velocity on the
grid of the full image ceil-halved ``L + 1 - l`` times. Every sub-network
reads full-resolution input: an encoder of ``L + 1`` stride-2 convolutions
followed by ``l`` stride-2 transposed convolutions lands exactly on that grid.
"""

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Parameter, concat, crop_to, leaky_relu, pad_to, reshape, value
from .fields import ConfigurationError, build_pyramid, gaussian_smooth, halve, upsample_linear, warp
from .layers import conv, conv_transpose
from .objective import accumulate_velocities
from .transform import integrate_svf


def velocity_grids(dims, levels):
    """Velocity grid per level, coarse to fine."""
    grids = []
    g = tuple(dims)
    for _ in range(levels):
        g = halve(g)
        grids.append(g)
    return grids[::-1]


@dataclass(frozen=True)
class SubnetSpec:
    levels: int = 3
    ndim: int = 3
    width: float = 1.0
    slope: float = 0.2
    encoder: tuple = (16, 32, 32, 32)
    decoder: int = 32
    head: tuple = (32, 16)

    def ch(self, n):
        return max(1, int(round(n * self.width)))

    @property
    def encoder_filters(self):
        depth = self.levels + 1
        base = list(self.encoder[:depth])
        base += [self.encoder[-1]] * (depth - len(base))
        return [self.ch(n) for n in base]

    def layer_shapes(self, level):
        """Ordered (name, weight shape) for the sub-network at ``level``."""
        k = (3,) * self.ndim
        shapes = []
        cin = 2
        enc = self.encoder_filters
        for i, c in enumerate(enc):
            shapes.append((f"enc{i}", (c, cin) + k))
            cin = c
        dec = self.ch(self.decoder)
        depth = len(enc)
        for j in range(level):
            # transposed-conv weights are (C_in, C_out, ...)
            shapes.append((f"dec{j}", (cin, dec) + k))
            cin = dec + enc[depth - 2 - j]
        for i, c in enumerate(self.head):
            shapes.append((f"head{i}", (self.ch(c), cin) + k))
            cin = self.ch(c)
        shapes.append(("out", (self.ndim, cin) + k))
        return shapes


@dataclass
class ModelParams:
    mode: str
    spec: SubnetSpec
    dims: tuple
    seed: int = 0
    subnets: list = field(default_factory=list)  # per level: {name: (weight, bias)}
    velocities: list = field(default_factory=list)  # direct mode, per level

    def parameters(self):
        if self.mode == "direct":
            return list(self.velocities)
        out = []
        for net in self.subnets:
            for w, b in net.values():
                out.extend((w, b))
        return out

    def named_arrays(self):
        if self.mode == "direct":
            return {f"v{l}": p.value for l, p in enumerate(self.velocities, start=1)}
        out = {}
        for l, net in enumerate(self.subnets, start=1):
            for name, (w, b) in net.items():
                out[f"s{l}.{name}.w"] = w.value
                out[f"s{l}.{name}.b"] = b.value
        return out


def init_params(spec, dims, seed=0, mode="network"):
    """Fan-in scaled uniform weights, zero biases, zero output layers (identity start)."""
    dims = tuple(int(n) for n in dims)
    if len(dims) != spec.ndim:
        raise ConfigurationError(f"spec is {spec.ndim}-D but dims are {dims}")
    params = ModelParams(mode, spec, dims, seed)
    if mode == "direct":
        params.velocities = [Parameter(np.zeros((spec.ndim,) + g), f"v{l}")
                             for l, g in enumerate(velocity_grids(dims, spec.levels), start=1)]
        return params
    if mode != "network":
        raise ConfigurationError(f"unknown mode {mode!r}")
    rng = np.random.default_rng(seed)
    for level in range(1, spec.levels + 1):
        net = {}
        for name, shape in spec.layer_shapes(level):
            cout = shape[1] if name.startswith("dec") else shape[0]
            if name == "out":
                w = np.zeros(shape)
            else:
                fan_in = (shape[0] if name.startswith("dec") else shape[1]) * 3 ** spec.ndim
                bound = np.sqrt(6.0 / fan_in)
                w = rng.uniform(-bound, bound, size=shape)
            net[name] = (Parameter(w, f"s{level}.{name}.w"), Parameter(np.zeros(cout), f"s{level}.{name}.b"))
        params.subnets.append(net)
    return params


def subnet_forward(spec, net, x, level, out_dims):
    """One sub-network pass on a 2-channel input (C, *dims); returns (d, *out_dims)."""
    dims = value(x).shape[1:]
    depth = spec.levels + 1
    mult = 2 ** depth
    padded = tuple(-(-n // mult) * mult for n in dims)
    if min(dims) < 2 ** (depth - 1):
        raise ConfigurationError(f"input dims {dims} too small for {depth} stride-2 layers")
    h = pad_to(x, (value(x).shape[0],) + padded)
    skips = []
    for i in range(depth):
        w, b = net[f"enc{i}"]
        h = leaky_relu(conv(h, w, b, stride=2), spec.slope)
        skips.append(h)
    for j in range(level):
        w, b = net[f"dec{j}"]
        skip = skips[depth - 2 - j]
        h = leaky_relu(conv_transpose(h, w, b, value(skip).shape[1:]), spec.slope)
        h = concat([h, skip])
    for i in range(len(spec.head)):
        w, b = net[f"head{i}"]
        h = leaky_relu(conv(h, w, b), spec.slope)
    w, b = net["out"]
    v = conv(h, w, b)
    return crop_to(v, (spec.ndim,) + tuple(out_dims))


@dataclass
class CascadeOutput:
    fixed_pyr: list
    moving_pyr: list
    increments: list
    accumulated: list
    final_svf: object
    stage_inputs: list = field(default_factory=list)
    warped: list = field(default_factory=list)


def _smooth(v, smoothing):
    return v if smoothing is None else gaussian_smooth(v, *smoothing)


def cascade_forward(params, fixed, moving, steps=7, smoothing=(1.732, 3), with_images=False):
    """Run the coarse-to-fine cascade.

    ``smoothing`` is ``(sigma, ksize)`` or ``None``; it is applied once, to the
    accumulated velocity after upsampling to full resolution. With
    ``with_images`` the per-stage moving inputs and per-level warped moving
    images are also returned.
    """
    spec = params.spec
    dims = tuple(value(fixed).shape)
    if value(moving).shape != dims:
        raise ConfigurationError(f"fixed {dims} vs moving {value(moving).shape}")
    if params.mode == "network" and dims != tuple(params.dims):
        raise ConfigurationError(f"network trained on {params.dims}, got {dims}")
    L = spec.levels
    fixed_pyr = build_pyramid(fixed, L)
    moving_pyr = build_pyramid(moving, L)
    grids = velocity_grids(dims, L)
    if params.mode == "direct":
        increments = list(params.velocities)
        for v, g in zip(increments, grids):
            if value(v).shape[1:] != g:
                raise ConfigurationError(f"velocity grid {value(v).shape[1:]} does not match {g}")
        stage_inputs = []
        if with_images:
            acc = accumulate_velocities(increments)
            stage_inputs.append(moving_pyr[0])
            for l in range(1, L):
                u = upsample_linear(acc[l - 1], value(moving_pyr[l]).shape)
                stage_inputs.append(warp(moving_pyr[l], integrate_svf(u, steps).disp))
    else:
        increments, accumulated, stage_inputs = [], [], []
        one = (1,) + dims
        for l in range(1, L + 1):
            if l == 1:
                mov_in = moving
            else:
                u = upsample_linear(accumulated[-1], dims)
                mov_in = warp(moving, integrate_svf(u, steps).disp)
            x = concat([reshape(fixed, one), reshape(mov_in, one)])
            v = subnet_forward(spec, params.subnets[l - 1], x, l, grids[l - 1])
            increments.append(v)
            accumulated.append(v if l == 1 else upsample_linear(accumulated[-1], grids[l - 1]) + v)
            if with_images:
                stage_inputs.append(mov_in)
    if params.mode == "direct":
        accumulated = accumulate_velocities(increments)
    final = _smooth(upsample_linear(accumulated[-1], dims), smoothing)
    out = CascadeOutput(fixed_pyr, moving_pyr, increments, accumulated, final, stage_inputs)
    if with_images:
        for l in range(L):
            u = upsample_linear(accumulated[l], value(moving_pyr[l]).shape)
            if l == L - 1:
                u = final
            out.warped.append(warp(moving_pyr[l], integrate_svf(u, steps).disp))
    return out
