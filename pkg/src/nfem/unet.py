"""Encoder-decoder U-Net over nodal grids, in deterministic, MLE and VB variants.

The network maps a nodal force grid (*grid, dim) to a displacement grid of
the same shape (deterministic) or to mean and raw-spread fields stacked on
the channel axis (mle, vb). Both spatial layouts (2D and 3D) share one
implementation; every tensor is (batch, *spatial, channels).

In ``vb`` mode the second convolution of every level carries a Gaussian
weight posterior (mu, rho) plus a learned prior mean; weights are redrawn
with the reparameterization w = mu + softplus(rho) * eps on every stochastic
forward pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .adam import Parameter

MODES = ("deterministic", "mle", "vb")


@dataclass(frozen=True)
class UNetConfig:
    dim: int
    grid_shape: tuple[int, ...]
    mode: str = "deterministic"
    levels: int = 0  # 0 -> dimension default (3 for 2D, 4 for 3D)
    base_channels: int = 0  # 0 -> dimension default (128 for 2D, 64 for 3D)
    convs_per_level: int = 2
    input_pad: int = 2
    sigma_p: float = 0.1
    constant_channels: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.dim not in (2, 3) or len(self.grid_shape) != self.dim:
            raise ValueError("dim must be 2 or 3 and match grid_shape")
        if self.levels == 0:
            object.__setattr__(self, "levels", 3 if self.dim == 2 else 4)
        if self.base_channels == 0:
            object.__setattr__(self, "base_channels", 128 if self.dim == 2 else 64)
        if self.convs_per_level != 2:
            raise ValueError("architecture is fixed at two convolutions per level")
        if self.sigma_p <= 0.0:
            raise ValueError("sigma_p must be positive")
        divisor = 2 ** (self.levels - 1)
        for n, n_pad in zip(self.grid_shape, self.padded_shape):
            if n_pad % divisor:
                raise ValueError(
                    f"padded extent {n_pad} (grid {n} + 2x{self.input_pad}) must be "
                    f"divisible by {divisor} for {self.levels} levels; increase the "
                    f"padding by {divisor - n_pad % divisor} per side-pair or reduce levels"
                )

    @property
    def padded_shape(self) -> tuple[int, ...]:
        return tuple(n + 2 * self.input_pad for n in self.grid_shape)

    @property
    def out_channels(self) -> int:
        return self.dim if self.mode == "deterministic" else 2 * self.dim

    def level_channels(self) -> list[int]:
        if self.constant_channels:
            return [self.base_channels] * self.levels
        return [self.base_channels * 2**l for l in range(self.levels)]


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str  # conv | bn | conv1x1
    in_channels: int
    out_channels: int
    variational: bool = False


def layer_plan(config: UNetConfig) -> list[LayerSpec]:
    """Ordered layer descriptors; drives building, counting and checkpoints."""
    ch = config.level_channels()
    vb = config.mode == "vb"
    plan: list[LayerSpec] = []

    def block(prefix, c_in, c_out):
        plan.append(LayerSpec(f"{prefix}.conv1", "conv", c_in, c_out))
        plan.append(LayerSpec(f"{prefix}.bn1", "bn", c_out, c_out))
        plan.append(LayerSpec(f"{prefix}.conv2", "conv", c_out, c_out, variational=vb))
        plan.append(LayerSpec(f"{prefix}.bn2", "bn", c_out, c_out))

    c_in = config.dim
    for l in range(config.levels):
        block(f"enc{l}", c_in, ch[l])
        c_in = ch[l]
    for l in reversed(range(config.levels - 1)):
        block(f"dec{l}", ch[l + 1] + ch[l], ch[l])
    plan.append(LayerSpec("head.conv", "conv1x1", ch[0], config.out_channels))
    return plan


def _kernel_shape(spec: LayerSpec, dim: int) -> tuple[int, ...]:
    if spec.kind == "conv":
        return (3,) * dim + (spec.in_channels, spec.out_channels)
    return (spec.in_channels, spec.out_channels)


def parameter_count(config: UNetConfig) -> int:
    """Trainable parameter count from the architecture arithmetic alone."""
    total = 0
    for spec in layer_plan(config):
        if spec.kind == "bn":
            total += 2 * spec.out_channels  # gamma, beta
            continue
        k = int(np.prod(_kernel_shape(spec, config.dim)))
        total += k + spec.out_channels  # kernel + bias
        if spec.variational:
            total += 2 * k  # rho and prior mean
    return total


class ParamStore:
    """Named parameters and batchnorm running statistics for one model.

    For convolution layers the entries are ``<layer>.k``/``<layer>.b``
    (deterministic) or ``<layer>.mu_w``/``<layer>.rho_w``/``<layer>.mu_p``
    plus a deterministic ``<layer>.b`` (variational); batchnorm layers carry
    ``gamma``/``beta`` parameters and running mean/var buffers.
    """

    def __init__(self):
        self.params: dict[str, Parameter] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def add_param(self, name: str, values: np.ndarray) -> Parameter:
        if name in self.params:
            raise ValueError(f"duplicate parameter {name}")
        p = Parameter(name, values)
        self.params[name] = p
        return p

    def add_buffer(self, name: str, values: np.ndarray) -> np.ndarray:
        self.buffers[name] = np.asarray(values, dtype=np.float64)
        return self.buffers[name]

    def trainable(self) -> list[Parameter]:
        return [p for p in self.params.values() if p.trainable]

    def n_parameters(self) -> int:
        return sum(p.values.size for p in self.trainable())

    def arrays(self) -> dict[str, np.ndarray]:
        out = {name: p.values for name, p in self.params.items()}
        out.update(self.buffers)
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        mine = self.arrays()
        if set(arrays) != set(mine):
            missing = set(mine) - set(arrays)
            extra = set(arrays) - set(mine)
            raise ValueError(f"array names mismatch: missing {missing}, extra {extra}")
        for name, arr in arrays.items():
            if mine[name].shape != arr.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {mine[name].shape}")
            mine[name][...] = arr


class UNet:
    """A built U-Net: configuration, layer plan, and parameter store."""

    def __init__(self, config: UNetConfig, store: ParamStore):
        self.config = config
        self.store = store
        self.plan = layer_plan(config)
        self._specs = {spec.name: spec for spec in self.plan}

    # -- forward -----------------------------------------------------------

    def _conv(self, tape, name, x, rng, vb_samples):
        spec = self._specs[name]
        p = self.store.params
        if spec.variational:
            if rng is None:
                raise ValueError("stochastic forward pass needs an rng")
            mu = p[f"{name}.mu_w"].node
            rho = p[f"{name}.rho_w"].node
            sigma = ad.softplus(tape, rho)
            eps = ad.leaf(rng.standard_normal(mu.values.shape))
            w = ad.add(tape, mu, ad.mul(tape, sigma, eps))
            vb_samples.append({
                "name": name, "w": w, "mu": mu, "sigma": sigma,
                "mu_p": p[f"{name}.mu_p"].node,
            })
        else:
            w = p[f"{name}.k"].node
        return ad.conv3x3(tape, x, w, p[f"{name}.b"].node)

    def _bn(self, tape, name, x, train):
        p = self.store.params
        return ad.batchnorm(tape, x, p[f"{name}.gamma"].node, p[f"{name}.beta"].node,
                            self.store.buffers[f"{name}.running_mean"],
                            self.store.buffers[f"{name}.running_var"], train=train)

    def _block(self, tape, prefix, x, train, rng, vb_samples):
        x = self._conv(tape, f"{prefix}.conv1", x, rng, vb_samples)
        x = ad.relu(tape, self._bn(tape, f"{prefix}.bn1", x, train))
        x = self._conv(tape, f"{prefix}.conv2", x, rng, vb_samples)
        x = ad.relu(tape, self._bn(tape, f"{prefix}.bn2", x, train))
        return x

    def forward(self, tape, f_batch: np.ndarray, train: bool, rng=None):
        """Full forward pass on a batch (B, *grid, dim).

        Returns the output node (B, *grid, out_channels) and, in vb mode,
        one record per variational layer with the sampled weight node and
        its posterior/prior nodes.
        """
        cfg = self.config
        f_batch = np.asarray(f_batch, dtype=np.float64)
        expect = (*cfg.grid_shape, cfg.dim)
        if f_batch.shape[1:] != expect or f_batch.ndim != cfg.dim + 2:
            raise ValueError(f"input must be (batch, {', '.join(map(str, expect))})")
        vb_samples: list[dict] = []
        x = ad.zeropad(tape, ad.leaf(f_batch), cfg.input_pad)
        skips = []
        for l in range(cfg.levels):
            x = self._block(tape, f"enc{l}", x, train, rng, vb_samples)
            if l < cfg.levels - 1:
                skips.append(x)
                x = ad.maxpool2(tape, x)
        for l in reversed(range(cfg.levels - 1)):
            x = ad.upsample_concat(tape, x, skips[l])
            x = self._block(tape, f"dec{l}", x, train, rng, vb_samples)
        p = self.store.params
        x = ad.conv1x1(tape, x, p["head.conv.k"].node, p["head.conv.b"].node)
        x = ad.crop(tape, x, cfg.input_pad)
        return x, vb_samples

    def forward_det(self, f: np.ndarray) -> np.ndarray:
        """Deterministic inference (running batchnorm statistics), single field."""
        if self.config.mode != "deterministic":
            raise ValueError(f"forward_det requires a deterministic model, mode is "
                             f"{self.config.mode!r}")
        single = f.ndim == self.config.dim + 1
        batch = f[None] if single else f
        out, _ = self.forward(ad.Tape(), batch, train=False)
        return out.values[0] if single else out.values

    def forward_prob(self, f: np.ndarray, rng=None):
        """Probabilistic inference: (mean field, raw spread field).

        mle uses the fixed weights; vb draws fresh weights per call via the
        reparameterization, so repeated calls differ unless the rng is
        reseeded. The per-DOF predictive std is softplus of the second
        output.
        """
        if self.config.mode == "deterministic":
            raise ValueError("forward_prob requires an mle or vb model")
        single = f.ndim == self.config.dim + 1
        batch = f[None] if single else f
        out, _ = self.forward(ad.Tape(), batch, train=False, rng=rng)
        mu = out.values[..., : self.config.dim]
        rho = out.values[..., self.config.dim:]
        if single:
            mu, rho = mu[0], rho[0]
        return mu, rho

    def n_parameters(self) -> int:
        return self.store.n_parameters()


def build(config: UNetConfig, seed: int) -> UNet:
    """Construct a U-Net with He-normal kernels drawn from ``seed``.

    Variational layers start with rho at softplus^-1 of 1% of the kernel's
    He scale (a nearly deterministic posterior) and a zero prior mean.
    """
    rng = np.random.default_rng(seed)
    store = ParamStore()
    for spec in layer_plan(config):
        if spec.kind == "bn":
            store.add_param(f"{spec.name}.gamma", np.ones(spec.out_channels))
            store.add_param(f"{spec.name}.beta", np.zeros(spec.out_channels))
            store.add_buffer(f"{spec.name}.running_mean", np.zeros(spec.out_channels))
            store.add_buffer(f"{spec.name}.running_var", np.ones(spec.out_channels))
            continue
        shape = _kernel_shape(spec, config.dim)
        fan_in = int(np.prod(shape[:-1]))
        he_std = np.sqrt(2.0 / fan_in)
        kernel = he_std * rng.standard_normal(shape)
        if spec.variational:
            store.add_param(f"{spec.name}.mu_w", kernel)
            rho0 = ad.softplus_inverse(0.01 * he_std)
            store.add_param(f"{spec.name}.rho_w", np.full(shape, rho0))
            store.add_param(f"{spec.name}.mu_p", np.zeros(shape))
        else:
            store.add_param(f"{spec.name}.k", kernel)
        store.add_param(f"{spec.name}.b", np.zeros(spec.out_channels))
    return UNet(config, store)


def variational_layer_names(config: UNetConfig) -> list[str]:
    return [s.name for s in layer_plan(config) if s.variational]
