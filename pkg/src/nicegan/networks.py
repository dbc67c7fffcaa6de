"""Discriminator-as-encoder and AdaLIN generator.

Layout is channels-first throughout (``(N, C, H, W)``). Widths scale with
``base_filters`` (``b``): the discriminator runs b, 2b, 4b, 8b, 16b, 32b
channels and the generator bottleneck is 4b wide, which reproduces the
64/128/.../2048 and 256-channel layers at ``b=64``.

The discriminator trunk is ``[conv0, down0, attention, down1]``. Its first
``shared_depth`` blocks double as the translation encoder.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import SCALES

LEAKY_SLOPE = 0.2


class ShapeError(ValueError):
    pass


class ArchitectureConfigError(ValueError):
    pass


class ReceptiveFieldClippedError(RuntimeError):
    pass


# -- spectral normalisation ---------------------------------------------------

@dataclass
class SpectralState:
    u: torch.Tensor
    v: torch.Tensor
    n_updates: int = 0


def _unit(t: torch.Tensor, eps: float) -> torch.Tensor:
    return t / t.norm().clamp_min(eps)


def apply_spectral_norm(weight: torch.Tensor, state: Optional[SpectralState] = None,
                        n_iter: int = 1, eps: float = 1e-12):
    """Divide ``weight`` by a power-iteration estimate of its top singular value.

    The weight is viewed as an ``(out, rest)`` matrix. Returns the normalised
    weight and the advanced state; gradients flow through ``weight`` only.
    """
    if n_iter < 1:
        raise ValueError(f"n_iter must be >= 1 (got {n_iter})")
    mat = weight.reshape(weight.shape[0], -1)
    with torch.no_grad():
        if state is None:
            g = torch.Generator().manual_seed(0)
            u0 = torch.randn(mat.shape[0], generator=g, dtype=mat.dtype)
            state = SpectralState(_unit(u0, eps), torch.zeros(mat.shape[1], dtype=mat.dtype))
        u = state.u.to(mat.dtype)
        v = state.v.to(mat.dtype)
        for _ in range(n_iter):
            v = _unit(mat.t() @ u, eps)
            u = _unit(mat @ v, eps)
    sigma = torch.dot(u, mat @ v).clamp_min(eps)
    return weight / sigma, SpectralState(u.clone(), v.clone(), state.n_updates + n_iter)


class _SpectralMixin:
    """Keeps the power-iteration vectors as buffers; one step per training forward."""

    def _init_spectral(self, n_power_iterations: int = 1, eps: float = 1e-12):
        rows = self.weight.shape[0]
        cols = self.weight[0].numel()
        self.register_buffer("sn_u", _unit(torch.randn(rows), eps))
        self.register_buffer("sn_v", _unit(torch.randn(cols), eps))
        self.n_power_iterations = n_power_iterations
        self.sn_eps = eps
        self.sn_enabled = True

    def normalized_weight(self) -> torch.Tensor:
        if not self.sn_enabled:
            return self.weight
        if self.training:
            state = SpectralState(self.sn_u, self.sn_v)
            w, state = apply_spectral_norm(self.weight, state, self.n_power_iterations, self.sn_eps)
            with torch.no_grad():
                self.sn_u.copy_(state.u)
                self.sn_v.copy_(state.v)
            return w
        mat = self.weight.reshape(self.weight.shape[0], -1)
        sigma = torch.dot(self.sn_u, mat @ self.sn_v).clamp_min(self.sn_eps)
        return self.weight / sigma


class SNConv2d(_SpectralMixin, nn.Conv2d):
    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self._init_spectral()

    def forward(self, x):
        return self._conv_forward(x, self.normalized_weight(), self.bias)


class SNLinear(_SpectralMixin, nn.Linear):
    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self._init_spectral()

    def forward(self, x):
        return F.linear(x, self.normalized_weight(), self.bias)


# -- normalisation -------------------------------------------------------------

def rho_logits_for(rho: float, channels: int) -> torch.Tensor:
    rho = min(max(rho, 1e-3), 1 - 1e-3)
    return torch.tensor([math.log(rho), math.log(1 - rho)]).repeat(channels, 1)


def _per_channel(t: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    if t.dim() == 0:
        return t
    if t.dim() == 1:
        return t.view(1, -1, 1, 1)
    return t.view(t.shape[0], t.shape[1], 1, 1)


def adalin(features: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor,
           rho_logits: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Blend of instance- and layer-normalised features with affine (gamma, beta).

    ``rho`` is the first softmax component of ``rho_logits`` (shape ``(C, 2)``
    or ``(2,)``) so it always lies in [0, 1]; ``rho=1`` is pure instance norm.
    """
    if eps <= 0:
        raise ValueError(f"eps must be > 0 (got {eps})")
    c = features.shape[1]
    for name, t in (("gamma", gamma), ("beta", beta)):
        if t.dim() > 0 and t.shape[-1] != c:
            raise ShapeError(f"{name} has {t.shape[-1]} entries, features have {c} channels")
    in_mean = features.mean(dim=(2, 3), keepdim=True)
    in_var = features.var(dim=(2, 3), unbiased=False, keepdim=True)
    ln_mean = features.mean(dim=(1, 2, 3), keepdim=True)
    ln_var = features.var(dim=(1, 2, 3), unbiased=False, keepdim=True)
    x_in = (features - in_mean) / torch.sqrt(in_var + eps)
    x_ln = (features - ln_mean) / torch.sqrt(ln_var + eps)
    rho = torch.softmax(rho_logits, dim=-1)[..., 0]
    rho = _per_channel(rho, features)
    out = rho * x_in + (1 - rho) * x_ln
    return out * _per_channel(gamma, features) + _per_channel(beta, features)


class LayerInstanceNorm(nn.Module):
    """LIN: AdaLIN with learned per-channel gamma/beta."""

    def __init__(self, channels: int, rho: float = 0.0, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.rho_logits = nn.Parameter(rho_logits_for(rho, channels))
        self.gamma = nn.Parameter(torch.ones(channels))
        self.beta = nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        return adalin(x, self.gamma, self.beta, self.rho_logits, self.eps)


class AdaptiveLayerInstanceNorm(nn.Module):
    def __init__(self, channels: int, rho: float = 0.9, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.rho_logits = nn.Parameter(rho_logits_for(rho, channels))

    def forward(self, x, gamma, beta):
        return adalin(x, gamma, beta, self.rho_logits, self.eps)


# -- discriminator -------------------------------------------------------------

def attend(features: torch.Tensor, w_avg: torch.Tensor, w_max: torch.Tensor,
           gamma: torch.Tensor, residual: bool = True) -> torch.Tensor:
    """Channel attention before the 1x1 reduction.

    Returns the concatenation of the average- and max-weighted branches, each
    ``gamma * w * f + f`` (or ``w * f`` without the residual path).
    """
    wa = w_avg.view(1, -1, 1, 1)
    wm = w_max.view(1, -1, 1, 1)
    if residual:
        return torch.cat([gamma * wa * features + features,
                          gamma * wm * features + features], dim=1)
    return torch.cat([wa * features, wm * features], dim=1)


def cam_logit(features: torch.Tensor, weight: torch.Tensor, bias: Optional[torch.Tensor]):
    pooled = torch.cat([features.mean(dim=(2, 3)), features.amax(dim=(2, 3))], dim=1)
    return F.linear(pooled, weight, bias)


class ResidualAttention(nn.Module):
    """CAM attention with a trainable residual gate ``gamma`` (starts at 0).

    The 1-unit classifier over pooled features gives the scale-0 logit; its
    weight vector doubles as the per-channel attention weights.
    """

    def __init__(self, channels: int, residual: bool = True):
        super().__init__()
        self.channels = channels
        self.residual = residual
        self.fc = SNLinear(2 * channels, 1)
        self.gamma = nn.Parameter(torch.zeros(1))
        self.conv = SNConv2d(2 * channels, channels, kernel_size=1, stride=1)

    def attended(self, features):
        """Pre-reduction attended tensor (2C channels) and the CAM logit."""
        if features.shape[1] != self.channels:
            raise ShapeError(f"attention expects {self.channels} channels, got {features.shape[1]}")
        w = self.fc.normalized_weight()
        logit = cam_logit(features, w, self.fc.bias)
        c = self.channels
        return attend(features, w[0, :c], w[0, c:], self.gamma, self.residual), logit

    def forward(self, features):
        a, logit = self.attended(features)
        return F.leaky_relu(self.conv(a), LEAKY_SLOPE), logit


def residual_attention(features, ra: ResidualAttention, gamma=None):
    """Functional entry: ``(attended features, cam_logit)`` with optional gamma override."""
    if gamma is None:
        return ra(features)
    saved = ra.gamma.data.clone()
    try:
        ra.gamma.data.fill_(float(gamma))
        return ra(features)
    finally:
        ra.gamma.data.copy_(saved)


def _sn_block(cin, cout, k, s, p, act=True):
    layers = [SNConv2d(cin, cout, kernel_size=k, stride=s, padding=p)]
    if act:
        layers.append(nn.LeakyReLU(LEAKY_SLOPE))
    return nn.Sequential(*layers)


def make_trunk(in_channels: int, base_filters: int, ra_enabled: bool = True) -> nn.ModuleList:
    b = base_filters
    return nn.ModuleList([
        _sn_block(in_channels, b, 4, 2, 1),
        _sn_block(b, 2 * b, 4, 2, 1),
        ResidualAttention(2 * b, residual=ra_enabled),
        _sn_block(2 * b, 4 * b, 4, 2, 1),
    ])


def latent_channels(base_filters: int, shared_depth: int) -> int:
    return {1: 1, 2: 2, 3: 2, 4: 4}[shared_depth] * base_filters


def latent_stride(shared_depth: int) -> int:
    return {1: 2, 2: 4, 3: 4, 4: 8}[shared_depth]


def _run_trunk(blocks, x):
    logit = None
    for block in blocks:
        if isinstance(block, ResidualAttention):
            x, logit = block(x)
        else:
            x = block(x)
    return x, logit


def _check_image(x: torch.Tensor, channels: int):
    if x.dim() != 4 or x.shape[1] != channels:
        raise ShapeError(f"expected (N, {channels}, H, W) images, got {tuple(x.shape)}")
    if x.shape[2] % 32 or x.shape[3] % 32:
        raise ShapeError(f"image sides must be multiples of 32, got {tuple(x.shape[2:])}")


class Encoder(nn.Module):
    """Stand-alone copy of the trunk's first blocks (used when NICE is off)."""

    def __init__(self, in_channels=3, base_filters=64, shared_depth=3, ra_enabled=True):
        super().__init__()
        self.in_channels = in_channels
        self.blocks = make_trunk(in_channels, base_filters, ra_enabled)[:shared_depth]

    def forward(self, x):
        _check_image(x, self.in_channels)
        return _run_trunk(self.blocks, x)


class Discriminator(nn.Module):
    """Multi-scale discriminator whose leading trunk blocks form the encoder.

    ``forward`` returns ``(logits, latent, cam_logit)`` where ``logits`` maps
    each enabled scale to its output: ``c0`` (N, 1), ``c1``/``c2`` patch maps.
    """

    def __init__(self, in_channels=3, base_filters=64, shared_depth=3,
                 scales: Sequence[str] = SCALES, ra_enabled=True):
        super().__init__()
        if shared_depth not in (1, 2, 3, 4):
            raise ArchitectureConfigError(f"shared_depth must be 1..4, got {shared_depth}")
        unknown = [s for s in scales if s not in SCALES]
        if unknown or not scales:
            raise ArchitectureConfigError(f"need a non-empty subset of {SCALES}, got {list(scales)}")
        b = base_filters
        self.in_channels = in_channels
        self.shared_depth = shared_depth
        self.scales = tuple(s for s in SCALES if s in scales)
        self.trunk = make_trunk(in_channels, b, ra_enabled)
        self.head1 = None
        self.down2 = None
        self.head2 = None
        if "c1" in self.scales:
            self.head1 = nn.Sequential(_sn_block(4 * b, 8 * b, 4, 1, 1),
                                       _sn_block(8 * b, 1, 4, 1, 1, act=False))
        if "c2" in self.scales:
            self.down2 = nn.Sequential(_sn_block(4 * b, 8 * b, 4, 2, 1),
                                       _sn_block(8 * b, 16 * b, 4, 2, 1))
            self.head2 = nn.Sequential(_sn_block(16 * b, 32 * b, 4, 1, 1),
                                       _sn_block(32 * b, 1, 4, 1, 1, act=False))

    @property
    def attention(self) -> ResidualAttention:
        return self.trunk[2]

    def encoder_modules(self):
        return list(self.trunk[:self.shared_depth])

    def classifier_modules(self):
        heads = [m for m in (self.head1, self.down2, self.head2) if m is not None]
        return list(self.trunk[self.shared_depth:]) + heads

    def encoder_parameters(self):
        return [p for m in self.encoder_modules() for p in m.parameters()]

    def classifier_parameters(self):
        return [p for m in self.classifier_modules() for p in m.parameters()]

    def encode(self, x):
        _check_image(x, self.in_channels)
        return _run_trunk(self.trunk[:self.shared_depth], x)

    def forward(self, x, scales: Optional[Sequence[str]] = None):
        _check_image(x, self.in_channels)
        scales = self.scales if scales is None else tuple(s for s in SCALES if s in scales)
        if not scales:
            raise ArchitectureConfigError("all discriminator scales are disabled")
        missing = [s for s in scales if s not in self.scales]
        if missing:
            raise ArchitectureConfigError(f"scales {missing} were not built into this discriminator")
        h = x
        latent = None
        cam = None
        for i, block in enumerate(self.trunk):
            if isinstance(block, ResidualAttention):
                h, cam = block(h)
            else:
                h = block(h)
            if i + 1 == self.shared_depth:
                latent = h
        logits = {}
        if "c0" in scales:
            logits["c0"] = cam
        if "c1" in scales:
            logits["c1"] = self.head1(h)
        if "c2" in scales:
            logits["c2"] = self.head2(self.down2(h))
        return logits, latent, cam


def encode(d, image):
    """Latent features and CAM logit (``None`` when attention is outside the encoder)."""
    return d.encode(image)


def discriminate(d: Discriminator, image, scales_enabled=None) -> dict:
    return d(image, scales_enabled)[0]


# -- generator -----------------------------------------------------------------

def sub_pixel_upsample(features: torch.Tensor, conv: Optional[nn.Module] = None, r: int = 2):
    """Optional conv, then rearrange ``(N, r*r*C, h, w)`` into ``(N, C, r*h, r*w)``."""
    if conv is not None:
        features = conv(features)
    if features.shape[1] % (r * r):
        raise ShapeError(f"{features.shape[1]} channels cannot be rearranged with factor {r}")
    return F.pixel_shuffle(features, r)


class UpStage(nn.Module):
    """2x sub-pixel up-sampling: K3 conv to ``cout``, 1x1 expansion to ``4*cout``, shuffle."""

    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv = nn.Sequential(nn.ReflectionPad2d(1), nn.Conv2d(cin, cout, 3, 1, 0))
        self.norm1 = LayerInstanceNorm(cout, rho=0.0)
        self.expand = nn.Conv2d(cout, 4 * cout, kernel_size=1)
        self.norm2 = LayerInstanceNorm(cout, rho=0.0)

    def forward(self, x):
        x = F.relu(self.norm1(self.conv(x)))
        x = sub_pixel_upsample(x, self.expand)
        return F.relu(self.norm2(x))


class AdaResBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.pad1 = nn.ReflectionPad2d(1)
        self.conv1 = nn.Conv2d(channels, channels, 3, 1, 0)
        self.norm1 = AdaptiveLayerInstanceNorm(channels, rho=0.9)
        self.pad2 = nn.ReflectionPad2d(1)
        self.conv2 = nn.Conv2d(channels, channels, 3, 1, 0)
        self.norm2 = AdaptiveLayerInstanceNorm(channels, rho=0.9)

    def forward(self, x, gamma, beta):
        h = F.relu(self.norm1(self.conv1(self.pad1(x)), gamma, beta))
        h = self.norm2(self.conv2(self.pad2(h)), gamma, beta)
        return x + h


class Generator(nn.Module):
    """Latent features -> image; ``n_up`` sub-pixel stages restore full size."""

    def __init__(self, in_channels=128, base_filters=64, n_res_blocks=6, n_up=2, out_channels=3):
        super().__init__()
        width = 4 * base_filters
        self.in_channels = in_channels
        self.n_up = n_up
        self.sampling = nn.Sequential(nn.ReflectionPad2d(1), nn.Conv2d(in_channels, width, 3, 1, 0))
        self.sampling_norm = LayerInstanceNorm(width, rho=0.0)
        self.mlp = nn.Sequential(nn.Linear(width, width), nn.ReLU(),
                                 nn.Linear(width, width), nn.ReLU())
        self.gamma = nn.Linear(width, width)
        self.beta = nn.Linear(width, width)
        self.blocks = nn.ModuleList(AdaResBlock(width) for _ in range(n_res_blocks))
        ups, ch = [], width
        for _ in range(n_up):
            ups.append(UpStage(ch, ch // 2))
            ch //= 2
        self.ups = nn.Sequential(*ups)
        self.out = nn.Sequential(nn.ReflectionPad2d(3), nn.Conv2d(ch, out_channels, 7, 1, 0), nn.Tanh())

    def adalin_params(self, h):
        z = self.mlp(h.mean(dim=(2, 3)))
        return self.gamma(z), self.beta(z)

    def forward(self, latent):
        if latent.dim() != 4 or latent.shape[1] != self.in_channels:
            raise ShapeError(f"expected latent with {self.in_channels} channels, got {tuple(latent.shape)}")
        h = F.relu(self.sampling_norm(self.sampling(latent)))
        gamma, beta = self.adalin_params(h)
        for block in self.blocks:
            h = block(h, gamma, beta)
        return self.out(self.ups(h))


def generate(g: Generator, latent):
    return g(latent)


# -- construction helpers ------------------------------------------------------

def init_weights(module: nn.Module, std: float = 0.02) -> None:
    """Truncated-normal conv/linear weights, zero biases."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.trunc_normal_(m.weight, std=std, a=-2 * std, b=2 * std)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


def refresh_spectral_state(module: nn.Module, n_iter: int = 20) -> None:
    """Run power iterations on every spectral-normalised layer without a forward pass.

    Needed after re-initialising weights so that eval-mode forwards, which
    reuse the stored vectors, start from a converged estimate.
    """
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, _SpectralMixin):
                state = SpectralState(m.sn_u, m.sn_v)
                _, state = apply_spectral_norm(m.weight, state, n_iter, m.sn_eps)
                m.sn_u.copy_(state.u)
                m.sn_v.copy_(state.v)


def build_discriminator(cfg) -> Discriminator:
    d = Discriminator(cfg.channels, cfg.base_filters, cfg.shared_depth,
                      cfg.scales_enabled, cfg.ra_enabled)
    init_weights(d)
    refresh_spectral_state(d)
    return d


def build_encoder(cfg) -> Encoder:
    e = Encoder(cfg.channels, cfg.base_filters, cfg.shared_depth, cfg.ra_enabled)
    init_weights(e)
    refresh_spectral_state(e)
    return e


def build_generator(cfg) -> Generator:
    n_up = int(math.log2(latent_stride(cfg.shared_depth)))
    g = Generator(latent_channels(cfg.base_filters, cfg.shared_depth), cfg.base_filters,
                  cfg.n_res_blocks, n_up, cfg.channels)
    init_weights(g)
    return g


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


# -- receptive field probe ---------------------------------------------------------

def probe_receptive_field(d: Discriminator, scale: str, probe_size: Optional[int] = None) -> int:
    """Side length of the input region that drives one central output unit.

    Works on a float64 copy with all-ones weights, zero biases and spectral
    normalisation switched off, and reads the support of the input gradient.
    ``scale`` is ``"c0"`` (trunk features feeding the scale-0 head), ``"c1"``
    or ``"c2"``.
    """
    if scale not in SCALES:
        raise ValueError(f"scale must be one of {SCALES}")
    if scale != "c0" and scale not in d.scales:
        raise ArchitectureConfigError(f"scale {scale} not built into this discriminator")
    probe = copy.deepcopy(d).double().eval()
    with torch.no_grad():
        for m in probe.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                m.weight.fill_(1.0)
                if m.bias is not None:
                    m.bias.zero_()
            if isinstance(m, _SpectralMixin):
                m.sn_enabled = False
    size = probe_size or 256
    x = torch.ones(1, d.in_channels, size, size, dtype=torch.float64, requires_grad=True)
    h = x
    for block in probe.trunk[:3]:
        h = block(h)[0] if isinstance(block, ResidualAttention) else block(h)
    if scale == "c0":
        out = h
    else:
        h = probe.trunk[3](h)
        out = probe.head1(h) if scale == "c1" else probe.head2(probe.down2(h))
    if out.shape[2] < 1 or out.shape[3] < 1:
        raise ReceptiveFieldClippedError(f"probe image {size} too small for scale {scale}")
    i, j = out.shape[2] // 2, out.shape[3] // 2
    out[0, :, i, j].sum().backward()
    support = x.grad[0].abs().sum(0) > 0
    rows = torch.nonzero(support.any(1)).flatten()
    cols = torch.nonzero(support.any(0)).flatten()
    r0, r1, c0, c1 = rows.min().item(), rows.max().item(), cols.min().item(), cols.max().item()
    if r0 == 0 or c0 == 0 or r1 == size - 1 or c1 == size - 1:
        raise ReceptiveFieldClippedError(
            f"receptive field of {scale} reaches the border of a {size}px probe; "
            f"use a larger probe image")
    return max(r1 - r0 + 1, c1 - c0 + 1)
