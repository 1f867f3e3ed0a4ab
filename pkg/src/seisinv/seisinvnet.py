"""Trace-embedding inversion network and the encoder-decoder baseline.

The trace network turns every recorded trace into an enhanced embedding
[neighborhood | observation one-hot | profile context]:

  * a shallow shape-preserving CNN mixes each trace with its neighbors
    inside the shot gather (receptive field 7x7);
  * the one-hot block states which source fired and which receiver
    recorded (exactly two ones, length S+R);
  * a strided conv stack squeezes the whole gather to a C-vector of
    profile-level context shared by all traces of that shot.

A weight-shared MLP maps each embedding to an h x w feature map; the
S*R maps, stacked as channels and spatially aligned with the velocity
model, pass through a conv decoder with two nearest-neighbor upsampling
stages to the [1, H, W] prediction. Feature-map dropout (whole maps,
rate 0.2) regularizes the decoder during training; zero-filled maps are
likewise how missing receivers are represented at evaluation time.

The baseline squeezes the full cube (sources as input channels) down to
a 1x1 bottleneck vector and decodes it back; its dense projection from
the bottleneck to the map grid is what carries most of its parameters.
"""

from dataclasses import dataclass

import numpy as np

from .diffcore import ops
from .diffcore.nn import (
    Module, Conv2d, Dense, BatchNorm, Dropout, LeakyReLU, Sequential,
)
from .diffcore.tensor import Tensor


@dataclass
class NetworkConfig:
    T: int = 1000
    S: int = 20
    R: int = 32
    C: int = 128
    h: int = 25
    w: int = 25
    H: int = 100
    W: int = 100
    dropout_rate: float = 0.2
    neighborhood_channels: tuple = (8, 8)
    f1_hidden: tuple = (2048, 1024)
    decoder_channels: tuple = (384, 192, 96, 48)
    context_start_channels: int = 16
    baseline_latent: int = 1280
    baseline_encoder_end: int = 448
    baseline_encoder_start: int = 64
    baseline_decoder_channels: tuple = (256, 128, 96, 64)

    def __post_init__(self):
        if self.h * self.W != self.w * self.H:
            raise ValueError("feature maps must keep the H:W aspect ratio")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate outside [0, 1)")
        ratio = self.H / self.h
        ups = int(round(np.log2(ratio)))
        if 2 ** ups != ratio or self.W // self.w != self.H // self.h:
            raise ValueError(
                f"H/h must be a power of two for the upsampling decoder, "
                f"got {self.H}/{self.h}"
            )
        self.upsample_stages = ups
        if len(self.decoder_channels) < ups + 1:
            raise ValueError("decoder_channels too short for the upsampling")

    @property
    def embedding_length(self):
        return self.T + self.S + self.R + self.C


def toy_config(**overrides):
    """Desk-scale profile: 64x64 grid, 8 sources, 16 receivers, T=400."""
    base = dict(
        T=400, S=8, R=16, C=64, h=16, w=16, H=64, W=64,
        neighborhood_channels=(8, 8),
        f1_hidden=(512, 384),
        decoder_channels=(64, 48, 32, 24),
        context_start_channels=16,
        baseline_latent=256,
        baseline_encoder_end=160,
        baseline_encoder_start=32,
        baseline_decoder_channels=(64, 48, 32, 24),
    )
    base.update(overrides)
    return NetworkConfig(**base)


def observation_onehot(s, r, S, R):
    """Length S+R one-hot pair marking source s and receiver r."""
    if not (0 <= s < S and 0 <= r < R):
        raise ValueError(f"observation ({s}, {r}) outside {S}x{R}")
    v = np.zeros(S + R, dtype=np.float32)
    v[s] = 1.0
    v[S + r] = 1.0
    return v


def assemble_embedding(neighborhood_col, onehot, context):
    """Fixed-order concatenation [neighborhood | onehot | context]."""
    return np.concatenate([
        np.asarray(neighborhood_col), np.asarray(onehot),
        np.asarray(context),
    ])


def _reduction_plan(t, r, freeze_at=8):
    """Strided-conv schedule halving (t, r) until both fit freeze_at,
    then one valid kernel collapsing the remainder to 1x1."""
    layers = []
    while t > freeze_at or r > freeze_at:
        kh, sh, ph = (4, 2, 1) if t > freeze_at else (1, 1, 0)
        kw, sw, pw = (4, 2, 1) if r > freeze_at else (1, 1, 0)
        layers.append(((kh, kw), (sh, sw), (ph, pw)))
        t = (t + 2 * ph - kh) // sh + 1
        r = (r + 2 * pw - kw) // sw + 1
    layers.append(((t, r), (1, 1), (0, 0)))
    return layers


def _conv_block(in_ch, out_ch, kernel, stride, pad, rng):
    return Sequential(
        Conv2d(in_ch, out_ch, kernel, rng, stride=stride, pad=pad),
        BatchNorm(out_ch),
        LeakyReLU(0.2),
    )


class NeighborhoodEncoder(Module):
    """Shape-preserving CNN over one shot gather [N, 1, T, R]."""

    def __init__(self, config, rng):
        super().__init__()
        chans = (1,) + tuple(config.neighborhood_channels)
        blocks = []
        for i in range(len(chans) - 1):
            blocks.append(_conv_block(chans[i], chans[i + 1], 3, 1, 1, rng))
        blocks.append(Conv2d(chans[-1], 1, 3, rng, stride=1, pad=1))
        self.stack = Sequential(*blocks)
        # three 3x3 layers: receptive field 7x7 around each sample
        self.receptive_field = 1 + 2 * (len(chans) - 1) + 2

    def __call__(self, x):
        return self.stack(x)


class ContextEncoder(Module):
    """Strided convs squeezing [N, 1, T, R] to a length-C vector."""

    def __init__(self, config, rng):
        super().__init__()
        plan = _reduction_plan(config.T, config.R)
        start = min(config.context_start_channels, config.C)
        chans = np.linspace(start, config.C, len(plan)).round().astype(int)
        blocks = []
        in_ch = 1
        for i, (kernel, stride, pad) in enumerate(plan):
            out_ch = int(chans[i])
            if i < len(plan) - 1:
                blocks.append(_conv_block(in_ch, out_ch, kernel, stride,
                                          pad, rng))
            else:
                blocks.append(Conv2d(in_ch, out_ch, kernel, rng,
                                     stride=stride, pad=pad))
            in_ch = out_ch
        self.stack = Sequential(*blocks)
        self.C = config.C

    def __call__(self, x):
        out = self.stack(x)
        if out.shape[2] != 1 or out.shape[3] != 1:
            raise ValueError(
                f"context stack ended at spatial {out.shape[2:]}, not 1x1")
        return out.reshape(out.shape[0], self.C)


class FeatureGenerator(Module):
    """Weight-shared MLP from embeddings to flat h*w feature maps."""

    def __init__(self, config, rng):
        super().__init__()
        dims = (config.embedding_length,) + tuple(config.f1_hidden)
        blocks = []
        for i in range(len(dims) - 1):
            blocks.append(Sequential(
                Dense(dims[i], dims[i + 1], rng),
                BatchNorm(dims[i + 1]),
                LeakyReLU(0.2),
            ))
        blocks.append(Dense(dims[-1], config.h * config.w, rng))
        self.stack = Sequential(*blocks)

    def __call__(self, e):
        return self.stack(e)


class Decoder(Module):
    """Conv + nearest-upsample stack from [N, S*R, h, w] to [N, 1, H, W]."""

    def __init__(self, config, rng):
        super().__init__()
        chans = config.decoder_channels
        ups = config.upsample_stages
        base_convs = len(chans) - ups
        blocks = []
        in_ch = config.S * config.R
        stage = 0
        for i, out_ch in enumerate(chans):
            if i >= base_convs:
                blocks.append("up")
                stage += 1
            blocks.append(_conv_block(in_ch, out_ch, 3, 1, 1, rng))
            in_ch = out_ch
        self.blocks = blocks
        self.final = Conv2d(in_ch, 1, 3, rng, stride=1, pad=1)
        self.dropout = Dropout(config.dropout_rate, granularity="featuremap")

    def __call__(self, stack, rng=None):
        x = self.dropout(stack, rng=rng)
        for block in self.blocks:
            if block == "up":
                x = ops.upsample_nearest2(x)
            else:
                x = block(x)
        return self.final(x)


class SeisInvNet(Module):
    """Full trace-embedding network: cube [B, S, T, R] -> [B, 1, H, W]."""

    def __init__(self, config: NetworkConfig, seed=0):
        super().__init__()
        rng = np.random.default_rng([seed, 11])
        self.config = config
        self.neighborhood = NeighborhoodEncoder(config, rng)
        self.context = ContextEncoder(config, rng)
        self.generator = FeatureGenerator(config, rng)
        self.decoder = Decoder(config, rng)
        onehots = np.stack([
            observation_onehot(s, r, config.S, config.R)
            for s in range(config.S) for r in range(config.R)
        ])
        self.onehot_table = onehots   # [S*R, S+R] constant

    def build_embeddings(self, cube):
        """[B, S, T, R] -> embeddings [B*S*R, T+S+R+C]."""
        cfg = self.config
        x = cube if isinstance(cube, Tensor) else Tensor(cube)
        if x.shape[1:] != (cfg.S, cfg.T, cfg.R):
            raise ValueError(
                f"cube shape {x.shape[1:]} does not match config "
                f"({cfg.S}, {cfg.T}, {cfg.R})"
            )
        B = x.shape[0]
        profiles = x.reshape(B * cfg.S, 1, cfg.T, cfg.R)
        neigh = self.neighborhood(profiles)            # [B*S, 1, T, R]
        cols = neigh.reshape(B * cfg.S, cfg.T, cfg.R)
        cols = cols.transpose(0, 2, 1)                 # [B*S, R, T]
        cols = cols.reshape(B * cfg.S * cfg.R, cfg.T)

        context = self.context(profiles)               # [B*S, C]
        ones = Tensor(np.ones((1, cfg.R, 1), dtype=np.float32))
        context = (context.reshape(B * cfg.S, 1, cfg.C) * ones) \
            .reshape(B * cfg.S * cfg.R, cfg.C)

        table = np.tile(self.onehot_table, (B, 1)).astype(cols.dtype)
        return ops.concat([cols, Tensor(table), context], axis=1)

    def feature_maps(self, cube):
        """[B, S, T, R] -> aligned feature maps [B, S*R, h, w]."""
        cfg = self.config
        e = self.build_embeddings(cube)
        flat = self.generator(e)                       # [B*S*R, h*w]
        B = flat.shape[0] // (cfg.S * cfg.R)
        return flat.reshape(B, cfg.S * cfg.R, cfg.h, cfg.w)

    def __call__(self, cube, rng=None, receiver_mask=None):
        """receiver_mask: optional bool [R]; False maps are zero-filled."""
        cfg = self.config
        maps = self.feature_maps(cube)
        if receiver_mask is not None:
            receiver_mask = np.asarray(receiver_mask, dtype=bool)
            if receiver_mask.shape != (cfg.R,):
                raise ValueError(f"receiver_mask must have shape ({cfg.R},)")
            keep = np.tile(receiver_mask, cfg.S).astype(np.float32)
            maps = maps * Tensor(keep.reshape(1, cfg.S * cfg.R, 1, 1))
        return self.decoder(maps, rng=rng)


class Baseline(Module):
    """Encoder-decoder net: sources as channels, 1x1 bottleneck."""

    def __init__(self, config: NetworkConfig, seed=0):
        super().__init__()
        rng = np.random.default_rng([seed, 23])
        self.config = config
        plan = _reduction_plan(config.T, config.R, freeze_at=4)
        chans = np.linspace(config.baseline_encoder_start,
                            config.baseline_encoder_end,
                            len(plan) - 1).round().astype(int)
        blocks = []
        in_ch = config.S
        for i, (kernel, stride, pad) in enumerate(plan[:-1]):
            blocks.append(_conv_block(in_ch, int(chans[i]), kernel, stride,
                                      pad, rng))
            in_ch = int(chans[i])
        kernel, stride, pad = plan[-1]
        blocks.append(Conv2d(in_ch, config.baseline_latent, kernel, rng,
                             stride=stride, pad=pad))
        self.encoder = Sequential(*blocks)

        self.project = Dense(config.baseline_latent,
                             32 * config.h * config.w, rng)
        dec_chans = config.baseline_decoder_channels
        ups = config.upsample_stages
        base_convs = len(dec_chans) - ups
        dec = []
        in_ch = 32
        for i, out_ch in enumerate(dec_chans):
            if i >= base_convs:
                dec.append("up")
            dec.append(_conv_block(in_ch, out_ch, 3, 1, 1, rng))
            in_ch = out_ch
        self.dec_blocks = dec
        self.final = Conv2d(in_ch, 1, 3, rng, stride=1, pad=1)

    def bottleneck(self, cube):
        x = cube if isinstance(cube, Tensor) else Tensor(cube)
        out = self.encoder(x)
        if out.shape[2] != 1 or out.shape[3] != 1:
            raise ValueError(
                f"bottleneck spatial extent {out.shape[2:]} is not 1x1")
        return out

    def __call__(self, cube, rng=None, receiver_mask=None):
        if receiver_mask is not None:
            raise ValueError("baseline has no per-receiver maps to mask")
        cfg = self.config
        z = self.bottleneck(cube)
        z = z.reshape(z.shape[0], cfg.baseline_latent)
        x = ops.leaky_relu(self.project(z), 0.2)
        x = x.reshape(z.shape[0], 32, cfg.h, cfg.w)
        for block in self.dec_blocks:
            if block == "up":
                x = ops.upsample_nearest2(x)
            else:
                x = block(x)
        return self.final(x)


def build_network(kind, config: NetworkConfig, seed=0):
    if kind == "seisinvnet":
        return SeisInvNet(config, seed)
    if kind == "baseline":
        return Baseline(config, seed)
    raise ValueError(f"unknown network kind {kind!r}")
