"""Trainable components: feature extractor, regression path, domain discriminator.

The extractor is a small conv stack producing a (C, grid, grid) feature map
from a square crop; the grid is fixed at 8x8 by default so the frequency
decomposition always sees the same cell layout. Both heads consume sliding-
window band features of dimension C*m: the regression path runs them through
two rectified fully-connected layers and a distribution head (softmax over
score bins, scalar score = expectation over bin centers), the discriminator
scores them with its own rectified stack ending in a sigmoid.

The min-max coupling is done with a gradient reversal layer: identity in the
forward direction, gradient scaled by -lambda in the backward direction.
"""

import math
from dataclasses import dataclass, asdict

import torch
from torch import nn

PROB_CLAMP = 1e-7
CHECKPOINT_FORMAT = "freqda-checkpoint-v1"

REGRESSION_HEADS = ("distribution", "linear")


@dataclass
class ModelConfig:
    in_channels: int = 1
    channels: int = 64          # C of the extracted feature map
    blocks: int = 4
    crop_size: int = 64
    grid_h: int = 8
    grid_w: int = 8
    m: int = 10                 # band window size; heads take C*m inputs
    hidden: int = 128
    disc_hidden: int = 128
    n_bins: int = 5
    score_min: float = 1.0
    score_max: float = 5.0
    regression_head: str = "distribution"
    grl_lambda: float = 1.0
    grl_ramp_iters: int = 0     # 0 = constant lambda, else linear ramp from 0

    def __post_init__(self):
        self.validate()

    @property
    def band_dim(self):
        return self.channels * self.m

    def validate(self):
        if self.grid_h != self.grid_w:
            raise ValueError(f"square frequency grid required, got {self.grid_h}x{self.grid_w}")
        ratio = self.crop_size / self.grid_h
        n_down = math.log2(ratio) if ratio >= 1 else -1
        if n_down < 0 or n_down != int(n_down):
            raise ValueError(
                f"crop_size/grid must be a power of two, got {self.crop_size}/{self.grid_h}"
            )
        if int(n_down) > self.blocks:
            raise ValueError(
                f"need at least {int(n_down)} conv blocks to reach a {self.grid_h}-cell grid, "
                f"got blocks={self.blocks}"
            )
        if not 1 <= self.m <= self.grid_h * self.grid_w:
            raise ValueError(f"1 <= m <= H*W violated (m={self.m})")
        if self.n_bins < 2:
            raise ValueError(f"need at least 2 score bins, got {self.n_bins}")
        if self.score_min >= self.score_max:
            raise ValueError("score_min must be below score_max")
        if self.regression_head not in REGRESSION_HEADS:
            raise ValueError(f"unknown regression head {self.regression_head!r}")
        if self.grl_lambda < 0:
            raise ValueError(f"grl_lambda must be nonnegative, got {self.grl_lambda}")


class _GradReverse(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, lam):
        ctx.lam = lam
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output.neg() * ctx.lam, None


def grl(x, lam=1.0):
    """Identity forward; upstream gradient scaled by -lam in the backward pass."""
    if lam < 0:
        raise ValueError(f"grl lambda must be nonnegative, got {lam}")
    return _GradReverse.apply(x, lam)


def grl_lambda_at(config, t):
    """GRL weight at iteration t (constant, or linearly ramped from zero)."""
    if config.grl_ramp_iters <= 0:
        return config.grl_lambda
    return config.grl_lambda * min(1.0, t / config.grl_ramp_iters)


def _channel_ramp(blocks, out_channels):
    floor = min(8, out_channels)
    return [max(out_channels >> (blocks - 1 - i), floor) for i in range(blocks)]


class FeatureExtractor(nn.Module):
    """Conv stack: stride-2 blocks down to the frequency grid, then stride-1."""

    def __init__(self, config):
        super().__init__()
        self.config = config
        n_down = int(math.log2(config.crop_size // config.grid_h))
        widths = _channel_ramp(config.blocks, config.channels)
        layers = []
        in_ch = config.in_channels
        for i, out_ch in enumerate(widths):
            stride = 2 if i < n_down else 1
            layers.append(nn.Conv2d(in_ch, out_ch, kernel_size=3, stride=stride, padding=1))
            layers.append(nn.ReLU())
            in_ch = out_ch
        self.net = nn.Sequential(*layers)

    def forward(self, images):
        cfg = self.config
        if images.ndim != 4 or images.shape[1] != cfg.in_channels:
            raise ValueError(
                f"expected (batch, {cfg.in_channels}, {cfg.crop_size}, {cfg.crop_size}) images, "
                f"got shape {tuple(images.shape)}"
            )
        if images.shape[-2:] != (cfg.crop_size, cfg.crop_size):
            raise ValueError(
                f"expected {cfg.crop_size}x{cfg.crop_size} crops, got "
                f"{images.shape[-2]}x{images.shape[-1]}"
            )
        # pixels arrive in [0, 1]; center them so early rectifiers see both signs
        return self.net(images - 0.5)


class QualityModel(nn.Module):
    """Extractor, band-feature regression path, and domain discriminator."""

    def __init__(self, config):
        super().__init__()
        config.validate()
        self.config = config
        self.extractor = FeatureExtractor(config)
        self.head = nn.Sequential(
            nn.Linear(config.band_dim, config.hidden),
            nn.ReLU(),
            nn.Linear(config.hidden, config.hidden),
            nn.ReLU(),
        )
        if config.regression_head == "distribution":
            self.regressor = nn.Linear(config.hidden, config.n_bins)
        else:
            self.regressor = nn.Linear(config.hidden, 1)
        self.discriminator = nn.Sequential(
            nn.Linear(config.band_dim, config.disc_hidden),
            nn.ReLU(),
            nn.Linear(config.disc_hidden, config.disc_hidden),
            nn.ReLU(),
            nn.Linear(config.disc_hidden, 1),
            nn.Sigmoid(),
        )
        centers = torch.linspace(config.score_min, config.score_max, config.n_bins)
        self.register_buffer("bin_centers", centers)

    def forward_features(self, images):
        return self.extractor(images)

    def _check_band(self, band):
        if band.ndim != 2 or band.shape[1] != self.config.band_dim:
            raise ValueError(
                f"expected (batch, {self.config.band_dim}) band features, "
                f"got shape {tuple(band.shape)}"
            )

    def regress(self, band):
        """Score a batch of band features.

        Returns (bin distribution, scalar score). With the distribution head
        the score is the expectation over bin centers and lies in
        [score_min, score_max]; the plain linear head returns (None, score).
        """
        self._check_band(band)
        out = self.regressor(self.head(band))
        if self.config.regression_head == "linear":
            return None, out.squeeze(-1)
        dist = torch.softmax(out, dim=-1)
        score = dist @ self.bin_centers.to(dist.dtype)
        return dist, score

    def discriminate(self, band):
        """Per-sample probability that the band features come from the target domain."""
        self._check_band(band)
        probs = self.discriminator(band).squeeze(-1)
        return probs.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)

    def parameter_groups(self):
        """Named parameter groups: generator (extractor), regression path, discriminator."""
        return {
            "generator": list(self.extractor.parameters()),
            "regression": list(self.head.parameters()) + list(self.regressor.parameters()),
            "discriminator": list(self.discriminator.parameters()),
        }


def build_model(config, seed):
    """Construct a QualityModel with seed-deterministic initialization."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return QualityModel(config)


def save_checkpoint(path, payload):
    """Write a checkpoint archive; payload keys are preserved under a format tag."""
    torch.save({"format": CHECKPOINT_FORMAT, **payload}, path)


def load_checkpoint(path):
    payload = torch.load(path, weights_only=False)
    tag = payload.pop("format", None)
    if tag != CHECKPOINT_FORMAT:
        raise ValueError(f"not a {CHECKPOINT_FORMAT} archive (format tag {tag!r})")
    return payload


def model_config_to_dict(config):
    return asdict(config)
