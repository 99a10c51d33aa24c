"""Per-eye convolutional VAE producing named latent features."""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .tensor import LayerSpec, Sequential, Tensor, build_layer

FULL_ENCODER_CHANNELS = (128, 256, 128, 128, 64, 64)
FULL_DECODER_CHANNELS = (64, 64, 128, 128, 256)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class VaeConfig:
    input_shape: tuple = (16, 64, 64)
    encoder_channels: tuple = FULL_ENCODER_CHANNELS
    # the last entry must equal the input channel count; None fills it in
    decoder_channels: tuple | None = None
    latent_dim: int = 128
    beta: float = 1.0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 20
    batch_size: int = 16
    seed: int = 0
    leaky_slope: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "encoder_channels", tuple(int(v) for v in self.encoder_channels))
        dec = self.decoder_channels
        if dec is None:
            dec = FULL_DECODER_CHANNELS[: len(self.encoder_channels) - 1] + (self.input_shape[0],)
        object.__setattr__(self, "decoder_channels", tuple(int(v) for v in dec))
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ValueError("input_shape must be (channels, H, W) with positive entries")
        if not self.encoder_channels or len(self.decoder_channels) != len(self.encoder_channels):
            raise ValueError("encoder and decoder need the same, non-zero number of layers")
        if self.decoder_channels[-1] != self.input_shape[0]:
            raise ValueError("last decoder channel count must equal the input channel count")
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        if self.epochs < 1 or self.batch_size < 2:
            raise ValueError("epochs must be >= 1 and batch_size >= 2")

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _spatial_sizes(cfg):
    sizes = [cfg.input_shape[1:]]
    for _ in cfg.encoder_channels:
        h, w = sizes[-1]
        sizes.append((T.conv_output_size(h, 3, 2, 1), T.conv_output_size(w, 3, 2, 1)))
    return sizes


class VaeNetwork:
    """Encoder/decoder layer stacks with a fixed declaration order."""

    def __init__(self, cfg, rng):
        self.cfg = cfg
        sizes = _spatial_sizes(cfg)
        self.bottleneck = (cfg.encoder_channels[-1],) + sizes[-1]
        enc = []
        prev = cfg.input_shape[0]
        for c in cfg.encoder_channels:
            enc += [LayerSpec("conv2d", in_channels=prev, out_channels=c, bias=False),
                    LayerSpec("batchnorm2d", out_channels=c),
                    LayerSpec("relu")]
            prev = c
        flat = int(np.prod(self.bottleneck))
        self.encoder = Sequential(build_layer(s, rng) for s in enc)
        self.mu_head = build_layer(LayerSpec("linear", in_features=flat, out_features=cfg.latent_dim), rng)
        self.logvar_head = build_layer(LayerSpec("linear", in_features=flat, out_features=cfg.latent_dim), rng)
        self.logvar_head.weight.data = self.logvar_head.weight.data * 0.1
        self.dec_in = build_layer(LayerSpec("linear", in_features=cfg.latent_dim, out_features=flat), rng)

        dec = []
        prev = cfg.encoder_channels[-1]
        n = len(cfg.decoder_channels)
        for i, c in enumerate(cfg.decoder_channels):
            h_in, h_out = sizes[n - i][0], sizes[n - i - 1][0]
            op = h_out - T.conv_transpose_output_size(h_in, 3, 2, 1)
            dec.append(LayerSpec("conv_transpose2d", in_channels=prev, out_channels=c,
                                 output_padding=op, bias=i == n - 1))
            if i < n - 1:
                dec += [LayerSpec("batchnorm2d", out_channels=c),
                        LayerSpec("leaky_relu", negative_slope=cfg.leaky_slope)]
            prev = c
        self.decoder = Sequential(build_layer(s, rng) for s in dec)

    def parameters(self):
        return (self.encoder.parameters() + self.mu_head.parameters()
                + self.logvar_head.parameters() + self.dec_in.parameters()
                + self.decoder.parameters())

    def buffers(self):
        return self.encoder.buffers() + self.decoder.buffers()

    def encode(self, x, train):
        h = self.encoder(x, train)
        return self.mu_head(h, train), self.logvar_head(h, train)

    def decode(self, z, train):
        h = self.dec_in(z, train)
        h = T.reshape(h, (h.shape[0],) + self.bottleneck)
        return self.decoder(h, train)


@dataclass
class TrainedVae:
    config: VaeConfig
    network: VaeNetwork
    latent_mean: np.ndarray
    latent_std: np.ndarray
    history: list = field(default_factory=list)


def elbo_loss(x, xhat, mu, logvar, beta):
    """Return (total, mse_part, kl_part) as tensors; total = mse + beta * kl."""
    mse = T.mse_loss(x, xhat)
    kl = T.kl_loss(mu, logvar)
    total = T.add(mse, T.scale(kl, beta))
    return total, mse, kl


def reparameterize(mu, logvar, noise):
    mu = np.asarray(mu, dtype=np.float64)
    logvar = np.asarray(logvar, dtype=np.float64)
    return mu + np.exp(0.5 * logvar) * np.asarray(noise, dtype=np.float64)


def _check_volume(cfg, vol):
    vol = np.asarray(vol, dtype=np.float64)
    if vol.shape != cfg.input_shape:
        raise T.ShapeError(f"volume shape {vol.shape} does not match configured {cfg.input_shape}")
    return vol


def _stack(cfg, volumes, rows):
    return np.stack([_check_volume(cfg, volumes[int(i)]) for i in rows])


def _batches(n, batch_size):
    # array_split never yields a size-1 batch when n >= 2
    return max(1, n // batch_size)


def encode_batch(model, volumes):
    """Posterior mean and log-variance for each volume, eval mode."""
    net, cfg = model.network, model.config
    n = len(volumes)
    mus, lvs = [], []
    for rows in np.array_split(np.arange(n), max(1, -(-n // cfg.batch_size))):
        if rows.size == 0:
            continue
        mu, lv = net.encode(Tensor(_stack(cfg, volumes, rows)), train=False)
        mus.append(mu.data)
        lvs.append(lv.data)
    return np.concatenate(mus), np.concatenate(lvs)


def encode(model, volume):
    vol = _check_volume(model.config, volume)
    mu, lv = model.network.encode(Tensor(vol[None]), train=False)
    return mu.data[0], lv.data[0]


def decode(model, z):
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    if z.shape[-1] != model.config.latent_dim:
        raise T.ShapeError(f"latent length {z.shape[-1]} != latent_dim {model.config.latent_dim}")
    out = model.network.decode(Tensor(z[None] if single else z), train=False).data
    return out[0] if single else out


def train(config, volumes, validation=None):
    """Fit a VAE on ``volumes`` (a sequence of arrays shaped like ``input_shape``)."""
    n = len(volumes)
    if n < 2:
        raise ValueError("training needs at least 2 volumes")
    rng = np.random.default_rng(config.seed)
    net = VaeNetwork(config, rng)
    params = net.parameters()
    opt = T.Adam(params, T.AdamConfig(config.lr, config.beta1, config.beta2, config.adam_eps))
    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        sums = np.zeros(3)
        for rows in np.array_split(order, _batches(n, config.batch_size)):
            x = _stack(config, volumes, rows)
            opt.zero_grad()
            try:
                mu, lv = net.encode(Tensor(x), train=True)
                z = T.reparameterize(mu, lv, rng.standard_normal(mu.shape))
                xhat = net.decode(z, train=True)
                total, mse, kl = elbo_loss(x, xhat, mu, lv, config.beta)
                total.backward()
                opt.step()
            except T.NonFiniteError as exc:
                raise TrainingDivergedError(f"training diverged in epoch {epoch}: {exc}") from exc
            if kl.item() < 0:
                raise TrainingDivergedError(f"negative KL in epoch {epoch}")
            sums += np.array([total.item(), mse.item(), kl.item()]) * rows.size
        rec = {"epoch": epoch, "total": float(sums[0] / n), "mse": float(sums[1] / n),
               "kl": float(sums[2] / n)}
        if validation is not None and len(validation):
            rec["val_mse"] = _eval_mse(config, net, validation)
        history.append(rec)

    model = TrainedVae(config, net, np.zeros(config.latent_dim), np.zeros(config.latent_dim), history)
    mu, _ = encode_batch(model, volumes)
    model.latent_mean = mu.mean(axis=0)
    model.latent_std = mu.std(axis=0)
    return model


def _eval_mse(cfg, net, volumes):
    tot = 0.0
    n = len(volumes)
    for rows in np.array_split(np.arange(n), max(1, -(-n // cfg.batch_size))):
        if rows.size == 0:
            continue
        x = _stack(cfg, volumes, rows)
        mu, _ = net.encode(Tensor(x), train=False)
        xhat = net.decode(mu, train=False).data
        tot += float(((xhat - x) ** 2).mean(axis=(1, 2, 3)).sum())
    return tot / n


def reconstruction_mse(model, volumes):
    """Mean per-volume MSE of decoding the posterior mean, eval mode."""
    if not len(volumes):
        raise ValueError("no volumes to evaluate")
    return _eval_mse(model.config, model.network, volumes)


def latent_names(eye, dim):
    if eye not in ("left", "right"):
        raise ValueError(f"eye must be 'left' or 'right', got {eye!r}")
    prefix = "zl" if eye == "left" else "zr"
    width = max(3, len(str(dim - 1)))
    return [f"{prefix}{i:0{width}d}" for i in range(dim)]


@dataclass
class LatentVector:
    names: list
    values: np.ndarray
    subject_id: int
    eye: str


def extract_latents(model, volumes, eye, subject_ids=None):
    names = latent_names(eye, model.config.latent_dim)
    mu, _ = encode_batch(model, volumes)
    ids = range(len(volumes)) if subject_ids is None else subject_ids
    return [LatentVector(names, mu[i].copy(), int(sid), eye) for i, sid in enumerate(ids)]


# --------------------------------------------------------------------------
# checkpoint IO

MAGIC = b"VAE1"


def save(model, path):
    header = json.dumps({"config": asdict(model.config), "history": model.history},
                        sort_keys=True, separators=(",", ":")).encode()
    arrays = [p.data for p in model.network.parameters()] + model.network.buffers()
    arrays += [model.latent_mean, model.latent_std]
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise ValueError(f"{path}: not a VAE checkpoint")
    (hlen,) = struct.unpack_from("<Q", blob, 4)
    header = json.loads(blob[12:12 + hlen])
    cfg = VaeConfig.from_dict(header["config"])
    net = VaeNetwork(cfg, np.random.default_rng(0))
    offset = 12 + hlen

    def take(shape):
        nonlocal offset
        count = int(np.prod(shape))
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).astype(np.float64)
        offset += 8 * count
        return arr.reshape(shape)

    for p in net.parameters():
        p.data = take(p.data.shape)
    for b in net.buffers():
        b[...] = take(b.shape)
    mean = take((cfg.latent_dim,))
    std = take((cfg.latent_dim,))
    if offset != len(blob):
        raise ValueError(f"{path}: trailing or missing bytes in checkpoint")
    return TrainedVae(cfg, net, mean, std, header["history"])
