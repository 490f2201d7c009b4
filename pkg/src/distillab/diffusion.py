"""Tiny conditional denoising diffusion model over latent vectors.

The denoiser is an MLP taking concat(noisy latent, sinusoidal timestep
embedding, learned label embedding) and predicting the injected noise.
A reserved null label row is trained via label dropout, enabling
classifier-free guidance at sampling time:

    eps_hat = eps_null + w * (eps_label - eps_null)

Image-to-image sampling noises a prototype latent to timestep
floor(strength * T) and runs the ancestral reverse process from there.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .models import Adam, Mlp, mlp_backward, mlp_forward, mlp_init, read_checkpoint, write_checkpoint
from .models import CheckpointFormatError
from .numerics import SeededRng, require_finite

__all__ = [
    "Denoiser",
    "DenoiserTrainConfig",
    "DiffusionSchedule",
    "build_schedule",
    "denoise_loss_and_grads",
    "forward_noise",
    "load_denoiser",
    "sample_img2img",
    "sample_img2img_batch",
    "save_denoiser",
    "train_denoiser",
]


@dataclass(frozen=True)
class DiffusionSchedule:
    """Linear variance schedule; float64 so the cumulative product stays sharp."""

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def timesteps(self) -> int:
        return len(self.betas)


def build_schedule(timesteps: int, beta_start: float = 1e-4, beta_end: float = 0.04) -> DiffusionSchedule:
    """Linearly interpolated betas with cumulative-product alpha-bars.

    The default end value is chosen so the 200-step desk-scale schedule
    still drives alpha_bar_T below 0.05 (near-total noising).
    """
    if timesteps < 1:
        raise ValueError("timesteps must be >= 1")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    betas = np.linspace(beta_start, beta_end, timesteps, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    return DiffusionSchedule(betas=betas, alphas=alphas, alpha_bars=alpha_bars)


def forward_noise(z0: np.ndarray, t: int, eps: np.ndarray, sched: DiffusionSchedule) -> np.ndarray:
    """q(z_t | z_0): sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps; t is 1-based."""
    if not 1 <= t <= sched.timesteps:
        raise ValueError(f"t={t} outside [1, {sched.timesteps}]")
    z0 = np.asarray(z0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if z0.shape != eps.shape:
        raise ValueError(f"shape mismatch: {z0.shape} vs {eps.shape}")
    ab = sched.alpha_bars[t - 1]
    return (np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps).astype(np.float32)


def timestep_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    """Fixed sinusoidal embedding of integer timesteps, shape (len(t), dim)."""
    if dim % 2 != 0:
        raise ValueError("embedding dim must be even")
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half, dtype=np.float64) / half)
    ang = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


@dataclass
class DenoiserTrainConfig:
    epochs: int = 40
    batch_size: int = 64
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    hidden_sizes: tuple[int, ...] = (256, 256)
    time_embed_dim: int = 16
    label_embed_dim: int = 16
    label_dropout: float = 0.1

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.label_dropout <= 1.0:
            raise ValueError("label_dropout must lie in [0, 1]")
        if self.time_embed_dim % 2 != 0:
            raise ValueError("time_embed_dim must be even")


@dataclass
class Denoiser:
    """Noise-prediction MLP with a learned label table (last row = null token).

    The embedding is residual: rows 0..K-1 hold zero-initialized per-class
    offsets and the last row holds the null/unconditional base vector. A
    class token embeds as base + offset, the null token as the base alone.
    Offsets only receive gradient when their class survives label dropout,
    so a model trained with full dropout has identically zero offsets and
    its conditional and null predictions coincide exactly.
    """

    mlp: Mlp
    label_table: np.ndarray  # (num_classes + 1, label_embed_dim) float32
    num_classes: int
    latent_dim: int
    time_embed_dim: int
    meta: dict = field(default_factory=dict)

    @property
    def null_token(self) -> int:
        return self.num_classes

    def label_vec(self, tokens: np.ndarray) -> np.ndarray:
        """Embedding lookup; the single path by which labels are read."""
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.size and (tokens.min() < 0 or tokens.max() > self.num_classes):
            raise ValueError("label token out of range (including null)")
        base = self.label_table[self.null_token].astype(np.float64)
        out = np.broadcast_to(base, (len(tokens), base.size)).copy()
        cls = tokens < self.num_classes
        out[cls] += self.label_table[tokens[cls]].astype(np.float64)
        return out

    def predict_noise(self, z: np.ndarray, t: np.ndarray, tokens: np.ndarray) -> np.ndarray:
        """eps_hat for a batch of latents; tokens may include the null token."""
        x = self._assemble_input(z, t, tokens)
        return mlp_forward(self.mlp, x)[-1]

    def _assemble_input(self, z, t, tokens) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        if z.ndim != 2 or z.shape[1] != self.latent_dim:
            raise ValueError(f"latents must be (B, {self.latent_dim})")
        temb = timestep_embedding(t, self.time_embed_dim)
        lemb = self.label_vec(tokens)
        return np.concatenate([z, temb, lemb], axis=1)


def denoise_loss_and_grads(den: Denoiser, zt, t, tokens, eps):
    """Mean squared noise-prediction error and gradients.

    Gradient list matches ``den.mlp.params() + [den.label_table]``; the
    input gradient is scattered back into the looked-up embedding rows.
    """
    x = den._assemble_input(zt, t, tokens)
    acts = mlp_forward(den.mlp, x)
    diff = acts[-1] - np.asarray(eps, dtype=np.float64)
    loss = float(np.mean(diff**2))
    dout = 2.0 * diff / diff.size
    grads, dinput = mlp_backward(den.mlp, acts, dout)
    demb = dinput[:, den.latent_dim + den.time_embed_dim :]
    tokens = np.asarray(tokens, dtype=np.int64)
    dtable = np.zeros(den.label_table.shape, dtype=np.float64)
    dtable[den.null_token] = demb.sum(axis=0)  # base row is in every path
    cls = tokens < den.num_classes
    np.add.at(dtable, tokens[cls], demb[cls])
    return loss, grads + [dtable]


def train_denoiser(
    latents: np.ndarray,
    labels: np.ndarray,
    sched: DiffusionSchedule,
    cfg: DenoiserTrainConfig,
    rng: SeededRng,
) -> Denoiser:
    """Fit the noise-prediction objective over uniformly sampled timesteps.

    Per sample: t ~ U{1..T}, eps ~ N(0, I), z_t = forward_noise(z0, t, eps),
    and with probability ``label_dropout`` the class token is replaced by
    the null token so the unconditional branch gets trained too. Loss is
    the mean squared error between predicted and true noise.
    """
    latents = np.asarray(latents, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    if latents.ndim != 2 or len(latents) == 0:
        raise ValueError("latents must be a non-empty (N, d) array")
    if len(labels) != len(latents):
        raise ValueError("labels misaligned with latents")
    require_finite("latents", latents)
    num_classes = int(labels.max()) + 1
    d = latents.shape[1]
    din = d + cfg.time_embed_dim + cfg.label_embed_dim
    mlp = mlp_init([din, *cfg.hidden_sizes, d], rng.spawn(0))
    # zero-init class offsets; random base (null) row
    table = np.zeros((num_classes + 1, cfg.label_embed_dim), dtype=np.float32)
    table[num_classes] = rng.spawn(1).normal(cfg.label_embed_dim) * 0.5
    den = Denoiser(
        mlp=mlp,
        label_table=table,
        num_classes=num_classes,
        latent_dim=d,
        time_embed_dim=cfg.time_embed_dim,
    )
    params = mlp.params() + [den.label_table]
    opt = Adam(params, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    loop = rng.spawn(2)
    n = len(latents)
    z0_all = latents.astype(np.float64)
    losses = []
    for _epoch in range(cfg.epochs):
        order = loop.permutation(n)
        epoch_losses = []
        for s in range(0, n, cfg.batch_size):
            idx = order[s : s + cfg.batch_size]
            b = len(idx)
            t = loop.integers(sched.timesteps, n=b) + 1
            eps = loop.normal((b, d)).astype(np.float64)
            ab = sched.alpha_bars[t - 1][:, None]
            zt = np.sqrt(ab) * z0_all[idx] + np.sqrt(1.0 - ab) * eps
            tokens = labels[idx].copy()
            drop = loop.uniform(b) < cfg.label_dropout
            tokens[drop] = den.null_token
            loss, grads = denoise_loss_and_grads(den, zt, t, tokens, eps)
            opt.step(params, grads)
            epoch_losses.append(loss)
        losses.append(float(np.mean(epoch_losses)))
    den.meta = {
        "epochs": cfg.epochs,
        "loss_history": losses,
        "final_loss": losses[-1],
        "seed": rng.seed,
        "label_dropout": cfg.label_dropout,
    }
    return den


def _guided_noise(den: Denoiser, z: np.ndarray, t: np.ndarray, label: int, w: float) -> np.ndarray:
    """Classifier-free guided estimate; only the target and null rows are read."""
    b = len(z)
    zz = np.concatenate([z, z], axis=0)
    tt = np.concatenate([t, t])
    tokens = np.concatenate(
        [np.full(b, label, dtype=np.int64), np.full(b, den.null_token, dtype=np.int64)]
    )
    out = den.predict_noise(zz, tt, tokens)
    eps_label, eps_null = out[:b], out[b:]
    return eps_null + w * (eps_label - eps_null)


def sample_img2img_batch(
    den: Denoiser,
    sched: DiffusionSchedule,
    prototypes: np.ndarray,
    label: int,
    strength: float,
    guidance_scale: float,
    rngs,
) -> np.ndarray:
    """Partially noise each prototype and denoise it back under guidance.

    ``rngs`` supplies one independent stream per row; each stream is
    consumed in a fixed order (initial noise, then one draw per ancestral
    step above t=1), so results are reproducible per (prototype, stream).
    Note batched results can differ from one-at-a-time sampling in the last
    float bit (BLAS blocking); batch shapes are part of the frozen recipe.
    """
    protos = np.atleast_2d(np.asarray(prototypes, dtype=np.float64))
    b, d = protos.shape
    if d != den.latent_dim:
        raise ValueError(f"prototype dim {d} != latent dim {den.latent_dim}")
    if not 0.0 <= strength <= 1.0:
        raise ValueError("strength must lie in [0, 1]")
    if guidance_scale < 0.0:
        raise ValueError("guidance_scale must be non-negative")
    if not 0 <= label < den.num_classes:
        raise ValueError(f"unknown label {label}")
    if len(rngs) != b:
        raise ValueError("need one rng stream per prototype")
    t_start = int(np.floor(strength * sched.timesteps))
    if t_start == 0:
        return protos.astype(np.float32)
    eps0 = np.stack([r.normal(d).astype(np.float64) for r in rngs])
    ab = sched.alpha_bars[t_start - 1]
    z = np.sqrt(ab) * protos + np.sqrt(1.0 - ab) * eps0
    for t in range(t_start, 0, -1):
        tb = np.full(b, t, dtype=np.int64)
        eps_hat = _guided_noise(den, z, tb, label, guidance_scale)
        beta = sched.betas[t - 1]
        alpha = sched.alphas[t - 1]
        ab_t = sched.alpha_bars[t - 1]
        mean = (z - (beta / np.sqrt(1.0 - ab_t)) * eps_hat) / np.sqrt(alpha)
        if t > 1:
            ab_prev = sched.alpha_bars[t - 2]
            var = beta * (1.0 - ab_prev) / (1.0 - ab_t)
            xi = np.stack([r.normal(d).astype(np.float64) for r in rngs])
            z = mean + np.sqrt(var) * xi
        else:
            z = mean
    out = z.astype(np.float32)
    require_finite("sampled latent", out)
    return out


def sample_img2img(
    den: Denoiser,
    sched: DiffusionSchedule,
    prototype: np.ndarray,
    label: int,
    strength: float,
    guidance_scale: float,
    rng: SeededRng,
) -> np.ndarray:
    """Single-prototype convenience wrapper around the batch sampler."""
    return sample_img2img_batch(
        den, sched, np.asarray(prototype)[None], label, strength, guidance_scale, [rng]
    )[0]


def save_denoiser(path, den: Denoiser) -> None:
    desc = {
        "layer_sizes": den.mlp.layer_sizes,
        "num_classes": den.num_classes,
        "latent_dim": den.latent_dim,
        "time_embed_dim": den.time_embed_dim,
        "meta": den.meta,
    }
    write_checkpoint(path, "denoiser-v1", desc, den.mlp.params() + [den.label_table])


def load_denoiser(path) -> Denoiser:
    kind, desc, arrays = read_checkpoint(path)
    if kind != "denoiser-v1":
        raise CheckpointFormatError(f"expected denoiser-v1 checkpoint, got {kind!r}")
    table = arrays[-1]
    weights = arrays[:-1][0::2]
    biases = arrays[:-1][1::2]
    return Denoiser(
        mlp=Mlp(list(weights), list(biases)),
        label_table=table,
        num_classes=int(desc["num_classes"]),
        latent_dim=int(desc["latent_dim"]),
        time_embed_dim=int(desc["time_embed_dim"]),
        meta=desc.get("meta", {}),
    )
