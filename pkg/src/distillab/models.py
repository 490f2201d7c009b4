"""Small trainable networks with hand-derived gradients.

Two consumers: the detector (classifier + feature extractor used to flag
defective synthetic samples) and an optional autoencoder supplying the
latent space for the diffusion model. Both are tanh MLPs trained with a
hand-rolled Adam; parameters are stored float32, while forward/backward
math runs in float64 (activations and reductions), which keeps training
bit-reproducible per seed and makes finite-difference gradient checks
meaningful.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .data import LabeledDataset, cutmix, sample_mix_ratio
from .numerics import SeededRng, require_finite, softmax

__all__ = [
    "Adam",
    "Autoencoder",
    "CheckpointFormatError",
    "Detector",
    "LatentCodec",
    "Mlp",
    "TrainConfig",
    "decode",
    "encode",
    "extract_features",
    "extract_features_batch",
    "load_autoencoder",
    "load_detector",
    "predict",
    "predict_batch",
    "read_checkpoint",
    "train_autoencoder",
    "train_detector",
    "write_checkpoint",
]


@dataclass
class TrainConfig:
    """Knobs shared by the model trainers.

    ``hidden_sizes`` fixes the MLP widths (feature dimension = last hidden
    width for the detector). ``use_cutmix`` selects CutMix soft labels vs
    plain one-hot targets.
    """

    epochs: int = 40
    batch_size: int = 64
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    cutmix_alpha: float = 1.0
    use_cutmix: bool = True
    hidden_sizes: tuple[int, ...] = (128, 64)
    seed: int | None = None

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0 < self.adam_beta1 < 1 or not 0 < self.adam_beta2 < 1:
            raise ValueError("Adam moment coefficients must lie in (0, 1)")
        if self.cutmix_alpha <= 0:
            raise ValueError("cutmix_alpha must be positive")
        if len(self.hidden_sizes) < 1 or any(h < 1 for h in self.hidden_sizes):
            raise ValueError("hidden_sizes must be positive")


@dataclass
class Mlp:
    """Plain MLP: tanh on every hidden layer, linear output.

    weights[i] has shape (fan_out, fan_in); float32 storage. Forward and
    backward promote to float64.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def layer_sizes(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out


def mlp_init(layer_sizes, rng: SeededRng, dtype=np.float32) -> Mlp:
    """Gaussian init scaled by 1/sqrt(fan_in)."""
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        w = rng.normal((fan_out, fan_in)).astype(np.float64) / np.sqrt(fan_in)
        weights.append(w.astype(dtype))
        biases.append(np.zeros(fan_out, dtype=dtype))
    return Mlp(weights, biases)


def mlp_forward(mlp: Mlp, x: np.ndarray) -> list[np.ndarray]:
    """Return activations [a0=x, a1, ..., aL]; hidden layers tanh, last linear."""
    acts = [np.asarray(x, dtype=np.float64)]
    last = len(mlp.weights) - 1
    for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        z = acts[-1] @ w.T.astype(np.float64) + b.astype(np.float64)
        acts.append(z if i == last else np.tanh(z))
    return acts


def mlp_backward(mlp: Mlp, acts: list[np.ndarray], dout: np.ndarray):
    """Gradients of a scalar loss given d(loss)/d(output).

    Returns (grads, dinput) where grads interleaves [dW1, db1, dW2, ...]
    matching ``Mlp.params()`` order.
    """
    grads: list[np.ndarray] = [None] * (2 * len(mlp.weights))
    delta = np.asarray(dout, dtype=np.float64)
    for i in range(len(mlp.weights) - 1, -1, -1):
        a_prev = acts[i]
        grads[2 * i] = delta.T @ a_prev
        grads[2 * i + 1] = delta.sum(axis=0)
        if i > 0:
            # acts[i] = tanh(z_{i-1}), so tanh' = 1 - acts[i]^2
            delta = (delta @ mlp.weights[i].astype(np.float64)) * (1.0 - acts[i] ** 2)
    dinput = delta @ mlp.weights[0].astype(np.float64)
    return grads, dinput


class Adam:
    """Adaptive-moment optimizer over a flat list of parameter arrays.

    Moments are float64; the update is computed in float64 and written back
    in the parameter's own dtype.
    """

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros(p.shape, dtype=np.float64) for p in params]
        self.v = [np.zeros(p.shape, dtype=np.float64) for p in params]

    def step(self, params, grads):
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            g = np.asarray(g, dtype=np.float64)
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            upd = (self.lr * (m / b1c)) / (np.sqrt(v / b2c) + self.eps)
            p[...] = (p.astype(np.float64) - upd).astype(p.dtype)


# --- detector ----------------------------------------------------------------


@dataclass
class Detector:
    """MLP classifier over flattened images; features = penultimate activation."""

    mlp: Mlp
    num_classes: int
    image_shape: tuple[int, int, int]
    meta: dict = field(default_factory=dict)

    @property
    def feature_dim(self) -> int:
        return self.mlp.weights[-1].shape[1]


def _flatten_images(images: np.ndarray, image_shape) -> np.ndarray:
    images = np.asarray(images)
    single = images.ndim == 3
    if single:
        images = images[None]
    if tuple(images.shape[1:]) != tuple(image_shape):
        raise ValueError(
            f"image shape {tuple(images.shape[1:])} does not match model shape {tuple(image_shape)}"
        )
    require_finite("images", images)
    return images.reshape(len(images), -1), single


def _soft_cross_entropy(logits: np.ndarray, soft_targets: np.ndarray):
    """Mean soft-label cross entropy and d(loss)/d(logits)."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = float(-(soft_targets * logp).sum(axis=1).mean())
    probs = np.exp(logp)
    dlogits = (probs - soft_targets) / len(logits)
    return loss, dlogits


def train_detector(train: LabeledDataset, cfg: TrainConfig, rng: SeededRng) -> Detector:
    """Train the anomaly detector with per-sample CutMix soft labels.

    Each minibatch sample gets a fresh mixing ratio and a partner drawn
    uniformly from the whole training set. Deterministic per (cfg, rng).
    """
    if len(train) == 0:
        raise ValueError("training set is empty")
    if train.num_classes < 2:
        raise ValueError("training requires at least 2 classes")
    din = int(np.prod(train.image_shape))
    sizes = [din, *cfg.hidden_sizes, train.num_classes]
    mlp = mlp_init(sizes, rng.spawn(0))
    opt = Adam(mlp.params(), cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    loop = rng.spawn(1)
    n = len(train)
    losses = []
    for _epoch in range(cfg.epochs):
        order = loop.permutation(n)
        epoch_losses = []
        for s in range(0, n, cfg.batch_size):
            idx = order[s : s + cfg.batch_size]
            xb = np.empty((len(idx), din), dtype=np.float64)
            yb = np.zeros((len(idx), train.num_classes), dtype=np.float64)
            for row, i in enumerate(idx):
                if cfg.use_cutmix:
                    lam = sample_mix_ratio(cfg.cutmix_alpha, loop)
                    j = loop.integers(n)
                    mixed = cutmix(
                        train.images[i],
                        int(train.labels[i]),
                        train.images[j],
                        int(train.labels[j]),
                        lam,
                        train.num_classes,
                        rng=loop,
                    )
                    xb[row] = mixed.image.reshape(-1)
                    yb[row] = mixed.soft_label
                else:
                    xb[row] = train.images[i].reshape(-1)
                    yb[row, int(train.labels[i])] = 1.0
            acts = mlp_forward(mlp, xb)
            loss, dlogits = _soft_cross_entropy(acts[-1], yb)
            grads, _ = mlp_backward(mlp, acts, dlogits)
            opt.step(mlp.params(), grads)
            epoch_losses.append(loss)
        losses.append(float(np.mean(epoch_losses)))
    return Detector(
        mlp=mlp,
        num_classes=train.num_classes,
        image_shape=train.image_shape,
        meta={
            "epochs": cfg.epochs,
            "final_loss": losses[-1],
            "loss_history": losses,
            "seed": rng.seed,
            "use_cutmix": cfg.use_cutmix,
        },
    )


def predict_batch(det: Detector, images: np.ndarray):
    """(labels, confidences, logits) for a batch; argmax ties break low."""
    x, _ = _flatten_images(images, det.image_shape)
    logits = mlp_forward(det.mlp, x)[-1]
    labels = logits.argmax(axis=1)
    confs = np.array([softmax(row).max() for row in logits])
    return labels.astype(np.int64), confs, logits


def predict(det: Detector, image: np.ndarray):
    """Predicted label, max-softmax confidence, and raw logits for one image."""
    labels, confs, logits = predict_batch(det, np.asarray(image)[None])
    return int(labels[0]), float(confs[0]), logits[0]


def extract_features_batch(det: Detector, images: np.ndarray) -> np.ndarray:
    """Penultimate-layer activations, float32, shape (N, feature_dim)."""
    x, _ = _flatten_images(images, det.image_shape)
    return mlp_forward(det.mlp, x)[-2].astype(np.float32)


def extract_features(det: Detector, image: np.ndarray) -> np.ndarray:
    return extract_features_batch(det, np.asarray(image)[None])[0]


# --- autoencoder -------------------------------------------------------------


@dataclass
class Autoencoder:
    """Pixel-space <-> latent-space map for the diffusion model.

    mode "identity": encode flattens, decode reshapes (no parameters,
    latent_dim = C*H*W). mode "mlp": tanh encoder (bounded codes in (-1,1))
    and a linear-output decoder trained on mean squared reconstruction.
    """

    mode: str
    image_shape: tuple[int, int, int]
    latent_dim: int
    enc: Mlp | None = None
    dec: Mlp | None = None
    meta: dict = field(default_factory=dict)


def train_autoencoder(
    train: LabeledDataset,
    cfg: TrainConfig,
    rng: SeededRng,
    *,
    latent_dim: int = 32,
    hidden_size: int = 128,
    mode: str = "mlp",
) -> Autoencoder:
    """Train (or construct, for identity mode) the latent-space autoencoder."""
    if mode not in ("identity", "mlp"):
        raise ValueError(f"unknown autoencoder mode {mode!r}")
    if len(train) == 0:
        raise ValueError("training set is empty")
    din = int(np.prod(train.image_shape))
    if mode == "identity":
        return Autoencoder(
            mode="identity",
            image_shape=train.image_shape,
            latent_dim=din,
            meta={"reconstruction_mse": 0.0},
        )
    enc = mlp_init([din, hidden_size, latent_dim], rng.spawn(0))
    dec = mlp_init([latent_dim, hidden_size, din], rng.spawn(1))
    params = enc.params() + dec.params()
    opt = Adam(params, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    loop = rng.spawn(2)
    n = len(train)
    flat = train.images.reshape(n, din).astype(np.float64)
    losses = []
    for _epoch in range(cfg.epochs):
        order = loop.permutation(n)
        epoch_losses = []
        for s in range(0, n, cfg.batch_size):
            idx = order[s : s + cfg.batch_size]
            xb = flat[idx]
            loss, grads = _ae_loss_and_grads(enc, dec, xb)
            opt.step(params, grads)
            epoch_losses.append(loss)
        losses.append(float(np.mean(epoch_losses)))
    ae = Autoencoder(
        mode="mlp",
        image_shape=train.image_shape,
        latent_dim=latent_dim,
        enc=enc,
        dec=dec,
        meta={"epochs": cfg.epochs, "loss_history": losses, "seed": rng.seed},
    )
    recon = decode(ae, encode(ae, train.images))
    ae.meta["reconstruction_mse"] = float(
        np.mean((recon.astype(np.float64) - train.images.astype(np.float64)) ** 2)
    )
    return ae


def _ae_loss_and_grads(enc: Mlp, dec: Mlp, xb: np.ndarray):
    """Mean per-pixel squared error through tanh-bottleneck encoder/decoder."""
    enc_acts = mlp_forward(enc, xb)
    code = np.tanh(enc_acts[-1])  # bounded latent
    dec_acts = mlp_forward(dec, code)
    recon = dec_acts[-1]
    diff = recon - xb
    loss = float(np.mean(diff**2))
    dout = 2.0 * diff / diff.size
    dec_grads, dcode = mlp_backward(dec, dec_acts, dout)
    denc_out = dcode * (1.0 - code**2)
    enc_grads, _ = mlp_backward(enc, enc_acts, denc_out)
    return loss, enc_grads + dec_grads


def encode(ae: Autoencoder, images: np.ndarray) -> np.ndarray:
    """Image(s) -> latent code(s), float32. Identity mode flattens."""
    x, single = _flatten_images(images, ae.image_shape)
    if ae.mode == "identity":
        z = x.astype(np.float32)
    else:
        z = np.tanh(mlp_forward(ae.enc, x)[-1]).astype(np.float32)
    return z[0] if single else z


def decode(ae: Autoencoder, latents: np.ndarray) -> np.ndarray:
    """Latent code(s) -> image(s), float32. Identity mode reshapes.

    Output is not clipped; materialization to pixel range is the caller's
    choice (see LatentCodec).
    """
    z = np.asarray(latents)
    single = z.ndim == 1
    if single:
        z = z[None]
    if z.shape[1] != ae.latent_dim:
        raise ValueError(f"latent dim {z.shape[1]} != {ae.latent_dim}")
    if ae.mode == "identity":
        imgs = z.reshape(len(z), *ae.image_shape).astype(np.float32)
    else:
        imgs = (
            mlp_forward(ae.dec, z.astype(np.float64))[-1]
            .reshape(len(z), *ae.image_shape)
            .astype(np.float32)
        )
    return imgs[0] if single else imgs


@dataclass(frozen=True)
class LatentCodec:
    """Pipeline-facing latent interface around an Autoencoder.

    The diffusion model wants roughly zero-centered, unit-scale latents, so
    the identity codec maps pixels [0,1] -> [-1,1] on encode and back
    (clipped) on decode; the mlp codec passes tanh-bounded codes through
    unchanged and clips decoded pixels to [0,1].
    """

    ae: Autoencoder
    latent_dim: int

    @classmethod
    def from_autoencoder(cls, ae: Autoencoder) -> "LatentCodec":
        return cls(ae=ae, latent_dim=ae.latent_dim)

    def encode(self, images: np.ndarray) -> np.ndarray:
        z = encode(self.ae, images)
        if self.ae.mode == "identity":
            z = (2.0 * z - 1.0).astype(np.float32)
        return z

    def decode(self, latents: np.ndarray) -> np.ndarray:
        z = np.asarray(latents, dtype=np.float32)
        if self.ae.mode == "identity":
            z = ((z + 1.0) / 2.0).astype(np.float32)
        imgs = decode(self.ae, z)
        return np.clip(imgs, 0.0, 1.0)


# --- checkpoints -------------------------------------------------------------
#
# magic "MDLC" | u16 version | u32 desc_len | UTF-8 JSON descriptor
# | u32 num_arrays | per array: u32 ndim + u32 dims... | float32 LE blob

_CKPT_MAGIC = b"MDLC"
_CKPT_VERSION = 1


class CheckpointFormatError(ValueError):
    """A model checkpoint failed validation."""


def write_checkpoint(path, kind: str, desc: dict, params: list[np.ndarray]) -> None:
    desc = dict(desc, kind=kind)
    desc_bytes = json.dumps(desc, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<H", _CKPT_VERSION))
        f.write(struct.pack("<I", len(desc_bytes)))
        f.write(desc_bytes)
        f.write(struct.pack("<I", len(params)))
        for p in params:
            f.write(struct.pack("<I", p.ndim))
            f.write(struct.pack(f"<{p.ndim}I", *p.shape))
        for p in params:
            f.write(np.ascontiguousarray(p, dtype="<f4").tobytes())


def read_checkpoint(path):
    """Returns (kind, descriptor dict, list of float32 arrays); bit-exact."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _CKPT_MAGIC:
            raise CheckpointFormatError(f"bad magic {magic!r}, expected {_CKPT_MAGIC!r}")
        (version,) = struct.unpack("<H", f.read(2))
        if version != _CKPT_VERSION:
            raise CheckpointFormatError(f"unsupported checkpoint version {version}")
        (dlen,) = struct.unpack("<I", f.read(4))
        desc = json.loads(f.read(dlen).decode("utf-8"))
        (count,) = struct.unpack("<I", f.read(4))
        shapes = []
        for _ in range(count):
            (ndim,) = struct.unpack("<I", f.read(4))
            shapes.append(struct.unpack(f"<{ndim}I", f.read(4 * ndim)))
        arrays = []
        for shape in shapes:
            size = int(np.prod(shape)) if shape else 1
            buf = f.read(4 * size)
            if len(buf) != 4 * size:
                raise CheckpointFormatError("truncated parameter blob")
            arrays.append(np.frombuffer(buf, dtype="<f4").reshape(shape).copy())
    kind = desc.pop("kind", None)
    if kind is None:
        raise CheckpointFormatError("descriptor missing kind")
    return kind, desc, arrays


def _mlp_from_arrays(arrays: list[np.ndarray]) -> Mlp:
    weights = arrays[0::2]
    biases = arrays[1::2]
    return Mlp(list(weights), list(biases))


def save_detector(path, det: Detector) -> None:
    desc = {
        "layer_sizes": det.mlp.layer_sizes,
        "num_classes": det.num_classes,
        "image_shape": list(det.image_shape),
        "meta": det.meta,
    }
    write_checkpoint(path, "detector", desc, det.mlp.params())


def load_detector(path) -> Detector:
    kind, desc, arrays = read_checkpoint(path)
    if kind != "detector":
        raise CheckpointFormatError(f"expected detector checkpoint, got {kind!r}")
    return Detector(
        mlp=_mlp_from_arrays(arrays),
        num_classes=int(desc["num_classes"]),
        image_shape=tuple(desc["image_shape"]),
        meta=desc.get("meta", {}),
    )


def save_autoencoder(path, ae: Autoencoder) -> None:
    desc = {
        "mode": ae.mode,
        "image_shape": list(ae.image_shape),
        "latent_dim": ae.latent_dim,
        "enc_layers": ae.enc.layer_sizes if ae.enc else None,
        "meta": ae.meta,
    }
    params = (ae.enc.params() + ae.dec.params()) if ae.mode == "mlp" else []
    write_checkpoint(path, "autoencoder", desc, params)


def load_autoencoder(path) -> Autoencoder:
    kind, desc, arrays = read_checkpoint(path)
    if kind != "autoencoder":
        raise CheckpointFormatError(f"expected autoencoder checkpoint, got {kind!r}")
    mode = desc["mode"]
    enc = dec = None
    if mode == "mlp":
        n_enc = 2 * (len(desc["enc_layers"]) - 1)
        enc = _mlp_from_arrays(arrays[:n_enc])
        dec = _mlp_from_arrays(arrays[n_enc:])
    return Autoencoder(
        mode=mode,
        image_shape=tuple(desc["image_shape"]),
        latent_dim=int(desc["latent_dim"]),
        enc=enc,
        dec=dec,
        meta=desc.get("meta", {}),
    )
