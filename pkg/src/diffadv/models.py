"""Trainable building blocks: noise predictors, autoencoder, classifiers, discriminator.

All nets are small, fully convolutional where it matters (so the same backbone
serves 8x8 shape latents and 4x4 mixture latents), use SiLU activations (smooth,
so finite-difference gradient checks hold), and run in float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .schedule import MODEL_DTYPE, Condition, NoiseSchedule, check_finite


class TrainingGateError(RuntimeError):
    """A post-training quality gate was not met."""


class TrainingDiverged(RuntimeError):
    """Training hit a non-finite loss; carries the last finite state."""

    def __init__(self, msg: str, state_dict: dict):
        super().__init__(msg)
        self.state_dict = state_dict


def _timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal features of t (expected in [0, ~1])."""
    half = dim // 2
    freqs = torch.exp(torch.linspace(0.0, math.log(200.0), half, dtype=t.dtype))
    args = t[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class EpsNet(nn.Module):
    """Noise predictor eps(z_t, t, c) on (B, 1, H, W) latents.

    Conditioning: class labels via an embedding table (last slot = null token),
    or a fixed embedding vector projected into the same space.
    """

    def __init__(self, channels: int = 48, cond_dim: int = 16, num_classes: int = 4, emb_dim: int = 16):
        super().__init__()
        self.cond_dim = cond_dim
        self.emb_dim = emb_dim
        self.num_classes = num_classes
        self.t_mlp = nn.Sequential(nn.Linear(emb_dim, cond_dim), nn.SiLU(), nn.Linear(cond_dim, cond_dim))
        self.class_emb = nn.Embedding(num_classes + 1, cond_dim)  # last index = null
        self.vec_proj = nn.Linear(cond_dim, cond_dim)
        self.conv_in = nn.Conv2d(1, channels, 3, padding=1)
        self.cond_proj1 = nn.Linear(cond_dim, channels)
        self.conv_mid1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.cond_proj2 = nn.Linear(cond_dim, channels)
        self.conv_mid2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv_out = nn.Conv2d(channels, 1, 3, padding=1)
        self.act = nn.SiLU()
        self.to(MODEL_DTYPE)

    def _cond_vec(self, condition: Condition, batch: int) -> torch.Tensor:
        if condition.is_null:
            idx = torch.full((batch,), self.num_classes, dtype=torch.long)
            return self.class_emb(idx)
        if condition.kind == "class_label":
            if not 0 <= condition.label < self.num_classes:
                raise ValueError(f"label {condition.label} outside [0, {self.num_classes})")
            idx = torch.full((batch,), condition.label, dtype=torch.long)
            return self.class_emb(idx)
        vec = condition.embedding.to(MODEL_DTYPE)
        if vec.shape != (self.cond_dim,):
            raise ValueError(f"embedding payload must have shape ({self.cond_dim},)")
        return self.vec_proj(vec)[None, :].expand(batch, -1)

    def forward_batched(self, z: torch.Tensor, t: torch.Tensor, cond_idx: torch.Tensor) -> torch.Tensor:
        """Training path: per-sample times and per-sample class indices."""
        tv = self.t_mlp(_timestep_embedding(t.to(z.dtype), self.emb_dim))
        cv = self.class_emb(cond_idx)
        c = tv + cv
        h = self.act(self.conv_in(z) + self.cond_proj1(c)[:, :, None, None])
        h = self.act(self.conv_mid1(h) + self.cond_proj2(c)[:, :, None, None])
        h = self.act(self.conv_mid2(h))
        return self.conv_out(h)

    def forward(self, z: torch.Tensor, t: float, condition: Condition) -> torch.Tensor:
        if z.dim() != 4 or z.shape[1] != 1:
            raise ValueError("expected (B, 1, H, W) latents")
        b = z.shape[0]
        tb = torch.full((b,), float(t), dtype=z.dtype)
        tv = self.t_mlp(_timestep_embedding(tb, self.emb_dim))
        cv = self._cond_vec(condition, b)
        c = tv + cv
        h = self.act(self.conv_in(z) + self.cond_proj1(c)[:, :, None, None])
        h = self.act(self.conv_mid1(h) + self.cond_proj2(c)[:, :, None, None])
        h = self.act(self.conv_mid2(h))
        return self.conv_out(h)


class Discriminator(nn.Module):
    """Real/fake scorer on latents with a class-projection head.

    Global pooling keeps it size-agnostic; the projection term scores samples
    against their own class so adversarial sharpening stays class-consistent.
    The last embedding slot is the unconditional token.
    """

    def __init__(self, channels: int = 32, num_classes: int = 4):
        super().__init__()
        self.num_classes = num_classes
        self.net = nn.Sequential(
            nn.Conv2d(1, channels, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(channels, channels, 3, padding=1, stride=2),
            nn.SiLU(),
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.SiLU(),
        )
        self.head = nn.Linear(channels, 1)
        self.proj = nn.Embedding(num_classes + 1, channels)
        self.to(MODEL_DTYPE)

    def forward(self, z: torch.Tensor, cond_idx: torch.Tensor | None = None) -> torch.Tensor:
        h = self.net(z).mean(dim=(2, 3))
        score = self.head(h).squeeze(1)
        if cond_idx is None:
            cond_idx = torch.full((len(z),), self.num_classes, dtype=torch.long)
        return score + (self.proj(cond_idx) * h).sum(dim=1)


class ConvEncoder(nn.Module):
    def __init__(self, channels: int = 16):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(1, channels, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(channels, channels * 2, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(channels * 2, 1, 3, padding=1),
        )
        self.to(MODEL_DTYPE)

    def forward(self, x):
        return self.net(x)


class ConvDecoder(nn.Module):
    def __init__(self, channels: int = 16):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(1, channels * 2, 3, padding=1),
            nn.SiLU(),
            nn.ConvTranspose2d(channels * 2, channels * 2, 4, stride=2, padding=1),
            nn.SiLU(),
            nn.ConvTranspose2d(channels * 2, channels, 4, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(channels, 1, 3, padding=1),
        )
        self.to(MODEL_DTYPE)

    def forward(self, z):
        return torch.sigmoid(self.net(z))


@dataclass
class Autoencoder:
    """Encoder/decoder pair; ``identity=True`` short-circuits both directions.

    ``latent_scale`` rescales encoder outputs so latents sit at a convenient
    magnitude for diffusion (fit after training, undone before decoding).
    """

    encoder: nn.Module | None = None
    decoder: nn.Module | None = None
    identity: bool = False
    latent_hw: int = 8
    latent_scale: float = 1.0

    @staticmethod
    def identity_mode() -> "Autoencoder":
        return Autoencoder(identity=True, latent_hw=32)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        check_finite("image", x)
        if self.identity:
            return x
        return self.encoder(x) * self.latent_scale

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        check_finite("latent", z)
        if self.identity:
            return z
        return self.decoder(z / self.latent_scale)

    def eval_(self):
        for m in (self.encoder, self.decoder):
            if m is not None:
                m.eval()
        return self


class ConvClassifierA(nn.Module):
    def __init__(self, num_classes: int = 4):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(1, 16, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(16, 32, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(32, 64, 3, stride=2, padding=1),
            nn.SiLU(),
        )
        self.head = nn.Linear(64, num_classes)
        self.to(MODEL_DTYPE)

    def penultimate(self, x):
        return self.features(x).mean(dim=(2, 3))

    def forward(self, x):
        return self.head(self.penultimate(x))


class ConvClassifierB(nn.Module):
    """Deeper sibling of ConvClassifierA."""

    def __init__(self, num_classes: int = 4):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(1, 12, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(12, 24, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(24, 48, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(48, 48, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(48, 64, 3, stride=2, padding=1),
            nn.SiLU(),
        )
        self.head = nn.Sequential(nn.Linear(64, 32), nn.SiLU(), nn.Linear(32, num_classes))
        self.to(MODEL_DTYPE)

    def penultimate(self, x):
        return self.features(x).mean(dim=(2, 3))

    def forward(self, x):
        return self.head(self.penultimate(x))


class MlpClassifier(nn.Module):
    def __init__(self, num_classes: int = 4, image_size: int = 32):
        super().__init__()
        d = image_size * image_size
        self.body = nn.Sequential(nn.Flatten(), nn.Linear(d, 128), nn.SiLU(), nn.Linear(128, 64), nn.SiLU())
        self.head = nn.Linear(64, num_classes)
        self.to(MODEL_DTYPE)

    def penultimate(self, x):
        return self.body(x)

    def forward(self, x):
        return self.head(self.penultimate(x))


CLASSIFIER_ARCHS = {"cnn_a": ConvClassifierA, "cnn_b": ConvClassifierB, "mlp": MlpClassifier}


@dataclass(frozen=True)
class ClassifierSpec:
    arch: str = "cnn_a"
    num_classes: int = 4
    epochs: int = 12
    batch_size: int = 128
    lr: float = 3e-3
    min_test_accuracy: float = 0.90
    seed: int = 0

    def __post_init__(self):
        if self.arch not in CLASSIFIER_ARCHS:
            raise ValueError(f"unknown classifier arch {self.arch!r}; options: {sorted(CLASSIFIER_ARCHS)}")


def psnr_db(x: torch.Tensor, y: torch.Tensor) -> float:
    mse = torch.mean((x - y) ** 2).item()
    if mse <= 1e-20:
        return 100.0
    return min(10.0 * math.log10(1.0 / mse), 100.0)


def _batches(n: int, batch_size: int, gen: torch.Generator):
    perm = torch.randperm(n, generator=gen)
    for i in range(0, n, batch_size):
        yield perm[i : i + batch_size]


def train_autoencoder(
    images: torch.Tensor,
    epochs: int = 55,
    batch_size: int = 128,
    lr: float = 3e-3,
    seed: int = 0,
    holdout: torch.Tensor | None = None,
    min_psnr: float = 25.0,
    target_latent_std: float = 0.35,
) -> Autoencoder:
    """Train the conv autoencoder; the held-out round-trip must reach ``min_psnr``."""
    if len(images) == 0:
        raise ValueError("empty dataset")
    torch.manual_seed(seed)
    ae = Autoencoder(ConvEncoder(), ConvDecoder(), latent_hw=images.shape[-1] // 4)
    params = list(ae.encoder.parameters()) + list(ae.decoder.parameters())
    opt = torch.optim.Adam(params, lr=lr)
    gen = torch.Generator().manual_seed(seed)
    last_finite = None
    for epoch in range(epochs):
        if epoch == int(0.8 * epochs):
            for g in opt.param_groups:
                g["lr"] = lr * 0.2
        for idx in _batches(len(images), batch_size, gen):
            x = images[idx]
            loss = torch.mean((ae.decode(ae.encode(x)) - x) ** 2)
            if not torch.isfinite(loss):
                raise TrainingDiverged("autoencoder loss went non-finite", last_finite or {})
            opt.zero_grad()
            loss.backward()
            opt.step()
        last_finite = {k: v.detach().clone() for k, v in ae.encoder.state_dict().items()}
    ae.eval_()
    ref = holdout if holdout is not None else images
    with torch.no_grad():
        raw_std = ae.encoder(images).std().item()
    ae.latent_scale = target_latent_std / max(raw_std, 1e-8)
    with torch.no_grad():
        got = psnr_db(ae.decode(ae.encode(ref)), ref)
    if got < min_psnr:
        raise TrainingGateError(f"autoencoder round-trip PSNR {got:.2f} dB < {min_psnr} dB gate")
    return ae


def train_classifier(
    spec: ClassifierSpec,
    train: tuple[torch.Tensor, torch.Tensor],
    test: tuple[torch.Tensor, torch.Tensor],
    noise_aug: float = 0.02,
    extra: tuple[torch.Tensor, torch.Tensor] | None = None,
) -> nn.Module:
    """Supervised training with the clean-accuracy gate enforced on the test split.

    ``extra`` mixes additional labeled images into the training stream (e.g.
    autoencoder round-trips, so purification-defended classification stays
    usable); the accuracy gate is always measured on the clean test split.
    """
    x, y = train
    if len(x) == 0:
        raise ValueError("empty dataset")
    if extra is not None:
        x = torch.cat([x, extra[0]])
        y = torch.cat([y, extra[1]])
    if y.min() < 0 or y.max() >= spec.num_classes:
        raise ValueError(f"labels outside [0, {spec.num_classes})")
    torch.manual_seed(spec.seed)
    net = CLASSIFIER_ARCHS[spec.arch](num_classes=spec.num_classes)
    opt = torch.optim.Adam(net.parameters(), lr=spec.lr)
    loss_fn = nn.CrossEntropyLoss()
    gen = torch.Generator().manual_seed(spec.seed)
    for epoch in range(spec.epochs):
        if epoch == int(0.75 * spec.epochs):
            for g in opt.param_groups:
                g["lr"] = spec.lr * 0.2
        for idx in _batches(len(x), spec.batch_size, gen):
            xb = x[idx]
            if noise_aug > 0:
                xb = torch.clamp(xb + noise_aug * torch.randn(xb.shape, generator=gen, dtype=xb.dtype), 0, 1)
            loss = loss_fn(net(xb), y[idx])
            if not torch.isfinite(loss):
                raise TrainingDiverged("classifier loss went non-finite", net.state_dict())
            opt.zero_grad()
            loss.backward()
            opt.step()
    net.eval()
    acc = classifier_accuracy(net, *test)
    if acc < spec.min_test_accuracy:
        raise TrainingGateError(
            f"classifier {spec.arch!r} test accuracy {acc:.3f} below the {spec.min_test_accuracy:.2f} gate"
        )
    return net


@torch.no_grad()
def classifier_accuracy(net: nn.Module, x: torch.Tensor, y: torch.Tensor) -> float:
    return (net(x).argmax(dim=1) == y).to(MODEL_DTYPE).mean().item()
