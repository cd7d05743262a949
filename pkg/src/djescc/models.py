"""Networks of the encryption + DJSCC pipeline.

All public entry points take and return images as ``(batch, h, w, c)``
tensors in ``[0, 1]``; the modules permute to channels-first internally.

    x --encrypt--> y --encode--> z --AWGN--> zhat --decode--> yhat --decrypt--> xhat
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
from torch import nn
from torch.nn import functional as F

from .channel import awgn_apply, pack_complex, power_normalize, unpack_complex
from .imagedata import normalize

VGG_POOL_INDEX = (6, 13, 23, 33, 43)
CIFAR_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR_STD = (0.2470, 0.2435, 0.2616)


class ConfigurationError(RuntimeError):
    pass


def _nchw(x: torch.Tensor) -> torch.Tensor:
    return x.permute(0, 3, 1, 2)


def _nhwc(x: torch.Tensor) -> torch.Tensor:
    return x.permute(0, 2, 3, 1)


def kaiming_init_(module: nn.Module, slope: float = 0.25) -> nn.Module:
    """Fan-in scaled normal init matched to the PReLU start slope.

    Keeps activation variance roughly constant through the stacked nets;
    torch's default conv init shrinks it layer by layer, which stalls the
    encryptor-codec-decryptor chain at a mean-colour output for many epochs.
    For transposed convs the effective fan-in is ``in_channels * k * k``,
    which torch reports as ``fan_out``.
    """
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            mode = "fan_out" if isinstance(m, nn.ConvTranspose2d) else "fan_in"
            nn.init.kaiming_normal_(m.weight, a=slope, mode=mode, nonlinearity="leaky_relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
    return module


@dataclass
class Architecture:
    """Shape hyper-parameters shared by all four networks."""

    t: int = 16
    channels: int = 3
    encoder_widths: tuple = (16, 32, 32, 32)
    kernel: int = 5
    unet_width: int = 32

    def __post_init__(self):
        self.encoder_widths = tuple(self.encoder_widths)

    @property
    def bandwidth_ratio(self) -> float:
        """k / n = (h/4 * w/4 * t / 2) / (h * w * c)."""
        return self.t / (32 * self.channels)

    def symbols_per_image(self, h: int, w: int) -> int:
        return (h // 4) * (w // 4) * self.t // 2


# ---------------------------------------------------------------------------
# DJSCC encoder / decoder
# ---------------------------------------------------------------------------

class Encoder(nn.Module):
    """Five 5x5 conv + PReLU stages with strides (2, 2, 1, 1, 1)."""

    strides = (2, 2, 1, 1, 1)

    def __init__(self, arch: Architecture):
        super().__init__()
        widths = arch.encoder_widths + (arch.t,)
        layers, cin = [], arch.channels
        for cout, s in zip(widths, self.strides):
            layers += [nn.Conv2d(cin, cout, arch.kernel, stride=s, padding=arch.kernel // 2),
                       nn.PReLU(cout)]
            cin = cout
        self.net = nn.Sequential(*layers)
        self.t = arch.t
        kaiming_init_(self)

    def forward(self, y: torch.Tensor) -> torch.Tensor:
        h, w = y.shape[1:3]
        if h % 4 or w % 4:
            raise ValueError(f"h and w must be divisible by 4, got {(h, w)}")
        feats = self.net(_nchw(y))
        return power_normalize(pack_complex(feats))


class Decoder(nn.Module):
    """Mirror of :class:`Encoder` with transposed convolutions and a sigmoid."""

    strides = (1, 1, 1, 2, 2)

    def __init__(self, arch: Architecture):
        super().__init__()
        widths = tuple(reversed(arch.encoder_widths[:-1])) + (arch.channels,)
        widths = (arch.encoder_widths[-1],) + widths
        p = arch.kernel // 2
        layers, cin = [], arch.t
        for i, (cout, s) in enumerate(zip(widths, self.strides)):
            layers.append(nn.ConvTranspose2d(cin, cout, arch.kernel, stride=s, padding=p,
                                             output_padding=s - 1))
            layers.append(nn.PReLU(cout) if i < 4 else nn.Sigmoid())
            cin = cout
        self.net = nn.Sequential(*layers)
        self.t = arch.t
        kaiming_init_(self)

    def forward(self, zhat: torch.Tensor, target_shape) -> torch.Tensor:
        h, w = int(target_shape[0]), int(target_shape[1])
        if h % 4 or w % 4:
            raise ValueError(f"h and w must be divisible by 4, got {(h, w)}")
        reals = unpack_complex(zhat)
        expected = (h // 4) * (w // 4) * self.t
        if reals.shape[1] != expected:
            raise ValueError(f"{reals.shape[1] // 2} symbols do not match target {(h, w)} "
                             f"with t={self.t}")
        feats = reals.reshape(-1, self.t, h // 4, w // 4)
        return _nhwc(self.net(feats))


# ---------------------------------------------------------------------------
# Encryption / decryption U-Net
# ---------------------------------------------------------------------------

def _double_conv(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(cin, cout, 3, padding=1), nn.PReLU(cout),
                         nn.Conv2d(cout, cout, 3, padding=1), nn.PReLU(cout))


class UNet(nn.Module):
    """Two-level U-Net mapping an image to a same-size image in [0, 1]."""

    def __init__(self, channels: int = 3, width: int = 32):
        super().__init__()
        self.down = _double_conv(channels, width)
        self.bottleneck = _double_conv(width, 2 * width)
        self.up = nn.ConvTranspose2d(2 * width, width, 2, stride=2)
        self.merge = _double_conv(2 * width, width)
        self.head = nn.Conv2d(width, channels, 1)
        kaiming_init_(self)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[1:3]
        if h % 2 or w % 2:
            raise ValueError(f"h and w must be even, got {(h, w)}")
        x = _nchw(x)
        skip = self.down(x)
        mid = self.bottleneck(F.max_pool2d(skip, 2))
        out = self.merge(torch.cat([self.up(mid), skip], dim=1))
        return _nhwc(torch.sigmoid(self.head(out)))


# ---------------------------------------------------------------------------
# Bundle
# ---------------------------------------------------------------------------

class FixedCipher(nn.Module):
    """Non-learned stand-in for the encryption/decryption nets.

    ``shuffle`` applies a keyed permutation over all h*w*c positions of each
    image (its inverse when ``inverse``); ``none`` is the identity, which
    turns the bundle into plain DJSCC.
    """

    def __init__(self, kind: str, seed: int = 0, inverse: bool = False):
        super().__init__()
        if kind not in ("shuffle", "none"):
            raise ValueError(f"unknown cipher {kind!r}")
        self.kind, self.seed, self.inverse = kind, seed, inverse

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.kind == "none":
            return x
        from .attacks import ShuffleKey

        key = ShuffleKey(self.seed, x[0].numel())
        idx = torch.from_numpy(key.inverse if self.inverse else key.perm)
        return x.reshape(len(x), -1)[:, idx].reshape(x.shape)


@dataclass
class Transmission:
    y: torch.Tensor
    z: torch.Tensor
    zhat: torch.Tensor
    yhat: torch.Tensor
    xhat: torch.Tensor


class ModelBundle(nn.Module):
    """Encryption net (mu), DJSCC encoder (theta) and decoder (phi),
    decryption net (nu), plus the loss weights they were trained with."""

    parts = ("encryptor", "encoder", "decoder", "decryptor")

    def __init__(self, arch: Architecture | None = None, lambda_e: float = 0.0,
                 lambda_d: float = 0.0, seed: int = 0, config_hash: str = "",
                 cipher: str = "learned", cipher_seed: int = 0):
        super().__init__()
        self.arch = arch or Architecture()
        self.lambda_e = float(lambda_e)
        self.lambda_d = float(lambda_d)
        self.config_hash = config_hash
        self.cipher = cipher
        self.cipher_seed = cipher_seed
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            if cipher == "learned":
                self.encryptor = UNet(self.arch.channels, self.arch.unet_width)
            else:
                self.encryptor = FixedCipher(cipher, cipher_seed, inverse=False)
            self.encoder = Encoder(self.arch)
            self.decoder = Decoder(self.arch)
            if cipher == "learned":
                self.decryptor = UNet(self.arch.channels, self.arch.unet_width)
            else:
                self.decryptor = FixedCipher(cipher, cipher_seed, inverse=True)

    @property
    def t(self) -> int:
        return self.arch.t

    @property
    def bandwidth_ratio(self) -> float:
        return self.arch.bandwidth_ratio

    def encrypt(self, x):
        return self.encryptor(x)

    def encode(self, y):
        return self.encoder(y)

    def decode(self, zhat, target_shape):
        return self.decoder(zhat, target_shape)

    def decrypt(self, yhat):
        return self.decryptor(yhat)

    def transmit(self, y, sigma2, generator=None):
        """Provider side: encode, pass through AWGN, decode."""
        zhat = awgn_apply(self.encoder(y), sigma2, generator)
        return self.decoder(zhat, y.shape[1:3])

    def forward(self, x, sigma2, generator=None) -> Transmission:
        y = self.encryptor(x)
        z = self.encoder(y)
        zhat = awgn_apply(z, sigma2, generator)
        yhat = self.decoder(zhat, x.shape[1:3])
        return Transmission(y, z, zhat, yhat, self.decryptor(yhat))

    # checkpoints -----------------------------------------------------------

    def header(self) -> dict:
        return {"arch": asdict(self.arch), "lambda_e": self.lambda_e,
                "lambda_d": self.lambda_d, "config_hash": self.config_hash,
                "cipher": self.cipher, "cipher_seed": self.cipher_seed}

    def save(self, path) -> Path:
        state = self.header()
        for name in self.parts:
            state[name] = getattr(self, name).state_dict()
        path = Path(path)
        torch.save(state, path)
        return path

    @classmethod
    def load(cls, path) -> "ModelBundle":
        state = torch.load(path, map_location="cpu", weights_only=False)
        bundle = cls(Architecture(**state["arch"]), state["lambda_e"], state["lambda_d"],
                     config_hash=state.get("config_hash", ""),
                     cipher=state.get("cipher", "learned"), cipher_seed=state.get("cipher_seed", 0))
        for name in cls.parts:
            getattr(bundle, name).load_state_dict(state[name])
        return bundle

    def export_part(self, role: str, path) -> Path:
        """Export a trust-domain sub-bundle.

        ``owner`` holds the encryption net, ``provider`` the DJSCC encoder and
        decoder, ``recipient`` the decryption net.
        """
        members = {"owner": ("encryptor",), "provider": ("encoder", "decoder"),
                   "recipient": ("decryptor",)}[role]
        state = self.header() | {"role": role}
        for name in members:
            state[name] = getattr(self, name).state_dict()
        torch.save(state, path)
        return Path(path)


def load_part(path, role: str | None = None):
    """Load a sub-bundle written by :meth:`ModelBundle.export_part`.

    Returns the encryption net, the decryption net, or a (encoder, decoder)
    pair depending on the stored role.
    """
    state = torch.load(path, map_location="cpu", weights_only=False)
    if role is not None and state.get("role") != role:
        raise ConfigurationError(f"{path} holds a {state.get('role')!r} bundle, not {role!r}")
    arch = Architecture(**state["arch"])
    if state["role"] == "provider":
        enc, dec = Encoder(arch), Decoder(arch)
        enc.load_state_dict(state["encoder"])
        dec.load_state_dict(state["decoder"])
        return enc.eval(), dec.eval()
    owner = state["role"] == "owner"
    if state.get("cipher", "learned") != "learned":
        return FixedCipher(state["cipher"], state["cipher_seed"], inverse=not owner)
    net = UNet(arch.channels, arch.unet_width)
    net.load_state_dict(state["encryptor" if owner else "decryptor"])
    return net.eval()


# ---------------------------------------------------------------------------
# Frozen feature extractor
# ---------------------------------------------------------------------------

def vgg16_bn_trunk(blocks: int = 5, channels: int = 3) -> nn.Sequential:
    """Convolutional part of VGG16-bn, initialized as torchvision does, but
    without building the (large) classifier head."""
    from torchvision.models.vgg import cfgs, make_layers

    features = make_layers(cfgs["D"], batch_norm=True)
    if channels != 3:
        features[0] = nn.Conv2d(channels, 64, 3, padding=1)
    features = features[:VGG_POOL_INDEX[blocks - 1] + 1]
    for m in features.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
            nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
    return features


class FeatureExtractor(nn.Module):
    """Frozen VGG16-bn trunk cut after ``blocks`` convolutional blocks.

    Inputs are ``[0, 1]`` NHWC images, standardized with fixed channel
    statistics before the trunk. Parameters never require gradients and the
    module is pinned to inference mode, but gradients do flow to the input.
    """

    def __init__(self, blocks: int = 3, channels: int = 3, trunk: nn.Module | None = None,
                 mean=CIFAR_MEAN, std=CIFAR_STD):
        super().__init__()
        self.blocks = blocks
        self.trunk = trunk if trunk is not None else vgg16_bn_trunk(blocks, channels)
        c = channels
        self.register_buffer("mean", torch.tensor(mean[:c] if c == 3 else [0.5] * c).view(1, c, 1, 1))
        self.register_buffer("std", torch.tensor(std[:c] if c == 3 else [0.25] * c).view(1, c, 1, 1))
        self.freeze()

    def freeze(self) -> "FeatureExtractor":
        for p in self.parameters():
            p.requires_grad_(False)
        return super().train(False)

    def train(self, mode: bool = True):
        return super().train(False)

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        x = (_nchw(img) - self.mean.to(img.dtype)) / self.std.to(img.dtype)
        return _nhwc(self.trunk(x))

    def feature_shape(self, h: int, w: int) -> tuple[int, int, int]:
        with torch.no_grad():
            out = self(torch.zeros(1, h, w, self.mean.shape[1], dtype=self.mean.dtype))
        return tuple(out.shape[1:])

    @classmethod
    def random(cls, blocks: int = 3, channels: int = 3, seed: int = 0) -> "FeatureExtractor":
        """Randomly initialized frozen trunk (no pretraining)."""
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            return cls(blocks, channels)

    def save(self, path, **meta) -> Path:
        torch.save({"blocks": self.blocks, "channels": int(self.mean.shape[1]),
                    "state": self.state_dict(), "meta": meta}, path)
        return Path(path)

    @classmethod
    def load(cls, path) -> "FeatureExtractor":
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"feature extractor checkpoint {path} not found")
        state = torch.load(path, map_location="cpu", weights_only=False)
        fx = cls(state["blocks"], state["channels"])
        fx.load_state_dict(state["state"])
        fx.meta = state.get("meta", {})
        return fx.freeze()


def state_digest(module: nn.Module) -> str:
    """SHA-256 over a module's parameters and buffers, for freeze checks."""
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


class VGGClassifier(nn.Module):
    """VGG16-bn trunk plus a linear head, CIFAR style (32x32 -> 1x1x512)."""

    def __init__(self, num_classes: int = 10):
        super().__init__()
        self.extractor = FeatureExtractor(5)
        for p in self.extractor.parameters():
            p.requires_grad_(True)
        self.head = nn.Linear(512, num_classes)

    def train(self, mode: bool = True):
        nn.Module.train(self, mode)
        nn.Module.train(self.extractor, mode)
        return self

    def forward(self, img):
        f = self.extractor(img)
        return self.head(f.mean(dim=(1, 2)))


def pretrain_feature_extractor(train_split, seed: int = 0, epochs: int = 30,
                               batch_size: int = 128, lr: float = 1e-3, test_split=None,
                               blocks: int = 3, log=print):
    """Train a VGG16-bn classifier on labelled images; return the frozen trunk
    cut after ``blocks`` blocks and the test accuracy (``None`` without a
    test split)."""
    if train_split.labels is None:
        raise ConfigurationError("pretraining needs a labelled split")
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    model = VGGClassifier(int(train_split.labels.max()) + 1)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, epochs)
    labels = torch.as_tensor(train_split.labels)
    for epoch in range(epochs):
        model.train()
        order = torch.randperm(train_split.count, generator=gen).numpy()
        total = 0.0
        for lo in range(0, len(order), batch_size):
            idx = order[lo:lo + batch_size]
            x = torch.from_numpy(normalize(train_split.raw[idx]))
            if torch.rand((), generator=gen) < 0.5:
                x = x.flip(2)
            loss = F.cross_entropy(model(x), labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
        sched.step()
        log(f"pretrain epoch {epoch}: loss {total / train_split.count:.4f}")
    acc = None
    if test_split is not None:
        acc = classifier_accuracy(model, test_split, batch_size)
        log(f"pretrain test accuracy {acc:.4f}")
    trunk = model.extractor.trunk[:VGG_POOL_INDEX[blocks - 1] + 1]
    fx = FeatureExtractor(blocks, trunk=trunk)
    fx.meta = {"test_accuracy": acc, "seed": seed, "epochs": epochs}
    return fx.freeze(), acc


@torch.no_grad()
def classifier_accuracy(model: nn.Module, split, batch_size: int = 256) -> float:
    model.eval()
    correct = 0
    for lo in range(0, split.count, batch_size):
        x = torch.from_numpy(normalize(split.raw[lo:lo + batch_size]))
        pred = model(x).argmax(1).numpy()
        correct += int((pred == split.labels[lo:lo + batch_size]).sum())
    return correct / split.count

