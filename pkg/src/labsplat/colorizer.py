"""Per-scene colorizer: frozen conv encoder, trainable adapters and decoder.

The network maps one normalized luminance plane to two bounded chroma
planes. Four stride-2 encoder stages (widths 32/64/128/256) are frozen
after initialization; an adapter sits behind each stage and starts as an
exact identity because its restore projection is zero-initialized. The
decoder mirrors the encoder with bilinear upsampling, skip concatenation
and two-conv blocks, and a pointwise head squashed through a sigmoid.
Fine-tuning touches only adapters, decoder and head, so the encoder
parameter bytes are invariant across training and carried as a sha256
checksum in every checkpoint.

Inputs of arbitrary size >= 32 are edge-padded on the fly to the next
multiple of 16 and the prediction is cropped back, so forward output is
always pixel-aligned with the input.

Checkpoints use a little-endian block container written field by field
(no archive metadata), so saving the same network twice produces
byte-identical files.
"""

from __future__ import annotations

import hashlib
import math
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from . import autodiff as ad
from .augment import AugmentConfig, AugmentSample, sample_training_item
from .autodiff import Tensor

__all__ = [
    "ENCODER_WIDTHS",
    "DECODER_WIDTHS",
    "MIN_INPUT_SIZE",
    "AdapterBlock",
    "DecoderBlock",
    "ColorizerNet",
    "ColorizerTrainConfig",
    "TrainStep",
    "TrainResult",
    "forward",
    "colorizer_loss",
    "train",
    "predict_ab",
    "encoder_checksum",
    "save_checkpoint",
    "load_checkpoint",
    "write_training_log",
]

ENCODER_WIDTHS = (32, 64, 128, 256)
DECODER_WIDTHS = (128, 64, 32, 16)
MIN_INPUT_SIZE = 32

# Input sizes must survive four stride-2 stages and come back.
_DOWN_FACTOR = 2 ** len(ENCODER_WIDTHS)


def _he_kernel(rng: np.random.Generator, out_ch: int, in_ch: int, k: int) -> np.ndarray:
    fan_in = in_ch * k * k
    return rng.standard_normal((out_ch, in_ch, k, k)) * math.sqrt(2.0 / fan_in)


@dataclass
class AdapterBlock:
    """Gated bottleneck adapter; identity as long as `restore` stays zero."""

    depthwise: Tensor
    reduce: Tensor
    restore: Tensor
    gate: Tensor

    @classmethod
    def create(cls, channels: int, rng: np.random.Generator) -> "AdapterBlock":
        hidden = max(channels // 4, 4)
        dw = rng.standard_normal((channels, 1, 3, 3)) * math.sqrt(2.0 / 9.0)
        return cls(
            depthwise=Tensor(dw, requires_grad=True),
            reduce=Tensor(_he_kernel(rng, hidden, channels, 1), requires_grad=True),
            restore=Tensor(np.zeros((channels, hidden, 1, 1)), requires_grad=True),
            gate=Tensor(_he_kernel(rng, channels, channels, 1), requires_grad=True),
        )

    def params(self) -> list[Tensor]:
        return [self.depthwise, self.reduce, self.restore, self.gate]

    def apply(self, x: Tensor) -> Tensor:
        y = ad.depthwise_conv2d(x, self.depthwise, padding=1)
        y = ad.relu(y)
        y = ad.pointwise_conv2d(y, self.reduce)
        y = ad.relu(y)
        y = ad.pointwise_conv2d(y, self.restore)
        pooled = ad.tmean(x, axis=(2, 3), keepdims=True)
        weight = ad.sigmoid(ad.pointwise_conv2d(pooled, self.gate))
        return x + weight * y


@dataclass
class DecoderBlock:
    """Two 3x3 convs with one instance norm; LeakyReLU activations."""

    conv1: Tensor
    conv2: Tensor

    @classmethod
    def create(cls, in_ch: int, out_ch: int, rng: np.random.Generator) -> "DecoderBlock":
        return cls(
            conv1=Tensor(_he_kernel(rng, out_ch, in_ch, 3), requires_grad=True),
            conv2=Tensor(_he_kernel(rng, out_ch, out_ch, 3), requires_grad=True),
        )

    def params(self) -> list[Tensor]:
        return [self.conv1, self.conv2]

    def apply(self, x: Tensor) -> Tensor:
        y = ad.conv2d(x, self.conv1, padding=1)
        y = ad.instance_norm(y)
        y = ad.leaky_relu(y)
        y = ad.conv2d(y, self.conv2, padding=1)
        return ad.leaky_relu(y)


@dataclass
class ColorizerNet:
    encoder: list[Tensor] = field(repr=False)
    adapters: list[AdapterBlock] = field(repr=False)
    decoder: list[DecoderBlock] = field(repr=False)
    head: Tensor = field(repr=False)

    @classmethod
    def create(cls, seed: int = 0, encoder_file: str | Path | None = None) -> "ColorizerNet":
        """Build the network; optionally take encoder weights from a checkpoint."""
        rng = np.random.default_rng(seed)
        encoder = []
        in_ch = 1
        for width in ENCODER_WIDTHS:
            encoder.append(Tensor(_he_kernel(rng, width, in_ch, 3)))
            in_ch = width
        adapters = [AdapterBlock.create(w, rng) for w in ENCODER_WIDTHS]

        decoder = []
        carried = ENCODER_WIDTHS[-1]
        skips = list(ENCODER_WIDTHS[:-1])[::-1] + [1]
        for skip_ch, width in zip(skips, DECODER_WIDTHS):
            decoder.append(DecoderBlock.create(carried + skip_ch, width, rng))
            carried = width
        head = Tensor(_he_kernel(rng, 2, DECODER_WIDTHS[-1], 1), requires_grad=True)

        net = cls(encoder=encoder, adapters=adapters, decoder=decoder, head=head)
        if encoder_file is not None:
            net._load_encoder(encoder_file)
        return net

    def _load_encoder(self, path: str | Path) -> None:
        blocks, _ = _read_blocks(path)
        for i, kern in enumerate(self.encoder):
            name = f"encoder.{i}"
            if name not in blocks:
                raise ValueError(f"encoder weights file is missing block {name!r}")
            arr = blocks[name]
            if arr.shape != kern.data.shape:
                raise ValueError(
                    f"encoder block {name!r} has shape {arr.shape}, expected {kern.data.shape}"
                )
            kern.data = arr.copy()

    def trainable_params(self) -> list[Tensor]:
        params: list[Tensor] = []
        for adapter in self.adapters:
            params.extend(adapter.params())
        for block in self.decoder:
            params.extend(block.params())
        params.append(self.head)
        return params

    def named_params(self) -> list[tuple[str, Tensor]]:
        named: list[tuple[str, Tensor]] = []
        for i, kern in enumerate(self.encoder):
            named.append((f"encoder.{i}", kern))
        for i, adapter in enumerate(self.adapters):
            named.append((f"adapter.{i}.depthwise", adapter.depthwise))
            named.append((f"adapter.{i}.reduce", adapter.reduce))
            named.append((f"adapter.{i}.restore", adapter.restore))
            named.append((f"adapter.{i}.gate", adapter.gate))
        for i, block in enumerate(self.decoder):
            named.append((f"decoder.{i}.conv1", block.conv1))
            named.append((f"decoder.{i}.conv2", block.conv2))
        named.append(("head", self.head))
        return named


def encoder_checksum(net: ColorizerNet) -> str:
    """sha256 over the frozen encoder parameter bytes (order and shape bound)."""
    digest = hashlib.sha256()
    for i, kern in enumerate(net.encoder):
        arr = np.ascontiguousarray(kern.data, dtype="<f8")
        digest.update(f"encoder.{i}:{arr.shape}".encode())
        digest.update(arr.tobytes())
    return digest.hexdigest()


def _pad_amounts(h: int, w: int) -> tuple[int, int]:
    return (-h) % _DOWN_FACTOR, (-w) % _DOWN_FACTOR


def forward(net: ColorizerNet, input_l) -> Tensor:
    """Predict bounded ab' planes for a 1x1xHxW luminance tensor."""
    x = input_l if isinstance(input_l, Tensor) else Tensor(np.asarray(input_l, dtype=np.float64))
    if x.data.ndim != 4 or x.data.shape[:2] != (1, 1):
        raise ValueError(f"forward: expected input of shape (1, 1, H, W), got {x.data.shape}")
    h, w = x.data.shape[2:]
    if h < MIN_INPUT_SIZE or w < MIN_INPUT_SIZE:
        raise ValueError(
            f"forward: input {h}x{w} is undersized, need at least "
            f"{MIN_INPUT_SIZE}x{MIN_INPUT_SIZE}"
        )

    pad_h, pad_w = _pad_amounts(h, w)
    if pad_h or pad_w:
        # Symmetric replicate pad overshoots, then one asymmetric crop
        # leaves the original content top-left aligned.
        p = max(pad_h, pad_w)
        x = ad.replicate_pad2d(x, p)
        x = ad.slice2d(x, p, p + h + pad_h, p, p + w + pad_w)

    feats = x
    skips: list[Tensor] = []
    for kern, adapter in zip(net.encoder, net.adapters):
        feats = ad.conv2d(feats, kern, stride=2, padding=1)
        feats = ad.instance_norm(feats)
        feats = ad.leaky_relu(feats)
        feats = adapter.apply(feats)
        skips.append(feats)

    y = skips[-1]
    laterals = skips[-2::-1] + [x]
    for block, lateral in zip(net.decoder, laterals):
        nh, nw = lateral.data.shape[2:]
        y = ad.bilinear_resize(y, nh, nw)
        y = block.apply(ad.concat([y, lateral], axis=1))
    out = ad.sigmoid(ad.pointwise_conv2d(y, net.head))

    if pad_h or pad_w:
        out = ad.slice2d(out, 0, h, 0, w)
    return out


def colorizer_loss(pred_ab, target_ab) -> Tensor:
    """Mean absolute error between predicted and target chroma planes."""
    return ad.l1_loss(pred_ab, target_ab)


@dataclass(frozen=True)
class ColorizerTrainConfig:
    iterations: int = 4000
    batch_size: int = 1
    crop_size: int = 96
    lr_start: float = 1e-4
    lr_end: float = 1e-6
    seed: int = 0

    def __post_init__(self) -> None:
        if self.iterations < 1:
            raise ValueError("ColorizerTrainConfig: iterations must be >= 1")
        if self.batch_size != 1:
            raise ValueError("ColorizerTrainConfig: batch_size must be 1")
        if self.crop_size < MIN_INPUT_SIZE:
            raise ValueError(f"ColorizerTrainConfig: crop_size must be >= {MIN_INPUT_SIZE}")
        if self.lr_start <= 0 or self.lr_end <= 0:
            raise ValueError("ColorizerTrainConfig: learning rates must be positive")

    @classmethod
    def full_scale(cls, **overrides) -> "ColorizerTrainConfig":
        merged = {"crop_size": 320, **overrides}
        return cls(**merged)


class TrainStep(NamedTuple):
    step: int
    lr: float
    loss: float


@dataclass
class TrainResult:
    steps: list[TrainStep]
    aborted: bool = False

    @property
    def losses(self) -> np.ndarray:
        return np.array([s.loss for s in self.steps])

    def smoothed_loss(self, window: int = 100) -> float:
        if not self.steps:
            raise ValueError("smoothed_loss: no completed steps")
        return float(self.losses[-window:].mean())


def train(
    net: ColorizerNet,
    pool: Sequence[AugmentSample],
    cfg: ColorizerTrainConfig,
    augment_config: AugmentConfig | None = None,
) -> TrainResult:
    """Fine-tune adapters, decoder and head on augmented draws from the pool.

    One sample per iteration, L1 objective, Adam with a cosine learning
    rate from cfg.lr_start to cfg.lr_end. Encoder parameters receive no
    updates. A non-finite value anywhere in the training step (the graph
    raises FloatingPointError eagerly) aborts training and rolls the
    trainable parameters back to the state before the offending update.
    """
    if not pool:
        raise ValueError("train: sample pool is empty")
    if augment_config is None:
        augment_config = AugmentConfig(crop_size=cfg.crop_size)

    rng = np.random.default_rng(cfg.seed)
    trainable = net.trainable_params()
    optimizer = ad.Adam(trainable, lr=cfg.lr_start)
    schedule = ad.CosineSchedule(cfg.lr_start, cfg.lr_end, cfg.iterations)
    frozen_before = encoder_checksum(net)

    snapshot = [p.data.copy() for p in trainable]
    steps: list[TrainStep] = []
    aborted = False
    for it in range(cfg.iterations):
        sample = sample_training_item(pool, augment_config, rng)
        try:
            pred = forward(net, sample.input_l[None, None])
            loss = colorizer_loss(pred, Tensor(sample.target_ab[None]))
            loss_value = float(loss.data)
            if not np.isfinite(loss_value):
                raise FloatingPointError("loss is non-finite")
        except FloatingPointError as exc:
            for p, saved in zip(trainable, snapshot):
                p.data = saved
            aborted = True
            warnings.warn(
                f"non-finite value at iteration {it} ({exc}); "
                "rolled back to the last good parameters",
                RuntimeWarning,
            )
            break
        snapshot = [p.data.copy() for p in trainable]
        lr = ad.cosine_lr(schedule, it)
        optimizer.zero_grad()
        ad.backward(loss)
        optimizer.step(lr=lr)
        steps.append(TrainStep(it, lr, loss_value))

    if encoder_checksum(net) != frozen_before:
        raise AssertionError("frozen encoder parameters changed during training")
    return TrainResult(steps=steps, aborted=aborted)


def predict_ab(net: ColorizerNet, mono_image: np.ndarray) -> np.ndarray:
    """Full-image inference: (H, W) luminance plane to (2, H, W) chroma planes."""
    mono = np.asarray(mono_image, dtype=np.float64)
    if mono.ndim != 2:
        raise ValueError(f"predict_ab: expected a (H, W) plane, got shape {mono.shape}")
    out = forward(net, mono[None, None])
    return out.data[0].copy()


def write_training_log(path: str | Path, result: TrainResult) -> None:
    lines = ["step,lr,loss"]
    lines.extend(f"{s.step},{s.lr!r},{s.loss!r}" for s in result.steps)
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

_MAGIC = b"LABSPLAT-COLORIZER-1\n"


def save_checkpoint(net: ColorizerNet, path: str | Path) -> None:
    """Write all parameters plus the encoder checksum; byte-stable across calls."""
    named = net.named_params()
    chunks = [_MAGIC, struct.pack("<I", len(named))]
    for name, tensor in named:
        arr = np.ascontiguousarray(tensor.data, dtype="<f8")
        encoded = name.encode()
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    chunks.append(encoder_checksum(net).encode())
    Path(path).write_bytes(b"".join(chunks))


def _read_blocks(path: str | Path) -> tuple[dict[str, np.ndarray], str]:
    raw = Path(path).read_bytes()
    if not raw.startswith(_MAGIC):
        raise ValueError(f"{path}: not a colorizer checkpoint")
    off = len(_MAGIC)

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(raw):
            raise ValueError(f"{path}: checkpoint is truncated")
        piece = raw[off : off + n]
        off += n
        return piece

    (count,) = struct.unpack("<I", take(4))
    blocks: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode()
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(take(size * 8), dtype="<f8").reshape(shape)
        blocks[name] = arr.astype(np.float64)
    stored_sum = take(64).decode()
    if off != len(raw):
        raise ValueError(f"{path}: trailing bytes after checkpoint payload")
    return blocks, stored_sum


def load_checkpoint(path: str | Path) -> ColorizerNet:
    blocks, stored_sum = _read_blocks(path)
    net = ColorizerNet.create(seed=0)
    for name, tensor in net.named_params():
        if name not in blocks:
            raise ValueError(f"{path}: missing parameter block {name!r}")
        arr = blocks.pop(name)
        if arr.shape != tensor.data.shape:
            raise ValueError(
                f"{path}: block {name!r} has shape {arr.shape}, expected {tensor.data.shape}"
            )
        tensor.data = arr.copy()
    if blocks:
        raise ValueError(f"{path}: unrecognized parameter blocks {sorted(blocks)}")
    if encoder_checksum(net) != stored_sum:
        raise ValueError(f"{path}: encoder checksum does not match the stored value")
    return net
