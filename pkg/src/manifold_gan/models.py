"""Generator and K-class discriminator builders, latent sampling, checkpoints.

The discriminator emits K real-class logits; the logit of the extra
"generated" class is pinned at zero and never materialised.  Its feature
map ``h(x)`` is the output of the layer tagged by ``feature_layer`` (the
global pool after the NiN stack for the convolutional profiles).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .autodiff import Tensor, reshape
from .errors import ContractViolation, FormatError
from .layers import LayerSpec, Network

LATENT_DIM = 100


def _scale(channels: int, width: float) -> int:
    return max(1, int(round(channels * width)))


@dataclass
class DiscriminatorConfig:
    layers: list
    image_shape: tuple
    num_classes: int = 10
    feature_layer: int = -1
    width: float = 1.0

    def __post_init__(self):
        self.layers = [l if isinstance(l, LayerSpec) else LayerSpec.from_dict(l) for l in self.layers]
        self.image_shape = tuple(int(s) for s in self.image_shape)
        last = self.layers[-1]
        if last.kind != "dense" or last.units != self.num_classes:
            raise ContractViolation(f"discriminator must end in a dense layer with {self.num_classes} outputs")
        if self.feature_layer < 0:
            self.feature_layer = _default_feature_layer(self.layers)
        if not 0 <= self.feature_layer < len(self.layers) - 1:
            raise ContractViolation(f"feature layer {self.feature_layer} does not resolve to a hidden layer")

    def to_dict(self) -> dict:
        return {"layers": [l.to_dict() for l in self.layers], "image_shape": list(self.image_shape),
                "num_classes": self.num_classes, "feature_layer": self.feature_layer,
                "width": self.width}

    @classmethod
    def from_dict(cls, data: Mapping) -> "DiscriminatorConfig":
        return cls(**dict(data))


@dataclass
class GeneratorConfig:
    layers: list
    image_shape: tuple
    latent_dim: int = LATENT_DIM
    width: float = 1.0

    def __post_init__(self):
        self.layers = [l if isinstance(l, LayerSpec) else LayerSpec.from_dict(l) for l in self.layers]
        self.image_shape = tuple(int(s) for s in self.image_shape)
        if self.latent_dim < 1:
            raise ContractViolation("latent dimension must be >= 1")

    def to_dict(self) -> dict:
        return {"layers": [l.to_dict() for l in self.layers], "image_shape": list(self.image_shape),
                "latent_dim": self.latent_dim, "width": self.width}

    @classmethod
    def from_dict(cls, data: Mapping) -> "GeneratorConfig":
        return cls(**dict(data))


def _default_feature_layer(layers: Sequence[LayerSpec]) -> int:
    pools = [i for i, l in enumerate(layers) if l.kind == "global-avg-pool"]
    if len(pools) == 1:
        return pools[0]
    if pools:
        raise ContractViolation("feature layer is ambiguous: several global pools")
    # MLP profiles: the activation feeding the output layer
    return len(layers) - 2


# -- architecture profiles ---------------------------------------------------

def conv_discriminator(base: int, top: int, width: float = 1.0, num_classes: int = 10,
                       image_shape=(3, 32, 32), slope: float = 0.2) -> DiscriminatorConfig:
    """Nine-conv weight-normed discriminator with dropout 0.2/0.5/0.5."""
    c1, c2 = _scale(base, width), _scale(top, width)
    lrelu = LayerSpec("leaky-relu", slope=slope)

    def conv(c, stride=1, pad=1, kernel=3):
        return [LayerSpec("conv", units=c, kernel=kernel, stride=stride, pad=pad, weight_norm=True), lrelu]

    layers = [LayerSpec("dropout", p=0.2)]
    layers += conv(c1) + conv(c1) + conv(c1, stride=2)
    layers += [LayerSpec("dropout", p=0.5)]
    layers += conv(c2) + conv(c2) + conv(c2, stride=2)
    layers += [LayerSpec("dropout", p=0.5)]
    layers += conv(c2, pad=0)
    layers += [LayerSpec("nin", units=c2, weight_norm=True), lrelu]
    layers += [LayerSpec("nin", units=c2, weight_norm=True), lrelu]
    layers += [LayerSpec("global-avg-pool"),
               LayerSpec("dense", units=num_classes, weight_norm=True)]
    return DiscriminatorConfig(layers, image_shape, num_classes, width=width)


def conv_large_discriminator(width: float = 1.0, num_classes: int = 10,
                             image_shape=(3, 32, 32)) -> DiscriminatorConfig:
    return conv_discriminator(96, 192, width, num_classes, image_shape)


def conv_small_discriminator(width: float = 1.0, num_classes: int = 10,
                             image_shape=(3, 32, 32)) -> DiscriminatorConfig:
    return conv_discriminator(64, 128, width, num_classes, image_shape)


def dcgan_generator(width: float = 1.0, latent_dim: int = LATENT_DIM, image_shape=(3, 32, 32),
                    bn_weight_norm: bool = False) -> GeneratorConfig:
    """Dense 4x4x512 followed by three stride-2 5x5 transposed convolutions.

    Each transposed convolution uses pad=2, output_pad=1 so extents double
    exactly (4 -> 8 -> 16 -> 32 for 32x32 images).
    """
    c, h, w = image_shape
    if h % 8 or w % 8:
        raise ContractViolation(f"image extents must be divisible by 8, got {image_shape}")
    c512, c256, c128 = _scale(512, width), _scale(256, width), _scale(128, width)
    bn, relu = LayerSpec("batch-norm"), LayerSpec("relu")

    def up(units, wn):
        return LayerSpec("conv-transpose", units=units, kernel=5, stride=2, pad=2,
                         output_pad=1, weight_norm=wn)

    layers = [LayerSpec("dense", units=c512 * (h // 8) * (w // 8), weight_norm=bn_weight_norm),
              bn, relu, LayerSpec("reshape", shape=(c512, h // 8, w // 8)),
              up(c256, bn_weight_norm), bn, relu,
              up(c128, bn_weight_norm), bn, relu,
              up(c, True), LayerSpec("tanh")]
    return GeneratorConfig(layers, image_shape, latent_dim, width)


def mlp_discriminator(input_dim: int, hidden: int = 64, depth: int = 2, num_classes: int = 2,
                      dropout: float = 0.0, slope: float = 0.2) -> DiscriminatorConfig:
    layers = []
    for _ in range(depth):
        if dropout:
            layers.append(LayerSpec("dropout", p=dropout))
        layers += [LayerSpec("dense", units=hidden, weight_norm=True), LayerSpec("leaky-relu", slope=slope)]
    layers.append(LayerSpec("dense", units=num_classes, weight_norm=True))
    return DiscriminatorConfig(layers, (input_dim,), num_classes)


def mlp_generator(output_dim: int, latent_dim: int = 2, hidden: int = 64,
                  depth: int = 2) -> GeneratorConfig:
    layers = []
    for _ in range(depth):
        layers += [LayerSpec("dense", units=hidden), LayerSpec("batch-norm"), LayerSpec("relu")]
    layers += [LayerSpec("dense", units=output_dim, weight_norm=True), LayerSpec("tanh")]
    return GeneratorConfig(layers, (output_dim,), latent_dim)


# -- networks ------------------------------------------------------------------

class Generator(Network):
    def __init__(self, config: GeneratorConfig, seed: int = 0, dtype=np.float64, **kw):
        self.config = config
        super().__init__(config.layers, (config.latent_dim,), "gen", seed=seed, dtype=dtype, **kw)
        if self.output_shape != config.image_shape:
            raise ContractViolation(f"generator produces {self.output_shape}, "
                                    f"configured image shape is {config.image_shape}")

    @property
    def latent_dim(self) -> int:
        return self.config.latent_dim

    def forward(self, z, params=None, train=False, rng=None, update_stats=False, taps=()):
        zv = z.values if isinstance(z, Tensor) else np.asarray(z)
        if zv.ndim != 2 or zv.shape[1] != self.latent_dim:
            raise ContractViolation(f"latent width mismatch: expected [n, {self.latent_dim}], got {list(zv.shape)}")
        return super().forward(z, params, train, rng, update_stats, taps)

    def generate(self, z, params=None, train=False) -> np.ndarray:
        """Images for latent batch ``z`` as a plain array (no gradient tracking)."""
        out, _ = self.forward(Tensor(np.asarray(z, dtype=self.dtype)),
                              params.constants() if params is not None else None, train=train)
        return out.values


class Discriminator(Network):
    def __init__(self, config: DiscriminatorConfig, seed: int = 0, dtype=np.float64, **kw):
        self.config = config
        super().__init__(config.layers, config.image_shape, "disc", seed=seed, dtype=dtype, **kw)

    @property
    def num_classes(self) -> int:
        return self.config.num_classes

    def forward(self, x, params=None, train=False, rng=None, update_stats=False, taps=()):
        """Returns ``(logits[n, K], features[n, F])``."""
        fl = self.config.feature_layer
        logits, tapped = super().forward(x, params, train, rng, update_stats, tuple(taps) + (fl,))
        feats = tapped[fl]
        if feats.ndim > 2:
            feats = reshape(feats, (feats.shape[0], -1))
        return logits, feats


def class_probabilities(logits) -> np.ndarray:
    """Probabilities over K real classes plus the generated class (last column)."""
    l = np.asarray(logits.values if isinstance(logits, Tensor) else logits, dtype=np.float64)
    full = np.concatenate([l, np.zeros((l.shape[0], 1))], axis=1)
    full = full - full.max(axis=1, keepdims=True)
    e = np.exp(full)
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class ModelPair:
    generator: Generator
    discriminator: Discriminator

    @property
    def feature_layer(self) -> int:
        return self.discriminator.config.feature_layer


# -- latent space ----------------------------------------------------------------

@dataclass
class LatentBatch:
    """Latent vectors with their unit perturbation directions and step size."""

    z: np.ndarray
    deltas: np.ndarray | None = None
    epsilon: float | None = None

    def __len__(self) -> int:
        return self.z.shape[0]

    def perturbed(self) -> np.ndarray:
        if self.deltas is None or self.epsilon is None:
            raise ContractViolation("latent batch has no perturbation")
        return self.z + self.epsilon * self.deltas


def sample_latent(n: int, d: int, rng: np.random.Generator) -> LatentBatch:
    """n latent vectors with i.i.d. coordinates uniform on [-1, 1]."""
    if n < 1 or d < 1:
        raise ContractViolation("sample_latent needs n, d >= 1")
    return LatentBatch(rng.uniform(-1.0, 1.0, size=(n, d)))


def latent_interpolate(z0, z1, steps: int) -> LatentBatch:
    if steps < 2:
        raise ContractViolation("interpolation needs at least 2 steps")
    z0, z1 = np.asarray(z0, dtype=np.float64), np.asarray(z1, dtype=np.float64)
    t = np.linspace(0.0, 1.0, steps)[:, None]
    z = z0[None, :] + t * (z1 - z0)[None, :]
    z[0], z[-1] = z0, z1
    return LatentBatch(z)


# -- checkpoint container ------------------------------------------------------
#
# Layout (all integers little-endian):
#   8 bytes   magic b"MGANCKPT"
#   u32       format version (1)
#   u64       header length in bytes
#   header    UTF-8 JSON: {"meta": {...}, "tensors": [{"name", "shape", "offset"}]}
#   payload   float64 little-endian values, tensors back to back; "offset" counts
#             values (not bytes) from the start of the payload

CKPT_MAGIC = b"MGANCKPT"
CKPT_VERSION = 1


def save_checkpoint(path, tensors: Mapping[str, np.ndarray], meta: Mapping | None = None) -> None:
    entries, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.reshape(-1).tobytes())
        offset += arr.size
    header = json.dumps({"meta": dict(meta or {}), "tensors": entries}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<IQ", CKPT_VERSION, len(header)))
        fh.write(header)
        for chunk in chunks:
            fh.write(chunk)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    raw = path.read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic {raw[:8]!r}, expected {CKPT_MAGIC!r}")
    if len(raw) < 20:
        raise FormatError(f"{path}: truncated checkpoint header")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[20:20 + hlen].decode())
    payload = np.frombuffer(raw[20 + hlen:], dtype="<f8")
    tensors = {}
    for e in header["tensors"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        start = e["offset"]
        if start + count > payload.size:
            raise FormatError(f"{path}: tensor {e['name']} needs {(start + count) * 8} payload bytes, "
                              f"found {payload.size * 8}")
        tensors[e["name"]] = payload[start:start + count].reshape(e["shape"]).astype(np.float64)
    return tensors, header["meta"]


def model_tensors(models: ModelPair) -> dict[str, np.ndarray]:
    out = {}
    for net in (models.generator, models.discriminator):
        for k, v in net.params.items():
            out[k] = v
        for k, v in net.state.items():
            out["state:" + k] = v
    return out


def load_model_tensors(models: ModelPair, tensors: Mapping[str, np.ndarray]) -> None:
    for net in (models.generator, models.discriminator):
        for k in net.params.names():
            if k not in tensors or tuple(tensors[k].shape) != net.params[k].shape:
                raise FormatError(f"checkpoint tensor {k} missing or mis-shaped")
            net.params[k] = tensors[k].astype(net.dtype)
        for k in list(net.state):
            net.state[k] = tensors["state:" + k].astype(np.float64)


def build_models(gen_cfg: GeneratorConfig, disc_cfg: DiscriminatorConfig, seed: int = 0,
                 dtype=np.float64, bn_momentum: float = 0.9) -> ModelPair:
    gen = Generator(gen_cfg, seed=seed, dtype=dtype, bn_momentum=bn_momentum)
    disc = Discriminator(disc_cfg, seed=seed, dtype=dtype)
    if gen.output_shape != disc.input_shape:
        raise ContractViolation(f"generator output {gen.output_shape} does not match "
                                f"discriminator input {disc.input_shape}")
    return ModelPair(gen, disc)


__all__ = [
    "DiscriminatorConfig", "GeneratorConfig", "Generator", "Discriminator", "ModelPair",
    "LatentBatch", "sample_latent", "latent_interpolate", "class_probabilities",
    "conv_large_discriminator", "conv_small_discriminator", "conv_discriminator",
    "dcgan_generator", "mlp_discriminator", "mlp_generator", "build_models",
    "save_checkpoint", "load_checkpoint", "model_tensors", "load_model_tensors",
]
