"""Neural-network layers built on :mod:`manifold_gan.autodiff`.

Layers are described declaratively by :class:`LayerSpec` and assembled into
a :class:`Network`, which owns the parameter arrays and batch-norm running
statistics.  Initialisation follows the fixed scheme used throughout the
package: isotropic Gaussian weights (sigma 0.05), zero biases, and unit
weight-norm scales, with no data-dependent initialisation.
"""

from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, fields
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractViolation
from .params import ParameterStore

KINDS = (
    "dense", "conv", "conv-transpose", "nin", "batch-norm", "dropout",
    "leaky-relu", "relu", "tanh", "global-avg-pool", "reshape",
)
_AFFINE = ("dense", "conv", "conv-transpose", "nin")

BN_MOMENTUM = 0.9
BN_EPS = 1e-5
INIT_SIGMA = 0.05


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    units: int = 0
    kernel: int = 1
    stride: int = 1
    pad: int = 0
    output_pad: int = 0
    p: float = 0.0
    slope: float = 0.2
    weight_norm: bool = False
    shape: tuple = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractViolation(f"unknown layer kind {self.kind!r}")
        if self.stride < 1 or self.kernel < 1:
            raise ContractViolation(f"{self.kind}: stride and kernel must be >= 1")
        if not 0.0 <= self.p < 1.0:
            raise ContractViolation(f"dropout probability must lie in [0, 1), got {self.p}")
        if self.kind in _AFFINE and self.units < 1:
            raise ContractViolation(f"{self.kind}: units must be >= 1")
        if self.kind == "nin" and (self.kernel, self.stride, self.pad) != (1, 1, 0):
            raise ContractViolation("nin layers are 1x1, stride 1, pad 0")
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))

    def describe(self) -> str:
        """Short human-readable row, in the style of an architecture table."""
        wn = " weightnorm" if self.weight_norm else ""
        if self.kind == "conv":
            extra = f" stride={self.stride}" if self.stride != 1 else ""
            return f"{self.kernel}x{self.kernel} conv{wn} {self.units}{extra} pad={self.pad}"
        if self.kind == "conv-transpose":
            return f"{self.kernel}x{self.kernel} conv.T{wn} {self.units} stride={self.stride}"
        if self.kind in ("dense", "nin"):
            return f"{self.kind}{wn} {self.units}"
        if self.kind == "dropout":
            return f"dropout p={self.p}"
        if self.kind == "leaky-relu":
            return f"lReLU {self.slope}"
        if self.kind == "reshape":
            return "reshape " + "x".join(map(str, self.shape))
        return self.kind

    def to_dict(self) -> dict:
        defaults = LayerSpec.__dataclass_fields__
        out = {"kind": self.kind}
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name != "kind" and value != defaults[f.name].default:
                out[f.name] = list(value) if f.name == "shape" else value
        return out

    @classmethod
    def from_dict(cls, data: Mapping) -> "LayerSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ContractViolation(f"unknown layer fields {sorted(unknown)}")
        data = dict(data)
        if "shape" in data:
            data["shape"] = tuple(data["shape"])
        return cls(**data)


def as_dict(spec: LayerSpec) -> dict:
    return asdict(spec)


# -- functional building blocks -----------------------------------------------

def weight_norm_apply(v: Tensor, g: Tensor, out_axis: int = 0) -> Tensor:
    """Effective weight ``g * v / ||v||`` with the norm taken over each output unit's fan-in."""
    vv = v.values
    moved = np.moveaxis(vv, out_axis, 0).reshape(vv.shape[out_axis], -1)
    norms = np.sqrt(np.sum(moved * moved, axis=1))
    if np.any(norms == 0):
        raise ContractViolation("weight-norm direction has a zero-norm output unit")
    if out_axis == 0:
        vt = v
    else:
        perm = list(range(v.ndim))
        perm[0], perm[out_axis] = perm[out_axis], perm[0]
        vt = ad.transpose(v, perm)
    norm = ad.sqrt(ad.sum(ad.square(vt), axis=tuple(range(1, v.ndim))))
    w = ad.scale_rows(vt, g / norm)
    if out_axis != 0:
        w = ad.transpose(w, perm)
    return w


def batch_norm_forward(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
                       running_var: np.ndarray, train: bool, momentum: float = BN_MOMENTUM,
                       eps: float = BN_EPS):
    """Batch normalisation over every axis but the channel axis.

    Returns ``(output, new_running_mean, new_running_var)``; in inference
    mode the running statistics are returned unchanged.
    """
    if train:
        y, mu, var = ad.batch_norm_train(x, gamma, beta, eps)
        new_mean = momentum * running_mean + (1.0 - momentum) * mu
        new_var = momentum * running_var + (1.0 - momentum) * var
        return y, new_mean, new_var
    inv = 1.0 / np.sqrt(running_var + eps)
    scale = gamma * Tensor(inv.astype(x.dtype))
    shift = beta - Tensor((running_mean * inv).astype(x.dtype)) * gamma
    return ad.channel_affine(x, scale, shift), running_mean, running_var


def dropout_forward(x: Tensor, p: float, train: bool, rng: np.random.Generator | None) -> Tensor:
    if not 0.0 <= p < 1.0:
        raise ContractViolation(f"dropout probability must lie in [0, 1), got {p}")
    if not train or p == 0.0:
        return x
    if rng is None:
        raise ContractViolation("dropout in train mode needs an rng")
    keep = rng.random(x.shape) >= p
    mask = keep.astype(x.dtype) / np.asarray(1.0 - p, dtype=x.dtype)
    return x * Tensor(mask)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    return ad.leaky_relu(x, slope)


def global_avg_pool(x: Tensor) -> Tensor:
    return ad.global_avg_pool(x)


# -- shape bookkeeping ---------------------------------------------------------

def output_shape(spec: LayerSpec, in_shape: tuple) -> tuple:
    k = spec.kind
    if k == "dense":
        return (spec.units,)
    if k in ("conv", "nin"):
        _check_image(spec, in_shape)
        _, h, w = in_shape
        oh = ad.conv_output_size(h, spec.kernel, spec.stride, spec.pad)
        ow = ad.conv_output_size(w, spec.kernel, spec.stride, spec.pad)
        if oh < 1 or ow < 1:
            raise ContractViolation(f"{spec.describe()}: non-positive output extent for input {in_shape}")
        return (spec.units, oh, ow)
    if k == "conv-transpose":
        _check_image(spec, in_shape)
        _, h, w = in_shape
        if not 0 <= spec.output_pad < spec.stride:
            raise ContractViolation("output_pad must satisfy 0 <= output_pad < stride")
        return (spec.units,
                ad.conv_transpose_output_size(h, spec.kernel, spec.stride, spec.pad, spec.output_pad),
                ad.conv_transpose_output_size(w, spec.kernel, spec.stride, spec.pad, spec.output_pad))
    if k == "global-avg-pool":
        _check_image(spec, in_shape)
        return (in_shape[0],)
    if k == "reshape":
        if int(np.prod(spec.shape)) != int(np.prod(in_shape)):
            raise ContractViolation(f"reshape {in_shape} -> {spec.shape} changes size")
        return spec.shape
    return tuple(in_shape)


def _check_image(spec, in_shape):
    if len(in_shape) != 3:
        raise ContractViolation(f"{spec.kind} expects a [c, h, w] input, got {in_shape}")


def _layer_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


# -- network -------------------------------------------------------------------

class Network:
    """A feed-forward stack of layers with named parameters.

    Parameter names look like ``disc.03.conv.v``: network name, layer index,
    kind and role (``v``/``g``/``b`` for weight-normed layers, ``w``/``b``
    otherwise, ``gamma``/``beta`` for batch norm).
    """

    def __init__(self, specs: Sequence[LayerSpec], input_shape: Sequence[int], name: str,
                 seed: int = 0, init_sigma: float = INIT_SIGMA, dtype=np.float64,
                 bn_momentum: float = BN_MOMENTUM, bn_eps: float = BN_EPS):
        self.specs = list(specs)
        self.input_shape = tuple(int(s) for s in input_shape)
        self.name = name
        self.dtype = np.dtype(dtype)
        self.bn_momentum = bn_momentum
        self.bn_eps = bn_eps
        self.shapes = []
        shape = self.input_shape
        for spec in self.specs:
            shape = output_shape(spec, shape)
            self.shapes.append(shape)
        self.params = ParameterStore()
        self.state: dict[str, np.ndarray] = {}
        self._init(seed, init_sigma)

    @property
    def output_shape(self) -> tuple:
        return self.shapes[-1] if self.shapes else self.input_shape

    def layer_name(self, i: int) -> str:
        return f"{self.name}.{i:02d}.{self.specs[i].kind}"

    def _init(self, seed: int, sigma: float) -> None:
        in_shape = self.input_shape
        for i, spec in enumerate(self.specs):
            prefix = self.layer_name(i)
            rng = _layer_rng(seed, prefix)
            if spec.kind in _AFFINE:
                wshape = self._weight_shape(spec, in_shape)
                weight = rng.normal(0.0, sigma, size=wshape)
                if spec.weight_norm:
                    self.params[prefix + ".v"] = weight.astype(self.dtype)
                    self.params[prefix + ".g"] = np.ones(spec.units, dtype=self.dtype)
                else:
                    self.params[prefix + ".w"] = weight.astype(self.dtype)
                self.params[prefix + ".b"] = np.zeros(spec.units, dtype=self.dtype)
            elif spec.kind == "batch-norm":
                c = in_shape[0]
                self.params[prefix + ".gamma"] = np.ones(c, dtype=self.dtype)
                self.params[prefix + ".beta"] = np.zeros(c, dtype=self.dtype)
                self.state[prefix + ".running_mean"] = np.zeros(c, dtype=np.float64)
                self.state[prefix + ".running_var"] = np.ones(c, dtype=np.float64)
            in_shape = self.shapes[i]

    @staticmethod
    def _weight_shape(spec: LayerSpec, in_shape: tuple) -> tuple:
        if spec.kind == "dense":
            return (spec.units, int(np.prod(in_shape)))
        if spec.kind in ("conv", "nin"):
            return (spec.units, in_shape[0], spec.kernel, spec.kernel)
        return (in_shape[0], spec.units, spec.kernel, spec.kernel)

    def effective_weight(self, i: int, params: Mapping[str, Tensor] | None = None) -> Tensor:
        spec = self.specs[i]
        prefix = self.layer_name(i)
        p = params if params is not None else self.params.constants()
        if spec.weight_norm:
            out_axis = 1 if spec.kind == "conv-transpose" else 0
            return weight_norm_apply(p[prefix + ".v"], p[prefix + ".g"], out_axis)
        return p[prefix + ".w"]

    def forward(self, x, params: Mapping[str, Tensor] | None = None, train: bool = False,
                rng: np.random.Generator | None = None, update_stats: bool = False,
                taps: Sequence[int] = ()):
        """Run the stack; returns ``(output, {layer_index: activation})``.

        ``params`` defaults to the network's own arrays as constants.
        Batch-norm running statistics are written back only when both
        ``train`` and ``update_stats`` are set.
        """
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.dtype))
        if tuple(x.shape[1:]) != self.input_shape:
            raise ContractViolation(f"{self.name}: expected input [n, {', '.join(map(str, self.input_shape))}], "
                                    f"got {list(x.shape)}")
        p = params if params is not None else self.params.constants()
        tapped = {}
        n = x.shape[0]
        for i, spec in enumerate(self.specs):
            prefix = self.layer_name(i)
            k = spec.kind
            if k == "dense":
                if x.ndim > 2:
                    x = ad.reshape(x, (n, -1))
                w = self.effective_weight(i, p)
                x = ad.channel_affine(ad.matmul(x, ad.transpose(w)), None, p[prefix + ".b"])
            elif k in ("conv", "nin"):
                w = self.effective_weight(i, p)
                x = ad.channel_affine(ad.conv2d(x, w, spec.stride, spec.pad), None, p[prefix + ".b"])
            elif k == "conv-transpose":
                w = self.effective_weight(i, p)
                x = ad.conv_transpose2d(x, w, spec.stride, spec.pad, spec.output_pad)
                x = ad.channel_affine(x, None, p[prefix + ".b"])
            elif k == "batch-norm":
                rm = self.state[prefix + ".running_mean"]
                rv = self.state[prefix + ".running_var"]
                x, nm, nv = batch_norm_forward(x, p[prefix + ".gamma"], p[prefix + ".beta"], rm, rv,
                                               train, self.bn_momentum, self.bn_eps)
                if train and update_stats:
                    self.state[prefix + ".running_mean"] = nm
                    self.state[prefix + ".running_var"] = nv
            elif k == "dropout":
                x = dropout_forward(x, spec.p, train, rng)
            elif k == "leaky-relu":
                x = ad.leaky_relu(x, spec.slope)
            elif k == "relu":
                x = ad.relu(x)
            elif k == "tanh":
                x = ad.tanh(x)
            elif k == "global-avg-pool":
                x = ad.global_avg_pool(x)
            elif k == "reshape":
                x = ad.reshape(x, (n,) + spec.shape)
            if i in taps:
                tapped[i] = x
        return x, tapped
