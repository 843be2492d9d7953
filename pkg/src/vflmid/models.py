"""Party-local MLPs, the global head, and the variational bottleneck layer."""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Rng, Tensor
from .errors import ConfigError, DimensionError, FormatError

LOG_VAR_MIN = -10.0
LOG_VAR_MAX = 10.0


def glorot_uniform(fan_in: int, fan_out: int, rng: Rng) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, (fan_in, fan_out))


def clip_group(grads, params, max_norm: float):
    """Rescale the gradients of ``params`` jointly so their global 2-norm is at most ``max_norm``."""
    params = list(params)
    sq = sum(float(np.sum(grads[p] * grads[p])) for p in params)
    norm = np.sqrt(sq)
    if norm <= max_norm:
        return grads
    out = dict(grads)
    for p in params:
        out[p] = grads[p] * (max_norm / norm)
    return out


@dataclass
class MlpModel:
    """Fully connected net: ReLU between layers, nothing after the last."""

    layer_dims: list[int]
    params: dict[str, Tensor] = field(default_factory=dict)

    def __post_init__(self):
        if len(self.layer_dims) < 2 or any(d <= 0 for d in self.layer_dims):
            raise ConfigError(f"invalid layer dims {self.layer_dims}")

    @classmethod
    def init(cls, layer_dims, rng: Rng) -> "MlpModel":
        dims = [int(d) for d in layer_dims]
        params = {}
        for i, (n, m) in enumerate(zip(dims[:-1], dims[1:])):
            params[f"W{i}"] = Tensor(glorot_uniform(n, m, rng), requires_grad=True, name=f"W{i}")
            params[f"b{i}"] = Tensor(np.zeros(m), requires_grad=True, name=f"b{i}")
        return cls(dims, params)

    @property
    def n_layers(self) -> int:
        return len(self.layer_dims) - 1

    @property
    def in_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def out_dim(self) -> int:
        return self.layer_dims[-1]

    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def forward(self, x: Tensor) -> Tensor:
        if x.data.ndim != 2 or x.shape[1] != self.in_dim:
            raise DimensionError(f"model expects (B, {self.in_dim}) input, got {x.shape}")
        h = x
        for i in range(self.n_layers):
            h = dc.linear_forward(h, self.params[f"W{i}"], self.params[f"b{i}"])
            if i < self.n_layers - 1:
                h = dc.relu(h)
        return h

    __call__ = forward

    def step(self, grads, lr: float, max_norm: float = 0.0):
        if max_norm > 0:
            grads = clip_group(grads, self.params.values(), max_norm)
        self.params = dc.sgd_step(self.params, grads, lr)

    def copy(self) -> "MlpModel":
        return MlpModel(list(self.layer_dims),
                        {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in self.params.items()})

    def vjp_graph(self, x: Tensor, g_out: Tensor) -> tuple[dict[str, Tensor], Tensor]:
        """Parameter and input gradients for upstream ``g_out``, built as a graph.

        The result stays differentiable w.r.t. ``x`` and ``g_out`` (ReLU masks
        are held constant), which is what gradient-matching reconstruction
        needs without higher-order autodiff.
        """
        consts = {k: Tensor(v.data) for k, v in self.params.items()}
        acts, masks = [x], []
        h = x
        for i in range(self.n_layers):
            h = dc.linear_forward(h, consts[f"W{i}"], consts[f"b{i}"])
            if i < self.n_layers - 1:
                masks.append((h.data > 0).astype(np.float64))
                h = dc.relu(h)
                acts.append(h)
        grads = {}
        g = g_out
        for i in reversed(range(self.n_layers)):
            grads[f"W{i}"] = dc.matmul(dc.transpose(acts[i]), g)
            grads[f"b{i}"] = dc.sum_rows(g)
            g = dc.matmul(g, dc.transpose(consts[f"W{i}"]))
            if i > 0:
                g = dc.mul_const(g, masks[i - 1])
        return grads, g


def local_forward(model: MlpModel, x: Tensor) -> Tensor:
    return model.forward(x)


@dataclass
class GlobalHead:
    """``sum``: logits are the sum of the parts. ``linear``: an MLP on their concatenation."""

    variant: str = "sum"
    mlp: MlpModel | None = None

    def __post_init__(self):
        if self.variant not in ("sum", "linear"):
            raise ConfigError(f"unknown head variant {self.variant!r}")
        if self.variant == "linear" and self.mlp is None:
            raise ConfigError("linear head needs an MLP")

    @classmethod
    def trainable(cls, in_width: int, num_classes: int, num_layers: int, rng: Rng, hidden: int | None = None):
        hidden = hidden or max(num_classes, in_width)
        dims = [in_width] + [hidden] * (num_layers - 1) + [num_classes]
        return cls("linear", MlpModel.init(dims, rng))

    @property
    def params(self) -> dict[str, Tensor]:
        return {} if self.mlp is None else self.mlp.params

    def step(self, grads, lr: float, max_norm: float = 0.0):
        if self.mlp is not None:
            self.mlp.step(grads, lr, max_norm)


def global_predict(head: GlobalHead, parts: list[Tensor]) -> Tensor:
    if not parts:
        raise DimensionError("global head received no parts")
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1:
        raise DimensionError(f"parts disagree on batch size: {[p.shape for p in parts]}")
    if head.variant == "sum":
        widths = {p.shape[1] for p in parts}
        if len(widths) != 1:
            raise DimensionError(f"sum head needs equal widths, got {[p.shape for p in parts]}")
        return parts[0] if len(parts) == 1 else dc.add_n(parts)
    return head.mlp.forward(dc.concat_columns(parts))


@dataclass
class VibLayer:
    """Stochastic encoder -> reparameterised T -> decoder, weighted by ``lam``."""

    encoder: MlpModel
    decoder: MlpModel
    bottleneck_dim: int
    lam: float = 0.0
    log_var_min: float = LOG_VAR_MIN
    log_var_max: float = LOG_VAR_MAX

    def __post_init__(self):
        if self.encoder.out_dim != 2 * self.bottleneck_dim:
            raise ConfigError(f"encoder width {self.encoder.out_dim} != 2 x bottleneck {self.bottleneck_dim}")
        if self.decoder.in_dim != self.bottleneck_dim:
            raise ConfigError(f"decoder input {self.decoder.in_dim} != bottleneck {self.bottleneck_dim}")
        if self.lam < 0:
            raise ConfigError(f"lambda must be nonnegative, got {self.lam}")

    @classmethod
    def init(cls, in_dim: int, out_dim: int, lam: float, rng: Rng, bottleneck_dim: int | None = None):
        d = bottleneck_dim or in_dim
        enc = MlpModel.init([in_dim, 2 * d, 2 * d], rng.child("encoder"))
        dec = MlpModel.init([d, 2 * d, out_dim], rng.child("decoder"))
        return cls(enc, dec, d, float(lam))

    @property
    def params(self) -> dict[str, Tensor]:
        out = {f"enc.{k}": v for k, v in self.encoder.params.items()}
        out.update({f"dec.{k}": v for k, v in self.decoder.params.items()})
        return out

    def step(self, grads, lr: float, max_norm: float = 0.0):
        if max_norm > 0:
            grads = clip_group(grads, self.params.values(), max_norm)
        self.encoder.step(grads, lr)
        self.decoder.step(grads, lr)

    def copy(self) -> "VibLayer":
        return VibLayer(self.encoder.copy(), self.decoder.copy(), self.bottleneck_dim, self.lam,
                        self.log_var_min, self.log_var_max)


@dataclass
class VibOutput:
    z: Tensor
    kl: Tensor
    t: Tensor
    mu: Tensor
    log_var: Tensor
    eps: np.ndarray | None = None


def vib_forward(vib: VibLayer, h: Tensor, rng: Rng | None, train_mode: bool = True,
                eps: np.ndarray | None = None) -> VibOutput:
    enc = vib.encoder.forward(h)
    d = vib.bottleneck_dim
    mu = dc.columns(enc, 0, d)
    log_var = dc.clamp(dc.columns(enc, d, 2 * d), vib.log_var_min, vib.log_var_max)
    if train_mode:
        if eps is None:
            eps = rng.normal(mu.shape)
        t = dc.reparam_sample(mu, log_var, eps=eps)
    else:
        t = mu
    z = vib.decoder.forward(t)
    kl = dc.gaussian_kl(mu, log_var)
    return VibOutput(z, kl, t, mu, log_var, eps)


# ---------------------------------------------------------------- checkpoints

_MAGIC = b"VFLCKPT1"


def save_checkpoint(named: dict[str, np.ndarray | Tensor], path_or_buf=None) -> bytes:
    """Length-prefixed names + shapes + little-endian f64 payloads."""
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<I", len(named)))
    for name, arr in named.items():
        a = np.asarray(arr.data if isinstance(arr, Tensor) else arr, dtype="<f8")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", a.ndim))
        buf.write(struct.pack(f"<{a.ndim}Q", *a.shape))
        buf.write(np.ascontiguousarray(a).tobytes())
    data = buf.getvalue()
    if path_or_buf is not None:
        if hasattr(path_or_buf, "write"):
            path_or_buf.write(data)
        else:
            with open(path_or_buf, "wb") as fh:
                fh.write(data)
    return data


def load_checkpoint(src) -> dict[str, np.ndarray]:
    if isinstance(src, (bytes, bytearray)):
        data = bytes(src)
    else:
        with open(src, "rb") as fh:
            data = fh.read()
    if data[:8] != _MAGIC:
        raise FormatError(f"bad checkpoint magic {data[:8]!r}")
    off = 8
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off:off + n].decode("utf-8")
        off += n
        (ndim,) = struct.unpack_from("<I", data, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}Q", data, off)
        off += 8 * ndim
        count_vals = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f8", count=count_vals, offset=off).reshape(shape)
        off += 8 * count_vals
        out[name] = arr.astype(np.float64)
    if off != len(data):
        raise FormatError(f"{len(data) - off} trailing bytes in checkpoint")
    return out


def model_to_checkpoint(model: MlpModel, vib: VibLayer | None = None) -> dict[str, np.ndarray]:
    named = {f"local.{k}": v.data for k, v in model.params.items()}
    if vib is not None:
        named.update({f"vib.{k}": v.data for k, v in vib.params.items()})
    return named


def model_from_checkpoint(named: dict[str, np.ndarray]) -> MlpModel:
    local = {k[len("local."):]: v for k, v in named.items() if k.startswith("local.")}
    n_layers = len(local) // 2
    dims = [local["W0"].shape[0]] + [local[f"W{i}"].shape[1] for i in range(n_layers)]
    return MlpModel(dims, {k: Tensor(v.copy(), requires_grad=True, name=k) for k, v in local.items()})
