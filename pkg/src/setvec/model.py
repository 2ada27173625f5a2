"""Discriminative, attention and generative networks over a bag of patches.

Data flow for one bag ``X`` of ``N`` patches::

    H     = encoder(X)                      # [N, d], one latent row per patch
    g     = attention_scores(H)             # [N] in (0, 1), two equivariant layers + sigmoid
    alpha = softmax(g)                      # attention map, sums to 1
    v     = pool(H, alpha, g)               # [d]
    y_hat = predictor(v)                    # scalar
    X_hat = decoder(H)                      # reconstruction, same shape as X

and the objective for the bag is ``L_d + lambda1 * L_g + lambda2 * R`` with
``R = sum(log(alpha + eps))``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .data import Bag
from .errors import DimensionError, DomainError, NumericError, UsageError
from .tensor import Tensor

POOL_MODES = ("mean", "max", "weighted", "weighted_sum", "gated_sum")
RECON_LOSSES = ("mse", "l2norm")
GROUPS = ("encoder", "decoder", "attention", "predictor")


@dataclass(frozen=True)
class ArchConfig:
    spatial_dims: int = 2
    patch_size: int = 28
    channels: tuple = (8, 16)
    kernel: int = 3
    stride: int = 2
    latent_dim: int = 16
    attention_dim: int = 8
    batchnorm: bool = False
    dtype: str = "float64"

    def __post_init__(self):
        if self.spatial_dims not in (2, 3):
            raise UsageError(f"spatial_dims must be 2 or 3, got {self.spatial_dims}")
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.dtype not in ("float64", "float32"):
            raise UsageError(f"dtype must be float64 or float32, got {self.dtype}")
        if len(self.feature_sizes()) != len(self.channels) + 1 or self.feature_sizes()[-1] < 1:
            raise UsageError(f"patch size {self.patch_size} too small for {len(self.channels)} conv layers")

    @property
    def patch_shape(self) -> tuple:
        return (self.patch_size,) * self.spatial_dims

    def feature_sizes(self) -> list:
        """Spatial extent after each encoder conv, starting with the input."""
        sizes = [self.patch_size]
        for _ in self.channels:
            nxt = (sizes[-1] - self.kernel) // self.stride + 1
            if nxt < 1:
                break
            sizes.append(nxt)
        return sizes

    @property
    def flat_dim(self) -> int:
        return self.channels[-1] * self.feature_sizes()[-1] ** self.spatial_dims

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def for_digits(cls, **kw) -> "ArchConfig":
        return cls(**{"spatial_dims": 2, "patch_size": 28, **kw})

    @classmethod
    def for_volumes(cls, **kw) -> "ArchConfig":
        return cls(**{"spatial_dims": 3, "patch_size": 32, "batchnorm": True, **kw})


@dataclass
class ModelParams:
    """Learnable arrays keyed ``<group>.<layer>.<name>``, plus batch-norm running statistics.

    ``target_shift``/``target_scale`` map the predictor output back to target
    units; they are fixed before training and not optimised.
    """

    arch: ArchConfig
    arrays: dict
    bn_state: dict = field(default_factory=dict)
    target_shift: float = 0.0
    target_scale: float = 1.0

    def group(self, name: str) -> dict:
        return {k: v for k, v in self.arrays.items() if k.startswith(name + ".")}

    def copy(self) -> "ModelParams":
        return ModelParams(self.arch, {k: v.copy() for k, v in self.arrays.items()},
                           {k: v.copy() for k, v in self.bn_state.items()}, self.target_shift, self.target_scale)

    def equals(self, other: "ModelParams") -> bool:
        """Bit-exact equality of every array and setting."""
        same_keys = self.arrays.keys() == other.arrays.keys() and self.bn_state.keys() == other.bn_state.keys()
        if not same_keys or self.arch != other.arch:
            return False
        if (self.target_shift, self.target_scale) != (other.target_shift, other.target_scale):
            return False
        pairs = [(self.arrays[k], other.arrays[k]) for k in self.arrays]
        pairs += [(self.bn_state[k], other.bn_state[k]) for k in self.bn_state]
        return all(a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes() for a, b in pairs)


# ---------------------------------------------------------------------------
# initialisation
# ---------------------------------------------------------------------------


def _layer_shapes(arch: ArchConfig) -> dict:
    k = (arch.kernel,) * arch.spatial_dims
    chans = (1, *arch.channels)
    shapes = {}
    for i in range(len(arch.channels)):
        shapes[f"encoder.conv{i + 1}"] = ((chans[i + 1], chans[i], *k), chans[i], chans[i + 1])
    shapes["encoder.fc"] = ((arch.latent_dim, arch.flat_dim), None, None)
    shapes["decoder.fc"] = ((arch.flat_dim, arch.latent_dim), None, None)
    for i in reversed(range(len(arch.channels))):
        # transpose kernels share the forward layout [c_from, c_to, *k]
        shapes[f"decoder.deconv{i + 1}"] = ((chans[i + 1], chans[i], *k), chans[i + 1], chans[i])
    shapes["attention.el1"] = ((arch.attention_dim, arch.latent_dim), None, None)
    shapes["attention.el2"] = ((1, arch.attention_dim), None, None)
    shapes["predictor.out"] = ((1, arch.latent_dim), None, None)
    return shapes


def init_params(arch: ArchConfig, rng: np.random.Generator) -> ModelParams:
    """Fan-in scaled uniform weights, zero biases, unit/zero batch-norm affine."""
    dtype = np.dtype(arch.dtype)
    arrays, bn_state = {}, {}
    for name, (wshape, _, c_to) in _layer_shapes(arch).items():
        if "deconv" in name:
            fan_in = wshape[0] * int(np.prod(wshape[2:]))
            n_out = wshape[1]
        else:
            fan_in = int(np.prod(wshape[1:]))
            n_out = wshape[0]
        bound = 1.0 / math.sqrt(fan_in)
        arrays[f"{name}.W"] = rng.uniform(-bound, bound, size=wshape).astype(dtype)
        arrays[f"{name}.b"] = np.zeros(n_out, dtype=dtype)
        if arch.batchnorm and c_to is not None and name != "decoder.deconv1":
            arrays[f"{name}.gamma"] = np.ones(c_to, dtype=dtype)
            arrays[f"{name}.beta"] = np.zeros(c_to, dtype=dtype)
            bn_state[f"{name}.running_mean"] = np.zeros(c_to, dtype=dtype)
            bn_state[f"{name}.running_var"] = np.ones(c_to, dtype=dtype)
    return ModelParams(arch, arrays, bn_state)


def zero_params(arch: ArchConfig) -> ModelParams:
    p = init_params(arch, np.random.default_rng(0))
    for k, v in p.arrays.items():
        p.arrays[k] = np.ones_like(v) if k.endswith(".gamma") else np.zeros_like(v)
    return p


# ---------------------------------------------------------------------------
# forward pieces
# ---------------------------------------------------------------------------


class Graph:
    """Parameter leaves for one forward pass, plus batch-norm bookkeeping."""

    def __init__(self, params: ModelParams, training: bool = False, track: bool = False):
        self.params = params
        self.training = training
        self.leaves = {k: Tensor(v, requires_grad=track, name=k) for k, v in params.arrays.items()}
        self.new_bn_state: dict = {}

    def __getitem__(self, key: str) -> Tensor:
        return self.leaves[key]

    def grads(self) -> dict:
        return {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in self.leaves.items()}

    def maybe_bn(self, x: Tensor, layer: str) -> Tensor:
        if f"{layer}.gamma" not in self.leaves:
            return x
        mean_key, var_key = f"{layer}.running_mean", f"{layer}.running_var"
        out, (m, v) = T.batchnorm(x, self[f"{layer}.gamma"], self[f"{layer}.beta"],
                                  self.params.bn_state[mean_key], self.params.bn_state[var_key], self.training)
        if self.training:
            self.new_bn_state[mean_key], self.new_bn_state[var_key] = m, v
        return out


def _conv(arch: ArchConfig):
    return T.conv2d if arch.spatial_dims == 2 else T.conv3d


def _deconv(arch: ArchConfig):
    return T.conv_transpose2d if arch.spatial_dims == 2 else T.conv_transpose3d


def check_patches(patches: np.ndarray, arch: ArchConfig) -> None:
    if tuple(patches.shape[1:]) != arch.patch_shape:
        raise DimensionError(f"patch shape {tuple(patches.shape[1:])} does not match architecture {arch.patch_shape}")


def encoder_forward(g: Graph, patches: np.ndarray) -> Tensor:
    """[n, *patch] -> latents [n, d]."""
    arch = g.params.arch
    check_patches(patches, arch)
    n = len(patches)
    x = Tensor(patches.reshape(n, 1, *arch.patch_shape), dtype=np.dtype(arch.dtype))
    conv = _conv(arch)
    for i in range(len(arch.channels)):
        layer = f"encoder.conv{i + 1}"
        x = T.elu(g.maybe_bn(conv(x, g[f"{layer}.W"], g[f"{layer}.b"], arch.stride), layer))
    return T.affine(T.reshape(x, (n, arch.flat_dim)), g["encoder.fc.W"], g["encoder.fc.b"])


def decoder_forward(g: Graph, H: Tensor) -> Tensor:
    """Latents [n, d] -> reconstructions [n, *patch]."""
    arch = g.params.arch
    if H.ndim != 2 or H.shape[1] != arch.latent_dim:
        raise DimensionError(f"latents must be [n, {arch.latent_dim}], got {H.shape}")
    n = H.shape[0]
    sizes = arch.feature_sizes()
    x = T.affine(H, g["decoder.fc.W"], g["decoder.fc.b"])
    x = T.reshape(x, (n, arch.channels[-1], *(sizes[-1],) * arch.spatial_dims))
    deconv = _deconv(arch)
    for i in reversed(range(len(arch.channels))):
        layer = f"decoder.deconv{i + 1}"
        x = T.elu(x)
        x = deconv(x, g[f"{layer}.W"], g[f"{layer}.b"], arch.stride, output_shape=(sizes[i],) * arch.spatial_dims)
        if i > 0:
            x = g.maybe_bn(x, layer)
    return T.reshape(x, (n, *arch.patch_shape))


def equivariant_layer(H: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """Row k -> W (H_k - colmax(H)) + b."""
    if H.ndim != 2 or H.shape[0] < 1:
        raise DimensionError(f"equivariant layer expects a non-empty [N, d] matrix, got {H.shape}")
    return T.affine(T.sub(H, T.colmax(H)), W, b)


def attention_scores(g: Graph, H: Tensor) -> Tensor:
    """Per-patch gate in (0, 1): EL -> sigmoid -> EL -> sigmoid."""
    a = T.sigmoid(equivariant_layer(H, g["attention.el1.W"], g["attention.el1.b"]))
    s = T.sigmoid(equivariant_layer(a, g["attention.el2.W"], g["attention.el2.b"]))
    return T.reshape(s, (H.shape[0],))


def pool(H: Tensor, mode: str, alpha: Optional[Tensor] = None, gates: Optional[Tensor] = None) -> Tensor:
    """Permutation-invariant reduction of [N, d] latents to a [1, d] row."""
    n = H.shape[0]
    if mode == "mean":
        return T.reshape(T.mean(H, axis=0), (1, -1))
    if mode == "max":
        return T.colmax(H)
    if mode in ("weighted", "weighted_sum"):
        if alpha is None:
            raise UsageError(f"{mode} pooling needs attention weights")
        v = T.matmul(T.reshape(alpha, (1, n)), H)
        return T.mul(v, float(n)) if mode == "weighted_sum" else v
    if mode == "gated_sum":
        if gates is None:
            raise UsageError("gated_sum pooling needs attention gates")
        return T.matmul(T.reshape(gates, (1, n)), H)
    raise UsageError(f"unknown pool mode {mode!r}; expected one of {POOL_MODES}")


def regularizer_attention(alpha, eps: float = 1e-8):
    """Sum of log(alpha_j + eps); smaller for sparser weights."""
    if eps <= 0:
        raise DomainError("eps must be positive")
    if isinstance(alpha, Tensor):
        if np.any(alpha.data < 0):
            raise DomainError("attention weights must be non-negative")
        return T.total(T.log(T.add(alpha, eps)))
    alpha = np.asarray(alpha, dtype=np.float64)
    if np.any(alpha < 0):
        raise DomainError("attention weights must be non-negative")
    return float(np.log(alpha + eps).sum())


# ---------------------------------------------------------------------------
# public per-patch / per-bag API
# ---------------------------------------------------------------------------


@dataclass
class AttentionMap:
    weights: np.ndarray
    patch_ids: np.ndarray
    coordinates: Optional[np.ndarray] = None
    subject_id: str = ""
    gates: Optional[np.ndarray] = None


@dataclass
class LossBreakdown:
    total: float
    discriminative: float
    generative: float
    attention_reg: float


@dataclass
class BagOutput:
    y_hat: float
    attention: AttentionMap
    loss: Optional[LossBreakdown]
    pooled: np.ndarray


def encode_patch(x: np.ndarray, params: ModelParams) -> np.ndarray:
    return encode_bag(np.asarray(x)[None], params)[0]


def encode_bag(bag, params: ModelParams) -> np.ndarray:
    """Latent set H [N, d] of a bag (or a stacked patch array), eval mode."""
    patches = bag.patches if isinstance(bag, Bag) else np.asarray(bag)
    if len(patches) < 1:
        raise DomainError("cannot encode an empty bag")
    return encoder_forward(Graph(params), patches).data


def attention(H, params: ModelParams, subject_id: str = "", coordinates=None) -> AttentionMap:
    g = Graph(params)
    gates = attention_scores(g, Tensor(np.asarray(H), dtype=np.dtype(params.arch.dtype)))
    alpha = T.softmax(gates)
    return AttentionMap(alpha.data, np.arange(len(alpha.data)), coordinates, subject_id, gates.data)


def predict(v, params: ModelParams) -> float:
    v = np.asarray(v, dtype=np.float64).reshape(1, -1)
    g = Graph(params)
    out = T.affine(Tensor(v, dtype=np.dtype(params.arch.dtype)), g["predictor.out.W"], g["predictor.out.b"])
    return params.target_scale * float(out.data[0, 0]) + params.target_shift


def decode_latent(z, params: ModelParams) -> np.ndarray:
    z = np.asarray(z)
    if z.shape != (params.arch.latent_dim,):
        raise DimensionError(f"latent must have shape ({params.arch.latent_dim},), got {z.shape}")
    return decoder_forward(Graph(params), Tensor(z[None], dtype=np.dtype(params.arch.dtype))).data[0]


@dataclass
class ObjectiveConfig:
    lambda1: float = 0.0
    lambda2: float = 0.0
    eps: float = 1e-8
    pool_mode: str = "weighted"
    recon_loss: str = "mse"

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise UsageError("lambda1 and lambda2 must be non-negative")
        if self.eps <= 0:
            raise UsageError("eps must be positive")
        if self.pool_mode not in POOL_MODES:
            raise UsageError(f"unknown pool mode {self.pool_mode!r}")
        if self.recon_loss not in RECON_LOSSES:
            raise UsageError(f"unknown recon_loss {self.recon_loss!r}")


def _recon_per_patch(x_hat: Tensor, x: np.ndarray, kind: str) -> Tensor:
    n = x.shape[0]
    diff = T.reshape(T.sub(x_hat, Tensor(x, dtype=x_hat.dtype)), (n, -1))
    if kind == "mse":
        return T.mean(T.square(diff), axis=1)
    return T.sqrt(T.total(T.square(diff), axis=1))


def _term(name: str, bag: Bag, build) -> Tensor:
    try:
        out = build()
    except NumericError as exc:
        raise NumericError(f"{name} loss is not finite for bag {bag.subject_id!r}: {exc}") from exc
    if not np.isfinite(out.data):
        raise NumericError(f"{name} loss is not finite for bag {bag.subject_id!r}")
    return out


def forward_batch(bags: Sequence[Bag], params: ModelParams, obj: ObjectiveConfig, graph: Optional[Graph] = None,
                  with_loss: bool = True, decode: Optional[bool] = None):
    """Forward every bag of a step through one batched encoder/decoder pass.

    Returns ``(outputs, mean_total)`` where ``mean_total`` is the graph scalar
    averaged over bags (None when ``with_loss`` is False).
    """
    if not bags:
        raise DomainError("no bags to forward")
    g = graph or Graph(params)
    arch = params.arch
    sizes = [len(b) for b in bags]
    if min(sizes) < 1:
        raise DomainError("empty bag")
    patches = np.concatenate([b.patches for b in bags]).astype(arch.dtype, copy=False)
    H_all = encoder_forward(g, patches)
    if decode is None:
        decode = with_loss
    recon = _recon_per_patch(decoder_forward(g, H_all), patches, obj.recon_loss) if decode else None
    outputs, totals = [], []
    start = 0
    for bag, n in zip(bags, sizes):
        H = T.take(H_all, slice(start, start + n))
        gates = attention_scores(g, H)
        alpha = T.softmax(gates)
        v = pool(H, obj.pool_mode, alpha, gates)
        raw = T.affine(v, g["predictor.out.W"], g["predictor.out.b"])
        y_hat = params.target_scale * float(raw.data[0, 0]) + params.target_shift
        amap = AttentionMap(alpha.data, np.arange(n), bag.coordinates, bag.subject_id, gates.data)
        breakdown = None
        if with_loss:
            if bag.y is None:
                raise UsageError(f"bag {bag.subject_id!r} has no target")
            target = (float(bag.y) - params.target_shift) / params.target_scale
            sl = slice(start, start + n)
            l_d = _term("discriminative", bag, lambda: T.total(T.square(T.sub(raw, target))))
            l_g = _term("generative", bag, lambda: T.mean(T.take(recon, sl)))
            r = _term("attention_reg", bag, lambda: regularizer_attention(alpha, obj.eps))
            tot = T.add(T.add(l_d, T.mul(l_g, obj.lambda1)), T.mul(r, obj.lambda2))
            totals.append(tot)
            breakdown = LossBreakdown(float(tot.data), float(l_d.data), float(l_g.data), float(r.data))
        outputs.append(BagOutput(y_hat, amap, breakdown, v.data[0].copy()))
        start += n
    mean_total = None
    if with_loss:
        acc = totals[0]
        for t in totals[1:]:
            acc = T.add(acc, t)
        mean_total = T.mul(acc, 1.0 / len(totals))
    return outputs, mean_total


def forward_bag(bag: Bag, params: ModelParams, lambda1: float = 0.0, lambda2: float = 0.0, eps: float = 1e-8,
                pool_mode: str = "weighted", recon_loss: str = "mse"):
    """Eval-mode forward of one bag: ``(y_hat, AttentionMap, LossBreakdown)``."""
    obj = ObjectiveConfig(lambda1, lambda2, eps, pool_mode, recon_loss)
    outputs, _ = forward_batch([bag], params, obj, with_loss=bag.y is not None)
    out = outputs[0]
    return out.y_hat, out.attention, out.loss


def predict_bags(bags: Sequence[Bag], params: ModelParams, pool_mode: str, chunk: int = 16) -> list:
    """Eval-mode outputs (no losses, no decoding) for many bags."""
    obj = ObjectiveConfig(pool_mode=pool_mode)
    results = []
    for i in range(0, len(bags), chunk):
        outs, _ = forward_batch(bags[i:i + chunk], params, obj, with_loss=False)
        results.extend(outs)
    return results


def loss_and_grads(bags: Sequence[Bag], params: ModelParams, obj: ObjectiveConfig, training: bool = True):
    """Mean objective over ``bags`` and its gradient for every parameter array."""
    g = Graph(params, training=training, track=True)
    outputs, mean_total = forward_batch(bags, params, obj, graph=g)
    mean_total.backward()
    return float(mean_total.data), g.grads(), outputs, g.new_bn_state


def spot_check_gradients(bags: Sequence[Bag], params: ModelParams, obj: ObjectiveConfig, per_group: int = 3,
                         seed: int = 0, step: float = 1e-6) -> dict:
    """Central-difference check of the joint objective on random coordinates.

    Picks ``per_group`` random coordinates in each parameter group and returns
    the worst relative error ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``
    per group. Batch norm runs in eval mode so the objective is a fixed function
    of the parameters.
    """
    _, grads, _, _ = loss_and_grads(bags, params, obj, training=False)
    rng = np.random.default_rng(seed)

    def objective(p: ModelParams) -> float:
        _, total = forward_batch(bags, p, obj)
        return float(total.data)

    report = {}
    for group in GROUPS:
        names = sorted(params.group(group))
        worst = 0.0
        for _ in range(per_group):
            name = names[int(rng.integers(len(names)))]
            idx = tuple(int(rng.integers(s)) for s in params.arrays[name].shape)
            shifted = []
            for sign in (1.0, -1.0):
                p = params.copy()
                p.arrays[name][idx] += sign * step
                shifted.append(objective(p))
            numeric = (shifted[0] - shifted[1]) / (2.0 * step)
            analytic = float(grads[name][idx])
            worst = max(worst, abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8))
        report[group] = worst
    return report
