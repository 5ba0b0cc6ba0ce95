"""Mixture-of-experts classifier with a random switch gate.

The model combines N expert CNNs through a gating network whose logits can
be randomly permuted at inference time, so an attacker never faces a fixed
set of mixture weights. Also provides the single-expert baseline classifier
and the binary model container (magic "IMMU").
"""

from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as tz
from .layers import (LAYER_KINDS, LayerSpec, apply_layer, expert_backbone,
                     find_cam_layer, init_params, out_shape)
from .tensor import ShapeError, Tensor

MODEL_MAGIC = b"IMMU"
MODEL_VERSION = 1


@dataclass(frozen=True)
class RsgMode:
    """How the gate logits are shuffled on a forward pass.

    kind is one of identity, fresh_permutation, fixed_permutation; a fixed
    mode carries its permutation (0-based, out[i] = in[perm[i]]).
    """

    kind: str
    perm: tuple[int, ...] | None = None

    IDENTITY = "identity"
    FRESH = "fresh_permutation"
    FIXED = "fixed_permutation"

    @staticmethod
    def identity() -> "RsgMode":
        return RsgMode(RsgMode.IDENTITY)

    @staticmethod
    def fresh() -> "RsgMode":
        return RsgMode(RsgMode.FRESH)

    @staticmethod
    def fixed(perm) -> "RsgMode":
        perm = tuple(int(p) for p in perm)
        if sorted(perm) != list(range(len(perm))):
            raise ValueError(f"fixed_permutation: {perm} is not a permutation of 0..{len(perm) - 1}")
        return RsgMode(RsgMode.FIXED, perm)

    @staticmethod
    def parse(name: str) -> "RsgMode":
        if name == RsgMode.IDENTITY:
            return RsgMode.identity()
        if name == RsgMode.FRESH:
            return RsgMode.fresh()
        raise ValueError(f"unknown rsg mode {name!r}; expected identity or fresh_permutation")


def rsg_permute(gate_logits: Tensor, rsg: RsgMode, rng: np.random.Generator | None = None) -> Tensor:
    """Apply the configured switch to a (batch, N) gate-logit tensor.

    Fresh mode draws one uniform permutation per call, so every inference
    presents a differently wired gate.
    """
    n = gate_logits.shape[-1]
    if rsg.kind == RsgMode.IDENTITY:
        return gate_logits
    if rsg.kind == RsgMode.FIXED:
        if len(rsg.perm) != n:
            raise ValueError(f"rsg permutation of length {len(rsg.perm)} on {n} gate logits")
        return tz.permute_columns(gate_logits, rsg.perm)
    if rsg.kind == RsgMode.FRESH:
        if rng is None:
            raise ValueError("fresh_permutation requires an rng")
        return tz.permute_columns(gate_logits, rng.permutation(n))
    raise ValueError(f"unknown rsg kind {rsg.kind!r}")


@dataclass
class ForwardRecord:
    """Everything one forward pass produces that training or attacks need."""

    mixture: Tensor                 # (batch, n_classes) probabilities
    expert_probs: list[Tensor]      # per-expert (batch, n_classes) probabilities
    expert_logits: list[Tensor]     # per-expert pre-softmax scores
    gate_weights: Tensor            # (batch, N) probability rows
    cam_activations: list[Tensor]   # per-expert CAM-layer activations, graph-linked
    input_tensor: Tensor            # the tensor the batch entered through


def combine_mixture(gate_weights: Tensor, expert_probs: list[Tensor]) -> Tensor:
    """Mixture output: sum_i g_i * p_i with g one weight column per expert."""
    mixture = None
    for i, probs in enumerate(expert_probs):
        term = tz.select_column(gate_weights, i) * probs
        mixture = term if mixture is None else mixture + term
    return mixture


class ExpertNetwork:
    """One expert CNN: ordered layer specs, their weights, and the index of
    the conv layer Grad-CAM targets."""

    def __init__(self, specs: list[LayerSpec], weights: list[dict[str, Tensor]],
                 cam_layer_index: int):
        if not (0 <= cam_layer_index < len(specs)) or specs[cam_layer_index].kind != "conv2d":
            raise ValueError(f"cam_layer_index {cam_layer_index} does not point at a conv layer")
        self.specs = list(specs)
        self.weights = list(weights)
        self.cam_layer_index = cam_layer_index

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Returns (logits, cam_activation)."""
        cam = None
        h = x
        for i, (spec, w) in enumerate(zip(self.specs, self.weights)):
            h = apply_layer(spec, h, w)
            if i == self.cam_layer_index:
                cam = h
        return h, cam

    def parameters(self):
        for w in self.weights:
            for key in ("weight", "bias"):
                if key in w:
                    yield w[key]


class GateNetwork:
    """Global average pool of the input followed by one linear layer."""

    def __init__(self, weight: Tensor, bias: Tensor):
        self.weight = weight
        self.bias = bias

    @property
    def n_outputs(self) -> int:
        return self.weight.shape[1]

    def forward(self, x: Tensor) -> Tensor:
        return tz.linear(tz.spatial_mean(x), self.weight, self.bias)

    def parameters(self):
        yield self.weight
        yield self.bias


class _BaseModel:
    """Shared plumbing for the MoE model and the single-expert baseline."""

    input_shape: tuple
    n_classes: int
    rng_seed: int
    norm_mean: np.ndarray
    norm_std: np.ndarray

    def parameters(self):
        raise NotImplementedError

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def param_checksum(self) -> str:
        """SHA-256 over all parameter bytes, in order."""
        h = hashlib.sha256()
        for p in self.parameters():
            h.update(p.data.astype("<f8").tobytes())
        return h.hexdigest()

    def _prepare_input(self, x) -> Tensor:
        t = x if isinstance(x, Tensor) else Tensor(x)
        if t.data.ndim != 4 or t.shape[1:] != tuple(self.input_shape):
            raise ShapeError(f"model input {t.shape} does not match "
                             f"(batch, {', '.join(map(str, self.input_shape))})")
        return t

    def _normalize(self, t: Tensor) -> Tensor:
        c = self.input_shape[0]
        mean = self.norm_mean.reshape(1, c, 1, 1)
        std = self.norm_std.reshape(1, c, 1, 1)
        return (t - Tensor(mean)) / Tensor(std)

    def predict(self, x, rsg: RsgMode | None = None, rng=None) -> np.ndarray:
        """Argmax class per sample; ties resolve to the lowest class index."""
        rec = self.forward(x, rsg=rsg, rng=rng)
        return np.argmax(rec.mixture.data, axis=1)


class MoEModel(_BaseModel):
    """N expert networks aggregated by a (switchable) gate."""

    def __init__(self, experts: list[ExpertNetwork], gate: GateNetwork,
                 n_classes: int, input_shape: tuple, rng_seed: int = 0,
                 norm_mean=None, norm_std=None):
        if len(experts) < 2:
            raise ValueError(f"a mixture needs at least 2 experts, got {len(experts)}")
        if gate.n_outputs != len(experts):
            raise ShapeError(f"gate emits {gate.n_outputs} logits for {len(experts)} experts")
        heads = {e.specs[-1].out_features for e in experts}
        if heads != {int(n_classes)}:
            raise ShapeError(f"experts must all emit {n_classes} logits, got {sorted(heads)}")
        self.experts = experts
        self.gate = gate
        self.n_classes = int(n_classes)
        self.input_shape = tuple(int(d) for d in input_shape)
        self.rng_seed = int(rng_seed)
        c = self.input_shape[0]
        self.norm_mean = np.zeros(c) if norm_mean is None else np.asarray(norm_mean, dtype=np.float64)
        self.norm_std = np.ones(c) if norm_std is None else np.asarray(norm_std, dtype=np.float64)
        if np.any(self.norm_std <= 0):
            raise ValueError("normalization stds must be positive")

    @property
    def n_experts(self) -> int:
        return len(self.experts)

    def parameters(self):
        for e in self.experts:
            yield from e.parameters()
        yield from self.gate.parameters()

    def forward(self, x, rsg: RsgMode | None = None, rng=None) -> ForwardRecord:
        """Run the mixture on a pixel-space batch in [0, 1].

        Gate logits are permuted per ``rsg`` before their softmax; the gate
        sees the raw input, experts see the normalized one.
        """
        xt = self._prepare_input(x)
        z = self._normalize(xt)
        logits, probs, cams = [], [], []
        for expert in self.experts:
            zl, cam = expert.forward(z)
            logits.append(zl)
            probs.append(tz.softmax(zl))
            cams.append(cam)
        gate_logits = rsg_permute(self.gate.forward(xt), rsg or RsgMode.identity(), rng)
        gate_weights = tz.softmax(gate_logits)
        mixture = combine_mixture(gate_weights, probs)
        return ForwardRecord(mixture, probs, logits, gate_weights, cams, xt)


class SingleExpertClassifier(_BaseModel):
    """One expert CNN with no gate: the ensemble-free baseline."""

    def __init__(self, expert: ExpertNetwork, n_classes: int, input_shape: tuple,
                 rng_seed: int = 0, norm_mean=None, norm_std=None):
        self.expert = expert
        self.n_classes = int(n_classes)
        self.input_shape = tuple(int(d) for d in input_shape)
        self.rng_seed = int(rng_seed)
        c = self.input_shape[0]
        self.norm_mean = np.zeros(c) if norm_mean is None else np.asarray(norm_mean, dtype=np.float64)
        self.norm_std = np.ones(c) if norm_std is None else np.asarray(norm_std, dtype=np.float64)

    @property
    def n_experts(self) -> int:
        return 1

    @property
    def experts(self) -> list[ExpertNetwork]:
        return [self.expert]

    def parameters(self):
        yield from self.expert.parameters()

    def forward(self, x, rsg: RsgMode | None = None, rng=None) -> ForwardRecord:
        xt = self._prepare_input(x)
        z = self._normalize(xt)
        logits, cam = self.expert.forward(z)
        probs = tz.softmax(logits)
        ones = Tensor(np.ones((xt.shape[0], 1)))
        return ForwardRecord(probs, [probs], [logits], ones, [cam], xt)


def build_expert(input_shape: tuple, n_classes: int, rng: np.random.Generator,
                 channels: tuple = (8, 16, 32)) -> ExpertNetwork:
    specs = expert_backbone(input_shape, n_classes, channels)
    weights = [init_params(s, rng) for s in specs]
    return ExpertNetwork(specs, weights, find_cam_layer(specs, input_shape))


def build_moe(input_shape: tuple, n_classes: int, n_experts: int = 5, seed: int = 0,
              channels: tuple = (8, 16, 32), norm_mean=None, norm_std=None) -> MoEModel:
    """Construct a fresh mixture with independently initialized experts."""
    if n_experts < 2:
        raise ValueError(f"a mixture needs at least 2 experts, got {n_experts}")
    streams = np.random.SeedSequence(seed).spawn(n_experts + 1)
    experts = [build_expert(input_shape, n_classes, np.random.default_rng(streams[i]), channels)
               for i in range(n_experts)]
    gate_rng = np.random.default_rng(streams[-1])
    c = input_shape[0]
    gate = GateNetwork(Tensor(gate_rng.normal(0.0, 0.1, (c, n_experts)), requires_grad=True),
                       Tensor(np.zeros(n_experts), requires_grad=True))
    return MoEModel(experts, gate, n_classes, input_shape, rng_seed=seed,
                    norm_mean=norm_mean, norm_std=norm_std)


def build_single(input_shape: tuple, n_classes: int, seed: int = 0,
                 channels: tuple = (8, 16, 32), norm_mean=None, norm_std=None) -> SingleExpertClassifier:
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(1)[0])
    expert = build_expert(input_shape, n_classes, rng, channels)
    return SingleExpertClassifier(expert, n_classes, input_shape, rng_seed=seed,
                                  norm_mean=norm_mean, norm_std=norm_std)


# ---------------------------------------------------------------------------
# binary model container
# ---------------------------------------------------------------------------

_KIND_CODES = {k: i + 1 for i, k in enumerate(LAYER_KINDS)}
_CODE_KINDS = {v: k for k, v in _KIND_CODES.items()}


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise ValueError(f"truncated model stream at byte {self.pos}: "
                             f"expected {n} more bytes for {what}, "
                             f"have {len(self.data) - self.pos}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u64(self, what: str) -> int:
        return struct.unpack("<Q", self.take(8, what))[0]

    def f64s(self, n: int, what: str) -> np.ndarray:
        return np.frombuffer(self.take(8 * n, what), dtype="<f8").astype(np.float64)


def _encode_spec(spec: LayerSpec) -> bytes:
    return struct.pack("<B6I", _KIND_CODES[spec.kind], spec.in_channels, spec.out_channels,
                       spec.kernel, spec.stride, spec.padding, spec.in_features) + \
        struct.pack("<I", spec.out_features)


def _decode_spec(r: _Reader) -> LayerSpec:
    code = r.take(1, "layer kind")[0]
    if code not in _CODE_KINDS:
        raise ValueError(f"unknown layer kind code {code} at byte {r.pos - 1}")
    fields = struct.unpack("<7I", r.take(28, "layer fields"))
    return LayerSpec(_CODE_KINDS[code], in_channels=fields[0], out_channels=fields[1],
                     kernel=fields[2], stride=fields[3], padding=fields[4],
                     in_features=fields[5], out_features=fields[6])


def _param_shapes(spec: LayerSpec) -> list[tuple]:
    if spec.kind == "conv2d":
        return [(spec.out_channels, spec.in_channels, spec.kernel, spec.kernel),
                (spec.out_channels,)]
    if spec.kind == "linear":
        return [(spec.in_features, spec.out_features), (spec.out_features,)]
    return []


def serialize_model(model: _BaseModel) -> bytes:
    """Encode a model to the IMMU container: magic, version, manifest, then
    parameters as little-endian float64 in manifest order."""
    specs = model.experts[0].specs
    c, h, w = model.input_shape
    out = bytearray()
    out += MODEL_MAGIC
    out.append(MODEL_VERSION)
    out += struct.pack("<5I", model.n_experts, model.n_classes, c, h, w)
    out += struct.pack("<Q", model.rng_seed & 0xFFFFFFFFFFFFFFFF)
    out += model.norm_mean.astype("<f8").tobytes()
    out += model.norm_std.astype("<f8").tobytes()
    out += struct.pack("<I", len(specs))
    for spec in specs:
        out += _encode_spec(spec)
    out += struct.pack("<I", model.experts[0].cam_layer_index)
    for expert in model.experts:
        for p in expert.parameters():
            out += p.data.astype("<f8").tobytes()
    if model.n_experts >= 2:
        for p in model.gate.parameters():
            out += p.data.astype("<f8").tobytes()
    return bytes(out)


def deserialize_model(data: bytes) -> _BaseModel:
    """Decode an IMMU container; rejects bad magic/version before reading any
    model structure and truncation with the failing byte position."""
    if data[:4] != MODEL_MAGIC:
        raise ValueError(f"bad magic {data[:4]!r}, expected {MODEL_MAGIC!r}")
    if len(data) < 5 or data[4] != MODEL_VERSION:
        got = data[4] if len(data) > 4 else None
        raise ValueError(f"unsupported model format version {got}, expected {MODEL_VERSION}")
    r = _Reader(data)
    r.pos = 5
    n_experts = r.u32("expert count")
    n_classes = r.u32("class count")
    c, h, w = (r.u32("input shape") for _ in range(3))
    if n_experts < 1 or n_classes < 2 or min(c, h, w) < 1:
        raise ValueError(f"invalid manifest: {n_experts} experts, {n_classes} classes, "
                         f"input ({c}, {h}, {w})")
    seed = r.u64("rng seed")
    mean = r.f64s(c, "channel means")
    std = r.f64s(c, "channel stds")
    n_layers = r.u32("layer count")
    specs = [_decode_spec(r) for _ in range(n_layers)]
    cam_index = r.u32("cam layer index")

    expected = r.pos
    per_expert = [shp for s in specs for shp in _param_shapes(s)]
    expected += n_experts * sum(int(np.prod(s)) for s in per_expert) * 8
    if n_experts >= 2:
        expected += (c * n_experts + n_experts) * 8
    if len(data) != expected:
        raise ValueError(f"model stream length {len(data)} does not match "
                         f"manifest-implied length {expected}")

    experts = []
    for _ in range(n_experts):
        weights = []
        for spec in specs:
            shapes = _param_shapes(spec)
            if shapes:
                wt = Tensor(r.f64s(int(np.prod(shapes[0])), "weights").reshape(shapes[0]),
                            requires_grad=True)
                bt = Tensor(r.f64s(int(np.prod(shapes[1])), "bias").reshape(shapes[1]),
                            requires_grad=True)
                weights.append({"weight": wt, "bias": bt})
            else:
                weights.append({})
        experts.append(ExpertNetwork(specs, weights, cam_index))
    if n_experts == 1:
        return SingleExpertClassifier(experts[0], n_classes, (c, h, w), rng_seed=seed,
                                      norm_mean=mean, norm_std=std)
    gw = Tensor(r.f64s(c * n_experts, "gate weight").reshape(c, n_experts), requires_grad=True)
    gb = Tensor(r.f64s(n_experts, "gate bias"), requires_grad=True)
    return MoEModel(experts, GateNetwork(gw, gb), n_classes, (c, h, w), rng_seed=seed,
                    norm_mean=mean, norm_std=std)


def save_model(model: _BaseModel, path: str) -> None:
    """Write through a temp file and rename, so a crash never leaves a
    partial model behind."""
    blob = serialize_model(model)
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def load_model(path: str) -> _BaseModel:
    with open(path, "rb") as fh:
        return deserialize_model(fh.read())
