"""Prototype network: feature extractor, prototype layer, top-k pooling, two linear heads."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import MARGIN_TYPES
from .errors import ConfigError

N_TYPES = len(MARGIN_TYPES)

# conv(3x3,16)-relu-conv(3x3,16)-relu-pool-conv(3x3,32)-relu-pool-conv(1x1,64)-relu-conv(1x1,64)-sigmoid
# 3x3 convs replicate the border instead of zero padding, so border patches carry no padding signature
DEFAULT_LAYERS = (
    {"kind": "conv", "out": 16, "k": 3, "stride": 1, "pad": 1, "pad_mode": "edge", "act": "relu",
     "addon": False},
    {"kind": "conv", "out": 16, "k": 3, "stride": 1, "pad": 1, "pad_mode": "edge", "act": "relu",
     "addon": False},
    {"kind": "pool", "size": 2},
    {"kind": "conv", "out": 32, "k": 3, "stride": 1, "pad": 1, "pad_mode": "edge", "act": "relu",
     "addon": False},
    {"kind": "pool", "size": 2},
    {"kind": "conv", "out": 64, "k": 1, "stride": 1, "pad": 0, "act": "relu", "addon": True},
    {"kind": "conv", "out": 64, "k": 1, "stride": 1, "pad": 0, "act": "sigmoid", "addon": True},
)


def conv_layers(channels=(16, 16, 32, 64, 64)) -> tuple[dict, ...]:
    """The default layer stack with different channel widths."""
    c1, c2, c3, c4, c5 = channels
    layers = [dict(layer) for layer in DEFAULT_LAYERS]
    for layer, c in zip([l for l in layers if l["kind"] == "conv"], (c1, c2, c3, c4, c5)):
        layer["out"] = c
    return tuple(layers)


@dataclass
class ModelConfig:
    image_size: tuple[int, int] = (64, 64)
    in_channels: int = 1
    layers: tuple = DEFAULT_LAYERS
    prototypes_per_type: int = 5
    pool_fraction: float = 0.05
    epsilon_sim: float = 1e-4

    def feature_shape(self) -> tuple[int, int, int]:
        c, (h, w) = self.in_channels, self.image_size
        for layer in self.layers:
            if layer["kind"] == "conv":
                h = (h + 2 * layer["pad"] - layer["k"]) // layer["stride"] + 1
                w = (w + 2 * layer["pad"] - layer["k"]) // layer["stride"] + 1
                c = layer["out"]
            elif layer["kind"] == "pool":
                h, w = h // layer["size"], w // layer["size"]
            else:
                raise ConfigError(f"unknown layer kind {layer['kind']!r}")
        return c, h, w

    @property
    def k(self) -> int:
        _, h, w = self.feature_shape()
        k = math.floor(self.pool_fraction * h * w)
        if k < 1:
            raise ConfigError(f"pool_fraction {self.pool_fraction} gives k={k} on a {h}x{w} feature map")
        return k

    def to_dict(self) -> dict:
        return {"image_size": list(self.image_size), "in_channels": self.in_channels,
                "layers": [dict(l) for l in self.layers], "prototypes_per_type": self.prototypes_per_type,
                "pool_fraction": self.pool_fraction, "epsilon_sim": self.epsilon_sim}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(image_size=tuple(d["image_size"]), in_channels=d["in_channels"],
                   layers=tuple(dict(l) for l in d["layers"]), prototypes_per_type=d["prototypes_per_type"],
                   pool_fraction=d["pool_fraction"], epsilon_sim=d["epsilon_sim"])


@dataclass
class Prototype:
    vector: np.ndarray
    margin_type: str
    source: tuple[str, int, int] | None = None
    active: bool = True


@dataclass
class ModelState:
    config: ModelConfig
    params: dict[str, np.ndarray]
    proto_types: np.ndarray
    proto_active: np.ndarray
    proto_sources: list = field(default_factory=list)
    stage_b_done: bool = False

    @property
    def k(self) -> int:
        return self.config.k

    @property
    def num_prototypes(self) -> int:
        return len(self.proto_types)

    @property
    def active_indices(self) -> np.ndarray:
        return np.flatnonzero(self.proto_active)

    def prototypes(self) -> list[Prototype]:
        return [Prototype(self.params["prototypes"][j].copy(), MARGIN_TYPES[t], self.proto_sources[j],
                          bool(self.proto_active[j])) for j, t in enumerate(self.proto_types)]

    def conv_param_names(self, addon: bool | None = None) -> list[str]:
        names = []
        for i, layer in enumerate(self.config.layers):
            if layer["kind"] == "conv" and (addon is None or layer["addon"] == addon):
                names += [f"conv{i}.weight", f"conv{i}.bias"]
        return names

    def copy(self) -> "ModelState":
        return ModelState(self.config, {k: v.copy() for k, v in self.params.items()}, self.proto_types.copy(),
                          self.proto_active.copy(), list(self.proto_sources), self.stage_b_done)

    def tensors(self, trainable=()) -> dict[str, Tensor]:
        """Tensor views over the parameter arrays (shared memory)."""
        return {k: Tensor(v, requires_grad=k in trainable) for k, v in self.params.items()}


def h1_initial(proto_types: np.ndarray) -> np.ndarray:
    """+1 where the prototype's type matches the output row, -1 otherwise."""
    return np.where(np.arange(N_TYPES)[:, None] == proto_types[None, :], 1.0, -1.0)


def init_model(config: ModelConfig, rng: np.random.Generator) -> ModelState:
    """Random extractor (variance-scaled normal), prototypes ~ U[0,1]^C, h1 at +/-1, h2 zeroed."""
    params: dict[str, np.ndarray] = {}
    c = config.in_channels
    for i, layer in enumerate(config.layers):
        if layer["kind"] != "conv":
            continue
        fan_in = c * layer["k"] * layer["k"]
        params[f"conv{i}.weight"] = rng.normal(0.0, math.sqrt(2.0 / fan_in), (layer["out"], c, layer["k"], layer["k"]))
        params[f"conv{i}.bias"] = np.zeros(layer["out"])
        c = layer["out"]
    m = config.prototypes_per_type * N_TYPES
    proto_types = np.repeat(np.arange(N_TYPES), config.prototypes_per_type)
    params["prototypes"] = rng.uniform(0.0, 1.0, (m, c))
    params["h1"] = h1_initial(proto_types)
    params["h2.weight"] = np.zeros(N_TYPES)
    params["h2.shift"] = np.zeros(1)
    params["h2.scale"] = np.ones(1)
    return ModelState(config, params, proto_types, np.ones(m, dtype=bool), [None] * m)


# forward pieces -------------------------------------------------------------

def _as_batch(images) -> np.ndarray:
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 2:
        x = x[None, None]
    elif x.ndim == 3:
        x = x[:, None]
    return x


def run_layers(config: ModelConfig, x: Tensor, t: dict[str, Tensor], start: int = 0, stop: int | None = None) -> Tensor:
    for i, layer in enumerate(config.layers[start:stop], start):
        if layer["kind"] == "pool":
            x = ad.avg_pool2d(x, layer["size"])
            continue
        x = ad.conv2d(x, t[f"conv{i}.weight"], t[f"conv{i}.bias"], layer["stride"], layer["pad"],
                      layer.get("pad_mode", "zeros"))
        x = ad.elementwise(x, layer["act"])
    return x


def first_addon_layer(config: ModelConfig) -> int:
    return next(i for i, l in enumerate(config.layers) if l.get("addon"))


def extract_features(state: ModelState, images) -> np.ndarray:
    """Feature maps [N,C,Hf,Wf] (or [C,Hf,Wf] for a single 2-D image), values in (0,1)."""
    single = np.ndim(images) == 2
    x = _as_batch(images)
    if x.shape[-2:] != tuple(state.config.image_size):
        raise ValueError(f"image size {x.shape[-2:]} does not match configured {tuple(state.config.image_size)}")
    with ad.no_grad():
        f = run_layers(state.config, Tensor(x), state.tensors()).data
    return f[0] if single else f


def patches(feats: Tensor) -> Tensor:
    """[N,C,Hf,Wf] -> [N,L,C] with L enumerating patches row-major."""
    n, c, h, w = feats.shape
    return feats.reshape(n, c, h * w).transpose(0, 2, 1)


def similarity_map(featmap: np.ndarray, prototype: np.ndarray, epsilon_sim: float) -> np.ndarray:
    """log((d+1)/(d+eps)) at every patch of one [C,Hf,Wf] feature map."""
    c, h, w = featmap.shape
    if len(prototype) != c:
        raise ValueError(f"channel mismatch: prototype has {len(prototype)} channels, features {c}")
    if not 0 < epsilon_sim < 1:
        raise ValueError("epsilon_sim must lie in (0, 1)")
    z = Tensor(featmap.reshape(1, c, h * w).transpose(0, 2, 1))
    d = ad.squared_distances(z, Tensor(prototype[None, :]))
    return ad.similarity(d, epsilon_sim).data.reshape(h, w)


def pool_topk(simmap: np.ndarray, k: int) -> float:
    flat = np.asarray(simmap, dtype=np.float64).reshape(-1)
    if not 1 <= k <= flat.size:
        raise ValueError(f"k={k} outside [1, {flat.size}]")
    return float(ad.topk_mean(Tensor(flat), k).data)


def margin_logits_t(scores: Tensor, h1: Tensor) -> Tensor:
    """[N,m] scores x [3,m] weights -> [N,3]; contributions summed in prototype order."""
    contrib = ad.mul(ad.reshape(scores, (scores.shape[0], 1, scores.shape[1])), h1)
    return ad.seqsum(contrib, axis=-1)


def margin_logits(state: ModelState, scores: np.ndarray) -> np.ndarray:
    """Margin logits for similarity scores over the active prototypes (length m_active)."""
    scores = np.asarray(scores, dtype=np.float64)
    single = scores.ndim == 1
    h1 = state.params["h1"][:, state.active_indices]
    if scores.shape[-1] != h1.shape[1]:
        raise ValueError(f"expected {h1.shape[1]} scores, got {scores.shape[-1]}")
    out = margin_logits_t(Tensor(np.atleast_2d(scores)), Tensor(h1)).data
    return out[0] if single else out


def softmax(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def malignancy_from(weights, shift: float, scale: float, logits: np.ndarray):
    """y_mal = w . logits; probability = sigmoid((y_mal - shift) / scale)."""
    y = np.asarray(logits, dtype=np.float64) @ np.asarray(weights, dtype=np.float64)
    prob = ad._sigmoid(np.atleast_1d((y - shift) / scale))
    return y, (prob if np.ndim(y) else float(prob[0]))


def malignancy(state: ModelState, logits: np.ndarray):
    return malignancy_from(state.params["h2.weight"], float(state.params["h2.shift"][0]),
                           float(state.params["h2.scale"][0]), logits)


@dataclass
class ForwardResult:
    active: np.ndarray       # indices of the prototypes behind each score column
    features: np.ndarray     # [N,C,Hf,Wf]
    distances: np.ndarray    # [N,m,Hf,Wf]
    sim_maps: np.ndarray     # [N,m,Hf,Wf]
    scores: np.ndarray       # [N,m]
    margin_logits: np.ndarray
    margin_probs: np.ndarray
    malignancy_score: np.ndarray
    malignancy_prob: np.ndarray


@dataclass
class Graph:
    features: Tensor
    distances: Tensor   # [N,m,L]
    sim: Tensor         # [N,m,L]
    scores: Tensor
    logits: Tensor
    active: np.ndarray


def build_graph(state: ModelState, x: Tensor, t: dict[str, Tensor], features: Tensor | None = None,
                start: int = 0) -> Graph:
    """Differentiable forward through h1. ``features``/``start`` allow resuming from a cached layer output."""
    feats = run_layers(state.config, x if features is None else features, t, start=start)
    active = state.active_indices
    protos = t["prototypes"] if len(active) == state.num_prototypes else t["prototypes"][active]
    h1 = t["h1"] if len(active) == state.num_prototypes else t["h1"][:, active]
    d = ad.squared_distances(patches(feats), protos)
    sim = ad.similarity(d, state.config.epsilon_sim)
    scores = ad.topk_mean(sim, state.k)
    return Graph(feats, d, sim, scores, margin_logits_t(scores, h1), active)


def forward(state: ModelState, images, batch_size: int = 64) -> ForwardResult:
    """Inference over one image [H,W] or a stack [N,H,W]; pure, no state mutation."""
    x = _as_batch(images)
    if x.shape[-2:] != tuple(state.config.image_size):
        raise ValueError(f"image size {x.shape[-2:]} does not match configured {tuple(state.config.image_size)}")
    _, hf, wf = state.config.feature_shape()
    parts = []
    t = state.tensors()
    with ad.no_grad():
        for s in range(0, len(x), batch_size):
            g = build_graph(state, Tensor(x[s:s + batch_size]), t)
            parts.append((g.features.data, g.distances.data, g.sim.data, g.scores.data, g.logits.data))
    feats, d, sim, scores, logits = (np.concatenate(p) for p in zip(*parts))
    n, m = scores.shape
    y, prob = malignancy(state, logits)
    return ForwardResult(state.active_indices, feats, d.reshape(n, m, hf, wf), sim.reshape(n, m, hf, wf),
                         scores, logits, softmax(logits), np.atleast_1d(y), np.atleast_1d(prob))
