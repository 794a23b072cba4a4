"""MLP parameters, application, Adam, and the parameter checkpoint format."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

ACTIVATIONS = ("elu", "tanh", "relu")


@dataclass(frozen=True)
class MlpParams:
    """Weights and biases of a fully connected network.

    ``layers`` holds ``(W, b)`` pairs with ``W`` of shape ``(n_in, n_out)``.
    Entries are arrays, or graph nodes once bound with :func:`bind`.
    """

    layers: tuple
    activation: str = "elu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def sizes(self) -> list[int]:
        dims = [np.shape(self.layers[0][0])[0]]
        dims += [np.shape(w)[1] for w, _ in self.layers]
        return dims

    @property
    def in_dim(self) -> int:
        return np.shape(self.layers[0][0])[0]

    @property
    def out_dim(self) -> int:
        return np.shape(self.layers[-1][0])[1]

    def named(self, prefix: str) -> dict:
        out = {}
        for i, (w, b) in enumerate(self.layers):
            out[f"{prefix}.{i}.W"] = w
            out[f"{prefix}.{i}.b"] = b
        return out

    def replace_named(self, prefix: str, values: dict) -> "MlpParams":
        layers = tuple(
            (values[f"{prefix}.{i}.W"], values[f"{prefix}.{i}.b"]) for i in range(len(self.layers))
        )
        return MlpParams(layers, self.activation)


def init_mlp(sizes, rng, activation="elu", out_scale=1.0) -> MlpParams:
    """Uniform fan-in initialisation; the last layer is scaled by ``out_scale``."""
    layers = []
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = 1.0 / np.sqrt(n_in)
        w = rng.uniform(-bound, bound, size=(n_in, n_out))
        b = rng.uniform(-bound, bound, size=n_out)
        if i == len(sizes) - 2:
            w, b = w * out_scale, b * out_scale
        layers.append((w, b))
    return MlpParams(tuple(layers), activation)


def bind(graph: ad.Graph, params: MlpParams, prefix: str) -> MlpParams:
    """Replace every array in ``params`` by a named graph leaf."""
    layers = tuple(
        (graph.leaf(f"{prefix}.{i}.W"), graph.leaf(f"{prefix}.{i}.b"))
        for i in range(len(params.layers))
    )
    return MlpParams(layers, params.activation)


_ACT = {"elu": ad.elu, "tanh": ad.tanh, "relu": ad.relu}


def mlp_apply(params: MlpParams, x):
    """Batched forward pass; no activation after the last layer.

    Works on arrays (eager) or graph nodes. ``x`` may carry any number of
    leading batch dimensions.
    """
    if not isinstance(x, ad.Node) and not isinstance(params.layers[0][0], ad.Node):
        if np.shape(x)[-1] != params.in_dim:
            raise ValueError(f"input last dimension {np.shape(x)[-1]} != network input {params.in_dim}")
    act = _ACT[params.activation]
    h = x
    last = len(params.layers) - 1
    for i, (w, b) in enumerate(params.layers):
        h = ad.add(ad.matmul(h, w), b)
        if i < last:
            h = act(h)
    return h


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class Adam:
    """Adam over a dict of named arrays. Updates return new arrays."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: dict, grads: dict) -> dict:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        out = {}
        for name, p in params.items():
            g = grads[name]
            m = self.beta1 * self.m.get(name, 0.0) + (1.0 - self.beta1) * g
            v = self.beta2 * self.v.get(name, 0.0) + (1.0 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            out[name] = p - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return out


def polyak(target: dict, online: dict, rate: float) -> dict:
    return {k: (1.0 - rate) * target[k] + rate * online[k] for k in target}


# ---------------------------------------------------------------------------
# checkpoint format: one JSON line, then little-endian float64 payload


def dump_params(params: MlpParams, fh, seed=None, name=None) -> None:
    meta = {
        "kind": "mlp",
        "name": name,
        "activation": params.activation,
        "shapes": [[list(np.shape(w)), list(np.shape(b))] for w, b in params.layers],
        "seed": seed,
    }
    fh.write(json.dumps(meta, sort_keys=True).encode() + b"\n")
    for w, b in params.layers:
        fh.write(np.asarray(w, dtype="<f8").tobytes())
        fh.write(np.asarray(b, dtype="<f8").tobytes())


def load_params(fh) -> tuple[MlpParams, dict]:
    line = fh.readline()
    if not line.endswith(b"\n"):
        raise ValueError("checkpoint block missing JSON header line")
    meta = json.loads(line)
    layers = []
    for wshape, bshape in meta["shapes"]:
        layers.append((_read_array(fh, wshape), _read_array(fh, bshape)))
    return MlpParams(tuple(layers), meta["activation"]), meta


def dump_array(arr, fh, name=None) -> None:
    arr = np.asarray(arr, dtype="<f8")
    meta = {"kind": "array", "name": name, "shape": list(arr.shape)}
    fh.write(json.dumps(meta, sort_keys=True).encode() + b"\n")
    fh.write(arr.tobytes())


def load_array(fh) -> tuple[np.ndarray, dict]:
    meta = json.loads(fh.readline())
    return _read_array(fh, meta["shape"]), meta


def _read_array(fh, shape):
    count = int(np.prod(shape)) if shape else 1
    raw = fh.read(8 * count)
    if len(raw) != 8 * count:
        raise ValueError(f"checkpoint truncated: expected {8 * count} bytes, got {len(raw)}")
    return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
