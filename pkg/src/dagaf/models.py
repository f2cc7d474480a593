"""Functional causal model, critic and post-non-linear transform networks.

The FCM keeps one small network per node. The first layer has shape
(d, h, d): ``w[j, :, k]`` are the weights node j's network applies to input
k. Its column norms give the weighted adjacency (see
:func:`dagaf.graph.extract_adjacency`). The layer is stored as the
difference of two non-negative arrays so an L1 penalty is smooth and exact
zeros are reachable by projection.
"""
from __future__ import annotations

import enum
import json
import os
import sys

import numpy as np

from . import diffcore as dc
from .diffcore import ConfigError, Param
from .graph import BinaryDag

CHECKPOINT_FORMAT = "dagaf-checkpoint/1"


class Assumption(str, enum.Enum):
    ANM = "anm"
    LINGAM = "lingam"
    PNL = "pnl"


def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class PerVariableMLP:
    """``d`` independent scalar-to-scalar ReLU networks evaluated side by side.

    Layer widths per variable are ``[1, w, w, w, 1]``, i.e. ``[d, w*d, w*d,
    w*d, d]`` when viewed as one network over all variables.
    """

    def __init__(self, d, rng, width=10, depth=3, name="g"):
        self.d = d
        self.width = width
        sizes = [1] + [width] * depth + [1]
        self.weights = []
        self.biases = []
        for layer, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            self.weights.append(Param(_uniform(rng, fan_in, (d, fan_in, fan_out)), f"{name}.{layer}"))
            self.biases.append(Param(_uniform(rng, fan_in, (d, fan_out)), f"{name}.{layer}.bias"))

    @property
    def widths(self):
        return [self.d] + [self.width * self.d] * (len(self.weights) - 1) + [self.d]

    def params(self):
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def forward(self, x, tape):
        n = x.shape[0]
        h = dc.reshape(tape.lift(x), (n, self.d, 1))
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = dc.add(dc.local_linear(h, tape.param(w)), tape.param(b))
            if i < last:
                h = dc.relu(h)
        return dc.reshape(h, (n, self.d))


class PnlPair:
    """Invertible-in-spirit pair: ``g_net`` maps FCM output to data scale and
    ``g_inv`` maps data back. Only their composition is constrained (by the
    PNL loss), not their exact invertibility."""

    def __init__(self, d, rng, width=10):
        self.g_net = PerVariableMLP(d, rng, width, name="g")
        self.g_inv = PerVariableMLP(d, rng, width, name="g_inv")

    @property
    def widths(self):
        return self.g_net.widths


class FcmModel:
    """Per-node networks f_j reading all other variables.

    ``structure_mask[j, k] = 0`` removes input k from node j (the diagonal is
    always masked). ``noise_scale`` (d, z_size) multiplies the noise columns
    added to each node's output during synthesis.
    """

    def __init__(self, d, rng, latent_h=10, assumption=Assumption.ANM, z_size=1, init_scale=None):
        if d < 2:
            raise ConfigError(f"need at least 2 variables, got d={d}")
        if latent_h < 1:
            raise ConfigError(f"latent_h must be positive, got {latent_h}")
        if z_size < 1:
            raise ConfigError(f"z_size must be positive, got {z_size}")
        self.d = d
        self.latent_h = latent_h
        self.assumption = Assumption(assumption)
        self.z_size = z_size
        scale = init_scale if init_scale is not None else 1.0 / np.sqrt(d)
        self.self_mask = np.broadcast_to((1.0 - np.eye(d))[:, None, :], (d, latent_h, d)).copy()
        self.structure_mask = 1.0 - np.eye(d)
        w0 = rng.uniform(-scale, scale, (d, latent_h, d)) * self.self_mask
        self.l0_pos = Param(np.maximum(w0, 0.0), "l0.pos")
        self.l0_neg = Param(np.maximum(-w0, 0.0), "l0.neg")
        self.l0_pos.nonneg = self.l0_neg.nonneg = True
        self.l0_bias = Param(np.zeros((d, latent_h)), "l0.bias")
        self.out_w = Param(_uniform(rng, latent_h, (d, latent_h, 1)), "hidden0")
        self.out_b = Param(np.zeros((d, 1)), "hidden0.bias")
        self.noise_scale = Param(np.full((d, z_size), 1.0 / np.sqrt(z_size)), "noise_scale")
        self.pnl = PnlPair(d, rng) if self.assumption is Assumption.PNL else None

    # -- parameter groups ---------------------------------------------------
    def fcm_params(self):
        """Parameters of the deterministic part f (first layer included)."""
        return [self.l0_pos, self.l0_neg, self.l0_bias, self.out_w, self.out_b]

    def first_layer_params(self):
        return [self.l0_pos, self.l0_neg, self.l0_bias]

    def l0_weights(self):
        """Effective first-layer weights (d, h, d), self-inputs zeroed."""
        return (self.l0_pos.value - self.l0_neg.value) * self.self_mask

    def first_layer_var(self, tape, mask=None):
        w = dc.sub(tape.param(self.l0_pos), tape.param(self.l0_neg))
        return dc.mul(w, self.self_mask if mask is None else mask)

    def set_l0_weights(self, w):
        w = np.asarray(w, dtype=np.float64)
        self.l0_pos.value[...] = np.maximum(w, 0.0)
        self.l0_neg.value[...] = np.maximum(-w, 0.0)

    def hidden_params(self):
        return [self.out_w, self.out_b]

    def named_params(self):
        named = {
            "l0.pos": self.l0_pos, "l0.neg": self.l0_neg, "l0.bias": self.l0_bias,
            "hidden0": self.out_w, "hidden0.bias": self.out_b,
            "noise_scale": self.noise_scale,
        }
        if self.pnl is not None:
            for p in self.pnl.g_net.params() + self.pnl.g_inv.params():
                named[p.name] = p
        return named

    def edge_mask(self):
        return self.self_mask * self.structure_mask[:, None, :]


def fcm_forward(model, x, tape, z=None, apply_g=False):
    """Evaluate every node network on input rows ``x`` (n, d).

    With ``z`` (n, d, z_size) the scaled noise is added to each node's
    output; with ``apply_g`` the PNL output transform ``g_net`` is applied
    last.
    """
    d, h = model.d, model.latent_h
    x = tape.lift(x)
    n = x.shape[0]
    w = model.first_layer_var(tape, model.edge_mask())
    w2 = dc.reshape(w, (d * h, d))
    hid = dc.matmul(x, dc.transpose(w2))
    hid = dc.add(dc.reshape(hid, (n, d, h)), tape.param(model.l0_bias))
    if model.assumption is not Assumption.LINGAM:
        hid = dc.sigmoid(hid)
    out = dc.add(dc.local_linear(hid, tape.param(model.out_w)), tape.param(model.out_b))
    out = dc.reshape(out, (n, d))
    if z is not None:
        noise = dc.mul(tape.lift(z), tape.param(model.noise_scale))
        out = dc.add(out, dc.vsum(noise, axis=2))
    if apply_g and model.pnl is not None:
        out = model.pnl.g_net.forward(out, tape)
    return out


def g_inverse_forward(model, x, tape):
    """Map data columns through ``g_inv`` (PNL models only)."""
    if model.pnl is None:
        raise ConfigError("g_inverse_forward needs a model built with the PNL assumption")
    return model.pnl.g_inv.forward(x, tape)


def generation_levels(model):
    """Node groups for ancestral sampling through the masked structure.

    For an acyclic structure each level is computed once, roots first.
    Otherwise all nodes are refreshed together ``d`` times.
    """
    dag = BinaryDag.from_matrix(model.structure_mask * (1.0 - np.eye(model.d)))
    levels = dag.levels()
    if levels is None:
        return [list(range(model.d))] * model.d
    return levels


def generate(model, z, tape, levels=None):
    """Ancestral synthesis: children are computed from generated parents."""
    n = z.shape[0]
    d = model.d
    levels = generation_levels(model) if levels is None else levels
    x = tape.const(np.zeros((n, d)))
    for level in levels:
        mask = np.zeros(d)
        mask[level] = 1.0
        out = fcm_forward(model, x, tape, z=z, apply_g=True)
        if len(level) == d:
            x = out
        else:
            x = dc.add(dc.mul(x, 1.0 - mask), dc.mul(out, mask))
    return x


class Critic:
    """Feed-forward critic with leaky-ReLU hidden layers and dropout."""

    def __init__(self, d, rng, hidden=(64, 64), dropout=0.5, slope=0.2):
        if not 0 <= dropout < 1:
            raise ConfigError(f"dropout must be in [0, 1), got {dropout}")
        self.dims = [d, *hidden, 1]
        self.dropout = dropout
        self.slope = slope
        self.weights = []
        self.biases = []
        for i, (fi, fo) in enumerate(zip(self.dims[:-1], self.dims[1:])):
            self.weights.append(Param(_uniform(rng, fi, (fi, fo)), f"critic.{i}"))
            self.biases.append(Param(_uniform(rng, fi, (1, fo)), f"critic.{i}.bias"))

    def params(self):
        return [p for pair in zip(self.weights, self.biases) for p in pair]


def critic_forward(critic, x, tape, rng=None, detach=False):
    """Critic scores (n, 1). Dropout is active iff ``rng`` is given.

    ``detach=True`` enters the weights as constants so no gradient reaches
    the critic (used for the generator objective).
    """
    h = tape.lift(x)
    last = len(critic.weights) - 1
    for i, (w, b) in enumerate(zip(critic.weights, critic.biases)):
        wv = tape.const(w.value) if detach else tape.param(w)
        bv = tape.const(b.value) if detach else tape.param(b)
        h = dc.add(dc.matmul(h, wv), bv)
        if i < last:
            h = dc.leaky_relu(h, critic.slope)
            if rng is not None and critic.dropout > 0:
                keep = (rng.random(h.shape) >= critic.dropout) / (1.0 - critic.dropout)
                h = dc.mul(h, keep)
    return h


def transfer_weights(source, target):
    """Copy the first layer of ``source`` into ``target`` and freeze it there."""
    if source.l0_pos.shape != target.l0_pos.shape:
        raise ConfigError(
            f"first-layer shapes differ: {source.l0_pos.shape} vs {target.l0_pos.shape}")
    if source.assumption is not target.assumption:
        raise ConfigError(
            f"assumption mismatch: {source.assumption.value} vs {target.assumption.value}")
    for src, dst in zip(source.first_layer_params(), target.first_layer_params()):
        dst.value[...] = src.value
        dst.frozen = True


# -- checkpoints --------------------------------------------------------------

_PER_NODE = ("l0", "l0.bias", "hidden0", "hidden0.bias", "noise_scale")


def _node_key(name, j):
    return f"{name}.node{j}" if "." not in name else f"{name.split('.')[0]}.node{j}.bias"


def _per_node_arrays(model):
    """Arrays stored per node; ``l0`` is the effective first layer."""
    named = model.named_params()
    out = {"l0": (model.l0_weights(), model.l0_pos.frozen)}
    for name in _PER_NODE[1:]:
        out[name] = (named[name].value, named[name].frozen)
    return out


def save_checkpoint(path, arrays, metadata=None, frozen=()):
    """Write ``{name: array}`` as ``manifest.json`` + ``weights.bin``.

    The binary file holds every array as little-endian float64, concatenated
    in manifest order; the manifest records each array's shape and element
    offset.
    """
    os.makedirs(path, exist_ok=True)
    entries = []
    offset = 0
    with open(os.path.join(path, "weights.bin"), "wb") as fh:
        for name, value in arrays.items():
            arr = np.ascontiguousarray(value, dtype="<f8")
            fh.write(arr.tobytes())
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset,
                            "frozen": name in frozen})
            offset += arr.size
    manifest = {"format": CHECKPOINT_FORMAT, "byteorder": "little", "dtype": "float64",
                "arrays": entries, "metadata": metadata or {}}
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def load_checkpoint(path):
    """Return ``({name: array}, frozen_names, metadata)`` from a checkpoint directory."""
    try:
        with open(os.path.join(path, "manifest.json")) as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ValueError(f"cannot read checkpoint manifest in {path}: {exc}") from exc
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: unsupported checkpoint format {manifest.get('format')!r}")
    flat = np.fromfile(os.path.join(path, "weights.bin"), dtype="<f8")
    arrays = {}
    frozen = set()
    for e in manifest["arrays"]:
        size = int(np.prod(e["shape"])) if e["shape"] else 1
        chunk = flat[e["offset"]:e["offset"] + size]
        if chunk.size != size:
            raise ValueError(f"{path}: weights.bin truncated at array {e['name']!r}")
        arrays[e["name"]] = chunk.reshape(e["shape"]).astype(np.float64)
        if e.get("frozen"):
            frozen.add(e["name"])
    return arrays, frozen, manifest.get("metadata", {})


def model_state(model, critic=None):
    """Flatten a model into named arrays, splitting per-node tensors by node."""
    arrays = {}
    frozen = set()
    for name, (value, is_frozen) in _per_node_arrays(model).items():
        for j in range(model.d):
            key = _node_key(name, j)
            arrays[key] = value[j]
            if is_frozen:
                frozen.add(key)
    for name, p in model.named_params().items():
        if name not in _PER_NODE and not name.startswith("l0."):
            arrays[name] = p.value
            if p.frozen:
                frozen.add(name)
    if critic is not None:
        for p in critic.params():
            arrays[p.name] = p.value
    return arrays, frozen


def save_model(path, model, critic=None, **extra):
    arrays, frozen = model_state(model, critic)
    save_checkpoint(path, arrays, checkpoint_metadata(model, **extra), frozen)


def model_from_checkpoint(path):
    """Rebuild an :class:`FcmModel` (and its structure mask) from disk."""
    arrays, frozen, meta = load_checkpoint(path)
    try:
        model = FcmModel(int(meta["d"]), np.random.default_rng(0), latent_h=int(meta["latent_h"]),
                         assumption=meta["assumption"], z_size=int(meta["z_size"]))
    except KeyError as exc:
        raise ValueError(f"{path}: checkpoint metadata lacks {exc}") from None
    expected, _ = model_state(model)
    for key, ref in expected.items():
        if key not in arrays:
            raise ValueError(f"{path}: checkpoint is missing array {key!r}")
        if arrays[key].shape != np.shape(ref):
            raise ValueError(f"{path}: array {key!r} has shape {arrays[key].shape}, "
                             f"expected {np.shape(ref)}")
    named = model.named_params()
    model.set_l0_weights(np.stack([arrays[_node_key("l0", j)] for j in range(model.d)]))
    model.l0_pos.frozen = model.l0_neg.frozen = _node_key("l0", 0) in frozen
    for name in _PER_NODE[1:]:
        p = named[name]
        for j in range(model.d):
            p.value[j] = arrays[_node_key(name, j)]
        p.frozen = _node_key(name, 0) in frozen
    for name, p in named.items():
        if name not in _PER_NODE and not name.startswith("l0."):
            p.value[...] = arrays[name]
            p.frozen = name in frozen
    if "structure_mask" in meta:
        model.structure_mask = np.asarray(meta["structure_mask"], dtype=np.float64)
    return model, meta


def checkpoint_metadata(model, **extra):
    meta = {"d": model.d, "latent_h": model.latent_h, "assumption": model.assumption.value,
            "z_size": model.z_size, "structure_mask": model.structure_mask.tolist(),
            "python": sys.version.split()[0]}
    meta.update(extra)
    return meta
