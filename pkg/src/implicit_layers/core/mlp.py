"""Multilayer perceptrons and named parameter bundles.

Text form of an :class:`MlpSpec`::

    in:<int> [hidden:<width>,<act> ...] out:<int>[,<act>]

where ``<act>`` is ``tanh`` or ``identity``; e.g.
``in:2 hidden:500,tanh out:2,identity``.  Weight matrices are stored
``(fan_in, fan_out)`` so a batch ``X`` of shape ``(B, fan_in)`` maps to
``act(X @ W + b)``.
"""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad

ACTIVATIONS = ("tanh", "identity")


class InvalidSpecError(ValueError):
    pass


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    output_dim: int
    hidden: tuple[int, ...] = ()
    activations: tuple[str, ...] | None = None
    output_activation: str = "identity"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(w) for w in self.hidden))
        acts = self.activations
        if acts is None:
            acts = ("tanh",) * len(self.hidden)
        object.__setattr__(self, "activations", tuple(acts))
        if self.input_dim <= 0 or self.output_dim <= 0:
            raise InvalidSpecError("input and output dims must be positive")
        if any(w <= 0 for w in self.hidden):
            raise InvalidSpecError(f"hidden widths must be positive, got {self.hidden}")
        if len(self.activations) != len(self.hidden):
            raise InvalidSpecError("one activation per hidden layer")
        for a in self.activations + (self.output_activation,):
            if a not in ACTIVATIONS:
                raise InvalidSpecError(f"unknown activation {a!r}")

    @property
    def widths(self):
        return (self.input_dim,) + self.hidden + (self.output_dim,)

    def layout(self):
        """``[(name, shape, offset)]`` of every parameter in flat order."""
        out, off = [], 0
        w = self.widths
        for i in range(len(w) - 1):
            for name, shape in ((f"W{i}", (w[i], w[i + 1])), (f"b{i}", (w[i + 1],))):
                out.append((name, shape, off))
                off += int(np.prod(shape))
        return out

    @property
    def total_dim(self):
        w = self.widths
        return sum(w[i] * w[i + 1] + w[i + 1] for i in range(len(w) - 1))

    def to_text(self):
        parts = [f"in:{self.input_dim}"]
        parts += [f"hidden:{w},{a}" for w, a in zip(self.hidden, self.activations)]
        parts.append(f"out:{self.output_dim},{self.output_activation}")
        return " ".join(parts)

    @classmethod
    def from_text(cls, text):
        input_dim = output_dim = None
        hidden, acts, out_act = [], [], "identity"
        for tok in text.split():
            key, _, rest = tok.partition(":")
            fields = rest.split(",")
            try:
                if key == "in":
                    input_dim = int(fields[0])
                elif key == "hidden":
                    hidden.append(int(fields[0]))
                    acts.append(fields[1] if len(fields) > 1 else "tanh")
                elif key == "out":
                    output_dim = int(fields[0])
                    if len(fields) > 1:
                        out_act = fields[1]
                else:
                    raise InvalidSpecError(f"unknown token {tok!r}")
            except (ValueError, IndexError) as exc:
                if isinstance(exc, InvalidSpecError):
                    raise
                raise InvalidSpecError(f"malformed token {tok!r}") from exc
        if input_dim is None or output_dim is None:
            raise InvalidSpecError("spec needs both in: and out:")
        return cls(input_dim, output_dim, tuple(hidden), tuple(acts), out_act)


class ParamBundle:
    """Ordered mapping of named arrays with a flat-vector view."""

    def __init__(self, entries=None):
        self.entries = OrderedDict()
        for k, v in (entries or {}).items():
            self.entries[k] = np.array(v, dtype=np.float64)

    def __getitem__(self, name):
        return self.entries[name]

    def __iter__(self):
        return iter(self.entries)

    def __len__(self):
        return len(self.entries)

    def __eq__(self, other):
        if not isinstance(other, ParamBundle) or list(self) != list(other):
            return NotImplemented
        return all(np.array_equal(self[k], other[k]) for k in self)

    @property
    def total_dim(self):
        return sum(v.size for v in self.entries.values())

    @property
    def shapes(self):
        return OrderedDict((k, v.shape) for k, v in self.entries.items())

    def flatten(self):
        if not self.entries:
            return np.zeros(0)
        return np.concatenate([v.reshape(-1) for v in self.entries.values()])

    def unflatten(self, flat):
        """A new bundle with this bundle's shapes filled from ``flat``."""
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.total_dim,):
            raise ValueError(f"expected flat vector of length {self.total_dim}, got {flat.shape}")
        out, off = OrderedDict(), 0
        for k, shape in self.shapes.items():
            n = int(np.prod(shape))
            out[k] = flat[off : off + n].reshape(shape)
            off += n
        return ParamBundle(out)

    def save(self, prefix):
        """Write ``<prefix>.bin`` (little-endian float64) and ``<prefix>.json``."""
        prefix = Path(prefix)
        self.flatten().astype("<f8").tofile(prefix.with_suffix(".bin"))
        manifest = {"dtype": "<f8", "entries": [[k, list(s)] for k, s in self.shapes.items()]}
        prefix.with_suffix(".json").write_text(json.dumps(manifest, indent=1))

    @classmethod
    def load(cls, prefix):
        prefix = Path(prefix)
        manifest = json.loads(prefix.with_suffix(".json").read_text())
        flat = np.fromfile(prefix.with_suffix(".bin"), dtype="<f8").astype(np.float64)
        template = cls({k: np.zeros(s) for k, s in manifest["entries"]})
        return template.unflatten(flat)


def mlp_init(spec: MlpSpec, seed: int) -> ParamBundle:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases."""
    rng = np.random.default_rng(seed)
    entries = OrderedDict()
    for name, shape, _ in spec.layout():
        fan_in = spec.widths[int(name[1:])]
        bound = 1.0 / np.sqrt(fan_in)
        entries[name] = rng.uniform(-bound, bound, size=shape)
    return ParamBundle(entries)


def _act(x, tag):
    return ad.tanh(x) if tag == "tanh" else x


def mlp_apply(spec: MlpSpec, params, x):
    """Evaluate the network on ``x`` of shape ``(input_dim,)`` or ``(B, input_dim)``.

    ``params`` is a :class:`ParamBundle` or a flat vector (array or Var);
    Var inputs propagate gradients.
    """
    if isinstance(params, ParamBundle):
        params = params.flatten()
    if ad.value_of(params).shape != (spec.total_dim,):
        raise ValueError(f"expected {spec.total_dim} parameters, got {ad.value_of(params).shape}")
    if np.shape(ad.value_of(x))[-1] != spec.input_dim:
        raise ValueError(f"input last dim {np.shape(ad.value_of(x))[-1]} != {spec.input_dim}")
    layout = spec.layout()
    acts = spec.activations + (spec.output_activation,)
    h = x
    for i in range(len(layout) // 2):
        _, wshape, woff = layout[2 * i]
        _, bshape, boff = layout[2 * i + 1]
        W = params[woff : woff + wshape[0] * wshape[1]].reshape(wshape)
        b = params[boff : boff + bshape[0]]
        h = _act(h @ W + b, acts[i])
    return h
