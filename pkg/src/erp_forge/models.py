"""The nine classifier architectures and their expected shape traces.

Each architecture is encoded twice: once as a builder producing a
``Network``, and once as a table of rows ``(layer, details, output shape)``
copied from the published architecture tables. ``validate_shapes`` runs the
symbolic trace of a built model against its table.
"""

from dataclasses import dataclass, field

import numpy as np

from erp_forge.errors import InvalidSpec, ShapeMismatch
from erp_forge.losses import LossSpec
from erp_forge.nn import (
    Activation,
    BatchNorm,
    Conv,
    Dense,
    Dropout,
    Flatten,
    GlobalAvgPool,
    Network,
    Softmax,
    SqueezeExcite,
)

DROPOUT_P = 0.3
N_TIME = 64
DEPTH = 5
ALLOWED_CHANNELS = (6, 32, 35)

# variant -> (activation, loss kind)
VARIANTS_2D = {
    "baseline": ("relu", "cross_entropy"),
    "gelu": ("gelu", "focal"),
    "gap": ("gelu", "focal"),
    "se": ("gelu", "focal"),
    "swish": ("swish", "focal"),
    "wce": ("gelu", "weighted_ce"),
}
VARIANTS_3D = {
    "baseline": ("gelu", "focal"),
    "deep": ("gelu", "focal"),
    "gap": ("gelu", "focal"),
}


@dataclass(frozen=True)
class ModelSpec:
    family: str
    variant: str
    input_shape: tuple
    activation: str = None
    loss: LossSpec = None
    dropout: float = DROPOUT_P

    def __post_init__(self):
        table = {"2d": VARIANTS_2D, "3d": VARIANTS_3D}.get(self.family)
        if table is None:
            raise InvalidSpec(f"unknown family {self.family!r}")
        if self.variant not in table:
            raise InvalidSpec(f"variant {self.variant!r} is not a {self.family} model; choose from {sorted(table)}")
        shape = tuple(int(s) for s in self.input_shape)
        want = 2 if self.family == "2d" else 3
        if len(shape) != want:
            raise InvalidSpec(f"{self.family} input shape needs {want} axes, got {shape}")
        if shape[0] not in ALLOWED_CHANNELS:
            raise InvalidSpec(f"channel count {shape[0]} not in {ALLOWED_CHANNELS}")
        object.__setattr__(self, "input_shape", shape)
        act, loss = table[self.variant]
        if self.activation is None:
            object.__setattr__(self, "activation", act)
        if self.loss is None:
            object.__setattr__(self, "loss", LossSpec(loss))

    @property
    def name(self):
        return f"{self.family}-{self.variant}"

    @property
    def sample_shape(self):
        return self.input_shape + (1,)


def canonical_spec(family, variant, channels=None):
    """Spec on the canonical input: 6x64 (CSP) or 32x64 for 2D, 32x64x5 for 3D."""
    if family == "2d":
        return ModelSpec("2d", variant, (channels or 6, N_TIME))
    return ModelSpec("3d", variant, (channels or 32, N_TIME, DEPTH))


def _conv_block(layers, rows, row, conv, act, row_act, features, n):
    layers += [conv, Activation(act, name=f"act{n}"), BatchNorm(features, name=f"bn{n}")]
    rows += [row, row_act, row_act]


def _build_2d(spec, rng):
    c, t = spec.input_shape
    act = spec.activation
    layers, rows = [], []
    _conv_block(layers, rows, 1, Conv((1, 10), 8, 1, rng=rng, name="temporal_conv"), act, 2, 8, 1)
    _conv_block(layers, rows, 3, Conv((c, 1), 16, 8, rng=rng, name="spatial_conv"), act, 4, 16, 2)
    _conv_block(layers, rows, 5, Conv((1, 10), 32, 16, rng=rng, name="feature_conv"), act, 6, 32, 3)
    t2 = t - 18
    nxt = 7
    if spec.variant == "se":
        layers.append(SqueezeExcite(32, 8, rng=rng, name="se"))
        rows.append(8)  # the "Multiply" row; the "SE Block" row is the gate
        nxt = 9
    layers.append(Dropout(spec.dropout, rng=rng, name="dropout"))
    rows.append(nxt)
    nxt += 1
    if spec.variant == "gap":
        layers.append(GlobalAvgPool(name="gap"))
        rows.append(nxt)
        layers.append(Dense(32, 2, rng=rng, name="dense_out"))
    else:
        layers += [Flatten(name="flatten"), Dense(t2 * 32, 64, rng=rng, name="dense64"), Activation(act, name="act_dense")]
        rows += [nxt, nxt, nxt]
        layers.append(Dense(64, 2, rng=rng, name="dense_out"))
    layers.append(Softmax(name="softmax"))
    rows += [nxt + 1, nxt + 1]
    return layers, rows


def _build_3d(spec, rng):
    c, t, d = spec.input_shape
    act = spec.activation
    layers, rows = [], []
    _conv_block(layers, rows, 1, Conv((1, 7, 3), 16, 1, "same", rng=rng, name="temporal_conv3d"), act, 2, 16, 1)
    _conv_block(layers, rows, 3, Conv((c, 1, 1), 32, 16, rng=rng, name="spatial_conv3d"), act, 4, 32, 2)
    layers.append(Dropout(spec.dropout, rng=rng, name="dropout1"))
    rows.append(5)
    feats = 32
    nxt = 6
    if spec.variant in ("deep", "gap"):
        _conv_block(layers, rows, 6, Conv((1, 5, 3), 64, 32, "same", rng=rng, name="deep_conv3d"), act, 7, 64, 3)
        layers.append(Dropout(spec.dropout, rng=rng, name="dropout2"))
        rows.append(8)
        feats = 64
        nxt = 9
    if spec.variant == "gap":
        layers.append(GlobalAvgPool(name="gap"))
        layers.append(Dense(feats, 2, rng=rng, name="dense_out"))
    else:
        layers.append(Flatten(name="flatten"))
        layers.append(Dense(t * d * feats, 2, rng=rng, name="dense_out"))
    rows += [nxt, nxt + 1]
    layers.append(Softmax(name="softmax"))
    rows.append(nxt + 1)
    return layers, rows


def build_model(spec, seed=0):
    """Build a fresh network for ``spec``; weights are drawn from ``seed``."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    builder = _build_2d if spec.family == "2d" else _build_3d
    layers, rows = builder(spec, rng)
    net = Network(layers, spec.sample_shape, rng=rng, rows=rows)
    net.spec = spec
    return net


def as_network_input(data):
    """Append the singleton feature axis: (N, C, T[, D]) -> (N, C, T[, D], 1)."""
    return np.ascontiguousarray(np.asarray(data, dtype=np.float32)[..., None])


# Architecture tables. Shapes use the symbols "C", "T", "T'", "T''"; "same"
# repeats the previous row; None marks a row with no shape entry.
_ROWS_2D_PLAIN = [
    ("Input", "--", ("C", "T", 1)),
    ("Conv2D", "1x10, F=8", ("C", "T'", 8)),
    ("{A} + BN", "--", "same"),
    ("Conv2D", "Cx1, F=16", (1, "T'", 16)),
    ("{A} + BN", "--", "same"),
    ("Conv2D", "1x10, F=32", (1, "T''", 32)),
    ("{A} + BN", "--", "same"),
    ("Dropout", "p=0.3", "same"),
    ("Flatten + Dense", "64", (64,)),
    ("Dense + Softmax", "2", (2,)),
]
_ROWS_2D_GAP = _ROWS_2D_PLAIN[:8] + [
    ("GlobalAvgPool2D", "--", (1, 1, 32)),
    ("Dense + Softmax", "2", (2,)),
]
_ROWS_2D_SE = _ROWS_2D_PLAIN[:7] + [
    ("SE Block", "GAP -> FC(8) -> ReLU -> FC(32) -> Sigmoid", (1, 1, 32)),
    ("Multiply", "Element-wise scaling", (1, "T''", 32)),
    ("Dropout", "p=0.3", "same"),
    ("Flatten + Dense", "64", (64,)),
    ("Dense + Softmax", "2", (2,)),
]
_ROWS_3D_BASE = [
    ("Input", "--", (32, 64, 5, 1)),
    ("Conv3D", "1x7x3, F=16", "same16"),
    ("GELU + BN", "--", "same"),
    ("Conv3D", "32x1x1, F=32", (1, 64, 5, 32)),
    ("GELU + BN", "--", "same"),
    ("Dropout", "p=0.3", "same"),
    ("Flatten", "--", None),
    ("Dense + Softmax", "2", (2,)),
]
_ROWS_3D_DEEP = _ROWS_3D_BASE[:6] + [
    ("Conv3D", "1x5x3, F=64", "same64"),
    ("GELU + BN", "--", "same"),
    ("Dropout", "p=0.3", "same"),
    ("Flatten", "--", None),
    ("Dense + Softmax", "2", (2,)),
]
_ROWS_3D_GAP = _ROWS_3D_DEEP[:9] + [
    ("GlobalAveragePooling3D", "--", (1, 1, 1, 64)),
    ("Dense + Softmax", "2", (2,)),
]

TABLES = {
    ("2d", "baseline"): _ROWS_2D_PLAIN,
    ("2d", "gelu"): _ROWS_2D_PLAIN,
    ("2d", "swish"): _ROWS_2D_PLAIN,
    ("2d", "wce"): _ROWS_2D_PLAIN,
    ("2d", "gap"): _ROWS_2D_GAP,
    ("2d", "se"): _ROWS_2D_SE,
    ("3d", "baseline"): _ROWS_3D_BASE,
    ("3d", "deep"): _ROWS_3D_DEEP,
    ("3d", "gap"): _ROWS_3D_GAP,
}
CANONICAL_3D = (32, 64, 5, 1)


def expected_rows(spec, input_shape=None):
    """Resolve the table for ``spec`` into concrete ``(layer, details, shape)`` rows."""
    shape = tuple(input_shape or spec.sample_shape)
    table = TABLES[(spec.family, spec.variant)]
    act = {"relu": "ReLU", "gelu": "GELU", "swish": "Swish"}.get(spec.activation, spec.activation)
    env = {}
    if spec.family == "2d":
        c, t = shape[0], shape[1]
        env = {"C": c, "T": t, "T'": t - 9, "T''": t - 18}
    out, prev = [], None
    for layer, details, cell in table:
        if cell == "same":
            cell = prev
        elif isinstance(cell, str) and cell.startswith("same"):
            cell = prev[:-1] + (int(cell[4:]),)
        elif cell is not None:
            cell = tuple(env.get(v, v) for v in cell)
        out.append((layer.format(A=act), details, cell))
        if cell is not None:
            prev = cell
    return out


@dataclass
class ShapeTrace:
    rows: list
    layer_shapes: list = field(default_factory=list)

    def format(self):
        w = max(len(r[0]) for r in self.rows)
        return "\n".join(f"{name:<{w}}  {'x'.join(map(str, s)) if s else '--'}" for name, _, s in self.rows)


def validate_shapes(model, input_shape=None):
    """Propagate shapes through ``model`` and compare with its table.

    Returns the traced rows. Raises ShapeMismatch (naming the layer) when a
    layer rejects its input or a traced shape differs from the table. Tables
    of the 3D family are literal, so they are only compared on the canonical
    32x64x5 input.
    """
    spec = model.spec
    shape = tuple(input_shape or spec.sample_shape)
    layer_shapes = model.trace(shape)  # raises ShapeMismatch from the offending layer
    rows = expected_rows(spec, shape)
    traced = [None] * len(rows)
    traced[0] = shape
    for (name, out), row, layer in zip(layer_shapes, model.rows, model.layers):
        if row is not None:
            traced[row] = out
        if isinstance(layer, SqueezeExcite):
            traced[row - 1] = layer.excitation_shape(out)
    if spec.family == "3d" and shape != CANONICAL_3D:
        return ShapeTrace([(r[0], r[1], s) for r, s in zip(rows, traced)], layer_shapes)
    for (layer, details, want), got in zip(rows, traced):
        if want is not None and tuple(got) != tuple(want):
            raise ShapeMismatch(f"{spec.name}: row {layer!r} ({details}) traced {got}, table says {want}")
    return ShapeTrace([(r[0], r[1], s) for r, s in zip(rows, traced)], layer_shapes)


def catalog(seed=0):
    """One entry per architecture on its canonical input(s), with parameter counts."""
    out = []
    for family, table in (("2d", VARIANTS_2D), ("3d", VARIANTS_3D)):
        for variant in table:
            chans = (6, 32) if family == "2d" else (32,)
            for c in chans:
                spec = canonical_spec(family, variant, c)
                net = build_model(spec, seed)
                out.append({
                    "name": spec.name,
                    "input": "x".join(map(str, spec.sample_shape)),
                    "activation": spec.activation,
                    "loss": spec.loss.kind,
                    "params": net.n_params(),
                })
    return out
