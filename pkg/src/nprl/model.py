"""Multi-modal recurrent classifier: bidirectional GRU over the 9-hour night
window, a small dense branch for static features, concatenation into a single
profile representation, and a swappable softmax head.

Also owns everything that treats the parameters as a geometric object:
Frobenius distances, projection onto a ball around a reference parameter set,
and the binary checkpoint format.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import numgrad as ng
from .errors import ConfigError, FormatError, InputError, ShapeError
from .numgrad import Array, ParamSet, Tensor

WINDOW_LEN = 9


@dataclass(frozen=True)
class FeatureSchema:
    """Ordered names of the temporal and static inputs one instance carries."""

    temporal_names: tuple[str, ...]
    static_names: tuple[str, ...] = ()
    window_len: int = WINDOW_LEN

    def __post_init__(self):
        if self.window_len != WINDOW_LEN:
            raise ConfigError(f"window_len must be {WINDOW_LEN}, got {self.window_len}")
        if len(self.temporal_names) < 1:
            raise ConfigError("at least one temporal feature is required")
        names = self.temporal_names + self.static_names
        if len(set(names)) != len(names):
            raise ConfigError("feature names must be unique")

    @property
    def n_temporal(self) -> int:
        return len(self.temporal_names)

    @property
    def n_static(self) -> int:
        return len(self.static_names)


@dataclass(frozen=True)
class ModelConfig:
    gru_hidden: int = 256
    static_widths: tuple[int, ...] = (16, 8, 1)
    trunk_widths: tuple[int, ...] = (64,)
    head_classes: int = 2
    normalize_representation: bool = False

    def __post_init__(self):
        if self.gru_hidden < 1:
            raise ConfigError(f"gru_hidden must be >= 1, got {self.gru_hidden}")
        if self.head_classes < 2:
            raise ConfigError(f"head_classes must be >= 2, got {self.head_classes}")
        if any(w < 1 for w in self.static_widths) or any(w < 1 for w in self.trunk_widths):
            raise ConfigError("layer widths must be positive")


def rep_width(config: ModelConfig, n_static: int) -> int:
    """Width of the concatenated representation: 2H per hour over 9 hours,
    plus the final static-branch width when static features are present."""
    width = 2 * WINDOW_LEN * config.gru_hidden
    if n_static > 0:
        if not config.static_widths:
            raise ConfigError("static features present but static_widths is empty")
        width += config.static_widths[-1]
    return width


GATES = ("z", "r", "h")


def param_layout(config: ModelConfig, schema: FeatureSchema) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered (name, dims) pairs for every parameter tensor of the model."""
    t, s, h = schema.n_temporal, schema.n_static, config.gru_hidden
    layout: list[tuple[str, tuple[int, ...]]] = []
    for direction in ("fwd", "bwd"):
        for gate in GATES:
            layout.append((f"gru_{direction}.W_{gate}", (t, h)))
            layout.append((f"gru_{direction}.U_{gate}", (h, h)))
            layout.append((f"gru_{direction}.b_{gate}", (h,)))
    if s > 0:
        prev = s
        for i, width in enumerate(config.static_widths):
            layout.append((f"static.{i}.W", (prev, width)))
            layout.append((f"static.{i}.b", (width,)))
            prev = width
    prev = rep_width(config, s)
    for i, width in enumerate(config.trunk_widths):
        layout.append((f"trunk.{i}.W", (prev, width)))
        layout.append((f"trunk.{i}.b", (width,)))
        prev = width
    layout.append(("head.W", (prev, config.head_classes)))
    layout.append(("head.b", (config.head_classes,)))
    return layout


def init_params(config: ModelConfig, schema: FeatureSchema, seed: int) -> ParamSet:
    """Glorot-uniform weights, zero biases, bit-reproducible per seed."""
    rng = np.random.default_rng(seed)
    params: ParamSet = {}
    for name, dims in param_layout(config, schema):
        if len(dims) == 2:
            limit = np.sqrt(6.0 / (dims[0] + dims[1]))
            data = rng.uniform(-limit, limit, size=dims)
        else:
            data = np.zeros(dims)
        params[name] = Tensor(data, requires_grad=True)
    return params


def is_head(name: str) -> bool:
    return name.startswith("head.")


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------


def gru_cell(x_t: Tensor, h_prev: Tensor, params: ParamSet, direction: str = "fwd") -> Tensor:
    """One recurrent step on vectors: z and r gates, candidate state, blend."""
    x2 = ng.reshape(x_t, (1, x_t.dims[-1])) if x_t.data.ndim == 1 else x_t
    h2 = ng.reshape(h_prev, (1, h_prev.dims[-1])) if h_prev.data.ndim == 1 else h_prev
    out = _gru_step(x2, h2, params, f"gru_{direction}")
    if x_t.data.ndim == 1:
        return ng.reshape(out, (out.dims[1],))
    return out


def _gru_step(x: Tensor, h: Tensor, params: ParamSet, prefix: str) -> Tensor:
    z = ng.elementwise(
        ng.dual_affine(x, params[f"{prefix}.W_z"], h, params[f"{prefix}.U_z"], params[f"{prefix}.b_z"]),
        "sigmoid",
    )
    r = ng.elementwise(
        ng.dual_affine(x, params[f"{prefix}.W_r"], h, params[f"{prefix}.U_r"], params[f"{prefix}.b_r"]),
        "sigmoid",
    )
    cand = ng.elementwise(
        ng.dual_affine(
            x, params[f"{prefix}.W_h"], ng.mul(r, h), params[f"{prefix}.U_h"], params[f"{prefix}.b_h"]
        ),
        "tanh",
    )
    return ng.gate_blend(z, h, cand)


def _bigru_step_outputs(steps: list[Tensor], params: ParamSet, hidden: int) -> list[Tensor]:
    """Per-hour [forward ; backward] states from zero initial states."""
    batch = steps[0].dims[0]
    h = Tensor(np.zeros((batch, hidden)))
    fwd = []
    for x in steps:
        h = _gru_step(x, h, params, "gru_fwd")
        fwd.append(h)
    h = Tensor(np.zeros((batch, hidden)))
    bwd: list[Tensor | None] = [None] * len(steps)
    for t in range(len(steps) - 1, -1, -1):
        h = _gru_step(steps[t], h, params, "gru_bwd")
        bwd[t] = h
    return [ng.concat_cols([f, b]) for f, b in zip(fwd, bwd)]


def bigru_forward(window, params: ParamSet) -> Tensor:
    """Run both directions over a single 9 x T window; rows are hours, columns
    the concatenated forward and backward hidden states (9 x 2H)."""
    data = window.data if isinstance(window, Tensor) else np.asarray(window, dtype=np.float64)
    t_features = params["gru_fwd.W_z"].dims[0]
    hidden = params["gru_fwd.W_z"].dims[1]
    if data.shape != (WINDOW_LEN, t_features):
        raise ShapeError(f"window must be {(WINDOW_LEN, t_features)}, got {data.shape}")
    steps = [Tensor(data[t : t + 1, :]) for t in range(WINDOW_LEN)]
    per_hour = _bigru_step_outputs(steps, params, hidden)
    flat = ng.concat_cols(per_hour)  # hour-major layout, fixed for checkpoints
    return ng.reshape(flat, (WINDOW_LEN, 2 * hidden))


def forward_batch(
    temporal: Array, statics: Array, params: ParamSet, config: ModelConfig
) -> tuple[Tensor, Tensor]:
    """Batched forward pass on raw arrays.

    temporal has dims (batch, 9, T) and statics (batch, S) with S possibly 0.
    Returns (logits, representation) tensors; the representation is the
    concatenation feeding the trunk, normalized to unit rows when the config
    says so.
    """
    temporal = np.asarray(temporal, dtype=np.float64)
    statics = np.asarray(statics, dtype=np.float64)
    hidden = config.gru_hidden
    t_features = params["gru_fwd.W_z"].dims[0]
    if temporal.ndim != 3 or temporal.shape[1:] != (WINDOW_LEN, t_features):
        raise ShapeError(
            f"temporal must be (batch, {WINDOW_LEN}, {t_features}), got {temporal.shape}"
        )
    batch = temporal.shape[0]
    n_static = statics.shape[1] if statics.ndim == 2 else 0
    if statics.ndim != 2 or statics.shape[0] != batch:
        raise ShapeError(f"statics must be (batch, S), got {statics.shape}")
    has_static_params = any(name.startswith("static.") for name in params)
    if (n_static > 0) != has_static_params:
        raise ShapeError("static features do not match the model's static branch")

    steps = [Tensor(np.ascontiguousarray(temporal[:, t, :])) for t in range(WINDOW_LEN)]
    parts = _bigru_step_outputs(steps, params, hidden)
    if n_static > 0:
        s = Tensor(statics)
        n_layers = len(config.static_widths)
        for i in range(n_layers):
            s = ng.affine(s, params[f"static.{i}.W"], params[f"static.{i}.b"])
            if i < n_layers - 1:  # final static unit stays linear
                s = ng.elementwise(s, "relu")
        parts = parts + [s]
    rep = ng.concat_cols(parts)
    expected = rep_width(config, n_static)
    if rep.dims[1] != expected:
        raise ShapeError(f"representation width {rep.dims[1]} != expected {expected}")
    if config.normalize_representation:
        rep = ng.l2_normalize_rows(rep)
    x = rep
    for i in range(len(config.trunk_widths)):
        x = ng.elementwise(ng.affine(x, params[f"trunk.{i}.W"], params[f"trunk.{i}.b"]), "relu")
    logits = ng.affine(x, params["head.W"], params["head.b"])
    return logits, rep


def forward(instance, params: ParamSet, config: ModelConfig) -> tuple[Array, Array]:
    """Single-instance forward; returns (logits vector, representation vector)."""
    temporal = np.asarray(instance.temporal, dtype=np.float64)[None, :, :]
    statics = np.asarray(instance.statics, dtype=np.float64).reshape(1, -1)
    logits, rep = forward_batch(temporal, statics, params, config)
    return logits.data[0].copy(), rep.data[0].copy()


def softmax(logits: Array) -> Array:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def predict_proba(
    temporal: Array, statics: Array, params: ParamSet, config: ModelConfig, batch_size: int = 512
) -> Array:
    """Class probabilities for a stack of instances, evaluated in batches."""
    outs = []
    for lo in range(0, temporal.shape[0], batch_size):
        logits, _ = forward_batch(
            temporal[lo : lo + batch_size], statics[lo : lo + batch_size], params, config
        )
        outs.append(softmax(logits.data))
    return np.concatenate(outs, axis=0)


def compute_representations(
    temporal: Array, statics: Array, params: ParamSet, config: ModelConfig, batch_size: int = 512
) -> Array:
    outs = []
    for lo in range(0, temporal.shape[0], batch_size):
        _, rep = forward_batch(
            temporal[lo : lo + batch_size], statics[lo : lo + batch_size], params, config
        )
        outs.append(rep.data)
    return np.concatenate(outs, axis=0)


# ---------------------------------------------------------------------------
# Parameter-space geometry
# ---------------------------------------------------------------------------


def replace_head(params: ParamSet, new_classes: int, seed: int) -> ParamSet:
    """Fresh classification head, every other tensor carried over bit-exactly."""
    if new_classes < 2:
        raise InputError(f"head needs at least 2 classes, got {new_classes}")
    in_width = params["head.W"].dims[0]
    rng = np.random.default_rng(seed)
    limit = np.sqrt(6.0 / (in_width + new_classes))
    out: ParamSet = {}
    for name, p in params.items():
        if name == "head.W":
            out[name] = Tensor(rng.uniform(-limit, limit, size=(in_width, new_classes)), requires_grad=True)
        elif name == "head.b":
            out[name] = Tensor(np.zeros(new_classes), requires_grad=True)
        else:
            out[name] = p
    return out


def _included_names(a: ParamSet, b: ParamSet, exclude_head: bool) -> list[str]:
    if set(a) != set(b):
        raise InputError("parameter sets have mismatched keys")
    names = []
    for name in a:
        if a[name].dims != b[name].dims:
            raise ShapeError(f"dims mismatch for {name!r}: {a[name].dims} vs {b[name].dims}")
        if exclude_head and is_head(name):
            continue
        names.append(name)
    return names


def frobenius_distance(a: ParamSet, b: ParamSet, exclude_head: bool = False) -> float:
    """Euclidean distance between two parameter sets viewed as one long vector."""
    total = 0.0
    for name in _included_names(a, b, exclude_head):
        diff = a[name].data - b[name].data
        total += float(np.sum(diff * diff))
    return float(np.sqrt(total))


def project_to_ball(
    theta: ParamSet, theta0: ParamSet, gamma: float, exclude_head: bool = True
) -> ParamSet:
    """Radially rescale theta toward theta0 so the included distance is <= gamma."""
    if gamma <= 0.0:
        raise InputError(f"gamma must be positive, got {gamma}")
    included = _included_names(theta, theta0, exclude_head)
    distance = frobenius_distance(theta, theta0, exclude_head)
    if distance <= gamma:
        return theta
    scale = gamma / distance
    out: ParamSet = {}
    for name, p in theta.items():
        if name in included:
            out[name] = Tensor(
                theta0[name].data + (p.data - theta0[name].data) * scale, requires_grad=True
            )
        else:
            out[name] = p
    return out


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"NPRL1"
_MAX_ELEMENTS = 1 << 32  # guards dims fields against absurd payloads


def save_checkpoint(params: ParamSet, path) -> None:
    """Binary format: magic, u32 tensor count, then per tensor
    u32 name length, name bytes, u32 rank, u32 dims[], float64-LE payload."""
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", len(params))]
    for name, p in params.items():
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", p.data.ndim))
        chunks.append(struct.pack(f"<{p.data.ndim}I", *p.dims))
        chunks.append(p.data.astype("<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(path) -> ParamSet:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic in {path}")
    offset = len(CHECKPOINT_MAGIC)

    def take(n: int) -> bytes:
        nonlocal offset
        if offset + n > len(blob):
            raise FormatError(f"truncated checkpoint {path}")
        piece = blob[offset : offset + n]
        offset += n
        return piece

    (count,) = struct.unpack("<I", take(4))
    params: ParamSet = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        if rank > 8:
            raise FormatError(f"implausible tensor rank {rank} in {path}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        n_elem = 1
        for d in dims:
            n_elem *= d
        if n_elem > _MAX_ELEMENTS:
            raise FormatError(f"tensor dims overflow in {path}: {dims}")
        payload = take(8 * n_elem)
        data = np.frombuffer(payload, dtype="<f8").reshape(dims).copy()
        params[name] = Tensor(data, requires_grad=True)
    if offset != len(blob):
        raise FormatError(f"trailing bytes in checkpoint {path}")
    return params
