"""Network architectures built on the five-axis tensor core.

Four architectures share the same building blocks:

* ``ann``       - plain FCNN on the fully expanded width-10 feature rows,
* ``deeponet``  - one branch net (event, class, time) merged with one
                  trunk net (coordinates), then a linear readout,
* ``mionet``    - four subnetworks (event params / class / time / coords)
                  merged on their own axes, then a linear readout,
* ``cpnn``      - the mionet encoder followed by an FCNN decoder.

Subnetwork outputs live on separate axes and meet through broadcast
Hadamard products (or element-wise addition when configured), which is
what keeps the input matrices small.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    AXES,
    Param,
    ShapeMismatchError,
    Tape,
    Tensor5,
    activation,
    affine,
    broadcast_add,
    broadcast_mul,
    fd_gradient,
    sum_all,
)

KINDS = ("ann", "deeponet", "mionet", "cpnn")
MERGES = ("hadamard", "add")
OUTPUT_MODES = ("separate", "joint")
TARGETS = ("velocity", "concentration")
TARGET_CHANNELS = {"velocity": 0, "concentration": 1}

SWMD_MAGIC = b"SWMD1\x00"


class AxisPlacementError(ValueError):
    """An input tensor occupies an axis reserved for a different input group."""


class CheckpointError(ValueError):
    """Malformed or truncated checkpoint file."""


@dataclass(frozen=True)
class ArchitectureConfig:
    """Network family, depths, width, activation, merge and output mode.

    ``encoder_layers`` is the depth of every branch/trunk subnetwork and
    ``decoder_layers`` the number of hidden FCNN layers after the merge
    (0 leaves a bare linear readout).  The ``ann`` kind has no encoder;
    its hidden stack is encoder_layers + decoder_layers deep so budgets
    stay comparable across kinds.
    """

    kind: str = "cpnn"
    encoder_layers: int = 2
    decoder_layers: int = 6
    hidden: int = 92
    activation: str = "tanh"
    merge: str = "hadamard"
    output_mode: str = "separate"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown architecture kind {self.kind!r}, expected one of {KINDS}")
        if self.merge not in MERGES:
            raise ValueError(f"unknown merge {self.merge!r}, expected one of {MERGES}")
        if self.output_mode not in OUTPUT_MODES:
            raise ValueError(f"unknown output mode {self.output_mode!r}")
        if self.activation not in ("tanh", "leaky_relu"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.encoder_layers < 1 or self.decoder_layers < 0 or self.hidden < 1:
            raise ValueError("encoder_layers >= 1, decoder_layers >= 0 and hidden >= 1 required")
        if self.kind in ("mionet", "deeponet") and self.decoder_layers != 0:
            raise ValueError(f"{self.kind} is a pure operator baseline: decoder_layers must be 0")

    @property
    def n_outputs(self) -> int:
        return 1 if self.output_mode == "separate" else 2


@dataclass
class StandardizationStats:
    """Training-split feature and target statistics (settling velocities in log10)."""

    p_mean: np.ndarray
    p_std: np.ndarray
    cl_mean: float
    cl_std: float
    t_mean: float
    t_std: float
    q_mean: np.ndarray
    q_std: np.ndarray
    y_mean: dict
    y_std: dict

    def params(self, p) -> np.ndarray:
        return (np.asarray(p, dtype=np.float64) - self.p_mean) / self.p_std

    def classes(self, w_s) -> np.ndarray:
        return (np.log10(np.asarray(w_s, dtype=np.float64)) - self.cl_mean) / self.cl_std

    def times(self, t) -> np.ndarray:
        return (np.asarray(t, dtype=np.float64) - self.t_mean) / self.t_std

    def coords(self, q) -> np.ndarray:
        return (np.asarray(q, dtype=np.float64) - self.q_mean) / self.q_std

    def target(self, y, name: str) -> np.ndarray:
        return (np.asarray(y, dtype=np.float64) - self.y_mean[name]) / self.y_std[name]

    def destandardize_target(self, y, name: str) -> np.ndarray:
        return np.asarray(y, dtype=np.float64) * self.y_std[name] + self.y_mean[name]

    def to_dict(self) -> dict:
        return {
            "p_mean": self.p_mean.tolist(), "p_std": self.p_std.tolist(),
            "cl_mean": self.cl_mean, "cl_std": self.cl_std,
            "t_mean": self.t_mean, "t_std": self.t_std,
            "q_mean": self.q_mean.tolist(), "q_std": self.q_std.tolist(),
            "y_mean": dict(self.y_mean), "y_std": dict(self.y_std),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StandardizationStats":
        return cls(
            p_mean=np.array(d["p_mean"]), p_std=np.array(d["p_std"]),
            cl_mean=float(d["cl_mean"]), cl_std=float(d["cl_std"]),
            t_mean=float(d["t_mean"]), t_std=float(d["t_std"]),
            q_mean=np.array(d["q_mean"]), q_std=np.array(d["q_std"]),
            y_mean={k: float(v) for k, v in d["y_mean"].items()},
            y_std={k: float(v) for k, v in d["y_std"].items()},
        )


@dataclass
class Dense:
    weight: Param  # (out, in)
    bias: Param    # (out,)


@dataclass
class ModelParams:
    """All trainable weights plus standardization statistics and run metadata."""

    config: ArchitectureConfig
    branch1: list
    branch2: list
    trunk1: list
    trunk2: list
    decoder: list
    stats: StandardizationStats | None = None
    meta: dict = field(default_factory=dict)

    def subnets(self):
        return (("branch1", self.branch1), ("branch2", self.branch2),
                ("trunk1", self.trunk1), ("trunk2", self.trunk2),
                ("decoder", self.decoder))

    def parameters(self) -> list:
        out = []
        for _, layers in self.subnets():
            for layer in layers:
                out.extend((layer.weight, layer.bias))
        return out

    def n_parameters(self) -> int:
        return sum(p.values.size for p in self.parameters())

    def copy_values(self) -> list:
        return [p.values.copy() for p in self.parameters()]

    def load_values(self, values: list) -> None:
        for p, v in zip(self.parameters(), values):
            p.values = v.copy()


ENCODER_WIDTHS = {"p": 5, "cl": 1, "T": 1, "q": 3}
ANN_WIDTH = 10      # 5 + 1 + 1 + 3 expanded feature row
BRANCH_WIDTH = 7    # 5 + 1 + 1 merged branch row


def _stack_dims(widths_in: int, hidden: int, depth: int) -> list:
    dims = []
    prev = widths_in
    for _ in range(depth):
        dims.append((hidden, prev))
        prev = hidden
    return dims


def build(cfg: ArchitectureConfig, seed) -> ModelParams:
    """Glorot-uniform weights (biases zero), deterministic under the seed."""
    rng = np.random.default_rng(seed)

    def dense(n_out, n_in):
        limit = np.sqrt(6.0 / (n_in + n_out))
        w = rng.uniform(-limit, limit, size=(n_out, n_in))
        return Dense(Param(w), Param(np.zeros(n_out)))

    def stack(dims):
        return [dense(o, i) for o, i in dims]

    h, enc, dec, n_out = cfg.hidden, cfg.encoder_layers, cfg.decoder_layers, cfg.n_outputs
    branch1 = branch2 = trunk1 = trunk2 = []
    if cfg.kind == "ann":
        decoder = stack(_stack_dims(ANN_WIDTH, h, enc + dec) + [(n_out, h)])
    elif cfg.kind == "deeponet":
        branch1 = stack(_stack_dims(BRANCH_WIDTH, h, enc))
        trunk2 = stack(_stack_dims(ENCODER_WIDTHS["q"], h, enc))
        decoder = stack(_stack_dims(h, h, dec) + [(n_out, h)])
    else:  # mionet / cpnn
        branch1 = stack(_stack_dims(ENCODER_WIDTHS["p"], h, enc))
        branch2 = stack(_stack_dims(ENCODER_WIDTHS["cl"], h, enc))
        trunk1 = stack(_stack_dims(ENCODER_WIDTHS["T"], h, enc))
        trunk2 = stack(_stack_dims(ENCODER_WIDTHS["q"], h, enc))
        decoder = stack(_stack_dims(h, h, dec) + [(n_out, h)])
    return ModelParams(cfg, branch1, branch2, trunk1, trunk2, decoder)


def _encode(layers, x: Tensor5, act: str) -> Tensor5:
    for layer in layers:
        x = activation(affine(x, layer.weight, layer.bias), act)
    return x


def _decode(layers, x: Tensor5, act: str) -> Tensor5:
    for layer in layers[:-1]:
        x = activation(affine(x, layer.weight, layer.bias), act)
    last = layers[-1]
    return affine(x, last.weight, last.bias)


def _require_axes(name: str, t: Tensor5, allowed: tuple, width: int) -> None:
    for i in range(4):
        if t.shape[i] != 1 and i not in allowed:
            raise AxisPlacementError(
                f"input '{name}' occupies foreign axis '{AXES[i]}' (shape {t.shape})"
            )
    if t.shape[4] != width:
        raise ShapeMismatchError(f"input '{name}' must have {width} features, got {t.shape[4]}")


def _merge(latents, merge: str) -> Tensor5:
    op = broadcast_mul if merge == "hadamard" else broadcast_add
    out = latents[0]
    for latent in latents[1:]:
        out = op(out, latent)
    return out


def forward_mionet(m: ModelParams, p: Tensor5, cl: Tensor5, T: Tensor5, q: Tensor5) -> Tensor5:
    """Merged latent of the four subnetworks, shape (N_L, N_c, N_t, N_s, hidden).

    Axis placement is fixed: p on the case axis, cl on the class axis,
    T on the time axis, q on the (case, point) axes.
    """
    _require_axes("p", p, (0,), ENCODER_WIDTHS["p"])
    _require_axes("cl", cl, (1,), ENCODER_WIDTHS["cl"])
    _require_axes("T", T, (2,), ENCODER_WIDTHS["T"])
    _require_axes("q", q, (0, 3), ENCODER_WIDTHS["q"])
    act = m.config.activation
    latents = (
        _encode(m.branch1, p, act),
        _encode(m.branch2, cl, act),
        _encode(m.trunk1, T, act),
        _encode(m.trunk2, q, act),
    )
    return _merge(latents, m.config.merge)


def forward_cpnn(m: ModelParams, p: Tensor5, cl: Tensor5, T: Tensor5, q: Tensor5) -> Tensor5:
    """FCNN decode of the mionet latent; no activation on the output layer."""
    return _decode(m.decoder, forward_mionet(m, p, cl, T, q), m.config.activation)


def forward_deeponet(m: ModelParams, branch_in: Tensor5, trunk_in: Tensor5) -> Tensor5:
    _require_axes("branch", branch_in, (0, 1, 2), BRANCH_WIDTH)
    _require_axes("trunk", trunk_in, (0, 3), ENCODER_WIDTHS["q"])
    act = m.config.activation
    merged = _merge((_encode(m.branch1, branch_in, act), _encode(m.trunk2, trunk_in, act)),
                    m.config.merge)
    return _decode(m.decoder, merged, act)


def forward_ann(m: ModelParams, x: Tensor5) -> Tensor5:
    _require_axes("x", x, (0, 1, 2, 3), ANN_WIDTH)
    return _decode(m.decoder, x, m.config.activation)


def pack_case_features(p2d) -> Tensor5:
    p2d = np.asarray(p2d, dtype=np.float64)
    return Tensor5(p2d.reshape(p2d.shape[0], 1, 1, 1, p2d.shape[1]))


def pack_class_features(cl1d) -> Tensor5:
    cl1d = np.asarray(cl1d, dtype=np.float64)
    return Tensor5(cl1d.reshape(1, -1, 1, 1, 1))


def pack_time_features(t1d) -> Tensor5:
    t1d = np.asarray(t1d, dtype=np.float64)
    return Tensor5(t1d.reshape(1, 1, -1, 1, 1))


def pack_point_features(q3d) -> Tensor5:
    q3d = np.asarray(q3d, dtype=np.float64)
    return Tensor5(q3d.reshape(q3d.shape[0], 1, 1, q3d.shape[1], q3d.shape[2]))


def expand_branch_input(p2d, cl1d, t1d) -> Tensor5:
    """Cartesian (event x class x time) rows of width 7 on the first three axes."""
    p2d, cl1d, t1d = (np.asarray(a, dtype=np.float64) for a in (p2d, cl1d, t1d))
    n_l, n_c, n_t = p2d.shape[0], cl1d.shape[0], t1d.shape[0]
    rows = np.empty((n_l, n_c, n_t, 1, BRANCH_WIDTH))
    rows[..., 0, 0:5] = p2d[:, None, None, :]
    rows[..., 0, 5] = cl1d[None, :, None]
    rows[..., 0, 6] = t1d[None, None, :]
    return Tensor5(rows)


def expand_ann_input(p2d, cl1d, t1d, q3d) -> Tensor5:
    """Fully materialized Cartesian-product feature rows of width 10."""
    p2d, cl1d, t1d, q3d = (np.asarray(a, dtype=np.float64) for a in (p2d, cl1d, t1d, q3d))
    n_l, n_c, n_t, n_s = p2d.shape[0], cl1d.shape[0], t1d.shape[0], q3d.shape[1]
    rows = np.empty((n_l, n_c, n_t, n_s, ANN_WIDTH))
    rows[..., 0:5] = p2d[:, None, None, None, :]
    rows[..., 5] = cl1d[None, :, None, None]
    rows[..., 6] = t1d[None, None, :, None]
    rows[..., 7:10] = q3d[:, None, None, :, :]
    return Tensor5(rows)


def build_inputs(kind: str, p2d, cl1d, t1d, q3d) -> dict:
    """Leaf tensors for one forward pass, keyed per architecture family."""
    if kind == "ann":
        return {"x": expand_ann_input(p2d, cl1d, t1d, q3d)}
    if kind == "deeponet":
        return {"branch": expand_branch_input(p2d, cl1d, t1d),
                "trunk": pack_point_features(q3d)}
    return {"p": pack_case_features(p2d), "cl": pack_class_features(cl1d),
            "T": pack_time_features(t1d), "q": pack_point_features(q3d)}


def forward_from_inputs(m: ModelParams, inputs: dict) -> Tensor5:
    kind = m.config.kind
    if kind == "ann":
        return forward_ann(m, inputs["x"])
    if kind == "deeponet":
        return forward_deeponet(m, inputs["branch"], inputs["trunk"])
    return forward_cpnn(m, inputs["p"], inputs["cl"], inputs["T"], inputs["q"])


def forward_model(m: ModelParams, p2d, cl1d, t1d, q3d) -> Tensor5:
    """Standardized-feature forward for any architecture kind."""
    return forward_from_inputs(m, build_inputs(m.config.kind, p2d, cl1d, t1d, q3d))


def extract_loading_grad(inputs: dict, kind: str) -> np.ndarray:
    """Gradient slice w.r.t. the five standardized event parameters, shape (N_L, 5)."""
    if kind == "ann":
        grad = inputs["x"].grad[..., 0:5]
    elif kind == "deeponet":
        grad = inputs["branch"].grad[..., 0:5]
    else:
        grad = inputs["p"].grad
    return grad.sum(axis=(1, 2, 3))


# --- memory accounting -----------------------------------------------------

@dataclass(frozen=True)
class MemoryAccounting:
    """Input-element counts for the expanded (ann) and grouped (mionet) layouts."""

    ann_elements: int        # width-10 rows replicated over cases x times x points
    ann_elements_full: int   # full Cartesian rows including the class axis
    mionet_elements: int     # grouped inputs: M*5 + C + O + M*N*3
    ratio: float             # mionet_elements / ann_elements

    def bytes(self, count: int, bytes_per_element: int = 4) -> int:
        return count * bytes_per_element


def input_memory_accounting(m: int, c: int, o: int, n: int) -> MemoryAccounting:
    if min(m, c, o, n) < 1:
        raise ValueError("dims must be positive")
    ann = m * o * n * ANN_WIDTH
    ann_full = m * c * o * n * ANN_WIDTH
    mionet = m * 5 + c + o + m * n * 3
    return MemoryAccounting(ann, ann_full, mionet, mionet / ann)


# --- checkpoint persistence -------------------------------------------------

def save_model(m: ModelParams, path) -> None:
    """SWMD1 checkpoint: magic, u32 header length, JSON header, flat f64 weights."""
    header = {
        "format": "SWMD1",
        "version": 1,
        "architecture": {
            "kind": m.config.kind,
            "encoder_layers": m.config.encoder_layers,
            "decoder_layers": m.config.decoder_layers,
            "hidden": m.config.hidden,
            "activation": m.config.activation,
            "merge": m.config.merge,
            "output_mode": m.config.output_mode,
        },
        "layers": {name: [[l.weight.shape[0], l.weight.shape[1]] for l in layers]
                   for name, layers in m.subnets()},
        "stats": m.stats.to_dict() if m.stats is not None else None,
        "meta": m.meta,
    }
    blob = json.dumps(header).encode("utf-8")
    flat = [p.values.ravel() for p in m.parameters()]
    weights = np.concatenate(flat) if flat else np.empty(0)
    with open(path, "wb") as f:
        f.write(SWMD_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(np.ascontiguousarray(weights, dtype="<f8").tobytes())


def load_model(path) -> ModelParams:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[: len(SWMD_MAGIC)] != SWMD_MAGIC:
        raise CheckpointError(f"bad checkpoint magic in {path}")
    off = len(SWMD_MAGIC)
    if len(raw) < off + 4:
        raise CheckpointError(f"truncated checkpoint header in {path}")
    (header_len,) = struct.unpack_from("<I", raw, off)
    off += 4
    if len(raw) < off + header_len:
        raise CheckpointError(f"truncated checkpoint header in {path}")
    header = json.loads(raw[off: off + header_len].decode("utf-8"))
    off += header_len
    if header.get("format") != "SWMD1":
        raise CheckpointError(f"unexpected checkpoint format {header.get('format')!r}")

    cfg = ArchitectureConfig(**header["architecture"])
    weights = np.frombuffer(raw, dtype="<f8", offset=off)
    subnets = {}
    cursor = 0
    for name in ("branch1", "branch2", "trunk1", "trunk2", "decoder"):
        layers = []
        for n_out, n_in in header["layers"][name]:
            need = n_out * n_in + n_out
            if cursor + need > weights.size:
                raise CheckpointError(f"truncated weight block in {path}")
            w = weights[cursor: cursor + n_out * n_in].reshape(n_out, n_in).copy()
            cursor += n_out * n_in
            b = weights[cursor: cursor + n_out].copy()
            cursor += n_out
            layers.append(Dense(Param(w), Param(b)))
        subnets[name] = layers
    if cursor != weights.size:
        raise CheckpointError(f"checkpoint has {weights.size - cursor} unused weights: {path}")

    stats = StandardizationStats.from_dict(header["stats"]) if header["stats"] else None
    return ModelParams(cfg, subnets["branch1"], subnets["branch2"], subnets["trunk1"],
                       subnets["trunk2"], subnets["decoder"], stats=stats,
                       meta=header.get("meta", {}))


# --- inference wrapper and gradient audit ------------------------------------

class NetworkSurrogate:
    """Chunked raw-unit predictions from one or more trained checkpoints."""

    def __init__(self, *model_list, chunk_rows: int = 200_000):
        if not model_list:
            raise ValueError("need at least one model")
        self.models = []
        names = []
        for m in model_list:
            if m.stats is None:
                raise ValueError("model has no standardization statistics; train it first")
            targets = (m.meta["target"],) if m.config.output_mode == "separate" else TARGETS
            self.models.append((m, targets))
            names.extend(targets)
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate prediction targets: {names}")
        self.target_names = tuple(names)
        self.chunk_rows = chunk_rows

    def predict_fields(self, p, classes, times_s, points) -> dict:
        """Map target name -> raw-unit predictions shaped (C, T, P)."""
        if hasattr(p, "as_array"):
            p = p.as_array()
        classes = np.atleast_1d(np.asarray(classes, dtype=np.float64))
        times_s = np.atleast_1d(np.asarray(times_s, dtype=np.float64))
        points = np.asarray(points, dtype=np.float64)
        out = {}
        for m, targets in self.models:
            stats = m.stats
            p_std = stats.params(np.asarray(p, dtype=np.float64).reshape(1, 5))
            cl_std = stats.classes(classes)
            q_std = stats.coords(points).reshape(1, len(points), 3)
            t_std = stats.times(times_s)

            chunk = max(1, self.chunk_rows // max(1, len(classes) * len(points)))
            preds = np.empty((len(classes), len(times_s), len(points), m.config.n_outputs))
            for lo in range(0, len(times_s), chunk):
                sl = slice(lo, min(lo + chunk, len(times_s)))
                y = forward_model(m, p_std, cl_std, t_std[sl], q_std)
                preds[:, sl] = y.values[0]
            for j, name in enumerate(targets):
                out[name] = stats.destandardize_target(preds[..., j], name)
        return out

    def predict_case(self, params_row, classes, times_s, coords) -> np.ndarray:
        fields = self.predict_fields(params_row, classes, times_s, coords)
        return np.stack([fields[name] for name in self.target_names], axis=-1)


def gradient_audit(seed, draws_per_kind: int = 25, eps: float = 1e-5,
                   extents=(2, 2, 3, 2), hidden: int = 6,
                   probes_per_node: int = 2) -> dict:
    """Worst autodiff-vs-central-difference relative error per architecture.

    Each draw builds a small random instance, takes a fixed random positive
    projection of the outputs as the scalar loss, and compares the
    reverse-mode gradient of every weight, bias and input tensor against
    central differences along unit directions: the gradient's own direction
    (where the projection equals ||g|| and the check is the classic relative
    comparison) plus random directions.  Errors are measured relative to
    max(||g||, |analytic|, |numeric|, 1e-12).  Directional probes are used
    rather than per-coordinate differences because a coordinate whose
    gradient is ~1e-7 of the intermediate scale cannot be resolved to 1e-6
    relative by f64 central differences at this step size, even when the
    two gradients agree to twelve digits in absolute terms.
    """
    root = np.random.default_rng(seed)
    n_l, n_c, n_t, n_s = extents
    worst = {}
    for kind in KINDS:
        dec = 0 if kind in ("mionet", "deeponet") else 2
        cfg = ArchitectureConfig(kind=kind, encoder_layers=1, decoder_layers=dec,
                                 hidden=hidden, activation="tanh")
        kind_worst = 0.0
        for _ in range(draws_per_kind):
            model = build(cfg, root.integers(2**63))
            p2d = root.normal(size=(n_l, 5))
            cl1d = root.normal(size=n_c)
            t1d = root.normal(size=n_t)
            q3d = root.normal(size=(n_l, n_s, 3))
            proj = root.uniform(0.5, 1.5, size=(1, 1, 1, 1, cfg.n_outputs))

            inputs = build_inputs(kind, p2d, cl1d, t1d, q3d)

            def value() -> float:
                out = forward_from_inputs(model, inputs)
                return float((out.values * proj).sum())

            with Tape() as tape:
                out = forward_from_inputs(model, inputs)
                loss = sum_all(broadcast_mul(out, Tensor5(np.broadcast_to(proj, out.shape))))
                tape.backward(loss)

            checks = [(t, t.grad) for t in inputs.values()]
            checks += [(p, p.grad) for p in model.parameters()]
            for node, analytic in checks:
                base = node.values
                grad = analytic if analytic is not None else np.zeros_like(base)
                g_norm = float(np.linalg.norm(grad))
                directions = []
                if g_norm > 0:
                    directions.append(grad / g_norm)
                while len(directions) < probes_per_node:
                    d = root.normal(size=base.shape)
                    directions.append(d / np.linalg.norm(d))
                for direction in directions:
                    node.values = base + eps * direction
                    f_plus = value()
                    node.values = base - eps * direction
                    f_minus = value()
                    node.values = base
                    numeric = (f_plus - f_minus) / (2.0 * eps)
                    a = float((grad * direction).sum())
                    rel = abs(a - numeric) / max(g_norm, abs(a), abs(numeric), 1e-12)
                    kind_worst = max(kind_worst, rel)
        worst[kind] = kind_worst
    return worst
