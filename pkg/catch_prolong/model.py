"""
The catch-and-prolong network.

A prefix of a track candidate (target first, then one hit per station) is
normalised, passed through one convolutional layer and two one-directional
GRU layers, and the last hidden state feeds two heads: one sigmoid neuron
(is this a true track?) and four regression neurons (ellipse center and
two softplus semiaxes on the next station).

Which heads a caller sees depends on the prefix length: a 2-point prefix
only gets the ellipse, a full-length prefix only gets the probability.
"""

import hashlib
import json
import logging
import struct
from dataclasses import dataclass, asdict, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from catch_prolong.detector import DetectorConfig
from catch_prolong.loss import HeadBatch, HeadGrads
from catch_prolong.nn.kernel import (
    Conv1D, Dense, GRULayer, Params, ShapeError, init_params, sigmoid, softplus, softplus_inverse,
)

logger = logging.getLogger("CatchProlong")

CENTER_ANCHORS = ("extrapolation", "origin")
INPUT_FRAMES = ("track", "detector")

CHECKPOINT_MAGIC = b"CPNET\x00"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Unreadable, corrupt or incompatible checkpoint."""


@dataclass(frozen=True)
class ModelConfig:
    """
    Network sizes and coordinate conventions.

    In the `detector` input frame, `scales` divide (x, y, z) before the
    network sees them. In the `track` frame, x and y become offsets from
    the line through the target and the station-0 hit, in units of
    `frame_scale_cm`, so millimetre kinks stay visible; z is still
    divided by its scale. With the `extrapolation` anchor, the center neurons give a residual (times
    `center_scale_cm`) added to the straight-line extrapolation of the
    last two prefix points; with `origin`, they give the absolute center
    times the x/y scales. Semiaxes are `semiaxis_scale_cm * softplus`.
    """
    station_z: Tuple[float, ...] = (30.0, 50.0, 70.0, 90.0, 110.0)
    scales: Tuple[float, float, float] = (117.33333333333333, 75.16666666666667, 110.0)
    input_features: int = 3
    conv_filters: int = 32
    kernel_size: int = 3
    hidden_sizes: Tuple[int, int] = (32, 32)
    input_frame: str = "track"
    frame_scale_cm: float = 2.0
    center_anchor: str = "extrapolation"
    center_scale_cm: float = 5.0
    semiaxis_scale_cm: float = 1.0
    initial_semiaxis_cm: float = 2.0

    def __post_init__(self):
        object.__setattr__(self, "station_z", tuple(float(z) for z in self.station_z))
        object.__setattr__(self, "scales", tuple(float(s) for s in self.scales))
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        if len(self.station_z) < 2:
            raise ValueError("the model needs at least two stations")
        if self.input_features != 3:
            raise ValueError("inputs are (x, y, z) points")
        if len(self.hidden_sizes) != 2 or min(self.hidden_sizes) <= 0:
            raise ValueError(f"two positive GRU hidden sizes required, got {self.hidden_sizes}")
        if self.conv_filters <= 0:
            raise ValueError("conv_filters must be positive")
        if self.kernel_size <= 0 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be odd and positive, got {self.kernel_size}")
        if len(self.scales) != 3 or min(self.scales) <= 0:
            raise ValueError(f"three positive normalisation scales required, got {self.scales}")
        if self.center_anchor not in CENTER_ANCHORS:
            raise ValueError(f"center_anchor must be one of {CENTER_ANCHORS}")
        if self.input_frame not in INPUT_FRAMES:
            raise ValueError(f"input_frame must be one of {INPUT_FRAMES}")
        if min(self.center_scale_cm, self.semiaxis_scale_cm, self.initial_semiaxis_cm, self.frame_scale_cm) <= 0:
            raise ValueError("center, semiaxis and frame scales must be positive")

    @property
    def n_stations(self) -> int:
        return len(self.station_z)

    @property
    def max_length(self) -> int:
        return self.n_stations + 1

    @classmethod
    def for_detector(cls, detector: DetectorConfig, **overrides) -> "ModelConfig":
        """Station planes and normalisation taken from the detector geometry."""
        values = {
            "station_z": detector.station_z,
            "scales": (max(detector.half_extent_x), max(detector.half_extent_y), detector.station_z[-1]),
        }
        values.update(overrides)
        return cls(**values)

    def to_mapping(self) -> Dict[str, Any]:
        mapping = asdict(self)
        for key, value in mapping.items():
            if isinstance(value, tuple):
                mapping[key] = list(value)
        return mapping

    @classmethod
    def from_mapping(cls, mapping: Dict[str, Any]) -> "ModelConfig":
        return cls(**mapping)


@dataclass
class Ellipse:
    """Axis-aligned ellipse on a station plane: r1 along x, r2 along y (cm)."""
    cx: float
    cy: float
    r1: float
    r2: float

    @property
    def area(self) -> float:
        return float(np.pi * self.r1 * self.r2)


@dataclass
class ModelOutput:
    prob: Optional[float] = None
    ellipse: Optional[Ellipse] = None


@dataclass
class BatchOutput:
    """Outputs for equal-length prefixes; absent heads are None."""
    length: int
    prob: Optional[np.ndarray] = None
    center: Optional[np.ndarray] = None
    semiaxes: Optional[np.ndarray] = None

    def __len__(self) -> int:
        for array in (self.prob, self.center):
            if array is not None:
                return len(array)
        return 0

    def item(self, i: int) -> ModelOutput:
        ellipse = None
        if self.center is not None:
            ellipse = Ellipse(cx=float(self.center[i, 0]), cy=float(self.center[i, 1]),
                              r1=float(self.semiaxes[i, 0]), r2=float(self.semiaxes[i, 1]))
        return ModelOutput(prob=None if self.prob is None else float(self.prob[i]), ellipse=ellipse)


@dataclass
class ForwardCache:
    length: int
    conv: Any
    conv_out: np.ndarray
    gru1: Any
    gru2: Any
    h_last: np.ndarray
    steps: int
    heads: Dict[str, Any] = field(default_factory=dict)


class CatchProlongNet:
    """Conv + two GRU layers + classification and ellipse heads."""

    def __init__(self, config: ModelConfig, params: Optional[Params] = None, seed: int = 0):
        self.config = config
        h1, h2 = config.hidden_sizes
        self.conv = Conv1D("conv", config.input_features, config.conv_filters, config.kernel_size)
        self.gru1 = GRULayer("gru1", config.conv_filters, h1)
        self.gru2 = GRULayer("gru2", h1, h2)
        self.cls_head = Dense("cls", h2, 1)
        self.reg_head = Dense("reg", h2, 4)
        self.layers = (self.conv, self.gru1, self.gru2, self.cls_head, self.reg_head)

        if params is None:
            params = init_params(self.param_shapes(), np.random.default_rng(seed))
            bias = softplus_inverse(config.initial_semiaxis_cm / config.semiaxis_scale_cm)
            params["reg.b"][2:] = bias
        self.params = params
        self.check_params(params)

    def param_shapes(self) -> Dict[str, Tuple[int, ...]]:
        shapes = {}
        for layer in self.layers:
            shapes.update(layer.param_shapes())
        return shapes

    def check_params(self, params: Params) -> None:
        shapes = self.param_shapes()
        missing = sorted(set(shapes) - set(params))
        extra = sorted(set(params) - set(shapes))
        if missing or extra:
            raise ShapeError(f"parameter names do not match the model (missing {missing}, unexpected {extra})")
        for key, shape in shapes.items():
            if params[key].shape != shape:
                raise ShapeError(f"{key}: expected shape {shape}, got {params[key].shape}")

    # -- Forward ------------------------------------------------------------------

    def head_presence(self, length: int) -> Tuple[bool, bool]:
        """(probability present, ellipse present) for a prefix length."""
        return length >= 3, length <= self.config.n_stations

    def _validate_length(self, length: int) -> None:
        if not 2 <= length <= self.config.max_length:
            raise ValueError(f"prefix length must lie in [2, {self.config.max_length}], got {length}")

    def normalise(self, points: np.ndarray) -> np.ndarray:
        """(B, L, 3) prefixes in cm to network inputs; uses nothing beyond the prefix."""
        scales = np.asarray(self.config.scales)
        if self.config.input_frame == "detector":
            return points / scales
        first = points[:, 1:2]
        lever = points[..., 2:3] / first[..., 2:3]
        x = np.empty_like(points)
        x[..., :2] = (points[..., :2] - lever * first[..., :2]) / self.config.frame_scale_cm
        x[..., 2] = points[..., 2] / scales[2]
        return x

    def anchor(self, points: np.ndarray) -> np.ndarray:
        """Straight-line extrapolation of the last two points onto the next station (cm)."""
        length = points.shape[1]
        if self.config.center_anchor == "origin":
            return np.zeros((len(points), 2))
        z_next = self.config.station_z[length - 1]
        prev, last = points[:, -2], points[:, -1]
        t = (z_next - last[:, 2]) / (last[:, 2] - prev[:, 2])
        return last[:, :2] + (last[:, :2] - prev[:, :2]) * t[:, None]

    def _center_scale(self) -> np.ndarray:
        if self.config.center_anchor == "origin":
            return np.asarray(self.config.scales[:2])
        return np.full(2, self.config.center_scale_cm)

    def forward_train(self, points: np.ndarray, params: Optional[Params] = None) -> Tuple[HeadBatch, ForwardCache]:
        """
        Run a batch of equal-length prefixes (B, L, 3) in cm and return the
        head pre-activations for the heads present at this length, plus
        the cache for `backward`.
        """
        params = self.params if params is None else params
        points = np.asarray(points, dtype=np.float64)
        if points.ndim != 3 or points.shape[2] != 3:
            raise ShapeError(f"prefixes must be (batch, length, 3), got {points.shape}")
        length = points.shape[1]
        self._validate_length(length)

        x = self.normalise(points)
        conv_pre, conv_cache = self.conv.forward(params, x)
        conv_out = np.tanh(conv_pre)
        h1, gru1_cache = self.gru1.forward(params, conv_out)
        h2, gru2_cache = self.gru2.forward(params, h1)
        h_last = h2[:, -1]

        has_prob, has_ellipse = self.head_presence(length)
        cache = ForwardCache(length=length, conv=conv_cache, conv_out=conv_out, gru1=gru1_cache,
                             gru2=gru2_cache, h_last=h_last, steps=length)
        heads = HeadBatch(semi_scale=(self.config.semiaxis_scale_cm, self.config.semiaxis_scale_cm))
        if has_prob:
            logits, cache.heads["cls"] = self.cls_head.forward(params, h_last)
            heads.logits = logits[:, 0]
        if has_ellipse:
            reg, cache.heads["reg"] = self.reg_head.forward(params, h_last)
            heads.center = self.anchor(points) + reg[:, :2] * self._center_scale()
            heads.semi_pre = reg[:, 2:]
        return heads, cache

    def forward_batch(self, points) -> BatchOutput:
        """Outputs for a batch of equal-length prefixes, each identical to `forward`."""
        points = np.asarray(points, dtype=np.float64)
        if points.ndim == 3 and len(points) == 0:
            return BatchOutput(length=points.shape[1])
        if points.ndim != 3:
            raise ValueError("forward_batch takes equal-length prefixes as one (batch, length, 3) array")
        heads, _ = self.forward_train(points)
        return BatchOutput(length=points.shape[1], prob=heads.prob, center=heads.center,
                           semiaxes=heads.semiaxes)

    def forward_many(self, prefixes: Sequence[np.ndarray]) -> BatchOutput:
        """Like forward_batch, from a list of (L, 3) prefixes that must share L."""
        if len(prefixes) == 0:
            return BatchOutput(length=0)
        lengths = {len(p) for p in prefixes}
        if len(lengths) != 1:
            raise ValueError(f"forward_many needs equal-length prefixes, got lengths {sorted(lengths)}")
        return self.forward_batch(np.stack([np.asarray(p, dtype=np.float64) for p in prefixes]))

    def forward(self, prefix) -> ModelOutput:
        """Output for a single prefix of 2..n_stations+1 points."""
        prefix = np.asarray(prefix, dtype=np.float64)
        if prefix.ndim != 2 or prefix.shape[1] != 3:
            raise ShapeError(f"a prefix is an (L, 3) array of points, got {prefix.shape}")
        return self.forward_batch(prefix[None]).item(0)

    # -- Backward -----------------------------------------------------------------

    def backward(self, cache: Optional[ForwardCache], dheads: HeadGrads,
                 params: Optional[Params] = None) -> Params:
        """
        Gradients of a scalar objective for every parameter, given its
        adjoints with respect to the head pre-activations of `forward_train`.
        """
        if cache is None:
            raise RuntimeError("backward requires the cache of a completed forward pass")
        params = self.params if params is None else params
        grads = {k: np.zeros_like(p) for k, p in params.items()}

        dh_last = np.zeros_like(cache.h_last)
        if "cls" in cache.heads and dheads.logits is not None:
            dx, g = self.cls_head.backward(params, cache.heads["cls"], np.asarray(dheads.logits)[:, None])
            dh_last += dx
            grads.update(g)
        if "reg" in cache.heads and dheads.center is not None:
            dreg = np.concatenate([dheads.center * self._center_scale(), dheads.semi_pre], axis=1)
            dx, g = self.reg_head.backward(params, cache.heads["reg"], dreg)
            dh_last += dx
            grads.update(g)

        batch, steps = cache.conv_out.shape[:2]
        dh2 = np.zeros((batch, steps, self.config.hidden_sizes[1]))
        dh2[:, -1] = dh_last
        dh1, g, _ = self.gru2.backward(params, cache.gru2, dh2)
        grads.update(g)
        dconv_out, g, _ = self.gru1.backward(params, cache.gru1, dh1)
        grads.update(g)
        dconv_pre = dconv_out * (1.0 - cache.conv_out ** 2)
        _, g = self.conv.backward(params, cache.conv, dconv_pre)
        grads.update(g)
        return grads


# -- Checkpoints ---------------------------------------------------------------------------

def _payload(params: Params) -> Tuple[List[Dict[str, Any]], bytes]:
    manifest, chunks, offset = [], [], 0
    for key in sorted(params):
        data = np.ascontiguousarray(params[key], dtype="<f8").tobytes()
        manifest.append({"name": key, "shape": list(params[key].shape), "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    return manifest, b"".join(chunks)


def save_checkpoint(path: str, net: CatchProlongNet, training: Optional[Dict[str, Any]] = None) -> None:
    """
    Write magic, version, a JSON header (model config, tensor manifest,
    training echo, payload digest) and the little-endian float64 tensors.
    Identical weights and metadata give identical bytes.
    """
    manifest, payload = _payload(net.params)
    header = {
        "model": net.config.to_mapping(),
        "tensors": manifest,
        "training": training or {},
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "payload_bytes": len(payload),
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(header_bytes)))
        f.write(header_bytes)
        f.write(payload)
    logger.info(f"Saved checkpoint to {path} ({len(manifest)} tensors)")


def load_checkpoint(path: str) -> Tuple[CatchProlongNet, Dict[str, Any]]:
    """
    Read a checkpoint written by save_checkpoint.

    Returns:
        (network, training echo).

    Raises:
        CheckpointError: wrong magic or version, truncation, digest
            mismatch, or tensors inconsistent with the stored config.
    """
    with open(path, "rb") as f:
        blob = f.read()

    prefix = len(CHECKPOINT_MAGIC)
    if blob[:prefix] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not a catch-prolong checkpoint")
    if len(blob) < prefix + 8:
        raise CheckpointError(f"{path} is truncated (no header)")
    version, header_len = struct.unpack("<II", blob[prefix:prefix + 8])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    start = prefix + 8
    if len(blob) < start + header_len:
        raise CheckpointError(f"{path} is truncated (incomplete header)")
    try:
        header = json.loads(blob[start:start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint header: {e}") from e

    payload = blob[start + header_len:]
    if len(payload) != header.get("payload_bytes"):
        raise CheckpointError(
            f"{path} is truncated or padded: payload has {len(payload)} bytes, "
            f"expected {header.get('payload_bytes')}"
        )
    if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise CheckpointError(f"{path} payload digest mismatch")

    params = {}
    for entry in header["tensors"]:
        chunk = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        params[entry["name"]] = np.frombuffer(chunk, dtype="<f8").astype(np.float64).reshape(entry["shape"])

    try:
        config = ModelConfig.from_mapping(header["model"])
        net = CatchProlongNet(config, params=params)
    except (TypeError, ValueError) as e:
        raise CheckpointError(f"checkpoint tensors do not match its model config: {e}") from e
    return net, header.get("training", {})
