"""Width-d leaky-ReLU networks: evaluation, composition, lifting, inversion, files.

Layer ``k`` holds ``(W_k, b_k)``; the network computes ``z_0 = W_0 x + b_0``
and ``z_k = W_k sigma(z_{k-1}) + b_k``, returning the last pre-activation.
Checkpoints mark layers whose pre-activation equals a trajectory sample.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import __version__
from .errors import IncompatibleNets, InvalidInput, InvalidParameter, NotInvertible, ParseError
from .scalar_nets import ScalarNet

__all__ = [
    "DeepNet",
    "eval_deep",
    "compose_deep",
    "compose_many",
    "lift_scalar",
    "embed_affine",
    "identity_net",
    "checkpoint_gadget",
    "invert_deep",
    "serialize",
    "deserialize",
    "FORMAT_VERSION",
]

FORMAT_VERSION = 1
DET_TOL = 1e-12


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class DeepNet:
    alpha: float
    dim: int
    layers: tuple
    checkpoints: tuple = ()
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (0.0 < self.alpha < 1.0):
            raise InvalidParameter(f"alpha must lie in (0, 1), got {self.alpha!r}")
        d = int(self.dim)
        if d < 1:
            raise InvalidParameter("dim must be at least 1")
        if not self.layers:
            raise InvalidParameter("a DeepNet needs at least one layer")
        layers = []
        for W, b in self.layers:
            W, b = _frozen(W), _frozen(b)
            if W.shape != (d, d) or b.shape != (d,):
                raise InvalidParameter(f"layer shapes must be ({d},{d}) and ({d},)")
            layers.append((W, b))
        cps = tuple((int(l), float(t)) for l, t in self.checkpoints)
        idx = [l for l, _ in cps]
        if any(j <= i for i, j in zip(idx, idx[1:])) or any(l < 0 or l >= len(layers) for l in idx):
            raise InvalidParameter("checkpoint layers must be strictly increasing and within the net")
        object.__setattr__(self, "dim", d)
        object.__setattr__(self, "layers", tuple(layers))
        object.__setattr__(self, "checkpoints", cps)

    @property
    def depth(self) -> int:
        """Number of activation layers."""
        return len(self.layers) - 1

    def determinants(self) -> np.ndarray:
        return np.array([np.linalg.det(W) for W, _ in self.layers])

    def is_nonsingular(self) -> bool:
        for W, _ in self.layers:
            scale = max(1.0, float(np.max(np.abs(W)))) ** self.dim
            if abs(np.linalg.det(W)) <= DET_TOL * scale:
                return False
        return True

    def __call__(self, x):
        return eval_deep(self, x)


def _as_points(net: DeepNet, x) -> Tuple[np.ndarray, bool]:
    xa = np.asarray(x, dtype=float)
    single = xa.ndim == 1
    pts = xa[None, :] if single else xa
    if pts.ndim != 2 or pts.shape[1] != net.dim:
        raise InvalidInput(f"expected points of dimension {net.dim}, got shape {xa.shape}")
    return pts, single


def eval_deep(net: DeepNet, x) -> np.ndarray:
    """Final pre-activation for one point ``(d,)`` or a batch ``(n, d)``."""
    pts, single = _as_points(net, x)
    a = net.alpha
    W0, b0 = net.layers[0]
    z = pts @ W0.T + b0
    for W, b in net.layers[1:]:
        z = np.maximum(a * z, z) @ W.T + b
    return z[0] if single else z


def hidden_states(net: DeepNet, x, layers: Iterable[int]) -> dict:
    """Pre-activations at the requested layer indices."""
    pts, single = _as_points(net, x)
    wanted = set(layers)
    out = {}
    a = net.alpha
    z = None
    for k, (W, b) in enumerate(net.layers):
        z = pts @ W.T + b if k == 0 else np.maximum(a * z, z) @ W.T + b
        if k in wanted:
            out[k] = z[0].copy() if single else z.copy()
    return out


def compose_many(nets: Sequence[DeepNet]) -> DeepNet:
    """``nets[-1] o ... o nets[0]`` with each junction's affine maps merged."""
    if not nets:
        raise InvalidParameter("nothing to compose")
    first = nets[0]
    for n in nets[1:]:
        if n.alpha != first.alpha or n.dim != first.dim:
            raise IncompatibleNets("composed nets must share alpha and dim")
    layers: List[Tuple[np.ndarray, np.ndarray]] = list(first.layers)
    cps = list(first.checkpoints)
    for n in nets[1:]:
        offset = len(layers) - 1
        W_last, b_last = layers[-1]
        W0, b0 = n.layers[0]
        layers[-1] = (W0 @ W_last, W0 @ b_last + b0)
        layers.extend(n.layers[1:])
        for l, t in n.checkpoints:
            if cps and cps[-1][0] >= l + offset:
                continue
            cps.append((l + offset, t))
    return DeepNet(first.alpha, first.dim, tuple(layers), tuple(cps), dict(first.meta))


def compose_deep(first: DeepNet, second: DeepNet) -> DeepNet:
    """Network for ``second o first``."""
    return compose_many([first, second])


def embed_affine(M, b, alpha: float = 0.5) -> DeepNet:
    """Single-layer net computing ``M x + b`` exactly."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    b = np.asarray(b, dtype=float).reshape(-1)
    if M.shape[0] != M.shape[1] or M.shape[0] != b.shape[0]:
        raise InvalidInput("embed_affine needs a square matrix and a matching bias")
    net = DeepNet(alpha, M.shape[0], ((M, b),))
    if not net.is_nonsingular():
        warnings.warn("embed_affine: singular matrix; the map is not a homeomorphism", stacklevel=2)
    return net


def identity_net(dim: int, alpha: float) -> DeepNet:
    return DeepNet(alpha, dim, ((np.eye(dim), np.zeros(dim)),))


def checkpoint_gadget(dim: int, alpha: float, t: float) -> DeepNet:
    """Two-activation exact identity whose layer-0 pre-activation is the input.

    Uses ``-(1/alpha) sigma(-sigma(x)) = x``; composing it in front of a block
    keeps the block's input visible as a hidden pre-activation.
    """
    eye = np.eye(dim)
    zero = np.zeros(dim)
    return DeepNet(alpha, dim, ((eye, zero), (-eye, zero), (-eye / alpha, zero)), ((0, t),))


def lift_scalar(s: ScalarNet, coord: int, dim: int, reach: Optional[float] = None) -> DeepNet:
    """Run ``s`` on coordinate ``coord`` (0-based) and the exact identity elsewhere.

    Protected coordinates pass pairs of activations through
    ``-(1/alpha) sigma(-sigma(x)) = x``.  An identity needs an even number of
    activations, so when ``s`` has an odd depth in dimension ``d >= 2`` the
    active coordinate gets one extra activation ``sigma(y + K) - K``, which is
    exact for ``y >= -K``; ``K`` is ``reach`` (default ``1e6``).
    """
    if not 0 <= coord < dim:
        raise InvalidInput(f"coordinate {coord} out of range for dimension {dim}")
    alpha = s.alpha
    scalar_layers = list(s.layers)
    if dim > 1 and len(scalar_layers) % 2 == 0:
        K = 1e6 if reach is None else float(reach)
        w, b = scalar_layers[-1]
        scalar_layers[-1] = (w, b + K)
        scalar_layers.append((1.0, -K))
    layers = []
    for k, (w, b) in enumerate(scalar_layers):
        if k == 0:
            diag = np.ones(dim)
        elif k % 2 == 1:
            diag = -np.ones(dim)
        else:
            diag = -np.ones(dim) / alpha
        diag[coord] = w
        bias = np.zeros(dim)
        bias[coord] = b
        layers.append((np.diag(diag), bias))
    return DeepNet(alpha, dim, tuple(layers))


def invert_deep(net: DeepNet, y) -> np.ndarray:
    """Preimage of ``y`` by backward substitution with ``sigma^{-1}``."""
    pts, single = _as_points(net, y)
    a = net.alpha
    z = pts.copy()
    for k in range(len(net.layers) - 1, -1, -1):
        W, b = net.layers[k]
        try:
            h = _solve(W, z - b)
        except np.linalg.LinAlgError as exc:
            raise NotInvertible(f"layer {k} is singular") from exc
        z = h if k == 0 else np.where(h >= 0, h, h / a)
    return z[0] if single else z


def _solve(W: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    off = W - np.diag(np.diag(W))
    if not np.any(off):
        dg = np.diag(W)
        if np.any(dg == 0.0):
            raise np.linalg.LinAlgError("zero diagonal")
        return rhs / dg
    scale = max(1.0, float(np.max(np.abs(W)))) ** W.shape[0]
    if abs(np.linalg.det(W)) <= DET_TOL * scale:
        raise np.linalg.LinAlgError("singular layer")
    return np.linalg.solve(W, rhs.T).T


def serialize(net: DeepNet, meta: Optional[dict] = None) -> str:
    """Versioned JSON text; floats use Python's shortest round-trip repr."""
    m = {"depth": net.depth, "created_by": f"flowc {__version__}", "task_hash": None}
    m.update(net.meta)
    if meta:
        m.update(meta)
    doc = {
        "format_version": FORMAT_VERSION,
        "alpha": net.alpha,
        "dim": net.dim,
        "layers": [{"W": W.reshape(-1).tolist(), "b": b.tolist()} for W, b in net.layers],
        "checkpoints": [{"layer": l, "t": t} for l, t in net.checkpoints],
        "meta": m,
    }
    return json.dumps(doc, separators=(",", ":"))


def deserialize(text: str) -> DeepNet:
    try:
        doc = json.loads(text)
    except (json.JSONDecodeError, TypeError) as exc:
        raise ParseError(f"not a JSON document: {exc}") from exc
    if not isinstance(doc, dict):
        raise ParseError("network file must hold a JSON object")
    if doc.get("format_version") != FORMAT_VERSION:
        raise ParseError(f"unsupported format_version {doc.get('format_version')!r}")
    try:
        alpha = float(doc["alpha"])
        dim = int(doc["dim"])
        raw_layers = doc["layers"]
        if not isinstance(raw_layers, list) or not raw_layers:
            raise ParseError("network file has no layers")
        layers = []
        for entry in raw_layers:
            W = np.asarray(entry["W"], dtype=float)
            b = np.asarray(entry["b"], dtype=float)
            if W.shape != (dim * dim,) or b.shape != (dim,):
                raise ParseError("layer array sizes do not match dim")
            if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
                raise ParseError("non-finite weights")
            layers.append((W.reshape(dim, dim), b))
        cps = tuple((int(c["layer"]), float(c["t"])) for c in doc.get("checkpoints", []))
        meta = doc.get("meta", {}) or {}
        return DeepNet(alpha, dim, tuple(layers), cps, dict(meta))
    except ParseError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"malformed network file: {exc}") from exc
