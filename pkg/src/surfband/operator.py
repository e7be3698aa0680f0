"""Geometry-conditioned attention operator for band-to-band extension.

Inference path in float64 numpy. For a patch with local stencil ``b_j``
(divided by the patch scale), features ``F`` and values ``u``:

    s        = mean_r phi3(F_r)
    logit_j  = <phi1(q) + s, phi2(b_j)> / sqrt(d) - lam * |q - b_j|^2
    out(q)   = sum_j softmax(logit)_j u_j

The "gating" variant replaces phi1(q) + s with phi1(q) * s.
"""
from __future__ import annotations

import io
import os
import zipfile
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .patches import Patch

FORMAT_VERSION = 1
MODULATIONS = ("additive", "gating")


class ParamsFormatError(ValueError):
    pass


@dataclass
class MlpParams:
    """Dense layers; rectifier between layers, identity on the output."""

    weights: list
    biases: list

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight matrix")
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.ndim != 2 or b.shape != (W.shape[1],):
                raise ValueError(f"layer {i}: weight {W.shape} and bias {b.shape} disagree")
            if i and W.shape[0] != self.weights[i - 1].shape[1]:
                raise ValueError(f"layer {i} input {W.shape[0]} does not chain")
            if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {i} has non-finite entries")

    @property
    def dims(self) -> tuple:
        return (self.weights[0].shape[0],) + tuple(W.shape[1] for W in self.weights)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        h = x
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ W + b
            if i < last:
                h = np.maximum(h, 0.0)
        return h

    def preactivations(self, x: np.ndarray) -> list:
        """Hidden-layer pre-activations, for kink checks."""
        out = []
        h = x
        for W, b in zip(self.weights[:-1], self.biases[:-1]):
            z = h @ W + b
            out.append(z)
            h = np.maximum(z, 0.0)
        return out

    def jacobian_t(self, x: np.ndarray):
        """Outputs (n, out) and transposed Jacobians (n, in, out)."""
        n, din = x.shape
        h = x
        T = np.broadcast_to(np.eye(din), (n, din, din))
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ W + b
            T = T @ W
            if i < last:
                mask = z > 0
                h = np.where(mask, z, 0.0)
                T = T * mask[:, None, :]
            else:
                h = z
        return h, T

    def copy(self) -> "MlpParams":
        return MlpParams([W.copy() for W in self.weights], [b.copy() for b in self.biases])


def init_mlp(rng: np.random.Generator, dims: Sequence[int]) -> MlpParams:
    Ws, bs = [], []
    for a, b in zip(dims[:-1], dims[1:]):
        Ws.append(rng.normal(0.0, np.sqrt(2.0 / a), size=(a, b)))
        bs.append(np.zeros(b))
    return MlpParams(Ws, bs)


@dataclass
class OperatorParams:
    theta1: MlpParams
    theta2: MlpParams
    theta3: MlpParams
    lam: float = 1.0
    modulation: str = "additive"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.theta1.dims[-1] != self.theta2.dims[-1]:
            raise ValueError("query and band encoders must share the output width")
        if self.theta3.dims[-1] != self.theta1.dims[-1]:
            raise ValueError("surface encoder width must match the embedding width")
        if self.theta1.dims[0] != 3 or self.theta2.dims[0] != 3 or self.theta3.dims[0] != 6:
            raise ValueError("encoder inputs must be 3, 3 and 6 wide")
        if not np.isfinite(self.lam):
            raise ValueError("lambda must be finite")
        if self.modulation not in MODULATIONS:
            raise ValueError(f"unknown modulation {self.modulation!r}")

    @property
    def d(self) -> int:
        return self.theta1.dims[-1]


def init_params(seed: int = 0, d: int = 64, hidden: Sequence[int] = (64, 64),
                lam: float = 1.0, modulation: str = "additive") -> OperatorParams:
    rng = np.random.default_rng(seed)
    h = list(hidden)
    return OperatorParams(init_mlp(rng, [3] + h + [d]), init_mlp(rng, [3] + h + [d]),
                          init_mlp(rng, [6] + h + [d]), float(lam), modulation)


# ---------------------------------------------------------------------------
# forward pass


def scaled_features(patch: Patch) -> np.ndarray:
    f = np.array(patch.feat_local, dtype=float, copy=True)
    f[:, :3] /= patch.scale
    return f


def encode_surface(theta3: MlpParams, feat_local: np.ndarray) -> np.ndarray:
    feat_local = np.atleast_2d(feat_local)
    if feat_local.shape[0] == 0:
        raise ValueError("surface descriptor needs at least one feature row")
    return theta3(feat_local).mean(axis=0)


def _modulated(params: OperatorParams, eq: np.ndarray, s: np.ndarray) -> np.ndarray:
    return eq + s if params.modulation == "additive" else eq * s


def _logits(params, qh, bh, eb, s):
    eq = params.theta1(qh)
    a = _modulated(params, eq, s)
    d2 = (np.sum(qh * qh, 1)[:, None] + np.sum(bh * bh, 1)[None, :] - 2.0 * qh @ bh.T)
    return a @ eb.T / np.sqrt(params.d) - params.lam * np.maximum(d2, 0.0)


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    w = np.exp(z)
    return w / w.sum(axis=1, keepdims=True)


def attention_weights(params: OperatorParams, patch: Patch,
                      queries: Optional[np.ndarray] = None) -> np.ndarray:
    """Row-stochastic (m, k) weights; queries in local coordinates (world units)."""
    bh = patch.band_local / patch.scale
    qh = bh if queries is None else np.atleast_2d(queries) / patch.scale
    s = encode_surface(params.theta3, scaled_features(patch))
    eb = params.theta2(bh)
    return _softmax(_logits(params, qh, bh, eb, s))


def forward(params: OperatorParams, patch: Patch, u: np.ndarray,
            queries: Optional[np.ndarray] = None) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    if u.shape[0] != patch.k:
        raise ValueError(f"u has {u.shape[0]} values for a {patch.k}-node patch")
    if not np.all(np.isfinite(u)):
        raise ValueError("band values must be finite")
    # offset by min(u) so constant fields are reproduced bit for bit
    c0 = u.min()
    return c0 + attention_weights(params, patch, queries) @ (u - c0)


def query_gradient(params: OperatorParams, patch: Patch, u: np.ndarray,
                   q: np.ndarray) -> np.ndarray:
    """Exact d forward / d q for each query row (local coordinates, world units)."""
    u = np.asarray(u, dtype=float)
    u = u - u.min()                               # exact zeros for constant u
    q = np.atleast_2d(q)
    bh = patch.band_local / patch.scale
    qh = q / patch.scale
    s = encode_surface(params.theta3, scaled_features(patch))
    eb = params.theta2(bh)
    eq, J = params.theta1.jacobian_t(qh)          # J: (m, 3, d)
    a = _modulated(params, eq, s)
    d2 = np.sum((qh[:, None, :] - bh[None]) ** 2, axis=2)
    w = _softmax(a @ eb.T / np.sqrt(params.d) - params.lam * d2)
    out = w @ u
    c = w * (u[None, :] - out[:, None])           # (m, k)
    ec = eb if params.modulation == "additive" else eb * s
    g = np.einsum("mid,md->mi", J, c @ ec) / np.sqrt(params.d)
    g -= 2.0 * params.lam * (c.sum(axis=1)[:, None] * qh - c @ bh)
    return g / patch.scale


def near_kink(params: OperatorParams, q_scaled: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    """Rows whose query-encoder pre-activations come within ``tol`` of zero."""
    pre = params.theta1.preactivations(np.atleast_2d(q_scaled))
    return np.any(np.stack([np.any(np.abs(z) < tol, axis=1) for z in pre]), axis=0)


# ---------------------------------------------------------------------------
# persistence


def _flatten(params: OperatorParams) -> dict:
    arrays = {"version": np.array(FORMAT_VERSION), "d": np.array(params.d),
              "lam": np.array(params.lam, dtype=np.float64),
              "modulation": np.array(params.modulation)}
    for name in ("theta1", "theta2", "theta3"):
        mlp = getattr(params, name)
        arrays[f"{name}_dims"] = np.array(mlp.dims)
        for i, (W, b) in enumerate(zip(mlp.weights, mlp.biases)):
            arrays[f"{name}_W{i}"] = W.astype("<f8")
            arrays[f"{name}_b{i}"] = b.astype("<f8")
    for key, val in params.meta.items():
        arrays[f"meta_{key}"] = np.asarray(val)
    return arrays


def save_params(params: OperatorParams, path) -> None:
    path = os.fspath(path)
    buf = io.BytesIO()
    np.savez(buf, **_flatten(params))
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_params(path, expected_d: Optional[int] = None,
                expected_hidden: Optional[Sequence[int]] = None) -> OperatorParams:
    try:
        with np.load(os.fspath(path), allow_pickle=False) as z:
            data = {k: z[k] for k in z.files}
    except (zipfile.BadZipFile, EOFError, ValueError, OSError) as exc:
        raise ParamsFormatError(f"cannot read weight file {path}: {exc}") from exc
    try:
        version = int(data["version"])
        if version != FORMAT_VERSION:
            raise ParamsFormatError(f"weight file version {version}, expected {FORMAT_VERSION}")
        mlps = {}
        for name in ("theta1", "theta2", "theta3"):
            dims = [int(v) for v in data[f"{name}_dims"]]
            Ws = [data[f"{name}_W{i}"].astype(float) for i in range(len(dims) - 1)]
            bs = [data[f"{name}_b{i}"].astype(float) for i in range(len(dims) - 1)]
            mlp = MlpParams(Ws, bs)
            if list(mlp.dims) != dims:
                raise ParamsFormatError(f"{name}: stored dims {dims} disagree with arrays")
            mlps[name] = mlp
        meta = {k[5:]: data[k] for k in data if k.startswith("meta_")}
        params = OperatorParams(mlps["theta1"], mlps["theta2"], mlps["theta3"],
                                float(data["lam"]), str(data["modulation"]), meta)
    except KeyError as exc:
        raise ParamsFormatError(f"weight file {path} lacks entry {exc}") from exc
    except ValueError as exc:
        if isinstance(exc, ParamsFormatError):
            raise
        raise ParamsFormatError(f"weight file {path}: {exc}") from exc
    if int(data["d"]) != params.d:
        raise ParamsFormatError("header width disagrees with the encoders")
    if expected_d is not None and params.d != expected_d:
        raise ParamsFormatError(f"weights have d={params.d}, configuration expects {expected_d}")
    if expected_hidden is not None and list(params.theta1.dims[1:-1]) != list(expected_hidden):
        raise ParamsFormatError(f"hidden widths {params.theta1.dims[1:-1]} do not match "
                                f"{list(expected_hidden)}")
    return params
