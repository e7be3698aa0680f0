"""Monomial-probe supervision and optimization of the extension operator."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Iterator, List, Optional, Sequence

import numpy as np
import torch

from .band import NarrowBand, band_for_surface, coverage_max_epsilon
from .geometry import (Surface, normalize_shape, make_training_shape, sample_surface,
                       surface_features)
from .operator import MlpParams, OperatorParams, init_params, attention_weights
from .patches import Patch, PatchSet, build_patches, random_rotation

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


def enumerate_monomials(max_deg: int) -> List[tuple]:
    """Exponent triples with i+j+k <= max_deg in graded lexicographic order."""
    if max_deg < 0:
        raise ValueError("max_deg must be non-negative")
    out = []
    for deg in range(max_deg + 1):
        for i in range(deg, -1, -1):
            for j in range(deg - i, -1, -1):
                out.append((i, j, deg - i - j))
    return out


def eval_monomials(points: np.ndarray, exps: Sequence[tuple]) -> np.ndarray:
    """(n, M) table of monomial values."""
    e = np.asarray(exps, dtype=np.int64)
    top = int(e.max(initial=0))
    powers = np.stack([points ** p for p in range(top + 1)])       # (top+1, n, 3)
    return powers[e[:, 0], :, 0].T * powers[e[:, 1], :, 1].T * powers[e[:, 2], :, 2].T


def probe_affine(g_in: np.ndarray, tiny: float = 1e-12):
    """Per-column (scale, offset) mapping g_in onto [-0.5, 0.5]; constants map to 0."""
    lo = g_in.min(axis=0)
    hi = g_in.max(axis=0)
    rng = hi - lo
    scale = np.where(rng > tiny, 1.0 / np.where(rng > tiny, rng, 1.0), 0.0)
    offset = -0.5 * (lo + hi)
    return scale, offset


@dataclass
class TrainingPair:
    patch_index: int
    exponents: tuple
    g_in: np.ndarray
    g_target: np.ndarray


@dataclass
class PatchSamples:
    """All probe pairs of one patch, already normalized column by column."""

    patch: Patch
    g_in: np.ndarray        # (k, M)
    g_target: np.ndarray    # (k, M)
    normals_local: np.ndarray  # (k, 3) cp normals in the patch frame
    raw_in: np.ndarray = field(repr=False, default=None)
    raw_target: np.ndarray = field(repr=False, default=None)


@dataclass
class TrainingDataset:
    items: List[PatchSamples]
    exponents: List[tuple]

    def __len__(self) -> int:
        return len(self.items) * len(self.exponents)

    def pairs(self) -> Iterator[TrainingPair]:
        for pi, it in enumerate(self.items):
            for m, e in enumerate(self.exponents):
                yield TrainingPair(pi, e, it.g_in[:, m], it.g_target[:, m])

    def subset(self, idx) -> "TrainingDataset":
        return TrainingDataset([self.items[i] for i in idx], self.exponents)


def build_dataset(band: NarrowBand, patches: Sequence[Patch], max_deg: int = 5,
                  normalize: bool = True, keep_raw: bool = False) -> TrainingDataset:
    """Probe pairs (g at band nodes, g at their closest points) for every patch."""
    exps = enumerate_monomials(max_deg)
    items = []
    for p in patches:
        gi = eval_monomials(band.positions[p.band_idx], exps)
        gt = eval_monomials(band.cp[p.band_idx], exps)
        ri, rt = (gi, gt) if keep_raw else (None, None)
        if normalize:
            sc, off = probe_affine(gi)
            gi = (gi + off) * sc
            gt = (gt + off) * sc
        nloc = band.cp_normal[p.band_idx] @ p.frame.axes.T
        items.append(PatchSamples(p, gi, gt, nloc, ri, rt))
    return TrainingDataset(items, exps)


# ---------------------------------------------------------------------------
# torch model mirroring operator.py


class TorchOperator(torch.nn.Module):
    def __init__(self, params: OperatorParams, dtype=torch.float32):
        super().__init__()
        self.modulation = params.modulation
        self.d = params.d

        def mk(mlp: MlpParams):
            return torch.nn.ParameterList(
                [torch.nn.Parameter(torch.tensor(a, dtype=dtype))
                 for W, b in zip(mlp.weights, mlp.biases) for a in (W, b)])

        self.theta1 = mk(params.theta1)
        self.theta2 = mk(params.theta2)
        self.theta3 = mk(params.theta3)
        self.lam = torch.nn.Parameter(torch.tensor(params.lam, dtype=dtype))

    @staticmethod
    def _mlp(layers, x):
        n = len(layers) // 2
        for i in range(n):
            x = x @ layers[2 * i] + layers[2 * i + 1]
            if i < n - 1:
                x = torch.relu(x)
        return x

    @staticmethod
    def _mlp_jac(layers, x):
        """Outputs and transposed Jacobians (..., 3, out)."""
        n = len(layers) // 2
        T = None
        for i in range(n):
            W, b = layers[2 * i], layers[2 * i + 1]
            z = x @ W + b
            T = W.expand(*x.shape[:-1], *W.shape) if T is None else T @ W
            if i < n - 1:
                mask = (z > 0).to(z.dtype)
                x = z * mask
                T = T * mask.unsqueeze(-2)
            else:
                x = z
        return x, T

    def descriptor(self, feats, fmask):
        e = self._mlp(self.theta3, feats)                    # (B, F, d)
        w = fmask / fmask.sum(dim=1, keepdim=True)
        return (e * w.unsqueeze(-1)).sum(dim=1)              # (B, d)

    def _mod(self, eq, s):
        return eq + s if self.modulation == "additive" else eq * s

    def weights(self, q, b, feats, fmask):
        """q: (B, m, 3), b: (B, k, 3) scaled local coordinates."""
        s = self.descriptor(feats, fmask).unsqueeze(1)
        a = self._mod(self._mlp(self.theta1, q), s)
        eb = self._mlp(self.theta2, b)
        d2 = ((q.unsqueeze(2) - b.unsqueeze(1)) ** 2).sum(-1)
        logits = a @ eb.transpose(1, 2) / math.sqrt(self.d) - self.lam * d2
        return torch.softmax(logits, dim=-1)

    def grad_q(self, q, b, feats, fmask, u):
        """Query gradients (B, m, M, 3) of outputs for value columns u (B, k, M)."""
        s = self.descriptor(feats, fmask).unsqueeze(1)
        eq, J = self._mlp_jac(self.theta1, q)                # J: (B, m, 3, d)
        a = self._mod(eq, s)
        eb = self._mlp(self.theta2, b)
        diff = q.unsqueeze(2) - b.unsqueeze(1)               # (B, m, k, 3)
        logits = a @ eb.transpose(1, 2) / math.sqrt(self.d) - self.lam * (diff ** 2).sum(-1)
        w = torch.softmax(logits, dim=-1)                    # (B, m, k)
        out = w @ u                                          # (B, m, M)
        c = w.unsqueeze(-1) * (u.unsqueeze(1) - out.unsqueeze(2))   # (B, m, k, M)
        ec = eb if self.modulation == "additive" else eb * s
        ce = torch.einsum("bmkM,bkd->bmMd", c, ec)
        g = torch.einsum("bmid,bmMd->bmMi", J, ce) / math.sqrt(self.d)
        g = g - 2.0 * self.lam * torch.einsum("bmkM,bmki->bmMi", c, diff)
        return g

    def to_params(self, modulation: Optional[str] = None) -> OperatorParams:
        def back(layers):
            arrs = [p.detach().double().cpu().numpy() for p in layers]
            return MlpParams(arrs[0::2], arrs[1::2])

        return OperatorParams(back(self.theta1), back(self.theta2), back(self.theta3),
                              float(self.lam.detach()), modulation or self.modulation)


def _stack(items: Sequence[PatchSamples], rotations=None, dtype=torch.float32,
           feat_cap: Optional[int] = None):
    B = len(items)
    fmax = max(it.patch.n_features for it in items)
    k = items[0].patch.k
    b = np.zeros((B, k, 3))
    f = np.zeros((B, fmax, 6))
    fm = np.zeros((B, fmax))
    nrm = np.zeros((B, k, 3))
    for i, it in enumerate(items):
        p = it.patch
        R = np.eye(3) if rotations is None else rotations[i]
        b[i] = (p.band_local / p.scale) @ R.T
        nf = p.n_features
        f[i, :nf, :3] = (p.feat_local[:, :3] / p.scale) @ R.T
        f[i, :nf, 3:] = p.feat_local[:, 3:] @ R.T
        fm[i, :nf] = 1.0
        nrm[i] = it.normals_local @ R.T
    gi = np.stack([it.g_in for it in items])
    gt = np.stack([it.g_target for it in items])
    t = lambda a: torch.tensor(a, dtype=dtype)
    return t(b), t(f), t(fm), t(nrm), t(gi), t(gt)


def loss_mse(model: TorchOperator, batch) -> torch.Tensor:
    """Mean squared extension error over queries (the stencil itself) and probes."""
    b, f, fm, _, gi, gt = batch
    w = model.weights(b, b, f, fm)
    return ((w @ gi - gt) ** 2).mean()


def loss_nc(model: TorchOperator, batch, n_query: int = 64,
            generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Mean |<d out / d q, n(cp(q))>| over queries drawn among stencil nodes."""
    b, f, fm, nrm, gi, _ = batch
    B, k, _ = b.shape
    m = min(n_query, k)
    idx = torch.stack([torch.randperm(k, generator=generator)[:m] for _ in range(B)])
    take = lambda a: torch.gather(a, 1, idx.unsqueeze(-1).expand(-1, -1, a.shape[-1]))
    q = take(b)
    n = take(nrm)
    g = model.grad_q(q, b, f, fm, gi)                        # (B, m, M, 3)
    return (g * n.unsqueeze(2)).sum(-1).abs().mean()


# ---------------------------------------------------------------------------
# training loop


ROTATIONS = ("none", "normal", "full")


def augmentation_rotation(mode: str, rng: np.random.Generator) -> Optional[np.ndarray]:
    """Random rotation of patch-local coordinates.

    ``normal`` spins about the first local axis (the surface normal), which
    randomizes the tangent-pair gauge; ``full`` draws from all of SO(3).
    """
    if mode == "none":
        return None
    if mode == "full":
        return random_rotation(rng.integers(2 ** 63))
    a = rng.uniform(0.0, 2.0 * np.pi)
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


@dataclass
class TrainConfig:
    alpha: float = 1e-2
    lr: float = 1e-2
    lr_final_factor: float = 1e-2   # cosine decay from lr to lr * factor
    epochs: int = 100
    batch_pairs: int = 64
    seed: int = 0
    augmentations: int = 1
    max_deg: int = 5
    n_query_nc: int = 64
    val_fraction: float = 0.1
    d: int = 64
    hidden: tuple = (64, 64)
    lam0: float = 1.0
    modulation: str = "gating"
    rotation: str = "normal"        # none | normal | full
    # training asset and discretization
    bump_count: int = 30
    bump_height: float = 0.3
    bump_width: float = 0.17
    shape_level: int = 5
    spacing: float = 0.03
    epsilon_factor: float = 3.0
    k: int = 400
    patch_spacing_factor: float = 1.0
    samples_per_cell: float = 4.0
    max_features: int = 256

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.max_deg < 0:
            raise ValueError("max_deg must be non-negative")
        if self.rotation not in ROTATIONS:
            raise ValueError(f"rotation must be one of {ROTATIONS}, got {self.rotation!r}")
        self.hidden = tuple(self.hidden)


@dataclass
class TrainResult:
    params: OperatorParams
    history: List[dict]
    train_idx: np.ndarray
    val_idx: np.ndarray
    wall_time: float


HISTORY_FIELDS = ("epoch", "L_mse", "L_nc", "L_total", "val_rmse")


def write_history(history: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS)
        w.writeheader()
        for row in history:
            w.writerow({k: row[k] for k in HISTORY_FIELDS})


def validation_rmse(params: OperatorParams, items: Sequence[PatchSamples]) -> float:
    """RMS extension error in normalized probe units, float64 inference path."""
    se, cnt = 0.0, 0
    for it in items:
        W = attention_weights(params, it.patch)
        e = W @ it.g_in - it.g_target
        se += float(np.sum(e * e))
        cnt += e.size
    return math.sqrt(se / max(cnt, 1))


def prepare_training_data(config: TrainConfig, surface: Optional[Surface] = None):
    """Band, patches and dataset for the training shape (normalized to the unit box)."""
    if surface is None:
        surface = make_training_shape(config.seed, config.bump_count, config.bump_height,
                                      config.bump_width, config.shape_level)
    surface, _ = normalize_shape(surface)
    h = config.spacing
    lo, hi = surface.bbox()
    area = _surface_area(surface, lo, hi)
    n_samp = int(math.ceil(config.samples_per_cell * area / h ** 2))
    samples = surface_features(surface, sample_surface(surface, n_samp, config.seed))
    band = band_for_surface(surface, samples, h, config.epsilon_factor * h)
    spacing = config.patch_spacing_factor * coverage_max_epsilon(h, config.k)
    patches = build_patches(band, samples, config.k, spacing, config.seed,
                            max_features=config.max_features)
    data = build_dataset(band, patches.patches, config.max_deg)
    return surface, band, patches, data


def _surface_area(surface, lo, hi) -> float:
    if hasattr(surface, "face_areas"):
        return float(surface.face_areas().sum())
    if hasattr(surface, "radius"):
        return 4.0 * math.pi * surface.radius ** 2
    ext = hi - lo
    return float(2 * (ext[0] * ext[1] + ext[1] * ext[2] + ext[0] * ext[2]))


def split_patches(n: int, val_fraction: float, rng: np.random.Generator):
    """Random (train, validation) index split with at least one held-out patch."""
    perm = rng.permutation(n)
    n_val = max(1, int(round(val_fraction * n))) if n > 1 else 0
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def train(config: TrainConfig, data: Optional[TrainingDataset] = None,
          init: Optional[OperatorParams] = None, progress=False) -> TrainResult:
    """Adam with cosine learning-rate decay over shuffled patch batches.

    Each patch in a batch gets its own random rotation (see ``config.rotation``).
    ``progress`` is either a flag (log each epoch) or a callable receiving
    each history row.
    """
    t0 = time.time()
    torch.manual_seed(config.seed)
    if data is None:
        data = prepare_training_data(config)[3]
    n = len(data.items)
    rng = np.random.default_rng(config.seed)
    train_idx, val_idx = split_patches(n, config.val_fraction, rng)
    n_val = len(val_idx)
    val_items = [data.items[i] for i in val_idx]
    params0 = init or init_params(config.seed, config.d, config.hidden, config.lam0,
                                  config.modulation)
    model = TorchOperator(params0)
    per_batch = max(1, int(round(config.batch_pairs / len(data.exponents))))
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    n_steps = config.epochs * config.augmentations * math.ceil(len(train_idx) / per_batch)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(
        opt, max(n_steps, 1), eta_min=config.lr * config.lr_final_factor)
    gen = torch.Generator().manual_seed(config.seed)

    def epoch_losses(items, rot_seed):
        with torch.no_grad():
            lm, ln = [], []
            for s in range(0, len(items), 8):
                chunk = items[s:s + 8]
                batch = _stack(chunk)
                lm.append(float(loss_mse(model, batch)) * len(chunk))
                if config.alpha > 0:
                    ln.append(float(loss_nc(model, batch, config.n_query_nc, gen)) * len(chunk))
            return sum(lm) / len(items), (sum(ln) / len(items) if ln else 0.0)

    train_items = [data.items[i] for i in train_idx]
    history = []
    lm0, ln0 = epoch_losses(train_items, 0)
    history.append(dict(epoch=0, L_mse=lm0, L_nc=ln0, L_total=lm0 + config.alpha * ln0,
                        val_rmse=validation_rmse(model.to_params(), val_items) if n_val else float("nan")))
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(train_idx))
        sm = sn = 0.0
        seen = 0
        for rep in range(config.augmentations):
            for s in range(0, len(order), per_batch):
                chunk = [train_items[i] for i in order[s:s + per_batch]]
                rots = [augmentation_rotation(config.rotation, rng) for _ in chunk]
                batch = _stack(chunk, None if config.rotation == "none" else rots)
                lm = loss_mse(model, batch)
                loss = lm
                ln = torch.zeros(())
                if config.alpha > 0:
                    ln = loss_nc(model, batch, config.n_query_nc, gen)
                    loss = lm + config.alpha * ln
                if not torch.isfinite(loss):
                    raise TrainingDiverged(f"loss became {float(loss)} at epoch {epoch}, "
                                           f"batch {s // per_batch}; lambda={float(model.lam):.4g}")
                opt.zero_grad()
                loss.backward()
                opt.step()
                sched.step()
                sm += float(lm.detach()) * len(chunk)
                sn += float(ln.detach()) * len(chunk)
                seen += len(chunk)
        lm_e, ln_e = sm / seen, sn / seen
        row = dict(epoch=epoch, L_mse=lm_e, L_nc=ln_e, L_total=lm_e + config.alpha * ln_e,
                   val_rmse=validation_rmse(model.to_params(), val_items) if n_val else float("nan"))
        history.append(row)
        if callable(progress):
            progress(row)
        elif progress:
            log.info("epoch %d  L_mse %.3e  L_nc %.3e  val_rmse %.3e  lambda %.3f", epoch,
                     lm_e, ln_e, row["val_rmse"], float(model.lam))
    params = model.to_params()
    params.meta.update(alpha=config.alpha, epochs=config.epochs, seed=config.seed)
    return TrainResult(params, history, train_idx, val_idx, time.time() - t0)
