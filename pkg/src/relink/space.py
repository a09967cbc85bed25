"""Unified semantic space: affine projection adapters over frozen provider
embeddings, plus the InfoNCE alignment objective with analytic gradients."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatchError, ZeroVectorError
from .kg import FactTriple
from .latent import LatentRelation

logger = logging.getLogger(__name__)

SOURCE_EXPLICIT = "explicit"
SOURCE_LATENT = "latent"


@dataclass(frozen=True)
class EdgeVector:
    vector: np.ndarray
    source_kind: str


@dataclass
class TrainConfig:
    epochs: int = 5
    batch_size: int = 32
    learning_rate: float = 0.01
    seed: int = 0


def _l2_normalize(u: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(u)
    if norm == 0:
        raise ZeroVectorError("cannot normalize a zero vector")
    return u / norm


class ProjectionAdapter:
    """Two affine maps (one per source kind) into the shared d-dim space,
    plus the contrastive temperature."""

    def __init__(self, w_f: np.ndarray, b_f: np.ndarray, w_l: np.ndarray,
                 b_l: np.ndarray, tau: float = 0.07):
        if tau <= 0:
            raise ValueError("temperature must be positive")
        self.w_f = np.asarray(w_f, dtype=np.float64)
        self.b_f = np.asarray(b_f, dtype=np.float64)
        self.w_l = np.asarray(w_l, dtype=np.float64)
        self.b_l = np.asarray(b_l, dtype=np.float64)
        self.tau = float(tau)
        if self.w_f.shape != self.w_l.shape:
            raise DimensionMismatchError("factual/latent adapters disagree on shape")
        for arr in (self.w_f, self.b_f, self.w_l, self.b_l):
            if not np.all(np.isfinite(arr)):
                raise ValueError("adapter parameters must be finite")

    @property
    def d_raw(self) -> int:
        return self.w_f.shape[0]

    @property
    def d(self) -> int:
        return self.w_f.shape[1]

    @classmethod
    def identity(cls, d: int, tau: float = 0.07) -> "ProjectionAdapter":
        eye = np.eye(d)
        zero = np.zeros(d)
        return cls(eye, zero, eye.copy(), zero.copy(), tau)

    @classmethod
    def random(cls, d_raw: int, d: int, seed: int = 0,
               tau: float = 0.07) -> "ProjectionAdapter":
        rng = np.random.default_rng(seed)
        scale = 1.0 / np.sqrt(d_raw)
        return cls(
            rng.standard_normal((d_raw, d)) * scale,
            np.zeros(d),
            rng.standard_normal((d_raw, d)) * scale,
            np.zeros(d),
            tau,
        )

    def copy(self) -> "ProjectionAdapter":
        return ProjectionAdapter(
            self.w_f.copy(), self.b_f.copy(), self.w_l.copy(), self.b_l.copy(),
            self.tau,
        )

    def project_factual(self, x: np.ndarray) -> np.ndarray:
        if x.shape[0] != self.d_raw:
            raise DimensionMismatchError(
                f"expected raw dim {self.d_raw}, got {x.shape[0]}"
            )
        return _l2_normalize(x @ self.w_f + self.b_f)

    def project_latent(self, x: np.ndarray) -> np.ndarray:
        if x.shape[0] != self.d_raw:
            raise DimensionMismatchError(
                f"expected raw dim {self.d_raw}, got {x.shape[0]}"
            )
        return _l2_normalize(x @ self.w_l + self.b_l)

    def params_hash(self) -> str:
        h = hashlib.sha256()
        for arr in (self.w_f, self.b_f, self.w_l, self.b_l):
            h.update(np.ascontiguousarray(arr).tobytes())
        h.update(np.float64(self.tau).tobytes())
        return h.hexdigest()

    def save(self, header_path, weights_path, seed: int = 0, epoch: int = 0) -> None:
        header = {
            "schema_version": 1,
            "kind": "projection_adapter",
            "d_raw": self.d_raw,
            "d": self.d,
            "tau": self.tau,
            "seed": seed,
            "epoch": epoch,
            "layout": ["w_f", "b_f", "w_l", "b_l"],
        }
        with open(header_path, "w", encoding="utf-8") as fh:
            json.dump(header, fh, sort_keys=True, indent=1)
            fh.write("\n")
        flat = np.concatenate(
            [self.w_f.ravel(), self.b_f, self.w_l.ravel(), self.b_l]
        ).astype("<f4")
        with open(weights_path, "wb") as fh:
            fh.write(flat.tobytes())

    @classmethod
    def load(cls, header_path, weights_path) -> "ProjectionAdapter":
        with open(header_path, encoding="utf-8") as fh:
            header = json.load(fh)
        d_raw, d = header["d_raw"], header["d"]
        flat = np.fromfile(weights_path, dtype="<f4").astype(np.float64)
        sizes = [d_raw * d, d, d_raw * d, d]
        if flat.size != sum(sizes):
            raise ValueError("weight file size mismatch")
        parts = np.split(flat, np.cumsum(sizes)[:-1])
        return cls(
            parts[0].reshape(d_raw, d), parts[1],
            parts[2].reshape(d_raw, d), parts[3],
            header["tau"],
        )


def linearize_triple(t: FactTriple, names: dict[str, str]) -> str:
    return f"{names[t.head]} {t.predicate} {names[t.tail]}"


def encode_triple(t: FactTriple, gateway, adapter: ProjectionAdapter,
                  names: dict[str, str]) -> EdgeVector:
    """Embed the linearized triple text, project with the factual adapter,
    L2-normalize."""
    raw = gateway.embed([linearize_triple(t, names)])[0]
    return EdgeVector(adapter.project_factual(raw), SOURCE_EXPLICIT)


def encode_latent(r: LatentRelation, adapter: ProjectionAdapter) -> EdgeVector:
    """Project the precomputed [MASK]-position vector; no gateway call."""
    return EdgeVector(adapter.project_latent(np.asarray(r.vector, dtype=np.float64)),
                      SOURCE_LATENT)


def _check_batch(v_f: np.ndarray, v_l: np.ndarray, tau: float):
    if tau <= 0:
        raise ValueError("temperature must be positive")
    if v_f.shape != v_l.shape or v_f.ndim != 2:
        raise DimensionMismatchError("batches must be matching 2-d arrays")
    if v_f.shape[0] < 2:
        raise ValueError("in-batch negatives require batch size >= 2")
    norms_f = np.linalg.norm(v_f, axis=1)
    norms_l = np.linalg.norm(v_l, axis=1)
    if np.any(norms_f == 0) or np.any(norms_l == 0):
        raise ZeroVectorError("zero-norm vector in contrastive batch")
    return norms_f, norms_l


def contrastive_loss(v_f: np.ndarray, v_l: np.ndarray, tau: float) -> float:
    """Mean InfoNCE over anchors: for anchor i the positive is v_l[i] and
    the negatives are v_l[j] for all j != i; similarity is cosine."""
    v_f = np.asarray(v_f, dtype=np.float64)
    v_l = np.asarray(v_l, dtype=np.float64)
    norms_f, norms_l = _check_batch(v_f, v_l, tau)
    sims = (v_f / norms_f[:, None]) @ (v_l / norms_l[:, None]).T / tau
    row_max = sims.max(axis=1, keepdims=True)
    lse = row_max[:, 0] + np.log(np.exp(sims - row_max).sum(axis=1))
    return float(np.mean(lse - np.diag(sims)))


def _normalize_rows_with_backward(u: np.ndarray):
    norms = np.linalg.norm(u, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ZeroVectorError("zero-norm row during projection")
    v = u / norms

    def backward(grad_v: np.ndarray) -> np.ndarray:
        # d(u/|u|)/du applied to grad: (grad - (grad.v) v) / |u|
        inner = np.sum(grad_v * v, axis=1, keepdims=True)
        return (grad_v - inner * v) / norms

    return v, backward


def contrastive_loss_and_grads(x_f: np.ndarray, x_l: np.ndarray,
                               adapter: ProjectionAdapter):
    """Loss plus gradients w.r.t. the adapter parameters for one batch of
    raw factual embeddings x_f and raw latent vectors x_l (rows paired)."""
    tau = adapter.tau
    b = x_f.shape[0]
    u_f = x_f @ adapter.w_f + adapter.b_f
    u_l = x_l @ adapter.w_l + adapter.b_l
    v_f, back_f = _normalize_rows_with_backward(u_f)
    v_l, back_l = _normalize_rows_with_backward(u_l)
    sims = v_f @ v_l.T / tau
    row_max = sims.max(axis=1, keepdims=True)
    exp = np.exp(sims - row_max)
    p = exp / exp.sum(axis=1, keepdims=True)
    loss = float(np.mean(np.log(exp.sum(axis=1)) + row_max[:, 0] - np.diag(sims)))
    g_sims = (p - np.eye(b)) / (b * tau)
    grad_vf = g_sims @ v_l
    grad_vl = g_sims.T @ v_f
    grad_uf = back_f(grad_vf)
    grad_ul = back_l(grad_vl)
    grads = {
        "w_f": x_f.T @ grad_uf,
        "b_f": grad_uf.sum(axis=0),
        "w_l": x_l.T @ grad_ul,
        "b_l": grad_ul.sum(axis=0),
    }
    return loss, grads


def train_alignment(x_f: np.ndarray, x_l: np.ndarray,
                    adapter: ProjectionAdapter,
                    config: TrainConfig) -> ProjectionAdapter:
    """Mini-batch SGD on the contrastive objective over paired raw vectors.

    Rows of x_f / x_l are aligned positives; batch order is a seeded
    shuffle so training is deterministic.
    """
    adapter = adapter.copy()
    n = x_f.shape[0]
    if n == 0 or config.epochs == 0:
        return adapter
    rng = np.random.default_rng(config.seed)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        batches = 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            if idx.size < 2:
                continue
            loss, grads = contrastive_loss_and_grads(x_f[idx], x_l[idx], adapter)
            if not np.isfinite(loss):
                raise FloatingPointError(
                    f"non-finite contrastive loss at epoch {epoch}, batch {batches}"
                )
            adapter.w_f -= config.learning_rate * grads["w_f"]
            adapter.b_f -= config.learning_rate * grads["b_f"]
            adapter.w_l -= config.learning_rate * grads["w_l"]
            adapter.b_l -= config.learning_rate * grads["b_l"]
            epoch_loss += loss
            batches += 1
        if batches:
            logger.info("alignment epoch %d: loss %.6f", epoch, epoch_loss / batches)
    return adapter
