"""Trainable coarse-stage scorer: a small feed-forward network over
(query, edge, query*edge, running path score) features, trained with the
pairwise margin loss under the staged alternating schedule."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatchError
from .space import ProjectionAdapter, TrainConfig, train_alignment

logger = logging.getLogger(__name__)

HIDDEN_WIDTH = 64


@dataclass
class StagedConfig:
    margin: float = 0.2
    lr_ranker: float = 0.01
    lr_adapter: float = 0.01
    adapter_batch_size: int = 32
    patience: int = 3
    max_cycles: int = 20
    val_fraction: float = 0.2
    negatives_per_positive: int = 4
    seed: int = 0


@dataclass
class FeatureSet:
    """Featurized preference tuples: row i pairs one positive extension with
    one negative extension for the same query and prefix."""

    q: np.ndarray         # (n, d) query vectors
    pos_edge: np.ndarray  # (n, d)
    pos_prev: np.ndarray  # (n,) running path score of the shared prefix
    neg_edge: np.ndarray  # (n, d)
    neg_prev: np.ndarray  # (n,)

    def __len__(self):
        return self.q.shape[0]

    def subset(self, idx) -> "FeatureSet":
        return FeatureSet(self.q[idx], self.pos_edge[idx], self.pos_prev[idx],
                          self.neg_edge[idx], self.neg_prev[idx])


def features(q_vec: np.ndarray, edge_vec: np.ndarray, path_score: float) -> np.ndarray:
    if q_vec.shape != edge_vec.shape:
        raise DimensionMismatchError("query/edge vector dimension mismatch")
    return np.concatenate([q_vec, edge_vec, q_vec * edge_vec, [path_score]])


class RankerModel:
    """2-layer tanh MLP mapping the (3d+1)-dim feature vector to a score."""

    def __init__(self, w1: np.ndarray, b1: np.ndarray, w2: np.ndarray, b2: float):
        self.w1 = np.asarray(w1, dtype=np.float64)
        self.b1 = np.asarray(b1, dtype=np.float64)
        self.w2 = np.asarray(w2, dtype=np.float64)
        self.b2 = float(b2)

    @property
    def feature_dim(self) -> int:
        return self.w1.shape[0]

    @classmethod
    def create(cls, d: int, hidden: int = HIDDEN_WIDTH, seed: int = 0) -> "RankerModel":
        f = 3 * d + 1
        rng = np.random.default_rng(seed)
        return cls(
            rng.standard_normal((f, hidden)) / np.sqrt(f),
            np.zeros(hidden),
            rng.standard_normal(hidden) / np.sqrt(hidden),
            0.0,
        )

    def copy(self) -> "RankerModel":
        return RankerModel(self.w1.copy(), self.b1.copy(), self.w2.copy(), self.b2)

    def score_features(self, phi: np.ndarray) -> float:
        if phi.shape[0] != self.feature_dim:
            raise DimensionMismatchError(
                f"expected feature dim {self.feature_dim}, got {phi.shape[0]}"
            )
        h = np.tanh(phi @ self.w1 + self.b1)
        return float(h @ self.w2 + self.b2)

    def score(self, q_vec: np.ndarray, edge_vec: np.ndarray, path_score: float) -> float:
        return self.score_features(features(q_vec, edge_vec, path_score))

    def score_batch(self, q: np.ndarray, edge: np.ndarray,
                    prev: np.ndarray) -> np.ndarray:
        phi = np.concatenate([q, edge, q * edge, prev[:, None]], axis=1)
        h = np.tanh(phi @ self.w1 + self.b1)
        return h @ self.w2 + self.b2

    def score_and_grads(self, phi: np.ndarray):
        z = phi @ self.w1 + self.b1
        h = np.tanh(z)
        s = float(h @ self.w2 + self.b2)
        dz = self.w2 * (1.0 - h * h)
        grads = {
            "w1": np.outer(phi, dz),
            "b1": dz,
            "w2": h,
            "b2": 1.0,
        }
        return s, grads

    def apply_grads(self, grads: dict, scale: float) -> None:
        self.w1 += scale * grads["w1"]
        self.b1 += scale * grads["b1"]
        self.w2 += scale * grads["w2"]
        self.b2 += scale * grads["b2"]

    def params_hash(self) -> str:
        h = hashlib.sha256()
        for arr in (self.w1, self.b1, self.w2):
            h.update(np.ascontiguousarray(arr).tobytes())
        h.update(np.float64(self.b2).tobytes())
        return h.hexdigest()

    def save(self, header_path, weights_path, seed: int = 0, epoch: int = 0) -> None:
        header = {
            "schema_version": 1,
            "kind": "ranker",
            "feature_dim": self.feature_dim,
            "hidden": int(self.w1.shape[1]),
            "seed": seed,
            "epoch": epoch,
            "layout": ["w1", "b1", "w2", "b2"],
        }
        with open(header_path, "w", encoding="utf-8") as fh:
            json.dump(header, fh, sort_keys=True, indent=1)
            fh.write("\n")
        flat = np.concatenate(
            [self.w1.ravel(), self.b1, self.w2, [self.b2]]
        ).astype("<f4")
        with open(weights_path, "wb") as fh:
            fh.write(flat.tobytes())

    @classmethod
    def load(cls, header_path, weights_path) -> "RankerModel":
        with open(header_path, encoding="utf-8") as fh:
            header = json.load(fh)
        f, hid = header["feature_dim"], header["hidden"]
        flat = np.fromfile(weights_path, dtype="<f4").astype(np.float64)
        sizes = [f * hid, hid, hid, 1]
        if flat.size != sum(sizes):
            raise ValueError("weight file size mismatch")
        parts = np.split(flat, np.cumsum(sizes)[:-1])
        return cls(parts[0].reshape(f, hid), parts[1], parts[2], float(parts[3][0]))


def rank_loss(model: RankerModel, q_vec: np.ndarray,
              pos_edge: np.ndarray, pos_prev: float,
              neg_edge: np.ndarray, neg_prev: float, margin: float) -> float:
    """Pairwise hinge: max(0, margin - S(positive) + S(negative))."""
    if margin <= 0:
        raise ValueError("margin must be positive")
    s_pos = model.score(q_vec, pos_edge, pos_prev)
    s_neg = model.score(q_vec, neg_edge, neg_prev)
    return max(0.0, margin - s_pos + s_neg)


def rank_loss_batch(model: RankerModel, feats: FeatureSet, margin: float) -> float:
    s_pos = model.score_batch(feats.q, feats.pos_edge, feats.pos_prev)
    s_neg = model.score_batch(feats.q, feats.neg_edge, feats.neg_prev)
    return float(np.mean(np.maximum(0.0, margin - s_pos + s_neg)))


def rank_accuracy(model: RankerModel, feats: FeatureSet) -> float:
    """Fraction of tuples scoring the positive strictly above the negative."""
    if len(feats) == 0:
        return 0.0
    s_pos = model.score_batch(feats.q, feats.pos_edge, feats.pos_prev)
    s_neg = model.score_batch(feats.q, feats.neg_edge, feats.neg_prev)
    return float(np.mean(s_pos > s_neg))


def train_ranker_epoch(model: RankerModel, feats: FeatureSet, margin: float,
                       lr: float, rng: np.random.Generator) -> float:
    """One SGD epoch over the tuples in seeded-shuffle order; hinge
    subgradient at the kink is zero. Returns the mean loss observed."""
    order = rng.permutation(len(feats))
    total = 0.0
    for i in order:
        phi_pos = features(feats.q[i], feats.pos_edge[i], feats.pos_prev[i])
        phi_neg = features(feats.q[i], feats.neg_edge[i], feats.neg_prev[i])
        s_pos, g_pos = model.score_and_grads(phi_pos)
        s_neg, g_neg = model.score_and_grads(phi_neg)
        loss = margin - s_pos + s_neg
        if not np.isfinite(loss):
            raise FloatingPointError("non-finite ranking loss")
        if loss > 0:
            model.apply_grads(g_pos, lr)
            model.apply_grads(g_neg, -lr)
            total += loss
    return total / max(len(feats), 1)


@dataclass(frozen=True)
class PreferenceTuple:
    """A query with two single-edge extensions of a shared prefix; the
    positive is the gold step, the negative a sampled sibling."""

    query: "QueryRecord"
    prefix: "Path"
    pos_edge: "PathEdge"
    neg_edge: "PathEdge"


def mine_preferences(records: list[dict], ctx, negatives_per_positive: int = 4,
                     seed: int = 0) -> list[PreferenceTuple]:
    """Build preference tuples from QA records carrying gold supporting
    chains (list of {"h","p","t"} entity-id triples in chain order).

    For each prefix of a gold chain the positive extension is the gold
    edge; negatives are uniform seeded samples from the non-gold siblings
    in the same candidate set. Gold steps are assumed ideal, so prefix
    running scores are built from a per-step increment of 1.0.
    """
    from .explorer import Path, QueryRecord, expand_candidates

    rng = np.random.default_rng(seed)
    tuples: list[PreferenceTuple] = []
    for rec in records:
        chain = rec.get("supporting") or []
        if not chain:
            continue
        query = QueryRecord(
            rec["query_id"], rec["question"],
            tuple(rec.get("topic_entities", ())), rec.get("answer"),
        )
        prefix = Path(start_entity=chain[0]["h"])
        for step in chain:
            want = {step["h"], step["t"]}
            if prefix.frontier not in want:
                break
            target = (want - {prefix.frontier}).pop()
            candidates = expand_candidates(prefix, ctx)
            gold = next(
                (c for c in candidates
                 if {c.from_entity, c.to_entity} == want), None
            )
            if gold is None:
                break
            siblings = [c for c in candidates if c is not gold]
            if siblings:
                n = min(negatives_per_positive, len(siblings))
                picks = rng.choice(len(siblings), size=n, replace=False)
                for j in sorted(picks):
                    tuples.append(
                        PreferenceTuple(query, prefix, gold, siblings[j])
                    )
            prefix = prefix.extend(gold, 1.0)
            if prefix.frontier != target:
                break
    return tuples


def staged_train(ranker: RankerModel, adapter: ProjectionAdapter,
                 featurize, align_x_f: np.ndarray, align_x_l: np.ndarray,
                 config: StagedConfig):
    """Alternate one ranker epoch (adapter frozen) with one adapter epoch
    (ranker frozen) until validation rank-accuracy stops improving.

    featurize(adapter) must return the FeatureSet of all preference tuples
    under that adapter; it is re-invoked whenever the adapter changes.
    Returns (best_ranker, best_adapter) by validation accuracy.
    """
    ranker = ranker.copy()
    adapter = adapter.copy()
    rng = np.random.default_rng(config.seed)
    feats = featurize(adapter)
    n = len(feats)
    n_val = max(1, int(n * config.val_fraction)) if n > 1 else 0
    order = np.random.default_rng(config.seed + 1).permutation(n)
    val_idx, train_idx = order[:n_val], order[n_val:]
    if train_idx.size == 0:
        train_idx = order

    def val_acc(model, fs):
        return rank_accuracy(model, fs.subset(val_idx)) if n_val else \
            rank_accuracy(model, fs.subset(train_idx))

    best_ranker, best_adapter = ranker.copy(), adapter.copy()
    best_acc = val_acc(ranker, feats)
    stale = 0
    for cycle in range(config.max_cycles):
        # stage 1: ranker learns, encoders frozen
        loss = train_ranker_epoch(ranker, feats.subset(train_idx), config.margin,
                                  config.lr_ranker, rng)
        # stage 2: adapters learn, ranker frozen
        if align_x_f.shape[0] >= 2:
            adapter = train_alignment(
                align_x_f, align_x_l, adapter,
                TrainConfig(epochs=1, batch_size=config.adapter_batch_size,
                            learning_rate=config.lr_adapter,
                            seed=config.seed + 1000 + cycle),
            )
            feats = featurize(adapter)
        acc = val_acc(ranker, feats)
        logger.info("staged cycle %d: rank loss %.5f, val accuracy %.4f",
                    cycle, loss, acc)
        if acc >= best_acc:
            # on ties keep the latest pair: the adapter keeps aligning even
            # while validation accuracy is saturated
            best_ranker, best_adapter = ranker.copy(), adapter.copy()
        if acc > best_acc:
            best_acc = acc
            stale = 0
        else:
            stale += 1
        if stale >= config.patience:
            break
    return best_ranker, best_adapter
