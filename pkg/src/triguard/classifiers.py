"""Target models: MLP with exact input gradients, CART tree, k-NN.

All classifiers expose the same black-box surface (predict / predict_proba),
which is the only thing the detector is allowed to use. Gradient-based
attacks additionally need `input_gradient` and per-class score gradients,
which only the MLP provides (`supports_gradient`).

Everything is float64; gradients are exact backpropagation, not finite
differences, so attack directions can be trusted.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .balltree import BallTree
from .data import Dataset
from .metrics import Metric


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"training loss became non-finite at epoch {epoch} "
                         f"(loss={loss})")
        self.epoch = epoch


class Classifier:
    """Uniform prediction interface.

    predict_proba returns a distribution over class ids (sums to 1, entries
    non-negative); predict is its argmax with ties resolved to the lowest id.
    """

    class_count: int
    supports_gradient: bool = False

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def predict(self, x: np.ndarray) -> int:
        # np.argmax returns the first maximum, which is the lowest class id
        return int(np.argmax(self.predict_proba(x)))

    def predict_batch(self, X: np.ndarray) -> np.ndarray:
        return np.array([self.predict(x) for x in np.asarray(X)], dtype=np.int64)

    def input_gradient(self, x: np.ndarray, y: int) -> np.ndarray:
        """Gradient of the training loss at (x, y) with respect to x."""
        raise NotImplementedError(f"{type(self).__name__} has no gradients")

    def to_dict(self) -> dict:
        raise NotImplementedError


# ---------------------------------------------------------------------------
# MLP: ReLU hidden layers, softmax output, cross-entropy loss
# ---------------------------------------------------------------------------

class MlpClassifier(Classifier):
    supports_gradient = True

    def __init__(self, weights: list[np.ndarray], biases: list[np.ndarray]):
        if len(weights) != len(biases) or not weights:
            raise ValueError("need matching, non-empty weight/bias lists")
        for W, b in zip(weights, biases):
            if W.shape[1] != b.shape[0]:
                raise ValueError("bias shape does not match weight shape")
        for Wa, Wb in zip(weights, weights[1:]):
            if Wa.shape[1] != Wb.shape[0]:
                raise ValueError("consecutive layer shapes do not chain")
        self.weights = [np.asarray(W, dtype=np.float64) for W in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        self.class_count = self.weights[-1].shape[1]
        self.feature_dim = self.weights[0].shape[0]
        self.epoch_losses: list[float] = []

    @property
    def layer_sizes(self) -> list[int]:
        return [self.feature_dim] + [W.shape[1] for W in self.weights]

    # -- training ----------------------------------------------------------

    @classmethod
    def init_random(cls, layers: list[int], seed: int) -> "MlpClassifier":
        if len(layers) < 2:
            raise ValueError("layers must include input and output sizes")
        rng = np.random.default_rng(seed)
        weights, biases = [], []
        for n_in, n_out in zip(layers, layers[1:]):
            scale = np.sqrt(2.0 / n_in)
            weights.append(rng.normal(0.0, scale, (n_in, n_out)))
            biases.append(np.zeros(n_out))
        return cls(weights, biases)

    @classmethod
    def fit(cls, train: Dataset, layers: list[int], epochs: int = 200,
            lr: float = 0.1, seed: int = 0, batch_size: int = 32) -> "MlpClassifier":
        """Mini-batch gradient descent with a fixed learning rate.

        layers[0] must equal the feature dimension and layers[-1] the class
        count. epochs=0 returns the seeded random initialization untouched.
        Raises TrainingDiverged when the loss turns non-finite.
        """
        if layers[0] != train.feature_dim:
            raise ValueError(f"layers[0]={layers[0]} != feature_dim={train.feature_dim}")
        if layers[-1] != train.class_count:
            raise ValueError(f"layers[-1]={layers[-1]} != class_count={train.class_count}")
        if lr <= 0:
            raise ValueError("lr must be > 0")
        model = cls.init_random(layers, seed)
        rng = np.random.default_rng(seed + 1)
        X, y = train.samples, train.labels
        n = X.shape[0]
        # divergence is detected via the isfinite check, so the transient
        # overflow warnings on the way to NaN are just noise
        with np.errstate(over="ignore", invalid="ignore", under="ignore"):
            for epoch in range(epochs):
                order = rng.permutation(n)
                for lo in range(0, n, batch_size):
                    batch = order[lo:lo + batch_size]
                    model._sgd_step(X[batch], y[batch], lr)
                loss = model.batch_loss(X, y)
                if not np.isfinite(loss):
                    raise TrainingDiverged(epoch, loss)
                model.epoch_losses.append(float(loss))
        return model

    def _forward(self, A: np.ndarray):
        """Pre-activations and activations for a (B, d) batch."""
        zs, acts = [], [A]
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            Z = acts[-1] @ W + b
            zs.append(Z)
            acts.append(np.maximum(Z, 0.0) if i < len(self.weights) - 1 else Z)
        return zs, acts

    def _sgd_step(self, X: np.ndarray, y: np.ndarray, lr: float):
        zs, acts = self._forward(X)
        B = X.shape[0]
        probs = _softmax(zs[-1])
        delta = probs
        delta[np.arange(B), y] -= 1.0
        delta /= B
        for i in range(len(self.weights) - 1, -1, -1):
            grad_W = acts[i].T @ delta
            grad_b = delta.sum(axis=0)
            if i > 0:
                delta = (delta @ self.weights[i].T) * (zs[i - 1] > 0.0)
            self.weights[i] -= lr * grad_W
            self.biases[i] -= lr * grad_b

    def batch_loss(self, X: np.ndarray, y: np.ndarray) -> float:
        logits = self._forward(np.asarray(X, dtype=np.float64))[0][-1]
        return float(np.mean(_cross_entropy(logits, y)))

    # -- inference ---------------------------------------------------------

    def logits(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return self._forward(x[None, :])[0][-1][0]

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        return _softmax(self.logits(x)[None, :])[0]

    def predict_batch(self, X: np.ndarray) -> np.ndarray:
        logits = self._forward(np.asarray(X, dtype=np.float64))[0][-1]
        return np.argmax(logits, axis=1)

    def loss(self, x: np.ndarray, y: int) -> float:
        return float(_cross_entropy(self.logits(x)[None, :], np.array([y]))[0])

    def input_gradient(self, x: np.ndarray, y: int) -> np.ndarray:
        """Exact d(cross-entropy)/dx via backpropagation."""
        x = np.asarray(x, dtype=np.float64)
        zs, _ = self._forward(x[None, :])
        delta = _softmax(zs[-1])
        delta[0, y] -= 1.0
        return self._backprop_to_input(zs, delta)

    def logit_gradient(self, x: np.ndarray, k: int) -> np.ndarray:
        """Gradient of the class-k output score (pre-softmax) w.r.t. x."""
        x = np.asarray(x, dtype=np.float64)
        zs, _ = self._forward(x[None, :])
        delta = np.zeros((1, self.class_count))
        delta[0, k] = 1.0
        return self._backprop_to_input(zs, delta)

    def _backprop_to_input(self, zs, delta: np.ndarray) -> np.ndarray:
        for i in range(len(self.weights) - 1, 0, -1):
            delta = (delta @ self.weights[i].T) * (zs[i - 1] > 0.0)
        return (delta @ self.weights[0].T)[0]

    def to_dict(self) -> dict:
        return {"format": "triguard.mlp/1",
                "layer_sizes": self.layer_sizes,
                "weights": [W.tolist() for W in self.weights],
                "biases": [b.tolist() for b in self.biases]}

    @classmethod
    def from_dict(cls, payload: dict) -> "MlpClassifier":
        return cls([np.array(W, dtype=np.float64) for W in payload["weights"]],
                   [np.array(b, dtype=np.float64) for b in payload["biases"]])


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _cross_entropy(logits: np.ndarray, y: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return -log_probs[np.arange(len(y)), y]


# ---------------------------------------------------------------------------
# CART: binary splits on single features, Gini impurity
# ---------------------------------------------------------------------------

@dataclass
class TreeNode:
    node_id: int
    class_counts: np.ndarray
    feature: int | None = None   # None marks a leaf
    threshold: float = 0.0
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None

    @property
    def is_leaf(self) -> bool:
        return self.feature is None


@dataclass(frozen=True)
class DecisionStep:
    node_id: int
    feature: int
    threshold: float
    went_left: bool


class CartClassifier(Classifier):
    def __init__(self, root: TreeNode, class_count: int, feature_dim: int):
        self.root = root
        self.class_count = class_count
        self.feature_dim = feature_dim

    @classmethod
    def fit(cls, train: Dataset, max_depth: int = 8, min_leaf: int = 1,
            seed: int = 0) -> "CartClassifier":
        """Grow a tree greedily; every split strictly reduces weighted Gini.

        The splitter is fully deterministic (ties resolved to the lowest
        feature index, then the lowest threshold); `seed` is accepted for
        interface parity and not consumed.
        """
        del seed
        if max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if min_leaf < 1:
            raise ValueError("min_leaf must be >= 1")
        X, y, C = train.samples, train.labels, train.class_count
        counter = [0]

        def build(idx: np.ndarray, depth: int) -> TreeNode:
            node_id = counter[0]
            counter[0] += 1
            counts = np.bincount(y[idx], minlength=C)
            node = TreeNode(node_id=node_id, class_counts=counts)
            if depth >= max_depth or counts.max() == idx.size or idx.size < 2 * min_leaf:
                return node
            split = _best_gini_split(X[idx], y[idx], C, min_leaf)
            if split is None:
                return node
            feature, threshold = split
            mask = X[idx, feature] <= threshold
            node.feature = feature
            node.threshold = threshold
            node.left = build(idx[mask], depth + 1)
            node.right = build(idx[~mask], depth + 1)
            return node

        root = build(np.arange(X.shape[0]), 0)
        return cls(root, C, train.feature_dim)

    def _leaf_for(self, x: np.ndarray) -> TreeNode:
        node = self.root
        while not node.is_leaf:
            node = node.left if x[node.feature] <= node.threshold else node.right
        return node

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        counts = self._leaf_for(np.asarray(x, dtype=np.float64)).class_counts
        return counts / counts.sum()

    def decision_path(self, x: np.ndarray) -> list[DecisionStep]:
        """Decision records from the root to the predicted leaf.

        Replaying the recorded directions reaches the same leaf predict()
        uses; a single-leaf tree yields an empty path.
        """
        x = np.asarray(x, dtype=np.float64)
        steps = []
        node = self.root
        while not node.is_leaf:
            went_left = bool(x[node.feature] <= node.threshold)
            steps.append(DecisionStep(node.node_id, node.feature,
                                      node.threshold, went_left))
            node = node.left if went_left else node.right
        return steps

    def iter_nodes(self):
        stack = [self.root]
        while stack:
            node = stack.pop()
            yield node
            if not node.is_leaf:
                stack.append(node.right)
                stack.append(node.left)

    def to_dict(self) -> dict:
        def encode(node: TreeNode) -> dict:
            out = {"id": node.node_id, "counts": node.class_counts.tolist()}
            if not node.is_leaf:
                out.update(feature=node.feature, threshold=node.threshold,
                           left=encode(node.left), right=encode(node.right))
            return out
        return {"format": "triguard.cart/1", "class_count": self.class_count,
                "feature_dim": self.feature_dim, "root": encode(self.root)}

    @classmethod
    def from_dict(cls, payload: dict) -> "CartClassifier":
        def decode(obj: dict) -> TreeNode:
            node = TreeNode(node_id=obj["id"],
                            class_counts=np.array(obj["counts"], dtype=np.int64))
            if "feature" in obj:
                node.feature = obj["feature"]
                node.threshold = obj["threshold"]
                node.left = decode(obj["left"])
                node.right = decode(obj["right"])
            return node
        return cls(decode(payload["root"]), payload["class_count"],
                   payload["feature_dim"])


def _best_gini_split(X: np.ndarray, y: np.ndarray, C: int,
                     min_leaf: int) -> tuple[int, float] | None:
    """(feature, threshold) with the largest strict Gini decrease, or None.

    Thresholds are midpoints between consecutive distinct sorted values;
    sweep uses cumulative class counts, one sort per feature.
    """
    n = X.shape[0]
    total = np.bincount(y, minlength=C).astype(np.float64)
    parent_gini = 1.0 - np.sum((total / n) ** 2)
    best_gain, best = 1e-12, None
    for j in range(X.shape[1]):
        order = np.argsort(X[:, j], kind="stable")
        vals = X[order, j]
        onehot = np.zeros((n, C))
        onehot[np.arange(n), y[order]] = 1.0
        cum = np.cumsum(onehot, axis=0)
        cut = np.flatnonzero(vals[:-1] != vals[1:])  # split after position i
        cut = cut[(cut + 1 >= min_leaf) & (n - cut - 1 >= min_leaf)]
        if cut.size == 0:
            continue
        n_left = (cut + 1).astype(np.float64)
        n_right = n - n_left
        left = cum[cut]
        right = total - left
        gini_l = 1.0 - np.sum((left / n_left[:, None]) ** 2, axis=1)
        gini_r = 1.0 - np.sum((right / n_right[:, None]) ** 2, axis=1)
        gains = parent_gini - (n_left / n) * gini_l - (n_right / n) * gini_r
        pos = int(np.argmax(gains))
        if gains[pos] > best_gain:
            best_gain = float(gains[pos])
            best = (j, float((vals[cut[pos]] + vals[cut[pos] + 1]) / 2.0))
    return best


# ---------------------------------------------------------------------------
# k-NN over a ball-tree index
# ---------------------------------------------------------------------------

class KnnClassifier(Classifier):
    def __init__(self, train: Dataset, k: int, metric: Metric = Metric.L2):
        if not 1 <= k <= train.n_samples:
            raise ValueError(f"k={k} must be in [1, {train.n_samples}]")
        self.k = k
        self.metric = metric
        self.class_count = train.class_count
        self.feature_dim = train.feature_dim
        self._labels = train.labels
        self._tree = BallTree.build(train.samples, metric=metric)

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        idx = self._tree.query_payloads(x, self.k)
        counts = np.bincount(self._labels[idx], minlength=self.class_count)
        return counts / self.k

    def to_dict(self) -> dict:
        return {"format": "triguard.knn/1", "k": self.k,
                "metric": self.metric.value,
                "points": self._tree.points.tolist(),
                "labels": self._labels.tolist(),
                "class_count": self.class_count}

    @classmethod
    def from_dict(cls, payload: dict) -> "KnnClassifier":
        train = Dataset(samples=np.array(payload["points"], dtype=np.float64),
                        labels=np.array(payload["labels"], dtype=np.int64),
                        class_count=payload["class_count"])
        return cls(train, payload["k"], Metric.from_name(payload["metric"]))


def knn_predict(train: Dataset, x: np.ndarray, k: int,
                metric: Metric = Metric.L2) -> np.ndarray:
    """One-off neighbor-frequency probabilities (builds a fresh index)."""
    return KnnClassifier(train, k, metric).predict_proba(x)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

_REGISTRY = {"triguard.mlp/1": MlpClassifier,
             "triguard.cart/1": CartClassifier,
             "triguard.knn/1": KnnClassifier}


def save_classifier(path, clf: Classifier):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(clf.to_dict(), fh)


def load_classifier(path) -> Classifier:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    tag = payload.get("format")
    if tag not in _REGISTRY:
        raise ValueError(f"unknown classifier format tag {tag!r}")
    return _REGISTRY[tag].from_dict(payload)
