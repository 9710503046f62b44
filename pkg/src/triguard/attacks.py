"""Evasion attacks: gradient ascent (FGSM, PGD), linearization (DeepFool),
decision-based random walk (boundary), and tree-structure exploitation.

All attacks work in normalized feature units and clip their outputs to the
unit box. Budgeted attacks (FGSM, PGD) never exceed their norm budget;
minimum-perturbation attacks (DeepFool, boundary, tree) report the final L2
perturbation instead. Every result's `success` flag is re-verified against
the model after the attack finishes, independent of attack internals.

The attacker is assumed to know the model and the training data but not the
detector, so nothing here queries the defense.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .classifiers import CartClassifier, Classifier

TREE_ATTACK_MARGIN = 1e-4
DEFAULT_OVERSHOOT = 0.02


class NoAdversarialSeedError(RuntimeError):
    pass


@dataclass(frozen=True)
class AttackBudget:
    epsilon: float = 0.0
    norm: str = "linf"          # "linf" or "l2"
    max_iter: int = 100
    step_size: float | None = None   # None: 2.5 * epsilon / max_iter
    seed: int = 0
    overshoot: float = DEFAULT_OVERSHOOT  # DeepFool only

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.norm not in ("linf", "l2"):
            raise ValueError(f"norm must be 'linf' or 'l2', got {self.norm!r}")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.step_size is not None and self.step_size <= 0:
            raise ValueError("step_size must be positive when given")
        if self.overshoot < 0:
            raise ValueError("overshoot must be >= 0")

    @property
    def effective_step(self) -> float:
        if self.step_size is not None:
            return self.step_size
        return 2.5 * self.epsilon / self.max_iter


@dataclass
class AttackResult:
    x_adv: np.ndarray
    success: bool                 # model prediction differs from true label
    perturbation_norm: float
    iterations_used: int
    trace: list[float] | None = None  # accepted distances (boundary attack)


def perturbation_size(x_adv: np.ndarray, x: np.ndarray, norm: str) -> float:
    delta = np.asarray(x_adv) - np.asarray(x)
    if norm == "linf":
        return float(np.max(np.abs(delta))) if delta.size else 0.0
    return float(np.sqrt(np.sum(delta * delta)))


def _require_gradient(model: Classifier):
    if not model.supports_gradient:
        raise ValueError(f"{type(model).__name__} does not expose input "
                         f"gradients; use a decision-based attack instead")


def _source(x: np.ndarray) -> np.ndarray:
    """Attacks craft from the unit-box projection of the benign input.

    Normalized held-out samples may fall slightly outside [0, 1]; measuring
    budgets from the projection keeps the norm and box contracts
    simultaneously satisfiable.
    """
    return np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)


def _finish(model: Classifier, x: np.ndarray, x_adv: np.ndarray, y: int,
            norm: str, iterations: int, trace=None) -> AttackResult:
    x_adv = np.clip(x_adv, 0.0, 1.0)
    return AttackResult(x_adv=x_adv,
                        success=model.predict(x_adv) != y,
                        perturbation_norm=perturbation_size(x_adv, x, norm),
                        iterations_used=iterations,
                        trace=trace)


# ---------------------------------------------------------------------------
# gradient attacks
# ---------------------------------------------------------------------------

def fgsm(model: Classifier, x: np.ndarray, y: int,
         budget: AttackBudget) -> AttackResult:
    """Single step of size epsilon along the sign of the loss gradient
    (loss ascent on the true label), clipped to the unit box."""
    _require_gradient(model)
    if budget.norm != "linf":
        raise ValueError("fgsm is an L-infinity attack")
    x = _source(x)
    g = model.input_gradient(x, y)
    x_adv = np.clip(x + budget.epsilon * np.sign(g), 0.0, 1.0)
    return _finish(model, x, x_adv, y, budget.norm, iterations=1)


def pgd(model: Classifier, x: np.ndarray, y: int, budget: AttackBudget,
        full_iterations: bool = False) -> AttackResult:
    """Iterative loss ascent with projection onto the epsilon ball.

    The perturbation is tracked directly and projected each step
    (coordinate clamp for L-infinity, radial rescale for L2), then the
    iterate is clipped to the unit box. Stops at the first success unless
    full_iterations is set. With max_iter=1 and step=epsilon under
    L-infinity this computes exactly the fgsm output.
    """
    _require_gradient(model)
    x = _source(x)
    eps, step = budget.epsilon, budget.effective_step
    delta = np.zeros_like(x)
    iterations = 0
    for _ in range(budget.max_iter):
        x_cur = np.clip(x + delta, 0.0, 1.0)
        g = model.input_gradient(x_cur, y)
        if budget.norm == "linf":
            delta = np.clip(delta + step * np.sign(g), -eps, eps)
        else:
            g_norm = float(np.sqrt(np.sum(g * g)))
            if g_norm > 0.0:
                delta = delta + step * g / g_norm
            d_norm = float(np.sqrt(np.sum(delta * delta)))
            if d_norm > eps:
                delta = delta * (eps / d_norm)
        iterations += 1
        if not full_iterations and model.predict(np.clip(x + delta, 0.0, 1.0)) != y:
            break
    return _finish(model, x, x + delta, y, budget.norm, iterations)


def deepfool(model, x: np.ndarray, y: int, budget: AttackBudget) -> AttackResult:
    """Iterative minimal-step linearization toward the nearest class
    boundary; the accumulated perturbation is scaled by (1 + overshoot).

    Needs per-class score gradients (model.logits / model.logit_gradient).
    Non-convergence within max_iter shows up as success=False.
    """
    _require_gradient(model)
    if not hasattr(model, "logit_gradient"):
        raise ValueError(f"{type(model).__name__} does not expose per-class "
                         f"score gradients required by deepfool")
    x = _source(x)
    y0 = model.predict(x)
    if y0 != y:
        return AttackResult(x_adv=x.copy(), success=True,
                            perturbation_norm=0.0, iterations_used=0)

    eta = budget.overshoot
    r_tot = np.zeros_like(x)
    iterations = 0
    x_i = x
    while model.predict(x_i) == y0 and iterations < budget.max_iter:
        logits = model.logits(x_i)
        g0 = model.logit_gradient(x_i, y0)
        best_step, best_w = np.inf, None
        for k in range(model.class_count):
            if k == y0:
                continue
            w_k = model.logit_gradient(x_i, k) - g0
            f_k = logits[k] - logits[y0]
            w_norm = float(np.sqrt(np.sum(w_k * w_k)))
            step = abs(f_k) / max(w_norm, 1e-12)
            if step < best_step:
                best_step, best_w = step, (w_k, w_norm, f_k)
        w_k, w_norm, f_k = best_w
        if w_norm < 1e-12:
            break  # flat linearization, no usable direction
        r_tot = r_tot + (abs(f_k) / w_norm ** 2) * w_k
        x_i = x + (1.0 + eta) * r_tot
        iterations += 1
    return _finish(model, x, x + (1.0 + eta) * r_tot, y, "l2", iterations)


# ---------------------------------------------------------------------------
# decision-based attacks
# ---------------------------------------------------------------------------

def find_adversarial_seed(model: Classifier, x: np.ndarray, y: int,
                          candidates: np.ndarray) -> np.ndarray:
    """Closest candidate (L2) that the model classifies as anything but y.
    Training points of other classes are the usual candidate pool."""
    candidates = np.asarray(candidates, dtype=np.float64)
    order = np.argsort(np.sum((candidates - x) ** 2, axis=1), kind="stable")
    for i in order:
        if model.predict(candidates[i]) != y:
            return candidates[i].copy()
    raise NoAdversarialSeedError(
        f"no candidate is classified differently from label {y}")


def boundary_attack(model: Classifier, x: np.ndarray, y: int,
                    start: np.ndarray, budget: AttackBudget,
                    record_trace: bool = False) -> AttackResult:
    """Random walk along the decision boundary toward the benign input.

    Uses only predict(). Each proposal takes an orthogonal step on the
    sphere around x followed by a contraction toward x; it is accepted only
    if it stays misclassified and does not increase the distance, so the
    accepted-distance sequence is non-increasing. Step sizes adapt by x1.2
    after three straight acceptances and x0.8 after three straight
    rejections.
    """
    x = _source(x)
    if model.predict(x) != y:
        return AttackResult(x_adv=x.copy(), success=True,
                            perturbation_norm=0.0, iterations_used=0,
                            trace=[0.0] if record_trace else None)
    start = np.clip(np.asarray(start, dtype=np.float64), 0.0, 1.0)
    if model.predict(start) == y:
        raise ValueError("start point must already be misclassified")

    rng = np.random.default_rng(budget.seed)
    cur = start
    cur_dist = perturbation_size(cur, x, "l2")
    trace = [cur_dist] if record_trace else None
    orth_step, src_step = 0.1, 0.1
    orth_streak = src_streak = 0

    def scaled(step: float, streak: int) -> tuple[float, int]:
        if streak >= 3:
            return min(step * 1.2, 1.0), 0
        if streak <= -3:
            return max(step * 0.8, 1e-7), 0
        return step, streak

    for _ in range(budget.max_iter):
        direction = x - cur
        dist = float(np.sqrt(np.sum(direction * direction)))
        if dist == 0.0:
            break
        u = direction / dist
        noise = rng.normal(size=x.shape)
        noise -= np.dot(noise, u) * u
        n_norm = float(np.sqrt(np.sum(noise * noise)))
        if n_norm > 0.0:
            noise *= orth_step * dist / n_norm
        # walk along the sphere of the current distance; clipping to the
        # box can only move the point closer to x, never farther
        off = cur + noise - x
        off_norm = float(np.sqrt(np.sum(off * off)))
        cand_orth = np.clip(x + off * (dist / off_norm), 0.0, 1.0) \
            if off_norm > 0.0 else cur
        orth_dist = perturbation_size(cand_orth, x, "l2")
        # accepted iterates must never move away, even by rounding
        if orth_dist <= cur_dist and model.predict(cand_orth) != y:
            cur, cur_dist = cand_orth, orth_dist
            orth_streak = max(orth_streak, 0) + 1
            # from the new boundary point, try a contraction toward x
            cand_src = np.clip(cur + src_step * (x - cur), 0.0, 1.0)
            src_dist = perturbation_size(cand_src, x, "l2")
            if src_dist <= cur_dist and model.predict(cand_src) != y:
                cur, cur_dist = cand_src, src_dist
                src_streak = max(src_streak, 0) + 1
            else:
                src_streak = min(src_streak, 0) - 1
            src_step, src_streak = scaled(src_step, src_streak)
            if record_trace:
                trace.append(cur_dist)
        else:
            orth_streak = min(orth_streak, 0) - 1
        orth_step, orth_streak = scaled(orth_step, orth_streak)

    return AttackResult(x_adv=cur, success=model.predict(cur) != y,
                        perturbation_norm=cur_dist,
                        iterations_used=budget.max_iter, trace=trace)


# ---------------------------------------------------------------------------
# decision tree attack
# ---------------------------------------------------------------------------

def decision_tree_attack(tree: CartClassifier, x: np.ndarray,
                         margin: float = TREE_ATTACK_MARGIN) -> AttackResult:
    """Flip the prediction of a CART tree by crossing split thresholds.

    Walks the decision nodes on x's own root-to-leaf path from the deepest
    to the shallowest, flips the inequality there by moving the split
    feature just past the threshold, and descends the opposite subtree
    looking for a leaf of a different class that is reachable by adjusting
    path features only. Features off the decision path are never touched.
    """
    x = _source(x)
    steps = tree.decision_path(x)
    y0 = tree.predict(x)
    if not steps:
        return AttackResult(x_adv=x.copy(), success=False,
                            perturbation_norm=0.0, iterations_used=0)
    path_features = {s.feature for s in steps}
    nodes_by_id = {node.node_id: node for node in tree.iter_nodes()}

    for depth in range(len(steps) - 1, -1, -1):
        intervals = {f: (-np.inf, np.inf) for f in path_features}
        for s in steps[:depth]:
            _narrow(intervals, s.feature, s.threshold, s.went_left)
        flip = steps[depth]
        # cross to the other side of this node's split
        _narrow(intervals, flip.feature, flip.threshold, not flip.went_left)
        if not _feasible(intervals):
            continue
        flip_node = nodes_by_id[flip.node_id]
        subtree = flip_node.right if flip.went_left else flip_node.left
        solution = _search_subtree(subtree, x, y0, path_features, intervals)
        if solution is not None:
            x_adv = x.copy()
            for f, (lo, hi) in solution.items():
                # clamp only coordinates the attack sets; untouched features
                # must stay bit-identical to the input
                x_adv[f] = min(max(_pick_value(x[f], lo, hi, margin), 0.0), 1.0)
            return AttackResult(x_adv=x_adv,
                                success=tree.predict(x_adv) != y0,
                                perturbation_norm=perturbation_size(x_adv, x, "l2"),
                                iterations_used=len(steps) - depth)
    return AttackResult(x_adv=x.copy(), success=False,
                        perturbation_norm=0.0, iterations_used=len(steps))


def _narrow(intervals: dict, feature: int, threshold: float, go_left: bool):
    lo, hi = intervals[feature]
    if go_left:
        intervals[feature] = (lo, min(hi, threshold))   # value <= threshold
    else:
        intervals[feature] = (max(lo, threshold), hi)   # value > threshold
    return intervals


def _feasible(intervals: dict) -> bool:
    return all(lo < hi for lo, hi in intervals.values())


def _search_subtree(node, x, y0, path_features, intervals):
    """Depth-first search for a different-class leaf reachable while only
    adjusting path features; returns the narrowed intervals, or None.
    Branches consistent with x's current values are preferred."""
    if node.is_leaf:
        return intervals if int(np.argmax(node.class_counts)) != y0 else None
    f, thr = node.feature, node.threshold
    if f not in path_features:
        # untouched feature: the branch is forced by x itself
        child = node.left if x[f] <= thr else node.right
        return _search_subtree(child, x, y0, path_features, intervals)
    prefer_left = x[f] <= thr
    for go_left in ((True, False) if prefer_left else (False, True)):
        branch = _narrow(dict(intervals), f, thr, go_left)
        if not _feasible(branch):
            continue
        child = node.left if go_left else node.right
        found = _search_subtree(child, x, y0, path_features, branch)
        if found is not None:
            return found
    return None


def _pick_value(current: float, lo: float, hi: float, margin: float) -> float:
    """Value inside (lo, hi] nearest to `current`, kept `margin` clear of the
    edges when the interval is wide enough."""
    if lo < current <= hi:
        return current
    lo_m = lo + margin
    hi_m = hi - margin if np.isfinite(hi) else hi
    if lo_m <= hi_m:
        return float(min(max(current, lo_m), hi_m))
    return float(hi) if np.isfinite(hi) else lo_m


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

def attack_batch(attack, model: Classifier, X: np.ndarray, y: np.ndarray,
                 budget: AttackBudget, **kwargs) -> list[AttackResult]:
    """Run a same-signature attack on every row, reseeding per input
    (seed xor row index) so results do not depend on scheduling."""
    results = []
    for i, (x, yi) in enumerate(zip(np.asarray(X), np.asarray(y))):
        per_input = replace(budget, seed=budget.seed ^ i)
        results.append(attack(model, x, int(yi), per_input, **kwargs))
    return results


def write_adversarial_csv(path, indices, labels, results: list[AttackResult]):
    """Adversarial set as CSV: original index, label, success flag,
    perturbation norm, then the feature values."""
    import csv

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        d = len(results[0].x_adv) if results else 0
        writer.writerow(["index", "label", "success", "perturbation_norm"]
                        + [f"f{j}" for j in range(d)])
        for idx, label, res in zip(indices, labels, results):
            writer.writerow([int(idx), int(label), int(res.success),
                             repr(res.perturbation_norm)]
                            + [repr(float(v)) for v in res.x_adv])
