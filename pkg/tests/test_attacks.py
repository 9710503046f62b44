"""Attack contracts: budgets, closed forms, monotone traces, tree flips."""

import numpy as np
import pytest

from triguard.attacks import (AttackBudget, NoAdversarialSeedError,
                              attack_batch, boundary_attack,
                              decision_tree_attack, deepfool, fgsm,
                              find_adversarial_seed, pgd, perturbation_size)
from triguard.classifiers import CartClassifier, KnnClassifier, MlpClassifier
from triguard.data import Dataset, SplitSpec, apply_normalization, gen_blobs, \
    minmax_normalize, stratified_split


def normalized_blob_pipeline(seed=0, centers=((0.2, 0.2), (0.8, 0.8)), sd=0.08):
    ds = gen_blobs(120, list(centers), sd, seed=seed)
    train, val, test = stratified_split(ds, SplitSpec(0.6, 0.2, seed=seed))
    train = minmax_normalize(train)
    val = apply_normalization(val, train.norm)
    test = apply_normalization(test, train.norm)
    return train, val, test


def affine_binary_model(seed=1):
    """Trained affine+softmax model on normalized blobs."""
    train, _, test = normalized_blob_pipeline(seed=seed)
    model = MlpClassifier.fit(train, [2, 2], epochs=150, lr=0.5, seed=seed)
    return model, train, test


# -- FGSM ---------------------------------------------------------------------

def test_fgsm_zero_budget_returns_input():
    model, _, test = affine_binary_model()
    x, y = test.samples[0], int(test.labels[0])
    res = fgsm(model, x, y, AttackBudget(epsilon=0.0))
    np.testing.assert_array_equal(res.x_adv, x)
    assert res.success == (model.predict(x) != y)
    assert res.perturbation_norm == 0.0


def test_fgsm_matches_affine_hand_computation():
    model, _, test = affine_binary_model()
    W = model.weights[0]
    eps = 0.05
    for x, y in zip(test.samples[:20], test.labels[:20]):
        p = model.predict_proba(x)
        grad = W @ (p - np.eye(2)[y])   # closed form for affine+softmax
        want = np.clip(x + eps * np.sign(grad), 0.0, 1.0)
        res = fgsm(model, x, int(y), AttackBudget(epsilon=eps))
        np.testing.assert_array_equal(res.x_adv, want)


def test_fgsm_requires_gradients_and_linf():
    train, _, test = normalized_blob_pipeline()
    cart = CartClassifier.fit(train, max_depth=4)
    with pytest.raises(ValueError, match="gradient"):
        fgsm(cart, test.samples[0], 0, AttackBudget(epsilon=0.1))
    model, _, _ = affine_binary_model()
    with pytest.raises(ValueError, match="L-infinity"):
        fgsm(model, test.samples[0], 0, AttackBudget(epsilon=0.1, norm="l2"))


def test_fgsm_ascends_loss_on_small_steps():
    model, _, test = affine_binary_model(seed=3)
    eps = 1e-3
    ascended = 0
    total = 0
    for x, y in zip(test.samples, test.labels):
        res = fgsm(model, x, int(y), AttackBudget(epsilon=eps))
        if np.array_equal(res.x_adv, x):
            continue  # clipped flat or zero gradient
        total += 1
        if model.loss(res.x_adv, int(y)) >= model.loss(x, int(y)):
            ascended += 1
    assert total > 20
    assert ascended >= 0.95 * total


# -- PGD ----------------------------------------------------------------------

def test_pgd_single_step_equals_fgsm_exactly():
    model, _, test = affine_binary_model(seed=2)
    eps = 0.07
    for x, y in zip(test.samples[:30], test.labels[:30]):
        a = fgsm(model, x, int(y), AttackBudget(epsilon=eps))
        b = pgd(model, x, int(y),
                AttackBudget(epsilon=eps, max_iter=1, step_size=eps))
        np.testing.assert_array_equal(a.x_adv, b.x_adv)
        assert a.success == b.success


@pytest.mark.parametrize("norm,eps", [("linf", 0.063), ("linf", 0.3),
                                      ("l2", 0.5), ("l2", 1.5)])
def test_pgd_budget_and_box_contracts(norm, eps):
    train, _, test = normalized_blob_pipeline(seed=4)
    model = MlpClassifier.fit(train, [2, 8, 2], epochs=100, lr=0.3, seed=4)
    budget = AttackBudget(epsilon=eps, norm=norm, max_iter=20)
    for x, y in zip(test.samples[:25], test.labels[:25]):
        res = pgd(model, x, int(y), budget, full_iterations=True)
        assert np.all(res.x_adv >= 0.0) and np.all(res.x_adv <= 1.0)
        source = np.clip(x, 0.0, 1.0)  # attacks craft from the projection
        assert perturbation_size(res.x_adv, source, norm) <= eps + 1e-9
        assert res.perturbation_norm <= eps + 1e-9
        assert res.success == (model.predict(res.x_adv) != int(y))
        assert res.iterations_used == 20


def test_pgd_early_stop():
    model, _, test = affine_binary_model(seed=5)
    budget = AttackBudget(epsilon=0.5, norm="linf", max_iter=50)
    stopped_early = False
    for x, y in zip(test.samples[:20], test.labels[:20]):
        res = pgd(model, x, int(y), budget)
        if res.success and res.iterations_used < 50:
            stopped_early = True
    assert stopped_early


# -- DeepFool --------------------------------------------------------------------

def test_deepfool_affine_closed_form():
    model, _, test = affine_binary_model(seed=6)
    W, b = model.weights[0], model.biases[0]
    w = W[:, 1] - W[:, 0]
    bias = b[1] - b[0]
    eta = 0.02
    budget = AttackBudget(max_iter=1, overshoot=eta)
    checked = 0
    for x, y in zip(test.samples, test.labels):
        source = np.clip(x, 0.0, 1.0)  # attacks craft from the projection
        if model.predict(source) != int(y):
            continue
        f = float(w @ source + bias)
        want = -(f / np.sum(w * w)) * w * (1 + eta)
        res = deepfool(model, x, int(y), budget)
        got = res.x_adv - source
        if np.any(res.x_adv <= 0.0) or np.any(res.x_adv >= 1.0):
            continue  # clipped: closed form no longer applies
        rel = np.linalg.norm(got - want) / np.linalg.norm(want)
        assert rel <= 0.01
        checked += 1
    assert checked >= 20


def test_deepfool_zero_overshoot_lands_on_hyperplane():
    model, _, test = affine_binary_model(seed=7)
    W, b = model.weights[0], model.biases[0]
    w = W[:, 1] - W[:, 0]
    bias = b[1] - b[0]
    budget = AttackBudget(max_iter=3, overshoot=0.0)
    checked = 0
    for x, y in zip(test.samples, test.labels):
        if model.predict(x) != int(y):
            continue
        res = deepfool(model, x, int(y), budget)
        if np.any(res.x_adv <= 0.0) or np.any(res.x_adv >= 1.0):
            continue
        assert abs(float(w @ res.x_adv + bias)) <= 1e-6
        checked += 1
    assert checked >= 20


def test_deepfool_already_misclassified_is_free():
    model, _, test = affine_binary_model(seed=8)
    wrong = [i for i, (x, y) in enumerate(zip(test.samples, test.labels))
             if model.predict(x) != int(y)]
    x = test.samples[wrong[0]] if wrong else test.samples[0]
    y = int(test.labels[wrong[0]]) if wrong else (1 - model.predict(test.samples[0]))
    res = deepfool(model, x, y, AttackBudget(max_iter=10))
    assert res.success and res.perturbation_norm == 0.0
    assert res.iterations_used == 0


def test_deepfool_multiclass_flips_predictions():
    ds = gen_blobs(100, [(0.2, 0.2), (0.8, 0.2), (0.5, 0.8)], 0.07, seed=9)
    train, _, test = stratified_split(ds, SplitSpec(0.6, 0.2, seed=9))
    train = minmax_normalize(train)
    test = apply_normalization(test, train.norm)
    model = MlpClassifier.fit(train, [2, 16, 3], epochs=150, lr=0.4, seed=9)
    budget = AttackBudget(max_iter=50)
    flipped = total = 0
    for x, y in zip(test.samples, test.labels):
        if model.predict(x) != int(y):
            continue
        total += 1
        res = deepfool(model, x, int(y), budget)
        flipped += res.success
    assert total >= 30
    assert flipped / total >= 0.9


# -- boundary attack ----------------------------------------------------------------

def knn_pipeline(seed=10):
    train, val, test = normalized_blob_pipeline(seed=seed)
    return KnnClassifier(train, k=1), train, test


def test_boundary_returns_input_when_already_misclassified():
    clf, train, test = knn_pipeline()
    x = test.samples[0]
    y_wrong = 1 - clf.predict(x)
    res = boundary_attack(clf, x, y_wrong, start=train.samples[0],
                          budget=AttackBudget(max_iter=10, seed=0))
    np.testing.assert_array_equal(res.x_adv, x)
    assert res.success and res.perturbation_norm == 0.0


def test_boundary_requires_adversarial_start():
    clf, train, test = knn_pipeline()
    x, y = test.samples[0], int(test.labels[0])
    assert clf.predict(x) == y
    same_class = train.samples[train.labels == y][0]
    with pytest.raises(ValueError, match="misclassified"):
        boundary_attack(clf, x, y, start=same_class,
                        budget=AttackBudget(max_iter=10, seed=0))


def test_boundary_monotone_trace_and_improvement():
    clf, train, test = knn_pipeline(seed=11)
    budget = AttackBudget(max_iter=800, seed=3)
    improved = tried = 0
    for x, y in zip(test.samples[:8], test.labels[:8]):
        y = int(y)
        if clf.predict(x) != y:
            continue
        start = find_adversarial_seed(clf, x, y, train.samples)
        res = boundary_attack(clf, x, y, start, budget, record_trace=True)
        assert res.success
        trace = np.array(res.trace)
        assert np.all(np.diff(trace) <= 0)          # never moves away
        assert trace[-1] <= trace[0]
        assert np.all(res.x_adv >= 0) and np.all(res.x_adv <= 1)
        tried += 1
        # the seed is already the nearest misclassified training point, so
        # the walk can only shave the margin down toward the boundary
        if trace[-1] < 0.75 * trace[0]:
            improved += 1
    assert tried >= 5
    assert improved >= tried - 1


def test_boundary_attack_on_tree_classifier():
    train, _, test = normalized_blob_pipeline(seed=12)
    cart = CartClassifier.fit(train, max_depth=6)
    budget = AttackBudget(max_iter=600, seed=5)
    successes = total = 0
    for x, y in zip(test.samples[:10], test.labels[:10]):
        y = int(y)
        if cart.predict(x) != y:
            continue
        total += 1
        start = find_adversarial_seed(cart, x, y, train.samples)
        res = boundary_attack(cart, x, y, start, budget)
        successes += res.success
    assert total >= 8
    assert successes / total >= 0.9


def test_find_adversarial_seed_error():
    clf, train, test = knn_pipeline()

    class StubbornModel:
        class_count = 2
        supports_gradient = False

        def predict(self, x):
            return 0

    with pytest.raises(NoAdversarialSeedError):
        find_adversarial_seed(StubbornModel(), test.samples[0], 0,
                              train.samples)


# -- decision tree attack --------------------------------------------------------------

def test_tree_attack_depth_one_split():
    xs = np.concatenate([np.linspace(0.0, 0.45, 20),
                         np.linspace(0.55, 1.0, 20)])
    ys = np.array([0] * 20 + [1] * 20)
    ds = Dataset(samples=xs[:, None], labels=ys, class_count=2)
    tree = CartClassifier.fit(ds, max_depth=1)
    thr = tree.root.threshold
    res = decision_tree_attack(tree, np.array([0.4]), margin=1e-4)
    assert res.success
    assert res.x_adv[0] == pytest.approx(thr + 1e-4)
    assert tree.predict(res.x_adv) == 1


def test_tree_attack_single_leaf_fails_cleanly():
    ds = Dataset(samples=np.arange(5, dtype=float)[:, None] / 10.0,
                 labels=np.zeros(5, dtype=np.int64), class_count=2)
    tree = CartClassifier.fit(ds, max_depth=3)
    x = np.array([0.2])
    res = decision_tree_attack(tree, x)
    assert not res.success
    np.testing.assert_array_equal(res.x_adv, x)


def test_tree_attack_flips_everything_on_banknote(banknote):
    train, _, test = stratified_split(banknote, SplitSpec(0.6, 0.2, seed=0))
    train = minmax_normalize(train)
    test = apply_normalization(test, train.norm)
    tree = CartClassifier.fit(train, max_depth=8)
    attacked = 0
    for x, y in zip(test.samples, test.labels):
        source = np.clip(x, 0.0, 1.0)  # attacks craft from the projection
        if tree.predict(source) != int(y):
            continue
        path_features = {s.feature for s in tree.decision_path(source)}
        res = decision_tree_attack(tree, x)
        assert res.success
        assert tree.predict(res.x_adv) != int(y)
        touched = set(np.flatnonzero(res.x_adv != source))
        assert touched <= path_features
        attacked += 1
    assert attacked >= 200


# -- batching ---------------------------------------------------------------------

def test_attack_batch_reseeds_per_input():
    clf, train, test = knn_pipeline(seed=13)

    def boundary_adapter(model, x, y, budget):
        start = find_adversarial_seed(model, x, y, train.samples)
        return boundary_attack(model, x, y, start, budget)

    X = test.samples[:5]
    y = test.labels[:5]
    budget = AttackBudget(max_iter=100, seed=77)
    first = attack_batch(boundary_adapter, clf, X, y, budget)
    second = attack_batch(boundary_adapter, clf, X, y, budget)
    for a, b in zip(first, second):
        np.testing.assert_array_equal(a.x_adv, b.x_adv)
    # per-input seed differs from running the attack with the batch seed
    solo = boundary_adapter(clf, X[1], int(y[1]),
                            AttackBudget(max_iter=100, seed=77 ^ 1))
    np.testing.assert_array_equal(solo.x_adv, first[1].x_adv)
