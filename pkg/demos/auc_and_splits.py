"""Rank-based AUC, its tie handling, and how seeded splits are drawn."""

import itertools

import numpy as np

from mamba2mil.data import FeatureBag, make_splits
from mamba2mil.metrics import FoldMetrics, aggregate, roc_auc_binary, roc_auc_multiclass

scores = np.array([0.1, 0.4, 0.35, 0.8])
labels = np.array([0, 0, 1, 1])
print("AUC:", roc_auc_binary(scores, labels))

# the same number by brute force: count ordered pairs, ties count one half
pos, neg = scores[labels == 1], scores[labels == 0]
pairs = [1.0 if p > q else 0.5 if p == q else 0.0 for p, q in itertools.product(pos, neg)]
print("pairwise count:", sum(pairs) / len(pairs))

print("all tied:", roc_auc_binary(np.full(6, 0.3), [0, 1, 0, 1, 1, 0]))
print("monotone transform leaves it alone:", roc_auc_binary(np.exp(scores), labels))

rng = np.random.default_rng(3)
probs = rng.dirichlet(np.ones(3), 30)
y = np.arange(30) % 3
print("3-class macro one-vs-rest:", roc_auc_multiclass(probs, y))

# five seeded stratified 80/10/10 splits
bags = [FeatureBag(f"b{i}", i % 2, np.zeros((1, 1))) for i in range(40)]
for plan in make_splits(bags, folds=5, seed=0):
    print(f"fold {plan.fold}: train {len(plan.train)}  val {len(plan.val)}  test {plan.test}")

report = aggregate([FoldMetrics(0.9, 0.8, 0.95, 0.9), FoldMetrics(1.0, 0.9, 0.9, 0.85)])
print(report.to_table("Example"))
