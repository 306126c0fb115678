"""Forgetting a task by subtracting its task vector.

Run with ``python3 demos/forgetting_walkthrough.py``. Takes a few seconds on
one core. Everything is trained from scratch on synthetic data.
"""

# %% setup
from __future__ import annotations

import numpy as np

from taskvec.arith import Leaf, apply, diff, negate, random_matched
from taskvec.coeff import CoeffGrid, Metrics, select_negation, sweep
from taskvec.lab import Zoo, accuracy

zoo = Zoo()
spec = zoo.spec
pre = zoo.pretrained()
control = zoo.control
target = zoo.bank(1)[0]
print("pre-trained:", pre.meta.model_id, pre.hash[:12])

# %% fine-tune on the target task and take the difference
ft = zoo.finetuned(target)
tau = diff(ft, pre, task_id=target.spec.task_id)
print(f"task vector {tau.task_id}: norm {tau.norm():.3f}")
print("target acc  pre %.3f  ft %.3f" % (accuracy(pre, spec, target), accuracy(ft, spec, target)))

# %% sweep the negated vector, keeping control accuracy near its starting point
def evaluate(ck):
    return Metrics(accuracy(ck, spec, target, "val"), accuracy(ck, spec, control, "val"))

grid = CoeffGrid.parse("0:1:0.05")
result = sweep(pre, Leaf(negate(tau)), grid, evaluate)
choice = select_negation(result, accuracy(pre, spec, control, "val"))
lam = choice.coeff
print("chosen lambda:", lam, "(warning)" if choice.warning else "")

# %% compare against a random direction of the same per-layer norm
edited = apply(pre, Leaf(negate(tau)), lam)
rand = apply(pre, Leaf(random_matched(tau, seed=12345)), lam)
for name, ck in [("pretrained", pre), ("negated", edited), ("random", rand)]:
    print(f"{name:>10}: target {accuracy(ck, spec, target):.3f}  control {accuracy(ck, spec, control):.3f}")

# the random edit barely moves either number; the negated one removes the target task
assert accuracy(edited, spec, target) < accuracy(rand, spec, target)
print("max |edited - pre| in any weight:", max(float(np.abs(edited.weights[k] - pre.weights[k]).max()) for k in pre.weights))
