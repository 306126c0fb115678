"""Adding task vectors for multi-task models, and task analogies.

Run with ``python3 demos/addition_and_analogy.py`` (a few seconds).
"""

# %% setup
from __future__ import annotations

from taskvec import tasks as T
from taskvec.arith import Leaf, Sum, analogy, apply, cosine
from taskvec.coeff import CoeffGrid, Metrics, select_max, sweep
from taskvec.lab import Zoo, accuracy, normalized_accuracy

zoo = Zoo()
spec, pre = zoo.spec, zoo.pretrained()
a, b = zoo.bank(2)

# %% two task vectors, one model
ta, tb = zoo.vector(a), zoo.vector(b)
print(f"cosine(tau_a, tau_b) = {cosine(ta, tb):.3f}")   # close to orthogonal

def val_both(ck):
    return Metrics((accuracy(ck, spec, a, "val") + accuracy(ck, spec, b, "val")) / 2)

sw = sweep(pre, Sum([Leaf(ta), Leaf(tb)]), CoeffGrid.parse("0:1:0.05"), val_both)
lam = select_max(sw)
merged = apply(pre, Sum([Leaf(ta), Leaf(tb)]), lam)
for d in (a, b):
    ft_acc = accuracy(zoo.finetuned(d), spec, d)
    acc = accuracy(merged, spec, d)
    print(f"{d.spec.task_id}: merged {acc:.3f}  fine-tuned {ft_acc:.3f}  normalized {normalized_accuracy(acc, ft_acc):.3f}")

# %% analogy on a content x style grid: held-out cell = c + (b - a)
heldout = 0
ia, ib, ic = T.analogy_triple(heldout)
specs = T.make_grid(0)
held, ca, cb, cc = (T.make_task(specs[i]) for i in (heldout, ia, ib, ic))
print("held-out cell:", held.spec.task_id, "from", ca.spec.task_id, cb.spec.task_id, cc.spec.task_id)

tau_hat = analogy(zoo.vector(ca), zoo.vector(cb), zoo.vector(cc))
sw = sweep(pre, Leaf(tau_hat), CoeffGrid.parse("0:1:0.1"), lambda ck: Metrics(accuracy(ck, spec, held, "val")))
lam = select_max(sw)
edited = apply(pre, Leaf(tau_hat), lam)
print(f"zero-shot on held-out cell: pretrained {accuracy(pre, spec, held):.3f} -> analogy {accuracy(edited, spec, held):.3f} (lambda {lam})")
