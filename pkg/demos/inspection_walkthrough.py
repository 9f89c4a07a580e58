"""How EmInspector votes, on hand-made embeddings.

Ten models embed twenty inspection inputs.  Three of them share a common
direction per input (the way a backdoored encoder pulls triggered and
target-class features together); the rest answer randomly.  Each input
casts one vote per model, and the summed votes are the malicious scores.

    python demos/inspection_walkthrough.py
"""

import numpy as np

from fssl_backdoor.defense.eminspector import accumulated_similarities, decision_boundary, vote

rng = np.random.default_rng(7)
n_models, n_items, dim = 10, 20, 32

E = rng.normal(size=(n_models, n_items, dim))
colluders = [2, 5, 8]
shared = rng.normal(size=(n_items, dim))
for c in colluders:
    E[c] = shared + 0.05 * rng.normal(size=(n_items, dim))
E /= np.linalg.norm(E, axis=-1, keepdims=True)

# one inspection input in detail
d = accumulated_similarities(E[:, 0])
d_hat = decision_boundary(d, "max")
print("item 0 accumulated similarity per model")
for i, v in enumerate(d):
    mark = "  <- at or above boundary" if v >= d_hat else ""
    print(f"  model {i}: {v:+.3f}{mark}")
print(f"  boundary max(mean, median) = {d_hat:+.3f}\n")

table = vote(E, list(range(n_models)))
print("malicious scores after all items:", dict(sorted(table.scores.items())))
print("flagged:", sorted(table.flagged()), " colluders:", colluders)

loose = vote(E, list(range(n_models)), rule="mean")
print("flagged with a mean-only boundary:", sorted(loose.flagged()))
