"""
Ordinal grades from categorical factors
=======================================

In the PGS world five inflammation factors decide a grade from 1 to 5
through a rule table shipped with the package. The grade head is ordinal:
K sigmoids where the first c are trained on for grade c.

``python demos/03_pgs_grades.py``
"""

from collections import Counter

import numpy as np

from cgnn.graph import preset_pgs
from cgnn.learning import TrainConfig, evaluate, format_report, ordinal_decode, ordinal_encode, train
from cgnn.model import ModelConfig, init_model
from cgnn.worlds import WorldConfig, generate_world, load_pgs_rules, pgs_grade

# The rule table is data. The first matching row wins.
for grade, when in load_pgs_rules()[:4]:
    print(grade, when)
print("all benign ->", pgs_grade({"adhesion": "none", "distention": "normal", "hyperemic": "no", "intra_hepatic": "no", "necrotic": "no"}))

# encoding and the two decode rules
print("encode(3, 5) =", ordinal_encode(3, 5))
probs = np.array([[0.9, 0.8, 0.3, 0.6, 0.1]])
print("count rule:", ordinal_decode(probs, "count")[0], " first-below rule:", ordinal_decode(probs, "first_below")[0])

world = WorldConfig(kind="pgs", n_sequences=240, seed=1)
records = generate_world(world)
print("grade counts", sorted(Counter(r.labels["pgs"] for r in records).items()))

spec = preset_pgs().with_dims(state_dim=8, global_dim=8, input_dim=world.input_dim)
model = init_model(spec, ModelConfig(embed_dim=8, lstm_input_dim=8, encoder_hidden=8), seed=1)
config = TrainConfig(learning_rate=1e-2, epochs=10, batch_size=8, seed=1)
train(model, records[:200], config, progress=lambda h: print(f"epoch {h['epoch']:>2}  loss {h['loss']:.3f}"))

# Sequence-level rows are what matter here: labels are one per sequence.
report, _ = evaluate(model, records[200:])
print(format_report(report))
