"""Does the local head look at the words that imply a label?

Builds a small planted-keyword corpus (labels 10+ each fire on one trigger
token ``kw<label>``), trains the keyword probe, and prints for a few test
documents where the local head puts its attention for each true keyword
label. A ratio of 1 means uniform attention over the document.

Run:  python demos/keyword_attention.py   (about a minute)
"""

import numpy as np

from glocalxml.data import SyntheticSpec, decode
from glocalxml.evaluation import predict_corpus
from glocalxml.experiments import KEYWORD_PROBE_RATES, run_synthetic, synthetic_data
from glocalxml.train import TrainConfig

data = synthetic_data(SyntheticSpec(num_docs=600, num_labels=30), max_len=48)
run = run_synthetic(data, seed=0, epochs=8, train_config=TrainConfig(lr=dict(KEYWORD_PROBE_RATES)), local_layer=0)
print("test", run.report.summary())
r = run.attention_ratios
print(f"{r.size} trigger cases, median {np.median(r):.1f}x uniform, {np.mean(r >= 5):.0%} at 5x or more\n")

preds = predict_corpus(run.model, data.test, keep_attention=True)
triggers = data.trigger_ids()
tokens = dict(data.spec.keyword_map)
shown = 0
for d, ex in enumerate(data.test.examples):
    labels = [lab for lab in sorted(ex.labels) if lab in triggers]
    if not labels:
        continue
    words = ["[CLS]"] + decode(data.vocab, ex.token_ids, ex.mask)
    for lab in labels:
        alpha = preds.attention.weights[d, lab, : len(words)]
        top = np.argsort(-alpha)[:3]
        picks = ", ".join(f"{words[i]} {alpha[i]:.2f}" for i in top)
        print(f"doc {d:3d} label {lab:2d} ({tokens[lab]}): top attention {picks}")
    shown += 1
    if shown == 5:
        break
