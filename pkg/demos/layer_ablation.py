"""Pairing the global head with local features from every encoder layer.

For each layer n the model is retrained with the local head reading H^(n);
the table shows P@k for both heads and their average, plus the mean
Jensen-Shannon divergence between the two heads' label distributions.
Writes ablation.csv (and ablation.png when matplotlib is installed).

Run:  python demos/layer_ablation.py   (about three minutes)
"""

from pathlib import Path

from glocalxml.data import SyntheticSpec
from glocalxml.evaluation import ablation_csv, layer_ablation, plot_ablation
from glocalxml.experiments import synthetic_data
from glocalxml.train import TrainConfig

data = synthetic_data(SyntheticSpec(num_docs=800))
rows = layer_ablation(data.model_config(), data.train, data.test, range(5), TrainConfig(epochs=4))

print("layer  global@1  local@1  final@1   JSD")
for row in rows:
    p = row.precision
    print(f"{row.layer:5d}  {p['global'][1]:8.3f}  {p['local'][1]:7.3f}  {p['final'][1]:7.3f}  {row.jsd:.3f}")

here = Path(__file__).parent
ablation_csv(rows, here / "ablation.csv")
try:
    plot_ablation(rows, here / "ablation.png", k=1)
except ImportError:
    print("matplotlib not installed; skipped the plot")
