"""The three soft-target engines on a small embedding, then their harmonic blend."""
import numpy as np

from sslseg.anchor import anchor_graph
from sslseg.losses import harmonic_combine
from sslseg.safer import safer_targets, worst_case_gain
from sslseg.smir import smir_targets

rng = np.random.default_rng(0)
centres = np.array([[0.0, 0.0], [3.0, 0.5], [0.5, 3.0]])
y = np.repeat(np.arange(3), 120)
E = centres[y] + rng.normal(scale=0.7, size=(len(y), 2))
perm = rng.permutation(len(y))
lab, unl = perm[:30], perm[30:]   # 30 labels, 330 unlabeled points
E_L, y_L, E_U, y_U = E[lab], y[lab], E[unl], y[unl]

graph, hard, manif = anchor_graph(E_L, y_L, E_U, 3, p=30, s=3)
print("anchor graph  acc %.3f  anchors %d" % (np.mean(hard == y_U), len(graph.anchors)))

model, _, smir = smir_targets(E_L, y_L, E_U, 3)
print("smir          acc %.3f  residual %.1e" % (np.mean(smir.argmax(1) == y_U), model.residual))

ens, safer = safer_targets(E_L, y_L, E_U, 3)
print("safer         acc %.3f  alpha %s" % (np.mean(safer.argmax(1) == y_U), np.round(ens.alpha, 3)))
# the combination never does worse than the kNN baseline for any weighting
gains = [worst_case_gain(ens.f_star, ens.f0, ens.f_list, a) for a in rng.dirichlet(np.ones(3), 500)]
print("              min worst-case gain %.2e" % min(gains))

blend = harmonic_combine([manif, smir, safer])
print("weiave        acc %.3f" % np.mean(blend.argmax(1) == y_U))
