"""Generate the toy benchmark, cluster domain B with a fresh encoder and
see which clusters survive each reliability criterion."""
import numpy as np

from domainmix import model
from domainmix.cluster import CriteriaFlags, DbscanParams, select_reliable
from domainmix.diffcore import make_rng
from domainmix.synthgen import BenchmarkSpec, domain_gap_score, generate

spec = BenchmarkSpec(seed=0)
bench = generate(spec)
print("A", bench.train_A.X.shape, "B", bench.train_B.X.shape)
print("query", bench.query_C.X.shape, "gallery", bench.gallery_C.X.shape)

# how far apart are the domains in raw input space
print("gap A-B %.3f" % domain_gap_score(bench.train_A, bench.train_B))
print("gap B-C %.3f" % domain_gap_score(bench.train_B, bench.gallery_C))

# random encoder, same shape as training uses
enc = model.init_encoder(make_rng(0, 1), spec.d_in, 64, 32)
feats = model.normalize_features(model.encode(enc, bench.train_B.X))

params = DbscanParams()
for flags in [CriteriaFlags(False, False, False), CriteriaFlags(True, True, False),
              CriteriaFlags(False, False, True), CriteriaFlags(True, True, True)]:
    sel = select_reliable(feats, params, flags)
    print(flags, "M =", sel.assignment.n_clusters, "kept =", sel.n_kept,
          "noise =", sel.assignment.n_noise)

# purity of the kept clusters against hidden ground truth
truth = bench.reveal_B_identities()
sel = select_reliable(feats, params)
for c in range(sel.n_kept):
    ids = truth[sel.pseudo_labels == c]
    print(c, len(ids), "majority %.2f" % (np.bincount(ids).max() / len(ids)))
