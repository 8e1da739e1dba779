"""
Reranking with mobility laws
============================

People mostly move short distances, favour places they (or others) visit
often, and split into returners and explorers. Those regularities become
features for a small scorer that reorders a base predictor's candidates.
"""

import numpy as np

from trajoverlap.experiment import law_rerank
from trajoverlap.ingest import preprocess, split
from trajoverlap.laws import fit_gamma, fit_law_model, top_n_law_locations, user_features
from trajoverlap.rerank import format_relative
from trajoverlap.synthetic import law_driven_records

# corpus whose steps follow (distance * visits) ** -1.6
pre = preprocess(law_driven_records(seed=2, gamma=1.6))
ds = split(pre.trajectories, pre.vocabulary)

# the exponent can be estimated from the training moves, but the fit only sees
# training visit counts, not the hidden attractiveness the generator used, so
# on a corpus this sparse it comes out well below 1.6; the model keeps 1.6
print(f"fitted exponent {fit_gamma(ds.train, ds.vocabulary):.2f} (model uses 1.6)")

# per-user features: mean hop length, radius of gyration, returner (0) or explorer (1)
feats = user_features(ds.by_user("train"), ds.vocabulary)
rg = np.array([f.r_g for f in feats.values()])
print(f"radius of gyration: median {np.median(rg):.2f} km, "
      f"{sum(f.re_u for f in feats.values())} explorers of {len(feats)}")

# the five most likely next locations from one anchor
law = fit_law_model(ds.train, ds.vocabulary)
anchor = ds.test[0].locations[-2]
print(f"law top-5 after location {anchor}: {top_n_law_locations(law, anchor, 5)}")

# MMC as the base predictor; scorer trained on validation, applied to test
run = law_rerank(ds)
print(f"\noverall ACC@5 {run.report['overall']['base']:.3f} -> {run.report['overall']['reranked']:.3f} "
      f"({format_relative(run.report['overall']['relative'])})")
for metric, bins in run.report["per_bin"].items():
    c = bins["0-20"]
    print(f"{metric:5} 0-20 bin (n={c['n']:>3}): {c['base']:.3f} -> {c['reranked']:.3f} "
          f"({format_relative(c['relative'])})")
