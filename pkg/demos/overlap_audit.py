"""
Auditing test-train overlap
===========================

How much of a test trajectory was already seen in training? Three views of
the same question: shared locations (JS), shared order (LCST) and a shared
ending (OFE). Each test trajectory is scored against every training
trajectory and keeps its best match.
"""

import numpy as np

from trajoverlap.ingest import preprocess, split
from trajoverlap.overlap import BIN_LABELS, METRICS, compute_overlaps, js, lcst, ofe
from trajoverlap.synthetic import law_driven_records

# a small pair first: test [3, 7, 9, 7] against a training trajectory [3, 9, 7]
query, ref = [3, 7, 9, 7], [3, 9, 7]
print("JS  ", js(query, ref))     # {3,7,9} are all shared
print("LCST", lcst(ref, query))   # longest common subsequence 3 of the 4 test points
print("OFE ", ofe(query, ref))    # [9, 7] is the longest common ending

# a synthetic check-in corpus: 80 users, 10 sessions each, 4 days apart
records = law_driven_records(seed=0)
pre = preprocess(records)
ds = split(pre.trajectories, pre.vocabulary)
print(f"\n{len(ds.train)} train / {len(ds.valid)} valid / {len(ds.test)} test trajectories, "
      f"{len(ds.vocabulary)} locations")

# max-over-train overlap for every test trajectory, pruned through a location index
overlaps = compute_overlaps(ds.test, ds.train)

print(f"\n{'':6}" + "".join(f"{b:>8}" for b in BIN_LABELS))
for m in METRICS:
    scores = np.array([r.score for r in overlaps[m]])
    counts = [sum(r.bin == b for r in overlaps[m]) for b in BIN_LABELS]
    print(f"{m.value:6}" + "".join(f"{c / len(scores):>8.2f}" for c in counts))

# the closest training trajectory of the most-overlapping test case
best = max(overlaps[METRICS[1]], key=lambda r: r.score)
test = next(t for t in ds.test if t.tid == best.test_id)
train = next(t for t in ds.train if t.tid == best.argmax_train)
print(f"\nhighest LCST {best.score:.2f}: test {test.tid} {test.locations}")
print(f"{'':>19}train {train.tid} {train.locations}")
