#!/usr/bin/env python3
# Ranking audio for text queries and scoring a retrieval run.

import numpy as np

from acre import retrieval

# A small index of unit vectors; ids double as the relevance ground truth.
rng = np.random.default_rng(5)
ids = [f"clip{i:02d}" for i in range(20)]
index = retrieval.RetrievalIndex.build(ids, rng.normal(size=(20, 16)))

# rank() orders all clips by cosine similarity; ties break on the clip id so
# results never depend on storage order.
query = index.vectors[7] + 0.05 * rng.normal(size=16)
result = retrieval.rank(query, index, query_id="q0", target_id="clip07")
print("top five:", result.ranked_ids[:5])
print("target rank:", result.rank_of_target)

# With one relevant clip per query, AP@10 is the truncated reciprocal rank.
for r in (1, 2, 3, 10, 11):
    print(f"  rank {r:>2} -> AP@10 {retrieval.average_precision_at_10(r):.3f}")

# evaluate() aggregates mAP@10 and R@k over many queries. Feed it queries whose
# target ranks are known and the numbers are easy to verify by hand:
# ranks {1, 2, 11, 20} -> mAP@10 = (1 + 1/2 + 0 + 0) / 4 = 0.375.
m = 24
ortho = retrieval.RetrievalIndex.build([f"c{i:03d}" for i in range(m)], np.eye(m))
queries = []
for qi, r in enumerate((1, 2, 11, 20)):
    v = np.zeros(m)
    target = m - 1 - qi
    v[target] = 0.5
    for d in [i for i in range(m) if i != target][: r - 1]:
        v[d] = 1.0
    queries.append(retrieval.Query(f"q{qi}", v, f"c{target:03d}"))
report = retrieval.evaluate(queries, ortho)
print()
print(retrieval.format_metrics_table(report))
print()
print(retrieval.metrics_csv(report))
