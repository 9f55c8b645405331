"""How brute-force search time grows with embedding size.

Run with ``python3 demos/07_search_latency.py``. Takes a few seconds and
about 1.7 GB of memory for the largest matrix.
"""
from embdistill import bench_retrieval
from embdistill.retrieval import bench_table

rows, _ = bench_retrieval(100_000, [64, 256, 1024, 4096], repeats=5)
print(bench_table(rows))

# Ratios near d_large / d_small mean the scan is memory-bound. Doubling the
# dimensionality roughly doubles the time per query.
