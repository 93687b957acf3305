"""The four-way comparison on one seed, rendered as a markdown digest.

Synthesises a full benchmark split, trains the shared networks and
evaluates the baseline, epistemic, aleatoric and combined detectors. This
is the unit the acceptance suite repeats over five seeds; one seed takes
about two minutes.

    python demos/03_benchmark_digest.py [seed]
"""

import sys

from bayeslidar.digest import render_digest
from bayeslidar.pipeline import run_benchmark

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
result = run_benchmark(seed)
print(render_digest(result.summaries))
