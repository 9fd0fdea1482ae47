"""Same answer, bit for bit, whatever the number of workers.

Each convolution is cut into a fixed number of blocks and the block sums
are combined by a fixed tree, so changing the worker count only changes
who computes each block.  This script integrates with 1, 2 and 4 process
workers and compares the raw MPFR bits of every sample.

    python demos/reproducible_reduction.py
"""

import gmpy2

from mptaylor import IntegratorConfig, ProcessReducer, builtin_lorenz, integrate, make_context

cfg = IntegratorConfig(40, 60, "0.01", "2", 20)
lorenz = builtin_lorenz(make_context(60))

outputs = {}
for workers in (1, 2, 4):
    samples = []
    with ProcessReducer(workers, partitions=4) as reducer:
        integrate(lorenz, cfg, reducer, samples.append)
    outputs[workers] = [tuple(gmpy2.to_binary(v.value) for v in s.state) for s in samples]
    print(f"{workers} worker(s): {len(samples)} samples")

same = all(out == outputs[1] for out in outputs.values())
print("bitwise identical:", same)
