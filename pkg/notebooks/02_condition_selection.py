# %% [markdown]
# # Watching the gate
#
# Eight optional conditions compete for three slots at every reverse step.
# Each one carries a weight that moves with how fast its loss changes; the
# three heaviest are applied. This notebook runs a multi-focus pair and
# looks at which conditions got picked when.

# %%
import json
from pathlib import Path

import numpy as np

from ccfuse import GMMDenoiser, default_condition_set, init_gate, make_schedule, sample_fusion, to_engine
from ccfuse.cli import phase_counts, selection_svg, trace_stats
from ccfuse.synthetic import blur_pair

out = Path(__file__).with_name("out")
out.mkdir(exist_ok=True)

near, far = blur_pair(48)
cs = default_condition_set("mff")
[s.id for s, _ in cs.basic], [s.id for s in cs.enhanced]

# %%
den = GMMDenoiser([to_engine(near), to_engine(far)], variance=0.01)
res = sample_fusion([near, far], cs, init_gate(8, k=3, rng_seed=1), den, make_schedule(100), seed=1)
trace = res.trace
len(trace), trace.condition_ids

# %% [markdown]
# First two steps have no loss history yet, so the pick there is a seeded
# random draw. After that it is the top three weights.

# %%
for rec in trace.records[:6]:
    print(rec.step, [trace.condition_ids[j] for j in rec.selected], np.round(rec.omega, 3))

# %%
counts = phase_counts(trace, 4)
print("phase ", " ".join(f"{c:>5}" for c in trace.condition_ids))
for p, row in enumerate(counts):
    print(f"{p:>5} ", " ".join(f"{n:>5}" for n in row))
assert counts.sum() == 3 * len(trace)

# %%
stats = trace_stats(trace, 4)
(out / "selection.svg").write_text(selection_svg(stats))
print(json.dumps(stats["global"]))

# %% [markdown]
# Final weights, and the losses at the end of sampling.

# %%
print({c: round(float(w), 3) for c, w in zip(trace.condition_ids, res.gate.omega)})
print({k: round(v, 5) for k, v in res.final_losses["enhanced"].items()})
