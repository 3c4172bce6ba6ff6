"""Reading an ablation table.

Each cell summarises five seeds as mean±std. In every column the best mean
gets a star and the runner-up a plus. Values here are made up; swap in
`rarefind.training.collect_results(load_artifacts(root))` to render a real grid.

    python3 demos/04_results_table.py
"""

import numpy as np

from rarefind.evaluation import TABLE_ROWS, CellKey, EvalResult, export_results, import_results, render_results_table

rng = np.random.default_rng(3)
backends = ["toy_centernet", "toy_wide"]
results = []
for rank, (pre, novel_mode, base_mode) in enumerate(TABLE_ROWS):
    for backend in backends:
        for size in (50, 100, 200):
            centre = 0.05 + 0.02 * rank + 0.0004 * size
            seeds = {s: float(np.clip(rng.normal(centre, 0.02), 0, 1)) for s in range(5)}
            results.append(EvalResult(CellKey(pre, novel_mode, base_mode, size, backend), seeds))

# One seed crashed in this cell: it is left out of mean±std but kept in the export.
results[3].failed_seeds.append(4)
del results[3].per_seed[4]
# A cell that was never run renders as a dash.
results.pop(5)

print(render_results_table(results, backends=backends))

doc = export_results(results)
again = import_results(doc)
print(f"\nexport round-trip identical: {export_results(again) == doc}")
