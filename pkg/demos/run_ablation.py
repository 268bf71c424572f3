"""Train and evaluate the ablation matrix on the default corpus.

Results are cached under runs/ablation, one JSON file per (configuration, seed),
so the script can be interrupted and resumed.  Seeds are completed one at a
time, printing the table after each, so a full (if noisy) picture appears early.

    python demos/run_ablation.py            # seeds 0,1,2
    python demos/run_ablation.py 0 1 2 3    # more seeds
"""

import logging
import sys
from pathlib import Path

from branchforge.corpus import curate, load_corpus
from branchforge.evaluation import ablation_config, run_ablation_matrix

ROOT = Path(__file__).resolve().parent.parent / "runs"

logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
seeds = [int(s) for s in sys.argv[1:]] or [0, 1, 2]

corpus_dir = ROOT / "corpus"
if (corpus_dir / "manifest.json").exists():
    corpus = load_corpus(corpus_dir)
else:
    corpus = curate(seed=7, out_dir=corpus_dir)
print(f"corpus: {corpus.manifest.program_count} programs, {corpus.manifest.record_count} records")

for k in range(1, len(seeds) + 1):
    table = run_ablation_matrix(corpus, ablation_config(), seeds[:k], ROOT / "ablation")
    print(f"--- seeds {seeds[:k]}")
    print(table.to_table(), flush=True)
(ROOT / "ablation" / "table.txt").write_text(table.to_table())
