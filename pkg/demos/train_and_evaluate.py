"""Train the joint model and the text-only baseline, then score both.

Curates a small corpus, trains the graph+language model and the baseline that
only sees "Not available" in the graph section, and runs branch-targeted
inference on the held-out programs.  The ground-truth oracle row shows the
ceiling the harness can certify.

    python demos/train_and_evaluate.py            # 60 programs, 400 steps
    python demos/train_and_evaluate.py 200 2000   # default corpus size, full run
"""

import sys
import tempfile

from branchforge.corpus import curate
from branchforge.evaluation import ModelGenerator, OracleGenerator, run_targeted_inference
from branchforge.trainer import TrainConfig, train, train_ft_baseline

programs = int(sys.argv[1]) if len(sys.argv) > 1 else 60
steps = int(sys.argv[2]) if len(sys.argv) > 2 else 400

corpus = curate(seed=7, count=programs)
test_programs = corpus.split_programs("test")
print(f"{programs} programs, {corpus.manifest.record_count} records, "
      f"{len(corpus.split('test'))} held-out targets in {len(test_programs)} programs")

rows = {"oracle": run_targeted_inference(OracleGenerator(), corpus, test_programs).report}
config = TrainConfig(steps=steps, lr=1e-3, val_every=max(steps // 4, 1))
with tempfile.TemporaryDirectory() as tmp:
    for label, fn in (("joint (attention)", train), ("text-only", train_ft_baseline)):
        report, model = fn(corpus, config, out_dir=tmp)
        print(f"{label}: trained {steps} steps in {report.wall_time:.0f}s, best val step {report.best_step}")
        result = run_targeted_inference(ModelGenerator(model, corpus), corpus, test_programs)
        rows[label] = result.report
        for branch, outcome in result.scored[:3]:
            print(f"    {outcome.record_id:<28} {outcome.test_source[:60]}")

print(f"\n{'':<20}{'BranchAcc':>10}{'Overlap':>10}{'Pass@1':>10}{'BranchCov':>10}")
for label, r in rows.items():
    print(f"{label:<20}{r.branch_acc:>10.3f}{r.branch_overlap:>10.3f}{r.pass_at_1:>10.3f}{r.branch_cov:>10.3f}")
