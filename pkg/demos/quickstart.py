"""Walk one MiniLang program through the data pipeline.

Parses the program, builds its code property graph, enumerates execution
branches, finds a witness test for each feasible branch by brute force, and
shows the prompt a model would see for one of them.

    python demos/quickstart.py
"""

from branchforge.corpus import GenerationConfig, render_prompt, synthesize_tests
from branchforge.cpg import RELATIONS, build_cpg, derive_branch_mask
from branchforge.executor import enumerate_branches
from branchforge.minilang import parse_program

SOURCE = """\
def grade(score, bonus):
  total = score + bonus
  if total < 0:
    return 0
  elif total < 5:
    return 1
  while total < 8:
    total = total + 2
  return total
"""

tree, program = parse_program(SOURCE, "grade")
cpg = build_cpg(tree, program)
print(f"{len(cpg.nodes)} graph nodes; edges per relation:",
      {name: len(edges) for name, edges in zip(RELATIONS, cpg.edges_by_relation)})

branches = enumerate_branches(cpg, loop_bound=2)
print(f"\n{len(branches.branches)} statically enumerated branches (loop bound 2):")
for b in branches:
    print(f"  {b.branch_id}  lines {list(b.line_path)}")

pairs, infeasible = synthesize_tests(program, branches, GenerationConfig())
print(f"\n{len(pairs)} feasible, {len(infeasible)} without a witness in the input domain:")
for branch, test in pairs:
    print(f"  {test.source_text:<28} covers lines {sorted(branch.line_set)}")

branch, test = pairs[-1]
mask = derive_branch_mask(cpg, branch.line_set)
print(f"\nbranch mask selects {mask.active_count} of {len(cpg.nodes)} nodes")
print("\nprompt for that branch:\n")
print(render_prompt(program, branch, mask_available=mask.available))
print("target:", test.source_text)
