"""Walk through the prior ablation at desk scale.

Each row removes or narrows part of the prior branch:

    adapter   adapters see no prior at all
    msd       multi-kernel convolutions, no Mamba interaction
    full      multi-kernel convolutions with Mamba channel gating
    uni3/5/7  Mamba gating over a single kernel size

A row trains for about two minutes per seed on one core. The default runs
three rows on one seed; pass --rows all --seeds 0,1,2 for the full table.

    python3 demos/ablation_story.py --rows adapter,msd,full
"""
import argparse

from smamba.experiments import ABLATION_ROWS, desk_data, median, two_stage_run

parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
parser.add_argument("--rows", default="adapter,msd,full")
parser.add_argument("--seeds", default="0")
args = parser.parse_args()
rows = ABLATION_ROWS if args.rows == "all" else tuple(args.rows.split(","))
seeds = [int(s) for s in args.seeds.split(",")]

data = {s: desk_data(s) for s in seeds}
table = {}
for row in rows:
    for seed in seeds:
        r = two_stage_run(row, seed, data=data[seed])
        table.setdefault(row, []).append(r)
        print(f"{row:8s} seed {seed}: pseudo {r.mdice_stage1:.3f} -> decoder {r.mdice_stage2:.3f}, unseen {r.mdice_unseen:.3f} ({r.seconds:.0f}s)")

print("\nrow       median seen mDice  median unseen drop")
for row, runs in table.items():
    seen = median([r.mdice_stage2 for r in runs])
    drop = median([r.mdice_stage2 - r.mdice_unseen for r in runs])
    print(f"{row:8s}  {seen:17.3f}  {drop:18.3f}")
