"""Run a handful of presets over three seeds and print the comparison table.

Takes a couple of minutes single-threaded.
"""
import sys
import tempfile
from pathlib import Path

from domainmix.experiment import RunSpec, compare_presets, run_experiment
from domainmix.synthgen import BenchmarkSpec
from domainmix.train import TrainConfig

presets = sys.argv[1:] or ["dbscan", "dbscan_icq", "no_db", "only_A", "domainmix_unlabeled"]
out = Path(tempfile.mkdtemp(prefix="domainmix_"))

paths = []
for name in presets:
    agg = run_experiment(RunSpec(BenchmarkSpec(), TrainConfig(), name, str(out), (0, 1, 2)))
    print(name, "%.4f" % agg["median_mAP"])
    paths.append(str(out / name / "aggregate.json"))

print()
print(compare_presets(paths, baseline=presets[0]))
print("artifacts in", out)
