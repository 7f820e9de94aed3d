"""Train a small HM and DSNT localizer on fast-profile phantoms and compare them.

A few minutes on one CPU core.  Pass a number of training cases to change the size:

    python demos/train_small.py 60
"""

import sys
import time

import numpy as np

from antloc.evalstats import format_mre, format_sdr, mre, paired_ttest, sdr
from antloc.netgrad.train import TrainConfig, predict_voxels, train
from antloc.phantom import PhantomSpec, generate_case, split_assignment
from antloc.pipeline import case_rois, inside_roi

n_train = int(sys.argv[1]) if len(sys.argv) > 1 else 40
spec = PhantomSpec.fast(n_train=n_train, n_val=10, n_test=20)
where = {cid: k for k, ids in split_assignment(spec).items() for cid in ids}
rois = {"train": [], "val": [], "test": []}
for i in range(spec.n_cases):
    case = generate_case(spec, i)
    for s in case_rois(case, spec.roi_size):
        if inside_roi(s.pseudo_voxel, spec.roi_size):
            rois[where[case.case_id]].append(s)
print({k: len(v) for k, v in rois.items()}, "ROIs")

truth = np.stack([s.truth_voxel for s in rois["test"]])
test = np.stack([s.roi.data for s in rois["test"]])
errors = {}
for method in ("hm", "dsnt"):
    cfg = TrainConfig(method=method, epochs=8, batch_size=4, learning_rate=1e-3, head_kernel=3)
    t0 = time.perf_counter()
    res = train(cfg, rois["train"], rois["val"],
                progress=lambda e: print(f"  {method} epoch {e['epoch']}: val MRE {e['val_mre']:.2f}"))
    errors[method] = np.linalg.norm(predict_voxels(res.net, test, method) - truth, axis=1)
    print(f"{method}: {format_mre(*mre(errors[method]))} voxels | SDR {format_sdr(sdr(errors[method]))} % "
          f"({time.perf_counter() - t0:.0f}s)")
r = paired_ttest(errors["hm"], errors["dsnt"])
print(f"paired t-test HM vs DSNT: t={r.t:.3f}, p={r.p:.3f} -> {r.decision()}")
