"""Walk one phantom case through stage 1 and the heatmap/DSNT machinery.

    python demos/phantom_walkthrough.py
"""

import numpy as np

from antloc.heatmap import dsnt_extract, hard_argmax, render_gaussian_target, softmax_normalize
from antloc.phantom import PhantomSpec, generate_case
from antloc.pipeline import case_rois
from antloc.volume import Landmark, normalized_to_voxel

spec = PhantomSpec.fast(n_train=1, n_val=0, n_test=0)
case = generate_case(spec, 0)
print(f"case {case.case_id}: head {case.volume.shape}, spacing {case.volume.spacing_mm} mm")
for side in ("right", "left"):
    err = np.linalg.norm(case.pseudo[side].array() - case.truth[side].array())
    print(f"  {side:5s} truth {np.round(case.truth[side].array(), 2)} mm, pseudo-label off by {err:.2f} mm")

# stage 1: threshold, components, crop; the left ROI is mirrored into the right-side frame
for s in case_rois(case, spec.roi_size):
    print(f"{s.key}: ROI origin {s.box.origin_voxel}, flipped={s.box.flipped_x}, "
          f"target at ROI voxel {np.round(s.truth_voxel, 2)}")
    # map back through un-flip/un-crop and check the round trip
    back = s.to_world(s.truth_voxel)
    print(f"    round trip error {np.linalg.norm(back - case.truth[s.side].array()):.1e} mm")

    # the two decoders on an ideal Gaussian target
    target = render_gaussian_target(Landmark("t", "voxel", s.truth_voxel), s.roi.shape)
    peak = hard_argmax(target).array()
    soft = normalized_to_voxel(dsnt_extract(softmax_normalize(np.log(target.data + 1e-12))).array(), s.roi.shape)
    print(f"    argmax {peak}, DSNT expectation {np.round(soft, 2)}")
