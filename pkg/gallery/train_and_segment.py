"""
Stream masks from image-level labels
====================================

The classifier only ever sees "is liquid pouring: yes/no".  Its class
activation map still says where the evidence was, and thresholding the
normalised map gives a mask.  This runs a short training job (a few
seconds on one core) and compares the CAM masks with the ground truth.
"""

import numpy as np

from pourcam import camseg, synthgen, trainer

desk = synthgen.SceneConfig.desk()
train_set = synthgen.make_samples(desk, 100, 100)
test_set = synthgen.make_samples(synthgen.with_seed(desk, 1000), 20, 0)

# each pair of scenes shares everything except the stream
pos, neg = train_set[0], train_set[100]
print("labels", pos.label, neg.label, " differing pixels", int(np.any(pos.image != neg.image, -1).sum()))

cfg = trainer.TrainConfig(total_iters=600, warmup_iters=100)
ckpt = trainer.train(train_set, cfg)
print("train accuracy", trainer.accuracy(ckpt.params, train_set))
m = ckpt.metrics
print("L_cls first/last 50 iters: %.3f -> %.3f" % (np.mean([r["l_cls"] for r in m[:50]]),
                                                   np.mean([r["l_cls"] for r in m[-50:]])))

# mIoU averages the two thresholds 0.5 and 0.7 over positive test scenes
report = camseg.evaluate(ckpt.cam_model(), test_set)
print("mIoU %.3f" % report.miou, {k: round(v, 3) for k, v in report.per_sigma.items()})

# one CAM at full resolution, written as 16-bit PGM next to its mask
s = test_set[0]
cam = camseg.upsample(ckpt.cam_model()(s.image), *s.gt_mask.shape)
camseg.save_cam("cam.pgm", cam)
camseg.save_mask("cam_mask.pbm", camseg.threshold_mask(cam, 0.5))
camseg.save_mask("gt_mask.pbm", s.gt_mask)
