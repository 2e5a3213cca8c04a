# Masks, run-length codes and the two benchmark scores.

from affordkit.core import CategoryLabel
from affordkit.maskops import BBox, BinaryMask, rasterize_box, rle_encode, rle_decode, rle_iou
from affordkit.metrics import EvalSample, compute_ciou, compute_giou

# a 10x10 ground truth covering the first 8 columns
gt = rasterize_box(BBox(0, 0, 8, 10), 10, 10)
pred = rasterize_box(BBox(0, 0, 5, 4), 10, 10)

gt_rle = rle_encode(gt)
print("gt counts:", gt_rle.counts)  # column-major, starts with a zero run
assert rle_decode(gt_rle) == gt

r = rle_iou(gt_rle, rle_encode(pred))
print("intersection", r.intersection, "union", r.union, "iou", r.iou)

# second sample: the predictor returned nothing
gt2 = rasterize_box(BBox(0, 0, 10, 2), 10, 10)
empty = BinaryMask.zeros(10, 10)

samples = [
    EvalSample("a", gt_rle, rle_encode(pred), CategoryLabel("wok")),
    EvalSample("b", rle_encode(gt2), rle_encode(empty), CategoryLabel("wok")),
]
# mean of per-sample IoU vs pooled ratio
print("gIoU", compute_giou(samples))  # (0.25 + 0) / 2
print("cIoU", compute_ciou(samples))  # 20 / (80 + 20)
