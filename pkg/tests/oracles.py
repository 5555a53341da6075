"""Independent brute-force reference implementations used by the metric tests."""
import math


def iou_loops(a, b):
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def wrapped(a, b):
    d = abs(a - b)
    while d >= 360.0:
        d -= 360.0
    return 360.0 - d if d > 180.0 else d


def aop_count(pred, gt, angle, iou_thr=0.7):
    hits = 0
    for p, g in zip(pred, gt):
        if iou_loops(p.bbox, g.bbox) > iou_thr and wrapped(p.azimuth, g.azimuth) <= angle:
            hits += 1
    return hits, len(pred)


def apk_count(pred, gt, box, alpha=0.1):
    """Per-keypoint (correct, scored) counts for one instance, in pure Python."""
    thr = alpha * max(box[2] - box[0], box[3] - box[1])
    out = []
    for (pu, pv), (gu, gv) in zip(pred, gt):
        if math.isnan(gu) or math.isnan(gv):
            out.append((0, 0))
            continue
        err = math.hypot(pu - gu, pv - gv)
        out.append((1 if err <= thr else 0, 1))
    return out


def hausdorff_loops(A, B):
    def directed(P, Q):
        worst = 0.0
        for p in P:
            best = math.inf
            for q in Q:
                best = min(best, math.sqrt(sum((x - y) ** 2 for x, y in zip(p, q))))
            worst = max(worst, best)
        return worst
    return max(directed(A, B), directed(B, A))
