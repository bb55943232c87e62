"""Independent reference implementations used only by the tests.

They share no code with the package: plain loops, scipy.signal, or
exhaustive enumeration.
"""

import itertools

import numpy as np
from scipy import signal


def loop_conv2d(x, w, b=None, rate=1, pad=(0, 0, 0, 0)):
    """Dilated cross-correlation by explicit tap loops. x: N,C,H,W; w: O,C,k,k."""
    x = np.pad(np.asarray(x, np.float64), ((0, 0), (0, 0), pad[:2], pad[2:]))
    w = np.asarray(w, np.float64)
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    span = (k - 1) * rate + 1
    ho, wo = h - span + 1, wd - span + 1
    out = np.zeros((n, o, ho, wo))
    for ky in range(k):
        for kx in range(k):
            patch = x[:, :, ky * rate: ky * rate + ho, kx * rate: kx * rate + wo]
            out += np.einsum("nchw,oc->nohw", patch, w[:, :, ky, kx])
    if b is not None:
        out += np.asarray(b, np.float64)[None, :, None, None]
    return out


def scipy_dense_valid(x, w_dense):
    """Valid dense cross-correlation via scipy.signal, channel by channel."""
    x = np.asarray(x, np.float64)
    w_dense = np.asarray(w_dense, np.float64)
    n, c = x.shape[:2]
    o = w_dense.shape[0]
    outs = []
    for i in range(n):
        per_o = []
        for j in range(o):
            acc = sum(signal.correlate2d(x[i, ci], w_dense[j, ci], mode="valid") for ci in range(c))
            per_o.append(acc)
        outs.append(per_o)
    return np.array(outs)


def zero_stuff_transposed(x, w, stride):
    """Transposed conv as zero-stuffing followed by a full dense convolution, then symmetric crop.

    x: N,C,H,W; w: C,O,k,k.
    """
    x = np.asarray(x, np.float64)
    w = np.asarray(w, np.float64)
    n, c, h, wd = x.shape
    _, o, k, _ = w.shape
    stuffed = np.zeros((n, c, (h - 1) * stride + 1, (wd - 1) * stride + 1))
    stuffed[:, :, ::stride, ::stride] = x
    full = np.zeros((n, o, stuffed.shape[2] + k - 1, stuffed.shape[3] + k - 1))
    for i in range(n):
        for j in range(o):
            for ci in range(c):
                full[i, j] += signal.convolve2d(stuffed[i, ci], w[ci, j], mode="full")
    crop = (k - stride) // 2
    return full[:, :, crop: crop + h * stride, crop: crop + wd * stride]


def adam_scalar(grad_fn, x0, lr, steps, b1=0.9, b2=0.999, eps=1e-8):
    """Textbook Adam on a python float."""
    x, m, v = float(x0), 0.0, 0.0
    for t in range(1, steps + 1):
        g = grad_fn(x)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        x -= lr * mhat / (vhat ** 0.5 + eps)
    return x


def mask_iou(a, b):
    inter = np.logical_and(a, b).sum()
    union = np.logical_or(a, b).sum()
    return inter / union if union else 0.0


def brute_force_matching(pred_masks, scores, gt_masks, t):
    """Score-priority optimal assignment by exhaustive enumeration.

    Among all injective partial assignments proposal -> gt with IoU >= t, picks
    the one whose per-proposal (IoU, -gt index) sequence, read in score order,
    is lexicographically largest. Returns per-ranked-proposal TP flags and the
    set of matched gts.
    """
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    ious = [[mask_iou(pred_masks[p], g) for g in gt_masks] for p in order]
    n_g = len(gt_masks)
    best_key, best = None, None
    options = [[None] + [j for j in range(n_g) if ious[r][j] >= t] for r in range(len(order))]
    for combo in itertools.product(*options):
        used = [j for j in combo if j is not None]
        if len(used) != len(set(used)):
            continue
        key = tuple((-1.0, 0) if j is None else (ious[r][j], -j) for r, j in enumerate(combo))
        if best_key is None or key > best_key:
            best_key, best = key, combo
    tp = [j is not None for j in best] if best is not None else []
    return tp, {j for j in (best or []) if j is not None}


def pr_auc_all_points(tp_flags, n_gt):
    """AP by explicit PR-point enumeration with the precision envelope."""
    points = []
    tp = fp = 0
    for f in tp_flags:
        tp += f
        fp += not f
        points.append((tp / n_gt, tp / (tp + fp)))
    ap, prev_r = 0.0, 0.0
    for i, (r, _) in enumerate(points):
        p_env = max(p for _, p in points[i:])
        ap += (r - prev_r) * p_env
        prev_r = r
    return ap


def footprint_by_dilation(offsets_per_layer, unit):
    """1-D footprint by repeated set expansion over explicit tap offsets (top layer last)."""
    current = {unit}
    for offsets in reversed(offsets_per_layer):
        current = {u + o for u in current for o in offsets}
    return current


def box(shape, y0, x0, y1, x1):
    m = np.zeros(shape, bool)
    m[y0:y1, x0:x1] = True
    return m


def random_case(rng, n_p=None, n_g=None, size=16):
    """Random rectangles as gts, plus jittered copies and strays as scored proposals."""
    n_p = int(rng.integers(0, 6)) if n_p is None else n_p
    n_g = int(rng.integers(0, 6)) if n_g is None else n_g

    def rect():
        y0, x0 = rng.integers(0, size - 1, 2)
        h, w = rng.integers(1, 7, 2)
        return box((size, size), y0, x0, min(size, y0 + h), min(size, x0 + w))

    gts = [rect() for _ in range(n_g)]
    preds = []
    for _ in range(n_p):
        if gts and rng.random() < 0.6:
            # jitter a gt so IoUs land across the whole threshold range
            g = gts[int(rng.integers(len(gts)))]
            preds.append(np.roll(g, tuple(rng.integers(-2, 3, 2)), axis=(0, 1)) | (rng.random((size, size)) < 0.02))
        else:
            preds.append(rect())
    # coarse scores so ties occur
    scores = list(rng.integers(0, 4, n_p) / 4 + 0.1)
    return preds, scores, gts
