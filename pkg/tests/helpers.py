"""Shared test utilities: finite-difference gradient checking and slow oracles."""

import numpy as np
from scipy import ndimage

from msop.tensor import Tensor, zero_grad


def rel_err(a: np.ndarray, n: np.ndarray) -> float:
    """Worst-case relative error with a 1e-3 absolute floor on the scale."""
    a = np.asarray(a, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    return float(np.max(np.abs(a - n) / (1e-3 + np.maximum(np.abs(a), np.abs(n)))))


def gradcheck(build_loss, params: list[Tensor], h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``build_loss`` must rebuild the scalar loss graph from the live parameter
    arrays on every call; parameters are perturbed in place one element at a
    time.
    """
    loss = build_loss()
    zero_grad(params)
    loss.backward()
    analytic = [p.grad.copy() for p in params]

    worst = 0.0
    for p, ag in zip(params, analytic):
        flat = p.data.reshape(-1)
        aflat = ag.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(build_loss().data)
            flat[i] = orig - h
            down = float(build_loss().data)
            flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            worst = max(worst, rel_err(aflat[i], numeric))
    return worst


def ms_block_loops(x: np.ndarray, c1, c2, c3, b1=None, b2=None, b3=None) -> np.ndarray:
    """Direct evaluation of the 4-slice hierarchy: y1=x1, y_i=c_{i-1}*(x_i+y_{i-1})."""
    d4 = x.shape[2] // 4
    xs = [x[:, :, i * d4:(i + 1) * d4] for i in range(4)]
    y1 = xs[0]
    y2 = conv2d_loops(xs[1], c1, bias=b1)
    y3 = conv2d_loops(xs[2] + y2, c2, bias=b2)
    y4 = conv2d_loops(xs[3] + y3, c3, bias=b3)
    return np.concatenate([y1, y2, y3, y4], axis=2)


def sop_loops(x: np.ndarray, w_d: np.ndarray, w_h: np.ndarray,
              w_w: np.ndarray) -> np.ndarray:
    """Literal index-notation evaluation of the three gated passes.

    Builds the permuted views x_h[k,j,i] = x[i,j,k] and x_w[i,k,j] = x[i,j,k],
    gates each along its channel axis, transposes back, and sums.
    """
    h, w, d = x.shape
    x_h = np.zeros((d, w, h))
    x_w = np.zeros((h, d, w))
    for i in range(h):
        for j in range(w):
            for k in range(d):
                x_h[k, j, i] = x[i, j, k]
                x_w[i, k, j] = x[i, j, k]
    z_d = np.zeros((h, w, d))
    z_h = np.zeros((d, w, h))
    z_w = np.zeros((h, d, w))
    for i in range(h):
        for j in range(w):
            for k in range(d):
                z_d[i, j, k] = w_d[k] * x[i, j, k]
                z_h[k, j, i] = w_h[i] * x_h[k, j, i]
                z_w[i, k, j] = w_w[j] * x_w[i, k, j]
    z_ht = np.zeros((h, w, d))
    z_wt = np.zeros((h, w, d))
    for i in range(h):
        for j in range(w):
            for k in range(d):
                z_ht[i, j, k] = z_h[k, j, i]
                z_wt[i, j, k] = z_w[i, k, j]
    return z_d + z_ht + z_wt


def conv2d_loops(x: np.ndarray, w: np.ndarray, stride: int = 1,
                 padding: str = "same", bias: np.ndarray | None = None) -> np.ndarray:
    """Direct-summation convolution oracle (cross-correlation, zero padding)."""
    h, wd, d_in = x.shape
    kh, kw, _, d_out = w.shape
    if padding == "same":
        oh, ow = -(-h // stride), -(-wd // stride)
        ph = max((oh - 1) * stride + kh - h, 0)
        pw = max((ow - 1) * stride + kw - wd, 0)
        pt, pl = ph // 2, pw // 2
        xp = np.pad(x, ((pt, ph - pt), (pl, pw - pl), (0, 0)))
    else:
        xp = x
        oh = (h - kh) // stride + 1
        ow = (wd - kw) // stride + 1
    out = np.zeros((oh, ow, d_out))
    for oi in range(oh):
        for oj in range(ow):
            for co in range(d_out):
                acc = 0.0
                for ki in range(kh):
                    for kj in range(kw):
                        for ci in range(d_in):
                            acc += xp[oi * stride + ki, oj * stride + kj, ci] * w[ki, kj, ci, co]
                out[oi, oj, co] = acc
    if bias is not None:
        out += bias
    return out


def brute_force_classification(preds, gts):
    """Independent confusion-matrix walk; malignant is the positive class."""
    order = ("normal", "benign", "malignant")
    confusion = {(g, p): 0 for g in order for p in order}
    for p, g in zip(preds, gts):
        confusion[(g, p)] += 1
    n = len(gts)
    correct = sum(confusion[(c, c)] for c in order)
    tp = confusion[("malignant", "malignant")]
    fn = sum(confusion[("malignant", p)] for p in order) - tp
    fp = sum(confusion[(g, "malignant")] for g in order) - tp
    tn = n - tp - fn - fp
    return {
        "accuracy": 100.0 * correct / n,
        "acc2": 100.0 * (tp + tn) / n,
        "sensitivity": 100.0 * tp / (tp + fn) if tp + fn else None,
        "specificity": 100.0 * tn / (tn + fp) if tn + fp else None,
        "confusion": [[confusion[(g, p)] for p in order] for g in order],
    }


def brute_force_detection(pred_boxes, gt_boxes):
    """Per-box center rule applied longhand, mirroring the metric contract."""
    tp = fp = fn = 0
    ious = []
    for preds, gts in zip(pred_boxes, gt_boxes):
        if not preds:
            fn += 1
            continue
        for box in preds:
            cx = (box.x_min + box.x_max) / 2.0
            cy = (box.y_min + box.y_max) / 2.0
            hit = False
            for gt in gts:
                if gt.x_min <= cx <= gt.x_max and gt.y_min <= cy <= gt.y_max:
                    hit = True
            tp += 1 if hit else 0
            fp += 0 if hit else 1
            best = 0.0
            for gt in gts:
                ix = max(0, min(box.x_max, gt.x_max) - max(box.x_min, gt.x_min))
                iy = max(0, min(box.y_max, gt.y_max) - max(box.y_min, gt.y_min))
                inter = ix * iy
                union = box.area + gt.area - inter
                best = max(best, inter / union if union else 0.0)
            ious.append(best)
    miou = 100.0 * sum(ious) / len(ious) if ious else None
    precision = 100.0 * tp / (tp + fp) if tp + fp else None
    recall = 100.0 * tp / (tp + fn) if tp + fn else None
    return miou, precision, recall


def shape_oracle(img: np.ndarray) -> str:
    """Rule-based classifier from boundary completeness and wall thickness.

    A closed wall encloses a large dark region (found by hole filling); a
    broken wall does not, which marks malignancy.  Among closed walls, the
    median radial run length of the first bright band separates thick
    (benign) from thin (normal) walls.
    """
    bright = img > 120
    filled = ndimage.binary_fill_holes(bright)
    holes = filled & ~bright
    labels, count = ndimage.label(holes)
    sizes = None
    max_hole = 0
    if count:
        sizes = ndimage.sum_labels(np.ones_like(labels), labels,
                                   index=range(1, count + 1))
        max_hole = sizes.max()
    if max_hole < 300:
        return "malignant"
    lumen = labels == (1 + int(np.argmax(sizes)))
    cy, cx = ndimage.center_of_mass(lumen)
    h, w = img.shape
    runs = []
    for ang in np.linspace(0, 2 * np.pi, 180, endpoint=False):
        dx, dy = np.cos(ang), np.sin(ang)
        r, run, started = 0.0, 0, False
        while True:
            x, y = int(round(cx + r * dx)), int(round(cy + r * dy))
            if not (0 <= x < w and 0 <= y < h):
                break
            if bright[y, x]:
                started = True
                run += 1
            elif started:
                break
            r += 0.5
        if started:
            runs.append(run * 0.5)
    return "benign" if np.median(runs) >= 4.2 else "normal"
