"""Shared oracles for the test suite.

Everything here is deliberately slow and independent of the library's
vectorized implementations: nested-loop convolutions, central finite
differences, exhaustive NMS and AP. Tests compare the fast paths against
these.
"""

import numpy as np

from rrcdet.anchors import decode, regressor_bin
from rrcdet.autograd import Tensor


def conv2d_loops(x, k, b, stride=1, pad=0):
    """Direct nested-loop cross-correlation."""
    n, cin, h, w = x.shape
    cout, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for ni in range(n):
        for co in range(cout):
            for oi in range(ho):
                for oj in range(wo):
                    patch = xp[ni, :, oi * stride:oi * stride + kh,
                               oj * stride:oj * stride + kw]
                    out[ni, co, oi, oj] = (patch * k[co]).sum() + b[co]
    return out


def maxpool2d_loops(x, k, stride):
    n, c, h, w = x.shape
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    out = np.zeros((n, c, ho, wo))
    for ni in range(n):
        for ci in range(c):
            for oi in range(ho):
                for oj in range(wo):
                    out[ni, ci, oi, oj] = x[ni, ci, oi * stride:oi * stride + k,
                                            oj * stride:oj * stride + k].max()
    return out


def fd_gradient(fn, value, step=1e-5):
    """Central finite-difference gradient of scalar fn w.r.t. one array."""
    value = np.asarray(value, dtype=np.float64)
    grad = np.zeros_like(value)
    flat = value.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + step
        hi = fn(value)
        flat[i] = saved - step
        lo = fn(value)
        flat[i] = saved
        gflat[i] = (hi - lo) / (2 * step)
    return grad


def max_rel_err(a, b, floor=1e-6):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float((np.abs(a - b) / denom).max())


def loop_decoder(output, anchors, threshold, image=0):
    """Independent nested-loop reference decoder."""
    a = output.anchors_per_cell
    k = output.num_classes + 1
    r = output.regressors
    dets = []
    anchor_base = 0
    for lvl, (cls_map, reg_map) in enumerate(zip(output.cls_maps,
                                                 output.reg_maps)):
        _, _, h, w = cls_map.shape
        for i in range(h):
            for j in range(w):
                for ai in range(a):
                    idx = anchor_base + (i * w + j) * a + ai
                    anchor = anchors.boxes[idx]
                    logits = [cls_map.data[image, ai * k + c, i, j]
                              for c in range(k)]
                    exps = np.exp(np.array(logits) - max(logits))
                    probs = exps / exps.sum()
                    rbin = regressor_bin(anchor, anchors.spec, lvl)
                    off = np.array([reg_map.data[image,
                                                 (ai * r + rbin) * 4 + c, i, j]
                                    for c in range(4)])
                    box = decode(off, anchor).clip(0, 1)
                    if box[2] <= box[0] or box[3] <= box[1]:
                        continue
                    for c in range(1, k):
                        if probs[c] >= threshold:
                            dets.append((c, tuple(np.round(box, 12)),
                                         round(float(probs[c]), 12)))
        anchor_base += h * w * a
    return dets


def _iou_scalar(a, b):
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    area = lambda r: (r[2] - r[0]) * (r[3] - r[1])
    union = area(a) + area(b) - inter
    return inter / union if union > 0 else 0.0


def loop_nms(detections, threshold):
    """Exhaustive O(n^2) reference suppression."""
    kept = []
    for class_id in sorted({d.class_id for d in detections}):
        group = [d for d in detections if d.class_id == class_id]
        group.sort(key=lambda d: (-d.score, d.box[0], d.box[1], d.box[2],
                                  d.box[3], d.source))
        chosen = []
        for d in group:
            if all(_iou_scalar(d.box, kept_d.box) < threshold
                   for kept_d in chosen):
                chosen.append(d)
        kept.extend(chosen)
    return kept


def ap_oracle_exact(dets, gts, thr):
    """Brute-force AP: greedy matcher plus right-to-left envelope."""
    n_gt = sum(1 for g in gts if not g.ignore)
    order = sorted(dets, key=lambda d: (-d.score, d.box[0], d.box[1],
                                        d.box[2], d.box[3]))
    used = [False] * len(gts)
    tp = fp = 0
    points = []
    for d in order:
        cands = [(gi, _iou_scalar(d.box, g.box)) for gi, g in enumerate(gts)]
        cands = [(gi, ov) for gi, ov in cands if ov >= thr]
        real = [(ov, gi) for gi, ov in cands if not gts[gi].ignore
                and not used[gi]]
        if real:
            _, gi = max(real)
            used[gi] = True
            tp += 1
        elif any(gts[gi].ignore for gi, _ in cands):
            continue
        else:
            fp += 1
        points.append((tp / n_gt, tp / (tp + fp)))

    points_sorted = sorted(points)
    envelope = []
    running = 0.0
    for r, p in reversed(points_sorted):
        running = max(running, p)
        envelope.append((r, running))
    envelope.reverse()
    ap = 0.0
    prev = 0.0
    for r, p in envelope:
        if r > prev:
            ap += (r - prev) * p
            prev = r
    return ap


def check_op_gradients(make_inputs, apply_op, n_trials=3, seed=0, tol=1e-4,
                       step=1e-5):
    """Finite-difference check of an op w.r.t. each of its tensor inputs.

    ``make_inputs(rng)`` returns a list of numpy arrays; ``apply_op`` maps
    the same number of Tensors to a single output Tensor. The scalar probe
    is a fixed random weighting of the output so every element matters.
    Returns the worst relative error over trials and inputs.
    """
    worst = 0.0
    for trial in range(n_trials):
        rng = np.random.default_rng(seed + trial)
        values = make_inputs(rng)
        probe = None

        def scalar(*arrays):
            nonlocal probe
            out = apply_op(*[Tensor(v) for v in arrays])
            if probe is None:
                probe = rng.standard_normal(out.shape)
            return float((out.data * probe).sum())

        tensors = [Tensor(v, requires_grad=True) for v in values]
        out = apply_op(*tensors)
        scalar(*values)  # fixes the probe
        loss_val = (out.data * probe).sum()
        assert np.isfinite(loss_val)
        from rrcdet.autograd import sum_all, mul
        loss = sum_all(mul(out, probe))
        loss.backward()

        for pos, value in enumerate(values):
            def partial(v, pos=pos):
                args = list(values)
                args[pos] = v
                return scalar(*args)

            numeric = fd_gradient(partial, value.copy(), step=step)
            worst = max(worst, max_rel_err(tensors[pos].grad, numeric))
    assert worst < tol, f"gradient mismatch: worst rel err {worst:.3e}"
    return worst
