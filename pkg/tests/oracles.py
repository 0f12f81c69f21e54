"""Independent brute-force reference implementations used by the tests.

Everything here is written with plain Python loops and sets so it shares no
code path with the vectorized library versions.
"""
from fractions import Fraction

IGNORE = 255


def confusion_loop(pairs, n):
    """Per-pixel tally over (pred, gt) label map pairs given as nested lists."""
    counts = [[0] * n for _ in range(n)]
    for pred, gt in pairs:
        for prow, grow in zip(pred, gt):
            for p, g in zip(prow, grow):
                if g == IGNORE:
                    continue
                counts[int(g)][int(p)] += 1
    return counts


def iou_sets(pairs, n):
    """Per-class |pred ∩ gt| / |pred ∪ gt| from pixel coordinate sets; None if the union is empty."""
    out = []
    for c in range(n):
        P, G = set(), set()
        for k, (pred, gt) in enumerate(pairs):
            for y, (prow, grow) in enumerate(zip(pred, gt)):
                for x, (p, g) in enumerate(zip(prow, grow)):
                    if g == IGNORE:
                        continue
                    if p == c:
                        P.add((k, y, x))
                    if g == c:
                        G.add((k, y, x))
        union = P | G
        out.append(Fraction(len(P & G), len(union)) if union else None)
    return out


def miou_sets(pairs, n, include_background=True):
    vals = [float(v) for c, v in enumerate(iou_sets(pairs, n))
            if v is not None and (include_background or c > 0)]
    return sum(vals) / len(vals)


def pixel_accuracy_loop(pairs):
    right = total = 0
    for pred, gt in pairs:
        for prow, grow in zip(pred, gt):
            for p, g in zip(prow, grow):
                if g == IGNORE:
                    continue
                total += 1
                right += int(p == g)
    return right / total


def mean_accuracy_loop(pairs, n, include_background=True):
    accs = []
    for c in range(n if include_background else n - 1):
        c = c if include_background else c + 1
        hit = seen = 0
        for pred, gt in pairs:
            for prow, grow in zip(pred, gt):
                for p, g in zip(prow, grow):
                    if g == c:
                        seen += 1
                        hit += int(p == c)
        if seen:
            accs.append(hit / seen)
    return sum(accs) / len(accs)


def f1_counts(y_true, y_pred):
    """Per-class F1 via explicit TP/FP/FN counting, plus the macro mean over
    classes with at least one positive label."""
    n_cls = len(y_true[0])
    per = []
    for c in range(n_cls):
        tp = fp = fn = 0
        for t, p in zip(y_true, y_pred):
            if t[c] and p[c]:
                tp += 1
            elif p[c]:
                fp += 1
            elif t[c]:
                fn += 1
        prec = Fraction(tp, tp + fp) if tp + fp else Fraction(0)
        rec = Fraction(tp, tp + fn) if tp + fn else Fraction(0)
        per.append(2 * prec * rec / (prec + rec) if prec + rec else Fraction(0))
    present = [c for c in range(n_cls) if any(t[c] for t in y_true)]
    per = [float(v) for v in per]
    macro = sum(per[c] for c in present) / len(present) if present else 0.0
    return per, macro


def balance_resimulate(records, counts, cap, seed):
    """Replay the greedy downsampling procedure step by step.

    ``records`` is a list of label sets; returns the list of kept indices.
    """
    import numpy as np
    rng = np.random.default_rng(seed)
    counts = dict(counts)
    alive = list(range(len(records)))
    for c in sorted(counts, key=lambda k: (-counts[k], k)):
        if counts[c] <= cap:
            continue
        cands = [i for i in alive if c in records[i]]
        perm = rng.permutation(len(cands))
        for j in perm:
            if counts[c] <= cap:
                break
            i = cands[j]
            if min(counts[l] for l in records[i]) > cap:
                alive.remove(i)
                for l in records[i]:
                    counts[l] -= 1
    return alive
