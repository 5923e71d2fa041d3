"""Independent brute-force reference implementations used as test oracles.

Everything here is written as plain per-pixel Python loops over numpy arrays,
deliberately sharing no code path with the package implementations.
"""

import math

import numpy as np

IGNORE = 255


def pce_pixel_loop(probs, labels, ignore=IGNORE, clamp=1e-8):
    """Mean -log p(true class) over annotated pixels; 0 if none annotated."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    total, count = 0.0, 0
    n_batch, _, height, width = probs.shape
    for n in range(n_batch):
        for i in range(height):
            for j in range(width):
                cls = int(labels[n, i, j])
                if cls == ignore:
                    continue
                p = min(max(float(probs[n, cls, i, j]), clamp), 1.0)
                total += -math.log(p)
                count += 1
    return total / count if count else 0.0


def soft_dice_loop(probs, labels, reliable, smooth=1e-5):
    """Class-averaged soft Dice loss with sums restricted to reliable pixels."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    reliable = np.asarray(reliable, dtype=bool)
    if not reliable.any():
        return 0.0
    n_batch, num_classes, height, width = probs.shape
    terms = []
    for cls in range(num_classes):
        p_sum = g_sum = inter = 0.0
        for n in range(n_batch):
            for i in range(height):
                for j in range(width):
                    if not reliable[n, i, j]:
                        continue
                    p = float(probs[n, cls, i, j])
                    g = 1.0 if int(labels[n, i, j]) == cls else 0.0
                    p_sum += p
                    g_sum += g
                    inter += p * g
        if p_sum + g_sum == 0.0:
            continue
        terms.append((2.0 * inter + smooth) / (p_sum + g_sum + smooth))
    if not terms:
        return 0.0
    return 1.0 - sum(terms) / len(terms)


def prp_scan(probs, threshold):
    """Per-pixel reliability scan; argmax ties resolved to the lowest index."""
    probs = np.asarray(probs, dtype=np.float64)
    n_batch, num_classes, height, width = probs.shape
    labels = np.zeros((n_batch, height, width), dtype=np.int64)
    reliable = np.zeros((n_batch, height, width), dtype=bool)
    for n in range(n_batch):
        for i in range(height):
            for j in range(width):
                best_cls, best_p = 0, float(probs[n, 0, i, j])
                for cls in range(1, num_classes):
                    p = float(probs[n, cls, i, j])
                    if p > best_p:
                        best_cls, best_p = cls, p
                labels[n, i, j] = best_cls
                reliable[n, i, j] = best_p >= threshold
    return labels, reliable


def dice_count_loop(pred, true, num_classes):
    """Per-foreground-class Dice by explicit counting; absent-both excluded."""
    pred = np.asarray(pred).reshape(-1)
    true = np.asarray(true).reshape(-1)
    per_class = {}
    for cls in range(1, num_classes):
        p_count = t_count = overlap = 0
        for a, b in zip(pred.tolist(), true.tolist()):
            if a == cls:
                p_count += 1
            if b == cls:
                t_count += 1
            if a == cls and b == cls:
                overlap += 1
        if p_count + t_count == 0:
            continue
        per_class[cls] = 2.0 * overlap / (p_count + t_count)
    return per_class


def flood_fill_escapes(dense_mask, source_class, barrier_class):
    """True if an 8-connected walk from `source_class` pixels can reach the
    image border or a background pixel without stepping on `barrier_class`."""
    dense_mask = np.asarray(dense_mask)
    height, width = dense_mask.shape
    passable = dense_mask != barrier_class
    stack = [tuple(p) for p in np.argwhere(dense_mask == source_class)]
    seen = set(stack)
    while stack:
        y, x = stack.pop()
        if y in (0, height - 1) or x in (0, width - 1):
            return True
        if dense_mask[y, x] == 0:
            return True
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                ny, nx = y + dy, x + dx
                if (ny, nx) in seen or not (0 <= ny < height and 0 <= nx < width):
                    continue
                if passable[ny, nx]:
                    seen.add((ny, nx))
                    stack.append((ny, nx))
    return False
