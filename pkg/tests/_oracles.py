"""Independent reference implementations used as test oracles.

Everything here is written straight-line with explicit loops or plain
numpy, deliberately sharing no code with the package under test.
"""

from __future__ import annotations

import numpy as np


def fd_gradient(f, arrays: dict[str, np.ndarray], h: float = 1e-5) -> dict[str, np.ndarray]:
    """Central finite differences of a scalar function of named arrays.

    ``f`` is called with a dict of arrays and must return a float.  Each
    entry of each array is perturbed by +/- h in turn.
    """
    grads = {}
    for name, base in arrays.items():
        g = np.zeros_like(base, dtype=np.float64)
        flat = base.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            up = f(arrays)
            flat[i] = keep - h
            down = f(arrays)
            flat[i] = keep
            gflat[i] = (up - down) / (2.0 * h)
        grads[name] = g
    return grads


def reference_step_backward(t: float) -> float:
    """Piecewise surrogate derivative factor, scalar version."""
    a = abs(t)
    if a < 0.4:
        return 2.0 - 4.0 * a
    if a <= 1.0:
        return 0.4
    return 0.0


def reference_softmax(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def reference_layernorm(x: np.ndarray, scale: np.ndarray, shift: np.ndarray,
                        eps: float = 1e-5) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * scale + shift


def confusion_counts(gold, pred, n_labels: int) -> np.ndarray:
    """Brute-force confusion matrix, rows = gold, cols = predicted."""
    m = np.zeros((n_labels, n_labels), dtype=np.int64)
    for g, p in zip(gold, pred):
        m[int(g), int(p)] += 1
    return m


def reference_accuracy(gold, pred) -> float:
    hits = sum(1 for g, p in zip(gold, pred) if int(g) == int(p))
    return hits / len(gold)


def reference_macro_f1(gold, pred, n_labels: int) -> float:
    m = confusion_counts(gold, pred, n_labels)
    scores = []
    for k in range(n_labels):
        tp = m[k, k]
        fp = m[:, k].sum() - tp
        fn = m[k, :].sum() - tp
        if tp == 0 and (fp > 0 or fn > 0):
            scores.append(0.0)
        elif tp == 0:
            scores.append(0.0)  # class absent from both gold and pred
        else:
            precision = tp / (tp + fp)
            recall = tp / (tp + fn)
            scores.append(2.0 * precision * recall / (precision + recall))
    return float(np.mean(scores))


def reference_jaccard(qa: np.ndarray, qb: np.ndarray) -> float:
    qa = np.asarray(qa) != 0
    qb = np.asarray(qb) != 0
    union = np.logical_or(qa, qb).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(qa, qb).sum() / union)


def reference_cosine(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.sqrt((a * a).sum())
    nb = np.sqrt((b * b).sum())
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float((a * b).sum() / (na * nb))


def plug_in_mutual_information(xs, ys) -> float:
    """Plug-in estimate of I(X; Y) in nats from paired samples."""
    xs = list(xs)
    ys = list(ys)
    n = len(xs)
    joint: dict[tuple, int] = {}
    px: dict = {}
    py: dict = {}
    for x, y in zip(xs, ys):
        joint[(x, y)] = joint.get((x, y), 0) + 1
        px[x] = px.get(x, 0) + 1
        py[y] = py.get(y, 0) + 1
    mi = 0.0
    for (x, y), c in joint.items():
        pxy = c / n
        mi += pxy * np.log(pxy / ((px[x] / n) * (py[y] / n)))
    return float(mi)


def reference_adam_steps(grad_fn, x0: np.ndarray, lr: float, n_steps: int,
                         beta1: float = 0.9, beta2: float = 0.999,
                         eps: float = 1e-8) -> list[np.ndarray]:
    """Bias-corrected Adam trajectory on a fixed learning rate."""
    x = np.array(x0, dtype=np.float64)
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    out = []
    for t in range(1, n_steps + 1):
        g = grad_fn(x)
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        mhat = m / (1 - beta1 ** t)
        vhat = v / (1 - beta2 ** t)
        x = x - lr * mhat / (np.sqrt(vhat) + eps)
        out.append(x.copy())
    return out
