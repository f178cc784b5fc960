"""Reference implementations written independently of the package.

Plain Python floats and ``math`` only, so that agreement with the numpy code
is evidence rather than a tautology.
"""

import math


def dot(a, b):
    return math.fsum(x * y for x, y in zip(a, b))


def softmax_attention(q, keys, values):
    """Textbook softmax attention with log-sum-exp stabilisation."""
    d = len(q)
    logits = [dot(q, k) / math.sqrt(d) for k in keys]
    top = max(logits)
    weights = [math.exp(x - top) for x in logits]
    total = math.fsum(weights)
    return [math.fsum(w * v[c] for w, v in zip(weights, values)) / total for c in range(len(values[0]))]


def softmax_weights(q, keys):
    d = len(q)
    logits = [dot(q, k) / math.sqrt(d) for k in keys]
    top = max(logits)
    w = [math.exp(x - top) for x in logits]
    total = math.fsum(w)
    return [x / total for x in w]


def expand_votes(keys, values, votes):
    """Replicate each entry ``votes`` times, the unvoted equivalent cache."""
    k2, v2 = [], []
    for k, v, p in zip(keys, values, votes):
        k2.extend([list(k)] * int(p))
        v2.extend([list(v)] * int(p))
    return k2, v2


def zip_merge_reference(keys, values, votes, scores):
    """Many-to-one ZIP merge evaluated term by term."""
    w = [p * s for p, s in zip(votes, scores)]
    sw = math.fsum(w)
    sp = sum(votes)
    denom = math.fsum(wi * math.log(s) for wi, s in zip(w, scores))
    c = math.log(sw / sp) / denom
    dim = len(keys[0])
    key = [c * math.fsum(wi * k[i] for wi, k in zip(w, keys)) for i in range(dim)]
    value = [math.fsum(wi * v[i] for wi, v in zip(w, values)) / sw for i in range(dim)]
    return key, value, sp


def ema_reference(scores, alpha):
    """Bias-corrected EMA from the closed-form weighted sum, oldest score first."""
    n = len(scores)
    smoothed = math.fsum((1 - alpha) * alpha ** (n - 1 - i) * s for i, s in enumerate(scores))
    return smoothed / (1 - alpha**n)
