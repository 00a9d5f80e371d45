"""Loop-based re-implementation of the classifier forward pass, used as a test oracle.

Written independently of the vectorised code: one message at a time, one
head at a time, plain Python sums for attention.
"""

import math

import numpy as np


def _ln(x, gamma, beta, eps=1e-5):
    mu = sum(x) / len(x)
    var = sum((xi - mu) ** 2 for xi in x) / len(x)
    return [(xi - mu) / math.sqrt(var + eps) * g + b for xi, g, b in zip(x, gamma, beta)]


def _matvec(w, x):
    return [sum(wij * xj for wij, xj in zip(row, x)) for row in w]


def _dense(layer, x):
    z = [zi + bi for zi, bi in zip(_matvec(layer.weight.value, x), layer.bias.value)]
    return [max(zi, 0.0) for zi in z] if layer.activation == "relu" else z


def _encoder_layer(layer, xs, pad):
    n_heads, dh = layer.n_heads, layer.d_head
    q = [_matvec(layer.wq.value, x) for x in xs]
    k = [_matvec(layer.wk.value, x) for x in xs]
    v = [_matvec(layer.wv.value, x) for x in xs]
    keys = [j for j, p in enumerate(pad) if not p]
    out = []
    for i, x in enumerate(xs):
        merged = []
        for h in range(n_heads):
            sl = slice(h * dh, (h + 1) * dh)
            scores = {j: sum(a * b for a, b in zip(q[i][sl], k[j][sl])) / math.sqrt(dh) for j in keys}
            top = max(scores.values())
            e = {j: math.exp(s - top) for j, s in scores.items()}
            z = sum(e.values())
            merged.extend(sum(e[j] / z * v[j][sl][c] for j in keys) for c in range(dh))
        att = _matvec(layer.wo.value, merged)
        y = _ln([a + b for a, b in zip(x, att)], layer.ln1.gamma.value, layer.ln1.beta.value)
        f = _dense(layer.ff2, _dense(layer.ff1, y))
        out.append(_ln([a + b for a, b in zip(y, f)], layer.ln2.gamma.value, layer.ln2.beta.value))
    return out


def text_cls(block, tokens, pad):
    xs = [list(block.emb.table.value[t] + block.pos.table.value[i]) for i, t in enumerate(tokens)]
    for layer in block.layers:
        xs = _encoder_layer(layer, xs, pad)
    return xs[0]


def text_logits(block, tokens, pad):
    return _dense(block.head, text_cls(block, tokens, pad))


def meta_out(block, v):
    return _dense(block.fc2, _dense(block.fc1, list(v)))


def classifier_logits(model, tokens, pad, feats):
    outs = []
    if model.text_block is not None:
        outs.append(text_logits(model.text_block, tokens, pad))
    if model.meta_block is not None:
        outs.append(meta_out(model.meta_block, feats))
    comb = model.combine
    if comb.kind == "average":
        if comb.average_probs:
            probs = []
            for o in outs:
                e = [math.exp(x - max(o)) for x in o]
                probs.append([x / sum(e) for x in e])
            return [math.log(sum(p[c] for p in probs) / len(probs)) for c in range(len(outs[0]))]
        return [sum(o[c] for o in outs) / len(outs) for c in range(len(outs[0]))]
    x = [xi for o in outs for xi in o]
    for layer in comb.layers:
        x = _dense(layer, x)
    return x


def predict_label(model, tokens, pad, feats):
    logits = classifier_logits(model, tokens, pad, feats)
    best = max(logits)
    return logits.index(best), np.array(logits)
