"""Independent reference implementations the tests compare against.

Everything here is deliberately written with explicit Python loops and
plain float arithmetic, sharing no code with the package, so agreement
between the two is meaningful.
"""

import math

import numpy as np


def loop_patchify(image, patch_size):
    """One [C, H, W] image -> list of per-patch lists, grid row-major,
    each patch flattened channel-major then row-major."""
    c, h, w = image.shape
    out = []
    for gy in range(h // patch_size):
        for gx in range(w // patch_size):
            vec = []
            for ch in range(c):
                for py in range(patch_size):
                    for px in range(patch_size):
                        vec.append(float(image[ch, gy * patch_size + py, gx * patch_size + px]))
            out.append(vec)
    return out


def _ln(vec, gamma, beta, eps):
    n = len(vec)
    mean = sum(vec) / n
    var = sum((v - mean) ** 2 for v in vec) / n
    rstd = 1.0 / math.sqrt(var + eps)
    return [(v - mean) * rstd * gamma[j] + beta[j] for j, v in enumerate(vec)]


def _matvec(vec, w, b=None):
    cols = w.shape[1]
    out = [sum(vec[i] * float(w[i, j]) for i in range(len(vec))) for j in range(cols)]
    if b is not None:
        out = [out[j] + float(b[j]) for j in range(cols)]
    return out


def _softmax(row):
    m = max(row)
    exps = [math.exp(v - m) for v in row]
    s = sum(exps)
    return [e / s for e in exps]


def _gelu(v):
    return v * 0.5 * (1.0 + math.erf(v / math.sqrt(2.0)))


def loop_vit_logits(model, images):
    """Forward pass of the whole model using nothing but Python loops.

    Accepts the package's model object purely as a container of numpy
    arrays; returns [B, num_classes] float64 logits.
    """
    cfg = model.config
    d, heads, dh, eps = cfg.dim, cfg.heads, cfg.head_dim, cfg.eps
    patch_w = model.patch_w.data
    out = []
    for s in range(images.shape[0]):
        tokens = [[float(model.cls_token.data[j]) for j in range(d)]]
        for vec in loop_patchify(images[s], cfg.patch_size):
            tokens.append(_matvec(vec, patch_w, model.patch_b.data))
        for t, tok in enumerate(tokens):
            tokens[t] = [tok[j] + float(model.pos_embed.data[t, j]) for j in range(d)]

        for blk in model.blocks:
            normed = [_ln(tok, blk.ln1_gamma.data, blk.ln1_beta.data, eps) for tok in tokens]
            qkv = [_matvec(nv, blk.qkv_w.data, blk.qkv_b.data) for nv in normed]
            q = [row[0:d] for row in qkv]
            k = [row[d:2 * d] for row in qkv]
            v = [row[2 * d:3 * d] for row in qkv]
            if blk.adapters is not None:
                sc = blk.adapters.scale
                for t, nv in enumerate(normed):
                    dq = _matvec(_matvec(nv, blk.adapters.q.a.data), blk.adapters.q.b.data)
                    dv = _matvec(_matvec(nv, blk.adapters.v.a.data), blk.adapters.v.b.data)
                    q[t] = [q[t][j] + sc * dq[j] for j in range(d)]
                    v[t] = [v[t][j] + sc * dv[j] for j in range(d)]

            ctx = [[0.0] * d for _ in tokens]
            for h in range(heads):
                lo = h * dh
                for ti in range(len(tokens)):
                    scores = []
                    for tj in range(len(tokens)):
                        dot = sum(q[ti][lo + a] * k[tj][lo + a] for a in range(dh))
                        scores.append(dot / math.sqrt(dh))
                    attn = _softmax(scores)
                    for a in range(dh):
                        ctx[ti][lo + a] = sum(attn[tj] * v[tj][lo + a] for tj in range(len(tokens)))
            proj = [_matvec(cv, blk.out_w.data, blk.out_b.data) for cv in ctx]
            tokens = [[tokens[t][j] + proj[t][j] for j in range(d)] for t in range(len(tokens))]

            normed2 = [_ln(tok, blk.ln2_gamma.data, blk.ln2_beta.data, eps) for tok in tokens]
            for t, nv in enumerate(normed2):
                hidden = [_gelu(u) for u in _matvec(nv, blk.up_w.data, blk.up_b.data)]
                delta = _matvec(hidden, blk.down_w.data, blk.down_b.data)
                tokens[t] = [tokens[t][j] + delta[j] for j in range(d)]

        cls = _ln(tokens[0], model.final_gamma.data, model.final_beta.data, eps)
        out.append(_matvec(cls, model.head_w.data, model.head_b.data))
    return np.array(out, dtype=np.float64)


def loop_count(cfg, lora_rank=None, extra_blocks=0):
    """Closed-form total parameter count, written out independently."""
    d = cfg.dim
    patch_dim = cfg.patch_size * cfg.patch_size * cfg.channels
    n_patches = (cfg.image_size // cfg.patch_size) ** 2
    per_block = 12 * d * d + 13 * d
    depth = cfg.depth + extra_blocks
    total = ((patch_dim + 1) * d            # patch projection
             + d                            # class token
             + (n_patches + 1) * d          # positional table
             + depth * per_block
             + 2 * d                        # final norm
             + (d + 1) * cfg.num_classes)   # head
    if lora_rank is not None:
        total += depth * 4 * d * lora_rank
    return total


def knn_oracle(feats, labels, queries, k):
    """Brute-force double loop: cosine similarity, stable neighbor order,
    similarity-weighted vote over the labels present among the k nearest,
    ties to the smaller label."""
    feats = np.asarray(feats, dtype=np.float64)
    queries = np.asarray(queries, dtype=np.float64)
    preds = []
    for qi in range(queries.shape[0]):
        q = queries[qi]
        qn = math.sqrt(float(np.dot(q, q)))
        sims = []
        for fi in range(feats.shape[0]):
            f = feats[fi]
            fn = math.sqrt(float(np.dot(f, f)))
            s = 0.0 if qn == 0.0 else float(np.dot(q, f)) / (qn * fn)
            sims.append((s, fi))
        sims.sort(key=lambda t: (-t[0], t[1]))
        votes = {}
        for s, fi in sims[:k]:
            lab = int(labels[fi])
            votes[lab] = votes.get(lab, 0.0) + s
        best = max(votes.items(), key=lambda t: (t[1], -t[0]))
        preds.append(best[0])
    return np.array(preds, dtype=np.int64)
