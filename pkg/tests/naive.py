"""Loop-based reference implementation of the MFDMC objective.

Reads only raw parameter arrays and uses plain floats and ``math``; shares
no code with the package so it can serve as an independent oracle.
"""

import math


def softmax(row):
    top = max(row)
    ex = [math.exp(x - top) for x in row]
    s = sum(ex)
    return [x / s for x in ex]


def latent(centers, logits_row_per_view):
    out = []
    for view_centers, row in zip(centers, logits_row_per_view):
        w = softmax(row)
        b = len(view_centers[0])
        for k in range(b):
            out.append(sum(w[i] * view_centers[i][k] for i in range(len(w))))
    return out


def raw(model):
    """Nested Python lists of every parameter block."""
    bank = {s: [c.tolist() for c in model.banks[s].views] for s in ("user", "item")}
    logits = {s: [z.tolist() for z in model.logits[s]] for s in ("user", "item")}
    if model.config.use_biases:
        bias = (model.biases.mu, model.biases.user.tolist(), model.biases.item.tolist())
    else:
        bias = None
    return bank, logits, bias


def entity_latent(bank, logits, side, k):
    return latent(bank[side], [logits[side][j][k] for j in range(len(bank[side]))])


def predict(bank, logits, bias, u, i):
    p = entity_latent(bank, logits, "user", u)
    q = entity_latent(bank, logits, "item", i)
    r = sum(a * b for a, b in zip(p, q))
    if bias is not None:
        r += bias[0] + bias[1][u] + bias[2][i]
    return r


def spread(view_centers, rho):
    flat = [x for c in view_centers for x in c]
    lo, hi = min(flat), max(flat)
    if hi == lo:
        norm = [[0.0] * len(c) for c in view_centers]
    else:
        norm = [[(x - lo) / (hi - lo) for x in c] for c in view_centers]
    total = 0.0
    for a in range(len(norm)):
        for b in range(a + 1, len(norm)):
            dist = sum((x - y) ** 2 for x, y in zip(norm[a], norm[b]))
            total += max(0.0, rho - dist)
    return total


def proximity(bank, logits, side, ents):
    total = 0.0
    for k in ents:
        for j, view_centers in enumerate(bank[side]):
            w = softmax(logits[side][j][k])
            best = 0
            for i in range(len(w)):
                if w[i] > w[best]:
                    best = i
            sub = [sum(w[i] * view_centers[i][c] for i in range(len(w)))
                   for c in range(len(view_centers[0]))]
            total += sum((view_centers[best][c] - sub[c]) ** 2 for c in range(len(sub)))
    return total / len(ents)


def mapped(w, t):
    if t == 1:
        return w
    if w <= 1.0 / t:
        return t / math.e * w
    return (t * w - 1.0) / (t - 1.0) * (1.0 - 1.0 / math.e) + 1.0 / math.e


def entropy(bank, logits, side, ents, kind):
    total = 0.0
    for k in ents:
        for j in range(len(bank[side])):
            w = softmax(logits[side][j][k])
            t = len(w)
            for x in w:
                if kind == "mapped-entropy":
                    y = mapped(x, t)
                    if y > 0:
                        total -= y * math.log(y)
                elif x > 0:
                    total -= x * math.log(x / t)
    return total / len(ents)


def objective(model, users, items, ratings, eta, gamma, lam, rho, kind="mapped-entropy"):
    """Dict of every loss term, computed independently of the package."""
    bank, logits, bias = raw(model)
    users, items, ratings = list(users), list(items), list(ratings)
    ue = sorted(set(users))
    ie = sorted(set(items))
    loss3 = sum((predict(bank, logits, bias, u, i) - r) ** 2
                for u, i, r in zip(users, items, ratings)) / len(ratings)
    sp = {s: sum(spread(c, rho) for c in bank[s]) for s in ("user", "item")}
    px = {"user": proximity(bank, logits, "user", ue), "item": proximity(bank, logits, "item", ie)}
    en = {"user": entropy(bank, logits, "user", ue, kind),
          "item": entropy(bank, logits, "item", ie, kind)}
    wd = 0.0
    for side, ents, bidx in (("user", ue, 1), ("item", ie, 2)):
        acc = 0.0
        for k in ents:
            acc += sum(x * x for x in entity_latent(bank, logits, side, k))
            if bias is not None:
                acc += bias[bidx][k] ** 2
        wd += acc / len(ents)
    loss1 = sp["user"] + sp["item"] + px["user"] + px["item"]
    loss2 = en["user"] + en["item"]
    return {
        "spread_user": sp["user"], "spread_item": sp["item"],
        "proximity_user": px["user"], "proximity_item": px["item"],
        "loss1": loss1, "loss2_user": en["user"], "loss2_item": en["item"], "loss2": loss2,
        "loss3": loss3, "weight_decay": wd,
        "total": eta * loss1 + gamma * loss2 + loss3 + lam * wd,
    }
