"""Independent straight-line reference implementations used as test oracles.

Everything here works on Python floats with explicit loops so that it shares
no vectorized code path with the package under test.
"""

import math

import numpy as np

from covadapt import adapters as A
from covadapt import backbone as bb
from covadapt.nn import RngStream


# ---------------------------------------------------------------- dense pieces


def matvec(x, w):
    """Row vector ``x`` times matrix ``w``."""
    return [sum(x[i] * w[i][j] for i in range(len(x))) for j in range(len(w[0]))]


def relu(v):
    return [a if a > 0 else 0.0 for a in v]


def ffn(x, w1, b1, w2, b2):
    h = relu([a + b for a, b in zip(matvec(x, w1), b1)])
    return [a + b for a, b in zip(matvec(h, w2), b2)]


def block(arch, p, prefix, base, cov, point=None):
    """Residual term of one injection block for a single position."""
    g = lambda k: p[prefix + k].tolist()
    base, cov = list(base), list(cov) if cov is not None else None
    if arch is A.Arch.LINEAR2:
        pre = matvec(base, g("w_base")) + matvec(cov, g("w_cov"))
    elif arch is A.Arch.NO_COV:
        pre = matvec(base, g("w_base"))
    elif arch is A.Arch.POINT:
        pre = matvec(base, g("w_base")) + matvec(cov, g("w_cov")) + matvec([point], g("w_point"))
    elif arch is A.Arch.ONE_LINEAR:
        pre = matvec(base + cov, g("w_ol"))
    else:
        pre = base + cov
    z = pre if arch is A.Arch.NO_LINEAR_NO_RELU else relu(pre)
    return ffn(z, g("ffn.w1"), g("ffn.b1"), g("ffn.w2"), g("ffn.b2"))


def composite_logits(model, tokens, x_past, x_future):
    """Per-position logits of a composite model for one token sequence (T,).

    The backbone's transformer stack is the only reused component; every
    adapter term is recomputed with scalar loops.
    """
    v = model.variant
    bbp, ad = model.backbone, model.adapter
    T = len(tokens)
    e = bb.embed(bbp, np.asarray(tokens)).tolist()
    if v.has_iib:
        e = [[a + b for a, b in zip(e[t], block(v.arch, ad, "iib.", e[t], x_past[t]))] for t in range(T)]
    h = bb.forward_hidden(bbp, model.config, np.array(e)).tolist()
    w_out = bbp["w_out"].tolist()
    out = []
    for t in range(T):
        lg = matvec(h[t], w_out)
        if v.oib_kind == "ffn" and v is not A.AdapterVariant.POINT_OIB:
            lg = [a + b for a, b in zip(lg, block(v.arch, ad, "oib.", h[t], x_future[t]))]
        elif v.oib_kind == "rs":
            lg = [a + b for a, b in zip(lg, matvec(list(x_future[t]), ad["rs.w_cov"].tolist()))]
        out.append(lg)
    return np.array(out)


# ---------------------------------------------------------------- tiny instances

TINY = bb.BackboneConfig(d_model=8, n_layers=1, n_heads=2, context_length=6, vocab_size=7, horizon=2)
TRAINABLE = ["IIB_OIB", "IIB_only", "OIB_only", "NC", "RS", "HS", "OL", "NL", "NL_NR", "FF_IIB_OIB", "FF_IIB", "FF_OIB", "FF_NC"]


def tiny_instance(variant, seed, c=2, hidden=4, cfg=TINY, randomize=True):
    """Composite model with every adapter weight random (including final layers) plus a batch."""
    rng = RngStream(seed)
    params = bb.init_backbone(cfg, rng.child(0))
    model = A.attach(params, cfg, variant, A.AdapterHyper(hidden=hidden, cov_dim=c), rng.child(1))
    if randomize:
        r = rng.child(2)
        model.adapter = {k: r.normal(0.0, 0.7, a.shape) for k, a in model.adapter.items()}
    b = rng.child(3)
    T = cfg.context_length
    tokens = b.integers(0, cfg.vocab_size, (2, T))
    x_past = b.normal(0.0, 1.0, (2, T, c))
    x_future = b.normal(0.0, 1.0, (2, T, c))
    targets = b.integers(0, cfg.vocab_size, (2, T))
    return model, tokens, x_past, x_future, targets


# ---------------------------------------------------------------- metrics


def pinball(q, x, a):
    return a * (x - q) if x > q else (1 - a) * (q - x)


def wql(quantiles, actuals, levels):
    """Mean over levels of 2 * total pinball / total |actual|, scalar loops."""
    denom = 0.0
    for act in actuals:
        for x in act:
            denom += abs(x)
    tot = 0.0
    for j, a in enumerate(levels):
        num = 0.0
        for qm, act in zip(quantiles, actuals):
            for t, x in enumerate(act):
                num += pinball(qm[j][t], x, a)
        tot += 2.0 * num / denom
    return tot / len(levels)


def mase(pred, actual, context, S):
    C, H = len(context), len(actual)
    naive = sum(abs(context[t] - context[t - S]) for t in range(S, C)) / (C - S)
    return sum(abs(p - a) for p, a in zip(pred, actual)) / H / naive


def quantile_linear(values, a):
    """Linear-interpolation empirical quantile from a sorted copy."""
    s = sorted(values)
    pos = a * (len(s) - 1)
    lo = math.floor(pos)
    hi = min(lo + 1, len(s) - 1)
    return s[lo] + (pos - lo) * (s[hi] - s[lo])


def geomean_ratio(scores, base):
    pairs = [(s, b) for s, b in zip(scores, base) if not (math.isnan(s) or math.isnan(b))]
    logsum = 0.0
    for s, b in pairs:
        logsum += math.log(s / b)
    return math.exp(logsum / len(pairs))


def average_rank(matrix):
    """Mean rank per model; ties share the mean of the tied positions; NaN skipped."""
    n_models = len(matrix[0])
    tot = [0.0] * n_models
    cnt = [0] * n_models
    for row in matrix:
        present = [j for j in range(n_models) if not math.isnan(row[j])]
        for j in present:
            less = sum(1 for k in present if row[k] < row[j])
            equal = sum(1 for k in present if row[k] == row[j])
            tot[j] += less + (equal + 1) / 2.0
            cnt[j] += 1
    return [t / c if c else float("nan") for t, c in zip(tot, cnt)]


def closed_form(variant, d, c, h, Vs, n_bb):
    ffn = lambda i, o: i * h + h + h * o + o
    linear2 = lambda o: d * h + c * h + ffn(2 * h, o)
    counts = {
        "RS": c * Vs,
        "HS": d * h + ffn(h, Vs),
        "NC": d * h + ffn(h, d) + d * h + ffn(h, Vs),
        "IIB_only": linear2(d),
        "OIB_only": linear2(Vs),
        "IIB_OIB": linear2(d) + linear2(Vs),
        "OL": (d + c) * 2 * h + ffn(2 * h, d) + (d + c) * 2 * h + ffn(2 * h, Vs),
        "NL": ffn(d + c, d) + ffn(d + c, Vs),
        "POINT_OIB": d * h + c * h + h + ffn(3 * h, 1),
        "NONE": 0,
    }
    counts["NL_NR"] = counts["NL"]
    for v in ("IIB_OIB", "NC"):
        counts["FF_" + v] = counts[v] + n_bb
    counts["FF_IIB"] = counts["IIB_only"] + n_bb
    counts["FF_OIB"] = counts["OIB_only"] + n_bb
    return counts[variant]
