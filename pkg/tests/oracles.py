"""Scalar-loop reference implementations used as independent test oracles."""
import math


def _softmax_row(row, keep=None):
    keep = keep if keep is not None else [True] * len(row)
    top = max(v for v, k in zip(row, keep) if k)
    exps = [math.exp(v - top) if k else 0.0 for v, k in zip(row, keep)]
    s = sum(exps)
    return [e / s for e in exps]


def _flatten(t):
    # t: nested list C x h x w -> C x N
    return [[v for row in ch for v in row] for ch in t]


def attention_logits(q, k):
    qf, kf = _flatten(q), _flatten(k)
    C, N = len(qf), len(qf[0])
    return [[sum(qf[i][n] * kf[j][n] for n in range(N)) / math.sqrt(N) for j in range(C)] for i in range(C)]


def _apply(attn, v, h, w):
    vf = _flatten(v)
    C, N = len(vf), len(vf[0])
    out = [[sum(attn[i][j] * vf[j][n] for j in range(C)) for n in range(N)] for i in range(C)]
    return [[out[i][r * w:(r + 1) * w] for r in range(h)] for i in range(C)]


def transposed_attention(q, k, v):
    h, w = len(q[0]), len(q[0][0])
    logits = attention_logits(q, k)
    return _apply([_softmax_row(r) for r in logits], v, h, w)


def topm_row(row, m):
    """Indices of the m largest entries, ties to the lower index (selection by repeated scan)."""
    chosen = []
    for _ in range(m):
        best = None
        for j, v in enumerate(row):
            if j in chosen:
                continue
            if best is None or v > row[best]:
                best = j
        chosen.append(best)
    return [j in chosen for j in range(len(row))]


def selective_attention(q, k, v, ratios, scales):
    h, w = len(q[0]), len(q[0][0])
    C = len(q)
    logits = attention_logits(q, k)
    total = [[[0.0] * w for _ in range(h)] for _ in range(C)]
    for r, s in zip(ratios, scales):
        m = min(max(int(math.floor(r * C + 0.5)), 1), C)
        attn = [_softmax_row(row, topm_row(row, m)) for row in logits]
        out = _apply(attn, v, h, w)
        for i in range(C):
            for y in range(h):
                for x in range(w):
                    total[i][y][x] += s * out[i][y][x]
    return total


def ddl(bank, theta):
    T = len(bank)
    if T < 2:
        return 0.0
    total = 0.0
    for i in range(T):
        for j in range(i + 1, T):
            dot = sum(a * b for a, b in zip(bank[i], bank[j]))
            ni = math.sqrt(sum(a * a for a in bank[i]))
            nj = math.sqrt(sum(b * b for b in bank[j]))
            cos = max(-1.0, min(1.0, dot / max(ni * nj, 1e-8)))
            total += max(0.0, theta - math.acos(cos))
    return 2 * total / (T * (T - 1))
