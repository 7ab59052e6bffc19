"""Independent loop-based reference implementations used as test oracles.

Everything here is plain Python over nested lists in float64 so it shares
no code path with the vectorised torch implementations.
"""

import math


def _col(z, j):
    return [row[j] for row in z]


def _mean(xs):
    return sum(xs) / len(xs)


def vicreg_ref(za, zb, lam=25.0, mu=25.0, nu=1.0, gamma=1.0, eps=1e-4, reduction="sum"):
    n, d = len(za), len(za[0])
    inv = 0.0
    for i in range(n):
        for j in range(d):
            inv += (za[i][j] - zb[i][j]) ** 2
    inv /= n
    if reduction == "mean":
        inv /= d

    def var(z):
        total = 0.0
        for j in range(d):
            c = _col(z, j)
            m = _mean(c)
            v = sum((x - m) ** 2 for x in c) / (n - 1)
            total += max(0.0, gamma - math.sqrt(v + eps))
        return total / d

    def cov(z):
        means = [_mean(_col(z, j)) for j in range(d)]
        total = 0.0
        for p in range(d):
            for q in range(d):
                if p == q:
                    continue
                c = sum((z[i][p] - means[p]) * (z[i][q] - means[q]) for i in range(n)) / (n - 1)
                total += c * c
        return total / d

    return lam * inv + mu * (var(za) + var(zb)) + nu * (cov(za) + cov(zb))


def nt_xent_ref(za, zb, t=0.5):
    z = [list(r) for r in za] + [list(r) for r in zb]
    n2 = len(z)
    n = n2 // 2
    unit = []
    for r in z:
        norm = math.sqrt(sum(x * x for x in r))
        unit.append([x / norm for x in r])

    def sim(a, b):
        return sum(x * y for x, y in zip(unit[a], unit[b])) / t

    total = 0.0
    for i in range(n2):
        pos = i + n if i < n else i - n
        denom = sum(math.exp(sim(i, k)) for k in range(n2) if k != i)
        total += -math.log(math.exp(sim(i, pos)) / denom)
    return total / n2


def lr_ref(step, total, warmup, lr_max):
    if step < warmup:
        return lr_max * step / warmup
    progress = (step - warmup) / (total - warmup)
    return 0.5 * lr_max * (1.0 + math.cos(math.pi * progress))


def cka_ref(X, Y):
    """Biased linear CKA via centred Gram matrices (a different route from the feature-space formula)."""
    n = len(X)

    def gram(A):
        return [[sum(a * b for a, b in zip(A[i], A[j])) for j in range(n)] for i in range(n)]

    def centre(K):
        rm = [_mean(r) for r in K]
        cm = [_mean([K[i][j] for i in range(n)]) for j in range(n)]
        gm = _mean(rm)
        return [[K[i][j] - rm[i] - cm[j] + gm for j in range(n)] for i in range(n)]

    Kx, Ky = centre(gram(X)), centre(gram(Y))
    hsic = lambda A, B: sum(A[i][j] * B[i][j] for i in range(n) for j in range(n))  # noqa: E731
    return hsic(Kx, Ky) / math.sqrt(hsic(Kx, Kx) * hsic(Ky, Ky))
