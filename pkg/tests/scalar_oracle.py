"""Pure-Python scalar re-implementations used as independent test oracles.

Nothing here touches the autograd engine; every quantity is an explicit
loop over positions, channels and codewords.
"""
import math


def matvec(m, v):
    return [sum(m[r][c] * v[c] for c in range(len(v))) for r in range(len(m))]


def attention(xs, w_theta, w_phi):
    """xs: list of N feature vectors. Returns N x N list of lists."""
    th = [matvec(w_theta, x) for x in xs]
    ph = [matvec(w_phi, x) for x in xs]
    out = []
    for i in range(len(xs)):
        f = [math.exp(sum(a * b for a, b in zip(th[i], ph[j]))) for j in range(len(xs))]
        c = sum(f)
        out.append([v / c for v in f])
    return out


def non_local(xs, w_theta, w_phi, w_g):
    a = attention(xs, w_theta, w_phi)
    g = [matvec(w_g, x) for x in xs]
    return [[sum(a[i][j] * g[j][c] for j in range(len(xs))) for c in range(len(g[0]))] for i in range(len(xs))]


def enhance(xs, ys, w_z):
    return [[a + b for a, b in zip(matvec(w_z, y), x)] for x, y in zip(xs, ys)]


def assignment(zps, codebook, smoothing):
    out = []
    for z in zps:
        logits = [-s * sum((a - b) ** 2 for a, b in zip(z, d)) for d, s in zip(codebook, smoothing)]
        ex = [math.exp(v) for v in logits]
        r = sum(ex)
        out.append([v / r for v in ex])
    return out


def context(fz, proj, codebook, smoothing, bn_weight, bn_bias, eps=1e-5, running=None):
    """Global context e for one image. ``running`` = (mean, var) selects eval-mode BN."""
    zps = [matvec(proj, z) for z in fz]
    w = assignment(zps, codebook, smoothing)
    K, D = len(codebook), len(codebook[0])
    ek = []
    for k in range(K):
        acc = [0.0] * D
        for i, z in enumerate(zps):
            for c in range(D):
                acc[c] += w[i][k] * (z[c] - codebook[k][c])
        ek.append(acc)
    e = [0.0] * D
    for c in range(D):
        vals = [ek[k][c] for k in range(K)]
        if running is None:
            mu = sum(vals) / K
            var = sum((v - mu) ** 2 for v in vals) / K
        else:
            mu, var = running[0][c], running[1][c]
        for v in vals:
            e[c] += max(0.0, bn_weight[c] * (v - mu) / math.sqrt(var + eps) + bn_bias[c])
    return e, ek


def gate(e, w_gamma):
    return [1.0 / (1.0 + math.exp(-v)) for v in matvec(w_gamma, e)]


def nlce(xs, p, running=None):
    ys = non_local(xs, p["w_theta"], p["w_phi"], p["w_g"])
    fz = enhance(xs, ys, p["w_z"])
    e, _ = context(fz, p["proj"], p["codebook"], p["smoothing"], p["bn_weight"], p["bn_bias"], running=running)
    gam = gate(e, p["w_gamma"])
    return [[v * g for v, g in zip(z, gam)] for z in fz]


def bilinear_weights(n_out, n_in):
    """Half-pixel bilinear weights as a list of (i0, i1, frac) per output index."""
    res = []
    for o in range(n_out):
        src = (o + 0.5) * n_in / n_out - 0.5
        src = min(max(src, 0.0), n_in - 1)
        i0 = int(math.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        res.append((i0, i1, src - i0))
    return res


def resize(img, n_out_h, n_out_w):
    """img: H x W list of lists."""
    wh = bilinear_weights(n_out_h, len(img))
    ww = bilinear_weights(n_out_w, len(img[0]))
    out = []
    for (a0, a1, fa) in wh:
        row = []
        for (b0, b1, fb) in ww:
            row.append((1 - fa) * ((1 - fb) * img[a0][b0] + fb * img[a0][b1])
                       + fa * ((1 - fb) * img[a1][b0] + fb * img[a1][b1]))
        out.append(row)
    return out


def conv(img, kernel, bias, pad):
    """Single-input multi-channel conv: img C x H x W, kernel O x C x k x k."""
    C, H, W = len(img), len(img[0]), len(img[0][0])
    k = len(kernel[0][0])
    Ho, Wo = H + 2 * pad - k + 1, W + 2 * pad - k + 1
    out = []
    for o in range(len(kernel)):
        plane = []
        for i in range(Ho):
            row = []
            for j in range(Wo):
                acc = bias[o]
                for c in range(C):
                    for a in range(k):
                        for b in range(k):
                            y, x = i + a - pad, j + b - pad
                            if 0 <= y < H and 0 <= x < W:
                                acc += kernel[o][c][a][b] * img[c][y][x]
                row.append(acc)
            plane.append(row)
        out.append(plane)
    return out


def cross_entropy(logits, mask):
    """logits: 2 x H x W; mask: H x W. Mean NLL of the true class."""
    H, W = len(mask), len(mask[0])
    tot = 0.0
    for i in range(H):
        for j in range(W):
            a, b = logits[0][i][j], logits[1][i][j]
            m = max(a, b)
            lse = m + math.log(math.exp(a - m) + math.exp(b - m))
            tot += lse - (b if mask[i][j] else a)
    return tot / (H * W)
