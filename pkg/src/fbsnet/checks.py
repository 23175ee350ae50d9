"""Independent oracles and numeric checks used by ``selftest`` and the test suite.

The convolution oracles are deliberately naive: explicit loops over output
pixels and kernel taps with bounds tests, no padding, no im2col.
"""
from __future__ import annotations

import numpy as np

from . import blocks as B
from . import nn
from .tensor import Tensor, backward, mul, no_grad, sum_all


def naive_conv2d(x, w, b=None, stride=(1, 1), padding=(0, 0), dilation=(1, 1), groups=1):
    (sh, sw), (ph, pw), (dh, dw) = nn._pair(stride), nn._pair(padding), nn._pair(dilation)
    n, c, h, wd = x.shape
    o, cg, kh, kw = w.shape
    ho = (h + 2 * ph - dh * (kh - 1) - 1) // sh + 1
    wo = (wd + 2 * pw - dw * (kw - 1) - 1) // sw + 1
    og = o // groups
    out = np.zeros((n, o, ho, wo), dtype=np.float64)
    for oc in range(o):
        g0 = (oc // og) * cg
        for i in range(ho):
            for j in range(wo):
                acc = np.zeros(n)
                for a in range(kh):
                    y = i * sh - ph + a * dh
                    if not 0 <= y < h:
                        continue
                    for bb in range(kw):
                        xx = j * sw - pw + bb * dw
                        if 0 <= xx < wd:
                            acc += x[:, g0:g0 + cg, y, xx] @ w[oc, :, a, bb]
                out[:, oc, i, j] = acc
        if b is not None:
            out[:, oc] += b[oc]
    return out


def naive_conv_transpose2d(x, w, b=None, stride=(2, 2), padding=(1, 1), output_padding=(1, 1),
                           dilation=(1, 1)):
    """Scatter form: each input pixel adds ``x * w[:, :, a, b]`` at its strided target."""
    (sh, sw), (ph, pw) = nn._pair(stride), nn._pair(padding)
    (oph, opw), (dh, dw) = nn._pair(output_padding), nn._pair(dilation)
    n, c, h, wd = x.shape
    _, o, kh, kw = w.shape
    ho = (h - 1) * sh - 2 * ph + dh * (kh - 1) + oph + 1
    wo = (wd - 1) * sw - 2 * pw + dw * (kw - 1) + opw + 1
    out = np.zeros((n, o, ho, wo), dtype=np.float64)
    for i in range(h):
        for j in range(wd):
            for a in range(kh):
                y = i * sh - ph + a * dh
                if not 0 <= y < ho:
                    continue
                for bb in range(kw):
                    xx = j * sw - pw + bb * dw
                    if 0 <= xx < wo:
                        out[:, :, y, xx] += x[:, :, i, j] @ w[:, :, a, bb]
    if b is not None:
        out += np.asarray(b).reshape(1, o, 1, 1)
    return out


def random_conv_case(rng):
    """A random small convolution: plain, grouped, depthwise, dilated, strided or transposed."""
    kind = rng.choice(["dense", "grouped", "depthwise", "transposed"], p=[0.35, 0.2, 0.25, 0.2])
    n = int(rng.integers(1, 3))
    kh, kw = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    case = dict(kind=str(kind), bias=bool(rng.integers(0, 2)))
    if kind == "transposed":
        c, o = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        s = (int(rng.integers(1, 3)), int(rng.integers(1, 3)))
        d = (int(rng.integers(1, 3)), int(rng.integers(1, 3)))
        p = (int(rng.integers(0, kh)), int(rng.integers(0, kw)))
        op = (int(rng.integers(0, max(s[0], d[0]))), int(rng.integers(0, max(s[1], d[1]))))
        op = (min(op[0], s[0] - 1 if s[0] > 1 else d[0] - 1), min(op[1], s[1] - 1 if s[1] > 1 else d[1] - 1))
        h, w = int(rng.integers(1, 7)), int(rng.integers(1, 7))
        case.update(x=(n, c, h, w), w=(c, o, kh, kw), stride=s, padding=p, output_padding=op, dilation=d)
        ho = (h - 1) * s[0] - 2 * p[0] + d[0] * (kh - 1) + op[0] + 1
        wo = (w - 1) * s[1] - 2 * p[1] + d[1] * (kw - 1) + op[1] + 1
        return case if ho >= 1 and wo >= 1 else random_conv_case(rng)
    if kind == "dense":
        groups, cg, o = 1, int(rng.integers(1, 6)), int(rng.integers(1, 6))
    elif kind == "grouped":
        groups = int(rng.integers(2, 4))
        cg, o = int(rng.integers(1, 3)), groups * int(rng.integers(1, 3))
    else:
        groups = int(rng.integers(1, 7))
        cg, o = 1, groups
    d = (int(rng.integers(1, 4)), int(rng.integers(1, 4)))
    s = (int(rng.integers(1, 3)), int(rng.integers(1, 3)))
    p = (int(rng.integers(0, d[0] * (kh - 1) + 2)), int(rng.integers(0, d[1] * (kw - 1) + 2)))
    h, w = int(rng.integers(1, 10)), int(rng.integers(1, 10))
    ho = (h + 2 * p[0] - d[0] * (kh - 1) - 1) // s[0] + 1
    wo = (w + 2 * p[1] - d[1] * (kw - 1) - 1) // s[1] + 1
    if ho < 1 or wo < 1:
        return random_conv_case(rng)
    case.update(x=(n, cg * groups, h, w), w=(o, cg, kh, kw), stride=s, padding=p, dilation=d,
                groups=groups)
    return case


def run_conv_case(case, rng, dtype=np.float32):
    """Max abs difference between the engine (at ``dtype``) and the float64 oracle."""
    x = rng.standard_normal(case["x"])
    w = rng.standard_normal(case["w"])
    o = case["w"][1] if case["kind"] == "transposed" else case["w"][0]
    b = rng.standard_normal(o) if case["bias"] else None
    xt, wt = Tensor(x.astype(dtype)), Tensor(w.astype(dtype))
    bt = None if b is None else Tensor(b.astype(dtype).reshape(1, o, 1, 1))
    xq, wq = xt.data.astype(np.float64), wt.data.astype(np.float64)
    bq = None if b is None else bt.data.ravel().astype(np.float64)
    with no_grad():
        if case["kind"] == "transposed":
            got = nn.conv_transpose2d(xt, wt, bt, case["stride"], case["padding"],
                                      case["output_padding"], case["dilation"]).data
            want = naive_conv_transpose2d(xq, wq, bq, case["stride"], case["padding"],
                                          case["output_padding"], case["dilation"])
        else:
            got = nn.conv2d(xt, wt, bt, case["stride"], case["padding"], case["dilation"],
                            case["groups"]).data
            want = naive_conv2d(xq, wq, bq, case["stride"], case["padding"], case["dilation"],
                                case["groups"])
    if got.shape != want.shape:
        return np.inf
    return float(np.abs(got - want).max() / max(1.0, np.abs(want).max()))


def conv_oracle_suite(n_cases=200, seed=0, tol=1e-6):
    """Returns (failures, worst error); errors are max abs difference over max(1, max |oracle|)."""
    rng = np.random.default_rng(seed)
    failures, worst = [], 0.0
    for _ in range(n_cases):
        case = random_conv_case(rng)
        rel = run_conv_case(case, rng)
        worst = max(worst, rel)
        if rel > tol:
            failures.append((case, rel))
    return failures, worst


# ---------------------------------------------------------------------------
# gradient checks


def _same_decisions(a, b):
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def gradcheck(fn, tensors, seed=0, eps=1e-4, max_entries=40, min_eps=1e-8):
    """Compare backprop against central differences of ``L = sum(fn() * R)`` for a fixed random R.

    ``tensors`` is a list of (name, Tensor) whose gradients are checked; up to
    ``max_entries`` coordinates per tensor are probed. Returns
    {name: max over probes of |a - n| / (|n| + 1e-8)}.

    Kinks: a stencil whose two sides take a different ReLU / max branch than
    the unperturbed point straddles a non-differentiable point, so its step is
    divided by 10 until the branches agree (down to ``min_eps``).

    Structural zeros: a coordinate whose derivative is exactly zero (a shift
    cancelled by a following batch norm, say) leaves only rounding noise in
    the difference. Where both estimates sit below the stencil's rounding
    bound ``nu = 8 * ulp * sum|R * y| / step`` the probe passes iff they agree
    to within ``nu``.
    """
    # a separate stream, so R never coincides with inputs drawn from the same seed
    rng = np.random.default_rng([seed, 0x9C])
    with no_grad(), nn.record_decisions() as base:
        probe = fn()
    weights = Tensor(rng.standard_normal(probe.shape).astype(probe.data.dtype))
    scale = 8 * np.finfo(probe.data.dtype).eps * float(np.abs(probe.data * weights.data).sum())
    for _, t in tensors:
        t.grad = None
    backward(sum_all(mul(fn(), weights)))

    def loss():
        with no_grad(), nn.record_decisions() as seen:
            value = float((fn().data * weights.data).sum())
        return value, seen

    def central(t, k):
        old = t.data.flat[k]
        step = eps
        while True:
            t.data.flat[k] = old + step
            up, seen_up = loss()
            t.data.flat[k] = old - step
            down, seen_down = loss()
            t.data.flat[k] = old
            smooth = _same_decisions(seen_up, base) and _same_decisions(seen_down, base)
            if smooth or step / 10 < min_eps:
                return (up - down) / (2 * step), step

            step /= 10

    errors = {}
    for name, t in tensors:
        grad = np.zeros(t.data.shape) if t.grad is None else t.grad
        flat = rng.choice(t.data.size, size=min(t.data.size, max_entries), replace=False)
        worst = 0.0
        for k in flat:
            num, step = central(t, k)
            an = grad.flat[k]
            nu = scale / step
            if abs(num) < nu and abs(an) < nu:
                err = 0.0 if abs(an - num) <= nu else np.inf
            else:
                err = abs(an - num) / (abs(num) + 1e-8)
            worst = max(worst, err)
        errors[name] = float(worst)
    return errors


def _leaf(rng, shape, positive=False):
    data = rng.uniform(-1.0, 1.0, shape)
    if positive:
        data = np.abs(data) + 0.5
    return Tensor(data, requires_grad=True)


def primitive_cases(seed=0):
    """(name, fn, tensors) triples over every differentiable primitive, in float64."""
    from .tensor import add, add_n, concat, mean_all, permute, scale, split, sub
    from .training import ce_ohem_loss

    rng = np.random.default_rng(seed)
    x = _leaf(rng, (2, 6, 5, 7))
    y = _leaf(rng, (2, 6, 5, 7))
    row = _leaf(rng, (1, 6, 1, 1))
    gam, bet = _leaf(rng, (1, 6, 1, 1), positive=True), _leaf(rng, (1, 6, 1, 1))
    rm, rv = rng.standard_normal(6), np.abs(rng.standard_normal(6)) + 0.5
    w = _leaf(rng, (4, 6, 3, 3))
    wg = _leaf(rng, (6, 3, 3, 1))
    wd = _leaf(rng, (6, 1, 1, 3))
    wt = _leaf(rng, (6, 3, 3, 3))
    bias3 = _leaf(rng, (1, 3, 1, 1))
    bias4 = _leaf(rng, (1, 4, 1, 1))
    logits = _leaf(rng, (2, 4, 5, 7))
    labels = rng.integers(0, 4, size=(2, 1, 5, 7))
    labels[0, 0, 0, :3] = 255
    cases = [
        ("add", lambda: add(x, row), [("x", x), ("row", row)]),
        ("sub", lambda: sub(x, y), [("x", x), ("y", y)]),
        ("mul", lambda: mul(x, row), [("x", x), ("row", row)]),
        ("scale", lambda: scale(x, -1.7), [("x", x)]),
        ("add_n", lambda: add_n([x, y, x]), [("x", x), ("y", y)]),
        ("concat", lambda: concat([x, y], axis=1), [("x", x), ("y", y)]),
        ("split", lambda: mul(split(x, [2, 4])[1], split(y, [2, 4])[1]), [("x", x), ("y", y)]),
        ("permute", lambda: permute(x, (0, 1, 3, 2)), [("x", x)]),
        ("sum_all", lambda: sum_all(mul(x, y)), [("x", x)]),
        ("mean_all", lambda: mean_all(mul(x, x)), [("x", x)]),
        ("conv2d", lambda: nn.conv2d(x, w, bias4, 2, 1, 1, 1), [("x", x), ("w", w), ("b", bias4)]),
        ("conv2d_grouped_dilated", lambda: nn.conv2d(x, wg, None, 1, (2, 0), 2, 2), [("x", x), ("w", wg)]),
        ("conv2d_depthwise", lambda: nn.conv2d(x, wd, None, 1, (0, 3), 3, 6), [("x", x), ("w", wd)]),
        ("conv_transpose2d", lambda: nn.conv_transpose2d(x, wt, bias3, 2, 1, 1),
         [("x", x), ("w", wt), ("b", bias3)]),
        ("batch_norm_train", lambda: nn.batch_norm(x, gam, bet, rm.copy(), rv.copy(), True),
         [("x", x), ("gamma", gam), ("beta", bet)]),
        ("batch_norm_eval", lambda: nn.batch_norm(x, gam, bet, rm, rv, False),
         [("x", x), ("gamma", gam), ("beta", bet)]),
        ("relu", lambda: nn.relu(x), [("x", x)]),
        ("sigmoid", lambda: nn.sigmoid(x), [("x", x)]),
        ("max_pool2d", lambda: nn.max_pool2d(x, 2), [("x", x)]),
        ("avg_pool2d", lambda: nn.avg_pool2d(x, 2), [("x", x)]),
        ("global_avg_pool", lambda: nn.global_avg_pool(x), [("x", x)]),
        ("directional_pool_h", lambda: nn.directional_avg_pool(x, "height"), [("x", x)]),
        ("directional_pool_w", lambda: nn.directional_avg_pool(x, "width"), [("x", x)]),
        ("channel_mean", lambda: nn.channel_mean(x), [("x", x)]),
        ("channel_max", lambda: nn.channel_max(x), [("x", x)]),
        ("channel_shuffle", lambda: nn.channel_shuffle(x, 2), [("x", x)]),
        ("upsample_nearest2x", lambda: nn.upsample_nearest2x(x), [("x", x)]),
        ("softmax", lambda: nn.softmax_channels(x), [("x", x)]),
        ("log_softmax", lambda: nn.log_softmax_channels(x), [("x", x)]),
        ("ce_ohem_loss", lambda: ce_ohem_loss(logits, labels, 0.7, 8), [("logits", logits)]),
    ]
    return cases


BLOCK_NAMES = ("bru_r1", "bru_r2", "bru_r5", "bru_r9", "bru_r17", "cam", "sam", "drm", "fam",
               "initial", "downsample", "upsample", "projection")


def block_cases(seed=0, dtype=np.float64, training=True):
    """(name, module, forward, input tensors) for each building block at small sizes.

    Batch-norm affines are drawn from U(0.5, 1.5) and U(-1, 1) rather than
    left at gamma=1, beta=0, where ReLU is positively homogeneous and a
    following norm makes many gradients vanish up to its eps. For
    ``training=False`` the running statistics are randomized as well.
    """
    from .layers import BatchNorm2d
    from .model import init_weights

    rng = np.random.default_rng(seed)
    shape = (2, 8, 6, 8)
    out = []

    def add(name, mod, fwd, shapes):
        init_weights(mod, seed)
        for _, sub in mod.named_modules():
            if isinstance(sub, BatchNorm2d):
                sub.gamma.data[...] = rng.uniform(0.5, 1.5, sub.gamma.shape)
                sub.beta.data[...] = rng.uniform(-1.0, 1.0, sub.beta.shape)
                sub.running_mean[...] = rng.uniform(-0.5, 0.5, sub.channels)
                sub.running_var[...] = rng.uniform(0.5, 2.0, sub.channels)
        out.append((name, mod, fwd, [_leaf(rng, s) for s in shapes]))

    t = training
    for r in (1, 2, 5, 9, 17):
        m = B.BRU(8, r, dtype=dtype)
        add(f"bru_r{r}", m, lambda a, m=m: m(a, training=t), [shape])
    m = B.CAM(8, dtype=dtype)
    add("cam", m, lambda a, m=m: m(a, training=t), [shape])
    m = B.SAM(dtype=dtype)
    add("sam", m, lambda a, m=m: m(a, training=t), [shape])
    m = B.DRM(8, 16, dtype=dtype)
    add("drm", m, lambda a, m=m: m(a, training=t), [shape])
    m = B.FAM(8, dtype=dtype)
    add("fam", m, lambda a, b, m=m: m(a, b, training=t), [shape, shape])
    m = B.InitialBlock(3, 8, dtype=dtype)
    add("initial", m, lambda a, m=m: m(a, training=t), [(2, 3, 8, 8)])
    m = B.DownsampleBlock(8, 12, dtype=dtype)
    add("downsample", m, lambda a, m=m: m(a, training=t), [shape])
    m = B.UpsampleBlock(8, 4, dtype=dtype)
    add("upsample", m, lambda a, m=m: m(a, training=t), [shape])
    m = B.ProjectionLayer(8, 4, dtype=dtype)
    add("projection", m, lambda a, m=m: m(a), [shape])
    return out


def block_gradcheck(mod, fwd, inputs, seed=0, max_entries=24, eps=1e-4):
    tensors = [(f"input{i}", t) for i, t in enumerate(inputs)] + list(mod.named_parameters())
    return gradcheck(lambda: fwd(*inputs), tensors, seed=seed, eps=eps, max_entries=max_entries)


# ---------------------------------------------------------------------------
# channel shuffle


def shuffle_is_bijective(channels, groups):
    perm = nn.shuffle_permutation(channels, groups)
    return sorted(perm.tolist()) == list(range(channels))


def shuffle_checks(max_channels=32):
    """Every (C, g) with g | C and C <= max_channels: bijective, and matches the reshape definition."""
    bad = []
    for c in range(1, max_channels + 1):
        for g in range(1, c + 1):
            if c % g:
                continue
            x = np.arange(c, dtype=np.float64).reshape(1, c, 1, 1)
            with no_grad():
                got = nn.channel_shuffle(Tensor(x), g).data.ravel()
            want = x.reshape(g, c // g).T.ravel()
            if not shuffle_is_bijective(c, g) or not np.array_equal(got, want):
                bad.append((c, g))
    return bad


def run_selftest(conv_cases=200, grad_tol=1e-5, conv_tol=1e-6):
    """Return (name, ok, detail) rows for the gradient, conv and shuffle checks."""
    rows = []
    for name, fn, tensors in primitive_cases():
        errs = gradcheck(fn, tensors)
        worst = max(errs.values())
        rows.append((f"grad {name}", worst < grad_tol, f"max rel err {worst:.2e}"))
    # eval mode: a training-mode norm couples every unit, so nearly every
    # stencil crosses a ReLU kink and float64 cannot resolve 1e-5; the
    # batch-statistics backward is covered by the batch_norm_train row
    for name, mod, fwd, inputs in block_cases(training=False):
        errs = block_gradcheck(mod, fwd, inputs)
        worst_name = max(errs, key=errs.get)
        rows.append((f"grad {name}", errs[worst_name] < grad_tol,
                     f"max rel err {errs[worst_name]:.2e} ({worst_name})"))
    failures, worst = conv_oracle_suite(conv_cases, tol=conv_tol)
    rows.append(("conv oracle", not failures,
                 f"{conv_cases - len(failures)}/{conv_cases} specs, worst {worst:.2e}"))
    bad = shuffle_checks()
    rows.append(("channel shuffle", not bad, "bijective for all C <= 32" if not bad else f"failed {bad[:3]}"))
    return rows


__all__ = [
    "naive_conv2d", "naive_conv_transpose2d", "random_conv_case", "run_conv_case",
    "conv_oracle_suite", "gradcheck", "primitive_cases", "block_cases", "block_gradcheck",
    "shuffle_checks", "shuffle_is_bijective", "run_selftest",
]
