"""Finite-difference verification of reverse-mode gradients."""

import numpy as np

from .errors import ConfigError


def finite_diff_check(loss_fn, params, epsilon=1e-5, max_entries=None, rng=None,
                      reject_nonsmooth=False, stats=None):
    """Compare backprop gradients against central finite differences.

    ``loss_fn`` rebuilds the computation from the *current* parameter values
    and returns ``(graph, loss_node)`` with a 1x1 loss. Every parameter in
    ``params`` is perturbed elementwise by ±epsilon; the numeric slope
    (f(θ+ε) − f(θ−ε)) / 2ε is compared against the analytic gradient with
    relative error |a − n| / max(|a|, |n|, 1e-8). Returns the maximum
    relative error over all checked entries.

    ``max_entries`` caps the number of entries checked per parameter
    (sampled without replacement via ``rng``); by default every entry is
    checked. Use 64-bit parameters — float32 round-off swamps the ε² error
    term of the central difference.

    ``reject_nonsmooth`` additionally estimates the slope at ε/2 and 2ε and
    skips entries where the three estimates disagree (pairwise relative
    difference > 1e-5) — there the probe interval straddles a ReLU/max-pool
    regime change and the difference quotient itself is not a trustworthy
    oracle — or where analytic and numeric slopes all sit below 1e-6, which
    64-bit loss differences cannot resolve to 1e-4 relative accuracy.
    (A large analytic slope against tiny numeric ones is still checked, so
    a broken backward cannot hide behind the skip.) ``stats``, if given a
    dict, receives "checked"/"skipped" counts.
    """
    params = list(params)
    for p in params:
        if p.value.dtype != np.float64:
            raise ConfigError(
                f"finite_diff_check: parameter {p.name!r} is {p.value.dtype}, needs float64"
            )
    if max_entries is not None and rng is None:
        raise ConfigError("finite_diff_check: sampling entries requires an rng")

    for p in params:
        p.zero_grad()
    graph, loss = loss_fn()
    graph.backward(loss)
    analytic = {id(p): p.gradient.copy() for p in params}

    def loss_value():
        _, node = loss_fn()
        return float(node.value[0, 0])

    def slope(flat, k, saved, eps):
        flat[k] = saved + eps
        f_plus = loss_value()
        flat[k] = saved - eps
        f_minus = loss_value()
        flat[k] = saved
        return (f_plus - f_minus) / (2.0 * eps)

    worst = 0.0
    checked = skipped = 0
    for p in params:
        n = p.value.size
        if max_entries is not None and n > max_entries:
            flat_idx = rng.choice(n, size=max_entries, replace=False)
        else:
            flat_idx = np.arange(n)
        flat = p.value.reshape(-1)
        grad_flat = analytic[id(p)].reshape(-1)
        for k in flat_idx:
            saved = flat[k]
            a = grad_flat[k]
            numeric = slope(flat, k, saved, epsilon)
            if reject_nonsmooth:
                others = (
                    slope(flat, k, saved, epsilon / 2.0),
                    slope(flat, k, saved, 2.0 * epsilon),
                )
                mags = (abs(numeric), *(abs(o) for o in others))
                if max(abs(a), *mags) < 1e-6:
                    skipped += 1
                    continue
                scale = max(*mags, 1e-8)
                if any(abs(numeric - o) > 1e-5 * scale for o in others):
                    skipped += 1
                    continue
            checked += 1
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            if rel > worst:
                worst = rel
    if stats is not None:
        stats["checked"] = checked
        stats["skipped"] = skipped
    return worst
