"""Central-difference gradient checks shared by the unit and acceptance tests."""
import numpy as np


def fd_check(net, x, y, l2, n_coords, seed, h=1e-3):
    """Central differences on random coordinates where the loss is smooth
    across [-h, h]; returns the worst relative error and how many were checked."""
    rng = np.random.default_rng(seed)
    _, grads = net.loss_and_grads(x, y, l2)
    names = net.trainable_names()
    worst, checked, tries = 0.0, 0, 0
    while checked < n_coords and tries < 20 * n_coords:
        tries += 1
        name = names[rng.integers(len(names))]
        p = net.params[name]
        idx = tuple(int(rng.integers(s)) for s in p.shape)
        old = p[idx]
        p[idx] = old + h
        lp, pat_p = net.loss(x, y, l2), net.pattern(x)
        p[idx] = old - h
        lm, pat_m = net.loss(x, y, l2), net.pattern(x)
        p[idx] = old
        if pat_p != pat_m:
            continue
        num = (lp - lm) / (2 * h)
        ana = grads[name][idx]
        denom = max(abs(num), abs(ana), 1e-8)
        worst = max(worst, abs(num - ana) / denom)
        checked += 1
    return worst, checked


def probe_fd_check(loss_and_grad, w, b, n_coords, seed, h=1e-3):
    """Same check for the probe's (weight, bias) pair; the probe loss is smooth."""
    rng = np.random.default_rng(seed)
    _, gw, gb = loss_and_grad(w, b)
    worst = 0.0
    for _ in range(n_coords):
        if rng.uniform() < 0.8:
            idx = tuple(int(rng.integers(s)) for s in w.shape)
            p, g = w, gw
        else:
            idx = (int(rng.integers(b.shape[0])),)
            p, g = b, gb
        old = p[idx]
        p[idx] = old + h
        lp = loss_and_grad(w, b)[0]
        p[idx] = old - h
        lm = loss_and_grad(w, b)[0]
        p[idx] = old
        num = (lp - lm) / (2 * h)
        worst = max(worst, abs(num - g[idx]) / max(abs(num), abs(g[idx]), 1e-8))
    return worst, n_coords
