"""Shared numeric oracles for the test suite."""

import numpy as np
import torch


def finite_difference_gradient(f, x, step=1e-3):
    """Central-difference gradient of scalar f at numpy array x."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        hi = x.copy()
        lo = x.copy()
        hi[idx] += step
        lo[idx] -= step
        grad[idx] = (f(hi) - f(lo)) / (2 * step)
        it.iternext()
    return grad


def relative_gradient_error(analytic, numeric):
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
    return np.linalg.norm(a - n) / denom


def torch_input_gradient(f, x):
    """Autograd gradient of scalar f w.r.t. double tensor input x."""
    x = torch.as_tensor(x, dtype=torch.float64).clone().requires_grad_(True)
    out = f(x)
    out.backward()
    return x.grad.detach().numpy()


def check_gradient(f_torch, x0, step=1e-3, tol=1e-2):
    """Compare autograd and central differences on the same scalar map."""
    analytic = torch_input_gradient(f_torch, x0)

    def f_np(arr):
        with torch.no_grad():
            return float(f_torch(torch.as_tensor(arr, dtype=torch.float64)))

    numeric = finite_difference_gradient(f_np, x0, step)
    err = relative_gradient_error(analytic, numeric)
    assert err <= tol, f"gradient mismatch: relative error {err:.3e}"
    return err


def enumerate_monotonic_paths(m, n):
    """All phoneme-index paths of length n with steps in {0, +1}, starting
    at 0 and ending at m-1. Exponential; only for tiny m, n."""
    paths = []

    def rec(prefix):
        t = len(prefix)
        if t == n:
            if prefix[-1] == m - 1:
                paths.append(list(prefix))
            return
        last = prefix[-1]
        remaining = n - t
        for step in (0, 1):
            nxt = last + step
            if nxt >= m:
                continue
            if m - 1 - nxt > remaining - 1:  # cannot still reach the end
                continue
            prefix.append(nxt)
            rec(prefix)
            prefix.pop()

    rec([0])
    return paths


def brute_force_best_path_score(weights, floor=1e-9):
    """Exhaustive-search optimum of the monotonic alignment objective."""
    logw = np.log(np.maximum(weights, floor))
    m, n = logw.shape
    best = -np.inf
    for path in enumerate_monotonic_paths(m, n):
        score = sum(logw[p, t] for t, p in enumerate(path))
        best = max(best, score)
    return best


def brute_force_edit_distance(ref, hyp):
    """Plain recursive Levenshtein distance (no DP), for short sequences."""
    def rec(i, j):
        if i == len(ref):
            return len(hyp) - j
        if j == len(hyp):
            return len(ref) - i
        if ref[i] == hyp[j]:
            return rec(i + 1, j + 1)
        return 1 + min(rec(i + 1, j + 1), rec(i + 1, j), rec(i, j + 1))

    return rec(0, 0)
