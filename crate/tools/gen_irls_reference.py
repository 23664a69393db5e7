#!/usr/bin/env python3
"""Generate frozen weighted-logistic-regression reference fits.

Independent of the Rust implementation: plain Newton iterations on the
weighted Bernoulli log-likelihood in numpy, cross-checked against sklearn
where available. Output is committed as a golden fixture.
"""
import json
import numpy as np

rng = np.random.default_rng(20260810)


def fit_newton(x, y, w, tol=1e-12, max_iter=200):
    beta = np.zeros(x.shape[1])
    for _ in range(max_iter):
        eta = x @ beta
        p = 1.0 / (1.0 + np.exp(-eta))
        score = x.T @ (w * (y - p))
        hess = x.T @ (x * (w * p * (1 - p))[:, None])
        delta = np.linalg.solve(hess, score)
        beta = beta + delta
        if np.max(np.abs(score)) < tol:
            break
    return beta


def loglik(x, y, w, beta):
    eta = x @ beta
    p = np.clip(1.0 / (1.0 + np.exp(-eta)), 1e-12, 1 - 1e-12)
    return float(np.sum(w * (y * np.log(p) + (1 - y) * np.log(1 - p))))


cases = []
k = 0
while len(cases) < 20:
    n = int(rng.integers(40, 81))
    p = int(rng.integers(1, 4))
    x_cov = np.round(rng.normal(size=(n, p)), 4)
    x = np.column_stack([np.ones(n), x_cov])
    true_beta = np.round(rng.normal(scale=0.8, size=p + 1), 3)
    prob = 1.0 / (1.0 + np.exp(-(x @ true_beta)))
    y = (rng.random(n) < prob).astype(float)
    if y.sum() < 5 or y.sum() > n - 5:
        continue
    if k % 2 == 0:
        w = np.ones(n)
    else:
        w = np.round(rng.uniform(0.5, 3.0, size=n), 2)
    k += 1
    beta = fit_newton(x, y, w)
    # Reject near-separated draws: reference must be a clean interior MLE.
    if np.max(np.abs(beta)) > 8:
        continue
    cases.append(
        {
            "x": x.tolist(),
            "y": y.tolist(),
            "w": w.tolist(),
            "coef": beta.tolist(),
            "log_likelihood": loglik(x, y, w, beta),
        }
    )

try:
    from sklearn.linear_model import LogisticRegression

    for c in cases:
        x = np.array(c["x"])
        y = np.array(c["y"])
        w = np.array(c["w"])
        m = LogisticRegression(penalty=None, fit_intercept=False, tol=1e-10, max_iter=5000)
        m.fit(x, y, sample_weight=w)
        assert np.allclose(m.coef_[0], c["coef"], atol=2e-5), (
            m.coef_[0],
            c["coef"],
        )
    print("sklearn cross-check passed")
except ImportError:
    print("sklearn unavailable; skipped cross-check")

out = "crates/core/tests/goldens/irls_reference.json"
with open(out, "w") as f:
    json.dump(cases, f, indent=1)
print(f"wrote {len(cases)} cases to {out}")
