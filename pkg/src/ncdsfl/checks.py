"""Self-checks run by ``ncdsfl nc-validate``: operator orthogonality, solver optimum, gradients."""

from __future__ import annotations

import math
import time

import numpy as np

from .nc_core import (
    LayerPeeledState,
    OperatorA,
    check_nc,
    layer_peeled_grad,
    layer_peeled_loss,
    optimal_loss,
    peel_rate,
    rho_opt,
    solve_layer_peeled,
)
from .net import ds_grads, ds_loss, init_net


def central_difference(f, params, h=1e-6):
    """Numerical gradient of scalar ``f()`` w.r.t. every array in ``params`` (modified in place, restored)."""
    out = []
    for p in params:
        g = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = p[idx]
            p[idx] = old + h
            up = f()
            p[idx] = old - h
            down = f()
            p[idx] = old
            g[idx] = (up - down) / (2 * h)
        out.append(g)
    return out


def relative_error(a, b):
    a = np.concatenate([np.ravel(x) for x in a])
    b = np.concatenate([np.ravel(x) for x in b])
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-300))


def check_operator(max_bits=6, max_replication=4, max_feature_dim=3):
    """``A A^T == K 2^I I`` in exact integer arithmetic for every small size."""
    failures = []
    n = 0
    for I in range(1, max_bits + 1):
        for K in range(1, max_replication + 1):
            for d in range(1, max_feature_dim + 1):
                A = OperatorA.build(I, d, K).dense().astype(np.int64)
                n += 1
                if not np.array_equal(A @ A.T, K * 2**I * np.eye(d * I, dtype=np.int64)):
                    failures.append([I, K, d])
    return {"cases": n, "failures": failures, "passed": not failures}


def check_solver(num_bits=2, replication=2, feature_dim=8, lam=0.01, max_iters=20000, step_size=1.0,
                 loss_tol=1e-3, collapse_tol=1e-2, seed=0):
    """Gradient descent reaches the closed-form optimum; away from the trivial regime it collapses."""
    state, trace = solve_layer_peeled(num_bits, replication, feature_dim, lam, max_iters, step_size, seed)
    target = optimal_loss(num_bits, replication, lam)
    loss = float(trace[-1])
    t = peel_rate(num_bits, replication)
    trivial = lam >= t / 2
    report = check_nc(state.W, state.H, state.operator, collapse_tol)
    if trivial:
        size = float(np.sum(state.W**2) + np.sum(state.H**2))
        ok = abs(loss - target) < loss_tol and size < 1e-3
        collapse = {"norm_sq": size}
    else:
        ok = abs(loss - target) < loss_tol and report.nc2_residual < collapse_tol and report.nc3_residual < collapse_tol
        collapse = {"nc1": report.nc1_residual, "nc2": report.nc2_residual, "nc3": report.nc3_residual}
    return {
        "loss": loss,
        "target": target,
        "rho_opt": rho_opt(num_bits, replication, lam),
        "trivial_regime": trivial,
        "iterations": len(trace) - 1,
        "collapse": collapse,
        "passed": bool(ok),
    }


def check_layer_peeled_grads(cases=20, rel_tol=1e-5):
    errs = []
    for s in range(cases):
        rng = np.random.default_rng([7, s])
        I = int(rng.integers(1, 4))
        K = int(rng.integers(1, 3))
        d = int(rng.integers(I, I + 4))
        W = rng.standard_normal((d, 2 * I))
        H = rng.standard_normal((d, K * 2**I))
        lam = float(rng.uniform(0.001, 0.1))
        gW, gH = layer_peeled_grad(LayerPeeledState(W, H, lam))
        num = central_difference(lambda: layer_peeled_loss(LayerPeeledState(W, H, lam)), [W, H])
        errs.append(relative_error([gW, gH], num))
    return {"cases": cases, "max_rel_error": max(errs), "passed": max(errs) < rel_tol}


def check_ds_grads(cases=20, rel_tol=1e-5):
    errs = []
    for s in range(cases):
        rng = np.random.default_rng([8, s])
        I = int(rng.integers(1, 4))
        dims = [int(rng.integers(3, 7)), int(rng.integers(I + 2, 8)), int(rng.integers(I + 2, 8))]
        if rng.random() < 0.5:
            dims.append(int(rng.integers(I + 2, 8)))
        trainable = bool(rng.random() < 0.5)
        net = init_net(dims, I, mu=float(rng.uniform(0, 1)), seed=s, trainable_head=trainable,
                       weight_decay=float(rng.choice([0.0, 1e-3])))
        for layer in net.backbone:
            layer.bias += 0.1 * rng.standard_normal(layer.bias.shape)  # keep off the ReLU kink
        x = rng.standard_normal((5, dims[0]))
        bits = rng.integers(0, 2, size=(5, I))
        _, grads = ds_grads(net, x, bits)
        num = central_difference(lambda: ds_loss(net, x, bits), net.trainable_params())
        errs.append(relative_error(grads, num))
    return {"cases": cases, "max_rel_error": max(errs), "passed": max(errs) < rel_tol}


def run_nc_suite(nv):
    """All checks for an ``NcValidateConfig``; returns the JSON-ready report."""
    report = {}
    t0 = time.perf_counter()
    report["operator"] = check_operator(nv.max_bits, nv.max_replication, nv.max_feature_dim)
    report["solver"] = check_solver(nv.solver_bits, nv.solver_replication, nv.solver_feature_dim, nv.lam,
                                    nv.max_iters, nv.step_size, nv.loss_tol, nv.collapse_tol)
    report["layer_peeled_grad"] = check_layer_peeled_grads(nv.grad_cases, nv.grad_rel_tol)
    report["ds_grads"] = check_ds_grads(nv.grad_cases, nv.grad_rel_tol)
    report["passed"] = all(v["passed"] for v in report.values() if isinstance(v, dict))
    report["seconds"] = round(time.perf_counter() - t0, 3)
    for v in report.values():
        if isinstance(v, dict):
            for k, x in v.items():
                if isinstance(x, float) and not math.isfinite(x):
                    v[k] = repr(x)
    return report
