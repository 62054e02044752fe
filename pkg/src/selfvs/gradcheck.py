"""Finite-difference verification of every differentiable piece of the student.

Each component builds a scalar function of one or more leaf tensors,
runs :func:`selfvs.tensor.backward` once, and compares a sample of the
analytic gradient entries with central differences.  Which entries are
probed depends on ``seed``; the verdict should not.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .model import ModelConfig, StudentModel, ffn, multi_head_attention, self_attention
from .tensor import Rng, Tensor
from .training import distillation_loss, mse_loss

DEFAULT_TOL = 1e-4
DEFAULT_H = 1e-5


def toy_config() -> ModelConfig:
    return ModelConfig(input_dim=6, d_model=16, n_layers_total=4, n_heads=2, d_head=8, d_ff=32, pe_dim=4,
                       dropout_p=0.2, activation="gelu", teacher_dim=5)


@dataclass
class ComponentResult:
    name: str
    max_rel_error: float
    n_checked: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def relative_error(ad, fd, floor: float = 1e-8) -> np.ndarray:
    ad, fd = np.asarray(ad), np.asarray(fd)
    return np.abs(ad - fd) / np.maximum(np.maximum(np.abs(ad), np.abs(fd)), floor)


def check_function(f: Callable[[], Tensor], leaves: list[Tensor], rng: np.random.Generator, *, h: float = DEFAULT_H,
                   per_tensor: int | None = None, corrupt: bool = False) -> tuple[float, int]:
    """Max relative error between backward() and central differences of ``f``.

    ``f`` closes over ``leaves``; with ``per_tensor`` only that many random
    entries of each leaf are probed.
    """
    for leaf in leaves:
        leaf.grad = None
    T.backward(f())
    worst, count = 0.0, 0
    for leaf in leaves:
        ad = np.zeros(leaf.shape) if leaf.grad is None else leaf.grad.copy()
        if corrupt:
            ad = ad * 1.05 + 1e-3
        if per_tensor is None or per_tensor >= leaf.size:
            idx = range(leaf.size)
        else:
            idx = rng.choice(leaf.size, size=per_tensor, replace=False)
        fd = T.finite_diff_grad(lambda _x: f(), leaf, h, indices=idx)
        for i in idx:
            worst = max(worst, float(relative_error(ad.flat[i], fd.flat[i])))
            count += 1
    return worst, count


def _leaf(rng: np.random.Generator, *shape, scale=1.0) -> Tensor:
    return Tensor(rng.normal(0.0, scale, shape), requires_grad=True)


def _away_from_zero(rng, *shape) -> Tensor:
    x = rng.normal(0.0, 1.0, shape)
    x += np.sign(x) * 0.1
    return Tensor(x, requires_grad=True)


def _primitive_cases(rng: np.random.Generator) -> dict[str, tuple[Callable[[], Tensor], list[Tensor]]]:
    cases = {}
    a, b, w = _leaf(rng, 3, 4), _leaf(rng, 4, 2), rng.normal(size=(3, 2))
    cases["matmul"] = (lambda: (T.matmul(a, b) * Tensor(w)).sum(), [a, b])

    v, m = _leaf(rng, 4), _leaf(rng, 4, 3)
    wv = rng.normal(size=3)
    cases["matmul_vector"] = (lambda: (T.matmul(v, m) * Tensor(wv)).sum(), [v, m])

    s, ws = _leaf(rng, 3, 5), rng.normal(size=(3, 5))
    cases["softmax"] = (lambda: (T.softmax(s, axis=-1) * Tensor(ws)).sum() + (T.softmax(s, axis=0) * Tensor(ws)).sum(), [s])

    r, wr = _away_from_zero(rng, 4, 3), rng.normal(size=(4, 3))
    cases["relu"] = (lambda: (T.relu(r) * Tensor(wr)).sum(), [r])

    g, wg = _leaf(rng, 4, 3, scale=1.5), rng.normal(size=(4, 3))
    cases["gelu_tanh"] = (lambda: (T.gelu(g) * Tensor(wg)).sum(), [g])
    cases["gelu_exact"] = (lambda: (T.gelu(g, approximate="none") * Tensor(wg)).sum(), [g])

    sg, wsg = _leaf(rng, 6, scale=3.0), rng.normal(size=6)
    cases["sigmoid"] = (lambda: (T.sigmoid(sg) * Tensor(wsg)).sum(), [sg])

    x, gamma, beta = _leaf(rng, 4, 8), _leaf(rng, 8), _leaf(rng, 8)
    wl = rng.normal(size=(4, 8))
    cases["layer_norm"] = (lambda: (T.layer_norm(x, gamma, beta) * Tensor(wl)).sum(), [x, gamma, beta])

    d, wd = _leaf(rng, 5, 4), rng.normal(size=(5, 4))
    cases["dropout"] = (lambda: (T.dropout(d, 0.3, True, Rng(11)) * Tensor(wd)).sum(), [d])

    lg = Tensor(rng.uniform(0.5, 2.0, 5), requires_grad=True)
    cases["log_exp"] = (lambda: (T.log(lg) * T.exp(lg * 0.3)).sum(), [lg])

    c1, c2, wc = _leaf(rng, 3, 2), _leaf(rng, 3, 4), rng.normal(size=(3, 6))
    cases["concat"] = (lambda: (T.concat([c1, c2], axis=1) * Tensor(wc)).sum(), [c1, c2])

    bx, bb = _leaf(rng, 3, 4), _leaf(rng, 4)
    cases["broadcast_add_mul"] = (lambda: ((bx + bb) * bb * (bx / 3.0)).sum(), [bx, bb])

    ru = _leaf(rng, 3, 3)
    cases["reused_tensor"] = (lambda: (T.matmul(ru, ru) * ru).sum() + (ru * ru).mean(), [ru])
    return cases


def _subgraph_cases(rng: np.random.Generator) -> dict[str, tuple[Callable[[], Tensor], list[Tensor]]]:
    n, d, a = 7, 16, 8
    X = _leaf(rng, n, d)
    wq, wk, wv = _leaf(rng, d, a, scale=0.4), _leaf(rng, d, a, scale=0.4), _leaf(rng, d, a, scale=0.4)
    w_att = rng.normal(size=(n, a))
    cases = {"self_attention": (lambda: (self_attention(X, wq, wk, wv) * Tensor(w_att)).sum(), [X, wq, wk, wv])}

    heads = [(_leaf(rng, d, a, scale=0.4), _leaf(rng, d, a, scale=0.4), _leaf(rng, d, a, scale=0.4)) for _ in range(2)]
    wo, bo = _leaf(rng, d, d, scale=0.3), _leaf(rng, d)
    w_mha = rng.normal(size=(n, d))
    leaves = [X] + [t for h in heads for t in h] + [wo, bo]
    cases["multi_head_attention"] = (lambda: (multi_head_attention(X, heads, wo, bo) * Tensor(w_mha)).sum(), leaves)

    w1, b1, w2, b2 = _leaf(rng, d, 32, scale=0.3), _leaf(rng, 32), _leaf(rng, 32, d, scale=0.3), _leaf(rng, d)
    cases["ffn"] = (lambda: (ffn(X, w1, b1, w2, b2, "gelu") * Tensor(w_mha)).sum(), [X, w1, b1, w2, b2])
    return cases


def _model_cases(rng: np.random.Generator, seed: int):
    cfg = toy_config()
    model = StudentModel(cfg, seed=seed)
    n = 7
    frames = rng.normal(size=(n, cfg.input_dim))
    teacher = rng.normal(0.0, 2.0, cfg.teacher_dim)
    target = rng.uniform(0.0, 1.0, n)
    params = list(model.params.values())
    encoder = list(model.encoder_parameters().values())

    def distill():
        out = model.forward(frames, training=True, rng=Rng(seed + 101), score_mode="softmax", project=True)
        return distillation_loss(out.projected_repr, teacher)

    def finetune():
        out = model.forward(frames, training=True, rng=Rng(seed + 202), score_mode="sigmoid", project=False)
        return mse_loss(out.scores, target)

    return {"model+distillation": (distill, params), "model+mse": (finetune, encoder)}


def run_gradcheck(seed: int = 0, *, h: float = DEFAULT_H, tol: float = DEFAULT_TOL, per_tensor: int = 4,
                  fault: str | None = None) -> list[ComponentResult]:
    """Run the full suite; ``fault`` names a component whose analytic gradient is deliberately corrupted."""
    rng = np.random.default_rng(seed)
    results = []
    groups = [(_primitive_cases(rng), None), (_subgraph_cases(rng), None), (_model_cases(rng, seed), per_tensor)]
    for cases, limit in groups:
        for name, (f, leaves) in cases.items():
            err, count = check_function(f, leaves, rng, h=h, per_tensor=limit, corrupt=(fault == name))
            results.append(ComponentResult(name, err, count, tol))
    return results


def component_names() -> list[str]:
    rng = np.random.default_rng(0)
    return list(_primitive_cases(rng)) + list(_subgraph_cases(rng)) + list(_model_cases(rng, 0))


def format_results(results: list[ComponentResult], elapsed: float | None = None) -> str:
    lines = [f"{'component':<24} {'max rel err':>12} {'checked':>8}  verdict"]
    for r in results:
        lines.append(f"{r.name:<24} {r.max_rel_error:12.3e} {r.n_checked:8d}  {'ok' if r.passed else 'FAIL'}")
    if elapsed is not None:
        lines.append(f"elapsed {elapsed:.2f}s")
    return "\n".join(lines)


if __name__ == "__main__":
    t0 = time.perf_counter()
    res = run_gradcheck()
    print(format_results(res, time.perf_counter() - t0))
