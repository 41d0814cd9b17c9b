"""Central finite-difference checks of the reverse-mode gradients.

Errors are measured per tensor as ``||analytic - numeric|| / max(||analytic||,
||numeric||, 1e-8)`` so that entries with near-zero gradient do not dominate.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .model import ModelConfig, init_params, model_forward
from .numerics import Tensor
from .train import l2_loss

FD_STEP = 1e-5
TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    rel_error: float
    entries: int

    @property
    def ok(self) -> bool:
        return self.rel_error < TOLERANCE


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    # the floor keeps exactly-zero gradients from turning FD noise into 100% error
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / denom)


def numeric_grad(f: Callable[[], float], t: Tensor, step: float = FD_STEP,
                 entries: Sequence[int] | None = None) -> np.ndarray:
    """Central differences of ``f`` w.r.t. the listed flat entries of ``t``."""
    flat = t.data.reshape(-1)
    idx = range(flat.size) if entries is None else entries
    out = np.zeros(flat.size)
    for i in idx:
        orig = flat[i]
        flat[i] = orig + step
        hi = f()
        flat[i] = orig - step
        lo = f()
        flat[i] = orig
        out[i] = (hi - lo) / (2.0 * step)
    return out.reshape(t.shape)


def check_tensors(build: Callable[[], Tensor], tensors: dict[str, Tensor],
                  max_entries: int | None = None,
                  rng: np.random.Generator | None = None) -> list[CheckResult]:
    """Compare reverse-mode and numeric gradients of ``build()`` for each tensor.

    With ``max_entries`` set, only that many randomly chosen entries per tensor
    are differenced and compared.
    """
    rng = rng or np.random.default_rng(0)
    grads = nx.grad(build(), tensors.values())
    results = []
    for (name, t), g in zip(tensors.items(), grads):
        entries = None
        if max_entries is not None and t.data.size > max_entries:
            entries = np.sort(rng.choice(t.data.size, max_entries, replace=False))
        num = numeric_grad(lambda: float(build().data), t, entries=entries)
        if entries is not None:
            ana, num = g.reshape(-1)[entries], num.reshape(-1)[entries]
        else:
            ana = g
        results.append(CheckResult(name, relative_error(ana, num),
                                   t.data.size if entries is None else len(entries)))
    return results


def check_model(seed: int = 0, config: ModelConfig | None = None, batch: int = 2,
                max_entries: int | None = None) -> list[CheckResult]:
    """Gradient of the L2 loss w.r.t. every parameter tensor, in float64."""
    config = config or ModelConfig(channels=24, mixers=1)
    params = init_params(config, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 1)
    # perturb norm scales/shifts away from 1/0 so their gradients are generic
    for name, t in params.items():
        if "ln_" in name:
            t.data += rng.normal(0.0, 0.1, size=t.shape)
    x = rng.normal(0.0, 0.5, size=(batch, config.joint_count, 2))
    y = rng.normal(0.0, 0.5, size=(batch, config.joint_count, 3))

    def build():
        return l2_loss(model_forward(params, x), y)

    return check_tensors(build, dict(params.items()), max_entries=max_entries, rng=rng)


def _weighted(out: Tensor, w: np.ndarray) -> Tensor:
    return nx.sum_all(nx.mul(out, Tensor(w)))


def check_ops(seed: int = 0) -> list[CheckResult]:
    """One randomized finite-difference check per differentiable op."""
    rng = np.random.default_rng(seed)

    def leaf(*shape):
        return Tensor(rng.normal(size=shape), requires_grad=True)

    cases: list[tuple[str, Callable[..., Tensor], list[Tensor]]] = []
    a, b = leaf(2, 3, 4), leaf(4)
    cases.append(("add", lambda: nx.add(a, b), [a, b]))
    c, d = leaf(2, 3, 4), leaf(3, 1)
    cases.append(("mul", lambda: nx.mul(c, d), [c, d]))
    e, f = leaf(2, 3, 4), leaf(4, 5)
    cases.append(("matmul", lambda: nx.matmul(e, f), [e, f]))
    g1, g2 = leaf(2, 3, 4), leaf(2, 4, 3)
    cases.append(("matmul_batched", lambda: nx.matmul(g1, g2), [g1, g2]))
    h1, h2 = leaf(3, 2), leaf(3, 4)
    cases.append(("concat_channels", lambda: nx.concat_channels([h1, h2]), [h1, h2]))
    s = leaf(3, 6)
    cases.append(("split_channels",
                  lambda: nx.mul(nx.split_channels(s, (2, 4))[1], 2.0), [s]))
    ln_x, ln_s, ln_b = leaf(2, 3, 5), leaf(5), leaf(5)
    cases.append(("layer_norm", lambda: nx.layer_norm(ln_x, ln_s, ln_b), [ln_x, ln_s, ln_b]))
    sm = leaf(2, 3, 4)
    cases.append(("softmax_rows", lambda: nx.softmax_rows(sm), [sm]))
    ge = leaf(3, 4)
    cases.append(("gelu", lambda: nx.gelu(ge), [ge]))
    ms = leaf(3, 4)
    cases.append(("mean_sq", lambda: nx.mean_sq(ms), [ms]))
    tr = leaf(2, 3, 4)
    cases.append(("transpose", lambda: nx.transpose(tr, (2, 0, 1)), [tr]))
    rs = leaf(2, 6)
    cases.append(("reshape", lambda: nx.reshape(rs, (3, 4)), [rs]))
    tk = leaf(2, 5, 3)
    cases.append(("take_rows", lambda: nx.take_rows(tk, [4, 0, 4, 2]), [tk]))
    sc = leaf(2, 3, 3)
    cases.append(("scatter_rows", lambda: nx.scatter_rows(sc, [4, 1, 2], 6), [sc]))

    results = []
    for name, fn, leaves in cases:
        w = rng.normal(size=fn().shape)
        res = check_tensors(lambda: _weighted(fn(), w), {str(i): t for i, t in enumerate(leaves)})
        results.append(CheckResult(name, max(r.rel_error for r in res),
                                   sum(r.entries for r in res)))
    return results
