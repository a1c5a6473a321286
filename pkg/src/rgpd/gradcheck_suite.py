"""Finite-difference checks for every registered op and every composite layer.

Each case builds a small random problem from a seed and returns the function
under test with its inputs. Op cases look the op up in ``REGISTRY`` at call
time so a patched op is what gets checked.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import REGISTRY, Tensor, finite_diff_check, no_grad, ops
from .graph_nn import (Graph, build_temporal_chain_graph, gat_forward, gcn_layer, gcrn_step, init_gat_params,
                       init_gcrn_params)
from .nn import ParamGroup
from .physics import dynamics_forward, init_dynamics_params
from .sac import SACPolicy, actor_loss, critic_loss
from .tau import init_mhsa_params, init_tau_params, multi_head_self_attention, tau_forward

THRESHOLD = 1e-4
Case = Tuple[Callable[..., Tensor], List[Tensor]]


def _t(a) -> Tensor:
    return Tensor(np.asarray(a, dtype=float))


def _away_from_zero(rng, shape, lo=0.1):
    """Values with ``|v| >= lo`` so kinked ops are checked off their kink."""
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(lo, 1.0, size=shape)


def _op(name):
    return lambda *a, **kw: REGISTRY[name](*a, **kw)


def _param_case(layer: Callable[[Tensor, ParamGroup], Tensor], x: Tensor, params: ParamGroup) -> Case:
    keys = sorted(params)
    inputs = [x] + [Tensor(params[k].data) for k in keys]

    def fn(x_, *ps):
        return layer(x_, dict(zip(keys, ps)))

    return fn, inputs


def _ring(n: int) -> Graph:
    return Graph.from_edges(n, [(i, (i + 1) % n) for i in range(n)] + [((i + 1) % n, i) for i in range(n)])


# -- op cases ------------------------------------------------------------------

def _binary(name):
    def case(rng):
        a, b = rng.normal(size=(2, 3)), rng.normal(size=(3,))
        if name == "div":
            b = _away_from_zero(rng, (3,), 0.5)
        if name == "minimum":
            b = a[0] + _away_from_zero(rng, (3,))
        return _op(name), [_t(a), _t(b)]
    return case


def _unary(name, positive=False, kink=False, **kw):
    def case(rng):
        if positive:
            x = rng.uniform(0.2, 2.0, size=(2, 3))
        elif kink:
            x = _away_from_zero(rng, (2, 3))
        else:
            x = rng.normal(size=(2, 3))
        op = _op(name)
        return (lambda a: op(a, **kw)), [_t(x)]
    return case


def _case_clip(rng):
    x = rng.uniform(-2, 2, size=(2, 3))
    x = np.where(np.abs(np.abs(x) - 1.0) < 0.1, x + 0.25, x)
    return (lambda a: _op("clip")(a, -1.0, 1.0)), [_t(x)]


def _case_sum(rng):
    return (lambda a: _op("sum")(a, axis=1, keepdims=True)), [_t(rng.normal(size=(2, 3, 2)))]


def _case_mean(rng):
    return (lambda a: _op("mean")(a, axis=(0, 2))), [_t(rng.normal(size=(2, 3, 2)))]


def _case_reshape(rng):
    return (lambda a: _op("reshape")(a, (3, 2))), [_t(rng.normal(size=(2, 3)))]


def _case_transpose(rng):
    return (lambda a: _op("transpose")(a, (2, 0, 1))), [_t(rng.normal(size=(2, 3, 2)))]


def _case_getitem(rng):
    return (lambda a: _op("getitem")(a, (slice(None), [0, 2, 2]))), [_t(rng.normal(size=(2, 3)))]


def _case_concat(rng):
    return (lambda a, b: _op("concat")([a, b], axis=-1)), [_t(rng.normal(size=(2, 2))), _t(rng.normal(size=(2, 3)))]


def _case_stack(rng):
    return (lambda a, b: _op("stack")([a, b], axis=1)), [_t(rng.normal(size=(2, 3))), _t(rng.normal(size=(2, 3)))]


def _case_matmul(rng):
    return _op("matmul"), [_t(rng.normal(size=(2, 2, 3))), _t(rng.normal(size=(3, 2)))]


def _case_softmax(rng):
    mask = np.array([[True, True, False], [True, True, True]])
    return (lambda a: _op("softmax")(a, axis=-1, mask=mask)), [_t(rng.normal(size=(2, 2, 3)))]


def _case_power(rng):
    return (lambda a: _op("power")(a, 2.5)), [_t(rng.uniform(0.2, 2.0, size=(2, 3)))]


def _case_dilated(rng):
    op = _op("dilated_depthwise_conv1d")
    return (lambda x, k: op(x, k, dilation=2)), [_t(rng.normal(size=(2, 3, 7))), _t(rng.normal(size=(3, 3)))]


def _case_depthwise(rng):
    return _op("depthwise_conv1d"), [_t(rng.normal(size=(2, 3, 6))), _t(rng.normal(size=(3, 3)))]


def _case_pointwise(rng):
    return _op("pointwise_conv"), [_t(rng.normal(size=(2, 3, 5))), _t(rng.normal(size=(3, 2)))]


OP_CASES: Dict[str, Callable[[np.random.Generator], Case]] = {
    "add": _binary("add"), "sub": _binary("sub"), "mul": _binary("mul"), "div": _binary("div"),
    "neg": _unary("neg"), "power": _case_power, "minimum": _binary("minimum"), "clip": _case_clip,
    "exp": _unary("exp"), "log": _unary("log", positive=True), "tanh": _unary("tanh"),
    "sigmoid": _unary("sigmoid"), "relu": _unary("relu", kink=True),
    "leaky_relu": _unary("leaky_relu", kink=True, slope=0.2), "elu": _unary("elu", kink=True),
    "softplus": _unary("softplus"), "sum": _case_sum, "mean": _case_mean, "reshape": _case_reshape,
    "transpose": _case_transpose, "getitem": _case_getitem, "concat": _case_concat, "stack": _case_stack,
    "matmul": _case_matmul, "softmax": _case_softmax, "dilated_depthwise_conv1d": _case_dilated,
    "depthwise_conv1d": _case_depthwise, "pointwise_conv": _case_pointwise,
}


# -- layer cases -------------------------------------------------------------------

def _case_gcn(rng):
    g = _ring(4)
    W = Tensor(rng.normal(size=(3, 2)))
    x = _t(rng.normal(size=(2, 4, 3)))
    return (lambda h, w: gcn_layer(h, g, w, activation=ops.tanh)), [x, W]


def _mixed_scores(x: np.ndarray, params: ParamGroup, adj: np.ndarray) -> bool:
    Wh = x[:, None] @ params["W"].data
    s = (Wh @ params["a_dst"].data) + np.swapaxes(Wh @ params["a_src"].data, -1, -2)
    pos = np.where(adj > 0, s > 0, False).any(axis=-1)
    neg = np.where(adj > 0, s < 0, False).any(axis=-1)
    return bool(np.all((pos & neg).any(axis=(0, 2))))


def _case_gat(rng):
    # when every score in a row has one sign, a_dst shifts the row uniformly and softmax
    # cancels it; if that holds for a whole head the true a_dst gradient is 0 and only
    # roundoff is left to compare, so draw until each head has a mixed-sign row
    g = build_temporal_chain_graph(4)
    adj = g.adjacency()
    for _ in range(1000):
        params = init_gat_params(rng, 3, 2, heads=2)
        x = rng.normal(size=(2, 4, 3))
        if _mixed_scores(x, params, adj):
            break
    return _param_case(lambda h, p: gat_forward(h, g, p, activation=ops.tanh), _t(x), params)


def _case_gcrn(rng):
    g = _ring(3)
    params = init_gcrn_params(rng, 2, 3)
    for k in params:
        if k.startswith("b_"):
            params[k] = Tensor(rng.normal(0, 0.3, size=params[k].shape))
    h_prev = _t(rng.normal(size=(2, 3, 3)))
    fn, inputs = _param_case(lambda x, p: gcrn_step(x, p["__h"], g, p), _t(rng.normal(size=(2, 3, 2))),
                             {**params, "__h": h_prev})
    return fn, inputs


def _case_tau(rng):
    params = init_tau_params(rng, 3, 3, 3)
    return _param_case(lambda h, p: tau_forward(h, p, dilation=2), _t(rng.normal(size=(2, 3, 6))), params)


def _case_mhsa(rng):
    params = init_mhsa_params(rng, 4, 2)
    return _param_case(lambda h, p: multi_head_self_attention(h, p, 2), _t(rng.normal(size=(2, 5, 4))), params)


def _case_dynamics(rng):
    params = init_dynamics_params(rng, 3, width=4)
    y = _t(rng.normal(size=(2, 5)))
    t = np.linspace(0.0, 1.0, 5)[None].repeat(2, axis=0)
    fn, inputs = _param_case(lambda f, p: dynamics_forward(f, p["__y"], t, p), _t(rng.normal(size=(2, 5, 3))),
                             {**params, "__y": y})
    return fn, inputs


def _small_policy(seed: int) -> SACPolicy:
    # random biases keep ReLU inputs off the kink that zero biases put them on for dead rows
    policy = SACPolicy(state_dim=3, action_dim=1, hidden=4, seed=seed)
    rng = np.random.default_rng(seed)
    for group in (policy.actor, *policy.critics, *policy.targets):
        for k, t in group.items():
            if k.startswith("b"):
                t.data = rng.normal(0.0, 0.5, size=t.shape)
    return policy


def _relu_margin(group: ParamGroup, x: np.ndarray) -> float:
    """Smallest |input| to any ReLU of a 3-layer policy/critic MLP."""
    h, worst = x, np.inf
    for i in range(2):
        h = h @ group[f"W{i}"].data + group[f"b{i}"].data
        worst = min(worst, float(np.abs(h).min()))
        h = np.maximum(h, 0.0)
    return worst


_MARGIN = 1e-3


def _case_actor(rng):
    # redraw until no ReLU input lies within reach of the finite-difference step
    for _ in range(100):
        policy = _small_policy(int(rng.integers(1 << 30)))
        s = rng.normal(size=(4, 3))
        noise = rng.normal(size=(4, 1))
        with no_grad():
            a = policy.rsample(Tensor(s), noise)[0].data
            q1 = policy.q_value(policy.critics[0], s, a).data
            q2 = policy.q_value(policy.critics[1], s, a).data
        sa = np.concatenate([s, a], axis=1)
        if min(_relu_margin(policy.actor, s), *(_relu_margin(c, sa) for c in policy.critics),
               float(np.abs(q1 - q2).min())) > _MARGIN:
            break
    keys = sorted(policy.actor)
    inputs = [Tensor(policy.actor[k].data) for k in keys]

    def fn(*ps):
        policy.actor = dict(zip(keys, ps))
        return actor_loss(policy, s, noise)

    return fn, inputs


def _case_critic(rng):
    for _ in range(100):
        policy = _small_policy(int(rng.integers(1 << 30)))
        batch = {"s": rng.normal(size=(4, 3)), "a": rng.uniform(-0.4, 0.4, size=(4, 1)), "r": rng.normal(size=4),
                 "s2": rng.normal(size=(4, 3)), "d": rng.integers(0, 2, size=4).astype(float)}
        if _relu_margin(policy.critics[0], np.concatenate([batch["s"], batch["a"]], axis=1)) > _MARGIN:
            break
    noise = rng.normal(size=(4, 1))
    keys = sorted(policy.critics[0])
    inputs = [Tensor(policy.critics[0][k].data) for k in keys]
    other = policy.critics[1]

    def fn(*ps):
        policy.critics = (dict(zip(keys, ps)), other)
        return critic_loss(policy, batch, noise)

    return fn, inputs


LAYER_CASES: Dict[str, Callable[[np.random.Generator], Case]] = {
    "gcn_layer": _case_gcn, "gat_forward": _case_gat, "gcrn_step": _case_gcrn, "tau_forward": _case_tau,
    "multi_head_self_attention": _case_mhsa, "dynamics_net": _case_dynamics, "sac_actor_loss": _case_actor,
    "sac_critic_loss": _case_critic,
}


@dataclass
class GradcheckRow:
    name: str
    max_rel_err: float
    seeds: int

    @property
    def passed(self) -> bool:
        return self.max_rel_err < THRESHOLD


def all_cases() -> Dict[str, Callable[[np.random.Generator], Case]]:
    missing = set(REGISTRY) - set(OP_CASES)
    if missing:
        raise RuntimeError(f"registered ops without a gradcheck case: {sorted(missing)}")
    return {**OP_CASES, **LAYER_CASES}


def run_gradcheck(seeds: Iterable[int] = range(100), names: Optional[Sequence[str]] = None,
                  base_seed: int = 0) -> List[GradcheckRow]:
    """One row per case: the worst relative error over all seeds."""
    cases = all_cases()
    rows = []
    seeds = list(seeds)
    for name in names or list(cases):
        worst = 0.0
        for s in seeds:
            rng = np.random.default_rng([base_seed, s])
            fn, inputs = cases[name](rng)
            worst = max(worst, finite_diff_check(fn, inputs, seed=s))
        rows.append(GradcheckRow(name, worst, len(seeds)))
    return rows


def format_table(rows: Sequence[GradcheckRow]) -> str:
    width = max(len(r.name) for r in rows)
    lines = [f"{'op':<{width}}  {'max_rel_err':>12}  status"]
    lines += [f"{r.name:<{width}}  {r.max_rel_err:12.3e}  {'ok' if r.passed else 'FAIL'}" for r in rows]
    return "\n".join(lines)


def timed_gradcheck(seeds: Iterable[int] = range(100), base_seed: int = 0) -> Tuple[List[GradcheckRow], float]:
    t0 = time.perf_counter()
    rows = run_gradcheck(seeds, base_seed=base_seed)
    return rows, time.perf_counter() - t0
