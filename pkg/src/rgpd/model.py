"""The RGPD network: GATConv -> GCRN -> SAC modulation -> TAU -> time embedding -> head.

Two graph modes share the same layers:

* ``temporal``: window time steps are the nodes of a chain graph. GATConv
  runs once over the window; the GCRN is unrolled for ``gcrn_steps``
  refinement steps over that same graph, each step taking the GATConv
  output as input and widening the temporal receptive field by one hop.
* ``channel``: sensor channels are nodes of a correlation graph. GATConv
  runs per time step and the GCRN recurs over the window's time steps.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from .autodiff import Tensor, no_grad, ops
from .config import TrainConfig
from .graph_nn import (Graph, build_channel_correlation_graph, build_temporal_chain_graph, gat_forward,
                       gcrn_unroll, init_gat_params, init_gcrn_params)
from .nn import ParamGroup, count_params, init_mlp, linear, xavier_uniform, zeros
from .physics import (PhysicsReport, PhysicsWeights, dynamics_forward, init_dynamics_params,
                      physics_report)
from .sac import SACPolicy, modulate, sample_action, summarize_state
from .tau import init_mhsa_params, init_tau_params, multi_head_self_attention, tau_forward

# parameter groups trained by the supervised optimiser
MODEL_GROUPS = ("gat", "gcrn", "tau", "mhsa", "dynamics", "time_embed", "head")


class RGPDModel:
    def __init__(self, config: TrainConfig, n_channels: int, channel_graph: Optional[Graph] = None):
        self.config = config
        self.n_channels = n_channels
        self.channel_graph = channel_graph
        if config.graph_mode == "channel" and channel_graph is None:
            raise ValueError("channel graph mode needs a correlation graph")
        rng = np.random.default_rng(config.seed)
        c = config
        if c.graph_mode == "temporal":
            gat_in, self.tau_channels = n_channels, c.gcrn_hidden
        else:
            gat_in, self.tau_channels = 1, n_channels * c.gcrn_hidden
        groups: Dict[str, ParamGroup] = {
            "gat": init_gat_params(rng, gat_in, c.gat_dim, c.gat_heads),
            "gcrn": init_gcrn_params(rng, c.gat_dim, c.gcrn_hidden),
        }
        # both branches draw from rng so the other groups do not depend on use_tau
        tau_params = init_tau_params(rng, self.tau_channels, c.tau_k1, c.tau_k2)
        mhsa_params = init_mhsa_params(rng, self.tau_channels, c.mhsa_heads)
        if c.use_tau:
            groups["tau"] = tau_params
        else:
            groups["mhsa"] = mhsa_params
        groups["dynamics"] = init_dynamics_params(rng, self.tau_channels, c.dynamics_width)
        groups["time_embed"] = {"W": xavier_uniform(rng, 1, c.time_embed_dim), "b": zeros(c.time_embed_dim)}
        groups["head"] = init_mlp(rng, [self.tau_channels + c.time_embed_dim, 1])
        self.groups = groups
        action_dim = 1 if c.sac_action_mode == "scalar" else c.gcrn_hidden
        self.sac = SACPolicy(c.gcrn_hidden, action_dim, c.sac_hidden, c.sac_a_max, c.sac_alpha_ent,
                             c.sac_gamma, c.sac_tau, c.sac_lr, seed=c.seed + 1000)
        self._graphs: Dict[int, Graph] = {}

    def parameters(self):
        return [p for g in self.groups.values() for p in g.values()]

    def param_counts(self) -> Dict[str, int]:
        return {name: count_params(g) for name, g in self.groups.items()}

    def graph_for(self, window_length: int) -> Graph:
        if self.config.graph_mode == "channel":
            return self.channel_graph
        if window_length not in self._graphs:
            self._graphs[window_length] = build_temporal_chain_graph(window_length)
        return self._graphs[window_length]

    def snapshot(self) -> Dict[str, np.ndarray]:
        out = {f"{g}/{k}": t.data.copy() for g, grp in self.groups.items() for k, t in grp.items()}
        for g, grp in self.sac.groups().items():
            out.update({f"{g}/{k}": t.data.copy() for k, t in grp.items()})
        return out

    def restore(self, arrays: Dict[str, np.ndarray]) -> None:
        for g, grp in list(self.groups.items()) + list(self.sac.groups().items()):
            for k, t in grp.items():
                key = f"{g}/{k}"
                if key not in arrays:
                    raise KeyError(f"missing parameter {key}")
                if arrays[key].shape != t.data.shape:
                    raise ValueError(f"parameter {key} has shape {arrays[key].shape}, expected {t.data.shape}")
                t.data = np.array(arrays[key], dtype=np.float64)


@dataclass
class ForwardResult:
    y_last: Tensor
    y_seq: Tensor
    pde_loss: Optional[Tensor]
    report: Optional[PhysicsReport]
    state: np.ndarray
    action: np.ndarray
    log_prob: np.ndarray
    n_u: Optional[Tensor] = None


def encode(model: RGPDModel, x: np.ndarray) -> Tensor:
    """GATConv followed by the GCRN unroll; returns ``H_G`` as ``[B, S, N, H]``."""
    c = model.config
    B, T, D = x.shape
    if D != model.n_channels:
        raise ValueError(f"input has {D} channels, model expects {model.n_channels}")
    graph = model.graph_for(T)
    X = Tensor(x, _check=False)
    if c.graph_mode == "temporal":
        try:
            H = gat_forward(X, graph, model.groups["gat"], c.gat_slope)            # [B, T, F]
        except ValueError as exc:
            raise ValueError(f"gat: {exc}") from None
        frames = ops.stack([H] * c.gcrn_steps, axis=1)                              # [B, S, T, F]
    else:
        H = gat_forward(ops.reshape(X, (B, T, D, 1)), graph, model.groups["gat"], c.gat_slope)
        frames = H                                                                   # [B, T, D, F]
    try:
        return gcrn_unroll(frames, graph, model.groups["gcrn"])
    except ValueError as exc:
        raise ValueError(f"gcrn: {exc}") from None


def features_from_hidden(model: RGPDModel, H_G: Tensor) -> Tensor:
    """Per-time-step features ``[B, T, C]`` fed to TAU."""
    if model.config.graph_mode == "temporal":
        return H_G[:, -1]
    B, T, N, H = H_G.shape
    return ops.reshape(H_G, (B, T, N * H))


def forward_pass(model: RGPDModel, batch: Dict[str, np.ndarray], mode: str = "train",
                 weights: Optional[PhysicsWeights] = None, action_override=None,
                 with_physics: Optional[bool] = None) -> ForwardResult:
    """One pass over a batch of equal-length windows.

    ``batch`` holds ``x`` (B×T×D), ``t`` (B×T) and ``broken`` (B). In
    ``train`` mode the SAC action is sampled and physics residuals are
    returned; in ``eval`` mode the action is the policy mean and physics is
    skipped unless ``with_physics`` is set.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be train or eval, got {mode!r}")
    c = model.config
    if with_physics is None:
        with_physics = mode == "train"
    x = np.asarray(batch["x"], dtype=float)
    t = np.asarray(batch["t"], dtype=float)
    B, T, _ = x.shape

    H_G = encode(model, x)
    state = summarize_state(H_G)
    if action_override is not None:
        action = np.broadcast_to(np.asarray(action_override, dtype=float),
                                 (B, model.sac.action_dim)).copy()
        log_prob = np.zeros(B)
        H_G = modulate(H_G, action)
    elif c.use_rl:
        action, log_prob = sample_action(model.sac, state, deterministic=mode == "eval")
        H_G = modulate(H_G, action)
    else:
        action, log_prob = np.zeros((B, model.sac.action_dim)), np.zeros(B)

    feats = features_from_hidden(model, H_G)                                        # [B, T, C]
    if c.use_tau:
        H_T = ops.swapaxes(tau_forward(ops.swapaxes(feats, 1, 2), model.groups["tau"], c.tau_dilation), 1, 2)
    else:
        H_T = multi_head_self_attention(feats, model.groups["mhsa"], c.mhsa_heads)
    te = model.groups["time_embed"]
    t_emb = ops.tanh(linear(Tensor(t[..., None], _check=False), te["W"], te["b"]))  # [B, T, E]
    F = ops.concat([H_T, t_emb], axis=-1)
    head = model.groups["head"]
    y_seq = linear(F, head["W0"], head["b0"])[..., 0]                                # [B, T]
    y_last = y_seq[:, -1]

    pde_loss = report = n_u = None
    if with_physics:
        if weights is None:
            raise ValueError("physics weights are required when physics is computed")
        n_u = dynamics_forward(H_T, y_seq, t, model.groups["dynamics"])
        report = physics_report(y_seq, n_u, np.asarray(batch["broken"], dtype=float), weights)
        pde_loss = report.total
    return ForwardResult(y_last, y_seq, pde_loss, report, state, action, log_prob, n_u)


def build_model(config: TrainConfig, n_channels: int, train_rows: Optional[np.ndarray] = None) -> RGPDModel:
    graph = None
    if config.graph_mode == "channel":
        if train_rows is None:
            raise ValueError("channel graph mode needs training rows to build the correlation graph")
        graph = build_channel_correlation_graph(train_rows, config.corr_threshold)
    return RGPDModel(config, n_channels, graph)


def predict(model: RGPDModel, windows_batch: Dict[str, np.ndarray]) -> np.ndarray:
    with no_grad():
        return forward_pass(model, windows_batch, mode="eval").y_last.data.copy()
