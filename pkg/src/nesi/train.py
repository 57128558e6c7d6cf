"""Loss functions and training loops that turn a selected axis set into a
trained model.

The DHF net learns both bounding heights plus a separation hinge outside the
silhouette; each HF trains a height net (exact inside the restricted domain,
pushed above ground truth elsewhere) together with a small sigmoid mask net
supervised by binary cross entropy. Normal supervision compares the
analytically derived network normal against the mesh normal and is faded in
by a tanh schedule so early iterations fit heights only.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .bvh import RayIndex
from .explicit import DHF, HF, ESIModel
from .mesh import TriMesh
from .model import HFNets, NESIModel
from .net import (ACT_SIGMOID, AdamState, MLPParams, MLPSpec, adam_step,
                  cosine_lr, forward_full, init_mlp, vjp)
from .rng import STREAM_TRAIN_BATCHES, make_rng
from .sampling import (DHFSamples, HFSamples, PriorExplicit, sample_dhf_sets,
                       sample_hf_sets)

MASK_WIDTH = 16
MASK_HIDDEN_LAYERS = 3
DHF_WIDTHS = (32, 48, 72, 96)
_BCE_CLAMP = 1e-7


class TrainingDivergence(RuntimeError):
    def __init__(self, net_name: str, iteration: int, losses: dict):
        super().__init__(f"{net_name} diverged at iteration {iteration}: {losses}")
        self.net_name = net_name
        self.iteration = iteration
        self.losses = losses


@dataclass
class TrainConfig:
    iterations: int = 10000
    lr0: float = 1e-3
    batch_total: int = 500000
    eps_margin: float = 0.01
    eps_norm: float = 1e-8
    alpha_pivot: float = 4000.0
    alpha_scale: float = 10.0
    seed: int = 0
    n_samples: int = 200000
    n_outside: Optional[int] = None
    mask_grid: int = 256
    grazing_deg: float = 70.0
    n_void: int = 32
    use_void_condition: bool = True
    checkpoint_every: int = 1000
    log_every: int = 50

    def __post_init__(self):
        if self.eps_margin <= 0:
            raise ValueError("eps_margin must be > 0")
        if self.batch_total < 2:
            raise ValueError("batch_total too small")

    @property
    def batch_surface(self) -> int:
        return self.batch_total // 2

    @property
    def batch_outside(self) -> int:
        return self.batch_total - self.batch_surface

    @property
    def batch_restricted(self) -> int:
        return self.batch_surface // 2

    @property
    def batch_unrestricted(self) -> int:
        return self.batch_surface - self.batch_surface // 2


def alpha_normal(i: float, pivot: float = 4000.0, scale: float = 10.0) -> float:
    """Normal-loss weight schedule: 0 early, 0.5 at the pivot, 1 after."""
    return 0.5 * np.tanh((i - pivot) / scale) + 0.5


def _cosine_term(n_pred: np.ndarray, n_gt: np.ndarray, eps_norm: float):
    """Mean (1 - cos) between predicted and ground-truth normals along with
    d(term)/d(n_pred); the denominator is clamped below by eps_norm."""
    dtype = n_pred.dtype
    nn = np.linalg.norm(n_pred, axis=1)
    ng = np.linalg.norm(n_gt, axis=1)
    denom_raw = nn * ng
    clamped = denom_raw < eps_norm
    denom = np.where(clamped, dtype.type(eps_norm), denom_raw)
    dot = (n_pred * n_gt).sum(axis=1)
    cos = dot / denom
    loss = float(np.mean(1.0 - cos))
    n = len(n_pred)
    # d cos / d n_pred; in the clamped branch the denominator is constant.
    grad = n_gt / denom[:, None]
    free = ~clamped
    grad[free] -= (dot[free] / (nn[free] ** 2 * denom[free]))[:, None] * n_pred[free]
    dloss_dn = (-1.0 / n) * grad
    return loss, dloss_dn.astype(dtype, copy=False)


def dhf_loss(params: MLPParams, batch: dict, i: int, cfg: TrainConfig):
    """Height/domain/normal loss over one DHF batch.

    Returns (terms dict incl. "total", grads). The batch carries surface
    records (uv, f_upper, f_lower, n_upper, n_lower) and outside records
    (uv_outside); normals are local-frame and only used when the schedule
    weight is nonzero.
    """
    dtype = params.dtype
    alpha = float(alpha_normal(i, cfg.alpha_pivot, cfg.alpha_scale))
    uv_s = batch["uv"]
    if len(uv_s) == 0:
        raise ValueError("empty surface batch")
    need_jac = alpha > 0.0
    state_s = forward_full(params, uv_s, need_jacobian=need_jac)
    n_s = len(uv_s)
    f_gt = np.stack([batch["f_upper"], batch["f_lower"]], axis=1).astype(dtype, copy=False)
    resid = state_s.y - f_gt
    l_height = float(np.abs(resid).sum(axis=1).mean())
    y_cot_s = np.sign(resid) / dtype.type(n_s)

    terms = {"height": l_height, "alpha": alpha}
    jac_cot = None
    l_normal = 0.0
    if need_jac:
        jac = state_s.jac_lin  # (n, 2, 2); rows: upper, lower heights
        ones = np.ones((n_s, 1), dtype=dtype)
        n_up = np.concatenate([-jac[:, 0, :], ones], axis=1)
        n_dn = np.concatenate([jac[:, 1, :], -ones], axis=1)
        l_up, d_up = _cosine_term(n_up, batch["n_upper"].astype(dtype, copy=False), cfg.eps_norm)
        l_dn, d_dn = _cosine_term(n_dn, batch["n_lower"].astype(dtype, copy=False), cfg.eps_norm)
        l_normal = l_up + l_dn
        jac_cot = np.zeros_like(jac)
        jac_cot[:, 0, :] = dtype.type(alpha) * -d_up[:, :2]
        jac_cot[:, 1, :] = dtype.type(alpha) * d_dn[:, :2]
    terms["normal"] = l_normal

    grads = vjp(params, state_s, y_cot=y_cot_s, jac_cot=jac_cot)

    uv_o = batch["uv_outside"]
    l_domain = 0.0
    if len(uv_o):
        state_o = forward_full(params, uv_o)
        margin = state_o.y[:, 0] - state_o.y[:, 1] + dtype.type(cfg.eps_margin)
        active = margin > 0
        l_domain = float(np.where(active, margin, 0).mean())
        y_cot_o = np.zeros_like(state_o.y)
        scale = dtype.type(1.0 / len(uv_o))
        y_cot_o[:, 0] = np.where(active, scale, dtype.type(0))
        y_cot_o[:, 1] = np.where(active, -scale, dtype.type(0))
        g_o = vjp(params, state_o, y_cot=y_cot_o)
        grads = [(gw + ow, gb + ob) for (gw, gb), (ow, ob) in zip(grads, g_o)]
    terms["domain"] = l_domain
    terms["total"] = l_height + l_domain + alpha * l_normal
    return terms, grads


def hf_loss(height_params: MLPParams, mask_params: MLPParams, batch: dict,
            i: int, cfg: TrainConfig):
    """Height/domain/mask/normal loss over one HF batch.

    Returns (terms, height grads, mask grads). An empty restricted-domain
    batch legally skips the height and normal terms.
    """
    dtype = height_params.dtype
    alpha = float(alpha_normal(i, cfg.alpha_pivot, cfg.alpha_scale))
    terms = {"alpha": alpha, "height": 0.0, "normal": 0.0, "domain": 0.0, "mask": 0.0}
    h_grads = None

    uv_p = batch.get("uv_prime")
    if uv_p is not None and len(uv_p):
        need_jac = alpha > 0.0
        state_p = forward_full(height_params, uv_p, need_jacobian=need_jac)
        n_p = len(uv_p)
        resid = state_p.y[:, 0] - batch["f_prime"].astype(dtype, copy=False)
        terms["height"] = float(np.abs(resid).mean())
        y_cot = (np.sign(resid) / dtype.type(n_p))[:, None]
        jac_cot = None
        if need_jac:
            jac = state_p.jac_lin
            ones = np.ones((n_p, 1), dtype=dtype)
            n_pred = np.concatenate([-jac[:, 0, :], ones], axis=1)
            l_n, d_n = _cosine_term(n_pred, batch["n_prime"].astype(dtype, copy=False),
                                    cfg.eps_norm)
            terms["normal"] = l_n
            jac_cot = np.zeros_like(jac)
            jac_cot[:, 0, :] = dtype.type(alpha) * -d_n[:, :2]
        h_grads = vjp(height_params, state_p, y_cot=y_cot, jac_cot=jac_cot)

    uv_r = batch.get("uv_rest")
    if uv_r is not None and len(uv_r):
        state_r = forward_full(height_params, uv_r)
        margin = (batch["f_rest"].astype(dtype, copy=False) - state_r.y[:, 0]
                  + dtype.type(cfg.eps_margin))
        active = margin > 0
        terms["domain"] = float(np.where(active, margin, 0).mean())
        y_cot_r = np.where(active, -1.0 / len(uv_r), 0.0).astype(dtype)[:, None]
        g_r = vjp(height_params, state_r, y_cot=y_cot_r)
        h_grads = g_r if h_grads is None else [(a + c, b + d)
                                               for (a, b), (c, d) in zip(h_grads, g_r)]
    if h_grads is None:
        h_grads = [(np.zeros_like(w), np.zeros_like(b))
                   for w, b in zip(height_params.weights, height_params.biases)]

    uv_m = batch["mask_uv"]
    t = batch["mask_label"].astype(dtype, copy=False)
    state_m = forward_full(mask_params, uv_m)
    delta = state_m.y[:, 0]
    dc = np.clip(delta, _BCE_CLAMP, 1.0 - _BCE_CLAMP)
    terms["mask"] = float(-(t * np.log(dc) + (1.0 - t) * np.log(1.0 - dc)).mean())
    inside_clamp = (delta >= _BCE_CLAMP) & (delta <= 1.0 - _BCE_CLAMP)
    dmask = np.where(inside_clamp, (dc - t) / (dc * (1.0 - dc)), 0.0) / len(uv_m)
    m_grads = vjp(mask_params, state_m, y_cot=dmask.astype(dtype)[:, None])

    terms["total"] = (terms["height"] + terms["domain"] + terms["mask"]
                      + alpha * terms["normal"])
    return terms, h_grads, m_grads


# ---------------------------------------------------------------------------
# Training loops

@dataclass
class TrainLog:
    rows: list[tuple] = field(default_factory=list)
    header: tuple = ("iteration", "lr", "height", "domain", "mask", "normal",
                     "alpha", "total")

    def add(self, iteration: int, lr: float, terms: dict):
        self.rows.append((iteration, lr, terms.get("height", 0.0),
                          terms.get("domain", 0.0), terms.get("mask", 0.0),
                          terms.get("normal", 0.0), terms.get("alpha", 0.0),
                          terms["total"]))

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(",".join(self.header) + "\n")
        for row in self.rows:
            buf.write(",".join(f"{x:.9g}" if isinstance(x, float) else str(x)
                               for x in row) + "\n")
        return buf.getvalue()


def _snapshot(nets: list[MLPParams], states: list[AdamState]):
    return ([p.copy() for p in nets],
            [AdamState(m=[a.copy() for a in s.m], v=[a.copy() for a in s.v],
                       step=s.step) for s in states])


def _restore(nets: list[MLPParams], states: list[AdamState], snap) -> None:
    params_ckpt, states_ckpt = snap
    for p, src in zip(nets, params_ckpt):
        for dst_w, w in zip(p.weights, src.weights):
            dst_w[...] = w
        for dst_b, b in zip(p.biases, src.biases):
            dst_b[...] = b
    for s, src in zip(states, states_ckpt):
        for dst, a in zip(s.m, src.m):
            dst[...] = a
        for dst, a in zip(s.v, src.v):
            dst[...] = a
        s.step = src.step


def _run_loop(name: str, nets: list[MLPParams], states: list[AdamState],
              cfg: TrainConfig, step: Callable[[int, float], dict]) -> TrainLog:
    """Shared iteration driver: cosine schedule, logging, checkpointing, and
    the reload-and-halve divergence guard. `nets`/`states` must be the same
    objects the step closure mutates."""
    log = TrainLog()
    checkpoint = (_snapshot(nets, states), 0)
    lr_scale = 1.0
    i = 0
    while i < cfg.iterations:
        lr = lr_scale * cosine_lr(i, cfg.iterations, cfg.lr0)
        terms = step(i, lr)
        if not np.isfinite(terms["total"]):
            if lr_scale < 1.0:
                raise TrainingDivergence(name, i, terms)
            snap, it_ckpt = checkpoint
            _restore(nets, states, snap)
            lr_scale = 0.5
            i = it_ckpt
            continue
        if i % cfg.log_every == 0 or i == cfg.iterations - 1:
            log.add(i, lr, terms)
        i += 1
        if i % cfg.checkpoint_every == 0:
            checkpoint = (_snapshot(nets, states), i)
    return log


def train_dhf_net(samples: DHFSamples, width: int, cfg: TrainConfig,
                  stream: int) -> tuple[MLPParams, TrainLog]:
    spec = MLPSpec(width=width, output_dim=2)
    params = init_mlp(spec, cfg.seed)
    adam = AdamState.for_params(params)
    rng = make_rng(cfg.seed, stream)
    n_pool = len(samples.uv)
    n_out = len(samples.uv_outside)
    if n_pool == 0:
        raise ValueError("no DHF surface records")
    uv = samples.uv.astype(np.float32)
    fu = samples.f_upper.astype(np.float32)
    fl = samples.f_lower.astype(np.float32)
    nu = samples.n_upper.astype(np.float32)
    nl = samples.n_lower.astype(np.float32)
    uv_o = samples.uv_outside.astype(np.float32)

    def step(i: int, lr: float) -> dict:
        idx = rng.integers(0, n_pool, size=min(cfg.batch_surface, n_pool))
        batch = {"uv": uv[idx], "f_upper": fu[idx], "f_lower": fl[idx],
                 "n_upper": nu[idx], "n_lower": nl[idx]}
        if n_out:
            odx = rng.integers(0, n_out, size=min(cfg.batch_outside, n_out))
            batch["uv_outside"] = uv_o[odx]
        else:
            batch["uv_outside"] = uv_o
        terms, grads = dhf_loss(params, batch, i, cfg)
        adam_step(adam, params, grads, lr)
        return terms

    log = _run_loop("dhf", [params], [adam], cfg, step)
    return params, log


def train_hf_nets(samples: HFSamples, width: int, cfg: TrainConfig,
                  stream: int) -> tuple[MLPParams, MLPParams, TrainLog]:
    h_spec = MLPSpec(width=width, output_dim=1)
    m_spec = MLPSpec(width=MASK_WIDTH, output_dim=1,
                     hidden_layers=MASK_HIDDEN_LAYERS, output_activation=ACT_SIGMOID)
    h_params = init_mlp(h_spec, cfg.seed)
    m_params = init_mlp(m_spec, cfg.seed + 1)
    h_adam = AdamState.for_params(h_params)
    m_adam = AdamState.for_params(m_params)
    rng = make_rng(cfg.seed, stream)
    uv_p = samples.uv_prime.astype(np.float32)
    f_p = samples.f_prime.astype(np.float32)
    n_p = samples.n_prime.astype(np.float32)
    uv_r = samples.uv_rest.astype(np.float32)
    f_r = samples.f_rest.astype(np.float32)
    uv_m = samples.mask_uv.astype(np.float32)
    t_m = samples.mask_label.astype(np.float32)

    def step(i: int, lr: float) -> dict:
        batch = {"mask_uv": None, "mask_label": None}
        if len(uv_p):
            idx = rng.integers(0, len(uv_p), size=min(cfg.batch_restricted, len(uv_p)))
            batch.update(uv_prime=uv_p[idx], f_prime=f_p[idx], n_prime=n_p[idx])
        if len(uv_r):
            rdx = rng.integers(0, len(uv_r), size=min(cfg.batch_unrestricted, len(uv_r)))
            batch.update(uv_rest=uv_r[rdx], f_rest=f_r[rdx])
        mdx = rng.integers(0, len(uv_m), size=min(cfg.batch_outside, len(uv_m)))
        batch["mask_uv"] = uv_m[mdx]
        batch["mask_label"] = t_m[mdx]
        terms, h_grads, m_grads = hf_loss(h_params, m_params, batch, i, cfg)
        adam_step(h_adam, h_params, h_grads, lr)
        adam_step(m_adam, m_params, m_grads, lr)
        return terms

    log = _run_loop("hf", [h_params, m_params], [h_adam, m_adam], cfg, step)
    return h_params, m_params, log


def hf_width_for(dhf_width: int) -> int:
    """The HF net uses exactly half the DHF width at every detail level."""
    return dhf_width // 2


def train_nesi(mesh: TriMesh, index: RayIndex, esi: ESIModel, width: int,
               cfg: TrainConfig, log_sink: Optional[dict] = None) -> NESIModel:
    """Train the full model for a selected axis set: the DHF net first, then
    each HF's height/mask pair against the explicits preceding it."""
    if width not in DHF_WIDTHS:
        raise ValueError(f"width must be one of {DHF_WIDTHS}")
    dhf_samples = sample_dhf_sets(mesh, index, esi.dhf, cfg.n_samples, cfg.seed,
                                  n_outside=cfg.n_outside)
    dhf_params, dhf_log = train_dhf_net(dhf_samples, width, cfg,
                                        stream=(STREAM_TRAIN_BATCHES << 8) | 0)
    if log_sink is not None:
        log_sink["dhf"] = dhf_log

    hf_nets = []
    prev = [PriorExplicit(kind=DHF, frame=esi.dhf)]
    final_losses = {"dhf": dhf_log.rows[-1][-1] if dhf_log.rows else None}
    for k, hf in enumerate(esi.hfs):
        samples = sample_hf_sets(mesh, index, prev, hf.frame, cfg.n_samples,
                                 cfg.seed + 1000 * (k + 1),
                                 grazing_deg=cfg.grazing_deg, n_void=cfg.n_void,
                                 use_void_condition=cfg.use_void_condition,
                                 mask_grid=cfg.mask_grid,
                                 half_index=hf.half_index)
        h_params, m_params, log = train_hf_nets(samples, hf_width_for(width), cfg,
                                                stream=(STREAM_TRAIN_BATCHES << 8) | (k + 1))
        hf_nets.append(HFNets(frame=hf.frame, height=h_params, mask=m_params,
                              plane=hf.plane))
        prev.append(PriorExplicit(kind=HF, frame=hf.frame))
        final_losses[f"hf{k}"] = log.rows[-1][-1] if log.rows else None
        if log_sink is not None:
            log_sink[f"hf{k}"] = log

    metadata = {
        "seed": cfg.seed,
        "width": width,
        "hf_width": hf_width_for(width),
        "iterations": cfg.iterations,
        "batch_total": cfg.batch_total,
        "n_samples": cfg.n_samples,
        "final_losses": final_losses,
        "energy_trace": [float(e) for e in esi.energy_trace],
    }
    return NESIModel(dhf_frame=esi.dhf, dhf_params=dhf_params, hfs=hf_nets,
                     metadata=metadata)
