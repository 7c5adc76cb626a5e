"""Alternating joint optimization of the translation and task networks.

Every k-th iteration updates the translation module (discriminators first,
then generators) while the task networks only provide frozen context; the
other iterations update the stereo and flow networks on translated synthetic
batches plus real-image feature warping, with the translation module frozen.
Freezing is enforced structurally: frozen passes run without graph recording,
so their parameters can never accumulate gradients.
"""

from __future__ import annotations

import os
import struct
import warnings
from dataclasses import dataclass, field, fields

import numpy as np

from . import losses as L
from . import metrics as M
from .autograd import Tensor, backward, concat, no_grad, zero_grads
from .dataio import CHECKPOINT_MAGIC, Reader, pack_tensor
from .errors import ConfigError, FormatError, UsageError
from .networks import (build_discriminator, build_extractor, build_flow_net,
                       build_generator, build_stereo_net)
from .scenegen import read_dataset, split_domains
from .warping import WarpField, multiscale_warp_loss

CHECKPOINT_VERSION = 1
RUNNING_DECAY = np.float32(0.98)


@dataclass
class TrainConfig:
    k: int = 5
    total_iters: int = 400
    batch_size: int = 2
    lr_translation: float = 2e-4
    lr_disp: float = 1e-3
    lr_flow: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    flow_weight_decay: float = 0.01
    weights: L.LossWeights = field(default_factory=L.LossWeights)
    seed: int = 0
    eval_every: int = 100
    channels_base: int = 8
    max_disp: int = 16
    max_flow: int = 8
    val_count: int = 40
    gamma_stages: float = 0.9
    objective: str = "full"          # "full" or "source_only"
    d1_mode: str = "or"

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        for name in ("lr_translation", "lr_disp", "lr_flow"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.objective not in ("full", "source_only"):
            raise ConfigError(f"unknown objective {self.objective!r}")
        if self.total_iters % self.k:
            warnings.warn(f"total_iters={self.total_iters} is not a multiple of "
                          f"k={self.k}; the last alternation window is partial")


# -- optimizer -------------------------------------------------------------------

def adam_update(params: dict, grads: dict, moments: dict, lr: float,
                betas: tuple, weight_decay: float = 0.0, eps: float = 1e-8) -> None:
    """One bias-corrected Adam step; weight decay is decoupled (AdamW style)."""
    b1, b2 = betas
    moments["t"] += 1
    t = moments["t"]
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise UsageError(f"gradient shape {g.shape} != parameter {p.data.shape}")
        m = moments["m"][name]
        v = moments["v"][name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        step = (lr / c1) * m / (np.sqrt(v / c2) + eps)
        p.data = p.data - step.astype(p.data.dtype)
        if weight_decay:
            p.data = p.data - (lr * weight_decay) * p.data


class Adam:
    def __init__(self, params: dict, lr: float, betas: tuple, weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.weight_decay = weight_decay
        self.moments = {
            "m": {n: np.zeros_like(p.data) for n, p in params.items()},
            "v": {n: np.zeros_like(p.data) for n, p in params.items()},
            "t": 0,
        }

    def step(self) -> None:
        grads = {n: p.grad for n, p in self.params.items() if p.grad is not None}
        adam_update(self.params, grads, self.moments, self.lr, self.betas,
                    self.weight_decay)

    def zero_grad(self) -> None:
        zero_grads(self.params.values())


# -- training state ----------------------------------------------------------------

@dataclass
class TrainState:
    config: TrainConfig
    iteration: int
    nets: dict
    opts: dict
    rng: np.random.Generator
    running: dict


def init_state(config: TrainConfig) -> TrainState:
    s = config.seed
    nets = {
        "gen_a2b": build_generator(s * 10 + 1, config.channels_base),
        "gen_b2a": build_generator(s * 10 + 2, config.channels_base),
        "disc_a": build_discriminator(s * 10 + 3, config.channels_base),
        "disc_b": build_discriminator(s * 10 + 4, config.channels_base),
        "stereo": build_stereo_net(s * 10 + 5, config.max_disp, config.channels_base),
        "flow": build_flow_net(s * 10 + 6, config.max_flow, config.channels_base),
        "extractor": build_extractor(s * 10 + 7),
    }
    betas = (config.adam_beta1, config.adam_beta2)
    gen_params = _merge_params({"gen_a2b": nets["gen_a2b"], "gen_b2a": nets["gen_b2a"]})
    disc_params = _merge_params({"disc_a": nets["disc_a"], "disc_b": nets["disc_b"]})
    opts = {
        "gen": Adam(gen_params, config.lr_translation, betas),
        "disc": Adam(disc_params, config.lr_translation, betas),
        "stereo": Adam(nets["stereo"].parameters(), config.lr_disp, betas),
        "flow": Adam(nets["flow"].parameters(), config.lr_flow, betas,
                     weight_decay=config.flow_weight_decay),
    }
    rng = np.random.default_rng(np.random.PCG64(config.seed))
    running = {k: np.float32(0.0) for k in L.BREAKDOWN_KEYS}
    return TrainState(config, 0, nets, opts, rng, running)


def _merge_params(nets: dict) -> dict:
    merged = {}
    for net_name, net in nets.items():
        for pname, p in net.parameters().items():
            merged[f"{net_name}.{pname}"] = p
    return merged


def param_digest(net) -> bytes:
    import hashlib
    h = hashlib.sha256()
    for name in sorted(net.parameters()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(net.parameters()[name].data).tobytes())
    return h.digest()


# -- batching ----------------------------------------------------------------------

def _batch_indices(count: int, batch: int, seed: int, tag: int, iteration: int):
    """Deterministic shuffled batch for one iteration: a pure function of the
    iteration counter, so resumed runs see the identical stream."""
    per_epoch = max(1, count // batch)
    epoch = iteration // per_epoch
    slot = iteration % per_epoch
    perm = np.random.default_rng([seed, tag, epoch]).permutation(count)
    idx = perm[slot * batch:(slot + 1) * batch]
    if idx.size < batch:
        idx = np.concatenate([idx, perm[:batch - idx.size]])
    return idx


def _stack(samples, attr):
    return Tensor(np.concatenate([getattr(s, attr) for s in samples], axis=0))


def make_batch(samples, indices):
    chosen = [samples[i] for i in indices]
    batch = {
        "left": _stack(chosen, "left"),
        "right": _stack(chosen, "right"),
        "next_left": _stack(chosen, "next_left"),
    }
    if chosen[0].disparity is not None:
        batch["disparity"] = WarpField("disparity", _stack(chosen, "disparity"))
        batch["flow"] = WarpField("flow", _stack(chosen, "flow"))
        batch["occlusion"] = _stack(chosen, "occlusion")
    return batch


# -- the two step kinds --------------------------------------------------------------

def _zeros_breakdown():
    return {k: np.float32(0.0) for k in L.BREAKDOWN_KEYS}


def translation_step(state: TrainState, syn: dict, real: dict) -> dict:
    nets, cfg = state.nets, state.config
    w = cfg.weights
    ga, gb = nets["gen_a2b"], nets["gen_b2a"]
    da, db = nets["disc_a"], nets["disc_b"]
    x_l, x_r, x_t1 = syn["left"], syn["right"], syn["next_left"]
    y_l = real["left"]
    y_r = real["right"]
    occ = syn["occlusion"]

    fx_l, ax_l = ga.forward(x_l)
    fx_r, ax_r = ga.forward(x_r)
    fx_t1, ax_t1 = ga.forward(x_t1)
    fy_l, _ = gb.forward(y_l)
    rec_x_l, bx_l = gb.forward(fx_l)
    rec_x_r, bx_r = gb.forward(fx_r)
    _, bx_t1 = gb.forward(fx_t1, need_output=False)
    rec_y_l, _ = ga.forward(fy_l)

    # discriminator sub-step on detached fakes
    d_real_b = db.forward(concat([y_l, y_r], axis=0))
    d_fake_b = db.forward(concat([fx_l.detach(), fx_r.detach()], axis=0))
    _, disc_b = L.adversarial_loss(d_real_b, d_fake_b)
    d_real_a = da.forward(concat([x_l, x_r], axis=0))
    d_fake_a = da.forward(fy_l.detach())
    _, disc_a = L.adversarial_loss(d_real_a, d_fake_a)
    state.opts["disc"].zero_grad()
    backward(disc_b + disc_a)
    state.opts["disc"].step()
    state.opts["disc"].zero_grad()

    # generator sub-step against the updated discriminators
    adv_a2b, _ = L.adversarial_loss(d_real_b.detach(),
                                    db.forward(concat([fx_l, fx_r], axis=0)))
    adv_b2a, _ = L.adversarial_loss(d_real_a.detach(), da.forward(fy_l))
    parts = {
        "adv_syn2real_gen": adv_a2b,
        "adv_real2syn_gen": adv_b2a,
        "cycle": (L.cycle_loss(rec_x_l, x_l) + L.cycle_loss(rec_x_r, x_r)) * 0.5
                 + L.cycle_loss(rec_y_l, y_l),
        "perceptual": _maybe(w.lambda_perceptual,
                             lambda: L.perceptual_loss(rec_y_l, y_l, nets["extractor"])
                             + L.perceptual_loss(rec_x_l, x_l, nets["extractor"])),
        "cosine": _maybe(w.lambda_cosine,
                         lambda: L.cosine_loss(rec_y_l, y_l) + L.cosine_loss(rec_x_l, x_l)),
        "disp_warp_syn": _maybe(w.lambda_disp_warp_syn, lambda: (
            multiscale_warp_loss(ax_l, ax_r, syn["disparity"], sign=-1)
            + multiscale_warp_loss(bx_l, bx_r, syn["disparity"], sign=-1))),
        "flow_warp_syn": _maybe(w.lambda_flow_warp_syn, lambda: (
            multiscale_warp_loss(ax_l, ax_t1, syn["flow"], sign=-1, mask=occ)
            + multiscale_warp_loss(bx_l, bx_t1, syn["flow"], sign=-1, mask=occ))),
        "corr_consistency": _maybe(w.lambda_corr,
                                   lambda: L.corr_consistency_loss(x_l, x_r, fx_l, fx_r)),
        "mode_seeking": _maybe(w.lambda_ms,
                               lambda: L.mode_seeking_loss(fx_l, fx_t1, x_l, x_t1)),
    }
    total, translation = L.translation_objective(parts, w)
    state.opts["gen"].zero_grad()
    state.opts["disc"].zero_grad()
    backward(total)
    state.opts["gen"].step()
    state.opts["gen"].zero_grad()
    state.opts["disc"].zero_grad()

    out = _zeros_breakdown()
    for key, val in parts.items():
        out[key] = np.float32(val.item())
    out["adv_syn2real_disc"] = np.float32(disc_b.item())
    out["adv_real2syn_disc"] = np.float32(disc_a.item())
    out["translation"] = np.float32(translation.item())
    out["translation_total"] = np.float32(total.item())
    return out


def _maybe(weight: float, fn):
    """Skip computing a term whose weight is zero (ablations)."""
    if weight == 0.0:
        return Tensor(np.zeros((1, 1, 1, 1), dtype=np.float32))
    return fn()


def task_step(state: TrainState, syn: dict, real: dict | None) -> dict:
    nets, cfg = state.nets, state.config
    w = cfg.weights
    source_only = cfg.objective == "source_only"

    if source_only:
        tx_l, tx_r, tx_t1 = syn["left"], syn["right"], syn["next_left"]
    else:
        with no_grad():
            tx_l = nets["gen_a2b"].translate(syn["left"])
            tx_r = nets["gen_a2b"].translate(syn["right"])
            tx_t1 = nets["gen_a2b"].translate(syn["next_left"])

    stages_d = nets["stereo"].forward(tx_l, tx_r)
    disp_sup = L.supervised_disp_loss(stages_d, syn["disparity"], cfg.gamma_stages)
    stages_f = nets["flow"].forward(tx_l, tx_t1)
    flow_sup = L.supervised_flow_loss(stages_f, syn["flow"], syn["occlusion"],
                                      cfg.gamma_stages)

    zero = Tensor(np.zeros((1, 1, 1, 1), dtype=np.float32))
    disp_warp = zero
    flow_warp = zero
    if not source_only and real is not None:
        y_l, y_r, y_t1 = real["left"], real["right"], real["next_left"]
        with no_grad():
            _, by_l = nets["gen_b2a"].forward(y_l, need_output=False)
            _, by_r = nets["gen_b2a"].forward(y_r, need_output=False)
            _, by_t1 = nets["gen_b2a"].forward(y_t1, need_output=False)
        if w.lambda_disp_warp_real > 0.0:
            pred_d = WarpField("disparity", nets["stereo"].forward(y_l, y_r)[-1])
            disp_warp = (multiscale_warp_loss(by_l, by_r, pred_d, sign=-1)
                         + multiscale_warp_loss(by_r, by_l, pred_d, sign=1))
        if w.lambda_flow_warp_real > 0.0:
            pred_f = WarpField("flow", nets["flow"].forward(y_l, y_t1)[-1])
            flow_warp = (multiscale_warp_loss(by_l, by_t1, pred_f, sign=-1)
                         + multiscale_warp_loss(by_t1, by_l, pred_f, sign=1))

    parts = {"disp_supervised": disp_sup, "disp_warp_real": disp_warp,
             "flow_supervised": flow_sup, "flow_warp_real": flow_warp}
    total_d = L.stereo_objective(parts, w)
    total_f = L.flow_objective(parts, w)

    state.opts["stereo"].zero_grad()
    state.opts["flow"].zero_grad()
    backward(total_d + total_f)
    state.opts["stereo"].step()
    state.opts["flow"].step()
    state.opts["stereo"].zero_grad()
    state.opts["flow"].zero_grad()

    out = _zeros_breakdown()
    for key, val in parts.items():
        out[key] = np.float32(val.item())
    out["stereo_total"] = np.float32(total_d.item())
    out["flow_total"] = np.float32(total_f.item())
    return out


def train_step(state: TrainState, syn: dict, real: dict | None) -> dict:
    """Dispatch one iteration per the alternation schedule and advance it."""
    if "disparity" not in syn:
        raise UsageError("synthetic batch lacks ground-truth fields")
    if state.config.objective == "source_only":
        out = task_step(state, syn, None)
    elif state.iteration % state.config.k == 0:
        out = translation_step(state, syn, real)
    else:
        out = task_step(state, syn, real)
    state.iteration += 1
    for key, val in out.items():
        state.running[key] = (state.running[key] * RUNNING_DECAY
                              + val * (np.float32(1.0) - RUNNING_DECAY))
    return out


# -- checkpoints ----------------------------------------------------------------------

_CFG_SCALARS = ("k", "total_iters", "batch_size", "lr_translation", "lr_disp",
                "lr_flow", "adam_beta1", "adam_beta2", "flow_weight_decay", "seed",
                "eval_every", "channels_base", "max_disp", "max_flow", "val_count",
                "gamma_stages")
_OBJECTIVES = ("full", "source_only")
_D1_MODES = ("or", "and")


def _state_records(state: TrainState) -> dict:
    rec = {}
    for net_name, net in state.nets.items():
        for pname, p in net.parameters().items():
            rec[f"net.{net_name}.{pname}"] = p.data
    for opt_name, opt in state.opts.items():
        for pname, m in opt.moments["m"].items():
            rec[f"opt.{opt_name}.m.{pname}"] = m
        for pname, v in opt.moments["v"].items():
            rec[f"opt.{opt_name}.v.{pname}"] = v
        rec[f"opt.{opt_name}.t"] = _scalar(opt.moments["t"])
    for key, val in state.running.items():
        rec[f"avg.{key}"] = _scalar(val)
    cfg = state.config
    for name in _CFG_SCALARS:
        rec[f"cfg.{name}"] = _scalar(getattr(cfg, name))
    rec["cfg.objective_id"] = _scalar(_OBJECTIVES.index(cfg.objective))
    rec["cfg.d1_mode_id"] = _scalar(_D1_MODES.index(cfg.d1_mode))
    for f in fields(L.LossWeights):
        rec[f"cfg.weights.{f.name}"] = _scalar(getattr(cfg.weights, f.name))
    return rec


def _scalar(v) -> np.ndarray:
    return np.full((1, 1, 1, 1), v, dtype=np.float32)


def save_checkpoint(state: TrainState, path: str) -> None:
    records = _state_records(state)
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(records))]
    for name, arr in records.items():
        nb = name.encode()
        chunks.append(struct.pack("<H", len(nb)))
        chunks.append(nb)
        chunks.append(pack_tensor(arr))
    chunks.append(struct.pack("<Q", state.iteration))
    bg = state.rng.bit_generator.state
    if bg.get("has_uint32"):
        raise UsageError("generator holds a cached 32-bit draw; cannot serialize")
    s128 = bg["state"]["state"]
    inc128 = bg["state"]["inc"]
    chunks.append(struct.pack("<4Q", s128 & (2**64 - 1), s128 >> 64,
                              inc128 & (2**64 - 1), inc128 >> 64))
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(path: str, config: TrainConfig | None = None) -> TrainState:
    """Restore a training state.

    Passing the run's config restores bit-exact hyperparameters for continued
    training; without it the float32 copy embedded in the checkpoint is used,
    which is sufficient for evaluation and translation.
    """
    with open(path, "rb") as fh:
        r = Reader(fh.read(), label=os.path.basename(path))
    r.expect_magic(CHECKPOINT_MAGIC)
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    count = r.u32()
    records = {}
    for _ in range(count):
        nlen = r.u16()
        name = r.take(nlen).decode()
        records[name] = r.tensor()
    iteration = r.u64()
    s_lo, s_hi, i_lo, i_hi = (r.u64() for _ in range(4))
    r.done()

    if config is None:
        def cfgval(name):
            return float(records[f"cfg.{name}"].reshape(-1)[0])

        weights = L.LossWeights(**{
            f.name: cfgval(f"weights.{f.name}") for f in fields(L.LossWeights)})
        config = TrainConfig(
            k=int(cfgval("k")), total_iters=int(cfgval("total_iters")),
            batch_size=int(cfgval("batch_size")),
            lr_translation=cfgval("lr_translation"), lr_disp=cfgval("lr_disp"),
            lr_flow=cfgval("lr_flow"), adam_beta1=cfgval("adam_beta1"),
            adam_beta2=cfgval("adam_beta2"), flow_weight_decay=cfgval("flow_weight_decay"),
            weights=weights, seed=int(cfgval("seed")), eval_every=int(cfgval("eval_every")),
            channels_base=int(cfgval("channels_base")), max_disp=int(cfgval("max_disp")),
            max_flow=int(cfgval("max_flow")), val_count=int(cfgval("val_count")),
            gamma_stages=cfgval("gamma_stages"),
            objective=_OBJECTIVES[int(cfgval("objective_id"))],
            d1_mode=_D1_MODES[int(cfgval("d1_mode_id"))])

    state = init_state(config)
    state.iteration = iteration
    for net_name, net in state.nets.items():
        net.load_values({p: records[f"net.{net_name}.{p}"] for p in net.parameters()})
    for opt_name, opt in state.opts.items():
        for pname in opt.moments["m"]:
            opt.moments["m"][pname] = records[f"opt.{opt_name}.m.{pname}"].astype(np.float32)
            opt.moments["v"][pname] = records[f"opt.{opt_name}.v.{pname}"].astype(np.float32)
        opt.moments["t"] = int(records[f"opt.{opt_name}.t"].reshape(-1)[0])
    for key in state.running:
        state.running[key] = records[f"avg.{key}"].reshape(-1)[0]
    state.rng.bit_generator.state = {
        "bit_generator": "PCG64",
        "state": {"state": s_lo | (s_hi << 64), "inc": i_lo | (i_hi << 64)},
        "has_uint32": 0, "uinteger": 0,
    }
    return state


# -- driver ------------------------------------------------------------------------------

def format_log_line(iteration: int, breakdown: dict) -> str:
    parts = [str(iteration)]
    parts += [f"{k}={float(breakdown[k]):.6g}" for k in L.BREAKDOWN_KEYS]
    return "\t".join(parts)


def run_training(config: TrainConfig, data_dir: str, out_dir: str,
                 resume: str | None = None):
    """Train on a generated dataset directory; returns (state, log lines).

    Writes ``train.log`` and ``checkpoint_final.wck`` into ``out_dir``. The
    validation split is the tail ``val_count`` samples of each domain; only the
    real half is scored.
    """
    state = load_checkpoint(resume, config) if resume else init_state(config)

    samples = read_dataset(data_dir)
    synthetic, real = split_domains(samples)
    if not synthetic or not real:
        raise UsageError("dataset must contain both synthetic and real samples")
    vc = config.val_count
    syn_train = synthetic[:-vc] if vc else synthetic
    real_train = real[:-vc] if vc else real
    real_val = real[-vc:] if vc else real
    if not syn_train or not real_train:
        raise UsageError(f"val_count={vc} leaves no training data")

    os.makedirs(out_dir, exist_ok=True)
    log_lines = []

    def do_eval():
        report = M.evaluate(state.nets, real_val, d1_mode=config.d1_mode,
                            config={"iteration": state.iteration, "seed": config.seed})
        log_lines.append("eval\t" + str(state.iteration) + "\t"
                         + report.to_text().replace("\n", "\t"))
        return report

    do_eval()
    while state.iteration < config.total_iters:
        it = state.iteration
        syn_idx = _batch_indices(len(syn_train), config.batch_size, config.seed, 1, it)
        real_idx = _batch_indices(len(real_train), config.batch_size, config.seed, 2, it)
        breakdown = train_step(state, make_batch(syn_train, syn_idx),
                               make_batch(real_train, real_idx))
        log_lines.append(format_log_line(it, breakdown))
        if config.eval_every and state.iteration % config.eval_every == 0 \
                and state.iteration < config.total_iters:
            do_eval()
    final_report = do_eval()

    log_path = os.path.join(out_dir, "train.log")
    with open(log_path, "w") as fh:
        fh.write("".join(line + "\n" for line in log_lines))
    save_checkpoint(state, os.path.join(out_dir, "checkpoint_final.wck"))
    return state, log_lines, final_report
