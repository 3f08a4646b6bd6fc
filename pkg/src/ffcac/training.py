"""Losses, the cosine-annealed optimizer and the session training loops."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch

from . import encoder as enc
from .classifier import ReconstructionConfig, noise_transform, reconstruct
from .ede import EDEState
from .encoder import EncoderConfig, ParamSet
from .errors import EmptyClass, IncompleteReplayStore, InvalidConfig, InvalidStep, LabelOutOfRange

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    lr0: float = 0.001
    lr_min: float = 0.0
    optimizer: str = "sgd"  # "sgd" (momentum) or "adam"
    momentum: float = 0.9
    weight_decay: float = 0.0
    lam: float = 1.0  # weight of the auxiliary new-class loss
    eta: float = 16.0  # cosine-head scale
    replay_per_class: int | None = None  # None -> K (the shot count)
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise InvalidConfig("epochs must be >= 0")
        if not self.lr0 > self.lr_min >= 0:
            raise InvalidConfig("need lr0 > lr_min >= 0")
        if self.lam < 0:
            raise InvalidConfig("lambda must be >= 0")
        if self.eta <= 0:
            raise InvalidConfig("eta must be > 0")
        if self.optimizer not in ("sgd", "adam"):
            raise InvalidConfig(f"unknown optimizer {self.optimizer!r}")


def derive_seed(*parts) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    if not 0 <= step <= total_steps:
        raise InvalidStep(f"step {step} outside [0, {total_steps}]")
    if total_steps == 0:
        return cfg.lr0
    lr = cfg.lr_min + 0.5 * (cfg.lr0 - cfg.lr_min) * (1.0 + math.cos(math.pi * step / total_steps))
    # the clamp only removes rounding, so both endpoints come out exact
    return min(cfg.lr0, max(cfg.lr_min, lr))


# --------------------------------------------------------------------------
# losses


def cosine_logits_t(e: torch.Tensor, w: torch.Tensor, eta: float) -> torch.Tensor:
    en = e / e.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    wn = w / w.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    return eta * (en @ wn.T)


def base_loss(e: torch.Tensor, y, w: torch.Tensor, eta: float) -> torch.Tensor:
    """Mean cross-entropy of eta-scaled cosine logits."""
    y = torch.as_tensor(y, dtype=torch.long).reshape(-1)
    if y.numel() and (int(y.min()) < 0 or int(y.max()) >= w.shape[0]):
        raise LabelOutOfRange(f"labels must lie in [0, {w.shape[0]})")
    logits = cosine_logits_t(e.reshape(-1, e.shape[-1]), w, eta)
    return torch.nn.functional.cross_entropy(logits, y)


def base_loss_with_grads(e, y, head) -> tuple[float, np.ndarray, np.ndarray]:
    """Loss plus its gradients w.r.t. the embedding(s) and the head weights (float64)."""
    e_t = torch.tensor(np.asarray(e, dtype=np.float64), requires_grad=True)
    w_t = torch.tensor(np.asarray(head.weights, dtype=np.float64), requires_grad=True)
    loss = base_loss(e_t, y, w_t, head.eta)
    ge, gw = torch.autograd.grad(loss, [e_t, w_t])
    return float(loss.detach()), ge.numpy(), gw.numpy()


def inc_loss_terms(main_emb, main_y, new_emb, new_y_local, head_w, aux_w, eta, lam,
                   replay_emb=None, replay_y=None) -> torch.Tensor:
    """Base loss over every seen class plus ``lam`` times the auxiliary new-class loss.

    Replay embeddings join only the base term; the auxiliary term sees the
    new-branch embedding of real samples.
    """
    if lam < 0:
        raise InvalidConfig("lambda must be >= 0")
    if replay_emb is not None and len(replay_emb):
        e = torch.cat([main_emb, torch.as_tensor(replay_emb, dtype=main_emb.dtype)])
        y = torch.cat([torch.as_tensor(main_y, dtype=torch.long), torch.as_tensor(replay_y, dtype=torch.long)])
    else:
        e, y = main_emb, main_y
    loss = base_loss(e, y, head_w, eta)
    if lam == 0:
        return loss
    return loss + lam * base_loss(new_emb, new_y_local, aux_w, eta)


# --------------------------------------------------------------------------
# optimizer


class Optimizer:
    """Updates the trainable tensors of a ParamSet in place; frozen ones are never registered."""

    def __init__(self, params: ParamSet, cfg: TrainConfig):
        self.params = params
        self.names = params.trainable_names()
        tensors = [params[n] for n in self.names]
        if cfg.optimizer == "adam":
            self.opt = torch.optim.Adam(tensors, lr=cfg.lr0, weight_decay=cfg.weight_decay)
        else:
            self.opt = torch.optim.SGD(tensors, lr=cfg.lr0, momentum=cfg.momentum,
                                       weight_decay=cfg.weight_decay)
        self.steps = 0

    def state_params(self) -> ParamSet:
        """Optimizer buffers (momentum / moments) as a ParamSet, for resumable runs."""
        out = {}
        for n in self.names:
            for k, v in self.opt.state.get(self.params[n], {}).items():
                out[f"{n}::{k}"] = torch.as_tensor(v).detach().clone()
        return ParamSet(out)

    def load_state_params(self, buffers: ParamSet) -> None:
        for key, v in buffers.items():
            n, k = key.split("::")
            t = self.params[n]
            self.opt.state[t][k] = v.clone().to(t.dtype) if k != "step" else v.clone()

    def step(self, grads: ParamSet, lr: float) -> None:
        for group in self.opt.param_groups:
            group["lr"] = lr
        for n in self.names:
            self.params[n].grad = grads[n]
        self.opt.step()
        for n in self.names:
            self.params[n].grad = None
        self.steps += 1


def _prototype_rows(emb: np.ndarray, labels: np.ndarray, n_classes: int) -> np.ndarray:
    counts = np.bincount(np.asarray(labels), minlength=n_classes)[:n_classes]
    if np.any(counts == 0):
        raise EmptyClass(f"no training samples for class index {int(np.argmin(counts))}")
    return np.stack([emb[labels == c].mean(axis=0) for c in range(n_classes)])


# --------------------------------------------------------------------------
# session loops


@dataclass
class TrainResult:
    params: ParamSet
    head_w: torch.Tensor
    metrics: list
    steps: int


def finetune_base(pretrained: ParamSet, x, y, cfg: EncoderConfig, tcfg: TrainConfig,
                  head_init=None) -> TrainResult:
    """Fine-tune a full single-branch encoder with the cosine-head loss.

    ``x`` holds the N*K episode spectrograms, ``y`` integer labels 0..N-1.  The
    head starts from the class prototypes of the starting encoder unless
    ``head_init`` is given.  One epoch is one full-episode step.
    """
    params = pretrained.clone().unfreeze()
    y = np.asarray(y)
    n_classes = int(y.max()) + 1
    x_t = torch.as_tensor(np.asarray(x))
    if head_init is None:
        head_init = _prototype_rows(enc.encode_numpy(x, params, cfg), y, n_classes)
    model = params.prefixed("enc.").merged(ParamSet({"head.W": torch.as_tensor(head_init, dtype=params.dtype).clone()}))
    y_t = torch.as_tensor(y, dtype=torch.long)

    def loss_fn(p):
        e = enc.encode_batch(x_t, p.strip("enc."), cfg)
        return base_loss(e, y_t, p["head.W"], tcfg.eta)

    opt = Optimizer(model, tcfg)
    metrics = []
    for epoch in range(tcfg.epochs):
        lr = lr_at(epoch, tcfg.epochs, tcfg)
        loss, g = enc.value_and_grad(model, loss_fn)
        opt.step(g, lr)
        metrics.append({"epoch": epoch, "loss": float(loss), "lr": lr})
    return TrainResult(model.strip("enc."), model["head.W"], metrics, opt.steps)


def train_incremental(state: EDEState, x, y_new, old_stats: list, seen_ids: list, new_ids: list,
                      tcfg: TrainConfig, rcfg: ReconstructionConfig, seed: int,
                      pre=None, tokens=None, shots: int | None = None) -> TrainResult:
    """Train the active branch of a freshly expanded extractor on one session.

    ``y_new`` indexes ``new_ids``; ``old_stats`` must hold one ClassStats per
    id in ``seen_ids``.  ``pre``/``tokens`` are the (frozen) pretrained
    embeddings and shallow tokens of ``x`` and are computed when omitted.
    Each epoch draws fresh replay embeddings for every old class and takes
    one step on the joint loss.
    """
    from .ede import pre_embed, shallow_tokens

    by_id = {s.class_id: s for s in old_stats}
    missing = [c for c in seen_ids if c not in by_id]
    if missing:
        raise IncompleteReplayStore(f"no stored statistics for classes {missing}")
    old = [by_id[c] for c in seen_ids]
    y_new = np.asarray(y_new)
    n_new = len(new_ids)
    n_old = len(old)
    shots = shots or int(np.bincount(y_new).max())
    per_class = tcfg.replay_per_class or shots
    rcfg_epoch = ReconstructionConfig(rcfg.reg_gamma, rcfg.transform, per_class, rcfg.eps_abs, rcfg.max_condition)

    if pre is None:
        pre = pre_embed(state, x)
    if tokens is None:
        tokens = shallow_tokens(state, x)
    pre = torch.as_tensor(pre)
    tokens = torch.as_tensor(tokens)
    branch = state.branches[-1]
    cfg = state.cfg

    with torch.no_grad():
        s_emb = enc.deep_forward(tokens, branch, cfg)
    main = torch.cat([pre, s_emb], dim=1).numpy()
    new_protos = _prototype_rows(main, y_new, n_new)
    aux_init = _prototype_rows(s_emb.numpy(), y_new, n_new)
    head_rows = [s.prototype for s in old] + list(new_protos)
    dtype = branch.dtype
    model = branch.prefixed("s.").merged(ParamSet({
        "head.W": torch.tensor(np.stack(head_rows), dtype=dtype),
        "aux.W": torch.tensor(aux_init, dtype=dtype),
    }))
    transforms = [noise_transform(s, rcfg_epoch) for s in old]
    y_main = torch.as_tensor(y_new + n_old, dtype=torch.long)
    y_local = torch.as_tensor(y_new, dtype=torch.long)
    opt = Optimizer(model, tcfg)
    metrics = []
    for epoch in range(tcfg.epochs):
        if n_old:
            rep = np.concatenate([reconstruct(s, rcfg_epoch, derive_seed(seed, epoch, j), transform=t)
                                  for j, (s, t) in enumerate(zip(old, transforms))])
            rep_y = np.repeat(np.arange(n_old), per_class)
        else:
            rep, rep_y = None, None

        def loss_fn(p):
            s = enc.deep_forward(tokens, p.strip("s."), cfg)
            e = torch.cat([pre.to(s.dtype), s], dim=1)
            return inc_loss_terms(e, y_main, s, y_local, p["head.W"], p["aux.W"], tcfg.eta, tcfg.lam, rep, rep_y)

        lr = lr_at(epoch, tcfg.epochs, tcfg)
        loss, g = enc.value_and_grad(model, loss_fn)
        opt.step(g, lr)
        metrics.append({"epoch": epoch, "loss": float(loss), "lr": lr})
    trained = model.strip("s.")
    state.branches[-1] = trained
    return TrainResult(trained, model["head.W"], metrics, opt.steps)


def finetune_baseline_step(params: ParamSet, x, y, cfg: EncoderConfig, tcfg: TrainConfig) -> TrainResult:
    """Naive fine-tuning of the whole single-branch encoder on the current session only."""
    return finetune_base(params, x, y, cfg, tcfg)


def pretrain(x, y, cfg: EncoderConfig, tcfg: TrainConfig, batch_size: int = 64, seed: int = 0,
             init: ParamSet | None = None, start_epoch: int = 0, on_epoch=None,
             opt_state: ParamSet | None = None) -> TrainResult:
    """Supervised cosine-head training from scratch; stands in for large-scale pretraining.

    Minibatches are reshuffled per epoch with a seed derived from
    (``seed``, epoch), so a run resumed at ``start_epoch`` with the saved
    parameters and optimizer state continues the same trajectory.
    """
    y = np.asarray(y)
    n_classes = int(y.max()) + 1
    if init is None:
        params = enc.init_params(cfg, seed)
        g = torch.Generator().manual_seed(derive_seed(seed, 1))
        w = torch.randn(n_classes, cfg.model_dim, generator=g, dtype=torch.float64).to(params.dtype)
        model = params.prefixed("enc.").merged(ParamSet({"head.W": w}))
    else:
        model = init
    x_all = torch.as_tensor(np.asarray(x))
    y_all = torch.as_tensor(y, dtype=torch.long)
    opt = Optimizer(model, tcfg)
    if opt_state is not None:
        opt.load_state_params(opt_state)
    metrics = []
    total = tcfg.epochs
    for epoch in range(start_epoch, total):
        lr = lr_at(epoch, total, tcfg)
        order = np.random.default_rng(derive_seed(seed, 2, epoch)).permutation(len(y))
        losses = []
        for i in range(0, len(order), batch_size):
            idx = torch.as_tensor(order[i:i + batch_size])
            xb, yb = x_all[idx], y_all[idx]

            def loss_fn(p):
                return base_loss(enc.encode_batch(xb, p.strip("enc."), cfg), yb, p["head.W"], tcfg.eta)

            loss, gr = enc.value_and_grad(model, loss_fn)
            opt.step(gr, lr)
            losses.append(float(loss) * len(idx))
        rec = {"epoch": epoch, "loss": sum(losses) / len(y), "lr": lr}
        metrics.append(rec)
        log.info("pretrain epoch %d loss %.4f", epoch, rec["loss"])
        if on_epoch is not None:
            on_epoch(epoch, model, opt, rec)
    return TrainResult(model.strip("enc."), model["head.W"], metrics, opt.steps)
