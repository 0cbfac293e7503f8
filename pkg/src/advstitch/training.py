"""Standard, routine-adversarial and adaptive-adversarial (AAT) training loops.

Weights (theta) and architecture logits (alpha) are disjoint parameter sets with
their own Adam optimizers. Every step restricts backpropagation to the set it
updates, so a theta step never touches alpha and vice versa.
"""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .attacks import AttackConfig, ImagePair, alignment_metric, pgd, soa
from .cells import arch_parameters, discretize, weight_parameters
from .data import PairDataset
from .errors import AttackDiverged, DegenerateConfiguration, NonFiniteLoss
from .estimator import EstimatorConfig, EstimatorNet
from .geometry import CanvasSpec, canvas_from_homography, corner_error, shared_mask, warp_image
from .losses import loss_H, loss_S
from .reconstructor import ReconstructorNet

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-4
    lr_decay: float = 0.96
    batch_size: int = 16
    epochs: int = 1
    # weight of an extra mean corner-distance term in the supervised objective
    corner_weight: float = 0.0

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_decay ** epoch


@dataclass
class AATConfig:
    lam: float = 1.0
    gamma1: float = 3e-4
    gamma2: float = 1e-4
    epochs: int = 1
    batch_size: int = 16
    lr_decay: float = 0.96
    attack: AttackConfig = field(default_factory=AttackConfig)
    # also fit the homography term in the weight step (default: shared-region term only)
    supervised_theta: bool = False

    def __post_init__(self):
        if self.gamma1 < 0 or self.gamma2 <= 0:
            raise ValueError("gamma1 must be >= 0 and gamma2 > 0")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")


@dataclass
class TrainState:
    model: torch.nn.Module
    theta_opt: torch.optim.Optimizer
    alpha_opt: torch.optim.Optimizer | None
    epoch: int = 0
    seed: int = 0
    history: list[dict] = field(default_factory=list)
    skipped_batches: int = 0

    @property
    def theta(self):
        return weight_parameters(self.model)

    @property
    def alpha(self):
        return arch_parameters(self.model)


def new_state(model: torch.nn.Module, seed: int = 0, lr: float = 1e-4,
              arch_lr: float = 3e-4) -> TrainState:
    theta_opt = torch.optim.Adam(weight_parameters(model), lr=lr)
    alphas = arch_parameters(model)
    alpha_opt = torch.optim.Adam(alphas, lr=arch_lr, betas=(0.5, 0.999)) if alphas else None
    return TrainState(model, theta_opt, alpha_opt, 0, seed)


def build_estimator(config: EstimatorConfig, seed: int, genotypes=None) -> EstimatorNet:
    torch.manual_seed(seed)
    return EstimatorNet(config, genotypes)


def _set_lr(opt, lr):
    for group in opt.param_groups:
        group["lr"] = lr


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def _generator(seed: int, epoch: int, batch: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(np.random.default_rng([seed, epoch, batch]).integers(2**62)))
    return g


def alignment_objective(model, inputs: ImagePair, content: ImagePair, supervised: bool = True,
                        corner_weight: float = 0.0):
    """Per-sample training loss: shared-region term (+ homography term when supervised).

    The homography is predicted from ``inputs`` while the shared-region term
    compares the ``content`` views; both are the same pair in clean training.
    ``corner_weight`` adds the mean corner distance to the supervised loss.
    The matrix difference barely sees the perspective entries, so this term
    speeds up short training runs considerably.
    """
    H = model(inputs.x1, inputs.x2)
    loss = loss_S(content.x1.to(H.dtype), content.x2.to(H.dtype), H)
    if supervised:
        loss = loss + loss_H(H, content.H_gt)
        if corner_weight:
            h, w = content.x1.shape[-2:]
            loss = loss + corner_weight * corner_error(H, content.H_gt, (h, w))
    return loss, H


def _abort(state: TrainState, cause=None):
    snapshot = copy.deepcopy(state.model.state_dict())
    raise NonFiniteLoss(f"non-finite loss at epoch {state.epoch}", snapshot) from cause


def _objective(state: TrainState, *args, **kwargs):
    # offsets are tanh-bounded, so a degenerate DLT here means NaN/Inf got in
    try:
        return alignment_objective(state.model, *args, **kwargs)
    except DegenerateConfiguration as exc:
        _abort(state, exc)


def _step(state: TrainState, loss: torch.Tensor, params, opt):
    if not torch.isfinite(loss):
        _abort(state)
    opt.zero_grad(set_to_none=True)
    loss.backward(inputs=params)
    opt.step()


def _pair(batch: PairDataset) -> ImagePair:
    return ImagePair(batch.x1, batch.x2, batch.H_gt)


def _log_epoch(state, clean, attacked, cerr, lr):
    row = {
        "epoch": state.epoch,
        "clean_ls": float(np.mean(clean)) if clean else float("nan"),
        "attacked_ls": float(np.mean(attacked)) if attacked else float("nan"),
        "corner_error": float(np.mean(cerr)) if cerr else float("nan"),
        "lr": lr,
    }
    state.history.append(row)
    log.info("epoch %(epoch)d clean_ls=%(clean_ls).4f attacked_ls=%(attacked_ls).4f "
             "corner_error=%(corner_error).3f lr=%(lr).3g", row)


def _train_theta(state: TrainState, dataset: PairDataset, epochs: int, config: TrainConfig,
                 attack: AttackConfig | None) -> TrainState:
    h, w = dataset.x1.shape[-2:]
    for _ in range(epochs):
        lr = config.lr_at(state.epoch)
        _set_lr(state.theta_opt, lr)
        clean_ls, attacked_ls, cerr = [], [], []
        order = epoch_order(state.seed, state.epoch, len(dataset))
        for b, batch in enumerate(dataset.batches(config.batch_size, order)):
            pair = _pair(batch)
            inputs = pair
            if attack is not None:
                adv = pgd(state.model, pair, alignment_metric, attack, random_start=True,
                          generator=_generator(state.seed, state.epoch, b), track=False)
                inputs = adv.as_pair(pair.H_gt)
            loss, H = _objective(state, inputs, pair, corner_weight=config.corner_weight)
            _step(state, loss.mean(), state.theta, state.theta_opt)
            with torch.no_grad():
                ls = loss_S(pair.x1.double(), pair.x2.double(), H)
                (attacked_ls if attack is not None else clean_ls).append(float(ls.mean()))
                cerr.append(float(corner_error(H, pair.H_gt, (h, w)).mean()))
        _log_epoch(state, clean_ls, attacked_ls, cerr, lr)
        state.epoch += 1
    return state


def train_standard(state: TrainState, dataset: PairDataset, epochs: int,
                   config: TrainConfig | None = None) -> TrainState:
    """Minimize the homography plus shared-region loss on clean pairs."""
    return _train_theta(state, dataset, epochs, config or TrainConfig(), None)


def train_routine_adversarial(state: TrainState, dataset: PairDataset, epochs: int,
                              attack: AttackConfig, config: TrainConfig | None = None) -> TrainState:
    """Like ``train_standard`` but every batch is replaced by its PGD-attacked version."""
    return _train_theta(state, dataset, epochs, config or TrainConfig(), attack)


def train_aat(state: TrainState, dataset: PairDataset, config: AATConfig) -> TrainState:
    """Adaptive adversarial training: alternate alpha steps and theta steps.

    Each epoch splits the pool in half. For every (train, val) batch pair the
    val batch is attacked with SoA under the current weights, alpha descends the
    clean-plus-``lam``-weighted attacked shared-region loss on val, then theta
    descends the clean shared-region loss on train.
    """
    if state.alpha_opt is None:
        raise ValueError("train_aat needs a model with architecture parameters")
    h, w = dataset.x1.shape[-2:]
    for _ in range(config.epochs):
        lr = config.gamma2 * config.lr_decay ** state.epoch
        _set_lr(state.theta_opt, lr)
        _set_lr(state.alpha_opt, config.gamma1)
        order = epoch_order(state.seed, state.epoch, len(dataset))
        half = len(order) // 2
        train_idx, val_idx = order[:half], order[half:2 * half]
        clean_ls, attacked_ls, cerr = [], [], []
        batches = zip(dataset.batches(config.batch_size, train_idx),
                      dataset.batches(config.batch_size, val_idx))
        for b, (tbatch, vbatch) in enumerate(batches):
            tpair, vpair = _pair(tbatch), _pair(vbatch)
            try:
                adv = soa(state.model, vpair, vpair.H_gt, config.attack, track=False)
            except AttackDiverged as exc:
                state.skipped_batches += 1
                log.warning("skipping batch %d: %s", b, exc)
                continue
            # architecture step on mixed clean + attacked validation data
            clean_v, _ = _objective(state, vpair, vpair, supervised=False)
            atk_v, _ = _objective(state, adv.as_pair(vpair.H_gt), vpair, supervised=False)
            _step(state, clean_v.mean() + config.lam * atk_v.mean(), state.alpha,
                  state.alpha_opt)
            # weight step on clean training data only
            loss, H = _objective(state, tpair, tpair, supervised=config.supervised_theta)
            _step(state, loss.mean(), state.theta, state.theta_opt)
            clean_ls.append(clean_v.mean().item())
            attacked_ls.append(atk_v.mean().item())
            with torch.no_grad():
                cerr.append(float(corner_error(H, tpair.H_gt, (h, w)).mean()))
        _log_epoch(state, clean_ls, attacked_ls, cerr, lr)
        state.epoch += 1
    return state


def finalize(state: TrainState, k: int, dataset: PairDataset, epochs: int,
             config: TrainConfig | None = None, seed: int | None = None):
    """Discretize every cell and retrain fresh weights on clean data.

    Returns ``(genotypes, retrained_state)``.
    """
    model = state.model
    genotypes = [discretize(cell, k) for cell in model.cells]
    seed = state.seed if seed is None else seed
    config = config or TrainConfig()
    fresh = build_estimator(model.config, seed, genotypes)
    new = new_state(fresh, seed, lr=config.lr)
    train_standard(new, dataset, epochs, config)
    return genotypes, new


# ---------------------------------------------------------------------------
# Reconstruction


def warp_pair_to_canvas(x1: torch.Tensor, x2: torch.Tensor, H: torch.Tensor,
                        canvas: CanvasSpec | None = None):
    """Warp ``x1`` by identity and ``x2`` by ``H`` onto a shared canvas."""
    shape = tuple(x1.shape[-2:])
    if canvas is None:
        canvas = canvas_from_homography(H, shape, tuple(x2.shape[-2:]))
    eye = torch.eye(3, dtype=torch.float64)
    w1 = warp_image(x1, eye, canvas).expand(x1.shape[0], -1, -1, -1)
    w2 = warp_image(x2, H, canvas)
    m1 = shared_mask(eye, shape, canvas, dtype=x1.dtype).expand(x1.shape[0], -1, -1, -1)
    m2 = shared_mask(H, tuple(x2.shape[-2:]), canvas, dtype=x2.dtype)
    return w1, w2, (m1, m2), canvas


def reconstruction_loss(out, w1, w2, masks, tv_weight: float = 0.1) -> torch.Tensor:
    """Masked L1 to each warped view plus total variation along the overlap boundary."""
    m1, m2 = masks
    l1 = ((out - w1).abs() * m1).sum((1, 2, 3)) + ((out - w2).abs() * m2).sum((1, 2, 3))
    l1 = l1 / (out.shape[1] * (m1 + m2).sum((1, 2, 3)).clamp_min(1.0))
    overlap = m1 * m2
    edge_x = (overlap[..., :, 1:] - overlap[..., :, :-1]).abs()
    edge_y = (overlap[..., 1:, :] - overlap[..., :-1, :]).abs()
    tv_x = ((out[..., :, 1:] - out[..., :, :-1]).abs() * edge_x).sum((1, 2, 3))
    tv_y = ((out[..., 1:, :] - out[..., :-1, :]).abs() * edge_y).sum((1, 2, 3))
    seam = (tv_x + tv_y) / (edge_x.sum((1, 2, 3)) + edge_y.sum((1, 2, 3))).clamp_min(1.0)
    return l1 + tv_weight * seam


def train_reconstructor(model: ReconstructorNet, dataset: PairDataset, epochs: int,
                        estimator=None, config: TrainConfig | None = None,
                        seed: int = 0, opt: torch.optim.Optimizer | None = None):
    """Fit the reconstructor on pairs aligned by ``estimator`` (or ``H_gt`` when None)."""
    config = config or TrainConfig()
    opt = opt or torch.optim.Adam(model.parameters(), lr=config.lr)
    history = []
    for epoch in range(epochs):
        _set_lr(opt, config.lr_at(epoch))
        order = epoch_order(seed, epoch, len(dataset))
        losses = []
        for batch in dataset.batches(config.batch_size, order):
            if estimator is None:
                H = batch.H_gt
            else:
                with torch.no_grad():
                    H = estimator(batch.x1, batch.x2)
            w1, w2, masks, _ = warp_pair_to_canvas(batch.x1, batch.x2, H)
            out = model(w1, w2, masks)
            loss = reconstruction_loss(out, w1, w2, masks).mean()
            if not torch.isfinite(loss):
                raise NonFiniteLoss("non-finite reconstruction loss")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            losses.append(loss.item())
        history.append(float(np.mean(losses)) if losses else math.nan)
    return history
