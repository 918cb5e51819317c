"""Alternating minimax training engine and the baseline methods.

The segmenter plays against a critic (gambler or discriminator) in an
alternating schedule of S segmenter updates then G critic updates. All
randomness is derived functionally from (seed, epoch), so a run is a pure
function of its config and dataset, and resuming from a checkpoint
continues the exact same trajectory.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError, NotNormalizedError, NumericalAbort
from .losses import (
    IGNORE_INDEX,
    discriminator_loss,
    embedding_loss,
    focal_loss,
    gambling_loss,
    generator_adversarial_loss,
    mean_cross_entropy,
    normalize_betting_map,
    one_hot,
)
from .metrics import evaluate_segmentation, hard_predictions
from .models import (
    ArchitectureSpec,
    EncoderDecoder,
    PatchDiscriminator,
    build_gambler,
    build_patch_discriminator,
    build_segmenter,
    save_checkpoint,
    set_requires_grad,
)

METHODS = ("ce", "focal", "adversarial", "elgan", "gambling")

# Budget invariant asserted on every betting map used during training.
BUDGET_TOL = 1e-6


@dataclass
class TrainConfig:
    """Full declarative description of one training run."""

    method: str = "gambling"
    epochs: int = 12
    batch_size: int = 8
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.99
    weight_decay: float = 5e-4
    lambda_adv: float = 1.0
    beta_smooth: float = 0.02
    gamma_focal: float = 2.0
    seg_iters: int = 1
    critic_iters: int = 2
    seed: int = 0
    eval_every: int = 3  # epochs between validation evaluations
    blocks: int = 3
    base_width: int = 8
    gambler_blocks: int | None = None  # default: blocks - 1
    disc_blocks: int = 3
    embedding_layer: int = -1
    lr_decay: bool = True
    checkpoint_every: int | None = None  # epochs; None = final only
    final_window: int = 10  # eval points averaged for the final confidence
    # CE-only warm-up epochs before the minimax phase. Conventional
    # adversarial training needs this to avoid collapsing to a confident
    # constant map; the gambling method converges from scratch.
    pretrain_epochs: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.two_player and (self.seg_iters < 1 or self.critic_iters < 1):
            raise ConfigError("seg_iters and critic_iters must be >= 1 for two-player methods")
        if self.lambda_adv < 0 or self.beta_smooth < 0 or self.gamma_focal < 0:
            raise ConfigError("lambda, beta and gamma must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if not 0 <= self.pretrain_epochs <= self.epochs:
            raise ConfigError("pretrain_epochs must lie in [0, epochs]")

    @property
    def two_player(self) -> bool:
        return self.method in ("adversarial", "elgan", "gambling")


@dataclass
class LogRecord:
    step: int
    epoch: int
    lr: float
    loss_total: float
    loss_ce: float | None
    loss_adv: float | None
    loss_critic: float | None
    mean_iou: float
    mean_bf: float
    mean_hausdorff: float
    conf_mean: float
    conf_std: float
    wall_time: float


LOG_COLUMNS = [
    "step", "epoch", "lr", "loss_total", "loss_ce", "loss_adv", "loss_critic",
    "mean_iou", "mean_bf", "mean_hausdorff", "conf_mean", "conf_std", "wall_time",
]


@dataclass
class TrainLog:
    records: list[LogRecord] = field(default_factory=list)

    def signature(self) -> str:
        """Canonical string over all deterministic fields (wall time excluded)."""
        rows = []
        for r in self.records:
            vals = [getattr(r, c) for c in LOG_COLUMNS if c != "wall_time"]
            rows.append(",".join("" if v is None else repr(v) for v in vals))
        return "\n".join(rows)

    def write_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(",".join(LOG_COLUMNS) + "\n")
            for r in self.records:
                vals = [getattr(r, c) for c in LOG_COLUMNS]
                fh.write(",".join("" if v is None else repr(v) for v in vals) + "\n")

    @staticmethod
    def read_csv(path) -> "TrainLog":
        log = TrainLog()
        with open(path) as fh:
            header = fh.readline().strip().split(",")
            if header != LOG_COLUMNS:
                raise ConfigError(f"unexpected training log columns in {path}")
            for line in fh:
                cells = line.rstrip("\n").split(",")
                kwargs = {}
                for col, cell in zip(LOG_COLUMNS, cells):
                    if cell == "":
                        kwargs[col] = None
                    elif col in ("step", "epoch"):
                        kwargs[col] = int(cell)
                    else:
                        kwargs[col] = float(cell)
                log.records.append(LogRecord(**kwargs))
        return log


def track_confidence(log: TrainLog, final_window: int = 10):
    """Confidence curve [(step, mean, std)] plus the final-window average."""
    series = [(r.step, r.conf_mean, r.conf_std) for r in log.records]
    if not series:
        return [], float("nan")
    tail = series[-final_window:]
    return series, float(np.mean([m for _, m, _ in tail]))


def _to_tensors(samples, use_clean: bool):
    """Stack Samples into (x, y) tensors; ignored pixels get IGNORE_INDEX."""
    xs, ys = [], []
    for s in samples:
        xs.append(torch.from_numpy(np.ascontiguousarray(s.rgb.transpose(2, 0, 1))))
        label = (s.clean if use_clean else s.noisy).copy()
        label[s.ignore] = IGNORE_INDEX
        ys.append(torch.from_numpy(label))
    return torch.stack(xs).float(), torch.stack(ys).long()


def _assert_budget(bets: torch.Tensor) -> None:
    sums = bets.detach().double().sum(dim=(-2, -1))
    dev = (sums - 1.0).abs().max().item()
    if dev > BUDGET_TOL:
        raise NotNormalizedError(f"betting map violated the budget invariant (deviation {dev:.3g})")


class Trainer:
    """Owns the models and optimizers for one configured run."""

    def __init__(self, config: TrainConfig, num_classes: int):
        self.config = config
        self.num_classes = num_classes
        torch.manual_seed(config.seed)
        seg_spec = ArchitectureSpec(
            role="segmenter", blocks=config.blocks, base_width=config.base_width,
            in_channels=3, out_channels=num_classes,
        )
        self.segmenter = build_segmenter(seg_spec, num_classes)
        self.gambler: EncoderDecoder | None = None
        self.discriminator: PatchDiscriminator | None = None
        opts = {"lr": config.lr, "betas": (config.beta1, config.beta2),
                "weight_decay": config.weight_decay}
        self.opt_seg = torch.optim.Adam(self.segmenter.parameters(), **opts)
        self.opt_critic = None
        if config.method == "gambling":
            g_blocks = config.gambler_blocks if config.gambler_blocks is not None else max(config.blocks - 1, 1)
            g_spec = ArchitectureSpec(role="gambler", blocks=g_blocks, base_width=config.base_width,
                                      in_channels=3 + num_classes, out_channels=1)
            self.gambler = build_gambler(g_spec)
            self.opt_critic = torch.optim.Adam(self.gambler.parameters(), **opts)
        elif config.method in ("adversarial", "elgan"):
            d_spec = ArchitectureSpec(role="discriminator", blocks=config.disc_blocks,
                                      base_width=config.base_width, in_channels=3 + num_classes,
                                      out_channels=1)
            self.discriminator = build_patch_discriminator(d_spec)
            self.opt_critic = torch.optim.Adam(self.discriminator.parameters(), **opts)

    @property
    def critic(self):
        return self.gambler if self.gambler is not None else self.discriminator

    def set_lr(self, lr: float) -> None:
        for opt in (self.opt_seg, self.opt_critic):
            if opt is not None:
                for group in opt.param_groups:
                    group["lr"] = lr

    def betting_map(self, x: torch.Tensor, pred: torch.Tensor, label: torch.Tensor) -> torch.Tensor:
        raw = self.gambler(torch.cat([x, pred], dim=1)).squeeze(1)
        bets = normalize_betting_map(raw, self.config.beta_smooth, ignore=label == IGNORE_INDEX)
        _assert_budget(bets)
        return bets

    def gambler_step(self, x: torch.Tensor, y: torch.Tensor) -> dict:
        """One critic update minimizing the (negative) gambling objective.

        The segmenter is frozen: its forward runs without grad, so its
        parameters are bit-identical before and after.
        """
        with torch.no_grad():
            pred = self.segmenter(x)
        bets = self.betting_map(x, pred, y)
        loss = gambling_loss(pred, y, bets)
        self._check_finite(loss, "gambler")
        self.opt_critic.zero_grad()
        loss.backward()
        self.opt_critic.step()
        return {"loss_critic": loss.item()}

    def segmenter_loss(self, x: torch.Tensor, y: torch.Tensor, flow_b: bool = True):
        """Segmenter objective: CE - lambda * gambling, sharing one forward pass.

        With lambda_adv = 1 this is the literal two-term form. Because the
        gambler objective keeps its 1/(w*h) factor on top of the unit betting
        budget, the raw adversarial term is ~w*h times smaller than the CE
        term; lambda_adv is where that scale is absorbed (lambda = w*h makes
        the term an ordinary bet-weighted mean CE). The logged loss_adv is
        the unscaled -gambling term, the exact negative of the gambler's
        objective on the same inputs.

        ``flow_b=False`` severs the gradient path through the gambler input
        (diagnostic only); the betting map values are unchanged.
        """
        pred = self.segmenter(x)
        gambler_in = pred if flow_b else pred.detach()
        bets = self.betting_map(x, gambler_in, y)
        ce = mean_cross_entropy(pred, y)
        g = gambling_loss(pred, y, bets)
        return ce - self.config.lambda_adv * g, {"loss_ce": ce.item(), "loss_adv": (-g).item()}

    def segmenter_step(self, x: torch.Tensor, y: torch.Tensor, flow_b: bool = True) -> dict:
        """One segmenter update; the gambler is frozen but conducts input gradients."""
        set_requires_grad(self.gambler, False)
        try:
            loss, parts = self.segmenter_loss(x, y, flow_b=flow_b)
            self._check_finite(loss, "segmenter")
            self.opt_seg.zero_grad()
            loss.backward()
            self.opt_seg.step()
        finally:
            set_requires_grad(self.gambler, True)
        return {"loss_total": loss.item(), **parts}

    def discriminator_step(self, x: torch.Tensor, y: torch.Tensor) -> dict:
        with torch.no_grad():
            pred = self.segmenter(x)
        fake = self.discriminator(torch.cat([x, pred], dim=1))
        real = self.discriminator(torch.cat([x, one_hot(y, self.num_classes)], dim=1))
        loss = discriminator_loss(fake, real)
        self._check_finite(loss, "discriminator")
        self.opt_critic.zero_grad()
        loss.backward()
        self.opt_critic.step()
        return {"loss_critic": loss.item()}

    def adversarial_seg_step(self, x: torch.Tensor, y: torch.Tensor) -> dict:
        set_requires_grad(self.discriminator, False)
        try:
            pred = self.segmenter(x)
            ce = mean_cross_entropy(pred, y)
            if self.config.method == "adversarial":
                score = self.discriminator(torch.cat([x, pred], dim=1))
                adv = generator_adversarial_loss(score, self.config.lambda_adv)
            else:  # elgan
                fake_emb = self.discriminator.embed(torch.cat([x, pred], dim=1), self.config.embedding_layer)
                with torch.no_grad():
                    real_emb = self.discriminator.embed(
                        torch.cat([x, one_hot(y, self.num_classes)], dim=1), self.config.embedding_layer
                    )
                adv = self.config.lambda_adv * embedding_loss(fake_emb, real_emb)
            loss = ce + adv
            self._check_finite(loss, "segmenter")
            self.opt_seg.zero_grad()
            loss.backward()
            self.opt_seg.step()
        finally:
            set_requires_grad(self.discriminator, True)
        return {"loss_total": loss.item(), "loss_ce": ce.item(), "loss_adv": adv.item()}

    def pixelwise_step(self, x: torch.Tensor, y: torch.Tensor, force_ce: bool = False) -> dict:
        pred = self.segmenter(x)
        if self.config.method == "focal" and not force_ce:
            loss = focal_loss(pred, y, self.config.gamma_focal)
        else:
            loss = mean_cross_entropy(pred, y)
        self._check_finite(loss, "segmenter")
        self.opt_seg.zero_grad()
        loss.backward()
        self.opt_seg.step()
        return {"loss_total": loss.item(), "loss_ce": loss.item()}

    def training_step(self, x: torch.Tensor, y: torch.Tensor, cycle_pos: int,
                      pretrain: bool = False) -> dict:
        """Dispatch one update according to the method and alternation position."""
        cfg = self.config
        if pretrain:
            return self.pixelwise_step(x, y, force_ce=True)
        if not cfg.two_player:
            return self.pixelwise_step(x, y)
        seg_turn = cycle_pos % (cfg.seg_iters + cfg.critic_iters) < cfg.seg_iters
        if cfg.method == "gambling":
            return self.segmenter_step(x, y) if seg_turn else self.gambler_step(x, y)
        return self.adversarial_seg_step(x, y) if seg_turn else self.discriminator_step(x, y)

    def _check_finite(self, loss: torch.Tensor, role: str) -> None:
        if not torch.isfinite(loss).all():
            raise NumericalAbort(f"non-finite {role} loss")

    def predict(self, x: torch.Tensor, batch_size: int = 16) -> torch.Tensor:
        self.segmenter.eval()
        with torch.no_grad():
            chunks = [self.segmenter(x[i : i + batch_size]) for i in range(0, len(x), batch_size)]
        self.segmenter.train()
        return torch.cat(chunks)

    def state_dict(self) -> dict:
        state = {"segmenter": self.segmenter.state_dict(), "opt_seg": self.opt_seg.state_dict()}
        if self.critic is not None:
            state["critic"] = self.critic.state_dict()
            state["opt_critic"] = self.opt_critic.state_dict()
        return state

    def load_state_dict(self, state: dict) -> None:
        self.segmenter.load_state_dict(state["segmenter"])
        self.opt_seg.load_state_dict(state["opt_seg"])
        if self.critic is not None:
            self.critic.load_state_dict(state["critic"])
            self.opt_critic.load_state_dict(state["opt_critic"])


def evaluate_model(trainer: Trainer, x_val: torch.Tensor, y_val: torch.Tensor):
    """Metric report of the current segmenter on a validation tensor pair."""
    preds = trainer.predict(x_val)
    hard = hard_predictions(preds.numpy())
    labels = y_val.numpy()
    report = evaluate_segmentation(list(hard), list(labels), trainer.num_classes,
                                   preds_soft=list(preds.numpy()))
    return report


def _epoch_batches(n: int, batch_size: int, seed: int, epoch: int):
    order = np.random.default_rng([seed, epoch]).permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def run_training(
    config: TrainConfig,
    train_samples,
    val_samples,
    out_dir,
    resume: bool = False,
    meta: dict | None = None,
    stop_after_epoch: int | None = None,
) -> TrainLog:
    """Execute one full run; writes logs, checkpoints and resolved_config.json.

    Validation always scores against clean labels, even when training
    targets are noisy. Deterministic given (config, dataset): rerunning with
    the same inputs reproduces the log signature bit for bit.
    ``stop_after_epoch`` checkpoints and returns early (controlled
    interruption); a later ``resume=True`` call continues the exact same
    trajectory.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    num_classes = _infer_num_classes(train_samples)
    trainer = Trainer(config, num_classes)
    x_train, y_train = _to_tensors(train_samples, use_clean=False)
    x_val, y_val = _to_tensors(val_samples, use_clean=True)

    log = TrainLog()
    start_epoch = 0
    global_step = 0
    state_path = out / "training_state.pt"
    if resume:
        if not state_path.exists():
            raise ConfigError(f"cannot resume: {state_path} does not exist")
        state = torch.load(state_path, weights_only=False)
        trainer.load_state_dict(state["trainer"])
        start_epoch = state["next_epoch"]
        global_step = state["global_step"]
        log.records = [LogRecord(**r) for r in state["log"]]

    with open(out / "resolved_config.json", "w") as fh:
        json.dump({"config": asdict(config), "num_classes": num_classes,
                   "n_train": len(train_samples), "n_val": len(val_samples),
                   **(meta or {})}, fh, indent=2)

    batches_per_epoch = len(_epoch_batches(len(train_samples), config.batch_size, config.seed, 0))
    total_steps = config.epochs * batches_per_epoch
    t0 = time.monotonic()
    try:
        pretrain_steps = config.pretrain_epochs * batches_per_epoch
        for epoch in range(start_epoch, config.epochs):
            epoch_losses: dict[str, list[float]] = {}
            pretrain = epoch < config.pretrain_epochs
            for batch_idx in _epoch_batches(len(train_samples), config.batch_size, config.seed, epoch):
                if config.lr_decay:
                    trainer.set_lr(config.lr * (1.0 - global_step / total_steps))
                idx = torch.from_numpy(np.ascontiguousarray(batch_idx))
                parts = trainer.training_step(x_train[idx], y_train[idx],
                                              global_step - pretrain_steps, pretrain=pretrain)
                for key, val in parts.items():
                    epoch_losses.setdefault(key, []).append(val)
                global_step += 1
            if (epoch + 1) % config.eval_every == 0 or epoch == config.epochs - 1:
                report = evaluate_model(trainer, x_val, y_val)
                means = {k: float(np.mean(v)) for k, v in epoch_losses.items()}
                log.records.append(LogRecord(
                    step=global_step, epoch=epoch,
                    lr=trainer.opt_seg.param_groups[0]["lr"],
                    loss_total=means.get("loss_total", means.get("loss_critic", float("nan"))),
                    loss_ce=means.get("loss_ce"),
                    loss_adv=means.get("loss_adv"),
                    loss_critic=means.get("loss_critic"),
                    mean_iou=report.mean_iou, mean_bf=report.mean_bf,
                    mean_hausdorff=report.mean_hausdorff,
                    conf_mean=report.confidence_mean, conf_std=report.confidence_std,
                    wall_time=time.monotonic() - t0,
                ))
                log.write_csv(out / "train_log.csv")
            if config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
                _save_state(trainer, state_path, epoch + 1, global_step, log)
            if stop_after_epoch is not None and epoch + 1 >= stop_after_epoch:
                _save_state(trainer, state_path, epoch + 1, global_step, log)
                log.write_csv(out / "train_log.csv")
                return log
    except NumericalAbort as abort:
        path = out / "diagnostic.pt"
        torch.save(trainer.state_dict(), path)
        abort.checkpoint_path = path
        raise

    _save_state(trainer, state_path, config.epochs, global_step, log)
    _save_models(trainer, out, global_step)
    log.write_csv(out / "train_log.csv")
    series, final_conf = track_confidence(log, config.final_window)
    with open(out / "summary.json", "w") as fh:
        json.dump({
            "method": config.method, "seed": config.seed,
            "final_confidence_mean": final_conf,
            "final_mean_iou": log.records[-1].mean_iou if log.records else None,
            "final_mean_bf": log.records[-1].mean_bf if log.records else None,
            "final_mean_hausdorff": log.records[-1].mean_hausdorff if log.records else None,
            "eval_points": len(series),
            "log_signature_sha256": _sha256(log.signature()),
        }, fh, indent=2)
    return log


def _sha256(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


def _infer_num_classes(samples) -> int:
    top = 0
    for s in samples:
        valid = s.clean[~s.ignore]
        if valid.size:
            top = max(top, int(valid.max()))
    return top + 1


def _save_state(trainer: Trainer, state_path: Path, next_epoch: int,
                global_step: int, log: TrainLog) -> None:
    torch.save({
        "trainer": trainer.state_dict(),
        "next_epoch": next_epoch,
        "global_step": global_step,
        "log": [asdict(r) for r in log.records],
    }, state_path)


def _save_models(trainer: Trainer, out: Path, step: int) -> None:
    cfg = trainer.config
    meta = {"step": step, "seed": cfg.seed, "method": cfg.method,
            "beta_smooth": cfg.beta_smooth,
            "config_hash": _sha256(json.dumps(asdict(cfg), sort_keys=True))}
    save_checkpoint(trainer.segmenter, trainer.segmenter.spec, out / "segmenter.pt", meta)
    if trainer.gambler is not None:
        save_checkpoint(trainer.gambler, trainer.gambler.spec, out / "gambler.pt", meta)
    if trainer.discriminator is not None:
        save_checkpoint(trainer.discriminator, trainer.discriminator.spec, out / "discriminator.pt", meta)
