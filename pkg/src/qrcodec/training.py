"""Two-phase training and the rectifier-coefficient ladder search.

The soft phase trains everything end to end with uniform-noise
quantization standing in for rounding.  The predictive phase freezes the
encoder and entropy model, quantizes hard, and trains only the decoder and
rectifier, which leaves every coded payload byte-identical while the
reconstruction improves.

The feature-distance coefficient is picked by trial runs down a decade
ladder (0.1 ... 1e-5); each trial resumes from the soft checkpoint with a
fresh optimizer so trials are comparable.  The full ladder is always
evaluated and the argmin taken; there is no early stop on first
degradation.
"""

from __future__ import annotations

import math
import pickle
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .codec import CodecModel, model_from_bytes, checkpoint_bytes
from .data import (
    ConfigError, PatchDataset, atomic_write_bytes, config_hash,
    extract_patches, write_csv,
)
from .layers import Adam
from .losses import DISTANCE_KINDS, DISTORTION_KINDS, loss_predictive, loss_soft
from .tensor import Tensor

__all__ = [
    "LAMBDA_LADDER", "TRAIN_LOG_COLUMNS", "EXPLORE_REPORT_COLUMNS",
    "TrainingConfig", "ExplorationConfig", "TrainState",
    "train_soft_phase", "train_predictive_phase",
    "alpha_ladder", "explore_alpha",
]

# quality -> rate-distortion trade-off weight for squared-error training
LAMBDA_LADDER = {1: 0.0018, 2: 0.0035, 3: 0.0067, 4: 0.0130}

TRAIN_LOG_COLUMNS = ["epoch", "rate_bpp", "distortion", "feature_distance",
                     "loss", "wall_seconds"]
EXPLORE_REPORT_COLUMNS = ["alpha", "final_loss", "distortion", "epochs_run"]

# an epoch "improves" when it beats the best loss by at least this, relatively
REL_IMPROVEMENT = 1e-6

_SOFT_TAG, _PREDICTIVE_TAG = 0, 1


@dataclass
class TrainingConfig:
    profile: str = "desk"
    q: int = 1
    lam: float | None = None        # config key "lambda"; None = ladder value
    distortion: str = "mse"
    alpha: float = 0.0
    distance: str = "l2"
    phase: str = "soft"
    epochs: int = 30
    batch: int = 8
    lr: float = 1e-3
    seed: int = 0
    n_qr: int = 1
    patience: int = 3

    def __post_init__(self):
        if self.q not in LAMBDA_LADDER:
            raise ConfigError(f"q must be one of {sorted(LAMBDA_LADDER)}, "
                              f"got {self.q}")
        if self.lam is None:
            self.lam = LAMBDA_LADDER[self.q]
        if self.lam <= 0:
            raise ConfigError(f"lambda must be > 0, got {self.lam}")
        if self.alpha < 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        if self.distortion not in DISTORTION_KINDS:
            raise ConfigError(f"distortion must be one of {DISTORTION_KINDS}")
        if self.distance not in DISTANCE_KINDS:
            raise ConfigError(f"distance must be one of {DISTANCE_KINDS}")
        if self.phase not in ("soft", "predictive"):
            raise ConfigError(f"phase must be soft or predictive, got "
                              f"{self.phase!r}")
        for name in ("epochs", "batch", "patience"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.seed < 0:
            raise ConfigError(f"seed must be >= 0, got {self.seed}")
        if self.n_qr < 0:
            raise ConfigError(f"n_qr must be >= 0, got {self.n_qr}")

    _KEYS = {"profile": str, "q": int, "lambda": float, "distortion": str,
             "alpha": float, "distance": str, "phase": str, "epochs": int,
             "batch": int, "lr": float, "seed": int, "n_qr": int,
             "patience": int}

    @classmethod
    def from_dict(cls, cfg: dict) -> "TrainingConfig":
        """Build from flat `key = value` config text (all values strings)."""
        kwargs = {}
        for key, raw in cfg.items():
            if key not in cls._KEYS:
                raise ConfigError(f"unknown config key {key!r}")
            try:
                value = cls._KEYS[key](raw)
            except ValueError:
                raise ConfigError(f"bad value for {key}: {raw!r}")
            kwargs["lam" if key == "lambda" else key] = value
        return cls(**kwargs)

    def as_dict(self) -> dict:
        out = {"profile": self.profile, "q": self.q, "lambda": self.lam,
               "distortion": self.distortion, "alpha": self.alpha,
               "distance": self.distance, "phase": self.phase,
               "epochs": self.epochs, "batch": self.batch, "lr": self.lr,
               "seed": self.seed, "n_qr": self.n_qr,
               "patience": self.patience}
        return {k: str(v) for k, v in out.items()}


@dataclass
class ExplorationConfig:
    alpha_max: float = 1e-1
    alpha_min: float = 1e-5
    factor: float = 0.1
    patience: int = 3

    def __post_init__(self):
        if not (self.alpha_max > self.alpha_min > 0):
            raise ConfigError(f"need alpha_max > alpha_min > 0, got "
                              f"{self.alpha_max}, {self.alpha_min}")
        if not 0 < self.factor < 1:
            raise ConfigError(f"factor must be in (0,1), got {self.factor}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")


def _step_seeds(base: int, tag: int, epoch: int, step: int) -> tuple[int, int]:
    """Independent (patch, noise) seeds; stateless, so resume needs no rng."""
    state = np.random.SeedSequence((base, tag, epoch, step)).generate_state(2)
    return int(state[0]), int(state[1])


class _Stopper:
    """Patience rule: stop after `patience` consecutive epochs that fail to
    beat the best loss so far by REL_IMPROVEMENT relatively."""

    def __init__(self, patience: int, best: float = math.inf, bad: int = 0):
        self.patience, self.best, self.bad = patience, best, bad

    def update(self, loss: float) -> bool:
        if loss < self.best * (1.0 - REL_IMPROVEMENT):
            self.best, self.bad = loss, 0
        else:
            self.best = min(self.best, loss)
            self.bad += 1
        return self.bad >= self.patience


@dataclass
class TrainState:
    """Everything needed to continue a run exactly where it stopped."""

    model_blob: bytes
    quality: int
    optimizer: dict
    next_epoch: int
    best_loss: float
    bad_epochs: int
    history: list = field(default_factory=list)

    def save(self, path: str):
        atomic_write_bytes(path, pickle.dumps(self, protocol=4))

    @classmethod
    def load(cls, path: str) -> "TrainState":
        with open(path, "rb") as f:
            state = pickle.load(f)
        if not isinstance(state, cls):
            raise ValueError(f"{path} is not a training state file")
        return state

    def rebuild_model(self) -> CodecModel:
        model, _ = model_from_bytes(self.model_blob)
        return model


def _run_phase(model: CodecModel, dataset: PatchDataset, cfg: TrainingConfig,
               tag: int, params, step_fn, post_backward=None,
               log_path: str | None = None, state: TrainState | None = None,
               state_path: str | None = None) -> list:
    opt = Adam(params, cfg.lr)
    stopper = _Stopper(cfg.patience)
    history, start = [], 0
    if state is not None:
        opt.load_state_dict(state.optimizer)
        stopper = _Stopper(cfg.patience, state.best_loss, state.bad_epochs)
        history, start = list(state.history), state.next_epoch
    steps = max(1, len(dataset) // cfg.batch)
    comments = [f"config {config_hash(cfg.as_dict())}", f"seed {cfg.seed}"]
    for epoch in range(start, cfg.epochs):
        t0 = time.perf_counter()
        sums = dict.fromkeys(("rate_bpp", "distortion", "feature_distance",
                              "loss"), 0.0)
        for step in range(steps):
            patch_seed, noise_seed = _step_seeds(cfg.seed, tag, epoch, step)
            x = Tensor(extract_patches(dataset, cfg.batch, patch_seed))
            with T.Tape() as tape:
                loss, parts = step_fn(x, np.random.default_rng(noise_seed))
                if not math.isfinite(parts["loss"]):
                    raise FloatingPointError(f"non-finite loss at epoch "
                                             f"{epoch}, batch {step}")
                tape.backward(loss)
            if post_backward is not None:
                post_backward()
            opt.step()
            model.zero_grad()
            for key in sums:
                sums[key] += parts.get(key, 0.0)
        row = {key: sums[key] / steps for key in sums}
        row["epoch"] = epoch
        row["wall_seconds"] = time.perf_counter() - t0
        history.append(row)
        done = stopper.update(row["loss"])
        if log_path is not None:
            write_csv(log_path, TRAIN_LOG_COLUMNS, history, comments)
        if state_path is not None:
            TrainState(checkpoint_bytes(model, cfg.q), cfg.q,
                       opt.state_dict(), epoch + 1, stopper.best,
                       stopper.bad, history).save(state_path)
        if done:
            break
    return history


def train_soft_phase(model: CodecModel, dataset: PatchDataset,
                     cfg: TrainingConfig, log_path: str | None = None,
                     state: TrainState | None = None,
                     state_path: str | None = None):
    """End-to-end training under noise quantization; updates phi, theta, psi.

    The rectifier learns to predict the clean latent from its noisy version
    but does not feed the decoder in this phase.  Returns (model, history).
    """
    def step(x: Tensor, noise_rng: np.random.Generator):
        y = model.encode_analysis(x)
        y_noisy = model.quantize(y, "noise", noise_rng)
        if cfg.alpha != 0.0:
            y_tilde = model.rectify(y_noisy)
        else:
            with T.no_grad():  # logged only; keeps the graph rectifier-free
                y_tilde = model.rectify(y_noisy)
        xhat = model.decode_synthesis(y_noisy)
        return loss_soft(x, xhat, y_noisy, y, y_tilde, model.entropy,
                         cfg.lam, cfg.alpha, cfg.distortion, cfg.distance)

    history = _run_phase(model, dataset, cfg, _SOFT_TAG, model.parameters(),
                         step, log_path=log_path, state=state,
                         state_path=state_path)
    return model, history


def train_predictive_phase(model: CodecModel, dataset: PatchDataset,
                           cfg: TrainingConfig, log_path: str | None = None,
                           state: TrainState | None = None,
                           state_path: str | None = None, tag: int = _PREDICTIVE_TAG):
    """Hard-quantized training of decoder + rectifier with encoder and
    entropy model frozen; payloads stay byte-identical.  Returns
    (model, history)."""
    frozen = model.phi_parameters()

    def check_frozen():
        for p in frozen:
            if p.grad is not None:
                raise AssertionError(f"gradient reached frozen parameter "
                                     f"{p.name}")

    def step(x: Tensor, _noise_rng):
        with T.no_grad():
            y = model.encode_analysis(x)
            y_hat = model.quantize(y, "round")
            rate = model.entropy.rate_bits(y_hat).item() / \
                (x.shape[0] * x.shape[2] * x.shape[3])
        y_tilde = model.rectify(y_hat)
        xhat = model.decode_synthesis(y_tilde)
        loss, parts = loss_predictive(x, xhat, y, y_tilde, cfg.alpha,
                                      cfg.distortion, cfg.distance)
        parts["rate_bpp"] = rate
        return loss, parts

    params = model.theta_parameters() + model.psi_parameters()
    history = _run_phase(model, dataset, cfg, tag, params, step,
                         post_backward=check_frozen, log_path=log_path,
                         state=state, state_path=state_path)
    return model, history


# --------------------------------------------------------------------------
# alpha exploration
# --------------------------------------------------------------------------

def _snap(value: float) -> float:
    # keep decade-ladder rungs exact decimal powers (0.1*0.1 -> 0.01, not
    # 0.010000000000000002)
    return float(f"{value:.12g}")


def alpha_ladder(ecfg: ExplorationConfig) -> list[float]:
    out, a = [], ecfg.alpha_max
    while a > ecfg.alpha_min * (1.0 - 1e-9):
        out.append(a)
        a = _snap(a * ecfg.factor)
    return out


def explore_alpha(model: CodecModel, dataset: PatchDataset | None,
                  ecfg: ExplorationConfig, tcfg: TrainingConfig,
                  run_trial=None):
    """Try every ladder rung, return (best alpha, report rows).

    Each trial restarts from the given soft-phase model with a fresh
    optimizer and an independent seed (base seed XOR rung index), trains
    predictively until the patience rule fires or the epoch budget runs
    out, and reports its best loss.  Ties break toward the larger alpha.
    A distortion target of 1-MS-SSIM scales the returned alpha by 0.1.

    run_trial(alpha, index) -> {"final_loss", "distortion", "epochs_run"}
    substitutes the trial runner (used to validate the search itself).
    """
    if run_trial is None:
        if dataset is None or len(dataset) == 0:
            raise ValueError("exploration needs a non-empty dataset")
        soft_blob = checkpoint_bytes(model, tcfg.q)

        def run_trial(alpha: float, index: int) -> dict:
            trial_model, _ = model_from_bytes(soft_blob)
            trial_cfg = replace(tcfg, alpha=alpha, phase="predictive",
                                seed=tcfg.seed ^ index,
                                patience=ecfg.patience)
            _, history = train_predictive_phase(trial_model, dataset,
                                                trial_cfg, tag=2 + index)
            best = min(r["loss"] for r in history)
            at_best = min(history, key=lambda r: r["loss"])
            return {"final_loss": best,
                    "distortion": at_best["distortion"],
                    "epochs_run": len(history)}

    rows = []
    for index, alpha in enumerate(alpha_ladder(ecfg)):
        result = run_trial(alpha, index)
        rows.append({"alpha": alpha, "final_loss": result["final_loss"],
                     "distortion": result["distortion"],
                     "epochs_run": result["epochs_run"]})
    # ladder descends, so the first strict minimum is the largest tied alpha
    best_alpha = min(rows, key=lambda r: r["final_loss"])["alpha"]
    if tcfg.distortion == "msssim":
        best_alpha = _snap(best_alpha * 0.1)
    return best_alpha, rows
