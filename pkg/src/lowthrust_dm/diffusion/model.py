"""Training, guided sampling, persistence and the estimator wrapper."""
from __future__ import annotations

import io
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from ..rng import stream, torch_seed
from .network import Denoiser
from .schedule import NoiseSchedule, cosine_schedule

ARTIFACT_FORMAT = "lowthrust-dm-model"
ARTIFACT_VERSION = 1

# substream keys
_INIT, _TRAIN, _VAL, _SAMPLE, _SPLIT = range(1, 6)


class TrainingError(RuntimeError):
    def __init__(self, message, epoch):
        super().__init__(f"{message} (epoch {epoch})")
        self.epoch = epoch


class ArtifactError(ValueError):
    """Model file is missing fields, has the wrong version or does not match."""


@dataclass(frozen=True)
class TrainingConfig:
    epochs: int = 200
    batch_size: int = 256
    learning_rate: float = 0.02
    momentum: float = 0.9
    uncond_prob: float = 0.1
    split_ratio: float = 0.9
    seed: int = 0
    grad_clip: float = 1.0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if not 0.0 <= self.uncond_prob < 1.0:
            raise ValueError("uncond_prob must lie in [0, 1)")
        if not 0.0 < self.split_ratio <= 1.0:
            raise ValueError("split_ratio must lie in (0, 1]")


@dataclass
class Normalizer:
    """Per-coordinate affine map of [lo, hi] onto [-1, 1]."""
    lo: np.ndarray
    hi: np.ndarray
    center: np.ndarray = field(init=False)
    scale: np.ndarray = field(init=False)

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=np.float64)
        self.hi = np.asarray(self.hi, dtype=np.float64)
        self.center = 0.5 * (self.lo + self.hi)
        half = 0.5 * (self.hi - self.lo)
        self.scale = np.where(half > 0, half, 1.0)

    @classmethod
    def fit(cls, X):
        X = np.asarray(X, dtype=np.float64)
        return cls(X.min(axis=0), X.max(axis=0))

    def normalize(self, X):
        return (np.asarray(X, dtype=np.float64) - self.center) / self.scale

    def denormalize(self, Z):
        return np.asarray(Z, dtype=np.float64) * self.scale + self.center


def split_indices(n: int, ratio: float, seed: int):
    perm = stream(seed, _SPLIT).permutation(n)
    n_train = n if ratio >= 1.0 else max(1, min(n - 1, int(round(ratio * n))))
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def _loss(net, schedule_t, z0, cond, uncond, gen):
    n = torch.randint(1, schedule_t.shape[0], (z0.shape[0],), generator=gen)
    eps = torch.randn(z0.shape, generator=gen, dtype=z0.dtype)
    ab = schedule_t[n].reshape(-1, 1)
    zn = ab.sqrt() * z0 + (1.0 - ab).sqrt() * eps
    return torch.mean((net(zn, n, cond, uncond) - eps) ** 2)


def train(Z, alpha, config: TrainingConfig, schedule: NoiseSchedule, network: Denoiser,
          log=None):
    """Fit ``network`` to predict forward-process noise on normalized data ``Z``.

    Returns per-epoch ``(train_loss, val_loss)`` lists; the validation loss
    uses a fixed noise draw so epochs are comparable.
    """
    Z = np.asarray(Z, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64).reshape(-1)
    if Z.ndim != 2 or Z.shape[0] == 0 or Z.shape[0] != alpha.size:
        raise ValueError("need a non-empty (n, d) dataset with one condition per row")
    torch.manual_seed(torch_seed(config.seed, _INIT))
    gen = torch.Generator().manual_seed(torch_seed(config.seed, _TRAIN))
    tr, va = split_indices(Z.shape[0], config.split_ratio, config.seed)
    z_tr = torch.tensor(Z[tr], dtype=torch.float32)
    a_tr = torch.tensor(alpha[tr], dtype=torch.float32)
    z_va = torch.tensor(Z[va], dtype=torch.float32)
    a_va = torch.tensor(alpha[va], dtype=torch.float32)
    ab = torch.tensor(schedule.alpha_bar, dtype=torch.float32)
    opt = torch.optim.SGD(network.parameters(), lr=config.learning_rate, momentum=config.momentum)
    history_train, history_val = [], []
    for epoch in range(config.epochs):
        network.train()
        order = torch.randperm(z_tr.shape[0], generator=gen)
        total, count = 0.0, 0
        for i in range(0, order.numel(), config.batch_size):
            idx = order[i:i + config.batch_size]
            drop = torch.rand(idx.numel(), generator=gen) < config.uncond_prob
            loss = _loss(network, ab, z_tr[idx], a_tr[idx], drop, gen)
            if not torch.isfinite(loss):
                raise TrainingError("training loss diverged", epoch)
            opt.zero_grad()
            loss.backward()
            if config.grad_clip:
                torch.nn.utils.clip_grad_norm_(network.parameters(), config.grad_clip)
            opt.step()
            total += float(loss.detach()) * idx.numel()
            count += idx.numel()
        history_train.append(total / count)
        if z_va.shape[0]:
            network.eval()
            vgen = torch.Generator().manual_seed(torch_seed(config.seed, _VAL))
            with torch.no_grad():
                vloss = float(_loss(network, ab, z_va, a_va,
                                    torch.zeros(z_va.shape[0], dtype=torch.bool), vgen))
            if not math.isfinite(vloss):
                raise TrainingError("validation loss diverged", epoch)
        else:
            vloss = math.nan
        history_val.append(vloss)
        if log is not None:
            log(epoch, history_train[-1], vloss)
    network.eval()
    return history_train, history_val


@torch.no_grad()
def guided_sample(network: Denoiser, schedule: NoiseSchedule, condition: float, w: float,
                  count: int, seed, bounds=None, dim=None) -> np.ndarray:
    """Classifier-free guided ancestral sampling in normalized space.

    ``eps = (w + 1) eps_cond - w eps_uncond``; no noise on the final step;
    the result is clipped per coordinate to ``bounds = (lo, hi)``.
    """
    if w < 0:
        raise ValueError("guidance strength must be non-negative")
    dim = dim or network.dim
    if count == 0:
        return np.empty((0, dim))
    gen = torch.Generator().manual_seed(torch_seed(*np.atleast_1d(seed).tolist(), _SAMPLE))
    z = torch.randn((count, dim), generator=gen, dtype=torch.float64)
    guided = w != 0
    rows = 2 * count if guided else count
    cond = torch.full((rows,), float(condition))
    mask = torch.arange(rows) >= count
    network.eval()
    for n in range(schedule.N, 0, -1):
        steps = torch.full((rows,), n, dtype=torch.long)
        zin = torch.cat([z, z]) if guided else z
        out = network(zin.float(), steps, cond, mask).double()
        eps = out[:count]
        if guided:  # w = 0 reduces to the conditional prediction exactly
            eps = (w + 1.0) * eps - w * out[count:]
        a, ab = schedule.alpha[n], schedule.alpha_bar[n]
        z = (z - (1.0 - a) / math.sqrt(1.0 - ab) * eps) / math.sqrt(a)
        if n > 1:
            z = z + math.sqrt(schedule.beta_tilde[n]) * torch.randn(z.shape, generator=gen,
                                                                   dtype=torch.float64)
    out = z.numpy()
    if bounds is not None:
        out = np.clip(out, bounds[0], bounds[1])
    return out


class DiffusionModel(BaseEstimator):
    """Conditional diffusion model over costate vectors with alpha as the condition.

    ``fit(X, y)`` takes ``X`` of shape (n, 6) and ``y`` the thrust level of
    each row.  ``sample(alpha, count)`` returns costates in physical units.
    """

    def __init__(self, timesteps=1000, width=256, n_blocks=4, emb_dim=128, epochs=200,
                 batch_size=256, learning_rate=0.02, momentum=0.9, uncond_prob=0.1,
                 split_ratio=0.9, guidance=1.0, cond_scale=10.0, seed=0, config_digest=None):
        self.timesteps = timesteps
        self.width = width
        self.n_blocks = n_blocks
        self.emb_dim = emb_dim
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.uncond_prob = uncond_prob
        self.split_ratio = split_ratio
        self.guidance = guidance
        self.cond_scale = cond_scale
        self.seed = seed
        self.config_digest = config_digest

    def _training_config(self):
        return TrainingConfig(epochs=self.epochs, batch_size=self.batch_size,
                              learning_rate=self.learning_rate, momentum=self.momentum,
                              uncond_prob=self.uncond_prob, split_ratio=self.split_ratio,
                              seed=self.seed)

    def fit(self, X, y, log=None):
        X = check_array(X, dtype=np.float64)
        y = check_array(np.asarray(y, dtype=np.float64).reshape(-1, 1)).ravel()
        if y.size != X.shape[0]:
            raise ValueError("X and y have different lengths")
        cfg = self._training_config()
        start = time.perf_counter()
        self.schedule_ = cosine_schedule(self.timesteps)
        self.normalizer_ = Normalizer.fit(X)
        torch.manual_seed(torch_seed(self.seed, _INIT))
        self.network_ = Denoiser(X.shape[1], self.width, self.n_blocks, self.emb_dim,
                                 self.timesteps, self.cond_scale)
        self.train_loss_, self.val_loss_ = train(self.normalizer_.normalize(X), y, cfg,
                                                 self.schedule_, self.network_, log=log)
        self.levels_ = self._envelopes(X, y)
        self.n_features_in_ = X.shape[1]
        self.training_time_ = time.perf_counter() - start
        return self

    @staticmethod
    def _envelopes(X, y):
        return {float(a): (X[y == a].min(axis=0).tolist(), X[y == a].max(axis=0).tolist())
                for a in np.unique(y)}

    def sample(self, alpha, count, w=None, seed=None) -> np.ndarray:
        check_is_fitted(self, "network_")
        w = self.guidance if w is None else w
        seed = self.seed if seed is None else seed
        Z = guided_sample(self.network_, self.schedule_, alpha, w, int(count), seed,
                          bounds=(-1.0, 1.0), dim=self.n_features_in_)
        return self.normalizer_.denormalize(Z)

    # persistence

    def save(self, path):
        check_is_fitted(self, "network_")
        state = {k: v.detach().cpu().numpy() for k, v in self.network_.state_dict().items()}
        payload = {
            "format": ARTIFACT_FORMAT,
            "version": ARTIFACT_VERSION,
            "params": self.get_params(),
            "schedule": {"N": self.schedule_.N, "kind": "cosine", "s": 0.008, "max_beta": 0.999,
                         "alpha_bar": self.schedule_.alpha_bar.tolist()},
            "normalization": {"lo": self.normalizer_.lo.tolist(),
                              "hi": self.normalizer_.hi.tolist()},
            "shapes": self.network_.shapes(),
            "levels": {repr(k): v for k, v in self.levels_.items()},
            "train_loss": list(self.train_loss_),
            "val_loss": list(self.val_loss_),
            "state_dict": state,
        }
        buf = io.BytesIO()
        torch.save(payload, buf)
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(buf.getvalue())
        tmp.replace(path)
        return path

    @classmethod
    def load(cls, path):
        try:
            payload = torch.load(Path(path), map_location="cpu", weights_only=False)
        except FileNotFoundError:
            raise
        except Exception as exc:  # torch raises a variety of unpickling errors
            raise ArtifactError(f"{path}: not a model artifact ({exc})") from exc
        if not isinstance(payload, dict) or payload.get("format") != ARTIFACT_FORMAT:
            raise ArtifactError(f"{path}: not a model artifact")
        if payload.get("version") != ARTIFACT_VERSION:
            raise ArtifactError(f"{path}: unsupported artifact version {payload.get('version')}")
        model = cls(**payload["params"])
        sched = payload["schedule"]
        model.schedule_ = cosine_schedule(sched["N"], sched["s"], sched["max_beta"])
        if not np.allclose(model.schedule_.alpha_bar, sched["alpha_bar"], rtol=0, atol=1e-15):
            raise ArtifactError(f"{path}: stored schedule does not match its constants")
        model.normalizer_ = Normalizer(payload["normalization"]["lo"],
                                       payload["normalization"]["hi"])
        model.network_ = Denoiser(**payload["shapes"])
        model.network_.load_state_dict({k: torch.from_numpy(np.asarray(v))
                                        for k, v in payload["state_dict"].items()})
        model.network_.eval()
        model.levels_ = {float(k): (list(v[0]), list(v[1]))
                         for k, v in payload["levels"].items()}
        model.train_loss_ = payload["train_loss"]
        model.val_loss_ = payload["val_loss"]
        model.n_features_in_ = payload["shapes"]["dim"]
        return model


def training_summary(model: DiffusionModel) -> dict:
    check_is_fitted(model, "network_")
    return {"epochs": len(model.train_loss_), "final_train_loss": model.train_loss_[-1],
            "final_val_loss": model.val_loss_[-1], "levels": sorted(model.levels_),
            "config": asdict(model._training_config())}
