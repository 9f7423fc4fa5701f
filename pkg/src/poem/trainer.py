"""Episodic training, evaluation, the precision-variance diagnostic and decoder training."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .autodiff import NonFiniteError, evaluate, gradient
from .episodes import Episode
from .gaussian_poe import NEGLECT, DiagGaussian, PriorSpec, fuse_support
from .gridworld import gen_maze, grid_onehot, observe_many, optimal_plan
from .models import Decoder, Encoder, cell_accuracy, decoder_graph, episode_graph
from .seeding import mix_seed

_DECODER_TAG = 0x444543


class TrainingAborted(RuntimeError):
    """Non-finite loss. Carries what is needed to replay the offending episode."""

    def __init__(self, step: int, episode_index: int, episode_seed: int, loss: float):
        super().__init__(f"non-finite loss {loss} at step {step} (episode {episode_index}, seed {episode_seed})")
        self.step = step
        self.episode_index = episode_index
        self.episode_seed = episode_seed
        self.loss = loss


class Adam:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for name, g in grads.items():
            if name not in self.m:
                self.m[name], self.v[name] = np.zeros_like(g), np.zeros_like(g)
            m, v = self.m[name], self.v[name]
            buf = np.multiply(g, 1 - self.beta1)  # in-place from here on: these arrays are large
            m *= self.beta1
            m += buf
            np.multiply(g, g, out=buf)
            buf *= 1 - self.beta2
            v *= self.beta2
            v += buf
            np.divide(v, c2, out=buf)
            np.sqrt(buf, out=buf)
            buf += self.eps
            np.divide(m, buf, out=buf)
            buf *= self.lr / c1
            params[name] -= buf


@dataclass
class TrainConfig:
    steps: int = 3000
    episodes_per_step: int = 1
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    method: str = "poem"
    precision_mode: str = "learned"
    prior_mode: str = "neglect"
    prior_precision: float = 1e-3
    eval_every: int = 0
    eval_episodes: int = 300
    # stop once the mean loss over the last converge_window steps is below converge_loss (0 disables)
    converge_loss: float = 0.0
    converge_window: int = 200

    def __post_init__(self):
        if (self.steps < 0 or self.episodes_per_step < 1 or self.eval_episodes < 1 or self.eval_every < 0
                or self.converge_window < 1):
            raise ValueError("counts must be positive")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")

    @property
    def prior(self) -> PriorSpec:
        if self.prior_mode == "neglect":
            return NEGLECT
        return PriorSpec("gaussian", precision=self.prior_precision)


@dataclass
class RunRecord:
    config: dict
    losses: list[float] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)
    ratios: list[dict] = field(default_factory=list)
    wall_clock: float = 0.0
    checkpoint: str | None = None
    converged_at: int | None = None

    def events(self):
        for k, loss in enumerate(self.losses):
            yield {"event": "step", "step": k, "loss": loss}
        for e in self.evals:
            yield {"event": "eval", **e}
        for r in self.ratios:
            yield {"event": "precision_ratio", **r}
        if self.converged_at is not None:
            yield {"event": "converged", "step": self.converged_at}

    def write(self, out_dir: str | Path, prefix: str = "") -> None:
        out = Path(out_dir)
        with (out / f"{prefix}metrics.jsonl").open("w") as fh:
            for e in self.events():
                fh.write(json.dumps(e) + "\n")


def _episode_tensors(ep: Episode):
    return ep.support_features(), ep.query_features(), ep.assignment(), ep.targets


def _build(encoder: Encoder, ep: Episode, cfg: TrainConfig, trainable: bool = True):
    sx, qx, assign, targets = _episode_tensors(ep)
    return episode_graph(encoder, sx, qx, assign, targets, cfg.method, cfg.precision_mode, cfg.prior, trainable)


def episode_loss(encoder: Encoder, ep: Episode, cfg: TrainConfig) -> float:
    eg = _build(encoder, ep, cfg, trainable=False)
    return float(evaluate(eg.graph)[eg.loss])


def train_fewshot(encoder: Encoder, sampler: Callable[[int], Episode], cfg: TrainConfig,
                  eval_sampler: Callable[[int], Episode] | None = None,
                  log: Callable[[str], None] | None = None, ratio_views: int = 0) -> RunRecord:
    """Train ``encoder`` in place, one episode per sampler index.

    With ``eval_every`` set, accuracy on ``eval_sampler`` is logged periodically,
    and the precision-variance ratio too when ``ratio_views`` is at least 100.
    """
    if getattr(sampler, "view_dim", encoder.config.input_dim) != encoder.config.input_dim:
        raise ValueError("sampler view width does not match encoder input width")
    record = RunRecord(asdict(cfg))
    opt = Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    t0 = time.perf_counter()
    for s in range(cfg.steps):
        total = None
        loss_sum = 0.0
        for k in range(cfg.episodes_per_step):
            index = s * cfg.episodes_per_step + k
            eg = _build(encoder, sampler(index), cfg)
            try:
                values = evaluate(eg.graph)
            except NonFiniteError as err:
                seed = sampler.episode_seed(index) if hasattr(sampler, "episode_seed") else index
                raise TrainingAborted(s, index, seed, float("nan")) from err
            loss = float(values[eg.loss])
            grads = gradient(eg.graph, values, eg.loss, list(eg.params.values()))
            named = {name: grads[node] for name, node in eg.params.items()}
            if total is None:
                total = named
            else:
                for name in total:
                    total[name] += named[name]
            loss_sum += loss
        if cfg.episodes_per_step > 1:
            total = {k: v / cfg.episodes_per_step for k, v in total.items()}
        opt.step(encoder.params, total)
        record.losses.append(loss_sum / cfg.episodes_per_step)
        if cfg.eval_every and eval_sampler is not None and (s + 1) % cfg.eval_every == 0:
            acc, ci = evaluate_accuracy(encoder, eval_sampler, cfg.eval_episodes, cfg)
            record.evals.append({"step": s + 1, "accuracy": acc, "ci95": ci})
            if ratio_views >= 100 and cfg.method == "poem" and cfg.precision_mode == "learned":
                ratio = precision_variance_ratio(encoder, eval_sampler, ratio_views)
                record.ratios.append({"step": s + 1, "ratio": ratio})
            if log:
                log(f"step {s + 1}: loss {np.mean(record.losses[-cfg.eval_every:]):.4f} acc {acc:.4f}±{ci:.4f}")
        w = cfg.converge_window
        if cfg.converge_loss > 0 and s + 1 >= w and np.mean(record.losses[-w:]) < cfg.converge_loss:
            record.converged_at = s + 1
            if log:
                log(f"converged at step {s + 1}")
            break
    record.wall_clock = time.perf_counter() - t0
    return record


def mean_ci(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        return float(v.mean()), 0.0
    return float(v.mean()), float(1.96 * v.std(ddof=1) / np.sqrt(v.size))


def episode_accuracy(scores: np.ndarray, targets: np.ndarray) -> float:
    return float(np.mean(np.argmax(scores, axis=1) == targets))


def episode_accuracies(encoder: Encoder, sampler: Callable[[int], Episode], n_episodes: int,
                       cfg: TrainConfig | None = None) -> np.ndarray:
    cfg = cfg or TrainConfig()
    accs = []
    for i in range(n_episodes):
        ep = sampler(i)
        eg = _build(encoder, ep, cfg, trainable=False)
        accs.append(episode_accuracy(evaluate(eg.graph)[eg.scores], ep.targets))
    return np.array(accs)


def evaluate_accuracy(encoder: Encoder, sampler: Callable[[int], Episode], n_episodes: int,
                      cfg: TrainConfig | None = None) -> tuple[float, float]:
    """Mean episode accuracy and its 95% half-width over sampler indices 0..n-1."""
    return mean_ci(episode_accuracies(encoder, sampler, n_episodes, cfg))


def sample_views(sampler: Callable[[int], Episode], n_views: int) -> np.ndarray:
    rows, i = [], 0
    while sum(r.shape[0] for r in rows) < n_views:
        ep = sampler(i)
        rows.append(np.concatenate([ep.support_features(), ep.query_features()]))
        i += 1
    return np.concatenate(rows)[:n_views]


def variance_ratio(mu: np.ndarray, tau: np.ndarray) -> float:
    var_mu = float(np.var(mu))
    if var_mu < 1e-12:
        raise ValueError("mean embeddings have no variance; degenerate encoder")
    return float(np.var(tau)) / var_mu


def precision_variance_ratio(encoder: Encoder, sampler: Callable[[int], Episode], n_views: int = 1000,
                             precision: bool = True) -> float:
    """Var[tau] / Var[mu] over every (view, dimension) entry of n_views encoded views."""
    if n_views < 100:
        raise ValueError("need at least 100 views")
    mu, tau = encoder.encode_arrays(sample_views(sampler, n_views), precision=precision)
    return variance_ratio(mu, tau)


# decoder training on frozen encoder embeddings


@dataclass
class DecoderTrainConfig:
    steps: int = 3000
    batch: int = 16
    lr: float = 1e-3
    seed: int = 0
    size: int = 11
    train_grids: int = 2000
    heldout_grids: int = 50
    eval_every: int = 500


def env_embedding(encoder: Encoder, grid, prior: PriorSpec = NEGLECT) -> np.ndarray:
    """Fused mean of the encoded optimal-trajectory views of one grid."""
    seen, states = set(), []
    for s in optimal_plan(grid)[0]:
        if s not in seen:
            seen.add(s)
            states.append(s)
    feats = np.stack([o.features() for o in observe_many(grid, states)])
    mu, tau = encoder.encode_arrays(feats)
    fused = fuse_support([DiagGaussian(m, t) for m, t in zip(mu, tau)], prior)
    return fused.product.mean


def grid_dataset(encoder: Encoder, seeds, size: int = 11):
    grids = [gen_maze(int(s), size) for s in seeds]
    emb = np.stack([env_embedding(encoder, g) for g in grids])
    targets = np.stack([grid_onehot(g).reshape(-1) for g in grids])
    return emb, targets, grids


def decoder_seeds(seed: int, n: int, split: str) -> list[int]:
    tag = {"train": 1, "heldout": 2}[split]
    return [mix_seed(seed, _DECODER_TAG, tag, k) for k in range(n)]


def heldout_accuracy(decoder: Decoder, emb: np.ndarray, targets: np.ndarray) -> float:
    c = decoder.config
    accs = [cell_accuracy(decoder.decode(e), t.reshape(c.height, c.width, c.n_types)) for e, t in zip(emb, targets)]
    return float(np.mean(accs))


def train_decoder(decoder: Decoder, encoder: Encoder, cfg: DecoderTrainConfig,
                  log: Callable[[str], None] | None = None) -> RunRecord:
    """Fit ``decoder`` (in place) to reconstruct mazes from frozen fused embeddings."""
    record = RunRecord(asdict(cfg))
    t0 = time.perf_counter()
    emb, targets, _ = grid_dataset(encoder, decoder_seeds(cfg.seed, cfg.train_grids, "train"), cfg.size)
    h_emb, h_targets, _ = grid_dataset(encoder, decoder_seeds(cfg.seed, cfg.heldout_grids, "heldout"), cfg.size)
    opt = Adam(cfg.lr)
    rng = np.random.default_rng(mix_seed(cfg.seed, _DECODER_TAG, 3))
    for s in range(cfg.steps):
        idx = rng.choice(len(emb), size=min(cfg.batch, len(emb)), replace=False)
        g, loss, _, params = decoder_graph(decoder, emb[idx], targets[idx])
        try:
            values = evaluate(g)
        except NonFiniteError as err:
            raise TrainingAborted(s, s, cfg.seed, float("nan")) from err
        lv = float(values[loss])
        grads = gradient(g, values, loss, list(params.values()))
        opt.step(decoder.params, {k: grads[n] for k, n in params.items()})
        record.losses.append(lv)
        if cfg.eval_every and (s + 1) % cfg.eval_every == 0:
            acc = heldout_accuracy(decoder, h_emb, h_targets)
            record.evals.append({"step": s + 1, "cell_accuracy": acc})
            if log:
                log(f"decoder step {s + 1}: mse {np.mean(record.losses[-cfg.eval_every:]):.5f} cell acc {acc:.4f}")
    record.wall_clock = time.perf_counter() - t0
    return record
