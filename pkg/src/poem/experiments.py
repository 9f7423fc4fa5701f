"""Benchmark runs shared by the CLI and the acceptance tests.

Every run writes into its own directory: config.json first, then
metrics.jsonl, summary.csv and one checkpoint per trained encoder.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .episodes import PRESETS, ImageEpisodeSampler, PoolConfig
from .gridworld import OBS_DIM, EnvEpisodeConfig, EnvEpisodeSampler
from .models import Decoder, DecoderConfig, Encoder, EncoderConfig, save_checkpoint
from .seeding import mix_seed
from .trainer import (
    DecoderTrainConfig, TrainConfig, decoder_seeds, episode_accuracies, grid_dataset, heldout_accuracy, mean_ci,
    precision_variance_ratio, train_decoder, train_fewshot,
)

_TRAIN, _EVAL = 1, 2


@dataclass
class BenchConfig:
    preset: str = "desk"
    condition: str = "partial"
    seed: int = 0
    steps: int = 16000
    lr: float = 3e-4
    hidden: int = 256
    embed_dim: int = 64
    prior_mode: str = "neglect"
    eval_episodes: int = 300
    eval_every: int = 0
    ratio_views: int = 1000
    n_families: int = 200
    images_per_family: int = 20
    eval_family_offset: int = 10000
    converge_loss: float = 0.01
    converge_window: int = 200
    methods: list[str] = field(default_factory=lambda: ["poem", "protonet"])

    def validate(self):
        if self.preset not in PRESETS:
            raise ValueError(f"preset: unknown value {self.preset!r}")
        if self.condition not in ("partial", "full"):
            raise ValueError(f"condition: unknown value {self.condition!r}")
        bad = [m for m in self.methods if m not in ("poem", "protonet")]
        if bad:
            raise ValueError(f"methods: unknown method {bad[0]!r}")
        if self.eval_episodes < 30:
            raise ValueError("eval_episodes: need at least 30")


@dataclass
class GridConfig:
    seed: int = 0
    steps: int = 14000
    lr: float = 3e-4
    hidden: int = 256
    embed_dim: int = 64
    prior_mode: str = "neglect"
    eval_episodes: int = 100
    eval_every: int = 0
    n_envs: int = 5
    queries: int = 2
    budget: int = 200
    size: int = 11
    methods: list[str] = field(default_factory=lambda: ["poem", "protonet"])

    def validate(self):
        if self.size < 7 or self.size % 2 == 0:
            raise ValueError("size: must be odd and at least 7")
        bad = [m for m in self.methods if m not in ("poem", "protonet")]
        if bad:
            raise ValueError(f"methods: unknown method {bad[0]!r}")

    def episode_config(self) -> EnvEpisodeConfig:
        return EnvEpisodeConfig(self.n_envs, self.queries, self.budget, self.size)


@dataclass
class ReconConfig:
    grid: GridConfig = field(default_factory=GridConfig)
    decoder: DecoderTrainConfig = field(default_factory=DecoderTrainConfig)


def config_from_dict(cls, data: dict):
    """Build a config dataclass, rejecting unknown keys (ValueError names the key)."""
    known = cls.__dataclass_fields__
    for key in data:
        if key not in known:
            raise KeyError(key)
    kwargs = {}
    for key, value in data.items():
        default = getattr(cls(), key)
        if hasattr(default, "__dataclass_fields__"):
            value = config_from_dict(type(default), value)
        kwargs[key] = value
    return cls(**kwargs)


def _train_cfg(method: str, seed: int, steps: int, lr: float, prior_mode: str, eval_every: int,
               eval_episodes: int, converge_loss: float = 0.0, converge_window: int = 200) -> TrainConfig:
    return TrainConfig(steps=steps, lr=lr, seed=seed, method=method, prior_mode=prior_mode,
                       eval_every=eval_every, eval_episodes=eval_episodes, converge_loss=converge_loss,
                       converge_window=converge_window)


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def summary_rows(results: dict[str, dict]) -> list[dict]:
    rows = [{"method": m, "accuracy": r["accuracy"], "ci95": r["ci95"], "precision_ratio": r["precision_ratio"]}
            for m, r in results.items()]
    if "poem" in results and "protonet" in results:
        diff = np.asarray(results["poem"]["episode_accuracies"]) - np.asarray(results["protonet"]["episode_accuracies"])
        d, ci = mean_ci(diff)
        rows.append({"method": "poem-protonet", "accuracy": d, "ci95": ci, "precision_ratio": ""})
    return rows


def write_summary(path: Path, rows: list[dict]) -> None:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=["method", "accuracy", "ci95", "precision_ratio"], lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for k, v in row.items()})
    path.write_text(buf.getvalue())


def _run_fewshot(methods, make_encoder, train_sampler, eval_sampler, make_cfg, eval_episodes, ratio_views,
                 out: Path | None, log) -> dict[str, dict]:
    results = {}
    for method in methods:
        enc = make_encoder()
        cfg = make_cfg(method)
        record = train_fewshot(enc, train_sampler, cfg, eval_sampler, log=log,
                               ratio_views=ratio_views)
        accs = episode_accuracies(enc, eval_sampler, eval_episodes, cfg)
        acc, ci = mean_ci(accs)
        ratio = precision_variance_ratio(enc, eval_sampler, ratio_views, precision=method == "poem") \
            if ratio_views >= 100 else 0.0
        if log:
            log(f"{method}: accuracy {acc:.4f} ± {ci:.4f}, precision ratio {ratio:.4g}")
        results[method] = {"accuracy": acc, "ci95": ci, "precision_ratio": ratio,
                           "episode_accuracies": [float(a) for a in accs], "record": record, "encoder": enc}
        if out is not None:
            record.checkpoint = str(save_checkpoint(out / f"{method}.ckpt", enc.params, enc.config.embed_dim,
                                                    record.config))
    return results


def _write_run(out: Path, results: dict[str, dict], emit_svg: bool) -> None:
    with (out / "metrics.jsonl").open("w") as fh:
        for method, r in results.items():
            for event in r["record"].events():
                fh.write(json.dumps({"method": method, **event}) + "\n")
            fh.write(json.dumps({"method": method, "event": "final", "accuracy": r["accuracy"],
                                 "ci95": r["ci95"], "precision_ratio": r["precision_ratio"]}) + "\n")
    write_summary(out / "summary.csv", summary_rows(results))
    if emit_svg:
        from .plots import write_svg
        write_svg(out / "curves.svg", {m: r["record"] for m, r in results.items()})


def bench_images(cfg: BenchConfig, out_dir: str | Path | None = None, log: Callable[[str], None] | None = None,
                 emit_svg: bool = False) -> dict[str, dict]:
    """Train each method on image episodes from one shared seed stream and evaluate."""
    cfg.validate()
    preset = PRESETS[cfg.preset]
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "config.json", {"command": f"bench-{'po' if cfg.condition == 'partial' else 'full'}",
                                          **asdict(cfg)})
    train = ImageEpisodeSampler(PoolConfig(cfg.n_families, cfg.images_per_family, 0, cfg.seed),
                                cfg.condition, mix_seed(cfg.seed, _TRAIN), preset)
    evals = ImageEpisodeSampler(PoolConfig(cfg.n_families, cfg.images_per_family, cfg.eval_family_offset, cfg.seed),
                                cfg.condition, mix_seed(cfg.seed, _EVAL), preset)
    enc_cfg = EncoderConfig(input_dim=train.view_dim, hidden=cfg.hidden, embed_dim=cfg.embed_dim)
    results = _run_fewshot(
        cfg.methods, lambda: Encoder.init(enc_cfg, cfg.seed), train, evals,
        lambda m: _train_cfg(m, cfg.seed, cfg.steps, cfg.lr, cfg.prior_mode, cfg.eval_every, min(cfg.eval_episodes, 100),
                             cfg.converge_loss, cfg.converge_window),
        cfg.eval_episodes, cfg.ratio_views, out, log)
    if out is not None:
        _write_run(out, results, emit_svg)
    return results


def _grid_samplers(cfg: GridConfig):
    ep_cfg = cfg.episode_config()
    return EnvEpisodeSampler(mix_seed(cfg.seed, _TRAIN), ep_cfg), EnvEpisodeSampler(mix_seed(cfg.seed, _EVAL), ep_cfg)


def bench_gridworld(cfg: GridConfig, out_dir: str | Path | None = None, log: Callable[[str], None] | None = None,
                    emit_svg: bool = False) -> dict[str, dict]:
    """Environment recognition from optimal-trajectory support and exploratory queries."""
    cfg.validate()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "config.json", {"command": "gridworld-train", **asdict(cfg)})
    train, evals = _grid_samplers(cfg)
    enc_cfg = EncoderConfig(input_dim=OBS_DIM, hidden=cfg.hidden, embed_dim=cfg.embed_dim)
    results = _run_fewshot(
        cfg.methods, lambda: Encoder.init(enc_cfg, cfg.seed), train, evals,
        lambda m: _train_cfg(m, cfg.seed, cfg.steps, cfg.lr, cfg.prior_mode, cfg.eval_every, cfg.eval_episodes),
        cfg.eval_episodes, 1000, out, log)
    if out is not None:
        _write_run(out, results, emit_svg)
    return results


def reconstruct(cfg: ReconConfig, out_dir: str | Path | None = None, log: Callable[[str], None] | None = None,
                encoder: Encoder | None = None, emit_svg: bool = False) -> dict:
    """Train a decoder on a frozen POEM gridworld encoder (trained here unless given)."""
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "config.json", {"command": "gridworld-recon", "grid": asdict(cfg.grid),
                                          "decoder": asdict(cfg.decoder)})
    records = {}
    if encoder is None:
        train, evals = _grid_samplers(cfg.grid)
        encoder = Encoder.init(EncoderConfig(OBS_DIM, cfg.grid.hidden, cfg.grid.embed_dim), cfg.grid.seed)
        tcfg = _train_cfg("poem", cfg.grid.seed, cfg.grid.steps, cfg.grid.lr, cfg.grid.prior_mode,
                          cfg.grid.eval_every, cfg.grid.eval_episodes)
        records["poem"] = train_fewshot(encoder, train, tcfg, evals, log=log)
    dec_cfg = DecoderConfig(embed_dim=encoder.config.embed_dim, height=cfg.grid.size, width=cfg.grid.size)
    decoder = Decoder.init(dec_cfg, cfg.decoder.seed)
    rec = train_decoder(decoder, encoder, cfg.decoder, log=log)
    records["decoder"] = rec
    h_emb, h_targets, grids = grid_dataset(encoder, decoder_seeds(cfg.decoder.seed, cfg.decoder.heldout_grids,
                                                                  "heldout"), cfg.grid.size)
    acc = heldout_accuracy(decoder, h_emb, h_targets)
    empty = float(np.mean([np.mean(g.cells == 0) for g in grids]))
    result = {"cell_accuracy": acc, "all_empty_accuracy": empty, "records": records,
              "encoder": encoder, "decoder": decoder}
    if log:
        log(f"held-out cell accuracy {acc:.4f} (all-empty baseline {empty:.4f})")
    if out is not None:
        save_checkpoint(out / "encoder.ckpt", encoder.params, encoder.config.embed_dim, asdict(cfg.grid))
        save_checkpoint(out / "decoder.ckpt", decoder.params, encoder.config.embed_dim, asdict(cfg.decoder))
        with (out / "metrics.jsonl").open("w") as fh:
            for name, r in records.items():
                for event in r.events():
                    fh.write(json.dumps({"model": name, **event}) + "\n")
        rows = [{"method": "decoder", "accuracy": acc, "ci95": "", "precision_ratio": ""},
                {"method": "all-empty", "accuracy": empty, "ci95": "", "precision_ratio": ""}]
        write_summary(out / "summary.csv", rows)
        if emit_svg:
            from .plots import write_svg
            write_svg(out / "curves.svg", records)
    return result


def diagnose(cfg: BenchConfig, out_dir: str | Path | None = None, log: Callable[[str], None] | None = None) -> dict:
    """Precision-variance ratio of POEM trained in the partial and the full condition."""
    ratios = {}
    for condition in ("partial", "full"):
        c = BenchConfig(**{**asdict(cfg), "condition": condition, "methods": ["poem"]})
        ratios[condition] = bench_images(c, None, log)["poem"]["precision_ratio"]
    result = {"partial": ratios["partial"], "full": ratios["full"],
              "contrast": ratios["partial"] / max(ratios["full"], 1e-300)}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "config.json", {"command": "diag", **asdict(cfg)})
        with (out / "metrics.jsonl").open("w") as fh:
            fh.write(json.dumps({"event": "precision_ratio", **result}) + "\n")
        write_summary(out / "summary.csv", [
            {"method": f"poem-{k}", "accuracy": "", "ci95": "", "precision_ratio": v} for k, v in ratios.items()])
    return result
