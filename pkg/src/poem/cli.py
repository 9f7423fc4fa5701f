"""Command-line entry point.

    poem selftest [--out DIR]
    poem run COMMAND [--config FILE] [--set KEY=VALUE ...] [--seed N] [--preset NAME]
                     [--out DIR] [--threads N] [--emit-svg]

Exit codes: 0 ok, 1 selftest failure, 2 config error, 3 IO error.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
import traceback
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import gaussian_poe as gp
from .autodiff import finite_diff_check
from .experiments import (
    BenchConfig, GridConfig, ReconConfig, bench_gridworld, bench_images, config_from_dict, diagnose, reconstruct,
)
from .models import Decoder, DecoderConfig, Encoder, EncoderConfig, a4_probabilities, decoder_graph, episode_graph, \
    proto_scores

EXIT_OK, EXIT_SELFTEST, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3

COMMANDS = {
    "bench-po": lambda: BenchConfig(condition="partial"),
    "bench-full": lambda: BenchConfig(condition="full"),
    "gridworld-train": GridConfig,
    "gridworld-recon": ReconConfig,
    "diag": lambda: BenchConfig(condition="partial"),
}


class ConfigError(ValueError):
    pass


# self-test suites: each returns None on success or a JSON-able failing case


def _random_factors(rng, k_max=5):
    k = int(rng.integers(1, k_max + 1))
    return rng.uniform(-3, 3, size=k), rng.uniform(0.1, 10, size=k)


def suite_gaussian_product(rng):
    for _ in range(50):
        mu, tau = _random_factors(rng)
        analytic = gp.gaussian_product([gp.DiagGaussian(np.array([m]), np.array([t])) for m, t in zip(mu, tau)])
        ref = gp.log_integral_1d(mu, tau)
        got = float(analytic.log_norm)
        if abs(np.expm1(got - ref)) > 1e-6:
            return {"means": mu.tolist(), "precisions": tau.tolist(), "analytic_log_s": got, "quadrature_log_s": ref}
    return None


def suite_predictive_ratio(rng):
    for mode in ("neglect", "gaussian"):
        prior = gp.NEGLECT if mode == "neglect" else gp.PriorSpec("gaussian", precision=0.2)
        for _ in range(10):
            sets = [[gp.DiagGaussian(rng.uniform(-2, 2, 1), rng.uniform(0.3, 3, 1)) for _ in range(rng.integers(1, 4))]
                    for _ in range(3)]
            queries = [gp.DiagGaussian(rng.uniform(-2, 2, 1), rng.uniform(0.3, 3, 1)) for _ in range(2)]
            got = gp.episode_scores(sets, queries, prior).values
            ref = gp.brute_force_predictive(sets, queries, prior).values
            if not np.allclose(got, ref, rtol=1e-5, atol=1e-9):
                return {"prior": mode, "closed_form": got.tolist(), "quadrature": ref.tolist()}
    return None


def suite_gradient_check(rng):
    enc = Encoder.init(EncoderConfig(input_dim=4, hidden=6, embed_dim=3), int(rng.integers(1 << 30)))
    assign = np.array([[1, 1, 0, 0], [0, 0, 1, 1.0]])
    eg = episode_graph(enc, rng.normal(size=(4, 4)), rng.normal(size=(2, 4)), assign, np.array([0, 1]))
    err = finite_diff_check(eg.graph, eg.loss, list(eg.params.values()))
    if err >= 1e-4:
        return {"model": "encoder", "max_relative_error": err}
    dec = Decoder.init(DecoderConfig(embed_dim=3, hidden=5, height=3, width=3), 1)
    g, loss, _, params = decoder_graph(dec, rng.normal(size=(2, 3)), np.eye(4)[rng.integers(0, 4, 18)].reshape(2, -1))
    err = finite_diff_check(g, loss, list(params.values()))
    if err >= 1e-4:
        return {"model": "decoder", "max_relative_error": err}
    return None


def suite_a4_equivalence(rng):
    for _ in range(50):
        dim = int(rng.integers(1, 5))
        supports = [rng.normal(size=(int(rng.integers(1, 6)), dim)) for _ in range(4)]
        q = rng.normal(size=dim)
        sets = [[gp.DiagGaussian(r, np.ones(dim)) for r in s] for s in supports]
        got = gp.episode_scores(sets, [gp.DiagGaussian(q, np.ones(dim))]).probabilities()[0]
        ref = a4_probabilities(supports, q)
        if np.max(np.abs(got - ref)) > 1e-9:
            return {"supports": [s.tolist() for s in supports], "query": q.tolist()}
        equal = [s[:1] for s in supports]
        if np.argmax(a4_probabilities(equal, q)) != np.argmax(proto_scores(equal, q)):
            return {"equal_shot_supports": [s.tolist() for s in equal], "query": q.tolist()}
    return None


def suite_invariants(rng):
    for _ in range(200):
        mu, tau = _random_factors(rng, 6)
        fs = [gp.DiagGaussian(np.array([m]), np.array([t])) for m, t in zip(mu, tau)]
        whole = gp.gaussian_product(fs)
        perm = gp.gaussian_product([fs[i] for i in rng.permutation(len(fs))])
        k = max(1, len(fs) // 2)
        left = gp.gaussian_product(fs[:k])
        nested = gp.gaussian_product([left.product] + fs[k:]) if k < len(fs) else left
        nested_log = nested.log_norm + (left.log_norm if k < len(fs) else 0.0)
        ok = (abs(whole.log_norm - perm.log_norm) < 1e-10 and abs(whole.log_norm - nested_log) < 1e-10
              and abs(whole.product.precision[0] - tau.sum()) < 1e-10 * tau.sum())
        if not ok:
            return {"means": mu.tolist(), "precisions": tau.tolist()}
    return None


SUITES = [
    ("gaussian-product", suite_gaussian_product),
    ("predictive-ratio", suite_predictive_ratio),
    ("gradient-check", suite_gradient_check),
    ("unit-precision", suite_a4_equivalence),
    ("invariants", suite_invariants),
]


def selftest(out_dir: str | None = None, seed: int = 0) -> int:
    failures = {}
    print(f"{'suite':<20} {'result':<6} seconds")
    for name, suite in SUITES:
        t0 = time.perf_counter()
        try:
            case = suite(np.random.default_rng(seed))
        except Exception as err:  # a crash is a failure too
            case = {"exception": repr(err), "traceback": traceback.format_exc()}
        status = "pass" if case is None else "FAIL"
        print(f"{name:<20} {status:<6} {time.perf_counter() - t0:.2f}")
        if case is not None:
            failures[name] = case
    if failures:
        blob = json.dumps({"seed": seed, "failures": failures}, indent=1, default=str)
        print("failing cases:\n" + blob)
        if out_dir:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            (Path(out_dir) / "selftest-failures.json").write_text(blob + "\n")
        return EXIT_SELFTEST
    return EXIT_OK


# config resolution


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _set_nested(data: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    for k in keys[:-1]:
        data = data.setdefault(k, {})
        if not isinstance(data, dict):
            raise ConfigError(dotted)
    data[keys[-1]] = value


def resolve_config(command: str, config_file: str | None = None, overrides=(), seed: int | None = None,
                   preset: str | None = None):
    """Defaults, then the JSON config file, then --set overrides, then --seed/--preset."""
    base = asdict(COMMANDS[command]())
    data: dict = {}
    if config_file:
        loaded = json.loads(Path(config_file).read_text())
        loaded.pop("command", None)
        data.update(loaded)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(item)
        key, value = item.split("=", 1)
        _set_nested(data, key.strip(), _parse_value(value))
    if seed is not None:
        if command == "gridworld-recon":
            data.setdefault("grid", {})["seed"] = seed
            data.setdefault("decoder", {})["seed"] = seed
        else:
            data["seed"] = seed
    if preset is not None:
        if "preset" not in base:
            raise ConfigError("preset")
        data["preset"] = preset
    cls = type(COMMANDS[command]())
    try:
        cfg = config_from_dict(cls, {**{k: v for k, v in base.items() if k not in data}, **data})
    except KeyError as err:
        raise ConfigError(err.args[0]) from None
    try:
        if hasattr(cfg, "validate"):
            cfg.validate()
        if isinstance(cfg, ReconConfig):
            cfg.grid.validate()
    except ValueError as err:
        raise ConfigError(str(err)) from None
    return cfg


def _threads(n: int):
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def run(args) -> int:
    try:
        cfg = resolve_config(args.command, args.config, args.set, args.seed, args.preset)
    except ConfigError as err:
        print(f"config error: invalid key or value: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, json.JSONDecodeError) as err:
        print(f"config error: cannot read config file: {err}", file=sys.stderr)
        return EXIT_CONFIG
    seed = cfg.grid.seed if isinstance(cfg, ReconConfig) else cfg.seed
    out = Path(args.out or f"runs/{args.command}-seed{seed}")
    log = None if args.quiet else (lambda s: print(s, flush=True))
    try:
        with _threads(args.threads):
            if args.command in ("bench-po", "bench-full"):
                bench_images(cfg, out, log, emit_svg=args.emit_svg)
            elif args.command == "gridworld-train":
                bench_gridworld(cfg, out, log, emit_svg=args.emit_svg)
            elif args.command == "gridworld-recon":
                reconstruct(cfg, out, log, emit_svg=args.emit_svg)
            else:
                res = diagnose(cfg, out, log)
                print(f"precision-variance ratio: partial {res['partial']:.4g}, full {res['full']:.4g}, "
                      f"contrast {res['contrast']:.3g}x")
    except OSError as err:
        print(f"io error: {err}", file=sys.stderr)
        return EXIT_IO
    print(f"wrote {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="poem", description="Product-of-experts few-shot experiments")
    sub = parser.add_subparsers(dest="action", required=True)
    st = sub.add_parser("selftest", help="run every oracle suite")
    st.add_argument("--out", help="directory for the failing-case dump")
    st.add_argument("--seed", type=int, default=0)
    r = sub.add_parser("run", help="run an experiment")
    r.add_argument("command", choices=sorted(COMMANDS))
    r.add_argument("--config", help="JSON config file")
    r.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    r.add_argument("--seed", type=int)
    r.add_argument("--preset")
    r.add_argument("--out", help="output directory (default runs/COMMAND-seedN)")
    r.add_argument("--threads", type=int, default=1, help="BLAS threads; 1 keeps runs bit-reproducible")
    r.add_argument("--emit-svg", action="store_true", help="also write curves.svg")
    r.add_argument("--quiet", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.action == "selftest":
        return selftest(args.out, args.seed)
    return run(args)


if __name__ == "__main__":
    sys.exit(main())
