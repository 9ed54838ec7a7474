"""Command-line driver: ``ofm <command> --config run.toml [options]``."""

from __future__ import annotations

import argparse
import dataclasses
import datetime as _dt
import json
import logging
import os
import platform
import subprocess
import sys
import traceback
from pathlib import Path

import numpy as np

from . import __version__
from .batch import FunctionBatch
from .checkpoint import CheckpointError, load_container, load_params, save_container, save_params
from .config import ConfigError, RunConfig, parse_config, serialize_config
from .datasets import RejectionBudgetExceeded, gen_gp_functions, gen_tgp_functions, subsample_observations
from .export import export_artifacts, write_json, write_manifest, write_samples_csv, PartialRunError
from .fields import FNOField
from .flow import DivergenceConfig, TrainingDiverged, log_likelihood_detail, sample_prior, train_prior
from .fno import init_params
from .gp import CholeskyError, build_gram, gaussian_logpdf, gp_posterior, sample_mvn
from .metrics import MetricsReport, distribution_diagnostics, msll, smse
from .regression import ChainDiverged, ObservationSet, sgld_chain, summarize_posterior
from .rng import make_rng, split
from .solvers import SolverError

log = logging.getLogger("ofm")

COMMANDS = ("gen-data", "train-prior", "sample-prior", "eval-prior", "loglik", "regress", "eval-regression")

# exit codes, printed as error[CODE]
ERRORS = [
    (ConfigError, "E_CONFIG", 2),
    (CheckpointError, "E_CHECKPOINT", 3),
    (FileNotFoundError, "E_IO", 3),
    (PartialRunError, "E_IO", 3),
    (TrainingDiverged, "E_DIVERGED", 4),
    (ChainDiverged, "E_DIVERGED", 4),
    (SolverError, "E_SOLVER", 5),
    (CholeskyError, "E_NUMERIC", 6),
    (RejectionBudgetExceeded, "E_NUMERIC", 6),
    (FloatingPointError, "E_NUMERIC", 6),
    (ValueError, "E_INPUT", 7),
]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ofm", description="Operator flow matching: priors over functions and regression.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")
    helps = {
        "gen-data": "generate training and held-out function datasets",
        "train-prior": "learn the vector field by flow matching",
        "sample-prior": "draw functions from the learned prior",
        "eval-prior": "compare prior samples with held-out data",
        "loglik": "log-likelihood of functions under the learned prior",
        "regress": "MAP + Langevin posterior sampling given noisy observations",
        "eval-regression": "SMSE/MSLL against the closed-form GP posterior",
    }
    for name in COMMANDS:
        s = sub.add_parser(name, help=helps[name])
        s.add_argument("--config", required=True, help="TOML or JSON run configuration")
        s.add_argument("--seed", type=int, help="override the config seed")
        s.add_argument("--threads", type=int, help="BLAS/FFT threads (default: all cores)")
        s.add_argument("--out", help="run directory (overrides io.out_dir)")
        s.add_argument("--checkpoint", help="operator checkpoint path")
        s.add_argument("--resolution", type=int, help="evaluate on a grid with this many points per axis")
        s.add_argument("--div-mode", choices=("exact", "hutchinson"))
        s.add_argument("--posterior-mode", choices=("exact-reparam", "paper-eq17"))
        s.add_argument("--epochs", type=int, help="override cfm.epochs")
        s.add_argument("--debug", action="store_true", help="verbose logging and extra diagnostics")
        if name == "loglik":
            s.add_argument("--input", help="container (.ofm) or CSV of functions; default: held-out data")
            s.add_argument("--count", type=int, default=10, help="number of held-out functions")
            s.add_argument("--repeats", type=int, default=5, help="hutchinson repeats for the spread")
    return p


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    rep = {}
    if args.seed is not None:
        rep["seed"] = args.seed
    if args.out:
        rep["io"] = dataclasses.replace(cfg.io, out_dir=str(Path(args.out).resolve()))
    if args.checkpoint:
        io = rep.get("io", cfg.io)
        rep["io"] = dataclasses.replace(io, checkpoint=str(Path(args.checkpoint).resolve()))
    if args.div_mode:
        rep["divergence"] = dataclasses.replace(cfg.divergence, mode=args.div_mode)
    if args.posterior_mode:
        rep["sgld"] = dataclasses.replace(cfg.sgld, mode=args.posterior_mode)
    if args.epochs is not None:
        rep["cfm"] = dataclasses.replace(cfg.cfm, epochs=args.epochs)
    return dataclasses.replace(cfg, **rep) if rep else cfg


def _git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def _setup_run(cfg: RunConfig, command: str, debug: bool) -> Path:
    out = Path(cfg.io.out_dir)
    (out / "logs").mkdir(parents=True, exist_ok=True)
    stamp = _dt.datetime.now().strftime("%Y%m%d-%H%M%S")
    log_path = out / "logs" / f"{command}-{stamp}.log"
    handler = logging.FileHandler(log_path)
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger()
    root.handlers = [handler]
    root.setLevel(logging.DEBUG if debug else logging.INFO)
    (out / "config.echo.toml").write_text(serialize_config(cfg))
    env = {
        "python": sys.version,
        "platform": platform.platform(),
        "numpy": np.__version__,
        "ofm": __version__,
        "git": _git_describe(),
        "threads": os.environ.get("OFM_THREADS", "default"),
        "argv": sys.argv,
    }
    write_json(out / "environment.json", env)
    return log_path


def _limit_threads(n: int | None):
    if n is None:
        return None
    os.environ["OFM_THREADS"] = str(n)
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        return None
    return threadpool_limits(limits=n)


# -- helpers -----------------------------------------------------------------------

def _grid(cfg: RunConfig, resolution: int | None):
    pts = cfg.dataset.points if resolution is None else (resolution,) * len(cfg.dataset.points)
    return cfg.dataset.grid(pts)


def _reference(cfg: RunConfig, grid):
    return build_gram(grid, cfg.reference)


def _generate(cfg: RunConfig, grid, count: int, rng):
    d = cfg.dataset
    if d.kind == "tgp":
        return gen_tgp_functions(d.kernel, grid, d.bounds, count, rng)
    return gen_gp_functions(d.kernel, grid, count, rng)


def _load_dataset(cfg: RunConfig):
    path = cfg.dataset_path
    if not path.exists():
        raise FileNotFoundError(f"dataset {path} not found; run gen-data first")
    tensors, header = load_container(path)
    grid = cfg.dataset.grid(header["grid"]["points"])
    return tensors, header, grid


def _heldout(cfg: RunConfig, grid, count: int):
    """Held-out functions on ``grid``: stored ones at the training grid, fresh draws elsewhere."""
    path = cfg.dataset_path
    if path.exists():
        tensors, header = load_container(path)
        if tuple(header["grid"]["points"]) == grid.points and "heldout" in tensors and len(tensors["heldout"]):
            return tensors["heldout"][:count]
    rng = split(cfg.seed, 4)[3]
    return _generate(cfg, grid, count, rng).values


def _load_model(cfg: RunConfig):
    path = cfg.checkpoint_path
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} not found; run train-prior first")
    params, header = load_params(path)
    return params, header


# -- commands ------------------------------------------------------------------------

def cmd_gen_data(cfg: RunConfig, args) -> int:
    grid = _grid(cfg, args.resolution)
    r_train, r_held = split(cfg.seed, 2)
    train = _generate(cfg, grid, cfg.dataset.count, r_train)
    tensors = {"train": train.values}
    if cfg.dataset.heldout:
        tensors["heldout"] = _generate(cfg, grid, cfg.dataset.heldout, r_held).values
    meta = {"kind": "dataset", **train.config(), "seed": cfg.seed, "heldout": cfg.dataset.heldout}
    save_container(cfg.dataset_path, tensors, meta)
    write_json(cfg.dataset_path.with_suffix(".json"), meta)
    print(f"wrote {cfg.dataset.count} training and {cfg.dataset.heldout} held-out functions "
          f"on {grid.points} to {cfg.dataset_path} (acceptance {train.acceptance_rate:.3f})")
    return 0


def cmd_train_prior(cfg: RunConfig, args) -> int:
    tensors, header, grid = _load_dataset(cfg)
    data = FunctionBatch(tensors["train"], grid)
    ref = _reference(cfg, grid)
    fcfg = cfg.fno
    fcfg.check_grid(grid.points)
    rng = make_rng(split(cfg.seed, 3)[1])
    init = init_params(fcfg, rng)
    out = Path(cfg.io.out_dir)

    def on_epoch(epoch, loss, params):
        log.info("epoch %d loss %.6g", epoch + 1, loss)
        if cfg.cfm.checkpoint_every and (epoch + 1) % cfg.cfm.checkpoint_every == 0:
            save_params(out / f"model-epoch{epoch + 1}.ofm", params,
                        {"config": cfg.to_dict(), "epoch": epoch + 1})

    try:
        res = train_prior(data, ref, cfg.cfm, init, rng, callback=on_epoch)
    except TrainingDiverged as exc:
        if exc.checkpoint is not None:
            save_params(out / "model-last-good.ofm", exc.checkpoint, {"config": cfg.to_dict(), "epoch": exc.epoch})
        raise
    meta = {"config": cfg.to_dict(), "epochs": cfg.cfm.epochs, "loss_tail": res.loss_history[-20:],
            "grid": grid.to_dict()}
    save_params(cfg.checkpoint_path, res.params, meta)
    with open(out / "loss.csv", "w") as f:
        f.write("epoch,loss\n")
        for i, v in enumerate(res.loss_history):
            f.write(f"{i + 1},{v!r}\n")
    write_manifest(out, checkpoint=str(cfg.checkpoint_path))
    last = f"{res.loss_history[-1]:.6g}" if res.loss_history else "n/a"
    print(f"trained {cfg.cfm.epochs} epochs, final loss {last}, {res.params.count()} parameters -> {cfg.checkpoint_path}")
    return 0


def cmd_sample_prior(cfg: RunConfig, args) -> int:
    params, _ = _load_model(cfg)
    grid = _grid(cfg, args.resolution)
    ref = _reference(cfg, grid)
    samples, nfe = sample_prior(FNOField(params), ref, cfg.metrics.n_samples, cfg.solver, split(cfg.seed, 5)[4])
    out = Path(cfg.io.out_dir)
    save_container(out / "samples.ofm", {"samples": samples.values, "coords": grid.coordinates()},
                   {"kind": "samples", "grid": grid.to_dict(), "mean_nfe": nfe})
    write_samples_csv(out / "samples.csv", samples.values, grid.coordinates())
    with open(out / "nfe.csv", "w") as f:
        f.write(f"count,mean_nfe\n{len(samples)},{nfe!r}\n")
    write_manifest(out, samples="samples.ofm")
    print(f"wrote {len(samples)} samples on {grid.points}; mean NFE {nfe:.1f}")
    return 0


def cmd_eval_prior(cfg: RunConfig, args) -> int:
    params, _ = _load_model(cfg)
    grid = _grid(cfg, args.resolution)
    ref = _reference(cfg, grid)
    n = cfg.metrics.n_samples
    samples, nfe = sample_prior(FNOField(params), ref, n, cfg.solver, split(cfg.seed, 5)[4])
    held = _heldout(cfg, grid, n)
    diag = distribution_diagnostics(samples.values, held, bins=cfg.metrics.bins)
    report = MetricsReport(**diag, counts={"generated": len(samples), "heldout": len(held)},
                           config={"resolution": list(grid.points), "mean_nfe": nfe})
    out = Path(cfg.io.out_dir)
    write_json(out / "prior_metrics.json", report.to_dict())
    print(report.table())
    return 0


def _read_functions(path: Path, shape):
    if path.suffix == ".csv":
        from .export import read_samples_csv
        _, vals = read_samples_csv(path)
    else:
        tensors, _ = load_container(path)
        vals = next(tensors[k] for k in ("samples", "heldout", "train", "pushforward") if k in tensors)
    return np.asarray(vals, dtype=float).reshape((-1,) + shape)


def cmd_loglik(cfg: RunConfig, args) -> int:
    params, _ = _load_model(cfg)
    grid = _grid(cfg, args.resolution)
    ref = _reference(cfg, grid)
    shape = (grid.channels,) + grid.points
    if args.input:
        u = _read_functions(Path(args.input), shape)
    else:
        u = _heldout(cfg, grid, args.count)
    u = u[: args.count] if not args.input else u
    fld = FNOField(params)
    div = cfg.divergence
    rngs = split(cfg.seed, 7)
    rows = []
    if div.mode == "exact":
        res = log_likelihood_detail(fld, u, ref, cfg.solver, div)
        for i, v in enumerate(res.value):
            rows.append({"index": i, "loglik": float(v)})
    else:
        reps = []
        for r in range(max(1, args.repeats)):
            res = log_likelihood_detail(fld, u, ref, cfg.solver, div, make_rng(rngs[6].integers(2 ** 63)))
            reps.append(res.value)
        reps = np.array(reps)
        for i in range(len(u)):
            rows.append({"index": i, "loglik": float(reps[:, i].mean()),
                         "std": float(reps[:, i].std(ddof=1)) if len(reps) > 1 else float("nan")})
    header = ["index", "loglik"] + (["std"] if div.mode == "hutchinson" else [])
    if args.debug:
        header.append("gaussian_logpdf")
        gl = np.asarray(gaussian_logpdf(u, ref)).reshape(-1)
        for r, g in zip(rows, gl):
            r["gaussian_logpdf"] = float(g)
    print(" ".join(f"{h:>16}" for h in header))
    for r in rows:
        print(" ".join(f"{r[h]:>16.10f}" if isinstance(r[h], float) else f"{r[h]:>16}" for h in header))
    out = Path(cfg.io.out_dir)
    write_json(out / "loglik.json", {"mode": div.mode, "rows": rows})
    return 0


def _truth_function(cfg: RunConfig, grid):
    rng = split(cfg.seed, 6)[5]
    return _generate(cfg, grid, cfg.regression.test_index + 1, rng).values[cfg.regression.test_index]


def cmd_regress(cfg: RunConfig, args) -> int:
    params, _ = _load_model(cfg)
    res_override = args.resolution or cfg.regression.resolution
    grid = _grid(cfg, res_override)
    ref = _reference(cfg, grid)
    truth = _truth_function(cfg, grid)
    r_obs, r_chain = split(cfg.seed, 8)[6:8]
    obs = subsample_observations(truth, cfg.regression.n_obs, cfg.regression.noise_std, r_obs)
    chain = sgld_chain(FNOField(params), obs, ref, cfg.sgld, None, cfg.divergence, r_chain,
                       progress=lambda t, v: log.info("sgld iteration %d logpost %s", t, np.round(v, 3).tolist()))
    out = Path(cfg.io.out_dir)
    save_container(out / "chain.ofm",
                   {"latent": chain.latent, "pushforward": chain.pushforward, "logpost": chain.logpost,
                    "chain_id": chain.chain_id, "coords": grid.coordinates(), "truth": truth,
                    "obs_indices": obs.indices, "obs_values": obs.values},
                   {"kind": "chain", "grid": grid.to_dict(), "noise_std": obs.noise_std, "sgld": cfg.sgld.to_dict()})
    write_manifest(out, chain="chain.ofm")
    export_artifacts(out)
    s = summarize_posterior(chain)
    print(f"{len(chain)} posterior samples on {grid.points}; mean std {float(np.mean(s['std'])):.4g}")
    return 0


def cmd_eval_regression(cfg: RunConfig, args) -> int:
    out = Path(cfg.io.out_dir)
    path = out / "chain.ofm"
    if not path.exists():
        raise FileNotFoundError(f"{path} not found; run regress first")
    tensors, header = load_container(path)
    grid = cfg.dataset.grid(header["grid"]["points"])
    samples = tensors["pushforward"].reshape(len(tensors["pushforward"]), -1)
    noise = float(header["noise_std"])
    prior = build_gram(grid, cfg.dataset.kernel)
    mean, cov = gp_posterior(prior, tensors["obs_indices"], tensors["obs_values"], noise)
    rng = split(cfg.seed, 9)[8]
    n = cfg.regression.truth_draws
    if cfg.dataset.kind == "tgp":
        lo, hi = cfg.dataset.bounds
        kept, drawn = [], 0
        while sum(len(k) for k in kept) < n and drawn < 10 ** 6:
            d = sample_mvn(mean, cov, 4096, rng)
            drawn += 4096
            kept.append(d[np.all((d > lo) & (d < hi), axis=1)])
        truth = np.concatenate(kept)[:n]
    else:
        truth = sample_mvn(mean, cov, n, rng)
    pm = samples.mean(axis=0)
    pv = samples.var(axis=0) + noise ** 2
    metrics = {"mean_mse": float(np.mean((pm - truth.mean(axis=0)) ** 2)),
               "std_mse": float(np.mean((np.sqrt(samples.var(axis=0)) - truth.std(axis=0)) ** 2))}
    if cfg.dataset.kind == "gp":
        metrics["smse"] = smse(pm, truth)
        metrics["msll"] = msll(pm, pv, truth)
    report = MetricsReport(smse=metrics.get("smse"), msll=metrics.get("msll"),
                           counts={"posterior_samples": len(samples), "truth_draws": len(truth)},
                           config={"noise_std": noise, **{k: v for k, v in metrics.items() if k not in ("smse", "msll")}})
    write_json(out / "metrics.json", report.to_dict())
    write_manifest(out, metrics=report.to_dict())
    for k, v in metrics.items():
        print(f"{k:<10} {v:.6g}")
    return 0


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train-prior": cmd_train_prior,
    "sample-prior": cmd_sample_prior,
    "eval-prior": cmd_eval_prior,
    "loglik": cmd_loglik,
    "regress": cmd_regress,
    "eval-regression": cmd_eval_regression,
}


def _classify(exc: BaseException) -> tuple[str, int]:
    for typ, code, status in ERRORS:
        if isinstance(exc, typ):
            return code, status
    return "E_INTERNAL", 1


def run_command(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    log_path = None
    limiter = None
    try:
        limiter = _limit_threads(args.threads)
        cfg = _apply_overrides(parse_config(args.config), args)
        log_path = _setup_run(cfg, args.command, args.debug)
        log.info("command %s", args.command)
        return HANDLERS[args.command](cfg, args)
    except Exception as exc:  # noqa: BLE001 - every failure maps to an exit code
        code, status = _classify(exc)
        cause = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        if isinstance(exc, ConfigError):
            cause = "; ".join(exc.problems)
        if log_path is not None:
            log.error("%s\n%s", cause, traceback.format_exc())
        where = f" (log: {log_path})" if log_path else ""
        print(f"error[{code}]: {cause}{where}", file=sys.stderr)
        return status
    finally:
        if limiter is not None:
            limiter.restore_original_limits()
        logging.getLogger().handlers = []


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
