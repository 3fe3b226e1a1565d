"""Command-line entry point.

Exit codes: 0 success, 1 numeric failure (divergence), 2 usage error,
3 verification failure.  Every command writes a ``manifest.json`` next to
its outputs recording the resolved configuration, seed, input hash and the
SHA-256 of each output file.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
import os
import sys
import time
from pathlib import Path

import click
import numpy as np

from ssmlab import __version__, reparam
from ssmlab.errors import ConfigurationError, DomainError, SSMLabError
from ssmlab.perturb import DEFAULT_BETA_GRID, PerturbConfig, parse_beta_grid, sweep
from ssmlab.reparam import Family, parse_scheme
from ssmlab.ssm import SSMParams
from ssmlab.train import Dataset, TrainConfig, generate_dataset, train, write_telemetry_csv

EXIT_OK, EXIT_NUMERIC, EXIT_USAGE, EXIT_VERIFY = 0, 1, 2, 3
SEED_ENV = "SSMLAB_SEED"

log = logging.getLogger("ssmlab")


# --- config handling --------------------------------------------------------

def load_config_file(path) -> dict:
    """TOML or JSON by extension.  A manifest is accepted and yields its config."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    elif suffix == ".json":
        data = json.loads(path.read_text())
    else:
        raise ConfigurationError(f"config must be .toml or .json, got {path.name}")
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path}: top level must be a table/object")
    if "command" in data and "config" in data:
        data = data["config"]
    return data


def resolve_seed(config_seed, flag_seed):
    if flag_seed is not None:
        return int(flag_seed)
    env = os.environ.get(SEED_ENV)
    if env not in (None, ""):
        try:
            return int(env)
        except ValueError:
            raise ConfigurationError(f"{SEED_ENV} must be an integer, got {env!r}") from None
    return int(config_seed)


def check_keys(data: dict, allowed, where="config"):
    unknown = sorted(set(data) - set(allowed))
    if unknown:
        raise ConfigurationError(f"unknown {where} keys: {', '.join(unknown)}")


def _sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def input_hash(config: dict, files=()) -> str:
    h = hashlib.sha256()
    h.update(json.dumps(config, sort_keys=True, default=str).encode())
    for f in files:
        h.update(_sha256_file(f).encode())
    return h.hexdigest()


def write_manifest(out_dir: Path, command, config, seed, outputs, started, inputs=()):
    manifest = {
        "command": command,
        "version": __version__,
        "config": config,
        "seed": seed,
        "input_hash": input_hash(config, inputs),
        "outputs": [{"path": Path(p).name, "sha256": _sha256_file(p)} for p in outputs],
        "duration_s": round(time.monotonic() - started, 3),
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, default=str) + "\n")
    return path


def prepare_out(out, force, names):
    out = Path(out)
    if out.exists() and not out.is_dir():
        raise click.UsageError(f"{out} exists and is not a directory")
    clash = [n for n in names if (out / n).exists()]
    if clash and not force:
        raise click.UsageError(f"{out} already holds {', '.join(clash)}; use --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


# --- commands ---------------------------------------------------------------

class _Group(click.Group):
    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except (ConfigurationError, DomainError) as exc:
            # bad values reaching the library are usage errors
            raise click.UsageError(str(exc), ctx) from None
        except FileNotFoundError as exc:
            raise click.UsageError(str(exc), ctx) from None


@click.group(cls=_Group, context_settings={"help_option_names": ["-h", "--help"]})
@click.version_option(__version__, prog_name="ssmlab")
@click.option("-v", "--verbose", count=True, help="Repeat for more log output.")
def main(verbose):
    """Reparameterized diagonal state-space model experiments."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


_TRAIN_KEYS_HELP = ("Config keys (TOML/JSON, unknown keys are errors): "
                    + ", ".join(f.name for f in dataclasses.fields(TrainConfig)) + ".")


@main.command("gen-data")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
              help="TOML/JSON with keys target, K, N, dt, seed, heaviside_probe.")
@click.option("--target", help="Target kernel: poly:<gamma>, exp:<rate> or csv:<path>.")
@click.option("--n", "n", type=int, help="Number of sequences (default 153600).")
@click.option("--k", "k", type=int, help="Sequence length (default 100).")
@click.option("--dt", type=float, help="Sampling step (default 1.0).")
@click.option("--seed", type=int, help=f"Seed; overrides {SEED_ENV} and the config.")
@click.option("--heaviside-probe/--no-heaviside-probe", default=None,
              help="Replace sequence 0 by the unit step.")
@click.option("--out", required=True, type=click.Path(file_okay=False), help="Output directory.")
@click.option("--force", is_flag=True, help="Overwrite existing outputs.")
def gen_data(config_path, target, n, k, dt, seed, heaviside_probe, out, force):
    """Generate a synthetic dataset (x.npy, y.npy, meta.json)."""
    started = time.monotonic()
    keys = ("target", "K", "N", "dt", "seed", "heaviside_probe")
    cfg = {"target": None, "K": 100, "N": 153600, "dt": 1.0, "seed": 0, "heaviside_probe": False}
    if config_path:
        data = load_config_file(config_path)
        check_keys(data, keys)
        cfg.update(data)
    for key, val in (("target", target), ("N", n), ("K", k), ("dt", dt), ("heaviside_probe", heaviside_probe)):
        if val is not None:
            cfg[key] = val
    if not cfg["target"]:
        raise click.UsageError("a target kernel is required (--target or config key 'target')")
    cfg["seed"] = resolve_seed(cfg["seed"], seed)
    if cfg["N"] < 1 or cfg["K"] < 1:
        raise click.UsageError("N and K must be positive")
    out_dir = prepare_out(out, force, ("x.npy", "y.npy", "meta.json", "manifest.json"))
    ds = generate_dataset(cfg["target"], int(cfg["K"]), int(cfg["N"]), float(cfg["dt"]), int(cfg["seed"]),
                          bool(cfg["heaviside_probe"]))
    ds.meta["seed"] = cfg["seed"]
    files = ds.save(out_dir, force=True)
    write_manifest(out_dir, "gen-data", cfg, cfg["seed"], files, started)
    click.echo(f"wrote {cfg['N']} sequences of length {cfg['K']} to {out_dir}")


@main.command("train", help="Train a model; writes checkpoint.json, telemetry.csv and manifest.json.\n\n"
              + _TRAIN_KEYS_HELP)
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), help="TOML/JSON config.")
@click.option("--target", help="Target kernel: poly:<gamma>, exp:<rate> or csv:<path>.")
@click.option("--scheme", help="Scheme string family[:a=..,b=..]@{cont|disc}.")
@click.option("--m", "m", type=int, help="Hidden width.")
@click.option("--n", "n", type=int, help="Dataset size N.")
@click.option("--k", "k", type=int, help="Sequence length K.")
@click.option("--epochs", type=int)
@click.option("--steps", type=int, help="Fixed number of optimizer steps (cycles epochs).")
@click.option("--lr", type=float)
@click.option("--seed", type=int, help=f"Seed; overrides {SEED_ENV} and the config.")
@click.option("--data", "data_dir", type=click.Path(exists=True, file_okay=False),
              help="Use a dataset from gen-data instead of generating one.")
@click.option("--workers", type=int, default=1, show_default=True, help="Threads for batch gradients.")
@click.option("--extended-telemetry", is_flag=True, help="Add ratio/bound columns to telemetry.csv.")
@click.option("--out", required=True, type=click.Path(file_okay=False), help="Output directory.")
@click.option("--force", is_flag=True, help="Overwrite existing outputs.")
def train_cmd(config_path, target, scheme, m, n, k, epochs, steps, lr, seed, data_dir, workers,
              extended_telemetry, out, force):
    started = time.monotonic()
    data = load_config_file(config_path) if config_path else {}
    check_keys(data, [f.name for f in dataclasses.fields(TrainConfig)])
    overrides = {"target": target, "scheme": scheme, "m": m, "N": n, "K": k, "epochs": epochs,
                 "steps": steps, "lr": lr}
    merged = {**data, **{kk: v for kk, v in overrides.items() if v is not None}}
    if not merged.get("target"):
        raise click.UsageError("a target kernel is required (--target or config key 'target')")
    merged["seed"] = resolve_seed(merged.get("seed", 0), seed)
    config = TrainConfig.from_dict(merged)
    if workers < 1:
        raise click.UsageError("--workers must be at least 1")
    dataset = None
    inputs = []
    if data_dir:
        dataset = Dataset.load(data_dir)
        inputs = [Path(data_dir) / "x.npy", Path(data_dir) / "y.npy"]
    out_dir = prepare_out(out, force, ("checkpoint.json", "telemetry.csv", "manifest.json"))
    result = train(config, dataset, workers=workers)
    ckpt = out_dir / "checkpoint.json"
    tele = out_dir / "telemetry.csv"
    result.params.save(ckpt)
    write_telemetry_csv(tele, result.telemetry, extended=extended_telemetry)
    cfg = config.to_dict()
    cfg["status"] = result.status
    write_manifest(out_dir, "train", cfg, config.seed, [ckpt, tele], started, inputs)
    if result.diverged:
        click.echo(f"diverged at step {result.diverged_step}: {result.message}", err=True)
        sys.exit(EXIT_NUMERIC)
    last = result.telemetry[-1] if result.telemetry else None
    msg = f"trained {config.total_steps} steps"
    if last is not None:
        msg += f"; last loss {last.loss:.6g}, max eigenvalue {last.max_eig:.6g}"
    click.echo(msg)


_PERTURB_KEYS = [f.name for f in dataclasses.fields(PerturbConfig)] + ["target"]


@main.command("perturb", help="Perturbation sweep over checkpoints; writes report.csv and manifest.json.\n\n"
              "Config keys: " + ", ".join(_PERTURB_KEYS) + ".")
@click.argument("checkpoints", nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), help="TOML/JSON config.")
@click.option("--target", help="Target kernel: poly:<gamma>, exp:<rate> or csv:<path>.")
@click.option("--betas", help=f"Beta grid, e.g. {DEFAULT_BETA_GRID} or '0,0.1,0.2'.")
@click.option("--samples", type=int, help="Samples per beta (default 30).")
@click.option("--perturb-set", type=click.Choice(["recurrent", "all"]))
@click.option("--metric", type=click.Choice(["l1-kernel", "sobolev"]))
@click.option("--space", type=click.Choice(["w", "lambda"]))
@click.option("--seed", type=int, help=f"Seed; overrides {SEED_ENV} and the config.")
@click.option("--workers", type=int, default=1, show_default=True, help="Threads for sample evaluation.")
@click.option("--out", required=True, type=click.Path(file_okay=False), help="Output directory.")
@click.option("--force", is_flag=True, help="Overwrite existing outputs.")
def perturb_cmd(checkpoints, config_path, target, betas, samples, perturb_set, metric, space, seed, workers,
                out, force):
    started = time.monotonic()
    data = load_config_file(config_path) if config_path else {}
    check_keys(data, _PERTURB_KEYS)
    overrides = {"target": target, "betas": betas, "samples_per_beta": samples, "perturb_set": perturb_set,
                 "metric": metric, "space": space}
    merged = {**data, **{kk: v for kk, v in overrides.items() if v is not None}}
    tgt = merged.pop("target", None)
    if not tgt:
        raise click.UsageError("a target kernel is required (--target or config key 'target')")
    merged["seed"] = resolve_seed(merged.get("seed", 0), seed)
    config = PerturbConfig(**merged)
    if workers < 1:
        raise click.UsageError("--workers must be at least 1")
    params = [SSMParams.load(p) for p in checkpoints]
    out_dir = prepare_out(out, force, ("report.csv", "manifest.json"))
    report = sweep(params, tgt, config, workers=workers)
    path = out_dir / "report.csv"
    report.write_csv(path)
    cfg = dataclasses.asdict(config)
    cfg["target"] = tgt
    cfg["checkpoints"] = [str(p) for p in checkpoints]
    cfg["crossings"] = {f"{a}-{b}": v for (a, b), v in report.crossings.items()}
    write_manifest(out_dir, "perturb", cfg, config.seed, [path], started, inputs=checkpoints)
    for (a, b), v in report.crossings.items():
        click.echo(f"crossing m={a} vs m={b}: beta={v:.6g}")


def parse_range(text: str):
    """``lo:hi:step`` inclusive grid, rounded to suppress accumulation drift."""
    try:
        lo, hi, step = (float(s) for s in text.split(":"))
    except ValueError:
        raise click.BadParameter(f"expected lo:hi:step, got {text!r}") from None
    if not step > 0 or hi < lo:
        raise click.BadParameter("need step > 0 and hi >= lo")
    n = int(math.floor((hi - lo) / step + 1e-9)) + 1
    return np.round(lo + step * np.arange(n), 12)


def _schemes(values):
    out = []
    for v in values:
        try:
            out.append(parse_scheme(v))
        except ConfigurationError as exc:
            raise click.BadParameter(str(exc), param_hint="--scheme") from None
    return out


def _emit(rows, header, out):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    if out:
        Path(out).write_text(buf.getvalue())
    else:
        click.echo(buf.getvalue(), nl=False)


@main.command("gradscale")
@click.option("--scheme", "schemes", multiple=True, required=True,
              help="Scheme string; repeat for several schemes.")
@click.option("--w-range", default="-5:5:0.1", show_default=True, help="Weight grid lo:hi:step.")
@click.option("--out", type=click.Path(dir_okay=False), help="CSV path (default stdout).")
def gradscale(schemes, w_range, out):
    """Tabulate the gradient scale G_f(w) and G_f(w)/|w| per scheme.

    Columns: scheme, w, G_f, G_f_over_w, flag.  flag is ``ok``,
    ``singular`` (G_f undefined, row values left empty), ``zero-weight``
    (ratio undefined) or ``no-closed-form`` (raw formula used).
    """
    rows = []
    for sch in _schemes(schemes):
        published = reparam.has_published_closed_form(sch)
        for w in parse_range(w_range):
            w = float(w)
            try:
                g = float(reparam.gradient_scale(sch, w))
            except DomainError:
                rows.append([str(sch), w, "", "", "singular"])
                continue
            flag = "ok" if published else "no-closed-form"
            if w == 0.0:
                rows.append([str(sch), w, g, "", "zero-weight" if published else flag])
            else:
                rows.append([str(sch), w, g, g / abs(w), flag])
    _emit(rows, ["scheme", "w", "G_f", "G_f_over_w", "flag"], out)


CERTIFIED = (Family.EXP, Family.SOFTPLUS, Family.BEST)
DIRECT_EPS = (1.0, 0.1, 0.01)


@main.command("verify")
@click.option("--scheme", "schemes", multiple=True, required=True, help="Scheme string; repeat for several.")
@click.option("--betas", default="0.01,0.1,0.5,1.0", show_default=True, help="Comma list of beta values.")
@click.option("--w-range", default="-5:5:0.1", show_default=True, help="Weight grid lo:hi:step.")
@click.option("--tol", default=1e-9, show_default=True, help="Slack for the certificate inequality.")
@click.option("--out", type=click.Path(dir_okay=False), help="CSV path (default stdout).")
def verify(schemes, betas, w_range, tol, out):
    """Check the stability certificates; exit 3 if any check fails.

    certificate: gap(w, beta) <= g(w, beta) + tol for exp, softplus and best (continuous).
    endpoint: a 101-point scan of the beta-ball never exceeds the endpoint value by 1e-12.
    direct-blowup: gap(w = -beta(1+eps)) equals 1/eps (rel 1e-6) for the direct scheme.
    Discrete schemes and continuous relu have no certificate and report n/a.
    """
    try:
        beta_list = [float(b) for b in betas.split(",") if b.strip()]
    except ValueError:
        raise click.BadParameter(f"malformed beta list {betas!r}", param_hint="--betas") from None
    if any(b < 0 for b in beta_list) or not beta_list:
        raise click.BadParameter("betas must be nonnegative", param_hint="--betas")
    grid = parse_range(w_range)
    rows, failed = [], False
    for sch in _schemes(schemes):
        if not sch.continuous or sch.family is Family.RELU:
            rows.append([str(sch), "certificate", "", 0, "", "n/a"])
            continue
        for beta in beta_list:
            gap = np.asarray(reparam.stability_gap(sch, grid, beta), dtype=np.float64)
            if sch.family in CERTIFIED:
                bound = np.asarray(reparam.stability_bound_g(sch, grid, beta), dtype=np.float64)
                excess = float(np.max(gap - bound))
                ok = excess <= tol
                rows.append([str(sch), "certificate", beta, grid.size, excess, "pass" if ok else "fail"])
                failed |= not ok
            finite = [float(w) for w, gv in zip(grid, gap) if math.isfinite(gv)]
            worst = 0.0
            for w in finite:
                prof = reparam.stability_gap_profile(sch, w, beta)
                prof_max = float(np.max(prof[1] if isinstance(prof, tuple) else prof))
                worst = max(worst, prof_max - float(reparam.stability_gap(sch, w, beta)))
            ok = worst <= 1e-12
            rows.append([str(sch), "endpoint", beta, len(finite), worst, "pass" if ok else "fail"])
            failed |= not ok
            if sch.family is Family.DIRECT and beta > 0:
                errs = []
                for eps in DIRECT_EPS:
                    v = float(reparam.stability_gap(sch, -beta * (1 + eps), beta))
                    errs.append(abs(v * eps - 1.0))
                err = max(errs)
                ok = err <= 1e-6
                rows.append([str(sch), "direct-blowup", beta, len(DIRECT_EPS), err, "pass" if ok else "fail"])
                failed |= not ok
    _emit(rows, ["scheme", "check", "beta", "points", "max_violation", "status"], out)
    if failed:
        sys.exit(EXIT_VERIFY)


def run(argv=None) -> int:
    """Invoke the CLI and return the exit code instead of exiting."""
    try:
        main.main(args=argv, prog_name="ssmlab", standalone_mode=True)
    except SystemExit as exc:
        code = exc.code
        return code if isinstance(code, int) else (0 if code is None else 1)
    return 0


if __name__ == "__main__":
    main()
