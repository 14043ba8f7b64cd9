"""Command line harness: ``flexdiff <command>``.

Settings resolve as explicit flag > ``--set key=value`` > ``--config`` file >
built-in default, and every command writes the resolved settings next to its
primary output as ``<output>.run.json``.

Exit codes: 0 success, 1 usage error, 2 validation failure, 3 numerical failure.
"""
from __future__ import annotations

import functools
import json
import logging
import os
import sys
from pathlib import Path

import click
import numpy as np
from click.core import ParameterSource

from . import evalbench as eb
from . import taskdist as td
from .autodiff import NonFiniteError
from .estimator import FlexibleDiffusionModel
from .rng import stream
from .scheme_opt import OptimizerConfig, optimize_scheme
from .schemes import CATALOG, AdaptiveScheme, SamplingScheme, SchemeError, make_scheme, render_svg, validate

log = logging.getLogger("flexdiff")

EXIT_OK, EXIT_USAGE, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2, 3


class ValidationFailed(click.ClickException):
    exit_code = EXIT_INVALID


# config resolution -------------------------------------------------------------

def _read_config(path):
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError:
        data = dict(line.split("=", 1) for line in text.splitlines() if "=" in line and not line.startswith("#"))
    if not isinstance(data, dict):
        raise click.BadParameter("config file must hold a flat object", param_hint="--config")
    return {k.replace("-", "_"): v for k, v in data.items()}


def _parse_sets(items):
    out = {}
    for item in items:
        if "=" not in item:
            raise click.BadParameter(f"expected key=value, got {item!r}", param_hint="--set")
        k, v = item.split("=", 1)
        out[k.strip().replace("-", "_")] = v
    return out


def resolved(func):
    """Apply config-file and ``--set`` values to options the user did not pass."""

    @click.option("--config", "config_file", type=click.Path(exists=True, dir_okay=False),
                  help="JSON or key=value file of option values.")
    @click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE", help="Override one option.")
    @functools.wraps(func)
    def wrapper(config_file, overrides, **kwargs):
        ctx = click.get_current_context()
        layered = _read_config(config_file) if config_file else {}
        layered.update(_parse_sets(overrides))
        params = {p.name: p for p in ctx.command.params}
        for key, raw in layered.items():
            if key not in kwargs:
                raise click.UsageError(f"unknown setting {key!r} for {ctx.info_name}")
            if ctx.get_parameter_source(key) in (ParameterSource.DEFAULT, ParameterSource.DEFAULT_MAP):
                kwargs[key] = params[key].type_cast_value(ctx, raw)
        return func(**kwargs)

    return wrapper


def _snapshot(output, command, settings):
    clean = {k: (list(v) if isinstance(v, tuple) else v) for k, v in sorted(settings.items())}
    body = {"command": command, "settings": clean}
    Path(str(output) + ".run.json").write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")


def _write(path, text):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(text)


# commands ------------------------------------------------------------------------

@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def cli(verbose):
    """Train and sample flexible video diffusion models on synthetic benchmarks."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(message)s")
    threads = os.environ.get("FDM_THREADS")
    if threads:
        from threadpoolctl import threadpool_limits

        try:
            threadpool_limits(limits=int(threads))
        except ValueError:
            raise click.UsageError(f"FDM_THREADS must be an integer, got {threads!r}") from None


@cli.command("gen-data")
@click.argument("generator", type=click.Choice(["town-drive", "colored-rooms"]))
@click.option("--count", type=click.IntRange(min=1), default=100, show_default=True)
@click.option("--n", "n", type=click.IntRange(min=2), default=100, show_default=True, help="Frames per video.")
@click.option("--seed", type=click.IntRange(min=0), default=0, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
@click.option("--grid-size", type=click.IntRange(min=2), default=4, show_default=True)
@click.option("--v-max", type=float, default=3.0, show_default=True)
@click.option("--light-density", type=click.FloatRange(0, 1), default=0.3, show_default=True)
@click.option("--n-rooms", type=click.IntRange(min=2), default=4, show_default=True)
@click.option("--palette-size", type=click.IntRange(min=2), default=4, show_default=True)
@resolved
def gen_data(**kw):
    """Generate a synthetic dataset file (FDMV) with a .meta sidecar."""
    rng = stream(kw["seed"])
    if kw["generator"] == "town-drive":
        data = eb.gen_town_drive(kw["count"], kw["n"], kw["grid_size"], kw["v_max"], kw["light_density"], rng)
    else:
        data = eb.gen_colored_rooms(kw["count"], kw["n"], kw["n_rooms"], kw["palette_size"], rng)
    data.metadata["seed"] = kw["seed"]
    Path(kw["out"]).parent.mkdir(parents=True, exist_ok=True)
    eb.save_dataset(kw["out"], data)
    _snapshot(kw["out"], "gen-data", kw)
    click.echo(f"wrote {len(data)} videos of N={data.N} to {kw['out']}")


def _load_data(path, start=0, count=None):
    data = eb.load_dataset(path)
    stop = len(data) if count is None else start + count
    if not 0 <= start < stop <= len(data):
        raise ValidationFailed(f"video range [{start}, {stop}) outside the {len(data)} videos of {path}")
    return data, data.videos[start:stop]


@cli.command()
@click.option("--data", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True, help="Checkpoint path (FDMP).")
@click.option("--taskdist", type=click.Choice(td.TASK_DISTRIBUTIONS), default="structured", show_default=True)
@click.option("--k", "k", type=click.IntRange(min=2), default=10, show_default=True)
@click.option("--t", "t", type=click.IntRange(min=1), default=250, show_default=True)
@click.option("--steps", type=click.IntRange(min=0), default=1000, show_default=True)
@click.option("--lr", type=click.FloatRange(min=0, min_open=True), default=1e-4, show_default=True)
@click.option("--batch-size", type=click.IntRange(min=1), default=16, show_default=True)
@click.option("--channels", type=click.IntRange(min=2), default=64, show_default=True)
@click.option("--blocks", type=click.IntRange(min=1), default=2, show_default=True)
@click.option("--heads", type=click.IntRange(min=1), default=4, show_default=True)
@click.option("--train-count", type=click.IntRange(min=1), default=None,
              help="Train on the first this-many videos (default: all).")
@click.option("--seed", type=click.IntRange(min=0), default=0, show_default=True)
@click.option("--resume", is_flag=True, help="Continue training the checkpoint at --out.")
@resolved
def train(**kw):
    """Train a denoiser; writes the checkpoint and <out>.loss.csv."""
    _, videos = _load_data(kw["data"], 0, kw["train_count"])
    out = kw["out"]
    if kw["resume"]:
        if not Path(out).exists():
            raise ValidationFailed(f"--resume given but no checkpoint at {out}")
        model = FlexibleDiffusionModel.load(out)
        if (model.max_frames, model.diffusion_steps) != (kw["k"], kw["t"]):
            raise ValidationFailed("checkpoint K/T differ from --k/--t")
        model.set_params(warm_start=True, n_steps=kw["steps"])
        # the checkpoint's architecture and optimiser settings win over flags
        kw.update(channels=model.channels, blocks=model.n_blocks, heads=model.n_heads, lr=model.learning_rate,
                  batch_size=model.batch_size, taskdist=model.task_distribution, seed=model.random_state)
    else:
        model = FlexibleDiffusionModel(max_frames=kw["k"], channels=kw["channels"], n_blocks=kw["blocks"],
                                       n_heads=kw["heads"], diffusion_steps=kw["t"], n_steps=kw["steps"],
                                       learning_rate=kw["lr"], batch_size=kw["batch_size"],
                                       task_distribution=kw["taskdist"], random_state=kw["seed"])
    start = getattr(model, "n_iter_", 0)
    model.fit(videos)
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    model.save(out)
    rows = "".join(f"{start + i + 1},{l!r}\n" for i, l in enumerate(model.loss_curve_))
    loss_path = Path(out + ".loss.csv")
    if kw["resume"] and loss_path.exists():
        with loss_path.open("a") as fh:
            fh.write(rows)
    else:
        loss_path.write_text("step,loss\n" + rows)
    _snapshot(out, "train", kw)
    click.echo(f"trained to step {model.n_iter_}; checkpoint {out}")


def _scheme_from(ref, N, n_obs, K, skip=2):
    """A catalog name or a path to a scheme JSON file."""
    if ref in CATALOG:
        if n_obs is None:
            raise click.UsageError("--n-obs is required for catalog schemes")
        try:
            return make_scheme(ref, N, n_obs, K, skip=skip)
        except ValueError as exc:
            raise ValidationFailed(str(exc)) from None
    path = Path(ref)
    if not path.exists():
        raise click.UsageError(f"{ref!r} is neither a catalog scheme {tuple(CATALOG)} nor a file")
    return SamplingScheme.from_json(path.read_text(), name=path.stem)


def _check_scheme(scheme):
    if isinstance(scheme, AdaptiveScheme):
        return
    problems = validate(scheme)
    if problems:
        raise ValidationFailed("invalid sampling scheme:\n" + "\n".join(map(str, problems)))


def _video_metrics(kind, videos, reference, n_obs, meta, threshold=10.0):
    if kind == "town-drive":
        head = "video,op,mean_speed"
        rows = []
        for i, v in enumerate(videos):
            sp = eb.estimate_speeds(v)
            rows.append(f"{i},{eb.outlier_pct(sp, threshold)!r},{float(sp.mean())!r}")
    elif kind == "colored-rooms":
        head = "video,color_accuracy"
        n_rooms = int(meta.get("n_rooms", videos.shape[2] - 2))
        rows = [f"{i},{eb.color_accuracy(v, n_rooms, n_obs)!r}" for i, v in enumerate(videos)]
    else:
        head = "video,mse"
        rows = [f"{i},{float(np.mean((v - r) ** 2))!r}" for i, (v, r) in enumerate(zip(videos, reference))]
    return head + "\n" + "\n".join(rows) + "\n"


@cli.command()
@click.option("--model", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--data", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--scheme", required=True, help="Catalog name or scheme JSON file.")
@click.option("--n-obs", type=click.IntRange(min=1), default=None, help="Observed prefix length.")
@click.option("--skip", type=click.IntRange(min=1), default=2, show_default=True, help="two-res frame skip.")
@click.option("--start", type=click.IntRange(min=0), default=0, show_default=True, help="First video to complete.")
@click.option("--count", type=click.IntRange(min=1), default=None, help="Number of videos (default: rest).")
@click.option("--seed", type=click.IntRange(min=0), default=0, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
@resolved
def sample(**kw):
    """Complete videos under a sampling scheme; writes FDMV plus <out>.metrics.csv."""
    data, videos = _load_data(kw["data"], kw["start"], kw["count"])
    model = FlexibleDiffusionModel.load(kw["model"])
    scheme = _scheme_from(kw["scheme"], data.N, kw["n_obs"], model.max_frames, kw["skip"])
    _check_scheme(scheme)
    done = model.complete(videos, scheme, seed=kw["seed"])
    Path(kw["out"]).parent.mkdir(parents=True, exist_ok=True)
    eb.save_dataset(kw["out"], eb.Dataset(done, {**data.metadata, "scheme": kw["scheme"],
                                                 "n_obs": scheme.n_obs, "sample_seed": kw["seed"]}))
    kind = data.metadata.get("generator")
    _write(kw["out"] + ".metrics.csv", _video_metrics(kind, done, videos, scheme.n_obs, data.metadata))
    _snapshot(kw["out"], "sample", kw)
    click.echo(f"completed {len(done)} videos with {len(scheme.stages)} stages; wrote {kw['out']}")


@cli.command("optimize-scheme")
@click.option("--model", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--data", type=click.Path(exists=True, dir_okay=False), required=True,
              help="Videos used to estimate the loss.")
@click.option("--base-scheme", default="hierarchy2", show_default=True, help="Scheme supplying the latent stages.")
@click.option("--n-obs", type=click.IntRange(min=1), required=True)
@click.option("--videos-per-eval", type=click.IntRange(min=1), default=10, show_default=True)
@click.option("--t-grid-size", type=click.IntRange(min=1), default=10, show_default=True)
@click.option("--target-obs-count", type=click.IntRange(min=0), default=None)
@click.option("--seed", type=click.IntRange(min=0), default=0, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True, help="Scheme JSON output.")
@resolved
def optimize_scheme_cmd(**kw):
    """Greedily choose conditioning frames; writes scheme JSON and <out>.trace.csv."""
    data, videos = _load_data(kw["data"])
    model = FlexibleDiffusionModel.load(kw["model"])
    base = _scheme_from(kw["base_scheme"], data.N, kw["n_obs"], model.max_frames)
    if isinstance(base, AdaptiveScheme):
        base = base.base
    _check_scheme(base)
    cfg = OptimizerConfig.evenly_spaced(model.diffusion_steps, kw["t_grid_size"],
                                        videos_per_eval=kw["videos_per_eval"],
                                        target_obs_count=kw["target_obs_count"])
    result = optimize_scheme(model.denoiser_, model.schedule_, base, model._scale(videos), cfg, seed=kw["seed"])
    _write(kw["out"], result.scheme.to_json())
    _write(kw["out"] + ".trace.csv", result.trace_csv())
    _snapshot(kw["out"], "optimize-scheme", kw)
    click.echo(f"optimized {len(result.scheme.stages)} stages; wrote {kw['out']}")


@cli.command()
@click.option("--samples", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--reference", type=click.Path(exists=True, dir_okay=False), required=True,
              help="Held-out ground-truth videos.")
@click.option("--n-obs", type=click.IntRange(min=0), default=None,
              help="Observed prefix length (default: from the samples' metadata, else 0).")
@click.option("--threshold", type=click.FloatRange(min=0, min_open=True), default=10.0, show_default=True)
@click.option("--lag", type=click.IntRange(min=1), default=10, show_default=True)
@click.option("--bins", type=click.IntRange(min=1), default=50, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True, help="Metrics CSV.")
@resolved
def evaluate(**kw):
    """Dataset-level metrics; writes CSV plus speed histogram CSV/SVG for driving data."""
    samples = eb.load_dataset(kw["samples"])
    ref = eb.load_dataset(kw["reference"])
    if samples.videos.shape[1:] != ref.videos.shape[1:]:
        raise ValidationFailed("samples and reference differ in N or frame_dim")
    n_obs = kw["n_obs"] if kw["n_obs"] is not None else int(samples.metadata.get("n_obs", 0))
    kind = ref.metadata.get("generator")
    rows = [("n_samples", len(samples)), ("n_reference", len(ref))]
    if kind == "colored-rooms":
        n_rooms = int(ref.metadata.get("n_rooms", ref.frame_dim - 2))
        acc = [eb.color_accuracy(v, n_rooms, n_obs) for v in samples.videos]
        rows.append(("color_accuracy", float(np.mean(acc))))
    else:
        sm = eb.speed_metrics(samples.videos, ref.videos, kw["threshold"], kw["lag"])
        rows += [("op", sm["op"]), ("wd", sm["wd"])]
        s_sp = eb.speed_stats(samples.videos, lag=kw["lag"])
        r_sp = eb.speed_stats(ref.videos, lag=kw["lag"])
        cs, edges = eb.speed_histogram(s_sp, kw["threshold"], kw["bins"])
        cr, _ = eb.speed_histogram(r_sp, kw["threshold"], kw["bins"])
        hist = "bin_lo,bin_hi,samples,reference\n" + "".join(
            f"{edges[i]!r},{edges[i + 1]!r},{cs[i]},{cr[i]}\n" for i in range(len(cs)))
        _write(kw["out"] + ".hist.csv", hist)
        _write(kw["out"] + ".hist.svg", eb.render_histogram_svg({"samples": s_sp, "reference": r_sp},
                                                                kw["threshold"], kw["bins"]))
    if len(samples) >= 2 and len(ref) >= 2 and ref.N > kw["lag"]:
        rows.append(("fd", eb.feature_frechet(samples.videos, ref.videos)))
    _write(kw["out"], "metric,value\n" + "".join(f"{k},{v!r}\n" for k, v in rows))
    _snapshot(kw["out"], "evaluate", kw)
    click.echo("\n".join(f"{k}: {v}" for k, v in rows))


@cli.command("inspect-scheme")
@click.argument("scheme")
@click.option("--n", "n", type=click.IntRange(min=1), default=None, help="Video length (catalog schemes).")
@click.option("--n-obs", type=click.IntRange(min=1), default=None)
@click.option("--k", "k", type=click.IntRange(min=2), default=None)
@click.option("--skip", type=click.IntRange(min=1), default=2, show_default=True)
@click.option("--svg", type=click.Path(dir_okay=False), default=None, help="Write the stage diagram here.")
@resolved
def inspect_scheme(**kw):
    """Validate a scheme and optionally render it; exits 2 on violations."""
    if kw["scheme"] in CATALOG and (kw["n"] is None or kw["k"] is None):
        raise click.UsageError("--n, --n-obs and --k are required for catalog schemes")
    scheme = _scheme_from(kw["scheme"], kw["n"], kw["n_obs"], kw["k"], kw["skip"])
    if isinstance(scheme, AdaptiveScheme):
        scheme = scheme.base
    problems = validate(scheme)
    if kw["svg"]:
        _write(kw["svg"], render_svg(scheme))
        _snapshot(kw["svg"], "inspect-scheme", kw)
    click.echo(f"{scheme.name}: N={scheme.N} n_obs={scheme.n_obs} K={scheme.K} stages={len(scheme.stages)}")
    if problems:
        raise ValidationFailed("invalid sampling scheme:\n" + "\n".join(map(str, problems)))
    click.echo("valid")


@cli.command("inspect-taskdist")
@click.argument("name", type=click.Choice(td.TASK_DISTRIBUTIONS))
@click.option("--n", "n", type=click.IntRange(min=1), default=30, show_default=True)
@click.option("--k", "k", type=click.IntRange(min=2), default=10, show_default=True)
@click.option("--samples", type=click.IntRange(min=1), default=50, show_default=True)
@click.option("--seed", type=click.IntRange(min=0), default=0, show_default=True)
@click.option("--svg", type=click.Path(dir_okay=False), default=None)
@click.option("--csv", "csv_path", type=click.Path(dir_okay=False), default=None,
              help="Histogram of (|X|, |Y|) sizes.")
@resolved
def inspect_taskdist(**kw):
    """Draw tasks and render them / tabulate their sizes."""
    draw = td.task_sampler(kw["name"], kw["n"], kw["k"])
    rng = stream(kw["seed"])
    samples = [td.TaskSample(*draw(rng), kw["n"]) for _ in range(kw["samples"])]
    bad = [s for s in samples if s.violations(kw["k"])]
    if kw["svg"]:
        _write(kw["svg"], td.render_svg(samples, kw["n"]))
        _snapshot(kw["svg"], "inspect-taskdist", kw)
    if kw["csv_path"]:
        h = td.size_histogram(samples, kw["k"])
        _write(kw["csv_path"], "n_latent,n_observed,count\n" + "".join(
            f"{i},{j},{h[i, j]}\n" for i in range(h.shape[0]) for j in range(h.shape[1]) if h[i, j]))
    click.echo(f"{len(samples)} tasks, {len(bad)} with violations")
    if bad:
        raise ValidationFailed(f"{len(bad)} sampled tasks violate the constraints")


def main(argv=None):
    """Run the CLI and return its exit code instead of exiting."""
    try:
        rv = cli.main(args=argv, prog_name="flexdiff", standalone_mode=False)
        return rv if isinstance(rv, int) else EXIT_OK
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except ValidationFailed as exc:
        exc.show()
        return EXIT_INVALID
    except (click.UsageError, click.exceptions.Abort) as exc:
        if isinstance(exc, click.UsageError):
            exc.show()
        return EXIT_USAGE
    except click.ClickException as exc:
        exc.show()
        return EXIT_USAGE
    except NonFiniteError as exc:
        click.echo(f"Error: {exc}", err=True)
        return EXIT_NUMERIC
    except (SchemeError, ValueError, OSError, KeyError) as exc:
        click.echo(f"Error: {exc}", err=True)
        return EXIT_INVALID


def run():
    sys.exit(main())


if __name__ == "__main__":
    run()
