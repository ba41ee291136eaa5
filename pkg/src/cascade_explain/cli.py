"""Command line interface: ``cascade-explain {train,explain,importance,benchmark,synth}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 invariant
violation or internal failure.
"""

import csv
import io
import json
import sys
import traceback

import click

from .attribution import (build_attribution, cascade_contributions, cascade_mdi,
                          local_mdi, mda, ImportanceReport)
from .cascade import CascadeModel, fit_cascade, paper_bench_config, paper_small_config, predict_cascade
from .dataset import (CLASSIFICATION, GENERATORS, REGRESSION, gen_linear, gen_sim,
                      gen_threeclass, gen_sincos, load_csv, load_instances,
                      reorder_features, write_csv)
from .errors import DataError, InvariantViolation
from .evalbench import BenchmarkSpec, run_benchmark
from .forest import Forest
from .model_io import load_model, save_model

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INVARIANT = 0, 1, 2, 3
CALIBRATION_CHOICES = ["partial", "partial_additive", "additive", "multiplicative"]
PRESETS = {"paper-small": paper_small_config, "paper-bench": paper_bench_config}

_threads = click.option("--threads", type=click.IntRange(min=1), default=None,
                        help="Worker threads (default: $CASCADE_EXPLAIN_THREADS or 1).")
_format = click.option("--format", "fmt", type=click.Choice(["csv", "json"]), default="csv",
                       show_default=True, help="Report format.")
_out = click.option("--out", type=click.Path(dir_okay=False), default=None,
                    help="Output file (default: standard output).")
_seed = click.option("--seed", type=int, default=0, show_default=True, help="Random seed.")


def _emit(text, out):
    if out is None:
        click.echo(text, nl=not text.endswith("\n"))
    else:
        with open(out, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)


def _csv_text(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in r])
    return buf.getvalue()


def _load_cascade(path) -> CascadeModel:
    m = load_model(path)
    if not isinstance(m, CascadeModel):
        raise DataError(f"{path} holds a forest; this command needs a cascade model")
    return m


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
def cli():
    """Deep-forest training with feature contributions and MDI importance."""


@cli.command()
@click.option("--input", "input_path", type=click.Path(dir_okay=False), default=None,
              help="Training CSV with a header row.")
@click.option("--generator", type=click.Choice(sorted(GENERATORS)), default=None,
              help="Train on synthetic data instead of --input.")
@click.option("--n", "n_rows", type=click.IntRange(min=1), default=1000, show_default=True,
              help="Rows drawn by --generator.")
@click.option("--label-column", default="y", show_default=True)
@click.option("--task", type=click.Choice([REGRESSION, CLASSIFICATION]), default=REGRESSION,
              show_default=True, help="Task of --input data.")
@click.option("--preset", type=click.Choice(sorted(PRESETS)), default="paper-small",
              show_default=True,
              help="paper-small: 4 forests x 50 trees, depth 5; paper-bench: depth 8.")
@click.option("--max-layers", type=click.IntRange(min=1), default=10, show_default=True)
@click.option("--patience", type=click.IntRange(min=1), default=2, show_default=True)
@click.option("--valid-fraction", type=float, default=0.2, show_default=True)
@_seed
@click.option("--calibration", type=click.Choice(CALIBRATION_CHOICES), default="partial",
              show_default=True, help="Calibration used for the leaf contribution tables.")
@_threads
@click.option("--out", type=click.Path(dir_okay=False), required=True,
              help="Model file to write (.gz for gzip).")
def train(input_path, generator, n_rows, label_column, task, preset, max_layers, patience,
          valid_fraction, seed, calibration, threads, out):
    """Fit a cascade, print its growth log and save it."""
    if (input_path is None) == (generator is None):
        raise click.UsageError("give exactly one of --input or --generator")
    if input_path is not None:
        d = load_csv(input_path, label_column, task)
    else:
        d = GENERATORS[generator](n_rows, seed=seed)
    cfg = PRESETS[preset](seed=seed, max_layers=max_layers, patience=patience,
                          valid_fraction=valid_fraction, calibration=calibration,
                          threads=threads)
    m = fit_cascade(d, cfg)
    for j, s in enumerate(m.growth_log, start=1):
        mark = "  <- best" if j == m.best_layer else ""
        click.echo(f"layer {j}: validation {m.metric} = {s:.6f}{mark}")
    click.echo(f"kept {m.best_layer} layer(s); max calibration residual "
               f"{max(m.calibration_residual):.3g}")
    save_model(m, out)
    click.echo(f"model written to {out}")


@cli.command()
@click.option("--model", "model_path", type=click.Path(dir_okay=False), required=True)
@click.option("--input", "input_path", type=click.Path(dir_okay=False), required=True,
              help="Instances CSV; columns matched to the model's features by name.")
@click.option("--label-column", default="y", show_default=True,
              help="Column ignored if present.")
@click.option("--calibration", type=click.Choice(CALIBRATION_CHOICES), default=None,
              help="Rebuild the tables with this method (needs --train-input) "
                   "instead of using the stored ones.")
@click.option("--train-input", type=click.Path(dir_okay=False), default=None,
              help="The model's training CSV, for --calibration.")
@click.option("--task", type=click.Choice([REGRESSION, CLASSIFICATION]), default=None,
              help="Task of --train-input (default: the model's).")
@click.option("--layer", type=click.IntRange(min=1), default=None,
              help="Explain this layer instead of the best one.")
@_format
@_out
def explain(model_path, input_path, label_column, calibration, train_input, task, layer,
            fmt, out):
    """Per-instance bias, feature contributions and prediction."""
    m = _load_cascade(model_path)
    if calibration is not None and calibration.replace("_additive", "") != m.calibration:
        if train_input is None:
            raise click.UsageError(f"model tables use {m.calibration!r}; "
                                   "--train-input is needed to recalibrate")
        d = load_csv(train_input, label_column, task or m.task, classes=m.class_labels)
        m = build_attribution(m, reorder_features(d, m.feature_names), calibration)
    X = load_instances(input_path, m.feature_names, label_column)
    rep = cascade_contributions(m, X, layer)
    rep.check(1e-8)
    if fmt == "json":
        _emit(rep.to_json() + "\n", out)
    else:
        _emit(_csv_text(["instance", "feature", "name", "class", "value"], rep.rows()), out)


def _importance_data(m, path, label_column):
    classes = m.class_labels if m.task == CLASSIFICATION else None
    try:
        d = load_csv(path, label_column, m.task, classes=classes)
    except DataError as exc:
        if "label column" in str(exc):
            raise DataError(f"importance needs labels: {exc}") from None
        raise
    return reorder_features(d, m.feature_names)


@cli.command()
@click.option("--model", "model_path", type=click.Path(dir_okay=False), required=True)
@click.option("--input", "input_path", type=click.Path(dir_okay=False), required=True,
              help="Labelled CSV on which importance is computed.")
@click.option("--label-column", default="y", show_default=True)
@click.option("--method", type=click.Choice(["mdi", "local-mdi", "mda"]), default="mdi",
              show_default=True)
@click.option("--normalize", is_flag=True,
              help="Divide by the total response variance of the supplied data.")
@click.option("--n-repeats", type=click.IntRange(min=1), default=5, show_default=True,
              help="Permutations per feature for mda.")
@click.option("--layer", type=click.IntRange(min=1), default=None)
@_seed
@_format
@_out
def importance(model_path, input_path, label_column, method, normalize, n_repeats, layer,
               seed, fmt, out):
    """MDI, per-class local MDI or permutation importance."""
    m = load_model(model_path)
    if isinstance(m, Forest):
        raise DataError(f"{model_path} holds a forest; this command needs a cascade model")
    d = _importance_data(m, input_path, label_column)
    if method == "mdi":
        rep = cascade_mdi(m, d, layer)
    elif method == "local-mdi":
        rep = local_mdi(m, d, layer)
    else:
        scores = mda(lambda X: predict_cascade(m, X, layer), d, n_repeats, seed)
        rep = ImportanceReport(mdi=scores, method="mda", dataset=d.name,
                               feature_names=m.feature_names, class_labels=m.class_labels)
    if normalize:
        rep = rep.normalized(d.total_variance())
    if fmt == "json":
        _emit(rep.to_json() + "\n", out)
    else:
        _emit(_csv_text(["feature", "name", "class", "value"], rep.rows()), out)


@cli.command()
@click.option("--spec", "spec_path", type=click.Path(dir_okay=False), required=True,
              help="JSON benchmark spec (keys as in BenchmarkSpec).")
@_seed
@click.option("--runs", type=click.IntRange(min=1), default=None, help="Override n_runs.")
@_threads
@click.option("--out", type=click.Path(dir_okay=False), required=True, help="Results CSV.")
@click.option("--summary", type=click.Path(dir_okay=False), default=None,
              help="Summary JSON (default: <out>.summary.json).")
def benchmark(spec_path, seed, runs, threads, out, summary):
    """Relevant-feature benchmark over repeated runs."""
    try:
        with open(spec_path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise DataError(f"{spec_path}: {exc.strerror or exc}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{spec_path}: invalid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise DataError(f"{spec_path}: spec must be a JSON object")
    doc.setdefault("seed", seed)
    if runs is not None:
        doc["n_runs"] = runs
    if threads is not None:
        doc["threads"] = threads
    spec = BenchmarkSpec.from_dict(doc)
    res = run_benchmark(spec, progress=lambda r: click.echo(f"run {r + 1}/{spec.n_runs} done",
                                                            err=True))
    res.write_csv(out)
    res.write_summary(summary or out + ".summary.json")
    click.echo(res.format_summary())
    for f in res.failures:
        click.echo(f"failed: run {f['run']} {f['method']}: {f['error']}", err=True)


@cli.command()
@click.option("--generator", type=click.Choice(sorted(GENERATORS)), required=True)
@click.option("--n", "n_rows", type=click.IntRange(min=1), default=1000, show_default=True)
@click.option("--k", "n_features", type=click.IntRange(min=1), default=10, show_default=True,
              help="Feature count for the linear generator.")
@click.option("--noise-dims", type=click.IntRange(min=0), default=100, show_default=True,
              help="Irrelevant features for the threeclass generator.")
@_seed
@click.option("--label-column", default="y", show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True, help="CSV to write.")
def synth(generator, n_rows, n_features, noise_dims, seed, label_column, out):
    """Write a synthetic dataset plus a <out>.truth.json ground-truth sidecar."""
    params = {"n": n_rows, "seed": seed}
    if generator == "linear":
        d = gen_linear(n_rows, n_features, seed)
        params["K"] = n_features
    elif generator == "threeclass":
        d = gen_threeclass(n_rows, noise_dims, seed)
        params["noise_dims"] = noise_dims
    elif generator == "sim":
        d = gen_sim(n_rows, seed)
    else:
        d = gen_sincos(n_rows, seed)
    write_csv(d, out, label_column)
    truth = {"generator": generator, "params": params, "task": d.task,
             "label_column": label_column, "feature_names": list(d.feature_names),
             "relevant_mask": d.relevant_mask.tolist(),
             "relevant_features": [nm for nm, r in zip(d.feature_names, d.relevant_mask) if r],
             "class_labels": None if d.class_labels is None else list(d.class_labels)}
    with open(out + ".truth.json", "w", encoding="utf-8") as fh:
        json.dump(truth, fh, indent=1)
    click.echo(f"wrote {d.n} rows x {d.n_features} features to {out}")


def main(argv=None) -> int:
    """Run the CLI and return its exit code instead of exiting."""
    try:
        rv = cli.main(args=argv, prog_name="cascade-explain", standalone_mode=False)
        return rv if isinstance(rv, int) else EXIT_OK
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except (click.UsageError, click.exceptions.Abort) as exc:
        if isinstance(exc, click.UsageError):
            exc.show()
        return EXIT_USAGE
    except InvariantViolation as exc:
        click.echo(f"error: invariant violated: {exc}", err=True)
        return EXIT_INVARIANT
    except DataError as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_DATA
    except click.ClickException as exc:
        exc.show()
        return EXIT_DATA
    except Exception:
        click.echo("internal error:", err=True)
        traceback.print_exc()
        return EXIT_INVARIANT


def run():
    sys.exit(main())
