import click
from click_default_group import DefaultGroup
import contextlib
import csv
import io
import json
import pathlib
from typing import Dict, Optional

import numpy as np
from pydantic import ValidationError
import sqlite_utils

from mfmnet import (
    UnknownConfigError,
    get_network_config,
    get_network_configs_with_aliases,
    get_plugins,
    user_dir,
)
from .comparison import compare_activations
from .data import align_directory, load_dataset, load_face, parallel_map, split_train_val
from .errors import (
    DatasetIOError,
    DegenerateInputError,
    InvalidComparisonError,
    InvalidEmbeddingError,
    InvalidInputError,
    InvalidParameterError,
    InvalidShapeError,
    LandmarkParseError,
    MissingEmbeddingError,
    NumericDivergenceError,
    TensorFormatError,
)
from .gradcheck import run_gradcheck, sparsity_report
from .layers import EVAL, crop_mirror_batch
from .network import (
    REFERENCE_PARAMETER_COUNT,
    build_network,
    count_config_params,
    count_params,
    extract_embedding,
    layer_table,
    load_model,
    missing_tensors,
    save_model,
)
from .plugins import load_plugins, pm
from .runlog import RunLog
from .tensor import read_tensors, write_tensors
from .trainer import IterationRecord, epoch_loss_violations, train
from .utils import build_hyperparams, dicts_to_table_string, format_float, render_errors
from .verification import parse_pairs, verify, write_folds_csv, write_roc_csv

EXIT_IO = 1
EXIT_INVALID = 2
EXIT_DIVERGENCE = 3
EXIT_MISSING_IMAGE = 4
EXIT_MISSING_EMBEDDING = 5
EXIT_DEGENERATE = 6
EXIT_GRADCHECK = 7


class ExitCodeError(click.ClickException):
    "A ClickException that exits with one of the documented exit codes"

    def __init__(self, message: str, exit_code: int):
        super().__init__(message)
        self.exit_code = exit_code


@contextlib.contextmanager
def exit_codes(io_code: int = EXIT_IO):
    "Translate library errors into ExitCodeError"
    try:
        yield
    except LandmarkParseError as ex:
        raise ExitCodeError(str(ex), EXIT_INVALID)
    except NumericDivergenceError as ex:
        raise ExitCodeError(f"Training diverged: {ex}", EXIT_DIVERGENCE)
    except MissingEmbeddingError as ex:
        raise ExitCodeError(str(ex), EXIT_MISSING_EMBEDDING)
    except (DegenerateInputError, InvalidEmbeddingError) as ex:
        raise ExitCodeError(str(ex), EXIT_DEGENERATE)
    except ValidationError as ex:
        raise ExitCodeError(render_errors(ex.errors()), EXIT_INVALID)
    except UnknownConfigError as ex:
        raise ExitCodeError(ex.args[0], EXIT_INVALID)
    except (
        TensorFormatError,
        InvalidShapeError,
        InvalidParameterError,
        InvalidInputError,
        InvalidComparisonError,
    ) as ex:
        raise ExitCodeError(str(ex), EXIT_INVALID)
    except (DatasetIOError, OSError) as ex:
        raise ExitCodeError(str(ex), io_code)


def runs_db_path():
    return user_dir() / "runs.db"


def _run_log(no_log: bool, database: Optional[str]) -> Optional[RunLog]:
    if no_log:
        return None
    return RunLog(sqlite_utils.Database(database or runs_db_path()))


def _hp_options(fn):
    fn = click.option(
        "hp_options",
        "-o",
        "--hp",
        type=(str, str),
        multiple=True,
        help="Hyperparameter override, e.g. -o max_iters 2000",
    )(fn)
    fn = click.option(
        "hp_file",
        "--hp-file",
        type=click.Path(dir_okay=False),
        help="YAML file of hyperparameters",
    )(fn)
    fn = click.option("--seed", type=int, help="Seed for every random stream of the run")(fn)
    return fn


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.version_option()
def cli():
    """
    Train and evaluate Max-Feature-Map face representation networks

    A typical pipeline aligns a dataset, trains a network, extracts
    embeddings and verifies pairs:

    \b
        mfmnet align --input-dir raw --landmarks lm.txt --output-dir aligned
        mfmnet train --data aligned --config toy --out-model toy.mfm
        mfmnet extract --model toy.mfm --input-list faces.txt --out faces.emb
        mfmnet verify --embeddings faces.emb --pairs pairs.txt
    """


@cli.command()
@click.option("input_dir", "--input-dir", required=True, type=click.Path(file_okay=False), help="Dataset root")
@click.option("--landmarks", required=True, type=click.Path(dir_okay=False), help="Five-point landmark file")
@click.option("output_dir", "--output-dir", required=True, type=click.Path(file_okay=False), help="Where to write aligned faces")
@click.option("--threads", type=click.IntRange(min=1), default=1, help="Worker threads")
def align(input_dir, landmarks, output_dir, threads):
    "Align faces to 144x144 grayscale PGMs using five-point landmarks"
    with exit_codes():
        summary = align_directory(input_dir, landmarks, output_dir, threads)
    for path in summary.skipped:
        click.echo(f"Skipped {path}", err=True)
    click.echo(f"processed={summary.processed} skipped={len(summary.skipped)}")


@cli.command(name="train")
@click.option("--data", required=True, type=click.Path(file_okay=False), help="Aligned dataset root")
@click.option("config_name", "-c", "--config", default="toy", show_default=True, help="Config name, alias or YAML path")
@click.option("--activation", type=click.Choice(["mfm", "relu"]), help="Override the config activation")
@click.option("--num-classes", type=click.IntRange(min=2), help="Override the classifier width")
@_hp_options
@click.option("out_model", "--out-model", required=True, type=click.Path(dir_okay=False), help="Final model file")
@click.option("log_path", "--log", type=click.Path(dir_okay=False), help="CSV training log")
@click.option("--checkpoint-dir", type=click.Path(file_okay=False), help="Directory for periodic checkpoints")
@click.option("--precision", type=click.Choice(["32", "64"]), default="32", show_default=True)
@click.option("--threads", type=click.IntRange(min=1), default=1, help="Image loading threads")
@click.option("-n", "--no-log", is_flag=True, help="Don't log the run to the database")
@click.option("-d", "--database", type=click.Path(dir_okay=False), help="Path to the runs database")
@click.option("-q", "--quiet", is_flag=True, help="No progress output")
def train_command(
    data,
    config_name,
    activation,
    num_classes,
    hp_options,
    hp_file,
    seed,
    out_model,
    log_path,
    checkpoint_dir,
    precision,
    threads,
    no_log,
    database,
    quiet,
):
    "Train a network on an aligned dataset"
    with exit_codes(io_code=EXIT_IO):
        config = get_network_config(config_name)
        if activation:
            config = config.with_activation(activation)
        if num_classes:
            config = config.with_num_classes(num_classes)
        hp = build_hyperparams(hp_file, hp_options, seed, config)
        dataset = split_train_val(load_dataset(data), hp.seed)
    for path in dataset.skipped:
        click.echo(f"Skipped {path}", err=True)

    model = build_network(config, hp.seed, int(precision))
    run_log = _run_log(no_log, database)
    run_id = run_log.start("train", config, hp, str(out_model)) if run_log else None

    out_path = pathlib.Path(out_model)
    if hp.checkpoint_interval and checkpoint_dir is None:
        checkpoint_dir = str(out_path.parent / f"{out_path.stem}-checkpoints")
    if checkpoint_dir:
        pathlib.Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)

    log_fp = open(log_path, "w", newline="") if log_path else None
    writer = csv.writer(log_fp) if log_fp else None
    if writer:
        writer.writerow(["iteration", "lr", "train_loss", "val_accuracy"])

    def on_iteration(record: IterationRecord):
        logged = record.iteration % hp.log_interval == 0 or record.val_accuracy is not None
        if logged:
            if writer:
                writer.writerow(
                    [
                        record.iteration,
                        repr(record.lr),
                        repr(record.train_loss),
                        "" if record.val_accuracy is None else repr(record.val_accuracy),
                    ]
                )
            if run_log:
                run_log.record_eval(run_id, record)
            if not quiet:
                message = f"iteration={record.iteration} lr={record.lr:.3g} loss={record.train_loss:.4f}"
                if record.val_accuracy is not None:
                    message += f" val_accuracy={record.val_accuracy:.4f}"
                click.echo(message, err=True)
        if hp.checkpoint_interval and record.iteration % hp.checkpoint_interval == 0:
            save_model(model, pathlib.Path(checkpoint_dir) / f"checkpoint-{record.iteration:08d}.mfm")

    try:
        with exit_codes():
            _, state = train(model, dataset, hp, on_iteration, threads=threads)
            save_model(model, out_path)
    except ExitCodeError:
        if run_log:
            run_log.finish(run_id, "failed")
        raise
    finally:
        if log_fp:
            log_fp.close()

    final_loss = state.loss_history[-1][1] if state.loss_history else None
    final_accuracy = state.val_history[-1][1] if state.val_history else None
    if run_log:
        run_log.finish(run_id, "completed", final_loss, final_accuracy)
    click.echo(
        "model={} iterations={} final_loss={} val_accuracy={} epochs={} loss_increases={}".format(
            out_path,
            state.iteration,
            format_float(final_loss),
            format_float(final_accuracy),
            len(state.epoch_losses),
            epoch_loss_violations(state.epoch_losses),
        )
    )


@cli.command()
@click.option("model_path", "--model", required=True, type=click.Path(dir_okay=False), help="Model file")
@click.option("input_list", "--input-list", required=True, type=click.Path(dir_okay=False), help="File of image paths, one per line")
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="Embeddings file to write")
@click.option("index_path", "--index", type=click.Path(dir_okay=False), help="Index file, defaults to OUT.index")
@click.option("--root", type=click.Path(file_okay=False), help="Directory the listed paths are relative to")
@click.option("--batch-size", type=click.IntRange(min=1), default=64, show_default=True)
@click.option("--threads", type=click.IntRange(min=1), default=1, help="Image loading threads")
def extract(model_path, input_list, out, index_path, root, batch_size, threads):
    "Write one embedding per listed image, using the embedding layer of a model"
    with exit_codes(io_code=EXIT_INVALID):
        model = load_model(model_path, strict=False)
        missing = missing_tensors(model, model.config.embedding_layer)
        if missing:
            raise TensorFormatError("Model is missing tensors: {}".format(", ".join(missing)))
    with exit_codes():
        lines = [line.strip() for line in pathlib.Path(input_list).read_text().splitlines() if line.strip()]
    base = pathlib.Path(root) if root else pathlib.Path(".")
    unique = list(dict.fromkeys(lines))
    absent = [path for path in unique if not (base / path).is_file()]
    if absent:
        raise ExitCodeError("Missing images: {}".format(", ".join(absent)), EXIT_MISSING_IMAGE)

    config = model.config
    embeddings: Dict[str, np.ndarray] = {}
    with exit_codes():
        faces = parallel_map(lambda path: load_face(base / path, config.input_size), unique, threads)
        for start in range(0, len(unique), batch_size):
            chunk = np.stack(faces[start : start + batch_size]).astype(model.dtype)
            crops = crop_mirror_batch(chunk, EVAL, None, config.crop_size, config.input_size)
            for path, vector in zip(unique[start : start + batch_size], extract_embedding(model, crops)):
                embeddings[path] = vector
        write_tensors(out, [embeddings[path] for path in lines])
        index = pathlib.Path(index_path) if index_path else pathlib.Path(str(out) + ".index")
        index.write_text("".join(f"{path}\n" for path in lines))
    dim = embeddings[unique[0]].size if unique else 0
    click.echo(f"embeddings={len(lines)} dim={dim}")


@cli.command(name="verify")
@click.option("embeddings_path", "--embeddings", required=True, type=click.Path(dir_okay=False), help="Embeddings file")
@click.option("index_path", "--index", type=click.Path(dir_okay=False), help="Index file, defaults to EMBEDDINGS.index")
@click.option("--pairs", required=True, type=click.Path(dir_okay=False), help="Pair list, folds separated by blank lines")
@click.option("--report", type=click.Path(file_okay=False), help="Directory for roc.csv and folds.csv")
@click.option("--threads", type=click.IntRange(min=1), default=1, help="Folds scored in parallel")
@click.option("-n", "--no-log", is_flag=True, help="Don't log the report to the database")
@click.option("-d", "--database", type=click.Path(dir_okay=False), help="Path to the runs database")
def verify_command(embeddings_path, index_path, pairs, report, threads, no_log, database):
    "Score verification pairs: fold accuracy, EER and ROC"
    with exit_codes():
        vectors = read_tensors(embeddings_path)
        index = pathlib.Path(index_path) if index_path else pathlib.Path(str(embeddings_path) + ".index")
        names = [line.strip() for line in index.read_text().splitlines() if line.strip()]
        if len(names) != len(vectors):
            raise InvalidInputError(
                f"Index lists {len(names)} samples but the embeddings file holds {len(vectors)}"
            )
        result = verify(parse_pairs(pairs), dict(zip(names, vectors)), threads)
        if report:
            report_dir = pathlib.Path(report)
            report_dir.mkdir(parents=True, exist_ok=True)
            write_roc_csv(report_dir / "roc.csv", result.roc)
            if result.folds is not None:
                write_folds_csv(report_dir / "folds.csv", result.folds)

    summary = result.summary()
    for key, value in summary.items():
        click.echo(f"{key}: {value if isinstance(value, int) else format_float(value)}")
    run_log = _run_log(no_log, database)
    if run_log:
        run_log.record_verification(str(embeddings_path), str(pairs), result)


@cli.command()
@click.option("config_name", "-c", "--config", default="tiny", show_default=True, help="Config for the whole-network check")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--precision", type=click.Choice(["32", "64"]), default="64", show_default=True)
@click.option("--sparsity", is_flag=True, help="Also report activation and gradient sparsity per conv layer")
@click.option("--threads", type=click.IntRange(min=1), default=1, help="Checks run in parallel")
def gradcheck(config_name, seed, precision, sparsity, threads):
    "Compare every backward pass with finite differences"
    with exit_codes():
        config = get_network_config(config_name)
    results = run_gradcheck(int(precision), seed, config, threads)
    rows = [
        {
            "layer": r.layer,
            "max_rel_error": f"{r.max_rel_error:.3e}",
            "threshold": f"{r.threshold:g}",
            "status": "ok" if r.passed else "FAIL",
        }
        for r in results
    ]
    for line in dicts_to_table_string(["layer", "max_rel_error", "threshold", "status"], rows):
        click.echo(line)
    if sparsity:
        click.echo()
        sparsity_rows = [
            {
                "layer": row.layer,
                "activation_sparsity": f"{row.activation_sparsity:.3f}",
                "gradient_sparsity": f"{row.gradient_sparsity:.3f}",
            }
            for row in sparsity_report(config, seed, int(precision))
        ]
        for line in dicts_to_table_string(["layer", "activation_sparsity", "gradient_sparsity"], sparsity_rows):
            click.echo(line)
    failed = [r.layer for r in results if not r.passed]
    if failed:
        raise ExitCodeError("Gradient check failed for: {}".format(", ".join(failed)), EXIT_GRADCHECK)


@cli.command()
@click.option("model_path", "--model", type=click.Path(dir_okay=False), help="Model file to describe")
@click.option("config_name", "-c", "--config", help="Config name, alias or YAML path to describe")
def info(model_path, config_name):
    "Show the layer table and parameter counts of a model or config (shapes only, single-threaded)"
    if bool(model_path) == bool(config_name):
        raise click.UsageError("Pass exactly one of --model or --config")
    with exit_codes(io_code=EXIT_INVALID):
        if model_path:
            model = load_model(model_path)
            config = model.config
            total = count_params(model).total
        else:
            config = get_network_config(config_name)
            total = count_config_params(config)
    click.echo(f"{config.name}: {config.activation}, input {_size(config.input_size)}, crop {_size(config.crop_size)}")
    for line in dicts_to_table_string(["name", "type", "filter", "output", "params"], layer_table(config)):
        click.echo(line)
    click.echo(f"Total parameters: {total:,}")
    click.echo(f"Reference count:  {REFERENCE_PARAMETER_COUNT:,}")


def _size(pair) -> str:
    return "{}x{}".format(*pair)


@cli.command()
@click.option("--data", required=True, type=click.Path(file_okay=False), help="Aligned dataset root")
@click.option("config_name", "-c", "--config", default="toy", show_default=True, help="Config name, alias or YAML path")
@_hp_options
@click.option("--out", type=click.Path(dir_okay=False), help="CSV file, defaults to stdout")
@click.option("--threads", type=click.IntRange(min=1), default=1, help="Image loading threads")
@click.option("-q", "--quiet", is_flag=True, help="No progress output")
def compare(data, config_name, hp_options, hp_file, seed, out, threads, quiet):
    "Train MFM and ReLU builds of a config and compare validation accuracy"
    with exit_codes():
        config = get_network_config(config_name)
        hp = build_hyperparams(hp_file, hp_options, seed, config)
        dataset = split_train_val(load_dataset(data), hp.seed)

    def on_iteration(activation: str, record: IterationRecord):
        if not quiet and record.val_accuracy is not None:
            click.echo(f"{activation} iteration={record.iteration} val_accuracy={record.val_accuracy:.4f}", err=True)

    with exit_codes():
        comparison = compare_activations(
            dataset,
            (config.with_activation("mfm"), config.with_activation("relu")),
            hp,
            threads=threads,
            callback=on_iteration,
        )
        if out:
            comparison.write_csv(out)
        else:
            buffer = io.StringIO()
            writer = csv.writer(buffer)
            writer.writerow(["iteration", "val_accuracy_mfm", "val_accuracy_relu"])
            writer.writerows(
                [row["iteration"], repr(row["val_accuracy_mfm"]), repr(row["val_accuracy_relu"])]
                for row in comparison.to_dicts()
            )
            click.echo(buffer.getvalue(), nl=False)
    crossover = comparison.crossover_iteration
    click.echo(
        "MFM curve at or above ReLU from iteration {}".format(crossover)
        if crossover is not None
        else "MFM curve does not stay above ReLU",
        err=True,
    )


@cli.group(
    cls=DefaultGroup,
    default="list",
    default_if_no_args=True,
)
def configs():
    "Registered network configs"


@configs.command(name="list")
@click.option("queries", "-q", "--query", multiple=True, help="Search for configs matching these strings")
def configs_list(queries):
    "List registered network configs"
    for item in get_network_configs_with_aliases():
        if queries and not all(item.matches(q) for q in queries):
            continue
        config = item.config
        output = "{}: {}, input {}, crop {}, {} classes".format(
            config.name, config.activation, _size(config.input_size), _size(config.crop_size), config.num_classes
        )
        if item.aliases:
            output += " (aliases: {})".format(", ".join(item.aliases))
        click.echo(output)


@configs.command(name="show")
@click.argument("name")
def configs_show(name):
    "Output a config as YAML"
    with exit_codes():
        config = get_network_config(name)
    click.echo(config.to_yaml(), nl=False)


@cli.group(
    cls=DefaultGroup,
    default="list",
    default_if_no_args=True,
)
def logs():
    "Explore logged training runs"


@logs.command(name="path")
def logs_path():
    "Output the path to the runs.db file"
    click.echo(runs_db_path())


@logs.command(name="list")
@click.option("-n", "--count", type=int, default=10, show_default=True, help="Number of runs to show, 0 for all")
@click.option("-d", "--database", type=click.Path(dir_okay=False), help="Path to the runs database")
@click.option("json_", "--json", is_flag=True, help="Output runs as JSON")
def logs_list(count, database, json_):
    "Show recent training runs"
    path = pathlib.Path(database) if database else runs_db_path()
    if not path.exists():
        raise click.ClickException("No runs database found at {}".format(path))
    runs = RunLog(sqlite_utils.Database(path)).list_runs(count or None)
    if json_:
        click.echo(json.dumps(runs, indent=2))
        return
    rows = [
        {
            "id": run["id"],
            "started": (run["started"] or "")[:19],
            "config": run["config_name"],
            "activation": run["activation"],
            "status": run["status"],
            "loss": format_float(run["final_loss"]),
            "accuracy": format_float(run["final_accuracy"]),
        }
        for run in runs
    ]
    for line in dicts_to_table_string(
        ["id", "started", "config", "activation", "status", "loss", "accuracy"], rows
    ):
        click.echo(line)


@cli.command(name="plugins")
@click.option("--all", help="Include built-in default plugins", is_flag=True)
@click.option("hooks", "--hook", help="Filter for plugins that implement this hook", multiple=True)
def plugins_list(all, hooks):
    "List installed plugins"
    plugins = get_plugins(all)
    hooks = set(hooks)
    if hooks:
        plugins = [plugin for plugin in plugins if hooks.intersection(plugin["hooks"])]
    click.echo(json.dumps(plugins, indent=2))


load_plugins()

pm.hook.register_commands(cli=cli)
