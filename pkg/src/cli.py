"""
TensorFact - Command Line Interface
"""

import logging
import sys
from fractions import Fraction
from pathlib import Path
from typing import Optional, Sequence, Tuple

import click

from . import __version__
from .anchors import kmeanspp_anchors
from .config import TrainConfig, get_settings, load_config
from .dataset import class_distribution, load_dataset, save_dataset
from .detector import augment_model, build_toy_detector, predict
from .errors import EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, DataError, TensorFactError, exit_code_for
from .experiment import evaluate_model, generate_datasets, run_experiment
from .factorized import param_counts
from .metrics import write_detection_lines
from .report import compression_report, load_manifest
from .training import finite_diff_check, make_gradcheck_case, train_phase1, train_phase2, write_history_log
from .visuals import plot_pr_curves
from .weights import load_weights, save_weights

logger = logging.getLogger(__name__)

GRADCHECK_TOLERANCE = 1e-6


def _config(config_path: Optional[str], seed: Optional[int]) -> TrainConfig:
    config = load_config(config_path)
    if seed is not None:
        config = config.with_overrides(seed=seed)
    return config


def _out_dir(ctx: click.Context, out: Optional[str]) -> Path:
    path = Path(out) if out else ctx.obj["settings"].out_dir
    path.mkdir(parents=True, exist_ok=True)
    return path


def _dataset(path: str):
    if not Path(path).exists():
        raise DataError(f"dataset directory not found: {path}")
    return load_dataset(path)


def _weights(path: str, canvas: Optional[int] = None):
    if not Path(path).exists():
        raise DataError(f"weight file not found: {path}")
    return load_weights(path, canvas)


def _number_list(ctx, param, value) -> Tuple[float, ...]:
    if not value:
        return ()
    try:
        return tuple(float(Fraction(token.strip())) for token in value.split(","))
    except (ValueError, ZeroDivisionError):
        raise click.BadParameter(f"expected numbers such as 0.9,0.8 or 1/9,1/4, got {value!r}") from None


def common_options(func):
    func = click.option("--out", "out", default=None, help="Output directory")(func)
    func = click.option("--config", "config_path", default=None, help="key = value config file")(func)
    func = click.option("--seed", type=int, default=None, help="Override the config seed")(func)
    return func


@click.group()
@click.version_option(__version__, prog_name="tensorfact")
@click.option("--log-level", default=None, help="Logging level (default: TENSORFACT_LOG_LEVEL or WARNING)")
@click.pass_context
def cli(ctx, log_level):
    """TensorFact: factorized convolutions with capacity augmentation."""
    settings = get_settings()
    logging.basicConfig(level=(log_level or settings.log_level).upper(),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    ctx.obj = {"settings": settings}


@cli.command("gen-data")
@common_options
@click.pass_context
def gen_data(ctx, seed, config_path, out):
    """Render all dataset splits."""
    config = _config(config_path, seed)
    out_dir = _out_dir(ctx, out)
    click.echo(f"🎨 Generating datasets (seed {config.seed})...")
    data = generate_datasets(config, ctx.obj["settings"].n_jobs)
    for key, dataset in data.items():
        save_dataset(dataset, out_dir / "data" / key)
        click.echo(f"📁 {key}: {len(dataset)} images")
        click.echo(class_distribution(dataset).to_string(index=False))
    click.echo(f"✅ Datasets written to {out_dir / 'data'}")
    return EXIT_OK


@cli.command("train-rgb")
@common_options
@click.option("--data", "data_dir", required=True, help="Modality-A training split")
@click.option("--val", "val_dir", default=None, help="Modality-A validation split")
@click.pass_context
def train_rgb(ctx, seed, config_path, out, data_dir, val_dir):
    """Phase 1: train the factorized detector on modality A."""
    config = _config(config_path, seed)
    out_dir = _out_dir(ctx, out)
    train = _dataset(data_dir)
    val = _dataset(val_dir) if val_dir else None
    model = build_toy_detector(config, canvas=train.canvas)
    click.echo(f"🔬 Phase 1: {len(train)} images, {config.epochs_phase1} epochs, alpha={config.alpha}")
    result = train_phase1(model, train, config, val)
    save_weights(result.model, out_dir / "phase1.tfw")
    write_history_log(result.history, out_dir / "history_phase1.log")
    click.echo(f"✅ Best epoch {result.best_epoch} (val L_d {result.best_val_loss:.6f}); "
               f"weights at {out_dir / 'phase1.tfw'}")
    return EXIT_OK


@cli.command("augment")
@common_options
@click.option("--weights", "weights_path", required=True, help="Phase-1 weight file")
@click.pass_context
def augment(ctx, seed, config_path, out, weights_path):
    """Add augmentation branches and freeze the base."""
    config = _config(config_path, seed)
    out_dir = _out_dir(ctx, out)
    model = _weights(weights_path, config.canvas)
    augmented = augment_model(model, config.delta_ratio, config.seed, config.train_head_phase2)
    save_weights(augmented, out_dir / "augmented.tfw")
    for i, layer in enumerate(augmented.factorized_layers):
        counts = param_counts(layer)
        click.echo(f"   layer {i}: r={layer.r} delta_r={layer.delta_r} +{counts.factored_delta} parameters")
    click.echo(f"✅ Augmented model: {augmented.param_total():,} parameters, "
               f"{augmented.trainable_total():,} trainable")
    return EXIT_OK


@cli.command("train-ir")
@common_options
@click.option("--weights", "weights_path", required=True, help="Augmented weight file")
@click.option("--data", "data_dir", required=True, help="Scarce modality-B training split")
@click.option("--val", "val_dir", default=None, help="Modality-B validation split")
@click.pass_context
def train_ir(ctx, seed, config_path, out, weights_path, data_dir, val_dir):
    """Phase 2: train the augmentation branches on modality B."""
    config = _config(config_path, seed)
    out_dir = _out_dir(ctx, out)
    train = _dataset(data_dir)
    val = _dataset(val_dir) if val_dir else None
    model = _weights(weights_path, train.canvas)
    lc = "off" if config.p_norm is None else f"L{config.p_norm}, omega_c={config.omega_c}"
    click.echo(f"🔬 Phase 2: {len(train)} images, {config.epochs} epochs, complementarity {lc}")
    result = train_phase2(model, train, config, val)
    save_weights(result.model, out_dir / "phase2.tfw")
    write_history_log(result.history, out_dir / "history_phase2.log")
    click.echo(f"✅ Best epoch {result.best_epoch}; weights at {out_dir / 'phase2.tfw'}")
    return EXIT_OK


@cli.command("eval")
@common_options
@click.option("--weights", "weights_path", required=True, help="Weight file")
@click.option("--data", "data_dir", required=True, help="Dataset split to evaluate on")
@click.option("--plot", is_flag=True, help="Write PR curves as PNG")
@click.option("--detections", "detections_path", default=None, help="Also write detection lines here")
@click.pass_context
def evaluate(ctx, seed, config_path, out, weights_path, data_dir, plot, detections_path):
    """mAP 50 and mAP 50-95 of a model."""
    dataset = _dataset(data_dir)
    model = _weights(weights_path, dataset.canvas)
    evaluation = evaluate_model(model, dataset)
    click.echo(f"📊 mAP50 = {evaluation.map50:.4f}   mAP50-95 = {evaluation.map50_95:.4f}")
    for class_id in evaluation.classes:
        click.echo(f"   class {class_id}: AP50 {evaluation.ap50[class_id]:.4f}  "
                   f"AP50-95 {evaluation.ap50_95[class_id]:.4f}  ({evaluation.gt_counts[class_id]} objects)")
    if detections_path:
        detections = predict(model, dataset.inputs(model.dtype), dataset.image_ids)
        Path(detections_path).write_text(write_detection_lines(detections), encoding="utf-8")
    if plot:
        path = plot_pr_curves(evaluation, _out_dir(ctx, out) / "pr_curves.png")
        click.echo(f"🖼️  PR curves at {path}")
    return EXIT_OK


@cli.command("report")
@click.option("--manifest", "manifest_path", default=None, help="Layer manifest")
@click.option("--weights", "weights_path", default=None, help="Weight file")
@click.option("--alpha", type=float, default=None, help="Capacity fraction")
@click.option("--baseline", type=int, required=True, help="Baseline parameter count")
@click.option("--params", type=int, default=None, help="Use a known parameter count directly")
@click.option("--trainable", is_flag=True, help="Count trainable (augmentation) parameters only")
def report(manifest_path, weights_path, alpha, baseline, params, trainable):
    """Compression row against a baseline parameter count."""
    if params is not None:
        source = params
    elif manifest_path:
        source = load_manifest(manifest_path)
    elif weights_path:
        source = _weights(weights_path)
        if alpha is None:
            alpha = source.alpha
    else:
        raise click.UsageError("one of --manifest, --weights or --params is required")
    row = compression_report(source, baseline, alpha=alpha, trainable=trainable,
                             label=f"alpha={alpha}" if alpha is not None else "model")
    click.echo(row.as_line())
    click.echo(f"   2-dp compression: {row.percent_2dp}%")
    for key, value in row.as_pairs().items():
        click.echo(f"{key} = {value}")
    return EXIT_OK


@cli.command("gradcheck")
@click.option("--seed", type=int, default=0, help="Model and sample seed")
@click.option("--p-norm", type=click.Choice(["none", "1", "2", "all"]), default="all",
              help="Complementarity norm to include")
@click.option("--omega-c", type=float, default=0.01, help="Complementarity weight")
@click.option("--epsilon", type=float, default=1e-3, help="Finite-difference step")
def gradcheck(seed, p_norm, omega_c, epsilon):
    """Compare analytic gradients with finite differences (64-bit)."""
    choices = {"none": [None], "1": [1], "2": [2], "all": [None, 1, 2]}[p_norm]
    model, sample = make_gradcheck_case(seed)
    worst = 0.0
    for p in choices:
        result = finite_diff_check(model, sample, epsilon=epsilon, omega_c=omega_c, p=p)
        label = "L_d only" if p is None else f"L_f with L{p}"
        click.echo(f"   {label}: max relative error {result.max_rel_error:.3e} over {result.n_checked} entries")
        worst = max(worst, result.max_rel_error)
    click.echo(f"max_rel_error = {worst:.3e}")
    if worst <= GRADCHECK_TOLERANCE:
        click.echo("✅ Gradients agree")
        return EXIT_OK
    click.echo(f"❌ Gradient error above {GRADCHECK_TOLERANCE:g}", err=True)
    return EXIT_NUMERIC


@cli.command("run-all")
@common_options
@click.option("--ablate", is_flag=True, help="Phase 2 without L_c, with L_1 and with L_2")
@click.option("--dense-baseline", is_flag=True, help="Add unfactorized baseline rows")
@click.option("--baseline-only", is_flag=True, help="Stop after the phase-1 evaluation")
@click.option("--plots", is_flag=True, help="Write PR-curve and history plots")
@click.option("--save-data", is_flag=True, help="Also write the generated datasets")
@click.option("--alpha-sweep", callback=_number_list, default=None,
              help="Extra phase-1 capacity fractions, e.g. 0.9,0.8")
@click.option("--delta-sweep", callback=_number_list, default=None,
              help="Extra augmentation ratios, e.g. 1/9,1/4")
@click.pass_context
def run_all(ctx, seed, config_path, out, ablate, dense_baseline, baseline_only, plots, save_data, alpha_sweep,
            delta_sweep):
    """Full pipeline: data, phase 1, augmentation, phase 2, evaluation, report."""
    config = _config(config_path, seed)
    out_dir = _out_dir(ctx, out)
    click.echo(f"🚀 Running TensorFact experiment (seed {config.seed}, config {config.config_hash()})")
    artifacts = run_experiment(config, out_dir, ablate=ablate, dense_baseline=dense_baseline,
                               baseline_only=baseline_only, plots=plots, save_data=save_data,
                               n_jobs=ctx.obj["settings"].n_jobs, alphas=alpha_sweep, delta_ratios=delta_sweep)
    click.echo(artifacts.report.to_frame().to_string(index=False))
    click.echo(f"✅ Report written to {out_dir / 'report.txt'}")
    return EXIT_OK


@cli.command("anchors")
@click.option("--data", "data_dir", required=True, help="Dataset split")
@click.option("--k", type=int, default=3, help="Number of anchors")
@click.option("--seed", type=int, default=0, help="K-Means++ seed")
def anchors(data_dir, k, seed):
    """K-Means++ anchor sizes of a dataset split."""
    dataset = _dataset(data_dir)
    centroids = kmeanspp_anchors(dataset.box_sizes(), k, seed)
    for w, h in centroids:
        click.echo(f"{w:.2f} {h:.2f}")
    click.echo(f"✅ {k} anchors from {len(dataset.box_sizes())} boxes")
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    Run the CLI and return its exit code.

    Args:
        argv: Arguments without the program name (``sys.argv[1:]`` when None)

    Returns:
        int: 0 success, 1 usage, 2 data, 3 numeric
    """
    args = list(sys.argv[1:] if argv is None else argv)
    if not args:
        with click.Context(cli, info_name="tensorfact") as ctx:
            click.echo(cli.get_help(ctx))
        return EXIT_USAGE
    try:
        result = cli.main(args=args, prog_name="tensorfact", standalone_mode=False)
    except click.ClickException as e:
        e.show()
        return EXIT_USAGE
    except click.Abort:
        click.echo("Aborted!", err=True)
        return EXIT_USAGE
    except (TensorFactError, OSError) as e:
        click.echo(f"❌ {e}", err=True)
        return exit_code_for(e)
    return result if isinstance(result, int) else EXIT_OK
