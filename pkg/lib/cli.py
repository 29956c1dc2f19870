"""
Command-line interface for splat-align.

Exit codes: 0 on success, 1 for usage and configuration errors, 2 for bad
data, malformed files, invalid inputs, numeric failures and missing files.
"""
import json
import logging
import sys
from pathlib import Path

import click

from lib.errors import ConfigError, DataError, FormatError, InputError, NumericError
from lib.logging_config import configure_logging

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2


class SplatAlignGroup(click.Group):
    """Click group that maps splat-align errors onto exit codes."""

    def main(self, args=None, prog_name=None, complete_var=None, standalone_mode=True, **extra):
        code = self._run(args, prog_name, complete_var, **extra)
        if standalone_mode:
            sys.exit(code)
        return code

    def _run(self, args, prog_name, complete_var, **extra):
        try:
            result = super().main(args=args, prog_name=prog_name, complete_var=complete_var,
                                  standalone_mode=False, **extra)
        except click.exceptions.Abort:
            click.echo("Aborted!", err=True)
            return EXIT_USAGE
        except click.ClickException as e:
            e.show()
            return EXIT_USAGE
        except ConfigError as e:
            click.echo(f"Configuration error: {e}", err=True)
            return EXIT_USAGE
        except (DataError, FormatError, InputError, NumericError) as e:
            click.echo(f"Error: {e}", err=True)
            return EXIT_DATA
        except FileNotFoundError as e:
            click.echo(f"File not found: {e}", err=True)
            return EXIT_DATA
        return result if isinstance(result, int) else EXIT_OK


def _int_list(ctx, param, value):
    if value is None:
        return None
    try:
        items = tuple(int(v) for v in str(value).split(",") if v.strip())
    except ValueError:
        raise click.BadParameter(f"expected comma-separated integers, got '{value}'")
    if not items:
        raise click.BadParameter("expected at least one value")
    return items


def _color(ctx, param, value):
    try:
        rgb = tuple(float(v) for v in value.split(","))
    except ValueError:
        raise click.BadParameter(f"expected r,g,b floats, got '{value}'")
    if len(rgb) != 3 or not all(0.0 <= c <= 1.0 for c in rgb):
        raise click.BadParameter(f"expected three values in [0, 1], got '{value}'")
    return rgb


def _emit(text, output):
    """Write text to a file, or to stdout when no file is given."""
    if output:
        Path(output).parent.mkdir(parents=True, exist_ok=True)
        Path(output).write_text(text + "\n")
        click.echo(f"Report written to {output}")
    else:
        click.echo(text)


@click.group(cls=SplatAlignGroup)
@click.option('--log-level', default=None, help='Log level (defaults to $SPLAT_ALIGN_LOG_LEVEL or INFO)',
              type=click.Choice(['DEBUG', 'INFO', 'WARNING', 'ERROR'], case_sensitive=False))
def cli(log_level):
    configure_logging(log_level)


@cli.command()
@click.option('--output', required=True, help='Dataset directory to create', type=click.Path(file_okay=False))
@click.option('--seed', default=42, show_default=True, help='Random seed', type=int)
@click.option('--classes', default=8, show_default=True, help='Number of classes', type=click.IntRange(min=1))
@click.option('--items-per-class', default=64, show_default=True, type=click.IntRange(min=1))
@click.option('--gaussians', default=256, show_default=True, help='Gaussians per item', type=click.IntRange(min=1))
@click.option('--embed-dim', default=64, show_default=True, type=click.IntRange(min=1))
@click.option('--attribute-dependent', is_flag=True, help='Pair classes that differ only in opacity, scale and rotation')
def synth(output, seed, classes, items_per_class, gaussians, embed_dim, attribute_dependent):
    """
    Generate a synthetic text-image-3DGS triplet dataset.
    """
    from lib.dataset import synthesize_dataset
    data = synthesize_dataset(output, seed=seed, num_classes=classes, items_per_class=items_per_class,
                              gaussians_per_item=gaussians, embed_dim=embed_dim,
                              attribute_dependent=attribute_dependent)
    click.echo(f"Wrote {len(data.train)} train and {len(data.test)} test items to {output}")


@cli.command()
@click.argument('plys', nargs=-1, required=True, type=click.Path(dir_okay=False))
@click.option('--dataset', required=True, help='Dataset directory to add the clouds to', type=click.Path(file_okay=False))
@click.option('--label', required=True, help='Class label of the ingested clouds', type=str)
@click.option('--caption', default=None, help='Caption shared by the ingested clouds', type=str)
@click.option('--split', default='train', show_default=True, type=click.Choice(['train', 'test']))
@click.option('--max-gaussians', default=1024, show_default=True, help='Keep this many Gaussians by opacity',
              type=click.IntRange(min=1))
def ingest(plys, dataset, label, caption, split, max_gaussians):
    """
    Add third-party 3DGS PLY files to a dataset, pruned by opacity.
    """
    from lib.dataset import ingest_clouds
    manifest = ingest_clouds(plys, dataset, label=label, caption=caption, split=split, max_gaussians=max_gaussians)
    click.echo(f"{split} manifest now holds {len(manifest)} items")


@cli.command()
@click.option('--input', 'input_path', required=True, help='Point-cloud PLY (x y z, optional red green blue)',
              type=click.Path(dir_okay=False))
@click.option('--output', required=True, help='3DGS PLY to write', type=click.Path(dir_okay=False))
@click.option('--opacity', default=0.4, show_default=True, type=click.FloatRange(0.0, 1.0))
@click.option('--scale', default=0.4, show_default=True, type=click.FloatRange(min=0.0))
def convert(input_path, output, opacity, scale):
    """
    Turn a point cloud into isotropic 3D Gaussians.
    """
    from lib.ply_io import load_point_cloud_ply, save_ply
    cloud = load_point_cloud_ply(input_path, opacity_init=opacity, scale_init=scale)
    if len(cloud) == 0:
        raise DataError(f"Point cloud {input_path} has no points")
    save_ply(cloud, output)
    click.echo(f"Converted {len(cloud)} points to Gaussians in {output}")


@cli.command()
@click.option('--config', 'config_path', required=True, help='Training config JSON', type=click.Path(dir_okay=False))
@click.option('--seed', default=None, help='Override the config seed', type=int)
@click.option('--epochs', default=None, help='Override the number of epochs', type=int)
@click.option('--output', default=None, help='Override the checkpoint directory', type=click.Path(file_okay=False))
def train(config_path, seed, epochs, output):
    """
    Train the Gaussian encoder with the contrastive alignment losses.
    """
    from lib.config import TrainConfig
    from lib.training import train as run_training
    if not Path(config_path).exists():
        raise FileNotFoundError(config_path)
    config = TrainConfig.from_json_file(config_path)
    overrides = {k: v for k, v in (("seed", seed), ("epochs", epochs), ("output_dir", output)) if v is not None}
    config = config.with_overrides(**overrides)
    checkpoint = run_training(config)
    losses = checkpoint.metadata["epoch_losses"]
    click.echo(f"Trained {len(losses)} epochs, final mean loss {losses[-1]:.4f}; checkpoint in {config.output_dir}")
    if "evaluation" in checkpoint.metadata:
        from lib.evaluation import MetricsReport, format_report_text
        click.echo(format_report_text(MetricsReport.from_dict(checkpoint.metadata["evaluation"])))


@cli.group(name='eval')
def evaluate():
    """
    Zero-shot classification and retrieval on a trained checkpoint.
    """


@evaluate.command()
@click.option('--ckpt', required=True, help='Checkpoint directory', type=click.Path(file_okay=False))
@click.option('--manifest', required=True, help='Dataset manifest to evaluate', type=click.Path(dir_okay=False))
@click.option('--prompts', required=True, help='Class prompt embedding table', type=click.Path(file_okay=False))
@click.option('--ks', default='1,3,5', show_default=True, callback=_int_list, help='Comma-separated k values')
@click.option('--batch-size', default=80, show_default=True, help='Clouds encoded per batch', type=click.IntRange(min=1))
@click.option('--format', 'fmt', default='text', help='Output format (json, text)', type=click.Choice(['json', 'text']))
@click.option('--output', default=None, help='Output file path (stdout if not specified)', type=str)
def classify(ckpt, manifest, prompts, ks, batch_size, fmt, output):
    """
    Rank each cloud against every class prompt.
    """
    from lib.alignment import load_embedding_table
    from lib.checkpoint import load_checkpoint
    from lib.dataset import load_manifest
    from lib.evaluation import format_report_text, zero_shot_classify
    report = zero_shot_classify(load_checkpoint(ckpt), load_manifest(manifest), load_embedding_table(prompts), ks,
                                batch_size=batch_size)
    _emit(json.dumps(report.to_dict(), indent=2) if fmt == 'json' else format_report_text(report), output)


@evaluate.command()
@click.option('--ckpt', required=True, help='Checkpoint directory', type=click.Path(file_okay=False))
@click.option('--manifest', required=True, help='Dataset manifest to evaluate', type=click.Path(dir_okay=False))
@click.option('--queries', required=True, help='Text or image embedding table', type=click.Path(file_okay=False))
@click.option('--ks', default=None, callback=_int_list, help='Comma-separated k values (1,5,10 text; 1,3,5 image)')
@click.option('--batch-size', default=80, show_default=True, help='Clouds encoded per batch', type=click.IntRange(min=1))
@click.option('--format', 'fmt', default='text', help='Output format (json, text)', type=click.Choice(['json', 'text']))
@click.option('--output', default=None, help='Output file path (stdout if not specified)', type=str)
def retrieve(ckpt, manifest, queries, ks, batch_size, fmt, output):
    """
    Retrieve the paired cloud for every text or image query.
    """
    from lib.alignment import load_embedding_table
    from lib.checkpoint import load_checkpoint
    from lib.dataset import load_manifest
    from lib.evaluation import format_report_text, retrieve as run_retrieval
    report = run_retrieval(load_checkpoint(ckpt), load_manifest(manifest), load_embedding_table(queries), ks,
                           batch_size=batch_size)
    _emit(json.dumps(report.to_dict(), indent=2) if fmt == 'json' else format_report_text(report), output)


@cli.command()
@click.option('--input', 'input_path', required=True, help='3DGS PLY to render', type=click.Path(dir_okay=False))
@click.option('--output', required=True, help='PPM image to write', type=click.Path(dir_okay=False))
@click.option('--mode', default='pinhole', show_default=True, type=click.Choice(['pinhole', 'orthographic']))
@click.option('--width', default=128, show_default=True, type=click.IntRange(min=1))
@click.option('--height', default=128, show_default=True, type=click.IntRange(min=1))
@click.option('--azimuth', default=30.0, show_default=True, help='Orbit azimuth in degrees', type=float)
@click.option('--elevation', default=20.0, show_default=True, help='Orbit elevation in degrees', type=float)
@click.option('--distance', default=3.0, show_default=True, type=click.FloatRange(min=0.0, min_open=True))
@click.option('--background', default='0,0,0', show_default=True, callback=_color, help='Background color r,g,b')
def render(input_path, output, mode, width, height, azimuth, elevation, distance, background):
    """
    Splat a normalized cloud from an orbit camera into a PPM image.
    """
    from lib.gaussians import normalize_cloud
    from lib.ply_io import load_ply
    from lib.renderer import CameraMode, orbit_camera, render as splat, write_ppm
    cloud = load_ply(input_path)
    if len(cloud) == 0:
        logger.warning(f"{input_path} has no Gaussians; writing the background only")
    else:
        cloud, _, _ = normalize_cloud(cloud)
    camera = orbit_camera(CameraMode(mode), width, height, azimuth_deg=azimuth, elevation_deg=elevation,
                          distance=distance)
    image = splat(cloud, camera, background=background)
    write_ppm(image, output)
    click.echo(f"Wrote {width}x{height} image to {output} (non-black: {'yes' if not image.is_black() else 'no'})")


@cli.command()
@click.option('--config', 'config_path', required=True, help='Base training config JSON', type=click.Path(dir_okay=False))
@click.option('--variants', default='exp3,exp4,exp5,exp6,exp7', show_default=True, help='Comma-separated variants')
@click.option('--seeds', default=None, callback=_int_list, help='Comma-separated seeds (default: config seed)')
@click.option('--save-checkpoints', is_flag=True, help='Keep a checkpoint per variant and seed')
@click.option('--format', 'fmt', default='text', help='Output format (json, text)', type=click.Choice(['json', 'text']))
@click.option('--output', default=None, help='Output file path (stdout if not specified)', type=str)
def ablate(config_path, variants, seeds, save_checkpoints, fmt, output):
    """
    Train and compare encoder variants with the same data and seeds.
    """
    from lib.ablation import format_ablation_text, run_ablation
    from lib.config import TrainConfig
    if not Path(config_path).exists():
        raise FileNotFoundError(config_path)
    config = TrainConfig.from_json_file(config_path)
    names = [v.strip() for v in variants.split(",") if v.strip()]
    rows = run_ablation(config, names, seeds=seeds, save_checkpoints=save_checkpoints)
    if fmt == 'json':
        _emit(json.dumps([row.to_dict() for row in rows], indent=2), output)
    else:
        _emit(format_ablation_text(rows), output)


@cli.command()
@click.option('--seed', default=0, show_default=True, type=int)
@click.option('--trials', default=10, show_default=True, help='Random inputs per op', type=click.IntRange(min=1))
@click.option('--skip-end-to-end', is_flag=True, help='Only check individual ops')
def gradcheck(seed, trials, skip_end_to_end):
    """
    Verify every backward rule against central finite differences.
    """
    from lib.gradcheck import format_gradcheck_text, run_suite
    results = run_suite(seed=seed, trials=trials, end_to_end=not skip_end_to_end)
    click.echo(format_gradcheck_text(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_DATA


def main(argv=None) -> int:
    return cli.main(args=argv, prog_name="splat-align", standalone_mode=False)
