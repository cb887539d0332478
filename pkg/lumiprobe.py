#!/usr/bin/env python3
"""
LumiProbe - environment map estimation from specular highlights on lighting probes
"""

import json
import logging
import math
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import click
import colorlog
import numpy as np
import yaml
from rich.console import Console
from rich.progress import Progress, SpinnerColumn, TextColumn
from rich.table import Table

from src.config import Config
from src.core import EnvironmentMap, Image, Material, make_normal_map_probe
from src.envmap import EnvmapEstimator, estimate_summary, rl_deconvolve, select_skin_type
from src.errors import AcceptanceError, DomainError, LumiProbeError
from src.lights import Ray, detect_lights, lights_to_scene, match_lights, triangulate
from src.lowrank import HighlightSeparator, SeparationProblem
from src.metrics import nrmse, relight_error, rmse, ssim
from src.pfm import (read_envmap, read_image, read_kernel_params, read_normals, read_pfm, write_envmap,
                     write_image, write_kernel_params, write_pfm, write_png_preview)
from src.renderer import LayerSet, ProbeRenderer, clip_to_ldr, shading_chromaticity_rgb
from src.report_generator import ReportGenerator, format_record
from src.scene import SceneDescription, build_environment, build_probe, environment_for_probe, load_scene

logger = logging.getLogger("lumiprobe")

console = Console(stderr=True)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_ACCEPTANCE = 3


def setup_logging(level: str):
    """Colored stderr logging, configured once per process"""
    handler = colorlog.StreamHandler()
    handler.setFormatter(colorlog.ColoredFormatter(
        '%(log_color)s%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    ))
    root = logging.getLogger()
    root.handlers = [handler]
    root.setLevel(getattr(logging, level.upper(), logging.INFO))


class LumiProbe:
    """Main application: wires the pipeline stages to files"""

    def __init__(self, config: Config):
        self.config = config
        self.renderer = ProbeRenderer(config)
        self.separator = HighlightSeparator(config)
        self.estimator = EnvmapEstimator(config)

    def render_scene(self, scene: SceneDescription, out: Path,
                     noise: float = 0.0) -> List[Tuple[LayerSet, EnvironmentMap]]:
        """Render every probe, clip its composite and write all layers"""

        base = build_environment(scene)
        rng = np.random.default_rng(self.config.seed)
        rendered = []
        for i, spec in enumerate(scene.probes):
            probe, material = build_probe(scene, spec, self.config)
            env = environment_for_probe(scene, spec, base)
            layers = self.renderer.render_probe(probe, material, env, scene.view)
            composite = layers.composite
            if noise > 0:
                noisy = composite.pixels + rng.normal(0.0, noise, composite.pixels.shape) * layers.silhouette[..., None]
                composite = Image(np.maximum(noisy, 0.0))
            clipped = clip_to_ldr(composite, scene.clip_level)

            prefix = out / f"probe{i}"
            write_image(f"{prefix}_composite.pfm", clipped)
            write_image(f"{prefix}_composite_hdr.pfm", composite)
            write_image(f"{prefix}_diffuse.pfm", layers.diffuse)
            write_image(f"{prefix}_highlight.pfm", layers.highlight)
            write_image(f"{prefix}_shading.pfm", layers.shading)
            write_pfm(f"{prefix}_shading_chroma.pfm", shading_chromaticity_rgb(layers.shading_chromaticity))
            write_pfm(f"{prefix}_normals.pfm", layers.normals)
            write_envmap(f"{prefix}_env.pfm", env)
            for name, pixels in (("composite", clipped.pixels), ("diffuse", layers.diffuse.pixels),
                                 ("highlight", layers.highlight.pixels), ("env", env.pixels)):
                write_png_preview(f"{prefix}_{name}.png", pixels)
            rendered.append((layers, env))
        return rendered

    def roundtrip(self, scene: SceneDescription, out: Path) -> List[Dict[str, Any]]:
        """render -> estimate -> relight per probe, then lights across probes"""

        records = []
        estimates = []
        with Progress(SpinnerColumn(), TextColumn("[progress.description]{task.description}"),
                      console=console) as progress:
            task = progress.add_task("Rendering probes...", total=None)
            rendered = self.render_scene(scene, out)
            progress.update(task, completed=True)

            task = progress.add_task("Estimating environment maps...", total=len(rendered))
            for i, (spec, (layers, env)) in enumerate(zip(scene.probes, rendered)):
                probe, material = build_probe(scene, spec, self.config)
                # the rendered highlight is unclipped, so no recolouring is needed
                estimate = self.estimator.estimate(layers.highlight, probe, material, scene.view,
                                                   size=scene.map_size)
                self.write_estimate(out / f"probe{i}_estimate.pfm", estimate)
                pre = relight_error(env, estimate.normalized, config=self.config)
                post = relight_error(env, estimate.final, config=self.config)
                covered = estimate.final.coverage
                records.append({
                    'record': 'roundtrip',
                    'probe': i,
                    'coverage': post.coverage,
                    'rmse_env_pre': rmse(estimate.normalized, env, covered),
                    'rmse_env_post': rmse(estimate.final, env, covered),
                    'relight_diffuse_pre': pre.rmse_diffuse,
                    'relight_glossy_pre': pre.rmse_glossy,
                    'rmse_diffuse': post.rmse_diffuse,
                    'rmse_glossy': post.rmse_glossy,
                    'rl_iterations': estimate.iterations,
                })
                estimates.append(estimate)
                progress.advance(task)

        if len(scene.probes) >= 2 and scene.point_lights:
            records.extend(self._roundtrip_lights(scene, [e.final for e in estimates]))
        return records

    def _roundtrip_lights(self, scene: SceneDescription, maps: List[EnvironmentMap]) -> List[Dict[str, Any]]:
        positions = [spec.position for spec in scene.probes]
        per_probe = [detect_lights(env, math.radians(self.config.nms_radius_deg), self.config.nms_threshold)
                     for env in maps]
        result = match_lights(per_probe, positions, self.config.color_tolerance)
        truth = [np.asarray(light.position, dtype=np.float64) for light in scene.point_lights]
        records = []
        for k, match in enumerate(result.matches):
            error = min(float(np.linalg.norm(match.position - t)) for t in truth)
            records.append({
                'record': 'light',
                'light': k,
                'position': match.position,
                'residual': match.residual,
                'position_error': error,
            })
        if result.ambiguities:
            records.append({'record': 'light_ambiguity', 'groups': len(result.ambiguities)})
        return records

    def write_estimate(self, path: Path, estimate):
        stem = path.with_suffix('')
        write_envmap(path, estimate.final)
        for name, stage in estimate.stages().items():
            if name == 'final':
                continue
            write_envmap(f"{stem}_{name}.pfm", stage)
            write_png_preview(f"{stem}_{name}.png", stage.pixels)
        write_kernel_params(f"{stem}_kernel.pfm", estimate.params)
        write_png_preview(f"{stem}.png", estimate.final.pixels)


def check_acceptance(records: List[Dict[str, Any]], thresholds: Dict[str, float]):
    """Raise AcceptanceError listing every violated threshold"""
    failures = {}
    for record in records:
        tag = f"{record['record']}{record.get('probe', record.get('light', ''))}"
        if 'max_rmse_diffuse' in thresholds and record.get('rmse_diffuse', 0.0) > thresholds['max_rmse_diffuse']:
            failures[f"{tag}.rmse_diffuse"] = record['rmse_diffuse']
        if 'max_rmse_glossy' in thresholds and record.get('rmse_glossy', 0.0) > thresholds['max_rmse_glossy']:
            failures[f"{tag}.rmse_glossy"] = record['rmse_glossy']
        if 'min_coverage' in thresholds and record.get('coverage', 1.0) < thresholds['min_coverage']:
            failures[f"{tag}.coverage"] = record['coverage']
        if ('max_position_error' in thresholds
                and record.get('position_error', 0.0) > thresholds['max_position_error']):
            failures[f"{tag}.position_error"] = record['position_error']
    if failures:
        raise AcceptanceError(f"{len(failures)} acceptance thresholds violated", failures)


def _display_records(records: List[Dict[str, Any]], title: str):
    table = Table(title=title)
    table.add_column("Record", style="cyan")
    table.add_column("Values", style="green")
    for record in records:
        rest = {k: v for k, v in record.items() if k != 'record'}
        table.add_row(str(record.get('record', '')), format_record(rest))
    console.print(table)


def _emit(ctx: click.Context, records: List[Dict[str, Any]], out: Path, title: str):
    generator = ReportGenerator(ctx.obj['config'], str(out))
    path = generator.write_records(records)
    for record in records:
        click.echo(format_record(record))
    if ctx.obj['report'] != 'none':
        generator.generate_report(records, ctx.obj['report'], title)
    _display_records(records, title)
    logger.info("Metrics written to %s", path)


def _load_material(path: Optional[str], config: Config,
                   albedo: Optional[Tuple[float, float, float]] = None) -> Material:
    if not path:
        if albedo:
            name, material = select_skin_type(albedo, config)
            console.print(f"[cyan]Using skin type {name}[/cyan]")
            return material
        return config.default_material()
    with open(path, 'r') as f:
        data = yaml.safe_load(f) or {}
    try:
        return Material.from_dict(data)
    except (KeyError, TypeError) as e:
        raise DomainError(f"{path}: malformed material ({e})") from e


@click.group()
@click.option('--config', 'config_path', type=click.Path(), default=None, help='Configuration file path')
@click.option('--threads', type=int, default=None, help='Cap on worker threads')
@click.option('--report', type=click.Choice(['none', 'json', 'html', 'kv']), default='none',
              help='Additional report format')
@click.option('-v', '--verbose', is_flag=True, help='Debug logging')
@click.pass_context
def cli(ctx: click.Context, config_path: Optional[str], threads: Optional[int], report: str, verbose: bool):
    """LumiProbe - estimate environment maps from specular highlights

    EXAMPLES:
        # Render a scene's probes to PFM layers and PNG previews
        python lumiprobe.py render scene.json --out layers/

        # Estimate an environment map from a highlight layer
        python lumiprobe.py estimate --highlight h.pfm --normals n.pfm --out env.pfm

        # Full render -> estimate -> relight check against the scene's thresholds
        python lumiprobe.py roundtrip scene.json --out results/
    """
    config = Config.from_file(config_path or ("config.yaml" if Path("config.yaml").exists() else None))
    if threads is not None:
        if threads < 1:
            raise click.BadParameter("must be >= 1", param_hint='--threads')
        config.max_workers = threads
    setup_logging("DEBUG" if verbose else config.log_level)
    ctx.obj = {'config': config, 'app': LumiProbe(config), 'report': report}


@cli.command()
@click.argument('scene_path', type=click.Path(exists=True, dir_okay=False))
@click.option('--out', type=click.Path(file_okay=False), required=True, help='Output directory')
@click.option('--noise', type=float, default=0.0, help='Gaussian sensor noise added before clipping')
@click.pass_context
def render(ctx: click.Context, scene_path: str, out: str, noise: float):
    """Render composite, diffuse and highlight layers for every probe"""
    scene = load_scene(scene_path)
    out_dir = Path(out)
    rendered = ctx.obj['app'].render_scene(scene, out_dir, noise)
    records = [{'record': 'render', 'probe': i, 'pixels': int(layers.silhouette.sum()),
                'max_highlight': float(layers.highlight.pixels.max()),
                'saturated': int(clip_to_ldr(layers.composite, scene.clip_level).saturation_mask.any(axis=2).sum())}
               for i, (layers, _) in enumerate(rendered)]
    _emit(ctx, records, out_dir, "Render")


@cli.command()
@click.argument('images', nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False))
@click.option('--out', type=click.Path(file_okay=False), required=True, help='Output directory')
@click.option('--mask', type=click.Path(exists=True, dir_okay=False), help='Loss mask PFM')
@click.option('--model', type=click.Choice(['dichromatic', 'free']), default=None, help='Highlight model')
@click.option('--no-line-search', is_flag=True, help='Fixed step size')
@click.pass_context
def separate(ctx: click.Context, images: Sequence[str], out: str, mask: Optional[str], model: Optional[str],
             no_line_search: bool):
    """Split aligned composites of one probe into highlight and diffuse layers"""
    config: Config = ctx.obj['config']
    if len(images) < 2:
        raise click.UsageError("separation needs at least two images")
    batch = [read_image(path) for path in images]
    loss_mask = read_pfm(mask)[..., 0] > 0.5 if mask else None
    problem = SeparationProblem.from_config(batch, config, loss_mask)
    if model:
        problem.highlight_model = model
    if no_line_search:
        problem.line_search = False
    result = ctx.obj['app'].separator.separate(problem)

    out_dir = Path(out)
    for path, highlight, diffuse in zip(images, result.highlights, result.diffuse):
        stem = Path(path).stem
        write_image(out_dir / f"{stem}_highlight.pfm", highlight)
        write_image(out_dir / f"{stem}_diffuse.pfm", diffuse)
        write_png_preview(out_dir / f"{stem}_highlight.png", highlight.pixels)
    (out_dir / "separation_trace.txt").write_text("\n".join(result.trace_records()) + "\n")
    _emit(ctx, [{
        'record': 'separate',
        'initial_loss': result.initial_loss,
        'final_loss': result.final_loss,
        'iterations': result.iterations,
        'converged': result.converged,
        'excluded_pixels': int(result.excluded.sum()),
        'subgradient_steps': result.subgradient_steps,
    }], out_dir, "Separation")


@cli.command()
@click.option('--highlight', type=click.Path(exists=True, dir_okay=False), required=True, help='Highlight PFM')
@click.option('--normals', type=click.Path(exists=True, dir_okay=False), required=True, help='Normal map PFM')
@click.option('--regions', type=click.Path(exists=True, dir_okay=False), help='Region id PFM')
@click.option('--material', type=click.Path(exists=True, dir_okay=False), help='Material JSON/YAML')
@click.option('--albedo', type=float, nargs=3, default=None,
              help='Mean diffuse albedo; picks a skin type when no material is given')
@click.option('--shading-chroma', type=click.Path(exists=True, dir_okay=False), help='Shading chromaticity PFM')
@click.option('--composite', type=click.Path(exists=True, dir_okay=False),
              help='Clipped composite PFM that decides which channels are saturated')
@click.option('--view', type=float, nargs=3, default=(0.0, 0.0, 1.0), help='View direction')
@click.option('--iterations', type=int, default=None, help='Richardson-Lucy iterations')
@click.option('--out', type=click.Path(dir_okay=False), required=True, help='Output map PFM')
@click.pass_context
def estimate(ctx: click.Context, highlight: str, normals: str, regions: Optional[str], material: Optional[str],
             albedo: Optional[Tuple[float, float, float]], shading_chroma: Optional[str], composite: Optional[str],
             view: Tuple[float, float, float], iterations: Optional[int], out: str):
    """Recolour, trace and deconvolve a highlight layer into an environment map"""
    config: Config = ctx.obj['config']
    region_ids = np.rint(read_pfm(regions)[..., 0]).astype(np.int64) if regions else None
    probe = make_normal_map_probe(read_normals(normals), region_ids)
    chroma = read_pfm(shading_chroma).astype(np.float64) if shading_chroma else None
    img = read_image(highlight)
    saturation_source = read_image(composite) if composite else None
    result = ctx.obj['app'].estimator.estimate(img, probe, _load_material(material, config, albedo), view, chroma,
                                               saturation_source, iterations)
    out_path = Path(out)
    ctx.obj['app'].write_estimate(out_path, result)
    _emit(ctx, [dict(record='estimate', **estimate_summary(result))], out_path.parent, "Estimate")


@cli.command()
@click.option('--in', 'in_path', type=click.Path(exists=True, dir_okay=False), required=True, help='Blurred map PFM')
@click.option('--kernel', type=click.Path(exists=True, dir_okay=False), required=True, help='Kernel parameter PFM')
@click.option('--iterations', type=int, default=None, help='Richardson-Lucy iterations')
@click.option('--out', type=click.Path(dir_okay=False), required=True, help='Output map PFM')
@click.pass_context
def deconv(ctx: click.Context, in_path: str, kernel: str, iterations: Optional[int], out: str):
    """Richardson-Lucy deconvolution of a traced map"""
    config: Config = ctx.obj['config']
    blurred = read_envmap(in_path)
    params = read_kernel_params(kernel)
    result, done = rl_deconvolve(blurred, params,
                                 config.rl_iterations if iterations is None else iterations,
                                 config.rl_tolerance, config.kernel_cutoff_level)
    write_envmap(out, result)
    write_png_preview(Path(out).with_suffix('.png'), result.pixels)
    _emit(ctx, [{'record': 'deconv', 'iterations': done, 'coverage': result.coverage_fraction()}],
          Path(out).parent, "Deconvolution")


@cli.command()
@click.argument('maps', nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False))
@click.option('--position', 'positions', type=float, nargs=3, multiple=True,
              help='Probe position, once per map in order')
@click.option('--out', type=click.Path(dir_okay=False), required=True, help='Output JSON')
@click.pass_context
def lights(ctx: click.Context, maps: Sequence[str], positions: Sequence[Tuple[float, float, float]], out: str):
    """Detect point lights per map and triangulate them across probes"""
    config: Config = ctx.obj['config']
    per_probe = [detect_lights(read_envmap(path), math.radians(config.nms_radius_deg), config.nms_threshold)
                 for path in maps]
    data: Dict[str, Any] = {'detections': [[light.to_dict() for light in found] for found in per_probe]}
    records = [{'record': 'lights', 'map': i, 'count': len(found)} for i, found in enumerate(per_probe)]

    if len(maps) >= 2 and positions:
        if len(positions) != len(maps):
            raise click.UsageError("give one --position per map")
        result = match_lights(per_probe, positions, config.color_tolerance)
        data['matches'] = [{'members': {str(p): i for p, i in m.members.items()},
                            'position': m.position.tolist(), 'residual': m.residual,
                            'color': m.color.tolist()} for m in result.matches]
        data['ambiguities'] = result.ambiguities
        data['point_lights'] = lights_to_scene(result, positions)
        records.extend({'record': 'light', 'light': k, 'position': m.position, 'residual': m.residual}
                       for k, m in enumerate(result.matches))

    out_path = Path(out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(json.dumps(data, indent=2))
    _emit(ctx, records, out_path.parent, "Lights")


@cli.command(name='triangulate')
@click.argument('rays_path', type=click.Path(exists=True, dir_okay=False))
@click.pass_context
def triangulate_cmd(ctx: click.Context, rays_path: str):
    """Least-squares point from a JSON list of {origin, direction} rays"""
    with open(rays_path, 'r') as f:
        entries = json.load(f)
    try:
        rays = [Ray(e['origin'], np.asarray(e['direction']) / np.linalg.norm(e['direction'])) for e in entries]
    except (KeyError, TypeError) as e:
        raise DomainError(f"{rays_path}: rays need origin and direction ({e})") from e
    position, residual = triangulate(rays)
    _emit(ctx, [{'record': 'triangulate', 'position': position, 'residual': residual}],
          Path(rays_path).parent, "Triangulation")


@cli.command()
@click.option('--gt', type=click.Path(exists=True, dir_okay=False), required=True, help='Ground-truth map PFM')
@click.option('--est', type=click.Path(exists=True, dir_okay=False), required=True, help='Estimated map PFM')
@click.option('--probe-normals', type=click.Path(exists=True, dir_okay=False),
              help='Normal map used as the relighting object')
@click.option('--out', type=click.Path(file_okay=False), default='.', help='Metrics directory')
@click.pass_context
def evaluate(ctx: click.Context, gt: str, est: str, probe_normals: Optional[str], out: str):
    """Compare an estimated map with ground truth"""
    config: Config = ctx.obj['config']
    gt_env, est_env = read_envmap(gt), read_envmap(est)
    probe = make_normal_map_probe(read_normals(probe_normals)) if probe_normals else None
    covered = est_env.coverage
    relit = relight_error(gt_env, est_env, probe, config)
    peak = float(gt_env.pixels.max())
    record = {
        'record': 'evaluate',
        'rmse': rmse(est_env, gt_env, covered),
        'nrmse': nrmse(est_env, gt_env, covered),
        'ssim': ssim(est_env.masked(), gt_env.masked(), peak if peak > 0 else 1.0),
    }
    record.update(relit.to_dict())
    _emit(ctx, [record], Path(out), "Evaluation")


@cli.command()
@click.argument('scene_path', type=click.Path(exists=True, dir_okay=False))
@click.option('--out', type=click.Path(file_okay=False), required=True, help='Output directory')
@click.pass_context
def roundtrip(ctx: click.Context, scene_path: str, out: str):
    """Render, estimate and relight; fail if the scene's thresholds are violated"""
    scene = load_scene(scene_path)
    out_dir = Path(out)
    records = ctx.obj['app'].roundtrip(scene, out_dir)
    _emit(ctx, records, out_dir, "Roundtrip")
    check_acceptance(records, scene.acceptance)
    console.print("\n[bold green]Roundtrip passed all acceptance thresholds.[/bold green]")


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Run the CLI and translate failures into exit codes"""
    try:
        cli.main(args=list(argv) if argv is not None else None, prog_name="lumiprobe", standalone_mode=False)
    except click.exceptions.Abort:
        console.print("\n[yellow]Interrupted by user[/yellow]")
        return EXIT_USAGE
    except click.ClickException as e:
        e.show()
        return EXIT_USAGE
    except AcceptanceError as e:
        console.print(f"\n[red]Acceptance failed: {e}[/red]")
        for key, value in e.failures.items():
            console.print(f"  [red]{key} = {value}[/red]")
        return EXIT_ACCEPTANCE
    except (LumiProbeError, OSError) as e:
        console.print(f"\n[red]Error: {e}[/red]")
        return EXIT_DATA
    except Exception:
        logger.exception("Unexpected failure")
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
