"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 data/processing error.
"""

import json
import os
import sys
from pathlib import Path

import click
import numpy as np

from .errors import PimgError


def _apply_threads(threads, deterministic):
    if deterministic:
        threads = 1
    if threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS", "NUMBA_NUM_THREADS"):
            os.environ[var] = str(threads)


@click.group()
def cli():
    """Layered parametric image representation toolkit."""


@cli.command("fit")
@click.option("--image", "image_path", required=True, type=click.Path(exists=True))
@click.option("--masks", "masks_dir", required=True, type=click.Path(exists=True))
@click.option("--depth", "depth_path", type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--epochs", type=int, default=None)
@click.option("--seed", type=int, default=0)
@click.option("--deterministic", is_flag=True)
@click.option("--threads", type=int, default=None)
@click.option("--loss-csv", type=click.Path(), default=None)
def fit_cmd(image_path, masks_dir, depth_path, out_path, epochs, seed,
            deterministic, threads, loss_csv):
    """Fit a document to an image + instance masks."""
    _apply_threads(threads, deterministic)
    from . import document, ingest, optimize

    image = ingest.load_image(image_path)
    masks = ingest.load_mask_dir(masks_dir)
    if not masks:
        raise click.UsageError(f"no layer_*.png masks in {masks_dir}")
    depth = ingest.load_depth(depth_path) if depth_path else None
    cfg = document.FitConfig(seed=seed)
    if epochs is not None:
        cfg.epochs = epochs
    doc, history = optimize.fit(image, masks, depth, cfg)
    with open(out_path, "wb") as f:
        f.write(document.serialize(doc))
    if loss_csv:
        optimize.history_to_csv(history, loss_csv)
    click.echo(f"wrote {out_path} ({len(doc.layers)} layers, "
               f"{doc.n_implicit_params()} parameters)")


def _load_doc(path):
    from . import document
    with open(path, "rb") as f:
        return document.deserialize(f.read())


@cli.command("render")
@click.option("--doc", "doc_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--width", type=int, default=None)
@click.option("--height", type=int, default=None)
@click.option("--layer", "layer_id", type=int, default=None)
def render_cmd(doc_path, out_path, width, height, layer_id):
    """Render a document (or one layer) to PNG."""
    from . import ingest, render
    doc = _load_doc(doc_path)
    if layer_id is None:
        img = render.render_image(doc, width, height)
    else:
        img, _ = render.render_layer(doc, layer_id, width, height)
    ingest.save_image(img, out_path)
    click.echo(f"wrote {out_path}")


@cli.command("edit")
@click.option("--doc", "doc_path", required=True, type=click.Path(exists=True))
@click.option("--ops", "ops_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--render", "render_path", type=click.Path(), default=None)
def edit_cmd(doc_path, ops_path, out_path, render_path):
    """Apply a JSON list of edit operations."""
    from . import document, edit, ingest, render
    doc = _load_doc(doc_path)
    for op in edit.load_ops(ops_path):
        doc = edit.apply_op(doc, op)
    with open(out_path, "wb") as f:
        f.write(document.serialize(doc))
    if render_path:
        ingest.save_image(render.render_image(doc), render_path)
    click.echo(f"wrote {out_path}")


@cli.command("animate")
@click.option("--doc", "doc_path", required=True, type=click.Path(exists=True))
@click.option("--layer", "layer_id", required=True, type=int)
@click.option("--frames", type=int, default=60)
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--pin", "pin_spec", default=None,
              help='Pinned points as "x,y;x,y;..." in pixels.')
@click.option("--scenario", type=click.Choice(["cloth", "softbody"]),
              default="softbody")
def animate_cmd(doc_path, layer_id, frames, out_dir, pin_spec, scenario):
    """Simulate a layer and write numbered PNG frames + a trajectory log."""
    from . import animate, ingest
    doc = _load_doc(doc_path)
    state, emb = animate.build_sim(doc, layer_id,
                                   area_constraints=(scenario == "softbody"))
    if pin_spec:
        for part in pin_spec.split(";"):
            x, y = (float(v) for v in part.split(","))
            state.pins[animate.nearest_particle(state, (x, y))] = \
                np.array([x, y])
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log = []
    for k in range(frames):
        animate.step(state)
        img, _ = animate.frame(doc, layer_id, state, emb)
        ingest.save_image(img, out / f"frame_{k:04d}.png")
        log.append(state.pos.tolist())
    with open(out / "trajectory.json", "w") as f:
        json.dump({"layer": layer_id, "frames": log}, f)
    click.echo(f"wrote {frames} frames to {out_dir}")


@cli.command("compress")
@click.option("--doc", "doc_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--coord-bits", type=click.Choice(["4", "8", "16"]), default="8")
@click.option("--feature-bits", type=click.Choice(["4", "8", "16"]), default="8")
@click.option("--weight-bits", type=click.Choice(["4", "8", "16"]), default="8")
def compress_cmd(doc_path, out_path, coord_bits, feature_bits, weight_bits):
    """Quantize a document into a .pimgc stream."""
    from . import codec
    doc = _load_doc(doc_path)
    spec = codec.QuantSpec(int(coord_bits), int(feature_bits),
                           int(weight_bits))
    stream = codec.quantize(doc, spec)
    stream.save(out_path)
    rate = codec.bpp(stream, doc.width, doc.height)
    click.echo(f"wrote {out_path} ({len(stream.data)} bytes, {rate:.4f} bpp)")


@cli.command("decompress")
@click.option("--stream", "stream_path", required=True,
              type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
def decompress_cmd(stream_path, out_path):
    """Rebuild a .pimg document from a .pimgc stream."""
    from . import codec, document
    doc = codec.dequantize(codec.Bitstream.load(stream_path))
    with open(out_path, "wb") as f:
        f.write(document.serialize(doc))
    click.echo(f"wrote {out_path}")


@cli.command("inspect")
@click.option("--doc", "doc_path", required=True, type=click.Path(exists=True))
def inspect_cmd(doc_path):
    """Print the layer table and parameter counts."""
    doc = _load_doc(doc_path)
    click.echo(f"{doc.width}x{doc.height}, {len(doc.layers)} layers")
    click.echo(f"{'id':>4} {'role':<10} {'segs':>5} {'verts/level':<18} "
               f"{'grid':<10} {'params':>8}")
    for lay in doc.layers:
        per_level = "/".join(str(len(t)) for t in
                             lay.mesh.triangles_by_level)
        grid = f"{lay.grid.wg}x{lay.grid.hg}x{lay.grid.dim}"
        click.echo(f"{lay.id:>4} {lay.role:<10} {lay.boundary.m:>5} "
                   f"{per_level:<18} {grid:<10} {lay.n_params():>8}")
    click.echo(f"decoder parameters: {doc.decoder.n_params()}")
    click.echo(f"total implicit parameters: {doc.n_implicit_params()}")


def main():
    try:
        cli.main(standalone_mode=False)
        return 0
    except click.UsageError as e:
        click.echo(f"usage error: {e.format_message()}", err=True)
        return 1
    except click.exceptions.Exit as e:
        return e.exit_code
    except click.Abort:
        return 1
    except PimgError as e:
        click.echo(f"error: {e}", err=True)
        return 2
    except OSError as e:
        click.echo(f"error: {e}", err=True)
        return 2


if __name__ == "__main__":
    sys.exit(main())
