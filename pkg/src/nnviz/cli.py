"""Batch command line: train, explain, impress, mil, inspect, serve.

Exit codes: 0 ok, 1 runtime failure, 2 usage error, 3 method not
applicable to the model (currently: cam on a fully connected head).
Every subcommand is bit-reproducible for fixed flags and --seed; pass
--json for machine-parseable stdout.
"""

import dataclasses
import json
import os
import sys
from pathlib import Path

import click
import numpy as np

from . import datasets as D
from . import model as M
from . import render
from . import saliency as S
from .impressions import ImpressionConfig, impress
from . import mil as L

EXIT_RUNTIME = 1
EXIT_USAGE = 2
EXIT_INAPPLICABLE = 3


def _fail(message: str, code: int = EXIT_RUNTIME):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _emit(payload: dict, as_json: bool):
    if as_json:
        click.echo(json.dumps(payload, indent=2, sort_keys=True))
    else:
        for k, v in payload.items():
            click.echo(f"{k}: {v}")


def _load_model(path) -> M.Model:
    try:
        return M.load(path)
    except M.CheckpointError as e:
        _fail(str(e))


def _load_data(data: str, n: int, seed: int, max_shapes: int) -> D.LabeledSet:
    if data == "shapes":
        return D.as_labeled_set(D.gen_shapes(n, seed=seed,
                                             max_shapes_per_image=max_shapes))
    if data.startswith("idx:"):
        parts = data[4:].split(",")
        if len(parts) != 2:
            _fail("idx data spec must be idx:<images_file>,<labels_file>",
                  EXIT_USAGE)
        try:
            images = D.parse_idx(Path(parts[0]).read_bytes())
            labels = D.parse_idx(Path(parts[1]).read_bytes())
        except (OSError, D.IdxError) as e:
            _fail(f"cannot read IDX data: {e}")
        n_cls = int(labels.max()) + 1
        onehot = np.zeros((len(labels), n_cls), dtype=np.float32)
        onehot[np.arange(len(labels)), labels] = 1.0
        return D.LabeledSet(images=images.astype(np.float32), labels=onehot,
                            class_names=tuple(str(i) for i in range(n_cls)))
    _fail(f"unknown --data {data!r} (want shapes or idx:<img>,<lbl>)",
          EXIT_USAGE)


@click.group()
def main():
    """Train small CNNs and render what they look at."""


@main.command()
@click.option("--arch", type=click.Choice(["camnet", "fcnet"]), default="camnet")
@click.option("--data", default="shapes", show_default=True)
@click.option("--n", default=2000, show_default=True,
              help="images to generate when --data shapes")
@click.option("--max-shapes", default=2, show_default=True)
@click.option("--epochs", default=8, show_default=True)
@click.option("--lr", default=0.5, show_default=True)
@click.option("--batch", default=32, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--json", "as_json", is_flag=True)
def train(arch, data, n, max_shapes, epochs, lr, batch, seed, out, as_json):
    """Train a model and write a checkpoint plus a training-report CSV."""
    ds = _load_data(data, n, seed, max_shapes)
    spec_fn = M.camnet_spec if arch == "camnet" else M.fcnet_spec
    spec = spec_fn(ds.class_names, in_shape=ds.images.shape[1:],
                   name=f"{arch}-{data.split(':')[0]}")
    spec = dataclasses.replace(spec, input_mean=float(ds.images.mean()))
    model = M.build(spec, seed=seed)
    try:
        report = M.train(model, ds, epochs=epochs, lr=lr, batch=batch, seed=seed)
    except ValueError as e:
        _fail(str(e))
    M.save(model, out)
    csv_path = str(out) + ".train.csv"
    Path(csv_path).write_text(report.to_csv())
    payload = {
        "checkpoint": str(out),
        "report_csv": csv_path,
        "crc32": f"{M.checkpoint_crc(out):08x}",
        "final_loss": report.final_loss() if report.epochs else None,
    }
    _emit(payload, as_json)


@main.command()
@click.option("--model", "model_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--image", "image_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--method", type=click.Choice(S.METHODS), default="gradcam")
@click.option("--class", "class_name", default=None,
              help="target class name or index; defaults to top-1")
@click.option("--alpha", default=0.5, show_default=True)
@click.option("--occ-patch", default=8, show_default=True)
@click.option("--occ-stride", default=4, show_default=True)
@click.option("--layer", default=None, help="layer for activation_grid")
@click.option("--format", "fmt", type=click.Choice(["png", "ppm"]),
              default="png", show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--json", "as_json", is_flag=True)
def explain(model_path, image_path, method, class_name, alpha, occ_patch,
            occ_stride, layer, fmt, out_dir, as_json):
    """Write an overlay image, the raw heatmap grid CSV, and a JSON sidecar."""
    model = _load_model(model_path)
    try:
        raw = Path(image_path).read_bytes()
        from .service import decode_to_input
        img = decode_to_input(raw, model.spec)
    except Exception as e:
        _fail(f"cannot decode image: {getattr(e, 'message', e)}")
    fr = M.forward(model, img)
    names = model.spec.class_names
    if class_name is None:
        cid = int(np.argmax(fr.scores.confidences))
    elif class_name in names:
        cid = names.index(class_name)
    elif class_name.isdigit() and int(class_name) < len(names):
        cid = int(class_name)
    else:
        _fail(f"unknown class {class_name!r}; valid: {list(names)}", EXIT_USAGE)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if method == "activation_grid":
        tg = S.activation_grid(model, img, layer or model.spec.capture_layer)
        grid = tg.grid
        overlay_img = render.gray_to_rgb(grid)
        degenerate = False
        resolution = "grid"
    else:
        try:
            res = S.explain(model, img, method, cid,
                            occlusion_cfg=S.OcclusionConfig(occ_patch, occ_stride))
        except S.CamInapplicableError as e:
            click.echo(f"cam_inapplicable: {e}", err=True)
            sys.exit(EXIT_INAPPLICABLE)
        grid = res.heatmap.grid
        heat = render.colorize(res.heatmap)
        overlay_img = render.overlay(render.gray_to_rgb(img), heat, alpha)
        degenerate = res.heatmap.degenerate
        resolution = res.heatmap.resolution

    overlay_path = out / f"overlay.{fmt}"
    render.save_image(overlay_img, overlay_path)
    grid_csv = out / "raw_grid.csv"
    grid_csv.write_text(
        "\n".join(",".join(f"{v:.8g}" for v in row) for row in grid) + "\n")
    ay, ax = np.unravel_index(int(np.argmax(grid)), grid.shape)
    sidecar = {
        "method": method,
        "class": names[cid],
        "class_index": cid,
        "top5": [{"class": c, "confidence": p}
                 for c, p in M.top_k(fr.scores, min(5, len(names)))],
        "degenerate": degenerate,
        "resolution": resolution,
        "argmax_xy": [int(ax), int(ay)],
        "alpha": alpha,
        "overlay": overlay_path.name,
    }
    (out / "sidecar.json").write_text(json.dumps(sidecar, indent=2))
    _emit({"out_dir": str(out), "class": names[cid], "method": method,
           "argmax_xy": sidecar["argmax_xy"]}, as_json)


@main.command("impress")
@click.option("--model", "model_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--class", "class_name", required=True)
@click.option("--iters", default=300, show_default=True)
@click.option("--step", default=0.01, show_default=True)
@click.option("--tv", default=1e-3, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--format", "fmt", type=click.Choice(["png", "ppm"]),
              default="png", show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--json", "as_json", is_flag=True)
def impress_cmd(model_path, class_name, iters, step, tv, seed, fmt, out_dir,
                as_json):
    """Synthesize a class impression; writes the image and the trace CSV."""
    model = _load_model(model_path)
    names = model.spec.class_names
    if class_name in names:
        cid = names.index(class_name)
    elif class_name.isdigit() and int(class_name) < len(names):
        cid = int(class_name)
    else:
        _fail(f"unknown class {class_name!r}; valid: {list(names)}", EXIT_USAGE)
    cfg = ImpressionConfig(iterations=iters, step=step, tv_weight=tv, seed=seed)
    trace = impress(model, cid, cfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    img_path = out / f"impression_{names[cid]}.{fmt}"
    render.save_image(render.gray_to_rgb(trace.final_image), img_path)
    (out / "trace.csv").write_text(trace.to_csv())
    fr = M.forward(model, trace.final_image)
    _emit({"image": str(img_path), "trace_csv": str(out / "trace.csv"),
           "final_confidence": float(fr.scores.confidences[cid])}, as_json)


@main.command()
@click.option("--bags", default=500, show_default=True)
@click.option("--bag-size", default=9, show_default=True)
@click.option("--patch", default=16, show_default=True)
@click.option("--positive-class", default="cross", show_default=True)
@click.option("--positive-rate", default=0.5, show_default=True)
@click.option("--epochs", default=15, show_default=True)
@click.option("--lr", default=0.05, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--json", "as_json", is_flag=True)
def mil(bags, bag_size, patch, positive_class, positive_rate, epochs, lr,
        seed, out_dir, as_json):
    """Train attention-MIL on synthetic bags; writes model, metrics and
    highlighted example mosaics."""
    pool = D.as_labeled_set(D.gen_shapes(
        max(2 * bags, 400), seed=seed, max_shapes_per_image=1, side=patch))
    train_bags = D.make_bags(pool, positive_class, bag_size, positive_rate,
                             seed=seed, n_bags=bags)
    test_bags = D.make_bags(pool, positive_class, bag_size, positive_rate,
                            seed=seed + 1, n_bags=max(50, bags // 5))
    amodel = L.build_amil(L.AmilSpec(patch=patch), seed=seed)
    report = L.train_mil(amodel, train_bags, epochs=epochs, lr=lr, seed=seed)
    metrics = L.evaluate_mil(amodel, test_bags)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    L.save_amil(amodel, out / "amil.ckpt")
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2))
    (out / "train.csv").write_text(report.to_csv())
    side = int(np.sqrt(bag_size))
    shown = 0
    for bag in test_bags:
        if not bag.label or side * side != bag_size:
            continue
        fwd = L.amil_forward(amodel, bag)
        fwd.attention.grid = (side, side)
        mosaic = L.reassemble(bag.patches, (side, side))
        lit = L.highlight(mosaic, fwd.attention)
        render.save_image(render.gray_to_rgb(lit),
                          out / f"highlight_{shown}.png")
        render.save_image(render.gray_to_rgb(mosaic),
                          out / f"mosaic_{shown}.png")
        shown += 1
        if shown >= 3:
            break
    _emit({"out_dir": str(out), **metrics}, as_json)


@main.command()
@click.option("--model", "model_path", required=True, type=click.Path())
@click.option("--json", "as_json", is_flag=True)
def inspect(model_path, as_json):
    """Print the model card and checkpoint CRC32."""
    try:
        payload, _, crc = M.read_container(model_path)
    except (OSError, M.CheckpointError) as e:
        _fail(str(e))
    card = {"kind": payload.get("kind"), "crc32": f"{crc:08x}"}
    if payload.get("kind") == "model":
        spec = M.ModelSpec.from_json(payload["spec"])
        card.update(name=spec.name, arch=spec.arch,
                    input_shape=list(spec.in_shape),
                    class_names=list(spec.class_names),
                    capture_layer=spec.capture_layer,
                    head=spec.head())
    else:
        card["spec"] = payload.get("spec")
    _emit(card, as_json)


@main.command()
@click.option("--model", "model_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--port", default=lambda: int(os.environ.get("NNVIZ_PORT", 8321)),
              show_default="8321 or $NNVIZ_PORT")
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--static", "static_dir", default=None,
              type=click.Path(file_okay=False, exists=True))
@click.option("--job-ttl", default=600.0, show_default=True)
def serve(model_path, port, host, static_dir, job_ttl):
    """Serve the explanation API (and the UI bundle, if --static is given)."""
    import uvicorn
    from .service import create_app
    app = create_app(model_path, static_dir=static_dir, job_ttl=job_ttl)
    uvicorn.run(app, host=host, port=int(port), log_level="info")


@main.command()
@click.option("--n", default=200, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--max-shapes", default=2, show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
def dataset(n, seed, max_shapes, out_dir):
    """Export a shapes dataset as pixmaps plus a JSON index."""
    imgs = D.gen_shapes(n, seed=seed, max_shapes_per_image=max_shapes)
    D.export_shapes(imgs, out_dir)
    click.echo(f"wrote {n} images to {out_dir}")


if __name__ == "__main__":
    main()
