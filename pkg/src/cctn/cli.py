"""Command-line interface: train, detect, eval, synth, rf, rerun."""
import argparse
import datetime
import json
import os
import sys

import numpy as np

from . import __version__
from . import network as N
from . import rfcalc
from .cascade import PipelineConfig, detect, load_models, report_timing
from .evaluation import MatchConfig, evaluate, format_report, summarize
from .geometry import format_detections, parse_detections
from .pnm import read_image, write_heatmap
from .supervision import SceneSpec, generate_synthetic_scene, parse_annotation
from .training import list_images, load_dataset, save_scene, train_stage


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


def threads_from_env():
    raw = os.environ.get("CCTN_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise CliError(f"CCTN_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise CliError("CCTN_THREADS must be >= 0")
    return n


# ---------------------------------------------------------------- manifest

def write_manifest(path, command, argv, seed, outputs, config_text=""):
    """Record how a run was made; written before any output file."""
    manifest = {
        "command": command,
        "argv": list(argv),
        "seed": seed,
        "config": config_text,
        "outputs": outputs,
        "version": __version__,
        "created": datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds"),
        "cwd": os.getcwd(),
    }
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return manifest


def _manifest_path(args, default):
    return args.manifest or default


# ---------------------------------------------------------------- commands

def cmd_train(args, argv):
    cfg = N.load_config(args.config) if args.config else N.GraphConfig()
    seed = cfg.seed if args.seed is None else args.seed
    iters = cfg.iterations if args.iters is None else args.iters
    if iters < 0:
        raise CliError("--iters must be non-negative")
    scenes = load_dataset(args.data)
    init = N.load_weights(args.init) if args.init else None
    curve_path = args.out + ".loss.txt"
    write_manifest(_manifest_path(args, args.out + ".manifest.json"), "train", argv, seed,
                   {"weights": args.out, "loss_curve": curve_path}, N.dump_config(cfg))

    def progress(it, loss, elapsed):
        if not args.quiet:
            print(f"iter {it} loss {loss:.6f} ({elapsed:.1f}s)", file=sys.stderr, flush=True)

    weights, curve = train_stage(cfg, args.stage, scenes, init, iters, seed, progress)
    N.save_weights(weights, args.out)
    with open(curve_path, "w", encoding="utf-8") as f:
        f.writelines(f"{i} {loss:.10g}\n" for i, loss in enumerate(curve, 1))
    return 0


def _pipeline_config(args):
    base = {}
    if args.config:
        cfg = N.load_config(args.config)
        base = {"relu_1x1": cfg.relu_1x1}
        for key, kind in (("working_size", int), ("fine_size", int), ("fine_pad", int),
                          ("coarse_threshold", float), ("fine_threshold", float),
                          ("min_component", int)):
            if key in cfg.extra:
                base[key] = kind(cfg.extra[key])
    return PipelineConfig(coarse_weights=args.coarse, fine_weights=args.fine or "",
                          coarse_only=args.coarse_only, keep_heatmaps=bool(args.emit_heatmaps),
                          **base)


def _detect_one(image_id, path, out_file, config, models, heat_dir, timing):
    result = detect(read_image(path), config, models)
    with open(out_file, "w", encoding="utf-8") as f:
        f.write(format_detections(result.detections))
    if heat_dir:
        for name in sorted(result.heatmaps):
            write_heatmap(os.path.join(heat_dir, f"{image_id}_{name}.pgm"), result.heatmaps[name])
    if timing:
        sys.stderr.write(f"# {image_id}\n" + report_timing(result))


def cmd_detect(args, argv):
    if bool(args.image) == bool(args.image_dir):
        raise CliError("give exactly one of --image or --image-dir")
    if not args.coarse_only and not args.fine:
        raise CliError("--fine is required unless --coarse-only is given")
    config = _pipeline_config(args)
    if args.image:
        if not os.path.exists(args.image):
            raise CliError(f"no such image: {args.image}")
        image_id = os.path.splitext(os.path.basename(args.image))[0]
        jobs = [(image_id, args.image, args.out)]
        manifest = _manifest_path(args, args.out + ".manifest.json")
    else:
        if not os.path.isdir(args.image_dir):
            raise CliError(f"no such directory: {args.image_dir}")
        jobs = [(i, p, os.path.join(args.out, i + ".txt")) for i, p in list_images(args.image_dir)]
        if not jobs:
            raise CliError(f"{args.image_dir}: no P5/P6 images found")
        manifest = _manifest_path(args, os.path.join(args.out, "manifest.json"))
    models = load_models(config)
    write_manifest(manifest, "detect", argv, None,
                   {"detections": [j[2] for j in jobs], "heatmaps": args.emit_heatmaps or ""})
    if args.image_dir:
        os.makedirs(args.out, exist_ok=True)
    if args.emit_heatmaps:
        os.makedirs(args.emit_heatmaps, exist_ok=True)
    threads = threads_from_env()
    run = lambda j: _detect_one(*j, config, models, args.emit_heatmaps, args.timing)  # noqa: E731
    if threads > 1 and len(jobs) > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(threads) as pool:
            list(pool.map(run, jobs))
    else:
        for j in jobs:
            run(j)
    return 0


def _read_text(path):
    with open(path, encoding="utf-8") as f:
        return f.read()


def cmd_eval(args, argv):
    protocol = {"icdar": "icdar-deteval", "msra": "msra-oriented"}[args.protocol]
    config = MatchConfig(protocol=protocol)
    for d in (args.det, args.gt):
        if not os.path.isdir(d):
            raise CliError(f"no such directory: {d}")
    gt_ids = sorted(os.path.splitext(n)[0] for n in os.listdir(args.gt) if n.endswith(".txt"))
    det_ids = {os.path.splitext(n)[0] for n in os.listdir(args.det) if n.endswith(".txt")}
    extra = sorted(det_ids - set(gt_ids))
    if extra:
        raise CliError(f"detection file {extra[0]}.txt has no ground truth in {args.gt}")
    if not gt_ids:
        raise CliError(f"{args.gt}: no annotation files")
    write_manifest(_manifest_path(args, args.out + ".manifest.json"), "eval", argv, None,
                   {"report": args.out})
    reports = []
    for image_id in gt_ids:
        gts = parse_annotation(_read_text(os.path.join(args.gt, image_id + ".txt")), image_id).boxes
        det_path = os.path.join(args.det, image_id + ".txt")
        dets = parse_detections(_read_text(det_path)) if image_id in det_ids else []
        rep = evaluate(dets, gts, config)
        rep.image_id = image_id
        reports.append(rep)
    text = format_report(reports, summarize(reports))
    with open(args.out, "w", encoding="utf-8") as f:
        f.write(text)
    if not args.quiet:
        sys.stdout.write(text.splitlines()[-1] + "\n")
    return 0


def cmd_synth(args, argv):
    if args.n < 0:
        raise CliError("--n must be non-negative")
    if not 0 <= args.difficulty <= 1:
        raise CliError("--difficulty must lie in [0, 1]")
    spec = SceneSpec(size=(args.size, args.size))
    write_manifest(_manifest_path(args, os.path.join(args.out, "manifest.json")), "synth", argv,
                   args.seed, {"images": os.path.join(args.out, "images"), "gt": os.path.join(args.out, "gt")})
    for i in range(args.n):
        rng = np.random.default_rng([args.seed, i])
        image, ann = generate_synthetic_scene(rng, args.difficulty, spec)
        save_scene(args.out, f"synth_{i:05d}", image, ann)
    return 0


def cmd_rf(args, argv):
    cfg = N.load_config(args.config) if args.config else N.GraphConfig()
    graph = cfg.build()
    size = (cfg.input_size, cfg.input_size)
    sys.stdout.write(rfcalc.format_table(graph, size))
    sys.stdout.write(rfcalc.pool5_report(graph, size))
    if args.layer:
        s = rfcalc.analytic_rf(graph, args.layer, size)
        sys.stdout.write(f"analytic {args.layer} {rfcalc._num(s.rf_h)}x{rfcalc._num(s.rf_w)} "
                         f"jump {rfcalc._num(s.jump)}\n")
        if args.empirical:
            # the footprint depends only on wiring, so measure on a narrow copy
            narrow = N.build_cctn_graph(graph.mode, 1 / 64, graph.relu_1x1)
            fp = rfcalc.empirical_rf(narrow, None, args.layer)
            sys.stdout.write(f"empirical {args.layer} {fp.rf_h}x{fp.rf_w}\n")
    elif args.empirical:
        raise CliError("--empirical needs --layer")
    return 0


def cmd_rerun(args, argv):
    try:
        with open(args.manifest_file, encoding="utf-8") as f:
            manifest = json.load(f)
        old = manifest["argv"]
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise CliError(f"cannot read manifest {args.manifest_file}: {exc}") from None
    if not old or old[0] == "rerun":
        raise CliError("manifest does not record a rerunnable command")
    cwd = os.getcwd()
    try:
        os.chdir(manifest.get("cwd", cwd))
        return run(old)
    finally:
        os.chdir(cwd)


def build_parser():
    p = _Parser(prog="cctn", description="Cascaded convolutional text network tools.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp):
        sp.add_argument("--manifest", help="manifest path (default: next to the outputs)")
        sp.add_argument("--quiet", action="store_true")
        return sp

    t = common(sub.add_parser("train", help="train a coarse or fine network"))
    t.add_argument("--stage", choices=("coarse", "fine"), required=True)
    t.add_argument("--data", required=True, help="dataset dir with images/ and gt/")
    t.add_argument("--config", help="key = value config file")
    t.add_argument("--out", required=True, help="output weight file")
    t.add_argument("--init", help="initial weights (coarse weights to start fine training)")
    t.add_argument("--iters", type=int)
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    d = common(sub.add_parser("detect", help="detect text lines"))
    d.add_argument("--coarse", required=True)
    d.add_argument("--fine")
    d.add_argument("--image")
    d.add_argument("--image-dir")
    d.add_argument("--out", required=True, help="detection file (--image) or directory (--image-dir)")
    d.add_argument("--emit-heatmaps", metavar="DIR")
    d.add_argument("--coarse-only", action="store_true")
    d.add_argument("--config", help="config file (relu_1x1 and pipeline keys)")
    d.add_argument("--timing", action="store_true", help="print per-stage timing to stderr")
    d.set_defaults(func=cmd_detect)

    e = common(sub.add_parser("eval", help="score detections against ground truth"))
    e.add_argument("--protocol", choices=("icdar", "msra"), required=True)
    e.add_argument("--det", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    s = common(sub.add_parser("synth", help="generate a synthetic dataset"))
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--difficulty", type=float, default=0.5)
    s.add_argument("--size", type=int, default=256)
    s.set_defaults(func=cmd_synth)

    r = common(sub.add_parser("rf", help="receptive-field table"))
    r.add_argument("--config")
    r.add_argument("--layer")
    r.add_argument("--empirical", action="store_true")
    r.set_defaults(func=cmd_rf)

    rr = sub.add_parser("rerun", help="repeat the run recorded in a manifest")
    rr.add_argument("manifest_file")
    rr.set_defaults(func=cmd_rerun)
    return p


def run(argv):
    args = build_parser().parse_args(argv)
    if not args.command:
        raise CliError("missing command (train, detect, eval, synth, rf, rerun)")
    return args.func(args, argv)


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        return run(argv)
    except (CliError, ValueError, KeyError, OSError, ArithmeticError) as exc:
        msg = " ".join(str(exc).split()) or type(exc).__name__
        if isinstance(exc, KeyError):
            msg = " ".join(str(exc.args[0]).split()) if exc.args else "missing key"
        print(f"ERROR: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
