"""Command-line entry point: ``gswxray <subcommand> [flags]``.

Exit status: 0 success, 1 domain error (one ``ERROR <code>: <message>`` line
on stderr), 2 usage error (help text on stderr). Outputs are staged in a
temporary sibling directory and renamed into place only on success.
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import os
import shutil
import sys
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Sequence

from gswxray import __version__

log = logging.getLogger("gswxray")

REQUIRED = object()
HELP_WIDTH = 100
NOT_ECHOED = {"out", "threads", "config", "overwrite", "verbose"}


class UsageError(Exception):
    pass


class CliError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


@dataclass(frozen=True)
class Param:
    key: str
    type: Callable[[str], Any]
    default: Any
    help: str
    choices: tuple | None = None
    nargs: str | None = None

    @property
    def flag(self) -> str:
        return "--" + self.key.replace("_", "-")


def _bool(text: str) -> bool:
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int_list(text: str) -> tuple[int, ...]:
    try:
        vals = tuple(int(p) for p in str(text).split(",") if p.strip())
    except ValueError:
        raise ValueError(f"expected comma-separated integers, got {text!r}") from None
    if not vals:
        raise ValueError("empty list")
    return vals


def _str_list(text: str) -> tuple[str, ...]:
    return tuple(p.strip() for p in str(text).split(",") if p.strip())


COMMON = [Param("threads", int, 1, "worker threads; never changes results")]

COMMANDS: dict[str, tuple[str, list[Param]]] = {
    "synth": (
        "generate a synthetic GSW radiograph dataset",
        [
            Param("out", str, REQUIRED, "output dataset directory"),
            Param("n", int, 100, "number of images"),
            Param("seed", int, 42, "global seed"),
            Param("width", int, 64, "image width in pixels"),
            Param("height", int, 64, "image height in pixels"),
            Param("bullets_min", int, 1, "fewest bullets in a GSW image"),
            Param("bullets_max", int, 3, "most bullets in a GSW image"),
            Param("contrast_min", float, 0.3, "lowest bullet contrast"),
            Param("contrast_max", float, 1.0, "highest bullet contrast"),
            Param("normal_fraction", float, 0.0, "share of bullet-free Normal images"),
            Param("sprites", int, 20, "bullet sprite pool size (last fifth reserved for test)"),
            Param("backgrounds", int, 20, "background pool size"),
            Param("organs", _str_list, ("chest",), "comma-separated background kinds"),
            Param("margin", int, 2, "minimum distance of a bullet from the image edge"),
        ],
    ),
    "convert": (
        "convert annotations between VOC XML, CSV and record files",
        [
            Param("from", str, REQUIRED, "input format", choices=("voc", "csv", "record")),
            Param("to", str, REQUIRED, "output format", choices=("voc", "csv", "record")),
            Param("in", str, REQUIRED, "input file (csv, record) or directory of XML files (voc)"),
            Param("out", str, REQUIRED, "output directory"),
            Param("split", str, "train", "split recorded on the converted images"),
        ],
    ),
    "anchors": (
        "tabulate SSD default boxes",
        [
            Param("out", str, REQUIRED, "output directory"),
            Param("grids", _int_list, (38, 19, 10, 5, 3, 1), "comma-separated square feature-map sizes"),
            Param("s_min", float, 0.2, "scale of the first feature map"),
            Param("s_max", float, 0.9, "scale of the last feature map"),
        ],
    ),
    "train": (
        "train the GSW/Normal classifier with freeze-pretrain-finetune",
        [
            Param("data", str, REQUIRED, "dataset directory written by synth"),
            Param("out", str, REQUIRED, "output directory"),
            Param("seed", int, 42, "global seed"),
            Param("learning_rate", float, 1e-4, "fine-tuning learning rate"),
            Param("momentum", float, 0.9, "SGD momentum"),
            Param("batch_size", int, 16, "mini-batch size"),
            Param("stage_a_epochs", int, 40, "head-only epochs over the frozen backbone"),
            Param("stage_a_lr", float, 1e-2, "head-only learning rate"),
            Param("stage_b_epochs", int, 20, "full fine-tuning epochs"),
            Param("pretext_epochs", int, 15, "backbone pretext epochs"),
            Param("pretext_images", int, 400, "backbone pretext images"),
            Param("pretext_lr", float, 2e-2, "backbone pretext learning rate"),
            Param("hidden", int, 16, "hidden units of the dense head"),
        ],
    ),
    "eval": (
        "score detections against ground truth (mAP, AR@1)",
        [
            Param("gt", str, REQUIRED, "directory of XML files (e.g. a split), CSV or record file"),
            Param("dets", str, REQUIRED, "detections file"),
            Param("out", str, None, "optional report directory"),
            Param("iou", float, 0.5, "IoU threshold for a match"),
            Param("mode", str, "101", "AP interpolation", choices=("101", "11", "area")),
            Param("name", str, "model", "run name shown in the report"),
        ],
    ),
    "cam": (
        "render a class activation map over an image",
        [
            Param("weights", str, REQUIRED, "trained weights file"),
            Param("image", str, REQUIRED, "8-bit grayscale PNG"),
            Param("out", str, REQUIRED, "output directory"),
            Param("class", str, "GSW", "class whose evidence is mapped"),
            Param("tap", str, "pre_pool", "feature tap", choices=("pre_pool", "post_pool")),
            Param("alpha", float, 0.4, "heatmap blend weight"),
        ],
    ),
    "overlay": (
        "draw detection boxes and scores over an image",
        [
            Param("image", str, REQUIRED, "8-bit grayscale PNG"),
            Param("dets", str, REQUIRED, "detections file"),
            Param("out", str, REQUIRED, "output directory"),
            Param("threshold", float, 0.5, "minimum score drawn"),
            Param("image_id", str, None, "detections image id (default: image file stem)"),
            Param("label", _bool, True, "print scores above boxes"),
        ],
    ),
    "triage": (
        "rank studies by detected bullet count",
        [
            Param("dets", str, REQUIRED, "one detections file per study", nargs="+"),
            Param("out", str, None, "optional output directory"),
            Param("threshold", float, 0.5, "minimum score counted as a bullet"),
        ],
    ),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_help(sys.stderr)
        raise UsageError(message)


def _formatter(prog):
    return argparse.HelpFormatter(prog, width=HELP_WIDTH, max_help_position=32)


def _default_text(p: Param) -> str:
    if p.default is REQUIRED:
        return "required"
    if p.default is None:
        return "none"
    if isinstance(p.default, tuple):
        return ",".join(str(v) for v in p.default)
    return str(p.default)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gswxray", description="Synthetic GSW radiograph toolkit.", formatter_class=_formatter)
    parser.add_argument("--version", action="version", version=f"gswxray {__version__}")
    subs = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    for name, (desc, params) in COMMANDS.items():
        sp = subs.add_parser(name, help=desc, description=desc, formatter_class=_formatter)
        for p in params + COMMON:
            kwargs: dict[str, Any] = {"dest": p.key, "default": None, "help": f"{p.help} (default: {_default_text(p)})"}
            if p.choices:
                kwargs["choices"] = p.choices
            if p.nargs:
                kwargs["nargs"] = p.nargs
            kwargs["metavar"] = p.key.upper()
            sp.add_argument(p.flag, **kwargs)
        sp.add_argument("--config", default=None, metavar="FILE", help="key=value file; flags win (default: none)")
        sp.add_argument("--overwrite", action="store_true", help="replace an existing output directory (default: off)")
        sp.add_argument("--verbose", action="store_true", help="log progress to stderr (default: off)")
    return parser


def read_config(path: str, params: Sequence[Param]) -> dict[str, str]:
    known = {p.key for p in params}
    out: dict[str, str] = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise CliError("io", f"cannot read config {path}: {exc.strerror}") from None
    for n, line in enumerate(lines, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path} line {n}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in known:
            raise UsageError(f"{path} line {n}: unknown key {key!r}")
        out[key] = value
    return out


def resolve(command: str, ns: argparse.Namespace) -> dict[str, Any]:
    params = COMMANDS[command][1] + COMMON
    file_values = read_config(ns.config, params) if ns.config else {}
    resolved: dict[str, Any] = {}
    for p in params:
        flag_value = getattr(ns, p.key)
        if flag_value is not None:
            value = flag_value
        elif p.key in file_values:
            value = file_values[p.key]
            if p.nargs:
                value = _str_list(value)
        else:
            if p.default is REQUIRED:
                raise UsageError(f"missing required option {p.flag}")
            resolved[p.key] = p.default
            continue
        try:
            if p.nargs:
                value = tuple(p.type(v) for v in value)
            else:
                value = p.type(value)
        except (TypeError, ValueError) as exc:
            raise UsageError(f"{p.flag}: {exc}") from None
        if p.choices and value not in p.choices:
            raise UsageError(f"{p.flag}: {value!r} not one of {', '.join(p.choices)}")
        resolved[p.key] = value
    if resolved["threads"] < 1:
        raise UsageError("--threads must be at least 1")
    return resolved


def echo_config(command: str, cfg: dict[str, Any]) -> str:
    lines = [f"# gswxray {command}"]
    for key in sorted(cfg):
        if key in NOT_ECHOED:
            continue
        v = cfg[key]
        if v is None:
            continue
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{key}={v}")
    return "\n".join(lines) + "\n"


@contextlib.contextmanager
def staged_output(out: str | None, overwrite: bool):
    """Yield a scratch directory that replaces ``out`` only if the block succeeds."""
    if out is None:
        yield None
        return
    target = Path(out)
    if target.exists() and not target.is_dir():
        raise CliError("exists", f"{target} exists and is not a directory")
    if target.is_dir() and any(target.iterdir()) and not overwrite:
        raise CliError("exists", f"{target} is not empty (pass --overwrite to replace it)")
    target.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{target.name}.", dir=target.parent))
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    if target.exists():
        shutil.rmtree(target)
    os.replace(tmp, target)


# --------------------------------------------------------------------------- loading helpers


def load_annotations(path: str, split: str = "test") -> list:
    """Read ground truth from a split dir, a directory of XML files, a CSV or a record file."""
    from gswxray.formats import from_csv, from_voc, read_examples, read_voc

    p = Path(path)
    if p.is_dir():
        files = sorted(p.glob("*.xml"))
        if not files:
            raise CliError("io", f"no XML annotations under {p}")
        return [from_voc(read_voc(f.read_bytes()), split, f.stem) for f in files]
    if not p.exists():
        raise CliError("io", f"{p} does not exist")
    if p.suffix == ".csv":
        return from_csv(p.read_bytes(), split)
    if p.suffix == ".record":
        return read_examples(p.read_bytes(), split)
    raise CliError("format", f"cannot tell the annotation format of {p}")


def load_split(root: Path, split: str) -> list:
    """Annotated images of one split with their pixels."""
    from dataclasses import replace

    from gswxray.formats import load_image

    d = root / split
    if not any(d.glob("*.xml")):
        return []
    out = []
    for ann in load_annotations(str(d), split):
        out.append(replace(ann, image=load_image(d / f"{ann.id}.png"), image_path=f"{split}/{ann.id}.png"))
    return out


def _read_dets(path: str):
    from gswxray.formats import read_detections

    try:
        return read_detections(Path(path).read_bytes())
    except OSError as exc:
        raise CliError("io", f"cannot read {path}: {exc.strerror}") from None


# --------------------------------------------------------------------------- subcommands


def cmd_synth(cfg, out: Path) -> None:
    from gswxray.synth import SynthConfig, bullet_sprites, default_backgrounds, synthesize_dataset, write_dataset

    sc = SynthConfig(
        n_images=cfg["n"],
        bullets_per_image=(cfg["bullets_min"], cfg["bullets_max"]),
        contrast=(cfg["contrast_min"], cfg["contrast_max"]),
        placement_margin=cfg["margin"],
        seed=cfg["seed"],
        normal_fraction=cfg["normal_fraction"],
    )
    if cfg["sprites"] < 1 or cfg["backgrounds"] < 1:
        raise ValueError("sprite and background pools must be non-empty")
    bgs = default_backgrounds(cfg["backgrounds"], cfg["width"], cfg["height"], cfg["seed"], cfg["organs"])
    manifest = synthesize_dataset(bgs, bullet_sprites(cfg["sprites"], cfg["seed"]), sc, threads=cfg["threads"])
    write_dataset(manifest, out, threads=cfg["threads"])
    counts = {s: len(manifest.split_images(s)) for s in ("train", "val", "test")}
    print(f"wrote {cfg['n']} images: " + ", ".join(f"{k}={v}" for k, v in counts.items()))


def cmd_convert(cfg, out: Path) -> None:
    from gswxray.formats import to_csv, to_voc, write_examples, write_voc

    images = load_annotations(cfg["in"], cfg["split"]) if cfg["from"] != "voc" else _voc_input(cfg)
    if cfg["to"] == "voc":
        for a in images:
            name = os.path.basename(a.image_path) if a.image_path else f"{a.id}.png"
            doc = to_voc(a, folder=a.split, filename=name, path=a.image_path or "")
            (out / f"{a.id}.xml").write_bytes(write_voc(doc))
    elif cfg["to"] == "csv":
        (out / "annotations.csv").write_bytes(to_csv(images))
    else:
        (out / "annotations.record").write_bytes(write_examples(images))
    print(f"converted {len(images)} images {cfg['from']} -> {cfg['to']}")


def _voc_input(cfg):
    p = Path(cfg["in"])
    if not p.is_dir():
        raise CliError("io", f"voc input must be a directory: {p}")
    return load_annotations(str(p), cfg["split"])


def cmd_anchors(cfg, out: Path) -> None:
    from gswxray.anchors import feature_map_specs, generate_anchors, linear_scales

    if not 0.0 < cfg["s_min"] <= cfg["s_max"] <= 1.0:
        raise ValueError("need 0 < s_min <= s_max <= 1")
    scales = linear_scales(len(cfg["grids"]), cfg["s_min"], cfg["s_max"])
    anchors = generate_anchors(feature_map_specs(cfg["grids"], scales))
    (out / "anchors.csv").write_bytes(anchors.to_csv())
    print(f"{len(anchors)} default boxes over {len(cfg['grids'])} feature maps")


def cmd_train(cfg, out: Path) -> None:
    from gswxray.formats import save_weights
    from gswxray.metrics import classification_metrics
    from gswxray.nn.network import classify_batch
    from gswxray.nn.train import FptPlan, OptimizerConfig, pretrain_backbone, train_fpt

    root = Path(cfg["data"])
    train = load_split(root, "train")
    if not train:
        raise CliError("io", f"no training split under {root}")
    val, test = load_split(root, "val"), load_split(root, "test")
    plan = FptPlan(
        hidden_units=cfg["hidden"],
        stage_a_epochs=cfg["stage_a_epochs"],
        stage_a_lr=cfg["stage_a_lr"],
        stage_b_epochs=cfg["stage_b_epochs"],
        stage_b_lr=cfg["learning_rate"],
        pretext_epochs=cfg["pretext_epochs"],
        pretext_images=cfg["pretext_images"],
        pretext_lr=cfg["pretext_lr"],
    )
    oc = OptimizerConfig(
        learning_rate=cfg["learning_rate"], momentum=cfg["momentum"], batch_size=cfg["batch_size"], seed=cfg["seed"]
    )
    backbone = pretrain_backbone((train[0].height, train[0].width), plan, oc)
    result = train_fpt(train, plan, oc, val=val, backbone_weights=backbone)
    (out / "backbone.w").write_bytes(backbone)
    (out / "stage_a.w").write_bytes(result.checkpoint)
    (out / "weights.w").write_bytes(save_weights(result.network))
    rows = ["epoch,stage,loss,train_acc,val_acc"]
    for e in result.history:
        val_acc = "" if e.val_acc is None else repr(e.val_acc)
        rows.append(f"{e.epoch},{e.stage},{e.loss!r},{e.train_acc!r},{val_acc}")
    (out / "train_log.csv").write_text("\n".join(rows) + "\n")
    lines = []
    for name, images in (("val", val), ("test", test)):
        if not images:
            continue
        pred = [c for c, _ in classify_batch(result.network, [a.image for a in images])]
        rep = classification_metrics(pred, [a.label for a in images], result.network.class_names)
        lines.append(f"{name}_accuracy={rep.accuracy!r}")
        lines.append(f"{name}_confusion (rows true, columns predicted):")
        lines.extend("  " + row for row in rep.table().splitlines())
    (out / "metrics.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))


def cmd_eval(cfg, out: Path | None) -> None:
    from gswxray.metrics import evaluate, render_table

    gts = load_annotations(cfg["gt"])
    dets = _read_dets(cfg["dets"])
    report = evaluate(dets, gts, cfg["name"], cfg["iou"], cfg["mode"])
    table = render_table([report], style="fraction")
    detail = [table, f"iou_threshold={cfg['iou']!r} interpolation={cfg['mode']}"]
    for c, ap in sorted(report.per_class_ap.items()):
        detail.append(f"AP[{c}]=" + ("undefined (no ground truth)" if ap is None else f"{ap:.6f}"))
    detail.append(f"TP={report.counts.tp} FP={report.counts.fp} FN={report.counts.fn}")
    text = "\n".join(detail).replace("\n\n", "\n") + "\n"
    sys.stdout.write(text)
    if out is not None:
        (out / "report.txt").write_text(text)
        (out / "report.json").write_bytes(report.to_json())


def cmd_cam(cfg, out: Path) -> None:
    from gswxray.formats import load_image, network_from_weights, save_rgb
    from gswxray.nn.network import classify
    from gswxray.viz import colormap_array, render_cam

    try:
        data = Path(cfg["weights"]).read_bytes()
    except OSError as exc:
        raise CliError("io", f"cannot read {cfg['weights']}: {exc.strerror}") from None
    net = network_from_weights(data)
    if cfg["class"] not in net.class_names:
        raise ValueError(f"class {cfg['class']!r} not in {net.class_names}")
    image = load_image(cfg["image"])
    heat, blended = render_cam(net, image, cfg["class"], cfg["tap"], cfg["alpha"])
    save_rgb(blended.pixels, out / "cam.png")
    save_rgb(colormap_array(heat.values), out / "heatmap.png")
    label, p = classify(net, image)
    r, c = heat.argmax()
    print(f"predicted={label} probability={p:.6f} heat_peak=({c},{r})")


def cmd_overlay(cfg, out: Path) -> None:
    from gswxray.formats import load_image, save_rgb
    from gswxray.viz import render_overlay

    image = load_image(cfg["image"])
    image_id = cfg["image_id"] or Path(cfg["image"]).stem
    dets = [d for d in _read_dets(cfg["dets"]) if d.image_id == image_id]
    rendered = render_overlay(image, dets, cfg["threshold"], label=cfg["label"])
    save_rgb(rendered.pixels, out / "overlay.png")
    print(f"drew {sum(d.score >= cfg['threshold'] for d in dets)} of {len(dets)} detections")


def cmd_triage(cfg, out: Path | None) -> None:
    from gswxray.metrics import render_triage, triage_rank

    studies = {}
    for path in cfg["dets"]:
        sid = Path(path).stem
        if sid in studies:
            raise ValueError(f"duplicate study id {sid!r}")
        studies[sid] = _read_dets(path)
    text = render_triage(triage_rank(studies, cfg["threshold"]))
    sys.stdout.write(text)
    if out is not None:
        (out / "triage.txt").write_text(text)


HANDLERS = {
    "synth": cmd_synth,
    "convert": cmd_convert,
    "anchors": cmd_anchors,
    "train": cmd_train,
    "eval": cmd_eval,
    "cam": cmd_cam,
    "overlay": cmd_overlay,
    "triage": cmd_triage,
}


def _error_code(exc: BaseException) -> str:
    from gswxray.formats import CorruptRecordError, FormatError
    from gswxray.metrics import UndefinedMetricError

    if isinstance(exc, CliError):
        return exc.code
    if isinstance(exc, CorruptRecordError):
        return "corrupt"
    if isinstance(exc, FormatError):
        return "format"
    if isinstance(exc, UndefinedMetricError):
        return "undefined"
    if isinstance(exc, OSError):
        return "io"
    return "value"


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
        if ns.command is None:
            parser.print_help(sys.stderr)
            raise UsageError("missing subcommand")
        cfg = resolve(ns.command, ns)
    except UsageError as exc:
        print(f"ERROR usage: {exc}", file=sys.stderr)
        return 2
    if ns.verbose:
        logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s", stream=sys.stderr)
    try:
        with staged_output(cfg.get("out"), ns.overwrite) as out:
            if out is not None:
                (out / "config.txt").write_text(echo_config(ns.command, cfg))
            HANDLERS[ns.command](cfg, out)
    except (CliError, ValueError, OSError, RuntimeError, ArithmeticError) as exc:
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(f"ERROR {_error_code(exc)}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
