"""``mmnet`` command-line interface.

Exit codes: 0 success, 1 validation/usage error, 2 runtime error.
Settings resolve as flag > ``--config`` file (``key = value`` lines) >
built-in default; the seed additionally falls back to ``$MMNET_SEED``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from . import augment as A
from . import bench as B
from . import fishdb as F
from . import layers as L
from . import metrics as MT
from . import model as M
from . import telemetry as TM
from . import training as T
from .errors import MMNetError, ValidationError
from .synthetic import Dataset, texture_dataset
from .weights import load_weights, save_weights

CONFIG_SCHEMA = "mmnet.run_config/1"
CARD_SCHEMA = "mmnet.model_card/1"
PARAMS_SCHEMA = "mmnet.params/1"
SPLIT_SCHEMA = "mmnet.split/1"

log = logging.getLogger("mmnet")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def read_config_file(path) -> dict[str, str]:
    """Flat ``key = value`` text; ``#`` starts a comment; dashes and underscores are interchangeable."""
    p = Path(path)
    if not p.is_file():
        raise ValidationError(f"config file {p} does not exist")
    out = {}
    for n, line in enumerate(p.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValidationError(f"{p}:{n}: expected key = value")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def _seed(args) -> int:
    if getattr(args, "seed", None) is not None:
        return int(args.seed)
    env = os.environ.get("MMNET_SEED")
    if env:
        try:
            return int(env)
        except ValueError:
            raise ValidationError(f"MMNET_SEED must be an integer, got {env!r}") from None
    return 0


def _echo(args, extra: Optional[dict] = None) -> dict:
    resolved = {k: v for k, v in vars(args).items() if k not in ("func", "config") and not k.startswith("_")}
    if "seed" in resolved:
        resolved["seed"] = _seed(args)
    if extra:
        resolved.update(extra)
    rec = {"schema": CONFIG_SCHEMA, **{k: (str(v) if isinstance(v, Path) else v) for k, v in resolved.items()}}
    print(json.dumps(rec, sort_keys=True, default=str), file=sys.stderr)
    return rec


def _need_file(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"{what} {p} does not exist")
    return p


def _float_list(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _int_list(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


# -- data --------------------------------------------------------------------


def _load_dataset(args) -> tuple[Dataset, Optional[Dataset]]:
    """Training and held-out data from ``--data-root`` or the synthetic generator."""
    seed = _seed(args)
    if args.data_root:
        root = _need_file(args.data_root, "data root")
        manifest = F.DatasetManifest.from_image_tree(root)
        if not len(manifest):
            raise ValidationError(f"no images found under {root}")
        if args.granularity == "genus":
            manifest = manifest.remap_to_genus(F.FishDB.from_csv(_need_file(args.db, "fish database")))
        manifest = F.dataset_split(manifest, args.ratio, seed)
        names = sorted(set(manifest.labels))
        index = {n: i for i, n in enumerate(names)}

        def build(which):
            sub = manifest.subset(which)
            imgs = np.stack([A.rescale(A.load_image(p, args.input_size)) for p in sub.paths]) if len(sub) else np.zeros((0, args.input_size, args.input_size, 3), np.float32)
            return Dataset(imgs, [index[l] for l in sub.labels], names)

        return build("train"), build("test")
    full = texture_dataset(args.synthetic_classes, args.per_class, args.input_size, seed)
    if args.ratio >= 1:
        return full, None
    manifest = F.DatasetManifest([str(i) for i in range(len(full))], [full.class_names[l] for l in full.labels])
    manifest = F.dataset_split(manifest, args.ratio, seed)
    train_idx = [i for i in range(len(full)) if manifest.split[str(i)] == "train"]
    test_idx = [i for i in range(len(full)) if manifest.split[str(i)] == "test"]
    return full.take(train_idx), full.take(test_idx)


def _model_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--head", choices=[h.value for h in M.HeadKind], default="reduced")
    p.add_argument("--width", type=float, default=1.0, help="channel width multiplier")
    p.add_argument("--input-size", type=int, default=32, help="square input extent (32 = toy mode, 224 = full)")
    p.add_argument("--activation", default="swish", help="head activation: sigmoid, tanh, relu, swish[:beta]")
    p.add_argument("--backbone-activation", default="relu")
    p.add_argument("--dropout", type=float, default=M.DEFAULT_DROPOUT)


def _data_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data-root", help="image tree <root>/<class>/<image>.png|jpg; synthetic textures when omitted")
    p.add_argument("--synthetic-classes", type=int, default=10)
    p.add_argument("--per-class", type=int, default=200)
    p.add_argument("--ratio", type=float, default=0.8, help="train fraction for the stratified split")
    p.add_argument("--granularity", choices=["species", "genus"], default="species")
    p.add_argument("--db", default=str(F.SAMPLE_CSV), help="fish database CSV")
    p.add_argument("--seed", type=int, default=None)


def _build_spec(args, num_classes: int) -> M.ArchitectureSpec:
    return M.build_model(
        num_classes,
        args.head,
        (args.input_size, args.input_size, 3),
        args.width,
        L.ActivationKind.parse(args.backbone_activation),
        L.ActivationKind.parse(args.activation),
        dropout=args.dropout,
    )


def _card_path(weights_path, card: Optional[str]) -> Path:
    return Path(card) if card else Path(str(weights_path) + ".json")


def _write_card(path: Path, args, class_names: Sequence[str]) -> None:
    card = {
        "schema": CARD_SCHEMA,
        "class_names": list(class_names),
        "head": args.head,
        "width": args.width,
        "input_size": args.input_size,
        "activation": args.activation,
        "backbone_activation": args.backbone_activation,
        "dropout": args.dropout,
        "granularity": args.granularity,
    }
    path.write_text(json.dumps(card, indent=1, sort_keys=True) + "\n")


def _load_model(weights_path, card_path: Optional[str]):
    wp = _need_file(weights_path, "weights file")
    cp = _need_file(_card_path(wp, card_path), "model card")
    card = json.loads(cp.read_text())
    ns = argparse.Namespace(**card)
    spec = _build_spec(ns, len(card["class_names"]))
    weights = load_weights(wp, spec.param_names())
    for w in weights.warnings:
        log.warning(w)
    return spec, weights, card


# -- subcommands -------------------------------------------------------------


def cmd_params(args) -> int:
    _echo(args)
    base = M.head_only_spec("baseline", args.classes)
    red = M.head_only_spec("reduced", args.classes, hidden=args.hidden)
    baseline = M.count_params(base, "head")
    trunk = M.count_params(red, "trunk")
    reduced_full = M.count_params(red, "head")
    ratio = trunk / baseline
    spec = M.build_model(args.classes, args.head, (args.input_size, args.input_size, 3), args.width)
    out = {
        "schema": PARAMS_SCHEMA,
        "baseline_top": baseline,
        "reduced_trunk": trunk,
        "reduced_head_with_classifier": reduced_full,
        "ratio": round(ratio, 6),
        "classes": args.classes,
        "model_total": M.count_params(spec),
        "model_trainable": M.count_params(spec, counting="trainable"),
        "backbone": M.count_params(spec, "backbone"),
    }
    if args.json:
        print(json.dumps(out, sort_keys=True))
    else:
        print(f"baseline top layer ({args.classes} classes): {baseline:,}")
        print(f"reduced head trunk:                {trunk:,}")
        print(f"reduced head incl. classifier:     {reduced_full:,}")
        print(f"ratio trunk / baseline:            {ratio:.3f}")
        print(f"{args.head} model total:            {out['model_total']:,} (trainable {out['model_trainable']:,}, backbone {out['backbone']:,})")
    return 0


def cmd_flops(args) -> int:
    _echo(args)
    spec = M.build_model(args.classes, args.head, (args.input_size, args.input_size, 3), args.width)
    rows = []
    shape = spec.input_shape
    shapes = spec.shapes()
    layers = spec.layers
    for i, layer in enumerate(layers):
        if isinstance(layer, M.Conv) and layer.mode is L.ConvMode.DEPTHWISE:
            pw, out = layers[i + 3], shapes[i + 3]
            sep = M.layer_flops(layer, shape, shapes[i]) + M.layer_flops(pw, shapes[i], out)
            std = layer.kernel_size**2 * layer.in_channels * pw.out_channels * out[0] * out[1]
            rows.append({"block": layer.name.rsplit("/", 1)[1].replace("_dw", ""), "separable": sep, "standard": std, "ratio": sep / std})
        shape = shapes[i]
    total = M.count_flops(spec)
    if args.json:
        print(json.dumps({"schema": "mmnet.flops/1", "total": total, "backbone": M.count_flops(spec, "backbone"), "head": M.count_flops(spec, "head"), "blocks": rows}, sort_keys=True))
    else:
        for r in rows:
            print(f"{r['block']:<8} separable {r['separable']:>12,}  standard {r['standard']:>13,}  ratio {r['ratio']:.4f}")
        print(f"total MACs {total:,}  (backbone {M.count_flops(spec, 'backbone'):,}, head {M.count_flops(spec, 'head'):,})")
    return 0


def cmd_inspect(args) -> int:
    _echo(args)
    spec = M.build_model(args.classes, args.head, (args.input_size, args.input_size, 3), args.width)
    print(M.describe(spec))
    return 0


def cmd_split(args) -> int:
    seed = _seed(args)
    _echo(args)
    if args.data_root:
        manifest = F.DatasetManifest.from_image_tree(_need_file(args.data_root, "data root"))
        manifest = F.dataset_split(manifest, args.ratio, seed)
        train, test = len(manifest.subset("train")), len(manifest.subset("test"))
        if args.out:
            Path(args.out).write_text(manifest.to_json())
    elif args.n is not None:
        if args.n < 2:
            raise ValidationError("--n must be at least 2")
        train, test = F.split_sizes(args.n, args.ratio)
    else:
        raise ValidationError("split needs --n or --data-root")
    if args.json:
        print(json.dumps({"schema": SPLIT_SCHEMA, "train": train, "test": test, "ratio": args.ratio}))
    else:
        print(f"train {train:,} / test {test:,}")
    return 0


def cmd_db_lookup(args) -> int:
    _echo(args)
    db = F.FishDB.from_csv(_need_file(args.db, "fish database"))
    if bool(args.species) == bool(args.genus):
        raise ValidationError("give exactly one of --species or --genus")
    name = args.species or args.genus
    result = F.resolve(db, name, 1.0, "species" if args.species else "genus")
    if isinstance(result, F.GenusAmbiguity):
        print(json.dumps({"schema": F.VERDICT_SCHEMA, "species": name, "ambiguous": {c.value: list(s) for c, s in result.by_category.items()}}))
        return 1
    print(F.verdict_json(name, result))
    return 0


def cmd_train(args) -> int:
    seed = _seed(args)
    train, val = _load_dataset(args)
    lr = args.lr if args.lr is not None else T.scaled_learning_rate(len(train))
    _echo(args, {"learning_rate": lr, "train_size": len(train), "val_size": len(val) if val is not None else 0})
    spec = _build_spec(args, train.num_classes)
    if args.init_weights:
        weights = load_weights(_need_file(args.init_weights, "initial weights"), spec.param_names())
    else:
        weights = M.init_weights(spec, seed)
    cfg = T.TrainConfig(
        learning_rate=lr,
        epochs=args.epochs,
        batch_size=args.batch_size,
        seed=seed,
        activation=L.ActivationKind.parse(args.activation),
        momentum=args.momentum,
        checkpoint_every=args.checkpoint_every,
        checkpoint_dir=args.checkpoint_dir,
    )
    augment = A.epoch_augmenter(A.AugmentConfig(seed=seed)) if args.augment else None
    report = T.train_head(spec, weights, train, cfg, val, augment=augment, on_epoch=lambda r: log.info("epoch %d loss %.4f acc %.4f", r.epoch, r.train_loss, r.train_accuracy))
    save_weights(weights, args.out)
    _write_card(_card_path(args.out, args.card), args, train.class_names)
    if args.report:
        report.write(args.report)
    last = report.epochs[-1]
    summary = {"schema": T.REPORT_SCHEMA, "kind": "summary", "epochs": len(report.epochs), "train_loss": last.train_loss, "train_accuracy": last.train_accuracy, "val_accuracy": last.val_accuracy, "weights": str(args.out)}
    print(json.dumps(summary, sort_keys=True))
    if args.telemetry:
        print(TM.measure_inference(spec, weights, train.images[: args.batch_size], phase="infer").to_json())
    return 0


def cmd_evaluate(args) -> int:
    spec, weights, card = _load_model(args.weights, args.card)
    args.input_size = card["input_size"]
    args.granularity = card.get("granularity", "species")
    _, test = _load_dataset(args)
    _echo(args)
    if test is None or not len(test):
        raise ValidationError("no held-out images to evaluate")
    names = card["class_names"]
    index = {n: i for i, n in enumerate(names)}
    labels = [index[test.class_names[l]] for l in test.labels]
    stats: dict = {}
    probs = M.forward(spec, weights, test.images, "infer", stats=stats)
    cm = MT.confusion_from_labels(labels, probs.argmax(1), len(names), names)
    rep = MT.metric_report(cm, args.beta)
    print(rep.table(args.name))
    print(rep.to_json())
    if args.telemetry:
        print(TM.measure_inference(spec, weights, test.images[: min(len(test), 32)], phase="evaluate").to_json())
    return 0


def cmd_classify(args) -> int:
    spec, weights, card = _load_model(args.weights, args.card)
    _echo(args)
    db = F.FishDB.from_csv(_need_file(args.db, "fish database"))
    pipe = F.ConsumabilityPipeline(spec, weights, card["class_names"], db, card.get("granularity", "species"))
    paths = [_need_file(p, "image") for p in args.images]
    imgs = np.stack([A.rescale(A.load_image(p, card["input_size"])) for p in paths])
    for name, verdict in pipe.classify(imgs):
        print(F.verdict_json(name, verdict))
    if args.telemetry:
        print(TM.measure_inference(spec, weights, imgs, phase="classify").to_json())
    return 0


def cmd_augment_preview(args) -> int:
    seed = _seed(args)
    _echo(args)
    cfg = A.AugmentConfig(
        width_shift_range=args.shift,
        height_shift_range=args.shift,
        shear_degrees=args.shear,
        zoom_range=(args.zoom_low, args.zoom_high),
        horizontal_flip=not args.no_hflip,
        vertical_flip=args.vflip,
        seed=seed,
    )
    raw = A.load_image(_need_file(args.image, "image"), args.size)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    samples = [A.ImageSample(raw, 0) for _ in range(args.count)]
    for i, s in enumerate(A.augment_batch(samples, cfg)):
        A.save_image(out / f"aug_{i:03d}.png", s.pixels)
    print(json.dumps({"schema": "mmnet.augment_preview/1", "written": args.count, "dir": str(out)}))
    return 0


def cmd_activation_bench(args) -> int:
    seed = _seed(args)
    train, val = _load_dataset(args)
    lr = args.lr if args.lr is not None else T.scaled_learning_rate(len(train))
    acts = [L.ActivationKind.parse(a) for a in args.activations.split(",")]
    sizes = _int_list(args.batch_sizes)
    _echo(args, {"learning_rate": lr})
    rows = B.activation_bench(train, val, acts, sizes, args.epochs, lr, seed, args.head, args.width)
    print(B.bench_table(rows))
    print(B.bench_json(rows))
    return 0


def cmd_sweep(args) -> int:
    seed = _seed(args)
    train, val = _load_dataset(args)
    grid = _float_list(args.grid) if args.grid else T.sweep_grid()
    _echo(args, {"grid": grid})
    spec = _build_spec(args, train.num_classes)
    weights = M.init_weights(spec, seed)
    feats = Dataset(M.backbone_features(spec, weights, train.images), train.labels, train.class_names)
    vfeats = Dataset(M.backbone_features(spec, weights, val.images), val.labels, val.class_names) if val is not None else None
    cfg = T.TrainConfig(epochs=args.epochs, batch_size=args.batch_size, seed=seed)
    rows = T.lr_sweep(spec, weights, feats, grid, cfg, vfeats)
    for lr, acc in rows:
        print(f"lr {lr:<8g} accuracy {acc:.4f}")
    print(json.dumps({"schema": "mmnet.lr_sweep/1", "rows": [{"lr": lr, "accuracy": acc} for lr, acc in rows]}))
    return 0


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mmnet", description="Lightweight MobileNet fish classifier toolkit")
    parser.add_argument("--version", action="version", version=f"mmnet {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_, description=help_)
        p.add_argument("--config", help="key = value settings file (flags take precedence)")
        p.set_defaults(func=func)
        return p

    p = add("params", cmd_params, "top-layer and model parameter counts")
    p.add_argument("--head", choices=[h.value for h in M.HeadKind], default="reduced")
    p.add_argument("--classes", type=int, default=1000)
    p.add_argument("--hidden", type=int, default=M.REDUCED_HIDDEN)
    p.add_argument("--input-size", type=int, default=224)
    p.add_argument("--width", type=float, default=1.0)
    p.add_argument("--json", action="store_true")

    p = add("flops", cmd_flops, "multiply-accumulate counts, separable vs standard per block")
    p.add_argument("--head", choices=[h.value for h in M.HeadKind], default="reduced")
    p.add_argument("--classes", type=int, default=1000)
    p.add_argument("--input-size", type=int, default=224)
    p.add_argument("--width", type=float, default=1.0)
    p.add_argument("--json", action="store_true")

    p = add("inspect", cmd_inspect, "print the architecture layer table")
    p.add_argument("--head", choices=[h.value for h in M.HeadKind], default="reduced")
    p.add_argument("--classes", type=int, default=1000)
    p.add_argument("--input-size", type=int, default=224)
    p.add_argument("--width", type=float, default=1.0)

    p = add("split", cmd_split, "stratified train/test split sizes or manifest")
    p.add_argument("--n", type=int)
    p.add_argument("--data-root")
    p.add_argument("--ratio", type=float, default=0.8)
    p.add_argument("--out", help="write the split manifest JSON here")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--json", action="store_true")

    db = sub.add_parser("db", help="fish database queries")
    dbsub = db.add_subparsers(dest="db_command", parser_class=_Parser)
    p = dbsub.add_parser("lookup", help="consumability verdict for a species or genus")
    p.add_argument("--config")
    p.add_argument("--species")
    p.add_argument("--genus")
    p.add_argument("--db", default=str(F.SAMPLE_CSV))
    p.set_defaults(func=cmd_db_lookup)

    p = add("train", cmd_train, "head-only transfer learning on a frozen backbone")
    _model_args(p)
    _data_args(p)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=None, help="default: 1e-4 scaled to the training-set size")
    p.add_argument("--momentum", type=float, default=0.0)
    p.add_argument("--augment", action="store_true")
    p.add_argument("--init-weights", help="start from an existing weight file")
    p.add_argument("--out", required=False, default="weights.mmnw")
    p.add_argument("--card", help="model card path (default <out>.json)")
    p.add_argument("--report", help="write the per-epoch report as JSON lines")
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--checkpoint-dir")
    p.add_argument("--telemetry", action="store_true")

    p = add("evaluate", cmd_evaluate, "metric report on the held-out split")
    _data_args(p)
    p.add_argument("--weights", required=True)
    p.add_argument("--card")
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--name", default="M-MobileNets")
    p.add_argument("--telemetry", action="store_true")

    p = add("classify", cmd_classify, "image -> species -> consumability verdict")
    p.add_argument("images", nargs="+")
    p.add_argument("--weights", required=True)
    p.add_argument("--card")
    p.add_argument("--db", default=str(F.SAMPLE_CSV))
    p.add_argument("--telemetry", action="store_true")

    p = add("augment-preview", cmd_augment_preview, "write augmented copies of one image")
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--size", type=int, default=224)
    p.add_argument("--shift", type=float, default=0.2)
    p.add_argument("--shear", type=float, default=10.0)
    p.add_argument("--zoom-low", type=float, default=0.8)
    p.add_argument("--zoom-high", type=float, default=1.2)
    p.add_argument("--no-hflip", action="store_true")
    p.add_argument("--vflip", action="store_true")
    p.add_argument("--seed", type=int, default=None)

    p = add("activation-bench", cmd_activation_bench, "activation x batch-size accuracy table")
    _model_args(p)
    _data_args(p)
    p.add_argument("--activations", default="sigmoid,tanh,relu,swish")
    p.add_argument("--batch-sizes", default="16,32,64")
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--lr", type=float, default=None)

    p = add("sweep", cmd_sweep, "learning-rate sweep over a descending grid")
    _model_args(p)
    _data_args(p)
    p.add_argument("--grid", help="comma-separated rates (default 0.1 down to 1e-5)")
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch-size", type=int, default=32)
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: Sequence[str]) -> None:
    """Load ``--config`` into the chosen subparser's defaults so explicit flags still win."""
    if "--config" not in argv:
        return
    i = list(argv).index("--config")
    if i + 1 >= len(argv):
        raise UsageError("--config needs a path")
    settings = read_config_file(argv[i + 1])
    subparsers = [a for a in parser._actions if isinstance(a, argparse._SubParsersAction)][0]
    target = subparsers.choices.get(argv[0]) if argv else None
    if target is None:
        return
    if argv[0] == "db" and len(argv) > 1:
        target = [a for a in target._actions if isinstance(a, argparse._SubParsersAction)][0].choices.get(argv[1], target)
    known = {a.dest: a for a in target._actions}
    unknown = [k for k in settings if k not in known]
    if unknown:
        raise ValidationError(f"unknown config key(s): {', '.join(unknown)}")
    converted = {}
    for k, v in settings.items():
        action = known[k]
        if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            converted[k] = v.lower() in ("1", "true", "yes", "on")
        else:
            converted[k] = action.type(v) if action.type else v
    target.set_defaults(**converted)


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config(parser, argv)
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
        if not getattr(args, "func", None):
            parser.print_help(sys.stderr)
            return 1
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except MMNetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1 if isinstance(exc, (ValueError, LookupError)) else 2
    except Exception as exc:  # noqa: BLE001
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
