"""Command-line entry point: train / eval / explain / export-prototypes /
report-weights.

Option precedence: command-line flags > config file (`key=value` lines) >
preset defaults. Every training run echoes its fully resolved settings and
seed into the output directory before the first step.
"""

import argparse
import dataclasses
import os
import sys

import numpy as np
from PIL import Image

from protonet import data as D
from protonet import explain as X
from protonet import model as M
from protonet import train as TR
from protonet.augment import ElasticParams
from protonet.loss import Hyperparams

TRAIN_KEYS = ("preset", "seed", "epochs", "batch_size", "lr", "lambda", "lambda1",
              "lambda2", "augment", "sigma", "alpha", "w_mode", "optimizer", "out",
              "train_images", "train_labels", "image_root", "manifest", "val_size",
              "checkpoint_every", "snapshot_every")


def _read_config_file(path):
    settings = {}
    with open(path) as f:
        for line_no, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise SystemExit(f"{path}:{line_no}: expected key=value, got {line!r}")
            key, value = line.split("=", 1)
            settings[key.strip()] = value.strip()
    return settings


def _resolve(args, file_settings, defaults):
    """flags > file > defaults; returns a plain dict keyed like TRAIN_KEYS."""
    out = dict(defaults)
    out.update(file_settings)
    for key in TRAIN_KEYS:
        v = getattr(args, key, None)
        if v is not None:
            out[key] = v
    return out


def _load_train_dataset(s):
    if s.get("train_images"):
        d = D.load_idx(s["train_images"], s["train_labels"])
    elif s.get("manifest"):
        d = D.load_image_dir(s["image_root"] or ".", s["manifest"])
    else:
        raise SystemExit("no dataset: pass --train-images/--train-labels "
                         "or --image-root/--manifest")
    val_size = s.get("val_size")
    if val_size is None:
        val_size = 5000 if d.n == 60000 else 0
    val_size = int(val_size)
    if val_size > 0:
        train, val = D.split(d, [d.n - val_size, val_size], seed=0)
        return train, val
    return d, None


def cmd_train(args) -> int:
    file_settings = _read_config_file(args.config) if args.config else {}
    hyper_defaults = Hyperparams()
    defaults = {
        "preset": "mnist", "epochs": hyper_defaults.epochs,
        "batch_size": hyper_defaults.batch_size, "lr": hyper_defaults.learning_rate,
        "lambda": hyper_defaults.lambda_r, "lambda1": hyper_defaults.lambda_1,
        "lambda2": hyper_defaults.lambda_2, "augment": "on",
        "sigma": 4.0, "alpha": 20.0, "w_mode": "learned", "optimizer": "sgd",
        "out": "run", "val_size": None, "seed": None,
        "train_images": None, "train_labels": None, "image_root": None,
        "manifest": None, "checkpoint_every": 25, "snapshot_every": 10,
    }
    s = _resolve(args, file_settings, defaults)

    if s["seed"] is None:
        s["seed"] = int(np.random.SeedSequence().entropy % (2 ** 62))
    seed = int(s["seed"])

    cfg = M.preset(str(s["preset"]))
    if str(s["w_mode"]) in ("negid", "negative_identity"):
        cfg = dataclasses.replace(cfg, w_mode="negative_identity",
                                  n_prototypes=cfg.n_classes)
    hyper = Hyperparams(
        lambda_r=float(s["lambda"]), lambda_1=float(s["lambda1"]),
        lambda_2=float(s["lambda2"]), learning_rate=float(s["lr"]),
        batch_size=int(s["batch_size"]), epochs=int(s["epochs"]))

    train_set, val_set = _load_train_dataset(s)
    augment = None
    if str(s["augment"]).lower() in ("on", "true", "1", "yes"):
        augment = ElasticParams(float(s["sigma"]), float(s["alpha"]), seed)
    threads = int(os.environ.get("PROTONET_THREADS", "1"))

    out_dir = str(s["out"])
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.txt"), "w") as f:
        f.write(f"version={__import__('protonet').__version__}\n")
        for key in TRAIN_KEYS:
            if key in s and s[key] is not None:
                f.write(f"{key}={s[key]}\n")
    print(f"seed={seed}")

    state = TR.load_checkpoint(args.resume, cfg) if args.resume else None
    TR.train_loop(cfg, hyper, train_set, val_set, augment=augment, seed=seed,
                  optimizer=str(s["optimizer"]), state=state, out_dir=out_dir,
                  checkpoint_every=int(s["checkpoint_every"]),
                  snapshot_every=int(s["snapshot_every"]),
                  augment_threads=threads, log=print)
    return 0


def _load_eval_dataset(args):
    if args.images:
        return D.load_idx(args.images, args.labels)
    if args.manifest:
        return D.load_image_dir(args.image_root or ".", args.manifest)
    raise SystemExit("no dataset: pass --images/--labels or --image-root/--manifest")


def cmd_eval(args) -> int:
    for path in (args.checkpoint, args.images, args.labels, args.manifest):
        if path and not os.path.exists(path):
            print(f"error: no such file {path}", file=sys.stderr)
            return 2
    state = TR.load_checkpoint(args.checkpoint)
    d = _load_eval_dataset(args)
    print(f"test_acc={TR.evaluate(state.params, state.cfg, d)!r}")
    return 0


def cmd_explain(args) -> int:
    state = TR.load_checkpoint(args.checkpoint)
    cfg = state.cfg
    if args.image:
        with Image.open(args.image) as im:
            h, w, c = cfg.input_shape
            arr = np.asarray(im.convert("L" if c == 1 else "RGB"), dtype=np.uint8)
        image = (arr[:, :, None] if arr.ndim == 2 else arr) / 255.0
    else:
        d = _load_eval_dataset(args)
        image = d.images[args.index]
    explanation = X.explain_input(state.params, cfg, image)

    os.makedirs(args.out, exist_ok=True)
    proto_files = X.export_images(explanation.prototype_images,
                                  os.path.join(args.out, "prototypes"), args.format)
    X.export_images(image[None], os.path.join(args.out, "input"), args.format)
    json_path = os.path.join(args.out, "explanation.json")
    with open(json_path, "w") as f:
        f.write(explanation.to_json([os.path.relpath(p, args.out) for p in proto_files]))
    print(json_path)
    return 0


def cmd_export_prototypes(args) -> int:
    state = TR.load_checkpoint(args.checkpoint)
    paths = X.export_images(M.decode_prototypes(state.params, state.cfg),
                            args.out, args.format)
    print(f"wrote {len(paths)} images to {args.out}")
    return 0


def cmd_report_weights(args) -> int:
    state = TR.load_checkpoint(args.checkpoint)
    report = X.weight_report(state.params, state.cfg)
    csv = report.to_csv()
    if report.fixed_negative_identity:
        print("# W is the fixed negative identity (nearest-prototype mode)")
    print(csv, end="")
    if args.out:
        with open(args.out, "w") as f:
            f.write(csv)
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="protonet",
                                description="Prototype-layer interpretable classifier")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", help="key=value settings file")
    t.add_argument("--preset", choices=["mnist", "fashion", "car", "ablate_proto", "ablate_all"])
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--lambda", dest="lambda", type=float)
    t.add_argument("--lambda1", type=float)
    t.add_argument("--lambda2", type=float)
    t.add_argument("--augment", choices=["on", "off"])
    t.add_argument("--sigma", type=float)
    t.add_argument("--alpha", type=float)
    t.add_argument("--w-mode", dest="w_mode", choices=["learned", "negid"])
    t.add_argument("--optimizer", choices=["sgd", "adam"])
    t.add_argument("--out")
    t.add_argument("--train-images", dest="train_images")
    t.add_argument("--train-labels", dest="train_labels")
    t.add_argument("--image-root", dest="image_root")
    t.add_argument("--manifest")
    t.add_argument("--val-size", dest="val_size", type=int)
    t.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    t.add_argument("--snapshot-every", dest="snapshot_every", type=int)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--images")
    e.add_argument("--labels")
    e.add_argument("--image-root", dest="image_root")
    e.add_argument("--manifest")
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("explain", help="explain one input")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--image", help="image file to explain")
    x.add_argument("--images")
    x.add_argument("--labels")
    x.add_argument("--image-root", dest="image_root")
    x.add_argument("--manifest")
    x.add_argument("--index", type=int, default=0, help="dataset index to explain")
    x.add_argument("--out", required=True)
    x.add_argument("--format", choices=["png", "pgm"], default="png")
    x.set_defaults(func=cmd_explain)

    ep = sub.add_parser("export-prototypes", help="decode and save all prototypes")
    ep.add_argument("--checkpoint", required=True)
    ep.add_argument("--out", required=True)
    ep.add_argument("--format", choices=["png", "pgm"], default="png")
    ep.set_defaults(func=cmd_export_prototypes)

    rw = sub.add_parser("report-weights", help="print the transposed weight matrix")
    rw.add_argument("--checkpoint", required=True)
    rw.add_argument("--out", help="also write CSV here")
    rw.set_defaults(func=cmd_report_weights)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (ValueError, D.DataError, TR.CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
