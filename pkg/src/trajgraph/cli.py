"""Command-line entry point: convert, train, eval, predict, plot.

Exit codes: 0 success, 1 usage error, 2 data or numeric error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import figures
from .data import ConfigError, DataError, convert_sdd, denormalize, load_scenes, write_canonical
from .metrics import evaluate, evaluate_linear, scene_seed, predict_scene
from .model import EMBEDDINGS, MASKS, ModelConfig
from .svg import emit_svg
from .tensor import NumericError
from .training import Checkpoint, TrainConfig, Trainer, TrainingAborted

log = logging.getLogger("trajgraph")

DATA_DEFAULTS = {"scale": 10.0, "window_stride": 1}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--t-obs", type=int, default=None, help="observed frames (default 8)")
    p.add_argument("--t-pred", type=int, default=None, help="predicted frames (default 12)")
    p.add_argument("--scale", type=float, default=None, help="normalization divisor (default 10)")
    p.add_argument("--window-stride", type=int, default=None, help="window start step (default 1)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="trajgraph", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("convert", help="SDD annotations -> canonical TSV")
    p.add_argument("input", type=Path)
    p.add_argument("-o", "--output", type=Path, required=True)
    p.add_argument("--frame-stride", type=int, default=12, help="keep frames on this grid (default 12)")

    p = sub.add_parser("train", help="canonical TSVs -> checkpoint + loss trace")
    p.add_argument("data", nargs="+", type=Path, help="TSV files or directories")
    p.add_argument("-o", "--checkpoint", type=Path, required=True)
    p.add_argument("--trace", type=Path, default=None, help="loss trace TSV (default <checkpoint>.trace.tsv)")
    p.add_argument("--config", type=Path, default=None, help="JSON config snapshot")
    p.add_argument("--resume", type=Path, default=None, help="continue from this checkpoint")
    p.add_argument("--no-figures", action="store_true", help="skip the loss-curve PNG")
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--clip-norm", type=float, default=None)
    p.add_argument("--checkpoint-every", type=int, default=None)
    p.add_argument("--d", type=int, default=None, help="embedding width (default 64)")
    p.add_argument("--tcn-depth", type=int, default=None)
    p.add_argument("--embedding", choices=EMBEDDINGS, default=None)
    p.add_argument("--mask", choices=MASKS, default=None)
    _data_flags(p)

    p = sub.add_parser("eval", help="checkpoint + TSVs -> metric report")
    p.add_argument("data", nargs="+", type=Path)
    p.add_argument("-c", "--checkpoint", type=Path, required=True)
    p.add_argument("-k", type=int, default=20, help="samples per scene (default 20)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--output", type=Path, default=None, help="metric TSV")
    p.add_argument("--no-figures", action="store_true")
    _data_flags(p)

    p = sub.add_parser("predict", help="checkpoint + TSVs -> sampled trajectories TSV")
    p.add_argument("data", nargs="+", type=Path)
    p.add_argument("-c", "--checkpoint", type=Path, required=True)
    p.add_argument("-k", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--output", type=Path, required=True)
    _data_flags(p)

    p = sub.add_parser("plot", help="scene (+ predictions) -> SVG")
    p.add_argument("data", type=Path, help="canonical TSV")
    p.add_argument("--scene", type=int, default=0, help="window index")
    p.add_argument("--predictions", type=Path, default=None, help="TSV written by predict")
    p.add_argument("-o", "--output", type=Path, required=True)
    _data_flags(p)
    return parser


def _merge(dc, *layers):
    """Apply override dicts (lowest precedence first) onto a dataclass type."""
    names = {f.name for f in fields(dc)}
    values = {}
    for layer in layers:
        values.update({k: v for k, v in (layer or {}).items() if k in names and v is not None})
    return dc(**values)


def _data_settings(args, stored: dict | None = None, model: ModelConfig | None = None) -> dict:
    out = dict(DATA_DEFAULTS)
    out.update(stored or {})
    for key in ("scale", "window_stride"):
        if getattr(args, key, None) is not None:
            out[key] = getattr(args, key)
    out["t_obs"] = model.t_obs if model else (args.t_obs or 8)
    out["t_pred"] = model.t_pred if model else (args.t_pred or 12)
    return out


def _load(paths, settings) -> list:
    return load_scenes(
        paths, settings["t_obs"], settings["t_pred"], settings["window_stride"], settings["scale"]
    )


def cmd_convert(args) -> int:
    text = args.input.read_text(encoding="utf-8")
    try:
        rows = convert_sdd(text, args.frame_stride)
    except DataError as exc:
        raise DataError(f"{args.input}: {exc}") from None
    write_canonical(rows, args.output)
    log.info("wrote %d rows to %s", len(rows), args.output)
    return 0


def cmd_train(args) -> int:
    snapshot = json.loads(args.config.read_text(encoding="utf-8")) if args.config else {}
    flags = vars(args)
    resume = Checkpoint.load(args.resume) if args.resume else None
    if resume is not None:
        model_cfg = resume.model_config
        train_cfg = _merge(TrainConfig, asdict(resume.train_config), snapshot.get("train"), flags)
        settings = _data_settings(args, resume.data, model_cfg)
    else:
        model_cfg = _merge(ModelConfig, snapshot.get("model"), flags)
        train_cfg = _merge(TrainConfig, snapshot.get("train"), flags)
        settings = _data_settings(args, snapshot.get("data"), model_cfg)
    scenes = _load(args.data, settings)
    log.info("%d scenes", len(scenes))
    trace_path = args.trace or args.checkpoint.with_name(args.checkpoint.name + ".trace.tsv")
    if resume is None:
        trace_path.write_text("epoch\tstep\tloss\n", encoding="utf-8")
    trainer = Trainer(scenes, train_cfg, model_cfg, checkpoint=resume, data_config=settings)
    result = trainer.run(trace_path, args.checkpoint)
    if not args.no_figures and result.trace:
        figures.plot_loss_trace(result.trace, trace_path.with_suffix(".png"))
    if result.trace:
        print(f"step {result.trace[-1][1]} loss {result.trace[-1][2]:.6f}")
    return 0


def _restore(args):
    ckpt = Checkpoint.load(args.checkpoint)
    settings = _data_settings(args, ckpt.data, ckpt.model_config)
    return ckpt, settings, _load(args.data, settings)


def cmd_eval(args) -> int:
    ckpt, _, scenes = _restore(args)
    if not scenes:
        raise DataError("no complete windows in the given data")
    report, _ = evaluate(scenes, ckpt.model_params(), ckpt.model_config, args.k, args.seed)
    linear = evaluate_linear(scenes)
    print(report.summary())
    print("linear " + linear.summary())
    if args.output:
        lines = ["model\t" + report.to_tsv().splitlines()[0]]
        for name, rep in (("network", report), ("linear", linear)):
            lines.append(name + "\t" + rep.to_tsv().splitlines()[1])
        args.output.write_text("\n".join(lines) + "\n", encoding="utf-8")
        if not args.no_figures:
            figures.plot_metric_bars({"network": report, "linear": linear}, args.output.with_suffix(".png"))
    return 0


def cmd_predict(args) -> int:
    ckpt, _, scenes = _restore(args)
    params = ckpt.model_params()
    lines = ["scene\tstart_frame\tsample\tstep\tagent_id\tx\ty"]
    for si, scene in enumerate(scenes):
        pred = predict_scene(scene, params, ckpt.model_config, args.k, scene_seed(args.seed, si))
        for k in range(pred.k):
            for t in range(scene.t_pred):
                for i, aid in enumerate(scene.agent_ids):
                    x, y = map(float, pred.samples[k, t, i])
                    lines.append(f"{si}\t{scene.start_frame}\t{k}\t{t}\t{aid}\t{x!r}\t{y!r}")
    args.output.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return 0


def read_predictions(path: Path, scene_index: int, agent_ids, t_pred: int) -> np.ndarray:
    """Sample-mean path ``[T_pred, N, 2]`` for one scene of a predict TSV."""
    col = {int(a): i for i, a in enumerate(agent_ids)}
    acc = np.zeros((t_pred, len(col), 2))
    count = np.zeros((t_pred, len(col)))
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if lineno == 1 or not line.strip():
            continue
        parts = line.split("\t")
        try:
            si, t, aid = int(parts[0]), int(parts[3]), int(parts[4])
            x, y = float(parts[5]), float(parts[6])
        except (ValueError, IndexError):
            raise DataError(f"{path}: line {lineno}: malformed prediction row") from None
        if si != scene_index or aid not in col:
            continue
        acc[t, col[aid]] += (x, y)
        count[t, col[aid]] += 1
    if count.min() == 0:
        raise DataError(f"{path}: no complete predictions for scene {scene_index}")
    return acc / count[..., None]


def cmd_plot(args) -> int:
    settings = _data_settings(args)
    scenes = _load([args.data], settings)
    if not 0 <= args.scene < len(scenes):
        raise DataError(f"scene index {args.scene} out of range (have {len(scenes)})")
    scene = scenes[args.scene]
    observed = denormalize(scene.observed, scene.scale)
    truth = denormalize(scene.future, scene.scale)
    preds = None
    if args.predictions:
        preds = read_predictions(args.predictions, args.scene, scene.agent_ids, scene.t_pred)
    emit_svg(observed, truth, preds, args.output, scene.class_ids)
    return 0


COMMANDS = {
    "convert": cmd_convert,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "plot": cmd_plot,
}


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DataError, ValueError, NumericError, TrainingAborted, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
