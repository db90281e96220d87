import csv
import json
import logging
from pathlib import Path

from .clients import resolve_weights
from .codec import read_image, write_heatmap, write_image
from .constants import SOURCES
from .converters import convert_dataset
from .core import GazeVerdict
from .data import (
    Gaze3dRecord,
    ec_distance,
    label_ec_columbia,
    label_ec_mpii,
    load_unified,
    sample_eyediap_frames,
)
from .detect import DetectorHandle
from .eval import evaluate_suite, load_predictions, pair_records, write_report
from .exceptions import InvalidInput
from .eyecontact import EcConfig, EcModel
from .gazenet import GazeModel, GazeNetConfig
from .handler import Handler
from .pipeline import Gt360System, infer_frame, render_overlay
from .train import Stage, TrainConfig, run_ec_loso, run_ec_stage, run_stage
from .utils import seed_everything

log = logging.getLogger(__name__)


class InferHandler(Handler):
    name = "infer"

    def register(self, subparsers, common):
        parser = subparsers.add_parser(
            self.name, parents=[common], help="classify the gaze of every head in an image"
        )
        parser.add_argument("--image", required=True, help="PNG or JPEG image")
        parser.add_argument("--out", help="write the overlay here (PNG)")
        parser.add_argument("--sigma", type=float, help="eye-contact threshold")
        parser.add_argument("--ec-weights", help="eye-contact checkpoint path or URL")
        parser.add_argument("--gaze-weights", help="gaze checkpoint path or URL")
        parser.add_argument("--json", action="store_true", help="one JSON object per head")
        parser.set_defaults(handler=self)
        return parser

    def heatmap_path(self, out: Path, index: int) -> Path:
        return out.with_name(f"{out.stem}_head{index}.npy").resolve()

    def run(self, args) -> int:
        config = self.app.load_config(args, {"pipeline.sigma": args.sigma})
        seed_everything(args.seed)
        system = Gt360System.from_config(
            config,
            ec_weights=resolve_weights(args.ec_weights or config["eyecontact.weights"], config),
            gaze_weights=resolve_weights(args.gaze_weights or config["gazenet.weights"], config),
        )
        img = read_image(args.image)
        results = infer_frame(system, img, image_ref=args.image)

        out = Path(args.out) if args.out else None
        if out is not None:
            write_image(out, render_overlay(img, results))
        for index, result in enumerate(results):
            line = result.to_dict()
            line["image"] = str(Path(args.image).resolve())
            if isinstance(result, GazeVerdict):
                line["heatmap_path"] = None
                if out is not None and result.heatmap is not None:
                    path = self.heatmap_path(out, index)
                    write_heatmap(path, result.heatmap.values)
                    line["heatmap_path"] = str(path)
            if args.json:
                self.app.emit(json.dumps(line, sort_keys=True))
            elif isinstance(result, GazeVerdict):
                self.app.emit(
                    f"head {index}: {result.cls.value} p_ec={result.p_ec:.4f}"
                    + (f" p_ift={result.p_ift:.4f}" if result.p_ift is not None else "")
                    + (f" target={list(result.target_point)}" if result.target_point else "")
                )
            else:
                self.app.emit(f"head {index}: error: {result.message}")
        if not results and not args.json:
            self.app.emit("no heads detected")
        return 0


class TrainHandler(Handler):
    name = "train"

    def register(self, subparsers, common):
        parser = subparsers.add_parser(self.name, parents=[common], help="train a model stage")
        parser.add_argument("--stage", required=True, choices=[s.value for s in Stage])
        parser.add_argument("--manifest", required=True, help="unified JSONL manifest")
        parser.add_argument("--val-manifest", help="held-out manifest evaluated every epoch")
        parser.add_argument("--out", required=True, help="checkpoint directory")
        parser.add_argument("--init", help="checkpoint to start from")
        parser.add_argument(
            "--loso",
            action="store_true",
            help="eyecontact only: leave-one-subject-out evaluation, written to <out>/loso.json",
        )
        parser.set_defaults(handler=self)
        self.parser = parser
        return parser

    def run(self, args) -> int:
        config = self.app.load_config(args)
        stage = Stage(args.stage)
        if args.loso and stage is not Stage.EYECONTACT:
            self.parser.error("--loso needs --stage eyecontact")
        cfg = TrainConfig.from_config(config, stage)
        seed_everything(args.seed)
        samples = load_unified(args.manifest)
        if args.loso:
            return self.loso(config, samples, cfg, args)
        if stage is Stage.EYECONTACT:
            if args.init:
                model = EcModel.from_checkpoint(args.init)
            else:
                model = EcModel(EcConfig.from_config(config), seed=args.seed)
            result = run_ec_stage(model, samples, cfg, args.seed, args.out)
        else:
            val = load_unified(args.val_manifest) if args.val_manifest else None
            if args.init:
                gaze = GazeModel.from_checkpoint(args.init)
            else:
                gaze = GazeModel(GazeNetConfig.from_config(config))
            result = run_stage(gaze, samples, cfg, args.seed, args.out, val)
        final = result.history[-1] if result.history else None
        self.app.emit(f"saved {stage.value} checkpoint to {result.checkpoint}")
        if final is not None:
            self.app.emit(f"final train loss {result.train_losses[-1]:.6f}")
        return 0

    def loso(self, config, samples, cfg, args) -> int:
        ec_config = EcConfig.from_config(config)
        report = run_ec_loso(
            lambda: EcModel(ec_config, seed=args.seed),
            samples,
            cfg,
            args.seed,
            config["pipeline.sigma"],
        )
        write_report(report, Path(args.out) / "loso.json")
        self.app.emit(json.dumps(report["mean"], sort_keys=True))
        return 0


class EvalHandler(Handler):
    name = "eval"

    def register(self, subparsers, common):
        parser = subparsers.add_parser(self.name, parents=[common], help="score predictions")
        parser.add_argument("--pred", required=True, help="JSONL written by `infer --json`")
        parser.add_argument("--truth", required=True, help="unified JSONL manifest")
        parser.add_argument("--report", required=True, help="report JSON path")
        parser.set_defaults(handler=self)
        return parser

    def run(self, args) -> int:
        config = self.app.load_config(args)
        seed_everything(args.seed)
        preds = load_predictions(args.pred)
        truths = load_unified(args.truth, check_images=False)
        records, counts = pair_records(preds, truths)
        report = evaluate_suite(records, config["eval.auc_mode"], config["pipeline.point_mode"])
        report["counts"].update(counts)
        write_report(report, args.report)
        self.app.emit(json.dumps(report["overall"], sort_keys=True))
        return 0


class DataHandler(Handler):
    name = "data"

    def register(self, subparsers, common):
        parser = subparsers.add_parser(self.name, help="dataset conversion and labelling")
        actions = parser.add_subparsers(dest="data_command", metavar="<action>")

        convert = actions.add_parser(
            "convert", parents=[common], help="convert a dataset to a unified manifest"
        )
        convert.add_argument("--source", required=True, choices=SOURCES)
        convert.add_argument("--in", dest="in_dir", required=True, help="dataset root directory")
        convert.add_argument("--out", required=True, help="manifest to write")
        convert.set_defaults(handler=self, action=self.convert)

        label = actions.add_parser(
            "label-ec", parents=[common], help="eye-contact label from geometry or head angles"
        )
        group = label.add_mutually_exclusive_group(required=True)
        group.add_argument("--fc", nargs=3, type=float, metavar=("X", "Y", "Z"))
        group.add_argument("--columbia", nargs=2, type=float, metavar=("ELEV", "YAW"))
        label.add_argument("--gt", nargs=3, type=float, metavar=("X", "Y", "Z"))
        label.add_argument("--threshold", type=float, default=30.0, help="millimetres")
        label.set_defaults(handler=self, action=self.label_ec)
        self.label_parser = label

        sample = actions.add_parser(
            "sample-eyediap", parents=[common], help="evenly spaced frames per video"
        )
        sample.add_argument("--index", required=True, help="CSV of video_id,frame_count")
        sample.add_argument("--per-video", type=int, default=50)
        sample.set_defaults(handler=self, action=self.sample_eyediap)

        parser.set_defaults(handler=self, action=None)
        self.parser = parser
        return parser

    def run(self, args) -> int:
        if args.action is None:
            self.parser.error("an action is required")
        return args.action(args)

    def convert(self, args) -> int:
        config = self.app.load_config(args)
        detector = None
        if args.source in ("columbia", "eyediap"):
            detector = DetectorHandle.from_config(config)
        converter = convert_dataset(args.source, args.in_dir, args.out, detector)
        self.app.emit(f"wrote {args.out} ({converter.skipped} samples skipped)")
        return 0

    def label_ec(self, args) -> int:
        if args.columbia is not None:
            elevation, yaw = args.columbia
            result = {"label": label_ec_columbia(elevation, yaw).value}
        else:
            if args.gt is None:
                self.label_parser.error("--fc needs --gt")
            record = Gaze3dRecord(tuple(args.fc), tuple(args.gt))
            result = {
                "label": label_ec_mpii(record, args.threshold).value,
                "distance_mm": ec_distance(record),
            }
        self.app.emit(json.dumps(result, sort_keys=True))
        return 0

    @staticmethod
    def read_index(path) -> list[tuple[str, int]]:
        index = []
        with open(path, newline="") as fh:
            for lineno, row in enumerate(csv.reader(fh), start=1):
                if not row:
                    continue
                if len(row) != 2:
                    raise InvalidInput(f"{path}:{lineno}: expected video_id,frame_count")
                try:
                    index.append((row[0], int(row[1])))
                except ValueError as e:
                    if lineno == 1:
                        continue  # header
                    raise InvalidInput(f"{path}:{lineno}: bad frame count {row[1]!r}") from e
        return index

    def sample_eyediap(self, args) -> int:
        frames = sample_eyediap_frames(self.read_index(args.index), args.per_video)
        writer = csv.writer(self.app.stdout, lineterminator="\n")
        writer.writerow(("video_id", "frame"))
        writer.writerows(frames)
        return 0
