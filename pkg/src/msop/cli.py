"""The ``msop`` command: train, eval, predict, synth, and ablate.

Configuration comes from defaults, then an optional JSON config file, then
command-line flags (highest precedence).  Every command is deterministic under
a fixed seed and config.  Exit codes: 0 success, 1 configuration error,
2 I/O error, 3 internal invariant failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .blocks import ClassifierConfig, ConfigError, MsopClassifier
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .curriculum import REGIMES, TrainConfig, blur_image, run_training
from .data import (
    ManifestError,
    SynthConfig,
    generate_synthetic,
    load_image,
    load_manifest,
    perturb_non_malignant,
    save_dataset,
    save_image,
    write_manifest,
)
from .labels import LABELS, label_index
from .metrics import (
    EvalReport,
    classification_metrics,
    detection_metrics,
    format_fold_summary,
    patient_grouped_kfold,
    summarize_folds,
)
from .pipeline import (
    BoundingBox,
    DetectionFileRoiProvider,
    ManifestRoiProvider,
    RoiProvider,
    WholeImageRoiProvider,
    crop_region,
    predict_image,
    resize_image,
)

ABLATION_SIGMAS = (0, 1, 2, 4, 8, 16)


@dataclass
class RunConfig:
    """Every knob of every command; unknown config-file keys are rejected."""

    manifest: str | None = None
    test_manifest: str | None = None
    checkpoint: str | None = None
    resume: str | None = None
    out: str = "runs"
    regime: str = "va"
    epochs: int = 100
    batch_size: int = 16
    lr: float = 0.005
    momentum: float = 0.9
    weight_decay: float = 0.0005
    lr_decay: float = 0.9
    lr_decay_every: int = 5
    clip_grad: float = 5.0
    sigma0: int = 16
    k: int = 5
    k_prime: int = 10
    seed: int = 0
    roi_source: str = "manifest"
    roi_threshold: float = 0.5
    input_size: int = 224
    stage_widths: tuple[int, ...] = (16, 32, 64, 128)
    layers_per_stage: int = 4
    normalize_cov: bool = False
    kfold: int = 0
    size: int = 128
    counts: tuple[int, int, int] = (10, 10, 10)
    distractor_prob: float = 0.0
    noise_level: float = 4.0
    perturb: bool = False
    beta: float = 0.1

    def __post_init__(self):
        self.stage_widths = tuple(int(w) for w in self.stage_widths)
        self.counts = tuple(int(c) for c in self.counts)
        if self.regime not in REGIMES:
            raise ConfigError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.sigma0 < 0:
            raise ConfigError("sigma0 must be nonnegative")
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if len(self.counts) != 3 or any(c < 0 for c in self.counts):
            raise ConfigError("counts must be three nonnegative integers")
        if not (self.roi_source in ("manifest", "whole")
                or self.roi_source.startswith("file:")):
            raise ConfigError("roi-source must be manifest, whole, or file:<path>")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["stage_widths"] = list(self.stage_widths)
        d["counts"] = list(self.counts)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)

    def classifier_config(self) -> ClassifierConfig:
        return ClassifierConfig(
            input_height=self.input_size, input_width=self.input_size,
            stage_widths=self.stage_widths, layers_per_stage=self.layers_per_stage,
            normalize_cov=self.normalize_cov)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
            momentum=self.momentum, weight_decay=self.weight_decay,
            lr_decay=self.lr_decay, lr_decay_every=self.lr_decay_every,
            clip_grad_norm=self.clip_grad if self.clip_grad > 0 else None,
            sigma0=self.sigma0, k=self.k, k_prime=self.k_prime)


def load_config(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return data


def make_provider(config: RunConfig, records) -> RoiProvider:
    if config.roi_source == "manifest":
        return ManifestRoiProvider.from_records(records)
    if config.roi_source == "whole":
        return WholeImageRoiProvider()
    return DetectionFileRoiProvider(config.roi_source[len("file:"):],
                                    threshold=config.roi_threshold)


def training_samples(records, input_size: int):
    """One (resized crop, class index) sample per annotated box, or per image."""
    samples = []
    for rec in records:
        if rec.boxes:
            crops = [crop_region(rec.image, box) for box in rec.boxes]
        else:
            crops = [rec.image]
        for crop in crops:
            samples.append((resize_image(crop, input_size, input_size),
                            label_index(rec.label)))
    return samples


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_train(config: RunConfig) -> dict:
    """Train one model and leave a checkpoint plus a per-epoch log behind."""
    if not config.manifest:
        raise ConfigError("train needs --manifest")
    records = load_manifest(config.manifest)
    samples = training_samples(records, config.input_size)
    out_dir = Path(config.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    start_epoch = 1
    optimizer = None
    if config.resume:
        ckpt = load_checkpoint(config.resume)
        if ckpt.model.config.to_dict() != config.classifier_config().to_dict():
            raise CheckpointError("resume checkpoint was built for a different "
                                  "architecture than this config")
        model = ckpt.model
        start_epoch = ckpt.epoch + 1
        if ckpt.optimizer_state is not None:
            optimizer = ckpt.make_optimizer()
    else:
        model = MsopClassifier(config.classifier_config(), seed=config.seed)

    log, cur_state, optimizer = run_training(
        model, samples, config.regime, config.train_config(), seed=config.seed,
        start_epoch=start_epoch, optimizer=optimizer)

    ckpt_path = out_dir / "checkpoint.msop"
    save_checkpoint(ckpt_path, model, seed=config.seed, epoch=config.epochs,
                    optimizer=optimizer, curriculum_state=cur_state)
    log_path = out_dir / "train_log.jsonl"
    with open(log_path, "w", encoding="utf-8") as fh:
        for entry in log:
            fh.write(json.dumps(entry.to_dict(), sort_keys=True) + "\n")
    print(f"trained {config.epochs - start_epoch + 1} epoch(s) on "
          f"{len(samples)} samples -> {ckpt_path}")
    return {"checkpoint": str(ckpt_path), "log": str(log_path)}


def _evaluate_with_pipeline(model, records, provider) -> tuple[EvalReport, list]:
    predictions = [predict_image(rec.image, model, provider, rec.image_id)
                   for rec in records]
    report = classification_metrics([p.label for p in predictions],
                                    [rec.label for rec in records])
    return report, predictions


def _attach_detection_metrics(report: EvalReport, records, provider) -> None:
    if not all(rec.boxes for rec in records):
        return
    pred_boxes = [provider.boxes_for(rec.image_id, rec.image) for rec in records]
    gt_boxes = [list(rec.boxes) for rec in records]
    report.miou, report.det_precision, report.det_recall = detection_metrics(
        pred_boxes, gt_boxes)


def _report_lines(report: EvalReport) -> str:
    def fmt(v):
        return "n/a" if v is None else f"{v:.1f}"

    lines = [
        f"n:           {report.n}",
        f"accuracy:    {fmt(report.accuracy)}",
        f"acc2:        {fmt(report.acc2)}",
        f"sensitivity: {fmt(report.sensitivity)}",
        f"specificity: {fmt(report.specificity)}",
        "confusion (rows gt normal/benign/malignant):",
    ]
    for row in report.confusion:
        lines.append("    " + " ".join(f"{v:5d}" for v in row))
    if report.miou is not None:
        lines.append(f"mIoU:        {fmt(report.miou)}")
        lines.append(f"det prec:    {fmt(report.det_precision)}")
        lines.append(f"det recall:  {fmt(report.det_recall)}")
    return "\n".join(lines)


def cmd_eval(config: RunConfig) -> dict:
    """Evaluate a checkpoint on a manifest; optionally k-fold train-and-eval."""
    if not config.manifest:
        raise ConfigError("eval needs --manifest")
    records = load_manifest(config.manifest)
    out_dir = Path(config.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    if config.kfold:
        return _eval_kfold(config, records, out_dir)

    if not config.checkpoint:
        raise ConfigError("eval needs --checkpoint (or --kfold)")
    ckpt = load_checkpoint(config.checkpoint)
    provider = make_provider(config, records)
    report, _ = _evaluate_with_pipeline(ckpt.model, records, provider)
    if config.roi_source.startswith("file:"):
        _attach_detection_metrics(report, records, provider)

    (out_dir / "report.json").write_text(
        json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n")
    (out_dir / "report.txt").write_text(_report_lines(report) + "\n")
    print(_report_lines(report))
    return {"report": report}


def _eval_kfold(config: RunConfig, records, out_dir: Path) -> dict:
    if config.kfold < 2:
        raise ConfigError("kfold must be >= 2")
    splits = patient_grouped_kfold(records, config.kfold, seed=config.seed)
    reports = []
    for fold, (train_idx, val_idx) in enumerate(splits):
        model = MsopClassifier(config.classifier_config(), seed=config.seed + fold)
        samples = training_samples([records[i] for i in train_idx], config.input_size)
        run_training(model, samples, config.regime, config.train_config(),
                     seed=config.seed + fold)
        val_records = [records[i] for i in val_idx]
        provider = make_provider(config, val_records)
        report, _ = _evaluate_with_pipeline(model, val_records, provider)
        reports.append(report)
        (out_dir / f"report_fold{fold}.json").write_text(
            json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n")
    summary = summarize_folds(reports)
    (out_dir / "report_summary.txt").write_text(format_fold_summary(summary) + "\n")
    (out_dir / "report_summary.json").write_text(json.dumps(
        {k: {"mean": m, "sd": s} for k, (m, s) in summary.items()},
        sort_keys=True, indent=2) + "\n")
    print(format_fold_summary(summary))
    return {"reports": reports, "summary": summary}


def cmd_predict(config: RunConfig) -> dict:
    """One prediction record per manifest image; unreadable images are logged
    as error records and the run continues."""
    if not config.checkpoint:
        raise ConfigError("predict needs --checkpoint")
    if not config.manifest:
        raise ConfigError("predict needs --manifest")
    ckpt = load_checkpoint(config.checkpoint)
    out_dir = Path(config.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    manifest_path = Path(config.manifest)
    base = manifest_path.parent
    entries = []
    boxes_by_id: dict[str, list[BoundingBox]] = {}
    with open(manifest_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                image_rel = str(rec["image"])
                boxes = [BoundingBox.from_list(b) for b in rec.get("boxes", [])]
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ManifestError(f"{manifest_path}:{lineno}: {exc}") from exc
            entries.append(image_rel)
            boxes_by_id[image_rel] = boxes

    if config.roi_source == "manifest":
        provider: RoiProvider = ManifestRoiProvider(boxes_by_id)
    elif config.roi_source == "whole":
        provider = WholeImageRoiProvider()
    else:
        provider = DetectionFileRoiProvider(config.roi_source[len("file:"):],
                                            threshold=config.roi_threshold)

    out_path = out_dir / "predictions.jsonl"
    results = []
    with open(out_path, "w", encoding="utf-8") as fh:
        for image_rel in entries:
            try:
                img = load_image(base / image_rel)
                pred = predict_image(img, ckpt.model, provider, image_rel)
                row = pred.to_dict()
            except OSError as exc:
                row = {"image_id": image_rel, "error": str(exc)}
            results.append(row)
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    print(f"wrote {len(results)} prediction record(s) -> {out_path}")
    return {"predictions": results, "path": str(out_path)}


def cmd_synth(config: RunConfig) -> dict:
    """Generate the synthetic dataset, optionally with its perturbed twin."""
    out_dir = Path(config.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    synth_cfg = SynthConfig(
        size=config.size, n_normal=config.counts[0], n_benign=config.counts[1],
        n_malignant=config.counts[2], distractor_prob=config.distractor_prob,
        noise_level=config.noise_level, seed=config.seed)
    records = generate_synthetic(synth_cfg)
    manifest = save_dataset(records, out_dir)
    (out_dir / "provenance.json").write_text(json.dumps({
        "operation": "generate_synthetic",
        "parameters": synth_cfg.to_dict(),
        "seed": config.seed,
    }, sort_keys=True, indent=2) + "\n")

    result = {"manifest": str(manifest), "count": len(records)}
    if config.perturb:
        perturbed = perturb_non_malignant(records, beta=config.beta, seed=config.seed)
        for rec in perturbed:
            rec.image_id = rec.image_id.replace(".png", "_perturbed.png")
            save_image(out_dir / rec.image_id, rec.image)
        pert_manifest = out_dir / "manifest_perturbed.jsonl"
        write_manifest(perturbed, pert_manifest)
        (out_dir / "provenance_perturbed.json").write_text(json.dumps({
            "operation": ["low_freq_swap", "add_tissue_patch"],
            "parameters": {"beta": config.beta, "applied_to": "non-malignant"},
            "seed": config.seed,
        }, sort_keys=True, indent=2) + "\n")
        result["perturbed_manifest"] = str(pert_manifest)
    print(f"wrote {len(records)} image(s) -> {manifest}")
    return result


def _crop_samples(records, input_size: int):
    crops = []
    for rec in records:
        box = rec.boxes[0] if rec.boxes else None
        crop = crop_region(rec.image, box) if box else rec.image
        crops.append(resize_image(crop, input_size, input_size))
    return crops


def _eval_crops(model, crops, labels_true, sigma: float = 0.0) -> EvalReport:
    preds = []
    for crop in crops:
        img = blur_image(crop, sigma) if sigma > 0 else crop
        probs = model.predict_probs(img)
        preds.append(LABELS[int(np.argmax(probs))])
    return classification_metrics(preds, labels_true)


def cmd_ablate(config: RunConfig) -> dict:
    """Train all four regimes under one budget and compare them across
    clean, texture-perturbed, and blurred test conditions."""
    if config.manifest:
        train_records = load_manifest(config.manifest)
        if not config.test_manifest:
            raise ConfigError("ablate with --manifest also needs --test-manifest")
        test_records = load_manifest(config.test_manifest)
    else:
        synth = SynthConfig(
            size=config.size, n_normal=config.counts[0], n_benign=config.counts[1],
            n_malignant=config.counts[2], distractor_prob=config.distractor_prob,
            noise_level=config.noise_level, seed=config.seed)
        train_records = generate_synthetic(synth)
        test_counts = tuple(max(1, c // 3) for c in config.counts)
        test_cfg = dataclasses.replace(
            synth, n_normal=test_counts[0], n_benign=test_counts[1],
            n_malignant=test_counts[2], seed=config.seed + 1)
        test_records = generate_synthetic(test_cfg)

    perturbed_records = perturb_non_malignant(test_records, beta=config.beta,
                                              seed=config.seed)
    samples = training_samples(train_records, config.input_size)
    test_crops = _crop_samples(test_records, config.input_size)
    pert_crops = _crop_samples(perturbed_records, config.input_size)
    gt = [rec.label for rec in test_records]

    out_dir = Path(config.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for regime in REGIMES:
        model = MsopClassifier(config.classifier_config(), seed=config.seed)
        run_training(model, samples, regime, config.train_config(), seed=config.seed)
        conditions = [("clean", _eval_crops(model, test_crops, gt)),
                      ("perturbed", _eval_crops(model, pert_crops, gt))]
        conditions += [(f"blur-{s}", _eval_crops(model, test_crops, gt, sigma=s))
                       for s in ABLATION_SIGMAS]
        for name, report in conditions:
            rows.append({"regime": regime, "condition": name,
                         "accuracy": report.accuracy,
                         "sensitivity": report.sensitivity,
                         "specificity": report.specificity})
        print(f"[{regime}] done", flush=True)

    with open(out_dir / "ablation.jsonl", "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")

    def fmt(v):
        return "  n/a" if v is None else f"{v:5.1f}"

    lines = [f"{'regime':8s} {'condition':10s} {'acc':>5s} {'sens':>5s} {'spec':>5s}"]
    for row in rows:
        lines.append(f"{row['regime']:8s} {row['condition']:10s} "
                     f"{fmt(row['accuracy'])} {fmt(row['sensitivity'])} "
                     f"{fmt(row['specificity'])}")
    table = "\n".join(lines)
    (out_dir / "ablation.txt").write_text(table + "\n")
    print(table)
    return {"rows": rows, "path": str(out_dir / "ablation.jsonl")}


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _int_tuple(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(p) for p in text.split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated ints: {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="msop",
        description="Train, evaluate, and probe the multi-scale second-order "
                    "pooling classifier.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("train", "train a classifier under a curriculum regime"),
        ("eval", "evaluate a checkpoint (optionally k-fold train-and-eval)"),
        ("predict", "per-image region predictions and aggregated labels"),
        ("synth", "generate the synthetic dataset (optionally its perturbed twin)"),
        ("ablate", "compare all regimes on clean/perturbed/blurred test sets"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON config file; flags override it")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--manifest")
        p.add_argument("--test-manifest", dest="test_manifest")
        p.add_argument("--checkpoint")
        p.add_argument("--resume")
        p.add_argument("--regime", choices=REGIMES)
        p.add_argument("--sigma0", type=int)
        p.add_argument("--k", type=int)
        p.add_argument("--k-prime", dest="k_prime", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--batch", dest="batch_size", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--momentum", type=float)
        p.add_argument("--weight-decay", dest="weight_decay", type=float)
        p.add_argument("--clip-grad", dest="clip_grad", type=float,
                       help="global gradient norm clip; 0 disables")
        p.add_argument("--roi-source", dest="roi_source",
                       help="manifest, whole, or file:<path>")
        p.add_argument("--roi-threshold", dest="roi_threshold", type=float)
        p.add_argument("--input-size", dest="input_size", type=int)
        p.add_argument("--stage-widths", dest="stage_widths", type=_int_tuple)
        p.add_argument("--layers-per-stage", dest="layers_per_stage", type=int)
        p.add_argument("--normalize-cov", dest="normalize_cov",
                       action="store_true", default=None)
        p.add_argument("--kfold", type=int)
        p.add_argument("--size", type=int)
        p.add_argument("--counts", type=_int_tuple,
                       help="normal,benign,malignant image counts")
        p.add_argument("--distractor-prob", dest="distractor_prob", type=float)
        p.add_argument("--noise-level", dest="noise_level", type=float)
        p.add_argument("--perturb", action="store_true", default=None)
        p.add_argument("--beta", type=float)
    return parser


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "predict": cmd_predict,
            "synth": cmd_synth, "ablate": cmd_ablate}


def config_from_args(args: argparse.Namespace) -> RunConfig:
    values: dict = {}
    if args.config:
        values.update(load_config(args.config))
    for f in dataclasses.fields(RunConfig):
        cli_value = getattr(args, f.name, None)
        if cli_value is not None:
            values[f.name] = cli_value
    return RunConfig.from_dict(values)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = config_from_args(args)
        COMMANDS[args.command](config)
        return 0
    except (ManifestError,) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, CheckpointError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # invariant breakage
        print(f"internal error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
