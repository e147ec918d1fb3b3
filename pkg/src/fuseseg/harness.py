"""Experiment orchestration: dataset build, augmentation, training, evaluation, ablation.

Every command is a deterministic function of (config, seed, input files)
under single-threaded numerics; reruns with equal seeds reproduce datasets
byte for byte and training score for score.
"""

from __future__ import annotations

import dataclasses
import json
import random
import shutil
import statistics
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .checkpoint import arrays_to_state, load_checkpoint, save_checkpoint, state_to_arrays
from .data import (
    GenConfig,
    VideoSample,
    augment_case,
    generate_instrument_clip,
    generate_synthetic_case,
    load_case,
    load_manifest,
    load_split,
    overlay_clip,
    sample_case_classes,
    save_case,
    save_manifest,
    split_cases,
)
from .errors import CheckpointVersionError, EligibilityError, TrainingAbort, ValidationError
from .losses import LossWeights, PredictionTargetPair, composite_loss
from .metrics import ConfusionCounts, MacroAverager, dice_scores, format_table, iou_scores, metrics_report
from .model import ModelConfig, SegModel, boxes_from_label, label_to_onehot, schedule_from_labels


@dataclass(frozen=True)
class OptimConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-4
    epochs: int = 40
    # Step decay: multiply the learning rate by lr_decay_factor once,
    # lr_decay_milestone of the way through training.
    lr_decay_factor: float = 0.25
    lr_decay_milestone: float = 0.7

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValidationError(f"learning rate must be positive, got {self.learning_rate}")
        if self.epochs < 1:
            raise ValidationError(f"epochs must be >= 1, got {self.epochs}")
        if not (0.0 < self.lr_decay_factor <= 1.0) or not (0.0 < self.lr_decay_milestone <= 1.0):
            raise ValidationError("lr decay factor and milestone must lie in (0, 1]")


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    num_cases: int = 28
    clip_len: int = 4
    split_ratios: Tuple[float, float, float] = (0.7, 0.1, 0.2)
    occlude_test: bool = True
    augmentation_enabled: bool = False
    freeze_fusion: bool = False
    macro_metrics: bool = False
    focal_gamma: float = 2.0
    gen: GenConfig = field(default_factory=GenConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    loss_weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if abs(sum(self.split_ratios) - 1.0) > 1e-9:
            raise ValidationError(f"split ratios must sum to 1, got {self.split_ratios}")
        if self.num_cases < 3:
            raise ValidationError(f"need at least 3 cases for a 3-way split, got {self.num_cases}")
        if self.clip_len < 1:
            raise ValidationError(f"clip_len must be >= 1, got {self.clip_len}")


def experiment_config_to_dict(cfg: ExperimentConfig) -> dict:
    return dataclasses.asdict(cfg)


def experiment_config_from_dict(d: dict) -> ExperimentConfig:
    """Rebuild an ExperimentConfig from parsed JSON (lists become tuples)."""
    kwargs = dict(d)
    if "gen" in kwargs:
        g = dict(kwargs["gen"])
        if "size" in g:
            g["size"] = tuple(g["size"])
        if "classes" in g:
            g["classes"] = tuple(g["classes"])
        kwargs["gen"] = GenConfig(**g)
    if "model" in kwargs:
        m = dict(kwargs["model"])
        if "input_size" in m:
            m["input_size"] = tuple(m["input_size"])
        if "channels" in m:
            m["channels"] = tuple(m["channels"])
        kwargs["model"] = ModelConfig(**m)
    if "optim" in kwargs:
        kwargs["optim"] = OptimConfig(**kwargs["optim"])
    if "loss_weights" in kwargs:
        kwargs["loss_weights"] = LossWeights(**kwargs["loss_weights"])
    if "split_ratios" in kwargs:
        kwargs["split_ratios"] = tuple(kwargs["split_ratios"])
    return ExperimentConfig(**kwargs)


def load_experiment_config(path: Path) -> ExperimentConfig:
    return experiment_config_from_dict(json.loads(Path(path).read_text()))


def _model_config_dict(cfg: ModelConfig) -> dict:
    return dataclasses.asdict(cfg)


def _model_config_from_dict(d: dict) -> ModelConfig:
    m = dict(d)
    m["input_size"] = tuple(m["input_size"])
    m["channels"] = tuple(m["channels"])
    return ModelConfig(**m)


# ---------------------------------------------------------------------------
# generate / augment
# ---------------------------------------------------------------------------


def _stratified_class_sets(
    rng: np.random.Generator, assignment: Sequence[str], minority_rate: float
) -> List[Tuple[int, ...]]:
    """Per-split minority sampling: every split carries each minority class in
    ``max(1, round(rate * split_size))`` of its cases, so evaluation splits
    always surface the imbalanced classes."""
    from .data import MAJORITY_CLASSES, MINORITY_CLASSES, SPLITS

    class_sets = [set(MAJORITY_CLASSES) for _ in assignment]
    for split in SPLITS:
        idxs = [i for i, s in enumerate(assignment) if s == split]
        if not idxs:
            continue
        k = min(len(idxs), max(1, int(round(minority_rate * len(idxs)))))
        for c in MINORITY_CLASSES:
            chosen = rng.choice(len(idxs), size=k, replace=False)
            for j in chosen:
                class_sets[idxs[int(j)]].add(c)
    return [tuple(sorted(s)) for s in class_sets]


def cmd_generate(config: ExperimentConfig, out_dir: Path) -> List[dict]:
    """Build the synthetic benchmark on disk; test-split cases receive
    deterministic instrument occlusions when ``occlude_test`` is set."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(config.seed)
    assignment = split_cases(config.num_cases, config.split_ratios)
    class_sets = _stratified_class_sets(rng, assignment, config.gen.minority_rate)
    entries = []
    for i in range(config.num_cases):
        case_seed = int(rng.integers(0, 2**31 - 1))
        case = generate_synthetic_case(
            case_seed, replace(config.gen, classes=class_sets[i]), case_id=f"case_{i:03d}"
        )
        if assignment[i] == "test" and config.occlude_test:
            clip_seed = int(rng.integers(0, 2**31 - 1))
            clip = generate_instrument_clip(clip_seed, config.gen)
            case = overlay_clip(
                case, clip, provenance=f"synthetic+occluded:{clip.instrument_kind.value}"
            )
        save_case(case, out_dir)
        entries.append({"case_id": case.case_id, "split": assignment[i]})
    save_manifest(entries, out_dir)
    return entries


def cmd_augment(config: ExperimentConfig, dataset_dir: Path) -> dict:
    """Append instrument-occluded duplicates of eligible train cases."""
    dataset_dir = Path(dataset_dir)
    entries = load_manifest(dataset_dir)
    rng = np.random.default_rng(config.seed ^ 0x5EED)
    new_entries = []
    eligible = 0
    for entry in entries:
        if entry["split"] != "train":
            continue
        case = load_case(dataset_dir / entry["case_id"])
        if not ({3, 5} & set(case.metadata.present_classes)):
            continue
        eligible += 1
        clip = generate_instrument_clip(int(rng.integers(0, 2**31 - 1)), config.gen)
        aug = augment_case(case, clip)
        save_case(aug, dataset_dir)
        new_entries.append({"case_id": aug.case_id, "split": "train"})
    if eligible == 0:
        raise EligibilityError("no train case contains IP or OCR; nothing to augment")
    save_manifest(entries + new_entries, dataset_dir)
    return {"eligible": eligible, "added": len(new_entries)}


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    checkpoint_path: Path
    last_path: Path
    log_path: Path
    best_val_dice: float
    steps: int


def _save_model_checkpoint(path: Path, model: SegModel, extra_meta: dict):
    meta = {"model_config": _model_config_dict(model.config)}
    meta.update(extra_meta)
    save_checkpoint(path, state_to_arrays(model), meta)


def load_model_checkpoint(path: Path) -> Tuple[SegModel, dict]:
    params, meta = load_checkpoint(path)
    if "model_config" not in meta:
        raise CheckpointVersionError(f"checkpoint {path} carries no model configuration")
    model = SegModel(_model_config_from_dict(meta["model_config"]))
    arrays_to_state(model, params)
    return model, meta


def _evaluate_cases(
    model: SegModel, cases: Sequence[VideoSample], interval: int, macro: bool = False
):
    """Run streaming inference and accumulate confusion counts.

    Returns (counts, prompted_counts, macro_averager_or_None, elapsed_seconds,
    frame_count); prompted counts cover only prompted frames restricted to
    the classes prompted there.
    """
    model.eval()
    counts = ConfusionCounts(model.config.num_classes)
    prompted = ConfusionCounts(model.config.num_classes)
    macro_avg = MacroAverager(model.config.num_classes) if macro else None
    frames = 0
    start = time.perf_counter()
    with torch.no_grad():
        for case in cases:
            schedule = schedule_from_labels(case.labels, interval, model.config.num_classes)
            preds = model.forward_video(case, schedule)
            for t, pred in enumerate(preds):
                lab = pred.label_map()
                counts.accumulate(lab, case.labels[t])
                if macro_avg is not None:
                    macro_avg.add(lab, case.labels[t])
                if t in schedule:
                    prompted.accumulate(
                        lab, case.labels[t], classes=[p.class_id for p in schedule[t]]
                    )
                frames += 1
    elapsed = time.perf_counter() - start
    return counts, prompted, macro_avg, elapsed, frames


def cmd_train(config: ExperimentConfig, dataset_dir: Path, out_dir: Path) -> TrainResult:
    """Train with AdamW on prompted clip windows; keep the best-on-validation checkpoint."""
    torch.set_num_threads(1)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset_dir = Path(dataset_dir)

    train_cases = load_split(dataset_dir, "train")
    val_cases = load_split(dataset_dir, "val")
    if not train_cases:
        raise ValidationError(f"dataset at {dataset_dir} has no train cases")

    torch.manual_seed(config.seed)
    model = SegModel(config.model)
    if config.freeze_fusion:
        for block in model.fusion_modules():
            for p in block.parameters():
                p.requires_grad_(False)
    trainable = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.AdamW(
        trainable,
        lr=config.optim.learning_rate,
        betas=(config.optim.beta1, config.optim.beta2),
        weight_decay=config.optim.weight_decay,
    )
    py_rng = random.Random(config.seed)
    weights = config.loss_weights
    interval = config.model.prompt_interval
    num_ch = config.model.num_channels

    best_path = out_dir / "checkpoint.ckpt"
    last_path = out_dir / "last.ckpt"
    log_path = out_dir / "train_log.jsonl"
    _save_model_checkpoint(last_path, model, {"phase": "init"})

    log_lines: List[str] = []
    best_val = float("-inf")
    step = 0
    decay_epoch = int(config.optim.epochs * config.optim.lr_decay_milestone)
    for epoch in range(config.optim.epochs):
        if epoch == decay_epoch and config.optim.lr_decay_factor < 1.0:
            for group in optimizer.param_groups:
                group["lr"] = config.optim.learning_rate * config.optim.lr_decay_factor
        model.train()
        order = list(range(len(train_cases)))
        py_rng.shuffle(order)
        for idx in order:
            case = train_cases[idx]
            clip_len = min(config.clip_len, case.num_frames)
            start_t = py_rng.randint(0, case.num_frames - clip_len)
            bank = model.new_bank()
            totals = []
            terms = {"focal": 0.0, "dice": 0.0, "mae": 0.0, "ce": 0.0}
            for j in range(clip_len):
                t = start_t + j
                use_prompt = j == 0 or t % interval == 0
                prompts = (
                    boxes_from_label(case.labels[t], config.model.num_classes)
                    if use_prompt
                    else []
                )
                pred = model.forward_frame(case.frames[t], prompts, t, bank)
                probs = torch.softmax(pred.logits.unsqueeze(0), dim=1)
                target = label_to_onehot(case.labels[t], num_ch, dtype=probs.dtype)
                pair = PredictionTargetPair(probs, target, validate=False)
                comp = composite_loss(pair, weights, gamma=config.focal_gamma)
                totals.append(comp.total)
                for key in terms:
                    terms[key] += getattr(comp.breakdown, key) / clip_len
            loss = torch.stack(totals).mean()
            if not torch.isfinite(loss):
                diag_path = out_dir / "abort.json"
                diag = {"step": step, "epoch": epoch, "terms": terms}
                diag_path.write_text(json.dumps(diag, sort_keys=True, indent=2) + "\n")
                log_path.write_text("".join(log_lines))
                raise TrainingAbort(
                    f"non-finite loss at step {step}; last-good checkpoint at {last_path}",
                    checkpoint_path=last_path,
                    diagnostic=diag_path,
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            step += 1
            record = {
                "step": step,
                "focal": terms["focal"],
                "dice": terms["dice"],
                "mae": terms["mae"],
                "ce": terms["ce"],
                "total": weights.focal * terms["focal"]
                + weights.dice * terms["dice"]
                + weights.mae * terms["mae"]
                + weights.ce * terms["ce"],
            }
            log_lines.append(json.dumps(record, sort_keys=True) + "\n")

        if val_cases:
            counts, _, _, _, _ = _evaluate_cases(model, val_cases, interval)
            val_dice = dice_scores(counts).mean
        else:
            val_dice = 0.0
        if val_dice > best_val:
            best_val = val_dice
            _save_model_checkpoint(
                best_path, model, {"phase": "best", "epoch": epoch, "val_mean_dice": val_dice}
            )
        _save_model_checkpoint(last_path, model, {"phase": "last", "epoch": epoch})

    if not best_path.exists():
        _save_model_checkpoint(best_path, model, {"phase": "best", "epoch": -1, "val_mean_dice": 0.0})
    log_path.write_text("".join(log_lines))
    return TrainResult(
        checkpoint_path=best_path,
        last_path=last_path,
        log_path=log_path,
        best_val_dice=best_val,
        steps=step,
    )


# ---------------------------------------------------------------------------
# evaluation / ablation / reporting
# ---------------------------------------------------------------------------


def cmd_eval(
    checkpoint_path: Path,
    dataset_dir: Path,
    split: str = "test",
    out_dir: Optional[Path] = None,
    macro: bool = False,
) -> dict:
    """Evaluate a checkpoint on one split; emits JSON + text reports when out_dir is set."""
    torch.set_num_threads(1)
    model, meta = load_model_checkpoint(checkpoint_path)
    cases = load_split(Path(dataset_dir), split)
    if not cases:
        raise ValidationError(f"split {split!r} of {dataset_dir} is empty")
    interval = model.config.prompt_interval
    counts, prompted, macro_avg, elapsed, frames = _evaluate_cases(
        model, cases, interval, macro=macro
    )
    report = metrics_report(counts, fps=frames / elapsed if elapsed > 0 else None)
    report["split"] = split
    report["cases"] = len(cases)
    try:
        report["prompted_mean_dice"] = dice_scores(prompted).mean
    except ValidationError:
        report["prompted_mean_dice"] = None
    if macro_avg is not None:
        report["macro_mean_dice"] = macro_avg.dice().mean
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / f"report_{split}.json").write_text(
            json.dumps(report, sort_keys=True, indent=2) + "\n"
        )
        (out_dir / f"report_{split}.txt").write_text(format_table(report))
    return report


ABLATION_ROWS = ((False, False), (False, True), (True, False), (True, True))


def cmd_ablate(
    config: ExperimentConfig,
    dataset_dir: Path,
    out_dir: Path,
    seeds: Sequence[int] = (0, 1, 2),
) -> dict:
    """Train and evaluate the 2x2 fusion x augmentation grid with shared seeds."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset_dir = Path(dataset_dir)

    aug_dir = out_dir / "dataset_aug"
    if aug_dir.exists():
        shutil.rmtree(aug_dir)
    shutil.copytree(dataset_dir, aug_dir)
    cmd_augment(config, aug_dir)

    rows = []
    for fusion, augmentation in ABLATION_ROWS:
        per_seed = []
        for seed in seeds:
            run_cfg = replace(
                config,
                seed=seed,
                augmentation_enabled=augmentation,
                model=replace(config.model, fusion_enabled=fusion),
            )
            run_dir = out_dir / f"run_f{int(fusion)}_a{int(augmentation)}_s{seed}"
            result = cmd_train(run_cfg, aug_dir if augmentation else dataset_dir, run_dir)
            report = cmd_eval(result.checkpoint_path, dataset_dir, "test", run_dir)
            per_seed.append(
                {"seed": seed, "mean_dice": report["mean_dice"], "miou": report["miou"]}
            )
        rows.append(
            {
                "fusion": fusion,
                "augmentation": augmentation,
                "runs": per_seed,
                "median_mean_dice": statistics.median(r["mean_dice"] for r in per_seed),
                "median_miou": statistics.median(r["miou"] for r in per_seed),
            }
        )
    grid = {"seeds": list(seeds), "rows": rows}
    (out_dir / "ablation.json").write_text(json.dumps(grid, sort_keys=True, indent=2) + "\n")
    (out_dir / "ablation.txt").write_text(format_ablation_table(grid))
    return grid


def format_ablation_table(grid: dict) -> str:
    lines = ["Feature Fusion | Data Augmentation | mDice  | mIoU"]
    for row in grid["rows"]:
        f = "yes" if row["fusion"] else " - "
        a = "yes" if row["augmentation"] else " - "
        lines.append(
            f"      {f}      |        {a}        | {row['median_mean_dice']:.4f} | {row['median_miou']:.4f}"
        )
    return "\n".join(lines) + "\n"


def cmd_report(input_path: Path, out_dir: Optional[Path] = None, plot: bool = False) -> str:
    """Render a metrics/ablation JSON or a training log as plain text (optional loss plot)."""
    input_path = Path(input_path)
    if input_path.suffix == ".jsonl":
        records = [json.loads(line) for line in input_path.read_text().splitlines() if line]
        if not records:
            raise ValidationError(f"training log {input_path} is empty")
        first, last = records[0], records[-1]
        text = (
            f"steps: {len(records)}\n"
            f"first total: {first['total']:.6f}\n"
            f"last total:  {last['total']:.6f}\n"
        )
        if plot:
            if out_dir is None:
                raise ValidationError("plotting requires an output directory")
            _plot_loss_curve(records, Path(out_dir) / "loss_curve.png")
            text += f"loss curve written to {Path(out_dir) / 'loss_curve.png'}\n"
    else:
        payload = json.loads(input_path.read_text())
        if "rows" in payload:
            text = format_ablation_table(payload)
        else:
            text = format_table(payload)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.txt").write_text(text)
    return text


def _plot_loss_curve(records: List[dict], path: Path):
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError as exc:
        raise ValidationError("matplotlib is required for loss-curve plots") from exc
    steps = [r["step"] for r in records]
    fig, ax = plt.subplots(figsize=(6, 4))
    for key in ("total", "focal", "dice", "mae", "ce"):
        ax.plot(steps, [r[key] for r in records], label=key)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
