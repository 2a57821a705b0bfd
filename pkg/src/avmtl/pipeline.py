"""Stage drivers: prepare-data, train-visual, train-audio-sequence, evaluate.

Output directory layout (all under ``config.out_dir``)::

    prepared/{au_train,au_val,expr_train,expr_val}.csv   cleaned splits
    prepared/videos.json                                   frame/audio references
    prepared/dedup_report.json                             hygiene removals
    stats/{au_stats,expr_stats}.csv                        label balance
    visual/visual.ckpt, visual/history.json
    sequence/sequence.ckpt, sequence/history.json
    eval/<split>/{au,expr}_report.{json,csv}
    eval/<split>/predictions/<video_id>.csv, <video_id>_probs.csv
    manifest.json                                          config, stages, file hashes

Each command holds ``<out_dir>/.lock`` for its whole run.
"""
from __future__ import annotations

import contextlib
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import filelock
import numpy as np
import torch

from .audio import TDNN, MelConfig
from .checkpoint import (
    load_sequence, load_visual, param_hash, save_sequence, save_visual, sha256_file,
)
from .config import PipelineConfig
from .dataset import (
    AU_NAMES, EXPR_NAMES, NUM_EXPR, BalanceStats, DatasetSplit, compute_balance_stats, deduplicate_validation,
    expression_alpha, filter_missing_crops, find_overlap, load_frame_array, merge_auxiliary_au,
    parse_annotations, positive_weights, read_split_manifest, videos_from_json, write_split_manifest,
    write_stats_csv, write_videos_json,
)
from .errors import CheckpointError, ConfigError, ContractError, DataError
from .losses import BCEParams, FocalParams
from .metrics import MetricReport, au_report, expr_report, threshold_au
from .sequence import (
    SequenceModel, SequenceVideo, attach_visual_features, build_sequence_videos, predict_video,
    train_sequence,
)
from .visual import (
    AlternationSchedule, AugmentConfig, LossConfig, OptimizerConfig, TaskData, VisualModel, freeze,
    train_multitask,
)

logger = logging.getLogger(__name__)

SPLIT_NAMES = ("au_train", "expr_train", "au_val", "expr_val")
MANIFEST = "manifest.json"
LOCK = ".lock"

# (video) -> (au_probs (n, 12), expr_probs (n, 7)); lets tests plug in oracle or random predictors
Predictor = Callable[[SequenceVideo], tuple[np.ndarray, np.ndarray]]


# ---------------------------------------------------------------------------
# hashing, manifest, locking


def tree_hash(paths, root: Path | None = None) -> str:
    """Content hash over files (directories are walked), keyed by relative path."""
    files = []
    for p in paths:
        if p is None:
            continue
        p = Path(p)
        if p.is_dir():
            files.extend((f, p) for f in sorted(p.rglob("*")) if f.is_file())
        elif p.is_file():
            files.append((p, p.parent))
    h = hashlib.sha256()
    for f, base in sorted(files, key=lambda fb: str(fb[0])):
        rel = f.relative_to(root if root is not None and f.is_relative_to(root) else base)
        h.update(f"{rel.as_posix()}\0{sha256_file(f)}\n".encode())
    return h.hexdigest()


@dataclass
class RunManifest:
    config: dict
    stages: dict = field(default_factory=dict)
    reports: dict = field(default_factory=dict)
    files: dict = field(default_factory=dict)

    @classmethod
    def load(cls, out_dir: Path, config: PipelineConfig) -> "RunManifest":
        path = out_dir / MANIFEST
        if path.is_file():
            data = json.loads(path.read_text())
            return cls(config.to_dict(), data.get("stages", {}), data.get("reports", {}))
        return cls(config.to_dict())

    def save(self, out_dir: Path) -> None:
        """Rescan ``out_dir`` so every emitted file is listed with its hash, then write."""
        self.files = {
            f.relative_to(out_dir).as_posix(): sha256_file(f)
            for f in sorted(out_dir.rglob("*"))
            if f.is_file() and f.name not in (MANIFEST, LOCK)
        }
        (out_dir / MANIFEST).write_text(json.dumps(asdict(self), indent=1, sort_keys=True) + "\n")


def read_manifest(out_dir: str | Path) -> dict:
    path = Path(out_dir) / MANIFEST
    if not path.is_file():
        raise DataError(f"no manifest in {out_dir}")
    return json.loads(path.read_text())


@contextlib.contextmanager
def run_lock(cfg: PipelineConfig):
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lock = filelock.FileLock(str(out / LOCK), timeout=0)
    try:
        lock.acquire()
    except filelock.Timeout:
        raise ConfigError(f"output directory {out} is locked by another run") from None
    try:
        yield out
    finally:
        lock.release()


def _setup_runtime(cfg: PipelineConfig) -> None:
    # one thread keeps training bit-reproducible; --workers trades that for speed
    torch.set_num_threads(cfg.workers)


def _write_json(path: Path, data) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=1, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# prepare-data


def _require_dir(cfg: PipelineConfig, key: str) -> Path:
    value = getattr(cfg, key)
    if value is None:
        raise ConfigError(f"{key} is not set")
    if not Path(value).is_dir():
        raise DataError(f"{key} does not exist: {value}")
    return Path(value)


def parse_inputs(cfg: PipelineConfig) -> dict[str, DatasetSplit]:
    """Parse the four annotation directories (plus optional auxiliary AU data)."""
    for key in ("train_au_dir", "train_expr_dir", "val_au_dir", "val_expr_dir"):
        _require_dir(cfg, key)
    common = dict(frames_dir=cfg.frames_dir, audio_dir=cfg.audio_dir, fps=cfg.fps)
    splits = {
        "au_train": parse_annotations(cfg.train_au_dir, None, name="au_train", **common),
        "expr_train": parse_annotations(None, cfg.train_expr_dir, name="expr_train", **common),
        "au_val": parse_annotations(cfg.val_au_dir, None, name="au_val", **common),
        "expr_val": parse_annotations(None, cfg.val_expr_dir, name="expr_val", **common),
    }
    if cfg.aux_au_dir is not None:
        aux = parse_annotations(_require_dir(cfg, "aux_au_dir"), None, name="aux", **common)
        splits["au_train"] = merge_auxiliary_au(splits["au_train"], aux)
    return splits


def train_stats(splits: dict[str, DatasetSplit]) -> BalanceStats:
    au = compute_balance_stats(splits["au_train"])
    ex = compute_balance_stats(splits["expr_train"])
    return BalanceStats(au.au_positive_counts, au.au_negative_counts, ex.expr_counts)


def cmd_prepare_data(cfg: PipelineConfig) -> dict:
    """parse -> filter missing crops -> deduplicate validation -> balance stats."""
    with run_lock(cfg) as out:
        splits = parse_inputs(cfg)
        removed_crops, empty_videos = {}, {}
        for name in SPLIT_NAMES:
            before_ids = {a.video_id for a in splits[name].annotations}
            splits[name], removed_crops[name] = filter_missing_crops(splits[name])
            empty_videos[name] = sorted(before_ids - {a.video_id for a in splits[name].annotations})
        overlap = find_overlap(splits["au_train"], splits["au_val"], splits["expr_train"],
                               splits["expr_val"], cfg.dedup_mode)
        before = {name: len(splits[name]) for name in ("au_val", "expr_val")}
        splits["au_val"], splits["expr_val"] = deduplicate_validation(
            splits["au_train"], splits["au_val"], splits["expr_train"], splits["expr_val"], cfg.dedup_mode)
        for name in SPLIT_NAMES:
            if len(splits[name]) == 0:
                raise DataError(f"split {name} is empty after cleaning")
        report = {
            "mode": cfg.dedup_mode,
            "removed": {k: [list(x) if isinstance(x, tuple) else x for x in v] for k, v in overlap.items()},
            "removed_count": {k: len(v) for k, v in overlap.items()},
            "removed_annotations": {k: before[k] - len(splits[k]) for k in before},
            "missing_crops": removed_crops,
            "empty_videos": empty_videos,
        }
        prepared = out / "prepared"
        prepared.mkdir(parents=True, exist_ok=True)
        for name in SPLIT_NAMES:
            write_split_manifest(splits[name], prepared / f"{name}.csv")
        videos = {}
        for split in splits.values():
            videos.update(split.videos)
        write_videos_json(videos.values(), prepared / "videos.json")
        _write_json(prepared / "dedup_report.json", report)
        stats = train_stats(splits)
        (out / "stats").mkdir(exist_ok=True)
        write_stats_csv(stats, out / "stats" / "au_stats.csv", out / "stats" / "expr_stats.csv")

        manifest = RunManifest.load(out, cfg)
        manifest.stages["prepare"] = {
            "input_hash": tree_hash([cfg.train_au_dir, cfg.train_expr_dir, cfg.val_au_dir, cfg.val_expr_dir,
                                     cfg.aux_au_dir, cfg.frames_dir, cfg.audio_dir]),
            "output_hash": tree_hash([prepared], out),
            "counts": {name: len(splits[name]) for name in SPLIT_NAMES},
        }
        manifest.save(out)
        logger.info("prepared splits: %s", manifest.stages["prepare"]["counts"])
        return report


def load_prepared(cfg: PipelineConfig) -> dict[str, DatasetSplit]:
    prepared = Path(cfg.out_dir) / "prepared"
    if not (prepared / "videos.json").is_file():
        raise DataError(f"no prepared data in {prepared}; run prepare-data first")
    videos = videos_from_json(json.loads((prepared / "videos.json").read_text()))
    splits = {}
    for name in SPLIT_NAMES:
        path = prepared / f"{name}.csv"
        if not path.is_file():
            raise DataError(f"missing prepared split {path}")
        splits[name] = read_split_manifest(path, videos, name)
    return splits


def _prepared_hash(cfg: PipelineConfig) -> str:
    return tree_hash([Path(cfg.out_dir) / "prepared"], Path(cfg.out_dir))


def loss_config(cfg: PipelineConfig, stats: BalanceStats) -> LossConfig:
    return LossConfig(BCEParams(positive_weights(stats, cfg.pos_weight_max)),
                      FocalParams(expression_alpha(stats), cfg.focal_gamma))


def stats_table(stats: BalanceStats) -> str:
    lines = ["label      positive  negative"]
    for name, p, n in zip(AU_NAMES, stats.au_positive_counts, stats.au_negative_counts):
        lines.append(f"{name:<10} {p:>8d}  {n:>8d}")
    lines.append("expression    count")
    for name, c in zip(EXPR_NAMES, stats.expr_counts):
        lines.append(f"{name:<12} {c:>6d}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# train-visual


def _task_data(split: DatasetSplit, task: str) -> TaskData:
    anns = [a for a in split.annotations if a.has(task)]
    images = load_frame_array(split, [a.key for a in anns])
    if task == "au":
        labels = np.array([a.au for a in anns], dtype=np.int64).reshape(-1, 12)
    else:
        labels = np.array([a.expr for a in anns], dtype=np.int64)
    return TaskData(images, labels)


def cmd_train_visual(cfg: PipelineConfig) -> dict:
    _setup_runtime(cfg)
    with run_lock(cfg) as out:
        splits = load_prepared(cfg)
        input_hash = _prepared_hash(cfg)
        au_data = _task_data(splits["au_train"], "au")
        expr_data = _task_data(splits["expr_train"], "expression")
        loss_cfg = loss_config(cfg, train_stats(splits))
        schedule = AlternationSchedule(cfg.alternation, cfg.first_task)
        seed = cfg.stage_seed("visual")
        torch.manual_seed(seed)
        model = VisualModel()
        t0 = time.time()
        model, history = train_multitask(
            model, au_data, expr_data, schedule, OptimizerConfig(cfg.visual_lr, cfg.visual_momentum), loss_cfg,
            epochs=cfg.visual_epochs, batch_size=cfg.visual_batch,
            augment_cfg=AugmentConfig() if cfg.augment else None, seed=seed)
        ckpt = out / "visual" / "visual.ckpt"
        digest = save_visual(ckpt, model, schedule, {"seed": seed, "steps": len(history)})
        _write_json(out / "visual" / "history.json", history)
        manifest = RunManifest.load(out, cfg)
        manifest.stages["visual"] = {
            "checkpoint": "visual/visual.ckpt", "checkpoint_hash": digest, "param_hash": param_hash(model),
            "input_hash": input_hash, "steps": len(history), "seconds": round(time.time() - t0, 1),
        }
        manifest.save(out)
        logger.info("visual stage: %d steps, final loss %.4f", len(history), history[-1]["loss"] if history else float("nan"))
        return manifest.stages["visual"]


# ---------------------------------------------------------------------------
# train-audio-sequence


def load_frozen_visual(cfg: PipelineConfig) -> tuple[VisualModel, str]:
    path = Path(cfg.out_dir) / "visual" / "visual.ckpt"
    if not path.is_file():
        raise CheckpointError(f"visual checkpoint not found: {path}; run train-visual first")
    model, _ = load_visual(path)
    return freeze(model), sha256_file(path)


def cmd_train_sequence(cfg: PipelineConfig) -> dict:
    _setup_runtime(cfg)
    with run_lock(cfg) as out:
        visual, visual_digest = load_frozen_visual(cfg)
        visual_params = param_hash(visual)
        splits = load_prepared(cfg)
        input_hash = tree_hash([out / "prepared", out / "visual" / "visual.ckpt"], out)
        stats = train_stats(splits)
        mel_cfg = MelConfig()
        videos = build_sequence_videos([splits["au_train"], splits["expr_train"]], mel_cfg)
        seed = cfg.stage_seed("sequence")
        torch.manual_seed(seed)
        tdnn = TDNN()
        model = SequenceModel(n_heads=cfg.heads, ff_dim=cfg.ff, dropout=cfg.dropout,
                              n_layers=cfg.encoder_layers, positional_encoding=cfg.positional_encoding)
        t0 = time.time()
        tdnn, model, history = train_sequence(
            videos, visual, tdnn, model, AlternationSchedule("batch_by_batch", cfg.first_task),
            OptimizerConfig(cfg.seq_lr, cfg.seq_momentum), loss_config(cfg, stats),
            steps=cfg.seq_steps, window=cfg.window, max_videos=cfg.seq_batch, seed=seed)
        if param_hash(visual) != visual_params or sha256_file(out / "visual" / "visual.ckpt") != visual_digest:
            raise ContractError("visual model changed during sequence training")
        ckpt = out / "sequence" / "sequence.ckpt"
        digest = save_sequence(ckpt, tdnn, model, mel_cfg,
                               {"seed": seed, "steps": len(history), "window": cfg.window,
                                "visual_checkpoint_hash": visual_digest})
        _write_json(out / "sequence" / "history.json", history)
        manifest = RunManifest.load(out, cfg)
        manifest.stages["sequence"] = {
            "checkpoint": "sequence/sequence.ckpt", "checkpoint_hash": digest,
            "visual_checkpoint_hash": visual_digest, "visual_param_hash": visual_params,
            "input_hash": input_hash, "steps": len(history), "seconds": round(time.time() - t0, 1),
        }
        manifest.save(out)
        return manifest.stages["sequence"]


# ---------------------------------------------------------------------------
# evaluate


def model_predictor(visual: VisualModel, tdnn: TDNN, model: SequenceModel, window: int) -> Predictor:
    def predict(video: SequenceVideo):
        attach_visual_features([video], visual)
        au, ex = predict_video(video, tdnn, model, window)
        return au.numpy(), ex.numpy()
    return predict


def oracle_predictor(video: SequenceVideo):
    """Ground truth as probabilities (unlabelled frames get zeros)."""
    return video.au.astype(np.float64), np.eye(NUM_EXPR)[video.expr]


def random_predictor(seed: int = 0) -> Predictor:
    rng = np.random.default_rng(seed)

    def predict(video: SequenceVideo):
        n = len(video)
        return rng.random((n, 12)), rng.dirichlet(np.ones(NUM_EXPR), n)
    return predict


def _write_predictions(dirpath: Path, video: SequenceVideo, au_probs, expr_probs, threshold: float) -> None:
    dirpath.mkdir(parents=True, exist_ok=True)
    au_bin = threshold_au(au_probs, threshold)
    expr_cls = np.argmax(expr_probs, axis=1)
    header = "frame_index," + ",".join(f"au{i + 1}" for i in range(12)) + ",expr\n"
    with open(dirpath / f"{video.video_id}.csv", "w") as fh:
        fh.write(header)
        for f, a, e in zip(video.frame_indices, au_bin, expr_cls):
            fh.write(f"{int(f)}," + ",".join(str(int(v)) for v in a) + f",{int(e)}\n")
    with open(dirpath / f"{video.video_id}_probs.csv", "w") as fh:
        fh.write("frame_index," + ",".join(f"au{i + 1}" for i in range(12)) + ","
                 + ",".join(f"expr{k}" for k in range(NUM_EXPR)) + "\n")
        for f, a, e in zip(video.frame_indices, au_probs, expr_probs):
            fh.write(f"{int(f)}," + ",".join(f"{v:.6f}" for v in a) + "," + ",".join(f"{v:.6f}" for v in e) + "\n")


def score_videos(videos: list[SequenceVideo], predictor: Predictor, threshold: float = 0.5,
                 empty_score: float = 1.0, predictions_dir: Path | None = None,
                 skipped: int = 0) -> tuple[MetricReport, MetricReport]:
    """Predict every video, then score AU / expression over their labelled frames."""
    au_p, au_y, ex_p, ex_y = [], [], [], []
    for v in videos:
        au_probs, expr_probs = (np.asarray(x, dtype=np.float64) for x in predictor(v))
        if au_probs.shape != (len(v), 12) or expr_probs.shape != (len(v), NUM_EXPR):
            raise ContractError(f"{v.video_id}: predictor returned {au_probs.shape}, {expr_probs.shape}")
        if predictions_dir is not None:
            _write_predictions(predictions_dir, v, au_probs, expr_probs, threshold)
        au_p.append(threshold_au(au_probs[v.au_mask], threshold))
        au_y.append(v.au[v.au_mask])
        ex_p.append(np.argmax(expr_probs[v.expr_mask], axis=1))
        ex_y.append(v.expr[v.expr_mask])
    if not videos:
        raise DataError("nothing to evaluate: no video has a labelled frame")
    counts = {"videos": len(videos), "skipped_videos": skipped}
    au = au_report(np.concatenate(au_p).reshape(-1, 12), np.concatenate(au_y).reshape(-1, 12),
                   empty_score, **counts)
    ex = expr_report(np.concatenate(ex_p), np.concatenate(ex_y), empty_score, **counts)
    return au, ex


def evaluation_videos(cfg: PipelineConfig, split: str = "val") -> tuple[list[SequenceVideo], int]:
    """Sequence inputs for ``split``; videos with no valid frame are skipped and counted."""
    if split not in ("train", "val"):
        raise ConfigError(f"split must be train or val, got {split!r}")
    splits = load_prepared(cfg)
    parts = [splits[f"au_{split}"], splits[f"expr_{split}"]]
    report = json.loads((Path(cfg.out_dir) / "prepared" / "dedup_report.json").read_text())
    empty = set()
    for name in (f"au_{split}", f"expr_{split}"):
        empty.update(report.get("empty_videos", {}).get(name, []))
    skipped = sorted(empty - {a.video_id for p in parts for a in p.annotations})
    for vid in skipped:
        logger.warning("%s: no valid frames, skipped", vid)
    return build_sequence_videos(parts, MelConfig()), len(skipped)


def cmd_evaluate(cfg: PipelineConfig, split: str = "val", predictor: Predictor | None = None) -> dict:
    """Full inference and scoring. ``predictor`` overrides the trained checkpoints."""
    _setup_runtime(cfg)
    with run_lock(cfg) as out:
        stage = {"split": split}
        if predictor is None:
            visual, visual_digest = load_frozen_visual(cfg)
            seq_path = out / "sequence" / "sequence.ckpt"
            if not seq_path.is_file():
                raise CheckpointError(f"sequence checkpoint not found: {seq_path}; run train-audio-sequence first")
            tdnn, model, _, meta = load_sequence(seq_path)
            if meta.get("visual_checkpoint_hash") != visual_digest:
                raise CheckpointError("sequence checkpoint was trained on a different visual checkpoint")
            predictor = model_predictor(visual, tdnn, model, int(meta.get("window", cfg.window)))
            stage.update(visual_checkpoint_hash=visual_digest, sequence_checkpoint_hash=sha256_file(seq_path))
        videos, skipped = evaluation_videos(cfg, split)
        eval_dir = out / "eval" / split
        au, ex = score_videos(videos, predictor, cfg.threshold, cfg.degenerate_f1,
                              eval_dir / "predictions", skipped)
        for name, rep in (("au", au), ("expr", ex)):
            (eval_dir / f"{name}_report.json").write_text(rep.to_json())
            (eval_dir / f"{name}_report.csv").write_text(",".join(rep.csv_header()) + "\n" + rep.csv_row())
        manifest = RunManifest.load(out, cfg)
        stage["input_hash"] = _prepared_hash(cfg)
        manifest.stages[f"evaluate_{split}"] = stage
        manifest.reports[split] = {"au": asdict(au), "expression": asdict(ex)}
        manifest.save(out)
        logger.info("%s: AU composite %.4f, expression composite %.4f", split, au.composite, ex.composite)
        return {"au": au, "expression": ex}
