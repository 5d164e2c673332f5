"""Scenario runners, metrics, and report emission.

Scenario 1 sweeps fixed task-information percentages, Scenario 2 adds the
transmitter-side feedback controller, Scenario 3 switches the receiver to a
second task and exercises the region-request round. Bandwidth figures always
come from the channel's payload-bit counters.
"""

from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import dataclass, field, fields

import numpy as np
from skimage.metrics import structural_similarity

from . import checkpoint
from .codec import CodecConfig, CodecModel, LatentGrid, decode, encode, psnr, train_codec
from .errors import DimensionError, IngestionError, TacoError
from .imagecore import Image, LabeledDataset, load_image, load_manifest
from .protocol import (
    Channel,
    MsgType,
    ReceiverState,
    TransmitterState,
    confidence_gate,
    deserialize,
    answer_more_info,
    receive_and_reconstruct,
    region_request_round,
    transmit_round,
)
from .saliency import (
    ClassifierConfig,
    TaskModel,
    gradcam,
    pool_to_latent,
    predict,
    select_top_p,
    train_classifier,
)
from .semcom import (
    DEFAULT_SEARCH_SET,
    LsfDecision,
    RateGeometry,
    context_plus_task_rate_bits,
    context_rate_bits,
    full_latent_rate_bits,
    lsf_select,
)

log = logging.getLogger(__name__)


@dataclass
class RunConfig:
    data_dir: str = "data"
    out_dir: str = "runs/out"
    resolution: int = 64
    codebook_size: int = 512
    embed_dim: int = 64
    f_model: int = 4
    f_ctx: int = 4
    hidden: int = 64
    codec_epochs: int = 60
    codec_lr: float = 1.5e-3
    task_epochs: int = 40
    task_lr: float = 1e-3
    batch_size: int = 16
    search_set: tuple = DEFAULT_SEARCH_SET
    confidence_threshold: float = 0.85
    seed: int = 0
    limit: int = 0  # cap on evaluated test images; 0 = all

    def __post_init__(self):
        if self.resolution % (self.f_model * self.f_ctx):
            raise DimensionError(
                f"resolution {self.resolution} not divisible by "
                f"f_model*f_ctx={self.f_model * self.f_ctx}"
            )

    def codec_config(self) -> CodecConfig:
        return CodecConfig(
            codebook_size=self.codebook_size,
            embed_dim=self.embed_dim,
            f_model=self.f_model,
            hidden=self.hidden,
            learning_rate=self.codec_lr,
            epochs=self.codec_epochs,
            batch_size=self.batch_size,
            resolution=(self.resolution, self.resolution),
            seed=self.seed,
        )

    def classifier_config(self, class_count: int, seed_offset: int = 0) -> ClassifierConfig:
        return ClassifierConfig(
            class_count=class_count,
            epochs=self.task_epochs,
            learning_rate=self.task_lr,
            batch_size=self.batch_size,
            resolution=(self.resolution, self.resolution),
            seed=self.seed + seed_offset,
        )


_TUPLE_KEYS = {"search_set"}


def load_run_config(path: str | None = None, overrides: dict | None = None) -> RunConfig:
    """Flat key=value config file; CLI overrides win over file values."""
    values: dict = {}
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                for line in fh:
                    line = line.split("#", 1)[0].strip()
                    if not line:
                        continue
                    if "=" not in line:
                        raise TacoError(f"{path}: malformed line {line!r}")
                    key, val = (s.strip() for s in line.split("=", 1))
                    values[key] = val
        except OSError as exc:
            raise IngestionError(f"cannot read config {path}: {exc}") from exc
    if overrides:
        values.update({k: v for k, v in overrides.items() if v is not None})

    kwargs = {}
    by_name = {f.name: f for f in fields(RunConfig)}
    for key, val in values.items():
        if key not in by_name:
            raise TacoError(f"unknown config key {key!r}")
        if key in _TUPLE_KEYS:
            if isinstance(val, str):
                val = tuple(int(v) for v in val.replace(",", " ").split())
            kwargs[key] = tuple(val)
        else:
            typ = by_name[key].type
            if isinstance(val, str):
                if typ == "int":
                    val = int(val)
                elif typ == "float":
                    val = float(val)
            kwargs[key] = val
    return RunConfig(**kwargs)


@dataclass
class MetricsRow:
    scenario: str
    mode: str
    accuracy: float
    psnr_db: float
    ssim: float
    bandwidth_kb: float
    rounds: float
    wall_time_s: float
    extra: dict = field(default_factory=dict)


def ssim(x: Image, y: Image) -> float:
    return float(
        structural_similarity(
            x.pixels, y.pixels, channel_axis=0, data_range=2.0
        )
    )


def _test_items(cfg: RunConfig, task: str) -> LabeledDataset:
    ds = load_manifest(os.path.join(cfg.data_dir, f"test_{task}.csv"), _class_count(task), "test")
    if cfg.limit:
        ds.items = ds.items[: cfg.limit]
    return ds


def _class_count(task: str) -> int:
    return 4


def train_codec_cmd(cfg: RunConfig, ckpt_path: str) -> None:
    train_ds = load_manifest(os.path.join(cfg.data_dir, "train_shape.csv"), 4, "train")
    val_ds = load_manifest(os.path.join(cfg.data_dir, "val_shape.csv"), 4, "val")
    model, record = train_codec(train_ds, cfg.codec_config(), val_ds)
    os.makedirs(os.path.dirname(os.path.abspath(ckpt_path)), exist_ok=True)
    checkpoint.save_checkpoint(ckpt_path, "codec", model.config, model.state_dict())
    log.info("codec saved to %s (val PSNR %.2f dB)", ckpt_path, record.val_psnr)


def train_task_cmd(cfg: RunConfig, task: str, ckpt_path: str) -> None:
    train_ds = load_manifest(os.path.join(cfg.data_dir, f"train_{task}.csv"), _class_count(task), "train")
    val_ds = load_manifest(os.path.join(cfg.data_dir, f"val_{task}.csv"), _class_count(task), "val")
    seed_offset = 0 if task == "shape" else 1
    model, record = train_classifier(
        train_ds, cfg.classifier_config(_class_count(task), seed_offset), val_ds
    )
    os.makedirs(os.path.dirname(os.path.abspath(ckpt_path)), exist_ok=True)
    checkpoint.save_checkpoint(ckpt_path, "classifier", model.config, model.state_dict())
    log.info("classifier %s saved to %s (val acc %.3f)", task, ckpt_path, record.val_accuracy)


def load_codec(path: str) -> CodecModel:
    cfg_dict, state = checkpoint.load_checkpoint(path, "codec")
    cfg_dict["resolution"] = tuple(cfg_dict["resolution"])
    model = CodecModel(CodecConfig(**cfg_dict))
    model.load_state_dict(state)
    model.eval()
    return model

def load_task(path: str) -> TaskModel:
    cfg_dict, state = checkpoint.load_checkpoint(path, "classifier")
    cfg_dict["resolution"] = tuple(cfg_dict["resolution"])
    model = TaskModel(ClassifierConfig(**cfg_dict))
    model.load_state_dict(state)
    model.eval()
    return model


def _fixed_decision(
    mode: str, p: float | None, geom: RateGeometry, k: int, importance
) -> LsfDecision:
    if mode == "zeta":
        return LsfDecision("context_only", None, context_rate_bits(geom, k), False)
    if mode == "full":
        return LsfDecision(
            "full_latent", 100, full_latent_rate_bits(geom, k), True
        )
    selected = select_top_p(importance, p)
    return LsfDecision(
        "context_plus_task", p,
        context_plus_task_rate_bits(geom, k, len(selected)), True, selected,
    )


def _one_transmission(codec, task, x, decision, f_ctx, search_set):
    """Run one message through the channel; returns (x_hat, payload_bits)."""
    ch = Channel()
    tx = TransmitterState(
        codec=codec, task=task, x=x, importance=None,
        f_ctx=f_ctx, search_set=tuple(search_set),
    )
    transmit_round(tx, decision, ch)
    rx = ReceiverState(codec=codec, task=task, f_ctx=f_ctx)
    x_hat = receive_and_reconstruct(rx, ch.recv("rx"))
    return x_hat, ch.sent_bits["tx"]


def run_scenario1(cfg: RunConfig, codec: CodecModel, task: TaskModel) -> list[MetricsRow]:
    """Fixed-percentage sweep: context only, each p, full latent."""
    ds = _test_items(cfg, "shape")
    k = codec.config.codebook_size
    geom = RateGeometry.from_image(cfg.resolution, cfg.resolution, cfg.f_model, cfg.f_ctx)
    fixed_ps = [p for p in cfg.search_set if p < 100]
    modes = [("zeta", None)] + [(f"zeta+{p}%", p) for p in fixed_ps] + [("full", 100)]

    # precompute per-image saliency once; it is shared by every mode
    images, labels, grids = [], [], []
    for path, label in ds.items:
        x = load_image(path, cfg.resolution, cfg.resolution)
        images.append(x)
        labels.append(label)
        grids.append(pool_to_latent(gradcam(task, x), cfg.f_model))

    rows = []
    for mode, p in modes:
        t0 = time.perf_counter()
        correct, psnrs, ssims, bits = 0, [], [], 0
        kind = mode if mode in ("zeta", "full") else "p"
        for x, label, grid in zip(images, labels, grids):
            decision = _fixed_decision(kind, p, geom, k, grid)
            x_hat, sent = _one_transmission(codec, task, x, decision, cfg.f_ctx, cfg.search_set)
            bits += sent
            correct += int(predict(task, x_hat)[0] == label)
            psnrs.append(psnr(x, x_hat))
            ssims.append(ssim(x, x_hat))
        n = len(images)
        rows.append(
            MetricsRow(
                scenario="1", mode=mode,
                accuracy=correct / n,
                psnr_db=float(np.mean(psnrs)),
                ssim=float(np.mean(ssims)),
                bandwidth_kb=bits / n / 8192.0,
                rounds=1.0,
                wall_time_s=time.perf_counter() - t0,
            )
        )
        log.info("scenario1 %s: acc %.3f, %.3f KB", mode, rows[-1].accuracy, rows[-1].bandwidth_kb)
    return rows


def run_scenario2(cfg: RunConfig, codec: CodecModel, task: TaskModel) -> list[MetricsRow]:
    """Feedback-controlled transmission on the same split as Scenario 1."""
    ds = _test_items(cfg, "shape")
    t0 = time.perf_counter()
    correct, psnrs, ssims, bits = 0, [], [], 0
    decisions = []
    for path, label in ds.items:
        x = load_image(path, cfg.resolution, cfg.resolution)
        grid = pool_to_latent(gradcam(task, x), cfg.f_model)
        decision = lsf_select(codec, task, x, grid, cfg.search_set, cfg.f_ctx)
        x_hat, sent = _one_transmission(codec, task, x, decision, cfg.f_ctx, cfg.search_set)
        decisions.append(decision)
        bits += sent
        correct += int(predict(task, x_hat)[0] == label)
        psnrs.append(psnr(x, x_hat))
        ssims.append(ssim(x, x_hat))
    n = len(ds.items)
    row = MetricsRow(
        scenario="2", mode="lsf",
        accuracy=correct / n,
        psnr_db=float(np.mean(psnrs)),
        ssim=float(np.mean(ssims)),
        bandwidth_kb=bits / n / 8192.0,
        rounds=1.0,
        wall_time_s=time.perf_counter() - t0,
        extra={
            "mode_counts": {
                m: sum(1 for d in decisions if d.mode == m)
                for m in ("context_only", "context_plus_task", "full_latent")
            },
            "chosen_p": [d.p for d in decisions],
        },
    )
    log.info("scenario2 lsf: acc %.3f, %.3f KB", row.accuracy, row.bandwidth_kb)
    return [row]


def roi_box(saliency_map: np.ndarray, frac: float = 0.5, min_size: int = 4) -> tuple[int, int, int, int]:
    """Half-open bounding box of the saliency region above frac of the peak."""
    peak = saliency_map.max()
    if peak <= 0:
        h, w = saliency_map.shape
        return (0, 0, min(min_size, h), min(min_size, w))
    rows, cols = np.nonzero(saliency_map >= frac * peak)
    r0, r1 = int(rows.min()), int(rows.max()) + 1
    c0, c1 = int(cols.min()), int(cols.max()) + 1
    if r1 - r0 < min_size:
        r1 = min(saliency_map.shape[0], r0 + min_size)
    if c1 - c0 < min_size:
        c1 = min(saliency_map.shape[1], c0 + min_size)
    return (r0, c0, r1, c1)


def run_scenario3(
    cfg: RunConfig, codec: CodecModel, task_a: TaskModel, task_b: TaskModel
) -> list[MetricsRow]:
    """LSF tuned to task A; receiver switches to task B and requests one region."""
    ds = _test_items(cfg, "glyph")
    t0 = time.perf_counter()
    before_correct, after_correct = [], []
    bits_initial, bits_feedback, req_bytes = 0, 0, []
    rounds = []
    for path, label_b in ds.items:
        x = load_image(path, cfg.resolution, cfg.resolution)
        grid = pool_to_latent(gradcam(task_a, x), cfg.f_model)
        decision = lsf_select(codec, task_a, x, grid, cfg.search_set, cfg.f_ctx)
        ch = Channel()
        tx = TransmitterState(
            codec=codec, task=task_a, x=x, importance=grid,
            f_ctx=cfg.f_ctx, search_set=tuple(cfg.search_set),
        )
        transmit_round(tx, decision, ch)
        rx = ReceiverState(
            codec=codec, task=task_b, f_ctx=cfg.f_ctx,
            confidence_threshold=cfg.confidence_threshold,
        )
        x_hat = receive_and_reconstruct(rx, ch.recv("rx"))
        bits_initial += ch.sent_bits["tx"]
        pred_b, probs_b = predict(task_b, x_hat)
        before_correct.append(int(pred_b == label_b))
        n_rounds = 1
        after = before_correct[-1]
        if float(probs_b.max()) < cfg.confidence_threshold and not tx.sent_full:
            pre_bits = ch.sent_bits["tx"]
            box = roi_box(gradcam(task_b, x_hat))
            x_hat2 = region_request_round(rx, tx, box, ch)
            bits_feedback += ch.sent_bits["tx"] - pre_bits
            req_bytes.append(ch.sent_bits["rx"] // 8)
            after = int(predict(task_b, x_hat2)[0] == label_b)
            n_rounds = 2
        after_correct.append(after)
        rounds.append(n_rounds)
    n = len(ds.items)
    elapsed = time.perf_counter() - t0
    rows = [
        MetricsRow(
            scenario="3", mode="before_feedback",
            accuracy=float(np.mean(before_correct)),
            psnr_db=float("nan"), ssim=float("nan"),
            bandwidth_kb=bits_initial / n / 8192.0,
            rounds=1.0, wall_time_s=elapsed,
        ),
        MetricsRow(
            scenario="3", mode="after_feedback",
            accuracy=float(np.mean(after_correct)),
            psnr_db=float("nan"), ssim=float("nan"),
            bandwidth_kb=(bits_initial + bits_feedback) / n / 8192.0,
            rounds=float(np.mean(rounds)), wall_time_s=elapsed,
            extra={
                "request_bytes": sorted(set(req_bytes)),
                "feedback_sessions": len(req_bytes),
                "improved": int(np.sum(np.array(after_correct) > np.array(before_correct))),
                "regressed": int(np.sum(np.array(after_correct) < np.array(before_correct))),
            },
        ),
    ]
    log.info(
        "scenario3: acc %.3f -> %.3f", rows[0].accuracy, rows[1].accuracy
    )
    return rows


_CSV_FIELDS = ("scenario", "mode", "accuracy", "psnr_db", "ssim", "bandwidth_kb", "rounds")


def emit_report(rows: list[MetricsRow], out_dir: str, seed: int, plots: bool = False) -> dict:
    """Write metrics.csv and report.json; optionally rate/accuracy plots."""
    if not rows:
        raise TacoError("no metrics rows to report")
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "metrics.csv")
    try:
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            fh.write(",".join(_CSV_FIELDS) + "\n")
            for r in rows:
                fh.write(
                    f"{r.scenario},{r.mode},{r.accuracy:.6f},{r.psnr_db:.4f},"
                    f"{r.ssim:.6f},{r.bandwidth_kb:.6f},{r.rounds:.3f}\n"
                )
        report = {
            "seed": seed,
            "rows": [
                {f: _json_safe(getattr(r, f)) for f in _CSV_FIELDS}
                | {"wall_time_s": r.wall_time_s, "extra": r.extra}
                for r in rows
            ],
        }
        with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=2, default=_json_safe)
    except OSError as exc:
        raise TacoError(f"cannot write report to {out_dir}: {exc}") from exc
    if plots:
        _plot_rate_accuracy(rows, out_dir)
    return report


def _json_safe(obj):
    if isinstance(obj, (float, np.floating)) and math.isnan(obj):
        return None
    if isinstance(obj, (np.integer, np.floating)):
        return obj.item()
    if isinstance(obj, (int, float, str)) or obj is None:
        return obj
    raise TypeError(f"not JSON serializable: {type(obj)}")


def _plot_rate_accuracy(rows, out_dir):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plot_dir = os.path.join(out_dir, "plots")
    os.makedirs(plot_dir, exist_ok=True)
    fig, ax = plt.subplots(figsize=(5, 4))
    for r in rows:
        ax.scatter(r.bandwidth_kb, r.accuracy, label=f"{r.scenario}:{r.mode}")
    ax.set_xlabel("bandwidth (KB)")
    ax.set_ylabel("accuracy")
    ax.legend(fontsize=6)
    fig.tight_layout()
    fig.savefig(os.path.join(plot_dir, "rate_accuracy.png"), dpi=120)
    plt.close(fig)


def inspect_message(path: str) -> dict:
    """Summarize one serialized message read from a binary file."""
    with open(path, "rb") as fh:
        raw = fh.read()
    msg = deserialize(raw)
    return {
        "type": MsgType(msg.msg_type).name,
        "grid": [msg.grid_h, msg.grid_w],
        "index_bits": msg.index_bits,
        "f_ctx": msg.f_ctx,
        "context_cells": len(msg.ctx_indices),
        "patch_cells": len(msg.positions),
        "box": list(msg.box) if msg.box else None,
        "payload_bits": msg.payload_bits(),
        "wire_bytes": len(raw),
    }
