"""Experiment orchestration: training, evaluation, attack sweeps, ablations.

Every command writes into an output directory and finishes by writing
``manifest.json`` with the SHA-256 of every file it emitted.  Runs are
fully determined by the config (including its seed).

Config files are INI-style::

    [data]
    path =                 # dataset directory; empty means synthesize
    kind = lung-like
    count = 250
    side = 64
    noise_level = 12
    test_fraction = 0.2

    [model]
    variant = full
    stage_channels = 8,16,32,64
    blocks_per_stage = 1,1,1,1
    pyramid_width = 32
    codewords = 32

    [train]
    epochs = 30
    finetune_epochs = 15
    batch_size = 8
    lr = 0.001
    lr_floor = 0.0001
    lr_decay = 0.9
    patience = 3
    weight_decay = 0.0001
    beta1 = 0.9
    beta2 = 0.999
    augment = auto         # auto: only for 3-channel (lesion-like) data

    [attack]
    intensities = 0.5,1,2,...,32
    alpha = 1
    batch_size = 25

    [run]
    seed = 0
    out = runs/default
"""
from __future__ import annotations

import configparser
import csv
import hashlib
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

from .attack import DEFAULT_INTENSITIES, SweepRow, sweep, write_sweep_csv
from .checkpoint import load_checkpoint, save_checkpoint
from .data import SampleRecord, SyntheticConfig, load_dataset, save_dataset, split, synth_generate, to_arrays
from .metrics import per_image_scores
from .nn import checksum
from .segnet import VARIANTS, BackboneConfig, ModelConfig, NLCEN, predict
from .train import EpochLog, TrainSettings, is_nlce_param, train_model

log = logging.getLogger(__name__)

CHECKPOINT = "checkpoint.nlck"
ABLATION_MODELS = ("no-nlce", "no-nl", "no-ce", "full", "full-finetuned")


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(v) for v in s.replace(" ", "").split(",") if v)


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(v) for v in s.replace(" ", "").split(",") if v)


def parse_intensities(s: str) -> tuple[float, ...]:
    vals = _floats(s)
    if any(v <= 0 for v in vals):
        raise ValueError(f"intensities must be positive: {s!r}")
    return vals


@dataclass
class ExperimentConfig:
    data_path: str = ""
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    variant: str = "full"
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    pyramid_width: int = 32
    codewords: int = 32
    train: TrainSettings = field(default_factory=TrainSettings)
    augment: str = "auto"
    finetune_epochs: int = 15
    intensities: tuple[float, ...] = DEFAULT_INTENSITIES
    alpha: float = 1.0
    attack_batch: int = 25
    seed: int = 0
    out: str = "runs/default"

    def model_config(self, variant: str | None = None, in_channels: int | None = None) -> ModelConfig:
        bb = self.backbone
        if in_channels is not None and in_channels != bb.in_channels:
            bb = replace(bb, in_channels=in_channels)
        return ModelConfig(backbone=bb, variant=variant or self.variant, pyramid_width=self.pyramid_width,
                           codewords=self.codewords, seed=self.seed)

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        s = self.synthetic
        cp["data"] = {"path": self.data_path, "kind": s.kind, "count": str(s.count), "side": str(s.side),
                      "noise_level": repr(s.noise_level), "test_fraction": repr(s.test_fraction)}
        cp["model"] = {"variant": self.variant,
                       "stage_channels": ",".join(map(str, self.backbone.stage_channels)),
                       "blocks_per_stage": ",".join(map(str, self.backbone.blocks_per_stage)),
                       "pyramid_width": str(self.pyramid_width), "codewords": str(self.codewords)}
        t = self.train
        cp["train"] = {"epochs": str(t.epochs), "finetune_epochs": str(self.finetune_epochs),
                       "batch_size": str(t.batch_size), "lr": repr(t.lr), "lr_floor": repr(t.lr_floor),
                       "lr_decay": repr(t.lr_decay), "patience": str(t.patience),
                       "weight_decay": repr(t.weight_decay), "beta1": repr(t.beta1), "beta2": repr(t.beta2),
                       "augment": self.augment}
        cp["attack"] = {"intensities": ",".join(repr(v) for v in self.intensities), "alpha": repr(self.alpha),
                        "batch_size": str(self.attack_batch)}
        cp["run"] = {"seed": str(self.seed), "out": self.out}
        lines = []
        for sec in cp.sections():
            lines.append(f"[{sec}]")
            lines.extend(f"{k} = {v}" for k, v in cp[sec].items())
            lines.append("")
        return "\n".join(lines)


def load_config(path=None, **overrides) -> ExperimentConfig:
    """Read an INI config (missing keys keep defaults), then apply overrides.

    Recognised overrides: ``seed``, ``out``, ``variant``, ``intensities``.
    """
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    if path is not None:
        if not Path(path).exists():
            raise FileNotFoundError(f"config file not found: {path}")
        cp.read(path)
    d = cp["data"] if cp.has_section("data") else {}
    m = cp["model"] if cp.has_section("model") else {}
    t = cp["train"] if cp.has_section("train") else {}
    a = cp["attack"] if cp.has_section("attack") else {}
    r = cp["run"] if cp.has_section("run") else {}
    seed = int(overrides.get("seed") if overrides.get("seed") is not None else r.get("seed", 0))
    defaults = TrainSettings()
    train = TrainSettings(
        epochs=int(t.get("epochs", defaults.epochs)),
        batch_size=int(t.get("batch_size", defaults.batch_size)),
        lr=float(t.get("lr", defaults.lr)),
        lr_floor=float(t.get("lr_floor", defaults.lr_floor)),
        lr_decay=float(t.get("lr_decay", defaults.lr_decay)),
        patience=int(t.get("patience", defaults.patience)),
        weight_decay=float(t.get("weight_decay", defaults.weight_decay)),
        beta1=float(t.get("beta1", defaults.beta1)),
        beta2=float(t.get("beta2", defaults.beta2)),
    )
    sd = SyntheticConfig()
    synthetic = SyntheticConfig(
        kind=d.get("kind", sd.kind), count=int(d.get("count", sd.count)), side=int(d.get("side", sd.side)),
        noise_level=float(d.get("noise_level", sd.noise_level)), seed=seed,
        test_fraction=float(d.get("test_fraction", sd.test_fraction)),
    )
    bd = BackboneConfig()
    backbone = BackboneConfig(
        stage_channels=_ints(m.get("stage_channels", "")) or bd.stage_channels,
        blocks_per_stage=_ints(m.get("blocks_per_stage", "")) or bd.blocks_per_stage,
        input_hw=synthetic.side,
        in_channels=3 if synthetic.kind == "lesion-like" else 1,
    )
    intensities = overrides.get("intensities")
    if intensities is None:
        intensities = parse_intensities(a["intensities"]) if "intensities" in a else DEFAULT_INTENSITIES
    variant = overrides.get("variant") or m.get("variant", "full")
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {', '.join(VARIANTS)}")
    augment = t.get("augment", "auto")
    if augment not in ("auto", "true", "false"):
        raise ValueError(f"train.augment must be auto, true or false, got {augment!r}")
    return ExperimentConfig(
        data_path=d.get("path", ""),
        synthetic=synthetic,
        variant=variant,
        backbone=backbone,
        pyramid_width=int(m.get("pyramid_width", 32)),
        codewords=int(m.get("codewords", 32)),
        train=train,
        augment=augment,
        finetune_epochs=int(t.get("finetune_epochs", 15)),
        intensities=tuple(intensities),
        alpha=float(a.get("alpha", 1.0)),
        attack_batch=int(a.get("batch_size", 25)),
        seed=seed,
        out=overrides.get("out") or r.get("out", "runs/default"),
    )


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def resolve_dataset(cfg: ExperimentConfig, path=None) -> list[SampleRecord]:
    path = path or cfg.data_path
    if path:
        return load_dataset(path)
    return synth_generate(cfg.synthetic)


def _channels(records: list[SampleRecord]) -> int:
    return records[0].image.shape[2]


def _settings(cfg: ExperimentConfig, records: list[SampleRecord], epochs: int | None = None) -> TrainSettings:
    aug = cfg.augment == "true" or (cfg.augment == "auto" and _channels(records) == 3)
    return replace(cfg.train, augment=aug, epochs=cfg.train.epochs if epochs is None else epochs)


def sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out: Path, files: Sequence[Path]) -> Path:
    entries = {str(Path(f).relative_to(out)): sha256(f) for f in sorted(set(map(Path, files)))}
    path = out / "manifest.json"
    path.write_text(json.dumps({"files": entries}, indent=2, sort_keys=True) + "\n")
    return path


def write_train_log(logs: Sequence[EpochLog], path) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss", "dic", "lr"])
        for e in logs:
            w.writerow([e.epoch, f"{e.loss:.6f}", f"{e.dic:.6f}", f"{e.lr:.6f}"])
    return path


def svg_curves(series: dict[str, Sequence[tuple[float, float]]], path, title: str = "",
               x_max: float = 32.0, y_label: str = "metric") -> Path:
    """Line chart with fixed axes x in [0, x_max], y in [0, 1]; one polyline per series."""
    W, H, L, R, T, B = 480, 320, 50, 130, 30, 40
    pw, ph = W - L - R, H - T - B
    colours = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"]

    def px(x):
        return L + pw * min(max(x, 0.0), x_max) / x_max

    def py(y):
        return T + ph * (1.0 - min(max(y, 0.0), 1.0))

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
           f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
           f'<text x="{W / 2:.1f}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>',
           f'<line x1="{L}" y1="{T + ph}" x2="{L + pw}" y2="{T + ph}" stroke="black"/>',
           f'<line x1="{L}" y1="{T}" x2="{L}" y2="{T + ph}" stroke="black"/>']
    for v in range(0, int(x_max) + 1, 4):
        out.append(f'<text x="{px(v):.1f}" y="{T + ph + 15}" text-anchor="middle" font-size="10">{v}</text>')
    for v in np.linspace(0, 1, 6):
        out.append(f'<text x="{L - 6}" y="{py(v) + 3:.1f}" text-anchor="end" font-size="10">{v:.1f}</text>')
    out.append(f'<text x="{L + pw / 2:.1f}" y="{H - 6}" text-anchor="middle" font-size="11">epsilon</text>')
    out.append(f'<text x="12" y="{T + ph / 2:.1f}" font-size="11" transform="rotate(-90 12 {T + ph / 2:.1f})" '
               f'text-anchor="middle">{escape(y_label)}</text>')
    for i, (label, pts) in enumerate(series.items()):
        c = colours[i % len(colours)]
        coords = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in pts)
        out.append(f'<polyline fill="none" stroke="{c}" stroke-width="1.5" points="{coords}"/>')
        ly = T + 12 + 16 * i
        out.append(f'<line x1="{L + pw + 10}" y1="{ly}" x2="{L + pw + 28}" y2="{ly}" stroke="{c}" stroke-width="2"/>')
        out.append(f'<text x="{L + pw + 32}" y="{ly + 4}" font-size="11">{escape(label)}</text>')
    out.append("</svg>")
    path = Path(path)
    path.write_text("\n".join(out) + "\n", encoding="utf-8")
    return path


def build_model(cfg: ExperimentConfig, variant: str | None = None, in_channels: int | None = None) -> NLCEN:
    return NLCEN(cfg.model_config(variant, in_channels))


def load_model(cfg: ExperimentConfig, checkpoint, in_channels: int | None = None, variant: str | None = None) -> NLCEN:
    model = build_model(cfg, variant, in_channels)
    model.load_state_dict(load_checkpoint(checkpoint), strict=True)
    model.eval()
    return model


def _test_arrays(records: list[SampleRecord]) -> tuple[np.ndarray, np.ndarray, list[str]]:
    test = split(records, "test")
    if not test:
        raise ValueError("dataset has no test split")
    images, masks = to_arrays(test)
    return images, masks, [r.id for r in test]


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


@dataclass
class RunArtifacts:
    out: Path
    checkpoint: Path | None = None
    train_log: Path | None = None
    metrics: Path | None = None
    sweep: Path | None = None
    plots: list[Path] = field(default_factory=list)
    extra: list[Path] = field(default_factory=list)
    manifest: Path | None = None

    def files(self) -> list[Path]:
        fs = [self.checkpoint, self.train_log, self.metrics, self.sweep, *self.plots, *self.extra]
        return [f for f in fs if f is not None]


def cmd_synth(cfg: ExperimentConfig, out=None) -> Path:
    root = Path(out or cfg.out)
    records = synth_generate(cfg.synthetic)
    save_dataset(records, root)
    return root


def cmd_train(cfg: ExperimentConfig) -> RunArtifacts:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    records = resolve_dataset(cfg)
    train = split(records, "train")
    if not train:
        raise ValueError("dataset has no training split")
    model = build_model(cfg, in_channels=_channels(train))
    logs = train_model(model, train, _settings(cfg, train), seed=cfg.seed)
    art = RunArtifacts(out)
    art.checkpoint = save_checkpoint(out / CHECKPOINT, model.state_dict())
    art.train_log = write_train_log(logs, out / "train_log.csv")
    cfg_path = out / "config.ini"
    cfg_path.write_text(cfg.to_ini())
    art.extra.append(cfg_path)
    art.manifest = write_manifest(out, art.files())
    return art


def write_metrics_csv(ids, dics, jscs, path) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "dic", "jsc"])
        for i, d, j in zip(ids, dics, jscs):
            w.writerow([i, f"{d:.6f}", f"{j:.6f}"])
        w.writerow(["mean", f"{np.mean(dics):.6f}", f"{np.mean(jscs):.6f}"])
    return path


def evaluate(model, images, masks) -> tuple[np.ndarray, np.ndarray]:
    """Per-image clean DIC/JSC.  ``model`` may also be a plain callable images -> masks."""
    preds = predict(model, images) if isinstance(model, NLCEN) else np.asarray(model(images))
    return per_image_scores(preds, masks)


def cmd_eval(cfg: ExperimentConfig, checkpoint=None, dataset=None) -> RunArtifacts:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    records = resolve_dataset(cfg, dataset)
    images, masks, ids = _test_arrays(records)
    model = load_model(cfg, checkpoint or out / CHECKPOINT, in_channels=images.shape[1])
    d, j = evaluate(model, images, masks)
    art = RunArtifacts(out, metrics=write_metrics_csv(ids, d, j, out / "metrics.csv"))
    art.manifest = write_manifest(out, art.files())
    return art


def sweep_plot(rows: Sequence[SweepRow], path, title: str) -> Path:
    return svg_curves({"DIC": [(r.epsilon, r.dic) for r in rows], "JSC": [(r.epsilon, r.jsc) for r in rows]},
                      path, title=title)


def cmd_sweep(cfg: ExperimentConfig, checkpoint=None, dataset=None) -> RunArtifacts:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    records = resolve_dataset(cfg, dataset)
    images, masks, _ = _test_arrays(records)
    model = load_model(cfg, checkpoint or out / CHECKPOINT, in_channels=images.shape[1])
    rows = sweep(model, images, masks, cfg.intensities, cfg.alpha, cfg.attack_batch)
    art = RunArtifacts(out, sweep=write_sweep_csv(rows, out / "sweep.csv"))
    art.plots.append(sweep_plot(rows, out / "sweep.svg", f"{cfg.variant}: accuracy under attack"))
    art.manifest = write_manifest(out, art.files())
    return art


@dataclass
class AblationResult:
    artifacts: RunArtifacts
    rows: dict[str, list[SweepRow]]
    models: dict[str, NLCEN]
    logs: dict[str, list[EpochLog]]
    base_checksums: dict[str, tuple[str, str]]  # stage -> (before, after) over non-NLCE state


def _non_nlce_state(model: NLCEN) -> dict[str, np.ndarray]:
    return {k: v for k, v in model.state_dict().items() if not is_nlce_param(k)}


def cmd_ablate(cfg: ExperimentConfig) -> AblationResult:
    """Base training, three frozen fine-tunes, one unfrozen fine-tune, sweeps.

    1. train the model without encoder blocks;
    2. for no-nl, no-ce and full: copy the base weights, train only the
       ``nlce*`` parameters (base layers frozen, batch-norm statistics too);
    3. fine-tune the full model from step 2 with nothing frozen;
    4. sweep all five models and write a combined comparison CSV.
    """
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    records = resolve_dataset(cfg)
    train = split(records, "train")
    images, masks, _ = _test_arrays(records)
    ch = _channels(train)
    art = RunArtifacts(out)
    models: dict[str, NLCEN] = {}
    logs: dict[str, list[EpochLog]] = {}
    checks: dict[str, tuple[str, str]] = {}

    base = build_model(cfg, "no-nlce", ch)
    logs["no-nlce"] = train_model(base, train, _settings(cfg, train), seed=cfg.seed)
    models["no-nlce"] = base
    base_state = base.state_dict()

    ft = _settings(cfg, train, cfg.finetune_epochs)
    for i, variant in enumerate(("no-nl", "no-ce", "full"), start=1):
        m = build_model(cfg, variant, ch)
        m.load_state_dict(base_state, strict=False)
        before = checksum(_non_nlce_state(m))
        logs[variant] = train_model(m, train, ft, seed=cfg.seed + 1000 * i, trainable=is_nlce_param)
        checks[variant] = (before, checksum(_non_nlce_state(m)))
        models[variant] = m

    tuned = build_model(cfg, "full", ch)
    tuned.load_state_dict(models["full"].state_dict())
    logs["full-finetuned"] = train_model(tuned, train, ft, seed=cfg.seed + 4000)
    models["full-finetuned"] = tuned

    rows: dict[str, list[SweepRow]] = {}
    for name in ABLATION_MODELS:
        sub = out / name
        sub.mkdir(exist_ok=True)
        art.extra.append(save_checkpoint(sub / CHECKPOINT, models[name].state_dict()))
        art.extra.append(write_train_log(logs[name], sub / "train_log.csv"))
        rows[name] = sweep(models[name], images, masks, cfg.intensities, cfg.alpha, cfg.attack_batch)
        art.extra.append(write_sweep_csv(rows[name], sub / "sweep.csv"))

    combined = out / "ablation.csv"
    with combined.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "epsilon", "dic", "jsc", "n_images"])
        for k in range(len(rows["no-nlce"])):
            for name in ABLATION_MODELS:
                r = rows[name][k]
                w.writerow([name, f"{r.epsilon:.6f}", f"{r.dic:.6f}", f"{r.jsc:.6f}", r.n_images])
    art.sweep = combined
    art.plots.append(svg_curves({n: [(r.epsilon, r.dic) for r in rows[n]] for n in ABLATION_MODELS},
                                out / "ablation.svg", title="Ablation: DIC under attack", y_label="DIC"))
    cfg_path = out / "config.ini"
    cfg_path.write_text(cfg.to_ini())
    art.extra.append(cfg_path)
    art.manifest = write_manifest(out, art.files())
    return AblationResult(art, rows, models, logs, checks)
