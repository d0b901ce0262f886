"""End-to-end pipeline: features, pretraining, fine-tuning, prediction,
post-processing and evaluation, each stage reading and writing files in
one output directory so stages can be resumed independently.

Output layout::

    <out>/features/stack.{hdr,bin}   normalized bands (NDVI appended)
    <out>/features/annotations.{hdr,bin}
    <out>/features/truth.{hdr,bin}   mask used for binary evaluation
    <out>/features/split.npz         labeled/unlabeled/test pixel indices
    <out>/features/norm.json
    <out>/pretrain/model.bin         pretrained encoders + warmed-up head
    <out>/pretrain/history.csv
    <out>/engines/<engine>.npz       cached soft targets
    <out>/<loss>/model.bin           fine-tuned model
    <out>/<loss>/history.csv
    <out>/<loss>/pred.{hdr,bin}      predicted classes for every pixel
    <out>/<loss>/buildings.{hdr,bin} post-processed building mask
    <out>/<loss>/metrics.json, metrics.txt
    <out>/<loss>/run_report.json     timings and engine diagnostics
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from filelock import FileLock, Timeout

from . import features as feat
from . import nn
from .losses import LOSS_KINDS, ENGINES, SSLConfig, SoftTargets, assemble_targets
from .postprocess import confusion, metrics, postprocess_buildings
from .raster_io import (
    LabelMask,
    load_annotations,
    load_band_stack,
    load_label_mask,
    load_model,
    rasterize_annotations,
    save_band_stack,
    save_label_mask,
    save_model,
)

log = logging.getLogger(__name__)

__all__ = [
    "PostConfig",
    "PipelineConfig",
    "StageError",
    "STAGES",
    "run_stage",
    "run_pipeline",
    "compare_runs",
]

STAGES = ("features", "pretrain", "finetune", "predict", "postprocess", "evaluate")


class StageError(RuntimeError):
    pass


@dataclass
class PostConfig:
    radius: int = 21
    window: int = 7
    vote_shape: str = "disc"


def _train_cfg(d, **defaults):
    d = {**defaults, **(d or {})}
    d.pop("seed", None)
    return nn.TrainConfig(**d)


@dataclass
class PipelineConfig:
    bands: str = None
    labels: str = None
    annotations: str = None
    truth: str = None
    ndsm: str = None
    out: str = "run"
    seed: int = 0
    loss: str = "mse"
    ratios: tuple = feat.DEFAULT_RATIOS
    patch: int = 15
    encoder_dims: tuple = (400, 80)
    hidden: int = 27
    dtype: str = "float32"
    pretrain_max_rows: int = 20000
    warmup_epochs: int = 5
    pretrain: nn.TrainConfig = field(default_factory=lambda: nn.TrainConfig(lr=0.05))
    finetune: nn.TrainConfig = field(default_factory=nn.TrainConfig)
    ssl: SSLConfig = field(default_factory=SSLConfig)
    post: PostConfig = field(default_factory=PostConfig)

    @classmethod
    def from_dict(cls, d, base_dir=None):
        d = dict(d)
        out = cls()
        kw = {}
        for f in dataclasses.fields(cls):
            if f.name not in d:
                continue
            v = d.pop(f.name)
            if f.name == "pretrain":
                v = _train_cfg(v, lr=0.05)
            elif f.name == "finetune":
                v = _train_cfg(v)
            elif f.name == "ssl":
                v = SSLConfig(**{**dataclasses.asdict(out.ssl), **v})
            elif f.name == "post":
                v = PostConfig(**{**dataclasses.asdict(out.post), **v})
            elif f.name in ("ratios", "encoder_dims"):
                v = tuple(v)
            kw[f.name] = v
        if d:
            raise ValueError(f"unknown config keys: {sorted(d)}")
        cfg = cls(**kw)
        if base_dir is not None:
            for key in ("bands", "labels", "annotations", "truth", "ndsm", "out"):
                p = getattr(cfg, key)
                if p is not None and not Path(p).is_absolute():
                    setattr(cfg, key, str(Path(base_dir) / p))
        return cfg

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh), base_dir=Path(path).parent)

    def to_dict(self):
        d = dataclasses.asdict(self)
        for key in ("pretrain", "finetune"):
            d[key].pop("seed")
            d[key].pop("loss")
        d["ssl"].pop("seed")
        d["ratios"] = list(self.ratios)
        d["encoder_dims"] = list(self.encoder_dims)
        d["ssl"]["safer_ks"] = list(self.ssl.safer_ks)
        return d

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")

    def validate(self, stage="all"):
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"unknown loss {self.loss!r}; expected one of {LOSS_KINDS}")
        if len(self.ratios) != 3 or sum(self.ratios) > 1 + 1e-12 or min(self.ratios) < 0:
            raise ValueError(f"invalid split ratios {self.ratios}")
        if self.post.vote_shape not in ("disc", "square"):
            raise ValueError(f"vote_shape must be disc or square, got {self.post.vote_shape!r}")
        if stage in ("features", "all"):
            if self.bands is None:
                raise ValueError("config needs 'bands'")
            if self.labels is None and self.annotations is None:
                raise ValueError("config needs 'labels' or 'annotations'")
            for key in ("bands", "labels", "truth", "ndsm"):
                p = getattr(self, key)
                if p is not None and not Path(f"{p}.hdr").exists():
                    raise FileNotFoundError(f"{key}: {p}.hdr not found")
            if self.annotations is not None and not Path(self.annotations).exists():
                raise FileNotFoundError(f"annotations: {self.annotations} not found")
        return self

    # derivations
    @property
    def out_dir(self):
        return Path(self.out)

    @property
    def loss_dir(self):
        return self.out_dir / self.loss

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def ssl_config(self):
        return replace(self.ssl, seed=self.seed)


# --- helpers ---------------------------------------------------------------


def _need(path, stage):
    path = Path(path)
    probe = path if path.suffix else Path(f"{path}.hdr")
    if not probe.exists():
        raise StageError(f"{stage}: missing upstream artifact {probe}")
    return path


def _write_history(path, history):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss"])
        for i, v in enumerate(history, 1):
            w.writerow([i, repr(float(v))])


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_split(cfg, stage):
    fdir = cfg.out_dir / "features"
    stack = load_band_stack(_need(fdir / "stack", stage))
    with np.load(_need(fdir / "split.npz", stage)) as z:
        split = {k: z[k] for k in z.files}
    return stack, split


def _dataset(stack, split, patch):
    lab, unl, tst = split["labeled"], split["unlabeled"], split["test"]
    flat = np.concatenate([lab, unl, tst])
    ys, xs = np.divmod(flat, stack.width)
    X = feat.extract_patches(stack, xs, ys, patch)
    nl, nu = len(lab), len(unl)
    return feat.PatchDataset(
        X=X,
        y=split["classes"][flat].astype(np.intp) - 1,
        coords=np.stack([xs, ys], axis=1),
        labeled_idx=np.arange(nl),
        unlabeled_idx=np.arange(nl, nl + nu),
        test_idx=np.arange(nl + nu, len(flat)),
        n_classes=int(split["n_classes"]),
    )


# --- stages ----------------------------------------------------------------


def stage_features(cfg):
    cfg.validate("features")
    stack = load_band_stack(cfg.bands)
    if cfg.ndsm is not None and "ndsm" not in stack.band_names:
        ndsm = load_band_stack(cfg.ndsm)
        stack = stack.with_band("ndsm", ndsm.data[0])
    stack = feat.add_ndvi(stack)
    if cfg.labels is not None:
        annotated = load_label_mask(cfg.labels)
    else:
        annotated = rasterize_annotations(load_annotations(cfg.annotations), stack.width, stack.height)
    annotated.check(like=stack)
    truth = load_label_mask(cfg.truth).check(like=stack) if cfg.truth else annotated
    normed, stats = feat.normalize_channels(stack)
    (lab, unl, tst), c = feat.split_indices(annotated, cfg.ratios, cfg.seed)
    annotated.check(n_classes=c)

    fdir = cfg.out_dir / "features"
    fdir.mkdir(parents=True, exist_ok=True)
    save_band_stack(normed, fdir / "stack")
    save_label_mask(annotated, fdir / "annotations")
    save_label_mask(truth, fdir / "truth")
    np.savez(
        fdir / "split.npz",
        labeled=lab,
        unlabeled=unl,
        test=tst,
        classes=annotated.labels.ravel(),
        n_classes=c,
    )
    _write_json(
        fdir / "norm.json",
        {"bands": stack.band_names, "mean": stats.mean.tolist(), "std": stats.std.tolist()},
    )
    return {"n_labeled": len(lab), "n_unlabeled": len(unl), "n_test": len(tst), "n_classes": c}


def _metadata(cfg, stack, c):
    return {
        "n_classes": c,
        "patch_size": cfg.patch,
        "bands": stack.band_names,
        "seed": cfg.seed,
    }


def stage_pretrain(cfg):
    stack, split = _load_split(cfg, "pretrain")
    with open(cfg.out_dir / "features" / "norm.json") as fh:
        norm = json.load(fh)
    c = int(split["n_classes"])
    dtype = cfg.np_dtype
    rng = np.random.default_rng((cfg.seed, 4))
    n_pix = stack.width * stack.height
    take = n_pix if not cfg.pretrain_max_rows else min(cfg.pretrain_max_rows, n_pix)
    pix = np.sort(rng.choice(n_pix, size=take, replace=False))
    ys, xs = np.divmod(pix, stack.width)
    X_pre = feat.extract_patches(stack, xs, ys, cfg.patch)

    pre_cfg = replace(cfg.pretrain, seed=cfg.seed)
    encoders, histories = nn.pretrain_encoders(X_pre, cfg.encoder_dims, pre_cfg, dtype=dtype)
    del X_pre
    model = nn.build_classifier(encoders, c, cfg.hidden, seed=cfg.seed, dtype=dtype)

    ds = _dataset(stack, split, cfg.patch)
    warm = []
    if cfg.warmup_epochs:
        wcfg = replace(cfg.finetune, epochs=cfg.warmup_epochs, seed=cfg.seed, refresh_every=0)
        targets = assemble_targets("mse", ds, None)
        model, warm = nn.finetune(model, ds, targets, wcfg, freeze=nn.EMBED_DEPTH)

    pdir = cfg.out_dir / "pretrain"
    pdir.mkdir(parents=True, exist_ok=True)
    stats = feat.NormStats(norm["mean"], norm["std"])
    save_model(nn.model_to_bundle(model, stats, _metadata(cfg, stack, c)), pdir / "model.bin")
    rows = []
    for stage, hist in enumerate(histories):
        rows += hist
    _write_history(pdir / "history.csv", rows)
    _write_history(pdir / "warmup_history.csv", warm)
    return {"reconstruction_mse": [h[-1] for h in histories]}


def _engine_key(cfg, model_path):
    h = hashlib.sha256(Path(model_path).read_bytes())
    h.update(json.dumps(dataclasses.asdict(cfg.ssl_config()), sort_keys=True).encode())
    h.update(Path(cfg.out_dir / "features" / "split.npz").read_bytes())
    return h.hexdigest()


def _engine_cache(cfg, model_path):
    """Engine soft targets keyed on the pretrained model, split and SSL settings."""
    edir = cfg.out_dir / "engines"
    key = _engine_key(cfg, model_path)
    cache = {}
    for name in ENGINES:
        path = edir / f"{name}.npz"
        if path.exists():
            with np.load(path) as z:
                if str(z["key"]) == key:
                    cache[name] = SoftTargets(z["rows"], z["probs"], name)
                    cache.setdefault("_runtime", {})[name] = float(z["runtime"])
    return cache, key


def _store_engines(cfg, cache, key):
    edir = cfg.out_dir / "engines"
    edir.mkdir(parents=True, exist_ok=True)
    for name in ENGINES:
        if name in cache:
            np.savez(
                edir / f"{name}.npz",
                key=key,
                rows=cache[name].rows,
                probs=cache[name].probs,
                runtime=cache["_runtime"][name],
            )


def stage_finetune(cfg):
    stack, split = _load_split(cfg, "finetune")
    model_path = _need(cfg.out_dir / "pretrain" / "model.bin", "finetune")
    bundle = load_model(model_path)
    dtype = cfg.np_dtype
    model = nn.model_from_bundle(bundle, dtype)
    ds = _dataset(stack, split, cfg.patch)
    ssl_cfg = cfg.ssl_config()

    cache, key = _engine_cache(cfg, model_path)
    t0 = time.perf_counter()
    E = nn.embed(model, ds.X)
    targets = assemble_targets(cfg.loss, ds, E, ssl_cfg, cache=cache)
    _store_engines(cfg, cache, key)
    t_targets = time.perf_counter() - t0

    def refresh(m):
        return assemble_targets(cfg.loss, ds, nn.embed(m, ds.X), ssl_cfg)

    ft_cfg = replace(cfg.finetune, seed=cfg.seed, loss=cfg.loss)
    t0 = time.perf_counter()
    model, history = nn.finetune(model, ds, targets, ft_cfg, refresh=refresh)
    t_train = time.perf_counter() - t0

    ldir = cfg.loss_dir
    ldir.mkdir(parents=True, exist_ok=True)
    bundle = nn.model_to_bundle(
        model, feat.NormStats(bundle.norm_mean, bundle.norm_std), bundle.metadata
    )
    save_model(bundle, ldir / "model.bin")
    _write_history(ldir / "history.csv", history)
    info = dict(targets.info)
    info.update({"targets_s": t_targets, "train_s": t_train, "n_target_rows": len(targets.rows)})
    if cfg.loss in ("manif", "smir", "safer", "weiave") and len(ds.unlabeled_idx):
        soft = targets.T[targets.n_labeled :]
        truth = ds.y[ds.unlabeled_idx]
        info["target_accuracy"] = float(np.mean(np.argmax(soft, 1) == truth))
    _write_json(ldir / "run_report.json", info)
    return info


def predict_mask(bundle, stack, dtype=np.float32, chunk=4096):
    """Classify every pixel of a normalized stack; returns 1-based class codes."""
    model = nn.model_from_bundle(bundle, dtype)
    patch = bundle.metadata.get("patch_size", 15)
    padded = np.pad(stack.data, ((0, 0), (patch // 2,) * 2, (patch // 2,) * 2), mode="reflect")
    n = stack.width * stack.height
    out = np.empty(n, dtype=np.uint8)
    for start in range(0, n, chunk):
        pix = np.arange(start, min(start + chunk, n))
        ys, xs = np.divmod(pix, stack.width)
        X = feat.extract_patches(stack, xs, ys, patch, padded=padded)
        out[pix] = np.argmax(nn.forward(model, X), axis=1) + 1
    return LabelMask(out.reshape(stack.height, stack.width))


def stage_predict(cfg):
    stack, _ = _load_split(cfg, "predict")
    bundle = load_model(_need(cfg.loss_dir / "model.bin", "predict"))
    pred = predict_mask(bundle, stack, cfg.np_dtype)
    save_label_mask(pred, cfg.loss_dir / "pred")
    return {}


def stage_postprocess(cfg):
    pred = load_label_mask(_need(cfg.loss_dir / "pred", "postprocess"))
    p = cfg.post
    save_label_mask(postprocess_buildings(pred, p.radius, p.window, p.vote_shape),
                    cfg.loss_dir / "buildings")
    return {}


def _split_report(pred, annotated, idx, c):
    counts = confusion(pred, annotated, idx, classes=np.arange(1, c + 1))
    per = metrics(counts)
    n = len(idx)
    correct = int(counts.tp.sum())
    return {
        "n": n,
        "accuracy": correct / n if n else 0.0,
        "precision": float(np.mean([m["precision"] for m in per.values()])),
        "recall": float(np.mean([m["recall"] for m in per.values()])),
        "per_class": {str(k): v for k, v in per.items()},
    }


def evaluate_masks(pred, annotated, truth, split, buildings=None, loss=None):
    """Metrics report for a run: multiclass per split plus binary buildings."""
    c = int(split["n_classes"])
    report = {"loss": loss, "multiclass": {}}
    for name in ("labeled", "unlabeled", "test"):
        report["multiclass"][name] = _split_report(pred, annotated, split[name], c)
    if buildings is not None:
        truth_b = LabelMask((truth.labels == 1).astype(np.uint8))
        counts = confusion(buildings, truth_b, truth.labels > 0, classes=[1])
        report["binary"] = metrics(counts)[1]
    return report


def _format_report(report):
    lines = [f"loss: {report['loss']}", ""]
    lines.append(f"{'split':<10} {'class':<6} {'acc':>7} {'prec':>7} {'rec':>7} {'f1':>7} {'csi':>7}")
    for split, rep in report["multiclass"].items():
        lines.append(
            f"{split:<10} {'all':<6} {rep['accuracy']:7.4f} {rep['precision']:7.4f} "
            f"{rep['recall']:7.4f}"
        )
        for k, m in rep["per_class"].items():
            lines.append(
                f"{'':<10} {k:<6} {m['accuracy']:7.4f} {m['precision']:7.4f} {m['recall']:7.4f} "
                f"{m['f1']:7.4f} {m['csi']:7.4f}"
            )
    if "binary" in report:
        m = report["binary"]
        lines += ["", "buildings (binary, post-processed)"]
        for key in ("accuracy", "precision", "recall", "f1", "csi"):
            lines.append(f"  {key:<10} {m[key]:.4f}")
    return "\n".join(lines) + "\n"


def stage_evaluate(cfg):
    fdir = cfg.out_dir / "features"
    annotated = load_label_mask(_need(fdir / "annotations", "evaluate"))
    truth = load_label_mask(_need(fdir / "truth", "evaluate"))
    pred = load_label_mask(_need(cfg.loss_dir / "pred", "evaluate"))
    bpath = cfg.loss_dir / "buildings"
    buildings = load_label_mask(bpath) if Path(f"{bpath}.hdr").exists() else None
    with np.load(_need(fdir / "split.npz", "evaluate")) as z:
        split = {k: z[k] for k in z.files}
    report = evaluate_masks(pred, annotated, truth, split, buildings, cfg.loss)
    _write_json(cfg.loss_dir / "metrics.json", report)
    (cfg.loss_dir / "metrics.txt").write_text(_format_report(report))
    return report


STAGE_FUNCS = {
    "features": stage_features,
    "pretrain": stage_pretrain,
    "finetune": stage_finetune,
    "predict": stage_predict,
    "postprocess": stage_postprocess,
    "evaluate": stage_evaluate,
}


def run_stage(name, cfg):
    if name not in STAGE_FUNCS:
        raise ValueError(f"unknown stage {name!r}")
    cfg.validate(name)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(cfg.out_dir / ".lock"))
    try:
        with lock.acquire(timeout=0):
            t0 = time.perf_counter()
            try:
                result = STAGE_FUNCS[name](cfg)
            except StageError:
                raise
            except Exception as exc:
                raise StageError(f"{name}: {exc}") from exc
            log.info("stage %s done in %.1fs", name, time.perf_counter() - t0)
            return result
    except Timeout:
        raise StageError(f"another pipeline run holds {cfg.out_dir / '.lock'}") from None


def run_pipeline(cfg, stages=STAGES):
    """Run every stage in order; returns the metrics report."""
    result = None
    for name in stages:
        result = run_stage(name, cfg)
    return result


def compare_runs(reports, metric_keys=("recall", "precision", "csi", "f1")):
    """Ranking table over several runs' binary building metrics.

    Each cell is ``value (rank)`` with rank 1 the best; equal values share
    the better rank.
    """
    names = [r["loss"] for r in reports]
    values = {k: [r["binary"][k] for r in reports] for k in metric_keys}
    ranks = {}
    for k, vals in values.items():
        rounded = [round(v * 100, 1) for v in vals]
        ranks[k] = [1 + sum(o > v for o in rounded) for v in rounded]
    header = f"{'loss':<10}" + "".join(f"{k:>16}" for k in metric_keys)
    lines = [header]
    for i, name in enumerate(names):
        cells = "".join(
            f"{values[k][i] * 100:>11.1f} {f'({ranks[k][i]})':<4}" for k in metric_keys
        )
        lines.append(f"{name:<10}{cells}")
    table = "\n".join(lines) + "\n"
    return table, {"values": values, "ranks": ranks, "losses": names}
