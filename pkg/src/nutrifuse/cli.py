"""Command-line entry point: ``nutrifuse <command> --config run.yaml --set k=v --out DIR``.

Exit status: 0 success, 1 configuration error, 2 data error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch
import yaml

from . import data as D
from .embedding import ClipTextEncoder, HashTextEncoder, IngredientEmbedder
from .errors import ConfigError, ConfigMismatchError, DataError, NutrifuseError
from .evaluation import (
    build_report,
    evaluate_protocol1,
    evaluate_protocol2,
    plot_tau_sweep,
    write_report,
)
from .fusion import FusionConfig, NutritionEstimator, load_checkpoint
from .inference import (
    AugmentationSpec,
    GroundTruthClient,
    HttpMultimodalClient,
    NoisyOracleClient,
    VoteConfig,
    dump_audit_line,
    predict_with_augmented_ingredients,
    tau_sweep,
)
from .ingredients import (
    IngredientVocabulary,
    RobustnessConfig,
    build_dialogue_prompt,
    normalize_ingredient,
)
from .errors import IngredientError, RejectedTermError
from .training import OptimizerSpec, TrainConfig, disk_image_loader, predict_samples, train

log = logging.getLogger("nutrifuse")

COMMANDS = ("ingest", "normalize", "embed-cache", "train", "eval", "predict", "vote-infer", "dialogue-template")

DEFAULTS: dict = {
    "seed": 0,
    "data": {
        "manifest": None,
        "train_manifest": None,
        "val_manifest": None,
        "test_manifest": None,
        "videos": None,
        "unit_map": None,
        "stride": 5,
        "split": {"train": 0.7, "val": 0.2, "test": 0.1},
    },
    "vocabulary": {"vocabulary": None, "plurals": None, "vagueness": None},
    "encoder": {"kind": "hash", "dim": 64, "model": "openai/clip-vit-base-patch32", "cache": None,
                "l2_normalize": False},
    "fusion": {"backbone": "resnet101", "injection_site": None, "input_resolution": None},
    "train": {"epochs": 100, "batch_size": 64, "init": "pretrained", "max_steps": None, "hflip": True,
              "dtype": "float32", "lr": 1e-4, "momentum": 0.9, "decay": 0.9, "epsilon": 1.0},
    "robustness": {"p_synonym": 0.5, "p_subset": 0.5, "order": "replace_then_sample"},
    "eval": {"checkpoint": None, "protocol": "single_image", "stride": None, "figure": True},
    "predict": {"checkpoint": None, "image": None, "ingredients": None},
    "augment": {"transforms": ["identity", "rotation:15", "horizontal_flip", "random_crop:0.7", "grayscale"]},
    "vote": {"tau": 4, "taus": None},
    "client": {"kind": "mock_ground_truth", "url": None, "model": "", "p_drop": 0.25, "p_false": 0.08,
               "strict": False, "prompt": None, "max_workers": 4},
    "normalize": {"terms": None, "strict": False},
    "dialogue": {"template": None, "n_turns": 3},
}


# -------------------------------------------------------------------- config


def _merge(base: dict, update: dict, where: str = "") -> dict:
    for key, value in update.items():
        name = f"{where}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {name!r}")
        if isinstance(base[key], dict) and key != "split":
            if not isinstance(value, dict):
                raise ConfigError(f"config key {name!r} must be a mapping")
            _merge(base[key], value, name + ".")
        elif key == "split" and isinstance(value, dict):
            unknown = set(value) - {"train", "val", "test"}
            if unknown:
                raise ConfigError(f"unknown config key {name}.{sorted(unknown)[0]!r}")
            base[key] = {**base[key], **value}
        else:
            base[key] = value
    return base


def _set(cfg: dict, assignment: str) -> None:
    key, sep, raw = assignment.partition("=")
    if not sep:
        raise ConfigError(f"--set expects key=value, got {assignment!r}")
    node = update = {}
    parts = key.strip().split(".")
    for part in parts[:-1]:
        node[part] = {}
        node = node[part]
    try:
        node[parts[-1]] = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"bad value in --set {assignment!r}: {exc}") from exc
    _merge(cfg, update)


def resolve_config(path: str | None, overrides: list[str], seed: int | None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path:
        try:
            loaded = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError("config file must be a mapping")
        _merge(cfg, loaded)
    for assignment in overrides:
        _set(cfg, assignment)
    if seed is not None:
        cfg["seed"] = seed
    return cfg


def _path(cfg: dict, section: str, key: str, required: bool = True) -> Path | None:
    value = cfg[section][key]
    if value is None:
        if required:
            raise ConfigError(f"{section}.{key} is required for this command")
        return None
    p = Path(value)
    if not p.exists():
        raise ConfigError(f"{section}.{key}: path {p} does not exist")
    return p


# ------------------------------------------------------------------ builders


def _vocab(cfg) -> IngredientVocabulary:
    v = cfg["vocabulary"]
    if v["vocabulary"] is None:
        return IngredientVocabulary.default()
    return IngredientVocabulary.from_files(_path(cfg, "vocabulary", "vocabulary"),
                                           _path(cfg, "vocabulary", "plurals", False),
                                           _path(cfg, "vocabulary", "vagueness", False))


def _embedder(cfg) -> IngredientEmbedder:
    e = cfg["encoder"]
    if e["kind"] == "hash":
        encoder = HashTextEncoder(int(e["dim"]))
    elif e["kind"] == "clip":
        encoder = ClipTextEncoder(e["model"])
    else:
        raise ConfigError(f"encoder.kind must be 'hash' or 'clip', got {e['kind']!r}")
    return IngredientEmbedder(encoder, e["cache"], bool(e["l2_normalize"]))


def _fusion(cfg, embed_dim: int) -> FusionConfig:
    f = cfg["fusion"]
    return FusionConfig(backbone=f["backbone"], injection_site=f["injection_site"],
                        input_resolution=f["input_resolution"], embed_dim=embed_dim)


def _train_config(cfg) -> TrainConfig:
    t, r = cfg["train"], cfg["robustness"]
    return TrainConfig(
        optimizer=OptimizerSpec(lr=t["lr"], momentum=t["momentum"], decay=t["decay"], epsilon=t["epsilon"]),
        epochs=int(t["epochs"]), batch_size=int(t["batch_size"]), init=t["init"],
        robustness=RobustnessConfig(r["p_synonym"], r["p_subset"], cfg["seed"], r["order"]),
        seed=int(cfg["seed"]), max_steps=t["max_steps"], hflip=bool(t["hflip"]), dtype=t["dtype"],
    )


def _load_estimator(cfg, checkpoint: Path):
    embedder = _embedder(cfg)
    model, header = load_checkpoint(checkpoint, encoder_name=embedder.encoder.name)
    return NutritionEstimator(model, embedder, header), header


def _manifest(cfg, key: str) -> D.DatasetManifest:
    unit_map = D.load_unit_map(p) if (p := _path(cfg, "data", "unit_map", False)) else None
    return D.load_manifest(_path(cfg, "data", key), unit_map)


def _write_predictions(path: Path, samples, preds: np.ndarray) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", *D.FIELDS])
        for s, row in zip(samples, np.clip(preds, 0.0, None)):
            w.writerow([s.sample_id, *(f"{v:.4f}" for v in row)])


def _relocate(manifest: D.DatasetManifest, samples, out: Path):
    """Rewrite image paths so they resolve from ``out``."""
    moved = []
    for s in samples:
        img = os.path.relpath(manifest.resolve_image(s).resolve(), out.resolve())
        moved.append(D.Sample(**{**vars(s), "image_ref": img}))
    return moved


# ------------------------------------------------------------------ commands


def cmd_ingest(cfg, out: Path) -> dict:
    samples, root = [], None
    if cfg["data"]["manifest"]:
        manifest = _manifest(cfg, "manifest")
        samples += _relocate(manifest, manifest.samples, out)
    if cfg["data"]["videos"]:
        videos_path = _path(cfg, "data", "videos")
        videos = []
        for line in videos_path.read_text(encoding="utf-8").splitlines():
            if line.strip():
                rec = json.loads(line)
                nv = D.NutritionVector(*(float(rec[f]) for f in D.FIELDS))
                videos.append(D.VideoRecord(rec["video_id"], int(rec["frame_count"]), nv,
                                            rec.get("category", "dish"), tuple(rec.get("ingredients", ()))))
        frames = D.extract_frames(videos, int(cfg["data"]["stride"]))
        base = os.path.relpath(videos_path.parent.resolve(), out.resolve())
        samples += [D.Sample(**{**vars(s), "image_ref": str(Path(base) / s.image_ref)}) for s in frames]
    if not samples:
        raise ConfigError("ingest needs data.manifest and/or data.videos")
    full = D.DatasetManifest(tuple(samples), root=root)
    sp = cfg["data"]["split"]
    parts = D.split_dataset(full, D.SplitSpec(sp["train"], sp["val"], sp["test"], int(cfg["seed"])))
    D.save_manifest(full, out / "manifest.jsonl")
    summary = {"n_samples": len(full), "field_means": full.field_means.as_dict()}
    for name, part in zip(("train", "val", "test"), parts):
        D.save_manifest(part, out / f"{name}.jsonl")
        summary[f"n_{name}"] = len(part)
    return summary


def cmd_normalize(cfg, out: Path) -> dict:
    vocab = _vocab(cfg)
    strict = bool(cfg["normalize"]["strict"])
    summary = {"rejected": 0, "unmappable": 0}
    if cfg["normalize"]["terms"]:
        rows = []
        for raw in _path(cfg, "normalize", "terms").read_text(encoding="utf-8").splitlines():
            if not raw.strip():
                continue
            try:
                rows.append((raw, normalize_ingredient(raw, vocab)))
            except RejectedTermError:
                rows.append((raw, "<REJECT>"))
                summary["rejected"] += 1
            except IngredientError:
                if strict:
                    raise
                rows.append((raw, "<UNMAPPABLE>"))
                summary["unmappable"] += 1
        (out / "terms.normalized.tsv").write_text("".join(f"{a}\t{b}\n" for a, b in rows), encoding="utf-8")
    if cfg["data"]["manifest"]:
        manifest = _manifest(cfg, "manifest")
        fixed, events = [], []
        for s in manifest.samples:
            kept = []
            for raw in s.ingredients:
                try:
                    canon = normalize_ingredient(raw, vocab)
                except RejectedTermError:
                    events.append({"sample_id": s.sample_id, "term": raw, "action": "rejected"})
                    summary["rejected"] += 1
                    continue
                except IngredientError:
                    if strict:
                        raise
                    events.append({"sample_id": s.sample_id, "term": raw, "action": "unmappable"})
                    summary["unmappable"] += 1
                    continue
                if canon not in kept:
                    kept.append(canon)
            fixed.append(D.Sample(**{**vars(s), "ingredients": tuple(kept)}))
        fixed = _relocate(manifest, fixed, out)
        D.save_manifest(D.DatasetManifest(tuple(fixed)), out / "manifest.normalized.jsonl")
        with (out / "normalize_log.jsonl").open("w", encoding="utf-8") as fh:
            for e in events:
                fh.write(json.dumps(e, sort_keys=True) + "\n")
    elif not cfg["normalize"]["terms"]:
        raise ConfigError("normalize needs normalize.terms and/or data.manifest")
    return summary


def cmd_embed_cache(cfg, out: Path) -> dict:
    vocab = _vocab(cfg)
    embedder = _embedder(cfg)
    names = set(vocab.surface_forms())
    if cfg["data"]["manifest"]:
        names.update(i for s in _manifest(cfg, "manifest").samples for i in s.ingredients)
    added = embedder.warm(sorted(names))
    path = embedder.cache.save(cfg["encoder"]["cache"] or out / "embeddings.bin")
    return {"cache": str(path), "entries": len(embedder.cache), "added": added, "dim": embedder.dim}


def cmd_train(cfg, out: Path) -> dict:
    vocab = _vocab(cfg)
    embedder = _embedder(cfg)
    fusion = _fusion(cfg, embedder.dim)
    tcfg = _train_config(cfg)
    train_m, val_m = _manifest(cfg, "train_manifest"), _manifest(cfg, "val_manifest")
    loaders = {id(m): disk_image_loader(m, fusion.input_resolution) for m in (train_m, val_m)}
    lookup = {s.sample_id: loaders[id(m)] for m in (train_m, val_m) for s in m.samples}
    result = train(tcfg, fusion, train_m, val_m, embedder, vocab, lambda s: lookup[s.sample_id](s), out)
    _plot_losses(result.losses, result.epoch_scores, out / "training.png")
    if cfg["encoder"]["cache"]:
        embedder.cache.save()
    return {"checkpoint": str(result.checkpoint), "best_epoch": result.best_epoch, "best_score": result.best_score}


def _plot_losses(losses, scores, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, (a, b) = plt.subplots(1, 2, figsize=(8, 3))
    a.plot(losses)
    a.set_xlabel("step")
    a.set_ylabel("training loss")
    b.plot(range(1, len(scores) + 1), scores, marker=".")
    b.set_xlabel("epoch")
    b.set_ylabel("val avg relative error (%)")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def cmd_eval(cfg, out: Path) -> dict:
    est, _ = _load_estimator(cfg, _path(cfg, "eval", "checkpoint"))
    manifest = _manifest(cfg, "test_manifest")
    if not manifest.samples:
        raise D.EmptyManifestError("test manifest is empty")
    loader = disk_image_loader(manifest, est.model.cfg.input_resolution)
    protocol = cfg["eval"]["protocol"]
    cache: dict = {}

    def predictor(samples):
        todo = [s for s in samples if s.sample_id not in cache]
        if todo:
            for s, row in zip(todo, predict_samples(est, todo, loader)):
                cache[s.sample_id] = row
        return np.stack([cache[s.sample_id] for s in samples])

    if protocol == "single_image":
        samples = list(manifest.samples)
        report = build_report(predictor(samples), [s.nutrition for s in samples])
    elif protocol == "protocol1":
        report = evaluate_protocol1(predictor, manifest.samples, cfg["eval"]["stride"])
    elif protocol == "protocol2":
        report = evaluate_protocol2(predictor, manifest.samples, cfg["eval"]["stride"])
    else:
        raise ConfigError(f"eval.protocol must be one of single_image, protocol1, protocol2; got {protocol!r}")
    scored = [s for s in manifest.samples if s.sample_id in cache]
    _write_predictions(out / "predictions.csv", scored, predictor(scored))
    paths = write_report(report, out, "report", figure=bool(cfg["eval"]["figure"]))
    return {"report": str(paths["text"]), "mean_mae": report.mean_mae, "mean_percent": report.mean_percent}


def cmd_predict(cfg, out: Path) -> dict:
    from .images import load_image, resize

    est, _ = _load_estimator(cfg, _path(cfg, "predict", "checkpoint"))
    res = est.model.cfg.input_resolution
    if cfg["predict"]["image"]:
        image = resize(load_image(_path(cfg, "predict", "image")), res)
        ings = cfg["predict"]["ingredients"] or []
        pred = est.forward(image, ings)
        sample = D.Sample("image", str(cfg["predict"]["image"]), "unknown", tuple(ings),
                          D.NutritionVector(0, 0, 0, 0))
        _write_predictions(out / "predictions.csv", [sample], pred.as_array()[None])
        return {"prediction": vars(pred.clamped())}
    manifest = _manifest(cfg, "manifest")
    preds = predict_samples(est, list(manifest.samples), disk_image_loader(manifest, res))
    _write_predictions(out / "predictions.csv", manifest.samples, preds)
    return {"n_predictions": len(preds)}


def _client_for(cfg, sample: D.Sample, vocab: IngredientVocabulary, index: int):
    c = cfg["client"]
    if c["kind"] == "mock_ground_truth":
        return GroundTruthClient(sample.ingredients)
    if c["kind"] == "mock_noisy":
        return NoisyOracleClient(sample.ingredients, sorted(vocab.canonical), c["p_drop"], c["p_false"],
                                 seed=int(cfg["seed"]) * 100003 + index)
    if c["kind"] == "http":
        if not c["url"]:
            raise ConfigError("client.url is required for the http client")
        return HttpMultimodalClient(c["url"], c["model"])
    raise ConfigError(f"client.kind must be mock_ground_truth, mock_noisy or http; got {c['kind']!r}")


def cmd_vote_infer(cfg, out: Path) -> dict:
    from .images import load_image

    vocab = _vocab(cfg)
    est, _ = _load_estimator(cfg, _path(cfg, "eval", "checkpoint"))
    manifest = _manifest(cfg, "manifest")
    spec = AugmentationSpec(tuple(cfg["augment"]["transforms"]), seed=int(cfg["seed"]))
    vote_cfg = VoteConfig(int(cfg["vote"]["tau"]))
    prompt_path = _path(cfg, "client", "prompt", False)
    prompt = prompt_path.read_text(encoding="utf-8") if prompt_path else None
    http_client = _client_for(cfg, manifest.samples[0], vocab, 0) if cfg["client"]["kind"] == "http" else None
    preds, images, clients = [], [], []
    with (out / "audit.jsonl").open("w", encoding="utf-8") as audit:
        for i, s in enumerate(manifest.samples):
            client = http_client or _client_for(cfg, s, vocab, i)
            image = load_image(manifest.resolve_image(s))
            res = predict_with_augmented_ingredients(
                image, est, client, spec, vote_cfg, vocab, prompt, bool(cfg["client"]["strict"]),
                sample_id=s.sample_id, max_workers=int(cfg["client"]["max_workers"]))
            audit.write(dump_audit_line(res.record))
            preds.append(res.prediction.as_array())
            images.append(image)
            clients.append(client)
    preds = np.stack(preds)
    _write_predictions(out / "predictions.csv", manifest.samples, preds)
    report = build_report(preds, [s.nutrition for s in manifest.samples])
    write_report(report, out, "report", figure=bool(cfg["eval"]["figure"]))
    summary = {"n_images": len(preds), "mean_mae": report.mean_mae}
    if cfg["vote"]["taus"]:
        taus = [int(t) for t in cfg["vote"]["taus"]]
        targets = np.stack([s.nutrition.as_array() for s in manifest.samples])
        curve = tau_sweep(est, images, targets, clients, spec, vocab, taus, prompt)
        (out / "tau_sweep.json").write_text(json.dumps({"taus": taus, "mean_mae": curve}, indent=1) + "\n")
        plot_tau_sweep(taus, curve, out / "tau_sweep.png")
        summary["best_tau"] = taus[int(np.argmin(curve))]
    return summary


def cmd_dialogue_template(cfg, out: Path) -> dict:
    template_path = _path(cfg, "dialogue", "template", False)
    template = template_path.read_text(encoding="utf-8") if template_path else None
    n_turns = cfg["dialogue"]["n_turns"]
    rng = np.random.default_rng(int(cfg["seed"]))
    manifest = _manifest(cfg, "manifest")
    with (out / "prompts.jsonl").open("w", encoding="utf-8") as fh:
        for s in manifest.samples:
            n = int(rng.integers(2, 6)) if n_turns == "random" else int(n_turns)
            prompt = build_dialogue_prompt(s.nutrition, n, template)
            fh.write(json.dumps({"sample_id": s.sample_id, "n_turns": n, "prompt": prompt}, sort_keys=True) + "\n")
    return {"n_prompts": len(manifest)}


HANDLERS = {
    "ingest": cmd_ingest,
    "normalize": cmd_normalize,
    "embed-cache": cmd_embed_cache,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "vote-infer": cmd_vote_infer,
    "dialogue-template": cmd_dialogue_template,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nutrifuse", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="YAML run configuration")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key, e.g. --set train.epochs=5 (repeatable)")
    parser.add_argument("--out", default=None, help="output directory (default runs/<command>)")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args.config, args.overrides, args.seed)
        out = Path(args.out or Path("runs") / args.command)
        out.mkdir(parents=True, exist_ok=True)
        torch.manual_seed(int(cfg["seed"]))
        echo = {"command": args.command, "overrides": args.overrides, "config": cfg}
        (out / "resolved_config.yaml").write_text(yaml.safe_dump(echo, sort_keys=True), encoding="utf-8")
        summary = HANDLERS[args.command](cfg, out)
    except (ConfigError, ConfigMismatchError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except (NutrifuseError, RuntimeError, ValueError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 3
    print(json.dumps(summary, sort_keys=True, default=str))
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
