"""Experiment orchestration CLI.

One declarative JSON config drives every stage; each subcommand writes its
artifacts under the config's output directory together with a run manifest
(config hash, seeds, artifact digests) so reruns are byte-comparable.

Exit codes: 0 success, 2 config error, 3 missing dependency artifact,
4 numeric-domain error.
"""

from __future__ import annotations

import copy
import datetime
import functools
import hashlib
import json
import sys
from pathlib import Path

import click
import jsonschema
import numpy as np
import torch
import torch.nn.functional as F

from . import corpus as corpus_mod
from . import downstream as downstream_mod
from . import gan as gan_mod
from . import metrics as metrics_mod
from . import simsvc as simsvc_mod
from . import snn as snn_mod
from .errors import (ConfigurationError, DependencyError, HistoganError,
                     InvalidInputError, NumericDomainError)

DEFAULT_CONFIG: dict = {
    "output_dir": "histogan_out",
    "corpus": {
        "n_slides": 8, "classes": 2, "seed": 7, "slide_size": 256,
        "patch_size": 64, "stride": 32, "min_tissue": 0.5,
        "sat_threshold": 0.08, "min_region_px": 256,
        "n_pairs_per_level": 60, "max_patches": 0,
    },
    "snn": {
        "embedding_dim": 128, "base_channels": 16, "seed": 0,
        "pretrain_epochs": 2,
        "stage1": {"trainable_tail": 8, "epochs": 10, "batch_size": 32,
                   "recon_lr": 1e-3, "sim_lr": 5e-4, "resolution": 224,
                   "margin": 1.0},
        "stage2": {"trainable_tail": 3, "epochs": 8, "batch_size": 32,
                   "recon_lr": 1e-3, "sim_lr": 5e-4, "resolution": 64,
                   "margin": 1.0},
    },
    "gan": {
        "epochs": 30, "batch_size": 64, "lr": 2e-4, "beta1": 0.5,
        "clip_value": 0.1, "reward_weight": 0.3, "real_label": 0.9,
        "latent_dim": 100, "feature_maps": 32, "image_size": 32,
        "seed": 0, "checkpoint_every": 0,
    },
    "metrics": {"n_real": 128, "n_fake": 128, "ppl_paths": 32,
                "ppl_steps": 5, "pr_k": 3, "seed": 0},
    "downstream": {"trainable_tail_layers": 16, "head_units": 256,
                   "epochs": 6, "batch_size": 32, "lr": 1e-3, "lr_step": 7,
                   "lr_gamma": 0.1, "seed": 0, "n_synth_per_class": 96},
    "serve": {"host": "127.0.0.1", "port": 8008},
}

CONFIG_SCHEMA = {
    "type": "object",
    "properties": {
        "output_dir": {"type": "string"},
        "corpus": {
            "type": "object",
            "properties": {k: {"type": "number"} for k in DEFAULT_CONFIG["corpus"]},
        },
        "snn": {
            "type": "object",
            "properties": {
                "embedding_dim": {"type": "integer", "minimum": 1},
                "base_channels": {"type": "integer", "minimum": 1},
                "seed": {"type": "integer"},
                "pretrain_epochs": {"type": "integer", "minimum": 0},
                "stage1": {"type": "object"},
                "stage2": {"type": "object"},
            },
        },
        "gan": {
            "type": "object",
            "properties": {
                "epochs": {"type": "integer", "minimum": 0},
                "batch_size": {"type": "integer", "minimum": 1},
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "beta1": {"type": "number"},
                "clip_value": {"type": "number", "exclusiveMinimum": 0},
                "reward_weight": {"type": "number", "minimum": 0},
                "real_label": {"type": "number"},
                "latent_dim": {"type": "integer", "minimum": 1},
                "feature_maps": {"type": "integer", "minimum": 1},
                "image_size": {"type": "integer", "enum": [32, 64]},
                "seed": {"type": "integer"},
                "checkpoint_every": {"type": "integer", "minimum": 0},
            },
        },
        "metrics": {"type": "object"},
        "downstream": {"type": "object"},
        "serve": {"type": "object"},
    },
}


def deep_update(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_update(out[k], v)
        else:
            out[k] = v
    return out


def apply_override(cfg: dict, dotted: str, raw: str) -> None:
    keys = dotted.split(".")
    node = cfg
    for k in keys[:-1]:
        if not isinstance(node.get(k), dict):
            node[k] = {}
        node = node[k]
    try:
        node[keys[-1]] = json.loads(raw)
    except json.JSONDecodeError:
        node[keys[-1]] = raw


def load_config(config_path: str | None, overrides: tuple[str, ...],
                out: str | None, seed: int | None) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if config_path:
        try:
            user = json.loads(Path(config_path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read config {config_path}: {exc}")
        cfg = deep_update(cfg, user)
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} must look like key=value")
        apply_override(cfg, *item.split("=", 1))
    if out:
        cfg["output_dir"] = out
    if seed is not None:
        for section in ("corpus", "snn", "gan", "metrics", "downstream"):
            cfg[section]["seed"] = seed
    try:
        jsonschema.validate(cfg, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ConfigurationError(f"config schema violation: {exc.message}")
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def file_digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(cfg: dict, command: str, artifacts: list[Path]) -> Path:
    root = Path(cfg["output_dir"])
    manifest = {
        "command": command,
        "config_hash": config_hash(cfg),
        "config": cfg,
        "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "artifacts": {str(p.relative_to(root)): file_digest(p)
                      for p in sorted(artifacts)},
    }
    path = root / "manifests" / f"{command}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2))
    return path


def require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise DependencyError(
            f"missing artifact {path}; run `histogan {producer}` first",
            produced_by=producer)
    return path


def resize_images(images: list[np.ndarray], size: int) -> list[np.ndarray]:
    if images and images[0].shape[0] == size:
        return images
    t = snn_mod.batch_to_tensor(images)
    t = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False)
    return list(t.permute(0, 2, 3, 1).numpy())


def cli_command(fn):
    """Map package errors to the documented exit codes."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            fn(*args, **kwargs)
        except DependencyError as exc:
            click.echo(f"dependency error: {exc}", err=True)
            sys.exit(3)
        except NumericDomainError as exc:
            click.echo(f"numeric-domain error: {exc}", err=True)
            sys.exit(4)
        except (ConfigurationError, InvalidInputError) as exc:
            click.echo(f"config error: {exc}", err=True)
            sys.exit(2)
        except HistoganError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(2)

    return wrapper


def common_options(fn):
    fn = click.option("--config", "config_path", type=click.Path(), default=None,
                      help="Experiment config JSON.")(fn)
    fn = click.option("--out", default=None, help="Override output_dir.")(fn)
    fn = click.option("--seed", type=int, default=None,
                      help="Override every section seed.")(fn)
    fn = click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE",
                      help="Dotted config override, e.g. gan.reward_weight=0.")(fn)
    return fn


@click.group()
def main():
    """Similarity-guided GAN experiment pipeline."""


# ---------------------------------------------------------------------------
# Stage commands
# ---------------------------------------------------------------------------

def _corpus_paths(cfg: dict) -> dict[str, Path]:
    root = Path(cfg["output_dir"])
    return {"root": root, "corpus": root / "corpus",
            "snn_ckpt": root / "snn" / "checkpoint.pt",
            "gan_dir": root / "gan", "runs": root / "runs",
            "metrics": root / "metrics", "downstream": root / "downstream"}


@main.command()
@common_options
@cli_command
def synth(config_path, out, seed, overrides):
    """Generate the synthetic corpus: slides, tissue masks, patches."""
    cfg = load_config(config_path, overrides, out, seed)
    c = cfg["corpus"]
    paths = _corpus_paths(cfg)
    slides = corpus_mod.synth_corpus(
        int(c["n_slides"]), int(c["classes"]), seed=int(c["seed"]),
        cfg=corpus_mod.SynthConfig(slide_size=int(c["slide_size"])))
    corpus_mod.save_corpus(slides, paths["corpus"])
    artifacts = []
    all_patches = []
    for s in slides:
        mask = corpus_mod.segment_tissue(s, sat_threshold=c["sat_threshold"],
                                         min_region_px=int(c["min_region_px"]))
        all_patches += corpus_mod.extract_patches(
            s, mask, size=int(c["patch_size"]), stride=int(c["stride"]),
            min_tissue=c["min_tissue"])
    if c["max_patches"]:
        all_patches = corpus_mod.subsample_patches(
            all_patches, int(c["max_patches"]), seed=int(c["seed"]))
    artifacts += corpus_mod.save_patches(all_patches, paths["corpus"])
    artifacts += sorted((paths["corpus"] / "slides").rglob("*.png"))
    write_manifest(cfg, "synth", artifacts)
    click.echo(f"wrote {len(slides)} slides, {len(all_patches)} patches "
               f"under {paths['corpus']}")


@main.command()
@common_options
@cli_command
def pairs(config_path, out, seed, overrides):
    """Build labeled pair datasets at slide and patch level."""
    cfg = load_config(config_path, overrides, out, seed)
    c = cfg["corpus"]
    paths = _corpus_paths(cfg)
    require(paths["corpus"] / "slides", "synth")
    require(paths["corpus"] / "patches", "synth")
    slides = corpus_mod.load_corpus(paths["corpus"])
    patches = corpus_mod.load_patches(paths["corpus"])
    n = int(c["n_pairs_per_level"])
    slide_patches = [corpus_mod.Patch(pixels=s.pixels, source_slide=s.slide_id,
                                      grid_pos=(0, 0), class_label=s.class_label)
                     for s in slides]
    wsi_pairs = corpus_mod.build_pairs(slide_patches, n, seed=int(c["seed"]))
    patch_pairs = corpus_mod.build_pairs(patches, n, seed=int(c["seed"]) + 1)
    m1 = corpus_mod.write_pair_manifest(wsi_pairs, paths["corpus"] / "wsi_pairs",
                                        seed=int(c["seed"]))
    m2 = corpus_mod.write_pair_manifest(patch_pairs, paths["corpus"],
                                        seed=int(c["seed"]) + 1)
    write_manifest(cfg, "pairs", [m1, m2])
    click.echo(f"wrote {len(wsi_pairs)} slide-level and {len(patch_pairs)} "
               f"patch-level pairs")


@main.command("train-snn")
@common_options
@cli_command
def train_snn(config_path, out, seed, overrides):
    """Two-stage progressive fine-tune of the similarity network."""
    cfg = load_config(config_path, overrides, out, seed)
    s = cfg["snn"]
    paths = _corpus_paths(cfg)
    require(paths["corpus"] / "wsi_pairs" / "pairs" / "manifest.jsonl", "pairs")
    require(paths["corpus"] / "pairs" / "manifest.jsonl", "pairs")
    wsi_pairs = corpus_mod.read_pair_manifest(paths["corpus"] / "wsi_pairs")
    patch_pairs = corpus_mod.read_pair_manifest(paths["corpus"])

    torch.manual_seed(int(s["seed"]))
    extractor = snn_mod.LayeredExtractor(embedding_dim=int(s["embedding_dim"]),
                                         base_channels=int(s["base_channels"]))
    if s["pretrain_epochs"]:
        patches = corpus_mod.load_patches(paths["corpus"])
        snn_mod.pretrain_reconstruction(
            extractor, [p.pixels for p in patches],
            epochs=int(s["pretrain_epochs"]), seed=int(s["seed"]))

    def plan(stage_id: int, section: dict) -> snn_mod.StagePlan:
        res = int(section["resolution"])
        return snn_mod.StagePlan(
            stage_id=stage_id,
            trainable_layer_indices=snn_mod.last_n_layers(
                extractor, int(section["trainable_tail"])),
            epochs=int(section["epochs"]), batch_size=int(section["batch_size"]),
            recon_lr=section["recon_lr"], sim_lr=section["sim_lr"],
            input_resolution=(res, res), margin=section["margin"])

    extractor, results = snn_mod.train_mft(
        extractor, plan(1, s["stage1"]), plan(2, s["stage2"]),
        wsi_pairs, patch_pairs, seed=int(s["seed"]))
    ckpt = snn_mod.save_checkpoint(
        extractor, paths["snn_ckpt"], results=results, seed=int(s["seed"]),
        extra={"pretrain_epochs": s["pretrain_epochs"]})
    write_manifest(cfg, "train-snn", [ckpt, ckpt.with_suffix(".pt.json")])
    click.echo(f"saved similarity network checkpoint to {ckpt}")


@main.command("train-gan")
@common_options
@click.option("--reward-weight", type=float, default=None,
              help="Shortcut for --set gan.reward_weight=...")
@cli_command
def train_gan(config_path, out, seed, overrides, reward_weight):
    """Train one reward-guided GAN per corpus class."""
    cfg = load_config(config_path, overrides, out, seed)
    if reward_weight is not None:
        cfg["gan"]["reward_weight"] = reward_weight
    g = cfg["gan"]
    paths = _corpus_paths(cfg)
    require(paths["corpus"] / "patches", "synth")
    scorer = None
    if g["reward_weight"] > 0:
        require(paths["snn_ckpt"], "train-snn")
        scorer, _ = snn_mod.load_checkpoint(paths["snn_ckpt"])
    patches = corpus_mod.load_patches(paths["corpus"])
    by_class: dict[str, list] = {}
    for p in patches:
        by_class.setdefault(p.class_label, []).append(p.pixels)

    artifacts = []
    for cls, images in sorted(by_class.items()):
        gan_cfg = gan_mod.GanConfig(
            epochs=int(g["epochs"]), batch_size=int(g["batch_size"]),
            lr=g["lr"], beta1=g["beta1"], clip_value=g["clip_value"],
            reward_weight=g["reward_weight"], real_label=g["real_label"],
            latent_dim=int(g["latent_dim"]), feature_maps=int(g["feature_maps"]),
            image_size=int(g["image_size"]), seed=int(g["seed"]))
        images = resize_images(images, gan_cfg.image_size)
        torch.manual_seed(gan_cfg.seed)
        gen = gan_mod.init_weights(
            gan_mod.Generator(gan_cfg.latent_dim, gan_cfg.feature_maps,
                              gan_cfg.image_size), seed=gan_cfg.seed)
        disc = gan_mod.init_weights(
            gan_mod.Discriminator(gan_cfg.feature_maps, gan_cfg.image_size),
            seed=gan_cfg.seed + 1)
        ckpts, trace = gan_mod.train(
            gen, disc, scorer, images, gan_cfg,
            checkpoint_dir=paths["gan_dir"] / cls,
            checkpoint_every=int(g["checkpoint_every"]) or 0)
        if not ckpts:
            ckpts = [gan_mod.save_gan_checkpoint(
                gen, disc, gan_cfg, paths["gan_dir"] / cls / "gan_final.pt")]
        trace_path = trace.to_csv(paths["runs"] / f"gan_{cls}" / "reward_trace.csv")
        artifacts += ckpts + [trace_path]
        click.echo(f"class {cls}: {len(trace.rows)} iterations, "
                   f"final mean sim {trace.rows[-1].mean_sim:.4f}"
                   if trace.rows else f"class {cls}: no iterations")
    write_manifest(cfg, "train-gan", artifacts)


def _load_gans(cfg: dict) -> dict[str, gan_mod.Generator]:
    paths = _corpus_paths(cfg)
    gan_dir = paths["gan_dir"]
    require(gan_dir, "train-gan")
    gens = {}
    for ckpt in sorted(gan_dir.glob("*/gan_final.pt")):
        gen, _, _ = gan_mod.load_gan_checkpoint(ckpt)
        gens[ckpt.parent.name] = gen
    if not gens:
        raise DependencyError(
            f"no GAN checkpoints under {gan_dir}; run `histogan train-gan` first",
            produced_by="train-gan")
    return gens


@main.command("eval")
@common_options
@cli_command
def eval_cmd(config_path, out, seed, overrides):
    """Run the metric battery and write the report plus t-SNE exports."""
    cfg = load_config(config_path, overrides, out, seed)
    m = cfg["metrics"]
    paths = _corpus_paths(cfg)
    gens = _load_gans(cfg)
    require(paths["snn_ckpt"], "train-snn")
    extractor, _ = snn_mod.load_checkpoint(paths["snn_ckpt"])
    patches = corpus_mod.load_patches(paths["corpus"])
    size = int(cfg["gan"]["image_size"])
    real = resize_images([p.pixels for p in patches], size)
    rng = np.random.default_rng(int(m["seed"]))
    if len(real) > int(m["n_real"]):
        real = [real[i] for i in sorted(rng.choice(len(real), int(m["n_real"]),
                                                   replace=False))]
    n_fake_each = max(2, int(m["n_fake"]) // len(gens))
    fake = []
    for cls, gen in sorted(gens.items()):
        fake += list(gan_mod.sample(gen, n_fake_each, seed=int(m["seed"])))

    real_feats = metrics_mod.embed_many(extractor, real)
    fake_feats = metrics_mod.embed_many(extractor, fake)
    stats_r = metrics_mod.FeatureStats(
        mu=real_feats.mean(0), sigma=metrics_mod._sym_cov(real_feats), n=len(real))
    stats_f = metrics_mod.FeatureStats(
        mu=fake_feats.mean(0), sigma=metrics_mod._sym_cov(fake_feats), n=len(fake))
    k = min(int(m["pr_k"]), len(real) - 1, len(fake) - 1)
    p, r, f1 = metrics_mod.gen_precision_recall(real_feats, fake_feats, k=k)
    first_gen = gens[sorted(gens)[0]]
    report = metrics_mod.MetricReport(
        fid=metrics_mod.fid(stats_r, stats_f),
        kid=metrics_mod.kid(real_feats, fake_feats),
        ppl=metrics_mod.ppl(first_gen, extractor, n_paths=int(m["ppl_paths"]),
                            steps=int(m["ppl_steps"]), seed=int(m["seed"])),
        precision=p, recall=r, f1=f1, n_real=len(real), n_fake=len(fake),
        extractor_digest=extractor.parameter_digest(), seed=int(m["seed"]))
    report_path = paths["metrics"] / "report.json"
    report.to_json(report_path)
    artifacts = [report_path]
    rows = metrics_mod.tsne_export(real_feats, fake_feats, seed=int(m["seed"]))
    for cls in gens:
        artifacts.append(metrics_mod.write_tsne_csv(
            rows, paths["runs"] / f"gan_{cls}" / "tsne.csv"))
    write_manifest(cfg, "eval", artifacts)
    click.echo(report.to_json())


@main.command()
@common_options
@cli_command
def downstream(config_path, out, seed, overrides):
    """Synthetic-vs-real downstream classification comparison."""
    cfg = load_config(config_path, overrides, out, seed)
    d = cfg["downstream"]
    paths = _corpus_paths(cfg)
    gens = _load_gans(cfg)
    patches = corpus_mod.load_patches(paths["corpus"])
    size = int(cfg["gan"]["image_size"])
    rng = np.random.default_rng(int(d["seed"]))
    labeled = [(img, p.class_label) for p, img in
               zip(patches, resize_images([p.pixels for p in patches], size))]
    order = rng.permutation(len(labeled))
    n_test = max(len(gens), int(0.3 * len(labeled)))
    test_set = [labeled[i] for i in order[:n_test]]
    real_train = [labeled[i] for i in order[n_test:]]
    synth_set = []
    for cls, gen in sorted(gens.items()):
        for img in gan_mod.sample(gen, int(d["n_synth_per_class"]),
                                  seed=int(d["seed"])):
            synth_set.append((img, cls))
    cls_cfg = downstream_mod.ClsConfig(
        trainable_tail_layers=int(d["trainable_tail_layers"]),
        head_units=int(d["head_units"]), epochs=int(d["epochs"]),
        batch_size=int(d["batch_size"]), lr=d["lr"], lr_step=int(d["lr_step"]),
        lr_gamma=d["lr_gamma"], seed=int(d["seed"]))
    rep_synth, rep_real = downstream_mod.run_comparison(
        synth_set, real_train, test_set, cls_cfg)
    p1 = paths["downstream"] / "report_synthetic.json"
    p2 = paths["downstream"] / "report_real.json"
    rep_synth.to_json(p1)
    rep_real.to_json(p2)
    write_manifest(cfg, "downstream", [p1, p2])
    click.echo(f"synthetic-trained: {rep_synth.overall:.4f}  "
               f"real-trained: {rep_real.overall:.4f}")


@main.command()
@common_options
@click.option("--build-index", "build_dirs", multiple=True,
              metavar="INDEX_ID=IMAGE_DIR", help="Build an index before serving.")
@cli_command
def serve(config_path, out, seed, overrides, build_dirs):
    """Start the similarity-explorer HTTP service."""
    cfg = load_config(config_path, overrides, out, seed)
    paths = _corpus_paths(cfg)
    svc = simsvc_mod.ServiceConfig(
        store_dir=paths["root"] / "indexes", runs_dir=paths["runs"],
        extractor_path=paths["snn_ckpt"] if paths["snn_ckpt"].exists() else None,
        host=cfg["serve"]["host"], port=int(cfg["serve"]["port"]))
    if build_dirs:
        require(paths["snn_ckpt"], "train-snn")
        extractor, _ = snn_mod.load_checkpoint(paths["snn_ckpt"])
        for spec_item in build_dirs:
            index_id, image_dir = spec_item.split("=", 1)
            simsvc_mod.build_index(image_dir, extractor, index_id, svc.store_dir)
    simsvc_mod.serve(svc)


if __name__ == "__main__":
    main()
