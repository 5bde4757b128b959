"""Command line entry point orchestrating the full pipeline.

Subcommands map onto the library operations:

  generate       synthesize RVEs, solve targets, write manifest
  solve          (re)solve targets for a manifest, or one sample
  fit-pca        fit the correlation-map PCA basis on the training split
  features       compute the 51-entry descriptor matrix + standardization
  train          train one model archetype, write a checkpoint
  eval           evaluation report on a split
  mine           uncertainty guided sample mining gallery
  select         feature rankings and optional subset-size sweep
  physics-check  translation robustness + rotation consistency
  report         aggregate artifacts of an output directory

Every command prints a machine readable JSON summary on stdout and uses
exit codes 0 (ok), 2 (config), 3 (data), 4 (numeric), 5 (io).  Flags
override entries of an optional JSON config file (--config); environment
variables HOMOGNET_OUT and HOMOGNET_JOBS supply defaults for --out and
--jobs.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import dataio, features, grid, metrics, mining, models, selection
from .errors import ConfigError, DataError, HomognetError, IoError, NumericError
from .homogenize import solve_effective_conductivity
from .neural import TrainConfig

EXIT_CODES = {ConfigError: 2, DataError: 3, NumericError: 4, IoError: 5}


def _default_jobs():
    env = os.environ.get("HOMOGNET_JOBS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def _out_dir(args) -> Path:
    out = args.out or os.environ.get("HOMOGNET_OUT")
    if not out:
        raise ConfigError("no output directory: pass --out or set HOMOGNET_OUT")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _emit(summary: dict):
    print(json.dumps(dataio._jsonable(summary), sort_keys=True))


def _load_corpus(manifest_path, need_features=True):
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    manifest = dataio.load_manifest(manifest_path)
    dataio.validate_manifest(manifest, base)
    images = dataio.read_npy(base / manifest["files"]["images"])
    targets = dataio.read_npy(base / manifest["files"]["targets"])
    feats = pipeline = None
    if need_features:
        if not manifest["files"].get("features"):
            raise ConfigError("manifest has no features; run `homognet features` first")
        feats = dataio.read_npy(base / manifest["files"]["features"])
        pipeline = dataio.load_feature_pipeline(base)
    return manifest, base, images, targets, feats, pipeline


def _splits(manifest):
    return {k: np.asarray(v, int) for k, v in manifest["splits"].items()}


def _contrast_index(manifest, contrast):
    contrasts = [float(c) for c in manifest["contrasts"]]
    if contrast is None:
        if len(contrasts) == 1:
            return 0, contrasts[0]
        if 5.0 in contrasts:
            return contrasts.index(5.0), 5.0
        raise ConfigError(f"pick --contrast from the manifest contrasts {contrasts}")
    contrast = float(contrast)
    if contrast not in contrasts:
        raise ConfigError(f"contrast {contrast} not in manifest contrasts {contrasts}")
    return contrasts.index(contrast), contrast


# ---------------------------------------------------------------------------
# subcommands


def cmd_generate(args):
    out = _out_dir(args)
    sizes = tuple(int(s) for s in args.sizes.split(","))
    manifest = dataio.build_dataset(
        out,
        sizes=sizes,
        resolution=args.resolution,
        contrasts=[float(c) for c in args.contrasts.split(",")],
        seed=args.seed,
        tol=args.tol,
        jobs=args.jobs,
    )
    return {
        "command": "generate",
        "manifest": str(out / "manifest.json"),
        "n_samples": manifest["n_samples"],
        "hashes": manifest["hashes"],
        "seed": args.seed,
    }


def cmd_solve(args):
    manifest_path = Path(args.manifest)
    base = manifest_path.parent
    manifest = dataio.load_manifest(manifest_path)
    images = dataio.read_npy(base / manifest["files"]["images"])
    if args.index is not None:
        if not 0 <= args.index < len(images):
            raise ConfigError(f"sample index {args.index} outside 0..{len(images) - 1}")
        rve = grid.as_rve(images[args.index])
        k = solve_effective_conductivity(rve, args.contrast or 5.0, tol=args.tol)
        return {
            "command": "solve",
            "index": args.index,
            "contrast": args.contrast or 5.0,
            "kappa": k.kappa,
            "volume_fraction": grid.volume_fraction(rve),
        }
    contrasts = (
        [float(c) for c in args.contrasts.split(",")] if args.contrasts else manifest["contrasts"]
    )
    targets = np.stack(
        [
            np.stack([solve_effective_conductivity(grid.as_rve(img), R, tol=args.tol).kappa
                      for R in contrasts])
            for img in images
        ]
    )
    path = dataio.write_npy(targets.astype(np.float64), base / manifest["files"]["targets"])
    manifest["contrasts"] = contrasts
    manifest["hashes"][path.name] = dataio.sha256_file(path)
    dataio.write_json(manifest, manifest_path)
    return {"command": "solve", "n_samples": len(images), "contrasts": contrasts,
            "targets_hash": manifest["hashes"][path.name]}


def cmd_fit_pca(args):
    manifest_path = Path(args.manifest)
    base = manifest_path.parent
    manifest = dataio.load_manifest(manifest_path)
    images = dataio.read_npy(base / manifest["files"]["images"])
    train_idx = np.asarray(manifest["splits"]["train"], int)
    maps = np.stack([features.two_pcf(grid.as_rve(images[i])) for i in train_idx])
    basis = features.fit_pca(maps, k=args.k)
    meta = dataio.save_pca_basis(basis, base)
    return {"command": "fit-pca", "k": basis.k, "fitted_on": basis.fitted_on,
            "explained_variance": basis.weights, "hashes": meta["hashes"]}


def cmd_features(args):
    manifest_path = Path(args.manifest)
    base = manifest_path.parent
    manifest = dataio.load_manifest(manifest_path)
    images = dataio.read_npy(base / manifest["files"]["images"])
    basis = dataio.load_pca_basis(base)
    config = features.FeatureConfig()
    raw = np.stack(
        [features.assemble_feature_vector(grid.as_rve(img), basis, config) for img in images]
    )
    train_idx = np.asarray(manifest["splits"]["train"], int)
    stats = features.standardize_fit(raw[train_idx])
    entries = dataio.save_feature_matrix(raw, stats, config, base)
    manifest["files"].update(entries)
    manifest["hashes"]["features.npy"] = dataio.sha256_file(base / "features.npy")
    dataio.write_json(manifest, manifest_path)
    return {"command": "features", "n_samples": len(raw), "n_features": raw.shape[1],
            "features_hash": manifest["hashes"]["features.npy"]}


def _train_config(args, kind) -> TrainConfig:
    loss = args.loss
    if loss is None:
        loss = "rel_mse" if kind == "hybrid_variable" else "mse"
    return TrainConfig(
        learning_rate=args.lr,
        weight_decay=args.wd,
        batch_size=args.batch_size,
        max_epochs=args.max_epochs,
        patience=args.patience,
        seed=args.seed,
        loss=loss,
    )


def cmd_train(args):
    kind = args.model.replace("-", "_")
    manifest, base, images, targets, feats, pipeline = _load_corpus(args.manifest)
    out = _out_dir(args)
    splits = _splits(manifest)
    feats_std = features.standardize_apply(feats, pipeline.stats)
    if kind == "hybrid_variable":
        if len(manifest["contrasts"]) < 2:
            raise ConfigError("variable-contrast training needs several contrasts in the manifest")
        tdata = targets
        contrasts = np.asarray(manifest["contrasts"], float)
    else:
        ci, _ = _contrast_index(manifest, args.contrast)
        tdata = targets[:, ci, :]
        contrasts = None
    data = models.ModelData(
        features=feats_std,
        targets=tdata,
        train_idx=splits["train"],
        val_idx=splits["val"],
        images=images,
        contrasts=contrasts,
    )
    config = _train_config(args, kind)
    dense_config = TrainConfig(**{**config.__dict__,
                                  "max_epochs": args.dense_max_epochs,
                                  "patience": args.dense_patience})
    if kind in ("vol", "bnn"):
        config = dense_config
    bundle = models.build_model(kind, resolution=manifest["resolution"],
                                input_dim=feats_std.shape[1], seed=args.seed)
    use_aug = args.augment
    if use_aug is None:
        # translation augmentation pays off for the convolutional branches
        use_aug = kind in ("inception", "hybrid", "hybrid_variable")
    augment = models.AugmentConfig() if use_aug else None
    t0 = time.perf_counter()
    history = models.train_model(bundle, data, config, augment=augment,
                                 stage2_epochs=args.stage2_epochs,
                                 dense_config=dense_config)
    train_seconds = time.perf_counter() - t0

    ckpt = out / f"model-{args.model}.ckpt"
    meta = {
        "config": config.__dict__,
        "augment": use_aug,
        "manifest_hash": dataio.sha256_file(base / "manifest.json"),
        "seed": args.seed,
    }
    dataio.save_model_bundle(bundle, ckpt, meta=meta)
    if isinstance(history, list):  # multistage
        stages = [
            {"stage": r.stage, "trained": r.trained, "epochs": r.history.epochs,
             "val_loss": r.history.val_loss, "train_loss": r.history.train_loss,
             "end_val": r.end_val()}
            for r in history
        ]
        dataio.write_json({"stages": stages}, out / f"stages-{args.model}.json")
        final_val = stages[-1]["end_val"]
    else:
        dataio.write_json(
            {"train_loss": history.train_loss, "val_loss": history.val_loss,
             "best_epoch": history.best_epoch},
            out / f"history-{args.model}.json",
        )
        final_val = history.best_val()
    return {"command": "train", "model": args.model, "checkpoint": str(ckpt),
            "checkpoint_hash": dataio.sha256_file(ckpt), "val_loss": final_val,
            "train_seconds": round(train_seconds, 2), "seed": args.seed}


def _predictions(bundle, images, feats_std, contrast=None):
    if bundle.kind == "bnn":
        mu, sigma = bundle.predict(features=feats_std)
        return mu, sigma
    pred = bundle.predict(features=feats_std, images=images, contrast=contrast)
    return pred, None


def cmd_eval(args):
    manifest, base, images, targets, feats, pipeline = _load_corpus(args.manifest)
    out = _out_dir(args)
    bundle, header = dataio.load_model_bundle(args.checkpoint)
    splits = _splits(manifest)
    idx = splits[args.split]
    feats_std = features.standardize_apply(feats, pipeline.stats)
    summary = {"command": "eval", "model": header["model_kind"], "split": args.split,
               "n_samples": len(idx),
               "provenance": {"checkpoint": dataio.sha256_file(args.checkpoint),
                              "manifest": dataio.sha256_file(base / "manifest.json")}}
    if bundle.uses_contrast:
        per_contrast = {}
        for ci, R in enumerate(manifest["contrasts"]):
            pred, _ = _predictions(bundle, images[idx], feats_std[idx], contrast=float(R))
            rep = metrics.evaluate(targets[idx, ci, :], pred)
            per_contrast[str(R)] = rep.as_dict()
            dataio.write_r2_scatter_svg(out / f"r2-{args.split}-R{R}.svg",
                                        targets[idx, ci, :], pred)
        summary["per_contrast"] = per_contrast
        dataio.write_json(per_contrast, out / f"eval-{args.split}-variable.json")
    else:
        ci, R = _contrast_index(manifest, args.contrast)
        pred, sigma = _predictions(bundle, images[idx], feats_std[idx])
        rep = metrics.evaluate(targets[idx, ci, :], pred)
        summary["contrast"] = R
        summary["report"] = rep.as_dict()
        dataio.write_json(summary["report"], out / f"eval-{args.split}-{header['model_kind']}.json")
        dataio.write_csv(
            out / f"eval-{args.split}-{header['model_kind']}.csv",
            ["metric", "value"],
            [["rel_rmse_pct", rep.rel_rmse_pct], ["mse", rep.mse],
             ["n_samples", rep.n_samples]]
            + [[f"mean_rel_err_pct_{k}", v] for k, v in rep.mean_rel_err_pct.items()]
            + [[f"r2_{k}", v] for k, v in rep.r2.items()],
        )
        dataio.write_r2_scatter_svg(out / f"r2-{args.split}-{header['model_kind']}.svg",
                                    targets[idx, ci, :], pred)
    return summary


def cmd_mine(args):
    manifest, base, images, targets, feats, pipeline = _load_corpus(args.manifest)
    out = _out_dir(args)
    bundle, header = dataio.load_model_bundle(args.checkpoint)
    if bundle.kind != "bnn":
        raise ConfigError("mining needs an aleatoric (bnn) checkpoint")
    splits = _splits(manifest)
    idx = splits[args.split]
    ci, R = _contrast_index(manifest, args.contrast)
    feats_std = features.standardize_apply(feats, pipeline.stats)
    mu, sigma = bundle.predict(features=feats_std[idx])
    records = mining.records_from_predictions(targets[idx, ci, :], mu, sigma,
                                              iteration=args.iteration)
    result = mining.rank_and_export(
        records, images=images[idx], out_dir=out,
        error_quantile=args.error_quantile, sigma_quantile=args.sigma_quantile, k=args.k,
    )
    return {"command": "mine", "split": args.split, "n_selected": len(result.selected_ids),
            "csv": result.csv_path, "gallery": result.gallery_path,
            "selected_ids": result.selected_ids[: args.k]}


def cmd_select(args):
    manifest, base, images, targets, feats, pipeline = _load_corpus(args.manifest)
    out = _out_dir(args)
    splits = _splits(manifest)
    ci, R = _contrast_index(manifest, args.contrast)
    feats_std = features.standardize_apply(feats, pipeline.stats)
    tri = splits["train"]
    y = targets[:, ci, :]
    methods = args.methods.split(",")
    rankings = {}
    rows = []
    for m in methods:
        r = selection.rank_features(feats_std[tri], y[tri], m)
        rankings[m] = r
        rows.append([m] + r.order.tolist())
    dataio.write_csv(out / "rankings.csv",
                     ["method"] + [f"rank_{i}" for i in range(feats.shape[1])], rows)
    summary = {"command": "select", "methods": methods,
               "top10": {m: rankings[m].order[:10] for m in methods}}
    if args.sweep:
        config = TrainConfig(max_epochs=args.max_epochs, patience=args.patience, seed=args.seed)
        sizes = [int(s) for s in args.sizes.split(",")] if args.sizes else None
        curves = selection.subset_sweep(
            feats_std, y, rankings, splits["train"], splits["val"],
            sizes=sizes, repeats=args.repeats, config=config,
        )
        rows = []
        for m, c in curves.items():
            for s, l in zip(c["sizes"], c["losses"]):
                rows.append([m, s, l])
        dataio.write_csv(out / "sweep.csv", ["method", "size", "best_val_loss"], rows)
        dataio.write_line_svg(
            out / "sweep.svg",
            {m: (c["sizes"], c["losses"]) for m, c in curves.items()},
            xlabel="number of features", ylabel="best validation loss",
            title="subset-size sweep", logy=True,
        )
        summary["sweep"] = curves
    return summary


def cmd_physics_check(args):
    manifest, base, images, targets, feats, pipeline = _load_corpus(args.manifest)
    out = _out_dir(args)
    bundle, header = dataio.load_model_bundle(args.checkpoint)
    splits = _splits(manifest)
    idx = splits[args.split][: args.n_samples]
    ci, R = _contrast_index(manifest, args.contrast)
    contrast = float(R) if bundle.uses_contrast else None

    def predict_one(rve):
        f = pipeline.transform(rve)[None, :]
        img = rve.pixels[None, ...]
        if bundle.kind == "bnn":
            return bundle.predict(features=f)[0][0]
        return bundle.predict(features=f, images=img, contrast=contrast)[0]

    rng = np.random.default_rng(args.seed or 0)
    covs, spreads = [], []
    for i in idx:
        res = metrics.translation_robustness(predict_one, grid.as_rve(images[i]),
                                             n_shifts=args.n_shifts, rng=rng)
        covs.append(res["cov"])
        spreads.append(res["std"])
    covs = np.asarray(covs)
    rot = metrics.rotation_consistency(predict_one, images[idx], targets[idx, ci, :])
    payload = {
        "translation": {
            "n_samples": len(idx),
            "n_shifts": args.n_shifts,
            "median_cov": np.median(covs, axis=0),
            "max_cov": covs.max(axis=0),
        },
        "rotation": {"original": rot["original"].as_dict(), "rotated": rot["rotated"].as_dict()},
        "provenance": {"checkpoint": dataio.sha256_file(args.checkpoint),
                       "manifest": dataio.sha256_file(base / "manifest.json")},
    }
    dataio.write_json(payload, out / "physics-check.json")
    return {"command": "physics-check", **payload}


def cmd_report(args):
    out = _out_dir(args)
    artifacts = {}
    for p in sorted(out.glob("*.json")):
        if p.name == "report.json":
            continue
        artifacts[p.name] = {"sha256": dataio.sha256_file(p)}
        try:
            content = dataio.load_json(p)
        except HomognetError:
            continue
        if "rel_rmse_pct" in content:
            artifacts[p.name]["rel_rmse_pct"] = content["rel_rmse_pct"]
    payload = {"command": "report", "directory": str(out), "artifacts": artifacts}
    dataio.write_json(payload, out / "report.json")
    return payload


# ---------------------------------------------------------------------------
# argument parsing


def _add_common(p, seed_required=False, out=True):
    if out:
        p.add_argument("--out", help="output directory (or HOMOGNET_OUT)")
    p.add_argument("--seed", type=int, required=seed_required,
                   help="rng seed" + (" (required)" if seed_required else ""))
    p.add_argument("--config", help="JSON config file; flags override its entries")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="homognet", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="synthesize a dataset")
    _add_common(p, seed_required=True)
    p.add_argument("--sizes", default="600,150,150,150", help="train,val,test,benchmark counts")
    p.add_argument("--resolution", type=int, default=128)
    p.add_argument("--contrasts", default="5", help="comma separated phase contrasts")
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--jobs", type=int, default=_default_jobs())
    p.set_defaults(fn=cmd_generate, _subparser=p)

    p = sub.add_parser("solve", help="solve effective conductivities")
    _add_common(p, out=False)
    p.add_argument("--manifest", required=True)
    p.add_argument("--index", type=int, help="solve a single sample and print kappa")
    p.add_argument("--contrast", type=float, help="contrast for --index mode")
    p.add_argument("--contrasts", help="replace the manifest contrast list")
    p.add_argument("--tol", type=float, default=1e-8)
    p.set_defaults(fn=cmd_solve, _subparser=p)

    p = sub.add_parser("fit-pca", help="fit the 2PCF PCA basis on the training split")
    _add_common(p, out=False)
    p.add_argument("--manifest", required=True)
    p.add_argument("--k", type=int, default=features.N_PCF_COEFFS)
    p.set_defaults(fn=cmd_fit_pca, _subparser=p)

    p = sub.add_parser("features", help="compute the descriptor matrix")
    _add_common(p, out=False)
    p.add_argument("--manifest", required=True)
    p.set_defaults(fn=cmd_features, _subparser=p)

    p = sub.add_parser("train", help="train a model archetype")
    _add_common(p, seed_required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--model", required=True,
                   choices=["vol", "bnn", "conv", "inception", "hybrid", "hybrid-variable"])
    p.add_argument("--contrast", type=float, help="training contrast (fixed-contrast models)")
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--wd", type=float, default=1e-4)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--max-epochs", type=int, default=200)
    p.add_argument("--patience", type=int, default=15)
    p.add_argument("--dense-max-epochs", type=int, default=1500,
                   help="epoch budget for dense-only models and hybrid stages 1/3")
    p.add_argument("--dense-patience", type=int, default=100)
    p.add_argument("--loss", choices=["mse", "rel_mse"])
    p.add_argument("--stage2-epochs", type=int, default=20)
    p.add_argument("--augment", action=argparse.BooleanOptionalAction, default=None)
    p.set_defaults(fn=cmd_train, _subparser=p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="val", choices=["train", "val", "test", "benchmark"])
    p.add_argument("--contrast", type=float)
    p.set_defaults(fn=cmd_eval, _subparser=p)

    p = sub.add_parser("mine", help="rank and export suspicious samples")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True, help="aleatoric (bnn) checkpoint")
    p.add_argument("--split", default="test", choices=["train", "val", "test", "benchmark"])
    p.add_argument("--contrast", type=float)
    p.add_argument("--error-quantile", type=float, default=0.9)
    p.add_argument("--sigma-quantile", type=float, default=0.9)
    p.add_argument("--k", type=int, default=16)
    p.add_argument("--iteration", default="")
    p.set_defaults(fn=cmd_mine, _subparser=p)

    p = sub.add_parser("select", help="rank features, optionally sweep subset sizes")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--contrast", type=float)
    p.add_argument("--methods", default="pearson,anova,rfe")
    p.add_argument("--sweep", action="store_true")
    p.add_argument("--sizes", help="comma separated subset sizes for the sweep")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--max-epochs", type=int, default=120)
    p.add_argument("--patience", type=int, default=15)
    p.set_defaults(fn=cmd_select, _subparser=p)

    p = sub.add_parser("physics-check", help="translation / rotation checks of a model")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="benchmark",
                   choices=["train", "val", "test", "benchmark"])
    p.add_argument("--contrast", type=float)
    p.add_argument("--n-shifts", type=int, default=100)
    p.add_argument("--n-samples", type=int, default=50)
    p.set_defaults(fn=cmd_physics_check, _subparser=p)

    p = sub.add_parser("report", help="aggregate the artifacts of an output directory")
    _add_common(p)
    p.set_defaults(fn=cmd_report, _subparser=p)

    return parser


def _apply_config_file(parser, args):
    """Config file entries override parser defaults; explicit flags win.

    An option still at its parser default is treated as not user-set, so
    `defaults < config file < flags` is the effective precedence.
    """
    if getattr(args, "config", None):
        sub = getattr(args, "_subparser", parser)
        overrides = dataio.load_json(args.config)
        for key, value in overrides.items():
            attr = key.replace("-", "_")
            if attr.startswith("_") or not hasattr(args, attr) or attr in ("fn", "command"):
                raise ConfigError(f"config file entry {key!r} is not a known option")
            if getattr(args, attr) == sub.get_default(attr):
                setattr(args, attr, value)
    return args


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args = _apply_config_file(parser, args)
        summary = args.fn(args)
        _emit(summary)
        return 0
    except HomognetError as exc:
        for cls, code in EXIT_CODES.items():
            if isinstance(exc, cls):
                category = {2: "config", 3: "data", 4: "numeric", 5: "io"}[code]
                print(f"error [{category}]: {exc}", file=sys.stderr)
                return code
        print(f"error [config]: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error [io]: {exc}", file=sys.stderr)
        return 5


if __name__ == "__main__":
    sys.exit(main())
