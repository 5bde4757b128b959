"""Persistence: NPY arrays, dataset manifests, checkpoints, CSV and plots.

Arrays travel as NPY version 1.0 files (little-endian, C order, dtypes
uint8 / float32 / float64) written and parsed here at byte level, so the
corpus interoperates with any NPY-speaking tool.  Every artifact gets a
sha256 content hash recorded in the manifest for provenance.
"""

from __future__ import annotations

import ast
import csv
import hashlib
import json
import struct
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, IoError, NumericError
from .grid import InclusionSpec, generate_rve
from .homogenize import solve_effective_conductivity
from .features import (
    FeatureConfig,
    FeaturePipeline,
    PcaBasis,
    StandardizationStats,
    feature_names,
)
from .errors import SolverConvergenceError
from . import models as _models
from . import neural as _neural

_MAGIC = b"\x93NUMPY"
_SUPPORTED_DESCR = {"|u1": np.uint8, "<u1": np.uint8, "<f4": np.float32, "<f8": np.float64}
_DESCR_FOR = {np.dtype(np.uint8): "|u1", np.dtype(np.float32): "<f4", np.dtype(np.float64): "<f8"}

CKPT_MAGIC = "homognet-checkpoint"


# ---------------------------------------------------------------------------
# NPY 1.0


def write_npy(array: np.ndarray, path) -> Path:
    """Write a C-ordered little-endian NPY v1.0 file."""
    array = np.ascontiguousarray(array)
    if array.dtype not in _DESCR_FOR:
        raise DataError(f"unsupported dtype {array.dtype}; use uint8, float32 or float64")
    descr = _DESCR_FOR[array.dtype]
    header = "{'descr': '%s', 'fortran_order': False, 'shape': %s, }" % (
        descr,
        repr(tuple(int(s) for s in array.shape)),
    )
    # pad to 64-byte alignment of the payload, newline-terminated
    pad = 64 - (len(_MAGIC) + 4 + len(header) + 1) % 64
    header = header + " " * (pad % 64) + "\n"
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(bytes([1, 0]))
        fh.write(struct.pack("<H", len(header)))
        fh.write(header.encode("latin1"))
        fh.write(array.tobytes(order="C"))
    return path


def _parse_npy_header(fh, path):
    head = fh.read(len(_MAGIC))
    if head != _MAGIC:
        raise DataError(f"{path}: not an NPY file (magic mismatch)")
    ver = fh.read(2)
    if len(ver) != 2 or (ver[0], ver[1]) != (1, 0):
        raise DataError(f"{path}: unsupported NPY version {tuple(ver)}")
    raw_len = fh.read(2)
    if len(raw_len) != 2:
        raise DataError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<H", raw_len)
    header = fh.read(hlen)
    if len(header) != hlen:
        raise DataError(f"{path}: truncated header")
    try:
        meta = ast.literal_eval(header.decode("latin1"))
    except (ValueError, SyntaxError) as exc:
        raise DataError(f"{path}: malformed NPY header") from exc
    if not isinstance(meta, dict) or set(meta) != {"descr", "fortran_order", "shape"}:
        raise DataError(f"{path}: malformed NPY header keys")
    if meta["fortran_order"]:
        raise DataError(f"{path}: fortran-order arrays are not supported")
    if meta["descr"] not in _SUPPORTED_DESCR:
        raise DataError(f"{path}: unsupported dtype {meta['descr']!r}")
    shape = tuple(int(s) for s in meta["shape"])
    return _SUPPORTED_DESCR[meta["descr"]], shape


def read_npy_header(path) -> tuple[np.dtype, tuple]:
    """Parse only dtype and shape (cheap shape validation)."""
    with open(path, "rb") as fh:
        dtype, shape = _parse_npy_header(fh, path)
    return np.dtype(dtype), shape


def read_npy(path) -> np.ndarray:
    path = Path(path)
    with open(path, "rb") as fh:
        dtype, shape = _parse_npy_header(fh, path)
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        payload = fh.read()
    expected = count * np.dtype(dtype).itemsize
    if len(payload) < expected:
        raise DataError(f"{path}: truncated payload ({len(payload)} of {expected} bytes)")
    return np.frombuffer(payload[:expected], dtype=dtype).reshape(shape).copy()


# ---------------------------------------------------------------------------
# hashing, json, csv


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, Path):
        return str(obj)
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


def write_json(obj, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")
    return path


def load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON") from exc
    except OSError as exc:
        raise IoError(f"{path}: {exc}") from exc


def write_csv(path, header, rows) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    return path


# ---------------------------------------------------------------------------
# dataset build


SPLIT_NAMES = ("train", "val", "test", "benchmark")


def _kind_label(spec: InclusionSpec) -> str:
    kinds = spec.kinds()
    return "+".join(kinds)


def default_split_specs(resolution: int) -> dict:
    """Generator spec cycle per split.

    Training-affine splits cycle through circle / rectangle structures of
    varied size scales and orientation spreads (isotropic as well as
    aligned, where elongated inclusions create strong anisotropy that the
    volume fraction alone cannot express).  The benchmark uses ellipses
    and mixed-kind structures, which never occur in training.
    """
    r = resolution
    small = (max(5.0, r / 16.0), max(8.0, r / 6.0))
    medium = (max(6.0, r / 12.0), max(10.0, r / 3.0))
    large = (max(8.0, r / 5.0), max(12.0, r / 2.3))
    base = dict(volume_fraction_range=(0.2, 0.8), overlap_allowed=True)
    tick = np.pi / 16.0
    affine = [
        InclusionSpec(kind="circle", count_range=(4, 80), size_range=small, **base),
        InclusionSpec(kind="rectangle", count_range=(2, 40), size_range=medium, **base),
        InclusionSpec(kind="circle", count_range=(1, 12), size_range=large, **base),
        InclusionSpec(kind="rectangle", count_range=(2, 40), size_range=medium,
                      orientation_range=(-tick, tick), **base),
        InclusionSpec(kind="rectangle", count_range=(2, 40), size_range=medium,
                      orientation_range=(np.pi / 2 - tick, np.pi / 2 + tick), **base),
        InclusionSpec(kind="rectangle", count_range=(2, 40), size_range=medium,
                      orientation_range=(np.pi / 4 - tick, np.pi / 4 + tick), **base),
    ]
    unseen = [
        InclusionSpec(kind="ellipse", count_range=(2, 40), size_range=medium, **base),
        InclusionSpec(kind=("circle", "rectangle"), count_range=(2, 40), size_range=medium, **base),
    ]
    return {"train": affine, "val": affine, "test": affine, "benchmark": unseen}


def _build_sample(args):
    spec, seed, resolution, contrasts, tol, retries = args
    incident = None
    for attempt in range(retries + 1):
        rve = generate_rve(spec, seed + 7919 * attempt, resolution)
        try:
            targets = np.stack(
                [solve_effective_conductivity(rve, R, tol=tol).kappa for R in contrasts]
            )
            return rve.pixels, targets, incident
        except SolverConvergenceError as exc:
            incident = f"seed {seed} attempt {attempt}: {exc}"
    raise NumericError(f"sample with seed {seed} failed to solve after {retries + 1} attempts")


def build_dataset(
    out_dir,
    sizes=(600, 150, 150, 150),
    resolution: int = 128,
    contrasts=(5.0,),
    seed: int = 0,
    tol: float = 1e-8,
    jobs: int = 1,
    split_specs: dict | None = None,
    solver_retries: int = 3,
) -> dict:
    """Generate RVEs, solve all contrasts and write arrays plus a manifest.

    Fully reproducible from the seed: per-sample seeds derive from one
    seed sequence and results are collected in sample order regardless of
    the worker count.
    """
    if len(sizes) != 4:
        raise ConfigError("sizes must be (train, val, test, benchmark)")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    contrasts = [float(c) for c in contrasts]
    split_specs = split_specs or default_split_specs(resolution)

    n_total = int(sum(sizes))
    sample_seeds = np.random.SeedSequence(seed).generate_state(n_total, np.uint32).tolist()
    tasks, sample_kinds, splits = [], [], {}
    pos = 0
    for split, count in zip(SPLIT_NAMES, sizes):
        idx = list(range(pos, pos + count))
        splits[split] = idx
        cycle = split_specs[split]
        for i in idx:
            spec = cycle[i % len(cycle)]
            tasks.append((spec, sample_seeds[i], resolution, contrasts, tol, solver_retries))
            sample_kinds.append(_kind_label(spec))
        pos += count

    t0 = time.perf_counter()
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_build_sample, tasks, chunksize=8))
    else:
        results = [_build_sample(t) for t in tasks]
    elapsed = time.perf_counter() - t0

    images = np.stack([r[0] for r in results]).astype(np.uint8) if results else \
        np.zeros((0, resolution, resolution), np.uint8)
    targets = np.stack([r[1] for r in results]) if results else \
        np.zeros((0, len(contrasts), 3))
    incidents = [r[2] for r in results if r[2]]

    images_path = write_npy(images, out_dir / "images.npy")
    targets_path = write_npy(targets.astype(np.float64), out_dir / "targets.npy")

    manifest = {
        "version": 1,
        "resolution": resolution,
        "n_samples": n_total,
        "contrasts": contrasts,
        "files": {"images": images_path.name, "targets": targets_path.name,
                  "features": None, "feature_meta": None},
        "splits": splits,
        "split_kinds": {s: sorted({sample_kinds[i] for i in splits[s]}) for s in SPLIT_NAMES},
        "sample_kinds": sample_kinds,
        "seeds": {"root": int(seed), "samples": sample_seeds},
        "solver": {"tol": tol, "method": "cg", "build_seconds": round(elapsed, 3)},
        "generator": {
            "placement": "uniform random centers; sizes and orientations uniform in the "
                         "spec ranges; inclusions added until the sampled volume fraction "
                         "target is reached; pixel-center rasterization with periodic wrap",
            "specs": {s: [asdict(sp) for sp in split_specs[s]] for s in SPLIT_NAMES},
        },
        "hashes": {images_path.name: sha256_file(images_path),
                   targets_path.name: sha256_file(targets_path)},
        "incidents": incidents,
    }
    write_json(manifest, out_dir / "manifest.json")
    return manifest


def load_manifest(path) -> dict:
    manifest = load_json(path)
    if "splits" not in manifest or "files" not in manifest:
        raise DataError(f"{path}: not a dataset manifest")
    return manifest


def validate_manifest(manifest: dict, base_dir, check_hashes: bool = False) -> None:
    """Cross-checks shapes, split partitioning and benchmark kind disjointness."""
    base = Path(base_dir)
    n = manifest["n_samples"]
    res = manifest["resolution"]
    files = manifest["files"]

    _, img_shape = read_npy_header(base / files["images"])
    if img_shape != (n, res, res):
        raise DataError(f"images shape {img_shape} inconsistent with manifest ({n},{res},{res})")
    _, tgt_shape = read_npy_header(base / files["targets"])
    if tgt_shape != (n, len(manifest["contrasts"]), 3):
        raise DataError(f"targets shape {tgt_shape} inconsistent with manifest")
    if files.get("features"):
        _, f_shape = read_npy_header(base / files["features"])
        if f_shape[0] != n:
            raise DataError(f"features shape {f_shape} inconsistent with manifest")

    seen = sorted(i for split in SPLIT_NAMES for i in manifest["splits"][split])
    if seen != list(range(n)):
        raise DataError("splits do not partition the sample indices exactly")

    train_kinds = set(manifest["split_kinds"]["train"])
    bench_kinds = set(manifest["split_kinds"]["benchmark"])
    if train_kinds & bench_kinds:
        raise DataError(f"benchmark shares structure kinds with train: {train_kinds & bench_kinds}")

    if check_hashes:
        for name, digest in manifest["hashes"].items():
            actual = sha256_file(base / name)
            if actual != digest:
                raise DataError(f"{name}: content hash mismatch")


# ---------------------------------------------------------------------------
# feature artifacts


def save_pca_basis(basis: PcaBasis, out_dir) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    mean_p = write_npy(basis.mean_map.astype(np.float64), out_dir / "pca_mean.npy")
    comp_p = write_npy(basis.components.astype(np.float64), out_dir / "pca_components.npy")
    meta = {
        "k": basis.k,
        "weights": basis.weights,
        "fitted_on": basis.fitted_on,
        "hashes": {p.name: sha256_file(p) for p in (mean_p, comp_p)},
    }
    write_json(meta, out_dir / "pca_meta.json")
    return meta


def load_pca_basis(base_dir) -> PcaBasis:
    base = Path(base_dir)
    meta = load_json(base / "pca_meta.json")
    return PcaBasis(
        mean_map=read_npy(base / "pca_mean.npy"),
        components=read_npy(base / "pca_components.npy"),
        weights=np.asarray(meta["weights"], float),
        fitted_on=int(meta["fitted_on"]),
    )


def save_feature_matrix(
    raw_features: np.ndarray, stats: StandardizationStats, config: FeatureConfig, out_dir
) -> dict:
    """Write the raw feature matrix (NPY and CSV) plus standardization metadata."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    feats_p = write_npy(raw_features.astype(np.float64), out_dir / "features.npy")
    k = raw_features.shape[1] - (1 + 2 * config.n_band_angles + 2 + 7 + 12)
    names = feature_names(config, k=k)
    write_csv(out_dir / "features.csv", names, raw_features.tolist())
    meta = {
        "stats_mean": stats.mean,
        "stats_scale": stats.scale,
        "config": asdict(config),
        "feature_names": names,
        "hashes": {feats_p.name: sha256_file(feats_p)},
    }
    write_json(meta, out_dir / "feature_meta.json")
    return {"feature_meta": "feature_meta.json", "features": "features.npy"}


def load_feature_pipeline(base_dir) -> FeaturePipeline:
    base = Path(base_dir)
    meta = load_json(base / "feature_meta.json")
    stats = StandardizationStats(
        mean=np.asarray(meta["stats_mean"], float), scale=np.asarray(meta["stats_scale"], float)
    )
    cfg = meta.get("config", {})
    config = FeatureConfig(
        band_width_px=cfg.get("band_width_px", 4),
        n_band_angles=cfg.get("n_band_angles", 8),
        pool_window=cfg.get("pool_window"),
    )
    return FeaturePipeline(basis=load_pca_basis(base), stats=stats, config=config)


# ---------------------------------------------------------------------------
# checkpoints


def _net_arrays(net):
    return list(net.params()) + list(net.state_arrays())


def save_checkpoint(net, path, model_kind: str = "", meta: dict | None = None) -> Path:
    """JSON topology header plus a little-endian float64 weight blob."""
    arrays = _net_arrays(net)
    blob = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)
    header = {
        "format": CKPT_MAGIC,
        "version": 1,
        "model_kind": model_kind,
        "topology": net.spec(),
        "arrays": [list(a.shape) for a in arrays],
        "n_params": int(sum(a.size for a in net.params())),
        "blob_sha256": sha256_bytes(blob),
        "meta": _jsonable(meta or {}),
    }
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8"))
        fh.write(b"\n")
        fh.write(blob)
    return path


def _rebuild_from_topology(topology: dict):
    kind = topology.get("kind")
    if kind == "sequential":
        return _neural.build_layers(topology["layers"])
    if kind == "composite":
        return _models.build_composite(topology)
    if kind == "branch":
        return _models.Branch(
            name=topology["name"],
            input_key=topology["input"],
            stages=[_neural.build_layers(s) for s in topology["stages"]],
            inject=topology.get("inject"),
        )
    raise DataError(f"unknown checkpoint topology kind {kind!r}")


def load_checkpoint(path):
    """Rebuild the network and restore weights; returns (net, header)."""
    path = Path(path)
    with open(path, "rb") as fh:
        line = fh.readline()
        blob = fh.read()
    try:
        header = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: not a checkpoint file") from exc
    if header.get("format") != CKPT_MAGIC:
        raise DataError(f"{path}: not a checkpoint file")
    if sha256_bytes(blob) != header["blob_sha256"]:
        raise DataError(f"{path}: weight blob hash mismatch")
    net = _rebuild_from_topology(header["topology"])
    if isinstance(net, _models.Branch):
        arrays = net.params() + net.state_arrays()
    else:
        arrays = _net_arrays(net)
    shapes = [tuple(s) for s in header["arrays"]]
    if [tuple(a.shape) for a in arrays] != shapes:
        raise DataError(f"{path}: topology / weight-count mismatch")
    offset = 0
    flat = np.frombuffer(blob, dtype="<f8")
    expected = sum(int(np.prod(s)) if s else 1 for s in shapes)
    if flat.size != expected:
        raise DataError(f"{path}: weight blob truncated")
    for a in arrays:
        a[...] = flat[offset : offset + a.size].reshape(a.shape)
        offset += a.size
    return net, header


def save_model_bundle(bundle, path, meta: dict | None = None) -> Path:
    meta = dict(meta or {})
    meta.update(
        {
            "input_dim": bundle.input_dim,
            "resolution": bundle.resolution,
            "feature_indices": None
            if bundle.feature_indices is None
            else np.asarray(bundle.feature_indices).tolist(),
        }
    )
    main = save_checkpoint(bundle.net, path, model_kind=bundle.kind, meta=meta)
    if isinstance(bundle.net, _models.CompositeNet):
        for name in bundle.net.order:
            b = bundle.net.branches[name]
            sub_topology = {
                "kind": "branch",
                "name": b.name,
                "input": b.input_key,
                "inject": b.inject,
                "stages": [s.spec()["layers"] for s in b.stages],
            }
            arrays = b.params() + b.state_arrays()
            blob = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)
            header = {
                "format": CKPT_MAGIC,
                "version": 1,
                "model_kind": f"{bundle.kind}:{name}",
                "topology": sub_topology,
                "arrays": [list(a.shape) for a in arrays],
                "n_params": int(sum(a.size for a in b.params())),
                "blob_sha256": sha256_bytes(blob),
                "meta": {},
            }
            sub = main.with_name(f"{main.stem}.branch-{name}{main.suffix}")
            with open(sub, "wb") as fh:
                fh.write(json.dumps(header).encode("utf-8"))
                fh.write(b"\n")
                fh.write(blob)
    return main


def load_model_bundle(path):
    net, header = load_checkpoint(path)
    kind = header["model_kind"]
    if kind not in _models.MODEL_KINDS:
        raise DataError(f"{path}: unknown model kind {kind!r}")
    meta = header.get("meta", {})
    fi = meta.get("feature_indices")
    bundle = _models.ModelBundle(
        kind=kind,
        net=net,
        input_dim=meta.get("input_dim", 51),
        resolution=meta.get("resolution"),
        feature_indices=None if fi is None else np.asarray(fi, int),
    )
    return bundle, header


# ---------------------------------------------------------------------------
# plots (SVG via matplotlib, Agg backend)


def _plt():
    import matplotlib

    matplotlib.use("Agg", force=False)
    import matplotlib.pyplot as plt

    return plt


def write_line_svg(path, curves: dict, xlabel: str, ylabel: str, title: str = "", logy: bool = False) -> Path:
    plt = _plt()
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, (x, y) in curves.items():
        ax.plot(x, y, marker="o", label=label)
    if logy:
        ax.set_yscale("log")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    if curves:
        ax.legend()
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, format="svg")
    plt.close(fig)
    return path


def write_r2_scatter_svg(path, targets, predictions, title: str = "") -> Path:
    from .metrics import COMPONENT_NAMES, r_squared

    plt = _plt()
    t = np.asarray(targets, float)
    p = np.asarray(predictions, float)
    r2 = r_squared(t, p)
    fig, axes = plt.subplots(1, 3, figsize=(12, 4))
    for j, ax in enumerate(axes):
        ax.scatter(t[:, j], p[:, j], s=8, alpha=0.6)
        lo = min(t[:, j].min(), p[:, j].min())
        hi = max(t[:, j].max(), p[:, j].max())
        ax.plot([lo, hi], [lo, hi], "r--", linewidth=1)
        ax.set_xlabel(f"target {COMPONENT_NAMES[j]}")
        ax.set_ylabel(f"prediction {COMPONENT_NAMES[j]}")
        ax.set_title(f"R2 = {r2[j]:.4f}")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, format="svg")
    plt.close(fig)
    return path
