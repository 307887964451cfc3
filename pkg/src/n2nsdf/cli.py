"""Command line driver: data synthesis, prior training, reconstruction, denoising, evaluation, ablations.

Every subcommand is a pure function of (config, input files, seed) and writes
the exact config it ran with into its output directory.

Exit codes: 0 success, 1 usage error, 2 numerical failure, 3 I/O failure.
Set ``N2NSDF_NUM_THREADS`` to cap BLAS worker threads.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .finetune import FinetuneConfig, finetune
from .geometry import (
    AffineTransform,
    PointCloud,
    add_noise,
    normalize_to_unit,
    read_point_cloud,
    write_point_cloud,
)
from .mesher import TriangleMesh, extract_zero_level, read_mesh, write_mesh
from .metrics import MetricReport, evaluate_mesh, sample_mesh
from .prior import AnalyticShape, PriorConfig, default_roster, init_prior, train_prior
from .sdf_net import (
    Checkpoint,
    VanishingGradientError,
    denoise_points,
    load_checkpoint,
    save_checkpoint,
)

log = logging.getLogger("n2nsdf")

THREADS_ENV = "N2NSDF_NUM_THREADS"
ABLATION_AXES = ("region-size", "strategy", "scope", "embedding-size", "noise-level", "prior")
DEFAULT_AXIS_VALUES = {
    "region-size": [500, 1000, 3000, 5000],
    "strategy": ["sphere-knn", "sphere-fixed", "voxel"],
    "scope": ["local", "global"],
    "embedding-size": [128, 256, 512],
    "noise-level": [0.01, 0.05, 0.07],
    "prior": ["with", "without", "fixed-param", "without-embed"],
}


class UsageError(Exception):
    """Bad arguments or incompatible inputs (exit code 1)."""


class InputError(Exception):
    """Unreadable, unwritable or malformed files (exit code 3)."""


@dataclass
class ExperimentConfig:
    prior: PriorConfig = field(default_factory=PriorConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    roster: list = field(default_factory=lambda: [s.to_dict() for s in default_roster()])
    n_points: int = 2000
    sigma: float = 0.005  # absolute per-axis noise std in normalized units
    noise_kind: str = "gaussian"
    normalize: bool = True
    resolution: int = 64
    eval_samples: int = 100000
    tau: float = 0.01
    ablate_shape: int = 0
    seed: int = 0

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["prior"] = self.prior.to_dict()
        d["finetune"] = self.finetune.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        try:
            d["prior"] = PriorConfig(**d.get("prior", {}))
            d["finetune"] = FinetuneConfig(**d.get("finetune", {}))
        except TypeError as err:
            raise UsageError(f"bad config section: {err}") from None
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def shapes(self) -> list[AnalyticShape]:
        return [AnalyticShape.from_dict(s) for s in self.roster]

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(
            self,
            seed=seed,
            prior=replace(self.prior, seed=seed),
            finetune=replace(self.finetune, seed=seed),
        )


def desk_config(**overrides) -> ExperimentConfig:
    """Small settings that run the whole pipeline in minutes on one CPU core."""
    cfg = ExperimentConfig(
        prior=PriorConfig(
            epochs=500, embedding_size=64, hidden=64, samples_per_shape=2048, batch_size=512
        ),
        finetune=FinetuneConfig(iterations=1500, K=300, U=300),
        sigma=0.01,
        normalize=False,
        resolution=64,
        eval_samples=10000,
    )
    return replace(cfg, **overrides)


# ---------------------------------------------------------------------------
# helpers


def _outdir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as err:
        raise InputError(f"output directory {out} is not writable: {err}") from None
    return out


def _save_config(out: Path, cfg: ExperimentConfig) -> None:
    (out / "config.json").write_text(cfg.to_json() + "\n", encoding="utf-8")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write_trace(path: Path, trace, header=("iteration", "loss")) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i, v in enumerate(trace):
            w.writerow([i, repr(float(v))])


def read_trace(path) -> list[float]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [float(row[1]) for row in list(csv.reader(fh))[1:]]


def _read_cloud(path) -> PointCloud:
    try:
        pc, _ = read_point_cloud(path)
    except (OSError, ValueError) as err:
        raise InputError(str(err)) from None
    return pc


def _load_ckpt(path) -> Checkpoint:
    try:
        return load_checkpoint(path)
    except (OSError, ValueError, KeyError) as err:
        raise InputError(f"cannot load checkpoint {path}: {err}") from None


def _check_architecture(prior: Checkpoint, cfg: ExperimentConfig) -> None:
    want = init_prior(1, replace(cfg.prior, epochs=0)).net.header()
    have = prior.net.header()
    if want != have:
        raise UsageError(
            "prior checkpoint architecture does not match the config: "
            f"checkpoint {json.dumps(have, sort_keys=True)} vs config {json.dumps(want, sort_keys=True)}"
        )


def synth_cloud(shape: AnalyticShape, cfg: ExperimentConfig, sigma: float, seed: int):
    """Clean and noisy clouds for one analytic shape."""
    rng = np.random.default_rng(seed)
    pts, _ = shape.sample_surface(cfg.n_points, rng)
    clean = PointCloud(pts, "clean")
    return clean, add_noise(clean, sigma, rng, cfg.noise_kind)


def _gt_samples(shape: AnalyticShape, n: int, seed: int):
    return shape.sample_surface(n, np.random.default_rng(seed + 104729))


# ---------------------------------------------------------------------------
# commands


def cmd_make_data(cfg: ExperimentConfig, out) -> dict:
    """Write clean and noisy XYZ clouds per roster shape plus a manifest."""
    out = _outdir(out)
    _save_config(out, cfg)
    entries = []
    for i, shape in enumerate(cfg.shapes()):
        clean, noisy = synth_cloud(shape, cfg, cfg.sigma, cfg.seed + i)
        write_point_cloud(out / f"shape{i}_clean.xyz", clean)
        write_point_cloud(out / f"shape{i}_noisy.xyz", noisy)
        entries.append(
            {"id": i, "shape": shape.to_dict(), "clean": f"shape{i}_clean.xyz", "noisy": f"shape{i}_noisy.xyz"}
        )
    manifest = {
        "sigma": cfg.sigma,
        "noise_kind": cfg.noise_kind,
        "n_points": cfg.n_points,
        "seed": cfg.seed,
        "shapes": entries,
    }
    _write_json(out / "manifest.json", manifest)
    return manifest


def cmd_train_prior(cfg: ExperimentConfig, out, resume=None) -> Path:
    """Train the prior on the roster; writes prior.nsdf, prior_loss.csv and a manifest."""
    out = _outdir(out)
    _save_config(out, cfg)
    shapes = cfg.shapes()
    init, start = None, 0
    if resume is not None:
        init = _load_ckpt(resume)
        _check_architecture(init, cfg)
        start = int(init.extra.get("epochs_done", 0))
    ckpt, trace = train_prior(shapes, cfg.prior, init=init, start_epoch=start)
    ckpt.ids = [f"shape{i}" for i in range(len(shapes))]
    ckpt.extra = {"epochs_done": start + cfg.prior.epochs, "roster": cfg.roster}
    path = out / "prior.nsdf"
    save_checkpoint(path, ckpt)
    _write_trace(out / "prior_loss.csv", trace, ("epoch", "loss"))
    _write_json(
        out / "manifest.json",
        {
            "checkpoint": path.name,
            "shape_ids": ckpt.ids,
            "alpha": cfg.prior.alpha,
            "schedule": {
                "lr_net": cfg.prior.lr_net,
                "lr_code": cfg.prior.lr_code,
                "decay_every": cfg.prior.decay_every,
                "decay_factor": cfg.prior.decay_factor,
            },
            "seed": cfg.prior.seed,
            "epochs_done": start + cfg.prior.epochs,
            "final_loss": trace[-1] if trace else None,
            "resumed_from": str(resume) if resume else None,
        },
    )
    return path


def reconstruct_cloud(
    prior: Checkpoint, pc: PointCloud, cfg: ExperimentConfig, fcfg: FinetuneConfig | None = None
) -> tuple[TriangleMesh, Checkpoint, list[float]]:
    """Finetune on ``pc`` and extract the mesh, in the cloud's original frame."""
    fcfg = fcfg or cfg.finetune
    if cfg.normalize:
        work, tf = normalize_to_unit(pc)
    else:
        work, tf = pc, AffineTransform.identity()
    net, code, trace = finetune(prior, work, fcfg)
    mesh = extract_zero_level(net, code, cfg.resolution)
    mesh = TriangleMesh(tf.inverse(mesh.vertices), mesh.faces)
    ckpt = Checkpoint(net, code[None, :], ["finetuned"], {"transform": tf.to_dict()})
    return mesh, ckpt, trace


def cmd_reconstruct(cfg: ExperimentConfig, cloud, prior_path, out) -> Path:
    """Finetune the prior on one cloud; writes mesh.obj, finetune_loss.csv and finetuned.nsdf."""
    out = _outdir(out)
    _save_config(out, cfg)
    pc = _read_cloud(cloud)
    prior = _load_ckpt(prior_path)
    _check_architecture(prior, cfg)
    mesh, ckpt, trace = reconstruct_cloud(prior, pc, cfg)
    write_mesh(mesh, out / "mesh.obj")
    save_checkpoint(out / "finetuned.nsdf", ckpt)
    _write_trace(out / "finetune_loss.csv", trace)
    return out / "mesh.obj"


def cmd_denoise(cfg: ExperimentConfig, cloud, checkpoint, out) -> Path:
    """Pull every point of ``cloud`` onto the finetuned surface; writes denoised.xyz."""
    out = _outdir(out)
    _save_config(out, cfg)
    pc = _read_cloud(cloud)
    ckpt = _load_ckpt(checkpoint)
    tf = AffineTransform.from_dict(ckpt.extra.get("transform", AffineTransform.identity().to_dict()))
    work = PointCloud(tf.apply(pc.points), pc.tag)
    den, failed = denoise_points(ckpt.net, ckpt.codes[0], work)
    result = PointCloud(tf.inverse(den.points), "denoised")
    write_point_cloud(out / "denoised.xyz", result)
    if failed:
        log.warning("%d points kept in place (vanishing gradient)", failed)
    return out / "denoised.xyz"


def _resolve_gt(cfg: ExperimentConfig, gt: str, rng_seed: int):
    """Ground truth as ``(points, normals)`` from a mesh file, shape JSON, or roster index."""
    if gt.isdigit():
        shapes = cfg.shapes()
        idx = int(gt)
        if idx >= len(shapes):
            raise UsageError(f"roster has {len(shapes)} shapes, no index {idx}")
        return _gt_samples(shapes[idx], cfg.eval_samples, rng_seed)
    path = Path(gt)
    if path.suffix.lower() == ".json":
        try:
            shape = AnalyticShape.from_dict(json.loads(path.read_text(encoding="utf-8")))
        except (OSError, ValueError, KeyError) as err:
            raise InputError(f"cannot read shape {gt}: {err}") from None
        return _gt_samples(shape, cfg.eval_samples, rng_seed)
    mesh = _read_mesh(gt)
    if mesh.is_empty():
        raise InputError(f"ground-truth mesh {gt} is empty")
    return sample_mesh(mesh, cfg.eval_samples, np.random.default_rng(rng_seed + 1))


def _read_mesh(path) -> TriangleMesh:
    try:
        return read_mesh(path)
    except (OSError, ValueError) as err:
        raise InputError(f"cannot read mesh {path}: {err}") from None


def cmd_eval(cfg: ExperimentConfig, mesh_path, gt: str, out, manifest=None) -> MetricReport:
    """Score a reconstructed mesh; writes metrics.json.

    ``gt`` is a roster index, an analytic shape JSON file, or a mesh file.
    """
    out = _outdir(out)
    _save_config(out, cfg)
    recon = _read_mesh(mesh_path)
    gt_samples = _resolve_gt(cfg, gt, cfg.seed)
    report_cfg = {"mesh": os.path.basename(str(mesh_path)), "gt": str(gt), "seed": cfg.seed}
    if manifest is not None:
        try:
            man = json.loads(Path(manifest).read_text(encoding="utf-8"))
        except (OSError, ValueError) as err:
            raise InputError(f"cannot read manifest {manifest}: {err}") from None
        report_cfg["noise"] = {"sigma": man["sigma"], "kind": man.get("noise_kind", "gaussian")}
    report = evaluate_mesh(
        recon, gt_samples, cfg.eval_samples, np.random.default_rng(cfg.seed), cfg.tau, report_cfg
    )
    report.save(out / "metrics.json")
    return report


def _cell_config(cfg: ExperimentConfig, axis: str, value):
    """Config, noise sigma and prior override for one ablation cell."""
    shape = cfg.shapes()[cfg.ablate_shape]
    sigma = cfg.sigma
    ft = cfg.finetune
    pcfg = cfg.prior
    if axis == "region-size":
        ft = replace(ft, K=int(value), U=min(ft.U, int(value)))
    elif axis == "strategy":
        ft = replace(ft, strategy=str(value))
    elif axis == "scope":
        ft = replace(ft, scope=str(value))
    elif axis == "prior":
        ft = replace(ft, prior_mode=str(value))
    elif axis == "noise-level":
        sigma = float(value) * _longest_edge(shape)
    elif axis == "embedding-size":
        pcfg = replace(pcfg, embedding_size=int(value))
    return replace(cfg, finetune=ft, prior=pcfg), shape, sigma


def _longest_edge(shape: AnalyticShape) -> float:
    return shape.bbox_longest_edge()


def cmd_ablate(cfg: ExperimentConfig, axis: str, out, prior_path=None, values=None) -> Path:
    """Run the pipeline across one ablation axis; writes ablation_<axis>.csv with CD_L2 per cell."""
    if axis not in ABLATION_AXES:
        raise UsageError(f"unknown ablation axis {axis!r}; choose from {ABLATION_AXES}")
    out = _outdir(out)
    _save_config(out, cfg)
    values = list(values) if values else DEFAULT_AXIS_VALUES[axis]
    prior = _load_ckpt(prior_path) if prior_path else None
    rows = []
    for value in values:
        try:
            ccfg, shape, sigma = _cell_config(cfg, axis, value)
            if axis == "embedding-size" or prior is None:
                cell_prior, _ = train_prior(ccfg.shapes(), ccfg.prior)
            else:
                cell_prior = prior
                _check_architecture(cell_prior, ccfg)
            _, noisy = synth_cloud(shape, ccfg, sigma, ccfg.seed)
            mesh, _, _ = reconstruct_cloud(cell_prior, noisy, ccfg)
            gt = _gt_samples(shape, ccfg.eval_samples, ccfg.seed)
            rep = evaluate_mesh(mesh, gt, ccfg.eval_samples, np.random.default_rng(ccfg.seed), ccfg.tau)
            cd = "" if rep.cd_l2 is None else repr(rep.cd_l2)
            rows.append([axis, value, cd, "ok" if rep.cd_l2 is not None else "empty-mesh", ""])
        except Exception as err:  # noqa: BLE001 - a failed cell must not stop the sweep
            log.warning("ablation cell %s=%s failed: %s", axis, value, err)
            rows.append([axis, value, "", "failed", f"{type(err).__name__}: {err}"])
    path = out / f"ablation_{axis}.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["axis", "value", "cd_l2", "status", "error"])
        w.writerows(rows)
    return path


# ---------------------------------------------------------------------------
# argument parsing


def _parse_value(text: str):
    try:
        return json.loads(text)
    except ValueError:
        return text


def load_config(path=None, seed=None, overrides=()) -> ExperimentConfig:
    data: dict = {}
    if path:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as err:
            raise InputError(f"cannot read config {path}: {err}") from None
        except ValueError as err:
            raise UsageError(f"config {path} is not valid JSON: {err}") from None
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"override {item!r} must look like section.key=value")
        key, text = item.split("=", 1)
        target = data
        *parents, leaf = key.split(".")
        for p in parents:
            target = target.setdefault(p, {})
        target[leaf] = _parse_value(text)
    try:
        cfg = ExperimentConfig.from_dict(data)
    except (TypeError, ValueError) as err:
        raise UsageError(f"invalid config: {err}") from None
    if seed is not None:
        cfg = cfg.with_seed(seed)
    return cfg


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config JSON")
    common.add_argument("--seed", type=int, help="seed for every random stream")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
        help="override a config entry, e.g. finetune.iterations=100 (repeatable)",
    )
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="n2nsdf", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("make-data", parents=[common], help="synthesize clean and noisy clouds")
    p = sub.add_parser("train-prior", parents=[common], help="train the shape prior")
    p.add_argument("--resume", help="checkpoint to continue from")
    p = sub.add_parser("reconstruct", parents=[common], help="finetune on a cloud and mesh it")
    p.add_argument("cloud")
    p.add_argument("--prior", required=True)
    p = sub.add_parser("denoise", parents=[common], help="project a cloud onto a finetuned surface")
    p.add_argument("cloud")
    p.add_argument("--checkpoint", required=True)
    p = sub.add_parser("eval", parents=[common], help="score a mesh against ground truth")
    p.add_argument("mesh")
    p.add_argument("--gt", required=True, help="roster index, shape JSON or mesh file")
    p.add_argument("--manifest", help="make-data manifest to carry the noise level into the report")
    p = sub.add_parser("ablate", parents=[common], help="sweep one ablation axis")
    p.add_argument("--axis", required=True, choices=ABLATION_AXES)
    p.add_argument("--prior", help="prior checkpoint (trained on the fly if omitted)")
    p.add_argument("--values", nargs="+", type=_parse_value, help="axis values to sweep")
    return parser


def _thread_limit():
    n = os.environ.get(THREADS_ENV)
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(n))


def run(args: argparse.Namespace) -> None:
    cfg = load_config(args.config, args.seed, args.overrides)
    if args.command == "make-data":
        cmd_make_data(cfg, args.out)
    elif args.command == "train-prior":
        cmd_train_prior(cfg, args.out, args.resume)
    elif args.command == "reconstruct":
        cmd_reconstruct(cfg, args.cloud, args.prior, args.out)
    elif args.command == "denoise":
        cmd_denoise(cfg, args.cloud, args.checkpoint, args.out)
    elif args.command == "eval":
        cmd_eval(cfg, args.mesh, args.gt, args.out, args.manifest)
    elif args.command == "ablate":
        cmd_ablate(cfg, args.axis, args.out, args.prior, args.values)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        with _thread_limit():
            run(args)
    except UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except (FloatingPointError, VanishingGradientError) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return 2
    except (InputError, OSError) as err:
        print(f"I/O failure: {err}", file=sys.stderr)
        return 3
    except ValueError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
