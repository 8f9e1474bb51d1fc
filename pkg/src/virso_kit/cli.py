"""Batch command-line entry point.

Subcommands: gen-data, prep-graph, train, eval, ablate, gradcheck, bench,
report. Every command reads one JSON config (schema_version 1, unknown
keys rejected), writes its artifacts plus a JSON run summary under --out,
and exits 0 on success, 1 on validation errors, 2 on runtime failures.

Heavy imports happen inside commands so --threads can pin BLAS thread
counts before numpy loads.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

SCHEMA_VERSION = 1

_SCHEMA = {
    "schema_version": int,
    "seed": int,
    "synth": {
        "n_target": int,
        "hole_center": list,
        "hole_radius": float,
        "densify_factor": float,
        "band_width": float,
        "profile_len": int,
        "a_range": list,
        "t_in_range": list,
        "v_in_range": list,
        "sample_count": int,
    },
    "split": list,
    "split_seed": int,
    "graph": {
        "method": str,
        "k": int,
        "r": float,
        "k_min": int,
        "k_max": int,
        "density_radius": float,
        "alpha_floor": int,
        "anchor_seed": int,
    },
    "model": {
        "T": int,
        "d_v": int,
        "m": int,
        "d_latent": int,
        "alpha_anchors": int,
        "gate_hidden": int,
        "gate_weight_width": int,
        "variant": str,
        "use_identity_skip": bool,
        "use_spectral_weighted_skip": bool,
        "collaboration": str,
        "weighted_laplacian": bool,
        "embed_hidden": int,
        "down_hidden": int,
    },
    "training": {
        "lr": float,
        "decay_step": int,
        "decay": float,
        "batch_size": int,
        "max_epochs": int,
        "weight_decay": float,
        "patience": int,
        "accum_steps": int,
        "target_norm_mode": str,
        "magnitude_channels": list,
        "magnitude_weight": float,
    },
    "gradcheck": {"probe_count": int, "step": float, "samples": int},
    "bench": {
        "warmup": int,
        "repeats": int,
        "telemetry_interval_s": float,
        "telemetry_scope": str,
    },
}

# training defaults follow the published reference schedule
_DEFAULTS = {
    "schema_version": SCHEMA_VERSION,
    "seed": 0,
    "synth": {},
    "split": [0.6, 0.2, 0.2],
    "split_seed": 0,
    "graph": {"method": "knn", "k": 8, "alpha_floor": 1, "anchor_seed": 0},
    "model": {
        "T": 4, "d_v": 16, "m": 16, "d_latent": 16, "alpha_anchors": 8,
        "gate_hidden": 16, "gate_weight_width": 8, "variant": "full",
        "use_identity_skip": True, "use_spectral_weighted_skip": True,
        "collaboration": "linear", "weighted_laplacian": False,
        "embed_hidden": 64, "down_hidden": 128,
    },
    "training": {
        "lr": 1e-3, "decay_step": 40, "decay": 0.5, "batch_size": 16,
        "max_epochs": 500, "weight_decay": 1e-3, "patience": 40,
        "accum_steps": 1, "target_norm_mode": "minmax",
        "magnitude_channels": None, "magnitude_weight": 0.1,
    },
    "gradcheck": {"probe_count": 30, "step": 1e-5, "samples": 4},
    "bench": {"warmup": 2, "repeats": 3, "telemetry_interval_s": 0.01,
              "telemetry_scope": "device"},
}


class _CliConfigError(ValueError):
    pass


def _check_section(raw: dict, schema: dict, path: str) -> dict:
    out = {}
    for key, val in raw.items():
        if key not in schema:
            raise _CliConfigError(f"unknown config key {path}{key!r}")
        want = schema[key]
        if isinstance(want, dict):
            if not isinstance(val, dict):
                raise _CliConfigError(f"config key {path}{key!r} must be an object")
            out[key] = _check_section(val, want, f"{path}{key}.")
        else:
            if val is not None:
                if want is float and isinstance(val, int) and not isinstance(val, bool):
                    val = float(val)
                if want in (int, float) and isinstance(val, bool):
                    raise _CliConfigError(f"config key {path}{key!r} must be {want.__name__}")
                if not isinstance(val, want):
                    raise _CliConfigError(
                        f"config key {path}{key!r} must be {want.__name__}"
                    )
            out[key] = val
    return out


def _merge(defaults, override):
    if not isinstance(defaults, dict):
        return override
    out = dict(defaults)
    for key, val in override.items():
        out[key] = _merge(defaults.get(key), val) if isinstance(val, dict) else val
    return out


def load_config(path: Path, seed_override: int | None = None) -> dict:
    path = Path(path)
    if not path.is_file():
        raise _CliConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as err:
        raise _CliConfigError(f"config is not valid JSON: {err}") from err
    if not isinstance(raw, dict):
        raise _CliConfigError("config root must be a JSON object")
    checked = _check_section(raw, _SCHEMA, "")
    if checked.get("schema_version", SCHEMA_VERSION) != SCHEMA_VERSION:
        raise _CliConfigError(
            f"unsupported schema_version {checked.get('schema_version')}"
        )
    cfg = _merge(_DEFAULTS, checked)
    if seed_override is not None:
        cfg["seed"] = seed_override
    return cfg


def _write_json(path: Path, payload: dict):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _summary(out: Path, command: str, cfg: dict, artifacts: list[str]):
    _write_json(Path(out) / f"summary_{command.replace('-', '_')}.json",
                {"command": command, "seed": cfg["seed"], "artifacts": artifacts})
    _write_json(Path(out) / "config.resolved.json", cfg)


# ---------------------------------------------------------------------------
# shared artifact plumbing


def _synth_spec(cfg):
    from .synthetic import SynthSpec

    kw = dict(cfg["synth"])
    for key in ("hole_center", "a_range", "t_in_range", "v_in_range"):
        if key in kw and kw[key] is not None:
            kw[key] = tuple(kw[key])
    return SynthSpec(seed=cfg["seed"], **kw)


def _dataset_dir(out: Path) -> Path:
    return Path(out) / "dataset"


def _graph_dir(out: Path) -> Path:
    return Path(out) / "graph"


def _require(path: Path, producer: str) -> Path:
    from .errors import ArtifactError

    if not Path(path).exists():
        raise ArtifactError(f"missing artifact {path}: run `{producer}` first")
    return Path(path)


def _load_dataset(out):
    from .training import load_dataset

    _require(_dataset_dir(out) / "dataset.json", "gen-data")
    return load_dataset(_dataset_dir(out))


def _build_graph(cfg, points):
    from .errors import ConfigError
    from .graphs import VknnConfig, build_knn, build_radius, build_vknn, compute_edge_weights

    g = cfg["graph"]
    method = g["method"]
    if method == "knn":
        if g.get("k") is None:
            raise ConfigError("graph.k required for method 'knn'")
        graph = build_knn(points, g["k"])
    elif method == "radius":
        if g.get("r") is None:
            raise ConfigError("graph.r required for method 'radius'")
        graph = build_radius(points, g["r"])
    elif method == "vknn":
        for key in ("k_min", "k_max", "density_radius"):
            if g.get(key) is None:
                raise ConfigError(f"graph.{key} required for method 'vknn'")
        graph = build_vknn(points, VknnConfig(
            k_min=g["k_min"], k_max=g["k_max"],
            density_radius=g["density_radius"],
            alpha_floor=g.get("alpha_floor", 1),
        ))
    else:
        raise ConfigError(f"unknown graph.method {method!r}")
    return compute_edge_weights(graph, points)


def _load_artifacts(cfg, out):
    """Graph + basis + anchors, rebuilt as GraphArtifacts for the model."""
    from .graphs import anchor_embeddings, load_graph
    from .model import GraphArtifacts
    from .spectral import load_eigen_basis

    ds, points = _load_dataset(out)
    gdir = _graph_dir(out)
    graph = load_graph(_require(gdir / "graph.json", "prep-graph"))
    basis = None
    if cfg["model"]["variant"] != "spatial_only":
        basis = load_eigen_basis(_require(gdir / "basis.json", "prep-graph"),
                                 expected_graph_hash=graph.content_hash())
    anchors = anchor_embeddings(graph, cfg["model"]["alpha_anchors"],
                                seed=cfg["graph"]["anchor_seed"])
    arts = GraphArtifacts.prepare(graph, points.coords, basis=basis, anchors=anchors)
    return ds, points, arts


def _model_config(cfg, ds, points, variant=None):
    from .model import VirsoConfig

    m = dict(cfg["model"])
    if variant is not None:
        m["variant"] = variant
    return VirsoConfig(
        output_channels=ds.channels, input_width=ds.q, spatial_dim=points.d, **m
    )


def _schedule(cfg):
    from .training import TrainSchedule

    t = dict(cfg["training"])
    if t.get("magnitude_channels") is not None:
        t["magnitude_channels"] = tuple(t["magnitude_channels"])
    return TrainSchedule(seed=cfg["seed"], **t)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    from .blobio import sha256_of
    from .training import save_dataset, split_dataset

    cfg = load_config(args.config, args.seed)
    from .synthetic import generate_dataset

    spec = _synth_spec(cfg)
    ds, points = generate_dataset(spec)
    ds = split_dataset(ds, tuple(cfg["split"]), seed=cfg["split_seed"])
    out = Path(args.out)
    save_dataset(ds, _dataset_dir(out), points)
    _summary(out, "gen-data", cfg, ["dataset/dataset.json"])
    _write_json(out / "dataset_hash.json", {
        "inputs_sha256": sha256_of(ds.inputs.astype("<f4")),
        "targets_sha256": sha256_of(ds.targets.astype("<f4")),
        "coords_sha256": sha256_of(points.coords.astype("<f4")),
    })
    print(f"gen-data: {ds.count} samples on {ds.n} nodes -> {out / 'dataset'}")
    return 0


def cmd_prep_graph(args) -> int:
    from .graphs import degree_stats, save_graph
    from .spectral import lobpcg_smallest, normalized_laplacian, save_eigen_basis

    cfg = load_config(args.config, args.seed)
    if args.graph:
        cfg["graph"]["method"] = args.graph
    out = Path(args.out)
    ds, points = _load_dataset(out)
    graph = _build_graph(cfg, points)
    gdir = _graph_dir(out)
    save_graph(graph, gdir)
    artifacts = ["graph/graph.json"]
    stats = degree_stats(graph)
    if cfg["model"]["variant"] != "spatial_only":
        lap = normalized_laplacian(graph, weighted=cfg["model"]["weighted_laplacian"])
        basis = lobpcg_smallest(lap, cfg["model"]["m"], seed=cfg["seed"])
        save_eigen_basis(basis, gdir, graph.content_hash())
        artifacts.append("graph/basis.json")
    _write_json(gdir / "degree_stats.json", stats)
    _summary(out, "prep-graph", cfg, artifacts)
    print(f"prep-graph: {cfg['graph']['method']} graph, "
          f"{stats['edge_count']} edges, degrees "
          f"[{stats['min_degree']}, {stats['max_degree']}] -> {gdir}")
    return 0


def _train_once(cfg, out, variant=None, report_dir=None):
    from .model import VirsoModel
    from .training import train

    ds, points, arts = _load_artifacts(cfg, out)
    model_cfg = _model_config(cfg, ds, points, variant=variant)
    model = VirsoModel(model_cfg, seed=cfg["seed"])
    report, input_norm, target_norm = train(
        model, ds, arts, _schedule(cfg), out_dir=report_dir
    )
    return model, report, input_norm, target_norm, ds, arts


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.seed)
    variant = _variant_from_flag(args.variant)
    out = Path(args.out)
    model, report, input_norm, target_norm, ds, arts = _train_once(
        cfg, out, variant=variant, report_dir=out
    )
    from .model import save_checkpoint

    save_checkpoint(model, out, graph_hash=arts.graph.content_hash())
    _write_json(out / "normalizers.json", {
        "input": input_norm.state(), "target": target_norm.state(),
    })
    _summary(out, "train", cfg, ["checkpoint.json", "train_report.json",
                                 "loss_curve.csv", "normalizers.json"])
    print(f"train: best val {report.best_val:.4%} at epoch {report.best_epoch} "
          f"({report.stopping_reason}, {report.epochs_run} epochs, "
          f"{report.wall_time_s:.1f}s)")
    return 0


def cmd_eval(args) -> int:
    from .model import load_checkpoint
    from .training import Normalizer, evaluate

    cfg = load_config(args.config, args.seed)
    out = Path(args.out)
    ckpt = Path(args.checkpoint) if args.checkpoint else _require(
        out / "checkpoint.json", "train")
    model, _ = load_checkpoint(ckpt)
    cfg["model"]["variant"] = model.config.variant
    cfg["model"]["alpha_anchors"] = model.config.alpha_anchors
    cfg["model"]["m"] = model.config.m
    ds, points, arts = _load_artifacts(cfg, out)
    norm_state = json.loads(_require(ckpt.parent / "normalizers.json", "train").read_text())
    input_norm = Normalizer.from_state(norm_state["input"])
    target_norm = Normalizer.from_state(norm_state["target"])
    ev = evaluate(model, ds, arts, input_norm, target_norm, split="test")
    _write_json(out / "eval_report.json", ev.as_dict())
    _summary(out, "eval", cfg, ["eval_report.json"])
    pct = ev.percentiles
    print(f"eval: mean {ev.mean:.4%} | best {pct['best']:.4%} "
          f"p50 {pct['p50']:.4%} worst {pct['worst']:.4%}")
    return 0


_ABLATION_ORDER = ("spatial_only", "spectral_only", "no_skip", "full")


def _ablation_model_cfg(cfg, ds, points, variant_key):
    if variant_key == "no_skip":
        mc = _model_config(cfg, ds, points, variant="spectral_only")
        mc.use_identity_skip = False
        mc.use_spectral_weighted_skip = False
        return mc
    return _model_config(cfg, ds, points, variant=variant_key)


def cmd_ablate(args) -> int:
    import csv as _csv

    from .graphs import anchor_embeddings, degree_stats
    from .model import GraphArtifacts, VirsoModel, param_count
    from .spectral import lobpcg_smallest, normalized_laplacian
    from .training import evaluate, train

    cfg = load_config(args.config, args.seed)
    out = Path(args.out)
    ds, points = _load_dataset(out)
    rows = []
    for method in ("knn", "vknn"):
        gcfg = dict(cfg)
        gcfg["graph"] = dict(cfg["graph"])
        gcfg["graph"]["method"] = method
        graph = _build_graph(gcfg, points)
        lap = normalized_laplacian(graph, weighted=cfg["model"]["weighted_laplacian"])
        basis = lobpcg_smallest(lap, cfg["model"]["m"], seed=cfg["seed"])
        anchors = anchor_embeddings(graph, cfg["model"]["alpha_anchors"],
                                    seed=cfg["graph"]["anchor_seed"])
        arts = GraphArtifacts.prepare(graph, points.coords, basis=basis, anchors=anchors)
        edge_count = degree_stats(graph)["edge_count"]
        for variant_key in _ABLATION_ORDER:
            mc = _ablation_model_cfg(cfg, ds, points, variant_key)
            model = VirsoModel(mc, seed=cfg["seed"])
            _, input_norm, target_norm = train(model, ds, arts, _schedule(cfg))
            ev = evaluate(model, ds, arts, input_norm, target_norm, split="test")
            rows.append({
                "graph": method,
                "variant": variant_key,
                "params": param_count(mc),
                "edges": edge_count,
                "test_mean_err_percent": 100 * ev.mean,
                "per_channel_percent": (100 * ev.per_channel_mean).tolist(),
            })
            print(f"ablate: {method}/{variant_key}: "
                  f"{rows[-1]['test_mean_err_percent']:.3f}%")
    _write_json(out / "ablation.json", {"rows": rows})
    with open(out / "ablation.csv", "w", newline="") as fh:
        writer = _csv.writer(fh)
        writer.writerow(["graph", "variant", "params", "edges", "test_mean_err_percent"])
        for r in rows:
            writer.writerow([r["graph"], r["variant"], r["params"], r["edges"],
                             repr(r["test_mean_err_percent"])])
    _summary(out, "ablate", cfg, ["ablation.json", "ablation.csv"])
    return 0


def cmd_gradcheck(args) -> int:
    from .autodiff import grad_check
    from .model import VirsoModel
    from .training import Normalizer, batch_loss

    cfg = load_config(args.config, args.seed)
    out = Path(args.out)
    ds, points, arts = _load_artifacts(cfg, out)
    model_cfg = _model_config(cfg, ds, points, variant=_variant_from_flag(args.variant))
    model = VirsoModel(model_cfg, seed=cfg["seed"])
    gc = cfg["gradcheck"]
    idx = ds.indices_of("train")[: gc["samples"]]
    target_norm = Normalizer(mode=cfg["training"]["target_norm_mode"]).fit(ds.targets[idx])
    input_norm = Normalizer(mode="gaussian").fit(ds.inputs[idx])
    u = input_norm.apply(ds.inputs[idx])
    truth = ds.targets[idx]

    def loss_fn():
        return batch_loss(model, arts, u, truth, target_norm, divisor=idx.size)

    err = grad_check(loss_fn, model.param_list(),
                     probe_count=gc["probe_count"], step=gc["step"], seed=cfg["seed"])
    payload = {"max_rel_err": err, "probe_count": gc["probe_count"], "step": gc["step"]}
    _write_json(out / "gradcheck.json", payload)
    _summary(out, "gradcheck", cfg, ["gradcheck.json"])
    print(f"gradcheck: max relative error {err:.3e} over {gc['probe_count']} probes")
    return 0


def cmd_bench(args) -> int:
    from .benchmarks import (
        emit_report,
        energy_per_iteration,
        make_report,
        measure_latency,
        read_telemetry_csv,
    )
    from .model import flop_count, load_checkpoint
    from .training import Normalizer

    cfg = load_config(args.config, args.seed)
    out = Path(args.out)
    ckpt = Path(args.checkpoint) if args.checkpoint else _require(
        out / "checkpoint.json", "train")
    model, _ = load_checkpoint(ckpt)
    cfg["model"]["variant"] = model.config.variant
    cfg["model"]["alpha_anchors"] = model.config.alpha_anchors
    cfg["model"]["m"] = model.config.m
    ds, points, arts = _load_artifacts(cfg, out)
    norm_state = json.loads(_require(ckpt.parent / "normalizers.json", "train").read_text())
    input_norm = Normalizer.from_state(norm_state["input"])
    idx = ds.indices_of("test")
    bench = cfg["bench"]
    latency = measure_latency(model, arts, input_norm.apply(ds.inputs[idx]),
                              warmup=bench["warmup"], repeats=bench["repeats"])
    flops = flop_count(model.config, n=ds.n, e=arts.graph.edge_count)
    payload = {
        "latency_ms_per_it": latency,
        "flops": flops,
        "dataset_size": int(idx.size),
        "scope": bench["telemetry_scope"],
    }
    artifacts = ["bench_summary.json"]
    if args.telemetry:
        trace = read_telemetry_csv(Path(args.telemetry),
                                   interval=bench["telemetry_interval_s"],
                                   scope=bench["telemetry_scope"])
        energy = energy_per_iteration(trace, iterations=int(idx.size))
        payload["energy_j_per_it"] = energy
        report = make_report(
            model=f"virso-{model.config.variant}", scope=trace.scope,
            energy_j_per_it=energy, latency_ms=latency,
            flops=flops["total"], dataset_size=int(idx.size),
        )
        emit_report([report], out_dir=out, name="bench")
        artifacts += ["bench.json", "bench.csv"]
    _write_json(out / "bench_summary.json", payload)
    _summary(out, "bench", cfg, artifacts)
    print(f"bench: {latency:.2f} ms/it over {idx.size} samples, "
          f"{flops['total'] / 1e6:.1f} MFLOPs/sample")
    return 0


def cmd_report(args) -> int:
    import csv as _csv

    from .benchmarks import emit_report, make_report

    out = Path(args.out)
    inputs = Path(args.inputs)
    if not inputs.is_file():
        raise _CliConfigError(f"inputs CSV not found: {inputs}")
    with open(inputs, newline="") as fh:
        rows = list(_csv.DictReader(fh))
    if not rows:
        raise _CliConfigError(f"no rows in {inputs}")
    reports = []
    for row in rows:
        power = row.get("power_w")
        err = row.get("mean_err_percent")
        reports.append(make_report(
            model=row["model"],
            scope=row.get("scope", "device"),
            energy_j_per_it=float(row["energy_j_per_it"]),
            latency_ms=float(row["latency_ms_per_it"]),
            mean_err_percent=float(err) if err else None,
            power_w=float(power) if power else None,
            flops=int(float(row["flops"])) if row.get("flops") else None,
        ))
    emit_report(reports, out_dir=out, name="report")
    print(f"report: {len(reports)} rows -> {out / 'report.csv'}")
    return 0


# ---------------------------------------------------------------------------
# wiring


def _variant_from_flag(flag: str | None) -> str | None:
    return {None: None, "full": "full", "spectral": "spectral_only",
            "spatial": "spatial_only"}[flag]


def _add_common(sub, config_required=True):
    if config_required:
        sub.add_argument("--config", required=True, help="JSON config path")
    sub.add_argument("--out", required=True, help="artifact directory")
    sub.add_argument("--seed", type=int, default=None, help="override config seed")
    sub.add_argument("--threads", type=int, default=None,
                     help="BLAS thread count (1 forces full determinism)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="virso-kit",
        description="sparse-boundary-to-dense-field reconstruction pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    for name, fn in (("gen-data", cmd_gen_data), ("prep-graph", cmd_prep_graph),
                     ("train", cmd_train), ("eval", cmd_eval),
                     ("ablate", cmd_ablate), ("gradcheck", cmd_gradcheck),
                     ("bench", cmd_bench)):
        p = sub.add_parser(name)
        _add_common(p)
        p.set_defaults(fn=fn)
        if name == "prep-graph":
            p.add_argument("--graph", choices=("knn", "radius", "vknn"), default=None)
        if name in ("train", "gradcheck"):
            p.add_argument("--variant", choices=("full", "spectral", "spatial"),
                           default=None)
        if name in ("eval", "bench"):
            p.add_argument("--checkpoint", default=None)
        if name == "bench":
            p.add_argument("--telemetry", default=None, help="telemetry CSV path")

    p = sub.add_parser("report")
    p.add_argument("--inputs", required=True, help="published-inputs CSV")
    _add_common(p, config_required=False)
    p.set_defaults(fn=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads is not None:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    level = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}.get(
        os.environ.get("VIRSO_KIT_LOG", "error").lower(), logging.ERROR)
    logging.basicConfig(level=level, format="%(name)s: %(message)s")

    from .errors import ConfigError, InvalidInputError, InvalidParameterError

    try:
        return args.fn(args)
    except (_CliConfigError, ConfigError, InvalidParameterError, InvalidInputError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except Exception as err:  # runtime failures: missing artifacts, solver errors
        print(f"runtime failure: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
