"""Command-line surface: dataset synthesis, training, fitting, evaluation, and
report rendering.

Every subcommand takes a JSON config (-c), optional dotted-path overrides
(--set key=value), and emits a provenance record (resolved config, its sha256,
and the seed) next to its outputs. Outputs are deterministic for a fixed
config+seed; the --workers flag only bounds parallelism and is deliberately
excluded from provenance.

Exit codes: 0 success, 2 config/schema error, 3 incompatibility (e.g. wrong N
for a model), 4 I/O or container-format error, 1 anything else.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import __version__, metrics, mle, rim, resnet, svgplot, training
from .containers import (
    AcquisitionProtocol,
    ParameterMap,
    SequenceKind,
    TissueLabelMap,
    WeightedSeries,
    load_container,
    save_container,
)
from .errors import (
    CompatibilityError,
    ConfigError,
    ContainerFormatError,
    RelaxkitError,
)
from .protocols import named_protocol
from .rng import SeededRng
from .simulate import (
    NoiseConfig,
    PatchSimulator,
    TissuePriorTable,
    default_volume_pool,
    make_procedural_labelmap,
    sample_parameter_map,
)

SEED_ENV_VAR = "RELAXKIT_SEED"


# --- config plumbing ---------------------------------------------------------


def _load_config(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            config = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(config, dict):
        raise ConfigError("config root must be a JSON object")
    return config


def _apply_overrides(config: dict, sets: list[str]) -> dict:
    for item in sets:
        if "=" not in item:
            raise ConfigError(f"--set needs key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = config
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"--set path {key!r} crosses a non-object")
        node[parts[-1]] = value
    return config


def _resolve_seed(config: dict) -> int:
    if "seed" in config:
        return int(config["seed"])
    env = os.environ.get(SEED_ENV_VAR)
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV_VAR} must be an integer, got {env!r}") from exc
    return 0


def _config_hash(config: dict) -> str:
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _write_json(path: str, payload: dict):
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def _write_provenance(out_dir: str, subcommand: str, config: dict, seed: int):
    os.makedirs(out_dir, exist_ok=True)
    _write_json(
        os.path.join(out_dir, "provenance.json"),
        {
            "tool": "relaxkit",
            "version": __version__,
            "subcommand": subcommand,
            "seed": seed,
            "config": config,
            "config_sha256": _config_hash(config),
        },
    )


def _require(config: dict, key: str, subcommand: str):
    if key not in config:
        raise ConfigError(f"{subcommand}: config is missing required key {key!r}")
    return config[key]


def _protocol_from(config: dict) -> AcquisitionProtocol:
    if "protocol" in config:
        return named_protocol(str(config["protocol"]))
    kind = SequenceKind(_require(config, "sequence_kind", "protocol"))
    tau = config.get("tau_ms")
    if tau is None:
        return named_protocol(
            "t1_31" if kind is SequenceKind.INVERSION_RECOVERY else "t2_6"
        )
    return AcquisitionProtocol(kind, np.asarray(tau, dtype=np.float64))


def _priors_from(config: dict) -> TissuePriorTable:
    if "priors" in config:
        return TissuePriorTable.from_json(config["priors"])
    return TissuePriorTable()


def _noise_from(config: dict) -> NoiseConfig:
    if "noise" in config:
        return NoiseConfig.from_json(config["noise"])
    return NoiseConfig()


# --- simulate ----------------------------------------------------------------


def cmd_simulate(config: dict, workers: int) -> int:
    out = _require(config, "out", "simulate")
    seed = _resolve_seed(config)
    n_patches = int(config.get("n_patches", 0))
    patch_size = int(config.get("patch_size", 40))
    protocol = _protocol_from(config)
    priors = _priors_from(config)
    noise = _noise_from(config)
    sigma_acq = config.get("sigma_acq")
    labelmaps = config.get("labelmaps", {"procedural": {"count": 4, "size": 128}})

    rng = SeededRng(seed)
    if "paths" in labelmaps:
        volumes = []
        for path in labelmaps["paths"]:
            vol = load_container(path)
            if not isinstance(vol, TissueLabelMap):
                raise ConfigError(f"{path} is not a tissue label map")
            volumes.append(vol)
    else:
        spec = labelmaps.get("procedural", {})
        volumes = default_volume_pool(
            rng, count=int(spec.get("count", 4)), size=int(spec.get("size", 128))
        )

    sampler = PatchSimulator(
        volumes=volumes,
        patch_size=patch_size,
        protocol=protocol,
        priors=priors,
        noise=noise,
        rng=rng.stream(11),
        sigma_acq=sigma_acq,
    )

    os.makedirs(out, exist_ok=True)
    patches_dir = os.path.join(out, "patches")
    os.makedirs(patches_dir, exist_ok=True)

    def write_patch(index: int):
        labels, kappa, series = sampler.sample(index)
        patch_dir = os.path.join(patches_dir, f"patch_{index:05d}")
        save_container(labels, os.path.join(patch_dir, "labels"))
        save_container(kappa, os.path.join(patch_dir, "params"))
        save_container(series, os.path.join(patch_dir, "series"))

    if workers > 1 and n_patches > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(write_patch, range(n_patches)))
    else:
        for index in range(n_patches):
            write_patch(index)

    manifest = {
        "schema_version": 1,
        "n_patches": n_patches,
        "patch_size": patch_size,
        "sequence_kind": protocol.sequence_kind.value,
        "tau_ms": [float(t) for t in protocol.tau_ms],
        "sigma_acq": sigma_acq,
        "priors": priors.to_json(),
        "noise": noise.to_json(),
        "seed": seed,
        "labelmaps": labelmaps,
    }
    _write_json(os.path.join(out, "manifest.json"), manifest)
    _write_provenance(out, "simulate", config, seed)
    print(f"simulate: wrote {n_patches} patches to {out}")
    return 0


# --- training ----------------------------------------------------------------


def _training_config_from(config: dict) -> training.TrainingConfig:
    data = dict(config.get("data", {}))
    if "manifest" in data:
        with open(os.path.join(data["manifest"]), "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
        for key in ("sequence_kind", "tau_ms", "priors", "noise"):
            data.setdefault(key, manifest[key])
        data.pop("manifest")
    payload = {**data, **config.get("training", {})}
    payload.setdefault("seed", _resolve_seed(config))
    return training.TrainingConfig.from_json(payload)


def cmd_train_rim(config: dict, workers: int) -> int:
    del workers  # training is a single optimizer stream
    out = _require(config, "out", "train-rim")
    tcfg = _training_config_from(config)
    model = config.get("model", {})
    weights, result = rim.train_rim(
        tcfg,
        features=int(model.get("features", 36)),
        j_steps=int(model.get("j_steps", 6)),
    )
    rim.save_rim_weights(
        weights, out, extra={"training": tcfg.to_json(), "trained": True}
    )
    training.save_loss_curve(os.path.join(out, "loss_curve.csv"), result.loss_curve)
    _write_provenance(out, "train-rim", config, tcfg.seed)
    print(
        f"train-rim: final running loss {result.final_running_loss:.6g} "
        f"(init-predictor baseline {result.baseline_loss:.6g}) -> {out}"
    )
    return 0


def cmd_train_resnet(config: dict, workers: int) -> int:
    del workers
    out = _require(config, "out", "train-resnet")
    tcfg = _training_config_from(config)
    model = config.get("model", {})
    plan = tuple(model.get("channel_plan", resnet.DEFAULT_CHANNEL_PLAN))
    weights, result = resnet.train_resnet(tcfg, channel_plan=plan)
    resnet.save_resnet_weights(
        weights, out, extra={"training": tcfg.to_json(), "trained": True}
    )
    training.save_loss_curve(os.path.join(out, "loss_curve.csv"), result.loss_curve)
    _write_provenance(out, "train-resnet", config, tcfg.seed)
    print(
        f"train-resnet: final running loss {result.final_running_loss:.6g} "
        f"(constant-predictor baseline {result.baseline_loss:.6g}) -> {out}"
    )
    return 0


# --- inference ---------------------------------------------------------------


def _build_estimator(spec: dict, ground_truth: ParameterMap | None = None):
    """Estimator factory shared by infer and evaluate."""
    kind = spec.get("kind")
    name = spec.get("name", kind)
    if kind == "mle":
        config = mle.MleConfig.from_json(spec.get("mle", {})) if spec.get("mle") else mle.MleConfig()
        sigma = spec.get("sigma")

        def run(series: WeightedSeries) -> ParameterMap:
            return mle.fit(series, config, sigma=sigma).map

        return name, run
    if kind == "rim":
        weights, _ = rim.load_rim_weights(_require(spec, "weights", "estimator"))
        j_steps = spec.get("j_steps")

        def run(series: WeightedSeries) -> ParameterMap:
            return rim.infer(series, weights, j_steps=j_steps)

        return name, run
    if kind == "resnet":
        weights, _ = resnet.load_resnet_weights(_require(spec, "weights", "estimator"))

        def run(series: WeightedSeries) -> ParameterMap:
            return resnet.forward(series, weights)

        return name, run
    if kind == "identity":
        if ground_truth is None:
            raise ConfigError("identity estimator needs a ground truth")
        return name, metrics.identity_estimator(ground_truth)
    raise ConfigError(f"unknown estimator kind {kind!r}")


def cmd_infer(config: dict, workers: int, forced_estimator: str | None = None) -> int:
    del workers
    out = _require(config, "out", "infer")
    series_path = _require(config, "series", "infer")
    series = load_container(series_path)
    if not isinstance(series, WeightedSeries):
        raise ConfigError(f"{series_path} is not a weighted series")
    estimator_kind = forced_estimator or _require(config, "estimator", "infer")
    spec = {**config, "kind": estimator_kind, "name": estimator_kind}
    seed = _resolve_seed(config)

    if estimator_kind == "mle":
        mle_config = (
            mle.MleConfig.from_json(config["mle"]) if config.get("mle") else mle.MleConfig()
        )
        result = mle.fit(series, mle_config, sigma=config.get("sigma"))
        save_container(result.map, os.path.join(out, "estimate"))
        with open(os.path.join(out, "converged.bin"), "wb") as fh:
            fh.write(result.converged.astype(np.uint8).tobytes())
        extra = {
            "converged_fraction": float(result.converged.mean()),
            "iterations": result.n_iters,
        }
    else:
        _, estimator = _build_estimator(spec)
        estimate = estimator(series)
        save_container(estimate, os.path.join(out, "estimate"))
        extra = {}

    _write_provenance(out, "infer", {**config, "estimator": estimator_kind}, seed)
    if extra:
        _write_json(os.path.join(out, "fit_summary.json"), extra)
    print(f"infer[{estimator_kind}]: estimate written to {out}")
    return 0


# --- evaluate ----------------------------------------------------------------


def _ground_truth_from(config: dict, rng: SeededRng) -> ParameterMap:
    spec = _require(config, "ground_truth", "evaluate")
    if isinstance(spec, str):
        gt = load_container(spec)
        if not isinstance(gt, ParameterMap):
            raise ConfigError(f"{spec} is not a parameter map")
        return gt
    proc = spec.get("procedural", {})
    size = int(proc.get("size", 64))
    labels = make_procedural_labelmap(size, rng.stream(301))
    kind = _protocol_from(config).sequence_kind
    return sample_parameter_map(
        labels, _priors_from(config), _noise_from(config), rng.stream(302), kind
    )


def cmd_evaluate(config: dict, workers: int) -> int:
    out = _require(config, "out", "evaluate")
    seed = _resolve_seed(config)
    rng = SeededRng(seed)
    experiment = _require(config, "experiment", "evaluate")

    if experiment == "monte_carlo":
        protocol = _protocol_from(config)
        gt = _ground_truth_from(config, rng)
        snr_list = [float(s) for s in _require(config, "snr_list", "evaluate")]
        n_repeats = int(_require(config, "n_repeats", "evaluate"))
        reports = []
        for index, spec in enumerate(_require(config, "estimators", "evaluate")):
            name, estimator = _build_estimator(spec, gt)
            reports.append(
                metrics.monte_carlo(
                    gt, protocol, snr_list, n_repeats, estimator,
                    rng.stream(400, index), estimator_name=name, workers=workers,
                )
            )
        merged = reports[0]
        for extra_report in reports[1:]:
            for table, rows in extra_report.tables.items():
                merged.tables[table].extend(rows)
            merged.scalars["failures"].update(extra_report.scalars["failures"])
        merged.config["estimators"] = [
            spec.get("name", spec.get("kind")) for spec in config["estimators"]
        ]
        metrics.save_report(merged, out)
    elif experiment == "blurriness":
        protocol = _protocol_from(config)
        gt = _ground_truth_from(config, rng)
        if gt.sequence_kind is not SequenceKind.INVERSION_RECOVERY:
            raise ConfigError("blurriness experiment needs a T1 ground truth")
        labels_spec = config.get("labels")
        if labels_spec:
            labels = load_container(labels_spec)
        else:
            proc = config["ground_truth"].get("procedural", {})
            labels = make_procedural_labelmap(
                int(proc.get("size", 64)), rng.stream(301)
            )
        structures = metrics.default_structures(labels)
        estimators = {}
        for spec in _require(config, "estimators", "evaluate"):
            name, estimator = _build_estimator(spec, gt)
            estimators[name] = estimator
        report = metrics.blurriness_experiment(
            gt,
            structures,
            int(_require(config, "n_repeats", "evaluate")),
            float(config.get("snr", 10.0)),
            estimators,
            protocol,
            rng.stream(500),
            workers=workers,
        )
        metrics.save_report(report, out)
    elif experiment == "sigmoid_profile":
        spec = _require(config, "sigmoid", "evaluate")
        source = load_container(_require(spec, "map", "sigmoid"))
        if not isinstance(source, ParameterMap):
            raise ConfigError("sigmoid profile source must be a parameter map")
        channel = source.channels.index(spec.get("channel", source.channels[-1]))
        r0, c0 = spec["start"]
        r1, c1 = spec["stop"]
        n_samples = int(spec.get("n_samples", 32))
        t = np.linspace(0.0, 1.0, n_samples)
        rows = r0 + t * (r1 - r0)
        cols = c0 + t * (c1 - c0)
        from scipy import ndimage

        profile = ndimage.map_coordinates(
            source.data[..., channel], np.stack([rows, cols]), order=1
        )
        fit = metrics.sigmoid_fit(profile)
        report = metrics.EvalReport(
            kind="sigmoid_profile",
            config={"map": spec["map"], "start": [r0, c0], "stop": [r1, c1]},
            tables={
                "sigmoid_fit": [
                    {
                        "amplitude": fit.amplitude,
                        "slope": fit.slope,
                        "center": fit.center,
                        "offset": fit.offset,
                        "residual": fit.residual,
                        "ok": fit.ok,
                    }
                ]
            },
        )
        metrics.save_report(report, out)
    else:
        raise ConfigError(f"unknown experiment {experiment!r}")

    _write_provenance(out, "evaluate", config, seed)
    print(f"evaluate[{experiment}]: report written to {out}")
    return 0


def cmd_report(config: dict, workers: int) -> int:
    del workers
    eval_dir = _require(config, "eval", "report")
    out = config.get("out", eval_dir)
    report = metrics.load_report(eval_dir)
    os.makedirs(out, exist_ok=True)
    written = svgplot.render_report_plots(report, out)
    _write_provenance(out, "report", config, _resolve_seed(config))
    print(f"report: wrote {len(written)} plots to {out}")
    return 0


# --- entry point --------------------------------------------------------------

_COMMANDS = {
    "simulate": cmd_simulate,
    "train-rim": cmd_train_rim,
    "train-resnet": cmd_train_resnet,
    "infer": cmd_infer,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="relaxkit",
        description="Quantitative T1/T2 mapping: simulate, train, fit, evaluate.",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name in [*_COMMANDS, "fit-mle"]:
        p = sub.add_parser(name)
        p.add_argument("-c", "--config", required=True, help="JSON config path")
        p.add_argument(
            "--set",
            dest="sets",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override a config entry (dotted path, JSON value)",
        )
        p.add_argument("--workers", type=int, default=1)
    args = parser.parse_args(argv)

    try:
        config = _apply_overrides(_load_config(args.config), args.sets)
        if args.subcommand == "fit-mle":
            return cmd_infer(config, args.workers, forced_estimator="mle")
        return _COMMANDS[args.subcommand](config, args.workers)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except CompatibilityError as exc:
        print(f"incompatible inputs: {exc}", file=sys.stderr)
        return 3
    except (ContainerFormatError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 4
    except RelaxkitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
