"""Command-line entry point.

Every subcommand reads the same flat config file (``--config``) plus
``--set key=value`` overrides, echoes the effective configuration into the
output directory and writes its artifacts there. Exit codes: 0 success,
1 validation error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import baselines, dataset, evaluation, gan, gradcheck
from .config import RunConfig, dumps_config, load_config
from .errors import (ConfigError, DataError, DegenerateInputError, LeakageError,
                     ReflectGANError)
from .spectral import DEFAULT_ROLES, DEFAULT_TCT, load_tct_coefficients

log = logging.getLogger("reflectgan")

VALIDATION_ERRORS = (ConfigError, DataError, DegenerateInputError, LeakageError)
BASELINE_KINDS = ("vegetated_only", "vi_corrected", "sma_corrected", "reconstructed_only")


# -- helpers -----------------------------------------------------------------

def _require(path: Path, what: str) -> Path:
    if not path.is_file():
        raise ConfigError(f"{what} not found: {path} (run the producing command first or set its path)")
    return path


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.paths.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create output directory {out}: {e}") from None
    return out


def _echo_config(cfg: RunConfig, command: str) -> None:
    (_out_dir(cfg) / f"config_{command}.txt").write_text(dumps_config(cfg))


def _load_samples(cfg: RunConfig, path: Path | None = None):
    path = _require(path or cfg.path("samples"), "samples file")
    report = dataset.LoadReport()
    samples = dataset.load_samples(path, cfg.n_bands, DEFAULT_ROLES, report)
    if report.rejected:
        log.warning("%s: %d row(s) rejected", path, len(report.rejected))
    return samples


def _tct(cfg: RunConfig):
    return load_tct_coefficients(cfg.paths.tct) if cfg.paths.tct else DEFAULT_TCT


def write_split(path, samples, sp: dataset.DatasetSplit) -> None:
    subset = {int(i): ("test", "") for i in sp.test_indices}
    for f, idx in enumerate(sp.folds):
        for i in idx:
            subset[int(i)] = ("train", str(f))
    for i in sp.train_indices:
        subset.setdefault(int(i), ("train", ""))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "subset", "fold"])
        for i, s in enumerate(samples):
            w.writerow([s.id, *subset[i]])


def read_split(path, samples, seed: int) -> dataset.DatasetSplit:
    pos = {s.id: i for i, s in enumerate(samples)}
    train, test, folds = [], [], {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["sample_id", "subset", "fold"]:
            raise DataError(f"{path}: expected header sample_id,subset,fold")
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if row[0] not in pos:
                raise DataError(f"{path}:{line_no}: unknown sample id {row[0]!r}")
            i = pos.pop(row[0])
            if row[1] == "test":
                test.append(i)
            elif row[1] == "train":
                train.append(i)
                if row[2]:
                    folds.setdefault(int(row[2]), []).append(i)
            else:
                raise DataError(f"{path}:{line_no}: subset must be train or test")
    if pos:
        raise DataError(f"{path}: {len(pos)} sample(s) missing from the split, e.g. {next(iter(pos))}")
    return dataset.DatasetSplit(np.array(sorted(train), dtype=np.int64), np.array(sorted(test), dtype=np.int64),
                                [np.array(sorted(folds[k]), dtype=np.int64) for k in sorted(folds)], seed)


def _make_split(cfg: RunConfig, samples) -> dataset.DatasetSplit:
    return dataset.split(len(samples), cfg.split.test_fraction, cfg.split.k_folds, cfg.split.seed)


def _get_split(cfg: RunConfig, samples) -> dataset.DatasetSplit:
    path = cfg.path("split")
    if path.is_file():
        return read_split(path, samples, cfg.split.seed)
    return _make_split(cfg, samples)


def _read_ids(path: Path) -> list[str]:
    return [line.strip() for line in _require(path, "generator training-id file").read_text().splitlines()
            if line.strip()]


def _prepare(cfg: RunConfig, kinds, samples):
    sp = _get_split(cfg, samples)
    generator = ids = None
    if any(k in evaluation.RECONSTRUCTED_KINDS for k in kinds):
        generator = gan.load_weights(_require(cfg.path("generator"), "generator weights"),
                                     cfg.n_bands, "generator")
        ids = _read_ids(cfg.path("gan_ids"))
    em = None
    if cfg.paths.endmembers and "sma_corrected" in kinds:
        em = baselines.read_endmembers(_require(cfg.path("endmembers"), "endmember file"), cfg.n_bands)
    return evaluation.prepare_inputs(samples, sp, generator, ids, tuple(kinds), cfg.ndvi_threshold,
                                     DEFAULT_ROLES, _tct(cfg), em)


def _print_row(row: evaluation.EvalRow) -> None:
    print(f"{row.scenario:<26}{'+feat' if row.with_features else '':<6}{row.model:<8}"
          f"r2={row.r2:8.4f}  rmse={row.rmse:8.4f}  rpd={row.rpd:7.4f}  n={row.n_test}", flush=True)


# -- commands ----------------------------------------------------------------

def cmd_synth(cfg: RunConfig) -> int:
    _out_dir(cfg)
    cfg.synth.validate()
    samples, truth = dataset.synth_generate(cfg.synth, DEFAULT_ROLES)
    dataset.write_samples(cfg.path("samples"), samples, cfg.n_bands)
    dataset.write_truth(cfg.path("truth"), truth, cfg.n_bands)
    print(f"wrote {len(samples)} samples to {cfg.path('samples')} and truth to {cfg.path('truth')}")
    return 0


def cmd_pair(cfg: RunConfig) -> int:
    samples = _load_samples(cfg)
    sp = _make_split(cfg, samples)
    write_split(cfg.path("split"), samples, sp)
    is_train = np.zeros(len(samples), dtype=bool)
    is_train[sp.train_indices] = True
    bare, veg = dataset.classify_by_ndvi(samples, cfg.ndvi_threshold)
    # only training-set bare spectra may serve as reconstruction targets
    train_ids = {samples[i].id for i in sp.train_indices}
    bare_train = [s for s in bare if s.id in train_ids]
    rep = dataset.PairingReport()
    pairs = dataset.pair_samples(veg, bare_train, cfg.pairing.k, cfg.pairing.max_radius, rep)
    dataset.write_pairs(cfg.path("pairs"), pairs, cfg.n_bands)
    print(f"bare={len(bare)} vegetated={len(veg)} paired={rep.paired} dropped={rep.dropped}")
    return 0


def cmd_train_gan(cfg: RunConfig) -> int:
    samples = _load_samples(cfg)
    sp = _get_split(cfg, samples)
    train_ids = {samples[i].id for i in sp.train_indices}
    pairs = [p for p in dataset.read_pairs(_require(cfg.path("pairs"), "paired CSV"), cfg.n_bands)
             if p.veg_id in train_ids]
    if not pairs:
        raise DataError("no training pairs")
    t0 = time.perf_counter()
    every = max(1, cfg.gan.epochs // 10)

    def progress(rep):
        if rep.epoch % every == 0 or rep.epoch == cfg.gan.epochs - 1:
            log.info("epoch %d loss_d=%.4f loss_g=%.4f", rep.epoch, rep.loss_d, rep.loss_g)

    g, d, history = gan.train(pairs, cfg.gan, cfg.n_bands, progress=progress)
    gan.save_weights(g, cfg.path("generator"), "generator")
    gan.save_weights(d, cfg.path("discriminator"), "discriminator")
    gan.write_loss_history(cfg.path("gan_loss"), history)
    used = sorted({p.veg_id for p in pairs} | {b for p in pairs for b in p.bare_ids})
    cfg.path("gan_ids").write_text("".join(f"{i}\n" for i in used))
    print(f"trained on {len(pairs)} pairs for {cfg.gan.epochs} epochs in {time.perf_counter() - t0:.1f}s")
    return 0


def cmd_reconstruct(cfg: RunConfig) -> int:
    samples = _load_samples(cfg)
    g = gan.load_weights(_require(cfg.path("generator"), "generator weights"), cfg.n_bands, "generator")
    bands = np.array([s.bands for s in samples], dtype=np.float64).reshape(len(samples), cfg.n_bands)
    flags = np.array([s.ndvi > cfg.ndvi_threshold for s in samples], dtype=bool)
    out = bands.copy()
    if flags.any():
        out[flags] = gan.reconstruct(g, bands[flags])
    corrected = [dataset.SoilSample.from_bands(s.id, s.lon, s.lat, s.soc, out[i], DEFAULT_ROLES)
                 for i, s in enumerate(samples)]
    dataset.write_samples(cfg.path("reconstructed"), corrected, cfg.n_bands,
                          extra={"reconstructed": ["1" if f else "0" for f in flags]})
    print(f"reconstructed {int(flags.sum())} of {len(samples)} samples -> {cfg.path('reconstructed')}")
    return 0


def cmd_train_soc(cfg: RunConfig) -> int:
    samples = _load_samples(cfg)
    spec = evaluation.ScenarioSpec(cfg.eval.input_kind, cfg.eval.with_features, cfg.eval.model)
    spec.validate()
    data = _prepare(cfg, (spec.input_kind,), samples)
    row, model, _ = evaluation.run_scenario(spec, data, cfg.model_seeds(), cfg.models)
    cfg.path("model").write_text(model.dump())
    evaluation.EvalReport([row]).write_csv(cfg.path("soc_report"))
    _print_row(row)
    return 0


def cmd_evaluate(cfg: RunConfig) -> int:
    samples = _load_samples(cfg)
    specs = evaluation.default_scenarios(cfg.eval.kinds, cfg.eval.models, cfg.eval.features)
    data = _prepare(cfg, cfg.eval.kinds, samples)
    report = evaluation.run_scenarios(specs, data, cfg.model_seeds(), cfg.models, progress=_print_row)
    report.write_csv(cfg.path("report"))
    report.write_pearson(cfg.path("pearson"), cfg.n_bands)
    print(f"{len(report.rows)} rows -> {cfg.path('report')}; correlations -> {cfg.path('pearson')}")
    return 0


def cmd_compare_baselines(cfg: RunConfig) -> int:
    samples = _load_samples(cfg)
    data = _prepare(cfg, BASELINE_KINDS, samples)
    specs = [evaluation.ScenarioSpec(k, False, cfg.eval.model) for k in BASELINE_KINDS]
    report = evaluation.run_scenarios(specs, data, cfg.model_seeds(), cfg.models, progress=_print_row)
    report.write_csv(cfg.path("baselines"))
    if not cfg.paths.endmembers:
        baselines.write_endmembers(cfg.path("endmembers"), data.endmembers)
    print(f"{len(report.rows)} rows -> {cfg.path('baselines')}")
    return 0


def cmd_grad_check(cfg: RunConfig) -> int:
    t0 = time.perf_counter()
    results = gradcheck.run_grad_checks(seed=0)
    print(gradcheck.format_table(results))
    ok = all(r.passed for r in results)
    print(f"{'all passed' if ok else 'FAILED'} in {time.perf_counter() - t0:.2f}s (tolerance {gradcheck.GRAD_TOL:g})")
    return 0 if ok else 1


COMMANDS = {
    "synth": cmd_synth,
    "pair": cmd_pair,
    "train-gan": cmd_train_gan,
    "reconstruct": cmd_reconstruct,
    "train-soc": cmd_train_soc,
    "evaluate": cmd_evaluate,
    "compare-baselines": cmd_compare_baselines,
    "grad-check": cmd_grad_check,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="reflectgan", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config value (repeatable)")
        p.add_argument("--out", help="shorthand for --set paths.out_dir=OUT")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    overrides = list(args.set) + ([f"paths.out_dir={args.out}"] if args.out else [])
    try:
        cfg = load_config(args.config, overrides)
        if args.command != "grad-check":
            _echo_config(cfg, args.command)
        return COMMANDS[args.command](cfg)
    except VALIDATION_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (ReflectGANError, OSError, RuntimeError) as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
