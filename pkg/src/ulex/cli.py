"""Command-line driver for the full pipeline.

All randomness derives from one root seed in the experiment config,
expanded into independent named streams per stage, so any artifact can be
regenerated bit-for-bit. Progress and content hashes go to stderr; data
goes to files (and `evaluate` prints its accuracy to stdout).

Exit codes: 0 success, 2 usage/config error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import diffcore as dc
from . import datasets as ds
from . import metrics as mx
from . import models as md
from . import poisonforge as pf
from . import scorelab as sl
from . import victim as vc

SCHEMA_VERSION = 1
EXIT_USAGE = 2
EXIT_NUMERIC = 3


class ConfigError(Exception):
    """Experiment config is missing, malformed, or out of range."""


def log(msg: str) -> None:
    print(msg, file=sys.stderr)


def derive_seed(root: int, name: str) -> int:
    """Stable named sub-seed of the root seed (sha256 based)."""
    digest = hashlib.sha256(f"{root}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _log_artifact(path) -> None:
    log(f"artifact path={path} sha256={file_sha256(path)}")


# -- config -------------------------------------------------------------------

@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    dataset: dict
    score: dict
    budget: pf.PerturbationBudget
    generator: dict
    victim_train: dict
    victims: list[dict]
    fractions: list[float]
    output_dir: str | None

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        return cls.from_dict(raw)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        if raw.get("schema_version") != SCHEMA_VERSION:
            raise ConfigError(
                f"unsupported schema_version {raw.get('schema_version')!r}, "
                f"expected {SCHEMA_VERSION}")
        try:
            dataset = dict(raw["dataset"])
            score = dict(raw.get("score", {}))
            budget_raw = dict(raw["budget"])
            generator = dict(raw.get("generator", {}))
            victims = [dict(v) for v in raw.get("victims", [])]
            fractions = [float(p) for p in raw.get("fractions", [1.0])]
            seed = int(raw.get("seed", 0))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad config structure: {exc}") from None
        if dataset.get("kind") not in ("gaussian_mixture", "two_moons"):
            raise ConfigError(
                f"dataset.kind must be gaussian_mixture or two_moons, "
                f"got {dataset.get('kind')!r}")
        if any(not 0.0 <= p <= 1.0 for p in fractions):
            raise ConfigError("fractions must lie in [0, 1]")
        if not victims:
            raise ConfigError("at least one victim grid entry is required")
        try:
            budget = pf.PerturbationBudget(
                rho_u=float(budget_raw["rho_u"]),
                rho_a=float(budget_raw.get("rho_a", 0.0)),
                alpha_u=budget_raw.get("alpha_u"),
                alpha_s=budget_raw.get("alpha_s"),
                alpha_a=budget_raw.get("alpha_a"),
                k_u=int(budget_raw.get("k_u", 10)),
                k_a=int(budget_raw.get("k_a", 10)))
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"bad budget: {exc}") from None
        for v in victims:
            if float(v.get("rho_a_train", 0.0)) < 0:
                raise ConfigError("victim rho_a_train must be non-negative")
        return cls(seed=seed, dataset=dataset, score=score, budget=budget,
                   generator=generator, victim_train=dict(raw.get("victim_train", {})),
                   victims=victims, fractions=fractions,
                   output_dir=raw.get("output_dir"))


def _mixture_spec(dcfg: dict) -> ds.GaussianMixtureSpec:
    if "components" in dcfg:
        classes = []
        for comps in dcfg["components"]:
            classes.append(tuple(
                ds.GaussianComponent(tuple(c["mean"]), float(c["scale"]),
                                     float(c.get("weight", 1.0)))
                for c in comps))
        k = len(classes)
        weights = dcfg.get("class_weights", [1.0 / k] * k)
        return ds.GaussianMixtureSpec(tuple(classes), tuple(weights))
    return ds.GaussianMixtureSpec.single_gaussians(
        dcfg["means"], float(dcfg.get("cov_scale", 1.0)))


def build_datasets(cfg: ExperimentConfig,
                   ) -> tuple[ds.LabeledDataset, ds.LabeledDataset,
                              ds.NormalizeTransform | None]:
    """Generate train/test splits; the train-split transform normalizes both."""
    dcfg = cfg.dataset
    train_n = int(dcfg.get("train_per_class", 500))
    test_n = int(dcfg.get("test_per_class", 250))
    seed_train = derive_seed(cfg.seed, "data/train")
    seed_test = derive_seed(cfg.seed, "data/test")
    try:
        if dcfg["kind"] == "gaussian_mixture":
            spec = _mixture_spec(dcfg)
            train = ds.gen_mixture(spec, train_n, seed_train, name="train")
            test = ds.gen_mixture(spec, test_n, seed_test, name="test")
        else:
            noise_scale = float(dcfg.get("noise_scale", 0.1))
            train = ds.gen_two_moons(train_n, noise_scale, seed_train, name="train")
            test = ds.gen_two_moons(test_n, noise_scale, seed_test, name="test")
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad dataset spec: {exc}") from None
    if not dcfg.get("normalize", True):
        return train, test, None
    train, transform = ds.normalize(train)
    test = test.with_features(transform.apply(test.features))
    return train, test, transform


def _score_arch(cfg: ExperimentConfig, data_dim: int, n_classes: int) -> md.ArchSpec:
    hidden = tuple(cfg.score.get("hidden", (128, 128)))
    return md.ArchSpec(data_dim + n_classes, hidden, data_dim, activation="tanh")


def _surrogate_arch(cfg: ExperimentConfig, data_dim: int, n_classes: int) -> md.ArchSpec:
    hidden = tuple(cfg.generator.get("surrogate_hidden", (64, 64)))
    return md.ArchSpec(data_dim, hidden, n_classes, activation="relu")


def _victim_arch(entry: dict, data_dim: int, n_classes: int) -> md.ArchSpec:
    return md.ArchSpec(data_dim, tuple(entry.get("hidden", (64, 64))), n_classes,
                       activation=entry.get("activation", "relu"))


def _dsm_config(cfg: ExperimentConfig) -> sl.DSMConfig:
    s = cfg.score
    return sl.DSMConfig(
        sigma=float(s.get("sigma", 0.5)),
        epochs=int(s.get("epochs", 60)),
        batch_size=int(s.get("batch_size", 128)),
        learning_rate=float(s.get("learning_rate", 0.05)),
        seed=derive_seed(cfg.seed, "score/train"))


def _generator_config(cfg: ExperimentConfig) -> pf.GeneratorTrainConfig:
    g = cfg.generator
    return pf.GeneratorTrainConfig(
        iterations=int(g.get("iterations", 150)),
        learning_rate=float(g.get("learning_rate", 0.1)),
        batch_size=int(g.get("batch_size", 128)),
        seed=derive_seed(cfg.seed, "generator/train"),
        delta_init=g.get("delta_init", "uniform"))


def _victim_config(cfg: ExperimentConfig, entry: dict, arch: md.ArchSpec,
                   seed: int) -> vc.VictimTrainConfig:
    vt = cfg.victim_train
    return vc.VictimTrainConfig(
        arch=arch,
        epochs=int(vt.get("epochs", 30)),
        batch_size=int(vt.get("batch_size", 64)),
        learning_rate=float(vt.get("learning_rate", 0.1)),
        rho_a_train=float(entry.get("rho_a_train", 0.0)),
        pgd_steps=int(vt.get("pgd_steps", 10)),
        pgd_step_size=vt.get("pgd_step_size"),
        seed=seed)


# -- pipeline stages ----------------------------------------------------------

def stage_gen_data(cfg: ExperimentConfig, out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    train, test, transform = build_datasets(cfg)
    train_path, test_path = out_dir / "train.ulds", out_dir / "test.ulds"
    ds.save_dataset(train, train_path)
    ds.save_dataset(test, test_path)
    with open(out_dir / "normalize.json", "w") as fh:
        json.dump(transform.to_json() if transform else None, fh, sort_keys=True)
        fh.write("\n")
    for p in (train_path, test_path, out_dir / "normalize.json"):
        _log_artifact(p)
    return train, test


def stage_train_score(cfg: ExperimentConfig, train: ds.LabeledDataset, out_path: Path):
    dsm = _dsm_config(cfg)
    spec = _score_arch(cfg, train.dim, train.n_classes)
    model = md.init_score_model(spec, dsm.sigma, derive_seed(cfg.seed, "score/init"))
    trained, history = sl.train_score(model, train, dsm)
    md.save_model(trained, out_path)
    sl.write_loss_history(history, out_path.with_name(out_path.stem + "_history.csv"))
    _log_artifact(out_path)
    return trained


def stage_train_generator(cfg: ExperimentConfig, train: ds.LabeledDataset,
                          score_model: md.ScoreModel | None, out_path: Path):
    arch = _surrogate_arch(cfg, train.dim, train.n_classes)
    surrogate = md.init_classifier(arch, derive_seed(cfg.seed, "generator/init"))
    trained, history = pf.train_generator(surrogate, score_model, train, cfg.budget,
                                          _generator_config(cfg))
    md.save_model(trained, out_path)
    pf.write_generator_history(history,
                               out_path.with_name(out_path.stem + "_history.csv"))
    _log_artifact(out_path)
    return trained


def stage_emit_poison(cfg: ExperimentConfig, generator: md.ClassifierModel,
                      score_model: md.ScoreModel | None, train: ds.LabeledDataset,
                      out_path: Path) -> pf.PoisonedDataset:
    poison = pf.emit_poison(generator, score_model, train, cfg.budget,
                            derive_seed(cfg.seed, "poison"))
    pf.save_poison(poison, out_path)
    _log_artifact(out_path)
    return poison


def run_experiment(cfg: ExperimentConfig, out_dir: Path, jobs: int = 1) -> Path:
    """Full grid: data -> score -> generator -> poison -> victim grid -> report."""
    out_dir.mkdir(parents=True, exist_ok=True)
    train, test = stage_gen_data(cfg, out_dir / "data")
    score_model = stage_train_score(cfg, train, out_dir / "score.cwmd")
    generator = stage_train_generator(cfg, train, score_model, out_dir / "generator.cwmd")
    poison = stage_emit_poison(cfg, generator, score_model, train, out_dir / "noise.ulpn")

    mx.scatter_svg(train, out_dir / "scatter_clean.svg")
    mx.scatter_svg(poison, out_dir / "scatter_poisoned.svg")
    _log_artifact(out_dir / "scatter_clean.svg")
    _log_artifact(out_dir / "scatter_poisoned.svg")

    msn_clean, _ = mx.score_norm_stats(score_model, train)
    _, spread_clean = mx.intra_class_spread(train.features, train.labels,
                                            train.n_classes)
    surrogate_label = mx.describe_arch(generator.spec)

    mixed: dict[float, ds.LabeledDataset] = {}
    frac_stats: dict[float, tuple[float, float]] = {}
    for p in cfg.fractions:
        mixed_p = vc.mix_partial(train, poison, p,
                                 derive_seed(cfg.seed, f"mix/{p:g}"))
        msn_p, _ = mx.score_norm_stats(score_model, mixed_p)
        _, spread_p = mx.intra_class_spread(mixed_p.features, mixed_p.labels,
                                            mixed_p.n_classes)
        mixed[p] = mixed_p
        frac_stats[p] = (msn_p, spread_p)

    victims_dir = out_dir / "victims"
    victims_dir.mkdir(exist_ok=True)

    def train_cell(vi: int, entry: dict, data: ds.LabeledDataset, tag: str) -> float:
        arch = _victim_arch(entry, train.dim, train.n_classes)
        vcfg = _victim_config(cfg, entry, arch,
                              seed=derive_seed(cfg.seed, f"victim/{vi}"))
        model, history = vc.train_victim(data, vcfg, test_dataset=test)
        model_path = victims_dir / f"v{vi}_{tag}.cwmd"
        md.save_model(model, model_path)
        vc.write_victim_history(history, victims_dir / f"v{vi}_{tag}_history.csv")
        _log_artifact(model_path)
        return vc.evaluate(model, test)

    cells = [(vi, entry, "clean", train) for vi, entry in enumerate(cfg.victims)]
    cells += [(vi, entry, f"p{p:g}", mixed[p])
              for vi, entry in enumerate(cfg.victims) for p in cfg.fractions]
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            accs = list(pool.map(lambda c: train_cell(c[0], c[1], c[3], c[2]), cells))
    else:
        accs = [train_cell(vi, entry, tag, data) for vi, entry, tag, data in cells]
    acc_by_key = {(vi, tag): acc for (vi, entry, tag, data), acc in zip(cells, accs)}

    records = []
    for vi, entry in enumerate(cfg.victims):
        arch = _victim_arch(entry, train.dim, train.n_classes)
        clean_acc = acc_by_key[(vi, "clean")]
        for p in cfg.fractions:
            msn_p, spread_p = frac_stats[p]
            records.append(mx.MetricsRecord(
                run_id=f"v{vi}_p{p:g}",
                dataset=train.name,
                surrogate_arch=surrogate_label,
                victim_arch=mx.describe_arch(arch),
                rho_u=cfg.budget.rho_u,
                rho_a_train=float(entry.get("rho_a_train", 0.0)),
                fraction=p,
                clean_test_acc=clean_acc,
                poisoned_test_acc=acc_by_key[(vi, f"p{p:g}")],
                mean_score_norm_clean=msn_clean,
                mean_score_norm_poisoned=msn_p,
                intra_class_spread_clean=spread_clean,
                intra_class_spread_poisoned=spread_p,
            ))
    report_path = out_dir / "report.csv"
    mx.write_report(records, report_path)
    _log_artifact(report_path)
    return report_path


# -- subcommands ----------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = ExperimentConfig.from_file(args.config)
    stage_gen_data(cfg, Path(args.out))
    return 0


def cmd_train_score(args) -> int:
    cfg = ExperimentConfig.from_file(args.config)
    train = ds.load_dataset(args.data)
    stage_train_score(cfg, train, Path(args.out))
    return 0


def cmd_sample_sgld(args) -> int:
    score_model = md.load_score_model(args.score)
    data = ds.load_dataset(args.data)
    sgld = sl.SGLDConfig(alpha=args.alpha, steps=args.steps,
                         direction=args.direction, seed=args.seed)
    traj = sl.sgld_run(score_model, data.features, data.labels, sgld)
    final = data.with_features(traj[-1].astype(np.float32), name="sgld")
    ds.save_dataset(final, args.out)
    _log_artifact(args.out)
    if args.traj_out:
        np.save(args.traj_out, traj)
        _log_artifact(args.traj_out)
    return 0


def cmd_train_generator(args) -> int:
    cfg = ExperimentConfig.from_file(args.config)
    train = ds.load_dataset(args.data)
    score_model = md.load_score_model(args.score)
    stage_train_generator(cfg, train, score_model, Path(args.out))
    return 0


def cmd_craft_noise(args) -> int:
    cfg = ExperimentConfig.from_file(args.config)
    generator = md.load_classifier(args.generator)
    score_model = md.load_score_model(args.score)
    train = ds.load_dataset(args.data)
    stage_emit_poison(cfg, generator, score_model, train, Path(args.out))
    return 0


def _parse_hidden(text: str) -> tuple[int, ...]:
    text = text.strip()
    if not text:
        return ()
    try:
        return tuple(int(part) for part in text.split(","))
    except ValueError:
        raise ConfigError(f"bad --arch value {text!r}; expected e.g. '64,64'") from None


def cmd_train_victim(args) -> int:
    data = ds.load_dataset(args.data)
    if args.noise:
        poison = pf.load_poison(args.noise, data)
        data_used = vc.mix_partial(data, poison, args.fraction,
                                   derive_seed(args.seed, f"mix/{args.fraction:g}"))
    else:
        if args.fraction not in (0.0, None):
            raise ConfigError("--fraction needs --noise")
        data_used = data
    arch = md.ArchSpec(data.dim, _parse_hidden(args.arch), data.n_classes,
                       activation=args.activation)
    cfg = vc.VictimTrainConfig(
        arch=arch, epochs=args.epochs, batch_size=args.batch_size,
        learning_rate=args.learning_rate, rho_a_train=args.rho_a,
        pgd_steps=args.pgd_steps, seed=args.seed)
    test = ds.load_dataset(args.test) if args.test else None
    model, history = vc.train_victim(data_used, cfg, test_dataset=test)
    md.save_model(model, args.out)
    vc.write_victim_history(history, Path(args.out).with_suffix(".history.csv"))
    _log_artifact(args.out)
    return 0


def cmd_evaluate(args) -> int:
    model = md.load_classifier(args.model)
    data = ds.load_dataset(args.data)
    print(vc.evaluate(model, data))
    return 0


def cmd_experiment(args) -> int:
    cfg = ExperimentConfig.from_file(args.config)
    out = Path(args.out) if args.out else Path(cfg.output_dir or "out")
    run_experiment(cfg, out, jobs=args.jobs)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ulex",
        description="Craft and evaluate unlearnable examples on synthetic data.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate train/test splits")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-score", help="train the conditional score network")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output model file")
    p.set_defaults(func=cmd_train_score)

    p = sub.add_parser("sample-sgld", help="run Langevin chains from dataset points")
    p.add_argument("--score", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--direction", choices=["toward", "away"], default="toward")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="final states as a dataset file")
    p.add_argument("--traj-out", default=None, help="optional .npy full trajectory")
    p.set_defaults(func=cmd_sample_sgld)

    p = sub.add_parser("train-generator", help="train the noise generator surrogate")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--score", required=True)
    p.add_argument("--out", required=True, help="output model file")
    p.set_defaults(func=cmd_train_generator)

    p = sub.add_parser("craft-noise", help="emit the final unlearnable noise")
    p.add_argument("--config", required=True)
    p.add_argument("--generator", required=True)
    p.add_argument("--score", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output poison file")
    p.set_defaults(func=cmd_craft_noise)

    p = sub.add_parser("train-victim", help="train a victim on (mixed) data")
    p.add_argument("--data", required=True)
    p.add_argument("--noise", default=None)
    p.add_argument("--fraction", type=float, default=0.0)
    p.add_argument("--arch", default="64,64", help="comma-separated hidden sizes")
    p.add_argument("--activation", choices=["relu", "tanh"], default="relu")
    p.add_argument("--rho-a", type=float, default=0.0, dest="rho_a")
    p.add_argument("--pgd-steps", type=int, default=10)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--learning-rate", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--test", default=None, help="optional test set for the history")
    p.add_argument("--out", required=True, help="output model file")
    p.set_defaults(func=cmd_train_victim)

    p = sub.add_parser("evaluate", help="print test accuracy of a saved model")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("experiment", help="run the full grid and emit report.csv")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--jobs", type=int, default=1,
                   help="parallel grid cells (default 1; only 1 is bitwise stable)")
    p.set_defaults(func=cmd_experiment)
    return parser


_USAGE_ERRORS = (ConfigError, ds.DatasetFormatError, md.ModelFormatError,
                 pf.PoisonFormatError, FileNotFoundError, ValueError)
_NUMERIC_ERRORS = (sl.TrainingDivergedError, sl.SGLDDivergenceError,
                   dc.NonFiniteError)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except _NUMERIC_ERRORS as exc:
        log(f"error[numeric]: {exc}")
        return EXIT_NUMERIC
    except _USAGE_ERRORS as exc:
        log(f"error[config]: {exc}")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
