"""Command-line entry point: ``cfaa <command> [--config FILE] [--key value ...]``.

Commands
--------
synth-data          write a synthetic two-domain benchmark (TSVs + review containers)
featurize           hashed TF-IDF review vectors for the configured ratings files
train               fit one ablation arm; writes a checkpoint and a per-step loss log
evaluate            sampled-candidate HR/Recall/NDCG on the target test split
align-diagnostics   L_O, L_A and proxy A-distances for a checkpoint

Configuration is a flat ``key = value`` file (``#`` comments).  ``--key value``
overrides win over the file; unknown keys are rejected.  Every command writes
the fully resolved configuration to ``<out_dir>/<command>.config``, which can be
fed back through ``--config`` to reproduce the run.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import data, experiment, model

log = logging.getLogger("cfaa")

COMMANDS = ("synth-data", "featurize", "train", "evaluate", "align-diagnostics")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # paths
    out_dir: str = "run"
    source_ratings: str = ""      # empty -> <out_dir>/source.tsv
    target_ratings: str = ""
    source_reviews: str = ""      # empty -> <out_dir>/source_reviews.cfae
    target_reviews: str = ""
    checkpoint: str = ""          # empty -> <out_dir>/checkpoint.cfaa
    # preprocessing
    threshold: float = 4.0
    min_records: int = 30
    target_keep_fraction: float = 1.0
    split_seed: int = 0
    # synthetic benchmark
    synth_users: int = 2000
    synth_items: int = 500
    synth_latent_dim: int = 8
    synth_angle: float = math.pi / 3
    synth_translation: float = 1.0
    synth_source_density: float = 0.1
    synth_target_density: float = 0.03
    synth_review_noise: float = 0.3
    synth_seed: int = 0
    d_rev: int = 16
    # model and optimisation
    D: int = 16
    batch_size: int = 128
    K: int = 0                    # 0 -> batch_size // 2
    alpha: float = 0.1
    nu: float = 0.1
    epsilon: float = 0.0          # 0 -> 0.05 * mean cost per attribution
    delta: float = 1e-6
    lambda_O: float = 0.5
    lambda_A: float = 0.8
    arm: str = "full"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    head_hidden: int = 0          # 0 -> D
    seed: int = 0
    epochs: int = 1
    steps: int = 0                # >0 overrides epochs
    log_every: int = 0
    # evaluation
    eval_negatives: int = 99
    eval_k: int = 10
    eval_seed: int = 0
    probe_folds: int = 5

    def path(self, key: str, default_name: str) -> Path:
        value = getattr(self, key)
        return Path(value) if value else Path(self.out_dir) / default_name

    def train_config(self) -> model.TrainConfig:
        return model.TrainConfig(
            D=self.D, batch_size=self.batch_size, K=self.K or None, alpha=self.alpha,
            nu=self.nu, epsilon=self.epsilon or None, delta=self.delta,
            lambda_O=self.lambda_O, lambda_A=self.lambda_A, arm=self.arm, lr=self.lr,
            beta1=self.beta1, beta2=self.beta2, eps_adam=self.eps_adam,
            head_hidden=self.head_hidden or None, seed=self.seed)

    def synthetic_spec(self) -> data.SyntheticSpec:
        return data.SyntheticSpec(
            n_users=self.synth_users, n_items=self.synth_items,
            latent_dim=self.synth_latent_dim, angle=self.synth_angle,
            translation=self.synth_translation,
            source_density=self.synth_source_density,
            target_density=self.synth_target_density, review_dim=self.d_rev,
            review_noise=self.synth_review_noise, seed=self.synth_seed)

    def validate(self) -> None:
        if self.arm not in model.ARMS:
            raise ConfigError(f"arm must be one of {sorted(model.ARMS)}, got {self.arm!r}")
        for key in ("D", "batch_size", "d_rev", "eval_k", "probe_folds"):
            if getattr(self, key) <= 0:
                raise ConfigError(f"{key} must be positive")
        for key in ("lambda_O", "lambda_A", "K", "steps", "epochs", "epsilon"):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key} must be nonnegative")
        if not 0.0 < self.target_keep_fraction <= 1.0:
            raise ConfigError("target_keep_fraction must lie in (0, 1]")

    def dump(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)!r}\n"
                       if isinstance(getattr(self, f.name), float)
                       else f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self))


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, raw: str):
    kind = _TYPES[key]
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from None
    return raw


def _set(values: dict, key: str, raw: str, where: str) -> None:
    if key not in _TYPES:
        raise ConfigError(f"unknown config key {key!r} ({where})")
    values[key] = _coerce(key, raw.strip())


def parse_config_text(text: str, source: str = "<config>") -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, raw = line.split("=", 1)
        _set(values, key.strip(), raw, f"{source}:{lineno}")
    return values


def resolve_config(config_path=None, overrides=()) -> RunConfig:
    """Defaults, then the config file, then ``(key, value)`` overrides."""
    values = {}
    if config_path:
        p = Path(config_path)
        if not p.exists():
            raise FileNotFoundError(f"config file not found: {p}")
        values.update(parse_config_text(p.read_text(encoding="utf-8"), str(p)))
    for key, raw in overrides:
        _set(values, key, raw, "command line")
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg


def _split_overrides(extra: list) -> list:
    out = []
    it = iter(extra)
    for tok in it:
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, raw = key.split("=", 1)
        else:
            raw = next(it, None)
            if raw is None:
                raise ConfigError(f"missing value for --{key}")
        out.append((key.replace("-", "_") if key.replace("-", "_") in _TYPES else key, raw))
    return out


# --------------------------------------------------------------------------
# commands


def _require(path: Path) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"file not found: {path}")
    return path


def _benchmark(cfg: RunConfig) -> experiment.Benchmark:
    return experiment.load_benchmark(
        _require(cfg.path("source_ratings", "source.tsv")),
        _require(cfg.path("target_ratings", "target.tsv")),
        _require(cfg.path("source_reviews", "source_reviews.cfae")),
        _require(cfg.path("target_reviews", "target_reviews.cfae")),
        cfg.threshold, cfg.min_records, cfg.target_keep_fraction, cfg.split_seed)


def cmd_synth_data(cfg: RunConfig) -> dict:
    src, tgt, _ = data.gen_synthetic(cfg.synthetic_spec())
    out = {}
    for name, dom, domain in (("source", src, "source"), ("target", tgt, "target")):
        tsv = cfg.path(f"{name}_ratings", f"{name}.tsv")
        data.write_ratings(tsv, dom.raw)
        # only entities that survive preprocessing go into the review container
        ds = data.prepare(dom.raw, domain, cfg.threshold, cfg.min_records,
                          cfg.target_keep_fraction, cfg.split_seed)
        rev = cfg.path(f"{name}_reviews", f"{name}_reviews.cfae")
        data.save_review_features(rev, ds, data.attach_reviews(ds, dom))
        out[f"{name}_interactions"] = len(dom.raw.users)
    return out


def cmd_featurize(cfg: RunConfig) -> dict:
    out = {}
    for name in ("source", "target"):
        ds = data.load_ratings(_require(cfg.path(f"{name}_ratings", f"{name}.tsv")), name,
                               cfg.threshold, cfg.min_records, cfg.target_keep_fraction,
                               cfg.split_seed)
        feats = data.featurize_reviews(ds.user_texts, ds.item_texts, cfg.d_rev, cfg.seed)
        data.save_review_features(cfg.path(f"{name}_reviews", f"{name}_reviews.cfae"), ds, feats)
        out[f"{name}_entities"] = ds.n_users + ds.n_items
    return out


def _steps(cfg: RunConfig, bench: experiment.Benchmark) -> int:
    if cfg.steps:
        return cfg.steps
    per_epoch = min(len(bench.source.train_rows), len(bench.target.train_rows)) // cfg.batch_size
    return max(1, per_epoch) * cfg.epochs


def cmd_train(cfg: RunConfig) -> dict:
    bench = _benchmark(cfg)
    tc = cfg.train_config()
    steps = _steps(cfg, bench)
    per_epoch = max(1, steps // max(1, cfg.epochs)) if not cfg.steps else steps
    out_dir = Path(cfg.out_dir)
    res = experiment.train(bench, tc, steps, cfg.log_every)
    with (out_dir / "losses.jsonl").open("w", encoding="utf-8") as fh:
        for rep in res.reports:
            fh.write(json.dumps(rep.as_dict(), sort_keys=True) + "\n")
    with (out_dir / "epochs.tsv").open("w", encoding="utf-8") as fh:
        fh.write("epoch\tlast_step\tmean_L\tmean_L_C\tmean_L_O\tmean_L_A\n")
        for e in range(math.ceil(len(res.reports) / per_epoch)):
            chunk = res.reports[e * per_epoch:(e + 1) * per_epoch]
            means = [np.mean([getattr(r, k) for r in chunk]) for k in ("L", "L_C", "L_O", "L_A")]
            fh.write(f"{e + 1}\t{chunk[-1].step}\t" + "\t".join(f"{m:.10g}" for m in means) + "\n")
    model.save_checkpoint(cfg.path("checkpoint", "checkpoint.cfaa"), res.params, res.adam,
                          dataclasses.asdict(cfg))
    last = res.reports[-1]
    return {"steps": steps, "final_L": last.L, "final_L_C": last.L_C,
            "final_L_O": last.L_O, "final_L_A": last.L_A}


def _load_trained(cfg: RunConfig):
    """Checkpoint parameters and the model config they were trained with."""
    params, _, saved = model.load_checkpoint(_require(cfg.path("checkpoint", "checkpoint.cfaa")))
    trained = RunConfig(**{k: v for k, v in saved.items() if k in _TYPES})
    return params, trained.train_config()


def cmd_evaluate(cfg: RunConfig) -> dict:
    bench = _benchmark(cfg)
    params, tc = _load_trained(cfg)
    m = experiment.evaluate_model(params, bench, tc, cfg.eval_k, cfg.eval_negatives,
                                  cfg.eval_seed)
    record = {"arm": tc.arm, "seed": tc.seed, "k": cfg.eval_k, **m}
    with (Path(cfg.out_dir) / "metrics.jsonl").open("a", encoding="utf-8") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")
    return record


def cmd_align_diagnostics(cfg: RunConfig) -> dict:
    bench = _benchmark(cfg)
    params, tc = _load_trained(cfg)
    return {"arm": tc.arm, "seed": cfg.eval_seed,
            **experiment.align_diagnostics(params, bench, tc, cfg.eval_seed, cfg.probe_folds)}


HANDLERS = {
    "synth-data": (cmd_synth_data, "synth_data.txt"),
    "featurize": (cmd_featurize, "featurize.txt"),
    "train": (cmd_train, "train_summary.txt"),
    "evaluate": (cmd_evaluate, "metrics.txt"),
    "align-diagnostics": (cmd_align_diagnostics, "diagnostics.txt"),
}


def _report(values: dict) -> str:
    return "".join(f"{k}={v!r}\n" if isinstance(v, float) else f"{k}={v}\n"
                   for k, v in values.items())


def run(command: str, cfg: RunConfig) -> dict:
    """Execute one command; writes its report and resolved config to ``out_dir``."""
    if command not in HANDLERS:
        raise ConfigError(f"unknown command {command!r}")
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = command.replace("-", "_")
    (out_dir / f"{stem}.config").write_text(cfg.dump(), encoding="utf-8")
    handler, report = HANDLERS[command]
    result = handler(cfg)
    seeds = {"seed": cfg.seed, "synth_seed": cfg.synth_seed, "split_seed": cfg.split_seed}
    header = {"command": command, "config": str(out_dir / f"{stem}.config"), **seeds}
    (out_dir / report).write_text(_report({**header, **result}), encoding="utf-8")
    return result


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cfaa", description=__doc__.split("\n")[0],
                                epilog="Any config key can be overridden with --key value.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="flat key = value configuration file")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args, extra = build_parser().parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args.config, _split_overrides(extra))
        result = run(args.command, cfg)
    except (ConfigError, FileNotFoundError, data.RatingsFormatError,
            data.EmbeddingFormatError, model.CheckpointError, KeyError) as exc:
        print(f"cfaa: error: {exc}", file=sys.stderr)
        return 2
    sys.stdout.write(_report(result))
    return 0


if __name__ == "__main__":
    sys.exit(main())
