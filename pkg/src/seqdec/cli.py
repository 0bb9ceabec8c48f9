"""Command-line surface: data generation, training, evaluation, probing,
and canned desk-scale reproductions.

Commands are pure functions of (config, seed): rerunning with identical
inputs yields byte-identical CSV and checkpoint outputs.  Figures (PNG)
are rendered next to every report CSV.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import envs, evaluate, figures, nn, train
from .core import ConfigError, RngStream, write_dataset
from .envs import PriorSpec, prior_from_dict, sample_env
from .model import ModelConfig, OmgptModel, extract_embeddings, load_model, save_model
from .train import TrainConfig, build_pool, model_config_for, pretrain, rollout_model_batch

_ALLOWED_POLICIES = {
    "mab": {"oracle", "model", "model-sample", "ucb", "ucb-literal", "ts",
            "alg-star", "alg-star-sampling", "alg-star-averaging", "alg-star-median"},
    "linbandit": {"oracle", "model", "linucb", "lints",
                  "alg-star", "alg-star-sampling", "alg-star-averaging", "alg-star-median"},
    "pricing": {"oracle", "model", "ilse", "cils", "ts-price",
                "alg-star", "alg-star-sampling", "alg-star-averaging", "alg-star-median"},
    "newsvendor": {"oracle", "model", "erm", "fai",
                   "alg-star", "alg-star-sampling", "alg-star-averaging", "alg-star-median"},
    "queue": {"oracle", "model", "random"},
    "rm": {"oracle", "model", "ada"},
}

_REPRO_NAMES = ("prop4-linear-regret", "alg-star-match", "mab-4env")


class RunConfig:
    """Validated run configuration loaded from one JSON file."""

    def __init__(self, data: dict, seed_override: Optional[int] = None,
                 out_override: Optional[str] = None):
        if not isinstance(data, dict):
            raise ConfigError("config root must be a JSON object")
        task = data.get("task")
        if not isinstance(task, dict):
            raise ConfigError("config needs a 'task' section")
        self.prior: PriorSpec = prior_from_dict(task)
        self.horizon = int(task.get("horizon", 100))
        self.model_kwargs = dict(data.get("model", {}))
        train_section = dict(data.get("train", {}))
        self.eval_section = dict(data.get("eval", {}))
        self.probe_section = dict(data.get("probe", {}))
        self.seed = int(data.get("seed", 0))
        if os.environ.get("SEQDEC_SEED"):
            self.seed = int(os.environ["SEQDEC_SEED"])
        if seed_override is not None:
            self.seed = int(seed_override)
        out_dir = data.get("out_dir", "out")
        if os.environ.get("SEQDEC_OUT"):
            out_dir = os.environ["SEQDEC_OUT"]
        if out_override is not None:
            out_dir = out_override
        self.out_dir = Path(out_dir)

        self.data_path = train_section.pop("data_path", None)
        train_section.setdefault("horizon", self.horizon)
        train_section.setdefault("seed", self.seed)
        try:
            self.train_cfg = TrainConfig(**train_section)
        except TypeError as exc:
            raise ConfigError(f"bad train section: {exc}") from exc

        policies = self.eval_section.get("policies", ["oracle"])
        allowed = _ALLOWED_POLICIES[self.prior.family]
        for name in policies:
            if name not in allowed:
                raise ConfigError(
                    f"policy {name!r} is not defined for family {self.prior.family!r}"
                )
            if name.startswith("alg-star") and self.prior.mode != "finite_pool":
                raise ConfigError("alg-star policies need a finite_pool prior")
        self.eval_policies: List[str] = list(policies)
        self.eval_runs = int(self.eval_section.get("runs", 20))
        self.eval_horizon = int(self.eval_section.get("horizon", self.horizon))
        self.workers = 1

    def model_config(self) -> ModelConfig:
        try:
            return model_config_for(self.prior, **self.model_kwargs)
        except TypeError as exc:
            raise ConfigError(f"bad model section: {exc}") from exc


def _load_config(path: str, seed: Optional[int], out: Optional[str]) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fp:
            data = json.load(fp)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return RunConfig(data, seed_override=seed, out_override=out)


def _write_csv(path: Path, header: List[str], rows: List[List]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fp:
        writer = csv.writer(fp)
        writer.writerow(header)
        writer.writerows(rows)


# ---------------------------------------------------------------------------
# gen-data


def cmd_gen_data(cfg: RunConfig) -> Path:
    probe = sample_env(cfg.prior, RngStream(cfg.seed, 0xBEEF))
    sched = train.BehaviorNoiseSchedule()
    pool = build_pool(cfg.prior, cfg.train_cfg.pool_size, cfg.train_cfg.horizon,
                      sched, RngStream(cfg.seed, 0x7EA1).child(1))
    d_x, d_a, d_o, discrete = train._store_rows(probe)
    header = {
        "family": cfg.prior.family,
        "context_dim": d_x,
        "action_dim": d_a,
        "observation_dim": d_o,
        "horizon": cfg.train_cfg.horizon,
        "discrete_actions": discrete,
    }
    out = cfg.out_dir / "pool.jsonl"
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as fp:
        write_dataset(pool, header, fp)
    print(f"wrote {len(pool)} trajectories ({cfg.train_cfg.horizon} steps each) to {out}")
    return out


# ---------------------------------------------------------------------------
# train


def _save_train_state(model: OmgptModel, opt: nn.OptimState, iteration: int,
                      path: Path) -> None:
    arrays = dict(model.named_arrays())
    for slot, m in opt.first_moment.items():
        arrays[f"__opt_m__{slot:04d}"] = m
    for slot, v in opt.second_moment.items():
        arrays[f"__opt_v__{slot:04d}"] = v
    extra = {
        "config": asdict(model.cfg),
        "iteration": iteration,
        "step_count": opt.step_count,
        "lr": opt.lr,
        "weight_decay": opt.weight_decay,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fp:
        nn.save_checkpoint(arrays, fp, extra=extra)


def _load_train_state(path: Path) -> tuple:
    with open(path, "rb") as fp:
        arrays, extra = nn.load_checkpoint(fp)
    cfg = ModelConfig(**extra["config"])
    model = OmgptModel(cfg, RngStream(0, 0))
    for name in model.params:
        model.params[name].data = arrays[name]
    opt = nn.OptimState(lr=extra["lr"], weight_decay=extra["weight_decay"],
                        step_count=extra["step_count"])
    for name, arr in arrays.items():
        if name.startswith("__opt_m__"):
            opt.first_moment[int(name[-4:])] = arr.copy()
        elif name.startswith("__opt_v__"):
            opt.second_moment[int(name[-4:])] = arr.copy()
    return model, opt, int(extra["iteration"])


def cmd_train(cfg: RunConfig, resume: Optional[str] = None) -> Path:
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    trace_path = out / "loss.csv"
    if resume:
        model, opt, start_iteration = _load_train_state(Path(resume))
        existing = trace_path.exists()
    else:
        model = OmgptModel(cfg.model_config(), RngStream(cfg.seed, 0x1417))
        opt, start_iteration, existing = None, 0, False

    pool = None
    if cfg.data_path is not None:
        if model.cfg.observation_head:
            raise ConfigError(
                "serialized pools lack the terminal observation; "
                "observation-head training must regenerate its pool"
            )
        from .core import read_dataset

        with open(cfg.data_path, "r", encoding="utf-8") as fp:
            header, pool = read_dataset(fp)
        if header["family"] != cfg.prior.family:
            raise ConfigError(
                f"data file holds {header['family']!r} trajectories, "
                f"config expects {cfg.prior.family!r}"
            )

    checkpoints: List[int] = []

    def on_iteration(m_iter: int, row: dict) -> None:
        if cfg.train_cfg.checkpoint_every > 0 and m_iter % cfg.train_cfg.checkpoint_every == 0:
            with open(out / f"model_iter{m_iter:05d}.ckpt", "wb") as fp:
                save_model(model, fp)
            checkpoints.append(m_iter)

    trace, opt = pretrain(model, cfg.prior, cfg.train_cfg, pool=pool, opt=opt,
                          start_iteration=start_iteration, on_iteration=on_iteration)
    mode = "a" if existing else "w"
    with open(trace_path, mode, newline="", encoding="utf-8") as fp:
        writer = csv.writer(fp)
        if not existing:
            writer.writerow(["iteration", "train_loss", "holdout_loss"])
        for row in trace:
            writer.writerow([row["iteration"], f"{row['train_loss']:.10g}",
                             f"{row.get('holdout_loss', ''):.10g}" if "holdout_loss" in row else ""])
    model_path = out / "model.ckpt"
    with open(model_path, "wb") as fp:
        save_model(model, fp)
    _save_train_state(model, opt, cfg.train_cfg.iterations, out / "train_state.ckpt")
    all_rows = []
    with open(trace_path, "r", encoding="utf-8") as fp:
        for row in csv.DictReader(fp):
            entry = {"iteration": int(row["iteration"]), "train_loss": float(row["train_loss"])}
            if row.get("holdout_loss"):
                entry["holdout_loss"] = float(row["holdout_loss"])
            all_rows.append(entry)
    figures.save_training_curve(all_rows, out / "training_curve.png")
    print(f"trained {len(trace)} iterations; checkpoint at {model_path}")
    return model_path


# ---------------------------------------------------------------------------
# eval


def _rm_hindsight_bounds(cfg: RunConfig, rng: RngStream) -> List[List]:
    """Per-run LP-relaxation upper bound of the hindsight allocation."""
    from scipy.optimize import linprog

    rows = []
    horizon = cfg.eval_horizon
    for run in range(cfg.eval_runs):
        env = sample_env(cfg.prior, rng.clone().child(7000 + run))
        ctx_rng = rng.clone().child(9000 + run).child(1)
        rewards = np.zeros(horizon)
        consumption = np.zeros((horizon, env.params.consumption.shape[1]))
        for t in range(horizon):
            x = envs.sample_context(env, ctx_rng)
            rewards[t] = x.values[0]
            consumption[t] = x.values[1:]
        budget = float(env.params.horizon) * np.ones(consumption.shape[1])
        res = linprog(-rewards, A_ub=consumption.T, b_ub=budget,
                      bounds=[(0.0, 1.0)] * horizon, method="highs")
        rows.append([run, f"{-res.fun:.10g}"])
    return rows


def cmd_eval(cfg: RunConfig, checkpoint: Optional[str]) -> Path:
    model = None
    if any(name.startswith("model") for name in cfg.eval_policies):
        if checkpoint is None:
            raise ConfigError("the 'model' policy needs --checkpoint")
    if checkpoint is not None:
        with open(checkpoint, "rb") as fp:
            model = load_model(fp)
        derived = cfg.model_config()
        if (model.cfg.feature_dim, model.cfg.action_dim) != (derived.feature_dim, derived.action_dim):
            raise ConfigError("checkpoint dimensions do not match the configured task")
    factories = [evaluate.make_policy_factory(name, cfg.prior, cfg.eval_horizon, model)
                 for name in cfg.eval_policies]
    rng = RngStream(cfg.seed, 0xE7A1)
    report, per_policy = evaluate.compare(factories, cfg.prior, cfg.eval_runs,
                                          cfg.eval_horizon, rng, workers=cfg.workers)
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "runs.csv", "w", newline="", encoding="utf-8") as fp:
        evaluate.write_run_curves(fp, per_policy)
    with open(out / "aggregate.csv", "w", newline="", encoding="utf-8") as fp:
        evaluate.write_aggregate(fp, report)
    figures.save_regret_figure(report, out / "regret.png")
    figures.save_suboptimality_figure(report, out / "suboptimality.png")
    if cfg.prior.family == "rm":
        _write_csv(out / "rm_hindsight.csv", ["run", "lp_upper_bound"],
                   _rm_hindsight_bounds(cfg, rng))
    print(f"evaluated {cfg.eval_policies} over {cfg.eval_runs} runs -> {out}")
    return out / "aggregate.csv"


# ---------------------------------------------------------------------------
# probe


def cmd_probe(cfg: RunConfig, checkpoint: Optional[str]) -> Path:
    if checkpoint is None:
        raise ConfigError("probe needs --checkpoint")
    with open(checkpoint, "rb") as fp:
        model = load_model(fp)
    n_train = int(cfg.probe_section.get("train_samples", 256))
    n_test = int(cfg.probe_section.get("test_samples", 64))
    ridge = float(cfg.probe_section.get("ridge", 1.0))
    t_eval = int(cfg.probe_section.get("t", min(cfg.horizon, model.cfg.window)))
    rng = RngStream(cfg.seed, 0x9B0E)
    sampled_envs = [sample_env(cfg.prior, rng.child(i)) for i in range(n_train + n_test)]
    samples = rollout_model_batch(sampled_envs, model, t_eval, rng.child(99_991))

    def targets_for(env) -> Dict[str, np.ndarray]:
        out: Dict[str, np.ndarray] = {}
        params = env.params
        if cfg.prior.family == "pricing":
            out["params"] = np.concatenate([params.alpha, params.beta])
            if len(cfg.prior.demand_kinds) > 1:
                out["type"] = np.array([1.0 if params.demand_kind == "square" else 0.0])
        elif cfg.prior.family == "newsvendor":
            out["params"] = params.w
            if len(cfg.prior.demand_kinds) > 1:
                out["type"] = np.array([1.0 if params.demand_kind == "square" else 0.0])
        elif cfg.prior.family == "mab":
            out["params"] = params.means
        elif cfg.prior.family == "linbandit":
            out["params"] = params.w
        return out

    layer_count = model.cfg.n_layers + 1
    histories = [s.records[t_eval - 1][0] for s in samples]
    embeddings = np.zeros((layer_count, len(samples), model.cfg.embed_dim))
    for i, h in enumerate(histories):
        for layer in range(layer_count):
            embeddings[layer, i] = extract_embeddings(model, h, layer)
    target_arrays: Dict[str, np.ndarray] = {}
    for key in targets_for(sampled_envs[0]):
        target_arrays[key] = np.stack([targets_for(e)[key] for e in sampled_envs])
    target_arrays["optimal_action"] = np.stack([s.targets[t_eval - 1] for s in samples])

    rows: List[dict] = []
    for target, values in target_arrays.items():
        errors = []
        for layer in range(layer_count):
            _, err = evaluate.linear_probe(
                embeddings[layer, :n_train], values[:n_train], ridge,
                embeddings[layer, n_train:], values[n_train:],
            )
            errors.append(err)
        errors = np.array(errors)
        spread = errors.max() - errors.min()
        normalized = (errors - errors.min()) / spread if spread > 0 else np.zeros_like(errors)
        for layer in range(layer_count):
            rows.append({"layer": layer, "target": target,
                         "error": errors[layer], "error_normalized": normalized[layer]})
    out = cfg.out_dir
    _write_csv(out / "probe.csv", ["layer", "target", "error", "error_normalized"],
               [[r["layer"], r["target"], f"{r['error']:.10g}", f"{r['error_normalized']:.10g}"]
                for r in rows])
    figures.save_probe_figure(rows, out / "probe.png")
    print(f"probed {layer_count} layers x {len(target_arrays)} targets -> {out / 'probe.csv'}")
    return out / "probe.csv"


# ---------------------------------------------------------------------------
# repro bundles


def _repro_prop4(out: Path, seed: int) -> None:
    from .evaluate import AlgStarPolicy, run_episode

    horizon = 100
    t = np.arange(1, horizon + 1)
    lin_pool = (envs.LinBanditParams(w=np.array([1.0, 0.0]), noise_sd=1.0),
                envs.LinBanditParams(w=np.array([0.0, 1.0]), noise_sd=1.0))
    lin_prior = PriorSpec(family="linbandit", mode="finite_pool", pool=lin_pool,
                          horizon=horizon)
    lin_env = envs.Environment("linbandit", lin_pool[0], horizon)
    lin_pol = AlgStarPolicy(lin_prior, "averaging", "squared")
    lin_ep = run_episode(lin_pol, lin_env, horizon, RngStream(seed, 0x41))

    price_pool = (
        envs.PricingParams(alpha=np.array([2.0]), beta=np.array([1.0]), noise_sd=1.0,
                           context_low=1.0, context_high=1.0),
        envs.PricingParams(alpha=np.array([0.8]), beta=np.array([0.2]), noise_sd=1.0,
                           context_low=1.0, context_high=1.0),
    )
    price_prior = PriorSpec(family="pricing", mode="finite_pool", pool=price_pool,
                            horizon=horizon, context_low=1.0, context_high=1.0)
    price_eps = []
    for gi in range(2):
        env = envs.Environment("pricing", price_pool[gi], horizon)
        pol = AlgStarPolicy(price_prior, "averaging", "squared")
        price_eps.append(run_episode(pol, env, horizon, RngStream(seed, 0x42 + gi)))

    rows = [[int(tt),
             f"{lin_ep.regret_curve[tt - 1]:.10g}",
             f"{price_eps[0].regret_curve[tt - 1]:.10g}",
             f"{price_eps[1].regret_curve[tt - 1]:.10g}"] for tt in t]
    _write_csv(out / "prop4.csv",
               ["t", "linbandit_regret", "pricing_regret_env1", "pricing_regret_env2"],
               rows)
    figures.save_lines(
        t,
        {
            "linear bandit (slope 1/2)": lin_ep.regret_curve,
            "pricing under env 1 (slope 1/4)": price_eps[0].regret_curve,
            "pricing under env 2 (slope 1/20)": price_eps[1].regret_curve,
        },
        out / "prop4.png", "t", "cumulative regret",
        title="Posterior averaging as a live policy: linear regret instances",
    )


def _desk_pricing_prior(seed: int) -> PriorSpec:
    return prior_from_dict({
        "family": "pricing", "mode": "finite_pool", "pool_size": 4,
        "pool_seed": seed, "context_dim": 2, "horizon": 20,
    })


def _repro_alg_star_match(out: Path, seed: int) -> None:
    prior = _desk_pricing_prior(seed)
    mcfg = model_config_for(prior, n_layers=2, n_heads=2, embed_dim=32, window=20)
    model = OmgptModel(mcfg, RngStream(seed, 0x1417))
    tcfg = TrainConfig(iterations=120, early_iterations=90, sequences_per_iter=32,
                       batch_size=32, horizon=20, pool_size=512, seed=seed)
    trace, _ = pretrain(model, prior, tcfg)
    figures.save_training_curve(trace, out / "alg_star_match_training.png")

    diffs: List[float] = []
    path_rows: List[List] = []
    rng = RngStream(seed, 0xA15)
    for episode in range(64):
        env = sample_env(prior, rng.child(2 * episode))
        gaps, pairs = evaluate.paired_action_gap(
            model, prior, env, 20, rng.child(2 * episode + 1))
        diffs.extend(gaps)
        if episode == 0:
            path_rows = [[t + 1, f"{m:.10g}", f"{a:.10g}"]
                         for t, (m, a) in enumerate(pairs)]
    _write_csv(out / "alg_star_match_path.csv",
               ["t", "model_action", "alg_star_action"], path_rows)
    _write_csv(out / "alg_star_match_diffs.csv", ["diff"],
               [[f"{d:.10g}"] for d in diffs])
    figures.save_histogram(np.array(diffs), out / "alg_star_match_hist.png",
                           xlabel="model action - posterior-averaging action",
                           title="Deviation from the posterior decision rule")


def _repro_mab_4env(out: Path, seed: int) -> None:
    prior = prior_from_dict({
        "family": "mab", "mode": "finite_pool", "pool_size": 4,
        "pool_seed": seed, "arm_count": 10, "horizon": 20,
    })
    mcfg = model_config_for(prior, n_layers=2, n_heads=2, embed_dim=32, window=20)
    model = OmgptModel(mcfg, RngStream(seed, 0x1417))
    tcfg = TrainConfig(iterations=150, early_iterations=110, sequences_per_iter=32,
                       batch_size=32, horizon=20, pool_size=1024, seed=seed)
    trace, _ = pretrain(model, prior, tcfg)
    figures.save_training_curve(trace, out / "mab_4env_training.png")
    names = ["model", "ucb", "ts", "alg-star", "oracle"]
    factories = [evaluate.make_policy_factory(n, prior, 20, model) for n in names]
    report, per_policy = evaluate.compare(factories, prior, 64, 20,
                                          RngStream(seed, 0xE7A2))
    with open(out / "mab_4env_runs.csv", "w", newline="", encoding="utf-8") as fp:
        evaluate.write_run_curves(fp, per_policy)
    with open(out / "mab_4env_aggregate.csv", "w", newline="", encoding="utf-8") as fp:
        evaluate.write_aggregate(fp, report)
    figures.save_regret_figure(report, out / "mab_4env_regret.png",
                               title="Four-environment bandit comparison")


def cmd_repro(name: str, out_dir: Path, seed: int) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    if name == "prop4-linear-regret":
        _repro_prop4(out_dir, seed)
    elif name == "alg-star-match":
        _repro_alg_star_match(out_dir, seed)
    elif name == "mab-4env":
        _repro_mab_4env(out_dir, seed)
    else:
        raise ConfigError(
            f"unknown repro bundle {name!r}; valid names: {', '.join(_REPRO_NAMES)}"
        )
    print(f"repro bundle {name!r} written to {out_dir}")


# ---------------------------------------------------------------------------
# entry point


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="seqdec",
        description="Sequence-model framework for operations-management decision tasks",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        if config_required:
            p.add_argument("--config", required=True, help="run configuration JSON")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--workers", type=int, default=1, help="parallel evaluation workers")
        p.add_argument("--out", default=None, help="override the output directory")
        p.add_argument("--checkpoint", default=None, help="model checkpoint path")

    common(sub.add_parser("gen-data", help="materialize the behavior-policy pool"))
    common(sub.add_parser("train", help="run supervised pre-training"))
    common(sub.add_parser("eval", help="compare policies on fresh environments"))
    common(sub.add_parser("probe", help="linear probes over layer embeddings"))
    repro = sub.add_parser("repro", help="canned desk-scale reproductions")
    repro.add_argument("name", help=f"one of: {', '.join(_REPRO_NAMES)}")
    common(repro, config_required=False)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "repro":
            seed = args.seed if args.seed is not None else \
                int(os.environ.get("SEQDEC_SEED", "0"))
            out = Path(args.out or os.environ.get("SEQDEC_OUT", "out"))
            cmd_repro(args.name, out, seed)
            return 0
        cfg = _load_config(args.config, args.seed, args.out)
        cfg.workers = max(1, int(args.workers))
        if args.command == "gen-data":
            cmd_gen_data(cfg)
        elif args.command == "train":
            cmd_train(cfg, resume=args.checkpoint)
        elif args.command == "eval":
            cmd_eval(cfg, args.checkpoint)
        elif args.command == "probe":
            cmd_probe(cfg, args.checkpoint)
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
