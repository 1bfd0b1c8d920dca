"""Experiment orchestration: train (optionally), evaluate every configured
policy per rebalancing frequency on paired paths, and write the artifacts
(table.csv, report.json, checkpoints, learning curves) deterministically.
"""

from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path

from .agents import DdpgAgent, ddpg_train
from .config import RunConfig
from .errors import ValidationError
from .evaluate import EvalReport, evaluate_policy, improvement_pct, simulate_eval_paths


def config_hash(doc: dict) -> str:
    canonical = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


def checkpoint_dir(out_dir: Path, frequency: str) -> Path:
    return Path(out_dir) / "checkpoints" / frequency


def write_learning_curve(curve: list[dict], path: Path) -> None:
    with open(path, "w") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["episode", "mean_cost", "sd_cost", "y0", "mean_f"])
        for rec in curve:
            writer.writerow(
                [rec["episode"]] + [f"{rec[k]:.6f}" for k in ("mean_cost", "sd_cost", "y0", "mean_f")]
            )


def train_agent(config: RunConfig, frequency: str, out_dir: Path) -> DdpgAgent:
    env_config = config.env_for(frequency)
    agent, curve = ddpg_train(
        env_config,
        config.objective(),
        episodes=config.training.episodes,
        seed=config.training.seed,
        hyper=config.training.hyper,
    )
    directory = checkpoint_dir(out_dir, frequency)
    agent.save(
        directory,
        extra_meta={
            "training_seed": config.training.seed,
            "episodes": config.training.episodes,
            "frequency": frequency,
            "hyper": config.training.hyper.to_dict(),
            "importance_weighting": True,
        },
    )
    write_learning_curve(curve, directory / "learning_curve.csv")
    return agent


def load_agent(out_dir: Path, frequency: str) -> DdpgAgent:
    directory = checkpoint_dir(out_dir, frequency)
    if not (directory / "agent.json").exists():
        raise ValidationError(
            f"no trained checkpoint for frequency '{frequency}' under {directory}; "
            "run training first or enable it in the config"
        )
    return DdpgAgent.load(directory)


def _policies_for(config: RunConfig, frequency: str, out_dir: Path, train: bool):
    policies = []
    for label in config.policies:
        if label == "rl_ddpg":
            agent = (
                train_agent(config, frequency, out_dir)
                if train
                else load_agent(out_dir, frequency)
            )
            policies.append(agent.policy())
        else:
            policies.append(config.baseline_policy(label))
    return policies


def run_experiment(config: RunConfig, doc: dict, out_dir: str | Path, threads: int = 1) -> dict:
    """Produce all artifacts for one experiment; returns the report dict.

    Within a frequency every policy is evaluated on the same path batch
    (paired design, verified by the per-policy path checksum in the report).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train = config.training.enabled and "rl_ddpg" in config.policies

    baselines = [p for p in config.policies if p.startswith("delta_")]
    rows = []
    for frequency in config.frequencies:
        env_config = config.env_for(frequency)
        policies = _policies_for(config, frequency, out_dir, train)
        paths = simulate_eval_paths(env_config, config.eval_n_paths, config.eval_seed,
                                    threads=threads)
        reports = [
            evaluate_policy(p, env_config, config.eval_n_paths, config.eval_seed,
                            c=config.objective_c, paths=paths)
            for p in policies
        ]
        by_label = {r.policy: r for r in reports}
        for report in reports:
            improvements = {
                base: improvement_pct(by_label[base].y0_pct, report.y0_pct)
                for base in baselines
                if base in by_label
            }
            rows.append((frequency, report, improvements))

    report_doc = {
        "name": config.name,
        "config": doc,
        "config_hash": config_hash(doc),
        "n_steps_per_frequency": {f: config.grid_for(f).n_steps for f in config.frequencies},
        "rows": [
            {"frequency": freq, **rep.to_dict(), "improvements": imps}
            for freq, rep, imps in rows
        ],
    }
    write_table_csv(rows, baselines, out_dir / "table.csv")
    with open(out_dir / "report.json", "w") as fh:
        json.dump(report_doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return report_doc


def write_table_csv(rows, baselines: list[str], path: Path) -> None:
    """One row per (frequency, policy): cost statistics as percent of the
    option price plus Y(0) improvement against each baseline policy."""
    with open(path, "w") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        header = ["frequency", "policy", "mean_cost_pct", "sd_cost_pct", "y0_pct"]
        header += [f"improvement_vs_{b}_pct" for b in baselines]
        header += ["se_mean", "se_sd", "n_paths", "seed"]
        writer.writerow(header)
        for frequency, report, improvements in rows:
            row = [
                frequency,
                report.policy,
                f"{report.mean_cost_pct:.6f}",
                f"{report.sd_cost_pct:.6f}",
                f"{report.y0_pct:.6f}",
            ]
            row += [
                f"{improvements[b]:.6f}" if b in improvements else "" for b in baselines
            ]
            row += [
                f"{report.se_mean:.6f}",
                f"{report.se_sd:.6f}",
                str(report.n_paths),
                str(report.seed),
            ]
            writer.writerow(row)
