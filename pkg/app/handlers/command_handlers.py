"""
Обработчики команд CLI: pretrain, train, sample, eval, oracle.
"""
import hashlib
import json
import logging
from pathlib import Path
from typing import Dict, List, Optional

import torch

from app.config import resolve_output_dir, settings
from app.exceptions import ConfigError, InvalidArgumentError, PretrainValidationError, TrainingDivergedError
from app.models.denoiser import DTYPE, Denoiser
from app.models.schemas import (
    CheckpointMetadata, EtaPolicy, NoiseSchedule, RewardKind, RunConfig, label_terms,
)
from app.repositories.checkpoint_dao import CheckpointDAO
from app.repositories.report_dao import ReportDAO
from app.repositories.runlog_dao import RunLogDAO
from app.repositories.samples_dao import SamplesDAO
from app.services.config_service import config_hash, require, train_config
from app.services.datasets_service import GaussianMixtureDataset, build_dataset, smoothed_spec
from app.services.generator_service import generate
from app.services.oracle_service import grid_argmax, mode_coverage
from app.services.plot_service import PlotService
from app.services.rewards_service import weighted_value
from app.services.schedule_service import make_schedule
from app.services.scorenet_service import bulk_posterior_error, posterior_mean_error, pretrain_denoiser
from app.services.trainer_service import RewardTrainer

logger = logging.getLogger(__name__)

Artifacts = Dict[str, Path]

# Допуск |f - x*| для φ, предобученной на одноточечных данных
POINT_FIT_TOLERANCE = 1e-2


class CommandHandler:
    """Обработчик команд: связывает сервисы, DAO и файлы запуска"""

    def __init__(self):
        self.checkpoints = CheckpointDAO()
        self.samples = SamplesDAO()
        self.runlogs = RunLogDAO()
        self.reports = ReportDAO()
        self.plots = PlotService()

    def _command_dir(self, config: RunConfig, command: str) -> Path:
        """Каждая команда пишет в свой подкаталог <out>/<command>"""
        return resolve_output_dir(config.out) / command

    def _schedule(self, config: RunConfig) -> NoiseSchedule:
        return make_schedule(config.schedule.steps, config.schedule.kind)

    def _save_last_finite(self, out_dir: Path, exc: TrainingDivergedError, command: str, role: str,
                          seed: int, schedule: NoiseSchedule, net: Denoiser) -> None:
        if exc.last_state is None:
            return
        metadata = CheckpointMetadata(command=command, role=f"{role}_last_finite", seed=seed,
                                      schedule=list(schedule.sigmas), schedule_kind=schedule.kind,
                                      **net.architecture())
        path = self.checkpoints.save_state(out_dir / f"{role}_last_finite.ckpt", metadata, exc.last_state)
        logger.error(f"Training diverged at iteration {exc.iteration}; last finite state saved to {path}")

    def _pretrain_one(self, out_dir: Path, role: str, pretrain_cfg, schedule: NoiseSchedule, seed: int,
                      init: Optional[Denoiser] = None) -> Denoiser:
        try:
            result = pretrain_denoiser(pretrain_cfg, schedule, seed, init=init)
        except TrainingDivergedError as exc:
            shape = init or Denoiser(pretrain_cfg.dataset.data_dim, pretrain_cfg.cond_classes,
                                     pretrain_cfg.net.hidden_layers, pretrain_cfg.net.width)
            self._save_last_finite(out_dir, exc, "pretrain", role, seed, schedule, shape)
            raise
        self.checkpoints.save(out_dir / f"{role}.ckpt", result.net, "pretrain", role, seed, schedule)
        self.runlogs.save_losses(out_dir / f"{role}_loss.csv", result.losses)
        return result.net

    def cmd_pretrain(self, config: RunConfig) -> Artifacts:
        """Обучить φ (безусловная), ψ (условная) и B (дообучение φ на размытых данных)"""
        dataset_spec = require(config, "dataset")
        out_dir = self._command_dir(config, "pretrain")
        schedule = self._schedule(config)
        seeds = {"phi": config.seed, "psi": config.seed + 1, "smoothed": config.seed + 2}

        phi = self._pretrain_one(out_dir, "phi", config.pretrain_config(), schedule, seeds["phi"])
        self._pretrain_one(out_dir, "psi", config.pretrain_config(conditional=True), schedule, seeds["psi"])
        smoothed_cfg = config.pretrain_config(
            dataset=smoothed_spec(dataset_spec, config.pretrain.smoothing),
            steps=config.pretrain.finetune_steps,
        )
        self._pretrain_one(out_dir, "smoothed", smoothed_cfg, schedule, seeds["smoothed"], init=phi)

        validation = {}
        dataset = build_dataset(dataset_spec)
        if isinstance(dataset, GaussianMixtureDataset):
            validation["phi_posterior_max_error"] = posterior_mean_error(phi, dataset)
            validation["phi_bulk_max_error"] = bulk_posterior_error(phi, dataset)
            logger.info(
                f"phi accuracy: max |f - E[x0|x_t]| = {validation['phi_posterior_max_error']:.3e} on the grid, "
                f"{validation['phi_bulk_max_error']:.3e} on the data bulk"
            )

        artifacts = {}
        for role in seeds:
            artifacts[role] = out_dir / f"{role}.ckpt"
            artifacts[f"{role}_loss"] = out_dir / f"{role}_loss.csv"
        self.reports.save_manifest(out_dir, "pretrain", config_hash(config), {"seed": config.seed, **seeds},
                                   artifacts, extra={"validation": validation})

        if dataset_spec.name == "point" and validation["phi_bulk_max_error"] > POINT_FIT_TOLERANCE:
            error = validation["phi_bulk_max_error"]
            raise PretrainValidationError(
                f"point-data denoiser is off by {error:.3e} (tolerance {POINT_FIT_TOLERANCE}); "
                f"raise pretrain.steps or pretrain.lr",
                error=error, tolerance=POINT_FIT_TOLERANCE,
            )
        return artifacts

    def _checkpoint_path(self, configured: Optional[str], pretrain_dir: Path, role: str) -> Path:
        if configured is None:
            return pretrain_dir / f"{role}.ckpt"
        return resolve_output_dir(configured)

    def cmd_train(self, config: RunConfig) -> Artifacts:
        """R0 / R0+ от предобученных чекпоинтов; журнал, графики, итоговый θ"""
        cfg = train_config(config)
        out_dir = self._command_dir(config, "train")
        pretrain_dir = self._command_dir(config, "pretrain")
        paths = config.checkpoints
        phi, _ = self.checkpoints.load(self._checkpoint_path(paths.phi, pretrain_dir, "phi"))
        kinds = {term.kind for term in cfg.all_terms()}
        psi = net_b = None
        if RewardKind.CFG in kinds:
            psi, _ = self.checkpoints.load(self._checkpoint_path(paths.psi, pretrain_dir, "psi"))
        if RewardKind.DENSITY_RATIO in kinds:
            net_b, _ = self.checkpoints.load(self._checkpoint_path(paths.smoothed, pretrain_dir, "smoothed"))

        schedule = self._schedule(config)
        checkpoint_dir = out_dir / "checkpoints"

        def save_periodic(iteration: int, theta: Denoiser) -> None:
            self.checkpoints.save(checkpoint_dir / f"theta_{iteration:06d}.ckpt", theta, "train", "theta",
                                  cfg.seed, schedule)

        trainer = RewardTrainer(cfg, phi, psi, net_b=net_b, schedule=schedule, checkpoint_hook=save_periodic)
        try:
            theta, log = trainer.run()
        except TrainingDivergedError as exc:
            self._save_last_finite(out_dir, exc, "train", "theta", cfg.seed, schedule, phi)
            self.runlogs.save_runlog(out_dir / "runlog.csv", trainer.log)
            raise

        artifacts = {
            "theta": self.checkpoints.save(out_dir / "theta.ckpt", theta, "train", "theta", cfg.seed, schedule),
            "runlog": self.runlogs.save_runlog(out_dir / "runlog.csv", log),
        }
        artifacts.update(self.plots.runlog_plots(out_dir, log))
        if checkpoint_dir.is_dir():
            for path in sorted(checkpoint_dir.glob("theta_*.ckpt")):
                artifacts[f"checkpoint_{path.stem}"] = path
        self.reports.save_manifest(out_dir, "train", config_hash(config), {"seed": cfg.seed}, artifacts,
                                   extra={"mode": cfg.mode, "K": schedule.steps})
        return artifacts

    def cmd_sample(self, checkpoint: Path, count: int, eta: float, seed: int, out: str,
                   trajectory: bool = False, class_id: Optional[int] = None) -> Artifacts:
        """n сэмплов при фиксированном η с заголовком происхождения"""
        if count < 0:
            raise InvalidArgumentError(f"sample count must be non-negative, got {count}")
        if not 0.0 <= eta <= 1.0:
            raise InvalidArgumentError(f"eta must lie in [0, 1], got {eta}")
        net, metadata = self.checkpoints.load(checkpoint)
        schedule = NoiseSchedule(sigmas=tuple(metadata.schedule), kind=metadata.schedule_kind)
        out_dir = resolve_output_dir(out)

        generator = torch.Generator().manual_seed(seed)
        z = torch.randn(count, net.input_dim, generator=generator, dtype=DTYPE)
        with torch.no_grad():
            traj = generate(net, z, schedule, EtaPolicy(mode="fixed", value=eta), c=class_id,
                            generator=generator) if count > 0 else None
        samples = traj.final if traj is not None else z

        checkpoint_hash = self.checkpoints.sha256(checkpoint)
        provenance = {"checkpoint_sha256": checkpoint_hash, "seed": seed, "eta": eta, "K": schedule.steps,
                      "count": count, "class": "none" if class_id is None else class_id}
        artifacts = {"samples": self.samples.save_samples(out_dir / "samples.csv", samples, provenance)}
        if trajectory and traj is not None:
            artifacts["trajectory"] = self.samples.save_trajectory(out_dir / "trajectory.csv", traj)

        request = json.dumps({"checkpoint": checkpoint_hash, "count": count, "eta": eta, "seed": seed,
                              "class": class_id, "trajectory": trajectory}, sort_keys=True)
        self.reports.save_manifest(out_dir, "sample", hashlib.sha256(request.encode("utf-8")).hexdigest(),
                                   {"seed": seed}, artifacts)
        return artifacts

    def _explicit_terms(self, config: RunConfig):
        terms = [t for t in label_terms(config.reward) if t.kind == RewardKind.EXPLICIT]
        if not terms:
            raise ConfigError("missing required key: reward (at least one explicit reward)", key="reward")
        return terms

    def cmd_eval(self, samples_path: Path, config: RunConfig) -> Artifacts:
        """Покрытие мод, средняя награда, расстояние до носителя данных и ModeReport"""
        terms = self._explicit_terms(config)
        samples, provenance = self.samples.load_samples(samples_path)
        out_dir = self._command_dir(config, "eval")

        report = grid_argmax(terms, config.grid, top_n=config.eval.top_n) if config.grid is not None else None
        modes = config.eval.modes or ([report.argmax] if report is not None else None)
        if modes is None:
            raise ConfigError("missing required key: eval.modes (or a grid to locate the common mode)",
                              key="eval.modes")
        coverage = mode_coverage(samples, modes, config.eval.radius)
        combined = weighted_value(terms, samples).mean().item()
        support = None
        if config.dataset is not None:
            support = build_dataset(config.dataset).support_distance(samples).mean().item()

        records: List[Dict] = [{
            "record": "summary",
            "samples": samples.shape[0],
            "samples_sha256": self.samples.sha256(samples_path),
            "mean_combined_reward": combined,
            "mean_support_distance": support,
            "on_mode_fraction": coverage.on_mode,
            "mean_min_distance": coverage.mean_min_distance,
            "radius": config.eval.radius,
        }]
        for mode, hit in zip(modes, coverage.per_mode):
            records.append({"record": "mode", "mode": mode, "hit_fraction": hit})
        if report is not None:
            records.append({"record": "mode_report", **report.model_dump()})

        table = [{"mode": ",".join(f"{v:g}" for v in r["mode"]), "hit_fraction": r["hit_fraction"]}
                 for r in records if r["record"] == "mode"]
        table.append({"mode": "any", "hit_fraction": coverage.on_mode})
        artifacts = {
            "report": self.reports.save_jsonl(out_dir / "eval.jsonl", records),
            "table": self.reports.save_table(out_dir / "eval.txt", table),
        }
        logger.info(f"Eval: on_mode={coverage.on_mode:.3f} mean_combined_reward={combined:.4f}")
        self.reports.save_manifest(out_dir, "eval", config_hash(config), {"seed": config.seed}, artifacts,
                                   extra={"samples_provenance": provenance})
        return artifacts

    def cmd_oracle(self, config: RunConfig) -> Artifacts:
        """ModeReport перебором по сетке для настроенных явных наград"""
        terms = self._explicit_terms(config)
        grid = require(config, "grid")
        out_dir = self._command_dir(config, "oracle")
        report = grid_argmax(terms, grid, top_n=config.eval.top_n, budget=settings.grid_budget)
        artifacts = {"mode_report": self.reports.save_jsonl(out_dir / "mode_report.jsonl",
                                                            [{"record": "mode_report", **report.model_dump()}])}
        self.reports.save_manifest(out_dir, "oracle", config_hash(config), {"seed": config.seed}, artifacts)
        return artifacts


command_handler = CommandHandler()
