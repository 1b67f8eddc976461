#!/usr/bin/env python3
"""
Демонстрационный скрипт: оракул -> предобучение -> R0 -> сэмплы -> оценка
на задаче с общей модой двух наград.
"""
import argparse
import json
import os
import sys
from pathlib import Path

# Добавляем корневую директорию в путь
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from app.handlers.command_handlers import command_handler
from app.main import configure_torch
from app.repositories.report_dao import ReportDAO
from app.services.config_service import load_run_config

CONFIG = Path(__file__).resolve().parent.parent / "configs" / "common_mode.conf"


class PipelineDemo:
    """Демонстрация полного цикла на маленьком бюджете"""

    def __init__(self, config_path: Path, out: str, iterations: int):
        config = load_run_config(config_path, out=out)
        # Урезанный бюджет: демо, а не эксперимент
        self.config = config.model_copy(update={
            "pretrain": config.pretrain.model_copy(update={"steps": 500, "finetune_steps": 50}),
            "train": config.train.model_copy(update={"iterations": iterations, "log_every": 50}),
        })

    def demo_oracle(self):
        print("🔎 Поиск общей моды перебором по сетке...")
        artifacts = command_handler.cmd_oracle(self.config)
        (report,) = ReportDAO().load_jsonl(artifacts["mode_report"])
        print(f"   argmax: {report['argmax']}  значение: {report['max_value']:.4f}")
        for runner in report["runners_up"]:
            print(f"   локальный максимум: {runner['point']}  значение: {runner['value']:.4f}")
        print()

    def demo_pretrain(self):
        print("🧠 Предобучение денойзеров φ, ψ и B...")
        artifacts = command_handler.cmd_pretrain(self.config)
        for role in ("phi", "psi", "smoothed"):
            print(f"   {role}: {artifacts[role]}")
        print()

    def demo_train(self) -> Path:
        print(f"🎯 Обучение {self.config.train.mode} ({self.config.train.iterations} итераций)...")
        artifacts = command_handler.cmd_train(self.config)
        print(f"   θ: {artifacts['theta']}")
        print(f"   журнал: {artifacts['runlog']}")
        print()
        return artifacts["theta"]

    def demo_sample_and_eval(self, theta: Path):
        print("🎲 Сэмплирование и оценка...")
        samples = command_handler.cmd_sample(theta, 1000, 1.0, 0, f"{self.config.out}/samples")
        artifacts = command_handler.cmd_eval(samples["samples"], self.config)
        summary = ReportDAO().load_jsonl(artifacts["report"])[0]
        print(json.dumps(summary, indent=2, ensure_ascii=False))
        print()

    def run(self):
        print("🚀 Демонстрация r0-desk")
        print("=" * 50)
        self.demo_oracle()
        self.demo_pretrain()
        theta = self.demo_train()
        self.demo_sample_and_eval(theta)
        print("✅ Демонстрация завершена")


def main():
    parser = argparse.ArgumentParser(description="r0-desk demo")
    parser.add_argument("--config", type=Path, default=CONFIG)
    parser.add_argument("--out", default="demo")
    parser.add_argument("--iterations", type=int, default=300)
    args = parser.parse_args()
    configure_torch()
    PipelineDemo(args.config, args.out, args.iterations).run()


if __name__ == "__main__":
    main()
