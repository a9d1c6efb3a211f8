from pathlib import Path
from typing import List, Optional

from krts.config import RunConfig


class Storage:
    def __init__(self, config: RunConfig):
        self.config = config
        self.config.output_dir.mkdir(parents=True, exist_ok=True)
        self.get_checkpoints_dir().mkdir(parents=True, exist_ok=True)

    def get_checkpoints_dir(self) -> Path:
        return self.config.output_dir / "checkpoints"

    def get_checkpoint_path(self, update: int) -> Path:
        return self.get_checkpoints_dir() / f"update_{update:06d}.ckpt"

    def list_checkpoints(self) -> List[Path]:
        return sorted(self.get_checkpoints_dir().glob("update_*.ckpt"))

    def latest_checkpoint(self) -> Optional[Path]:
        checkpoints = self.list_checkpoints()
        return checkpoints[-1] if checkpoints else None

    def get_replays_dir(self) -> Path:
        path = self.config.output_dir / "replays"
        path.mkdir(parents=True, exist_ok=True)
        return path

    def get_metrics_path(self) -> Path:
        return self.config.output_dir / "metrics.jsonl"

    def get_diagnostics_path(self) -> Path:
        return self.config.output_dir / "diagnostics.json"

    def get_eval_report_path(self) -> Path:
        return self.config.output_dir / "eval_report.json"
