"""
SQLite log of training runs, their evaluation points and verification reports.
"""

import datetime
import json
from typing import List, Optional

from sqlite_utils import Database
from ulid import ULID

from .migrations import migrate
from .network import NetworkConfig
from .trainer import HyperParams, IterationRecord
from .verification import VerificationReport


def _now() -> str:
    return str(datetime.datetime.now(datetime.timezone.utc))


class RunLog:
    def __init__(self, db: Database):
        self.db = db
        migrate(db)

    def start(
        self,
        command: str,
        config: NetworkConfig,
        hp: HyperParams,
        model_path: Optional[str] = None,
    ) -> str:
        run_id = str(ULID()).lower()
        self.db["runs"].insert(
            {
                "id": run_id,
                "started": _now(),
                "finished": None,
                "command": command,
                "config_name": config.name,
                "activation": config.activation,
                "seed": hp.seed,
                "hyperparams": json.dumps(hp.model_dump()),
                "status": "running",
                "final_loss": None,
                "final_accuracy": None,
                "model_path": model_path,
            }
        )
        return run_id

    def record_eval(self, run_id: str, record: IterationRecord) -> None:
        self.db["run_evals"].insert(
            {
                "run_id": run_id,
                "iteration": record.iteration,
                "lr": record.lr,
                "train_loss": record.train_loss,
                "val_accuracy": record.val_accuracy,
            }
        )

    def finish(
        self,
        run_id: str,
        status: str,
        final_loss: Optional[float] = None,
        final_accuracy: Optional[float] = None,
    ) -> None:
        self.db["runs"].update(
            run_id,
            {
                "finished": _now(),
                "status": status,
                "final_loss": final_loss,
                "final_accuracy": final_accuracy,
            },
        )

    def record_verification(
        self, embeddings: str, pairs: str, report: VerificationReport
    ) -> str:
        verification_id = str(ULID()).lower()
        self.db["verifications"].insert(
            {
                "id": verification_id,
                "created": _now(),
                "embeddings": embeddings,
                "pairs": pairs,
                "num_pairs": sum(report.pair_counts),
                "mean_accuracy": report.folds.mean if report.folds is not None else None,
                "eer": report.eer,
                "auc": report.auc,
            }
        )
        return verification_id

    def list_runs(self, limit: Optional[int] = None) -> List[dict]:
        "Most recent runs first"
        return list(self.db["runs"].rows_where(order_by="id desc", limit=limit))

    def evals(self, run_id: str) -> List[dict]:
        return list(
            self.db["run_evals"].rows_where("run_id = ?", [run_id], order_by="iteration")
        )
