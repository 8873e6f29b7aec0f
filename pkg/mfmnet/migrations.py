import datetime
from typing import Callable, List

MIGRATIONS: List[Callable] = []
migration = MIGRATIONS.append


def migrate(db):
    ensure_migrations_table(db)
    already_applied = {r["name"] for r in db["_mfmnet_migrations"].rows}
    for fn in MIGRATIONS:
        name = fn.__name__
        if name not in already_applied:
            fn(db)
            db["_mfmnet_migrations"].insert(
                {
                    "name": name,
                    "applied_at": str(datetime.datetime.now(datetime.timezone.utc)),
                }
            )
            already_applied.add(name)


def ensure_migrations_table(db):
    if not db["_mfmnet_migrations"].exists():
        db["_mfmnet_migrations"].create(
            {
                "name": str,
                "applied_at": str,
            },
            pk="name",
        )


@migration
def m001_runs(db):
    db["runs"].create(
        {
            "id": str,
            "started": str,
            "finished": str,
            "command": str,
            "config_name": str,
            "activation": str,
            "seed": int,
            "hyperparams": str,
            "status": str,
            "final_loss": float,
            "final_accuracy": float,
            "model_path": str,
        },
        pk="id",
    )


@migration
def m002_run_evals(db):
    db["run_evals"].create(
        {
            "run_id": str,
            "iteration": int,
            "lr": float,
            "train_loss": float,
            "val_accuracy": float,
        },
        foreign_keys=(("run_id", "runs", "id"),),
    )
    db["run_evals"].create_index(["run_id", "iteration"])


@migration
def m003_verifications(db):
    db["verifications"].create(
        {
            "id": str,
            "created": str,
            "embeddings": str,
            "pairs": str,
            "num_pairs": int,
            "mean_accuracy": float,
            "eer": float,
            "auc": float,
        },
        pk="id",
    )
