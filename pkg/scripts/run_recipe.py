import argparse
import os
import sys
from pathlib import Path

# Add the parent directory to sys.path to import sdd modules
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from sdd.main import main as sdd_main
from sdd.models import MODEL_IDS


def step(*argv: str) -> None:
    print(f"$ sdd {' '.join(argv)}")
    code = sdd_main(list(argv))
    if code != 0:
        raise SystemExit(code)


def run(workdir: str, spec: str, models, epochs: int, loss: str, skip_generate: bool = False):
    root = Path(workdir)
    data = root / "data"
    root.mkdir(parents=True, exist_ok=True)

    if not skip_generate:
        step("generate", "--out", str(data), *(["--spec", spec] if spec else []))

    reports = []
    for model_id in models:
        ckpt = root / f"{model_id}.ckpt"
        report = root / f"{model_id}_report.json"
        step("train", "--model", model_id, "--data", str(data), "--out", str(ckpt),
             "--epochs", str(epochs), "--loss", loss)
        step("eval", "--ckpt", str(ckpt), "--data", str(data), "--report", str(report),
             "--roc-csv", str(root / f"{model_id}_roc.csv"))
        reports.append(str(report))

    step("report", "--inputs", *reports, "--out", str(root / "summary.md"))
    print(f"Recipe finished; summary at {root / 'summary.md'}")


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description="generate -> train -> eval -> report")
    ap.add_argument("--workdir", default="./runs/recipe")
    ap.add_argument("--spec", default=None, help="DatasetSpec JSON; generator defaults when omitted")
    ap.add_argument("--models", nargs="+", default=MODEL_IDS, choices=MODEL_IDS)
    ap.add_argument("--epochs", type=int, default=60)
    ap.add_argument("--loss", default="logcosh")
    ap.add_argument("--skip-generate", action="store_true", help="reuse <workdir>/data")
    args = ap.parse_args()
    run(args.workdir, args.spec, args.models, args.epochs, args.loss, skip_generate=args.skip_generate)
