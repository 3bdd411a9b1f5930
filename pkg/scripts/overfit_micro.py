"""Train the full Proposed network on the synthetic micro corpus until it memorizes it.

    python scripts/overfit_micro.py --work /tmp/micro --target 0.95
"""
import argparse
import logging
import time
from pathlib import Path

from bcastnet.audio import DspConfig
from bcastnet.data import build_features, make_micro_dataset, scan_dataset
from bcastnet.training import TrainConfig, fit, write_history_csv


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--work", default="micro_run")
    p.add_argument("--variant", default="Proposed")
    p.add_argument("--target", type=float, default=0.95)
    p.add_argument("--max-epochs", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    work = Path(args.work)
    root = work / "audio"
    if not root.exists():
        make_micro_dataset(root)
    manifest = scan_dataset(root, "micro")
    cache, summary = build_features(manifest, DspConfig(), work / "cache")
    print(f"features: {summary}")

    start = time.perf_counter()
    result = fit(args.variant, cache, manifest, None,
                 TrainConfig(max_epochs=args.max_epochs, seed=args.seed, target_train_acc=args.target))
    write_history_csv(result.history, work / "history.csv")
    last = result.history[-1]
    print(f"{len(result.history)} epochs in {time.perf_counter() - start:.1f}s, "
          f"final train accuracy {last['train_acc']:.3f}")


if __name__ == "__main__":
    main()
