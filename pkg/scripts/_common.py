import argparse
from pathlib import Path

from colorvar.experiment import compare_methods, desk_config


def parser(desc: str, default_out: str) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(description=desc)
    p.add_argument("--out", default=default_out)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    return p


def run(args, variants) -> None:
    """``variants`` is a list of (run-dir name, method, extra desk_config kwargs)."""
    out = Path(args.out)
    configs = [desk_config(m, out=str(out / name), seed=args.seed, epochs=args.epochs, **kw)
               for name, m, kw in variants]
    table, _ = compare_methods(configs, out, progress=True)
    print(table)
