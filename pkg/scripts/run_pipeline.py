"""Run every pipeline step for one or more configurations, in order.

    python3 scripts/run_pipeline.py scripts/configs/observed_m1.toml scripts/configs/observed_lf010.toml

``--simulate CONFIG`` first generates the panel described by CONFIG.  Extra
options after ``--`` go to every command (for example ``-- --particles 500``).
"""

import argparse
import json
import sys
from pathlib import Path

from unspanned import cli
from unspanned.pricing import ModelSpec

STEPS = ("tune", "estimate", "forecast", "backtest", "analyze", "report")


def run(config: Path, extra: list[str], steps=STEPS) -> None:
    if "analyze" in steps and ModelSpec.from_name(cli.load_config(config).model.name).n_latent == 0:
        steps = tuple(s for s in steps if s != "analyze")  # nothing hidden to decompose
    for step in steps:
        print(f"[{config.name}] {step}", flush=True)
        code = cli.main([step, "--config", str(config), *extra])
        if code:
            sys.exit(code)


def main(argv=None) -> None:
    argv = sys.argv[1:] if argv is None else argv
    extra = argv[argv.index("--") + 1:] if "--" in argv else []
    own = argv[: argv.index("--")] if "--" in argv else argv
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("configs", nargs="+", type=Path)
    ap.add_argument("--simulate", type=Path, metavar="CONFIG", help="simulate the panel described by CONFIG first")
    args = ap.parse_args(own)
    if args.simulate:
        run(args.simulate, extra, ("simulate",))
    for cfg in args.configs:
        run(cfg, extra)
    report = cli.load_config(args.configs[-1]).out / "report.json"
    print(json.dumps(json.loads(report.read_text()), indent=2))


if __name__ == "__main__":
    main()
