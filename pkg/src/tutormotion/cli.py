"""Command line entry point.

Exit codes: 0 success, 2 configuration error, 3 missing or bad data/model,
4 training divergence.  ``TUTORMOTION_LOG`` sets the log level.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import pipeline
from .diffusion import DiffusionTrainingError
from .fusion import GateTrainingError
from .retarget import RetargetConfigError

MODES = ("synth-data", "train-experts", "train-gate", "train-diffusion", "run", "analyze", "ablate")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tutormotion", description=__doc__.splitlines()[0])
    p.add_argument("mode", choices=MODES)
    p.add_argument("--config", help="JSON config file (defaults apply for missing keys)")
    p.add_argument("--seed", type=int, help="root seed")
    p.add_argument("--out", help="output directory")
    p.add_argument("--data", help="data directory")
    p.add_argument("--models", help="model directory")
    p.add_argument("--input", help="analyze: run directory to read (defaults to --out)")
    p.add_argument("--baseline", action="store_true",
                   help="train-diffusion: train the unconditioned baseline (gains set to 0)")
    return p


def _run(args) -> object:
    over = dict(seed=args.seed, output=args.out, data=args.data, models=args.models)
    cfg = (pipeline.PipelineConfig.load(args.config, **over) if args.config
           else pipeline.PipelineConfig.from_dict({}, **over))
    logging.getLogger(__name__).info("config: %s", json.dumps(cfg.raw, sort_keys=True))
    m = args.mode
    if m == "synth-data":
        return [str(p) for p in pipeline.synth_data(cfg)]
    if m == "train-experts":
        return str(pipeline.train_experts(cfg))
    if m == "train-gate":
        return str(pipeline.train_gate_stage(cfg))
    if m == "train-diffusion":
        return str(pipeline.train_diffusion_stage(cfg, baseline=args.baseline))
    if m == "run":
        return {"files": len(pipeline.run_pipeline(cfg))}
    if m == "analyze":
        return pipeline.analyze(cfg, args.input)
    return pipeline.ablate(cfg)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=os.environ.get("TUTORMOTION_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = _run(args)
    except (pipeline.ConfigError, RetargetConfigError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except pipeline.DataError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except (DiffusionTrainingError, GateTrainingError) as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return 4
    print(json.dumps(result, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
