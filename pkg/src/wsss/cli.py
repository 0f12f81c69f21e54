"""Command line entry point.

    wsss <step> --config PATH [--seed N] [--out DIR]
    wsss run-all --config PATH
    wsss ablate --config PATH --grid GRID.yaml|ablation
    wsss synth --out DIR [--n-images N ...]
    wsss default-config [--desk]

Exit codes: 0 success, 2 configuration error, 3 missing prerequisite.
"""
from __future__ import annotations

import argparse
import logging
import sys
from importlib import resources
from pathlib import Path

import yaml

from . import pipeline
from .data import generate_synthetic_shapes


def _config(args):
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    cfg = pipeline.load_config(args.config, overrides)
    if args.out is not None:
        cfg.out = str(Path(args.out).resolve())
    return cfg


def bundled(name: str) -> Path:
    return Path(str(resources.files("wsss") / "configs" / name))


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="wsss", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="pipeline YAML config")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory override")

    for step in pipeline.STEPS:
        common(sub.add_parser(step, help=f"run the '{step}' step"))
    common(sub.add_parser("run-all", help="run every step in order"))
    ab = sub.add_parser("ablate", help="run an ablation grid and write a comparison table")
    common(ab)
    ab.add_argument("--grid", required=True,
                    help="YAML list of flag overrides, or 'ablation' for the bundled grid")

    syn = sub.add_parser("synth", help="generate the synthetic shapes dataset")
    syn.add_argument("--out", required=True)
    syn.add_argument("--n-images", type=int, default=250)
    syn.add_argument("--n-classes", type=int, default=4)
    syn.add_argument("--image-size", type=int, default=64)
    syn.add_argument("--seed", type=int, default=0)

    dc = sub.add_parser("default-config", help="print a config file with every default")
    dc.add_argument("--desk", action="store_true", help="print the desk-scale benchmark config")

    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        if args.command == "synth":
            m = generate_synthetic_shapes(args.n_images, args.n_classes, args.image_size,
                                          args.seed, args.out)
            print(f"wrote {len(m.records)} images to {args.out}")
            return 0
        if args.command == "default-config":
            if args.desk:
                sys.stdout.write(bundled("desk.yaml").read_text())
            else:
                d = pipeline.PipelineConfig().to_dict()
                d["data"]["synthetic"] = {}
                sys.stdout.write(yaml.safe_dump(d, sort_keys=False))
            return 0
        cfg = _config(args)
        if args.command == "run-all":
            pipeline.run_all(cfg)
            print((cfg.out_dir / "reports" / "steps.tsv").read_text(), end="")
        elif args.command == "ablate":
            grid_path = bundled("ablation_grid.yaml") if args.grid == "ablation" else args.grid
            grid = pipeline.load_grid(grid_path)
            raw = yaml.safe_load(Path(args.config).read_text(encoding="utf-8")) or {}
            if args.seed is not None:
                raw["seed"] = args.seed
            pipeline.run_ablation_grid(raw, grid, cfg.out_dir, base_dir=Path(args.config).parent)
            print((cfg.out_dir / "ablation.tsv").read_text(), end="")
        else:
            pipeline.run_step(args.command, cfg)
            if args.command == "eval":
                print((cfg.out_dir / "reports" / "steps.tsv").read_text(), end="")
    except pipeline.ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except pipeline.MissingPrerequisite as e:
        print(f"missing prerequisite: {e}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
