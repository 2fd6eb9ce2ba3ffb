"""Command-line entry: export feature maps from a JSON config."""

import argparse
import json
import sys

from .export import ExportConfig, export


def main(argv=None):
    parser = argparse.ArgumentParser(prog="ugt-export", description=__doc__)
    parser.add_argument("--config", required=True, help="JSON export config")
    parser.add_argument("--output-dir", help="override the config's output directory")
    args = parser.parse_args(argv)
    try:
        cfg = ExportConfig.from_json(args.config)
        if args.output_dir:
            cfg = ExportConfig(
                backbone=cfg.backbone,
                layer=cfg.layer,
                images=cfg.images,
                output_dir=args.output_dir,
                resize=cfg.resize,
                resize_mode=cfg.resize_mode,
                checkpoint=cfg.checkpoint,
                seed=cfg.seed,
                normalize_mean=cfg.normalize_mean,
                normalize_std=cfg.normalize_std,
            )
        report = export(cfg)
    except (ValueError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    json.dump(report, sys.stdout, indent=2, sort_keys=True)
    print()
    return 0


if __name__ == "__main__":
    sys.exit(main())
