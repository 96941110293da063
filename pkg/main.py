import argparse
import logging
import os
import sys
from typing import List, Optional

import pandas as pd

from analysis import alpha_grid, analyze_bn_drift, reversed_sweep, sweep
from checkpoint import load_checkpoint, restore
from compression import compression_cost, gamma
from config import Config, ConfigError, RunConfig, apply_overrides, parse_overrides, run_dir
from data_handlers import DataHandler
from layers import build_model
from trainer import train_fixed_baseline, train_from_config

logger = logging.getLogger(__name__)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _floats(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(',') if v.strip()]
    except ValueError:
        raise UsageError(f"expected a comma-separated list of numbers, got {text!r}")


class SubspaceApp:
    def __init__(self, settings: Optional[Config] = None):
        self.settings = settings or Config.from_env()
        self.handler = DataHandler(self.settings.PREFETCH)

    def _overrides(self, args):
        overrides = parse_overrides(args.set)
        if args.seed is not None:
            overrides['train.seed'] = str(args.seed)
        return overrides

    def _run_config(self, args) -> RunConfig:
        return RunConfig.from_file(args.config, self._overrides(args))

    def _restore(self, path: str, args):
        cfg, model, subspace = restore(load_checkpoint(path))
        cfg = apply_overrides(cfg, self._overrides(args))
        _, test = self.handler.load(cfg.data, cfg.model, cfg.train.seed)
        return cfg, model, subspace, test

    def train(self, args):
        cfg = self._run_config(args)
        out = args.out or run_dir(cfg, self.settings)
        result = train_from_config(cfg, settings=self.settings, out_dir=out)
        logger.info(f"Trained {result.steps} steps ({result.passes} passes); outputs in {out}")

    def baseline(self, args):
        cfg = self._run_config(args)
        out = args.out or os.path.join(self.settings.OUTPUT_DIR, f"baseline-{cfg.baseline.kind}-seed{cfg.train.seed}")
        result = train_fixed_baseline(cfg, settings=self.settings, out_dir=out)
        logger.info(f"Trained {cfg.baseline.kind} baseline for {result.steps} steps; outputs in {out}")

    def sweep(self, args, reverse: bool = False):
        cfg, model, subspace, test = self._restore(args.checkpoint, args)
        grid = alpha_grid(cfg.compression, cfg.sampler, args.grid_points or cfg.eval.grid_points)
        run = reversed_sweep if reverse else sweep
        result = run(model, subspace, cfg.compression, grid, test, cfg.eval.batch_size, self.settings.EVAL_WORKERS)
        name = 'reversed-sweep.csv' if reverse else 'sweep.csv'
        out = args.out or os.path.join(os.path.dirname(args.checkpoint), name)
        result.to_csv(out)
        logger.info(f"Wrote {len(result.rows)} rows to {out}")

    def reversed_sweep(self, args):
        self.sweep(args, reverse=True)

    def drift(self, args):
        levels = _floats(args.levels)
        if len(levels) < 1:
            raise UsageError("drift needs at least one level")
        for path in args.checkpoint:
            cfg, model, _, test = self._restore(path, args)
            report = analyze_bn_drift(model, test, levels, cfg.compression, cfg.eval.batch_size,
                                      include_variance=args.include_variance, replay=args.replay)
            out_dir = args.out or os.path.dirname(path)
            os.makedirs(out_dir or '.', exist_ok=True)
            stem = os.path.splitext(os.path.basename(path))[0]
            out = os.path.join(out_dir, f"drift-{stem}.csv")
            report.to_csv(out)
            logger.info(f"Drift for {path}: pearson r {report.pearson_r:.4f}; wrote {out}")

    def cost(self, args):
        if args.checkpoint:
            cfg, model, subspace = restore(load_checkpoint(args.checkpoint))
            cfg = apply_overrides(cfg, self._overrides(args))
            kind = subspace.kind
        elif args.config:
            cfg = self._run_config(args)
            model = build_model(cfg.model, seed=cfg.train.seed)
            kind = cfg.subspace.kind
        else:
            raise UsageError("cost needs --checkpoint or --config")
        if args.levels:
            levels = _floats(args.levels)
        else:
            levels = [gamma(cfg.compression, a) for a in alpha_grid(cfg.compression, cfg.sampler, cfg.eval.grid_points)]
        rows = []
        for value in levels:
            report = compression_cost(model, cfg.compression, value, kind, batch_size=args.batch_size)
            row = report.to_dict()
            row.pop('per_layer')
            rows.append(dict(level=value, **row))
        frame = pd.DataFrame(rows)
        if args.out:
            frame.to_csv(args.out, index=False, lineterminator='\n', encoding='utf-8')
            logger.info(f"Wrote cost table to {args.out}")
        else:
            print(frame.to_string(index=False))


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog='lcs', description='Train and analyze compressible subspaces of neural networks.')
    sub = parser.add_subparsers(dest='command', parser_class=_Parser)
    sub.required = True

    def common(p):
        p.add_argument('--set', action='append', default=[], metavar='KEY=VALUE', help='override a config field')
        p.add_argument('--seed', type=int, default=None)
        return p

    for name in ('train', 'baseline'):
        p = common(sub.add_parser(name))
        p.add_argument('--config', required=True)
        p.add_argument('--out', default=None, help='output directory')

    for name in ('sweep', 'reversed-sweep'):
        p = common(sub.add_parser(name))
        p.add_argument('--checkpoint', required=True)
        p.add_argument('--grid-points', type=int, default=None)
        p.add_argument('--out', default=None, help='CSV path')

    p = common(sub.add_parser('drift'))
    p.add_argument('--checkpoint', action='append', required=True)
    p.add_argument('--levels', required=True, help='comma-separated compression levels')
    p.add_argument('--include-variance', action='store_true')
    p.add_argument('--replay', action='store_true', help='overwrite BN statistics per batch (MAD must be 0)')
    p.add_argument('--out', default=None, help='output directory')

    p = common(sub.add_parser('cost'))
    p.add_argument('--checkpoint', default=None)
    p.add_argument('--config', default=None)
    p.add_argument('--levels', default=None, help='comma-separated compression levels')
    p.add_argument('--batch-size', type=int, default=128)
    p.add_argument('--out', default=None, help='CSV path')
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    settings = Config.from_env()
    logging.basicConfig(level=getattr(logging, settings.LOG_LEVEL.upper(), logging.INFO),
                        format='%(asctime)s - %(levelname)s - %(message)s')
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        logger.error(str(e))
        return 1
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 0

    app = SubspaceApp(settings)
    handler = getattr(app, args.command.replace('-', '_'))
    try:
        handler(args)
    except (UsageError, ConfigError) as e:
        logger.error(f"{args.command}: {e}")
        return 1
    except Exception as e:
        logger.error(f"{args.command} failed: {e}")
        return 2
    return 0


if __name__ == '__main__':
    sys.exit(main())
