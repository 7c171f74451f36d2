"""Command-line entry point for the pipeline stages.

Verbs map one-to-one onto pipeline stages, plus ``run`` (all enabled
stages) and ``make-fixture`` (bundled synthetic data for demos/tests).
"""

import argparse
import sys

from .pipeline import STAGE_ORDER, PipelineConfig, PipelineError, run_pipeline, run_stage

_VERB_TO_STAGE = {
    "ingest": "ingest",
    "cluster": "cluster",
    "cluster-graph": "cluster-graph",
    "embed-clusters": "embed-clusters",
    "embed-subgraph": "embed-subgraph",
    "train-static": "train-static",
    "train-joint": "train-joint",
    "idd": "idd",
    "explain": "explain",
    "evaluate": "evaluate",
    "report": "report",
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="arkg",
        description="Knowledge-graph-aware sentiment classification pipeline",
    )
    parser.add_argument("--config", help="flat key = value config file")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument(
        "--deterministic",
        action="store_true",
        help="force the single-threaded deterministic mode (also the default)",
    )
    parser.add_argument("--force", action="store_true", help="re-run even if up to date")
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb in list(_VERB_TO_STAGE) + ["run"]:
        sub.add_parser(verb)
    fx = sub.add_parser("make-fixture", help="write a synthetic dataset + config")
    fx.add_argument("--out", required=True)
    fx.add_argument("--kind", choices=["graph-signal", "text-signal"], default="graph-signal")
    fx.add_argument("--fixture-seed", type=int, default=0)
    return parser


def _load_config(args):
    if not args.config:
        raise PipelineError("--config is required for this verb")
    config = PipelineConfig.from_file(args.config)
    if args.seed is not None:
        config = config.override(seed=args.seed)
    if args.deterministic:
        config = config.override(deterministic=True)
    return config


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.verb == "make-fixture":
            from . import synth

            if args.kind == "graph-signal":
                fixture = synth.graph_signal_fixture(seed=args.fixture_seed)
            else:
                fixture = synth.text_signal_fixture(seed=args.fixture_seed)
                fixture = dict(fixture)
                fixture.setdefault("kg", None)
            if fixture.get("kg") is None:
                raise PipelineError("only graph-signal fixtures can be written for the pipeline")
            path = synth.write_fixture(fixture, args.out)
            print("wrote fixture config: %s" % path)
            return 0
        config = _load_config(args)
        if args.verb == "run":
            results = run_pipeline(config, force=args.force)
            for stage in STAGE_ORDER:
                if stage in results:
                    print("%s: %d artifact(s)" % (stage, len(results[stage])))
        else:
            outputs = run_stage(_VERB_TO_STAGE[args.verb], config, force=args.force)
            for path in outputs:
                print(path)
            if args.verb == "report":
                with open(outputs[0]) as f:
                    print(f.read())
        return 0
    except PipelineError as err:
        print("error: %s" % err, file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
