import json
import logging
import sys
from typing import Optional, Sequence

from src.args import get_args, load_config
from src.errors import PipelineError
from src.pipeline import OncoPipeline
from src.utils import setup_logger

logger = logging.getLogger("src")


def run(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = get_args(argv)
    except PipelineError as e:
        print(e, file=sys.stderr)
        return e.exit_code

    setup_logger(logger, debug=args.debug)
    try:
        config = load_config(args)
        pipeline = OncoPipeline(config, name=args.name, output=args.output, mock_llm=args.mock_llm)
        if args.dry_run:
            print(json.dumps(pipeline.plan(args.stage), indent=4))
            return 0
        pipeline.run(args.stage)
    except PipelineError as e:
        logger.error(f"{args.stage} failed: {e}")
        return e.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(run())
