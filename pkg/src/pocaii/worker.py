"""Line-protocol worker serving the synthetic benchmark over stdin/stdout.

Usage: ``python -m pocaii.worker [--noise 0.005] [--seed 0]``. Mostly a
reference for writing real trainer workers.
"""

from __future__ import annotations

import argparse
import sys

from pocaii.objective import (
    BenchmarkSpec,
    ObjectiveError,
    SyntheticRunner,
    decode_request,
    encode_response,
)


def serve(runner, stdin=sys.stdin, stdout=sys.stdout) -> None:
    for line in stdin:
        if not line.strip():
            continue
        try:
            request = decode_request(line)
        except (ValueError, KeyError) as exc:
            stdout.write(encode_response(-1, error=f"bad request: {exc!r}") + "\n")
            stdout.flush()
            continue
        try:
            batch = runner.evaluate(request)
            stdout.write(encode_response(request.config_id, batch) + "\n")
        except ObjectiveError as exc:
            stdout.write(encode_response(request.config_id, error=str(exc)) + "\n")
        stdout.flush()


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--noise", type=float, default=0.005)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    serve(SyntheticRunner(BenchmarkSpec(noise=args.noise, seed=args.seed)))
    return 0


if __name__ == "__main__":
    sys.exit(main())
