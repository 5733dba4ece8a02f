"""Minimal file-protocol prover for demos and tests.

    python -m push0.stub_prover [--sleep S] [--fail CODE] [--no-output] [--garbage] \
        --input-path IN --output-path OUT

Reads the input document, marks it ``proved`` and writes it back.
"""

import argparse
import json
import sys
import time


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="push0-stub-prover")
    p.add_argument("--input-path", required=True)
    p.add_argument("--output-path", required=True)
    p.add_argument("--sleep", type=float, default=0.0)
    p.add_argument("--fail", type=int, default=0, help="exit with this status instead of proving")
    p.add_argument("--no-output", action="store_true")
    p.add_argument("--garbage", action="store_true", help="write an unparseable output file")
    args = p.parse_args(argv)

    with open(args.input_path, encoding="utf-8") as fh:
        payload = json.load(fh)
    if args.sleep:
        time.sleep(args.sleep)
    if args.fail:
        print(f"stub prover failing on {payload.get('task_id')}", file=sys.stderr)
        return args.fail
    if args.no_output:
        return 0
    with open(args.output_path, "w", encoding="utf-8") as fh:
        if args.garbage:
            fh.write("{not json")
        else:
            payload["proved"] = True
            json.dump(payload, fh, sort_keys=True, separators=(",", ":"))
    return 0


if __name__ == "__main__":
    sys.exit(main())
