"""CLI: extract router traces from a local or hub-hosted MoE model."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .extract import RouterDiscoveryError, extract_traces


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="moextract",
        description="Log per-token MoE router decisions into a trace CSV "
                    "compatible with the moesim simulator.",
    )
    parser.add_argument("--model", required=True,
                        help="model path or Hugging Face id")
    parser.add_argument("--prompts", required=True,
                        help="text file, one prompt per line")
    parser.add_argument("--out", required=True, help="output trace CSV path")
    parser.add_argument("--max-new-tokens", type=int, default=32,
                        help="decode tokens per prompt (default 32)")
    parser.add_argument("--include-embeddings", action="store_true",
                        help="log input-embedding vectors (large files)")
    parser.add_argument("--include-prefill", action="store_true",
                        help="also log prompt-phase positions")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(
        sys.argv[1:] if argv is None else list(argv))
    try:
        prompts = [
            line for line in Path(args.prompts).read_text().splitlines()
            if line.strip()
        ]
        if not prompts:
            print("error: no prompts in file", file=sys.stderr)
            return 2

        import torch
        from transformers import AutoModelForCausalLM, AutoTokenizer

        torch.manual_seed(0)
        tokenizer = AutoTokenizer.from_pretrained(args.model)
        model = AutoModelForCausalLM.from_pretrained(args.model)
        blob = extract_traces(
            model, tokenizer, prompts, args.max_new_tokens,
            include_prefill=args.include_prefill,
            include_embeddings=args.include_embeddings,
        )
        Path(args.out).write_bytes(blob)
        rows = blob.count(b"\n") - 1
        print(f"wrote {rows} rows for {len(prompts)} prompts to {args.out}")
        return 0
    except (FileNotFoundError, RouterDiscoveryError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
