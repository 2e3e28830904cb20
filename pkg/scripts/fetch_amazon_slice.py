"""Build the desk-scale Amazon Movies & TV slice shipped in data/amazon/.

Streams the rating-only 5-core Movies_and_TV CSV from the Amazon-Reviews-2023
release on the Hugging Face hub and keeps every user whose id falls into a
fixed md5 bucket (deterministic, no seed needed). The output is a gzipped
tab-separated file in the same column order as the MovieLens files:
user, item, rating, timestamp.

Run from the repo root:

    python scripts/fetch_amazon_slice.py [--endpoint URL] [--buckets 11]
"""

import argparse
import csv
import gzip
import hashlib
import io
import sys

import httpx

DEFAULT_ENDPOINT = "https://huggingface.co"
FILE_PATH = (
    "datasets/McAuley-Lab/Amazon-Reviews-2023/resolve/main/"
    "benchmark/5core/rating_only/Movies_and_TV.csv"
)


def user_bucket(user_id: str) -> int:
    return int(hashlib.md5(user_id.encode()).hexdigest()[:8], 16) % 100


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--endpoint", default=DEFAULT_ENDPOINT)
    parser.add_argument("--buckets", type=int, default=11,
                        help="keep users with md5 bucket < this value (percent)")
    parser.add_argument("--out", default="data/amazon/movies_tv_slice.tsv.gz")
    parser.add_argument("--cert", default=None, help="CA bundle for the endpoint")
    args = parser.parse_args()

    url = f"{args.endpoint}/{FILE_PATH}"
    kept = total = 0
    verify = args.cert if args.cert else True
    with httpx.stream("GET", url, timeout=600, verify=verify, follow_redirects=True) as resp:
        resp.raise_for_status()
        text = io.TextIOWrapper(io.BufferedReader(_RawStream(resp)), encoding="utf-8")
        reader = csv.reader(text)
        header = next(reader)
        if header[:2] != ["user_id", "parent_asin"]:
            raise SystemExit(f"unexpected header: {header}")
        with gzip.open(args.out, "wt", encoding="utf-8") as out:
            for row in reader:
                total += 1
                if user_bucket(row[0]) < args.buckets:
                    kept += 1
                    out.write("\t".join((row[0], row[1], row[2], row[3])) + "\n")
    print(f"kept {kept} of {total} interactions -> {args.out}")
    return 0


class _RawStream(io.RawIOBase):
    """File-like adapter over httpx's streaming byte iterator."""

    def __init__(self, resp):
        self._iter = resp.iter_bytes(1 << 20)
        self._buf = b""

    def readable(self) -> bool:
        return True

    def readinto(self, b) -> int:
        while not self._buf:
            try:
                self._buf = next(self._iter)
            except StopIteration:
                return 0
        n = min(len(b), len(self._buf))
        b[:n] = self._buf[:n]
        self._buf = self._buf[n:]
        return n


if __name__ == "__main__":
    sys.exit(main())
