"""Fetch MovieLens-100K into DIR as u.data / u.item.

Tries the GroupLens archive first.  When that host is unreachable it falls
back to the copy bundled (as parquet) inside the ``pytorch-widedeep`` wheel,
fetched with ``pip download`` and rewritten in the original file layout.
The fallback needs pandas and pyarrow.

    python scripts/fetch_ml100k.py data/ml-100k
"""

import io
import subprocess
import sys
import tempfile
import urllib.request
import zipfile
from pathlib import Path

URL = "https://files.grouplens.org/datasets/movielens/ml-100k.zip"
WHEEL_DATA = "pytorch_widedeep/datasets/data/MovieLens100k_{}.parquet.brotli"


def from_grouplens(out: Path) -> bool:
    try:
        blob = urllib.request.urlopen(URL, timeout=30).read()
    except OSError as exc:
        print(f"grouplens download failed: {exc}", file=sys.stderr)
        return False
    with zipfile.ZipFile(io.BytesIO(blob)) as z:
        for name in ("u.data", "u.item"):
            (out / name).write_bytes(z.read(f"ml-100k/{name}"))
    return True


def from_wheel(out: Path) -> bool:
    import pandas as pd

    with tempfile.TemporaryDirectory() as tmp:
        cmd = [sys.executable, "-m", "pip", "download", "pytorch-widedeep==1.7.0", "--no-deps", "-q", "-d", tmp]
        if subprocess.run(cmd).returncode != 0:
            return False
        wheel = next(Path(tmp).glob("*.whl"))
        with zipfile.ZipFile(wheel) as z:
            ratings = pd.read_parquet(io.BytesIO(z.read(WHEEL_DATA.format("data"))))
            items = pd.read_parquet(io.BytesIO(z.read(WHEEL_DATA.format("items"))))
    ratings[["user_id", "movie_id", "rating", "timestamp"]].to_csv(out / "u.data", sep="\t", header=False, index=False)
    with open(out / "u.item", "w", encoding="latin-1") as fh:
        for row in items.itertuples(index=False):
            fields = ["" if pd.isna(v) else str(v) for v in row]
            fh.write("|".join(fields) + "\n")
    return True


def main() -> int:
    out = Path(sys.argv[1] if len(sys.argv) > 1 else "data/ml-100k")
    out.mkdir(parents=True, exist_ok=True)
    if (out / "u.data").is_file() and (out / "u.item").is_file():
        print(f"{out} already populated")
        return 0
    if from_grouplens(out) or from_wheel(out):
        print(f"wrote {out / 'u.data'} and {out / 'u.item'}")
        return 0
    print("could not obtain MovieLens-100K", file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
