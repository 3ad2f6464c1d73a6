# synth_generator.py
import os
import sys
import argparse

from tqdm import tqdm

sys.path.insert(0, os.path.join(os.path.dirname(__file__), ".."))

from dsgd.data_io import (
    synth_classification,
    synth_density_ratio,
    synth_regression,
    write_csv,
    write_libsvm,
)

GENERATORS = {
    "regression": lambda n, seed: synth_regression(n, seed),
    "regression_noiseless": lambda n, seed: synth_regression(n, seed, noiseless=True),
    "classification": synth_classification,
    "density_ratio": synth_density_ratio,
}

def main(n_records, seeds, kinds, output_dir, output_format):
    os.makedirs(output_dir, exist_ok=True)
    jobs = [(kind, seed) for kind in kinds for seed in seeds]
    for kind, seed in tqdm(jobs, desc="Generating synthetic datasets"):
        data = GENERATORS[kind](n_records, seed)
        ext = "csv" if output_format == "csv" else "svm"
        path = os.path.join(output_dir, f"{kind}_n{n_records}_seed{seed}.{ext}")
        with open(path, "w", newline="") as f:
            if output_format == "csv":
                write_csv(data, f)
            else:
                write_libsvm(data, f)
    print(f"✅ Generated {len(jobs)} datasets of {n_records} rows in {output_dir}")

if __name__ == "__main__":
    parser = argparse.ArgumentParser()
    parser.add_argument("--n", type=int, default=2 ** 13)
    parser.add_argument("--seeds", type=int, nargs="+", default=[0])
    parser.add_argument("--kinds", nargs="+", choices=sorted(GENERATORS), default=["regression"])
    parser.add_argument("--output_dir", default="data/synthetic")
    parser.add_argument("--format", choices=["csv", "libsvm"], default="csv")
    args = parser.parse_args()
    main(args.n, args.seeds, args.kinds, args.output_dir, args.format)
