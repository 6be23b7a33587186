"""Write the procedural 10-class image set in CIFAR binary layout."""

import argparse

from afcc.synthetic import write_dataset

if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("out_dir")
    p.add_argument("--n-train", type=int, default=10000)
    p.add_argument("--n-test", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    a = p.parse_args()
    print(write_dataset(a.out_dir, a.n_train, a.n_test, a.seed))
