"""Train (or fetch from cache) the degradation classifier and print its per-class accuracy.

    python3 scripts/train_classifier.py [--refresh]
"""
import argparse

from pipir.controller import confusion, held_out_set
from pipir.experiments import desk_classifier


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--refresh", action="store_true")
    args = ap.parse_args()
    clf, acc = desk_classifier(refresh=args.refresh)
    for name, value in acc.items():
        print(f"{name:<9} {value:.3f}")
    images, labels = held_out_set(100, 777, 64)
    print("confusion (rows true, cols predicted):")
    print(confusion(clf, images, labels))


if __name__ == "__main__":
    main()
