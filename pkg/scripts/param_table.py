"""Parameter counts for every PURe/ResNet depth and their differences."""

import argparse

from punet.architectures import CIFAR_DEPTHS, IMAGENET_DEPTHS, arch_spec, build_network, count_params


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--imagenet-classes", type=int, default=1000)
    ap.add_argument("--cifar-classes", type=int, default=10)
    args = ap.parse_args()
    print(f"{'depth':>5} {'classes':>7} {'ResNet':>12} {'PURe':>12} {'diff':>5} {'blocks':>6}")
    for depths, classes in ((IMAGENET_DEPTHS, args.imagenet_classes), (CIFAR_DEPTHS, args.cifar_classes)):
        for d in depths:
            spec = arch_spec(f"pure{d}", classes)
            p = count_params(build_network(spec))
            r = count_params(build_network(arch_spec(f"resnet{d}", classes)))
            print(f"{d:>5} {classes:>7} {r:>12,} {p:>12,} {p - r:>5} {spec.num_blocks:>6}")


if __name__ == "__main__":
    main()
