"""Parameter totals, conv census and module width for every variant, as one table."""
import argparse

from bcastnet.arch import VARIANT_ORDER, VariantId, build_arch, conv_census, param_count, shape_trace


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--num-classes", type=int, default=10)
    p.add_argument("--csv", help="also write the table here")
    args = p.parse_args()

    base = param_count(build_arch(VariantId.BaselineBBNN, args.num_classes)).total
    rows = [("variant", "params", "vs_baseline", "convs", "3x3", "1x1", "module_channels")]
    for v in VARIANT_ORDER:
        arch = build_arch(v, args.num_classes)
        total = param_count(arch).total
        census = conv_census(arch)
        width = dict(shape_trace(arch))["module.output"][1]
        rows.append((v.value, str(total), f"{total - base:+d}", str(census["total"]),
                     str(census["3x3"]), str(census["1x1"]), str(width)))
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    for r in rows:
        print("  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(r, widths))))
    if args.csv:
        with open(args.csv, "w") as fh:
            fh.writelines(",".join(r) + "\n" for r in rows)


if __name__ == "__main__":
    main()
