"""Measured noise of a running sum of fresh encryptions, against the decryption limit.

Writes a CSV (additions, noise, estimate, limit) to stdout.

    python3 scripts/noise_growth.py --preset n2048 --additions 2000 --every 200
"""
import argparse
import csv
import sys

import numpy as np

from hedsgd import bfv, mbfv
from hedsgd.bfv import Plaintext
from hedsgd.ring import make_rng


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--preset", default="n2048", choices=sorted(bfv.PRESETS))
    ap.add_argument("--additions", type=int, default=2000)
    ap.add_argument("--every", type=int, default=200)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    P = bfv.preset(args.preset)
    rng = make_rng(args.seed)
    sk = bfv.seckeygen(P, rng)
    pk = bfv.pubkeygen(sk, rng)
    limit = P.q // (2 * P.t)
    out = csv.writer(sys.stdout, lineterminator="\n")
    out.writerow(["additions", "noise", "estimate", "limit", "needs_bootstrap"])
    total = np.zeros(P.n, dtype=np.int64)
    acc = None
    for k in range(1, args.additions + 1):
        pt = Plaintext(rng.integers(0, P.t, size=P.n), P.t)
        total = (total + pt.coeffs) % P.t
        ct = bfv.encrypt(pk, pt, rng)
        acc = ct if acc is None else bfv.hom_add(acc, ct)
        if k % args.every == 0 or k == args.additions:
            noise = bfv.noise_of(sk, acc, Plaintext(total, P.t))
            out.writerow([k, noise, f"{acc.noise_estimate:.0f}", limit, int(mbfv.needs_bootstrap(acc))])
    return 0


if __name__ == "__main__":
    sys.exit(main())
