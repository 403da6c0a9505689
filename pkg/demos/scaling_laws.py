"""Single-frequency bound versus record length, set count and amplitude.

    python demos/scaling_laws.py
"""

import numpy as np

from qres.fisher import scaling_exponents, single_tone_crb


def main():
    T = [256, 512, 1024, 2048]
    N = [8, 16, 32, 64]
    om = [0.01, 0.02, 0.04, 0.08]
    for t in T:
        print(f"T={t:5d}  CRB={single_tone_crb(0.3, om[0], 1.0, t, N[1]):.3e} rad/s")
    out = scaling_exponents(T, N, om, tau=1.0, delta=0.3)
    print("fitted log-log slopes:", {k: round(v, 3) for k, v in out.items()})
    print("expected: T -1.5, N -0.5, omega -1")


if __name__ == "__main__":
    main()
