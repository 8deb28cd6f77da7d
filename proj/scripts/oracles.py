#!/usr/bin/env python3
"""Independent numpy re-implementations of the forward pass and the TSVM
merge, evaluated on closed-form inputs and frozen into tests/oracle_values.hpp.

    python3 scripts/oracles.py            # rewrite the header
    python3 scripts/oracles.py --check    # exit 1 if the header is stale

The C++ tests rebuild the same inputs from the formulas in
tests/oracle_inputs.hpp; keep both in sync.
"""

import argparse
import pathlib
import sys

import numpy as np

ROOT = pathlib.Path(__file__).resolve().parent.parent
HEADER = ROOT / "tests" / "oracle_values.hpp"

# forward-pass instance
D, H, L, V, NX = 8, 12, 3, 10, 4
EPS = 1e-5

# TSVM instance
TD, TH, TM = 6, 9, 3
TSVM_RATIOS = (0.5, 1.0 / 3.0, 1.0)
SQ, SQ_M = 8, 2  # square instance, r = 0.5


def w_in(l):
    i, j = np.meshgrid(np.arange(1, H + 1), np.arange(1, D + 1), indexing="ij")
    return 0.4 * np.sin(1.3 * i + 0.7 * j + 0.5 * l)


def w_out(l):
    i, j = np.meshgrid(np.arange(1, D + 1), np.arange(1, H + 1), indexing="ij")
    return 0.3 * np.cos(0.9 * i - 1.1 * j + 0.3 * l)


def norm_scale(l):
    return 1.0 + 0.1 * np.sin(np.arange(D) + l)


def norm_bias(l):
    return 0.05 * np.cos(2.0 * np.arange(D) + l)


def codebook():
    i, t = np.meshgrid(np.arange(1, D + 1), np.arange(V), indexing="ij")
    c = np.sin(0.5 * i * (t + 1) + 0.2 * t)
    return c / np.linalg.norm(c, axis=0, keepdims=True)


def inputs():
    i, k = np.meshgrid(np.arange(1, D + 1), np.arange(NX), indexing="ij")
    return np.cos(0.37 * i * (k + 1)) + 0.1 * k


def layer_norm(h, scale, bias):
    mu = h.mean()
    var = ((h - mu) ** 2).mean()
    return (h - mu) / np.sqrt(var + EPS) * scale + bias


def forward(x):
    hs, ks = [x], []
    for l in range(1, L + 1):
        k = np.maximum(w_in(l) @ layer_norm(hs[-1], norm_scale(l), norm_bias(l)), 0.0)
        ks.append(k)
        hs.append(hs[-1] + w_out(l) @ k)
    return hs, ks


def tsvm_delta(i):
    a, b = np.meshgrid(np.arange(1, TD + 1), np.arange(1, TH + 1), indexing="ij")
    return np.sin(0.8 * a * (i + 1) + 0.45 * b) + 0.3 * np.cos(0.21 * a * b + i)


def square_delta(i):
    a, b = np.meshgrid(np.arange(1, SQ + 1), np.arange(1, SQ + 1), indexing="ij")
    return (np.sin(0.61 * a * (i + 2) - 0.33 * b) + 0.2 * np.cos(0.5 * (a + b) * (i + 1))
            + 0.3 * np.sin(0.37 * a * b + i))


def polar(a):
    p, _, qt = np.linalg.svd(a, full_matrices=False)
    return p @ qt


def tsvm(deltas, r):
    rows, cols = deltas[0].shape
    k = min(int(np.floor(r * rows + 1e-9)), rows, cols)
    us, ss, vts = [], [], []
    for d in deltas:
        u, s, vt = np.linalg.svd(d, full_matrices=False)
        us.append(u[:, :k])
        ss.append(s[:k])
        vts.append(vt[:k, :])
    u = polar(np.concatenate(us, axis=1))
    vt = polar(np.concatenate(vts, axis=0))
    return u @ np.diag(np.concatenate(ss)) @ vt


def cpp_array(name, values):
    flat = np.asarray(values, dtype=np.float64).ravel(order="C")
    body = ",\n    ".join(", ".join(f"{v:.17g}" for v in flat[i:i + 4]) for i in range(0, len(flat), 4))
    return f"inline constexpr double {name}[{len(flat)}] = {{\n    {body}}};\n"


def render():
    x = inputs()
    c = codebook()
    outs, keys, preds = [], [], []
    for n in range(NX):
        hs, ks = forward(x[:, n])
        outs.append(hs[-1])
        preds.append(int(np.argmax(c.T @ hs[-1])))
        if n == 0:
            keys = ks
    parts = [
        "#pragma once\n",
        "// Generated by scripts/oracles.py; do not edit.\n",
        "namespace oracle {\n",
        cpp_array("kForwardOutputs", np.stack(outs)),  # NX x D, row per input
        cpp_array("kForwardKeysX0", np.stack(keys)),  # L x H
        "inline constexpr int kForwardPredictions[%d] = {%s};\n" % (NX, ", ".join(map(str, preds))),
    ]
    deltas = [tsvm_delta(i) for i in range(TM)]
    for idx, r in enumerate(TSVM_RATIOS):
        parts.append(cpp_array(f"kTsvmMerged{idx}", tsvm(deltas, r)))  # TD x TH row-major
    parts.append(cpp_array("kTsvmSquare", tsvm([square_delta(i) for i in range(SQ_M)], 0.5)))
    parts.append("}  // namespace oracle\n")
    return "\n".join(parts)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--check", action="store_true")
    args = ap.parse_args()
    text = render()
    if args.check:
        if not HEADER.exists() or HEADER.read_text() != text:
            print(f"{HEADER} is stale; rerun scripts/oracles.py", file=sys.stderr)
            return 1
        print("oracle header up to date")
        return 0
    HEADER.write_text(text)
    print(f"wrote {HEADER}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
