"""Command-line entry point.

BLAS thread caps are pinned before numpy is imported so that repeated runs are
bitwise reproducible regardless of `--threads` (which only controls the
scenario pool, never the numerics of a single scenario).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="caplat",
        description="Capacitance matrices of truncated resonator lattices",
    )
    parser.add_argument("--threads", type=int, default=1, help="scenario pool size")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, descr in [
        ("cap-finite", "capacitance matrix of a finite truncated structure"),
        ("cap-quasi", "quasi-periodic capacitance matrices at given quasi-momenta"),
        ("cap-realspace", "real-space coefficients C^m via the inverse Floquet transform"),
        ("spectrum", "defect spectrum of a truncated structure"),
        ("converge-cap", "capacitance coefficient convergence ladder"),
        ("converge-defect", "defect eigenvalue convergence ladder"),
        ("band", "band reconstruction from a finite chain"),
    ]:
        cmd = sub.add_parser(name, help=descr)
        cmd.add_argument("--config", required=True, help="TOML or JSON config file")
        cmd.add_argument("--out", required=True, help="output directory")
    return parser


def _run(args) -> dict:
    import numpy as np

    from . import experiments as xp
    from .floquet import bz_quadrature, estimate_quasiperiodicity, real_space_capacitance
    from .geometry import lattice_points
    from .latticegreen import quasi_capacitance
    from .singlelayer import finite_capacitance_indexed
    from .spectra import (
        DefectSpec,
        MaterialParams,
        build_defect_matrix,
        defect_eigensolve,
        localization_metrics,
    )

    cfg = xp.load_config(args.config)
    cfg.threads = args.threads
    out = args.out
    extra: dict = {"command": args.command}

    if args.command == "cap-finite":
        if cfg.r is None:
            raise ValueError("cap-finite needs `r` (truncation radius in cells)")
        cell = xp.make_cell(cfg)
        index = lattice_points(cell.lattice, cfg.r * cfg.spacing)
        C = finite_capacitance_indexed(cell, index, xp.make_backend(cfg))
        n = C.entries.shape[0]
        rows = [
            (i, j, float(C.entries[i, j])) for i in range(n) for j in range(n)
        ]
        xp.write_csv(f"{out}/capacitance.csv", ["row", "col", "value"], rows)
        extra["blocks"] = len(C.block_index)

    elif args.command == "cap-quasi":
        if not cfg.alphas:
            raise ValueError("cap-quasi needs `alphas` (fractional quasi-momenta)")
        cell = xp.make_cell(cfg)
        backend = xp.make_backend(cfg)
        from .geometry import dual_basis

        duals = dual_basis(cell.lattice).duals
        rows = []
        for frac in cfg.alphas:
            fvec = np.atleast_1d(np.asarray(frac, float))
            alpha = fvec @ duals
            label = "/".join(xp._fmt(float(v)) for v in fvec)
            C = quasi_capacitance(cell, alpha, backend).matrix
            for i in range(C.shape[0]):
                for j in range(C.shape[1]):
                    rows.append((label, i, j, float(C[i, j].real), float(C[i, j].imag)))
        xp.write_csv(f"{out}/quasi.csv", ["alpha_frac", "row", "col", "real", "imag"], rows)

    elif args.command == "cap-realspace":
        if not cfg.ms:
            raise ValueError("cap-realspace needs `ms` (integer lattice points)")
        cell = xp.make_cell(cfg)
        quad = bz_quadrature(cell.lattice, cfg.bz_m)
        coeffs = real_space_capacitance(cell, cfg.ms, quad, xp.make_backend(cfg))
        rows = []
        for m in cfg.ms:
            key = tuple(int(v) for v in np.atleast_1d(m))
            mat = coeffs[key]
            for i in range(mat.shape[0]):
                for j in range(mat.shape[1]):
                    rows.append(("/".join(map(str, key)), i, j, float(mat[i, j])))
        xp.write_csv(f"{out}/realspace.csv", ["m", "row", "col", "value"], rows)
        extra["decay"] = coeffs.decay

    elif args.command == "spectrum":
        if cfg.r is None:
            raise ValueError("spectrum needs `r` (truncation radius in cells)")
        cell = xp.make_cell(cfg)
        index = lattice_points(cell.lattice, cfg.r * cfg.spacing)
        C = finite_capacitance_indexed(cell, index, xp.make_backend(cfg))
        materials = MaterialParams(
            delta=np.full(cell.n_resonators, cfg.delta),
            v=np.full(cell.n_resonators, cfg.v),
            volume=cell.volumes,
        )
        spec = DefectSpec.single_site(cfg.eta, m=(0,) * cfg.d) if cfg.eta else DefectSpec(())
        b = build_defect_matrix(spec, index, cell.n_resonators)
        res = defect_eigensolve(C, b, materials)
        rows = []
        for k, lam in enumerate(res.eigenvalues):
            met = localization_metrics(res.eigenvectors[:, k], index, cell.n_resonators)
            rows.append((k, float(lam), met["participation_ratio"], met["decay"]["rate"]))
        xp.write_csv(
            f"{out}/spectrum.csv", ["n", "lambda", "participation_ratio", "decay_rate"], rows
        )

    elif args.command == "converge-cap":
        result = xp.run_capacitance_convergence(cfg)
        xp.write_csv(f"{out}/convergence.csv", result["columns"], result["rows"])
        extra["fit"] = result["fit"].__dict__
        extra["reference"] = result["reference"]

    elif args.command == "converge-defect":
        result = xp.run_defect_convergence(cfg)
        if result.get("ssh"):
            for parity in ("even", "odd"):
                tab = result[parity]
                xp.write_csv(f"{out}/convergence_{parity}.csv", tab["columns"], tab["rows"])
                extra[f"fit_{parity}"] = tab["fit"].__dict__
                extra[f"reference_{parity}"] = tab["reference"]
            extra["gap"] = list(result["gap"])
        else:
            xp.write_csv(f"{out}/convergence.csv", result["columns"], result["rows"])
            extra["fit"] = result["fit"].__dict__
            extra["reference"] = result["reference"]

    elif args.command == "band":
        result = xp.run_band_reconstruction(cfg)
        xp.write_csv(f"{out}/band.csv", result["columns"], result["rows"])
        extra.update(
            {
                k: result[k]
                for k in (
                    "flagged_flat",
                    "unmatched_near_gamma",
                    "band_min_omega",
                    "band_max_omega",
                )
            }
        )
    else:  # pragma: no cover - argparse enforces choices
        raise ValueError(f"unknown command {args.command}")

    return {"cfg": cfg, "extra": extra}


def main(argv=None) -> int:
    # pin BLAS threading before any numpy import for determinism
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, "1")

    args = _build_parser().parse_args(argv)
    start = time.perf_counter()
    try:
        outcome = _run(args)
    except (ValueError, KeyError, TypeError, OSError, json.JSONDecodeError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        from .errors import CaplatError

        if isinstance(exc, CaplatError):
            print(f"numerical failure: {exc}", file=sys.stderr)
            return 3
        raise

    from . import experiments as xp

    xp.write_manifest(args.out, outcome["cfg"], outcome["extra"], time.perf_counter() - start)
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
