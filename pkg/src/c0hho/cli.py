"""Batch command-line front end: solve single cases, run convergence and
condition-number studies, emit CSV / markdown tables.

Exit codes: 0 success, 1 numerical failure (naming the failing level),
2 usage error.
"""

import argparse
import os
import sys


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="c0hho",
        description="Biharmonic plate solvers (hybrid high-order / C0-IPDG) "
                    "on structured triangulations.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, multi_level):
        p.add_argument("--case", required=True,
                       help="manufactured case name (see 'converge --list-cases')")
        p.add_argument("--method", default="hho", choices=["hho", "ipdg"])
        p.add_argument("--bc", choices=["I", "II"],
                       help="boundary-condition type; must match the case")
        p.add_argument("--k", type=int, default=1, help="face polynomial degree, 0..4")
        if multi_level:
            p.add_argument("--levels", type=int, default=4,
                           help="number of refinement levels from the case's sequence")
            p.add_argument("--n", type=str, default=None,
                           help="explicit comma-separated cells-per-side list, e.g. 4,8,16")
        else:
            p.add_argument("--n", type=int, default=8, help="cells per side")
        p.add_argument("--weight-mode", default="weighted_k",
                       choices=["weighted_k", "paper_h_inv"])
        p.add_argument("--quad-boost", type=int, default=4,
                       help="extra exactness degree for error quadrature")
        p.add_argument("--q-rhs", type=int, default=None,
                       help="load quadrature exactness beyond the basis degree")
        p.add_argument("--n-penalty", type=float, default=4.0,
                       help="IPDG penalty multiplier n_d")
        p.add_argument("--node-set", default="auto",
                       choices=["auto", "lattice", "warped"])
        p.add_argument("--no-condense", action="store_true")
        p.add_argument("--estimate-kappa", action="store_true")
        p.add_argument("--drop-line-source", action="store_true",
                       help="negative control: assemble without the line load")
        p.add_argument("--dump-system", metavar="PATH",
                       help="write the free system in 'i j value' triplet text")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--output", "-o", default="-", help="CSV path, '-' for stdout")
        p.add_argument("--markdown", metavar="PATH", help="also write a markdown table")
        p.add_argument("--no-timestamp", action="store_true",
                       help="deterministic output: no timestamp header, timing columns blanked")

    common(sub.add_parser("solve", help="solve one case on one mesh"), False)
    p = sub.add_parser("converge", help="run a refinement study")
    common(p, True)
    p.add_argument("--list-cases", action="store_true")
    p = sub.add_parser("condition", help="condition-number study (condensed vs full)")
    common(p, True)
    return parser


def _config_from(args, n_list):
    from . import study
    return study.RunConfig(
        case=args.case, method=args.method, k=args.k,
        levels=getattr(args, "levels", 1), n_list=n_list, bc=args.bc,
        weight_mode=args.weight_mode, quad_boost=args.quad_boost,
        q_rhs=args.q_rhs, estimate_kappa=args.estimate_kappa,
        condense=not args.no_condense, drop_line_source=args.drop_line_source,
        node_set=args.node_set, n_penalty=args.n_penalty, seed=args.seed)


def _emit(table, args):
    if args.no_timestamp:
        for row in table.rows:
            for key in ("assembly_s", "factor_s", "solve_s"):
                row[key] = None
    text = table.to_csv(None, timestamp=not args.no_timestamp)
    if args.output == "-":
        sys.stdout.write(text)
    else:
        with open(args.output, "w", encoding="utf-8") as fh:
            fh.write(text)
    if args.markdown:
        table.to_markdown(args.markdown)


def _fail_if_broken(table):
    for row in table.rows:
        if row["status"].startswith("failed"):
            print(f"error: numerical failure at level {row['level']} "
                  f"(n={row['n']}): {row['status'][7:]}", file=sys.stderr)
            return 1
    return 0


def main(argv=None):
    threads = os.environ.get("C0HHO_NUM_THREADS")
    if threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, threads)

    parser = _build_parser()
    args = parser.parse_args(argv)

    from . import study, system as syst
    from .errors import FactorizationError, InputError

    try:
        if getattr(args, "list_cases", False):
            for name, case in sorted(study.case_library().items()):
                print(f"{name}: bc {case.bc}, {case.mesh_family} meshes, {case.note}")
            return 0

        if args.command in ("converge", "condition"):
            n_list = None
            if args.n:
                try:
                    n_list = tuple(int(t) for t in args.n.split(","))
                except ValueError:
                    print(f"error: bad --n list '{args.n}'", file=sys.stderr)
                    return 2
            cfg = _config_from(args, n_list)
            if args.command == "condition":
                cfg.estimate_kappa = True
            table = study.run_convergence(cfg)
            _emit(table, args)
            return _fail_if_broken(table)

        # solve: one level
        cfg = _config_from(args, (args.n,))
        case = cfg.validate()
        table = study.run_convergence(cfg)
        row = table.rows[0]
        if row["status"].startswith("failed"):
            print(f"error: numerical failure (n={row['n']}): {row['status'][7:]}",
                  file=sys.stderr)
            return 1
        if args.dump_system:
            load = case.load if not args.drop_line_source \
                else study._strip_line_source(case.load)
            node_set = cfg.resolved_node_set()
            if args.method == "hho":
                sys_obj = syst.assemble(case.mesh_for(args.n), args.k, case.bc, load,
                                        weight_mode=args.weight_mode,
                                        node_set=node_set, q_rhs=args.q_rhs)
            else:
                from . import c0_ipdg
                sys_obj = c0_ipdg.assemble_ipdg(case.mesh_for(args.n), args.k + 2,
                                                case.bc, load, n_penalty=args.n_penalty,
                                                node_set=node_set, q_rhs=args.q_rhs)
            syst.dump_system(sys_obj.A, sys_obj.b, args.dump_system)
        print(f"{args.case} {args.method} bc={case.bc} k={args.k} n={args.n} "
              f"cells={row['cells']} dofs={row['dofs']} "
              f"err_H2={row['err_H2']:.6e} err_H1={row['err_H1']:.6e} "
              f"err_L2={row['err_L2']:.6e} err_stab={row['err_stab']:.6e}")
        if args.output != "-":
            _emit(table, args)
        return 0

    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FactorizationError as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
