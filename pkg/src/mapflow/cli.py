"""Command line entry point ``mapflow``."""

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import flow_discrete as FD
from . import harness as H
from . import levy_flow as LF
from . import tree as TR
from .errors import MapflowError
from .model import build_asymptotic_nu, load_nu
from .peeling import geodesic_face_counts, normalization
from .perimeter import Law, sample_path


def _floats(s):
    return [float(x) for x in s.split(",") if x.strip()]


def _ints(s):
    return [int(float(x)) for x in s.split(",") if x.strip()]


def _nu(args):
    if getattr(args, "nu", None):
        return load_nu(args.nu)
    return build_asymptotic_nu(args.a, args.p_q)


def _rng(args, name, replica=0):
    return H.replica_rng(args.seed, name, replica)


def _open(args, name):
    if args.out in (None, "-"):
        return sys.stdout, False
    path = args.out if name is None else f"{args.out}.{name}"
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    return open(path, "w", newline=""), True


def _write_table(args, header, rows, name=None):
    fh, close = _open(args, name)
    try:
        if args.format == "json":
            json.dump([dict(zip(header, r)) for r in rows], fh, indent=1, default=float)
            fh.write("\n")
        else:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for r in rows:
                w.writerow([H.fmt(x) for x in r])
    finally:
        if close:
            fh.close()


# ---------------------------------------------------------------------------

def cmd_perimeter(args):
    nu = _nu(args)
    path = sample_path(Law(args.law), nu, args.start, args.horizon, _rng(args, "perimeter"),
                       a=args.a, ptarget=args.ptarget)
    _write_table(args, ["step", "perimeter"], list(enumerate(path.values.tolist())))


def cmd_faces(args):
    nu = _nu(args)
    ns = sorted(_ints(args.ns))
    norm = normalization(nu.neg_a, ns)
    rows = []
    for r in range(args.replicas):
        c, s = geodesic_face_counts(nu, ns, _rng(args, "faces", r))
        for j, n in enumerate(ns):
            rows.append((r, n, int(c[j]), float(s[j]), float(c[j] * norm[j])))
    _write_table(args, ["replica", "n", "count", "sum_theta", "normalized_stat"], rows)


def cmd_flow_discrete(args):
    nu = _nu(args)
    drv = FD.sample_drivers(nu, args.ell, args.T, _rng(args, "flow-discrete"))
    L = drv.level(args.T)
    P = int(drv.values[L])
    starts = _ints(args.starts) if args.starts else list(range(0, 2 * P, max(1, 2 * P // args.count)))
    st = FD.evolve_flow(drv, starts, args.T)
    rows = [(j, 0.0, int(st.starts[j]), float(st.start_positions[j]), P) for j in range(len(starts))]
    for e in range(len(st.flow_times)):
        for j in range(len(starts)):
            rows.append((j, float(st.flow_times[e]), int(st.indices[e, j]), float(st.positions[e, j]),
                         int(st.perimeters[e])))
    rows.sort(key=lambda r: (r[0], r[1]))
    _write_table(args, ["traj_id", "t", "index", "position", "perimeter"], rows,
                 None if args.out in (None, "-") else "trajectories")
    if args.out not in (None, "-"):
        _write_table(args, ["t", "survivor", "absorbed"], st.merges, "merges")


def cmd_flow_continuous(args):
    rng = _rng(args, "flow-continuous")
    ev = LF.sample_flow_events(args.a, args.p_q, args.eps, args.T, rng)
    starts = _floats(args.starts) if args.starts else list(np.arange(args.count) / args.count)
    fl = LF.evolve_flow(ev, starts)
    rows = [(j, 0.0, float(fl.starts[j])) for j in range(len(starts))]
    for e in range(len(fl.times)):
        rows.extend((j, float(fl.times[e]), float(fl.positions[e, j])) for j in range(len(starts)))
    rows.sort(key=lambda r: (r[0], r[1]))
    _write_table(args, ["traj_id", "t", "position"], rows,
                 None if args.out in (None, "-") else "trajectories")
    if args.out not in (None, "-"):
        _write_table(args, ["t", "survivor", "absorbed"], fl.merges, "merges")


def cmd_pssmp(args):
    p = LF.pssmp(args.x, args.alpha, args.a, args.T, _rng(args, "pssmp"), delta=args.delta)
    ts, xs = p.grid(args.points)
    _write_table(args, ["t", "X"], list(zip(ts.tolist(), xs.tolist())))


def cmd_tree(args):
    rng = _rng(args, "tree")
    out = []
    if args.discrete:
        nu = _nu(args)
        sys_ = TR.branch_discrete(nu, args.ell, args.depth, max(1, int(args.cutoff * args.ell)), rng)
        faces = [f for _, f in sys_.faces()[:args.faces]]
        for i, v in enumerate(faces):
            for w in faces[i + 1:]:
                d, c = TR.tree_distance_discrete(sys_, v, w)
                out.append({"pair": [list(v), list(w)], "nca_kind": "label" if c != TR.ROOT else "root",
                            "d_pair": d, "d_root_v": sys_.face_distance(v), "d_root_w": sys_.face_distance(w)})
    else:
        sys_ = TR.branch_continuous(args.a, args.depth, args.cutoff, rng, eps=args.eps)
        faces = [f for _, f in sys_.faces()[:args.faces]]
        for i, v in enumerate(faces):
            for w in faces[i + 1:]:
                d, rec = TR.tree_distance(sys_, v, w)
                out.append({"pair": [list(v), list(w)], "nca_kind": rec.kind, "d_pair": d,
                            "d_root_v": sys_.height(v), "d_root_w": sys_.height(w)})
    fh, close = _open(args, None)
    try:
        json.dump(out, fh, indent=1, default=float)
        fh.write("\n")
    finally:
        if close:
            fh.close()


def cmd_run(args):
    with open(args.config) as fh:
        base = {"seed": args.seed}
        if args.out:
            base["out"] = args.out
        spec = H.parse_config(fh.read(), base)
    rep = H.run(spec)
    for name, value, tol, ok in rep.checks:
        print(f"{'PASS' if ok else 'FAIL'} {name} value={value} tol={tol}")
    return 0 if all(c[3] for c in rep.checks) else 1


# ---------------------------------------------------------------------------

def build_parser():
    ap = argparse.ArgumentParser(prog="mapflow", description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--threads", type=int, default=1, help="numba thread count")
    ap.add_argument("--out", default=None, help="output file (or prefix for multi-file commands)")
    ap.add_argument("--format", choices=["csv", "json"], default="csv")
    sub = ap.add_subparsers(dest="cmd", required=True)

    def model_args(p):
        p.add_argument("--a", type=float, default=2.0)
        p.add_argument("--p-q", dest="p_q", type=float, default=0.05)
        p.add_argument("--nu", help="step distribution file (overrides --a/--p-q)")

    per = sub.add_parser("perimeter").add_subparsers(dest="what", required=True)
    p = per.add_parser("sample")
    model_args(p)
    p.add_argument("--law", choices=[x.value for x in Law], default=Law.INFINITE.value)
    p.add_argument("--start", type=int, default=1)
    p.add_argument("--horizon", type=int, default=1000)
    p.add_argument("--ptarget", type=int, default=None)
    p.set_defaults(func=cmd_perimeter)

    geo = sub.add_parser("geodesic").add_subparsers(dest="what", required=True)
    p = geo.add_parser("faces")
    model_args(p)
    p.add_argument("--ns", default="1000,10000,100000")
    p.add_argument("--replicas", type=int, default=10)
    p.set_defaults(func=cmd_faces)

    flow = sub.add_parser("flow").add_subparsers(dest="what", required=True)
    p = flow.add_parser("discrete")
    model_args(p)
    p.add_argument("--ell", type=int, default=256)
    p.add_argument("--T", type=float, default=2.0)
    p.add_argument("--starts", help="comma list of grid indices at time T")
    p.add_argument("--count", type=int, default=8)
    p.set_defaults(func=cmd_flow_discrete)
    p = flow.add_parser("continuous")
    p.add_argument("--a", type=float, default=2.0)
    p.add_argument("--p-q", dest="p_q", type=float, default=0.05)
    p.add_argument("--eps", type=float, default=LF.EPS_FLOW)
    p.add_argument("--T", type=float, default=2.0)
    p.add_argument("--starts", help="comma list of start positions")
    p.add_argument("--count", type=int, default=8)
    p.set_defaults(func=cmd_flow_continuous)

    p = sub.add_parser("pssmp")
    p.add_argument("--a", type=float, default=2.0)
    p.add_argument("--x", type=float, default=1.0)
    p.add_argument("--alpha", type=float, default=0.0)
    p.add_argument("--T", type=float, default=1.0)
    p.add_argument("--delta", type=float, default=LF.DELTA_XI)
    p.add_argument("--points", type=int, default=201)
    p.set_defaults(func=cmd_pssmp)

    tr = sub.add_parser("tree").add_subparsers(dest="what", required=True)
    p = tr.add_parser("distances")
    model_args(p)
    p.add_argument("--discrete", action="store_true")
    p.add_argument("--ell", type=int, default=1024)
    p.add_argument("--depth", type=int, default=50)
    p.add_argument("--cutoff", type=float, default=0.01, help="relative to the root perimeter")
    p.add_argument("--eps", type=float, default=LF.EPS_FLOW)
    p.add_argument("--faces", type=int, default=10, help="use the largest N faces")
    p.set_defaults(func=cmd_tree)

    p = sub.add_parser("run")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_run)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.threads != 1:
        import numba
        numba.set_num_threads(max(1, min(args.threads, numba.config.NUMBA_NUM_THREADS)))
    try:
        return args.func(args) or 0
    except (MapflowError, ValueError, OSError) as e:
        print(f"mapflow: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
