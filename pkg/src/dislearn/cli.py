"""Experiment harness: data generation, basis computation, training, tables.

One JSON config drives everything; per-problem network hyperparameters
(depth, width multiple, activation, initial learning rate) ship as
defaults.  Presets: `desk` for CI-scale runs, `paper` for the full-size
study.  Every artifact directory carries the config digest, generate/basis
steps are idempotent (matching digests are skipped), and evaluate refuses
inputs whose digests disagree.

Exit codes: 0 success, 1 usage error, 2 numerical failure, 3 integrity.
"""

import argparse
import copy
import json
import os
import sys

import numpy as np

from . import field, io, metrics, pde, reduction, surrogate as sg

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERICAL = 2
EXIT_INTEGRITY = 3

DEFAULT_CONFIG = {
    "preset": "desk",
    "n_el": 256,
    "problems": {
        "semilinear": {"a_delta": 2.0, "a_I": 10.0, "alpha": 1.0,
                       "depth": 6, "width_mult": 2, "activation": "softplus",
                       "lr0": 0.001},
        "burgers": {"a_delta": 10.0, "a_I": 20.0, "alpha": 1.0,
                    "depth": 4, "width_mult": 2, "activation": "softplus",
                    "lr0": 0.00025},
    },
    "ranks": [10, 20, 30],
    "pairs": [["input_pca", "output_pca"], ["input_pca", "output_dis"],
              ["input_dis", "output_pca"], ["input_dis", "output_dis"]],
    "batch_size": 25,
    "normalization": "per_sample",
    "seeds": [0, 1, 2, 3, 4, 5, 6, 7, 8, 9],
    "test_seed": 9001,
    "reference_seed": 8001,
    "excess_ns": [80, 160, 320, 640],
    "excess_rank": 10,
    "theory_maps": 100,
    "theory_seed": 707,
}

PRESETS = {
    "desk": {"train_ns": [250, 1000, 4000], "test_n": 4000,
             "reference_n": 20000, "epochs": sg.DESK_EPOCHS,
             "lr_halvings": list(sg.DESK_HALVINGS)},
    "paper": {"train_ns": [640, 1600, 4000, 16000], "test_n": 4000,
              "reference_n": 20000, "epochs": sg.PAPER_EPOCHS,
              "lr_halvings": list(sg.PAPER_HALVINGS)},
}


def load_config(path=None, preset=None):
    """Defaults <- preset sizes <- user config file, in that order."""
    user = {}
    if path is not None:
        with open(path) as f:
            user = json.load(f)
    name = preset or user.get("preset") or DEFAULT_CONFIG["preset"]
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}")
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    cfg.update(PRESETS[name])
    cfg.update(user)
    cfg["preset"] = name
    _validate_config(cfg)
    return cfg


def _validate_config(cfg):
    d = cfg["n_el"] + 1
    if any(r > d for r in cfg["ranks"]) or cfg["excess_rank"] > d:
        raise ValueError("ranks must not exceed the discretization dimension")
    seeds = list(cfg["seeds"]) + [cfg["test_seed"], cfg["reference_seed"]]
    if len(set(seeds)) != len(seeds):
        raise ValueError("seeds (including test/reference) must be distinct")
    for key in ("train_ns", "test_n", "reference_n", "epochs"):
        vals = cfg[key] if isinstance(cfg[key], list) else [cfg[key]]
        if any(v <= 0 for v in vals):
            raise ValueError(f"{key} must be positive")


def config_digest(cfg):
    return io.config_digest(cfg)


def output_root(args):
    return args.out or os.environ.get("DISLEARN_OUT", "runs")


class _Workspace:
    """Paths and cached objects for one (config, output root)."""

    def __init__(self, cfg, root):
        self.cfg = cfg
        self.root = root
        self.digest = config_digest(cfg)
        self._mesh = None
        self._covs = {}
        self._problems = {}

    def mesh(self):
        if self._mesh is None:
            self._mesh = field.assemble_mesh(self.cfg["n_el"])
        return self._mesh

    def cov(self, problem):
        if problem not in self._covs:
            p = self.cfg["problems"][problem]
            self._covs[problem] = field.build_covariance(
                self.mesh(), p["a_delta"], p["a_I"], p["alpha"])
        return self._covs[problem]

    def problem(self, name):
        if name not in self._problems:
            self._problems[name] = pde.make_problem(name, self.mesh())
        return self._problems[name]

    def data_dir(self, problem, seed, n):
        return os.path.join(self.root, "data", problem, f"s{seed}_n{n}")

    def basis_dir(self, problem, kind, source_tag, r):
        return os.path.join(self.root, "bases", problem,
                            f"{kind}_{source_tag}_r{r}")

    def net_dir(self, problem, pair, r, n, seed):
        return os.path.join(self.root, "nets", problem,
                            f"{pair[0]}__{pair[1]}_r{r}_n{n}_s{seed}")

    def csv_dir(self):
        return os.path.join(self.root, "csv")


def _manifest_digest(dirpath):
    try:
        with open(os.path.join(dirpath, "manifest.json")) as f:
            return json.load(f).get("config_digest")
    except FileNotFoundError:
        return None


def _ensure_dataset(ws, problem, seed, n, jacobians=True, quiet=False):
    """Generate-or-load with digest-based idempotence."""
    path = ws.data_dir(problem, seed, n)
    if _manifest_digest(path) == ws.digest:
        if not quiet:
            print(f"exists: {path}")
        return io.load_samples(path)
    samples = pde.generate_dataset(ws.problem(problem), ws.cov(problem), n,
                                   seed, jacobians=jacobians)
    io.save_samples(samples, path, digest=ws.digest)
    if not quiet:
        print(f"wrote: {path}")
    return io.load_samples(path)


def cmd_generate(args):
    cfg = load_config(args.config, args.preset)
    ws = _Workspace(cfg, output_root(args))
    try:
        _ensure_dataset(ws, args.problem, args.seed, args.n)
    except pde.NonConvergence as exc:
        print(f"solver failed at sample {exc.sample_index}: {exc}",
              file=sys.stderr)
        return EXIT_NUMERICAL
    except io.IntegrityError as exc:
        print(f"integrity error: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    return EXIT_OK


def _build_reference(ws, problem, r_max):
    """Streamed reference proxies (large-N bases) for one problem."""
    cfg = ws.cfg
    cov = ws.cov(problem)
    samples, grams = reduction.streamed_dataset_operators(
        ws.problem(problem), cov, cfg["reference_n"], cfg["reference_seed"])
    return {
        reduction.INPUT_PCA: reduction.input_pca(cov, r_max),
        reduction.OUTPUT_PCA: reduction.output_pca(samples, r_max),
        reduction.INPUT_DIS: reduction.input_dis(samples, cov, r_max,
                                                 grams=grams),
        reduction.OUTPUT_DIS: reduction.output_dis(samples, r_max,
                                                   grams=grams),
    }


def cmd_basis(args):
    cfg = load_config(args.config, args.preset)
    ws = _Workspace(cfg, output_root(args))
    ranks = [args.rank] if args.rank else cfg["ranks"]
    r_max = max(ranks)
    if r_max > cfg["n_el"] + 1:
        print(f"rank {r_max} exceeds dimension {cfg['n_el'] + 1}",
              file=sys.stderr)
        return EXIT_USAGE
    try:
        if args.reference:
            tag = f"ref{cfg['reference_n']}"
            bases = _build_reference(ws, args.problem, r_max)
            prov = {"reference_n": cfg["reference_n"],
                    "seed": cfg["reference_seed"]}
        else:
            tag = f"n{args.n}_s{args.seed}"
            samples = _ensure_dataset(ws, args.problem, args.seed, args.n,
                                      quiet=True)
            cov = ws.cov(args.problem)
            grams = reduction.jacobian_gram_operators(samples, cov)
            bases = {
                reduction.INPUT_PCA: reduction.input_pca(cov, r_max),
                reduction.OUTPUT_PCA: reduction.output_pca(samples, r_max),
                reduction.INPUT_DIS: reduction.input_dis(samples, cov, r_max,
                                                         grams=grams),
                reduction.OUTPUT_DIS: reduction.output_dis(samples, r_max,
                                                           grams=grams),
            }
            prov = {"n": args.n, "seed": args.seed}
    except pde.NonConvergence as exc:
        print(f"solver failed: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except io.IntegrityError as exc:
        print(f"integrity error: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    for r in ranks:
        for kind, basis in bases.items():
            path = ws.basis_dir(args.problem, kind, tag, r)
            if _manifest_digest(path) == ws.digest:
                print(f"exists: {path}")
                continue
            io.save_basis(basis.truncate(r), path, digest=ws.digest,
                          provenance=prov)
            print(f"wrote: {path}")
    return EXIT_OK


def correctness_gates(ws, problem, rank, seed=0):
    """Finite-difference gates that must pass before training is accepted.

    Checks the PDE Jacobian on fresh samples and the loss gradient on a
    randomly initialized network of the configured architecture.
    """
    prob = ws.problem(problem)
    cov = ws.cov(problem)
    gen = np.random.default_rng(seed)
    for k in range(2):
        x = cov.sample_field(seed + 90000, index=k)
        y, _ = pde.solve(prob, x)
        J = pde.jacobian(prob, x, y)
        v = gen.standard_normal(prob.d)
        v /= np.linalg.norm(v)
        eps = 1e-5 * np.linalg.norm(x)
        fp, _ = pde.solve(prob, x + eps * v)
        fm, _ = pde.solve(prob, x - eps * v)
        fd = (fp - fm) / (2.0 * eps)
        rel = np.linalg.norm(fd - J @ v) / np.linalg.norm(J @ v)
        if rel >= 1e-5:
            raise RuntimeError(f"PDE Jacobian gate failed: {rel:.2e}")

    p = ws.cfg["problems"][problem]
    net = sg.LatentNetwork.initialized(rank, p["depth"],
                                       p["width_mult"] * rank,
                                       p["activation"], seed=seed)
    B = 5
    S = gen.standard_normal((B, rank))
    Q = gen.standard_normal((B, rank))
    G = gen.standard_normal((B, rank, rank))
    a0 = 1.0 + gen.random(B)
    a1 = 1.0 + gen.random(B)
    _, gW, gb = sg.loss_gradient(net, S, Q, G, a0, a1)
    flat = net.get_flat()
    g_flat = np.concatenate([g.ravel() for g in gW] + [g.ravel() for g in gb])
    scale = np.abs(g_flat).max()
    probe = net.copy()
    h = 1e-6
    for i in gen.choice(flat.size, size=25, replace=False):
        fl = flat.copy()
        fl[i] += h
        probe.set_flat(fl)
        lp = sg.sobolev_loss(probe, S, Q, G, a0, a1)
        fl[i] -= 2 * h
        probe.set_flat(fl)
        lm = sg.sobolev_loss(probe, S, Q, G, a0, a1)
        if abs((lp - lm) / (2 * h) - g_flat[i]) / scale >= 1e-5:
            raise RuntimeError("loss gradient gate failed")


def cmd_train(args):
    cfg = load_config(args.config, args.preset)
    ws = _Workspace(cfg, output_root(args))
    pair = tuple(args.pair.split(":"))
    if len(pair) != 2 or pair[0] not in reduction.INPUT_KINDS \
            or pair[1] not in reduction.OUTPUT_KINDS:
        print(f"bad pair {args.pair!r}; use e.g. input_dis:output_pca",
              file=sys.stderr)
        return EXIT_USAGE
    run_id = f"{args.problem} {args.pair} r={args.rank} n={args.n} s={args.seed}"
    try:
        correctness_gates(ws, args.problem, args.rank)
        samples = _ensure_dataset(ws, args.problem, args.seed, args.n,
                                  quiet=True)
        cov = ws.cov(args.problem)
        grams = reduction.jacobian_gram_operators(samples, cov)
        builders = {
            reduction.INPUT_PCA: lambda: reduction.input_pca(cov, args.rank),
            reduction.INPUT_DIS: lambda: reduction.input_dis(
                samples, cov, args.rank, grams=grams),
            reduction.OUTPUT_PCA: lambda: reduction.output_pca(samples, args.rank),
            reduction.OUTPUT_DIS: lambda: reduction.output_dis(
                samples, args.rank, grams=grams),
        }
        in_basis = builders[pair[0]]()
        out_basis = builders[pair[1]]()
        data = sg.encode_dataset(samples, in_basis, out_basis,
                                 normalization=cfg["normalization"])
        p = cfg["problems"][args.problem]
        sched = sg.TrainingSchedule(
            epochs=cfg["epochs"], batch_size=cfg["batch_size"], lr0=p["lr0"],
            lr_halvings=tuple(cfg["lr_halvings"]),
            normalization=cfg["normalization"], seed=args.seed)
        net0 = sg.LatentNetwork.initialized(
            args.rank, p["depth"], p["width_mult"] * args.rank,
            p["activation"], seed=args.seed)
        net, history = sg.train(net0, data, sched)
    except sg.DivergenceError as exc:
        print(f"run {run_id} diverged at epoch {exc.epoch}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (pde.NonConvergence, RuntimeError) as exc:
        print(f"run {run_id} failed: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except io.IntegrityError as exc:
        print(f"integrity error: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    path = ws.net_dir(args.problem, pair, args.rank, args.n, args.seed)
    io.save_network(net, path, digest=ws.digest,
                    schedule_digest=io.config_digest(sched.digest_dict()),
                    extra={"problem": args.problem, "pair": list(pair),
                           "n_train": args.n, "seed": args.seed,
                           "final_loss": float(history[-1])})
    with open(os.path.join(path, "history.csv"), "w") as f:
        f.write("epoch,train_loss\n")
        for ep, val in enumerate(history):
            f.write(f"{ep},{val:.16e}\n")
    print(f"wrote: {path} (final loss {history[-1]:.3e})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# evaluate suites
# ---------------------------------------------------------------------------

def _check_digests(ws, dirs):
    for dpath in dirs:
        dg = _manifest_digest(dpath)
        if dg != ws.digest:
            raise io.IntegrityError(
                f"{dpath}: digest {dg} does not match config {ws.digest}")


def _suite_reconstruction(ws, problem, rows):
    cfg = ws.cfg
    test = _ensure_dataset(ws, problem, cfg["test_seed"], cfg["test_n"],
                           quiet=True)
    moments = metrics.test_moments(test)
    r_max = max(cfg["ranks"])
    bases = _build_reference(ws, problem, r_max)
    for kind, basis in bases.items():
        for r in cfg["ranks"]:
            reps = metrics.reconstruction_errors(test, basis.truncate(r),
                                                 moments)
            for name, rep in reps.items():
                b_in = kind if basis.is_input() else ""
                b_out = "" if basis.is_input() else kind
                rows.append(metrics.csv_row(
                    f"recon_{name}", problem, b_in, b_out, r,
                    cfg["reference_n"], cfg["reference_seed"],
                    rep.value, rep.denominator))
                trailing = reduction.trailing_sum(basis, r) * moments.n \
                    / rep.denominator
                rows.append(metrics.csv_row(
                    f"recon_{name}_trailing", problem, b_in, b_out, r,
                    cfg["reference_n"], cfg["reference_seed"],
                    trailing, rep.denominator))


def _suite_excess(ws, problem, rows):
    cfg = ws.cfg
    r = cfg["excess_rank"]
    test = _ensure_dataset(ws, problem, cfg["test_seed"], cfg["test_n"],
                           quiet=True)
    moments = metrics.test_moments(test)
    ref = _build_reference(ws, problem, r)
    cov = ws.cov(problem)
    for n in cfg["excess_ns"]:
        for seed in cfg["seeds"]:
            samples = _ensure_dataset(ws, problem, seed, n, quiet=True)
            grams = reduction.jacobian_gram_operators(samples, cov)
            small = {
                reduction.OUTPUT_PCA: reduction.output_pca(samples, r),
                reduction.OUTPUT_DIS: reduction.output_dis(samples, r,
                                                           grams=grams),
                reduction.INPUT_DIS: reduction.input_dis(samples, cov, r,
                                                         grams=grams),
            }
            for kind, basis in small.items():
                ex = metrics.excess_risk(basis, ref[kind], test, moments)
                b_in = kind if basis.is_input() else ""
                b_out = "" if basis.is_input() else kind
                rows.append(metrics.csv_row(
                    f"excess_{metrics.EXCESS_METRIC[kind]}", problem,
                    b_in, b_out, r, n, seed, ex, 1.0))
            me = metrics.mean_estimator_error(
                samples.Y.mean(axis=0), ref[reduction.OUTPUT_PCA].mean,
                ws.mesh())
            rows.append(metrics.csv_row("mean_estimator", problem, "", "",
                                        0, n, seed, me, 1.0))


def _suite_generalization(ws, problem, rows):
    cfg = ws.cfg
    test = _ensure_dataset(ws, problem, cfg["test_seed"], cfg["test_n"],
                           quiet=True)
    moments = metrics.test_moments(test)
    net_dirs = []
    root = os.path.join(ws.root, "nets", problem)
    if os.path.isdir(root):
        net_dirs = sorted(os.path.join(root, x) for x in os.listdir(root))
    if not net_dirs:
        raise FileNotFoundError(
            f"no trained networks under {root}; run `dislearn train` first")
    _check_digests(ws, net_dirs)
    cov = ws.cov(problem)
    for dpath in net_dirs:
        man = io._load_manifest(dpath)
        net = io.load_network(dpath)
        pair = tuple(man["pair"])
        n, seed, r = man["n_train"], man["seed"], man["r"]
        samples = _ensure_dataset(ws, problem, seed, n, quiet=True)
        grams = reduction.jacobian_gram_operators(samples, cov)
        builders = {
            reduction.INPUT_PCA: lambda: reduction.input_pca(cov, r),
            reduction.INPUT_DIS: lambda: reduction.input_dis(samples, cov, r,
                                                             grams=grams),
            reduction.OUTPUT_PCA: lambda: reduction.output_pca(samples, r),
            reduction.OUTPUT_DIS: lambda: reduction.output_dis(samples, r,
                                                               grams=grams),
        }
        pair_data = metrics.encode_test_pair(test, builders[pair[0]](),
                                             builders[pair[1]](), moments)
        l2, h1 = metrics.surrogate_errors(pair_data, net)
        rows.append(metrics.csv_row("l2", problem, pair[0], pair[1], r, n,
                                    seed, l2.value, l2.denominator))
        rows.append(metrics.csv_row("h1_semi", problem, pair[0], pair[1], r,
                                    n, seed, h1.value, h1.denominator))


def _suite_theory(ws, rows):
    from . import polymap

    cfg = ws.cfg
    gen = np.random.default_rng(cfg["theory_seed"])
    for i in range(cfg["theory_maps"]):
        degree = int(gen.integers(1, 5))
        m = polymap.random_map(dim_in=int(gen.integers(3, 8)),
                               d_out=int(gen.integers(2, 6)),
                               degree=degree, n_terms=int(gen.integers(4, 12)),
                               seed=cfg["theory_seed"] + i)
        kd, kh = polymap.exact_constants(m)
        rows.append(metrics.csv_row("hermite_kd", "polymap", "", "",
                                    m.degree, len(m.alphas), i, kd, m.degree))
        rows.append(metrics.csv_row(
            "hermite_kh", "polymap", "", "", m.degree, len(m.alphas), i, kh,
            max(m.degree - 1, 1)))
        for r, lhs, rhs in metrics.subspace_poincare_check(
                m, range(m.dim_in + 1)):
            rows.append(metrics.csv_row("subspace_poincare_gap", "polymap",
                                        "", "", r, len(m.alphas), i,
                                        rhs - lhs, max(rhs, 1e-300)))


def cmd_evaluate(args):
    cfg = load_config(args.config, args.preset)
    ws = _Workspace(cfg, output_root(args))
    rows = [metrics.CSV_HEADER]
    problems = [args.problem] if args.problem else list(cfg["problems"])
    try:
        if args.suite == "theory":
            _suite_theory(ws, rows)
        else:
            suite = {"reconstruction": _suite_reconstruction,
                     "excess": _suite_excess,
                     "generalization": _suite_generalization}[args.suite]
            for problem in problems:
                suite(ws, problem, rows)
    except io.IntegrityError as exc:
        print(f"integrity error: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    except FileNotFoundError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_INTEGRITY
    except (pde.NonConvergence, sg.DivergenceError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    os.makedirs(ws.csv_dir(), exist_ok=True)
    out_path = os.path.join(ws.csv_dir(), f"{args.suite}.csv")
    with open(out_path, "w") as f:
        f.write("\n".join(rows) + "\n")
    print(f"wrote: {out_path} ({len(rows) - 1} rows)")
    return EXIT_OK


def build_parser():
    ap = argparse.ArgumentParser(
        prog="dislearn",
        description="Derivative-informed reduced-basis surrogate experiments")
    ap.add_argument("--config", default=None, help="JSON config path")
    ap.add_argument("--preset", choices=list(PRESETS), default=None)
    ap.add_argument("--out", default=None,
                    help="output root (default $DISLEARN_OUT or ./runs)")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="generate a dataset")
    g.add_argument("--problem", required=True,
                   choices=["semilinear", "burgers"])
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, required=True)
    g.set_defaults(func=cmd_generate)

    b = sub.add_parser("basis", help="build the four reduced bases")
    b.add_argument("--problem", required=True,
                   choices=["semilinear", "burgers"])
    b.add_argument("--n", type=int, default=None)
    b.add_argument("--seed", type=int, default=None)
    b.add_argument("--rank", type=int, default=None)
    b.add_argument("--reference", action="store_true",
                   help="build large-N proxies for the exact bases")
    b.set_defaults(func=cmd_basis)

    t = sub.add_parser("train", help="train one latent network")
    t.add_argument("--problem", required=True,
                   choices=["semilinear", "burgers"])
    t.add_argument("--pair", required=True, help="input_kind:output_kind")
    t.add_argument("--rank", type=int, required=True)
    t.add_argument("--n", type=int, required=True)
    t.add_argument("--seed", type=int, required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="emit a metrics CSV")
    e.add_argument("--suite", required=True,
                   choices=["reconstruction", "excess", "generalization",
                            "theory"])
    e.add_argument("--problem", default=None,
                   choices=["semilinear", "burgers"])
    e.set_defaults(func=cmd_evaluate)
    return ap


def main(argv=None):
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        cfg_probe = load_config(args.config, args.preset)
    except (ValueError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"bad config: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if getattr(args, "command", None) == "basis" and not args.reference:
        if args.n is None or args.seed is None:
            print("basis requires --n and --seed unless --reference",
                  file=sys.stderr)
            return EXIT_USAGE
    del cfg_probe
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
