"""Command-line entry point: ``subdiff <command> [flags]``.

Every command writes its outputs atomically and a JSON manifest next to
them (``<out>.manifest.json``; ``manifest.json`` inside the directory for
``gen-data``). Exit codes: 0 success, 2 usage, 3 I/O, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from subdiff import __version__
from subdiff.data import (
    Checkpoint,
    FormatError,
    SyntheticSpec,
    atomic_write_bytes,
    explained_variance,
    gmm_from_matrix,
    gmm_to_matrix,
    load_checkpoint,
    load_cifar10,
    load_matrix,
    make_synthetic,
    nn_distances,
    save_checkpoint,
    save_matrix,
)
from subdiff.divergence import (
    DEFAULT_GRID,
    DEFAULT_MC,
    ThresholdUnattainable,
    divergence_curve,
    read_curves_csv,
    select_transition_times,
    write_curves_csv,
)
from subdiff.flow import IntegrationError, OdeConfig, log_likelihood
from subdiff.sampler import SamplerConfig, level_step_counts, sample_blocks, sample_subspace_diffusion
from subdiff.scorenet import GmmScore, ScoreNet, TrainConfig, TrainingDiverged, ZeroScore, train
from subdiff.sde import SubspaceSchedule, VEProcess
from subdiff.subspace import (
    Basis,
    DownsamplingChain,
    ExplicitChain,
    ImageShape,
    SubspaceChain,
    downsampling_chain,
    patch_pca_basis,
    pca_chain,
    pca_subspace,
    rmsd_per_dim,
)

log = logging.getLogger("subdiff")

EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 2, 3, 4
SWEEP_DIMS = (3, 5, 7, 9, 11, 15, 19, 23, 29)
SWEEP_TIMES = "0:1:0.05"
SWEEP_COUNT = 1600


class UsageError(Exception):
    pass


# ------------------------------------------------------------------ manifests


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int | None
    inputs: list[str] = field(default_factory=list)
    outputs: list[str] = field(default_factory=list)
    version: str = __version__
    timings: dict = field(default_factory=dict)
    results: dict = field(default_factory=dict)

    def phase(self, name):
        return _Phase(self, name)

    def write(self, path):
        atomic_write_bytes(path, (json.dumps(asdict(self), indent=2, sort_keys=True) + "\n").encode())


class _Phase:
    def __init__(self, manifest, name):
        self.manifest, self.name = manifest, name

    def __enter__(self):
        self.t0 = time.perf_counter()

    def __exit__(self, *exc):
        self.manifest.timings[self.name] = round(time.perf_counter() - self.t0, 3)


def manifest_path(out: Path) -> Path:
    return out / "manifest.json" if out.is_dir() else out.with_name(out.name + ".manifest.json")


def check_writable(paths, force):
    for p in paths:
        if Path(p).exists() and not force:
            raise FileExistsError(f"{p} exists; pass --force to overwrite")


def write_text(path, text):
    atomic_write_bytes(path, text.encode())


# --------------------------------------------------------------------- parsing


def parse_floats(text):
    """``a,b,c`` or ``start:stop:step`` (stop included when on the grid)."""
    text = text.strip()
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise UsageError(f"range {text!r} must be start:stop:step")
        a, b, h = (float(p) for p in parts)
        if h <= 0 or b < a:
            raise UsageError(f"bad range {text!r}")
        n = int(np.floor((b - a) / h + 1e-9)) + 1
        return [round(a + i * h, 12) for i in range(n)]
    if not text:
        return []
    try:
        return [float(p) for p in text.split(",")]
    except ValueError:
        raise UsageError(f"cannot parse number list {text!r}") from None


def parse_times(text):
    """A number list, or a path to a file holding one (as written by ``schedule``)."""
    if text is None:
        return []
    p = Path(text)
    if p.is_file():
        text = p.read_text()
    return parse_floats(text)


def parse_shape(text) -> ImageShape:
    try:
        h, w, c = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise UsageError(f"shape {text!r} must look like 32x32x3") from None
    return ImageShape(h, w, c)


def process_from(args) -> VEProcess:
    return VEProcess(args.sigma_min, args.sigma_max)


def sampler_from(args) -> SamplerConfig:
    return SamplerConfig(args.steps, args.snr, args.langevin_n, args.seed)


def read_points(path):
    a = load_matrix(path)
    if a.shape[0] == 0:
        raise UsageError(f"{path} holds no rows")
    return a


# ----------------------------------------------------------------- model banks


def chain_from_checkpoints(cks) -> SubspaceChain:
    """Nested chain implied by checkpoints ordered full to smallest."""
    d = cks[0].models[0].input_dim
    subs = [c.chain for c in cks[1:]]
    if not subs:
        return ExplicitChain([], ambient_dim=d)
    if any(c is None for c in subs):
        raise UsageError("every subspace checkpoint must carry its subspace")
    if all(isinstance(c, DownsamplingChain) for c in subs):
        levels = [c.levels for c in subs]
        if levels != list(range(1, len(subs) + 1)) or len({c.shape for c in subs}) != 1:
            raise UsageError(f"downsampling checkpoints must cover levels 1..K in order, got {levels}")
        return subs[-1]
    return ExplicitChain([c.basis(c.K) for c in subs], ambient_dim=d)


def schedule_from_checkpoints(cks, process, times) -> SubspaceSchedule:
    chain = chain_from_checkpoints(cks)
    if len(times) != chain.K:
        raise UsageError(f"{chain.K} subspace checkpoints need {chain.K} transition times, got {len(times)}")
    # each checkpoint stores its energy relative to the full space; levels are differences
    total = [0.0] + [float(c.energies[0]) for c in cks[1:]]
    energies = tuple(b - a for a, b in zip(total[:-1], total[1:]))
    return SubspaceSchedule(chain, process, tuple(times), energies)


def load_bank(paths):
    if not paths:
        raise UsageError("need at least one --ckpt")
    cks = [load_checkpoint(p) for p in paths]
    for p, c in zip(paths, cks):
        if len(c.models) != 1:
            raise UsageError(f"{p} must hold exactly one score model")
    proc = cks[0].process
    if any(c.process != proc for c in cks):
        raise UsageError("checkpoints disagree on the diffusion process")
    return cks, [c.models[0] for c in cks], proc


def map_time(t, process):
    """Sweep convention: ``t = 0`` upsamples at ``eps``; ``t >= T`` never leaves the full space."""
    if t >= process.T:
        return None
    return max(float(t), process.eps)


# ----------------------------------------------------------------- experiments


def train_model(data, process, dim=None, width=256, config=TrainConfig(), seed=0):
    """Train one score model on the top-``dim`` PCA subspace of ``data``.

    Returns a checkpoint; ``dim`` equal to the data dimension (or None) gives
    the full model.
    """
    d = data.shape[1]
    dim = d if dim is None else dim
    if not 1 <= dim <= d:
        raise UsageError(f"subspace dim must be in 1..{d}")
    chain, energy, meta = None, (), {"kind": "full", "dim": d}
    x = data
    if dim < d:
        basis = pca_subspace(data, dim)
        chain = ExplicitChain([basis.columns])
        energy = (chain.orthogonal_energy(data, 1),)
        x = chain.project(data, 1)
        meta = {"kind": "pca", "dim": dim, "degenerate": bool(basis.degenerate)}
    net = train(ScoreNet(dim, process, hidden=(width, width), seed=seed), x, process, config)
    return Checkpoint(process, [net], chain, (), energy, meta), net.train_losses


def train_image_model(images, shape: ImageShape, level, process, width=256, config=TrainConfig(), seed=0):
    chain = downsampling_chain(shape, level) if level else None
    x, energy = images, ()
    if level:
        x = chain.project(images, level)
        energy = (chain.orthogonal_energy(images, level),)
    net = train(ScoreNet(x.shape[1], process, hidden=(width, width), seed=seed), x, process, config)
    meta = {"kind": "downsample" if level else "full", "dim": x.shape[1], "level": level}
    return Checkpoint(process, [net], chain, (), energy, meta), net.train_losses


def cell_seed(seed, dim, index):
    return int(np.random.SeedSequence([seed, dim, index]).generate_state(1)[0])


def sample_cell(full, sub, process, t, count, config: SamplerConfig, seed, threads=1):
    """Samples for one sweep cell: ``sub`` is a subspace checkpoint or None."""
    t1 = map_time(t, process)
    if sub is None or t1 is None:
        bank = [full.models[0]]
        sched = SubspaceSchedule(ExplicitChain([], ambient_dim=bank[0].input_dim), process, (), ())
    else:
        bank = [full.models[0], sub.models[0]]
        sched = SubspaceSchedule(sub.chain, process, (t1,), tuple(sub.energies))

    def job(n, rng):
        return sample_subspace_diffusion(bank, sched, config, n, rng)

    return sample_blocks(job, count, seed, threads=threads), sched


def sweep(full, subs, train_points, times, count, config: SamplerConfig, seed=0, threads=1):
    """nn-distance grid over (subspace, transition time).

    ``subs`` maps subspace dimension to checkpoint; the full dimension is
    included as a constant baseline row. Each cell has its own RNG stream.
    """
    process = full.process
    d = full.models[0].input_dim
    rows_spec = [(dim, subs.get(dim)) for dim in sorted(subs)] + [(d, None)]
    cells = [(dim, ck, i, t) for dim, ck in rows_spec for i, t in enumerate(times)]

    def run(cell):
        dim, ck, i, t = cell
        x, _ = sample_cell(full, ck, process, t, count, config, cell_seed(seed, dim, i))
        nn = nn_distances(x, train_points)
        return {"dim": dim, "t": float(t), "nn": float(nn.mean()),
                "se": float(nn.std(ddof=1) / np.sqrt(nn.size)), "count": count}

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(run, cells))
    return [run(c) for c in cells]


SWEEP_HEADER = ("dim", "t", "nn_distance", "se", "count")


def sweep_csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_HEADER)
    for r in rows:
        w.writerow([r["dim"], repr(r["t"]), repr(r["nn"]), repr(r["se"]), r["count"]])
    return buf.getvalue()


def rmsd_table(images, shape: ImageShape):
    """Reconstruction error rows for downsampling, PCA and Patch-PCA at two resolutions."""
    rows = []
    top = pca_subspace(images, downsampling_chain(shape, 1).dims[1])
    for level in (1, 2):
        side = shape.height >> level
        chain = downsampling_chain(shape, level)
        n = chain.dims[level]
        pca = Basis(top.columns[:, :n], top.mean, top.eigenvalues[:n], top.degenerate)
        rows.append(("downsampling", side, n, rmsd_per_dim(images, chain.level(level))))
        rows.append(("pca", side, n, rmsd_per_dim(images, pca)))
        rows.append(("patch-pca", side, n, rmsd_per_dim(images, patch_pca_basis(images, shape, 2**level))))
    return rows


# -------------------------------------------------------------------- commands


def cmd_gen_data(args):
    out = Path(args.out)
    files = [out / "train.sdmx", out / "gmm.sdmx", out / "manifest.json"]
    check_writable(files, args.force)
    spec = SyntheticSpec(dim=args.dim, train_size=args.train_size, seed=args.seed)
    man = RunManifest("gen-data", {"spec": asdict(spec)}, args.seed, outputs=[str(f) for f in files])
    with man.phase("generate"):
        gmm, train_pts, _ = make_synthetic(spec)
    ev = explained_variance(gmm.means)
    report = {f"explained_{n}": float(ev[n - 1]) for n, _ in spec.targets}
    man.results = report
    out.mkdir(parents=True, exist_ok=True)
    save_matrix(files[0], train_pts)
    save_matrix(files[1], gmm_to_matrix(gmm))
    man.write(files[2])
    for n, target in spec.targets:
        print(f"explained variance at {n} PCs: {ev[n - 1]:.4f} (target {target:.2f})")


def cmd_train(args):
    out = Path(args.out)
    loss_path = out.with_name(out.name + ".loss.csv")
    check_writable([out, loss_path, manifest_path(out)], args.force)
    process = process_from(args)
    cfg = TrainConfig(steps=args.train_steps, batch_size=args.batch_size, lr=args.lr, seed=args.seed)
    man = RunManifest("train", {"train": asdict(cfg), "width": args.width, "dim": args.dim,
                                "shape": args.shape, "level": args.level,
                                "process": asdict(process)}, args.seed,
                      inputs=[args.data], outputs=[str(out), str(loss_path)])
    with man.phase("load"):
        if args.shape:
            shape = parse_shape(args.shape)
            data = load_cifar10(args.data, train_only=True)["train"] if Path(args.data).is_dir() \
                else read_points(args.data)
        else:
            data = read_points(args.data)
    with man.phase("train"):
        if args.shape:
            ck, losses = train_image_model(data, shape, args.level, process, args.width, cfg, args.seed)
        else:
            ck, losses = train_model(data, process, args.dim, args.width, cfg, args.seed)
    ck.meta["data"] = str(args.data)
    save_checkpoint(out, ck)
    write_text(loss_path, "step,loss\n" + "".join(f"{i + 1},{v!r}\n" for i, v in enumerate(losses)))
    tail = losses[-max(1, len(losses) // 10):]
    man.results = {"final_loss": float(tail.mean()) if len(tail) else None, "meta": ck.meta}
    man.write(manifest_path(out))


def cmd_sample(args):
    out = Path(args.out)
    check_writable([out, manifest_path(out)], args.force)
    cks, bank, process = load_bank(args.ckpt)
    sched = schedule_from_checkpoints(cks, process, parse_times(args.times))
    cfg = sampler_from(args)
    man = RunManifest("sample", {"sampler": asdict(cfg), "times": list(sched.times), "count": args.count,
                                 "threads": args.threads}, args.seed,
                      inputs=list(args.ckpt), outputs=[str(out)])
    counts = level_step_counts(sched, cfg.num_steps)
    man.results = {"level_steps": counts, "dims": list(sched.chain.dims),
                   "full_dim_fraction": counts[0] / cfg.num_steps}
    with man.phase("sample"):
        x = sample_blocks(lambda n, rng: sample_subspace_diffusion(bank, sched, cfg, n, rng),
                          args.count, args.seed, threads=args.threads)
    save_matrix(out, x)
    man.write(manifest_path(out))
    print(f"{x.shape[0]} samples; predictor steps per level {counts}")


def cmd_sweep(args):
    out = Path(args.out)
    check_writable([out, manifest_path(out)], args.force)
    if args.from_manifest:
        stored = json.loads(Path(args.from_manifest).read_text())
        write_text(out, sweep_csv(stored["results"]["rows"]))
        return
    if not args.data:
        raise UsageError("sweep needs --data (training points for the nn metric)")
    cks, _, process = load_bank(args.ckpt)
    full, subs = cks[0], {}
    for p, c in zip(args.ckpt[1:], cks[1:]):
        if c.chain is None or c.chain.K != 1:
            raise UsageError(f"{p} is not a single-subspace checkpoint")
        subs[c.chain.dims[1]] = c
    times = parse_floats(args.grid or SWEEP_TIMES)
    cfg = sampler_from(args)
    man = RunManifest("sweep", {"sampler": asdict(cfg), "times": times, "count": args.count,
                                "dims": sorted(subs)}, args.seed,
                      inputs=[args.data] + list(args.ckpt), outputs=[str(out)])
    train_pts = read_points(args.data)
    with man.phase("sweep"):
        rows = sweep(full, subs, train_pts, times, args.count, cfg, args.seed, args.threads)
    man.results = {"rows": rows}
    write_text(out, sweep_csv(rows))
    man.write(manifest_path(out))


def divergence_score(args, d):
    if args.zero_score:
        return ZeroScore(d), None
    if args.gmm:
        gmm = gmm_from_matrix(load_matrix(args.gmm))
        return GmmScore(gmm, process_from(args)), process_from(args)
    if not args.ckpt:
        raise UsageError("divergence needs --ckpt (full model), --gmm or --zero-score")
    ck = load_checkpoint(args.ckpt[0])
    return ck.models[0], ck.process


def cmd_divergence(args):
    out = Path(args.out)
    check_writable([out, manifest_path(out)], args.force)
    if Path(args.data).is_dir():
        data = load_cifar10(args.data, train_only=True)["train"]
    else:
        data = read_points(args.data)
    score, process = divergence_score(args, data.shape[1])
    process = process or process_from(args)
    if args.shape:
        shape = parse_shape(args.shape)
        chain = downsampling_chain(shape, args.levels)
    else:
        dims = [int(v) for v in parse_floats(args.dims)] if args.dims else []
        if not dims:
            raise UsageError("give --dims for PCA subspaces or --shape/--levels for images")
        chain = pca_chain(data, dims)
    grid = parse_floats(args.grid) if args.grid else list(DEFAULT_GRID)
    man = RunManifest("divergence", {"grid": grid, "mc": args.mc, "dims": list(chain.dims)}, args.seed,
                      inputs=[args.data] + list(args.ckpt or []), outputs=[str(out)])
    with man.phase("estimate"):
        curves = [divergence_curve(score, chain, k, data, process, grid, args.mc, seed=args.seed + k)
                  for k in range(1, chain.K + 1)]
    buf = io.StringIO(newline="")
    write_curves_csv(buf, curves)
    write_text(out, buf.getvalue())
    if args.threshold is not None:
        man.results["times"] = select_transition_times(curves, args.threshold)
    man.write(manifest_path(out))


def cmd_schedule(args):
    out = Path(args.out)
    check_writable([out], args.force)
    if args.threshold is None:
        raise UsageError("schedule needs --threshold")
    with open(args.curves, newline="") as fh:
        curves = read_curves_csv(fh)
    times = select_transition_times(curves, args.threshold)
    line = ",".join(repr(t) for t in times)
    write_text(out, line + "\n")
    print(line)


def cmd_likelihood(args):
    out = Path(args.out)
    check_writable([out, manifest_path(out)], args.force)
    x = read_points(args.data)
    cfg = OdeConfig(rtol=args.rtol, atol=args.atol, divergence=args.divergence, probes=args.probes,
                    seed=args.seed)
    if args.gmm:
        process = process_from(args)
        bank = [GmmScore(gmm_from_matrix(load_matrix(args.gmm)), process)]
        sched = SubspaceSchedule(ExplicitChain([], ambient_dim=x.shape[1]), process, (), ())
    else:
        cks, bank, process = load_bank(args.ckpt)
        sched = schedule_from_checkpoints(cks, process, parse_times(args.times))
    man = RunManifest("likelihood", {"ode": asdict(cfg), "times": list(sched.times)}, args.seed,
                      inputs=[args.data] + list(args.ckpt or []), outputs=[str(out)])
    with man.phase("integrate"):
        res = log_likelihood(bank, sched, cfg, x)
    lines = ["index,logp,nats_per_dim,bits_per_dim\n"]
    lines += [f"{i},{float(a)!r},{float(b)!r},{float(c)!r}\n" for i, (a, b, c) in
              enumerate(zip(res.logp, res.nats_per_dim, res.bits_per_dim))]
    write_text(out, "".join(lines))
    man.results = {"mean_bits_per_dim": float(res.bits_per_dim.mean()),
                   "mean_nats_per_dim": float(res.nats_per_dim.mean()), "nfev": int(res.nfev)}
    man.write(manifest_path(out))
    print(f"mean {res.nats_per_dim.mean():.5f} nats/dim, {res.bits_per_dim.mean():.5f} bits/dim")


def cmd_rmsd_table(args):
    out = Path(args.out)
    check_writable([out, manifest_path(out)], args.force)
    shape = parse_shape(args.shape)
    man = RunManifest("rmsd-table", {"shape": args.shape}, None, inputs=[args.data], outputs=[str(out)])
    with man.phase("load"):
        if Path(args.data).is_dir():
            images = load_cifar10(args.data, train_only=True)["train"]
        else:
            images = read_points(args.data)
    if images.shape[1] != shape.size:
        raise UsageError(f"images have {images.shape[1]} values, shape {args.shape} needs {shape.size}")
    with man.phase("table"):
        rows = rmsd_table(images, shape)
    write_text(out, "method,resolution,dims,rmsd_per_dim\n"
               + "".join(f"{m},{s},{n},{float(v)!r}\n" for m, s, n, v in rows))
    man.results = {"rows": [list(r) for r in rows]}
    man.write(manifest_path(out))
    for m, s, n, v in rows:
        print(f"{m:>13} {s:>3}x{s:<3} {v:.4f}")


# ----------------------------------------------------------------------- parser


def build_parser():
    p = argparse.ArgumentParser(prog="subdiff", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--out", required=True)
        sp.add_argument("--force", action="store_true", help="overwrite existing outputs")
        if seed:
            sp.add_argument("--seed", type=int, default=0)

    def proc_flags(sp):
        sp.add_argument("--sigma-min", type=float, default=0.01)
        sp.add_argument("--sigma-max", type=float, default=13.0)

    def sampler_flags(sp):
        sp.add_argument("--steps", type=int, default=100)
        sp.add_argument("--snr", type=float, default=0.2)
        sp.add_argument("--langevin-n", type=int, default=2)
        sp.add_argument("--threads", type=int, default=1)

    sp = sub.add_parser("gen-data", help="synthetic mixture dataset")
    common(sp)
    sp.add_argument("--dim", type=int, default=30)
    sp.add_argument("--train-size", type=int, default=64000)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="train one score model")
    common(sp)
    proc_flags(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--dim", type=int, help="PCA subspace dimension (default: full)")
    sp.add_argument("--shape", help="image shape HxWxC; selects downsampling subspaces")
    sp.add_argument("--level", type=int, default=0, help="downsampling level with --shape")
    sp.add_argument("--width", type=int, default=256)
    sp.add_argument("--train-steps", type=int, default=TrainConfig.steps)
    sp.add_argument("--batch-size", type=int, default=512)
    sp.add_argument("--lr", type=float, default=1e-3)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("sample", help="subspace diffusion sampling")
    common(sp)
    sampler_flags(sp)
    sp.add_argument("--ckpt", action="append", required=True, help="repeat, full model first")
    sp.add_argument("--times", help="t_1..t_K as a list or a schedule file")
    sp.add_argument("--count", type=int, default=1000)
    sp.set_defaults(func=cmd_sample)

    sp = sub.add_parser("sweep", help="nn-distance grid over subspace dims and transition times")
    common(sp)
    sampler_flags(sp)
    sp.add_argument("--data")
    sp.add_argument("--ckpt", action="append", default=[])
    sp.add_argument("--grid", help=f"transition times (default {SWEEP_TIMES})")
    sp.add_argument("--count", type=int, default=SWEEP_COUNT)
    sp.add_argument("--from-manifest", help="re-emit the CSV stored in a sweep manifest")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("divergence", help="orthogonal Fisher divergence curves")
    common(sp)
    proc_flags(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--ckpt", action="append", default=[])
    sp.add_argument("--gmm", help="analytic mixture oracle instead of a trained model")
    sp.add_argument("--zero-score", action="store_true", help="zero-score baseline")
    sp.add_argument("--dims", help="nested PCA subspace dims, largest first")
    sp.add_argument("--shape")
    sp.add_argument("--levels", type=int, default=2)
    sp.add_argument("--grid")
    sp.add_argument("--mc", type=int, default=DEFAULT_MC)
    sp.add_argument("--threshold", type=float)
    sp.set_defaults(func=cmd_divergence)

    sp = sub.add_parser("schedule", help="transition times from divergence curves")
    common(sp, seed=False)
    sp.add_argument("--curves", required=True)
    sp.add_argument("--threshold", type=float)
    sp.set_defaults(func=cmd_schedule)

    sp = sub.add_parser("likelihood", help="probability-flow log-likelihoods")
    common(sp)
    proc_flags(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--ckpt", action="append", default=[])
    sp.add_argument("--gmm")
    sp.add_argument("--times")
    sp.add_argument("--rtol", type=float, default=1e-5)
    sp.add_argument("--atol", type=float, default=1e-5)
    sp.add_argument("--divergence", choices=("auto", "exact", "hutchinson"), default="auto")
    sp.add_argument("--probes", type=int, default=1)
    sp.set_defaults(func=cmd_likelihood)

    sp = sub.add_parser("rmsd-table", help="subspace reconstruction errors")
    common(sp, seed=False)
    sp.add_argument("--data", required=True, help="CIFAR-10 binary directory or image matrix")
    sp.add_argument("--shape", default="32x32x3")
    sp.set_defaults(func=cmd_rmsd_table)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except (TrainingDiverged, IntegrationError, ThresholdUnattainable, FloatingPointError) as exc:
        print(f"subdiff: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, FormatError) as exc:
        print(f"subdiff: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"subdiff: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return 0


if __name__ == "__main__":
    sys.exit(main())
