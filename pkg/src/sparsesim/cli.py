"""Command line entry point: train, simulate, balance-report and csb tools.

Every flag mirrors a :class:`RunConfig` field; a JSON ``--config`` file
overrides flags.  Relative paths resolve against ``--root``.  Each command
writes CSV files and a ``manifest.json`` atomically into its output
directory.

Exit codes: 0 success, 2 configuration error, 3 runtime or model error.
"""

from __future__ import annotations

import argparse
import hashlib
import io
import json
import os
import sys
import tempfile
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import __version__, balance, costmodel, csb, refnet, sparsetrain
from .workload import PHASES, Network, Phase, resolve_network

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


class ConfigError(ValueError):
    pass


class RuntimeFailure(RuntimeError):
    pass


@dataclass(frozen=True)
class RunConfig:
    network: str = "toy"
    sparsity: float = 5.0  # target weight sparsity factor; 1 trains dense
    lam: float = sparsetrain.DEFAULT_DECAY
    cutoff: int = sparsetrain.DEFAULT_CUTOFF
    batch: int = 32
    seed: int = 7
    iterations: int = 2000
    eta: float = 0.2
    eval_every: int = 100
    snapshot_every: int = 500
    oracle: bool = False
    qe_width: int = 1
    dataset: str | None = None
    array: str = "16x16"
    mappings: str = "KN"
    energy: str | None = None
    masks: str | None = None
    scale_to: str | None = None
    bin_width: float = 0.05
    out: str = "out"

    def validate(self) -> None:
        if self.sparsity < 1.0:
            raise ConfigError("sparsity is a factor and must be >= 1")
        if not 0.0 < self.lam <= 1.0:
            raise ConfigError("lam must lie in (0, 1]")
        for name in ("cutoff", "batch", "iterations", "eval_every", "snapshot_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.qe_width not in (1, 4):
            raise ConfigError("qe_width must be 1 or 4")
        if self.eta <= 0:
            raise ConfigError("eta must be positive")
        if self.bin_width <= 0:
            raise ConfigError("bin_width must be positive")
        mapping_list(self.mappings)
        for text in (self.array, self.scale_to):
            if text is not None:
                try:
                    costmodel.ArrayConfig.parse(text)
                except ValueError as exc:
                    raise ConfigError(str(exc)) from None

    def canonical(self) -> str:
        """Sorted compact JSON of every input; the output location is not an input."""
        body = asdict(self)
        body.pop("out")
        return json.dumps(body, sort_keys=True, separators=(",", ":"))

    def sha256(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()


CONFIG_FIELDS = {f.name: f for f in fields(RunConfig)}


def mapping_list(text: str) -> list[str]:
    if text == "all":
        return list(costmodel.MAPPING_NAMES)
    names = [t.strip() for t in text.split(",") if t.strip()]
    bad = [n for n in names if n not in costmodel.MAPPINGS]
    if not names or bad:
        raise ConfigError(f"unknown mapping(s) {bad or text!r}; choose from {list(costmodel.MAPPING_NAMES)} or all")
    return names


# -- files -------------------------------------------------------------------


def atomic_write(path: Path, data: bytes | str) -> None:
    """Write to a temporary file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode()
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _num(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.9g}"
    return str(v)


def csv_text(header: list[str], rows) -> str:
    lines = [",".join(header)]
    lines += [",".join(_num(v) for v in row) for row in rows]
    return "\n".join(lines) + "\n"


class Outputs:
    """Collects written files so the manifest can list their digests."""

    def __init__(self, root: Path):
        self.root = root
        self.files: dict[str, str] = {}

    def write(self, rel: str, data: bytes | str) -> Path:
        path = self.root / rel
        atomic_write(path, data)
        raw = data.encode() if isinstance(data, str) else data
        self.files[rel] = hashlib.sha256(raw).hexdigest()
        return path

    def manifest(self, command: str, cfg: RunConfig, seeds: dict, extra: dict | None = None) -> None:
        body = {
            "tool": "sparsesim",
            "version": __version__,
            "command": command,
            "config": asdict(cfg),
            "config_sha256": cfg.sha256(),
            "seeds": seeds,
            "outputs": dict(sorted(self.files.items())),
        }
        if extra:
            body.update(extra)
        atomic_write(self.root / "manifest.json", json.dumps(body, indent=2, sort_keys=True) + "\n")


# -- configuration -------------------------------------------------------------


def _resolve(root: Path, p: str | None) -> Path | None:
    if p is None:
        return None
    path = Path(p)
    return path if path.is_absolute() else root / path


def build_config(args: argparse.Namespace) -> RunConfig:
    values = {k: getattr(args, k) for k in CONFIG_FIELDS if getattr(args, k, None) is not None}
    if args.config:
        path = _resolve(Path(args.root), args.config)
        try:
            with open(path) as fh:
                data = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = sorted(set(data) - set(CONFIG_FIELDS))
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        values.update(data)
    try:
        cfg = RunConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    cfg.validate()
    return cfg


def _network(cfg: RunConfig, root: Path) -> Network:
    spec = cfg.network
    if spec not in ("toy", "vgg-mini"):
        spec = str(_resolve(root, spec))
        if not Path(spec).is_file():
            raise ConfigError(f"network file not found: {spec}")
    try:
        return resolve_network(spec, cfg.batch)
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"bad network {cfg.network!r}: {exc}") from None


def _energy(cfg: RunConfig, root: Path) -> costmodel.EnergyTable:
    if cfg.energy is None:
        return costmodel.EnergyTable()
    path = _resolve(root, cfg.energy)
    try:
        return costmodel.EnergyTable.load(path)
    except FileNotFoundError:
        raise ConfigError(f"energy table not found: {path}") from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad energy table {path}: {exc}") from None


# -- train ---------------------------------------------------------------------


def _train_config(cfg: RunConfig, root: Path) -> refnet.TrainConfig:
    return refnet.TrainConfig(
        network=cfg.network if cfg.network in ("toy", "vgg-mini") else str(_resolve(root, cfg.network)),
        target_density=1.0 / cfg.sparsity,
        lam=cfg.lam,
        cutoff=cfg.cutoff,
        batch=cfg.batch,
        seed=cfg.seed,
        eta=cfg.eta,
        iterations=cfg.iterations,
        eval_every=cfg.eval_every,
        snapshot_every=cfg.snapshot_every,
        oracle=cfg.oracle,
        qe_width=cfg.qe_width,
        dataset=None if cfg.dataset is None else str(_resolve(root, cfg.dataset)),
    )


def snapshot_dir(t: int) -> str:
    return f"masks/iter{t:06d}"


def cmd_train(cfg: RunConfig, root: Path, quiet: bool = False) -> int:
    tcfg = _train_config(cfg, root)
    if tcfg.dataset and not Path(tcfg.dataset).is_file():
        raise ConfigError(f"dataset not found: {tcfg.dataset}")
    out = Outputs(_resolve(root, cfg.out))

    def progress(it, loss, acc, density):
        if not quiet:
            print(f"iter {it:6d}  loss {loss:.4f}  val_acc {acc:.4f}  density {density:.4f}", file=sys.stderr)

    try:
        result = refnet.run_training(tcfg, progress)
    except refnet.TrainingDiverged as exc:
        raise RuntimeFailure(str(exc)) from None
    out.write("accuracy.csv", csv_text(["iteration", "val_accuracy"], result.accuracy))
    rows = [(s.t, loss, s.density, s.threshold, s.inserted, s.evicted, s.overlap)
            for s, loss in zip(result.steps, result.losses)]
    out.write("training.csv", csv_text(
        ["iteration", "loss", "density", "threshold", "inserted", "evicted", "overlap"], rows))
    out.write("act_density.csv", csv_text(["layer", "mean_density"], sorted(result.act_density.items())))
    for snap in result.snapshots:
        base = snapshot_dir(snap.t)
        for name, t in snap.weights.items():
            out.write(f"{base}/{name}.csb", csb.to_bytes(t))
        for name, t in snap.iacts.items():
            out.write(f"{base}/{name}.iact.csb", csb.to_bytes(t))
    out.write("checkpoint.ckpt", sparsetrain.checkpoint_bytes(result.state, cfg.sha256()))
    out.manifest("train", cfg, {"run": cfg.seed, "data": cfg.seed, "batch_order": cfg.seed + 1},
                 {"final_accuracy": result.final_accuracy, "final_density": result.state.density})
    if not quiet:
        print(f"final val accuracy {result.final_accuracy:.4f}, density {result.state.density:.6f}")
    return EXIT_OK


# -- mask loading ----------------------------------------------------------------


def find_snapshot(path: Path) -> Path:
    """A directory of .csb files, or a train output whose latest snapshot is used."""
    if not path.exists():
        raise ConfigError(f"mask path not found: {path}")
    if path.is_dir() and (path / "masks").is_dir():
        snaps = sorted(p for p in (path / "masks").iterdir() if p.is_dir())
        if not snaps:
            raise RuntimeFailure(f"no snapshots under {path / 'masks'}")
        return snaps[-1]
    return path


def _load_csb(path: Path) -> csb.CsbTensor:
    try:
        return csb.load(path)
    except csb.CsbError as exc:
        raise RuntimeFailure(f"{path}: {exc}") from None


def load_masks(path: Path, net: Network) -> tuple[dict, dict]:
    """Weight and input-activation tensors per weighted layer."""
    weights, acts = {}, {}
    for layer in net.weighted_layers:
        wpath = path / f"{layer.name}.csb"
        if not wpath.is_file():
            raise RuntimeFailure(f"mask/network mismatch: no weights for layer {layer.name} in {path}")
        w = _load_csb(wpath)
        if tuple(w.dense_shape) != layer.weight_shape:
            raise RuntimeFailure(
                f"mask/network mismatch: {layer.name} mask has shape {w.dense_shape}, layer needs {layer.weight_shape}")
        weights[layer.name] = w
        apath = path / f"{layer.name}.iact.csb"
        if apath.is_file():
            a = _load_csb(apath)
            want = (layer.N, layer.C, layer.X, layer.Y)
            if int(np.prod(a.dense_shape)) != int(np.prod(want)):
                raise RuntimeFailure(
                    f"mask/network mismatch: {layer.name} activations {a.dense_shape} vs layer {want}")
            acts[layer.name] = a
    return weights, acts


def _masks_for(cfg: RunConfig, root: Path, net: Network):
    if cfg.masks is None:
        return None, {}, {}
    snap = find_snapshot(_resolve(root, cfg.masks))
    weights, acts = load_masks(snap, net)
    return snap, weights, acts


# -- simulate -------------------------------------------------------------------


def cmd_simulate(cfg: RunConfig, root: Path, quiet: bool = False) -> int:
    net = _network(cfg, root)
    energy = _energy(cfg, root)
    array = costmodel.ArrayConfig.parse(cfg.array)
    snap, weights, acts = _masks_for(cfg, root, net)
    out = Outputs(_resolve(root, cfg.out))
    names = mapping_list(cfg.mappings)
    base_name, base = costmodel.dense_baseline(net, energy, array)

    latency, breakdown, flows = [], [], []
    summary = []
    results = {}
    for name in names:
        for balanced in (True, False):
            cost = costmodel.network_cost(net, name, weights, acts, energy, array, balanced)
            results[(name, balanced)] = cost
            for r in cost.rows:
                latency.append((r.layer, r.phase.value, name, balanced, r.waves, r.cycles, r.dense_cycles,
                                r.dense_cycles / r.cycles if r.cycles else 1.0))
                e = r.energy
                breakdown.append((r.layer, r.phase.value, name, balanced, e["mac"], e["rf"], e["glb"], e["dram"],
                                  r.total_energy))
                flows.append((r.layer, r.phase.value, name, balanced, r.mode or "",
                              int(r.trace.multicast.sum()), int(r.trace.unicast.sum())))
            summary.append((name, balanced, cost.cycles(), cost.energy(),
                            base.cycles() / cost.cycles(), base.energy() / cost.energy()))
    out.write("latency.csv", csv_text(
        ["layer", "phase", "mapping", "balanced", "waves", "cycles", "dense_cycles", "speedup"], latency))
    out.write("energy.csv", csv_text(
        ["layer", "phase", "mapping", "balanced", "e_mac_pj", "e_rf_pj", "e_glb_pj", "e_dram_pj", "e_total_pj"],
        breakdown))
    out.write("traffic.csv", csv_text(
        ["layer", "phase", "mapping", "balanced", "mode", "multicast_flows", "unicast_messages"], flows))
    out.write("dataflow.csv", csv_text(
        ["mapping", "balanced", "cycles", "energy_pj", "speedup_vs_dense", "energy_reduction_vs_dense"], summary))

    # ideal bound on the first requested mapping's balanced run
    ref = results[(names[0], True)]
    densities = {n: (weights[n].density if n in weights else 1.0) for n in (l.name for l in net.weighted_layers)}
    sparsity = {n: 1.0 / d if d > 0 else float("inf") for n, d in densities.items()}
    act_d = {l.name: costmodel.wu_operand_density(l, acts.get(l.name, 1.0)) for l in net.weighted_layers}
    ideal = costmodel.ideal_cost(net, {n: min(s, 1e12) for n, s in sparsity.items()}, energy, array, act_d)
    irows = []
    for r in ref.rows:
        key = (r.layer, r.phase.value)
        ic, ie = ideal.cycles[key], ideal.energy[key]
        irows.append((r.layer, r.phase.value, names[0], ic, r.cycles, r.cycles / ic if ic else 1.0,
                      ie, r.total_energy, r.total_energy / ie if ie else 1.0))
    out.write("ideal.csv", csv_text(
        ["layer", "phase", "mapping", "ideal_cycles", "cycles", "cycles_over_ideal", "ideal_energy_pj",
         "energy_pj", "energy_over_ideal"], irows))

    if cfg.scale_to:
        big = costmodel.ArrayConfig.parse(cfg.scale_to)
        srows = []
        for name in names:
            scaled = costmodel.network_cost(net, name, weights, acts, energy, big, True, trace=False)
            for a, b in zip(results[(name, True)].rows, scaled.rows):
                srows.append((a.layer, a.phase.value, name, cfg.array, cfg.scale_to, a.cycles, b.cycles,
                              a.cycles / b.cycles if b.cycles else 1.0))
        out.write("scaling.csv", csv_text(
            ["layer", "phase", "mapping", "array", "scaled_array", "cycles", "scaled_cycles", "speedup"], srows))

    extra = {"dense_baseline_mapping": base_name, "energy_table": energy.to_dict(),
             "masks": None if snap is None else str(snap)}
    out.manifest("simulate", cfg, {"run": cfg.seed}, extra)
    if not quiet:
        for name, balanced, cyc, en, sp, er in summary:
            tag = "balanced" if balanced else "unbalanced"
            print(f"{name:3s} {tag:10s} cycles {cyc:12.0f}  energy {en / 1e6:10.2f} uJ  "
                  f"speedup {sp:5.2f}x  energy reduction {er:5.2f}x")
    return EXIT_OK


# -- balance report -----------------------------------------------------------------


def cmd_balance_report(cfg: RunConfig, root: Path, quiet: bool = False) -> int:
    net = _network(cfg, root)
    array = costmodel.ArrayConfig.parse(cfg.array)
    if cfg.masks is None:
        raise ConfigError("balance-report needs --masks")
    snap, weights, acts = _masks_for(cfg, root, net)
    out = Outputs(_resolve(root, cfg.out))
    rows, before, after = [], [], []
    for name in mapping_list(cfg.mappings):
        for layer in net.weighted_layers:
            mapping = costmodel.best_mapping(layer, name, array)
            if not mapping.feasible:
                continue
            for ph in PHASES:
                split, mode = costmodel.BALANCE_PLAN[(name, ph.value)]
                if split is None or mode == "cross" or mapping.tiles[split] < 2:
                    continue
                waves = costmodel.balance_waves(layer, mapping, ph, weights.get(layer.name),
                                                acts.get(layer.name, 1.0))
                for i, w in enumerate(waves):
                    u, b = balance.wave_overhead(w, False), balance.wave_overhead(w, True)
                    before.append(u)
                    after.append(b)
                    rows.append((layer.name, ph.value, name, i, u, b))
    if not rows:
        raise RuntimeFailure("no balanced waves: no layer has a row or column balancing plan")
    hb = balance.histogram(before, cfg.bin_width)
    ha = balance.histogram(after, cfg.bin_width)
    out.write("waves.csv", csv_text(["layer", "phase", "mapping", "wave", "overhead_unbalanced",
                                     "overhead_balanced"], rows))
    out.write("histogram_unbalanced.csv", hb.to_csv())
    out.write("histogram_balanced.csv", ha.to_csv())
    stats = []
    for tag, vals in (("unbalanced", before), ("balanced", after)):
        v = np.asarray(vals)
        stats.append((tag, v.size, v.max(), float(np.median(v)), float(np.mean(v < 0.10))))
    out.write("summary.csv", csv_text(["population", "waves", "max_overhead", "median_overhead",
                                       "fraction_below_0.10"], stats))
    out.manifest("balance-report", cfg, {"run": cfg.seed}, {"masks": str(snap)})
    if not quiet:
        for tag, n, mx, med, frac in stats:
            print(f"{tag:10s} waves {n:5d}  max {mx:.3f}  median {med:.3f}  below 0.10 {frac:.1%}")
    return EXIT_OK


# -- csb utility ---------------------------------------------------------------------


def _parse_block(text: str) -> csb.BlockShape:
    try:
        r, c = (int(v) for v in text.lower().split("x"))
        return csb.BlockShape(r, c)
    except ValueError as exc:
        raise ConfigError(f"block must look like 3x3: {exc}") from None


def cmd_csb(args: argparse.Namespace, root: Path) -> int:
    src = _resolve(root, args.input)
    if not src.is_file():
        raise ConfigError(f"input not found: {src}")
    if args.action == "inspect":
        t = csb.load(src)
        info = {"shape": list(t.dense_shape), "block": [t.block.rows, t.block.cols], "blocks": t.num_blocks,
                "nnz": t.nnz, "density": t.density, "storage_bytes": t.storage_bytes(),
                "dense_bytes": t.dense_bytes()}
        print(json.dumps(info, sort_keys=True))
        return EXIT_OK
    if args.output is None:
        raise ConfigError(f"csb {args.action} needs --output")
    dst = _resolve(root, args.output)
    if args.action == "encode":
        try:
            dense = np.load(src, allow_pickle=False)
        except ValueError as exc:
            raise RuntimeFailure(f"cannot read {src} as .npy: {exc}") from None
        if dense.ndim < 2:
            raise RuntimeFailure("CSB needs at least a 2-D tensor")
        if args.block:
            block = _parse_block(args.block)
        elif dense.ndim == 4 and dense.shape[2] * dense.shape[3] <= csb.MASK_BITS:
            block = csb.weight_block("conv", dense.shape)
        else:
            block = csb.BlockShape(min(dense.shape[-2], 8), min(dense.shape[-1], 8))
        atomic_write(dst, csb.to_bytes(csb.encode(dense.astype(np.float32), block)))
    else:
        buf = io.BytesIO()
        np.save(buf, csb.decode(csb.load(src)), allow_pickle=False)
        atomic_write(dst, buf.getvalue())
    return EXIT_OK


# -- argument parsing ---------------------------------------------------------------


def _add_run_flags(p: argparse.ArgumentParser, names: list[str]) -> None:
    """Flags default to None so only explicitly given ones reach RunConfig."""
    helps = {
        "network": "preset name (toy, vgg-mini) or network JSON path",
        "sparsity": "target weight sparsity factor (1 = dense)",
        "lam": "decay factor for untracked weights (1 disables decay)",
        "cutoff": "iteration from which untracked weights are exactly zero",
        "batch": "minibatch size N",
        "seed": "run seed",
        "iterations": "training iterations",
        "eta": "initial learning rate",
        "eval_every": "validation interval",
        "snapshot_every": "mask snapshot interval",
        "oracle": "record the per-iteration sort oracle overlap",
        "qe_width": "quantile-estimator updates per cycle (1 or 4)",
        "dataset": "optional .npz with images and labels",
        "array": "PE array, e.g. 16x16",
        "mappings": "mapping name, comma list, or all",
        "energy": "energy table JSON",
        "masks": "snapshot directory or train output directory",
        "scale_to": "second array size for a scaling report, e.g. 32x32",
        "bin_width": "histogram bin width",
        "out": "output directory",
    }
    for name in names:
        f = CONFIG_FIELDS[name]
        flag = "--" + name.replace("_", "-")
        if name == "network":
            p.add_argument("--preset", "--network", dest="network", help=helps[name])
        elif f.type in ("bool", bool):
            p.add_argument(flag, dest=name, action="store_const", const=True, help=helps[name])
        else:
            kind = {"float": float, "int": int}.get(str(f.type), str)
            p.add_argument(flag, dest=name, type=kind, help=helps[name])


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--root", default=argparse.SUPPRESS, help="workspace root for relative paths")
    common.add_argument("--config", default=argparse.SUPPRESS, help="JSON config file; its values override flags")
    common.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS)
    # global flags may also follow the subcommand; the subparser copies
    # use SUPPRESS so they only override what was actually given
    p = argparse.ArgumentParser(prog="sparsesim", description=__doc__.splitlines()[0])
    p.add_argument("--root", default=".", help="workspace root for relative paths")
    p.add_argument("--config", help="JSON config file; its values override flags")
    p.add_argument("--quiet", action="store_true")
    p.add_argument("--version", action="version", version=f"sparsesim {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", parents=[common],
                           help="train the reference network with sparse weight selection")
    _add_run_flags(train, ["network", "sparsity", "lam", "cutoff", "batch", "seed", "iterations", "eta",
                           "eval_every", "snapshot_every", "oracle", "qe_width", "dataset", "out"])
    sim = sub.add_parser("simulate", parents=[common], help="cycles and energy of training on the PE array")
    _add_run_flags(sim, ["network", "batch", "seed", "array", "mappings", "energy", "masks", "scale_to", "out"])
    bal = sub.add_parser("balance-report", parents=[common], help="per-wave imbalance histograms before and after balancing")
    _add_run_flags(bal, ["network", "batch", "seed", "array", "mappings", "masks", "bin_width", "out"])

    tool = sub.add_parser("csb", parents=[common], help="encode, decode or inspect CSB files")
    tool.add_argument("action", choices=["encode", "decode", "inspect"])
    tool.add_argument("--input", required=True, help=".npy for encode, .csb otherwise")
    tool.add_argument("--output", help="destination file")
    tool.add_argument("--block", help="block shape for encode, e.g. 3x3")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors with code 2
        return int(exc.code) if isinstance(exc.code, int) else EXIT_CONFIG
    root = Path(args.root)
    try:
        if not root.is_dir():
            raise ConfigError(f"workspace root is not a directory: {root}")
        if args.command == "csb":
            return cmd_csb(args, root)
        cfg = build_config(args)
        handler = {"train": cmd_train, "simulate": cmd_simulate, "balance-report": cmd_balance_report}
        return handler[args.command](cfg, root, args.quiet)
    except ConfigError as exc:
        print(f"sparsesim: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RuntimeFailure, csb.CsbError, costmodel.InfeasibleMapping, ValueError, OSError) as exc:
        print(f"sparsesim: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
