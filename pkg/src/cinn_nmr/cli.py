"""Command-line entry point: ``cinn-nmr <command> [flags]``.

Text input formats for ``encode`` (one molecule per line, ``#`` comments)::

    bonds:  <molecule_id>; <i>-<j>-<order>[a]; ...      e.g.  7; 0-1-1; 1-2-2a
    peaks:  <molecule_id>; <spectrum_id>; <ppm>, <ppm>, ...
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import chemdata, evaluate, gradcheck
from .checkpoint import CheckpointError, atomic_write_bytes, load_checkpoint, save_checkpoint
from .chemdata import Bond, BondList, DatasetFormatError, EncodingError
from .invnet import InvertibleNet, LatentSplit, merge_latent, sample_zfree, split_latent
from .loss import LossWeights
from .numeric import RngStream, no_grad
from .train import TrainConfig, TrainingAborted, fit, split_dataset, write_epoch_logs

log = logging.getLogger("cinn_nmr")


class CliError(Exception):
    pass


def _echo_config(command: str, args: argparse.Namespace) -> None:
    cfg = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "command")}
    print(json.dumps({"command": command, **cfg}, default=str, sort_keys=True), file=sys.stderr)


def _write_text(path, text: str) -> None:
    if path is None or str(path) == "-":
        sys.stdout.write(text)
    else:
        atomic_write_bytes(path, text.encode())


# --------------------------------------------------------------------------
# encode


def _data_lines(path: Path):
    with open(path, encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if line:
                yield line_no, line


def parse_bond_line(line: str) -> tuple[int, BondList]:
    fields = [f.strip() for f in line.split(";")]
    mol_id = int(fields[0])
    bonds = []
    for tup in filter(None, fields[1:]):
        aromatic = tup.endswith("a")
        parts = tup.rstrip("a").split("-")
        if len(parts) != 3:
            raise ValueError(f"bond tuple {tup!r} is not i-j-order[a]")
        i, j, order = (int(p) for p in parts)
        if order not in (1, 2, 3):
            raise ValueError(f"bond tuple {tup!r} has order {order}, expected 1, 2 or 3")
        bonds.append(Bond(i, j, order, aromatic))
    return mol_id, BondList(bonds)


def parse_peak_line(line: str) -> tuple[int, int, list[float]]:
    fields = [f.strip() for f in line.split(";")]
    if len(fields) != 3:
        raise ValueError("peak line must be '<molecule_id>; <spectrum_id>; <shifts>'")
    shifts = [float(s) for s in fields[2].split(",") if s.strip()]
    return int(fields[0]), int(fields[1]), shifts


def cmd_encode(args) -> int:
    bonds: list[tuple[int, BondList]] = []
    for line_no, line in _data_lines(args.bonds):
        try:
            bonds.append(parse_bond_line(line))
        except (ValueError, EncodingError) as exc:
            raise CliError(f"{args.bonds}:{line_no}: {exc}") from None
    peaks: dict[int, tuple[int, list[float]]] = {}
    for line_no, line in _data_lines(args.peaks):
        try:
            mol_id, spec_id, shifts = parse_peak_line(line)
            chemdata.bin_peaks(shifts)
        except (ValueError, EncodingError) as exc:
            raise CliError(f"{args.peaks}:{line_no}: {exc}") from None
        peaks[mol_id] = (spec_id, shifts)
    rows = []
    for mol_id, bl in bonds:
        if mol_id not in peaks:
            raise CliError(f"{args.peaks}: no peak line for molecule {mol_id}")
        spec_id, shifts = peaks[mol_id]
        rows.append(chemdata.make_row(mol_id, spec_id, bl, shifts))
    _write_text(args.out, chemdata.format_dataset(rows))
    return 0


# --------------------------------------------------------------------------
# data/model helpers


def _load_rows(args) -> list[chemdata.DatasetRow]:
    try:
        rows = chemdata.read_dataset(args.data, header=args.header, split_bond_cells=args.split_bond_cells)
    except DatasetFormatError as exc:
        raise CliError(f"{args.data}: {exc}") from None
    if not rows:
        raise CliError(f"{args.data}: no data rows")
    return rows


def _load_net(path) -> InvertibleNet:
    try:
        return InvertibleNet.from_state_dict(load_checkpoint(path))
    except (CheckpointError, OSError) as exc:
        raise CliError(f"{path}: {exc}") from None


def _eval_rows(args, rows):
    if args.all_rows:
        return rows
    return split_dataset(rows, args.split, args.seed)[1]


# --------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    _write_text(args.out, chemdata.format_dataset(chemdata.synth_dataset(args.n, args.seed)))
    return 0


def cmd_train(args) -> int:
    rows = _load_rows(args)
    config = TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        learning_rate=args.lr,
        split_fraction=args.split,
        seed=args.seed,
        weights=LossWeights(args.w_y, args.w_range, args.w_sparse, args.w_forbidden, args.w_zfree),
        blocks_per_stage=args.blocks,
        pos_weight=args.pos_weight,
    )
    try:
        net, logs = fit(rows, config)
    except TrainingAborted as exc:
        save_checkpoint(exc.net, args.out)
        if args.log:
            write_epoch_logs(exc.logs, args.log)
        raise CliError(f"training aborted, last good parameters saved to {args.out}: {exc}") from None
    save_checkpoint(net, args.out)
    if args.log:
        write_epoch_logs(logs, args.log)
    for entry in logs:
        print(f"epoch {entry.epoch}: f1={entry.f1_val:.4f} loss_y={entry.loss_y_train:.4f}/{entry.loss_y_val:.4f}")
    return 0


def cmd_predict(args) -> int:
    net = _load_net(args.checkpoint)
    rows = _load_rows(args)
    x, codes = chemdata.rows_to_arrays(rows)
    with no_grad():
        logits = net.forward(x).data[:, : chemdata.N_CODE]
    pred = evaluate.binarize_logits(logits)
    lines = [f"{r.molecule_id},{r.spectrum_id},{''.join(map(str, p.tolist()))}\n" for r, p in zip(rows, pred)]
    _write_text(args.out, "".join(lines))
    if args.report:
        k = min(args.report, len(rows))
        report = evaluate.code_report(net, x, codes, [r.molecule_id for r in rows], k)
        _write_text(args.report_out, report)
    return 0


def _format_bonds(bl: BondList) -> str:
    return "; ".join(f"{b.i}-{b.j}-{b.order}{'a' if b.aromatic else ''}" for b in bl)


def cmd_invert(args) -> int:
    net = _load_net(args.checkpoint)
    if args.samples < 1:
        raise CliError("--samples must be >= 1")
    if args.data is not None and args.row is not None:
        rows = _load_rows(args)
        if not 0 <= args.row < len(rows):
            raise CliError(f"--row {args.row} outside 0..{len(rows) - 1}")
        x, _ = chemdata.rows_to_arrays(rows[args.row : args.row + 1])
        with no_grad():
            latents = np.repeat(net.forward(x).data, args.samples, axis=0)
        code_text = "".join(map(str, rows[args.row].code.tolist()))
    else:
        if args.code is None:
            raise CliError("either --code or --data with --row is required")
        code_text = args.code.strip()
        if len(code_text) != chemdata.N_CODE or set(code_text) - {"0", "1"}:
            raise CliError(f"--code must be {chemdata.N_CODE} characters of 0/1")
        code = np.frombuffer(code_text.encode(), dtype=np.uint8) - ord("0")
        codes = np.repeat(code[None].astype(net.dtype), args.samples, axis=0)
        z = sample_zfree(RngStream(args.seed), args.samples, dtype=net.dtype)
        latents = merge_latent(LatentSplit(codes, z))
    with no_grad():
        recon = net.inverse(latents).data
    candidates = []
    for k, xk in enumerate(recon):
        bl = chemdata.channels_to_bonds(xk)
        candidates.append(
            {
                "index": k,
                "n_bonds": len(bl),
                "bonds": _format_bonds(bl),
                "channels": np.round(xk.astype(np.float64), 6).tolist(),
            }
        )
    doc = {"code": code_text, "seed": args.seed, "candidates": candidates}
    _write_text(args.out, json.dumps(doc) + "\n")
    for c in candidates:
        print(f"candidate {c['index']}: {c['n_bonds']} bonds: {c['bonds']}", file=sys.stderr)
    return 0


def _perturbation_config(args, eps: float) -> evaluate.PerturbationConfig:
    return evaluate.PerturbationConfig(epsilon=eps, n_noise=args.n_noise, n_prior=args.n_prior, seed=args.seed)


def cmd_eval(args) -> int:
    net = _load_net(args.checkpoint)
    rows = _eval_rows(args, _load_rows(args))
    x, codes = chemdata.rows_to_arrays(rows)
    report = evaluate.evaluate_all(net, x, codes, _perturbation_config(args, args.eps))
    _write_text(args.out, report.to_text())
    if args.csv:
        atomic_write_bytes(args.csv, report.to_csv().encode())
    return 0


def cmd_perturb(args) -> int:
    net = _load_net(args.checkpoint)
    rows = _eval_rows(args, _load_rows(args))
    x, _ = chemdata.rows_to_arrays(rows)
    try:
        sweep = [float(v) for v in args.eps_sweep.split(",") if v.strip()]
    except ValueError:
        raise CliError(f"--eps-sweep must be a comma-separated list of numbers, got {args.eps_sweep!r}") from None
    lines = ["epsilon,cd_local,cd_prior,rcd_local,rcd_prior\n"]
    for eps in sweep:
        cfg = _perturbation_config(args, eps)
        local = evaluate.cd_local(net, x, cfg)
        prior = evaluate.cd_prior(net, x, cfg)
        lines.append(
            f"{eps:g},{local:.6g},{prior:.6g},{evaluate.rcd(local, net, x):.6g},{evaluate.rcd(prior, net, x):.6g}\n"
        )
    _write_text(args.out, "".join(lines))
    return 0


def cmd_gradcheck(args) -> int:
    results = gradcheck.run_gradchecks(args.seed)
    _write_text(args.out, gradcheck.format_table(results))
    return 0 if all(v <= gradcheck.TOLERANCE for v in results.values()) else 1


# --------------------------------------------------------------------------
# parser


def _add_data_flags(p: argparse.ArgumentParser, required: bool = True) -> None:
    p.add_argument("--data", type=Path, required=required, help="reversibledata.csv-format file")
    p.add_argument("--header", action="store_true", help="skip a header line")
    p.add_argument("--split-bond-cells", action="store_true", help="bond code stored as 136 separate cells")


def _add_eval_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--checkpoint", type=Path, required=True)
    _add_data_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", type=float, default=0.8, help="train fraction; metrics use the held-out rows")
    p.add_argument("--all-rows", action="store_true", help="evaluate on every row instead of the held-out split")
    p.add_argument("--n-noise", type=int, default=8)
    p.add_argument("--n-prior", type=int, default=8)
    p.add_argument("--out", type=Path, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cinn-nmr", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("encode", help="bond + peak text files -> dataset CSV")
    p.add_argument("--bonds", type=Path, required=True)
    p.add_argument("--peaks", type=Path, required=True)
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("synth", help="synthetic surrogate dataset")
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a network and write checkpoint + epoch log")
    _add_data_flags(p)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True, help="checkpoint path")
    p.add_argument("--log", type=Path, default=None, help="epoch log CSV")
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--split", type=float, default=0.8)
    p.add_argument("--blocks", type=int, default=2, help="coupling blocks per stage")
    p.add_argument("--pos-weight", type=float, default=4.0)
    defaults = LossWeights()
    for name in ("w_y", "w_range", "w_sparse", "w_forbidden", "w_zfree"):
        p.add_argument(f"--{name.replace('_', '-')}", dest=name, type=float, default=getattr(defaults, name))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="predict 128-bit codes")
    p.add_argument("--checkpoint", type=Path, required=True)
    _add_data_flags(p)
    p.add_argument("--report", type=int, default=0, help="rows in the real/predicted positions table")
    p.add_argument("--out", type=Path, default=None)
    p.add_argument("--report-out", type=Path, default=None)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("invert", help="generate structure candidates from a spectrum code")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--code", default=None, help="128-character 0/1 string")
    p.add_argument("--samples", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--row", type=int, default=None, help="with --data: invert that row's own forward latent")
    _add_data_flags(p, required=False)
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(func=cmd_invert)

    p = sub.add_parser("eval", help="full metric report")
    _add_eval_flags(p)
    p.add_argument("--eps", type=float, default=0.1)
    p.add_argument("--csv", type=Path, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("perturb", help="CD/rCD over an epsilon sweep")
    _add_eval_flags(p)
    p.add_argument("--eps-sweep", default="0,0.05,0.1,0.2")
    p.set_defaults(func=cmd_perturb)

    p = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    _echo_config(args.command, args)
    try:
        return args.func(args)
    except (CliError, EncodingError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
