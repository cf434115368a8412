"""Command-line interface.

Exit status: 0 success, 1 usage error, 2 data error, 3 internal invariant
violation.  Every command is deterministic given its flags and ``--seed``.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .core import CascadeSchedule, Split, SubjectRecord, l2_normalize, references_of, stack
from .data_io import (
    FormatError,
    SyntheticModel,
    atomic_write,
    generate_synthetic,
    read_embeddings,
    read_index_file,
    write_embeddings,
    write_index,
)
from .evaluation import EvaluationError, ExperimentConfig, run_experiment, write_manifest, \
    write_report
from .fusion import FusionMethod, compute_training_stats
from .index import IndexBuildError, build_index
from .pairing import PairingError, PairingMethod
from .protection import (
    Encoder,
    KeyMaterial,
    ProtectedComparator,
    ProtectedIndex,
    ProtectionError,
    Scheme,
    encrypt_index,
    fit_quantization,
    generate_keys,
    key_from_bytes,
    key_to_bytes,
    make_backend,
)
from .retrieval import PLAINTEXT, exhaustive_search, keep_all_schedule, retrieve, schedule_for_k1

log = logging.getLogger("bioindex")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _normalized(records: list[SubjectRecord], enabled: bool) -> list[SubjectRecord]:
    if not enabled:
        return records
    return [SubjectRecord(r.subject_id, r.sample_id, l2_normalize(r.embedding), r.split, r.soft)
            for r in records]


def _train_stats(path, normalize: bool):
    records = _normalized(read_embeddings(path), normalize)
    train = [r for r in records if r.split is Split.TRAIN] or records
    return compute_training_stats(stack(train))


def _load_keys(path) -> KeyMaterial:
    return key_from_bytes(Path(path).read_bytes())


def _csv_bytes(header, rows) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue().encode()


# -- commands --------------------------------------------------------------------


def cmd_generate(args) -> int:
    model = SyntheticModel(args.subjects, args.dim, args.sigma, args.seed,
                           samples_per_subject=args.samples_per_subject)
    records = generate_synthetic(model)
    out = Path(args.out)
    write_embeddings(records, out)
    _manifest_for(out, [out, Path(str(out) + ".meta")])
    log.info("wrote %d records to %s", len(records), out)
    return EXIT_OK


def cmd_keygen(args) -> int:
    keys = generate_keys(args.scheme, args.security, np.random.default_rng(args.seed))
    out = Path(args.out)
    atomic_write(out, key_to_bytes(keys, include_secret=True))
    atomic_write(Path(str(out) + ".pub"), key_to_bytes(keys, include_secret=False))
    print(keys.key_id)
    return EXIT_OK


def cmd_build_index(args) -> int:
    method = FusionMethod.parse(args.fusion)
    if method.needs_stats and not args.stats:
        raise UsageError(f"--fusion {args.fusion} requires --stats")
    if args.encrypt and not args.keys:
        raise UsageError("--encrypt requires --keys")
    scheme = Scheme.parse(args.encrypt) if args.encrypt else None
    if scheme in (Scheme.EXACT_INT, Scheme.BINARY) and not args.stats:
        raise UsageError(f"--encrypt {args.encrypt} requires --stats for its template encoding")

    records = _normalized(read_embeddings(args.gallery), not args.no_normalize)
    refs = references_of(records) or records
    stats = _train_stats(args.stats, not args.no_normalize) if args.stats else None
    forest = build_index(refs, method, PairingMethod(args.pairing), args.n1, stats,
                         seed=args.seed, renormalize=args.renormalize)
    schedule = schedule_for_k1(forest.gallery_size, args.n1, args.k1) if args.k1 else None
    out = Path(args.out)
    if scheme is None:
        write_index(forest, out, schedule)
    else:
        keys = _load_keys(args.keys)
        if keys.scheme is not scheme:
            raise ProtectionError(f"key file is for {keys.scheme.name}, not {scheme.name}")
        encoder = _encoder_for(scheme, args.stats, args.bits, not args.no_normalize, stats)
        rng = np.random.default_rng(args.seed)
        protected = encrypt_index(forest, keys, encoder, make_backend(scheme, rng))
        write_index(protected, out, schedule)
    _manifest_for(out, [out])
    log.info("index: %d trees, n1=%d, levels=%s", forest.tree_count, args.n1,
             forest.node_counts())
    return EXIT_OK


def _encoder_for(scheme: Scheme, stats_path, bits: int, normalize: bool, stats) -> Encoder:
    if scheme is Scheme.EXACT_INT:
        records = _normalized(read_embeddings(stats_path), normalize)
        train = [r for r in records if r.split is Split.TRAIN] or records
        return Encoder(scheme, quant=fit_quantization(stack(train), bits))
    if scheme is Scheme.BINARY:
        return Encoder(scheme, stats=stats)
    return Encoder(scheme)


def _parse_schedule(text: str, n1: int) -> CascadeSchedule:
    try:
        return CascadeSchedule(n1, tuple(int(x) for x in text.split(",")))
    except ValueError as exc:
        raise UsageError(f"bad --schedule: {exc}") from exc


def cmd_identify(args) -> int:
    loaded = read_index_file(args.index)
    index = loaded.index
    protected = isinstance(index, ProtectedIndex)
    if protected and not args.keys:
        raise UsageError("index is encrypted; --keys is required")
    if args.k1 is not None and args.schedule:
        raise UsageError("use either --k1 or --schedule")

    if args.schedule == "all":
        schedule = keep_all_schedule(index.gallery_size, index.n1)
    elif args.schedule:
        schedule = _parse_schedule(args.schedule, index.n1)
    elif args.k1 is not None:
        schedule = schedule_for_k1(index.gallery_size, index.n1, args.k1)
    elif loaded.schedule is not None:
        schedule = loaded.schedule
    else:
        raise UsageError("no schedule: pass --k1 or --schedule")

    if protected:
        keys = _load_keys(args.keys)
        if args.backend and Scheme.parse(args.backend) is not index.scheme:
            raise ProtectionError(f"--backend {args.backend} does not match index scheme "
                                  f"{index.scheme.name}")
        if keys.key_id != index.key_id or keys.scheme is not index.scheme:
            raise ProtectionError(f"key {keys.key_id} ({keys.scheme.name}) does not match index "
                                  f"key {index.key_id} ({index.scheme.name})")
        backend = make_backend(index.scheme, np.random.default_rng(args.seed))
        comparator = ProtectedComparator(backend, keys, index.encoder or Encoder(index.scheme))
    else:
        if args.backend and Scheme.parse(args.backend) is not Scheme.PLAINTEXT_REF:
            raise ProtectionError("index is not encrypted; only the plaintext backend applies")
        comparator = PLAINTEXT

    records = _normalized(read_embeddings(args.probes), not args.no_normalize)
    probes = [r for r in records if r.split in (Split.PROBE_ENROLLED, Split.PROBE_NONENROLLED)]
    probes = probes or records
    if args.limit:
        probes = probes[:args.limit]

    out = Path(args.out)
    written = []
    runs = [("cascade", lambda v: retrieve(v, index, schedule, comparator))]
    if args.baseline:
        leaves = index.levels[-1]
        runs.append(("baseline",
                     lambda v: exhaustive_search(v, leaves, index.leaf_subjects, comparator)))
    for name, search in runs:
        trace_rows, cand_rows = [], []
        for p in probes:
            res = search(p.embedding)
            cands = getattr(res, "candidates", res)
            compared = getattr(res, "compared", (index.gallery_size,))
            selected = getattr(res, "selected", (index.gallery_size,))
            trace_rows.append((p.sample_id, p.subject_id, "/".join(map(str, compared)),
                               "/".join(map(str, selected)), sum(compared), cands.top1,
                               repr(float(cands.scores[0]))))
            limit = len(cands) if args.top is None else min(args.top, len(cands))
            for rank in range(limit):
                cand_rows.append((p.sample_id, rank + 1, int(cands.subject_ids[rank]),
                                  repr(float(cands.scores[rank]))))
        atomic_write(out / f"{name}_traces.csv", _csv_bytes(
            ("sample_id", "subject_id", "compared_per_level", "selected_per_level",
             "comparisons", "top1", "top1_score"), trace_rows))
        atomic_write(out / f"{name}_candidates.csv", _csv_bytes(
            ("sample_id", "rank", "subject_id", "score"), cand_rows))
        written += [f"{name}_traces.csv", f"{name}_candidates.csv"]
    write_manifest(out, written)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    bundle = run_experiment(cfg)
    write_report(bundle, args.out_dir)
    return EXIT_OK


def _manifest_for(primary: Path, files: list[Path]) -> None:
    import hashlib
    import json

    entries = {f.name: hashlib.sha256(f.read_bytes()).hexdigest() for f in sorted(files)}
    atomic_write(Path(str(primary) + ".manifest.json"),
                 (json.dumps({"files": entries}, indent=2, sort_keys=True) + "\n").encode())


# -- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="bioindex", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="synthesize a labelled gallery")
    g.add_argument("--subjects", type=int, required=True)
    g.add_argument("--dim", type=int, default=512)
    g.add_argument("--sigma", type=float, default=0.1)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--samples-per-subject", type=int)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    k = sub.add_parser("keygen", help="create key material for a protection scheme")
    k.add_argument("--scheme", required=True,
                   choices=["plaintext_ref", "approx_real", "exact_int", "binary"])
    k.add_argument("--security", type=int, default=128, choices=[128, 192, 256])
    k.add_argument("--seed", type=int, default=0)
    k.add_argument("--out", required=True)
    k.set_defaults(func=cmd_keygen)

    b = sub.add_parser("build-index", help="pair, fuse, build and persist the search forest")
    b.add_argument("--gallery", required=True)
    b.add_argument("--n1", type=int, required=True)
    b.add_argument("--fusion", default="avg1",
                   choices=["avg1", "avg2", "dist1", "dist2", "idx1", "idx2"])
    b.add_argument("--pairing", default="score", choices=["random", "soft", "score"])
    b.add_argument("--stats", help="embedding file whose train split provides statistics")
    b.add_argument("--k1", type=float, help="store a default schedule with the index")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--renormalize", action="store_true")
    b.add_argument("--no-normalize", action="store_true")
    b.add_argument("--encrypt", choices=["plaintext_ref", "approx_real", "exact_int", "binary"])
    b.add_argument("--keys")
    b.add_argument("--bits", type=int, default=8)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_build_index)

    i = sub.add_parser("identify", help="run probes through the cascade and/or baseline")
    i.add_argument("--index", required=True)
    i.add_argument("--probes", required=True)
    i.add_argument("--k1", type=float, help="root fraction kept; 1 keeps every node")
    i.add_argument("--schedule", help="comma-separated selection counts per level, or 'all'")
    i.add_argument("--backend", choices=["plaintext_ref", "approx_real", "exact_int", "binary"])
    i.add_argument("--keys")
    i.add_argument("--baseline", action="store_true")
    i.add_argument("--top", type=int, default=10, help="candidates written per probe")
    i.add_argument("--limit", type=int, help="only the first N probes")
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--no-normalize", action="store_true")
    i.add_argument("--out", required=True, help="output directory")
    i.set_defaults(func=cmd_identify)

    e = sub.add_parser("evaluate", help="metrics, workload matrix and summary")
    e.add_argument("--config", required=True)
    e.add_argument("--out-dir", required=True)
    e.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help, --version and usage errors
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"bioindex: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, ProtectionError, PairingError, IndexBuildError, EvaluationError,
            ValueError, OSError) as exc:
        print(f"bioindex: {exc}", file=sys.stderr)
        return EXIT_DATA
    except AssertionError as exc:
        print(f"bioindex: internal invariant violated: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
