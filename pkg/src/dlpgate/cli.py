"""``dlpctl``: operate the gateway and manage its detection resources.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import random
import signal
import sys
from pathlib import Path

from . import __version__
from .crypto import KeyStore, generate_key
from .detectors import (
    DocTooShort,
    EmptyCorpus,
    MissingClass,
    TagCollision,
    TagRegistry,
    build_fingerprint_index,
    classify,
    register_tag,
    train_classifier,
)
from .detectors.fingerprint import DEFAULT_K, DEFAULT_W
from .gateway import ConfigError, GatewayConfig, load_snapshot, serve
from .incidents import IncidentStore, aggregate_report
from .replay import load_manifest, replay
from .squid import gen_squid_conf

log = logging.getLogger("dlpctl")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _text_files(directory: Path) -> list[Path]:
    if not directory.is_dir():
        raise UsageError(f"{directory} is not a directory")
    return sorted(p for p in directory.rglob("*") if p.is_file() and not p.name.startswith("."))


def _load_config(path: str) -> GatewayConfig:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file {path} not found")
    try:
        return GatewayConfig.load(p)
    except ConfigError as exc:
        raise UsageError(str(exc)) from None


def cmd_check(args) -> int:
    cfg = _load_config(args.config)
    try:
        snap = load_snapshot(cfg)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    print(
        f"ok: {len(snap.policy.rules)} rules, {len(snap.fingerprints)} corpora, "
        f"{len(snap.tags)} tag registries, {len(snap.models)} models, "
        f"{len(snap.keystore.keys)} keys; istag {snap.istag}"
    )
    return EXIT_OK


def cmd_serve(args) -> int:
    if args.check:
        return cmd_check(args)
    cfg = _load_config(args.config)
    try:
        load_snapshot(cfg)
    except Exception as exc:
        print(f"error: cannot load resources: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return serve(cfg)
    except OSError as exc:
        print(f"error: cannot listen on {cfg.host}:{cfg.port}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def cmd_fingerprint_add(args) -> int:
    directory = Path(args.directory)
    files = _text_files(directory)
    docs = []
    for p in files:
        doc_id = p.relative_to(directory).as_posix()
        text = p.read_bytes().decode("utf-8", "replace")
        try:
            build_fingerprint_index([(doc_id, text)], args.k, args.w)
        except DocTooShort as exc:
            print(f"skipped: {exc}", file=sys.stderr)
            continue
        docs.append((doc_id, text))
    if not docs:
        print("error: no documents", file=sys.stderr)
        return EXIT_RUNTIME
    idx = build_fingerprint_index(docs, args.k, args.w, name=args.name)
    idx.save(args.output)
    print(f"{len(idx.docs)} documents, {idx.fingerprint_count} fingerprints -> {args.output}")
    return EXIT_OK


def cmd_tag_add(args) -> int:
    path = Path(args.registry)
    reg = TagRegistry.load(path) if path.exists() else TagRegistry(name=path.stem, chunk_len=args.chunk_len)
    try:
        reg = register_tag(reg, Path(args.file).read_bytes(), args.tag)
    except TagCollision as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    reg.save(path)
    print(f"{len(reg.entries)} tag hashes, tags: {', '.join(sorted(reg.tags()))}")
    return EXIT_OK


def _read_class(directory: Path, label: str) -> list[tuple[str, str]]:
    return [(label, p.read_bytes().decode("utf-8", "replace")) for p in _text_files(directory)]


def cmd_train(args) -> int:
    sens = _read_class(Path(args.sensitive), "sensitive")
    pub = _read_class(Path(args.public), "public")
    held: list[tuple[str, str]] = []
    if args.holdout:
        if not 0 < args.holdout < 1:
            raise UsageError("--holdout must be in (0, 1)")
        rng = random.Random(args.seed)
        train = []
        for group in (sens, pub):
            group = list(group)
            rng.shuffle(group)
            n = min(int(round(len(group) * args.holdout)), max(len(group) - 1, 0))
            held += group[:n]
            train += group[n:]
    else:
        train = sens + pub
    try:
        model = train_classifier(train, alpha=args.alpha, name=args.name)
    except (MissingClass, EmptyCorpus) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    model.save(args.output)
    print(
        f"vocabulary {len(model.vocabulary)}; documents sensitive={model.doc_counts['sensitive']} "
        f"public={model.doc_counts['public']} -> {args.output}"
    )
    if args.holdout:
        correct = sum((classify(model, text) >= 0.5) == (label == "sensitive") for label, text in held)
        acc = correct / len(held) if held else 0.0
        print(f"held-out accuracy {acc:.4f} on {len(held)} documents")
    return EXIT_OK


def _split_addr(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    try:
        return host or "127.0.0.1", int(port)
    except ValueError:
        raise UsageError(f"bad address {addr!r}; expected host:port") from None


def cmd_replay(args) -> int:
    host, port = _split_addr(args.target)
    try:
        entries = load_manifest(args.manifest)
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(f"bad manifest: {exc}") from None
    report = replay(entries, host, port, log_dir=args.log_dir, parallel=args.parallel, preview=args.preview)
    print(report.to_json() if args.format == "json" else report.to_table())
    return EXIT_OK


def cmd_gen_squid_conf(args) -> int:
    sys.stdout.write(
        gen_squid_conf(args.address, args.http_port, args.https_port, args.preview, args.bypass)
    )
    return EXIT_OK


def cmd_report(args) -> int:
    stats = aggregate_report(IncidentStore(args.log_dir), since=args.since, until=args.until)
    if args.format == "json":
        print(json.dumps(stats.to_dict(), indent=2, sort_keys=True))
        return EXIT_OK
    d = stats.to_dict()
    print(f"total incidents: {d['total']}  (corrupt lines skipped: {d['corrupt_lines']})")
    for title, key in (("action", "by_action"), ("detector", "by_detector"), ("severity", "by_severity")):
        print(f"\nby {title}:")
        if not d[key]:
            print("  (none)")
        for k, n in d[key].items():
            print(f"  {k:<20}{n:>8}")
    print("\ntop clients:")
    if not d["top_clients"]:
        print("  (none)")
    for row in d["top_clients"]:
        print(f"  {row['ip']:<20}{row['count']:>8}")
    return EXIT_OK


def cmd_reload(args) -> int:
    pid = args.pid
    if pid is None:
        pidfile = Path(args.pidfile) if args.pidfile else None
        if pidfile is None and args.config:
            pidfile = _load_config(args.config).pidfile
        if pidfile is None:
            raise UsageError("need --pid, --pidfile or a config with a pidfile")
        try:
            pid = int(pidfile.read_text().strip())
        except (OSError, ValueError) as exc:
            print(f"error: cannot read pidfile: {exc}", file=sys.stderr)
            return EXIT_RUNTIME
    try:
        os.kill(pid, signal.SIGHUP)
    except OSError as exc:
        print(f"error: cannot signal {pid}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"reload signalled to {pid}")
    return EXIT_OK


def cmd_keygen(args) -> int:
    path = Path(args.keystore)
    store = KeyStore.load(path) if path.exists() else KeyStore()
    kid, key = generate_key()
    KeyStore({**store.keys, kid: key}).dump(path)
    print(kid.hex())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dlpctl", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"dlpctl {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("serve", help="run the ICAP service")
    s.add_argument("-c", "--config", required=True)
    s.add_argument("--check", action="store_true", help="validate resources and exit")
    s.set_defaults(func=cmd_serve)

    s = sub.add_parser("check", help="validate config and resources")
    s.add_argument("-c", "--config", required=True)
    s.set_defaults(func=cmd_check)

    s = sub.add_parser("fingerprint-add", help="build a fingerprint corpus from a directory")
    s.add_argument("name")
    s.add_argument("directory")
    s.add_argument("-o", "--output", required=True)
    s.add_argument("-k", type=int, default=DEFAULT_K)
    s.add_argument("-w", type=int, default=DEFAULT_W)
    s.set_defaults(func=cmd_fingerprint_add)

    s = sub.add_parser("tag-add", help="tag a file's content in a tag registry")
    s.add_argument("registry")
    s.add_argument("file")
    s.add_argument("tag")
    s.add_argument("--chunk-len", type=int, default=256)
    s.set_defaults(func=cmd_tag_add)

    s = sub.add_parser("train", help="train the sensitivity classifier")
    s.add_argument("sensitive")
    s.add_argument("public")
    s.add_argument("-o", "--output", required=True)
    s.add_argument("--alpha", type=float, default=1.0)
    s.add_argument("--holdout", type=float, default=None)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--name", default="default")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("replay", help="replay a manifest against a running gateway")
    s.add_argument("manifest")
    s.add_argument("--target", default="127.0.0.1:1344")
    s.add_argument("--log-dir")
    s.add_argument("--parallel", type=int, default=4)
    s.add_argument("--preview", type=int)
    s.add_argument("--format", choices=("table", "json"), default="table")
    s.set_defaults(func=cmd_replay)

    s = sub.add_parser("gen-squid-conf", help="print a Squid ICAP configuration fragment")
    s.add_argument("--address", default="127.0.0.1:1344")
    s.add_argument("--http-port", type=int, default=3128)
    s.add_argument("--https-port", type=int, default=3129)
    s.add_argument("--preview", type=int, default=1024)
    s.add_argument("--bypass", action="store_true", help="let traffic through when the service is down")
    s.set_defaults(func=cmd_gen_squid_conf)

    s = sub.add_parser("report", help="summarize the incident log")
    s.add_argument("log_dir")
    s.add_argument("--since")
    s.add_argument("--until")
    s.add_argument("--format", choices=("table", "json"), default="table")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("reload", help="ask a running gateway to reload its resources")
    g = s.add_mutually_exclusive_group()
    g.add_argument("--pid", type=int)
    g.add_argument("--pidfile")
    g.add_argument("-c", "--config")
    s.set_defaults(func=cmd_reload)

    s = sub.add_parser("keygen", help="add a new enterprise key to a keystore file")
    s.add_argument("keystore")
    s.set_defaults(func=cmd_keygen)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"dlpctl: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        log.debug("command failed", exc_info=True)
        print(f"dlpctl: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
