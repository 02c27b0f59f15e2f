"""Command line for the grid daemon and headless operation.

    edgrid serve --config grid.config [--bind 127.0.0.1:8080]
    edgrid node register --name n1 --address 127.0.0.1:7001 --color '#ff0000'
    edgrid node start|stop --id node-1
    edgrid tier alloc --node node-1 --kind DWT [--set k=v ...]
    edgrid tier dealloc --id dwt-3
    edgrid eval run --sine 450 [--wait] | --wav sample.wav
    edgrid net save grid.net | net load grid.net
    edgrid demo

Exit codes: 0 success, 1 usage error, 2 runtime failure. Subcommands other
than serve/demo talk to a running daemon (--api, default
http://127.0.0.1:8080). EDGRID_CONFIG overrides --config.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
import urllib.error
import urllib.request

from . import canon
from .config import Configuration, load_config

DEFAULT_API = "http://127.0.0.1:8080"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> _Parser:
    parser = _Parser(prog="edgrid", description="demand-driven eduction grid")
    sub = parser.add_subparsers(dest="command")

    serve = sub.add_parser("serve", help="run the manager daemon")
    serve.add_argument("--config", help="path to a .config file")
    serve.add_argument("--bind", default="127.0.0.1:8080")

    node = sub.add_parser("node", help="manage nodes on a running daemon")
    node_sub = node.add_subparsers(dest="node_command")
    register = node_sub.add_parser("register")
    register.add_argument("--name", required=True)
    register.add_argument("--address", required=True)
    register.add_argument("--color", default="#3366ff")
    register.add_argument("--api", default=DEFAULT_API)
    for action in ("start", "stop"):
        cmd = node_sub.add_parser(action)
        cmd.add_argument("--id", required=True)
        cmd.add_argument("--api", default=DEFAULT_API)

    tier = sub.add_parser("tier", help="manage tiers on a running daemon")
    tier_sub = tier.add_subparsers(dest="tier_command")
    alloc = tier_sub.add_parser("alloc")
    alloc.add_argument("--node", required=True)
    alloc.add_argument("--kind", required=True, choices=["DGT", "DST", "DWT", "GMT"])
    alloc.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    alloc.add_argument("--api", default=DEFAULT_API)
    dealloc = tier_sub.add_parser("dealloc")
    dealloc.add_argument("--id", required=True)
    dealloc.add_argument("--api", default=DEFAULT_API)

    evaluate = sub.add_parser("eval", help="run evaluations")
    eval_sub = evaluate.add_subparsers(dest="eval_command")
    run = eval_sub.add_parser("run")
    source = run.add_mutually_exclusive_group(required=True)
    source.add_argument("--wav", help="path to a PCM16 mono WAV file")
    source.add_argument("--sine", help="FREQ[,RATE,N[,NOISE,SEED]]")
    run.add_argument("--window-len", type=int)
    run.add_argument("--poles", type=int)
    run.add_argument("--silence-threshold", type=float)
    run.add_argument("--timeout", type=float, default=60.0)
    run.add_argument("--wait", action="store_true", help="block until completed")
    run.add_argument("--api", default=DEFAULT_API)

    net = sub.add_parser("net", help="save/load network documents")
    net_sub = net.add_subparsers(dest="net_command")
    for action in ("save", "load"):
        cmd = net_sub.add_parser(action)
        cmd.add_argument("file")
        cmd.add_argument("--api", default=DEFAULT_API)

    demo = sub.add_parser("demo", help="2-node local grid speaker-ID round trip")
    demo.add_argument("--workers", type=int, default=2)
    return parser


# -- daemon client ------------------------------------------------------------


def api_call(base: str, method: str, path: str, body=None):
    data = None if body is None else json.dumps(body).encode("utf-8")
    request = urllib.request.Request(base + path, data=data, method=method,
                                     headers={"Content-Type": "application/json"})
    try:
        with urllib.request.urlopen(request, timeout=30.0) as response:
            return json.loads(response.read())
    except urllib.error.HTTPError as exc:
        detail = exc.read().decode("utf-8", "replace")
        raise RuntimeError("%s %s -> %d: %s" % (method, path, exc.code, detail)) from exc
    except urllib.error.URLError as exc:
        raise RuntimeError("cannot reach daemon at %s: %s" % (base, exc.reason)) from exc


def _print_tree(tree):
    print(canon.text_encode(tree).decode("utf-8"))


# -- subcommands -----------------------------------------------------------------


def cmd_serve(args) -> int:
    config = Configuration()
    path = os.environ.get("EDGRID_CONFIG") or args.config
    if path:
        config = load_config(path)
    from .api import serve_api
    daemon = serve_api(config=config, bind=args.bind)
    host, port = daemon.address
    print("edgrid daemon on http://%s:%d (Ctrl-C to stop)" % (host, port))
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        daemon.stop()
    return 0


def cmd_node(args) -> int:
    if args.node_command == "register":
        _print_tree(api_call(args.api, "POST", "/v1/nodes", {
            "node_name": args.name, "address": args.address, "color": args.color}))
    elif args.node_command in ("start", "stop"):
        _print_tree(api_call(args.api, "POST",
                             "/v1/nodes/%s/%s" % (args.id, args.node_command)))
    else:
        raise UsageError("node requires a subcommand")
    return 0


def cmd_tier(args) -> int:
    if args.tier_command == "alloc":
        config = {}
        for entry in args.set:
            key, sep, value = entry.partition("=")
            if not sep or not key:
                raise UsageError("--set expects KEY=VALUE, got %r" % entry)
            config[key] = value
        _print_tree(api_call(args.api, "POST", "/v1/tiers", {
            "node_id": args.node, "kind": args.kind, "config": config}))
    elif args.tier_command == "dealloc":
        _print_tree(api_call(args.api, "DELETE", "/v1/tiers/%s" % args.id))
    else:
        raise UsageError("tier requires a subcommand")
    return 0


def parse_sine(spec: str) -> dict:
    parts = spec.split(",")
    source = {"kind": "sine", "freq": float(parts[0])}
    names = ("rate", "n", "noise", "seed")
    casts = (int, int, float, int)
    for name, cast, raw in zip(names, casts, parts[1:]):
        source[name] = cast(raw)
    return source


def cmd_eval(args) -> int:
    if args.eval_command != "run":
        raise UsageError("eval requires the run subcommand")
    source = {"kind": "wav", "path": args.wav} if args.wav else parse_sine(args.sine)
    body = {"source": source, "timeout_s": args.timeout}
    for key, value in (("window_len", args.window_len), ("poles", args.poles),
                       ("silence_threshold", args.silence_threshold)):
        if value is not None:
            body[key] = value
    handle = api_call(args.api, "POST", "/v1/evaluations", body)
    if not args.wait:
        _print_tree(handle)
        return 0
    evaluation_id = handle["evaluation_id"]
    deadline = time.monotonic() + args.timeout + 5.0
    while time.monotonic() < deadline:
        handle = api_call(args.api, "GET", "/v1/evaluations/%s" % evaluation_id)
        if handle["state"] != "running":
            _print_tree(handle)
            return 0 if handle["state"] == "completed" else 2
        time.sleep(0.2)
    print("evaluation %s did not finish in time" % evaluation_id, file=sys.stderr)
    return 2


def cmd_net(args) -> int:
    if args.net_command == "save":
        doc = api_call(args.api, "GET", "/v1/network")
        with open(args.file, "wb") as fh:
            fh.write(canon.text_encode(doc) + b"\n")
        print("saved %s" % args.file)
    elif args.net_command == "load":
        with open(args.file, "rb") as fh:
            doc = json.loads(fh.read())
        api_call(args.api, "PUT", "/v1/network", doc)
        print("loaded %s" % args.file)
    else:
        raise UsageError("net requires save or load")
    return 0


def cmd_demo(args) -> int:
    """Spin a 2-node in-process grid and run the speaker round trip."""
    from .config import Configuration
    from .marf import plan as marf_plan
    from .marf.audio import SineSpec
    from .marf.classify import TrainingSet, train
    from .marf import audio
    from .marf.features import lpc_features
    from .marf.kernels import warm_up
    from .model import Context
    from .runtime import GridRuntime
    from .tiers import TierKind

    warm_up()
    grid = GridRuntime(config=Configuration({"heartbeat.interval_ms": "200"}))
    nodes = []
    for index in range(2):
        node = grid.register_node("demo-%d" % (index + 1),
                                  "127.0.0.1:%d" % (7001 + index), "#22aa66")
        grid.node_lifecycle(node.node_id, "Start")
        nodes.append(node)
    grid.allocate_tier(nodes[0].node_id, TierKind.DST)
    grid.allocate_tier(nodes[0].node_id, TierKind.DGT)
    worker_config = Configuration({"tier.instances": str(args.workers)})
    grid.allocate_tier(nodes[1].node_id, TierKind.DWT, config=worker_config)

    freqs = {1: 200.0, 2: 450.0, 3: 800.0}
    ts = TrainingSet()
    for subject, freq in freqs.items():
        for instance in range(5):
            spec = SineSpec(freq=freq, rate=8000, n=2048, noise_amplitude=0.01,
                            seed=7000 + subject * 100 + instance)
            sample = audio.normalize(audio.remove_silence(
                audio.remove_noise(audio.load_sample(spec)), 0.01))
            ts = train(ts, subject, lpc_features(sample, 128, 20))

    correct = 0
    for subject, freq in freqs.items():
        probe = SineSpec(freq=freq, rate=8000, n=2048, noise_amplitude=0.01,
                         seed=9900 + subject)
        geer = marf_plan.build_marf_geer(probe, training_set=ts)
        result = grid.run_evaluation(geer, Context({"subject": subject}), timeout=30.0)
        ranked = marf_plan.value_to_result_set(result.value)
        top = ranked.best()
        marker = "ok" if top == subject else "MISS"
        print("subject %d (%.0f Hz) -> classified as %d  [%s]"
              % (subject, freq, top, marker))
        correct += int(top == subject)
    grid.shutdown()
    print("%d/3 correct classifications" % correct)
    return 0 if correct == 3 else 2


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required (serve, node, tier, eval, net, demo)")
        handler = {
            "serve": cmd_serve, "node": cmd_node, "tier": cmd_tier,
            "eval": cmd_eval, "net": cmd_net, "demo": cmd_demo,
        }[args.command]
        return handler(args)
    except UsageError as exc:
        print("usage error: %s" % exc, file=sys.stderr)
        return 1
    except (RuntimeError, OSError, ValueError) as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
