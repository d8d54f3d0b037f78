"""Command line entry point: ``bftwf <group> <command> ...``.

Exit codes (also listed by ``bftwf --help``)::

    0  success
    1  the node answered but rejected the operation (code printed on stderr)
    2  usage error
    3  invalid config or input file
    4  chain verification failed
    5  node unreachable or no answer in time
    6  scenario invalid
    7  scenario ran but lost agreement or liveness
"""

from __future__ import annotations

import argparse
import asyncio
import json
import logging
import os
import signal
import sys
import urllib.error
import urllib.request

EXIT_OK = 0
EXIT_REJECTED = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_CHAIN = 4
EXIT_UNREACHABLE = 5
EXIT_SCENARIO = 6
EXIT_SIM_FAILED = 7

EXIT_CODES = {
    EXIT_OK: "success",
    EXIT_REJECTED: "operation rejected by the node",
    EXIT_USAGE: "usage error",
    EXIT_CONFIG: "invalid config or input file",
    EXIT_CHAIN: "chain verification failed",
    EXIT_UNREACHABLE: "node unreachable or timed out",
    EXIT_SCENARIO: "scenario invalid",
    EXIT_SIM_FAILED: "scenario lost agreement or liveness",
}

TOKEN_ENV = "BFTWF_OPERATOR_TOKEN"


class CliError(Exception):
    def __init__(self, status: int, code: str, detail: str = ""):
        super().__init__(f"{code}: {detail}" if detail else code)
        self.status = status
        self.code = code


def _load_json(path: str):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except (OSError, ValueError) as exc:
        raise CliError(EXIT_CONFIG, "bad-input-file", f"{path}: {exc}") from None


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True, indent=2))


# -- node ---------------------------------------------------------------------


def cmd_node_run(args) -> int:
    from .node import InvalidConfig, NodeConfig
    from .runtime import serve

    try:
        config = NodeConfig.load(args.config)
    except (OSError, ValueError, TypeError, InvalidConfig) as exc:
        raise CliError(EXIT_CONFIG, "invalid-config", str(exc)) from None

    async def main():
        stop = asyncio.Event()
        loop = asyncio.get_running_loop()
        for sig in (signal.SIGINT, signal.SIGTERM):
            loop.add_signal_handler(sig, stop.set)
        await serve(config, stop)

    asyncio.run(main())
    return EXIT_OK


def cmd_node_recover(args) -> int:
    token = args.token or os.environ.get(TOKEN_ENV, "")
    req = urllib.request.Request(f"http://{args.addr}/recover", data=b"", method="POST",
                                 headers={"X-Operator-Token": token})
    try:
        with urllib.request.urlopen(req, timeout=args.timeout) as resp:
            _emit(json.loads(resp.read()))
            return EXIT_OK
    except urllib.error.HTTPError as exc:
        code = "bad-operator-token" if exc.code == 403 else f"http-{exc.code}"
        raise CliError(EXIT_REJECTED, code) from None
    except (urllib.error.URLError, OSError) as exc:
        raise CliError(EXIT_UNREACHABLE, "node-unreachable", str(exc)) from None


# -- client -------------------------------------------------------------------


def _request(addr: str, msg: dict, timeout: float) -> dict:
    from .net import NetClient, parse_addr

    try:
        host, port = parse_addr(addr)
    except ValueError as exc:
        raise CliError(EXIT_USAGE, "bad-address", str(exc)) from None

    async def go():
        c = await NetClient().connect(host, port)
        try:
            return await c.request(msg, timeout)
        finally:
            c.close()

    try:
        return asyncio.run(go())
    except (OSError, ConnectionError) as exc:
        raise CliError(EXIT_UNREACHABLE, "node-unreachable", str(exc)) from None
    except asyncio.TimeoutError:
        raise CliError(EXIT_UNREACHABLE, "timeout") from None


def _answer(out: dict) -> int:
    _emit(out)
    if not out.get("ok"):
        raise CliError(EXIT_REJECTED, str(out.get("error") or "rejected"))
    return EXIT_OK


def cmd_client_submit(args) -> int:
    call = _load_json(args.op)
    if not isinstance(call, dict) or "call" not in call:
        raise CliError(EXIT_CONFIG, "bad-input-file", "expected an object with a 'call' field")
    return _answer(_request(args.to, {"call": call}, args.timeout))


def cmd_client_read(args) -> int:
    query = _load_json(args.query)
    if not isinstance(query, dict):
        raise CliError(EXIT_CONFIG, "bad-input-file", "expected a JSON object")
    if "call" in query:
        from .gateway import call_to_query

        query = call_to_query(query)
        if query is None:
            raise CliError(EXIT_REJECTED, "unsupported-call")
    return _answer(_request(args.to, {"read": query, "mode": args.mode}, args.timeout))


# -- chain --------------------------------------------------------------------


def _open_chain(data: str):
    from .blockstore import ChainError, ChainStore

    path = os.path.join(data, "chain.log")
    if not os.path.exists(path):
        raise CliError(EXIT_CONFIG, "no-chain", f"{path} does not exist")
    try:
        return ChainStore(path)
    except ChainError as exc:
        raise CliError(EXIT_CHAIN, "chain-unreadable", str(exc)) from None


def cmd_chain_verify(args) -> int:
    from .blockstore import verify_chain

    store = _open_chain(args.data)
    try:
        report = verify_chain(store)
    finally:
        store.close()
    if report.ok:
        print(f"ok, head={report.head.hex()}")
        return EXIT_OK
    if report.broken_at is not None:
        raise CliError(EXIT_CHAIN, "broken-link", f"block {report.broken_at}")
    raise CliError(EXIT_CHAIN, "missing-blocks", ",".join(h.hex() for h in report.missing))


def cmd_chain_show(args) -> int:
    store = _open_chain(args.data)
    try:
        for blk in store.range(args.from_, args.count):
            print(json.dumps(blk.to_dict(), sort_keys=True))
    finally:
        store.close()
    return EXIT_OK


# -- sim ----------------------------------------------------------------------


def cmd_sim_run(args) -> int:
    from .sim import ScenarioInvalid, report_bytes, run_scenario

    scenario = _load_json(args.scenario)
    try:
        report = run_scenario(scenario, args.seed)
    except ScenarioInvalid as exc:
        raise CliError(EXIT_SCENARIO, "scenario-invalid", str(exc)) from None
    data = report_bytes(report)
    if args.report:
        with open(args.report, "wb") as fh:
            fh.write(data)
    agree = report["agreement"]
    summary = {
        "seed": report["seed"],
        "simTime": report["simTime"],
        "liveNodes": agree["liveNodes"],
        "heads": agree["heads"],
        "digests": agree["digests"],
        "liveness": report["liveness"]["ok"],
        "stateDigests": sorted({v["stateDigest"] for v in report["nodes"].values() if v["alive"]}),
    }
    _emit(summary)
    if not (agree["heads"] and agree["digests"] and report["liveness"]["ok"]):
        raise CliError(EXIT_SIM_FAILED, "scenario-failed",
                       "liveness lost" if not report["liveness"]["ok"] else "live nodes disagree")
    return EXIT_OK


def cmd_bench(args) -> int:
    from .bench import bench

    r = bench(args.ops, args.concurrency)
    _emit(r.to_dict())
    return EXIT_OK if r.ok == r.ops else EXIT_REJECTED


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    codes = "\n".join(f"  {k}  {v}" for k, v in EXIT_CODES.items())
    p = argparse.ArgumentParser(prog="bftwf", description="BFT-replicated workflow nodes.",
                                epilog="exit codes:\n" + codes, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--log-level", default="WARNING")
    groups = p.add_subparsers(dest="group", required=True)

    node = groups.add_parser("node").add_subparsers(dest="command", required=True)
    run = node.add_parser("run", help="run a node until SIGINT/SIGTERM")
    run.add_argument("--config", required=True)
    run.set_defaults(fn=cmd_node_run)
    rec = node.add_parser("recover", help="ask a node to reset and rebuild itself")
    rec.add_argument("--addr", required=True, help="host:monitorPort")
    rec.add_argument("--token", help=f"operator token (default: ${TOKEN_ENV})")
    rec.add_argument("--timeout", type=float, default=10.0)
    rec.set_defaults(fn=cmd_node_recover)

    client = groups.add_parser("client").add_subparsers(dest="command", required=True)
    sub = client.add_parser("submit", help="send a workflow call (JSON file) to a node")
    sub.add_argument("op")
    sub.add_argument("--to", required=True, help="host:port")
    sub.add_argument("--timeout", type=float, default=30.0)
    sub.set_defaults(fn=cmd_client_submit)
    rd = client.add_parser("read", help="run a query (JSON file) in a read mode")
    rd.add_argument("query")
    rd.add_argument("--mode", default="OrderedConsensus",
                    choices=["LocalBypass", "UnorderedConsensus", "OrderedConsensus"])
    rd.add_argument("--to", required=True, help="host:port")
    rd.add_argument("--timeout", type=float, default=30.0)
    rd.set_defaults(fn=cmd_client_read)

    chain = groups.add_parser("chain").add_subparsers(dest="command", required=True)
    ver = chain.add_parser("verify", help="check every hash link of a stored chain")
    ver.add_argument("--data", required=True, help="node data directory")
    ver.set_defaults(fn=cmd_chain_verify)
    show = chain.add_parser("show", help="print blocks as JSON lines")
    show.add_argument("--from", dest="from_", type=int, default=1)
    show.add_argument("--count", type=int, default=10)
    show.add_argument("--data", required=True, help="node data directory")
    show.set_defaults(fn=cmd_chain_show)

    sim = groups.add_parser("sim").add_subparsers(dest="command", required=True)
    srun = sim.add_parser("run", help="run a scenario file in the simulator")
    srun.add_argument("scenario")
    srun.add_argument("--seed", type=int)
    srun.add_argument("--report", help="write the full report (canonical JSON) here")
    srun.set_defaults(fn=cmd_sim_run)

    b = groups.add_parser("bench", help="loopback latency/throughput run on real sockets")
    b.add_argument("--ops", type=int, default=3000)
    b.add_argument("--concurrency", type=int, default=256)
    b.set_defaults(fn=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.status


if __name__ == "__main__":
    sys.exit(main())
