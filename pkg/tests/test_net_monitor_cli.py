import asyncio
import json
import threading
import time
import urllib.error
import urllib.request
from pathlib import Path

import pytest

from bftwf import cli
from bftwf.bench import free_ports, loopback_configs
from bftwf.net import NetClient, parse_addr
from bftwf.runtime import NodeHost
from bftwf.sim import SimCluster
from oracles import chain_records
from workflows import seq_spec

TOKEN = "loopback-token"


class LoopbackCluster:
    """Four real-socket nodes served from one background event loop."""

    def __init__(self, root):
        self.loop = asyncio.new_event_loop()
        self.thread = threading.Thread(target=self.loop.run_forever, daemon=True)
        self.thread.start()
        self.configs = loopback_configs(4, 1, str(root), monitor=True)
        self.hosts = self.run(self._start())

    async def _start(self):
        hosts = [NodeHost(c, self.loop) for c in self.configs]
        for h in hosts:
            await h.start(catch_up=False)
        return hosts

    def run(self, coro, timeout=30):
        return asyncio.run_coroutine_threadsafe(coro, self.loop).result(timeout)

    def addr(self, i):
        return f"127.0.0.1:{self.hosts[i].port}"

    def monitor(self, i):
        return f"http://127.0.0.1:{self.hosts[i].monitor_port}"

    def request(self, i, msg):
        async def go():
            c = await NetClient().connect("127.0.0.1", self.hosts[i].port)
            try:
                return await c.request(msg, 20)
            finally:
                c.close()

        return self.run(go())

    def close(self):
        async def stop():
            for h in self.hosts:
                h.close()

        self.run(stop())
        self.loop.call_soon_threadsafe(self.loop.stop)
        self.thread.join(5)


@pytest.fixture(scope="module")
def cluster(tmp_path_factory):
    c = LoopbackCluster(tmp_path_factory.mktemp("loopback"))
    assert c.request(0, {"call": {"call": "loadSpecification", "spec": seq_spec()}})["ok"]
    yield c
    c.close()


def http_get(url):
    try:
        with urllib.request.urlopen(url, timeout=10) as resp:
            return resp.status, json.loads(resp.read())
    except urllib.error.HTTPError as exc:
        return exc.code, json.loads(exc.read())


def wait_for(pred, timeout=10.0):
    deadline = time.time() + timeout
    while time.time() < deadline:
        if pred():
            return True
        time.sleep(0.05)
    return pred()


def test_parse_addr():
    assert parse_addr("10.0.0.1:7000") == ("10.0.0.1", 7000)
    with pytest.raises(ValueError):
        parse_addr("nonsense")


def test_write_and_reads_over_sockets(cluster):
    out = cluster.request(1, {"call": {"call": "launchCase", "specId": "seq3"}})
    assert out["ok"] and out["entity"]["status"] == "Running"
    case = out["entity"]["caseId"]
    q = {"query": "case-state", "caseId": case}
    for mode in ("OrderedConsensus", "UnorderedConsensus"):
        got = cluster.request(3, {"read": q, "mode": mode})
        assert got["ok"] and got["entity"]["caseId"] == case
    # A local read is only as fresh as the node's own copy.
    assert wait_for(lambda: cluster.request(2, {"read": q, "mode": "LocalBypass"})["ok"])
    assert cluster.request(0, {"bogus": 1}) == {"ok": False, "error": "bad-request"}


def test_monitor_endpoints(cluster):
    cluster.request(0, {"call": {"call": "launchCase", "specId": "seq3"}})
    assert wait_for(lambda: len({http_get(cluster.monitor(i) + "/chain/head")[1]["hash"] for i in range(4)}) == 1)
    status, head = http_get(cluster.monitor(2) + "/chain/head")
    assert status == 200 and head["height"] >= 2
    status, view = http_get(cluster.monitor(2) + "/view")
    assert view == {"viewNumber": 0, "members": [0, 1, 2, 3], "f": 1, "leader": 0, "status": "normal"}
    status, blocks = http_get(cluster.monitor(2) + "/chain/blocks?from=1&count=2")
    assert [b["seq"] for b in blocks["blocks"]] == [1, 2]
    status, blk = http_get(cluster.monitor(2) + "/block/" + blocks["blocks"][1]["hash"])
    assert status == 200 and blk == blocks["blocks"][1]
    assert http_get(cluster.monitor(2) + "/block/" + "ab" * 32) == (404, {"error": "unknown-block"})
    assert http_get(cluster.monitor(2) + "/nowhere")[0] == 404
    assert http_get(cluster.monitor(2) + "/chain/blocks?from=x")[0] == 400
    digests = {http_get(cluster.monitor(i) + "/engine/digest")[1]["stateDigest"] for i in range(4)}
    assert len(digests) == 1


def test_recover_requires_token(cluster):
    req = urllib.request.Request(cluster.monitor(3) + "/recover", data=b"", method="POST",
                                 headers={"X-Operator-Token": "wrong"})
    with pytest.raises(urllib.error.HTTPError) as exc:
        urllib.request.urlopen(req, timeout=10)
    assert exc.value.code == 403


def test_cli_recover_rebuilds_node(cluster, capsys):
    cluster.request(0, {"call": {"call": "launchCase", "specId": "seq3"}})
    addr = cluster.monitor(3)[len("http://"):]
    assert cli.main(["node", "recover", "--addr", addr, "--token", "wrong"]) == cli.EXIT_REJECTED
    assert cli.main(["node", "recover", "--addr", addr, "--token", TOKEN]) == cli.EXIT_OK
    assert json.loads(capsys.readouterr().out) == {"status": "recovery-started"}
    ref = http_get(cluster.monitor(0) + "/engine/digest")[1]
    assert wait_for(lambda: http_get(cluster.monitor(3) + "/engine/digest")[1] == ref)
    assert http_get(cluster.monitor(3) + "/status")[1]["ready"]


def test_cli_submit_and_read(cluster, tmp_path, capsys):
    op = tmp_path / "launch.json"
    op.write_text(json.dumps({"call": "launchCase", "specId": "seq3"}))
    assert cli.main(["client", "submit", str(op), "--to", cluster.addr(2)]) == cli.EXIT_OK
    case = json.loads(capsys.readouterr().out)["entity"]["caseId"]
    q = tmp_path / "q.json"
    q.write_text(json.dumps({"call": "getCaseState", "caseId": case}))
    assert cli.main(["client", "read", str(q), "--to", cluster.addr(1)]) == cli.EXIT_OK
    assert json.loads(capsys.readouterr().out)["entity"]["caseId"] == case


def test_cli_submit_foreign_work_item_is_refused(cluster, tmp_path, capsys):
    out = cluster.request(0, {"call": {"call": "launchCase", "specId": "seq3"}})
    item = f"{out['entity']['caseId']}.A.1"  # task A belongs to node 0
    assert wait_for(lambda: cluster.request(1, {"read": {"query": "get-work-item", "workItemId": item},
                                                "mode": "LocalBypass"})["ok"])
    op = tmp_path / "start.json"
    op.write_text(json.dumps({"call": "startWorkItem", "workItemId": item}))
    assert cli.main(["client", "submit", str(op), "--to", cluster.addr(1)]) == cli.EXIT_REJECTED
    captured = capsys.readouterr()
    assert json.loads(captured.out)["ordered"] is False
    assert "visibility-violation" in captured.err


# -- CLI without a live cluster ----------------------------------------------


def test_cli_unreachable_and_bad_input(tmp_path, capsys):
    op = tmp_path / "op.json"
    op.write_text(json.dumps({"call": "launchCase", "specId": "x"}))
    port = free_ports(1)[0]
    assert cli.main(["client", "submit", str(op), "--to", f"127.0.0.1:{port}"]) == cli.EXIT_UNREACHABLE
    (tmp_path / "bad.json").write_text("{")
    assert cli.main(["client", "submit", str(tmp_path / "bad.json"), "--to", "127.0.0.1:1"]) == cli.EXIT_CONFIG
    assert cli.main(["client", "submit", str(op), "--to", "nowhere"]) == cli.EXIT_USAGE
    cfg = tmp_path / "n.json"
    cfg.write_text(json.dumps({"nodeId": 0, "members": [], "f": 1, "clusterSecret": "s"}))
    assert cli.main(["node", "run", "--config", str(cfg)]) == cli.EXIT_CONFIG
    assert "error: invalid-config" in capsys.readouterr().err


def test_cli_usage_error():
    with pytest.raises(SystemExit) as exc:
        cli.main(["chain"])
    assert exc.value.code == 2


def test_cli_chain_verify_and_show(tmp_path, capsys):
    c = SimCluster(4, 1, seed=31, data_root=tmp_path)
    c.call(0, {"call": "loadSpecification", "spec": seq_spec()})
    for _ in range(4):
        c.call(0, {"call": "launchCase", "specId": "seq3"})
    c.settle()
    head = c.nodes[1].chain.head_hash.hex()
    c.stop_node(1)
    data = str(tmp_path / "node-1")
    assert cli.main(["chain", "verify", "--data", data]) == cli.EXIT_OK
    assert capsys.readouterr().out.strip() == f"ok, head={head}"
    assert cli.main(["chain", "show", "--from", "2", "--count", "2", "--data", data]) == cli.EXIT_OK
    lines = [json.loads(x) for x in capsys.readouterr().out.splitlines()]
    assert [b["seq"] for b in lines] == [2, 3]
    path = tmp_path / "node-1" / "chain.log"
    raw = bytearray(path.read_bytes())
    off, length = chain_records(bytes(raw))[2]
    raw[off + length - 1] ^= 1
    path.write_bytes(bytes(raw))
    assert cli.main(["chain", "verify", "--data", data]) == cli.EXIT_CHAIN
    assert "broken-link: block 3" in capsys.readouterr().err
    assert cli.main(["chain", "verify", "--data", str(tmp_path / "none")]) == cli.EXIT_CONFIG


def test_cli_sim_run(tmp_path, capsys):
    scenarios = Path(__file__).resolve().parent.parent / "scenarios"
    report = tmp_path / "r.json"
    assert cli.main(["sim", "run", str(scenarios / "crash-follower.json"), "--report", str(report)]) == cli.EXIT_OK
    summary = json.loads(capsys.readouterr().out)
    assert summary["liveNodes"] == 3 and len(summary["stateDigests"]) == 1
    assert json.loads(report.read_bytes())["agreement"]["heads"]
    assert cli.main(["sim", "run", str(scenarios / "two-crashes.json")]) == cli.EXIT_SIM_FAILED
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"cluster": {"n": 3, "f": 1}}))
    assert cli.main(["sim", "run", str(bad)]) == cli.EXIT_SCENARIO
