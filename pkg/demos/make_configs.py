"""Write node configs for a four-process loopback cluster.

    python demos/make_configs.py /tmp/cluster
    for i in 0 1 2 3; do bftwf node run --config /tmp/cluster/n$i.json & done
    bftwf client submit op.json --to 127.0.0.1:7100
    curl http://127.0.0.1:7200/chain/head
"""

import json
import sys
from pathlib import Path

BASE_PORT = 7100
MONITOR_BASE = 7200


def main(root: str, n: int = 4, f: int = 1) -> None:
    out = Path(root)
    out.mkdir(parents=True, exist_ok=True)
    members = [{"id": i, "host": "127.0.0.1", "port": BASE_PORT + i, "monitorPort": MONITOR_BASE + i} for i in range(n)]
    for i in range(n):
        cfg = {
            "nodeId": i,
            "members": members,
            "f": f,
            "clusterSecret": "change-me",
            "operatorKey": "change-me-too",
            "operatorToken": "operator-token",
            "dataDir": str(out / f"data{i}"),
            "readMode": "LocalBypass",
            "faultPolicy": "FailEarly",
        }
        (out / f"n{i}.json").write_text(json.dumps(cfg, indent=2) + "\n")
    (out / "load.json").write_text(json.dumps({"call": "loadSpecification", "spec": {
        "specId": "one", "version": 1, "tasks": [{"taskId": "T", "assignedNode": 0}],
        "edges": [], "start": ["T"], "end": ["T"]}}) + "\n")
    (out / "launch.json").write_text(json.dumps({"call": "launchCase", "specId": "one"}) + "\n")
    print(f"wrote {n} configs to {out}")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "cluster")
