"""A guided run through the simulator: one workflow case, a rogue node, a corrupted node.

    python demos/walkthrough.py
"""

from bftwf.engine import WorkflowOperation
from bftwf.sim import SimCluster

SPEC = {
    "specId": "invoice",
    "version": 1,
    "tasks": [
        {"taskId": "Receive", "assignedNode": 0},
        {"taskId": "Approve", "assignedNode": 1},
        {"taskId": "Pay", "assignedNode": 2},
    ],
    "edges": [{"from": "Receive", "to": "Approve"}, {"from": "Approve", "to": "Pay"}],
    "start": ["Receive"],
    "end": ["Pay"],
}


def heads(c):
    return {nd.id: (nd.chain.head_seq, nd.chain.head_hash.hex()[:12], nd.engine.digest().hex()[:12]) for nd in c.live()}


def main():
    c = SimCluster(4, 1, seed=42, faultPolicy="FailEarly")
    print("load:", c.call(0, {"call": "loadSpecification", "spec": SPEC})["entity"])
    case = c.call(0, {"call": "launchCase", "specId": "invoice", "caseData": {"amount": "120"}})["entity"]["caseId"]
    print("case", case, "launched")

    for task in ("Receive", "Approve", "Pay"):
        c.settle()
        item = c.find_item(case, task)
        owner = item["assignedNode"]
        for call in ("startWorkItem", "completeWorkItem"):
            r = c.call(owner, {"call": call, "workItemId": item["id"]})
            print(f"  node {owner} {call:17s} {item['id']:14s} -> block {r['height']}")
    c.settle()
    print("case state:", c.read(3, {"query": "case-state", "caseId": case}, "OrderedConsensus")["entity"])
    print("heads (height, hash, digest):", heads(c))

    # Node 3 orders an operation on a work item it does not own.
    second = c.call(1, {"call": "launchCase", "specId": "invoice"})["entity"]["caseId"]
    c.settle()
    item = c.find_item(second, "Receive")
    print("\nvia node 3's gateway:", c.call(3, {"call": "startWorkItem", "workItemId": item["id"]}))
    op = WorkflowOperation("StartWorkItem", {"workItemId": item["id"]}, 3, c.nodes[3].client.next_id())
    reply = c.submit_raw(3, op)
    print("straight to ordering: block", reply.result["height"], "result", reply.result["result"])
    c.settle()
    print("item state everywhere:", {nd.id: nd.engine.items[item["id"]].state for nd in c.live()})

    # Corrupt node 2's engine; a compared read catches it and the node rebuilds itself.
    c.corrupt_engine(2)
    print("\nafter corruption:", heads(c))
    r = c.read(2, {"query": "list-cases"}, "UnorderedConsensus")
    print("read on node 2 flagged divergence:", r["divergence"])
    c.settle(20_000)
    print("after recovery:  ", heads(c))
    print("recoveries:", {nd.id: nd.stats["recoveries"] for nd in c.live()})


if __name__ == "__main__":
    main()
