#!/usr/bin/env python3
# The communicator layer on its own: point-to-point and collective operations
# between endpoints, the same machinery every operator uses internally.
#
# Members here are threads over in-process endpoints, which keeps the demo
# self-contained; in the engine each member is an executor process.

import threading

from ignis.comm import Communicator, base_spec
from ignis.model import WorkerDesc
from ignis.transport import Endpoint, ProcessAddr

P = 4

endpoints = [Endpoint("127.0.0.1") for _ in range(P)]
addrs = [ProcessAddr("127.0.0.1", e.port, "demo", i) for i, e in enumerate(endpoints)]
spec = base_spec(WorkerDesc("demo", P), addrs, comm_id=0xD5)
comms = [Communicator(endpoints[i], spec, i).open() for i in range(P)]


def member(rank):
    comm = comms[rank]
    comm.barrier()

    # broadcast: everyone ends up with rank 0's payload
    greeting = comm.broadcast(0, b"hello from rank 0" if rank == 0 else None)

    # scatter/gather: rank 0 deals out parts, then collects them again
    parts = [f"part-{i}".encode() for i in range(P)] if rank == 0 else None
    mine = comm.scatter(0, parts)
    collected = comm.gather(0, mine)

    # allreduce: a sum every member holds afterwards
    total = comm.allreduce(rank + 1, lambda a, b: a + b)

    # alltoall: member j receives what each member addressed to j
    inboxes = comm.alltoall([bytes([rank, j]) for j in range(P)])

    if rank == 0:
        print("broadcast:", greeting.decode())
        print("gathered :", [c.decode() for c in collected])
        print("allreduce:", total, "(= 1+2+3+4)")
    if rank == 2:
        print("alltoall @2:", [tuple(b) for b in inboxes])


threads = [threading.Thread(target=member, args=(i,)) for i in range(P)]
for t in threads:
    t.start()
for t in threads:
    t.join()
for e in endpoints:
    e.close()
