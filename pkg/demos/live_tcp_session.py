"""A live session over TCP with a deliberately slow mapping thread.

Two clients stream frames at 5 Hz to a server on localhost while the server
sleeps after every fused frame. The server's bounded queue drops frames instead
of stalling the clients, and the counters show where every frame went.

    python demos/live_tcp_session.py [--ingest-delay SECONDS]
"""

import argparse
import threading

from collabrecon import simclient as sc
from collabrecon.server import ServerConfig, ServerState, TcpServer
from collabrecon.wire import connect


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--ingest-delay", type=float, default=0.3)
    ap.add_argument("--seed", type=int, default=3)
    args = ap.parse_args()

    scene = sc.SyntheticScene.generate(args.seed)
    seqs = sc.make_overlapping_sequences(scene, 2, 0.5, seed=args.seed, frames_per_agent=30)
    frames = [list(sc.synthetic_frames(scene, tr)) for tr in seqs.trajectories]

    state = ServerState(ServerConfig(seed=args.seed, ground_truth=seqs.global_poses,
                                     volume_dims=(128, 104, 128), voxel_size=0.04))
    server = TcpServer(state, expected_clients=2, queue_capacity=4, ingest_delay=args.ingest_delay)
    result = {}
    srv = threading.Thread(target=lambda: result.setdefault("report", server.run(duration=120)))
    srv.start()
    print(f"server listening on {server.address[0]}:{server.address[1]}")

    sent = {}

    def client(a):
        sent[a] = sc.run_client(frames[a], connect(server.address), f"agent-{a}", rate_hz=sc.FRAME_RATE_HZ)

    workers = [threading.Thread(target=client, args=(a,)) for a in range(2)]
    for w in workers:
        w.start()
    for w in workers:
        w.join()
    srv.join()

    for a, r in sorted(sent.items()):
        print(f"agent {a}: produced {r.produced}, sent {r.sent}, dropped at client {r.discarded}")
    q = server.queue
    print(f"server queue: pushed {q.pushed} = popped {q.popped} + discarded {q.discarded} + queued {q.size()}")
    report = result["report"]
    print(f"fused frames per scene: {dict(sorted(report.frames.items()))}; stop reason: {report.stop_reason}")


if __name__ == "__main__":
    main()
