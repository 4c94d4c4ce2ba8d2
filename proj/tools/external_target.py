#!/usr/bin/env python3
"""Reference external target for the JSONL wire protocol.

Implements the protocol documented in README.md directly from its spec:
one JSON object per line over TCP. Requests look like

    {"id": <u64>, "inputs": [[...], ...]}

and answers are

    {"id": <u64>, "probs": [[...], ...]}      (probability scenario)
    {"id": <u64>, "label": [<int>, ...]}      (label scenario)

The served model is a fixed 2-feature, 3-class linear classifier:
logits = x @ W + b, probabilities via softmax, labels via argmax with
lowest-index tie-breaking.
"""

import argparse
import json
import math
import socket
import socketserver
import sys

W = [
    [2.0, 0.5, -1.5],
    [-1.0, 0.5, 1.0],
]
B = [0.125, -0.25, 0.375]


def logits(row):
    return [row[0] * W[0][k] + row[1] * W[1][k] + B[k] for k in range(3)]


def softmax(z):
    m = max(z)
    exps = [math.exp(v - m) for v in z]
    s = sum(exps)
    return [v / s for v in exps]


def argmax(z):
    best = 0
    for k in range(1, len(z)):
        if z[k] > z[best]:
            best = k
    return best


def answer(line, scenario):
    request = json.loads(line)
    rows = [logits(row) for row in request["inputs"]]
    if scenario == "label":
        body = {"id": request["id"], "label": [argmax(z) for z in rows]}
    else:
        body = {"id": request["id"], "probs": [softmax(z) for z in rows]}
    return json.dumps(body, separators=(",", ":"))


class Handler(socketserver.StreamRequestHandler):
    def handle(self):
        for raw in self.rfile:
            line = raw.decode("utf-8").strip()
            if not line:
                continue
            try:
                response = answer(line, self.server.scenario)
            except Exception as exc:  # malformed request
                response = json.dumps({"error": str(exc)}, separators=(",", ":"))
            self.wfile.write((response + "\n").encode("utf-8"))
            self.wfile.flush()


class Server(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--port", type=int, default=0, help="0 picks an ephemeral port")
    parser.add_argument("--scenario", choices=["probability", "label"], default="probability")
    parser.add_argument("--gen-golden", nargs=2, metavar=("REQUESTS", "RESPONSES"),
                        help="answer a request transcript offline and exit")
    args = parser.parse_args()

    if args.gen_golden:
        req_path, res_path = args.gen_golden
        with open(req_path) as rf, open(res_path, "w") as wf:
            for line in rf:
                line = line.strip()
                if line:
                    wf.write(answer(line, args.scenario) + "\n")
        return

    server = Server(("127.0.0.1", args.port), Handler)
    server.scenario = args.scenario
    print(f"PORT {server.server_address[1]}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass


if __name__ == "__main__":
    main()
