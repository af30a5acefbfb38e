"""Minimal stand-in for the execution sidecar, used to test the client.

Programs are Python expressions evaluated with `w` bound to a dict of
column lists. Flags switch on misbehaviour:
  --version V     announce protocol V
  --garble-first  answer the first request with a non-JSON line
  --garble-once P garble the first reply unless marker file P exists,
                  then create it
  --wrong-id      answer every request with id 0
"""
import json
import os
import sys
import time

args = sys.argv[1:]
version = args[args.index("--version") + 1] if "--version" in args else "pyexec/1"
garble = "--garble-first" in args
wrong_id = "--wrong-id" in args
if "--garble-once" in args:
    marker = args[args.index("--garble-once") + 1]
    if not os.path.exists(marker):
        open(marker, "w").close()
        garble = True

print(json.dumps({"protocol": version}), flush=True)
for line in sys.stdin:
    req = json.loads(line)
    if garble:
        garble = False
        print("not json", flush=True)
        continue
    rid = 0 if wrong_id else req["id"]
    prog = req["program"]
    if prog == "crash":
        sys.exit(3)
    if prog == "hang":
        time.sleep(60)
    headers = req["table"]["headers"]
    w = {h: [row[i] for row in req["table"]["rows"]] for i, h in enumerate(headers)}
    try:
        out = {"id": rid, "status": "ok", "answer": str(eval(prog, {"w": w}))}
    except Exception as e:
        out = {"id": rid, "status": "error", "error_kind": "exception", "message": repr(e)}
    print(json.dumps(out), flush=True)
