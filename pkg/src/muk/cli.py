"""mukctl: the operator CLI.

Subcommands map one-to-one onto the admin HTTP API; ``bench --standalone``
boots its own kernel instead. Exit codes: 0 success, 1 API/kernel error,
2 usage error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import requests as http

from .config import ENV_ADMIN, KernelConfig

DEFAULT_ADMIN = "127.0.0.1:8081"


def _admin_base(args) -> str:
    addr = args.admin or os.environ.get(ENV_ADMIN) or DEFAULT_ADMIN
    return f"http://{addr}"


def _request(args, method: str, path: str, payload=None):
    url = _admin_base(args) + path
    response = http.request(method, url, json=payload, timeout=args.timeout)
    if response.status_code >= 400:
        try:
            detail = response.json()
        except ValueError:
            detail = {"error": response.text}
        raise RuntimeError(f"{method} {path} -> {response.status_code}: "
                           f"{detail.get('error', detail)}")
    return response.json()


def _print_table(rows: list[tuple]) -> None:
    if not rows:
        return
    widths = [max(len(str(row[i])) for row in rows) for i in range(len(rows[0]))]
    for row in rows:
        print("  ".join(str(cell).ljust(widths[i]) for i, cell in enumerate(row)))


def cmd_status(args) -> int:
    data = _request(args, "GET", "/admin/modules")
    rows = [("MODULE", "VERSION", "PARADIGM", "INSTANCES", "STATES", "RESTARTS")]
    for module in data["modules"]:
        descriptor = module["descriptor"]
        states: dict[str, int] = {}
        for instance in module["instances"]:
            states[instance["state"]] = states.get(instance["state"], 0) + 1
        state_str = ",".join(f"{k}:{v}" for k, v in sorted(states.items())) or "-"
        rows.append((descriptor["module_id"], descriptor["version"],
                     descriptor["paradigm"], len(module["instances"]),
                     state_str, module["restarts_total"]))
    _print_table(rows)
    return 0


def cmd_deploy(args) -> int:
    result = _request(args, "POST", f"/admin/modules/{args.module}/deploy",
                      {"version": args.version, "artifact_ref": args.artifact})
    print(f"deployed {result['module_id']} v{result['version']}")
    return 0


def cmd_scale(args) -> int:
    _request(args, "POST", f"/admin/modules/{args.module}/scale",
             {"replicas": args.replicas})
    print(f"scaled {args.module} to {args.replicas}")
    return 0


def cmd_rollback(args) -> int:
    result = _request(args, "POST", f"/admin/modules/{args.module}/rollback")
    print(f"rolled back {result['module_id']} to v{result['version']}")
    return 0


def cmd_trace(args) -> int:
    data = _request(args, "GET", f"/admin/trace/{args.request_id}")
    for event in data["events"]:
        flag = "!" if event.get("error") else " "
        print(f"{event['at']:.6f} {flag} {event['component']}: {event['event']}")
    if not data["events"]:
        print("no events for this request id")
    return 0


def cmd_mapek_mode(args) -> int:
    _request(args, "POST", "/admin/mapek/mode", {"mode": args.mode})
    print(f"mapek mode set to {args.mode}")
    return 0


def cmd_inject_fault(args) -> int:
    config: dict = {"kind": args.kind}
    if args.kind == "Leak":
        config["rate_bytes_per_cycle"] = args.rate_bytes
    elif args.kind == "SlowDown":
        config["factor"] = args.factor
    elif args.kind == "ErrorRate":
        config["rate"] = args.error_rate
        config["seed"] = args.seed
    result = _request(args, "POST", f"/admin/modules/{args.module}/fault", config)
    print(f"fault {args.kind} applied to {', '.join(result['instances'])}")
    return 0


def cmd_bench(args) -> int:
    from .bench import render_table, run_bench

    if args.standalone:
        from .kernel import boot
        kernel = boot(KernelConfig(listen_addr="127.0.0.1:0",
                                   admin_addr="127.0.0.1:0",
                                   mapek_mode="off"))
        try:
            result = run_bench(kernel, args.requests, args.warmup, args.out)
        finally:
            kernel.shutdown()
    else:
        raise RuntimeError("remote bench is not wired; run with --standalone")
    print(json.dumps(result, indent=2))
    print()
    print(render_table(result))
    return 0 if result["verdict"]["ordering_holds"] else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mukctl", description="operate a running muk kernel")
    parser.add_argument("--admin", help=f"admin host:port (env {ENV_ADMIN})")
    parser.add_argument("--timeout", type=float, default=10.0)
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("status").set_defaults(fn=cmd_status)

    deploy = sub.add_parser("deploy")
    deploy.add_argument("module")
    deploy.add_argument("version")
    deploy.add_argument("artifact")
    deploy.set_defaults(fn=cmd_deploy)

    scale = sub.add_parser("scale")
    scale.add_argument("module")
    scale.add_argument("replicas", type=int)
    scale.set_defaults(fn=cmd_scale)

    rollback = sub.add_parser("rollback")
    rollback.add_argument("module")
    rollback.set_defaults(fn=cmd_rollback)

    trace = sub.add_parser("trace")
    trace.add_argument("request_id")
    trace.set_defaults(fn=cmd_trace)

    mode = sub.add_parser("mapek-mode")
    mode.add_argument("mode", choices=["mapek", "baseline", "off"])
    mode.set_defaults(fn=cmd_mapek_mode)

    fault = sub.add_parser("inject-fault")
    fault.add_argument("module")
    fault.add_argument("kind", choices=["CrashLoop", "Leak", "SlowDown",
                                        "ErrorRate", "Clear"])
    fault.add_argument("--rate-bytes", type=int, default=1024 * 1024)
    fault.add_argument("--factor", type=float, default=10.0)
    fault.add_argument("--error-rate", type=float, default=1.0)
    fault.add_argument("--seed", type=int, default=0)
    fault.set_defaults(fn=cmd_inject_fault)

    bench = sub.add_parser("bench")
    bench.add_argument("--requests", type=int, default=1000)
    bench.add_argument("--warmup", type=int, default=100)
    bench.add_argument("--standalone", action="store_true")
    bench.add_argument("--out", default=None)
    bench.set_defaults(fn=cmd_bench)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (RuntimeError, http.RequestException, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
