"""ignis-submit: configure and launch driver jobs.

    ignis-submit [--name NAME] [--attach] [--properties K=V]... PROFILE DRIVER [ARGS...]

PROFILE names a runtime profile: a file of `key=value` lines (or `.json`)
holding engine properties, or the word "default" for none. Everything after
DRIVER is passed through as the driver program's own arguments. Resolved
properties reach the driver process through the IGNIS_PROPERTIES environment
variable, which the session picks up at start; driver-scoped keys can only be
set this way.

By default the job is spawned detached, its id (the driver pid) is printed and
the submitter exits 0; the job's output goes to ignis-job-<id>.log in the
working directory. With --attach the driver's output streams through, SIGINT
and SIGTERM forward to the job, and the exit code is the driver's.
"""

import argparse
import json
import os
import signal
import subprocess
import sys


def load_profile(profile):
    if profile in ("default", "none", "-"):
        return {}
    if not os.path.exists(profile):
        raise FileNotFoundError(f"profile {profile!r} not found")
    with open(profile, "r", encoding="utf-8") as f:
        if profile.endswith(".json"):
            data = json.load(f)
            return {str(k): str(v) for k, v in data.items()}
        out = {}
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"bad profile line {line!r} (expected key=value)")
            k, _, v = line.partition("=")
            out[k.strip()] = v.strip()
        return out


def parse_args(argv):
    parser = argparse.ArgumentParser(
        prog="ignis-submit",
        description="Launch a driver job with a runtime profile.",
    )
    parser.add_argument("--name", default=None, help="job name")
    parser.add_argument("--attach", action="store_true",
                        help="stream job output and tie the submitter to the job")
    parser.add_argument("--properties", action="append", default=[], metavar="K=V",
                        help="override engine properties (repeatable)")
    parser.add_argument("profile", help="runtime profile file or 'default'")
    parser.add_argument("driver", help="driver program (.py)")
    parser.add_argument("driver_args", nargs=argparse.REMAINDER,
                        help="arguments passed to the driver")
    return parser.parse_args(argv)


def main(argv=None):
    args = parse_args(argv)
    try:
        props = load_profile(args.profile)
    except (OSError, ValueError) as exc:
        print(f"ignis-submit: {exc}", file=sys.stderr)
        return 2
    for entry in args.properties:
        if "=" not in entry:
            print(f"ignis-submit: bad --properties entry {entry!r}", file=sys.stderr)
            return 2
        k, _, v = entry.partition("=")
        props[k] = v
    if args.name:
        props["ignis.job.name"] = args.name
    if not os.path.exists(args.driver):
        print(f"ignis-submit: driver {args.driver!r} not found", file=sys.stderr)
        return 2

    env = dict(os.environ)
    env["IGNIS_PROPERTIES"] = json.dumps(props)
    cmd = [sys.executable, args.driver] + list(args.driver_args)

    if not args.attach:
        log_path = os.path.abspath(f"ignis-job-{args.name or 'job'}-{os.getpid()}.log")
        with open(log_path, "ab") as log:
            proc = subprocess.Popen(cmd, env=env, stdout=log, stderr=log,
                                    start_new_session=True)
        print(f"submitted job {proc.pid} (log: {log_path})")
        return 0

    proc = subprocess.Popen(cmd, env=env)

    def forward(signum, frame):
        try:
            proc.send_signal(signum)
        except ProcessLookupError:
            pass

    old_int = signal.signal(signal.SIGINT, forward)
    old_term = signal.signal(signal.SIGTERM, forward)
    try:
        return proc.wait()
    finally:
        signal.signal(signal.SIGINT, old_int)
        signal.signal(signal.SIGTERM, old_term)


if __name__ == "__main__":
    sys.exit(main())
