"""Operator command line: run the server, ingest images, inspect records.

Every command is a thin shell over the module operations; nothing is
computed here. Machine-readable JSON goes to stdout, diagnostics to
stderr. Exit status: 0 success, 1 domain error, 2 usage error.

Local commands act with the authority of the patient record's owner;
whoever can point this tool at the store directory already holds the
bytes, so there is no separate login step off the network path.
"""

from __future__ import annotations

import argparse
import base64
import json
import sys
from pathlib import Path
from typing import Any

from . import rois as rois_mod
from .controller import process_image
from .errors import PedtrackError, UnknownScan
from .imgio import decode_png, read_image
from .registration import identity_result, register_to_baseline
from .store import Store, User
from . import analysis as analysis_mod
from . import server as server_mod


def _emit(doc: Any) -> None:
    json.dump(doc, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")


def _open_store(root: str, create: bool = False) -> Store:
    if create and not (Path(root) / "users.json").exists():
        return Store.init(root)
    return Store(root)


def _owner_of(store: Store, patient_id: str) -> User:
    return store.get_user(store.load_profile(patient_id)["owner"])


def _actor_for_roi(store: Store, roi_id: str) -> User:
    pid, _ = rois_mod.get_roi(store, roi_id)
    return _owner_of(store, pid)


# -- command handlers ---------------------------------------------------------


def _cmd_serve(args: argparse.Namespace) -> int:
    server_mod.serve(args.config)
    return 0


def _cmd_ingest(args: argparse.Namespace) -> int:
    store = _open_store(args.store)
    img = read_image(args.image)
    scan_id = process_image(store, args.patient, args.foot, img)
    _emit({"scan_id": scan_id})
    return 0


def _cmd_register(args: argparse.Namespace) -> int:
    store = _open_store(args.store)
    record = store.load_scan(args.scan)
    raw = decode_png(store.scan_file(args.scan, "raw.png").read_bytes())
    baseline_id = store.get_baseline(record.patient_id, record.foot)
    if baseline_id is None:
        raise UnknownScan(f"patient {record.patient_id} has no {record.foot} baseline")
    if baseline_id == args.scan:
        result = identity_result()
    else:
        baseline = decode_png(store.scan_file(baseline_id, "canonical.png").read_bytes())
        result = register_to_baseline(raw, baseline)
    _emit(result.to_dict())
    return 0


def _cmd_analyze(args: argparse.Namespace) -> int:
    store = _open_store(args.store)
    store.load_scan(args.scan)
    img = decode_png(store.scan_file(args.scan, "canonical.png").read_bytes())
    from .imaging import segment_foot

    report = analysis_mod.run_analyzers(
        args.scan, img, segment_foot(img), analysis_mod.default_registry(), clock=store.clock
    )
    _emit(report.to_dict())
    return 0


def _cmd_roi(args: argparse.Namespace) -> int:
    store = _open_store(args.store)
    if args.roi_cmd == "list":
        _emit(rois_mod.list_rois(store, _owner_of(store, args.patient), args.patient))
    elif args.roi_cmd == "add":
        rect = [float(v) for v in args.rect.split(",")]
        roi = rois_mod.create_roi(
            store, _owner_of(store, args.patient), args.patient, args.foot, rect, args.label
        )
        _emit(roi)
    elif args.roi_cmd == "approve":
        _emit(rois_mod.approve_roi(store, _actor_for_roi(store, args.roi), args.roi))
    elif args.roi_cmd == "timeline":
        timeline = rois_mod.build_timeline(
            store, _actor_for_roi(store, args.roi), args.roi, args.direction
        )
        entries = [
            {
                "scan_id": e["scan_id"],
                "capture_time": e["capture_time"],
                "quad": e["quad"],
                "registration_converged": e["registration_converged"],
                "crop_png_base64": base64.b64encode(e["crop_png"]).decode("ascii"),
            }
            for e in timeline["entries"]
        ]
        _emit({"roi": timeline["roi"], "entries": entries, "skipped": timeline["skipped"]})
    return 0


def _cmd_export(args: argparse.Namespace) -> int:
    store = _open_store(args.store)
    export_id, blob = rois_mod.export_roi_bundle(
        store, _actor_for_roi(store, args.roi), args.roi, args.recipient
    )
    Path(args.out).write_bytes(blob)
    _emit({"export_id": export_id, "out": args.out, "bytes": len(blob)})
    return 0


def _cmd_user(args: argparse.Namespace) -> int:
    store = _open_store(args.store, create=True)
    if args.user_cmd == "add":
        user = store.add_user(args.user_id, args.name, args.role, args.secret)
        doc: dict[str, Any] = {
            "user_id": user.user_id,
            "display_name": user.display_name,
            "role": user.role,
        }
        if user.role == "patient":
            patient_id = args.patient_id or user.user_id
            store.create_patient(patient_id, user.user_id, user.display_name)
            doc["patient_id"] = patient_id
        _emit(doc)
    elif args.user_cmd == "grant":
        store.grant_access(args.patient, args.clinician)
        _emit({"patient_id": args.patient, "clinician_id": args.clinician, "active": True})
    elif args.user_cmd == "revoke":
        store.revoke_access(args.patient, args.clinician)
        _emit({"patient_id": args.patient, "clinician_id": args.clinician, "active": False})
    return 0


# -- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pedtrack")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--config", required=True)
    p.set_defaults(func=_cmd_serve)

    p = sub.add_parser("ingest", help="run the full pipeline on an image file")
    p.add_argument("--store", required=True)
    p.add_argument("--patient", required=True)
    p.add_argument("--foot", required=True, choices=("left", "right"))
    p.add_argument("image")
    p.set_defaults(func=_cmd_ingest)

    p = sub.add_parser("register", help="re-run registration for a stored scan")
    p.add_argument("--store", required=True)
    p.add_argument("--scan", required=True)
    p.set_defaults(func=_cmd_register)

    p = sub.add_parser("analyze", help="re-run analyzers on a stored scan")
    p.add_argument("--store", required=True)
    p.add_argument("--scan", required=True)
    p.set_defaults(func=_cmd_analyze)

    p = sub.add_parser("roi", help="inspect and edit regions of interest")
    roi_sub = p.add_subparsers(dest="roi_cmd", required=True)
    q = roi_sub.add_parser("list")
    q.add_argument("--store", required=True)
    q.add_argument("--patient", required=True)
    q = roi_sub.add_parser("add")
    q.add_argument("--store", required=True)
    q.add_argument("--patient", required=True)
    q.add_argument("--foot", required=True, choices=("left", "right"))
    q.add_argument("--rect", required=True, help="x,y,w,h in canonical pixels")
    q.add_argument("--label", required=True)
    q = roi_sub.add_parser("approve")
    q.add_argument("--store", required=True)
    q.add_argument("--roi", required=True)
    q = roi_sub.add_parser("timeline")
    q.add_argument("--store", required=True)
    q.add_argument("--roi", required=True)
    q.add_argument("--direction", default="forward", choices=("forward", "backward"))
    p.set_defaults(func=_cmd_roi)

    p = sub.add_parser("export", help="write a shareable ROI bundle")
    p.add_argument("--store", required=True)
    p.add_argument("--roi", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--recipient", default="operator")
    p.set_defaults(func=_cmd_export)

    p = sub.add_parser("user", help="manage users and access grants")
    user_sub = p.add_subparsers(dest="user_cmd", required=True)
    q = user_sub.add_parser("add")
    q.add_argument("--store", required=True)
    q.add_argument("--user-id", required=True)
    q.add_argument("--name", required=True)
    q.add_argument("--role", required=True, choices=("patient", "clinician"))
    q.add_argument("--secret", required=True)
    q.add_argument("--patient-id", default=None)
    q = user_sub.add_parser("grant")
    q.add_argument("--store", required=True)
    q.add_argument("--patient", required=True)
    q.add_argument("--clinician", required=True)
    q = user_sub.add_parser("revoke")
    q.add_argument("--store", required=True)
    q.add_argument("--patient", required=True)
    q.add_argument("--clinician", required=True)
    p.set_defaults(func=_cmd_user)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except PedtrackError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
