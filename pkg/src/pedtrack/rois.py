"""Regions of interest pinned to the canonical frame, and what grows
out of them: per-scan quads, crop timelines, notes, and export bundles.

An ROI is an axis-aligned rectangle drawn on a patient's baseline image.
It never moves; each scan's similarity transform maps it into that scan.
Records live in rois.json per patient:

    {"id", "foot", "rect": [x, y, w, h], "label", "status",
     "created_by", "created_at"}

Status machine: proposed -> approved -> deleted, proposed -> deleted.
Deletion is soft so the note log stays readable.

Export bundles are byte-deterministic: fixed member order, zeroed zip
timestamps, stored (uncompressed) entries, and an export timestamp
derived from the newest included scan rather than the wall clock.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from typing import Any

from .errors import (
    EmptyRange,
    IllegalTransition,
    OutsideFoot,
    UnknownRoi,
    UnknownScan,
    UnregisteredScan,
)
from .imaging import segment_foot
from .imgio import decode_png, png_bytes
from .registration import RegistrationResult, resample
from .store import ScanRecord, Store, User, sha256_hex
from .transform import SimilarityTransform, compose, invert

ROI_STATUSES = ("proposed", "approved", "deleted")
_ALLOWED_STATUS_CHANGES = {("proposed", "approved"), ("proposed", "deleted"), ("approved", "deleted")}
CROP_SCALE = 2  # timeline crops render at twice the rect size


def _normalize_rect(rect: Any) -> list[int]:
    try:
        x, y, w, h = (int(round(float(v))) for v in rect)
    except (TypeError, ValueError) as exc:
        raise ValueError(f"rect must be four numbers [x, y, w, h], got {rect!r}") from exc
    if w < 1 or h < 1:
        raise ValueError("rect width and height must be at least 1 pixel")
    return [x, y, w, h]


def _find_roi(store: Store, roi_id: str) -> tuple[str, list[dict[str, Any]], dict[str, Any]]:
    for pid in store.list_patients():
        rois = store.load_rois(pid)
        for roi in rois:
            if roi["id"] == roi_id:
                return pid, rois, roi
    raise UnknownRoi(f"no ROI {roi_id!r}")


def get_roi(store: Store, roi_id: str) -> tuple[str, dict[str, Any]]:
    """Return (patient_id, roi record)."""
    pid, _, roi = _find_roi(store, roi_id)
    return pid, roi


def list_rois(store: Store, actor: User, patient_id: str) -> list[dict[str, Any]]:
    store.require(actor, patient_id, "read")
    return store.load_rois(patient_id)


def _baseline_mask(store: Store, patient_id: str, foot: str):
    baseline_id = store.get_baseline(patient_id, foot)
    if baseline_id is None:
        raise UnknownScan(f"patient {patient_id!r} has no {foot} baseline yet")
    img = decode_png(store.scan_file(baseline_id, "canonical.png").read_bytes())
    return segment_foot(img)


def create_roi(
    store: Store,
    actor: User,
    patient_id: str,
    foot: str,
    rect: Any,
    label: str,
) -> dict[str, Any]:
    """Pin a rectangle to the baseline. It must cover at least one
    foreground pixel of the baseline foot mask."""
    store.require(actor, patient_id, "write")
    rect = _normalize_rect(rect)
    mask = _baseline_mask(store, patient_id, foot)
    x, y, w, h = rect
    x0, y0 = max(x, 0), max(y, 0)
    x1, y1 = min(x + w, mask.width), min(y + h, mask.height)
    if x0 >= x1 or y0 >= y1 or not mask.bits[y0:y1, x0:x1].any():
        raise OutsideFoot(f"rect {rect} misses the {foot} foot")
    rois = store.load_rois(patient_id)
    roi = {
        "id": f"{patient_id}.r{len(rois) + 1:03d}",
        "foot": foot,
        "rect": rect,
        "label": str(label),
        "status": "proposed",
        "created_by": actor.user_id,
        "created_at": store.clock(),
    }
    rois.append(roi)
    store.save_rois(patient_id, rois)
    store.append_audit({"action": "roi_created", "roi_id": roi["id"], "by": actor.user_id})
    return roi


def update_roi(
    store: Store,
    actor: User,
    roi_id: str,
    rect: Any | None = None,
    label: str | None = None,
) -> dict[str, Any]:
    """Move or resize a rectangle. Only proposed ROIs are malleable."""
    pid, rois, roi = _find_roi(store, roi_id)
    store.require(actor, pid, "write")
    if roi["status"] != "proposed":
        raise IllegalTransition(f"cannot edit a {roi['status']} ROI")
    if rect is not None:
        new_rect = _normalize_rect(rect)
        mask = _baseline_mask(store, pid, roi["foot"])
        x, y, w, h = new_rect
        x0, y0 = max(x, 0), max(y, 0)
        x1, y1 = min(x + w, mask.width), min(y + h, mask.height)
        if x0 >= x1 or y0 >= y1 or not mask.bits[y0:y1, x0:x1].any():
            raise OutsideFoot(f"rect {new_rect} misses the {roi['foot']} foot")
        roi["rect"] = new_rect
    if label is not None:
        roi["label"] = str(label)
    store.save_rois(pid, rois)
    return roi


def _set_status(store: Store, actor: User, roi_id: str, new_status: str, action: str) -> dict[str, Any]:
    pid, rois, roi = _find_roi(store, roi_id)
    store.require(actor, pid, action)
    if (roi["status"], new_status) not in _ALLOWED_STATUS_CHANGES:
        raise IllegalTransition(f"{roi['status']} -> {new_status} is not allowed")
    roi["status"] = new_status
    store.save_rois(pid, rois)
    store.append_audit(
        {"action": f"roi_{new_status}", "roi_id": roi_id, "by": actor.user_id}
    )
    return roi


def approve_roi(store: Store, actor: User, roi_id: str) -> dict[str, Any]:
    return _set_status(store, actor, roi_id, "approved", "annotate")


def delete_roi(store: Store, actor: User, roi_id: str) -> dict[str, Any]:
    """Soft delete; the record and its notes remain on disk."""
    return _set_status(store, actor, roi_id, "deleted", "write")


# -- mapping and timelines ------------------------------------------------


def roi_quad_in_scan(roi: dict[str, Any], record: ScanRecord) -> list[list[float]]:
    """Map the rect's corners TL, TR, BR, BL into the scan's own pixels.

    The stored transform sends scan pixels to the canonical frame, so
    corners travel through its inverse.
    """
    result = RegistrationResult.from_dict(record.transform)
    if not result.converged:
        raise UnregisteredScan(f"scan {record.scan_id} has no accepted transform")
    back = invert(result.transform)
    x, y, w, h = roi["rect"]
    corners = ((x, y), (x + w, y), (x + w, y + h), (x, y + h))
    return [list(back.apply(c)) for c in corners]


def render_crop(
    store: Store, roi: dict[str, Any], record: ScanRecord, from_raw: bool = False
) -> bytes:
    """Cut the ROI out of a scan at 2x size.

    Crops come from the canonical rendering so a timeline is visually
    aligned; ``from_raw`` instead samples the untouched scan through its
    transform, for audits of what the scanner actually saw.
    """
    x, y, w, h = roi["rect"]
    to_crop = SimilarityTransform(
        scale=float(CROP_SCALE), theta=0.0, tx=-float(CROP_SCALE * x), ty=-float(CROP_SCALE * y)
    )
    if from_raw:
        img = decode_png(store.scan_file(record.scan_id, "raw.png").read_bytes())
        result = RegistrationResult.from_dict(record.transform)
        if not result.converged:
            raise UnregisteredScan(f"scan {record.scan_id} has no accepted transform")
        t = compose(to_crop, result.transform)
    else:
        img = decode_png(store.scan_file(record.scan_id, "canonical.png").read_bytes())
        t = to_crop
    patch = resample(img, t, CROP_SCALE * w, CROP_SCALE * h)
    return png_bytes(patch)


def build_timeline(
    store: Store,
    actor: User,
    roi_id: str,
    direction: str = "forward",
) -> dict[str, Any]:
    """Crops of the ROI across every registered scan of the same foot.

    Forward walks capture time ascending, backward descending. Scans
    whose registration did not converge are skipped and tallied, never
    silently dropped.
    """
    if direction not in ("forward", "backward"):
        raise ValueError(f"direction must be 'forward' or 'backward', not {direction!r}")
    pid, _, roi = _find_roi(store, roi_id)
    store.require(actor, pid, "read")
    entries = []
    skipped = 0
    for record in store.list_scans(pid, foot=roi["foot"]):
        if not record.transform.get("converged", False):
            skipped += 1
            continue
        entries.append(
            {
                "scan_id": record.scan_id,
                "capture_time": record.capture_time,
                "quad": roi_quad_in_scan(roi, record),
                "registration_converged": True,
                "crop_png": render_crop(store, roi, record),
            }
        )
    if direction == "backward":
        entries.reverse()
    return {"roi": roi, "entries": entries, "skipped": skipped}


# -- notes -----------------------------------------------------------------


def attach_note(store: Store, actor: User, roi_id: str, text: str) -> dict[str, Any]:
    pid, _, roi = _find_roi(store, roi_id)
    store.require(actor, pid, "annotate")
    note = {"ts": store.clock(), "author": actor.user_id, "text": str(text)}
    store.append_note(pid, roi_id, note)
    return note


def read_notes(store: Store, actor: User, roi_id: str) -> list[dict[str, Any]]:
    pid, _, _ = _find_roi(store, roi_id)
    store.require(actor, pid, "read")
    return store.read_notes(pid, roi_id)


# -- export bundles ---------------------------------------------------------


def _pseudonym(patient_id: str) -> str:
    return "p-" + hashlib.sha256(patient_id.encode()).hexdigest()[:10]


def _crop_name(entry: dict[str, Any]) -> str:
    return f"{int(round(entry['capture_time'] * 1000))}_{entry['scan_id']}.png"


def export_roi_bundle(
    store: Store,
    actor: User,
    roi_id: str,
    recipient: str,
    time_from: float | None = None,
    time_to: float | None = None,
) -> tuple[str, bytes]:
    """Build the shareable zip for one ROI and log its digest.

    Returns (export_id, zip bytes). The same store state always yields
    the same bytes, so re-exports can be compared by digest alone.
    """
    pid, _, roi = _find_roi(store, roi_id)
    store.require(actor, pid, "share")
    timeline = build_timeline(store, actor, roi_id, "forward")
    entries = [
        e
        for e in timeline["entries"]
        if (time_from is None or e["capture_time"] >= time_from)
        and (time_to is None or e["capture_time"] <= time_to)
    ]
    if not entries:
        raise EmptyRange("no registered scans fall in the requested range")

    manifest = {
        "roi": roi,
        "patient": _pseudonym(pid),
        "recipient": str(recipient),
        "exported_at": max(e["capture_time"] for e in entries),
        "skipped_scans": timeline["skipped"],
        "crops": [
            {
                "file": _crop_name(e),
                "scan_id": e["scan_id"],
                "capture_time": e["capture_time"],
                "quad": e["quad"],
            }
            for e in entries
        ],
    }
    notes_blob = "".join(
        json.dumps(n, sort_keys=True) + "\n" for n in store.read_notes(pid, roi_id)
    ).encode("utf-8")

    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as zf:
        members = [("manifest.json", (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())]
        members += [(_crop_name(e), e["crop_png"]) for e in entries]
        members.append(("notes.jsonl", notes_blob))
        for name, data in members:
            info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
            info.external_attr = 0o644 << 16
            zf.writestr(info, data)
    blob = buf.getvalue()
    digest = sha256_hex(blob)
    export_id = digest[:16]
    store.write_export(export_id, blob)
    store.append_audit(
        {
            "action": "export",
            "roi_id": roi_id,
            "recipient": str(recipient),
            "export_id": export_id,
            "sha256": digest,
            "by": actor.user_id,
        }
    )
    return export_id, blob
