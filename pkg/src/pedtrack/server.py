"""HTTP surface over the store, controller, and ROI operations.

JSON over HTTP/1.1 under /api/v1. Login yields a bearer token; every
other endpoint demands one. Failures use one envelope shape:

    { "error": { "code": "...", "message": "..." } }

Domain errors map onto 400 (malformed input), 401 (unauthenticated),
403 (not allowed), 404 (unknown id), and 409 (illegal state change).
Request bodies are parsed strictly: unknown fields are rejected so
client drift surfaces immediately instead of being silently ignored.

Denied requests carry a fixed message with no record identifiers, so
probing cannot distinguish "exists but forbidden" from details of the
record itself.
"""

from __future__ import annotations

import base64
import json
from pathlib import Path
from typing import Any, Literal

from fastapi import Depends, FastAPI, Query, Request, Response
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel, ConfigDict

from . import rois as rois_mod
from .controller import Controller, load_devices
from .errors import (
    BadCredentials,
    CorruptRecord,
    DecodeError,
    DeviceTimeout,
    EmptyRange,
    IllegalTransition,
    NotAuthenticated,
    OutsideFoot,
    PedtrackError,
    StorageFull,
    Unauthorized,
    UnknownDevice,
    UnknownJob,
    UnknownPatient,
    UnknownRoi,
    UnknownScan,
    UnknownUser,
    UnregisteredScan,
)
from .imaging import measure_distance
from .imgio import decode_png
from .store import Store, User

_STATUS_BY_ERROR: list[tuple[type[PedtrackError], int]] = [
    (BadCredentials, 401),
    (NotAuthenticated, 401),
    (Unauthorized, 403),
    (UnknownDevice, 404),
    (UnknownJob, 404),
    (UnknownScan, 404),
    (UnknownRoi, 404),
    (UnknownUser, 404),
    (UnknownPatient, 404),
    (IllegalTransition, 409),
    (OutsideFoot, 400),
    (EmptyRange, 400),
    (UnregisteredScan, 400),
    (DecodeError, 400),
    (DeviceTimeout, 400),
    (CorruptRecord, 500),
    (StorageFull, 500),
]


def _envelope(code: str, message: str, status: int) -> JSONResponse:
    return JSONResponse({"error": {"code": code, "message": message}}, status_code=status)


class LoginBody(BaseModel):
    model_config = ConfigDict(extra="forbid")
    user_id: str
    secret: str


class ScanBody(BaseModel):
    model_config = ConfigDict(extra="forbid")
    patient_id: str
    foot: Literal["left", "right"]
    device_id: str


class RoiBody(BaseModel):
    """Create a rectangle, or move/relabel an existing one by id."""

    model_config = ConfigDict(extra="forbid")
    id: str | None = None
    foot: Literal["left", "right"] | None = None
    rect: list[float] | None = None
    label: str | None = None


class NoteBody(BaseModel):
    model_config = ConfigDict(extra="forbid")
    text: str


class ExportBody(BaseModel):
    model_config = ConfigDict(extra="forbid")
    recipient: str
    message: str | None = None
    time_from: float | None = None
    time_to: float | None = None


def _parse_point(raw: str, name: str) -> tuple[float, float]:
    parts = raw.split(",")
    try:
        x, y = (float(p) for p in parts)
    except ValueError as exc:
        raise ValueError(f"{name} must be 'x,y', got {raw!r}") from exc
    return x, y


def create_app(
    store: Store, controller: Controller, static_dir: str | Path | None = None
) -> FastAPI:
    app = FastAPI(title="pedtrack", docs_url=None, redoc_url=None, openapi_url=None)

    @app.exception_handler(PedtrackError)
    async def _domain_error(request: Request, exc: PedtrackError) -> JSONResponse:
        for etype, status in _STATUS_BY_ERROR:
            if isinstance(exc, etype):
                if status == 403:
                    # Never echo record details on a denial.
                    return _envelope(exc.code, "not allowed", 403)
                return _envelope(exc.code, str(exc), status)
        return _envelope(exc.code, str(exc), 500)

    @app.exception_handler(RequestValidationError)
    async def _validation_error(request: Request, exc: RequestValidationError) -> JSONResponse:
        return _envelope("malformed", str(exc.errors()[0].get("msg", "invalid request")), 400)

    @app.exception_handler(ValueError)
    async def _value_error(request: Request, exc: ValueError) -> JSONResponse:
        return _envelope("malformed", str(exc), 400)

    def current_user(request: Request) -> User:
        header = request.headers.get("authorization", "")
        if not header.startswith("Bearer "):
            raise NotAuthenticated("missing bearer token")
        return store.resolve_token(header[len("Bearer ") :])

    # -- auth ---------------------------------------------------------------

    @app.post("/api/v1/auth/login")
    def login(body: LoginBody) -> dict[str, str]:
        return {"token": store.authenticate(body.user_id, body.secret)}

    @app.get("/api/v1/me")
    def who_am_i(user: User = Depends(current_user)) -> dict[str, Any]:
        # The session's own public fields, so a client can route by role
        # and find the record the user owns. Nothing about other users.
        return {
            "user_id": user.user_id,
            "display_name": user.display_name,
            "role": user.role,
            "patient_id": store.patient_for_owner(user.user_id),
        }

    # -- capture jobs ---------------------------------------------------------

    @app.get("/api/v1/devices")
    def list_devices(user: User = Depends(current_user)) -> list[dict[str, Any]]:
        # Device inventory is deployment config, not patient data; any
        # authenticated user may enumerate it to populate a scan form.
        return [
            {"device_id": d.device_id, "kind": d.kind, "dpi": d.dpi}
            for d in sorted(controller.devices.values(), key=lambda d: d.device_id)
        ]

    @app.post("/api/v1/scan", status_code=202)
    def request_scan(body: ScanBody, user: User = Depends(current_user)) -> dict[str, str]:
        job_id = controller.enqueue_scan(user, body.patient_id, body.foot, body.device_id)
        return {"job_id": job_id}

    @app.get("/api/v1/jobs/{job_id}")
    def poll_job(job_id: str, user: User = Depends(current_user)) -> dict[str, Any]:
        snapshot = controller.poll_job(job_id)
        store.require(user, snapshot["patient_id"], "read")
        return snapshot

    # -- scans ------------------------------------------------------------------

    @app.get("/api/v1/patients/{pid}/scans")
    def list_scans(
        pid: str,
        foot: Literal["left", "right"] | None = None,
        user: User = Depends(current_user),
    ) -> list[dict[str, Any]]:
        store.require(user, pid, "read")
        return [r.to_dict() for r in store.list_scans(pid, foot)]

    @app.get("/api/v1/scans/{sid}/image")
    def scan_image(
        sid: str,
        size: Literal["full", "canonical", "thumb"] = "canonical",
        user: User = Depends(current_user),
    ) -> Response:
        store.require(user, store.patient_of_scan(sid), "read")
        name = {"full": "raw.png", "canonical": "canonical.png", "thumb": "thumb.png"}[size]
        return Response(store.scan_file(sid, name).read_bytes(), media_type="image/png")

    @app.get("/api/v1/scans/{sid}/analysis")
    def scan_analysis(sid: str, user: User = Depends(current_user)) -> Any:
        store.require(user, store.patient_of_scan(sid), "read")
        return json.loads(store.scan_file(sid, "analysis.json").read_text())

    # -- measurement ---------------------------------------------------------------

    @app.get("/api/v1/measure")
    def measure(
        scan: str = Query(...),
        p1: str = Query(...),
        p2: str = Query(...),
        user: User = Depends(current_user),
    ) -> dict[str, float]:
        store.require(user, store.patient_of_scan(scan), "read")
        a = _parse_point(p1, "p1")
        b = _parse_point(p2, "p2")
        # Points land on the displayed canonical rendering; use its dpi.
        canonical = decode_png(store.scan_file(scan, "canonical.png").read_bytes())
        return {"mm": measure_distance(a, b, canonical.dpi)}

    # -- ROIs -------------------------------------------------------------------------

    @app.post("/api/v1/patients/{pid}/rois")
    def upsert_roi(
        pid: str, body: RoiBody, user: User = Depends(current_user)
    ) -> dict[str, Any]:
        if body.id is not None:
            roi_pid, _ = rois_mod.get_roi(store, body.id)
            if roi_pid != pid:
                raise UnknownRoi(f"no ROI {body.id!r}")
            return rois_mod.update_roi(store, user, body.id, rect=body.rect, label=body.label)
        if body.foot is None or body.rect is None or body.label is None:
            raise ValueError("creating an ROI needs foot, rect, and label")
        return rois_mod.create_roi(store, user, pid, body.foot, body.rect, body.label)

    @app.get("/api/v1/patients/{pid}/rois")
    def list_rois(pid: str, user: User = Depends(current_user)) -> list[dict[str, Any]]:
        return rois_mod.list_rois(store, user, pid)

    @app.post("/api/v1/rois/{rid}/approve")
    def approve_roi(rid: str, user: User = Depends(current_user)) -> dict[str, Any]:
        return rois_mod.approve_roi(store, user, rid)

    @app.post("/api/v1/rois/{rid}/delete")
    def delete_roi(rid: str, user: User = Depends(current_user)) -> dict[str, Any]:
        return rois_mod.delete_roi(store, user, rid)

    @app.get("/api/v1/rois/{rid}/timeline")
    def roi_timeline(
        rid: str,
        direction: Literal["forward", "backward"] = "forward",
        user: User = Depends(current_user),
    ) -> dict[str, Any]:
        timeline = rois_mod.build_timeline(store, user, rid, direction)
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
        return {"roi": timeline["roi"], "entries": entries, "skipped": timeline["skipped"]}

    # -- notes ---------------------------------------------------------------------------

    @app.post("/api/v1/rois/{rid}/notes")
    def add_note(rid: str, body: NoteBody, user: User = Depends(current_user)) -> dict[str, Any]:
        return rois_mod.attach_note(store, user, rid, body.text)

    @app.get("/api/v1/rois/{rid}/notes")
    def list_notes(rid: str, user: User = Depends(current_user)) -> list[dict[str, Any]]:
        return rois_mod.read_notes(store, user, rid)

    # -- export ----------------------------------------------------------------------------

    @app.post("/api/v1/rois/{rid}/export")
    def export_roi(
        rid: str, body: ExportBody, user: User = Depends(current_user)
    ) -> Response:
        if body.message:
            rois_mod.attach_note(store, user, rid, body.message)
        export_id, blob = rois_mod.export_roi_bundle(
            store, user, rid, body.recipient, body.time_from, body.time_to
        )
        return Response(
            blob,
            media_type="application/zip",
            headers={
                "Content-Disposition": f'attachment; filename="{export_id}.zip"',
                "X-Export-Id": export_id,
            },
        )

    # -- grants -------------------------------------------------------------------------------

    @app.get("/api/v1/patients/{pid}/grants")
    def list_grants(pid: str, user: User = Depends(current_user)) -> dict[str, Any]:
        # Readable by anyone who can read the record, so a share dialog can
        # offer the currently granted clinicians as recipients.
        store.require(user, pid, "read")
        return {"patient_id": pid, "clinicians": store.granted_clinicians(pid)}

    @app.post("/api/v1/patients/{pid}/grants/{clinician_id}")
    def grant(pid: str, clinician_id: str, user: User = Depends(current_user)) -> dict[str, Any]:
        store.require(user, pid, "write")
        store.grant_access(pid, clinician_id)
        return {"patient_id": pid, "clinician_id": clinician_id, "active": True}

    @app.delete("/api/v1/patients/{pid}/grants/{clinician_id}")
    def revoke(pid: str, clinician_id: str, user: User = Depends(current_user)) -> dict[str, Any]:
        store.require(user, pid, "write")
        store.revoke_access(pid, clinician_id)
        return {"patient_id": pid, "clinician_id": clinician_id, "active": False}

    if static_dir is not None and Path(static_dir).is_dir():
        app.mount("/", StaticFiles(directory=str(static_dir), html=True), name="ui")

    return app


# -- process entry -----------------------------------------------------------


def load_config(path: str | Path) -> dict[str, Any]:
    cfg = json.loads(Path(path).read_text())
    cfg.setdefault("host", "127.0.0.1")
    cfg.setdefault("port", 8765)
    if "store_root" not in cfg:
        raise ValueError("config needs a store_root")
    return cfg


def build_service(cfg: dict[str, Any]) -> tuple[Store, Controller, FastAPI]:
    store = Store(cfg["store_root"], token_ttl=cfg.get("token_ttl", 12 * 3600))
    devices = load_devices(cfg["devices"]) if cfg.get("devices") else {}
    controller = Controller(
        store,
        devices,
        capture_timeout=cfg.get("capture_timeout", 60.0),
        run_analyzers=cfg.get("analyze", True),
    )
    app = create_app(store, controller, static_dir=cfg.get("static_dir"))
    return store, controller, app


def serve(config_path: str | Path) -> None:
    import uvicorn

    cfg = load_config(config_path)
    _, controller, app = build_service(cfg)
    try:
        uvicorn.run(app, host=cfg["host"], port=int(cfg["port"]), log_level="warning")
    finally:
        controller.shutdown(wait=False)
