"""Filesystem-backed patient data store with authentication and grants.

Layout under one root directory:

    users.json
    audit.log
    jobs.json
    patients/{pid}/profile.json
    patients/{pid}/scans/{scan_id}/{raw.png, canonical.png, thumb.png,
                                    transform.json, analysis.json, meta.json}
    patients/{pid}/rois.json
    patients/{pid}/notes/{roi_id}.jsonl
    exports/{export_id}.zip

Every document write goes through an atomic stage-then-rename so a crash
at any point leaves either the old or the new content, never a torn file.
meta.json is written last and is the commit point for a scan: a scan
directory without it does not exist as far as readers are concerned.
Stray staging files are garbage-collected on startup.

Writes accept an optional failpoint hook used by crash-consistency tests
to interrupt the process at named points.

Concurrency: mutations for one patient serialize on a per-patient lock;
users, jobs, tokens, and the audit log each have their own lock.
"""

from __future__ import annotations

import errno
import hashlib
import hmac
import json
import os
import re
import secrets
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Iterator

from .errors import (
    BadCredentials,
    CorruptRecord,
    NotAuthenticated,
    StorageFull,
    Unauthorized,
    UnknownPatient,
    UnknownScan,
    UnknownUser,
)

TOKEN_TTL_SECONDS = 12 * 3600
PBKDF2_ITERATIONS = 60_000

_ID_RE = re.compile(r"^[a-z0-9][a-z0-9_-]{0,31}$")

SCAN_FILES = ("raw.png", "canonical.png", "thumb.png", "transform.json", "analysis.json")

# Actions understood by authorize(). Patients hold every action on their
# own record. A clinician with an active grant may read, share bundles,
# annotate (notes and ROI approval), and request scans, but never gets
# general write access (creating/deleting ROIs, managing grants).
ACTIONS = ("read", "write", "share", "annotate", "scan")
_CLINICIAN_GRANTED = frozenset({"read", "share", "annotate", "scan"})


@dataclass(frozen=True)
class User:
    user_id: str
    display_name: str
    role: str  # "patient" | "clinician"


@dataclass(frozen=True)
class ScanRecord:
    scan_id: str
    patient_id: str
    foot: str
    capture_time: float
    dpi: float
    transform: dict[str, Any]

    def to_dict(self) -> dict[str, Any]:
        return {
            "scan_id": self.scan_id,
            "patient_id": self.patient_id,
            "foot": self.foot,
            "capture_time": self.capture_time,
            "dpi": self.dpi,
            "transform": self.transform,
        }


def _require_id(value: str, what: str) -> str:
    if not _ID_RE.match(value):
        raise ValueError(f"{what} {value!r} must match [a-z0-9][a-z0-9_-]*")
    return value


def _require_foot(foot: str) -> str:
    if foot not in ("left", "right"):
        raise ValueError(f"foot must be 'left' or 'right', not {foot!r}")
    return foot


def _json_bytes(doc: Any) -> bytes:
    return (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode("utf-8")


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


class Store:
    """One storage root. Open with Store(root); create with Store.init(root)."""

    def __init__(
        self,
        root: str | Path,
        clock: Callable[[], float] = time.time,
        token_ttl: float = TOKEN_TTL_SECONDS,
        failpoint: Callable[[str], None] | None = None,
    ) -> None:
        self.root = Path(root)
        if not (self.root / "users.json").exists():
            raise FileNotFoundError(f"{self.root} is not an initialized store")
        self.clock = clock
        self.token_ttl = token_ttl
        self.failpoint = failpoint

        self._global_lock = threading.RLock()
        self._patient_locks: dict[str, threading.RLock] = {}
        self._audit_lock = threading.Lock()
        self._tokens: dict[str, tuple[str, float]] = {}  # token -> (user_id, expiry)
        self._scan_index: dict[str, str] = {}  # scan_id -> patient_id

        self.collect_garbage()
        self._build_scan_index()

    @staticmethod
    def init(root: str | Path, **kwargs: Any) -> "Store":
        root = Path(root)
        (root / "patients").mkdir(parents=True, exist_ok=True)
        (root / "exports").mkdir(exist_ok=True)
        users_path = root / "users.json"
        if not users_path.exists():
            users_path.write_bytes(_json_bytes({"users": []}))
        (root / "audit.log").touch()
        return Store(root, **kwargs)

    # -- low-level persistence ------------------------------------------------

    def _fail(self, label: str) -> None:
        if self.failpoint is not None:
            self.failpoint(label)

    def _atomic_write(self, path: Path, data: bytes) -> None:
        """Stage-then-rename; the rename is the commit."""
        rel = path.relative_to(self.root).as_posix()
        path.parent.mkdir(parents=True, exist_ok=True)
        stage = path.parent / f".stage-{path.name}-{os.getpid()}-{secrets.token_hex(4)}"
        try:
            stage.write_bytes(data)
            self._fail(f"stage:{rel}")
            os.replace(stage, path)
        except OSError as exc:
            if exc.errno == errno.ENOSPC:
                raise StorageFull(str(exc)) from exc
            raise
        finally:
            if stage.exists():
                stage.unlink(missing_ok=True)
        self._fail(f"commit:{rel}")

    def _append_line(self, path: Path, doc: dict[str, Any]) -> None:
        """Append one JSON line; a torn trailing line is dropped on read."""
        rel = path.relative_to(self.root).as_posix()
        self._fail(f"append:{rel}")
        path.parent.mkdir(parents=True, exist_ok=True)
        line = json.dumps(doc, sort_keys=True) + "\n"
        try:
            with open(path, "a", encoding="utf-8") as fh:
                fh.write(line)
                fh.flush()
                os.fsync(fh.fileno())
        except OSError as exc:
            if exc.errno == errno.ENOSPC:
                raise StorageFull(str(exc)) from exc
            raise

    @staticmethod
    def _read_lines(path: Path) -> list[dict[str, Any]]:
        if not path.exists():
            return []
        out = []
        for line in path.read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError:
                break  # torn tail from an interrupted append
        return out

    def collect_garbage(self) -> list[str]:
        """Remove staging leftovers from interrupted writes."""
        removed = []
        for stray in self.root.rglob(".stage-*"):
            stray.unlink(missing_ok=True)
            removed.append(stray.name)
        return removed

    def _build_scan_index(self) -> None:
        for profile in self.root.glob("patients/*/profile.json"):
            pid = profile.parent.name
            scans_dir = profile.parent / "scans"
            if not scans_dir.is_dir():
                continue
            for meta in scans_dir.glob("*/meta.json"):
                self._scan_index[meta.parent.name] = pid

    def _patient_lock(self, patient_id: str) -> threading.RLock:
        with self._global_lock:
            return self._patient_locks.setdefault(patient_id, threading.RLock())

    def _patient_dir(self, patient_id: str) -> Path:
        d = self.root / "patients" / patient_id
        if not (d / "profile.json").exists():
            raise UnknownPatient(f"no patient {patient_id!r}")
        return d

    # -- users and authentication ---------------------------------------------

    def _read_users(self) -> list[dict[str, Any]]:
        return json.loads((self.root / "users.json").read_text())["users"]

    def add_user(self, user_id: str, display_name: str, role: str, secret: str) -> User:
        _require_id(user_id, "user_id")
        if role not in ("patient", "clinician"):
            raise ValueError(f"role must be patient or clinician, not {role!r}")
        salt = secrets.token_hex(16)
        digest = hashlib.pbkdf2_hmac(
            "sha256", secret.encode(), bytes.fromhex(salt), PBKDF2_ITERATIONS
        ).hex()
        with self._global_lock:
            users = self._read_users()
            if any(u["user_id"] == user_id for u in users):
                raise ValueError(f"user {user_id!r} already exists")
            users.append(
                {
                    "user_id": user_id,
                    "display_name": display_name,
                    "role": role,
                    "salt": salt,
                    "hash": digest,
                    "iterations": PBKDF2_ITERATIONS,
                }
            )
            self._atomic_write(self.root / "users.json", _json_bytes({"users": users}))
        self.append_audit({"action": "user_added", "user_id": user_id, "role": role})
        return User(user_id, display_name, role)

    def get_user(self, user_id: str) -> User:
        for u in self._read_users():
            if u["user_id"] == user_id:
                return User(u["user_id"], u["display_name"], u["role"])
        raise UnknownUser(f"no user {user_id!r}")

    def authenticate(self, user_id: str, secret: str) -> str:
        """Issue an opaque session token; one generic failure for unknown
        user and wrong secret alike."""
        record = next((u for u in self._read_users() if u["user_id"] == user_id), None)
        # Always burn one hash so unknown users cost the same as wrong secrets.
        salt = record["salt"] if record else "00" * 16
        iterations = record["iterations"] if record else PBKDF2_ITERATIONS
        digest = hashlib.pbkdf2_hmac(
            "sha256", secret.encode(), bytes.fromhex(salt), iterations
        ).hex()
        if record is None or not hmac.compare_digest(digest, record["hash"]):
            raise BadCredentials("unknown user or wrong secret")
        token = secrets.token_hex(16)  # 128 bits
        with self._global_lock:
            self._tokens[token] = (user_id, self.clock() + self.token_ttl)
        return token

    def resolve_token(self, token: str) -> User:
        with self._global_lock:
            entry = self._tokens.get(token)
            if entry is not None and entry[1] <= self.clock():
                del self._tokens[token]
                entry = None
        if entry is None:
            raise NotAuthenticated("missing, unknown, or expired token")
        return self.get_user(entry[0])

    # -- patients and grants --------------------------------------------------

    def create_patient(self, patient_id: str, owner_user_id: str, display_name: str) -> None:
        _require_id(patient_id, "patient_id")
        owner = self.get_user(owner_user_id)
        if owner.role != "patient":
            raise ValueError("patient record owner must have the patient role")
        if self.patient_for_owner(owner_user_id) is not None:
            raise ValueError(f"user {owner_user_id!r} already owns a patient record")
        with self._patient_lock(patient_id):
            d = self.root / "patients" / patient_id
            if (d / "profile.json").exists():
                raise ValueError(f"patient {patient_id!r} already exists")
            profile = {
                "patient_id": patient_id,
                "display_name": display_name,
                "owner": owner_user_id,
                "created_at": self.clock(),
                "grants": [],
                "baselines": {},
            }
            self._atomic_write(d / "profile.json", _json_bytes(profile))
        self.append_audit({"action": "patient_created", "patient_id": patient_id})

    def load_profile(self, patient_id: str) -> dict[str, Any]:
        return json.loads((self._patient_dir(patient_id) / "profile.json").read_text())

    def _save_profile(self, patient_id: str, profile: dict[str, Any]) -> None:
        d = self._patient_dir(patient_id)
        self._atomic_write(d / "profile.json", _json_bytes(profile))

    def list_patients(self) -> list[str]:
        return sorted(p.parent.name for p in self.root.glob("patients/*/profile.json"))

    def patient_for_owner(self, user_id: str) -> str | None:
        for pid in self.list_patients():
            if self.load_profile(pid)["owner"] == user_id:
                return pid
        return None

    def grant_access(self, patient_id: str, clinician_id: str) -> None:
        """Activate a grant; at most one active per (patient, clinician)."""
        clinician = self.get_user(clinician_id)
        if clinician.role != "clinician":
            raise ValueError("grants go to clinician users")
        with self._patient_lock(patient_id):
            profile = self.load_profile(patient_id)
            if any(
                g["clinician_id"] == clinician_id and g["revoked_at"] is None
                for g in profile["grants"]
            ):
                return  # already active
            profile["grants"].append(
                {
                    "clinician_id": clinician_id,
                    "granted_at": self.clock(),
                    "revoked_at": None,
                }
            )
            self._save_profile(patient_id, profile)
        self.append_audit(
            {"action": "grant", "patient_id": patient_id, "clinician_id": clinician_id}
        )

    def revoke_access(self, patient_id: str, clinician_id: str) -> None:
        with self._patient_lock(patient_id):
            profile = self.load_profile(patient_id)
            for g in profile["grants"]:
                if g["clinician_id"] == clinician_id and g["revoked_at"] is None:
                    g["revoked_at"] = self.clock()
            self._save_profile(patient_id, profile)
        self.append_audit(
            {"action": "revoke", "patient_id": patient_id, "clinician_id": clinician_id}
        )

    def has_active_grant(self, patient_id: str, clinician_id: str) -> bool:
        profile = self.load_profile(patient_id)
        return any(
            g["clinician_id"] == clinician_id and g["revoked_at"] is None
            for g in profile["grants"]
        )

    def granted_clinicians(self, patient_id: str) -> list[str]:
        profile = self.load_profile(patient_id)
        return sorted(
            {g["clinician_id"] for g in profile["grants"] if g["revoked_at"] is None}
        )

    def authorize(self, actor: User, patient_id: str, action: str) -> bool:
        """Deny-by-default access decision; never raises on deny."""
        if action not in ACTIONS:
            raise ValueError(f"unknown action {action!r}")
        try:
            profile = self.load_profile(patient_id)
        except UnknownPatient:
            return False
        if actor.role == "patient":
            return profile["owner"] == actor.user_id
        if actor.role == "clinician":
            if action not in _CLINICIAN_GRANTED:
                return False
            return self.has_active_grant(patient_id, actor.user_id)
        return False

    def require(self, actor: User, patient_id: str, action: str) -> None:
        if not self.authorize(actor, patient_id, action):
            raise Unauthorized(f"{actor.user_id} may not {action} patient {patient_id}")

    # -- scans ----------------------------------------------------------------

    def next_scan_id(self, patient_id: str) -> str:
        """Allocate and reserve the next scan id.

        The scan directory itself is the reservation (mkdir is atomic),
        so two concurrent saves can never share an id. A reserved
        directory without meta.json stays invisible to readers.
        """
        with self._patient_lock(patient_id):
            scans_dir = self._patient_dir(patient_id) / "scans"
            scans_dir.mkdir(exist_ok=True)
            n = len(list(scans_dir.glob("*/")))
            while True:
                n += 1
                candidate = f"{patient_id}.{n:04d}"
                try:
                    (scans_dir / candidate).mkdir()
                    return candidate
                except FileExistsError:
                    continue

    def save_scan(
        self,
        record: ScanRecord,
        raw_png: bytes,
        canonical_png: bytes,
        thumb_png: bytes,
        analysis: dict[str, Any],
    ) -> ScanRecord:
        """Atomic commit: files first, meta.json (the commit point) last."""
        pid = record.patient_id
        with self._patient_lock(pid):
            scan_dir = self._patient_dir(pid) / "scans" / record.scan_id
            transform_bytes = _json_bytes(record.transform)
            analysis_bytes = _json_bytes(analysis)
            payloads = {
                "raw.png": raw_png,
                "canonical.png": canonical_png,
                "thumb.png": thumb_png,
                "transform.json": transform_bytes,
                "analysis.json": analysis_bytes,
            }
            for name in SCAN_FILES:
                self._atomic_write(scan_dir / name, payloads[name])
            meta = record.to_dict()
            meta["sha256"] = {name: sha256_hex(payloads[name]) for name in SCAN_FILES}
            self._atomic_write(scan_dir / "meta.json", _json_bytes(meta))
            self._scan_index[record.scan_id] = pid
        self.append_audit(
            {"action": "scan_saved", "patient_id": pid, "scan_id": record.scan_id}
        )
        return record

    def patient_of_scan(self, scan_id: str) -> str:
        pid = self._scan_index.get(scan_id)
        if pid is None:
            raise UnknownScan(f"no scan {scan_id!r}")
        return pid

    def _scan_dir(self, scan_id: str) -> Path:
        return self._patient_dir(self.patient_of_scan(scan_id)) / "scans" / scan_id

    def load_scan(self, scan_id: str, verify: bool = True) -> ScanRecord:
        scan_dir = self._scan_dir(scan_id)
        meta_path = scan_dir / "meta.json"
        if not meta_path.exists():
            raise UnknownScan(f"no scan {scan_id!r}")
        meta = json.loads(meta_path.read_text())
        if verify:
            for name, want in meta["sha256"].items():
                got = sha256_hex((scan_dir / name).read_bytes())
                if got != want:
                    raise CorruptRecord(f"{scan_id}/{name}: checksum mismatch")
        return ScanRecord(
            scan_id=meta["scan_id"],
            patient_id=meta["patient_id"],
            foot=meta["foot"],
            capture_time=meta["capture_time"],
            dpi=meta["dpi"],
            transform=meta["transform"],
        )

    def scan_file(self, scan_id: str, name: str) -> Path:
        if name not in SCAN_FILES:
            raise ValueError(f"unknown scan file {name!r}")
        path = self._scan_dir(scan_id) / name
        if not path.exists():
            raise UnknownScan(f"no scan {scan_id!r}")
        return path

    def list_scans(self, patient_id: str, foot: str | None = None) -> list[ScanRecord]:
        """Committed scans in capture_time order (scan_id breaks ties)."""
        scans_dir = self._patient_dir(patient_id) / "scans"
        records = []
        if scans_dir.is_dir():
            for meta in scans_dir.glob("*/meta.json"):
                record = self.load_scan(meta.parent.name, verify=False)
                if foot is None or record.foot == foot:
                    records.append(record)
        records.sort(key=lambda r: (r.capture_time, r.scan_id))
        return records

    # -- baselines ------------------------------------------------------------

    def get_baseline(self, patient_id: str, foot: str) -> str | None:
        return self.load_profile(patient_id)["baselines"].get(_require_foot(foot))

    def set_baseline(self, patient_id: str, foot: str, scan_id: str) -> None:
        with self._patient_lock(patient_id):
            profile = self.load_profile(patient_id)
            profile["baselines"][_require_foot(foot)] = scan_id
            self._save_profile(patient_id, profile)

    # -- ROIs and notes (documents owned by the roi module) --------------------

    def load_rois(self, patient_id: str) -> list[dict[str, Any]]:
        path = self._patient_dir(patient_id) / "rois.json"
        if not path.exists():
            return []
        return json.loads(path.read_text())

    def save_rois(self, patient_id: str, rois: list[dict[str, Any]]) -> None:
        with self._patient_lock(patient_id):
            self._atomic_write(self._patient_dir(patient_id) / "rois.json", _json_bytes(rois))

    def append_note(self, patient_id: str, roi_id: str, note: dict[str, Any]) -> None:
        with self._patient_lock(patient_id):
            self._append_line(self._patient_dir(patient_id) / "notes" / f"{roi_id}.jsonl", note)

    def read_notes(self, patient_id: str, roi_id: str) -> list[dict[str, Any]]:
        return self._read_lines(self._patient_dir(patient_id) / "notes" / f"{roi_id}.jsonl")

    # -- jobs (document owned by the capture controller) ------------------------

    def load_jobs(self) -> list[dict[str, Any]]:
        path = self.root / "jobs.json"
        if not path.exists():
            return []
        return json.loads(path.read_text())["jobs"]

    def save_jobs(self, jobs: list[dict[str, Any]]) -> None:
        with self._global_lock:
            self._atomic_write(self.root / "jobs.json", _json_bytes({"jobs": jobs}))

    # -- exports and audit ------------------------------------------------------

    def write_export(self, export_id: str, data: bytes) -> Path:
        path = self.root / "exports" / f"{export_id}.zip"
        self._atomic_write(path, data)
        return path

    def export_path(self, export_id: str) -> Path:
        return self.root / "exports" / f"{export_id}.zip"

    def append_audit(self, entry: dict[str, Any]) -> None:
        with self._audit_lock:
            doc = {"ts": self.clock(), **entry}
            self._append_line(self.root / "audit.log", doc)

    def read_audit(self) -> list[dict[str, Any]]:
        return self._read_lines(self.root / "audit.log")

    # -- housekeeping -----------------------------------------------------------

    def iter_scan_dirs(self) -> Iterator[Path]:
        yield from self.root.glob("patients/*/scans/*/")
