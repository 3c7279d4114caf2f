"""Capture controller: job queue, device adapters, processing pipeline.

A scan request becomes a ScanJob that moves along a fixed state machine:

    pending -> capturing -> processing -> done | failed
    pending -> failed
    capturing -> failed

One worker thread per device keeps a physical scanner exclusive; decoded
images then flow into a small shared processing pool so a slow
registration never blocks another device's capture. The job table is
mutated under one lock and mirrored to jobs.json on every transition,
so a restart can mark interrupted work as failed instead of losing it.

Two adapters exist. The simulated device consumes the lexicographically
smallest file from a directory, which makes multi-scan tests
deterministic. The external_command device runs a configured shell
template with {OUT} replaced by the output path, suiting any
acquisition tool that can write a PNG.
"""

from __future__ import annotations

import json
import shlex
import subprocess
import tempfile
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from queue import Empty, Queue
from typing import Any, Callable

import numpy as np
from PIL import Image

from . import analysis as analysis_mod
from .errors import DeviceTimeout, IllegalTransition, UnknownDevice, UnknownJob
from .imaging import RasterImage, segment_foot
from .imgio import decode_png, png_bytes, read_image
from .registration import identity_result, register_to_baseline, resample
from .store import ScanRecord, Store, User

CAPTURE_TIMEOUT_SECONDS = 60.0
THUMBNAIL_MAX_SIDE = 512
PROCESSING_WORKERS = 2

JOB_STATES = ("pending", "capturing", "processing", "done", "failed")
ALLOWED_TRANSITIONS = frozenset(
    {
        ("pending", "capturing"),
        ("capturing", "processing"),
        ("processing", "done"),
        ("processing", "failed"),
        ("pending", "failed"),
        ("capturing", "failed"),
    }
)
TERMINAL_STATES = frozenset({"done", "failed"})


@dataclass(frozen=True)
class DeviceDescriptor:
    device_id: str
    kind: str  # "simulated" | "external_command"
    dpi: float
    directory: str | None = None
    command: str | None = None

    def __post_init__(self) -> None:
        if self.kind == "simulated":
            if not self.directory:
                raise ValueError(f"simulated device {self.device_id} needs a directory")
        elif self.kind == "external_command":
            if not self.command or "{OUT}" not in self.command:
                raise ValueError(
                    f"external_command device {self.device_id} needs a command with {{OUT}}"
                )
        else:
            raise ValueError(f"unknown device kind {self.kind!r}")


def load_devices(path: str | Path) -> dict[str, DeviceDescriptor]:
    """Parse devices.json: a list of descriptor objects."""
    entries = json.loads(Path(path).read_text())
    devices: dict[str, DeviceDescriptor] = {}
    for entry in entries:
        desc = DeviceDescriptor(
            device_id=entry["device_id"],
            kind=entry["kind"],
            dpi=float(entry["dpi"]),
            directory=entry.get("dir"),
            command=entry.get("command"),
        )
        if desc.device_id in devices:
            raise ValueError(f"duplicate device_id {desc.device_id!r}")
        if desc.kind == "simulated" and not Path(desc.directory or "").is_dir():
            raise ValueError(f"device {desc.device_id}: directory {desc.directory} missing")
        devices[desc.device_id] = desc
    return devices


@dataclass
class ScanJob:
    job_id: str
    patient_id: str
    foot: str
    device_id: str
    requested_by: str
    state: str = "pending"
    error: str | None = None
    scan_id: str | None = None
    timestamps: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "job_id": self.job_id,
            "patient_id": self.patient_id,
            "foot": self.foot,
            "device_id": self.device_id,
            "requested_by": self.requested_by,
            "state": self.state,
            "error": self.error,
            "scan_id": self.scan_id,
            "timestamps": dict(self.timestamps),
        }

    @staticmethod
    def from_dict(d: dict[str, Any]) -> "ScanJob":
        return ScanJob(
            job_id=d["job_id"],
            patient_id=d["patient_id"],
            foot=d["foot"],
            device_id=d["device_id"],
            requested_by=d["requested_by"],
            state=d["state"],
            error=d.get("error"),
            scan_id=d.get("scan_id"),
            timestamps=dict(d.get("timestamps", {})),
        )


# -- capture adapters --------------------------------------------------------


def capture(
    device: DeviceDescriptor,
    timeout: float = CAPTURE_TIMEOUT_SECONDS,
    poll_interval: float = 0.05,
) -> RasterImage:
    """Acquire one image from a device, or raise DeviceTimeout/DecodeError."""
    if device.kind == "simulated":
        return _capture_simulated(device, timeout, poll_interval)
    return _capture_command(device, timeout)


def _capture_simulated(
    device: DeviceDescriptor, timeout: float, poll_interval: float
) -> RasterImage:
    directory = Path(device.directory or "")
    deadline = time.monotonic() + timeout
    while True:
        candidates = sorted(p for p in directory.iterdir() if p.is_file())
        if candidates:
            path = candidates[0]
            try:
                img = read_image(path)
            finally:
                path.unlink(missing_ok=True)  # consume even when undecodable
            if abs(img.dpi - device.dpi) > 0.5 and img.dpi == 150.0:
                # File carried no resolution; trust the device's nominal dpi.
                img = RasterImage(img.pixels, device.dpi)
            return img
        if time.monotonic() >= deadline:
            raise DeviceTimeout(f"no file appeared in {directory} within {timeout:.0f}s")
        time.sleep(poll_interval)


def _capture_command(device: DeviceDescriptor, timeout: float) -> RasterImage:
    with tempfile.TemporaryDirectory(prefix="capture-") as tmp:
        out_path = Path(tmp) / "capture.png"
        argv = [
            arg.replace("{OUT}", str(out_path)) for arg in shlex.split(device.command or "")
        ]
        try:
            proc = subprocess.run(argv, capture_output=True, timeout=timeout, text=True)
        except subprocess.TimeoutExpired as exc:
            raise DeviceTimeout(f"{device.device_id}: no output within {timeout:.0f}s") from exc
        except OSError as exc:
            raise DeviceTimeout(f"{device.device_id}: {exc}") from exc
        if proc.returncode != 0:
            raise DeviceTimeout(
                f"{device.device_id}: exit {proc.returncode}: {proc.stderr.strip()}"
            )
        img = read_image(out_path)
        if abs(img.dpi - device.dpi) > 0.5 and img.dpi == 150.0:
            img = RasterImage(img.pixels, device.dpi)
        return img


# -- processing helpers -------------------------------------------------------


def make_thumbnail(img: RasterImage, max_side: int = THUMBNAIL_MAX_SIDE) -> RasterImage:
    """Shrink so the longest side is max_side, preserving aspect ratio."""
    longest = max(img.width, img.height)
    if longest <= max_side:
        return img
    ratio = max_side / longest
    nw = max(1, round(img.width * ratio))
    nh = max(1, round(img.height * ratio))
    resized = Image.fromarray(img.pixels, "RGB").resize((nw, nh), Image.LANCZOS)
    return RasterImage(np.asarray(resized, dtype=np.uint8), img.dpi * ratio)


def process_image(
    store: Store,
    patient_id: str,
    foot: str,
    img: RasterImage,
    capture_time: float | None = None,
    registry: analysis_mod.AnalyzerRegistry | None = None,
    run_analyzers: bool = True,
    clock: Callable[[], float] | None = None,
) -> str:
    """Segment, register, analyze, persist. Returns the new scan_id.

    The first scan that registers for a foot becomes its baseline and
    carries the identity transform by definition. With run_analyzers
    off the scan is stored and registered but the report stays empty
    (storage-only deployments).
    """
    mask = segment_foot(img)  # reject empty platens before any heavy work
    baseline_id = store.get_baseline(patient_id, foot)
    if baseline_id is None:
        result = identity_result()
        canonical = img
        canonical_mask = mask
    else:
        baseline = decode_png(store.scan_file(baseline_id, "canonical.png").read_bytes())
        result = register_to_baseline(img, baseline)
        canonical = resample(
            img, result.transform, baseline.width, baseline.height, baseline.dpi
        )
        canonical_mask = segment_foot(canonical)

    scan_id = store.next_scan_id(patient_id)
    tick = clock or store.clock
    if run_analyzers:
        report = analysis_mod.run_analyzers(
            scan_id, canonical, canonical_mask, registry or analysis_mod.default_registry(),
            clock=tick,
        ).to_dict()
    else:
        report = {"scan_id": scan_id, "analyzers": {}, "blobs": [], "produced_at": tick()}

    record = ScanRecord(
        scan_id=scan_id,
        patient_id=patient_id,
        foot=foot,
        capture_time=capture_time if capture_time is not None else tick(),
        dpi=img.dpi,
        transform=result.to_dict(),
    )
    store.save_scan(
        record,
        raw_png=png_bytes(img),
        canonical_png=png_bytes(canonical),
        thumb_png=png_bytes(make_thumbnail(canonical)),
        analysis=report,
    )
    if baseline_id is None:
        store.set_baseline(patient_id, foot, scan_id)
    return scan_id


class Controller:
    """Owns the job table, device workers, and the processing pool."""

    def __init__(
        self,
        store: Store,
        devices: dict[str, DeviceDescriptor],
        capture_timeout: float = CAPTURE_TIMEOUT_SECONDS,
        processing_workers: int = PROCESSING_WORKERS,
        run_analyzers: bool = True,
        registry: analysis_mod.AnalyzerRegistry | None = None,
        poll_interval: float = 0.05,
    ) -> None:
        self.store = store
        self.devices = dict(devices)
        self.capture_timeout = capture_timeout
        self.run_analyzers = run_analyzers
        self.registry = registry or analysis_mod.default_registry()
        self.poll_interval = poll_interval

        self._lock = threading.RLock()
        self._jobs: dict[str, ScanJob] = {}
        self._queues: dict[str, Queue] = {d: Queue() for d in self.devices}
        self._pool = ThreadPoolExecutor(max_workers=processing_workers)
        self._stop = threading.Event()
        self._workers: list[threading.Thread] = []

        self._recover()
        for device_id in self.devices:
            t = threading.Thread(
                target=self._device_worker, args=(device_id,), daemon=True,
                name=f"capture-{device_id}",
            )
            t.start()
            self._workers.append(t)

    # -- lifecycle -----------------------------------------------------------

    def _recover(self) -> None:
        """Adopt the persisted job table; work caught mid-flight failed."""
        for doc in self.store.load_jobs():
            job = ScanJob.from_dict(doc)
            if job.state in ("capturing", "processing"):
                job.state = "failed"
                job.error = "interrupted"
                job.timestamps["failed"] = self.store.clock()
            self._jobs[job.job_id] = job
        self._persist()
        # Unstarted work survives a restart: queue it again in request order.
        pending = sorted(
            (j for j in self._jobs.values() if j.state == "pending"),
            key=lambda j: j.timestamps.get("pending", 0.0),
        )
        for job in pending:
            if job.device_id in self._queues:
                self._queues[job.device_id].put(job.job_id)
            else:
                job.state = "failed"
                job.error = f"unknown device {job.device_id}"
                job.timestamps["failed"] = self.store.clock()
        self._persist()

    def shutdown(self, wait: bool = True) -> None:
        self._stop.set()
        self._pool.shutdown(wait=wait)
        for t in self._workers:
            t.join(timeout=5.0)

    def _persist(self) -> None:
        with self._lock:
            jobs = sorted(self._jobs.values(), key=lambda j: j.job_id)
            self.store.save_jobs([j.to_dict() for j in jobs])

    # -- public surface --------------------------------------------------------

    def enqueue_scan(self, actor: User, patient_id: str, foot: str, device_id: str) -> str:
        if device_id not in self.devices:
            raise UnknownDevice(f"no device {device_id!r}")
        self.store.load_profile(patient_id)  # UnknownPatient before authz
        self.store.require(actor, patient_id, "scan")
        if foot not in ("left", "right"):
            raise ValueError(f"foot must be 'left' or 'right', not {foot!r}")
        with self._lock:
            job = ScanJob(
                job_id=f"job-{len(self._jobs) + 1:05d}",
                patient_id=patient_id,
                foot=foot,
                device_id=device_id,
                requested_by=actor.user_id,
            )
            job.timestamps["pending"] = self.store.clock()
            self._jobs[job.job_id] = job
            self._persist()
        self._queues[device_id].put(job.job_id)
        return job.job_id

    def poll_job(self, job_id: str) -> dict[str, Any]:
        with self._lock:
            job = self._jobs.get(job_id)
            if job is None:
                raise UnknownJob(f"no job {job_id!r}")
            snapshot = job.to_dict()
        if snapshot["state"] == "done":
            snapshot["thumbnail"] = f"/api/v1/scans/{snapshot['scan_id']}/image?size=thumb"
        return snapshot

    def wait_for(self, job_id: str, timeout: float = 30.0) -> dict[str, Any]:
        """Poll until the job reaches a terminal state (test convenience)."""
        deadline = time.monotonic() + timeout
        while True:
            snapshot = self.poll_job(job_id)
            if snapshot["state"] in TERMINAL_STATES:
                return snapshot
            if time.monotonic() >= deadline:
                raise TimeoutError(f"job {job_id} still {snapshot['state']}")
            time.sleep(self.poll_interval)

    # -- state machine -----------------------------------------------------------

    def _transition(self, job: ScanJob, new_state: str, error: str | None = None) -> None:
        with self._lock:
            if (job.state, new_state) not in ALLOWED_TRANSITIONS:
                raise IllegalTransition(f"{job.state} -> {new_state}")
            job.state = new_state
            if error is not None:
                job.error = error
            job.timestamps[new_state] = self.store.clock()
            self._persist()

    # -- workers -------------------------------------------------------------------

    def _device_worker(self, device_id: str) -> None:
        queue = self._queues[device_id]
        device = self.devices[device_id]
        while not self._stop.is_set():
            try:
                job_id = queue.get(timeout=0.1)
            except Empty:
                continue
            with self._lock:
                job = self._jobs[job_id]
            try:
                self._transition(job, "capturing")
                img = capture(device, self.capture_timeout, self.poll_interval)
            except Exception as exc:  # adapter faults must never kill the worker
                self._transition(job, "failed", error=f"{type(exc).__name__}: {exc}")
                continue
            self._transition(job, "processing")
            self._pool.submit(self._process_job, job, img)

    def _process_job(self, job: ScanJob, img: RasterImage) -> None:
        try:
            scan_id = process_image(
                self.store,
                job.patient_id,
                job.foot,
                img,
                capture_time=job.timestamps["capturing"],
                registry=self.registry,
                run_analyzers=self.run_analyzers,
            )
        except Exception as exc:  # every pipeline or storage fault lands in the job
            self._transition(job, "failed", error=f"{type(exc).__name__}: {exc}")
            return
        with self._lock:
            job.scan_id = scan_id
        self._transition(job, "done")
