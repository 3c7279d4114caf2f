"""Domain error types shared across the package."""

from __future__ import annotations


class PedtrackError(Exception):
    """Base class for all domain errors."""

    code = "error"


class EmptyForeground(PedtrackError):
    """Segmentation found no plausible appendage on the platen."""

    code = "empty_foreground"


class DegeneratePose(PedtrackError):
    """A pose needed for alignment has no defined axis."""

    code = "degenerate_pose"


class NoOverlap(PedtrackError):
    """The initial alignment produced zero mask overlap."""

    code = "no_overlap"


class RegistrationRejected(PedtrackError):
    """Registration finished but did not meet the acceptance floor."""

    code = "registration_rejected"


class OutsideFoot(PedtrackError):
    """ROI rectangle does not intersect the baseline foot mask."""

    code = "outside_foot"


class IllegalTransition(PedtrackError):
    """Attempted state change not allowed by a status machine."""

    code = "illegal_transition"


class Unauthorized(PedtrackError):
    """Actor is not allowed to perform the action."""

    code = "unauthorized"


class BadCredentials(PedtrackError):
    """Login failed; identical for unknown user and wrong secret."""

    code = "bad_credentials"


class NotAuthenticated(PedtrackError):
    """Missing, invalid or expired session token."""

    code = "not_authenticated"


class UnknownDevice(PedtrackError):
    code = "unknown_device"


class UnknownJob(PedtrackError):
    code = "unknown_job"


class UnknownScan(PedtrackError):
    code = "unknown_scan"


class UnknownRoi(PedtrackError):
    code = "unknown_roi"


class UnknownUser(PedtrackError):
    code = "unknown_user"


class UnknownPatient(PedtrackError):
    code = "unknown_patient"


class UnregisteredScan(PedtrackError):
    """Scan has no converged transform; cannot map coordinates."""

    code = "unregistered_scan"


class DeviceTimeout(PedtrackError):
    """Capture device produced nothing within the configured budget."""

    code = "device_timeout"


class DecodeError(PedtrackError):
    """Captured file could not be decoded into an image."""

    code = "decode_error"


class EmptyRange(PedtrackError):
    """Requested export range matches no timeline entries."""

    code = "empty_range"


class StorageFull(PedtrackError):
    """Underlying filesystem refused a write."""

    code = "storage_full"


class CorruptRecord(PedtrackError):
    """Stored record failed its checksum on load."""

    code = "corrupt_record"
