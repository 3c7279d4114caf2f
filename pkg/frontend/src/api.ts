/**
 * Typed client for the pedtrack HTTP API.
 *
 * The bearer token lives only in this object, never in storage: closing
 * the tab ends the session. Every non-2xx response carries the server's
 * error envelope and is thrown as an ApiError; a 401 on an authenticated
 * call means the session died and fires onSessionExpired.
 */

export interface SessionInfo {
  user_id: string;
  display_name: string;
  role: "patient" | "clinician";
  patient_id: string | null;
}

export interface Device {
  device_id: string;
  kind: string;
  dpi: number;
}

export interface JobSnapshot {
  job_id: string;
  patient_id: string;
  foot: string;
  device_id: string;
  requested_by: string;
  state: "pending" | "capturing" | "processing" | "done" | "failed";
  error: string | null;
  scan_id: string | null;
  timestamps: Record<string, number>;
  thumbnail?: string;
}

export interface ScanRecord {
  scan_id: string;
  patient_id: string;
  foot: string;
  capture_time: number;
  dpi: number;
  transform: Record<string, number | boolean>;
}

export interface AnalysisBlob {
  id: number;
  centroid: [number, number];
  bbox: [number, number, number, number];
  area_px: number;
  mean_score: number;
}

export interface AnalysisReport {
  scan_id: string;
  analyzers: Record<string, unknown>;
  blobs: AnalysisBlob[];
  produced_at: number;
}

export interface Roi {
  id: string;
  foot: string;
  rect: [number, number, number, number];
  label: string;
  status: "proposed" | "approved" | "deleted";
  created_by: string;
  created_at: number;
}

export interface TimelineEntry {
  scan_id: string;
  capture_time: number;
  quad: [number, number][];
  registration_converged: boolean;
  crop_png_base64: string;
}

export interface Timeline {
  roi: Roi;
  entries: TimelineEntry[];
  skipped: number;
}

export interface Note {
  ts: number;
  author: string;
  text: string;
}

export interface ExportResult {
  exportId: string;
  filename: string;
  blob: Blob;
}

export class ApiError extends Error {
  constructor(
    public status: number,
    public code: string,
    message: string,
  ) {
    super(message);
  }
}

export class ApiClient {
  private token: string | null = null;

  /** Called when an authenticated request comes back 401. */
  onSessionExpired: (() => void) | null = null;

  constructor(private baseUrl = "") {}

  get authenticated(): boolean {
    return this.token !== null;
  }

  logout(): void {
    this.token = null;
  }

  private headers(extra?: Record<string, string>): Record<string, string> {
    const h: Record<string, string> = { ...extra };
    if (this.token !== null) {
      h["Authorization"] = `Bearer ${this.token}`;
    }
    return h;
  }

  private async raise(response: Response): Promise<never> {
    let code = "error";
    let message = `HTTP ${response.status}`;
    try {
      const body = await response.json();
      if (body && body.error) {
        code = body.error.code;
        message = body.error.message;
      }
    } catch {
      // not an envelope; keep the fallback message
    }
    if (response.status === 401 && this.token !== null) {
      this.token = null;
      this.onSessionExpired?.();
    }
    throw new ApiError(response.status, code, message);
  }

  private async request<T>(method: string, path: string, body?: unknown): Promise<T> {
    const init: RequestInit = { method, headers: this.headers() };
    if (body !== undefined) {
      init.headers = this.headers({ "Content-Type": "application/json" });
      init.body = JSON.stringify(body);
    }
    const response = await fetch(this.baseUrl + path, init);
    if (!response.ok) {
      await this.raise(response);
    }
    return response.json() as Promise<T>;
  }

  async login(userId: string, secret: string): Promise<void> {
    const r = await this.request<{ token: string }>("POST", "/api/v1/auth/login", {
      user_id: userId,
      secret,
    });
    this.token = r.token;
  }

  me(): Promise<SessionInfo> {
    return this.request("GET", "/api/v1/me");
  }

  listDevices(): Promise<Device[]> {
    return this.request("GET", "/api/v1/devices");
  }

  requestScan(patientId: string, foot: string, deviceId: string): Promise<{ job_id: string }> {
    return this.request("POST", "/api/v1/scan", {
      patient_id: patientId,
      foot,
      device_id: deviceId,
    });
  }

  pollJob(jobId: string): Promise<JobSnapshot> {
    return this.request("GET", `/api/v1/jobs/${jobId}`);
  }

  listScans(patientId: string, foot?: string): Promise<ScanRecord[]> {
    const query = foot ? `?foot=${foot}` : "";
    return this.request("GET", `/api/v1/patients/${patientId}/scans${query}`);
  }

  /** Images need the auth header, so fetch them as blobs for object URLs. */
  async fetchImage(scanId: string, size: "full" | "canonical" | "thumb"): Promise<Blob> {
    const response = await fetch(
      `${this.baseUrl}/api/v1/scans/${scanId}/image?size=${size}`,
      { headers: this.headers() },
    );
    if (!response.ok) {
      await this.raise(response);
    }
    return response.blob();
  }

  analysis(scanId: string): Promise<AnalysisReport> {
    return this.request("GET", `/api/v1/scans/${scanId}/analysis`);
  }

  async measure(scanId: string, p1: [number, number], p2: [number, number]): Promise<number> {
    const r = await this.request<{ mm: number }>(
      "GET",
      `/api/v1/measure?scan=${scanId}&p1=${p1[0]},${p1[1]}&p2=${p2[0]},${p2[1]}`,
    );
    return r.mm;
  }

  listRois(patientId: string): Promise<Roi[]> {
    return this.request("GET", `/api/v1/patients/${patientId}/rois`);
  }

  createRoi(patientId: string, foot: string, rect: number[], label: string): Promise<Roi> {
    return this.request("POST", `/api/v1/patients/${patientId}/rois`, {
      foot,
      rect,
      label,
    });
  }

  moveRoi(patientId: string, roiId: string, rect: number[]): Promise<Roi> {
    return this.request("POST", `/api/v1/patients/${patientId}/rois`, {
      id: roiId,
      rect,
    });
  }

  approveRoi(roiId: string): Promise<Roi> {
    return this.request("POST", `/api/v1/rois/${roiId}/approve`);
  }

  deleteRoi(roiId: string): Promise<Roi> {
    return this.request("POST", `/api/v1/rois/${roiId}/delete`);
  }

  timeline(roiId: string, direction: "forward" | "backward"): Promise<Timeline> {
    return this.request("GET", `/api/v1/rois/${roiId}/timeline?direction=${direction}`);
  }

  listNotes(roiId: string): Promise<Note[]> {
    return this.request("GET", `/api/v1/rois/${roiId}/notes`);
  }

  addNote(roiId: string, text: string): Promise<Note> {
    return this.request("POST", `/api/v1/rois/${roiId}/notes`, { text });
  }

  listGrants(patientId: string): Promise<{ patient_id: string; clinicians: string[] }> {
    return this.request("GET", `/api/v1/patients/${patientId}/grants`);
  }

  async exportRoi(roiId: string, recipient: string, message?: string): Promise<ExportResult> {
    const response = await fetch(`${this.baseUrl}/api/v1/rois/${roiId}/export`, {
      method: "POST",
      headers: this.headers({ "Content-Type": "application/json" }),
      body: JSON.stringify({ recipient, message: message || null }),
    });
    if (!response.ok) {
      await this.raise(response);
    }
    const exportId = response.headers.get("X-Export-Id") ?? "export";
    return {
      exportId,
      filename: `${exportId}.zip`,
      blob: await response.blob(),
    };
  }
}
