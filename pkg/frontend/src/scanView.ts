/**
 * Request a capture on a configured device and watch the job until it
 * lands. Polling runs at a fixed 1 s cadence; a failed job leaves the
 * form enabled for another attempt.
 */

import { ApiClient, ApiError } from "./api.js";
import { clear, el } from "./dom.js";
import { StateStore } from "./state.js";

const POLL_MS = 1000;

export class ScanView {
  private deviceSelect: HTMLSelectElement;
  private footSelect: HTMLSelectElement;
  private startButton: HTMLButtonElement;
  private progress: HTMLElement;
  private result: HTMLDivElement;
  private timer: ReturnType<typeof setInterval> | null = null;

  constructor(
    private container: HTMLElement,
    private api: ApiClient,
    private state: StateStore,
    private patientId: string,
  ) {
    this.deviceSelect = el("select", { class: "device-select" });
    this.footSelect = el("select", { class: "foot-select" });
    for (const foot of ["left", "right"]) {
      this.footSelect.append(el("option", { value: foot }, [foot]));
    }
    this.footSelect.value = state.get().lastFoot;
    this.startButton = el("button", { class: "start-scan" }, ["Scan"]);
    this.progress = el("p", { class: "scan-progress" });
    this.result = el("div", { class: "scan-result" });

    this.startButton.addEventListener("click", () => void this.start());
    container.append(
      el("div", { class: "scan-form" }, [this.deviceSelect, this.footSelect, this.startButton]),
      this.progress,
      this.result,
    );
  }

  destroy(): void {
    if (this.timer !== null) {
      clearInterval(this.timer);
    }
    clear(this.container);
  }

  async load(): Promise<void> {
    const devices = await this.api.listDevices();
    for (const device of devices) {
      this.deviceSelect.append(
        el("option", { value: device.device_id }, [
          `${device.device_id} (${device.dpi} dpi)`,
        ]),
      );
    }
    if (devices.length === 0) {
      this.progress.textContent = "No scan devices are configured.";
      this.startButton.disabled = true;
    }
  }

  private async start(): Promise<void> {
    const foot = this.footSelect.value as "left" | "right";
    this.state.setLastFoot(foot); // survives leaving and reopening the view
    this.startButton.disabled = true;
    clear(this.result);
    try {
      const r = await this.api.requestScan(this.patientId, foot, this.deviceSelect.value);
      this.progress.textContent = "pending";
      this.watch(r.job_id);
    } catch (err) {
      this.progress.textContent = err instanceof ApiError ? err.message : String(err);
      this.startButton.disabled = false;
    }
  }

  private watch(jobId: string): void {
    this.timer = setInterval(() => {
      void (async () => {
        try {
          const snap = await this.api.pollJob(jobId);
          this.progress.textContent = snap.state;
          if (snap.state === "done" && snap.scan_id !== null) {
            this.stopWatching();
            await this.showDone(snap.scan_id);
          } else if (snap.state === "failed") {
            this.stopWatching();
            this.progress.textContent = `scan failed: ${snap.error ?? "unknown"}`;
            this.startButton.disabled = false; // offer another attempt
          }
        } catch (err) {
          this.stopWatching();
          this.progress.textContent = err instanceof ApiError ? err.message : String(err);
          this.startButton.disabled = false;
        }
      })();
    }, POLL_MS);
  }

  private stopWatching(): void {
    if (this.timer !== null) {
      clearInterval(this.timer);
      this.timer = null;
    }
  }

  private async showDone(scanId: string): Promise<void> {
    this.state.selectScan(scanId);
    this.startButton.disabled = false;
    const caption = el("p", { class: "scan-id" }, [scanId]);
    this.result.append(caption);
    try {
      const blob = await this.api.fetchImage(scanId, "thumb");
      const img = el("img", { class: "thumb", alt: scanId });
      img.src = URL.createObjectURL(blob);
      this.result.prepend(img);
    } catch {
      // thumbnail is cosmetic
    }
    try {
      const report = await this.api.analysis(scanId);
      this.result.append(
        el("p", { class: "analysis-summary" }, [
          `${report.blobs.length} finding(s) flagged`,
        ]),
      );
    } catch {
      // storage-only deployments have no analysis
    }
  }
}
