/**
 * Two clicks on the canonical image define a segment; the server converts
 * its length to millimeters using the scan's dpi, and the value shown is
 * exactly what the server returned. The toolbar mirrors the analyzers the
 * server ran, so new server-side tools appear without a client change.
 */

import { ApiClient, ApiError } from "./api.js";
import { el } from "./dom.js";

export class MeasureView {
  private points: [number, number][] = [];
  private surface: HTMLDivElement;
  private readout: HTMLElement;
  private toolbar: HTMLDivElement;
  private status: HTMLElement;

  constructor(
    private container: HTMLElement,
    private api: ApiClient,
    private scanId: string,
  ) {
    this.surface = el("div", { class: "measure-surface" });
    this.readout = el("p", { class: "measure-readout" }, ["click two points"]);
    this.toolbar = el("div", { class: "toolbar" });
    this.status = el("p", { class: "status" });
    this.surface.addEventListener("click", (e) => void this.onClick(e));
    container.append(this.surface, this.readout, this.toolbar, this.status);
  }

  async load(): Promise<void> {
    try {
      const blob = await this.api.fetchImage(this.scanId, "canonical");
      const img = el("img", { class: "measure-image", alt: this.scanId });
      img.src = URL.createObjectURL(blob);
      this.surface.prepend(img);
    } catch {
      // measuring still works from bare coordinates
    }
    try {
      const report = await this.api.analysis(this.scanId);
      for (const name of Object.keys(report.analyzers).sort()) {
        this.toolbar.append(el("button", { class: "tool", "data-tool": name }, [name]));
      }
    } catch {
      // no analysis stored; toolbar stays empty
    }
  }

  private async onClick(e: MouseEvent): Promise<void> {
    const bounds = this.surface.getBoundingClientRect();
    const point: [number, number] = [e.clientX - bounds.left, e.clientY - bounds.top];
    this.points.push(point);
    this.mark(point);

    if (this.points.length < 2) {
      this.readout.textContent = "click the second point";
      return;
    }
    const [p1, p2] = this.points;
    this.points = [];
    try {
      const mm = await this.api.measure(this.scanId, p1, p2);
      this.readout.dataset.mm = String(mm);
      this.readout.textContent = `${mm.toFixed(1)} mm`;
    } catch (err) {
      this.status.textContent = err instanceof ApiError ? err.message : String(err);
    }
  }

  private mark(point: [number, number]): void {
    const dot = el("div", { class: "measure-point" });
    dot.style.left = `${point[0]}px`;
    dot.style.top = `${point[1]}px`;
    this.surface.append(dot);
  }
}
