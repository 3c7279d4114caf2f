/**
 * Rectangle editor over the canonical baseline image.
 *
 * Proposed rectangles render red and can be created by drag, moved,
 * resized by corner handles, and deleted; approved ones render green and
 * are locked. Geometry lives in geometry.ts; this file owns pointer
 * state and the DOM. Every mutation round-trips through the API, and the
 * server's verdict (e.g. a rectangle outside the foot) is shown inline.
 */

import { ApiClient, ApiError, Roi } from "./api.js";
import { clear, el } from "./dom.js";
import {
  Handle,
  HANDLES,
  Rect,
  contains,
  fromArray,
  handlePosition,
  hitHandle,
  moveBy,
  normalize,
  resizeFromHandle,
  roundRect,
  toArray,
} from "./geometry.js";
import { StateStore } from "./state.js";

const HANDLE_TOL = 6;

type DragMode =
  | { kind: "idle" }
  | { kind: "draw"; startX: number; startY: number }
  | { kind: "move"; roiId: string | null; startX: number; startY: number; original: Rect }
  | { kind: "resize"; roiId: string | null; handle: Handle; original: Rect };

export class RoiEditor {
  rois: Roi[] = [];
  selectedId: string | null = null;

  private drag: DragMode = { kind: "idle" };
  private surface: HTMLDivElement;
  private boxes: HTMLDivElement;
  private status: HTMLElement;
  private labelInput: HTMLInputElement;
  private saveButton: HTMLButtonElement;
  private approveButton: HTMLButtonElement;
  private keyHandler: (e: KeyboardEvent) => void;

  constructor(
    private container: HTMLElement,
    private api: ApiClient,
    private state: StateStore,
    private patientId: string,
    private foot: "left" | "right",
  ) {
    this.surface = el("div", { class: "editor-surface" });
    this.boxes = el("div", { class: "editor-boxes" });
    this.surface.append(this.boxes);
    this.status = el("p", { class: "status" });
    this.labelInput = el("input", {
      class: "roi-label",
      placeholder: "label for the new region",
    });
    this.saveButton = el("button", { class: "save-roi", disabled: "" }, ["Save region"]);
    this.approveButton = el("button", { class: "approve-roi", disabled: "" }, ["Approve"]);

    this.saveButton.addEventListener("click", () => void this.saveUnsaved());
    this.approveButton.addEventListener("click", () => void this.approveSelected());
    this.surface.addEventListener("mousedown", (e) => this.onDown(e));
    this.surface.addEventListener("mousemove", (e) => this.onMove(e));
    this.surface.addEventListener("mouseup", () => void this.onUp());
    this.keyHandler = (e) => {
      if (e.key === "Delete" || e.key === "Backspace") {
        void this.deleteSelection();
      }
    };
    document.addEventListener("keydown", this.keyHandler);

    container.append(
      this.surface,
      el("div", { class: "editor-controls" }, [
        this.labelInput,
        this.saveButton,
        this.approveButton,
      ]),
      this.status,
    );
  }

  destroy(): void {
    document.removeEventListener("keydown", this.keyHandler);
    clear(this.container);
  }

  async load(): Promise<void> {
    const scans = await this.api.listScans(this.patientId, this.foot);
    if (scans.length > 0) {
      try {
        const blob = await this.api.fetchImage(scans[0].scan_id, "canonical");
        const img = el("img", { class: "editor-image", alt: "baseline" });
        img.src = URL.createObjectURL(blob);
        this.surface.prepend(img);
      } catch {
        // editor still works without the bitmap (e.g. in tests)
      }
    } else {
      this.status.textContent = "No scans for this foot yet.";
    }
    await this.refresh();
  }

  async refresh(): Promise<void> {
    const all = await this.api.listRois(this.patientId);
    this.rois = all.filter((r) => r.foot === this.foot && r.status !== "deleted");
    this.render();
  }

  /** Image-pixel coordinates for a pointer event on the surface. */
  private toImage(e: MouseEvent): [number, number] {
    const bounds = this.surface.getBoundingClientRect();
    return [e.clientX - bounds.left, e.clientY - bounds.top];
  }

  private findAt(x: number, y: number): Roi | null {
    // last drawn wins, matching visual stacking
    for (let i = this.rois.length - 1; i >= 0; i--) {
      if (contains(fromArray(this.rois[i].rect), x, y)) {
        return this.rois[i];
      }
    }
    return null;
  }

  private selectedRect(): Rect | null {
    const unsaved = this.state.get().unsavedRect;
    if (this.selectedId === null) {
      return unsaved;
    }
    const roi = this.rois.find((r) => r.id === this.selectedId);
    return roi ? fromArray(roi.rect) : null;
  }

  private onDown(e: MouseEvent): void {
    const [x, y] = this.toImage(e);
    this.status.textContent = "";

    const current = this.selectedRect();
    if (current !== null) {
      const handle = hitHandle(current, x, y, HANDLE_TOL);
      const editable =
        this.selectedId === null ||
        this.rois.find((r) => r.id === this.selectedId)?.status === "proposed";
      if (handle !== null && editable) {
        this.drag = { kind: "resize", roiId: this.selectedId, handle, original: current };
        return;
      }
    }

    const hit = this.findAt(x, y);
    if (hit !== null) {
      this.selectedId = hit.id;
      this.state.setUnsavedRect(null);
      if (hit.status === "proposed") {
        this.drag = {
          kind: "move",
          roiId: hit.id,
          startX: x,
          startY: y,
          original: fromArray(hit.rect),
        };
      }
      this.render();
      return;
    }

    if (this.state.get().unsavedRect !== null && contains(this.state.get().unsavedRect!, x, y)) {
      this.selectedId = null;
      this.drag = {
        kind: "move",
        roiId: null,
        startX: x,
        startY: y,
        original: this.state.get().unsavedRect!,
      };
      return;
    }

    this.selectedId = null;
    this.drag = { kind: "draw", startX: x, startY: y };
    this.state.setUnsavedRect({ x, y, w: 0, h: 0 });
    this.render();
  }

  private onMove(e: MouseEvent): void {
    if (this.drag.kind === "idle") {
      return;
    }
    const [x, y] = this.toImage(e);
    if (this.drag.kind === "draw") {
      const { startX, startY } = this.drag;
      this.state.setUnsavedRect(
        normalize({ x: startX, y: startY, w: x - startX, h: y - startY }),
      );
    } else if (this.drag.kind === "move") {
      const moved = moveBy(this.drag.original, x - this.drag.startX, y - this.drag.startY);
      this.applyDragRect(this.drag.roiId, moved);
    } else {
      const resized = resizeFromHandle(this.drag.original, this.drag.handle, x, y);
      this.applyDragRect(this.drag.roiId, resized);
    }
    this.render();
  }

  private applyDragRect(roiId: string | null, rect: Rect): void {
    if (roiId === null) {
      this.state.setUnsavedRect(rect);
      return;
    }
    const roi = this.rois.find((r) => r.id === roiId);
    if (roi) {
      roi.rect = toArray(roundRect(rect));
    }
  }

  private async onUp(): Promise<void> {
    const finished = this.drag;
    this.drag = { kind: "idle" };
    if (finished.kind !== "move" && finished.kind !== "resize") {
      return;
    }
    if (finished.roiId === null) {
      return; // unsaved rect stays local until Save
    }
    const roi = this.rois.find((r) => r.id === finished.roiId);
    if (!roi) {
      return;
    }
    try {
      const saved = await this.api.moveRoi(this.patientId, roi.id, roi.rect);
      roi.rect = saved.rect;
    } catch (err) {
      roi.rect = toArray(finished.original); // server said no; snap back
      this.showError(err);
    }
    this.render();
  }

  private async saveUnsaved(): Promise<void> {
    const rect = this.state.get().unsavedRect;
    if (rect === null) {
      return;
    }
    const label = this.labelInput.value.trim() || "unlabeled";
    try {
      const saved = await this.api.createRoi(
        this.patientId,
        this.foot,
        toArray(roundRect(rect)),
        label,
      );
      this.state.setUnsavedRect(null);
      this.labelInput.value = "";
      this.selectedId = saved.id;
      await this.refresh();
    } catch (err) {
      this.showError(err);
    }
  }

  private async approveSelected(): Promise<void> {
    if (this.selectedId === null) {
      return;
    }
    try {
      await this.api.approveRoi(this.selectedId);
      await this.refresh();
    } catch (err) {
      this.showError(err);
    }
  }

  private async deleteSelection(): Promise<void> {
    if (this.state.get().unsavedRect !== null) {
      this.state.setUnsavedRect(null);
      this.render();
      return;
    }
    if (this.selectedId === null) {
      return;
    }
    try {
      await this.api.deleteRoi(this.selectedId);
      this.selectedId = null;
      await this.refresh();
    } catch (err) {
      this.showError(err);
    }
  }

  private showError(err: unknown): void {
    this.status.textContent = err instanceof ApiError ? err.message : String(err);
    this.render();
  }

  private render(): void {
    clear(this.boxes);
    for (const roi of this.rois) {
      this.boxes.append(this.box(fromArray(roi.rect), roi.status, roi.id, roi.label));
    }
    const unsaved = this.state.get().unsavedRect;
    if (unsaved !== null) {
      this.boxes.append(this.box(unsaved, "proposed", null, "(unsaved)"));
    }
    this.saveButton.disabled = unsaved === null;
    const selected = this.rois.find((r) => r.id === this.selectedId);
    this.approveButton.disabled = !selected || selected.status !== "proposed";
  }

  private box(rect: Rect, status: string, roiId: string | null, label: string): HTMLDivElement {
    const isSelected = roiId !== null ? roiId === this.selectedId : true;
    const classes = ["roi-box", status];
    if (roiId === null) {
      classes.push("unsaved");
    }
    if (isSelected) {
      classes.push("selected");
    }
    const node = el("div", {
      class: classes.join(" "),
      "data-status": status,
      "data-label": label,
    });
    if (roiId !== null) {
      node.dataset.roiId = roiId;
    }
    node.style.left = `${rect.x}px`;
    node.style.top = `${rect.y}px`;
    node.style.width = `${rect.w}px`;
    node.style.height = `${rect.h}px`;
    if (isSelected && status === "proposed") {
      for (const handle of HANDLES) {
        const [hx, hy] = handlePosition(rect, handle);
        const dot = el("div", { class: `handle ${handle}` });
        dot.style.left = `${hx - rect.x}px`;
        dot.style.top = `${hy - rect.y}px`;
        node.append(dot);
      }
    }
    return node;
  }
}
