/**
 * Horizontal strip of one region's crops across all registered scans,
 * oldest-first or newest-first, with a notepad underneath. Crops arrive
 * base64-encoded inside the timeline document, so no extra image
 * requests are needed.
 */

import { ApiClient, ApiError, Note } from "./api.js";
import { clear, el, fmtDate } from "./dom.js";

export class TimelineView {
  direction: "forward" | "backward" = "forward";

  private strip: HTMLDivElement;
  private skippedBadge: HTMLElement;
  private noteLog: HTMLUListElement;
  private noteInput: HTMLTextAreaElement;
  private status: HTMLElement;

  constructor(
    private container: HTMLElement,
    private api: ApiClient,
    private roiId: string,
  ) {
    this.strip = el("div", { class: "timeline-strip" });
    this.skippedBadge = el("span", { class: "skipped-badge" });
    this.noteLog = el("ul", { class: "note-log" });
    this.noteInput = el("textarea", { class: "note-input", placeholder: "add a note" });
    this.status = el("p", { class: "status" });

    const toggle = el("button", { class: "direction-toggle" }, ["Reverse order"]);
    toggle.addEventListener("click", () => {
      this.direction = this.direction === "forward" ? "backward" : "forward";
      void this.loadStrip();
    });

    const addNote = el("button", { class: "add-note" }, ["Add note"]);
    addNote.addEventListener("click", () => void this.submitNote());

    container.append(
      el("div", { class: "timeline-bar" }, [toggle, this.skippedBadge]),
      this.strip,
      el("div", { class: "notepad" }, [this.noteLog, this.noteInput, addNote]),
      this.status,
    );
  }

  async load(): Promise<void> {
    await this.loadStrip();
    await this.loadNotes();
  }

  async loadStrip(): Promise<void> {
    try {
      const timeline = await this.api.timeline(this.roiId, this.direction);
      clear(this.strip);
      for (const entry of timeline.entries) {
        const img = el("img", {
          class: "crop",
          alt: entry.scan_id,
          src: `data:image/png;base64,${entry.crop_png_base64}`,
        });
        img.dataset.scanId = entry.scan_id;
        this.strip.append(
          el("figure", { class: "timeline-entry" }, [
            img,
            el("figcaption", {}, [fmtDate(entry.capture_time)]),
          ]),
        );
      }
      this.skippedBadge.textContent =
        timeline.skipped > 0 ? `${timeline.skipped} unregistered scans skipped` : "";
    } catch (err) {
      this.status.textContent = err instanceof ApiError ? err.message : String(err);
    }
  }

  async loadNotes(): Promise<void> {
    const notes = await this.api.listNotes(this.roiId);
    clear(this.noteLog);
    for (const note of notes) {
      this.noteLog.append(this.noteItem(note));
    }
  }

  private noteItem(note: Note): HTMLLIElement {
    return el("li", { class: "note" }, [
      el("span", { class: "note-author" }, [note.author]),
      el("span", { class: "note-date" }, [fmtDate(note.ts)]),
      el("span", { class: "note-text" }, [note.text]),
    ]);
  }

  private async submitNote(): Promise<void> {
    const text = this.noteInput.value.trim();
    if (!text) {
      return;
    }
    try {
      const note = await this.api.addNote(this.roiId, text);
      this.noteLog.append(this.noteItem(note));
      this.noteInput.value = "";
    } catch (err) {
      this.status.textContent = err instanceof ApiError ? err.message : String(err);
    }
  }
}
