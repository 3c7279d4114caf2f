/**
 * Produce a shareable bundle of one region's history. Recipients come
 * from the record's active grants; an optional message is stored by the
 * server in the region's note log, which renders here as the running
 * record of what was shared with whom.
 */

import { ApiClient, ApiError, Note } from "./api.js";
import { clear, downloadLink, el, fmtDate } from "./dom.js";

export class ShareView {
  private recipientSelect: HTMLSelectElement;
  private messageInput: HTMLTextAreaElement;
  private shareButton: HTMLButtonElement;
  private downloads: HTMLDivElement;
  private noteLog: HTMLUListElement;
  private status: HTMLElement;

  constructor(
    private container: HTMLElement,
    private api: ApiClient,
    private patientId: string,
    private roiId: string,
  ) {
    this.recipientSelect = el("select", { class: "recipient-select" });
    this.messageInput = el("textarea", {
      class: "share-message",
      placeholder: "message for the recipient (kept in the note log)",
    });
    this.shareButton = el("button", { class: "share-roi" }, ["Share"]);
    this.downloads = el("div", { class: "downloads" });
    this.noteLog = el("ul", { class: "note-log" });
    this.status = el("p", { class: "status" });

    this.shareButton.addEventListener("click", () => void this.share());
    container.append(
      el("div", { class: "share-form" }, [
        this.recipientSelect,
        this.messageInput,
        this.shareButton,
      ]),
      this.downloads,
      el("h3", {}, ["Communication log"]),
      this.noteLog,
      this.status,
    );
  }

  async load(): Promise<void> {
    const grants = await this.api.listGrants(this.patientId);
    if (grants.clinicians.length === 0) {
      this.status.textContent =
        "No clinician currently has access to this record; grant access before sharing.";
      this.shareButton.disabled = true;
    }
    for (const clinician of grants.clinicians) {
      this.recipientSelect.append(el("option", { value: clinician }, [clinician]));
    }
    await this.loadNotes();
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

  private async share(): Promise<void> {
    const recipient = this.recipientSelect.value;
    if (!recipient) {
      return;
    }
    const message = this.messageInput.value.trim();
    this.status.textContent = "";
    try {
      const result = await this.api.exportRoi(this.roiId, recipient, message || undefined);
      this.downloads.append(
        downloadLink(result.blob, result.filename, `Download bundle ${result.exportId}`),
      );
      this.messageInput.value = "";
      await this.loadNotes(); // the message lands in the log server-side
    } catch (err) {
      this.status.textContent = err instanceof ApiError ? err.message : String(err);
    }
  }
}
