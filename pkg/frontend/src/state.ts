/**
 * Single view-state object for the app.
 *
 * Two rules hold at all times: no view other than "login" is reachable
 * without a token, and an unsaved rectangle can only exist while the ROI
 * editor is open. Both are enforced here rather than trusted to callers.
 */

import type { Rect } from "./geometry.js";

export type View = "login" | "main" | "scan" | "roi-edit" | "measure" | "timeline" | "share";

export interface ViewState {
  view: View;
  authenticated: boolean;
  userId: string | null;
  role: "patient" | "clinician" | null;
  patientId: string | null;
  scanId: string | null;
  roiId: string | null;
  unsavedRect: Rect | null;
  lastFoot: "left" | "right";
}

export class StateStore {
  private state: ViewState = {
    view: "login",
    authenticated: false,
    userId: null,
    role: null,
    patientId: null,
    scanId: null,
    roiId: null,
    unsavedRect: null,
    lastFoot: "left",
  };

  private listeners: ((s: ViewState) => void)[] = [];

  get(): ViewState {
    return { ...this.state };
  }

  subscribe(fn: (s: ViewState) => void): void {
    this.listeners.push(fn);
  }

  private emit(): void {
    for (const fn of this.listeners) {
      fn(this.get());
    }
  }

  signIn(userId: string, role: "patient" | "clinician", patientId: string | null): void {
    this.state.authenticated = true;
    this.state.userId = userId;
    this.state.role = role;
    this.state.patientId = patientId;
    this.state.view = "main";
    this.emit();
  }

  /** Drop the whole session; the only reachable view is login again. */
  signOut(): void {
    this.state = {
      view: "login",
      authenticated: false,
      userId: null,
      role: null,
      patientId: null,
      scanId: null,
      roiId: null,
      unsavedRect: null,
      lastFoot: this.state.lastFoot,
    };
    this.emit();
  }

  navigate(view: View): void {
    if (view !== "login" && !this.state.authenticated) {
      throw new Error("not signed in");
    }
    if (view !== "roi-edit") {
      this.state.unsavedRect = null;
    }
    this.state.view = view;
    this.emit();
  }

  setUnsavedRect(rect: Rect | null): void {
    if (rect !== null && this.state.view !== "roi-edit") {
      throw new Error("unsaved rectangles belong to the ROI editor");
    }
    this.state.unsavedRect = rect;
    this.emit();
  }

  selectPatient(patientId: string): void {
    this.state.patientId = patientId;
    this.emit();
  }

  selectScan(scanId: string | null): void {
    this.state.scanId = scanId;
    this.emit();
  }

  selectRoi(roiId: string | null): void {
    this.state.roiId = roiId;
    this.emit();
  }

  setLastFoot(foot: "left" | "right"): void {
    this.state.lastFoot = foot;
    this.emit();
  }
}
