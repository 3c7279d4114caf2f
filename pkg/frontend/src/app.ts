/**
 * Composition root: the login gate, the top bar, and one mounted view at
 * a time. The token lives inside ApiClient; losing it (logout or an
 * expired session) always lands back on the login form.
 */

import { ApiClient, ApiError } from "./api.js";
import { clear, el } from "./dom.js";
import { MeasureView } from "./measureView.js";
import { RoiEditor } from "./roiEditor.js";
import { ScanView } from "./scanView.js";
import { ShareView } from "./shareView.js";
import { StateStore, View } from "./state.js";
import { TimelineView } from "./timelineView.js";

interface Destroyable {
  destroy?: () => void;
}

export class App {
  readonly state = new StateStore();

  private topbar: HTMLElement;
  private main: HTMLElement;
  private mounted: Destroyable | null = null;
  private loginMessage = "";

  constructor(
    private root: HTMLElement,
    private api: ApiClient,
  ) {
    this.topbar = el("header", { class: "topbar" });
    this.main = el("main", { class: "view" });
    root.append(this.topbar, this.main);

    this.api.onSessionExpired = () => {
      this.loginMessage = "session expired, sign in again";
      this.state.signOut();
    };
    this.state.subscribe(() => this.render());
    this.render();
  }

  private render(): void {
    const s = this.state.get();
    clear(this.topbar);
    if (this.mounted?.destroy) {
      this.mounted.destroy();
    }
    this.mounted = null;
    clear(this.main);

    if (!s.authenticated) {
      this.renderLogin();
      return;
    }
    this.renderTopbar();
    switch (s.view) {
      case "main":
        void this.renderMain();
        break;
      case "scan": {
        const view = new ScanView(this.main, this.api, this.state, s.patientId!);
        this.mounted = view;
        void view.load();
        break;
      }
      case "roi-edit": {
        const editor = new RoiEditor(this.main, this.api, this.state, s.patientId!, s.lastFoot);
        this.mounted = editor;
        void editor.load();
        break;
      }
      case "measure": {
        if (s.scanId === null) {
          this.main.append(el("p", { class: "status" }, ["Pick a scan first."]));
          break;
        }
        const view = new MeasureView(this.main, this.api, s.scanId);
        void view.load();
        break;
      }
      case "timeline": {
        if (s.roiId === null) {
          this.main.append(el("p", { class: "status" }, ["Pick a region first."]));
          break;
        }
        const view = new TimelineView(this.main, this.api, s.roiId);
        void view.load();
        break;
      }
      case "share": {
        if (s.roiId === null) {
          this.main.append(el("p", { class: "status" }, ["Pick a region first."]));
          break;
        }
        const view = new ShareView(this.main, this.api, s.patientId!, s.roiId);
        void view.load();
        break;
      }
    }
  }

  private renderLogin(): void {
    const user = el("input", { class: "login-user", placeholder: "user id" });
    const secret = el("input", {
      class: "login-secret",
      placeholder: "secret",
      type: "password",
    });
    const message = el("p", { class: "login-message" }, [this.loginMessage]);
    const button = el("button", { class: "login-submit" }, ["Sign in"]);
    button.addEventListener("click", () => {
      void (async () => {
        try {
          await this.api.login(user.value, secret.value);
          const session = await this.api.me();
          this.loginMessage = "";
          this.state.signIn(session.user_id, session.role, session.patient_id);
          if (session.patient_id !== null) {
            this.state.selectPatient(session.patient_id);
          }
        } catch (err) {
          message.textContent = err instanceof ApiError ? err.message : String(err);
        }
      })();
    });
    this.main.append(
      el("form", { class: "login-form" }, [user, secret, button, message]),
    );
  }

  private renderTopbar(): void {
    const s = this.state.get();
    const nav: [View, string][] = [
      ["main", "Overview"],
      ["scan", "New scan"],
      ["roi-edit", "Regions"],
      ["measure", "Measure"],
      ["timeline", "Timeline"],
      ["share", "Share"],
    ];
    for (const [view, label] of nav) {
      const button = el("button", { class: `nav-${view}` }, [label]);
      button.addEventListener("click", () => this.state.navigate(view));
      this.topbar.append(button);
    }
    const logout = el("button", { class: "logout" }, ["Sign out"]);
    logout.addEventListener("click", () => {
      this.api.logout();
      this.state.signOut();
    });
    this.topbar.append(el("span", { class: "whoami" }, [s.userId ?? ""]), logout);
  }

  private async renderMain(): Promise<void> {
    const s = this.state.get();
    if (s.role === "clinician" && s.patientId === null) {
      // clinicians open a record they were granted by its id
      const input = el("input", { class: "patient-input", placeholder: "patient id" });
      const open = el("button", { class: "open-patient" }, ["Open record"]);
      open.addEventListener("click", () => {
        if (input.value.trim()) {
          this.state.selectPatient(input.value.trim());
        }
      });
      this.main.append(el("div", { class: "patient-picker" }, [input, open]));
      return;
    }

    const scans = el("ul", { class: "scan-list" });
    const rois = el("ul", { class: "roi-list" });
    this.main.append(
      el("h2", {}, [`Record ${s.patientId}`]),
      el("h3", {}, ["Scans"]),
      scans,
      el("h3", {}, ["Regions"]),
      rois,
    );
    try {
      for (const record of await this.api.listScans(s.patientId!)) {
        const item = el("li", { class: "scan-item" }, [
          `${record.scan_id} (${record.foot})`,
        ]);
        item.addEventListener("click", () => this.state.selectScan(record.scan_id));
        scans.append(item);
      }
      for (const roi of await this.api.listRois(s.patientId!)) {
        if (roi.status === "deleted") {
          continue;
        }
        const item = el("li", { class: "roi-item", "data-status": roi.status }, [
          `${roi.label} [${roi.status}]`,
        ]);
        item.addEventListener("click", () => this.state.selectRoi(roi.id));
        rois.append(item);
      }
    } catch (err) {
      this.main.append(
        el("p", { class: "status" }, [err instanceof ApiError ? err.message : String(err)]),
      );
    }
  }
}

export function boot(): App {
  const root = document.getElementById("app");
  if (root === null) {
    throw new Error("missing #app container");
  }
  return new App(root, new ApiClient());
}

if (typeof document !== "undefined" && document.getElementById("app")) {
  boot();
}
